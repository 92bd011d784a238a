use std::sync::Arc;

use octformer::attention::{windowed_attention, AttentionParams};
use octformer::baselines::{
    cubic_attention, cubic_partition, global_attention, knn_indices, knn_sliding_attention, GLOBAL_ATTENTION_LIMIT,
};
use octformer::cloud::QuantizedCloud;
use octformer::octree::build_octree;
use octformer::partition::make_plan;
use octformer::reference::dense_masked_attention;
use octformer::selftest::{self, random_params};
use octformer::tensor::Tensor;
use octformer::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn input(n: usize, c: usize, seed: u64) -> Tensor<f64> {
    Tensor::from_fn(&[n, c], |i| ((i as f64 + seed as f64) * 0.618).sin())
}

fn params(c: usize, heads: usize, seed: u64) -> AttentionParams<f64> {
    random_params(c, heads, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn matches_dense_oracle() {
    let (e32, e64) = selftest::attention_oracle(12, 200, 5).unwrap();
    assert!(e64 < 1e-10, "{e64}");
    assert!(e32 < 1e-5, "{e32}");
}

#[test]
fn real_outputs_ignore_padding() {
    assert!(selftest::padding_invariance(10, 8).unwrap() < 1e-6);
}

#[test]
fn one_window_is_global_attention() {
    let x = input(20, 8, 1);
    let p = params(8, 2, 2);
    let a = windowed_attention(&x, &make_plan(20, 32, 1).unwrap(), &p).unwrap();
    let g = global_attention(&x, &p).unwrap();
    assert!(a.max_abs_diff(&g) < 1e-12);
    let dense = dense_masked_attention(&x, &p, |_, _| true);
    assert!(g.max_abs_diff(&dense) < 1e-12);
}

#[test]
fn singleton_windows_reduce_to_value_path() {
    let x = input(5, 4, 3);
    let p = params(4, 1, 4);
    let y = windowed_attention(&x, &make_plan(5, 1, 1).unwrap(), &p).unwrap();
    let v = x.clone();
    for i in 0..5 {
        for o in 0..4 {
            let val: Vec<f64> = (0..4)
                .map(|a| p.b_v.data()[a] + (0..4).map(|b| v.row(i)[b] * p.w_v.data()[b * 4 + a]).sum::<f64>())
                .collect();
            let want = p.b_o.data()[o] + (0..4).map(|a| val[a] * p.w_o.data()[a * 4 + o]).sum::<f64>();
            assert!((y.row(i)[o] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn rejects_non_finite_and_bad_shapes() {
    let p = params(4, 2, 1);
    let mut x = input(6, 4, 0);
    x.data_mut()[3] = f64::NAN;
    let plan = make_plan(6, 4, 1).unwrap();
    assert!(matches!(windowed_attention(&x, &plan, &p), Err(Error::Numeric(_))));
    assert!(windowed_attention(&input(6, 8, 0), &plan, &p).is_err());
    assert!(AttentionParams::<f64>::random(6, 4, 0.1, 0).is_err());
}

fn cloud(n: usize, depth: u32, seed: u64) -> octformer::octree::Octree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_octree(&selftest::random_cloud(&mut rng, n, depth).unwrap()).unwrap()
}

#[test]
fn knn_with_all_tokens_is_global() {
    let tree = cloud(60, 6, 3);
    let n = tree.num_leaves();
    let x = input(n, 8, 2);
    let p = params(8, 2, 9);
    let a = knn_sliding_attention(&x, &tree, 6, n, &p).unwrap();
    let g = global_attention(&x, &p).unwrap();
    assert!(a.max_abs_diff(&g) < 1e-12);
}

#[test]
fn knn_single_neighbor_is_self() {
    let tree = cloud(40, 6, 4);
    let nbrs = knn_indices(&tree, 6, 1).unwrap();
    assert!(nbrs.iter().enumerate().all(|(i, &j)| i == j as usize));
    let n = tree.num_leaves();
    let x = input(n, 4, 5);
    let p = params(4, 2, 6);
    let a = knn_sliding_attention(&x, &tree, 6, 1, &p).unwrap();
    let b = windowed_attention(&x, &make_plan(n, 1, 1).unwrap(), &p).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn knn_matches_all_pairs() {
    assert_eq!(selftest::knn_oracle(6, 12).unwrap(), 0);
}

#[test]
fn knn_large_cloud_uses_key_search() {
    // Above the brute-force threshold the sorted-key expansion is used.
    let tree = cloud(6000, 9, 13);
    let n = tree.num_leaves();
    assert!(n > octformer::baselines::KNN_BRUTE_FORCE_BELOW);
    let k = 8;
    let got = knn_indices(&tree, 9, k).unwrap();
    let pts: Vec<[u32; 3]> = (0..n).map(|i| tree.coords(9, i).unwrap()).collect();
    for q in (0..n).step_by(97) {
        let want = octformer::reference::brute_force_knn(&pts, tree.keys(9).unwrap(), q, k);
        assert_eq!(got[q * k..(q + 1) * k].iter().map(|&v| v as usize).collect::<Vec<_>>(), want);
    }
}

#[test]
fn cubes_cover_every_node_once() {
    let tree = cloud(500, 7, 8);
    let part = cubic_partition(&tree, 7, 4).unwrap();
    let mut seen = vec![0; tree.num_leaves()];
    for (_, members) in &part.buckets {
        for &m in members {
            seen[m as usize] += 1;
        }
    }
    assert!(seen.iter().all(|&c| c == 1));
    assert!(part.buckets.windows(2).all(|w| w[0].0 < w[1].0));
    assert_eq!(part, cubic_partition(&tree, 7, 4).unwrap());
    assert!(part.max_count() as f64 >= part.mean_count());
}

#[test]
fn cube_attention_matches_masked_oracle() {
    let tree = cloud(150, 6, 10);
    let part = cubic_partition(&tree, 6, 8).unwrap();
    let n = tree.num_leaves();
    let mut bucket = vec![0; n];
    for (b, (_, members)) in part.buckets.iter().enumerate() {
        for &m in members {
            bucket[m as usize] = b;
        }
    }
    let x = input(n, 8, 4);
    let p = params(8, 4, 3);
    let y = cubic_attention(&x, &part, &p).unwrap();
    let want = dense_masked_attention(&x, &p, |i, j| bucket[i] == bucket[j]);
    assert!(y.max_abs_diff(&want) < 1e-10);
}

#[test]
fn global_attention_has_a_size_guard() {
    let p = params(4, 1, 0);
    let x = Tensor::<f64>::zeros(&[GLOBAL_ATTENTION_LIMIT + 1, 4]);
    assert!(matches!(global_attention(&x, &p), Err(Error::Resource(_))));
}

#[test]
fn f32_and_f64_agree() {
    let x = input(300, 16, 7);
    let p = params(16, 4, 7);
    let plan = Arc::new(make_plan(300, 32, 2).unwrap());
    let a = windowed_attention(&x, &plan, &p).unwrap();
    let b = windowed_attention(&x.cast::<f32>(), &plan, &p.cast::<f32>()).unwrap();
    assert!(b.max_abs_diff(&a) < 1e-5);
}

#[test]
fn cloud_points_must_lie_in_unit_cube() {
    assert!(QuantizedCloud::new(vec![[1.0, 0.0, 0.0]], 3).is_err());
}
