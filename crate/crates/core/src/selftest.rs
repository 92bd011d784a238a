//! Oracle comparisons shared by the `selftest` command and the test suites.
//! Every check returns its worst observed error so callers can apply their
//! own tolerance.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_tape, windowed_attention, AttentionParams, AttentionVars};
use crate::autodiff::gradcheck;
use crate::autodiff::{Tape, Var};
use crate::baselines::knn_indices;
use crate::cloud::QuantizedCloud;
use crate::error::{Error, Result};
use crate::morton;
use crate::nn::model::{forward, input_features};
use crate::nn::{Geometry, NetworkConfig, ParamStore, Session, Variant};
use crate::tensor::Mode;
use crate::octconv::{conv_tape, conv_table, depthwise_tape, octree_conv, ConvSpec};
use crate::octree::{build_octree, Octree};
use crate::partition::make_plan;
use crate::reference::{brute_force_knn, dense_conv3d, dense_window_attention, DenseGrid};
use crate::tensor::Tensor;

fn normal_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand_distr::{Distribution, Normal};
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| d.sample(rng))
}

/// Attention weights with std `1/√C` and random biases.
pub fn random_params(c: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<AttentionParams<f64>> {
    let mut p = AttentionParams::random(c, heads, 1.0 / (c as f64).sqrt(), rng.random())?;
    for b in [&mut p.b_q, &mut p.b_k, &mut p.b_v, &mut p.b_o] {
        *b = normal_tensor(&[c], 0.1, rng);
    }
    Ok(p)
}

fn fail(msg: String) -> Error {
    Error::Numeric(msg)
}

/// Random cloud of `n` points at `depth`, optionally clustered so that many
/// points share cells.
pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize, depth: u32) -> Result<QuantizedCloud> {
    let clustered = rng.random_bool(0.5);
    let center = [0; 3].map(|_: i32| rng.random_range(0.2..0.8));
    let pts = (0..n)
        .map(|_| {
            if clustered {
                center.map(|c| (c + rng.random_range(-0.15..0.15f64)).clamp(0.0, 0.999_999))
            } else {
                [0; 3].map(|_: i32| rng.random_range(0.0..1.0))
            }
        })
        .collect();
    QuantizedCloud::new(pts, depth)
}

/// Octree built from every cell of a `side³` grid.
pub fn full_grid(side: usize) -> Result<Octree> {
    let depth = side.trailing_zeros();
    let s = side as f64;
    let pts = (0..side.pow(3))
        .map(|i| [i / (side * side), (i / side) % side, i % side].map(|v| (v as f64 + 0.5) / s))
        .collect();
    build_octree(&QuantizedCloud::new(pts, depth)?)
}

/// Morton encode/decode bijection and parent consistency on random cells.
pub fn morton_roundtrip(samples: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..samples {
        let depth = rng.random_range(2..=morton::MAX_DEPTH);
        let max = (1u32 << depth) - 1;
        let c = [0; 3].map(|_: i32| rng.random_range(0..=max));
        let key = morton::encode(c[0], c[1], c[2], depth)?;
        if morton::decode(key)? != c.into() {
            return Err(fail(format!("decode(encode({c:?})) differs at depth {depth}")));
        }
        let parent = morton::parent_key(key)?;
        if morton::decode(parent)? != c.map(|v| v >> 1).into() {
            return Err(fail(format!("parent of {c:?} is not the halved cell")));
        }
    }
    Ok(())
}

/// Child contiguity, sorted unique keys per depth, and leaf count equal to
/// the number of distinct occupied cells.
pub fn octree_invariants(clouds: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in 0..clouds {
        let depth = rng.random_range(1..=10);
        let n = rng.random_range(1..=2000);
        let cloud = random_cloud(&mut rng, n, depth)?;
        let tree = build_octree(&cloud)?;
        let mut cells: Vec<[u32; 3]> = (0..n).map(|i| cloud.cell(i)).collect();
        cells.sort_unstable();
        cells.dedup();
        if tree.num_leaves() != cells.len() {
            return Err(fail(format!(
                "cloud {c}: {} leaves but {} distinct cells",
                tree.num_leaves(),
                cells.len()
            )));
        }
        for d in 0..=depth {
            let keys = tree.keys(d)?;
            if keys.windows(2).any(|w| w[0] >= w[1]) {
                return Err(fail(format!("cloud {c}: keys at depth {d} not strictly increasing")));
            }
            if d == depth {
                break;
            }
            let child_keys = tree.keys(d + 1)?;
            let parents = tree.parents(d + 1)?;
            let mut next = 0;
            for (i, &k) in keys.iter().enumerate() {
                let r = tree.children(d, i)?;
                if r.start != next || r.is_empty() {
                    return Err(fail(format!("cloud {c}: children of node {i} at depth {d} not contiguous")));
                }
                next = r.end;
                for j in r {
                    if child_keys[j] >> 3 != k || parents[j] as usize != i {
                        return Err(fail(format!("cloud {c}: child {j} at depth {} has wrong parent", d + 1)));
                    }
                }
            }
            if next != child_keys.len() {
                return Err(fail(format!("cloud {c}: children at depth {} not covered", d + 1)));
            }
        }
    }
    Ok(())
}

/// Largest difference between windowed attention and the dense masked oracle
/// over random instances, as `(32-bit run, 64-bit run)`.
pub fn attention_oracle(instances: usize, max_n: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut e32, mut e64) = (0.0f64, 0.0f64);
    for i in 0..instances {
        let n = rng.random_range(1..=max_n);
        let c = [8, 96][i % 2];
        let heads = if c == 8 { 2 } else { 6 };
        let k = [16, 32][rng.random_range(0..2)];
        let d = [1, 2, 4][rng.random_range(0..3)];
        let plan = make_plan(n, k, d)?;
        let params = random_params(c, heads, &mut rng)?;
        let x = normal_tensor(&[n, c], 1.0, &mut rng);
        let oracle = dense_window_attention(&x, &plan, &params);
        let y64 = windowed_attention(&x, &plan, &params)?;
        e64 = e64.max(y64.max_abs_diff(&oracle));
        let y32 = windowed_attention(&x.cast::<f32>(), &plan, &params.cast::<f32>())?;
        e32 = e32.max(y32.cast::<f64>().max_abs_diff(&oracle));
    }
    Ok((e32, e64))
}

/// Padding bound over a grid of `(N, K, D)`; returns the largest
/// `padded − N` seen relative to `K·D` (must stay below 1).
pub fn padding_bound(max_n: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for k in [1, 2, 3, 7, 16, 32] {
        for d in [1, 2, 3, 4, 8] {
            for n in 0..=max_n {
                let p = make_plan(n, k, d)?;
                if p.padded() % (k * d) != 0 {
                    return Err(fail(format!("padded count {} not a multiple of K·D", p.padded())));
                }
                worst = worst.max((p.padded() - n) as f64 / (k * d) as f64);
            }
        }
    }
    Ok(worst)
}

/// Change in real-token outputs when trailing tokens become padding: the
/// first `n` tokens of a sequence are attended with `N = n` and again as part
/// of a longer sequence whose extra tokens lie in windows of their own.
pub fn padding_invariance(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let k = [4, 16, 32][rng.random_range(0..3)];
        let d = [1, 2, 4][rng.random_range(0..3)];
        let kd = k * d;
        let blocks = rng.random_range(1..=4);
        let full = blocks * kd;
        let c = 8;
        let params = random_params(c, 2, &mut rng)?;
        let x = normal_tensor(&[full + kd, c], 1.0, &mut rng);
        let base = windowed_attention(&x, &make_plan(full + kd, k, d)?, &params)?;
        // Same windows for the first `full` tokens whatever follows them.
        for n in [full, full + 1, full + kd / 2] {
            let xs = Tensor::new(vec![n, c], x.data()[..n * c].to_vec())?;
            let y = windowed_attention(&xs, &make_plan(n, k, d)?, &params)?;
            for i in 0..full {
                for (a, b) in y.row(i).iter().zip(base.row(i)) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Every convolution variant on full grids compared with dense zero-padded
/// convolution; returns the largest difference.
pub fn conv_oracle(max_side: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut side = 4;
    while side <= max_side {
        let tree = full_grid(side)?;
        let depth = tree.depth();
        let (cin, cout) = (3, 5);
        for (kernel, stride) in [(3, 1), (3, 2), (2, 2)] {
            for depthwise in [false, true] {
                let spec = if depthwise {
                    ConvSpec::depthwise(kernel, stride, cin)?
                } else {
                    ConvSpec::new(kernel, stride, cin, cout)?
                };
                let x = normal_tensor(&[tree.num_nodes(depth)?, cin], 1.0, &mut rng);
                let w = normal_tensor(&spec.weight_shape(), 0.5, &mut rng);
                let y = octree_conv(&x, &tree, depth, &spec, &w)?;
                let mut grid = DenseGrid {
                    side,
                    channels: cin,
                    data: vec![0.0; side.pow(3) * cin],
                };
                for i in 0..x.rows() {
                    let [a, b, c] = tree.coords(depth, i)?.map(|v| v as usize);
                    let cell = (a * side + b) * side + c;
                    grid.data[cell * cin..(cell + 1) * cin].copy_from_slice(x.row(i));
                }
                let dense = dense_conv3d(&grid, w.data(), kernel, stride, cout, depthwise);
                let od = spec.output_depth(depth)?;
                for i in 0..y.rows() {
                    let [a, b, c] = tree.coords(od, i)?.map(|v| v as usize);
                    let cell = (a * dense.side + b) * dense.side + c;
                    let want = &dense.data[cell * dense.channels..(cell + 1) * dense.channels];
                    for (p, q) in y.row(i).iter().zip(want) {
                        worst = worst.max((p - q).abs());
                    }
                }
            }
        }
        side *= 2;
    }
    Ok(worst)
}

/// Exact kNN against the all-pairs oracle on random clouds; returns the
/// number of mismatching neighbor lists.
pub fn knn_oracle(clouds: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..clouds {
        let depth = rng.random_range(3..=8);
        let n = rng.random_range(20..=400);
        let tree = build_octree(&random_cloud(&mut rng, n, depth)?)?;
        let m = tree.num_leaves();
        let k = rng.random_range(1..=m.min(16));
        let got = knn_indices(&tree, depth, k)?;
        let pts: Vec<[u32; 3]> = (0..m).map(|i| tree.coords(depth, i)).collect::<Result<_>>()?;
        let keys = tree.keys(depth)?;
        for q in 0..m {
            let want = brute_force_knn(&pts, keys, q, k);
            if got[q * k..(q + 1) * k].iter().map(|&v| v as usize).ne(want) {
                bad += 1;
            }
        }
    }
    Ok(bad)
}

fn weighted_sum(tape: &Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y);
    let w = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    tape.dot_const(y, w)
}

type GradFn = Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>>;

/// Finite-difference checks of every differentiable operation, each reduced
/// to a scalar by a fixed random weighting. Returns `(name, relative error)`.
pub fn gradcheck_ops(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize]| normal_tensor(shape, 1.0, &mut rng);
    let grid = Arc::new(full_grid(4)?);
    let dw_table = conv_table(&grid, 2, 3, 1)?;
    let down_table = conv_table(&grid, 2, 2, 2)?;
    let plan = Arc::new(make_plan(13, 4, 2)?);
    let idx: Arc<[u32]> = Arc::from(vec![2u32, 0, 4, 4, 1]);
    let labels: Arc<[usize]> = Arc::from(vec![0usize, 2, 1, usize::MAX, 2]);
    let cases: Vec<(&'static str, Vec<Tensor<f64>>, GradFn)> = vec![
        ("matmul", vec![t(&[4, 3]), t(&[3, 5])], Box::new(|tp, v| tp.matmul(v[0], v[1]))),
        ("add", vec![t(&[3, 4]), t(&[3, 4])], Box::new(|tp, v| tp.add(v[0], v[1]))),
        ("mul", vec![t(&[3, 4]), t(&[3, 4])], Box::new(|tp, v| tp.mul(v[0], v[1]))),
        ("scale", vec![t(&[3, 4])], Box::new(|tp, v| tp.scale(v[0], 0.7))),
        ("add_bias", vec![t(&[3, 4]), t(&[4])], Box::new(|tp, v| tp.add_bias(v[0], v[1]))),
        ("linear", vec![t(&[5, 3]), t(&[3, 4]), t(&[4])], Box::new(|tp, v| tp.linear(v[0], v[1], Some(v[2])))),
        ("relu", vec![t(&[4, 5])], Box::new(|tp, v| tp.relu(v[0]))),
        ("gelu", vec![t(&[4, 5])], Box::new(|tp, v| tp.gelu(v[0]))),
        ("softmax", vec![t(&[4, 5])], Box::new(|tp, v| tp.softmax(v[0], 1))),
        ("layer_norm", vec![t(&[4, 6]), t(&[6]), t(&[6])], Box::new(|tp, v| tp.layer_norm(v[0], v[1], v[2], 1e-5))),
        (
            "batch_norm_train",
            vec![t(&[7, 3]), t(&[3]), t(&[3])],
            Box::new(|tp, v| Ok(tp.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)),
        ),
        (
            "batch_norm_eval",
            vec![t(&[5, 3]), t(&[3]), t(&[3])],
            Box::new(|tp, v| {
                let mean = Tensor::new(vec![3], vec![0.1, -0.2, 0.3])?;
                let var = Tensor::new(vec![3], vec![1.5, 0.5, 2.0])?;
                tp.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)
            }),
        ),
        ("gather_rows", vec![t(&[5, 3])], {
            let idx = Arc::clone(&idx);
            Box::new(move |tp, v| tp.gather_rows(v[0], Arc::clone(&idx)))
        }),
        ("reshape", vec![t(&[4, 6])], Box::new(|tp, v| tp.reshape(v[0], &[8, 3]))),
        ("transpose", vec![t(&[4, 6])], Box::new(|tp, v| tp.transpose(v[0]))),
        ("sum", vec![t(&[4, 6])], Box::new(|tp, v| tp.sum(v[0]))),
        ("mean_rows", vec![t(&[4, 6])], Box::new(|tp, v| tp.mean_rows(v[0]))),
        ("cross_entropy", vec![t(&[5, 3])], {
            let labels = Arc::clone(&labels);
            Box::new(move |tp, v| tp.cross_entropy(v[0], Arc::clone(&labels), usize::MAX))
        }),
        ("depthwise_conv", vec![t(&[64, 3]), t(&[27, 3])], {
            let table = dw_table.clone();
            Box::new(move |tp, v| depthwise_tape(tp, v[0], &table, v[1]))
        }),
        ("octree_conv", vec![t(&[64, 3]), t(&[8, 3, 2])], {
            let table = down_table.clone();
            Box::new(move |tp, v| conv_tape(tp, v[0], &table, v[1]))
        }),
        ("windowed_attention", {
            let mut inputs = vec![t(&[13, 4])];
            for _ in 0..4 {
                inputs.push(t(&[4, 4]).map(|v| v * 0.5));
                inputs.push(t(&[4]));
            }
            inputs
        }, {
            let plan = Arc::clone(&plan);
            Box::new(move |tp, v| {
                let vars = AttentionVars {
                    w_q: v[1],
                    b_q: v[2],
                    w_k: v[3],
                    b_k: v[4],
                    w_v: v[5],
                    b_v: v[6],
                    w_o: v[7],
                    b_o: v[8],
                };
                attention_tape(tp, v[0], &vars, Arc::clone(&plan), 2)
            })
        }),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (i, (name, inputs, f)) in cases.into_iter().enumerate() {
        let probe_seed = seed ^ (i as u64 + 1);
        let scalar = move |tp: &Tape<f64>, v: &[Var]| -> Result<Var> {
            let y = f(tp, v)?;
            if tp.shape(y).is_empty() {
                Ok(y)
            } else {
                weighted_sum(tp, y, probe_seed)
            }
        };
        let report = gradcheck::check(&inputs, scalar, 1e-5, 24)?;
        out.push((name, report.max_rel_error()));
    }
    Ok(out)
}

/// Smallest network used for end-to-end gradient checks.
pub fn micro_config() -> NetworkConfig {
    NetworkConfig {
        variant: Variant::Custom,
        channels: 8,
        block_counts: [1, 0, 0, 0],
        head_divisor: 4,
        point_number: 8,
        dilation: 2,
        octree_depth: 7,
        use_position: true,
        use_color: false,
        use_normal: false,
        num_classes: 3,
        fpn_channels: 8,
        head_hidden: 8,
        ..NetworkConfig::base()
    }
}

/// Finite-difference check of the micro network's loss with respect to the
/// input features and every parameter, in train mode at 64-bit over
/// `points` random points. Returns the largest relative error.
pub fn micro_network_gradcheck(points: usize, seed: u64, probes: usize) -> Result<f64> {
    let cfg = micro_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..points).map(|_| [0; 3].map(|_: i32| rng.random_range(0.05..0.95))).collect();
    let cloud = QuantizedCloud::new(pts, cfg.octree_depth)?;
    let geo = Geometry::new(build_octree(&cloud)?);
    let features: Tensor<f64> = input_features(&geo, &cloud, &cfg)?;
    let mut store = ParamStore::<f64>::init(&cfg, seed)?;
    // A generic point with gradients of order one: fan-in scaled weights,
    // jittered norm gains and biases.
    for (name, t) in store.params_mut() {
        let shape = t.shape().to_vec();
        *t = if name.ends_with(".bias") {
            normal_tensor(&shape, 0.1, &mut rng)
        } else if shape.len() == 1 {
            normal_tensor(&shape, 0.1, &mut rng).map(|v| 1.0 + v)
        } else {
            let fan_in = shape[..shape.len() - 1].iter().product::<usize>() as f64;
            normal_tensor(&shape, 1.0 / fan_in.sqrt(), &mut rng)
        };
    }
    let labels: Arc<[usize]> = (0..points).map(|_| rng.random_range(0..cfg.num_classes)).collect();
    let names: Vec<String> = store.params().iter().map(|p| p.0.clone()).collect();
    let mut inputs = vec![features];
    inputs.extend(store.params().iter().map(|p| p.1.clone()));
    let f = |tape: &Tape<f64>, vars: &[Var]| -> Result<Var> {
        let s = Session::new(tape, &store, Mode::Train, false);
        for (name, &v) in names.iter().zip(&vars[1..]) {
            s.bind(name, v);
        }
        let logits = forward(&s, &geo, vars[0], &cfg)?;
        tape.cross_entropy(logits, Arc::clone(&labels), usize::MAX)
    };
    // Small step: fewer ReLU kinks fall inside the difference interval.
    Ok(gradcheck::check(&inputs, f, 1e-6, probes)?.max_rel_error())
}

/// One check line of the self-test.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn record(results: &mut Vec<CheckResult>, name: &str, outcome: Result<(bool, String)>) {
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, e.to_string()));
    results.push(CheckResult {
        name: name.to_string(),
        passed,
        detail,
    });
}

/// The quick oracle suite run by the `selftest` command.
pub fn run_selftest() -> Vec<CheckResult> {
    let mut r = Vec::new();
    record(&mut r, "morton_roundtrip", morton_roundtrip(2000, 1).map(|_| (true, "2000 cells".into())));
    record(&mut r, "octree_invariants", octree_invariants(20, 2).map(|_| (true, "20 clouds".into())));
    record(
        &mut r,
        "partition_golden",
        (|| {
            let c = make_plan(28, 7, 1)?;
            let d = make_plan(28, 7, 2)?;
            let ok = c.windows() == 4
                && c.layout() == (0..28).collect::<Vec<_>>()
                && d.windows() == 4
                && (0..7).map(|s| d.position(0, s)).eq((0..14).step_by(2))
                && (0..7).map(|s| d.position(3, s)).eq((15..28).step_by(2));
            Ok((ok, "n=28 k=7 d=1,2".into()))
        })(),
    );
    record(&mut r, "padding_bound", padding_bound(300).map(|w| (w < 1.0, format!("max (padded-N)/(K*D) = {w:.4}"))));
    record(
        &mut r,
        "padding_invariance",
        padding_invariance(20, 3).map(|e| (e < 1e-6, format!("max diff {e:.3e}"))),
    );
    record(
        &mut r,
        "attention_oracle",
        attention_oracle(20, 256, 4).map(|(a, b)| (a < 1e-5 && b < 1e-10, format!("f32 {a:.3e} f64 {b:.3e}"))),
    );
    record(&mut r, "conv_oracle", conv_oracle(8, 5).map(|e| (e < 1e-10, format!("max diff {e:.3e}"))));
    record(&mut r, "knn_oracle", knn_oracle(5, 6).map(|b| (b == 0, format!("{b} mismatches"))));
    match gradcheck_ops(7) {
        Ok(list) => {
            for (name, e) in list {
                record(&mut r, &format!("gradcheck_{name}"), Ok((e < 1e-4, format!("rel err {e:.3e}"))));
            }
        }
        Err(e) => record(&mut r, "gradcheck", Err(e)),
    }
    record(
        &mut r,
        "gradcheck_micro_network",
        micro_network_gradcheck(50, 8, 4).map(|e| (e < 1e-4, format!("rel err {e:.3e}"))),
    );
    r
}

/// Writes one line per check and returns whether all passed.
pub fn report<W: Write>(mut w: W, results: &[CheckResult]) -> Result<bool> {
    for c in results {
        writeln!(w, "{} {} ({})", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail)?;
    }
    let passed = results.iter().filter(|c| c.passed).count();
    writeln!(w, "{passed}/{} checks passed", results.len())?;
    Ok(passed == results.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let results = run_selftest();
        let mut out = Vec::new();
        let ok = report(&mut out, &results).unwrap();
        assert!(ok, "{}", String::from_utf8_lossy(&out));
    }
}
