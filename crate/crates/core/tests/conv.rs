use octformer::autodiff::Tape;
use octformer::cloud::QuantizedCloud;
use octformer::nn::data::toy_config;
use octformer::nn::model::{embedding, input_features};
use octformer::nn::{Geometry, ParamStore, Session};
use octformer::octconv::{conv_table, octree_conv, ConvSpec, EMBED_KERNELS, EMBED_STRIDES};
use octformer::octree::build_octree;
use octformer::selftest::{self, full_grid};
use octformer::tensor::{Mode, Tensor, ABSENT};
use octformer::Error;

#[test]
fn matches_dense_convolution_on_full_grids() {
    assert!(selftest::conv_oracle(8, 3).unwrap() < 1e-10);
}

#[test]
fn stride_two_tables_point_at_children() {
    let tree = full_grid(4).unwrap();
    let t = conv_table(&tree, 2, 2, 2).unwrap();
    assert_eq!((t.rows, t.taps), (8, 8));
    for i in 0..8 {
        let kids = tree.children(1, i).unwrap();
        assert_eq!(t.row(i).iter().map(|&v| v as usize).collect::<Vec<_>>(), kids.collect::<Vec<_>>());
    }
}

#[test]
fn sparse_neighbors_are_absent() {
    let cloud = QuantizedCloud::new(vec![[0.1, 0.1, 0.1], [0.9, 0.9, 0.9]], 3).unwrap();
    let tree = build_octree(&cloud).unwrap();
    let t = conv_table(&tree, 3, 3, 1).unwrap();
    for i in 0..2 {
        let row = t.row(i);
        assert_eq!(row.iter().filter(|&&v| v != ABSENT).count(), 1);
        assert_eq!(row[13], i as u32);
    }
    let spec = ConvSpec::new(3, 1, 1, 1).unwrap();
    let w = Tensor::<f64>::full(&spec.weight_shape(), 1.0);
    let y = octree_conv(&Tensor::full(&[2, 1], 2.0), &tree, 3, &spec, &w).unwrap();
    assert_eq!(y.data(), &[2.0, 2.0]);
}

#[test]
fn spec_validation() {
    assert!(ConvSpec::new(2, 1, 3, 3).is_err());
    assert!(ConvSpec::new(3, 3, 3, 3).is_err());
    assert_eq!(ConvSpec::new(3, 2, 4, 6).unwrap().weight_shape(), vec![27, 4, 6]);
    assert_eq!(ConvSpec::depthwise(3, 1, 5).unwrap().weight_shape(), vec![27, 5]);
    let tree = full_grid(4).unwrap();
    assert!(matches!(conv_table(&tree, 3, 3, 1), Err(Error::Range(_))));
    assert!(matches!(conv_table(&tree, 0, 3, 1), Err(Error::Range(_))));
}

#[test]
fn embedding_reaches_quarter_resolution() {
    assert_eq!(EMBED_KERNELS, [3, 2, 3, 2, 3]);
    assert_eq!(EMBED_STRIDES, [1, 2, 1, 2, 1]);
    let cfg = toy_config();
    let pts: Vec<[f64; 3]> = (0..300).map(|i| [i as f64 / 300.0, 0.5, (i % 7) as f64 / 7.0]).collect();
    let normals = vec![[0.0, 1.0, 0.0]; pts.len()];
    let cloud = QuantizedCloud::new(pts, 7).unwrap().with_normals(normals).unwrap();
    let geo = Geometry::new(build_octree(&cloud).unwrap());
    let store = ParamStore::<f32>::init(&cfg, 0).unwrap();
    let tape = Tape::new();
    let s = Session::new(&tape, &store, Mode::Eval, false);
    let x = tape.constant(input_features(&geo, &cloud, &cfg).unwrap());
    let y = embedding(&s, &geo, x).unwrap();
    assert_eq!(tape.shape(y), vec![geo.octree.num_nodes(5).unwrap(), cfg.channels]);
}
