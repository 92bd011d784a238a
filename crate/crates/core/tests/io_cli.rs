use std::path::Path;
use std::process::{Command, Output};

use octformer::cloud::QuantizedCloud;
use octformer::io::{augment, normalize, read_ply, read_xyz, write_ply, write_xyz, AugmentConfig, RawCloud};
use octformer::Error;

fn sample_raw() -> RawCloud {
    RawCloud {
        positions: vec![[0.125, -3.5, 2.0], [1.0e-3, 7.25, -0.3333333], [4.0, 0.0, 1.5]],
        colors: Some(vec![[0.1, 0.2, 0.3], [1.0, 0.0, 0.5], [0.25, 0.75, 0.9]]),
        normals: Some(vec![[0.0, 0.0, 1.0], [0.6, 0.8, 0.0], [1.0, 0.0, 0.0]]),
    }
}

fn close(a: &[[f64; 3]], b: &[[f64; 3]]) -> bool {
    a.len() == b.len() && a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| (x - y).abs() < 1e-6)
}

#[test]
fn xyz_round_trip() {
    let raw = sample_raw();
    let mut buf = Vec::new();
    write_xyz(&mut buf, &raw).unwrap();
    let back = read_xyz(buf.as_slice()).unwrap();
    assert!(close(&back.positions, &raw.positions));
    assert!(close(back.colors.as_ref().unwrap(), raw.colors.as_ref().unwrap()));
    assert!(close(back.normals.as_ref().unwrap(), raw.normals.as_ref().unwrap()));
}

#[test]
fn ply_round_trip() {
    let raw = sample_raw();
    let mut buf = Vec::new();
    write_ply(&mut buf, &raw).unwrap();
    let back = read_ply(buf.as_slice()).unwrap();
    assert!(close(&back.positions, &raw.positions));
    assert!(close(back.colors.as_ref().unwrap(), raw.colors.as_ref().unwrap()));
}

#[test]
fn three_line_file() {
    let c = read_xyz("1 2 3\n4 5 6\n7 8 9\n".as_bytes()).unwrap();
    assert_eq!(c.positions.len(), 3);
    assert!(c.colors.is_none() && c.normals.is_none());
    let (q, _) = normalize(&c, 6, None).unwrap();
    assert_eq!(q.len(), 3);
}

#[test]
fn malformed_files() {
    assert!(matches!(read_xyz("1 2\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
    assert!(matches!(read_xyz("1 2 3\n1 2 3 4 5 6\n".as_bytes()), Err(Error::Parse { line: 2, .. })));
    assert!(read_ply("ply\nformat binary_little_endian 1.0\nend_header\n".as_bytes()).is_err());
    assert!(read_ply("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nend_header\n1\n2\n".as_bytes()).is_err());
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

fn small_cloud() -> QuantizedCloud {
    let pts = vec![[0.4, 0.5, 0.5], [0.55, 0.45, 0.6], [0.5, 0.62, 0.38], [0.47, 0.52, 0.5]];
    let normals = vec![[1.0, 0.0, 0.0]; 4];
    QuantizedCloud::new(pts, 6).unwrap().with_normals(normals).unwrap()
}

#[test]
fn identity_augmentation_is_a_no_op() {
    let c = small_cloud();
    let (a, kept) = augment(&c, &AugmentConfig::identity(), 3).unwrap();
    assert_eq!(a.positions(), c.positions());
    assert_eq!(kept, vec![0, 1, 2, 3]);
}

#[test]
fn scaling_keeps_distance_ratios() {
    let c = small_cloud();
    let ops = AugmentConfig {
        scale: [0.8, 1.2],
        rotation_deg: [-180.0, 180.0],
        translation: [0.0, 0.0],
    };
    let (a, kept) = augment(&c, &ops, 11).unwrap();
    assert_eq!(kept.len(), 4);
    let p = c.positions();
    let q = a.positions();
    let r0 = dist(q[0], q[1]) / dist(p[0], p[1]);
    for (i, j) in [(0, 2), (1, 3), (2, 3)] {
        assert!((dist(q[i], q[j]) / dist(p[i], p[j]) - r0).abs() < 1e-9);
    }
    let n = a.normals().unwrap()[0];
    assert!((n[0].hypot(n[1]) - 1.0).abs() < 1e-12 && n[2] == 0.0);
    let (b, _) = augment(&c, &ops, 11).unwrap();
    assert_eq!(a.positions(), b.positions());
}

#[test]
fn augmentation_that_empties_the_cloud_fails() {
    let c = small_cloud();
    let ops = AugmentConfig {
        translation: [2.0, 2.0],
        ..AugmentConfig::identity()
    };
    assert!(matches!(augment(&c, &ops, 0), Err(Error::EmptyInput(_))));
    let bad = AugmentConfig {
        scale: [1.2, 0.8],
        ..AugmentConfig::identity()
    };
    assert!(augment(&c, &bad, 0).is_err());
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_octformer"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("OCTFORMER_THREADS").output().unwrap()
}

fn write_sphere(path: &Path, n: usize) {
    let mut text = String::new();
    for i in 0..n {
        let t = i as f64 * 2.399963;
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - z * z).sqrt();
        text.push_str(&format!("{} {} {} 0.5 0.5 0.5 {} {} {}\n", r * t.cos(), r * t.sin(), z, r * t.cos(), r * t.sin(), z));
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn cli_partition_matches_golden() {
    let out = run(&["partition", "--n", "28", "--k", "7", "--d", "1"]);
    assert!(out.status.success());
    let golden = std::fs::read(format!("{}/tests/golden/partition_n28_k7_d1.csv", env!("CARGO_MANIFEST_DIR"))).unwrap();
    assert_eq!(out.stdout, golden);
}

#[test]
fn cli_usage_errors_exit_one() {
    let out = run(&["partition", "--n", "28", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn cli_data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.xyz");
    let dump = dir.path().join("o.bin");
    let out = run(&["build-octree", missing.to_str().unwrap(), "--depth", "5", "--dump", dump.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let bad = dir.path().join("bad.xyz");
    std::fs::write(&bad, "1 2 3\n1 nan 3\n").unwrap();
    let out = run(&["build-octree", bad.to_str().unwrap(), "--depth", "5", "--dump", dump.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn cli_selftest_passes() {
    let out = run(&["selftest"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn cli_build_octree_and_attend() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("s.xyz");
    write_sphere(&input, 2000);
    let dump = dir.path().join("o.bin");
    let out = run(&["build-octree", input.to_str().unwrap(), "--depth", "7", "--dump", dump.to_str().unwrap()]);
    assert!(out.status.success());
    let levels = octformer::octree::read_dump(std::fs::File::open(&dump).unwrap()).unwrap();
    assert_eq!(levels.len(), 7);
    let args = ["attend", input.to_str().unwrap(), "--k", "16", "--d", "2", "--channels", "32", "--seed", "4"];
    let a = run(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert!(String::from_utf8_lossy(&a.stdout).contains("checksum"));
    let one = bin().args(args).env("OCTFORMER_THREADS", "1").output().unwrap();
    assert_eq!(a.stdout, one.stdout);
}

#[test]
fn cli_train_then_segment() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        format!(
            r#"{{"seed": 2, "dataset": {{"clouds": 2, "points_per_part": 200}},
               "train": {{"epochs": 2, "batch_size": 2}}, "output": {{"checkpoint": {:?}}}}}"#,
            ckpt.to_str().unwrap()
        ),
    )
    .unwrap();
    let a = run(&["train-toy", "--config", config.to_str().unwrap()]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = run(&["train-toy", "--config", config.to_str().unwrap()]);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(String::from_utf8_lossy(&a.stdout).lines().count(), 3);

    let input = dir.path().join("s.xyz");
    write_sphere(&input, 777);
    let out = run(&["segment", input.to_str().unwrap(), "--ckpt", ckpt.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 777);
    assert!(text.lines().all(|l| l == "0" || l == "1"));
}

#[test]
fn cli_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(&config, r#"{"train": {"epochs": 1, "lr_decay": 2}}"#).unwrap();
    assert_eq!(run(&["train-toy", "--config", config.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn cli_bench_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bench.json");
    let csv = dir.path().join("t.csv");
    std::fs::write(
        &config,
        r#"{"seed": 5, "bench": {"sizes": [1, 400], "variants": ["octree", "cubic", "knn", "global"],
            "trials": 1, "warmup": 0, "channels": 8, "heads": 2, "neighbors": 1}}"#,
    )
    .unwrap();
    let args = ["bench", "--config", config.to_str().unwrap(), "--csv", csv.to_str().unwrap()];
    let a = run(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = run(&args);
    assert_eq!(a.stdout, b.stdout);
    let report = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "variant,n,median_s,iqr_s,trials");
    assert_eq!(lines.len(), 9);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 5);
        let t: f64 = f[2].parse().unwrap();
        assert!(t.is_finite() && t >= 0.0);
    }
}
