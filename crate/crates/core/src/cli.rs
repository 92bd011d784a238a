//! Command-line driver.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::autodiff::Tape;
use crate::bench::{linear_fit, run_bench, write_bench_csv, BenchVariant};
use crate::error::{Error, Result};
use crate::io::load_point_cloud;
use crate::nn::model::{block, embedding, input_features};
use crate::nn::train::argmax;
use crate::nn::{load_checkpoint, predict_logits, save_checkpoint, train_toy, Geometry, NetworkConfig, ParamStore, Session};
use crate::octree::build_octree;
use crate::partition::make_plan;
use crate::runconfig::RunConfig;
use crate::selftest::{report, run_selftest};
use crate::tensor::Mode;
use crate::{nn, par};

#[derive(Debug, Parser)]
#[command(name = "octformer", version, about = "Octree transformer for point clouds")]
pub struct Cli {
    /// Worker threads for the parallel kernels.
    #[arg(long, global = true, env = "OCTFORMER_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an octree from a point file and write its key dump.
    BuildOctree {
        input: PathBuf,
        #[arg(long)]
        depth: u32,
        #[arg(long)]
        dump: PathBuf,
        /// Voxel edge in file units; defaults to fitting the bounding box.
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Print the window layout of `n` tokens as CSV.
    Partition {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        d: usize,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the embedding and one transformer block with seeded weights.
    Attend {
        input: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 8)]
        depth: u32,
        #[arg(long, default_value_t = 96)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Train on a synthetic dataset described by a run configuration.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write one predicted label per input point.
    Segment {
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Time the attention variants.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Timing CSV; overrides the configured path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the oracle equivalence suite.
    Selftest,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn build_octree_cmd(input: &Path, depth: u32, dump: &Path, scale: Option<f64>, out: &mut dyn Write) -> Result<()> {
    let cloud = load_point_cloud(input, depth, scale)?;
    let tree = build_octree(&cloud)?;
    let mut w = create(dump)?;
    tree.write_dump(&mut w)?;
    w.flush()?;
    writeln!(out, "points {}", cloud.len())?;
    for d in 1..=depth {
        writeln!(out, "depth {d} nodes {}", tree.num_nodes(d)?)?;
    }
    Ok(())
}

fn partition_cmd(n: usize, k: usize, d: usize, csv: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let plan = make_plan(n, k, d)?;
    match csv {
        Some(p) => {
            let mut w = create(p)?;
            plan.write_csv(&mut w)?;
            w.flush()?;
            writeln!(out, "windows {} padded {}", plan.windows(), plan.padded())?;
        }
        None => plan.write_csv(out)?,
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn attend_cmd(
    input: &Path,
    k: usize,
    d: usize,
    depth: u32,
    channels: usize,
    seed: u64,
    scale: Option<f64>,
    out: &mut dyn Write,
) -> Result<()> {
    let cfg = NetworkConfig {
        channels,
        point_number: k,
        dilation: d,
        octree_depth: depth,
        block_counts: [1, 0, 0, 0],
        ..NetworkConfig::base()
    };
    cfg.validate()?;
    let cloud = load_point_cloud(input, depth, scale)?;
    let geo = Geometry::new(build_octree(&cloud)?);
    let store = ParamStore::<f32>::init(&cfg, seed)?;
    let tape = Tape::new();
    let s = Session::new(&tape, &store, Mode::Eval, false);
    let x = tape.constant(input_features::<f32>(&geo, &cloud, &cfg)?);
    let e = embedding(&s, &geo, x)?;
    let y = block(&s, &geo, "stages.0.blocks.0", e, depth - 2, d, cfg.stage_heads()[0], &cfg)?;
    let y = tape.value(y);
    y.ensure_finite("block output")?;
    let sum: f64 = y.data().iter().map(|&v| v as f64).sum();
    let abs: f64 = y.data().iter().map(|&v| (v as f64).abs()).sum();
    writeln!(out, "tokens {}", y.rows())?;
    writeln!(out, "windows {}", make_plan(y.rows(), k, d)?.windows())?;
    writeln!(out, "checksum {sum} {abs}")?;
    Ok(())
}

fn train_cmd(config: &Path, out: &mut dyn Write) -> Result<()> {
    let rc = RunConfig::load(config)?;
    let cfg = rc.network()?;
    let data = rc.dataset()?;
    let result = train_toy(&data, &cfg, &rc.train_config())?;
    let mut csv = Vec::new();
    writeln!(csv, "epoch,lr,loss,accuracy")?;
    for h in &result.history {
        writeln!(csv, "{},{},{},{}", h.epoch, h.lr, h.loss, h.accuracy)?;
    }
    out.write_all(&csv)?;
    if let Some(p) = &rc.output.history_csv {
        std::fs::write(p, &csv)?;
    }
    if let Some(p) = &rc.output.checkpoint {
        let mut w = create(p)?;
        save_checkpoint(&mut w, &cfg, &result.params)?;
        w.flush()?;
    }
    Ok(())
}

fn segment_cmd(input: &Path, ckpt: &Path, dest: Option<&Path>, scale: Option<f64>, out: &mut dyn Write) -> Result<()> {
    let (cfg, store) = load_checkpoint(std::io::BufReader::new(File::open(ckpt)?))?;
    if cfg.task != nn::Task::Segmentation {
        return Err(Error::Config("checkpoint holds a classification network".into()));
    }
    let cloud = load_point_cloud(input, cfg.octree_depth, scale)?;
    let logits = predict_logits(&store, &cfg, &cloud)?;
    let mut text = String::with_capacity(logits.rows() * 3);
    for i in 0..logits.rows() {
        text.push_str(&argmax(logits.row(i)).to_string());
        text.push('\n');
    }
    match dest {
        Some(p) => std::fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn bench_cmd(config: &Path, csv: Option<&Path>, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let rc = RunConfig::load(config)?;
    writeln!(out, "variant,n,checksum")?;
    let rows = run_bench(&rc.bench, rc.seed, |r| {
        let _ = writeln!(err, "{} n={} median {:.6}s iqr {:.6}s", r.variant.name(), r.n, r.median_s, r.iqr_s);
    })?;
    for r in &rows {
        writeln!(out, "{},{},{}", r.variant.name(), r.n, r.checksum)?;
    }
    for v in [BenchVariant::Octree, BenchVariant::Cubic, BenchVariant::Knn, BenchVariant::Global] {
        let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.variant == v).map(|r| (r.n as f64, r.median_s)).collect();
        if pts.len() >= 2 {
            let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            let (_, slope, r2) = linear_fit(&xs, &ys);
            writeln!(err, "{}: {:.3e} s per token, linear fit r2 {r2:.4}", v.name(), slope)?;
        }
    }
    match csv.or(rc.output.bench_csv.as_deref()) {
        Some(p) => {
            let mut w = create(p)?;
            write_bench_csv(&mut w, &rows)?;
            w.flush()?;
        }
        None => write_bench_csv(&mut *err, &rows)?,
    }
    Ok(())
}

fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Usage("--threads must be positive".into()));
        }
        par::init_threads(t);
    }
    match cli.command {
        Command::BuildOctree {
            input,
            depth,
            dump,
            scale,
        } => build_octree_cmd(&input, depth, &dump, scale, out),
        Command::Partition { n, k, d, csv } => partition_cmd(n, k, d, csv.as_deref(), out),
        Command::Attend {
            input,
            k,
            d,
            depth,
            channels,
            seed,
            scale,
        } => attend_cmd(&input, k, d, depth, channels, seed, scale, out),
        Command::TrainToy { config } => train_cmd(&config, out),
        Command::Segment { input, ckpt, out: dest, scale } => segment_cmd(&input, &ckpt, dest.as_deref(), scale, out),
        Command::Bench { config, csv } => bench_cmd(&config, csv.as_deref(), out, err),
        Command::Selftest => {
            if report(out, &run_selftest())? {
                Ok(())
            } else {
                Err(Error::Numeric("self-test failed".into()))
            }
        }
    }
}

/// Parses `args` (including the program name), runs the command, and returns
/// the process exit status.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    1
                }
            };
        }
    };
    let status = match execute(cli, out, err) {
        Ok(()) => 0,
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    };
    let _ = out.flush();
    status
}
