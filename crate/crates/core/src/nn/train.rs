use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::NetworkConfig;
use super::model::{forward, input_features};
use super::params::ParamStore;
use super::session::{apply_stats, Geometry, Session};
use crate::autodiff::Tape;
use crate::cloud::QuantizedCloud;
use crate::error::{Error, Result};
use crate::octree::build_octree;
use crate::tensor::{Mode, Scalar, Tensor};

/// Label value excluded from the loss and from accuracy.
pub const IGNORE_LABEL: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Clouds per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fractions of `epochs` after which the learning rate is multiplied by
    /// `decay_factor`.
    pub milestones: [f64; 2],
    pub decay_factor: f64,
    /// Set from the run configuration rather than this section.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 5,
            lr: 3e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            milestones: [0.6, 0.8],
            decay_factor: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative, eps positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Learning rate for `epoch` under the step schedule.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let frac = epoch as f64 / self.epochs as f64;
        let drops = self.milestones.iter().filter(|&&m| frac >= m).count();
        self.lr * self.decay_factor.powi(drops as i32)
    }
}

/// A labeled cloud; labels are per point, or a single entry for classification.
#[derive(Clone, Debug)]
pub struct Sample {
    pub cloud: QuantizedCloud,
    pub labels: Vec<usize>,
}

/// AdamW with decoupled weight decay applied to weights of rank ≥ 2.
pub struct AdamW<T> {
    cfg: TrainConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: &TrainConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.params().iter().map(|p| vec![T::zero(); p.1.len()]).collect();
        Self {
            cfg: cfg.clone(),
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        let step = T::of(lr / bc1);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.cfg.eps);
        let shrink = T::of(1.0 - lr * self.cfg.weight_decay);
        for (i, ((_, p), g)) in store.params_mut().iter_mut().zip(grads).enumerate() {
            let decay = p.ndim() >= 2;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = b1t * m[j] + one_b1 * gj;
                v[j] = b2t * v[j] + one_b2 * gj * gj;
                if decay {
                    *w *= shrink;
                }
                *w -= step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Loss and accuracy of one pass over a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

pub struct TrainResult<T> {
    pub params: ParamStore<T>,
    pub history: Vec<EpochStats>,
}

/// A sample with its octree and input features prepared once.
pub struct Prepared<T> {
    pub geometry: Geometry,
    pub features: Tensor<T>,
    pub labels: Arc<[usize]>,
}

pub fn prepare<T: Scalar>(sample: &Sample, cfg: &NetworkConfig) -> Result<Prepared<T>> {
    let cloud = if sample.cloud.depth() == cfg.octree_depth {
        sample.cloud.clone()
    } else {
        sample.cloud.at_depth(cfg.octree_depth)?
    };
    let geometry = Geometry::new(build_octree(&cloud)?);
    let features = input_features(&geometry, &cloud, cfg)?;
    let want = match cfg.task {
        super::config::Task::Segmentation => cloud.len(),
        super::config::Task::Classification => 1,
    };
    if sample.labels.len() != want {
        return Err(Error::Config(format!("{} labels for {want} targets", sample.labels.len())));
    }
    if let Some(&bad) = sample.labels.iter().find(|&&l| l != IGNORE_LABEL && l >= cfg.num_classes) {
        return Err(Error::Config(format!("label {bad} outside {} classes", cfg.num_classes)));
    }
    Ok(Prepared {
        geometry,
        features,
        labels: sample.labels.clone().into(),
    })
}

fn correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (usize, usize) {
    let mut hit = 0;
    let mut total = 0;
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        total += 1;
        if argmax(logits.row(i)) == l {
            hit += 1;
        }
    }
    (hit, total)
}

/// Index of the largest entry, the first one on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct PassOutput<T> {
    loss: f64,
    hits: (usize, usize),
    grads: Vec<Tensor<T>>,
}

fn run<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &NetworkConfig,
    p: &Prepared<T>,
    mode: Mode,
    with_grads: bool,
) -> Result<PassOutput<T>> {
    let tape = Tape::new();
    let (loss, hits, grads, stats) = {
        let s = Session::new(&tape, store, mode, with_grads);
        let x = tape.constant(p.features.clone());
        let logits = forward(&s, &p.geometry, x, cfg)?;
        let loss = tape.cross_entropy(logits, Arc::clone(&p.labels), IGNORE_LABEL)?;
        let lv = tape.value(loss).item()?.f64();
        let hits = correct(&tape.value(logits), &p.labels);
        let grads = if with_grads && lv.is_finite() {
            s.param_grads(&tape.backward(loss)?)
        } else {
            Vec::new()
        };
        (lv, hits, grads, s.take_stats())
    };
    if mode == Mode::Train && loss.is_finite() {
        apply_stats(store, &stats)?;
    }
    Ok(PassOutput { loss, hits, grads })
}

/// Trains from a seeded initialization, one optimizer step per batch of
/// `batch_size` clouds with gradients averaged over the batch.
pub fn train_toy(data: &[Sample], cfg: &NetworkConfig, tc: &TrainConfig) -> Result<TrainResult<f32>> {
    cfg.validate()?;
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let prepared = data.iter().map(|s| prepare(s, cfg)).collect::<Result<Vec<Prepared<f32>>>>()?;
    let mut store = ParamStore::init(cfg, tc.seed)?;
    let mut opt = AdamW::new(tc, &store);
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let lr = tc.lr_at(epoch);
        let (mut loss_sum, mut hit, mut total) = (0.0, 0, 0);
        for batch in prepared.chunks(tc.batch_size) {
            let mut acc: Option<Vec<Tensor<f32>>> = None;
            let scale = 1.0 / batch.len() as f32;
            for p in batch {
                let out = run(&mut store, cfg, p, Mode::Train, true).map_err(|e| match e {
                    Error::Numeric(msg) => Error::Training { epoch, msg },
                    e => e,
                })?;
                if !out.loss.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        msg: format!("loss became {}", out.loss),
                    });
                }
                loss_sum += out.loss;
                hit += out.hits.0;
                total += out.hits.1;
                match &mut acc {
                    None => acc = Some(out.grads.into_iter().map(|g| g.map(|v| v * scale)).collect()),
                    Some(a) => {
                        for (dst, g) in a.iter_mut().zip(&out.grads) {
                            for (d, &v) in dst.data_mut().iter_mut().zip(g.data()) {
                                *d += v * scale;
                            }
                        }
                    }
                }
            }
            let grads = acc.expect("non-empty batch");
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Training {
                    epoch,
                    msg: "non-finite gradient".into(),
                });
            }
            opt.step(&mut store, &grads, lr);
        }
        history.push(EpochStats {
            epoch,
            lr,
            loss: loss_sum / prepared.len() as f64,
            accuracy: hit as f64 / total.max(1) as f64,
        });
    }
    Ok(TrainResult { params: store, history })
}

/// Mean loss and accuracy over a dataset with running batch-norm statistics.
pub fn evaluate(store: &ParamStore<f32>, cfg: &NetworkConfig, data: &[Sample]) -> Result<(f64, f64)> {
    store.check(cfg)?;
    let mut store = store.clone();
    let (mut loss, mut hit, mut total) = (0.0, 0, 0);
    for s in data {
        let p = prepare(s, cfg)?;
        let out = run(&mut store, cfg, &p, Mode::Eval, false)?;
        loss += out.loss;
        hit += out.hits.0;
        total += out.hits.1;
    }
    Ok((loss / data.len().max(1) as f64, hit as f64 / total.max(1) as f64))
}

/// Logits of `cloud` in eval mode.
pub fn predict_logits(store: &ParamStore<f32>, cfg: &NetworkConfig, cloud: &QuantizedCloud) -> Result<Tensor<f32>> {
    store.check(cfg)?;
    let cloud = if cloud.depth() == cfg.octree_depth {
        cloud.clone()
    } else {
        cloud.at_depth(cfg.octree_depth)?
    };
    let geometry = Geometry::new(build_octree(&cloud)?);
    let features: Tensor<f32> = input_features(&geometry, &cloud, cfg)?;
    let tape = Tape::new();
    let s = Session::new(&tape, store, Mode::Eval, false);
    let x = tape.constant(features);
    let logits = forward(&s, &geometry, x, cfg)?;
    let out = tape.value(logits).clone();
    out.ensure_finite("logits")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_down() {
        let tc = TrainConfig {
            epochs: 10,
            ..Default::default()
        };
        assert_eq!(tc.lr_at(0), 3e-3);
        assert!((tc.lr_at(6) - 3e-4).abs() < 1e-12);
        assert!((tc.lr_at(8) - 3e-5).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::from_parts(
            vec![("w".into(), Tensor::<f64>::full(&[2, 2], 1.0)), ("b".into(), Tensor::full(&[2], 1.0))],
            vec![],
        );
        let tc = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&tc, &store);
        let g = vec![Tensor::full(&[2, 2], 0.5), Tensor::full(&[2], -2.0)];
        opt.step(&mut store, &g, 0.1);
        assert!((store.get("w").unwrap().data()[0] - 0.9).abs() < 1e-6);
        assert!((store.get("b").unwrap().data()[0] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn decay_skips_vectors() {
        let mut store = ParamStore::from_parts(
            vec![("w".into(), Tensor::<f64>::full(&[1, 1], 1.0)), ("b".into(), Tensor::full(&[1], 1.0))],
            vec![],
        );
        let tc = TrainConfig::default();
        let mut opt = AdamW::new(&tc, &store);
        opt.step(&mut store, &[Tensor::zeros(&[1, 1]), Tensor::zeros(&[1])], 1.0);
        assert!((store.get("w").unwrap().data()[0] - 0.95).abs() < 1e-12);
        assert_eq!(store.get("b").unwrap().data()[0], 1.0);
    }
}
