use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{NetworkConfig, Task};
use crate::error::{Error, Result};
use crate::init::trunc_normal;
use crate::octconv::EMBED_KERNELS;
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Default)]
struct Specs {
    params: Vec<ParamSpec>,
    buffers: Vec<ParamSpec>,
}

impl Specs {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.params.push(ParamSpec { name, shape, init });
    }

    fn linear(&mut self, p: &str, cin: usize, cout: usize) {
        self.push(format!("{p}.weight"), vec![cin, cout], Init::TruncNormal);
        self.push(format!("{p}.bias"), vec![cout], Init::Zeros);
    }

    fn norm(&mut self, p: &str, c: usize) {
        self.push(format!("{p}.weight"), vec![c], Init::Ones);
        self.push(format!("{p}.bias"), vec![c], Init::Zeros);
    }

    fn bn(&mut self, p: &str, c: usize) {
        self.norm(p, c);
        self.buffers.push(ParamSpec {
            name: format!("{p}.running_mean"),
            shape: vec![c],
            init: Init::Zeros,
        });
        self.buffers.push(ParamSpec {
            name: format!("{p}.running_var"),
            shape: vec![c],
            init: Init::Ones,
        });
    }

    fn conv(&mut self, p: &str, kernel: usize, cin: usize, cout: usize) {
        self.push(format!("{p}.weight"), vec![kernel.pow(3), cin, cout], Init::TruncNormal);
    }

    fn conv_bn(&mut self, p: &str, kernel: usize, cin: usize, cout: usize) {
        self.conv(&format!("{p}.conv"), kernel, cin, cout);
        self.bn(&format!("{p}.bn"), cout);
    }
}

fn specs(cfg: &NetworkConfig) -> Specs {
    let mut s = Specs::default();
    let c = cfg.channels;
    let mut cin = cfg.in_channels();
    for (i, &k) in EMBED_KERNELS.iter().enumerate() {
        s.conv_bn(&format!("embed.{i}"), k, cin, c);
        cin = c;
    }
    let chans = cfg.stage_channels();
    for (st, &ch) in chans.iter().enumerate() {
        for b in 0..cfg.block_counts[st] {
            let p = format!("stages.{st}.blocks.{b}");
            if cfg.use_cpe {
                s.push(format!("{p}.cpe.conv.weight"), vec![27, ch], Init::Zeros);
                s.bn(&format!("{p}.cpe.bn"), ch);
            }
            s.norm(&format!("{p}.norm1"), ch);
            for proj in ["q", "k", "v", "o"] {
                s.linear(&format!("{p}.attn.{proj}"), ch, ch);
            }
            s.norm(&format!("{p}.norm2"), ch);
            s.linear(&format!("{p}.mlp.fc1"), ch, ch * cfg.mlp_ratio);
            s.linear(&format!("{p}.mlp.fc2"), ch * cfg.mlp_ratio, ch);
        }
        if st < 3 {
            s.conv_bn(&format!("stages.{st}.down"), 2, ch, chans[st + 1]);
        }
    }
    match cfg.task {
        Task::Segmentation => {
            let f = cfg.fpn_channels;
            for (i, &ch) in chans.iter().enumerate() {
                s.linear(&format!("seg.lateral.{i}"), ch, f);
            }
            s.conv_bn("seg.smooth", 3, f, f);
            s.linear("seg.mlp.fc1", f, cfg.head_hidden);
            s.bn("seg.mlp.bn", cfg.head_hidden);
            s.linear("seg.mlp.fc2", cfg.head_hidden, cfg.num_classes);
        }
        Task::Classification => s.linear("cls.fc", chans[3], cfg.num_classes),
    }
    s
}

/// Trainable parameters of `cfg`, in a fixed order.
pub fn param_specs(cfg: &NetworkConfig) -> Vec<ParamSpec> {
    specs(cfg).params
}

/// Batch-norm running statistics of `cfg`.
pub fn buffer_specs(cfg: &NetworkConfig) -> Vec<ParamSpec> {
    specs(cfg).buffers
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("seg.") || name.starts_with("cls.")
}

/// Trainable parameters of the embedding, stages and downsampling layers.
pub fn backbone_param_count(cfg: &NetworkConfig) -> usize {
    param_specs(cfg)
        .iter()
        .filter(|s| !is_head_param(&s.name))
        .map(ParamSpec::numel)
        .sum()
}

/// Named parameters and batch-norm buffers of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<(String, Tensor<T>)>,
    buffers: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
}

fn materialize<T: Scalar>(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor<T> {
    match spec.init {
        Init::TruncNormal => trunc_normal(&spec.shape, INIT_STD, rng),
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Ones => Tensor::full(&spec.shape, T::one()),
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = specs(cfg);
        let params = s.params.iter().map(|p| (p.name.clone(), materialize(p, &mut rng))).collect();
        let buffers = s.buffers.iter().map(|p| (p.name.clone(), materialize(p, &mut rng))).collect();
        Ok(Self::from_parts(params, buffers))
    }

    pub fn from_parts(params: Vec<(String, Tensor<T>)>, buffers: Vec<(String, Tensor<T>)>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.0.clone(), i)).collect();
        let buffer_index = buffers.iter().enumerate().map(|(i, p)| (p.0.clone(), i)).collect();
        Self {
            params,
            buffers,
            index,
            buffer_index,
        }
    }

    /// Checks names and shapes against `cfg`.
    pub fn check(&self, cfg: &NetworkConfig) -> Result<()> {
        let s = specs(cfg);
        let same = |have: &[(String, Tensor<T>)], want: &[ParamSpec]| {
            have.len() == want.len()
                && have.iter().zip(want).all(|(h, w)| h.0 == w.name && h.1.shape() == w.shape.as_slice())
        };
        if same(&self.params, &s.params) && same(&self.buffers, &s.buffers) {
            Ok(())
        } else {
            Err(Error::Format("parameters do not match the network configuration".into()))
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i].1)
            .ok_or_else(|| Error::Config(format!("no parameter named {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i].1),
            None => Err(Error::Config(format!("no parameter named {name:?}"))),
        }
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffer_index
            .get(name)
            .map(|&i| &self.buffers[i].1)
            .ok_or_else(|| Error::Config(format!("no buffer named {name:?}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.buffer_index.get(name) {
            Some(&i) => Ok(&mut self.buffers[i].1),
            None => Err(Error::Config(format!("no buffer named {name:?}"))),
        }
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor<T>)] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[(String, Tensor<T>)] {
        &self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.1.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let cast = |v: &[(String, Tensor<T>)]| v.iter().map(|(n, t)| (n.clone(), t.cast())).collect();
        ParamStore::from_parts(cast(&self.params), cast(&self.buffers))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_are_near_published_sizes() {
        let m = |c: &NetworkConfig| backbone_param_count(c) as f64 / 1e6;
        let (s, b, l) = (m(&NetworkConfig::small()), m(&NetworkConfig::base()), m(&NetworkConfig::large()));
        assert!((b / 39.0 - 1.0).abs() < 0.05, "base {b}M");
        assert!((s / 18.0 - 1.0).abs() < 0.15, "small {s}M");
        assert!((l / 156.0 - 1.0).abs() < 0.15, "large {l}M");
    }

    #[test]
    fn init_is_seeded() {
        let mut cfg = NetworkConfig::small();
        cfg.channels = 16;
        cfg.block_counts = [1, 1, 1, 1];
        let a = ParamStore::<f32>::init(&cfg, 7).unwrap();
        assert_eq!(a, ParamStore::init(&cfg, 7).unwrap());
        assert_ne!(a, ParamStore::init(&cfg, 8).unwrap());
        a.check(&cfg).unwrap();
        let w = a.get("stages.0.blocks.0.attn.q.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04));
        assert!(a.get("stages.0.blocks.0.cpe.conv.weight").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(a.buffer("embed.0.bn.running_var").unwrap().data()[0], 1.0);
    }
}
