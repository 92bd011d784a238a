use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::params::ParamStore;
use crate::autodiff::{BatchStats, Gradients, Tape, Var};
use crate::error::Result;
use crate::octconv::{conv_table, conv_tape, depthwise_tape};
use crate::octree::{IndexTable, Octree};
use crate::partition::{make_plan, PartitionPlan};
use crate::tensor::{update_running_stats, Mode, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// An octree with lazily built, cached gather tables and partition plans.
pub struct Geometry {
    pub octree: Octree,
    tables: RefCell<HashMap<(u32, usize, usize), IndexTable>>,
    plans: RefCell<HashMap<(u32, usize, usize), Arc<PartitionPlan>>>,
    point_nodes: RefCell<HashMap<u32, Arc<[u32]>>>,
}

impl Geometry {
    pub fn new(octree: Octree) -> Self {
        Self {
            octree,
            tables: RefCell::default(),
            plans: RefCell::default(),
            point_nodes: RefCell::default(),
        }
    }

    pub fn table(&self, depth: u32, kernel: usize, stride: usize) -> Result<IndexTable> {
        if let Some(t) = self.tables.borrow().get(&(depth, kernel, stride)) {
            return Ok(t.clone());
        }
        let t = conv_table(&self.octree, depth, kernel, stride)?;
        self.tables.borrow_mut().insert((depth, kernel, stride), t.clone());
        Ok(t)
    }

    pub fn plan(&self, depth: u32, k: usize, d: usize) -> Result<Arc<PartitionPlan>> {
        if let Some(p) = self.plans.borrow().get(&(depth, k, d)) {
            return Ok(Arc::clone(p));
        }
        let p = Arc::new(make_plan(self.octree.num_nodes(depth)?, k, d)?);
        self.plans.borrow_mut().insert((depth, k, d), Arc::clone(&p));
        Ok(p)
    }

    /// Node index at `depth` of every input point.
    pub fn point_nodes(&self, depth: u32) -> Result<Arc<[u32]>> {
        if let Some(p) = self.point_nodes.borrow().get(&depth) {
            return Ok(Arc::clone(p));
        }
        let p: Arc<[u32]> = self.octree.point_nodes(depth)?.into();
        self.point_nodes.borrow_mut().insert(depth, Arc::clone(&p));
        Ok(p)
    }
}

/// Binds a [`ParamStore`] to a [`Tape`] for one forward pass.
pub struct Session<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    store: &'a ParamStore<T>,
    pub mode: Mode,
    trainable: bool,
    leaves: RefCell<HashMap<String, Var>>,
    stats: RefCell<Vec<(String, BatchStats<T>)>>,
}

impl<'a, T: Scalar> Session<'a, T> {
    /// `trainable` records parameters as gradient-tracked leaves.
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>, mode: Mode, trainable: bool) -> Self {
        Self {
            tape,
            store,
            mode,
            trainable,
            leaves: RefCell::default(),
            stats: RefCell::default(),
        }
    }

    /// Uses `v` for parameter `name` instead of the stored tensor.
    pub fn bind(&self, name: &str, v: Var) {
        self.leaves.borrow_mut().insert(name.to_string(), v);
    }

    pub fn p(&self, name: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.borrow().get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.trainable {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.leaves.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn linear(&self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        self.tape.linear(x, w, Some(b))
    }

    pub fn layer_norm(&self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        self.tape.layer_norm(x, g, b, T::of(LN_EPS))
    }

    pub fn batch_norm(&self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, g, b, T::of(BN_EPS))?;
                self.stats.borrow_mut().push((prefix.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.store.buffer(&format!("{prefix}.running_mean"))?;
                let var = self.store.buffer(&format!("{prefix}.running_var"))?;
                self.tape.batch_norm_eval(x, g, b, mean, var, T::of(BN_EPS))
            }
        }
    }

    pub fn conv(&self, prefix: &str, x: Var, table: &IndexTable) -> Result<Var> {
        conv_tape(self.tape, x, table, self.p(&format!("{prefix}.weight"))?)
    }

    pub fn depthwise(&self, prefix: &str, x: Var, table: &IndexTable) -> Result<Var> {
        depthwise_tape(self.tape, x, table, self.p(&format!("{prefix}.weight"))?)
    }

    /// Parameter leaves touched so far, in creation order.
    pub fn param_vars(&self) -> Vec<(String, Var)> {
        let mut v: Vec<(String, Var)> = self.leaves.borrow().iter().map(|(k, &v)| (k.clone(), v)).collect();
        v.sort_by_key(|e| e.1);
        v
    }

    /// Gradients of every stored parameter, zero for untouched ones.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        let leaves = self.leaves.borrow();
        self.store
            .params()
            .iter()
            .map(|(name, t)| match leaves.get(name) {
                Some(&v) => grads.wrt(v),
                None => Tensor::zeros(t.shape()),
            })
            .collect()
    }

    /// Batch statistics gathered by train-mode batch norms.
    pub fn take_stats(&self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.stats.borrow_mut())
    }
}

/// Folds batch statistics into the running buffers of `store`.
pub fn apply_stats<T: Scalar>(store: &mut ParamStore<T>, stats: &[(String, BatchStats<T>)]) -> Result<()> {
    for (prefix, s) in stats {
        let mut mean = store.buffer(&format!("{prefix}.running_mean"))?.clone();
        let mut var = store.buffer(&format!("{prefix}.running_var"))?.clone();
        update_running_stats(&mut mean, &mut var, &s.mean, &s.var, s.rows, T::of(BN_MOMENTUM));
        *store.buffer_mut(&format!("{prefix}.running_mean"))? = mean;
        *store.buffer_mut(&format!("{prefix}.running_var"))? = var;
    }
    Ok(())
}
