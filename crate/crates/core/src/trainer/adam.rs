use crate::error::{Error, Result};
use crate::model::{Axis, GradMap, MomentSlicer, ParamStore};
use crate::numerics::Matrix;
use indexmap::IndexMap;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction and optional decoupled weight decay. Moments
/// are created lazily and sliced in place when their weight shrinks.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: IndexMap<String, Matrix>,
    v: IndexMap<String, Matrix>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            weight_decay: 0.0,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    /// Restores a saved state; `m` and `v` must have the same keys and shapes.
    pub fn from_parts(
        lr: f64,
        weight_decay: f64,
        t: u64,
        m: IndexMap<String, Matrix>,
        v: IndexMap<String, Matrix>,
    ) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::Config("first and second moments cover different weights".into()));
        }
        for (name, mm) in &m {
            let vv = v.get(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if vv.shape() != mm.shape() {
                return Err(Error::Shape {
                    op: "adam moments",
                    left: mm.shape(),
                    right: vv.shape(),
                });
            }
        }
        Ok(Self {
            t,
            m,
            v,
            ..Self::new(lr).with_weight_decay(weight_decay)
        })
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &IndexMap<String, Matrix> {
        &self.m
    }

    pub fn second_moments(&self) -> &IndexMap<String, Matrix> {
        &self.v
    }

    /// True when every stored moment has its weight's current shape.
    pub fn shapes_match(&self, params: &ParamStore) -> bool {
        self.m.iter().chain(&self.v).all(|(name, mom)| {
            params
                .get(name)
                .map(|w| w.shape() == mom.shape())
                .unwrap_or(false)
        })
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) -> Result<()> {
        for (name, w) in params.iter() {
            let g = grads.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            if g.shape() != w.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: w.shape(),
                    right: g.shape(),
                });
            }
            if let Some(m) = self.m.get(name) {
                if m.shape() != w.shape() {
                    return Err(Error::Shape {
                        op: "adam_step moments",
                        left: w.shape(),
                        right: m.shape(),
                    });
                }
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
        for (name, w) in params.iter_mut() {
            let g = &grads[name];
            let (r, c) = w.shape();
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Matrix::zeros(r, c));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Matrix::zeros(r, c));
            let wd_data = w.data_mut();
            for (((wi, &gi), mi), vi) in wd_data
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *wi -= lr * (update + wd * *wi);
            }
        }
        Ok(())
    }
}

impl MomentSlicer for AdamState {
    fn remove(&mut self, name: &str, axis: Axis, index: usize) {
        for store in [&mut self.m, &mut self.v] {
            if let Some(mom) = store.get_mut(name) {
                let sliced = match axis {
                    Axis::Row => mom.remove_row(index),
                    Axis::Col => mom.remove_column(index),
                };
                *mom = sliced.expect("moment shape tracks its weight");
            }
        }
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(params: &mut ParamStore, grads: &GradMap, state: &mut AdamState) -> Result<()> {
    state.step(params, grads)
}
