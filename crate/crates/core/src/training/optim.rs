//! Adam with sparse row updates for embedding tables.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Gradients, ParamId};
use crate::model::ParamRegistry;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    /// One step counter per row; dense parameters use a single row.
    steps: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<ParamId, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: HashMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Update count of a parameter; for embedding tables, the most-updated row.
    pub fn steps(&self, id: ParamId) -> u64 {
        self.state
            .get(&id)
            .map_or(0, |s| s.steps.iter().copied().max().unwrap_or(0))
    }

    /// Parameters with moment arrays.
    pub fn tracked(&self) -> usize {
        self.state.len()
    }

    /// One bias-corrected Adam update of every trainable parameter.
    ///
    /// Embedding tables are updated row by row: a row whose gradient is all
    /// zero, or which is masked out, keeps its value, moments and step count.
    pub fn step<T: Real>(
        &mut self,
        registry: &mut ParamRegistry<T>,
        grads: &Gradients<T>,
        lr: f64,
    ) -> Result<()> {
        let by_id: HashMap<ParamId, &Tensor<T>> = grads.params().collect();
        for id in registry.trainable_ids() {
            let p = registry.get_mut(id);
            let g = by_id.get(&id).ok_or_else(|| {
                Error::Contract(format!("no gradient for trainable parameter {:?}", p.name))
            })?;
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {:?} of shape {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            let (rows, cols) = if p.embedding {
                (p.value.rows(), p.value.cols())
            } else {
                (1, p.value.len())
            };
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; rows * cols],
                v: vec![0.0; rows * cols],
                steps: vec![0; rows],
            });
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let gd = g.data();
            for r in 0..rows {
                let span = r * cols..(r + 1) * cols;
                if p.embedding
                    && (!p.row_trainable(r) || gd[span.clone()].iter().all(|x| *x == T::zero()))
                {
                    continue;
                }
                st.steps[r] += 1;
                let t = st.steps[r] as i32;
                let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                let vals = p.value.data_mut();
                for i in span {
                    let gi = gd[i].as_f64();
                    st.m[i] = b1 * st.m[i] + (1.0 - b1) * gi;
                    st.v[i] = b2 * st.v[i] + (1.0 - b2) * gi * gi;
                    let upd = lr * (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + eps);
                    vals[i] = T::from_f64(vals[i].as_f64() - upd);
                }
            }
        }
        Ok(())
    }
}
