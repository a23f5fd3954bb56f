//! Adam with bias correction and the stepwise-halving learning-rate
//! schedule. Moments live alongside the parameters in plain tensors so
//! they serialize through the checkpoint container.

use indexmap::IndexMap;

use crate::ckpt::Checkpoint;
use crate::error::TensorError;
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Adam<T> {
    m: IndexMap<String, Tensor<T>>,
    v: IndexMap<String, Tensor<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = |s: &ParamStore<T>| {
            s.iter()
                .map(|(name, t)| (name.to_string(), Tensor::zeros(t.shape())))
                .collect::<IndexMap<_, _>>()
        };
        Adam { m: zeros(store), v: zeros(store), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update over every parameter that received a
    /// gradient; parameters without one are left untouched. A non-finite
    /// gradient anywhere aborts before mutating any state.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &IndexMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<(), TensorError> {
        for (name, g) in grads {
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "adam_step" });
            }
            let param = store
                .get(name)
                .ok_or_else(|| TensorError::InvalidArg {
                    op: "adam_step",
                    msg: format!("gradient for unknown parameter {name}"),
                })?;
            if param.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: param.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }

        self.step += 1;
        let t = self.step as f64;
        let b1 = T::of(BETA1);
        let b2 = T::of(BETA2);
        let one = T::one();
        let corr1 = T::of(1.0 - BETA1.powf(t));
        let corr2 = T::of(1.0 - BETA2.powf(t));
        let lr_t = T::of(lr);
        let eps = T::of(EPSILON);

        for (name, g) in grads {
            let m = self.m.get_mut(name).expect("moment tracked for every parameter");
            let v = self.v.get_mut(name).expect("moment tracked for every parameter");
            let mut p = store.get(name).unwrap().clone();
            {
                let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
                for ((pi, mi), (vi, gi)) in
                    pd.iter_mut().zip(md.iter_mut()).zip(vd.iter_mut().zip(g.data()))
                {
                    *mi = b1 * *mi + (one - b1) * *gi;
                    *vi = b2 * *vi + (one - b2) * *gi * *gi;
                    let m_hat = *mi / corr1;
                    let v_hat = *vi / corr2;
                    *pi = *pi - lr_t * m_hat / (v_hat.sqrt() + eps);
                }
            }
            store.set(name, p)?;
        }
        Ok(())
    }

    /// Moments and step counter under a prefix, for resumable training.
    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        for (name, t) in &self.m {
            ckpt.insert(&format!("{prefix}m.{name}"), t.cast::<f32>());
        }
        for (name, t) in &self.v {
            ckpt.insert(&format!("{prefix}v.{name}"), t.cast::<f32>());
        }
        ckpt.insert_scalar(&format!("{prefix}step"), self.step as f64);
    }

    pub fn restore_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<(), TensorError> {
        let missing = |key: &str| TensorError::InvalidArg {
            op: "adam_restore",
            msg: format!("checkpoint missing {key}"),
        };
        for (map, tag) in [(&mut self.m, "m"), (&mut self.v, "v")] {
            for (name, t) in map.iter_mut() {
                let key = format!("{prefix}{tag}.{name}");
                let entry = ckpt.get(&key).ok_or_else(|| missing(&key))?;
                if entry.shape() != t.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam_restore",
                        lhs: t.shape().to_vec(),
                        rhs: entry.shape().to_vec(),
                    });
                }
                *t = entry.cast::<T>();
            }
        }
        let key = format!("{prefix}step");
        self.step = ckpt.get_scalar(&key).ok_or_else(|| missing(&key))? as u64;
        Ok(())
    }
}

/// lr = initial · 0.5^floor(epoch / halve_every)
pub fn lr_schedule(initial: f64, halve_every: usize, epoch: usize) -> f64 {
    initial * 0.5f64.powi((epoch / halve_every) as i32)
}
