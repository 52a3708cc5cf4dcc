use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradMap, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter group.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every parameter named in `grads`.
    ///
    /// Every gradient must name a parameter in `params` with the same shape;
    /// parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::contract(format!(
                    "gradient shape {:?} does not match parameter `{name}` {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::row(&[v, -v]));
        s
    }

    fn grads(v: f64) -> GradMap {
        GradMap::from([("w".to_string(), Tensor::row(&[v, v]))])
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = store(0.7);
        let mut st = AdamState::new(AdamConfig::default());
        st.step(&mut p, &grads(0.0)).unwrap();
        assert_eq!(p, store(0.7));
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1 after bias correction, so the step is lr / (1 + eps).
        let mut p = store(0.5);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut st = AdamState::new(cfg);
        st.step(&mut p, &grads(1.0)).unwrap();
        let w = p.get("w").unwrap().data();
        let expected = 0.1 / (1.0 + 1e-8);
        assert!((0.5 - w[0] - expected).abs() < 1e-12);
        assert!((-0.5 - w[1] - expected).abs() < 1e-12);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = store(0.3);
            let mut st = AdamState::new(AdamConfig::default());
            for k in 0..5 {
                st.step(&mut p, &grads(0.1 * k as f64 - 0.2)).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = store(0.3);
        let mut st = AdamState::new(AdamConfig::default());
        let bad = GradMap::from([("w".to_string(), Tensor::row(&[1.0]))]);
        assert!(matches!(st.step(&mut p, &bad), Err(Error::Contract(_))));
        let unknown = GradMap::from([("q".to_string(), Tensor::row(&[1.0]))]);
        assert!(st.step(&mut p, &unknown).is_err());
        assert_eq!(st.step_count(), 0);
    }
}
