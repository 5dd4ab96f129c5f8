use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers mirror the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<_> = params.iter().map(|(_, _, p)| Array2::zeros(p.dim())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update. Parameters without a gradient are treated as
    /// having a zero gradient. A non-finite gradient aborts before anything
    /// is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Array2<f64>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.dim() != params.value(id).dim() {
                    return Err(Error::Shape(format!(
                        "gradient of `{}` is {:?}, parameter is {:?}",
                        params.name(id),
                        g.dim(),
                        params.value(id).dim()
                    )));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric {
                        param: params.name(id).to_string(),
                        msg: "non-finite gradient".into(),
                    });
                }
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads.iter().enumerate() {
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            match g {
                Some(g) => {
                    Zip::from(&mut *m).and(g).for_each(|m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
                    Zip::from(&mut *v).and(g).for_each(|v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
                }
                None => {
                    m.mapv_inplace(|x| beta1 * x);
                    v.mapv_inplace(|x| beta2 * x);
                }
            }
            Zip::from(params.value_mut(id)).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mh = m / c1;
                let vh = v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::default();
        s.add("w", array![[v]]).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(1.5);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s, &[Some(array![[0.0]])]).unwrap();
        adam.step(&mut s, &[None]).unwrap();
        assert_eq!(s.value(0)[[0, 0]], 1.5);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let mut s = store(0.0);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut adam = Adam::new(cfg, &s);
        adam.step(&mut s, &[Some(array![[1.0]])]).unwrap();
        // m_hat = 1, v_hat = 1 -> delta = -0.1 / (1 + 1e-8)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((s.value(0)[[0, 0]] - expected).abs() < 1e-15);
        assert!((s.value(0)[[0, 0]] + 0.099_999_999).abs() < 1e-9);
    }

    #[test]
    fn default_learning_rate() {
        assert_eq!(AdamConfig::default().lr, 3e-4);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = store(0.0);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        match adam.step(&mut s, &[Some(array![[f64::NAN]])]) {
            Err(Error::Numeric { param, .. }) => assert_eq!(param, "w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(adam.step, 0);
        assert_eq!(s.value(0)[[0, 0]], 0.0);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut s = store(3.0);
        let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        let mut adam = Adam::new(cfg, &s);
        for _ in 0..2000 {
            let w = s.value(0)[[0, 0]];
            adam.step(&mut s, &[Some(array![[2.0 * (w - 1.0)]])]).unwrap();
        }
        assert!((s.value(0)[[0, 0]] - 1.0).abs() < 1e-3);
    }
}
