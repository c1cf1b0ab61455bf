//! Adam with coupled L2 weight decay.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::config::OptimizerConfig;
use crate::error::{Error, Result};

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: &OptimizerConfig, params: &BTreeMap<String, Var>) -> Result<Self> {
        let mut m = BTreeMap::new();
        for (name, var) in params {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
            t: 0,
            v: m.clone(),
            m,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update at learning rate `lr`. Parameters without a gradient are left alone.
    pub fn step(&mut self, params: &BTreeMap<String, Var>, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients and parameters still link to the step's graph; cut it so
            // the moments do not keep every past graph alive.
            let theta = var.as_tensor().detach();
            let g = g.detach();
            let g = if self.weight_decay > 0.0 {
                (g + theta.affine(self.weight_decay, 0.0)?)?
            } else {
                g
            };
            let m = self.m.get_mut(name).expect("state for every parameter");
            *m = ((&*m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = self.v.get_mut(name).expect("state for every parameter");
            *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&*m / bc1)?;
            let denom = ((&*v / bc2)?.sqrt()? + self.eps)?;
            let update = (m_hat / denom)?.affine(lr, 0.0)?;
            var.set(&(theta - update)?)?;
        }
        Ok(())
    }

    /// Named moment tensors for checkpointing.
    pub fn state(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.m, &self.v)
    }

    pub fn load_state(&mut self, t: u64, m: BTreeMap<String, Tensor>, v: BTreeMap<String, Tensor>) -> Result<()> {
        for (name, cur) in &self.m {
            let ok = m.get(name).is_some_and(|x| x.dims() == cur.dims())
                && v.get(name).is_some_and(|x| x.dims() == cur.dims());
            if !ok {
                return Err(Error::Checkpoint(format!(
                    "optimizer state for {name} missing or misshapen"
                )));
            }
        }
        let dtype = self.m.values().next().map(|t| t.dtype());
        let cast = |map: BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Tensor>> {
            map.into_iter()
                .map(|(k, t)| {
                    Ok((
                        k,
                        match dtype {
                            Some(d) => t.to_dtype(d)?,
                            None => t,
                        },
                    ))
                })
                .collect()
        };
        self.m = cast(m)?;
        self.v = cast(v)?;
        self.t = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let var = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let params = BTreeMap::from([("w".to_string(), var.clone())]);
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut adam = Adam::new(&cfg, &params).unwrap();
        let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        adam.step(&params, &grads, 0.1).unwrap();
        let after = var.as_tensor().to_vec1::<f64>().unwrap();
        assert!((after[0] - 0.9).abs() < 1e-6);
        assert!((after[1] + 1.9).abs() < 1e-6);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let var = Var::zeros(3, DType::F64, &Device::Cpu).unwrap();
        let target = Tensor::new(&[1.0f64, -1.0, 0.5], &Device::Cpu).unwrap();
        let params = BTreeMap::from([("w".to_string(), var.clone())]);
        let mut adam = Adam::new(&OptimizerConfig::default(), &params).unwrap();
        for _ in 0..2000 {
            let loss = (var.as_tensor() - &target).unwrap().sqr().unwrap().sum_all().unwrap();
            adam.step(&params, &loss.backward().unwrap(), 0.01).unwrap();
        }
        let w = var.as_tensor().to_vec1::<f64>().unwrap();
        for (a, b) in w.iter().zip([1.0, -1.0, 0.5]) {
            assert!((a - b).abs() < 1e-2, "{w:?}");
        }
    }
}
