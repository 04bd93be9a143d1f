//! Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the joint gradient to at most this L2 norm before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::Parameter(format!("Adam {what} = {v} is out of range")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", self.lr);
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", self.beta1);
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", self.beta2);
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad("eps", self.eps);
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad("clip_norm", c);
            }
        }
        Ok(())
    }
}

/// First and second moments for a fixed list of parameter buffers.
#[derive(Debug, Clone)]
pub struct Adam<T: Real = f64> {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    /// `sizes` are the element counts of the parameters, in the order
    /// later passed to [`Adam::step`].
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            t: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, i: usize) -> &[T] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[T] {
        &self.v[i]
    }

    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[Option<&[T]>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {} values and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g = g.ok_or_else(|| Error::Contract(format!("parameter {i} has no gradient")))?;
            if p.len() != self.m[i].len() || g.len() != p.len() {
                return Err(Error::dim("adam step", &[self.m[i].len()], &[p.len(), g.len()]));
            }
        }
        let scale = match self.config.clip_norm {
            Some(limit) => {
                let sq: f64 = grads.iter().flatten().flat_map(|g| g.iter()).map(|x| x.as_f64() * x.as_f64()).sum();
                let norm = sq.sqrt();
                if norm > limit {
                    limit / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (nb1, nb2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let t = self.t as i32;
        let correct1 = T::lit(1.0 - c.beta1.powi(t));
        let correct2 = T::lit(1.0 - c.beta2.powi(t));
        let (lr, eps, scale) = (T::lit(c.lr), T::lit(c.eps), T::lit(scale));
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].unwrap();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j] * scale;
                m[j] = b1 * m[j] + nb1 * gj;
                v[j] = b2 * v[j] + nb2 * gj * gj;
                let m_hat = m[j] / correct1;
                let v_hat = v[j] / correct2;
                p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
