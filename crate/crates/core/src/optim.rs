//! Rectified Adam.

use crate::error::{Error, Result};

/// Per-group settings for [`RAdam::step_groups`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Group {
    pub lr: f64,
    /// Take momentum-SGD steps while the rectification term is undefined;
    /// when false the group only accumulates moments during those steps.
    pub degenerate_to_sgd: bool,
}

impl Group {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            degenerate_to_sgd: true,
        }
    }

    pub fn adaptive_only(lr: f64) -> Self {
        Self {
            lr,
            degenerate_to_sgd: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RAdam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for RAdam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl RAdam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update of every parameter group. Groups must keep their sizes
    /// across calls.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        let groups = vec![Group::new(lr); params.len()];
        self.step_groups(params, grads, &groups)
    }

    /// Like [`RAdam::step`] with settings per group.
    pub fn step_groups(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], groups: &[Group]) -> Result<()> {
        if let Some(g) = groups.iter().find(|g| !(g.lr > 0.0)) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", g.lr)));
        }
        let lrs = groups;
        if params.len() != grads.len() || params.len() != lrs.len() {
            return Err(Error::Shape(format!(
                "{} parameter groups, {} gradients, {} learning rates",
                params.len(),
                grads.len(),
                lrs.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if self.m.get(k).map(Vec::len) != Some(p.len()) || p.len() != g.len() {
                return Err(Error::Shape(format!("parameter group {k} changed size")));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter group {k}")));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * b2.powf(t) / bc2;
        let rect = (rho_t > 5.0).then(|| {
            ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
        });
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Group { lr, degenerate_to_sgd } = groups[k];
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                p[i] -= match rect {
                    Some(r) => lr * m_hat * r * bc2.sqrt() / (v[i].sqrt() + self.eps),
                    None if degenerate_to_sgd => lr * m_hat,
                    None => 0.0,
                };
            }
        }
        Ok(())
    }
}
