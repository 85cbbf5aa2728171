use serde::{Deserialize, Serialize};

use super::Parameterized;

/// Linear decay from `start` to `end` over `steps` updates, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    pub steps: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            start: lr,
            end: lr,
            steps: 1,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        if self.steps == 0 {
            return self.end;
        }
        let frac = (step as f64 / self.steps as f64).min(1.0);
        self.start + (self.end - self.start) * frac
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(schedule: LrSchedule) -> Self {
        Self {
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.at(self.step)
    }

    fn ensure_shapes(&mut self, lens: &[usize]) {
        if self.m.len() != lens.len() {
            self.m = lens.iter().map(|&n| vec![0.0; n]).collect();
            self.v = lens.iter().map(|&n| vec![0.0; n]).collect();
        }
        for (i, &n) in lens.iter().enumerate() {
            assert_eq!(self.m[i].len(), n, "adam moment shape drift");
        }
    }

    /// One bias-corrected Adam update over `params[i] -= lr * m̂ / (sqrt(v̂) + eps)`.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len());
        let lens: Vec<usize> = params.iter().map(|p| p.len()).collect();
        self.ensure_shapes(&lens);
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.len(), g.len(), "adam grad shape");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Updates every parameter of `module` from its accumulated gradients.
    /// Frozen modules are left untouched and the step counter does not move.
    pub fn step_module<M: Parameterized + ?Sized>(&mut self, module: &mut M) {
        if module.is_frozen() {
            return;
        }
        let mut params = module.params_mut();
        let grads: Vec<Vec<f64>> = params.iter().map(|p| p.grad.clone()).collect();
        let mut values: Vec<&mut [f64]> = params.iter_mut().map(|p| p.value.as_mut_slice()).collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        self.update(&mut values, &grad_refs);
    }
}
