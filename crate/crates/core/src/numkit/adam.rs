use crate::error::{bail, Result};

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers and the step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }
}

/// One bias-corrected Adam update over parallel `params`/`grads` lists.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&[f32]], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() {
        bail!(Shape, "adam: {} params for {} grads", params.len(), grads.len());
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        bail!(Shape, "adam state tracks {} tensors, got {}", state.m.len(), params.len());
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.m[i].len() != g.len() {
            bail!(Shape, "adam tensor {i}: {} values, grad {}, state {}", p.numel(), g.len(), state.m[i].len());
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j] as f64;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *x = (*x as f64 - cfg.lr * mh / (vh.sqrt() + cfg.eps)) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(steps: &[f32], lr: f64) -> (Vec<f32>, AdamState) {
        let mut p = Tensor::vector(vec![1.0]);
        let mut st = AdamState::new();
        let cfg = AdamConfig::with_lr(lr);
        let mut trace = vec![1.0];
        for &g in steps {
            adam_step(&mut [&mut p], &[&[g]], &mut st, &cfg).unwrap();
            trace.push(p.data()[0]);
        }
        (trace, st)
    }

    #[test]
    fn zero_grad_leaves_params_and_decays_moments() {
        let (_, st) = run(&[1.0, 0.0, 0.0], 0.1);
        let (z, zs) = run(&[0.0, 0.0], 0.1);
        assert_eq!(z, vec![1.0, 1.0, 1.0]);
        assert_eq!(zs.first_moment(0), &[0.0]);
        // moments shrink geometrically once gradients stop
        assert!((st.first_moment(0)[0] - 0.1 * 0.81).abs() < 1e-12);
        assert!((st.second_moment(0)[0] - 0.001 * 0.999 * 0.999).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (trace, st) = run(&[1.0], 0.1);
        assert!(((trace[1] - trace[0]) as f64 + 0.1).abs() < 1e-6);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn constant_gradient_steps_do_not_grow() {
        let (trace, _) = run(&[1.0; 5], 0.01);
        let deltas: Vec<f64> = trace.windows(2).map(|w| (w[1] as f64 - w[0] as f64).abs()).collect();
        for w in deltas.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{deltas:?}");
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut st = AdamState::new();
        assert!(adam_step(&mut [&mut p], &[&[1.0]], &mut st, &AdamConfig::with_lr(0.1)).is_err());
    }
}
