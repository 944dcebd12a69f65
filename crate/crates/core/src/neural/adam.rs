use crate::error::{Error, Result};

use super::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = trainable(params).map(|s| vec![0.0; s.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

fn trainable(params: &ModelParams) -> impl Iterator<Item = &[f64]> {
    params.slices().into_iter().zip(params.layout()).filter(|(_, l)| l.1.trainable()).map(|(s, _)| s)
}

/// One bias-corrected Adam update; running statistics are left alone.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, cfg: &AdamConfig, lr: f64) -> Result<()> {
    if !params.same_shape(grads) {
        return Err(Error::invalid("gradient shapes differ from parameters"));
    }
    let layout = params.layout();
    if state.m.len() != layout.iter().filter(|l| l.1.trainable()).count() {
        return Err(Error::invalid("optimizer state does not match parameters"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut k = 0;
    for ((w, g), l) in params.slices_mut().into_iter().zip(grads.slices()).zip(&layout) {
        if !l.1.trainable() {
            continue;
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        if m.len() != w.len() {
            return Err(Error::invalid("optimizer state does not match parameters"));
        }
        for i in 0..w.len() {
            let gi = g[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        k += 1;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::model::Architecture;

    fn scalar_net() -> ModelParams {
        ModelParams::zeroed(&Architecture::new(1, vec![], 1))
    }

    #[test]
    fn first_step_hand_value() {
        let mut p = scalar_net();
        let mut g = p.zeros_like();
        g.dense[0].weights[(0, 0)] = 1.0;
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamConfig::default(), 1e-3).unwrap();
        // m̂ = 1, v̂ = 1: Δw = -1e-3 / (1 + 1e-8)
        let dw = p.dense[0].weights[(0, 0)];
        assert!((dw - (-1e-3 / (1.0 + 1e-8))).abs() < 1e-18, "{dw:e}");
        assert!((dw - (-9.99999995e-4)).abs() < 1e-11);
        assert_eq!(p.dense[0].bias[0], 0.0);
    }

    #[test]
    fn zero_gradient_no_move() {
        let mut p = ModelParams::zeroed(&Architecture::new(3, vec![2], 2)).map(|x| x + 0.25);
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamConfig::default(), 1e-3).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn equal_gradients_equal_updates() {
        let mut p = ModelParams::zeroed(&Architecture::new(2, vec![], 1));
        let mut g = p.zeros_like();
        g.dense[0].weights.fill(0.37);
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut st, &AdamConfig::default(), 1e-2).unwrap();
        }
        assert_eq!(p.dense[0].weights[(0, 0)], p.dense[0].weights[(1, 0)]);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn running_stats_untouched() {
        let mut p = ModelParams::zeroed(&Architecture::new(2, vec![3], 1));
        let g = p.map(|_| 1.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamConfig::default(), 0.1).unwrap();
        assert!(p.norms[0].running_mean.iter().all(|&v| v == 0.0));
        assert!(p.norms[0].running_var.iter().all(|&v| v == 1.0));
        assert!(p.norms[0].gamma.iter().all(|&v| v < 1.0));
    }
}
