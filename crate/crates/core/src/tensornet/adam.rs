use serde::{Deserialize, Serialize};

use super::layers::{LayerSpec, ParameterSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: ParameterSet,
    second: ParameterSet,
}

impl AdamState {
    pub fn new(specs: &[LayerSpec], config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: ParameterSet::zeros(specs),
            second: ParameterSet::zeros(specs),
        }
    }

    pub fn first_moment(&self) -> &ParameterSet {
        &self.first
    }

    pub fn second_moment(&self) -> &ParameterSet {
        &self.second
    }
}

/// Applies one Adam update in place.
pub fn adam_step(params: &mut ParameterSet, grads: &ParameterSet, state: &mut AdamState) {
    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let tensors = params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(state.first.tensors_mut().zip(state.second.tensors_mut()));
    for ((p, g), (m, v)) in tensors {
        let iter = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((p, &g), (m, v)) in iter {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_net() -> (Vec<LayerSpec>, ParameterSet) {
        let specs = vec![LayerSpec::dense(1, 1)];
        let mut p = ParameterSet::zeros(&specs);
        p.layer_mut(0).unwrap().weight.data_mut()[0] = 0.5;
        (specs, p)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (specs, mut p) = scalar_net();
        let before = p.clone();
        let mut st = AdamState::new(&specs, AdamConfig::default());
        let g = ParameterSet::zeros(&specs);
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut st);
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (specs, mut p) = scalar_net();
        let mut st = AdamState::new(&specs, AdamConfig::default());
        let mut g = ParameterSet::zeros(&specs);
        g.layer_mut(0).unwrap().weight.data_mut()[0] = 1.0;
        adam_step(&mut p, &g, &mut st);
        // m̂ = 1, v̂ = 1 → Δ = −0.001 / (1 + 1e-8)
        let w = p.layer(0).unwrap().weight.data()[0];
        assert!((0.5 - w - 0.001 / (1.0 + 1e-8)).abs() < 1e-15, "{w}");
        // bias had zero gradient
        assert_eq!(p.layer(0).unwrap().bias.data()[0], 0.0);
    }
}
