use serde::{Deserialize, Serialize};

use super::{Mlp, MlpGrads, NetError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam on a flat slice. `step` is the 1-based step index.
pub fn adam_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], step: u64, lr: f64) {
    let c1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Adam moments for one [`Mlp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: MlpGrads,
    pub second_moment: MlpGrads,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(params: &Mlp) -> Self {
        Self {
            first_moment: params.zero_grads(),
            second_moment: params.zero_grads(),
            step_count: 0,
        }
    }

    /// Checks that the moments mirror the parameter shapes.
    pub fn validate_for(&self, params: &Mlp) -> Result<(), NetError> {
        let shapes = |g: &MlpGrads| {
            g.layers
                .iter()
                .map(|l| (l.weight.shape(), l.weight.data().len(), l.bias.len()))
                .collect::<Vec<_>>()
        };
        let want: Vec<_> = params
            .layers()
            .iter()
            .map(|l| (l.weight.shape(), l.weight.data().len(), l.bias.len()))
            .collect();
        if shapes(&self.first_moment) != want || shapes(&self.second_moment) != want {
            return Err(NetError::Shape("adam moments do not match parameter shapes".into()));
        }
        Ok(())
    }

    /// One descent step. Non-finite gradients are rejected before anything
    /// is modified.
    pub fn step(&mut self, params: &mut Mlp, grads: &MlpGrads, lr: f64) -> Result<(), NetError> {
        if grads.layers.len() != params.layers().len() {
            return Err(NetError::Shape("gradient layer count differs from parameters".into()));
        }
        for (l, (g, p)) in grads.layers.iter().zip(params.layers()).enumerate() {
            if g.weight.shape() != p.weight.shape() || g.bias.len() != p.bias.len() {
                return Err(NetError::Shape(format!("gradient of layer {l} has the wrong shape")));
            }
            if !(g.weight.all_finite() && g.bias.iter().all(|v| v.is_finite())) {
                return Err(NetError::NonFinite(format!("gradient of layer {l}")));
            }
        }
        self.validate_for(params)?;
        self.step_count += 1;
        let t = self.step_count;
        for (l, p) in params.layers_mut().iter_mut().enumerate() {
            let g = &grads.layers[l];
            let m = &mut self.first_moment.layers[l];
            let v = &mut self.second_moment.layers[l];
            adam_update(p.weight.data_mut(), g.weight.data(), m.weight.data_mut(), v.weight.data_mut(), t, lr);
            adam_update(&mut p.bias, &g.bias, &mut m.bias, &mut v.bias, t, lr);
        }
        Ok(())
    }
}

/// Adam state for a free parameter vector (e.g. a policy's log-std).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamVec {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamVec {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), NetError> {
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(NetError::Shape("adam vector length mismatch".into()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(NetError::NonFinite("vector gradient".into()));
        }
        self.step_count += 1;
        adam_update(
            params,
            grads,
            &mut self.first_moment,
            &mut self.second_moment,
            self.step_count,
            lr,
        );
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Dense, Tensor2};

    fn scalar(w: f64) -> Mlp {
        Mlp::from_layers(
            vec![Dense {
                weight: Tensor2::from_vec(1, 1, vec![w]).unwrap(),
                bias: vec![0.0],
            }],
            Activation::Linear,
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut net = Mlp::new(&[3, 4, 1], Activation::Linear, 5).unwrap();
        let before = net.clone();
        let mut adam = AdamState::new(&net);
        let g = net.zero_grads();
        adam.step(&mut net, &g, 0.1).unwrap();
        assert_eq!(net, before);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1 after bias correction: w -= 0.01 / (1 + 1e-8)
        let mut net = scalar(0.0);
        let mut adam = AdamState::new(&net);
        let mut g = net.zero_grads();
        g.layers[0].weight.data_mut()[0] = 1.0;
        adam.step(&mut net, &g, 0.01).unwrap();
        let w = net.layers()[0].weight.data()[0];
        assert!((w - (-0.01 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn fresh_moment_step_depends_on_sign_only() {
        for g0 in [1e-3, 0.5, 42.0] {
            let mut net = scalar(0.0);
            let mut adam = AdamState::new(&net);
            let mut g = net.zero_grads();
            g.layers[0].weight.data_mut()[0] = -g0;
            adam.step(&mut net, &g, 0.01).unwrap();
            let w = net.layers()[0].weight.data()[0];
            assert!((w - 0.01).abs() < 1e-6, "{w}");
        }
    }

    #[test]
    fn nan_gradient_rejected_untouched() {
        let mut net = Mlp::new(&[2, 3, 1], Activation::Linear, 5).unwrap();
        let before = net.clone();
        let mut adam = AdamState::new(&net);
        let mut g = net.zero_grads();
        g.layers[1].bias[0] = f64::NAN;
        let err = adam.step(&mut net, &g, 0.1).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
        assert_eq!(net, before);
        assert_eq!(adam.step_count, 0);
    }
}
