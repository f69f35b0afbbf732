//! RMSProp over the model's parameter groups.

use serde::{Deserialize, Serialize};

use crate::network::{GroupGrads, Model};

/// RMSProp without momentum or centering:
/// `v <- decay * v + (1 - decay) * g^2`, `p <- p - lr * g / (sqrt(v) + eps)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub decay: f64,
    pub eps: f64,
    state: [Vec<f64>; 4],
}

impl RmsProp {
    pub const DEFAULT_DECAY: f64 = 0.99;
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new(model: &Model) -> Self {
        Self::with_params(model, Self::DEFAULT_DECAY, Self::DEFAULT_EPS)
    }

    pub fn with_params(model: &Model, decay: f64, eps: f64) -> Self {
        RmsProp {
            decay,
            eps,
            state: model.params.clone().map(|g| vec![0.0; g.len()]),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &GroupGrads, lr: f64) {
        for (gi, (params, state)) in model.params.iter_mut().zip(self.state.iter_mut()).enumerate() {
            let g = &grads.0[gi];
            for ((p, v), &gr) in params.iter_mut().zip(state.iter_mut()).zip(g) {
                *v = self.decay * *v + (1.0 - self.decay) * gr * gr;
                *p -= lr * gr / (v.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;

    #[test]
    fn first_step_matches_closed_form() {
        let cfg = ModelConfig {
            input_height: 8,
            input_width: 8,
            stage_channels: vec![2],
            dan_width: 2,
            head_width: 2,
            keypoints: 1,
            disc_hidden: 2,
            stride: 2,
            ..ModelConfig::default()
        };
        let mut m = Model::build(&cfg, 1).unwrap();
        let before = m.params.clone();
        let mut g = GroupGrads::zeros_like(&m);
        g.0[0][0] = 2.0;
        g.0[3][1] = -0.5;
        let mut opt = RmsProp::new(&m);
        opt.step(&mut m, &g, 0.01);
        // v = 0.01 g^2, so the step is lr * g / (0.1 |g| + eps)
        let exp0 = before[0][0] - 0.01 * 2.0 / (0.1 * 2.0 + 1e-8);
        let exp3 = before[3][1] + 0.01 * 0.5 / (0.1 * 0.5 + 1e-8);
        assert!((m.params[0][0] - exp0).abs() < 1e-12);
        assert!((m.params[3][1] - exp3).abs() < 1e-12);
        assert_eq!(m.params[0][1], before[0][1]);
        assert_eq!(m.params[2], before[2]);
    }
}
