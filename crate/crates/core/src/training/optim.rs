use crate::model::ParameterSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`
/// and returns the norm before scaling. `max_norm = 0` leaves them alone.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}

/// Bias-corrected Adam with global gradient-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub clip_norm: f64,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(params: &ParameterSet, lr: f64, clip_norm: f64) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            lr,
            clip_norm,
            state: OptimizerState {
                m: zeros.clone(),
                v: zeros,
                step: 0,
            },
        }
    }

    /// One update; returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &[Vec<f32>]) -> f64 {
        let mut grads = grads.to_vec();
        let norm = clip_global_norm(&mut grads, self.clip_norm);
        let st = &mut self.state;
        st.step += 1;
        let t = st.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let (b1, b2) = (BETA1 as f32, BETA2 as f32);
        let step_size = (self.lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let eps = EPSILON as f32;
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(&grads)
            .zip(&mut st.m)
            .zip(&mut st.v)
        {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step_size * *m / (v.sqrt() / c2_sqrt + eps);
            }
        }
        norm
    }
}
