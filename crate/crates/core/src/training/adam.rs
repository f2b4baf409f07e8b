//! Adam with bias correction over named parameter groups.

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

/// First/second moment buffers per parameter tensor, in a fixed group order.
#[derive(Debug, Clone)]
pub struct Adam {
    groups: Vec<Moments>,
    step: usize,
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    /// `sizes[i]` is the element count of parameter group i.
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            groups: sizes
                .iter()
                .map(|&n| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect(),
            step: 0,
        }
    }

    /// Apply one update. `params[i]` and `grads[i]` must match the group
    /// layout given at construction.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], lr: f64) {
        assert_eq!(params.len(), self.groups.len());
        assert_eq!(grads.len(), self.groups.len());
        self.step += 1;
        let t = self.step as i32;
        let m_correction = 1.0 - BETA1.powi(t);
        let v_correction = 1.0 - BETA2.powi(t);
        for ((param, grad), moments) in params.iter_mut().zip(grads).zip(&mut self.groups) {
            assert_eq!(param.len(), moments.m.len());
            assert_eq!(grad.len(), moments.m.len());
            for i in 0..param.len() {
                let g = grad[i];
                moments.m[i] = BETA1 * moments.m[i] + (1.0 - BETA1) * g;
                moments.v[i] = BETA2 * moments.v[i] + (1.0 - BETA2) * g * g;
                let m_hat = moments.m[i] / m_correction;
                let v_hat = moments.v[i] / v_correction;
                param[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
    }
}
