use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment buffers for a fixed list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Real>(params: &[Tensor<T>]) -> Self {
        Self::with_sizes(params.iter().map(|p| p.numel()))
    }

    pub fn with_sizes(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        AdamState {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update. Moments are kept in f64 whatever `T` is.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.numel() != m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam: param {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (j, (w, &gr)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gr = gr.as_f64();
            m[j] = b1 * m[j] + (1.0 - b1) * gr;
            v[j] = b2 * v[j] + (1.0 - b2) * gr * gr;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w = T::of(w.as_f64() - lr * mhat / (vhat.sqrt() + eps));
        }
    }
    Ok(())
}

/// Step decay: the rate is multiplied by `gamma` at every milestone reached.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base_lr: 1e-6,
            milestones: vec![75, 150],
            gamma: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn new(base_lr: f64, milestones: Vec<usize>, gamma: f64) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) || !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {base_lr} and gamma {gamma} must be positive"
            )));
        }
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "milestones {milestones:?} must be strictly ascending"
            )));
        }
        Ok(LrSchedule {
            base_lr,
            milestones,
            gamma,
        })
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        lr_at_epoch(self, epoch)
    }
}

pub fn lr_at_epoch(schedule: &LrSchedule, epoch: usize) -> f64 {
    // Repeated multiplication, like a scheduler decaying its rate in place.
    schedule
        .milestones
        .iter()
        .filter(|&&m| m <= epoch)
        .fold(schedule.base_lr, |lr, _| lr * schedule.gamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap()];
        let g = vec![Tensor::new(vec![3], vec![0.5, -2.0, 0.0]).unwrap()];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 0.01).unwrap();
        let d = p[0].data();
        assert!((d[0] - 0.99).abs() < 1e-9);
        assert!((d[1] - 1.01).abs() < 1e-9);
        assert_eq!(d[2], 1.0);
    }

    #[test]
    fn quadratic_matches_scalar_oracle() {
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut st = AdamState::new(&p);
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = vec![Tensor::scalar(2.0 * p[0].data()[0])];
            adam_step(&mut p, &g, &mut st, 0.1).unwrap();
            let gw = 2.0 * w;
            m = 0.9 * m + 0.1 * gw;
            v = 0.999 * v + 0.001 * gw * gw;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0].data()[0] - w).abs() < 1e-12);
    }

    #[test]
    fn schedule_boundaries() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at_epoch(0), 1e-6);
        assert_eq!(s.lr_at_epoch(74), 1e-6);
        assert_eq!(s.lr_at_epoch(75), 1e-7);
        assert_eq!(s.lr_at_epoch(149), 1e-7);
        assert_eq!(s.lr_at_epoch(150), 1e-8);
        assert!(LrSchedule::new(1e-3, vec![5, 5], 0.1).is_err());
    }
}
