use super::{DiffError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one group of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| {
                let z = Tensor::zeros(p.rows(), p.cols());
                (z.clone(), z)
            })
            .unzip();
        Self { config, step: 0, m, v }
    }

    /// One Adam update; `maximize` ascends instead of descending.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
        maximize: bool,
    ) -> Result<(), DiffError> {
        let mut params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(DiffError::Shape {
                op: "adam_step",
                detail: format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(DiffError::Shape {
                    op: "adam_step",
                    detail: format!("slot {i}: param {:?}, grad {:?}", p.shape(), g.shape()),
                });
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let sign = if maximize { -1.0 } else { 1.0 };
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
                let g = sign * g;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &[Tensor],
    state: &mut AdamState,
    maximize: bool,
) -> Result<(), DiffError> {
    state.step(params, grads, maximize)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig { lr, ..AdamConfig::default() }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::row(&[1.0, -2.0]).unwrap();
        let mut st = AdamState::new(cfg(0.1), [&p]);
        adam_step([&mut p], &[Tensor::zeros(1, 2)], &mut st, false).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::scalar(0.0).unwrap();
        let mut st = AdamState::new(cfg(0.1), [&p]);
        adam_step([&mut p], &[Tensor::scalar(1.0).unwrap()], &mut st, false).unwrap();
        assert!((p.item().unwrap() + 0.1).abs() < 1e-8);

        let mut q = Tensor::scalar(0.0).unwrap();
        let mut st = AdamState::new(cfg(0.1), [&q]);
        adam_step([&mut q], &[Tensor::scalar(1.0).unwrap()], &mut st, true).unwrap();
        assert_eq!(q.item().unwrap(), -p.item().unwrap());
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::row(&[1.0, 2.0]).unwrap();
        let mut st = AdamState::new(cfg(0.1), [&p]);
        let err = st.step([&mut p], &[Tensor::zeros(1, 3)], false);
        assert!(matches!(err, Err(DiffError::Shape { .. })));
    }
}
