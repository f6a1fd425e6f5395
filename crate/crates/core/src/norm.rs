//! Layer and batch normalization with trainable affine parameters.
//!
//! Both normalize with `sigma = sqrt(population variance + eps)` and expose
//! the statistics they used, so callers can reconstruct the forward output
//! exactly from them.

use crate::error::{Error, Result};
use crate::tape::{NormStats, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
    eps: f64,
}

impl LayerNormParams {
    /// Gain 1, bias 0, `eps = 1e-5`.
    pub fn new(d: usize) -> Self {
        Self {
            gain: Tensor::ones([d]).with_requires_grad(true),
            bias: Tensor::zeros([d]).with_requires_grad(true),
            eps: DEFAULT_EPS,
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer norm eps must be > 0, got {eps}")));
        }
        self.eps = eps;
        Ok(self)
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn dim(&self) -> usize {
        self.gain.numel()
    }
}

/// Layer norm output together with the per-row statistics used.
#[derive(Debug, Clone)]
pub struct LayerNormOutput<'t> {
    pub y: Var<'t>,
    pub gain: Var<'t>,
    pub bias: Var<'t>,
    pub stats: NormStats,
}

/// Per row: `gain * (x - mean) / sqrt(var + eps) + bias`, where `gain` and
/// `bias` are already on the tape.
pub fn layer_norm_with<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    gain: Var<'t>,
    bias: Var<'t>,
    eps: f64,
) -> Result<(Var<'t>, NormStats)> {
    tape.normalize(x, gain, bias, eps, true)
}

/// Binds `p` onto the tape as fresh leaves and normalizes `x` with it.
pub fn layer_norm<'t>(tape: &'t Tape, x: Var<'t>, p: &LayerNormParams) -> Result<LayerNormOutput<'t>> {
    let gain = tape.leaf(&p.gain);
    let bias = tape.leaf(&p.bias);
    let (y, stats) = layer_norm_with(tape, x, gain, bias, p.eps)?;
    Ok(LayerNormOutput { y, gain, bias, stats })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    momentum: f64,
    eps: f64,
    pub mode: Mode,
}

impl BatchNormParams {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Tensor::ones([d]).with_requires_grad(true),
            bias: Tensor::zeros([d]).with_requires_grad(true),
            running_mean: Tensor::zeros([d]),
            running_var: Tensor::ones([d]),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
            mode: Mode::Training,
        }
    }

    pub fn with_momentum(mut self, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Config(format!(
                "batch norm momentum must lie in (0, 1), got {momentum}"
            )));
        }
        self.momentum = momentum;
        Ok(self)
    }

    pub fn with_eps(mut self, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("batch norm eps must be > 0, got {eps}")));
        }
        self.eps = eps;
        Ok(self)
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn dim(&self) -> usize {
        self.gain.numel()
    }

    /// Folds batch statistics into the running estimates. No-op outside
    /// training mode.
    pub fn update_running(&mut self, batch: &NormStats) {
        if self.mode != Mode::Training {
            return;
        }
        let m = self.momentum;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&batch.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&batch.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Batch norm with gain and bias already on the tape. In training mode the
/// batch statistics are returned so the caller can fold them in with
/// [`BatchNormParams::update_running`]; in inference mode only the running
/// statistics are used and `None` is returned.
pub fn batch_norm_with<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    gain: Var<'t>,
    bias: Var<'t>,
    p: &BatchNormParams,
) -> Result<(Var<'t>, Option<NormStats>)> {
    match p.mode {
        Mode::Training => {
            let shape = x.shape();
            if shape.len() == 2 && shape[0] < 2 {
                return Err(Error::Contract(
                    "batch norm in training mode needs a batch of at least 2".into(),
                ));
            }
            let (y, stats) = tape.normalize(x, gain, bias, p.eps, false)?;
            Ok((y, Some(stats)))
        }
        Mode::Inference => {
            let sigma: Vec<f64> = p
                .running_var
                .data()
                .iter()
                .map(|v| (v + p.eps).sqrt())
                .collect();
            let y = tape.frozen_normalize(x, gain, bias, p.running_mean.data(), &sigma)?;
            Ok((y, None))
        }
    }
}

/// Binds `p` onto the tape, normalizes, and updates running statistics when
/// in training mode.
pub fn batch_norm<'t>(tape: &'t Tape, x: Var<'t>, p: &mut BatchNormParams) -> Result<Var<'t>> {
    let gain = tape.leaf(&p.gain);
    let bias = tape.leaf(&p.bias);
    let (y, stats) = batch_norm_with(tape, x, gain, bias, p)?;
    if let Some(stats) = stats {
        p.update_running(&stats);
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, DEFAULT_EPS as FD_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn layer_norm_two_points() {
        let tape = Tape::new();
        let p = LayerNormParams::new(2).with_eps(1e-300).unwrap();
        let x = tape.leaf(&t(&[1, 2], &[1., 3.]));
        let out = layer_norm(&tape, x, &p).unwrap();
        assert_eq!(out.y.data(), vec![-1.0, 1.0]);
        assert_eq!(out.stats.mean, vec![2.0]);
        assert_eq!(out.stats.sigma, vec![1.0]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let tape = Tape::new();
        let p = LayerNormParams::new(3);
        let x = tape.leaf(&t(&[1, 3], &[5., 5., 5.]));
        let out = layer_norm(&tape, x, &p).unwrap();
        assert_eq!(out.y.data(), vec![0.0, 0.0, 0.0]);
        assert!(out.stats.sigma[0] > 0.0);
    }

    #[test]
    fn layer_norm_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn([4, 6], 1.0, &mut rng);
        let gain = Tensor::randn([6], 1.0, &mut rng);
        let bias = Tensor::randn([6], 1.0, &mut rng);
        let w = Tensor::randn([4, 6], 1.0, &mut rng);
        let r = gradcheck(
            |tape, v| {
                let (y, _) = layer_norm_with(tape, v[0], v[1], v[2], DEFAULT_EPS)?;
                Ok(y.mul(v[3])?.sum())
            },
            &[x, gain, bias, w],
            FD_EPS,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn eps_must_be_positive() {
        assert!(LayerNormParams::new(2).with_eps(0.0).is_err());
        assert!(BatchNormParams::new(2).with_eps(-1.0).is_err());
        assert!(BatchNormParams::new(2).with_momentum(1.0).is_err());
    }

    #[test]
    fn batch_norm_column() {
        let tape = Tape::new();
        let mut p = BatchNormParams::new(1).with_eps(1e-300).unwrap();
        let x = tape.leaf(&t(&[2, 1], &[1., 3.]));
        let y = batch_norm(&tape, x, &mut p).unwrap();
        assert_eq!(y.data(), vec![-1.0, 1.0]);
        // running stats: 0.9 * 0 + 0.1 * 2, 0.9 * 1 + 0.1 * 1
        assert!((p.running_mean.data()[0] - 0.2).abs() < 1e-15);
        assert!((p.running_var.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_training_rejects_single_sample() {
        let tape = Tape::new();
        let mut p = BatchNormParams::new(3);
        let x = tape.leaf(&Tensor::ones([1, 3]));
        assert!(matches!(batch_norm(&tape, x, &mut p), Err(Error::Contract(_))));
        p.mode = Mode::Inference;
        assert!(batch_norm(&tape, x, &mut p).is_ok());
    }

    #[test]
    fn batch_norm_inference_identity_and_frozen_stats() {
        let tape = Tape::new();
        let mut p = BatchNormParams::new(3);
        p.mode = Mode::Inference;
        let before = p.clone();
        let xt = t(&[2, 3], &[0.5, -1., 2., 3., 0., -0.25]);
        let x = tape.leaf(&xt);
        let y = batch_norm(&tape, x, &mut p).unwrap();
        let scale = 1.0 / (1.0 + DEFAULT_EPS).sqrt();
        for (a, b) in y.data().iter().zip(xt.data()) {
            assert!((a - b * scale).abs() < 1e-15);
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
        }
        assert_eq!(p, before, "inference must not touch running statistics");
    }

    #[test]
    fn batch_norm_gradcheck_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn([6, 4], 1.0, &mut rng);
        let gain = Tensor::randn([4], 1.0, &mut rng);
        let bias = Tensor::randn([4], 1.0, &mut rng);
        let w = Tensor::randn([6, 4], 1.0, &mut rng);
        let p = BatchNormParams::new(4);
        let r = gradcheck(
            |tape, v| {
                let (y, _) = batch_norm_with(tape, v[0], v[1], v[2], &p)?;
                Ok(y.mul(v[3])?.sum())
            },
            &[x, gain, bias, w],
            FD_EPS,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
