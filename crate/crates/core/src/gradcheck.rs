//! Central finite-difference check of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{ParamCursor, ResidualBlock, ResidualBranch, SkipConstruction};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(input index, coordinate)` where `max_rel_error` was attained.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub tol: f64,
    pub passed: bool,
    /// Every compared coordinate, in input order.
    pub checks: Vec<CoordCheck>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl CoordCheck {
    pub fn rel_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

impl GradcheckReport {
    /// Like `passed`, except that a coordinate whose analytic gradient is
    /// below `zero` in magnitude must instead have a numeric gradient below
    /// `numeric_zero`. Batch statistics cancel per-feature constants, so some
    /// gradients are identically zero and the relative error of rounding
    /// noise is meaningless there.
    pub fn passed_zero_aware(&self, zero: f64, numeric_zero: f64) -> bool {
        self.checks.iter().all(|c| {
            if c.analytic.abs() < zero {
                c.numeric.abs() < numeric_zero
            } else {
                c.rel_error() <= self.tol
            }
        })
    }
}

impl GradcheckReport {
    /// Largest relative error over coordinates whose analytic gradient is at
    /// least `zero` in magnitude.
    pub fn max_rel_error_nonzero(&self, zero: f64) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.analytic.abs() >= zero)
            .map(CoordCheck::rel_error)
            .fold(0.0, f64::max)
    }
}

/// Thresholds used with [`GradcheckReport::passed_zero_aware`] for
/// batch-normalized blocks.
pub const ZERO_ANALYTIC: f64 = 1e-12;
pub const ZERO_NUMERIC: f64 = 1e-9;

/// Checks `sum(block(x) * w)` against finite differences with respect to the
/// input and every block parameter, on a random instance drawn from `seed`.
/// Parameters are perturbed away from their initial values first.
/// Returns the report, whether it passes, and the relative error that
/// decided it (excluding identically zero gradients for batch norm).
pub fn check_block(construction: SkipConstruction, seed: u64, tol: f64) -> Result<(GradcheckReport, bool, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, h, batch) = (4, 5, 3);
    let mut block = ResidualBlock::new(construction, ResidualBranch::mlp(d, h, &mut rng), 1.0);
    for (_, t) in block.params_mut() {
        let noise = Tensor::randn(t.shape().to_vec(), 0.3, &mut rng);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    }
    let mut inputs = vec![
        Tensor::randn([batch, d], 1.0, &mut rng),
        Tensor::randn([batch, d], 1.0, &mut rng),
    ];
    inputs.extend(block.params().into_iter().map(|(_, t)| t.clone()));
    let rep = gradcheck(
        |tape, v| {
            let trace = block.forward_bound(tape, v[0], &mut ParamCursor::new(&v[2..]))?;
            Ok(trace.y.mul(v[1])?.sum())
        },
        &inputs,
        DEFAULT_EPS,
        tol,
    )?;
    let (ok, err) = if construction.kind().norm_label() == "BN" {
        (
            rep.passed_zero_aware(ZERO_ANALYTIC, ZERO_NUMERIC),
            rep.max_rel_error_nonzero(ZERO_ANALYTIC),
        )
    } else {
        (rep.passed, rep.max_rel_error)
    };
    Ok((rep, ok, err))
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&tape, &vars)?;
    let v = out.data();
    if v.len() != 1 {
        return Err(Error::Contract(format!(
            "gradcheck needs a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    Ok(v[0])
}

/// Compares the tape gradient of scalar `f` against
/// `(f(x + eps) - f(x - eps)) / (2 eps)` for every coordinate of every input.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&tape, &vars)?;
        if out.data().len() != 1 {
            return Err(Error::Contract(format!(
                "gradcheck needs a scalar function, got shape {:?}",
                out.shape()
            )));
        }
        let grads = tape.backward(out)?;
        vars.iter().map(|v| grads.wrt(*v)).collect()
    };

    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut max_rel_error = 0.0;
    let mut worst = None;
    let mut checks = Vec::new();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let check = CoordCheck {
                input: i,
                index: j,
                analytic: analytic[i].data()[j],
                numeric,
            };
            let err = check.rel_error();
            // NaN must not be swallowed by the max.
            if err > max_rel_error || err.is_nan() {
                max_rel_error = err;
                worst = Some((i, j));
            }
            checks.push(check);
        }
    }
    Ok(GradcheckReport {
        max_rel_error,
        worst,
        coordinates: checks.len(),
        tol,
        passed: max_rel_error <= tol,
        checks,
    })
}
