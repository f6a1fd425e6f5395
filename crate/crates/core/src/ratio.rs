//! Unrolled linear form of the recursive layer-normalized skip.
//!
//! With the normalization statistics held at the values used in forward, a
//! recursive block is affine in `(x, f)`:
//!
//! ```text
//! y_1 = a_1 (x + f) - a_1 mu_1 + b_1                    a_k = w_k / sigma_k
//! y_k = a_k x + a_k y_{k-1} - a_k mu_k + b_k
//! ```
//!
//! so `y = coef_x * x + coef_f * f + c` with
//! `coef_f = prod_k a_k` and `coef_x / coef_f = 1 + sum_{i=1}^{levels-1} prod_{j=1}^{i} sigma_j / w_j`.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Statistics and affine parameters of one normalization level.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioLevel {
    /// Denominator used in forward, one per row: `sqrt(var + eps)`.
    pub sigma: Vec<f64>,
    /// Row means.
    pub mu: Vec<f64>,
    /// Gain, one per feature.
    pub w: Vec<f64>,
    /// Bias, one per feature.
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioWitness {
    levels: Vec<RatioLevel>,
    batch: usize,
    d: usize,
}

impl RatioWitness {
    /// Checks that there are exactly `lambda` levels of consistent shape and
    /// that every sigma is positive.
    pub fn new(levels: Vec<RatioLevel>, lambda: usize) -> Result<Self> {
        if levels.len() != lambda || lambda == 0 {
            return Err(Error::Contract(format!(
                "witness has {} levels, expected lambda = {lambda}",
                levels.len()
            )));
        }
        let batch = levels[0].sigma.len();
        let d = levels[0].w.len();
        for (j, l) in levels.iter().enumerate() {
            if l.sigma.len() != batch || l.mu.len() != batch || l.w.len() != d || l.b.len() != d {
                return Err(Error::Contract(format!("level {} has inconsistent shapes", j + 1)));
            }
            if let Some(s) = l.sigma.iter().find(|s| !(**s > 0.0)) {
                return Err(Error::Contract(format!("level {} has sigma {s}", j + 1)));
            }
        }
        Ok(Self { levels, batch, d })
    }

    pub fn lambda(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[RatioLevel] {
        &self.levels
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    fn check_singular(&self) -> Result<()> {
        for (j, l) in self.levels.iter().enumerate() {
            if let Some(index) = l.w.iter().position(|w| *w == 0.0) {
                return Err(Error::SingularRatio {
                    level: j + 1,
                    index,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub coef_x: Tensor,
    pub coef_f: Tensor,
    pub const_c: Tensor,
}

impl Decomposition {
    /// `coef_x * x + coef_f * f + const_c`
    pub fn reconstruct(&self, x: &Tensor, f: &Tensor) -> Tensor {
        let data = (0..x.numel())
            .map(|i| {
                self.coef_x.data()[i] * x.data()[i] + self.coef_f.data()[i] * f.data()[i] + self.const_c.data()[i]
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape as x")
    }

    /// `coef_x / coef_f` elementwise.
    pub fn ratio(&self) -> Tensor {
        let data = self
            .coef_x
            .data()
            .iter()
            .zip(self.coef_f.data())
            .map(|(a, b)| a / b)
            .collect();
        Tensor::new(self.coef_x.shape().to_vec(), data).expect("same shape")
    }
}

/// Expands the recursion level by level into per-row, per-feature
/// coefficients of `x`, `f`, and a constant.
pub fn unroll_decompose(witness: &RatioWitness, x: &Tensor, f: &Tensor) -> Result<Decomposition> {
    let (batch, d) = (witness.batch, witness.d);
    if x.shape() != [batch, d] || f.shape() != [batch, d] {
        return Err(Error::Contract(format!(
            "witness is for [{batch}, {d}] but x is {:?} and f is {:?}",
            x.shape(),
            f.shape()
        )));
    }
    let n = batch * d;
    let mut cx = vec![0.0; n];
    let mut cf = vec![0.0; n];
    let mut cc = vec![0.0; n];
    for (j, level) in witness.levels.iter().enumerate() {
        for r in 0..batch {
            for c in 0..d {
                let i = r * d + c;
                let a = level.w[c] / level.sigma[r];
                if j == 0 {
                    cx[i] = a;
                    cf[i] = a;
                    cc[i] = level.b[c] - a * level.mu[r];
                } else {
                    cx[i] = a * (1.0 + cx[i]);
                    cf[i] *= a;
                    cc[i] = a * (cc[i] - level.mu[r]) + level.b[c];
                }
            }
        }
    }
    let shape = [batch, d];
    Ok(Decomposition {
        coef_x: Tensor::new(shape, cx)?,
        coef_f: Tensor::new(shape, cf)?,
        const_c: Tensor::new(shape, cc)?,
    })
}

/// Upper limit of the outer sum in the closed-form ratio
/// `1 + sum_{i=1}^{N} prod_{j=1}^{i} sigma_j / w_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SumBound {
    /// `N = lambda - 1`; agrees with the unrolled recursion.
    LambdaMinusOne,
    /// `N = lambda`; adds one term beyond the unrolled recursion.
    Lambda,
}

/// Closed-form shortcut-to-residual ratio with an explicit sum bound.
pub fn ratio_closed_form(witness: &RatioWitness, bound: SumBound) -> Result<Tensor> {
    witness.check_singular()?;
    let terms = match bound {
        SumBound::LambdaMinusOne => witness.lambda() - 1,
        SumBound::Lambda => witness.lambda(),
    };
    let (batch, d) = (witness.batch, witness.d);
    let mut out = Vec::with_capacity(batch * d);
    for r in 0..batch {
        for c in 0..d {
            let mut prod = 1.0;
            let mut total = 1.0;
            for level in &witness.levels[..terms] {
                prod *= level.sigma[r] / level.w[c];
                total += prod;
            }
            out.push(total);
        }
    }
    Tensor::new([batch, d], out)
}

/// `1 + sum_{i=1}^{lambda-1} prod_{j=1}^{i} sigma_j / w_j`, per row and
/// feature. Equals [`Decomposition::ratio`] for the same witness.
pub fn ratio_general(witness: &RatioWitness) -> Result<Tensor> {
    ratio_closed_form(witness, SumBound::LambdaMinusOne)
}

/// Checks a witness against the block's own forward pass: largest absolute
/// reconstruction error and largest relative ratio discrepancy.
pub fn verify(witness: &RatioWitness, x: &Tensor, f: &Tensor, y: &Tensor) -> Result<(f64, f64)> {
    if y.shape() != x.shape() {
        return dim_err(format!("output {:?} vs input {:?}", y.shape(), x.shape()));
    }
    let dec = unroll_decompose(witness, x, f)?;
    let recon = dec.reconstruct(x, f).max_abs_diff(y);
    let closed = ratio_general(witness)?;
    let rel = closed
        .data()
        .iter()
        .zip(dec.ratio().data())
        .zip(dec.coef_f.data())
        .filter(|(_, cf)| cf.abs() > 1e-8)
        .map(|((a, b), _)| (a - b).abs() / b.abs())
        .fold(0.0, f64::max);
    Ok((recon, rel))
}
