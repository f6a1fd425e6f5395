//! Skip-connection constructions over a pluggable residual branch.
//!
//! Every construction is an instance of `y = G(lambda * x + F(x))` except the
//! recursive ones, which apply the normalized skip `lambda` times:
//! `y_1 = N_1(x + F(x))`, `y_k = N_k(x + y_{k-1})`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::norm::{batch_norm_with, layer_norm_with, BatchNormParams, LayerNormParams, Mode};
use crate::ratio::{ratio_general, RatioLevel, RatioWitness};
use crate::tape::{NormStats, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SkipKind {
    /// `x + F(x)`
    PlainSkip,
    /// `lambda * x + F(x)`
    XSkip,
    /// `LN(lambda * x + F(x))`
    XSkipLN,
    /// `lambda` nested applications of `LN_k(x + .)` starting from `F(x)`
    RSkipLN,
    /// `LN(w * x + F(x))` with a trainable vector `w`
    WSkipLN,
    /// `BN(lambda * x + F(x))`
    XSkipBN,
    /// recursive construction with batch norm
    RSkipBN,
    /// `LN(x + c * F(x))`
    ContractedFLN,
}

impl SkipKind {
    pub const ALL: [SkipKind; 8] = [
        SkipKind::PlainSkip,
        SkipKind::XSkip,
        SkipKind::XSkipLN,
        SkipKind::RSkipLN,
        SkipKind::WSkipLN,
        SkipKind::XSkipBN,
        SkipKind::RSkipBN,
        SkipKind::ContractedFLN,
    ];

    pub fn code(self) -> u8 {
        match self {
            SkipKind::PlainSkip => 0,
            SkipKind::XSkip => 1,
            SkipKind::XSkipLN => 2,
            SkipKind::RSkipLN => 3,
            SkipKind::WSkipLN => 4,
            SkipKind::XSkipBN => 5,
            SkipKind::RSkipBN => 6,
            SkipKind::ContractedFLN => 7,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            SkipKind::PlainSkip => "plain",
            SkipKind::XSkip => "xskip",
            SkipKind::XSkipLN => "xskip-ln",
            SkipKind::RSkipLN => "rskip-ln",
            SkipKind::WSkipLN => "wskip-ln",
            SkipKind::XSkipBN => "xskip-bn",
            SkipKind::RSkipBN => "rskip-bn",
            SkipKind::ContractedFLN => "contracted-ln",
        }
    }

    pub fn uses_lambda(self) -> bool {
        matches!(
            self,
            SkipKind::XSkip
                | SkipKind::XSkipLN
                | SkipKind::RSkipLN
                | SkipKind::XSkipBN
                | SkipKind::RSkipBN
        )
    }

    pub fn is_recursive(self) -> bool {
        matches!(self, SkipKind::RSkipLN | SkipKind::RSkipBN)
    }

    /// The `G` of the block: `None`, `"LN"` or `"BN"`.
    pub fn norm_label(self) -> &'static str {
        match self {
            SkipKind::PlainSkip | SkipKind::XSkip => "-",
            SkipKind::XSkipBN | SkipKind::RSkipBN => "BN",
            _ => "LN",
        }
    }

    pub fn uses_layer_norm(self) -> bool {
        self.norm_label() == "LN"
    }
}

impl FromStr for SkipKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['_', '+'], "-");
        SkipKind::ALL
            .into_iter()
            .find(|k| k.cli_name() == norm || format!("{k:?}").to_ascii_lowercase() == norm)
            .ok_or_else(|| Error::Config(format!("unknown construction {s:?}")))
    }
}

/// Algebraic description of one block's combination rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkipConstruction {
    kind: SkipKind,
    lambda: f64,
    residual_scale: f64,
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

impl SkipConstruction {
    pub fn new(kind: SkipKind, lambda: f64, residual_scale: f64) -> Result<Self> {
        let bad = |msg: String| Err(Error::Config(msg));
        if kind.uses_lambda() {
            if !(lambda.is_finite() && lambda > 0.0) {
                return bad(format!("{kind:?} needs lambda > 0, got {lambda}"));
            }
            if kind.is_recursive() && (lambda.fract() != 0.0 || lambda < 1.0) {
                return bad(format!("{kind:?} needs an integer lambda >= 1, got {lambda}"));
            }
        } else if lambda != 1.0 {
            return bad(format!("{kind:?} does not take lambda (got {lambda})"));
        }
        if kind == SkipKind::ContractedFLN {
            if !(residual_scale.is_finite() && residual_scale > 0.0) {
                return bad(format!("residual scale must be > 0, got {residual_scale}"));
            }
        } else if residual_scale != 1.0 {
            return bad(format!("{kind:?} does not take a residual scale (got {residual_scale})"));
        }
        Ok(Self {
            kind,
            lambda,
            residual_scale,
        })
    }

    pub fn plain() -> Self {
        Self::new(SkipKind::PlainSkip, 1.0, 1.0).unwrap()
    }

    pub fn xskip(lambda: f64) -> Result<Self> {
        Self::new(SkipKind::XSkip, lambda, 1.0)
    }

    pub fn xskip_ln(lambda: f64) -> Result<Self> {
        Self::new(SkipKind::XSkipLN, lambda, 1.0)
    }

    pub fn rskip_ln(levels: u32) -> Result<Self> {
        Self::new(SkipKind::RSkipLN, levels as f64, 1.0)
    }

    pub fn wskip_ln() -> Self {
        Self::new(SkipKind::WSkipLN, 1.0, 1.0).unwrap()
    }

    pub fn xskip_bn(lambda: f64) -> Result<Self> {
        Self::new(SkipKind::XSkipBN, lambda, 1.0)
    }

    pub fn rskip_bn(levels: u32) -> Result<Self> {
        Self::new(SkipKind::RSkipBN, levels as f64, 1.0)
    }

    pub fn contracted_ln(c: f64) -> Result<Self> {
        Self::new(SkipKind::ContractedFLN, 1.0, c)
    }

    pub fn kind(&self) -> SkipKind {
        self.kind
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn residual_scale(&self) -> f64 {
        self.residual_scale
    }

    /// Number of recursion levels for recursive kinds, 1 otherwise.
    pub fn levels(&self) -> usize {
        if self.kind.is_recursive() {
            self.lambda as usize
        } else {
            1
        }
    }

    /// Number of normalization instances a block of this kind owns.
    pub fn norm_count(&self) -> usize {
        match self.kind {
            SkipKind::PlainSkip | SkipKind::XSkip => 0,
            SkipKind::RSkipLN | SkipKind::RSkipBN => self.levels(),
            _ => 1,
        }
    }

    /// Table-style label, e.g. `2xSkip+LN`, `3rSkip+LN`, `LN(x+3F)`.
    pub fn label(&self) -> String {
        let l = fmt_num(self.lambda);
        match self.kind {
            SkipKind::PlainSkip => "Skip".into(),
            SkipKind::XSkip => format!("{l}xSkip"),
            SkipKind::XSkipLN => format!("{l}xSkip+LN"),
            SkipKind::RSkipLN => format!("{l}rSkip+LN"),
            SkipKind::WSkipLN => "wSkip+LN".into(),
            SkipKind::XSkipBN => format!("{l}xSkip+BN"),
            SkipKind::RSkipBN => format!("{l}rSkip+BN"),
            SkipKind::ContractedFLN => format!("LN(x+{}F)", fmt_num(self.residual_scale)),
        }
    }
}

impl fmt::Display for SkipConstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for SkipConstruction {
    type Err = Error;

    /// Parses the labels produced by [`SkipConstruction::label`].
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let err = || Error::Config(format!("cannot parse construction label {s:?}"));
        if s == "Skip" {
            return Ok(Self::plain());
        }
        if s == "wSkip+LN" {
            return Ok(Self::wskip_ln());
        }
        if let Some(c) = s.strip_prefix("LN(x+").and_then(|r| r.strip_suffix("F)")) {
            return Self::contracted_ln(c.parse().map_err(|_| err())?);
        }
        let (kind, num) = if let Some(n) = s.strip_suffix("xSkip+LN") {
            (SkipKind::XSkipLN, n)
        } else if let Some(n) = s.strip_suffix("rSkip+LN") {
            (SkipKind::RSkipLN, n)
        } else if let Some(n) = s.strip_suffix("xSkip+BN") {
            (SkipKind::XSkipBN, n)
        } else if let Some(n) = s.strip_suffix("rSkip+BN") {
            (SkipKind::RSkipBN, n)
        } else if let Some(n) = s.strip_suffix("xSkip") {
            (SkipKind::XSkip, n)
        } else {
            return Err(err());
        };
        Self::new(kind, num.parse().map_err(|_| err())?, 1.0)
    }
}

/// Caller-supplied differentiable map `[batch, d] -> [batch, d]`.
pub type BranchFn = dyn for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>> + Send + Sync;

/// The residual branch `F`.
#[derive(Clone)]
#[allow(clippy::large_enum_variant)]
pub enum ResidualBranch {
    /// `relu(x W1 + b1) W2 + b2`, `d -> hidden -> d`.
    Mlp {
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
    /// Parameter-free custom map over width `d`.
    Custom { width: usize, f: Arc<BranchFn> },
}

impl fmt::Debug for ResidualBranch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResidualBranch::Mlp { w1, .. } => f
                .debug_struct("Mlp")
                .field("width", &w1.shape()[0])
                .field("hidden", &w1.shape()[1])
                .finish(),
            ResidualBranch::Custom { width, .. } => {
                f.debug_struct("Custom").field("width", width).finish()
            }
        }
    }
}

/// Uniform in `±1/sqrt(fan_in)`.
pub(crate) fn fan_in_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform([fan_in, fan_out], -bound, bound, rng).with_requires_grad(true)
}

impl ResidualBranch {
    pub fn mlp<R: Rng + ?Sized>(width: usize, hidden: usize, rng: &mut R) -> Self {
        ResidualBranch::Mlp {
            w1: fan_in_uniform(width, hidden, rng),
            b1: Tensor::zeros([hidden]).with_requires_grad(true),
            w2: fan_in_uniform(hidden, width, rng),
            b2: Tensor::zeros([width]).with_requires_grad(true),
        }
    }

    pub fn custom<F>(width: usize, f: F) -> Self
    where
        F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>> + Send + Sync + 'static,
    {
        ResidualBranch::Custom {
            width,
            f: Arc::new(f),
        }
    }

    pub fn width(&self) -> usize {
        match self {
            ResidualBranch::Mlp { w1, .. } => w1.shape()[0],
            ResidualBranch::Custom { width, .. } => *width,
        }
    }

    /// Makes the branch output exactly zero for every input.
    pub fn zero_output(&mut self) {
        if let ResidualBranch::Mlp { w2, b2, .. } = self {
            w2.data_mut().fill(0.0);
            b2.data_mut().fill(0.0);
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        match self {
            ResidualBranch::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
            ResidualBranch::Custom { .. } => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            ResidualBranch::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
            ResidualBranch::Custom { .. } => Vec::new(),
        }
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, params: &mut ParamCursor<'_, 't>) -> Result<Var<'t>> {
        match self {
            ResidualBranch::Mlp { .. } => {
                let (w1, b1, w2, b2) = (params.next()?, params.next()?, params.next()?, params.next()?);
                let h = x.matmul(w1)?.add(b1)?.relu();
                h.matmul(w2)?.add(b2)
            }
            ResidualBranch::Custom { width, f } => {
                let y = f(tape, x)?;
                if y.shape() != x.shape() {
                    return dim_err(format!(
                        "custom branch of width {width} mapped {:?} to {:?}",
                        x.shape(),
                        y.shape()
                    ));
                }
                Ok(y)
            }
        }
    }
}

/// Sequential reader over bound parameter variables.
pub struct ParamCursor<'a, 't> {
    vars: &'a [Var<'t>],
    pos: usize,
}

impl<'a, 't> ParamCursor<'a, 't> {
    pub fn new(vars: &'a [Var<'t>]) -> Self {
        Self { vars, pos: 0 }
    }

    pub fn next(&mut self) -> Result<Var<'t>> {
        let v = self.vars.get(self.pos).copied().ok_or_else(|| {
            Error::Contract(format!("ran out of parameters after {}", self.pos))
        })?;
        self.pos += 1;
        Ok(v)
    }

    pub fn remaining(&self) -> usize {
        self.vars.len() - self.pos
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Norm {
    Layer(LayerNormParams),
    Batch(BatchNormParams),
}

impl Norm {
    fn params(&self) -> [&Tensor; 2] {
        match self {
            Norm::Layer(p) => [&p.gain, &p.bias],
            Norm::Batch(p) => [&p.gain, &p.bias],
        }
    }

    fn params_mut(&mut self) -> [&mut Tensor; 2] {
        match self {
            Norm::Layer(p) => [&mut p.gain, &mut p.bias],
            Norm::Batch(p) => [&mut p.gain, &mut p.bias],
        }
    }
}

/// What a parameter is, for optimizer bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamRole {
    /// Branch and projection weights and biases.
    Weight,
    /// Normalization gain or bias.
    NormAffine,
    /// Learned skip vector of `wSkip+LN`.
    SkipGain,
}

/// Normalization statistics captured at one level of a block.
#[derive(Debug, Clone)]
pub struct LevelTrace<'t> {
    pub stats: Option<NormStats>,
    pub gain: Var<'t>,
    pub bias: Var<'t>,
    pub is_layer_norm: bool,
}

/// Everything recorded by one block's forward pass.
#[derive(Debug, Clone)]
pub struct BlockTrace<'t> {
    pub x: Var<'t>,
    pub f: Var<'t>,
    pub y: Var<'t>,
    pub levels: Vec<LevelTrace<'t>>,
}

impl BlockTrace<'_> {
    /// Per-level layer-norm statistics and affine parameters, for recursive
    /// layer-norm blocks.
    pub fn witness(&self) -> Option<RatioWitness> {
        if self.levels.is_empty() || !self.levels.iter().all(|l| l.is_layer_norm) {
            return None;
        }
        let levels = self
            .levels
            .iter()
            .map(|l| {
                let stats = l.stats.as_ref()?;
                Some(RatioLevel {
                    sigma: stats.sigma.clone(),
                    mu: stats.mean.clone(),
                    w: l.gain.data(),
                    b: l.bias.data(),
                })
            })
            .collect::<Option<Vec<_>>>()?;
        let n = levels.len();
        RatioWitness::new(levels, n).ok()
    }
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    construction: SkipConstruction,
    pub branch: ResidualBranch,
    pub norms: Vec<Norm>,
    pub w_skip: Option<Tensor>,
}

impl ResidualBlock {
    /// `w_skip_init` is the constant the `wSkip+LN` vector starts at.
    pub fn new(construction: SkipConstruction, branch: ResidualBranch, w_skip_init: f64) -> Self {
        let d = branch.width();
        let norms = (0..construction.norm_count())
            .map(|_| match construction.kind().norm_label() {
                "BN" => Norm::Batch(BatchNormParams::new(d)),
                _ => Norm::Layer(LayerNormParams::new(d)),
            })
            .collect();
        let w_skip = (construction.kind() == SkipKind::WSkipLN)
            .then(|| Tensor::full([d], w_skip_init).with_requires_grad(true));
        Self {
            construction,
            branch,
            norms,
            w_skip,
        }
    }

    pub fn construction(&self) -> SkipConstruction {
        self.construction
    }

    pub fn width(&self) -> usize {
        self.branch.width()
    }

    /// Parameters in declaration order: branch, norms (gain, bias each),
    /// skip vector.
    pub fn params(&self) -> Vec<(ParamRole, &Tensor)> {
        let mut out: Vec<_> = self.branch.params().into_iter().map(|t| (ParamRole::Weight, t)).collect();
        for n in &self.norms {
            out.extend(n.params().into_iter().map(|t| (ParamRole::NormAffine, t)));
        }
        if let Some(w) = &self.w_skip {
            out.push((ParamRole::SkipGain, w));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamRole, &mut Tensor)> {
        let mut out: Vec<_> = self
            .branch
            .params_mut()
            .into_iter()
            .map(|t| (ParamRole::Weight, t))
            .collect();
        for n in &mut self.norms {
            out.extend(n.params_mut().into_iter().map(|t| (ParamRole::NormAffine, t)));
        }
        if let Some(w) = &mut self.w_skip {
            out.push((ParamRole::SkipGain, w));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Binds this block's parameters onto `tape` as leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params().into_iter().map(|(_, t)| tape.leaf(t)).collect()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        for n in &mut self.norms {
            if let Norm::Batch(p) = n {
                p.mode = mode;
            }
        }
    }

    /// Folds batch statistics recorded in `trace` into the running estimates.
    pub fn apply_batch_stats(&mut self, trace: &BlockTrace<'_>) {
        for (n, level) in self.norms.iter_mut().zip(&trace.levels) {
            if let (Norm::Batch(p), Some(stats)) = (n, &level.stats) {
                p.update_running(stats);
            }
        }
    }

    fn normalize<'t>(
        &self,
        tape: &'t Tape,
        level: usize,
        z: Var<'t>,
        params: &mut ParamCursor<'_, 't>,
    ) -> Result<(Var<'t>, LevelTrace<'t>)> {
        let (gain, bias) = (params.next()?, params.next()?);
        match &self.norms[level] {
            Norm::Layer(p) => {
                let (y, stats) = layer_norm_with(tape, z, gain, bias, p.eps())?;
                let trace = LevelTrace {
                    stats: Some(stats),
                    gain,
                    bias,
                    is_layer_norm: true,
                };
                Ok((y, trace))
            }
            Norm::Batch(p) => {
                let (y, stats) = batch_norm_with(tape, z, gain, bias, p)?;
                let trace = LevelTrace {
                    stats,
                    gain,
                    bias,
                    is_layer_norm: false,
                };
                Ok((y, trace))
            }
        }
    }

    /// Forward pass with parameters read from `params` in declaration order.
    pub fn forward_bound<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        params: &mut ParamCursor<'_, 't>,
    ) -> Result<BlockTrace<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.width() {
            return dim_err(format!(
                "block of width {} got input {:?}",
                self.width(),
                shape
            ));
        }
        let f = self.branch.forward(tape, x, params)?;
        let lambda = self.construction.lambda();
        let mut levels = Vec::with_capacity(self.norms.len());

        let y = match self.construction.kind() {
            SkipKind::PlainSkip => x.add(f)?,
            SkipKind::XSkip => x.scale(lambda).add(f)?,
            SkipKind::XSkipLN | SkipKind::XSkipBN => {
                let (y, l) = self.normalize(tape, 0, x.scale(lambda).add(f)?, params)?;
                levels.push(l);
                y
            }
            SkipKind::ContractedFLN => {
                let z = x.add(f.scale(self.construction.residual_scale()))?;
                let (y, l) = self.normalize(tape, 0, z, params)?;
                levels.push(l);
                y
            }
            SkipKind::RSkipLN | SkipKind::RSkipBN => {
                let mut y = f;
                for level in 0..self.construction.levels() {
                    let (next, l) = self.normalize(tape, level, x.add(y)?, params)?;
                    levels.push(l);
                    y = next;
                }
                y
            }
            SkipKind::WSkipLN => {
                // Norm parameters precede the skip vector in declaration order.
                let (gain, bias) = (params.next()?, params.next()?);
                let w = params.next()?;
                let z = x.mul(w)?.add(f)?;
                let eps = match &self.norms[0] {
                    Norm::Layer(p) => p.eps(),
                    Norm::Batch(p) => p.eps(),
                };
                let (y, stats) = layer_norm_with(tape, z, gain, bias, eps)?;
                levels.push(LevelTrace {
                    stats: Some(stats),
                    gain,
                    bias,
                    is_layer_norm: true,
                });
                y
            }
        };
        Ok(BlockTrace { x, f, y, levels })
    }

    /// Binds parameters and runs the forward pass; returns the trace and the
    /// bound parameter variables.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<(BlockTrace<'t>, Vec<Var<'t>>)> {
        let vars = self.bind(tape);
        let trace = self.forward_bound(tape, x, &mut ParamCursor::new(&vars))?;
        Ok((trace, vars))
    }

    /// Ratio of the shortcut coefficient to the residual coefficient in the
    /// block's unrolled linear form, averaged over batch and features.
    pub fn effective_scale(&self, x: &Tensor) -> Result<f64> {
        self.check_effective_scale()?;
        let tape = Tape::new();
        let (trace, _) = self.forward(&tape, tape.leaf(x))?;
        self.effective_scale_of(&trace)
    }

    fn check_effective_scale(&self) -> Result<()> {
        match self.construction.kind() {
            SkipKind::XSkipLN | SkipKind::RSkipLN | SkipKind::WSkipLN | SkipKind::ContractedFLN => Ok(()),
            kind => Err(Error::Contract(format!(
                "effective scale is defined for layer-normalized shortcuts, not {kind:?}"
            ))),
        }
    }

    /// Effective scale evaluated on statistics recorded by a forward pass of
    /// this block.
    pub fn effective_scale_of(&self, trace: &BlockTrace<'_>) -> Result<f64> {
        self.check_effective_scale()?;
        let c = self.construction;
        match c.kind() {
            SkipKind::XSkipLN => Ok(c.lambda()),
            SkipKind::ContractedFLN => Ok(1.0 / c.residual_scale()),
            SkipKind::WSkipLN => {
                let w = self.w_skip.as_ref().expect("wSkip block owns a skip vector");
                Ok(w.data().iter().sum::<f64>() / w.numel() as f64)
            }
            _ => {
                let witness = trace
                    .witness()
                    .ok_or_else(|| Error::Contract("recursive block produced no witness".into()))?;
                let ratio = ratio_general(&witness)?;
                Ok(ratio.data().iter().sum::<f64>() / ratio.numel() as f64)
            }
        }
    }
}
