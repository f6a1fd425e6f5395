//! Residual models: input projection, a stack of blocks sharing one
//! construction, and an output projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{
    fan_in_uniform, BlockTrace, ParamCursor, ParamRole, ResidualBlock, ResidualBranch,
    SkipConstruction,
};
use crate::error::{dim_err, Error, Result};
use crate::norm::Mode;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: fan_in_uniform(fan_in, fan_out, rng),
            bias: Tensor::zeros([fan_out]).with_requires_grad(true),
        }
    }

    fn forward<'t>(x: Var<'t>, params: &mut ParamCursor<'_, 't>) -> Result<Var<'t>> {
        let (w, b) = (params.next()?, params.next()?);
        x.matmul(w)?.add(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub construction: SkipConstruction,
    pub depth: usize,
    pub input_dim: usize,
    pub width: usize,
    pub hidden: usize,
    pub classes: usize,
    pub seed: u64,
    /// Initial value of every entry of the `wSkip+LN` skip vector.
    pub w_skip_init: f64,
}

impl ModelConfig {
    pub fn new(construction: SkipConstruction, depth: usize, input_dim: usize, width: usize, classes: usize) -> Self {
        Self {
            construction,
            depth,
            input_dim,
            width,
            hidden: width,
            classes,
            seed: 0,
            w_skip_init: 1.0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_w_skip_init(mut self, v: f64) -> Self {
        self.w_skip_init = v;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.construction;
        SkipConstruction::new(c.kind(), c.lambda(), c.residual_scale())?;
        if self.input_dim == 0 || self.width == 0 || self.hidden == 0 {
            return Err(Error::Config("widths must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !self.w_skip_init.is_finite() {
            return Err(Error::Config("w_skip_init must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ResidualModel {
    config: ModelConfig,
    pub input: Linear,
    pub blocks: Vec<ResidualBlock>,
    pub output: Linear,
}

/// Everything recorded by one model forward pass.
#[derive(Debug, Clone)]
pub struct ModelTrace<'t> {
    pub logits: Var<'t>,
    pub blocks: Vec<BlockTrace<'t>>,
    /// Parameter leaves in declaration order.
    pub params: Vec<Var<'t>>,
}

impl ModelTrace<'_> {
    pub fn block_outputs(&self) -> impl Iterator<Item = Var<'_>> + '_ {
        self.blocks.iter().map(|b| b.y)
    }
}

/// Deterministically initializes a model from `cfg.seed`. A depth of 0 gives
/// the two projections only.
pub fn build_model(cfg: &ModelConfig) -> Result<ResidualModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let input = Linear::new(cfg.input_dim, cfg.width, &mut rng);
    let blocks = (0..cfg.depth)
        .map(|_| {
            let branch = ResidualBranch::mlp(cfg.width, cfg.hidden, &mut rng);
            ResidualBlock::new(cfg.construction, branch, cfg.w_skip_init)
        })
        .collect();
    let output = Linear::new(cfg.width, cfg.classes, &mut rng);
    Ok(ResidualModel {
        config: *cfg,
        input,
        blocks,
        output,
    })
}

impl ResidualModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn construction(&self) -> SkipConstruction {
        self.config.construction
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Parameters in declaration order: input projection, blocks, output
    /// projection.
    pub fn params(&self) -> Vec<(ParamRole, &Tensor)> {
        let mut out = vec![
            (ParamRole::Weight, &self.input.weight),
            (ParamRole::Weight, &self.input.bias),
        ];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.push((ParamRole::Weight, &self.output.weight));
        out.push((ParamRole::Weight, &self.output.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamRole, &mut Tensor)> {
        let mut out = vec![
            (ParamRole::Weight, &mut self.input.weight),
            (ParamRole::Weight, &mut self.input.bias),
        ];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.push((ParamRole::Weight, &mut self.output.weight));
        out.push((ParamRole::Weight, &mut self.output.bias));
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// All parameter values concatenated in declaration order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return dim_err(format!("expected {} values, got {}", self.num_params(), flat.len()));
        }
        let mut off = 0;
        for (_, t) in self.params_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params().into_iter().map(|(_, t)| tape.leaf(t)).collect()
    }

    /// Forward pass reading parameters from `params` (declaration order).
    pub fn forward_with<'t>(&self, tape: &'t Tape, params: &[Var<'t>], x: Var<'t>) -> Result<ModelTrace<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return dim_err(format!(
                "model expects [batch, {}], got {:?}",
                self.config.input_dim, shape
            ));
        }
        let mut cursor = ParamCursor::new(params);
        let mut h = Linear::forward(x, &mut cursor)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let trace = block.forward_bound(tape, h, &mut cursor)?;
            h = trace.y;
            blocks.push(trace);
        }
        let logits = Linear::forward(h, &mut cursor)?;
        if cursor.remaining() != 0 {
            return Err(Error::Contract(format!("{} unused parameters", cursor.remaining())));
        }
        Ok(ModelTrace {
            logits,
            blocks,
            params: params.to_vec(),
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<ModelTrace<'t>> {
        let params = self.bind(tape);
        self.forward_with(tape, &params, x)
    }

    /// Logits for a batch, without keeping the tape.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let trace = self.forward(&tape, tape.leaf(x))?;
        Ok(trace.logits.value())
    }

    pub fn set_mode(&mut self, mode: Mode) {
        for b in &mut self.blocks {
            b.set_mode(mode);
        }
    }

    pub fn apply_batch_stats(&mut self, trace: &ModelTrace<'_>) {
        for (b, t) in self.blocks.iter_mut().zip(&trace.blocks) {
            b.apply_batch_stats(t);
        }
    }

    /// Adds the gradient of each bound parameter into the matching tensor.
    pub fn accumulate_grads(&mut self, grads: &Gradients, trace: &ModelTrace<'_>) {
        let gs: Vec<Tensor> = trace.params.iter().map(|v| grads.wrt(*v)).collect();
        for ((_, t), g) in self.params_mut().into_iter().zip(&gs) {
            t.accumulate_grad(g.data());
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.params_mut() {
            t.zero_grad();
        }
    }

    /// Forces every residual branch to output exactly zero.
    pub fn zero_branches(&mut self) {
        for b in &mut self.blocks {
            b.branch.zero_output();
        }
    }
}
