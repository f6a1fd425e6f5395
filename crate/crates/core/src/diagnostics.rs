//! Per-block gradient-norm sweeps and effective-scale probes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block::{ResidualBlock, ResidualBranch, SkipConstruction, SkipKind};
use crate::data::Split;
use crate::error::{dim_err, Error, Result};
use crate::model::ResidualModel;
use crate::norm::Mode;
use crate::ratio::{ratio_closed_form, ratio_general, verify, SumBound};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const DEFAULT_SAMPLES: usize = 2000;
pub const DEFAULT_BATCH: usize = 250;

/// Mean per-sample `||d loss / d y_k||_2` for every block output `y_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub construction: String,
    /// Indexed by block, 0 = block nearest the input.
    pub norms: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
}

impl GradReport {
    /// `max / min` over blocks.
    pub fn spread(&self) -> f64 {
        let max = self.norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = self.norms.iter().copied().fold(f64::INFINITY, f64::min);
        max / min
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["construction", "block_index", "mean_grad_norm"])?;
        for (i, n) in self.norms.iter().enumerate() {
            wtr.write_record([self.construction.clone(), (i + 1).to_string(), n.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepConfig {
    /// Samples drawn without replacement from the data (all if larger).
    pub samples: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            batch_size: DEFAULT_BATCH,
            seed: 0,
        }
    }
}

fn sample_indices(n: usize, want: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if want < n {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(want);
    }
    idx
}

/// Per-block sums of per-sample gradient norms for one batch.
fn batch_norm_sums(model: &ResidualModel, batch: &Split) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let trace = model.forward(&tape, tape.leaf(&batch.x))?;
    let loss = tape.softmax_cross_entropy(trace.logits, &batch.y)?;
    // Undo the batch mean so each row holds that sample's own gradient.
    let root = loss.scale(batch.len() as f64);
    let grads = tape.backward(root)?;
    Ok(trace
        .blocks
        .iter()
        .map(|b| {
            let g = grads.wrt(b.y);
            let d = g.last_dim();
            g.data()
                .chunks_exact(d)
                .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum()
        })
        .collect())
}

/// Runs forward and backward over `data` with the classification loss and
/// averages the per-sample gradient norm at each block output. Batch norm
/// runs on its running statistics so samples do not interact.
pub fn gradient_norm_sweep(model: &ResidualModel, data: &Split, cfg: &SweepConfig) -> Result<GradReport> {
    if data.is_empty() || cfg.samples == 0 {
        return Err(Error::Contract("gradient sweep needs at least one sample".into()));
    }
    if data.x.last_dim() != model.config().input_dim {
        return dim_err(format!(
            "data width {} does not match model input {}",
            data.x.last_dim(),
            model.config().input_dim
        ));
    }
    let mut model = model.clone();
    model.set_mode(Mode::Inference);
    let idx = sample_indices(data.len(), cfg.samples, cfg.seed);
    let batches: Vec<&[usize]> = idx.chunks(cfg.batch_size.max(1)).collect();
    let partial: Vec<Vec<f64>> = batches
        .par_iter()
        .map(|b| batch_norm_sums(&model, &data.batch(b)))
        .collect::<Result<_>>()?;
    // Merge in batch order so the result does not depend on scheduling.
    let mut totals = vec![0.0; model.depth()];
    for p in &partial {
        for (t, v) in totals.iter_mut().zip(p) {
            *t += v;
        }
    }
    let n = idx.len() as f64;
    Ok(GradReport {
        construction: model.construction().label(),
        norms: totals.into_iter().map(|t| t / n).collect(),
        samples: idx.len(),
        seed: cfg.seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleTable {
    pub construction: String,
    pub per_block: Vec<f64>,
    pub mean: f64,
}

impl ScaleTable {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["construction", "block_index", "effective_scale"])?;
        for (i, v) in self.per_block.iter().enumerate() {
            wtr.write_record([self.construction.clone(), (i + 1).to_string(), v.to_string()])?;
        }
        wtr.write_record([self.construction.clone(), "mean".into(), self.mean.to_string()])?;
        wtr.flush()?;
        Ok(())
    }
}

/// Effective skip scale of every block, evaluated on the activations that
/// actually reach each block for input `x`.
pub fn effective_scale_sweep(model: &ResidualModel, x: &Tensor) -> Result<ScaleTable> {
    let kind = model.construction().kind();
    if !kind.uses_layer_norm() || kind == SkipKind::PlainSkip {
        return Err(Error::Contract(format!(
            "effective scale sweep needs a layer-normalized construction, got {kind:?}"
        )));
    }
    let tape = Tape::new();
    let trace = model.forward(&tape, tape.leaf(x))?;
    let per_block = model
        .blocks
        .iter()
        .zip(&trace.blocks)
        .map(|(b, t)| b.effective_scale_of(t))
        .collect::<Result<Vec<_>>>()?;
    let mean = if per_block.is_empty() {
        f64::NAN
    } else {
        per_block.iter().sum::<f64>() / per_block.len() as f64
    };
    Ok(ScaleTable {
        construction: model.construction().label(),
        per_block,
        mean,
    })
}

/// Agreement between recursive blocks and their unrolled linear form over
/// many random instances of one level count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioCheckRow {
    pub lambda: usize,
    pub instances: usize,
    pub max_reconstruction_error: f64,
    pub max_ratio_discrepancy: f64,
    /// Largest relative gap between the closed form summed to `lambda` and
    /// the one summed to `lambda - 1`, which matches the unrolled form.
    pub max_extra_term_relative: f64,
}

/// Random recursive layer-norm blocks of `width` features with perturbed
/// parameters, checked against [`unroll_decompose`] and [`ratio_general`].
pub fn ratio_check(lambda: u32, instances: usize, width: usize, seed: u64) -> Result<RatioCheckRow> {
    let construction = SkipConstruction::rskip_ln(lambda)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row = RatioCheckRow {
        lambda: lambda as usize,
        instances,
        max_reconstruction_error: 0.0,
        max_ratio_discrepancy: 0.0,
        max_extra_term_relative: 0.0,
    };
    for _ in 0..instances {
        let mut block = ResidualBlock::new(construction, ResidualBranch::mlp(width, width, &mut rng), 1.0);
        for (_, t) in block.params_mut() {
            let noise = Tensor::randn(t.shape().to_vec(), 0.3, &mut rng);
            t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
        }
        let x = Tensor::randn([3, width], 1.0, &mut rng);
        let tape = Tape::new();
        let (trace, _) = block.forward(&tape, tape.leaf(&x))?;
        let witness = trace
            .witness()
            .ok_or_else(|| Error::Contract("recursive block produced no witness".into()))?;
        let (rec, rel) = verify(&witness, &x, &trace.f.value(), &trace.y.value())?;
        row.max_reconstruction_error = row.max_reconstruction_error.max(rec);
        row.max_ratio_discrepancy = row.max_ratio_discrepancy.max(rel);
        let general = ratio_general(&witness)?;
        let literal = ratio_closed_form(&witness, SumBound::Lambda)?;
        for (g, l) in general.data().iter().zip(literal.data()) {
            row.max_extra_term_relative = row.max_extra_term_relative.max(((l - g) / g).abs());
        }
    }
    Ok(row)
}

pub fn write_ratio_csv<W: std::io::Write>(rows: &[RatioCheckRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}
