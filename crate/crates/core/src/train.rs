//! SGD training, single runs, and construction sweeps.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block::{ParamRole, SkipConstruction};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, ResidualModel};
use crate::norm::Mode;
use crate::tape::Tape;

pub const DEFAULT_LR: f64 = 0.1;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 2e-4;
pub const EVAL_CHUNK: usize = 512;

/// Piecewise-constant learning rate: `base * factor^(milestones passed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    /// Epoch indices at which the rate is multiplied by `factor`.
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    /// Decays by 10x at 50% and 75% of `epochs`.
    pub fn step_decay(base: f64, epochs: usize) -> Self {
        Self {
            base,
            milestones: vec![epochs / 2, epochs * 3 / 4],
            factor: 0.1,
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.factor.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Seeds model initialization and batch order.
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, epochs: usize) -> Self {
        Self {
            model,
            epochs,
            batch_size: 64,
            lr: LrSchedule::step_decay(DEFAULT_LR, epochs),
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            seed: model.seed,
        }
    }

    pub fn with_construction(mut self, c: SkipConstruction) -> Self {
        self.model.construction = c;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.base > 0.0) {
            return bad(format!("learning rate must be > 0, got {}", self.lr.base));
        }
        if !(self.lr.factor > 0.0) {
            return bad(format!("decay factor must be > 0, got {}", self.lr.factor));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2".into());
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum. Weight decay is added to the gradient of
/// [`ParamRole::Weight`] parameters only.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `v = momentum * v + (g + wd * p)`, `p -= lr * v`. Parameters without
    /// an accumulated gradient are treated as having a zero gradient.
    pub fn step(&mut self, model: &mut ResidualModel, lr: f64) {
        let params = model.params_mut();
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        }
        for ((role, t), v) in params.into_iter().zip(&mut self.velocity) {
            let decay = if role == ParamRole::Weight { self.weight_decay } else { 0.0 };
            let grad = t.grad().map(|g| g.to_vec());
            for (i, (p, vel)) in t.data_mut().iter_mut().zip(v.iter_mut()).enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]) + decay * *p;
                *vel = self.momentum * *vel + g;
                *p -= lr * *vel;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    /// Test error in [0, 1]; 1 for a diverged run.
    pub test_error: f64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Epoch (0-based) at which the loss became non-finite.
    pub failed_epoch: Option<usize>,
    pub wall_clock_secs: f64,
    pub config: TrainConfig,
    pub seed: u64,
}

impl RunResult {
    pub fn failed(&self) -> bool {
        self.failed_epoch.is_some()
    }
}

/// Mean loss and error rate of `model` on `split`, in inference mode.
pub fn evaluate(model: &ResidualModel, split: &Split) -> Result<(f64, f64)> {
    let mut model = model.clone();
    model.set_mode(Mode::Inference);
    let mut loss_sum = 0.0;
    let mut wrong = 0usize;
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let b = split.batch(chunk);
        let tape = Tape::new();
        let trace = model.forward(&tape, tape.leaf(&b.x))?;
        let loss = tape.softmax_cross_entropy(trace.logits, &b.y)?;
        loss_sum += loss.item() * chunk.len() as f64;
        let logits = trace.logits.value();
        for (r, &label) in b.y.iter().enumerate() {
            let row = logits.row(r);
            // NaN logits never count as correct.
            let best = row
                .iter()
                .enumerate()
                .fold((usize::MAX, f64::NEG_INFINITY), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc })
                .0;
            wrong += usize::from(best != label);
        }
    }
    Ok((loss_sum / split.len() as f64, wrong as f64 / split.len() as f64))
}

fn check_data(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    if data.input_dim() != cfg.model.input_dim || data.classes != cfg.model.classes {
        return Err(Error::Config(format!(
            "model expects {} inputs / {} classes, data has {} / {}",
            cfg.model.input_dim,
            cfg.model.classes,
            data.input_dim(),
            data.classes
        )));
    }
    if data.train.len() < 2 || data.test.is_empty() {
        return Err(Error::Config("need at least 2 training and 1 test sample".into()));
    }
    Ok(())
}

/// Trains a fresh model and returns it with the run record. A run whose
/// loss becomes non-finite stops early and is reported with error 1; the
/// returned model then holds the parameters from the start of that epoch.
pub fn train_model(cfg: &TrainConfig, data: &Dataset) -> Result<(ResidualModel, RunResult)> {
    cfg.validate()?;
    check_data(cfg, data)?;
    let start = Instant::now();
    let mut model_cfg = cfg.model;
    model_cfg.seed = cfg.seed;
    let mut model = build_model(&model_cfg)?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    // Batch order uses its own stream so it is independent of init draws.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut val_loss = Vec::with_capacity(cfg.epochs);
    let mut failed_epoch = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let mut last_finite = model.clone();
    'epochs: for epoch in 0..cfg.epochs {
        last_finite.clone_from(&model);
        let lr = cfg.lr.at(epoch);
        order.shuffle(&mut rng);
        model.set_mode(Mode::Training);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let b = data.train.batch(chunk);
            let tape = Tape::new();
            let trace = model.forward(&tape, tape.leaf(&b.x))?;
            let loss = tape.softmax_cross_entropy(trace.logits, &b.y)?;
            let l = loss.item();
            if !l.is_finite() {
                failed_epoch = Some(epoch);
                break 'epochs;
            }
            let grads = tape.backward(loss)?;
            model.zero_grad();
            model.accumulate_grads(&grads, &trace);
            model.apply_batch_stats(&trace);
            opt.step(&mut model, lr);
            sum += l;
            batches += 1;
        }
        train_loss.push(sum / batches.max(1) as f64);
        let (vl, _) = evaluate(&model, &data.test)?;
        val_loss.push(vl);
        if !vl.is_finite() || model.flat_params().iter().any(|p| !p.is_finite()) {
            failed_epoch = Some(epoch);
            break;
        }
    }
    if failed_epoch.is_some() {
        model = last_finite;
    }
    model.zero_grad();
    model.set_mode(Mode::Inference);

    let test_error = if failed_epoch.is_some() {
        1.0
    } else {
        evaluate(&model, &data.test)?.1
    };
    let result = RunResult {
        test_error,
        train_loss,
        val_loss,
        failed_epoch,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
        seed: cfg.seed,
    };
    Ok((model, result))
}

pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<RunResult> {
    train_model(cfg, data).map(|(_, r)| r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Run,
    Summary,
}

/// One line of the results table. Run rows carry one seed; summary rows
/// aggregate every seed of a construction, counting failed runs as error 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub row: RowKind,
    pub method: String,
    pub architecture: String,
    pub lambda: f64,
    pub g: String,
    pub seed: Option<u64>,
    pub runs: usize,
    /// Run error, or the mean over runs for summary rows.
    pub error: f64,
    /// Sample standard deviation over runs (summary rows).
    pub std: Option<f64>,
    pub median: Option<f64>,
    pub failed: usize,
    pub failed_epoch: Option<usize>,
}

pub fn architecture_label(cfg: &ModelConfig) -> String {
    format!("MLP-{}x{}", cfg.depth, cfg.width)
}

/// All constructions of `kinds` crossed with `lambdas`, skipping
/// combinations that are invalid and collapsing kinds without a lambda.
pub fn cross_constructions(kinds: &[crate::block::SkipKind], lambdas: &[f64]) -> Vec<SkipConstruction> {
    let mut out: Vec<SkipConstruction> = Vec::new();
    for &k in kinds {
        let candidates: Vec<_> = if k.uses_lambda() {
            lambdas.iter().filter_map(|&l| SkipConstruction::new(k, l, 1.0).ok()).collect()
        } else {
            SkipConstruction::new(k, 1.0, 1.0).into_iter().collect()
        };
        for c in candidates {
            if !out.contains(&c) {
                out.push(c);
            }
        }
    }
    out
}

fn summarize(c: &SkipConstruction, arch: &str, runs: &[RunResult]) -> ResultRow {
    let errs: Vec<f64> = runs.iter().map(|r| r.test_error).collect();
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let std = if errs.len() > 1 {
        (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    ResultRow {
        row: RowKind::Summary,
        method: c.label(),
        architecture: arch.to_string(),
        lambda: c.lambda(),
        g: c.kind().norm_label().to_string(),
        seed: None,
        runs: errs.len(),
        error: mean,
        std: Some(std),
        median: Some(median(&errs)),
        failed: runs.iter().filter(|r| r.failed()).count(),
        failed_epoch: None,
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone)]
pub struct MatrixResult {
    /// Run rows for every construction and seed, then one summary row per
    /// construction.
    pub rows: Vec<ResultRow>,
    pub runs: Vec<RunResult>,
}

impl MatrixResult {
    pub fn summary(&self, method: &str) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.row == RowKind::Summary && r.method == method)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        write_rows(&self.rows, w)
    }
}

pub fn write_rows<W: std::io::Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_rows<R: std::io::Read>(r: R) -> Result<Vec<ResultRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Trains every construction with every seed on the same data. Cells run in
/// parallel; row order depends only on the inputs.
pub fn run_matrix(
    constructions: &[SkipConstruction],
    seeds: &[u64],
    base: &TrainConfig,
    data: &Dataset,
) -> Result<MatrixResult> {
    if constructions.is_empty() || seeds.is_empty() {
        return Err(Error::Config("matrix needs at least one construction and one seed".into()));
    }
    let cells: Vec<(SkipConstruction, u64)> = constructions
        .iter()
        .flat_map(|&c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let runs: Vec<RunResult> = cells
        .par_iter()
        .map(|&(c, s)| train(&base.clone().with_construction(c).with_seed(s), data))
        .collect::<Result<_>>()?;

    Ok(MatrixResult::from_runs(constructions, seeds, base, runs))
}

impl MatrixResult {
    /// Builds run and summary rows from runs ordered construction-major,
    /// one per `(construction, seed)` pair.
    pub fn from_runs(
        constructions: &[SkipConstruction],
        seeds: &[u64],
        base: &TrainConfig,
        runs: Vec<RunResult>,
    ) -> Self {
        assert_eq!(runs.len(), constructions.len() * seeds.len(), "one run per cell");
        let arch = architecture_label(&base.model);
        let cells = constructions.iter().flat_map(|&c| seeds.iter().map(move |&s| (c, s)));
        let mut rows: Vec<ResultRow> = cells
            .zip(&runs)
            .map(|((c, s), r)| ResultRow {
                row: RowKind::Run,
                method: c.label(),
                architecture: arch.clone(),
                lambda: c.lambda(),
                g: c.kind().norm_label().to_string(),
                seed: Some(s),
                runs: 1,
                error: r.test_error,
                std: None,
                median: None,
                failed: usize::from(r.failed()),
                failed_epoch: r.failed_epoch,
            })
            .collect();
        for (i, c) in constructions.iter().enumerate() {
            let group = &runs[i * seeds.len()..(i + 1) * seeds.len()];
            rows.push(summarize(c, &arch, group));
        }
        Self { rows, runs }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::SkipKind;
    use crate::data::{gen_synthetic, DatasetSpec};

    fn small_cfg(c: SkipConstruction, epochs: usize) -> TrainConfig {
        let mut cfg = TrainConfig::new(ModelConfig::new(c, 2, 2, 8, 3), epochs);
        cfg.batch_size = 16;
        cfg
    }

    fn data() -> Dataset {
        gen_synthetic(&DatasetSpec::spiral(3, 90, 45, 0.05, 7)).unwrap()
    }

    #[test]
    fn schedule_decays_at_milestones() {
        let s = LrSchedule::step_decay(0.1, 40);
        assert_eq!(s.milestones, vec![20, 30]);
        assert_eq!(s.at(0), 0.1);
        assert_eq!(s.at(19), 0.1);
        assert!((s.at(20) - 0.01).abs() < 1e-15);
        assert!((s.at(35) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_skips_norm_parameters() {
        let cfg = ModelConfig::new(SkipConstruction::rskip_ln(2).unwrap(), 2, 2, 4, 2);
        let mut m = build_model(&cfg).unwrap();
        for (_, t) in m.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.5);
        }
        let before = m.clone();
        // Frozen probe: every gradient is exactly zero.
        for (_, t) in m.params_mut() {
            let z = vec![0.0; t.numel()];
            t.accumulate_grad(&z);
        }
        let (lr, wd) = (0.1, 0.01);
        Sgd::new(0.9, wd).step(&mut m, lr);
        for ((role, after), (_, orig)) in m.params().into_iter().zip(before.params()) {
            for (a, o) in after.data().iter().zip(orig.data()) {
                match role {
                    ParamRole::Weight => assert_eq!(*a, o - lr * wd * o),
                    _ => assert_eq!(a, o),
                }
            }
        }
    }

    #[test]
    fn zero_epochs_reports_untrained_error() {
        let d = data();
        let r = train(&small_cfg(SkipConstruction::plain(), 0), &d).unwrap();
        assert!(r.train_loss.is_empty());
        let m = build_model(&small_cfg(SkipConstruction::plain(), 0).model).unwrap();
        assert_eq!(r.test_error, evaluate(&m, &d.test).unwrap().1);
        assert!((0.0..=1.0).contains(&r.test_error));
    }

    #[test]
    fn training_is_deterministic_and_curves_have_one_entry_per_epoch() {
        let d = data();
        let cfg = small_cfg(SkipConstruction::xskip_bn(2.0).unwrap(), 3).with_seed(4);
        let a = train(&cfg, &d).unwrap();
        let b = train(&cfg, &d).unwrap();
        assert_eq!(a.train_loss, b.train_loss);
        assert_eq!(a.val_loss, b.val_loss);
        assert_eq!(a.test_error, b.test_error);
        assert_eq!(a.train_loss.len(), 3);
        assert_eq!(a.val_loss.len(), 3);
    }

    #[test]
    fn divergence_is_recorded_not_raised() {
        let d = data();
        let mut cfg = small_cfg(SkipConstruction::xskip(3.0).unwrap(), 5);
        cfg.model.depth = 40;
        cfg.lr = LrSchedule::step_decay(10.0, 5);
        let (model, r) = train_model(&cfg, &d).unwrap();
        assert!(r.failed());
        assert_eq!(r.test_error, 1.0);
        assert!(model.flat_params().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn invalid_configs_rejected() {
        let d = data();
        let mut cfg = small_cfg(SkipConstruction::plain(), 1);
        cfg.lr.base = 0.0;
        assert!(matches!(train(&cfg, &d), Err(Error::Config(_))));
        let mut cfg = small_cfg(SkipConstruction::plain(), 1);
        cfg.weight_decay = -1.0;
        assert!(train(&cfg, &d).is_err());
        let mut cfg = small_cfg(SkipConstruction::plain(), 1);
        cfg.model.classes = 5;
        assert!(train(&cfg, &d).is_err());
    }

    #[test]
    fn matrix_bookkeeping_and_csv_round_trip() {
        let d = data();
        let cs = [
            SkipConstruction::xskip(1.0).unwrap(),
            SkipConstruction::xskip(2.0).unwrap(),
            SkipConstruction::xskip_ln(2.0).unwrap(),
            SkipConstruction::rskip_ln(2).unwrap(),
        ];
        let seeds = [0, 1, 2, 3, 4];
        let m = run_matrix(&cs, &seeds, &small_cfg(SkipConstruction::plain(), 1), &d).unwrap();
        assert_eq!(m.rows.len(), 24);
        assert_eq!(m.rows.iter().filter(|r| r.row == RowKind::Run).count(), 20);
        for c in &cs {
            let s = m.summary(&c.label()).unwrap();
            let members: Vec<f64> = m
                .rows
                .iter()
                .filter(|r| r.row == RowKind::Run && r.method == c.label())
                .map(|r| r.error)
                .collect();
            assert_eq!(members.len(), 5);
            let mean = members.iter().sum::<f64>() / 5.0;
            assert!((s.error - mean).abs() < 1e-15);
        }
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = read_rows(buf.as_slice()).unwrap();
        assert_eq!(back, m.rows);
    }

    #[test]
    fn cross_product_skips_invalid() {
        let cs = cross_constructions(
            &[SkipKind::XSkip, SkipKind::RSkipLN, SkipKind::PlainSkip],
            &[0.5, 1.0, 2.0],
        );
        let labels: Vec<_> = cs.iter().map(|c| c.label()).collect();
        assert_eq!(labels, ["0.5xSkip", "1xSkip", "2xSkip", "1rSkip+LN", "2rSkip+LN", "Skip"]);
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
