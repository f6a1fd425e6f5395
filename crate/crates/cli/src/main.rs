use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use rskip::{benchmark, checkpoint};
use rskip::data::{Dataset, DatasetSpec};
use rskip::diagnostics::{gradient_norm_sweep, ratio_check, write_ratio_csv, SweepConfig};
use rskip::gradcheck::check_block;
use rskip::train::{run_matrix, train_model, LrSchedule, MatrixResult, RowKind, TrainConfig};
use rskip::{build_model, ModelConfig, SkipConstruction, SkipKind};

#[derive(Parser)]
#[command(name = "rskip", version, about = "Skip-connection scaling experiments on residual MLPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and report its test error.
    Train(TrainArgs),
    /// Train every listed construction for every seed.
    Matrix(MatrixArgs),
    /// Per-block gradient norms of a trained or loaded model.
    Gradnorm(GradnormArgs),
    /// Check recursive blocks against their unrolled linear form.
    RatioCheck(RatioArgs),
    /// Finite-difference check of every block construction.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum DatasetKind {
    Spiral,
    Moons,
    Cifar10,
}

#[derive(Args, Serialize)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "spiral")]
    dataset: DatasetKind,
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long, env = "RSKIP_DATA_DIR")]
    data_path: Option<PathBuf>,
    /// Training samples (synthetic) or stratified training subset (CIFAR-10).
    #[arg(long, default_value_t = benchmark::TRAIN)]
    subset: usize,
    /// Test samples or stratified test subset.
    #[arg(long, default_value_t = benchmark::TEST)]
    test_subset: usize,
    #[arg(long, default_value_t = benchmark::CLASSES)]
    classes: usize,
    #[arg(long, default_value_t = benchmark::NOISE)]
    noise: f64,
    /// Seed for data generation or subset selection.
    #[arg(long, default_value_t = benchmark::DATA_SEED)]
    data_seed: u64,
}

impl DataArgs {
    fn spec(&self) -> Result<DatasetSpec> {
        Ok(match self.dataset {
            DatasetKind::Spiral => DatasetSpec::spiral(self.classes, self.subset, self.test_subset, self.noise, self.data_seed),
            DatasetKind::Moons => DatasetSpec::moons(self.subset, self.test_subset, self.noise, self.data_seed),
            DatasetKind::Cifar10 => {
                let Some(path) = &self.data_path else {
                    bail!("--dataset cifar10 needs --data-path or RSKIP_DATA_DIR");
                };
                DatasetSpec::cifar10(path, self.subset, self.test_subset, self.data_seed)
            }
        })
    }

    fn load(&self) -> Result<Dataset> {
        Ok(self.spec()?.load()?)
    }
}

#[derive(Args, Serialize)]
struct ModelArgs {
    /// Label such as `2rSkip+LN` or `LN(x+3F)`, or a kind name
    /// (`plain`, `xskip`, `xskip-ln`, `rskip-ln`, `wskip-ln`, `xskip-bn`,
    /// `rskip-bn`, `contracted-ln`) combined with `--lambda`.
    #[arg(long, default_value = "2rSkip+LN")]
    construction: String,
    #[arg(long)]
    lambda: Option<f64>,
    /// Residual multiplier of the contracted construction.
    #[arg(long)]
    residual_scale: Option<f64>,
    #[arg(long, default_value_t = benchmark::DEPTH)]
    depth: usize,
    #[arg(long, default_value_t = benchmark::WIDTH)]
    width: usize,
}

#[derive(Args, Serialize)]
struct OptimArgs {
    #[arg(long, default_value_t = benchmark::EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = benchmark::LR)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = rskip::train::DEFAULT_MOMENTUM)]
    momentum: f64,
    #[arg(long, default_value_t = rskip::train::DEFAULT_WEIGHT_DECAY)]
    weight_decay: f64,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct MatrixArgs {
    /// Comma-separated construction labels.
    #[arg(long, default_value = "1xSkip,2xSkip,2xSkip+LN,2rSkip+LN,LN(x+3F)")]
    constructions: String,
    #[arg(long, default_value_t = benchmark::DEPTH)]
    depth: usize,
    #[arg(long, default_value_t = benchmark::WIDTH)]
    width: usize,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Number of seeds, starting at `--seed`.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct GradnormArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Load this checkpoint instead of training.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Set every branch output to zero before the sweep.
    #[arg(long)]
    zero_branch: bool,
    #[arg(long, default_value_t = rskip::diagnostics::DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct RatioArgs {
    /// Largest level count checked; every count from 1 up is run.
    #[arg(long, default_value_t = 4)]
    lambda: u32,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct GradcheckArgs {
    /// Random instances per construction.
    #[arg(long, default_value_t = 20)]
    instances: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Largest level count for the recursive constructions.
    #[arg(long, default_value_t = 4)]
    lambda: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_construction(m: &ModelArgs) -> Result<SkipConstruction> {
    if m.lambda.is_none() && m.residual_scale.is_none() {
        if let Ok(c) = m.construction.parse::<SkipConstruction>() {
            return Ok(c);
        }
    }
    let kind: SkipKind = m
        .construction
        .parse()
        .with_context(|| format!("unknown construction {:?}", m.construction))?;
    let lambda = m.lambda.unwrap_or(if kind.uses_lambda() { 2.0 } else { 1.0 });
    let scale = m.residual_scale.unwrap_or(1.0);
    Ok(SkipConstruction::new(kind, lambda, scale)?)
}

fn train_config(construction: SkipConstruction, depth: usize, width: usize, data: &Dataset, o: &OptimArgs, seed: u64) -> TrainConfig {
    let model = ModelConfig::new(construction, depth, data.input_dim(), width, data.classes);
    let mut cfg = TrainConfig::new(model, o.epochs).with_seed(seed);
    cfg.lr = LrSchedule::step_decay(o.lr, o.epochs);
    cfg.batch_size = o.batch_size;
    cfg.momentum = o.momentum;
    cfg.weight_decay = o.weight_decay;
    cfg
}

#[derive(Serialize)]
struct Artifact {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a, A: Serialize> {
    command: &'a str,
    version: &'a str,
    args: &'a A,
    artifacts: Vec<Artifact>,
}

/// Writes `manifest.json` next to the artifacts, hashing each one.
fn write_manifest<A: Serialize>(out: &Path, command: &str, args: &A, artifacts: &[PathBuf]) -> Result<()> {
    let artifacts = artifacts
        .iter()
        .map(|p| {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(Artifact {
                path: p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
                sha256: hex::encode(Sha256::digest(&bytes)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        args,
        artifacts,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let construction = parse_construction(&a.model)?;
    let data = a.data.load()?;
    let cfg = train_config(construction, a.model.depth, a.model.width, &data, &a.optim, a.seed);
    let (model, run) = train_model(&cfg, &data)?;
    create_out(&a.out)?;
    let results = a.out.join("results.csv");
    let matrix = MatrixResult::from_runs(&[construction], &[a.seed], &cfg, vec![run.clone()]);
    matrix.write_csv(fs::File::create(&results)?)?;
    let ckpt = a.out.join("model.ckpt");
    checkpoint::save(&model, &ckpt)?;
    write_manifest(&a.out, "train", a, &[results, ckpt])?;
    match run.failed_epoch {
        Some(e) => println!("{}: diverged at epoch {e}", construction.label()),
        None => println!("{}: test error {:.4}", construction.label(), run.test_error),
    }
    Ok(())
}

fn cmd_matrix(a: &MatrixArgs) -> Result<()> {
    let constructions = a
        .constructions
        .split(',')
        .map(|s| s.trim().parse::<SkipConstruction>().map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()?;
    let data = a.data.load()?;
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let base = train_config(constructions[0], a.depth, a.width, &data, &a.optim, a.seed);
    let result = run_matrix(&constructions, &seeds, &base, &data)?;
    create_out(&a.out)?;
    let results = a.out.join("results.csv");
    result.write_csv(fs::File::create(&results)?)?;
    write_manifest(&a.out, "matrix", a, &[results])?;
    for r in result.rows.iter().filter(|r| r.row == RowKind::Summary) {
        println!(
            "{:<12} median {:.4}  mean {:.4}  std {:.4}  failed {}/{}",
            r.method,
            r.median.unwrap_or(f64::NAN),
            r.error,
            r.std.unwrap_or(f64::NAN),
            r.failed,
            r.runs
        );
    }
    Ok(())
}

fn cmd_gradnorm(a: &GradnormArgs) -> Result<()> {
    let data = a.data.load()?;
    let mut model = match &a.checkpoint {
        Some(p) => checkpoint::load(p)?,
        None => {
            let construction = parse_construction(&a.model)?;
            let cfg = train_config(construction, a.model.depth, a.model.width, &data, &a.optim, a.seed);
            if cfg.epochs == 0 {
                build_model(&cfg.model)?
            } else {
                let (model, run) = train_model(&cfg, &data)?;
                if let Some(e) = run.failed_epoch {
                    eprintln!("warning: training diverged at epoch {e}; sweeping the diverged model");
                }
                model
            }
        }
    };
    if a.zero_branch {
        model.zero_branches();
    }
    let sweep = SweepConfig {
        samples: a.samples,
        seed: a.seed,
        ..SweepConfig::default()
    };
    let report = gradient_norm_sweep(&model, &data.train, &sweep)?;
    create_out(&a.out)?;
    let csv = a.out.join("gradnorm.csv");
    report.write_csv(fs::File::create(&csv)?)?;
    let ckpt = a.out.join("model.ckpt");
    checkpoint::save(&model, &ckpt)?;
    write_manifest(&a.out, "gradnorm", a, &[csv, ckpt])?;
    println!("{}: spread (max/min) {:.4e}", report.construction, report.spread());
    Ok(())
}

fn cmd_ratio_check(a: &RatioArgs) -> Result<()> {
    if a.lambda == 0 {
        bail!("--lambda must be at least 1");
    }
    let rows = (1..=a.lambda)
        .map(|l| ratio_check(l, a.instances, a.width, a.seed + l as u64))
        .collect::<rskip::Result<Vec<_>>>()?;
    create_out(&a.out)?;
    let csv = a.out.join("ratio_check.csv");
    write_ratio_csv(&rows, fs::File::create(&csv)?)?;
    write_manifest(&a.out, "ratio-check", a, &[csv])?;
    for r in &rows {
        println!(
            "lambda {}: reconstruction {:.2e}  ratio discrepancy {:.2e}  bound-to-lambda extra term up to {:.2e}",
            r.lambda, r.max_reconstruction_error, r.max_ratio_discrepancy, r.max_extra_term_relative
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct GradcheckRow {
    construction: String,
    instances: u64,
    max_rel_error: f64,
    passed: bool,
}

fn gradcheck_constructions(max_lambda: u32) -> Result<Vec<SkipConstruction>> {
    let mut cs = vec![SkipConstruction::plain(), SkipConstruction::wskip_ln()];
    for l in 1..=max_lambda {
        let l_f = l as f64;
        cs.push(SkipConstruction::xskip(l_f)?);
        cs.push(SkipConstruction::xskip_ln(l_f)?);
        cs.push(SkipConstruction::xskip_bn(l_f)?);
        cs.push(SkipConstruction::rskip_ln(l)?);
        cs.push(SkipConstruction::rskip_bn(l)?);
        cs.push(SkipConstruction::contracted_ln(l_f)?);
    }
    Ok(cs)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let mut rows = Vec::new();
    for c in gradcheck_constructions(a.lambda)? {
        let mut worst: f64 = 0.0;
        let mut passed = true;
        for i in 0..a.instances {
            let (_, ok, err) = check_block(c, a.seed + i, a.tol)?;
            worst = worst.max(err);
            passed &= ok;
        }
        println!("{:<12} {}  max relative error {:.2e}", c.label(), if passed { "pass" } else { "FAIL" }, worst);
        rows.push(GradcheckRow {
            construction: c.label(),
            instances: a.instances,
            max_rel_error: worst,
            passed,
        });
    }
    create_out(&a.out)?;
    let path = a.out.join("gradcheck.csv");
    let mut wtr = csv::Writer::from_path(&path)?;
    for r in &rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    write_manifest(&a.out, "gradcheck", a, &[path])?;
    if rows.iter().any(|r| !r.passed) {
        bail!("gradient check failed");
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => cmd_train(&a),
        Command::Matrix(a) => cmd_matrix(&a),
        Command::Gradnorm(a) => cmd_gradnorm(&a),
        Command::RatioCheck(a) => cmd_ratio_check(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}
