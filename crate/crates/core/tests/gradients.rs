//! Finite-difference checks of every differentiable operation, every block
//! construction, and a full model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rskip::block::ParamCursor;
use rskip::gradcheck::{gradcheck, GradcheckReport, DEFAULT_EPS, ZERO_ANALYTIC, ZERO_NUMERIC};
use rskip::norm::{batch_norm_with, layer_norm_with, BatchNormParams, DEFAULT_EPS as NORM_EPS};
use rskip::{build_model, ModelConfig, ResidualBlock, ResidualBranch, SkipConstruction, Tensor};

const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random entries with `|v| >= 1e-3`, so finite differences never straddle
/// the relu kink.
fn away_from_zero(shape: [usize; 2], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, rng);
    for v in t.data_mut() {
        if v.abs() < 1e-3 {
            *v = v.signum() * 1e-3 + if *v == 0.0 { 1e-3 } else { 0.0 };
        }
    }
    t
}

#[test]
fn add_gradcheck() {
    for s in 0..INSTANCES {
        let mut r = rng(s);
        let a = Tensor::randn([3, 4], 1.0, &mut r);
        let b = Tensor::randn([3, 4], 1.0, &mut r);
        let w = Tensor::randn([3, 4], 1.0, &mut r);
        let rep = gradcheck(|_, v| Ok(v[0].add(v[1])?.mul(v[2])?.sum()), &[a, b, w], DEFAULT_EPS, TOL).unwrap();
        assert!(rep.passed, "seed {s}: {rep:?}");
    }
}

#[test]
fn broadcast_add_gradcheck() {
    for s in 0..INSTANCES {
        let mut r = rng(100 + s);
        let a = Tensor::randn([3, 4], 1.0, &mut r);
        let b = Tensor::randn([4], 1.0, &mut r);
        let w = Tensor::randn([3, 4], 1.0, &mut r);
        let rep = gradcheck(|_, v| Ok(v[0].add(v[1])?.mul(v[2])?.sum()), &[a, b, w], DEFAULT_EPS, TOL).unwrap();
        assert!(rep.passed, "seed {s}: {rep:?}");
    }
}

#[test]
fn scale_gradcheck() {
    for s in 0..INSTANCES {
        let mut r = rng(200 + s);
        let a = Tensor::randn([2, 5], 1.0, &mut r);
        let w = Tensor::randn([2, 5], 1.0, &mut r);
        let c = -2.0 + s as f64 * 0.37;
        let rep = gradcheck(|_, v| Ok(v[0].scale(c).mul(v[1])?.sum()), &[a, w], DEFAULT_EPS, TOL).unwrap();
        assert!(rep.passed, "seed {s}: {rep:?}");
    }
}

#[test]
fn ewmul_gradcheck() {
    for s in 0..INSTANCES {
        let mut r = rng(300 + s);
        let a = Tensor::randn([2, 5], 1.0, &mut r);
        let b = Tensor::randn([2, 5], 1.0, &mut r);
        let bb = Tensor::randn([5], 1.0, &mut r);
        let rep = gradcheck(
            |_, v| Ok(v[0].mul(v[1])?.mul(v[2])?.sum()),
            &[a, b, bb],
            DEFAULT_EPS,
            TOL,
        )
        .unwrap();
        assert!(rep.passed, "seed {s}: {rep:?}");
    }
}

#[test]
fn matmul_gradcheck() {
    for s in 0..INSTANCES {
        let mut r = rng(400 + s);
        let a = Tensor::randn([3, 4], 1.0, &mut r);
        let b = Tensor::randn([4, 2], 1.0, &mut r);
        let w = Tensor::randn([3, 2], 1.0, &mut r);
        let rep = gradcheck(|_, v| Ok(v[0].matmul(v[1])?.mul(v[2])?.sum()), &[a, b, w], DEFAULT_EPS, TOL).unwrap();
        assert!(rep.passed, "seed {s}: {rep:?}");
    }
}

#[test]
fn relu_gradcheck() {
    for s in 0..INSTANCES {
        let mut r = rng(500 + s);
        let a = away_from_zero([3, 4], &mut r);
        let w = Tensor::randn([3, 4], 1.0, &mut r);
        let rep = gradcheck(|_, v| Ok(v[0].relu().mul(v[1])?.sum()), &[a, w], DEFAULT_EPS, TOL).unwrap();
        assert!(rep.passed, "seed {s}: {rep:?}");
    }
}

#[test]
fn cross_entropy_gradcheck() {
    for s in 0..INSTANCES {
        let mut r = rng(600 + s);
        let logits = Tensor::randn([4, 3], 2.0, &mut r);
        let labels: Vec<usize> = (0..4).map(|i| (i + s as usize) % 3).collect();
        let rep = gradcheck(
            |tape, v| tape.softmax_cross_entropy(v[0], &labels),
            &[logits],
            DEFAULT_EPS,
            TOL,
        )
        .unwrap();
        assert!(rep.passed, "seed {s}: {rep:?}");
    }
}

#[test]
fn layer_norm_gradcheck() {
    for s in 0..INSTANCES {
        let mut r = rng(700 + s);
        let x = Tensor::randn([4, 6], 1.5, &mut r);
        let g = Tensor::randn([6], 1.0, &mut r);
        let b = Tensor::randn([6], 1.0, &mut r);
        let w = Tensor::randn([4, 6], 1.0, &mut r);
        let rep = gradcheck(
            |tape, v| Ok(layer_norm_with(tape, v[0], v[1], v[2], NORM_EPS)?.0.mul(v[3])?.sum()),
            &[x, g, b, w],
            DEFAULT_EPS,
            TOL,
        )
        .unwrap();
        assert!(rep.passed, "seed {s}: {rep:?}");
    }
}

#[test]
fn batch_norm_gradcheck() {
    let p = BatchNormParams::new(4);
    for s in 0..INSTANCES {
        let mut r = rng(800 + s);
        let x = Tensor::randn([6, 4], 1.5, &mut r);
        let g = Tensor::randn([4], 1.0, &mut r);
        let b = Tensor::randn([4], 1.0, &mut r);
        let w = Tensor::randn([6, 4], 1.0, &mut r);
        let rep = gradcheck(
            |tape, v| Ok(batch_norm_with(tape, v[0], v[1], v[2], &p)?.0.mul(v[3])?.sum()),
            &[x, g, b, w],
            DEFAULT_EPS,
            TOL,
        )
        .unwrap();
        assert!(rep.passed, "seed {s}: {rep:?}");
    }
}

/// Every construction, lambda up to 4 for the recursive kinds.
fn all_constructions() -> Vec<SkipConstruction> {
    let mut cs = vec![
        SkipConstruction::plain(),
        SkipConstruction::xskip(0.5).unwrap(),
        SkipConstruction::xskip(2.0).unwrap(),
        SkipConstruction::xskip_ln(1.0).unwrap(),
        SkipConstruction::xskip_ln(3.0).unwrap(),
        SkipConstruction::wskip_ln(),
        SkipConstruction::xskip_bn(2.0).unwrap(),
        SkipConstruction::contracted_ln(3.0).unwrap(),
    ];
    for l in 1..=4 {
        cs.push(SkipConstruction::rskip_ln(l).unwrap());
        cs.push(SkipConstruction::rskip_bn(l).unwrap());
    }
    cs
}

/// Perturbs every parameter away from its initial value so gains are not
/// all exactly one.
fn jitter(block: &mut ResidualBlock, r: &mut ChaCha8Rng) {
    for (_, t) in block.params_mut() {
        let noise = Tensor::randn(t.shape().to_vec(), 0.3, r);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    }
}

/// Batch statistics cancel per-feature constants, so some gradients of
/// batch-normalized blocks vanish identically: the branch output bias always,
/// and a hidden bias whenever that unit is active on every row.
fn passes(rep: &GradcheckReport, c: &SkipConstruction) -> bool {
    if c.kind().norm_label() == "BN" {
        rep.passed_zero_aware(ZERO_ANALYTIC, ZERO_NUMERIC)
    } else {
        rep.passed
    }
}

#[test]
fn every_block_construction_passes_gradcheck() {
    for c in all_constructions() {
        for s in 0..INSTANCES {
            let mut r = rng(1000 + s);
            let (d, h, batch) = (4, 5, 3);
            let mut block = ResidualBlock::new(c, ResidualBranch::mlp(d, h, &mut r), 1.0);
            jitter(&mut block, &mut r);
            let x = Tensor::randn([batch, d], 1.0, &mut r);
            let w = Tensor::randn([batch, d], 1.0, &mut r);
            let mut inputs = vec![x, w];
            inputs.extend(block.params().into_iter().map(|(_, t)| t.clone()));
            let rep = gradcheck(
                |tape, v| {
                    let trace = block.forward_bound(tape, v[0], &mut ParamCursor::new(&v[2..]))?;
                    Ok(trace.y.mul(v[1])?.sum())
                },
                &inputs,
                DEFAULT_EPS,
                TOL,
            )
            .unwrap();
            assert!(passes(&rep, &c), "{} seed {s}: {}", c.label(), rep.max_rel_error);
        }
    }
}

#[test]
fn two_block_model_gradcheck_wrt_every_parameter() {
    for c in all_constructions() {
        let cfg = ModelConfig::new(c, 2, 3, 5, 3).with_seed(42);
        let mut model = build_model(&cfg).unwrap();
        let mut r = rng(77);
        for b in &mut model.blocks {
            jitter(b, &mut r);
        }
        let x = Tensor::randn([4, 3], 1.0, &mut r);
        let labels = [0, 2, 1, 2];
        let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t.clone()).collect();
        let mut inputs = vec![x];
        inputs.extend(params);
        let rep = gradcheck(
            |tape, v| {
                let trace = model.forward_with(tape, &v[1..], v[0])?;
                tape.softmax_cross_entropy(trace.logits, &labels)
            },
            &inputs,
            DEFAULT_EPS,
            TOL,
        )
        .unwrap();
        assert!(passes(&rep, &c), "{}: {}", c.label(), rep.max_rel_error);
        assert_eq!(rep.coordinates, 12 + model.num_params());
    }
}
