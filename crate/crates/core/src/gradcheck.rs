//! Central finite-difference verification of the backward rules.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Conv2dSpec, Graph, Var};
use crate::losses::{self, LossConfig};
use crate::model::{self, BackboneConfig, BlockSpec, Model, ModelConfig, Normalization};
use crate::mospool::{C3Normalization, PoolConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A scalar-valued function built on a graph from one input.
pub type ScalarFn = dyn Fn(&mut Graph, Var) -> Result<Var> + Send + Sync;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Max over coordinates of `|analytic − central| / max(1, |central|)`.
pub fn finite_diff_check(f: &ScalarFn, x: &Tensor, h: f64) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::with_dtype(x.shape(), data, x.dtype())?);
        let out = f(&mut g, v)?;
        g.value(out).item()
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let central = (eval(plus)? - eval(minus)?) / (2.0 * h);
        if !central.is_finite() {
            return Err(Error::Numeric(format!("non-finite difference at coordinate {i}")));
        }
        let err = (analytic.data()[i] - central).abs() / central.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// One named check: a scalar function and a generator of inputs.
pub struct GradCase {
    pub name: String,
    pub f: Box<ScalarFn>,
    pub input: Box<dyn Fn(&mut Rng) -> Tensor + Send + Sync>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub op: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
    pub passed: bool,
}

pub fn run_cases(cases: &[GradCase], seed: u64, trials: usize, h: f64) -> Result<GradcheckReport> {
    let mut results = Vec::with_capacity(cases.len());
    for (ci, case) in cases.iter().enumerate() {
        let mut rng = Rng::stream(seed, ci as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let x = (case.input)(&mut rng);
            let err = finite_diff_check(case.f.as_ref(), &x, h)
                .map_err(|e| Error::Numeric(format!("{}: {e}", case.name)))?;
            worst = worst.max(err);
        }
        results.push(CaseResult {
            op: case.name.clone(),
            trials,
            max_rel_error: worst,
            passed: worst < TOLERANCE,
        });
    }
    Ok(GradcheckReport {
        seed,
        step: h,
        tolerance: TOLERANCE,
        passed: results.iter().all(|r| r.passed),
        cases: results,
    })
}

/// Runs every registered op check.
pub fn run_all(seed: u64, trials: usize) -> Result<GradcheckReport> {
    run_cases(&standard_cases(), seed, trials, DEFAULT_STEP)
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).expect("finite")
}

/// Fixed pseudo-random weights so each scalar function is a fixed map of
/// its input.
fn weights(seed: u64, shape: &[usize]) -> Tensor {
    randn(&mut Rng::new(seed), shape)
}

/// `Σ w ∘ y` with fixed weights: turns any op output into a scalar whose
/// gradient exercises every output coordinate differently.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = weights(seed, g.value(y).shape());
    let wv = g.constant(w);
    g.dot(y, wv)
}

fn case(
    name: &str,
    input: impl Fn(&mut Rng) -> Tensor + Send + Sync + 'static,
    f: impl Fn(&mut Graph, Var) -> Result<Var> + Send + Sync + 'static,
) -> GradCase {
    GradCase {
        name: name.to_string(),
        f: Box::new(f),
        input: Box::new(input),
    }
}

fn unit_rows(rng: &mut Rng, b: usize, p: usize) -> Tensor {
    let mut t = randn(rng, &[b, p]).into_vec();
    for row in t.chunks_exact_mut(p) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new(&[b, p], t).expect("finite")
}

/// Input away from ReLU kinks and max-pool ties.
fn spread(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64 * 4.0 - 2.0).collect();
    rng.shuffle(&mut vals);
    Tensor::new(shape, vals).expect("finite")
}

fn micro_model(normalization: Normalization, residual: bool) -> Model {
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            blocks: vec![
                BlockSpec { out_channels: 3, pool: true },
                BlockSpec { out_channels: 2, pool: false },
            ],
            input_shape: [2, 4, 4],
            normalization,
            residual,
        },
        num_base_classes: 1,
        proj_dim: 3,
        pool: PoolConfig::default(),
    };
    Model::init(cfg, &mut Rng::new(31)).expect("valid micro config")
}

/// The full set of differentiable ops used by training.
pub fn standard_cases() -> Vec<GradCase> {
    let pool_std = PoolConfig::default();
    let pool_lit = PoolConfig {
        eps: 1e-5,
        c3_normalization: C3Normalization::LiteralMatrix,
    };
    let mut cases = vec![
        case("matmul.lhs", |r| randn(r, &[3, 4]), |g, x| {
            let b = g.constant(weights(1, &[4, 2]));
            let y = g.matmul(x, b)?;
            project(g, y, 2)
        }),
        case("matmul.rhs", |r| randn(r, &[4, 2]), |g, x| {
            let a = g.constant(weights(3, &[3, 4]));
            let y = g.matmul(a, x)?;
            project(g, y, 4)
        }),
        case("add_sub_mul_scale", |r| randn(r, &[5]), |g, x| {
            let c = g.constant(weights(5, &[5]));
            let a = g.add(x, c)?;
            let s = g.sub(a, x)?;
            let m = g.mul(x, a)?;
            let t = g.add(m, s)?;
            let y = g.scale(t, -1.5)?;
            g.sum(y)
        }),
        case("relu", |r| spread(r, &[6]), |g, x| {
            let y = g.relu(x)?;
            project(g, y, 6)
        }),
        case("reshape", |r| randn(r, &[2, 3]), |g, x| {
            let y = g.reshape(x, &[3, 2])?;
            project(g, y, 7)
        }),
        case("add_channel_bias", |r| randn(r, &[3]), |g, b| {
            let x = g.constant(weights(8, &[2, 3, 2, 2]));
            let y = g.add_channel_bias(x, b)?;
            let y = g.mul(y, y)?;
            project(g, y, 9)
        }),
        case("conv2d.input", |r| randn(r, &[2, 2, 5, 5]), |g, x| {
            let k = g.constant(weights(10, &[3, 2, 3, 3]));
            let y = g.conv2d(x, k, Conv2dSpec::default())?;
            project(g, y, 11)
        }),
        case("conv2d.kernel", |r| randn(r, &[3, 2, 3, 3]), |g, k| {
            let x = g.constant(weights(12, &[2, 2, 5, 4]));
            let y = g.conv2d(x, k, Conv2dSpec { stride: 2, padding: 1 })?;
            project(g, y, 13)
        }),
        case("maxpool2", |r| spread(r, &[2, 2, 4, 5]), |g, x| {
            let y = g.maxpool2(x)?;
            project(g, y, 14)
        }),
        case("batch_norm.train", |r| randn(r, &[3, 2, 2, 2]), |g, x| {
            let gamma = g.constant(Tensor::new(&[2], vec![1.3, -0.7])?);
            let beta = g.constant(Tensor::new(&[2], vec![0.1, 0.2])?);
            let y = g.batch_norm(x, gamma, beta, 1e-5, None)?.out;
            project(g, y, 15)
        }),
        case("batch_norm.affine", |r| randn(r, &[2]), |g, gamma| {
            let x = g.constant(weights(16, &[3, 2, 2, 2]));
            let beta = g.constant(Tensor::new(&[2], vec![0.1, 0.2])?);
            let y = g.batch_norm(x, gamma, beta, 1e-5, None)?.out;
            project(g, y, 17)
        }),
        case("batch_norm.inference", |r| randn(r, &[2, 2, 2, 2]), |g, x| {
            let gamma = g.constant(Tensor::new(&[2], vec![0.9, 1.1])?);
            let beta = g.constant(Tensor::new(&[2], vec![0.0, -0.3])?);
            let stats = ([0.2, -0.1], [1.5, 0.8]);
            let y = g.batch_norm(x, gamma, beta, 1e-5, Some((&stats.0, &stats.1)))?.out;
            project(g, y, 18)
        }),
    ];
    for (order, cfg, tag) in [
        (1u8, pool_std, "pool_order1"),
        (2, pool_std, "pool_order2"),
        (3, pool_std, "pool_order3"),
        (3, pool_lit, "pool_order3.literal_matrix"),
    ] {
        cases.push(case(tag, |r| randn(r, &[6, 3]), move |g, x| {
            let y = g.pool(x, order, cfg)?;
            project(g, y, 20 + order as u64)
        }));
        cases.push(case(&format!("{tag}.batched"), |r| randn(r, &[2, 3, 2, 2]), move |g, x| {
            let y = g.pool(x, order, cfg)?;
            project(g, y, 30 + order as u64)
        }));
    }
    cases.extend([
        case("head_forward.softmax", |r| randn(r, &[3]), |g, z| {
            let w = g.constant(weights(40, &[3, 5]));
            let z = g.reshape(z, &[1, 3])?;
            let logits = g.matmul(z, w)?;
            let p = g.softmax_rows(logits)?;
            project(g, p, 41)
        }),
        case("head_forward.weights", |r| randn(r, &[3, 5]), |g, w| {
            let z = g.constant(weights(42, &[2, 3]));
            let logits = g.matmul(z, w)?;
            let p = g.softmax_rows(logits)?;
            project(g, p, 43)
        }),
        case("cb_loss.logits", |r| randn(r, &[4, 6]), |g, x| {
            g.softmax_cross_entropy(x, &[0, 5, 2, 2], 1.0)
        }),
        case("projector_forward", |r| randn(r, &[4]), |g, z| {
            let u = g.constant(weights(44, &[4, 3]));
            let z = g.reshape(z, &[1, 4])?;
            let v = g.matmul(z, u)?;
            let n = g.l2_normalize_rows(v, model::projector_eps())?;
            project(g, n, 45)
        }),
        case("sb_loss", |r| unit_rows(r, 6, 3), |g, u| {
            // Renormalize so perturbed inputs stay on the sphere.
            let u = g.l2_normalize_rows(u, 1e-12)?;
            losses::sb_loss_graph(g, u, &[0, 1, 0, 1, 2, 2], &LossConfig {
                tau: 0.5,
                ..LossConfig::default()
            })
        }),
        case("sb_loss.literal", |r| unit_rows(r, 5, 3), |g, u| {
            let u = g.l2_normalize_rows(u, 1e-12)?;
            losses::sb_loss_graph(g, u, &[0, 1, 0, 1, 2], &LossConfig {
                tau: 0.5,
                literal_eq8: true,
                reduction: losses::Reduction::Mean,
                ..LossConfig::default()
            })
        }),
    ]);
    for (tag, norm, residual) in [
        ("backbone.plain", Normalization::None, false),
        ("backbone.residual_batchnorm", Normalization::PerChannel, true),
    ] {
        let model = micro_model(norm, residual);
        cases.push(case(tag, |r| randn(r, &[2, 2, 4, 4]), move |g, x| {
            let fg = model.build_backbone(g, x, true)?;
            let z3 = g.pool(fg.features, 3, model.config.pool)?;
            let z2 = g.pool(fg.features, 2, model.config.pool)?;
            let a = project(g, z3, 50)?;
            let b = project(g, z2, 51)?;
            g.add(a, b)
        }));
    }
    cases
}
