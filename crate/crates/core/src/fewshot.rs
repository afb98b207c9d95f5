//! Stage-two evaluation: N-way K-shot episodes on the novel split, a frozen
//! backbone producing concatenated branch features, and an episodic
//! multinomial logistic regression.
//!
//! The regression is solved in the span of the support features. With
//! `W = Xᵀ A` the scores are `G A + 1bᵀ` for the support Gram matrix `G`, the
//! penalty is `tr(AᵀGA)`, and a gradient step on `W` is the step
//! `A ← A − s·(R + l2·A)` with `R = (P − Y)/n`. Starting from zero this is
//! exactly primal gradient descent, at a cost independent of the feature
//! width. The bias is not penalized.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageSet;
use crate::error::{dim_err, Error, Result};
use crate::graph::softmax_rows;
use crate::linalg;
use crate::model::Model;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_WAY: usize = 5;
pub const DEFAULT_QUERY: usize = 15;
pub const DEFAULT_EPISODES: usize = 2000;

/// One N-way K-shot task. Indices refer to the image set it was drawn from;
/// episode labels are positions in `classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
}

/// Draws `way` classes uniformly among those with at least `shot + query`
/// images, then `shot + query` distinct images per class without
/// replacement; the first `shot` form the support.
pub fn sample_episode(set: &ImageSet, way: usize, shot: usize, query: usize, rng: &mut Rng) -> Result<Episode> {
    if way == 0 || shot == 0 || query == 0 {
        return Err(Error::Contract(format!(
            "way, shot and query must be >= 1, got {way}/{shot}/{query}"
        )));
    }
    let need = shot + query;
    let by_class = set.by_class();
    let eligible: Vec<(usize, &Vec<usize>)> = by_class
        .iter()
        .filter(|(_, m)| m.len() >= need)
        .map(|(&c, m)| (c, m))
        .collect();
    if eligible.len() < way {
        if let Some((&class, m)) = by_class.iter().find(|(_, m)| m.len() < need) {
            if by_class.len() >= way {
                return Err(Error::InsufficientClass {
                    class,
                    available: m.len(),
                    required: need,
                });
            }
        }
        return Err(Error::InsufficientClasses {
            available: eligible.len(),
            required: way,
        });
    }
    let picked = rng.choose_distinct(eligible.len(), way);
    let mut ep = Episode {
        way,
        shot,
        query_per_class: query,
        classes: Vec::with_capacity(way),
        support: Vec::with_capacity(way * shot),
        support_labels: Vec::with_capacity(way * shot),
        query: Vec::with_capacity(way * query),
        query_labels: Vec::with_capacity(way * query),
    };
    for (label, &e) in picked.iter().enumerate() {
        let (class, members) = eligible[e];
        ep.classes.push(class);
        let chosen = rng.choose_distinct(members.len(), need);
        for (j, &m) in chosen.iter().enumerate() {
            if j < shot {
                ep.support.push(members[m]);
                ep.support_labels.push(label);
            } else {
                ep.query.push(members[m]);
                ep.query_labels.push(label);
            }
        }
    }
    Ok(ep)
}

// ---- features -------------------------------------------------------------------------

/// Enabled pooling branches, always kept in order 1, 2, 3.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BranchMask([bool; 3]);

impl BranchMask {
    pub const ALL: BranchMask = BranchMask([true; 3]);

    pub fn new(orders: &[usize]) -> Result<BranchMask> {
        let mut m = [false; 3];
        for &o in orders {
            if !(1..=3).contains(&o) {
                return Err(Error::Contract(format!("branch {o} does not exist (expected 1, 2 or 3)")));
            }
            m[o - 1] = true;
        }
        if !m.iter().any(|&b| b) {
            return Err(Error::Contract("branch mask enables no branch".into()));
        }
        Ok(BranchMask(m))
    }

    pub fn single(order: usize) -> Result<BranchMask> {
        BranchMask::new(&[order])
    }

    pub fn enabled(&self, order: usize) -> bool {
        (1..=3).contains(&order) && self.0[order - 1]
    }

    pub fn orders(&self) -> Vec<usize> {
        (1..=3).filter(|&o| self.0[o - 1]).collect()
    }

    /// Width of the concatenated feature for backbone width `d`.
    pub fn feature_len(&self, d: usize) -> usize {
        self.orders().iter().map(|&o| if o == 1 { d } else { d * d }).sum()
    }
}

impl Default for BranchMask {
    fn default() -> Self {
        BranchMask::ALL
    }
}

impl fmt::Display for BranchMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: Vec<String> = self.orders().iter().map(|o| o.to_string()).collect();
        f.write_str(&s.join(","))
    }
}

impl FromStr for BranchMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<BranchMask> {
        let orders = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Contract(format!("invalid branch {t:?} in mask {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        BranchMask::new(&orders)
    }
}

impl Serialize for BranchMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.orders().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BranchMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let orders = Vec::<usize>::deserialize(d)?;
        BranchMask::new(&orders).map_err(serde::de::Error::custom)
    }
}

fn normalize_rows(data: &mut [f64], width: usize) {
    for row in data.chunks_exact_mut(width) {
        let n = linalg::dot(row, row).sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Pooled branch features of every image in `set`, each branch
/// L2-normalized per image unless `normalize` is false.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    pub branches: [Tensor; 3],
    pub normalized: bool,
}

const FEATURE_CHUNK: usize = 64;

impl FeatureBank {
    pub fn compute(model: &Model, set: &ImageSet, normalize: bool) -> Result<FeatureBank> {
        if set.image_shape() != model.config.backbone.input_shape {
            return dim_err(format!(
                "images {:?} do not match the backbone input {:?}",
                set.image_shape(),
                model.config.backbone.input_shape
            ));
        }
        let idx: Vec<usize> = (0..set.len()).collect();
        let chunks: Vec<[Tensor; 3]> = idx
            .par_chunks(FEATURE_CHUNK)
            .map(|c| model.pooled_features(&set.batch(c)?))
            .collect::<Result<_>>()?;
        let mut branches = Vec::with_capacity(3);
        for o in 0..3 {
            let width = model.config.branch_dim(o + 1);
            let mut data: Vec<f64> = chunks.iter().flat_map(|c| c[o].data().iter().copied()).collect();
            if normalize {
                normalize_rows(&mut data, width);
            }
            branches.push(Tensor::new(&[set.len(), width], data)?);
        }
        Ok(FeatureBank {
            branches: branches.try_into().expect("three branches"),
            normalized: normalize,
        })
    }

    /// Concatenated features of the selected rows, enabled branches in order.
    pub fn concat(&self, rows: &[usize], mask: BranchMask) -> Result<Tensor> {
        let widths: Vec<usize> = mask.orders().iter().map(|&o| self.branches[o - 1].shape()[1]).collect();
        let total: usize = widths.iter().sum();
        let n = self.branches[0].shape()[0];
        let mut out = Vec::with_capacity(rows.len() * total);
        for &r in rows {
            if r >= n {
                return dim_err(format!("feature row {r} out of range for {n} images"));
            }
            for (&o, &w) in mask.orders().iter().zip(&widths) {
                out.extend_from_slice(&self.branches[o - 1].data()[r * w..(r + 1) * w]);
            }
        }
        Tensor::new(&[rows.len(), total], out)
    }

    /// Inner products between all images, summed over enabled branches.
    pub fn gram(&self, mask: BranchMask) -> Vec<f64> {
        let n = self.branches[0].shape()[0];
        let mut g = vec![0.0; n * n];
        for o in mask.orders() {
            let b = &self.branches[o - 1];
            let w = b.shape()[1];
            linalg::gemm(n, w, n, 1.0, b.data(), false, b.data(), true, 1.0, &mut g);
        }
        g
    }
}

/// Backbone → pooling → per-branch L2 normalization → concatenation of the
/// enabled branches, one row per image of the `N×C×H×W` input.
pub fn extract_features(model: &Model, images: &Tensor, mask: BranchMask, normalize: bool) -> Result<Tensor> {
    let pooled = model.pooled_features(images)?;
    let n = images.shape()[0];
    let parts: Vec<Vec<f64>> = mask
        .orders()
        .iter()
        .map(|&o| {
            let mut d = pooled[o - 1].data().to_vec();
            if normalize {
                normalize_rows(&mut d, pooled[o - 1].shape()[1]);
            }
            d
        })
        .collect();
    let widths: Vec<usize> = mask.orders().iter().map(|&o| pooled[o - 1].shape()[1]).collect();
    let mut out = Vec::with_capacity(n * widths.iter().sum::<usize>());
    for i in 0..n {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p[i * w..(i + 1) * w]);
        }
    }
    Tensor::new(&[n, widths.iter().sum()], out)
}

// ---- logistic regression --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogRegConfig {
    pub l2: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        LogRegConfig {
            l2: 1.0,
            tol: 1e-6,
            max_iter: 1000,
        }
    }
}

impl LogRegConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            p.push(format!("logreg.l2 must be >= 0, got {}", self.l2));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            p.push(format!("logreg.tol must be > 0, got {}", self.tol));
        }
        if self.max_iter == 0 {
            p.push("logreg.max_iter must be >= 1".into());
        }
        p
    }
}

/// Solution in dual coordinates: `W = Xᵀ·coef`.
#[derive(Clone, Debug)]
struct KernelFit {
    coef: Vec<f64>,
    bias: Vec<f64>,
    iterations: usize,
    grad_norm: f64,
    objective_trace: Vec<f64>,
}

struct KernelProblem<'a> {
    gram: &'a [f64],
    labels: &'a [usize],
    n: usize,
    k: usize,
    l2: f64,
}

impl KernelProblem<'_> {
    fn scores(&self, coef: &[f64], bias: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.n * self.k];
        linalg::gemm(self.n, self.n, self.k, 1.0, self.gram, false, coef, false, 0.0, &mut s);
        for row in s.chunks_exact_mut(self.k) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        s
    }

    /// Objective, probabilities, and `G·coef` (for the penalty).
    fn objective(&self, coef: &[f64], bias: &[f64]) -> (f64, Vec<f64>) {
        let s = self.scores(coef, bias);
        let probs = softmax_rows(self.n, self.k, &s);
        let mut ce = 0.0;
        for (i, &y) in self.labels.iter().enumerate() {
            let row = &s[i * self.k..(i + 1) * self.k];
            ce += crate::graph::log_sum_exp(row) - row[y];
        }
        ce /= self.n as f64;
        // tr(AᵀGA) = Σ A ∘ (G A)
        let mut ga = vec![0.0; self.n * self.k];
        linalg::gemm(self.n, self.n, self.k, 1.0, self.gram, false, coef, false, 0.0, &mut ga);
        let penalty = 0.5 * self.l2 * linalg::dot(coef, &ga);
        (ce + penalty, probs)
    }

    /// Inner product of the primal weights `Xᵀa` and `Xᵀb`.
    fn primal_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut gb = vec![0.0; self.n * self.k];
        linalg::gemm(self.n, self.n, self.k, 1.0, self.gram, false, b, false, 0.0, &mut gb);
        linalg::dot(a, &gb)
    }

    /// Dual-coordinate direction `R + l2·A`, bias gradient, and the primal
    /// gradient norm.
    fn gradient(&self, coef: &[f64], probs: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let inv_n = 1.0 / self.n as f64;
        let mut dir = vec![0.0; self.n * self.k];
        let mut gb = vec![0.0; self.k];
        for i in 0..self.n {
            for j in 0..self.k {
                let y = if self.labels[i] == j { 1.0 } else { 0.0 };
                let r = (probs[i * self.k + j] - y) * inv_n;
                gb[j] += r;
                dir[i * self.k + j] = r + self.l2 * coef[i * self.k + j];
            }
        }
        // ‖Xᵀ D‖² = tr(Dᵀ G D)
        let mut gd = vec![0.0; self.n * self.k];
        linalg::gemm(self.n, self.n, self.k, 1.0, self.gram, false, &dir, false, 0.0, &mut gd);
        let sq = linalg::dot(&dir, &gd).max(0.0) + linalg::dot(&gb, &gb);
        (dir, gb, sq.sqrt())
    }
}

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-20;

fn fit_kernel(gram: &[f64], labels: &[usize], k: usize, cfg: &LogRegConfig) -> Result<KernelFit> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let n = labels.len();
    if gram.len() != n * n {
        return dim_err(format!("gram of {} entries for {n} samples", gram.len()));
    }
    if n < k {
        return Err(Error::Contract(format!("{n} samples for {k} classes")));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Contract(format!("label {y} out of range for {k} classes")));
    }
    let prob = KernelProblem { gram, labels, n, k, l2: cfg.l2 };
    let mut coef = vec![0.0; n * k];
    let mut bias = vec![0.0; k];
    let (mut obj, mut probs) = prob.objective(&coef, &bias);
    let mut trace = vec![obj];
    let mut step = 1.0;
    let mut prev: Option<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = None;
    for it in 0..cfg.max_iter {
        let (dir, gb, gnorm) = prob.gradient(&coef, &probs);
        if gnorm < cfg.tol {
            return Ok(KernelFit {
                coef,
                bias,
                iterations: it,
                grad_norm: gnorm,
                objective_trace: trace,
            });
        }
        // Trial step: Barzilai–Borwein from the last move, measured in the
        // primal metric; otherwise twice the last accepted step.
        step = match &prev {
            Some((pc, pb, pd, pgb)) => {
                let dc: Vec<f64> = coef.iter().zip(pc).map(|(a, b)| a - b).collect();
                let dd: Vec<f64> = dir.iter().zip(pd).map(|(a, b)| a - b).collect();
                let db: Vec<f64> = bias.iter().zip(pb).map(|(a, b)| a - b).collect();
                let dgb: Vec<f64> = gb.iter().zip(pgb).map(|(a, b)| a - b).collect();
                let ss = prob.primal_dot(&dc, &dc) + linalg::dot(&db, &db);
                let sy = prob.primal_dot(&dc, &dd) + linalg::dot(&db, &dgb);
                if sy > 0.0 && ss > 0.0 {
                    ss / sy
                } else {
                    2.0 * step
                }
            }
            None => step,
        };
        loop {
            let c2: Vec<f64> = coef.iter().zip(&dir).map(|(a, d)| a - step * d).collect();
            let b2: Vec<f64> = bias.iter().zip(&gb).map(|(a, d)| a - step * d).collect();
            let (o2, p2) = prob.objective(&c2, &b2);
            if o2 <= obj - ARMIJO * step * gnorm * gnorm {
                prev = Some((
                    std::mem::replace(&mut coef, c2),
                    std::mem::replace(&mut bias, b2),
                    dir,
                    gb,
                ));
                obj = o2;
                probs = p2;
                trace.push(obj);
                break;
            }
            step *= 0.5;
            if step < MIN_STEP {
                return Err(Error::NotConverged {
                    iterations: it,
                    grad_norm: gnorm,
                });
            }
        }
    }
    let (_, _, gnorm) = prob.gradient(&coef, &probs);
    if gnorm < cfg.tol {
        return Ok(KernelFit {
            coef,
            bias,
            iterations: cfg.max_iter,
            grad_norm: gnorm,
            objective_trace: trace,
        });
    }
    Err(Error::NotConverged {
        iterations: cfg.max_iter,
        grad_norm: gnorm,
    })
}

/// Fitted classifier: scores are `x·W + b`.
#[derive(Clone, Debug)]
pub struct LogReg {
    /// `D×N` weights.
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Objective before the first step and after every accepted step.
    pub objective_trace: Vec<f64>,
}

/// Multinomial logistic regression on `NK×D` features minimizing mean
/// cross-entropy plus `(l2/2)·‖W‖²`, by gradient descent with backtracking.
pub fn fit_logreg(features: &Tensor, labels: &[usize], num_classes: usize, cfg: &LogRegConfig) -> Result<LogReg> {
    let (n, d) = features.as_matrix("fit_logreg features")?;
    if labels.len() != n {
        return dim_err(format!("{} labels for {n} rows", labels.len()));
    }
    let x = features.data();
    let mut gram = vec![0.0; n * n];
    linalg::gemm(n, d, n, 1.0, x, false, x, true, 0.0, &mut gram);
    let fit = fit_kernel(&gram, labels, num_classes, cfg)?;
    let mut w = vec![0.0; d * num_classes];
    linalg::gemm(d, n, num_classes, 1.0, x, true, &fit.coef, false, 0.0, &mut w);
    Ok(LogReg {
        weights: Tensor::new(&[d, num_classes], w)?,
        bias: fit.bias,
        iterations: fit.iterations,
        grad_norm: fit.grad_norm,
        objective_trace: fit.objective_trace,
    })
}

impl LogReg {
    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    /// `M×N` class scores of `M×D` features.
    pub fn scores(&self, features: &Tensor) -> Result<Tensor> {
        let (m, d) = features.as_matrix("classify features")?;
        let (wd, k) = self.weights.as_matrix("logreg weights")?;
        if d != wd {
            return dim_err(format!("features have width {d}, classifier expects {wd}"));
        }
        let mut s = linalg::matmul(m, d, k, features.data(), self.weights.data());
        for row in s.chunks_exact_mut(k) {
            row.iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
        }
        Tensor::new(&[m, k], s)
    }

    /// Mean cross-entropy plus the penalty at this solution.
    pub fn objective(&self, features: &Tensor, labels: &[usize], l2: f64) -> Result<f64> {
        let s = self.scores(features)?;
        let k = self.num_classes();
        let mut ce = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &s.data()[i * k..(i + 1) * k];
            ce += crate::graph::log_sum_exp(row) - row[y];
        }
        let w = self.weights.data();
        Ok(ce / labels.len() as f64 + 0.5 * l2 * linalg::dot(w, w))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Predicted labels: argmax of the class scores, ties to the lowest class.
pub fn classify(fit: &LogReg, features: &Tensor) -> Result<Vec<usize>> {
    let s = fit.scores(features)?;
    Ok(s.data().chunks_exact(fit.num_classes()).map(argmax).collect())
}

// ---- evaluation -----------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub episodes: usize,
    pub branches: BranchMask,
    /// Per-branch L2 normalization before concatenation.
    pub normalize: bool,
    pub logreg: LogRegConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            way: DEFAULT_WAY,
            shot: 1,
            query: DEFAULT_QUERY,
            episodes: DEFAULT_EPISODES,
            branches: BranchMask::ALL,
            normalize: true,
            logreg: LogRegConfig::default(),
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for (name, v) in [("way", self.way), ("shot", self.shot), ("query", self.query), ("episodes", self.episodes)] {
            if v == 0 {
                p.push(format!("eval.{name} must be >= 1"));
            }
        }
        p.extend(self.logreg.problems());
        p
    }
}

pub const SUMMARY_VERSION: u32 = 1;

/// Aggregate result; fields are declared in sorted order so the JSON keys
/// come out sorted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSummary {
    pub branch_mask: BranchMask,
    pub checkpoint_id: String,
    /// Percent.
    pub ci95: f64,
    pub episodes: usize,
    /// Mean accuracy in percent.
    pub mean: f64,
    pub shot: usize,
    pub version: u32,
    pub way: usize,
}

impl EvalSummary {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub summary: EvalSummary,
    /// Percent, one per episode in episode order.
    pub accuracies: Vec<f64>,
}

impl EvalReport {
    /// One `{"accuracy":…,"episode":…}` line per episode.
    pub fn write_episodes_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        for (i, a) in self.accuracies.iter().enumerate() {
            writeln!(w, "{}", serde_json::json!({ "accuracy": a, "episode": i }))?;
        }
        Ok(())
    }
}

/// `(mean, 1.96·std/√n)` with the population standard deviation.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Random stream of episode `e`: the seed XOR the episode index.
pub fn episode_rng(seed: u64, episode: usize) -> Rng {
    Rng::new(seed ^ episode as u64)
}

/// Accuracy (percent) of one episode, from precomputed inner products of
/// every image in the set.
pub fn episode_accuracy(gram: &[f64], n_images: usize, ep: &Episode, cfg: &LogRegConfig) -> Result<f64> {
    let ns = ep.support.len();
    let mut gs = vec![0.0; ns * ns];
    for (a, &i) in ep.support.iter().enumerate() {
        for (b, &j) in ep.support.iter().enumerate() {
            gs[a * ns + b] = gram[i * n_images + j];
        }
    }
    let fit = fit_kernel(&gs, &ep.support_labels, ep.way, cfg)?;
    let mut correct = 0;
    for (&q, &y) in ep.query.iter().zip(&ep.query_labels) {
        let mut scores = fit.bias.clone();
        for (a, &s) in ep.support.iter().enumerate() {
            let kq = gram[q * n_images + s];
            for (j, sc) in scores.iter_mut().enumerate() {
                *sc += kq * fit.coef[a * ep.way + j];
            }
        }
        if argmax(&scores) == y {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / ep.query.len() as f64)
}

/// Evaluates a frozen model on the novel images in `set` with features
/// already computed.
pub fn evaluate_bank(bank: &FeatureBank, set: &ImageSet, cfg: &EvalConfig, checkpoint_id: &str) -> Result<EvalReport> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let n = set.len();
    let gram = bank.gram(cfg.branches);
    let accuracies: Vec<f64> = (0..cfg.episodes)
        .into_par_iter()
        .map(|e| {
            let mut rng = episode_rng(cfg.seed, e);
            sample_episode(set, cfg.way, cfg.shot, cfg.query, &mut rng)
                .and_then(|ep| episode_accuracy(&gram, n, &ep, &cfg.logreg))
                .map_err(|source| Error::Episode {
                    episode: e,
                    source: Box::new(source),
                })
        })
        .collect::<Result<_>>()?;
    let (mean, ci95) = mean_ci95(&accuracies);
    Ok(EvalReport {
        summary: EvalSummary {
            branch_mask: cfg.branches,
            checkpoint_id: checkpoint_id.to_string(),
            ci95,
            episodes: cfg.episodes,
            mean,
            shot: cfg.shot,
            version: SUMMARY_VERSION,
            way: cfg.way,
        },
        accuracies,
    })
}

/// Samples episodes → extracts features → fits → classifies, and
/// aggregates accuracy with a 95% confidence interval.
pub fn evaluate(model: &Model, set: &ImageSet, cfg: &EvalConfig, checkpoint_id: &str) -> Result<EvalReport> {
    let bank = FeatureBank::compute(model, set, cfg.normalize)?;
    evaluate_bank(&bank, set, cfg, checkpoint_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneConfig, BlockSpec, ModelConfig, Normalization};

    fn toy_set(classes: usize, per_class: usize) -> ImageSet {
        let labels: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat(c).take(per_class)).collect();
        let mut rng = Rng::new(11);
        let pixels = (0..labels.len() * 3 * 4 * 4).map(|_| rng.normal()).collect();
        ImageSet::new([3, 4, 4], pixels, labels).unwrap()
    }

    fn toy_model() -> Model {
        let cfg = ModelConfig::new(
            BackboneConfig {
                blocks: vec![BlockSpec { out_channels: 4, pool: false }],
                input_shape: [3, 4, 4],
                normalization: Normalization::None,
                residual: false,
            },
            2,
        );
        Model::init(cfg, &mut Rng::new(2)).unwrap()
    }

    #[test]
    fn protocol_defaults() {
        let c = EvalConfig::default();
        assert_eq!((c.way, c.query, c.episodes), (5, 15, 2000));
        assert_eq!(c.logreg, LogRegConfig { l2: 1.0, tol: 1e-6, max_iter: 1000 });
    }

    #[test]
    fn episode_shapes_and_disjointness() {
        let set = toy_set(8, 20);
        let ep = sample_episode(&set, 5, 1, 15, &mut Rng::new(0)).unwrap();
        assert_eq!((ep.support.len(), ep.query.len()), (5, 75));
        let mut all: Vec<usize> = ep.support.iter().chain(&ep.query).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 80);
        for (&i, &l) in ep.support.iter().zip(&ep.support_labels).chain(ep.query.iter().zip(&ep.query_labels)) {
            assert_eq!(set.labels()[i], ep.classes[l]);
        }
    }

    #[test]
    fn minimal_episode_splits_two_samples() {
        let set = toy_set(1, 2);
        let ep = sample_episode(&set, 1, 1, 1, &mut Rng::new(3)).unwrap();
        let mut both = vec![ep.support[0], ep.query[0]];
        both.sort_unstable();
        assert_eq!(both, vec![0, 1]);
    }

    #[test]
    fn insufficient_population_is_named() {
        let set = toy_set(3, 4);
        assert!(matches!(
            sample_episode(&set, 5, 1, 1, &mut Rng::new(0)),
            Err(Error::InsufficientClasses { available: 3, required: 5 })
        ));
        let set = toy_set(5, 4);
        assert!(matches!(
            sample_episode(&set, 5, 1, 15, &mut Rng::new(0)),
            Err(Error::InsufficientClass { required: 16, .. })
        ));
    }

    #[test]
    fn class_choice_is_uniform() {
        // Chi-square against the uniform expectation, 7 classes, 3 per episode.
        let set = toy_set(7, 3);
        let trials = 10_000;
        let mut counts = [0usize; 7];
        for e in 0..trials {
            let ep = sample_episode(&set, 3, 1, 1, &mut episode_rng(99, e)).unwrap();
            ep.classes.iter().for_each(|&c| counts[c] += 1);
        }
        let expected = trials as f64 * 3.0 / 7.0;
        let p = 3.0 / 7.0;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        for &c in &counts {
            assert!((c as f64 - expected).abs() < 3.0 * sd, "{counts:?}");
        }
        // 6 degrees of freedom, 0.999 quantile.
        assert!(chi2 < 22.46, "chi2 {chi2}");
    }

    #[test]
    fn feature_widths_follow_the_mask() {
        assert_eq!(BranchMask::ALL.feature_len(64), 64 + 4096 + 4096);
        assert_eq!(BranchMask::single(1).unwrap().feature_len(64), 64);
        let model = toy_model();
        let set = toy_set(2, 2);
        let x = set.batch(&[0, 1, 1]).unwrap();
        let f = extract_features(&model, &x, BranchMask::ALL, true).unwrap();
        assert_eq!(f.shape(), &[3, 4 + 16 + 16]);
        let row = |r: usize| f.data()[r * 36..(r + 1) * 36].to_vec();
        assert_eq!(row(1), row(2));
        let n1: f64 = row(0)[..4].iter().map(|v| v * v).sum();
        assert!((n1 - 1.0).abs() < 1e-12);
        let f1 = extract_features(&model, &x, "3".parse().unwrap(), false).unwrap();
        assert_eq!(f1.shape(), &[3, 16]);
    }

    #[test]
    fn bank_matches_direct_extraction() {
        let model = toy_model();
        let set = toy_set(3, 30);
        let bank = FeatureBank::compute(&model, &set, true).unwrap();
        let rows = [5, 70, 2];
        let mask: BranchMask = "1,3".parse().unwrap();
        let direct = extract_features(&model, &set.batch(&rows).unwrap(), mask, true).unwrap();
        assert!(bank.concat(&rows, mask).unwrap().max_abs_diff(&direct) < 1e-12);
        let g = bank.gram(mask);
        let all = bank.concat(&(0..90).collect::<Vec<_>>(), mask).unwrap();
        let expect = all.matmul(&all.transpose().unwrap()).unwrap();
        assert!(expect.data().iter().zip(&g).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn mask_parsing() {
        let m: BranchMask = "3, 1".parse().unwrap();
        assert_eq!(m.orders(), vec![1, 3]);
        assert_eq!(m.to_string(), "1,3");
        assert!("4".parse::<BranchMask>().is_err());
        assert!("".parse::<BranchMask>().is_err());
        assert_eq!(serde_json::to_string(&BranchMask::ALL).unwrap(), "[1,2,3]");
    }

    #[test]
    fn symmetric_points_split_at_zero() {
        let x = Tensor::new(&[2, 1], vec![-1.0, 1.0]).unwrap();
        let cfg = LogRegConfig { l2: 0.01, ..LogRegConfig::default() };
        let fit = fit_logreg(&x, &[0, 1], 2, &cfg).unwrap();
        assert_eq!(classify(&fit, &x).unwrap(), vec![0, 1]);
        // Boundary where the two scores meet.
        let w = fit.weights.data();
        let boundary = -(fit.bias[1] - fit.bias[0]) / (w[1] - w[0]);
        assert!(boundary.abs() < 1e-6, "boundary {boundary}");
        // Grid-search oracle over the antisymmetric weight w1 = −w0 = t/2.
        let obj = |t: f64| (1.0 + (-t).exp()).ln() + 0.01 * 0.5 * (t * t / 2.0);
        let best = (0..=200_000).map(|i| i as f64 * 1e-4).min_by(|a, b| obj(*a).total_cmp(&obj(*b))).unwrap();
        assert!(((w[1] - w[0]) - best).abs() < 1e-3, "{} vs {best}", w[1] - w[0]);
    }

    #[test]
    fn duplicated_feature_gives_even_odds() {
        let x = Tensor::new(&[2, 2], vec![0.3, -0.7, 0.3, -0.7]).unwrap();
        let fit = fit_logreg(&x, &[0, 1], 2, &LogRegConfig::default()).unwrap();
        let s = fit.scores(&x).unwrap();
        let p = softmax_rows(2, 2, s.data());
        assert!(p.iter().all(|v| (v - 0.5).abs() < 1e-6), "{p:?}");
    }

    #[test]
    fn objective_decreases_monotonically() {
        let mut rng = Rng::new(4);
        let x = Tensor::new(&[10, 6], (0..60).map(|_| rng.normal()).collect()).unwrap();
        let labels: Vec<usize> = (0..10).map(|i| i % 5).collect();
        let fit = fit_logreg(&x, &labels, 5, &LogRegConfig { l2: 0.1, ..LogRegConfig::default() }).unwrap();
        assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(fit.grad_norm < 1e-6);
        let recomputed = fit.objective(&x, &labels, 0.1).unwrap();
        assert!((recomputed - fit.objective_trace.last().unwrap()).abs() < 1e-9);
    }

    #[test]
    fn tolerance_bounds_the_suboptimality() {
        let mut rng = Rng::new(5);
        let x = Tensor::new(&[15, 8], (0..120).map(|_| rng.normal()).collect()).unwrap();
        let labels: Vec<usize> = (0..15).map(|i| i % 5).collect();
        let loose = LogRegConfig { l2: 0.5, tol: 1e-4, max_iter: 1000 };
        let tight = LogRegConfig { tol: 1e-5, ..loose };
        let a = fit_logreg(&x, &labels, 5, &loose).unwrap();
        let b = fit_logreg(&x, &labels, 5, &tight).unwrap();
        let ja = a.objective(&x, &labels, 0.5).unwrap();
        let jb = b.objective(&x, &labels, 0.5).unwrap();
        // Convexity: J(a) − J(b) ≤ ‖∇J(a)‖·‖a − b‖.
        let dist = (a.weights.zip_with(&b.weights, |p, q| (p - q) * (p - q)).unwrap().sum()
            + a.bias.iter().zip(&b.bias).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
        .sqrt();
        assert!(ja - jb <= a.grad_norm * dist + 1e-12, "{ja} {jb}");
        assert!(ja >= jb - b.grad_norm * dist - 1e-12);
    }

    #[test]
    fn non_convergence_reports_gradient() {
        let x = Tensor::new(&[2, 1], vec![-1.0, 1.0]).unwrap();
        let cfg = LogRegConfig { l2: 0.0, tol: 1e-12, max_iter: 3 };
        assert!(matches!(
            fit_logreg(&x, &[0, 1], 2, &cfg),
            Err(Error::NotConverged { iterations: 3, .. })
        ));
    }

    #[test]
    fn classification_rules() {
        let x = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, -1.0]).unwrap();
        let fit = fit_logreg(&x, &[0, 1, 2], 3, &LogRegConfig { l2: 0.01, ..LogRegConfig::default() }).unwrap();
        assert_eq!(classify(&fit, &x).unwrap(), vec![0, 1, 2]);
        // Exhaustive score recomputation.
        let q = Tensor::new(&[2, 2], vec![0.4, -0.2, 2.0, 1.5]).unwrap();
        let preds = classify(&fit, &q).unwrap();
        for (r, &p) in preds.iter().enumerate() {
            let score = |c: usize| (0..2).map(|d| q.data()[r * 2 + d] * fit.weights.data()[d * 3 + c]).sum::<f64>() + fit.bias[c];
            assert!((0..3).all(|c| score(c) <= score(p)));
        }
        assert_eq!(argmax(&[0.2, 0.2, 0.2]), 0);
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
        assert!(classify(&fit, &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn query_permutation_permutes_predictions() {
        let mut rng = Rng::new(6);
        let x = Tensor::new(&[6, 3], (0..18).map(|_| rng.normal()).collect()).unwrap();
        let fit = fit_logreg(&x, &[0, 1, 2, 0, 1, 2], 3, &LogRegConfig::default()).unwrap();
        let q: Vec<f64> = (0..30).map(|_| rng.normal()).collect();
        let perm = rng.permutation(10);
        let qp: Vec<f64> = perm.iter().flat_map(|&i| q[i * 3..i * 3 + 3].to_vec()).collect();
        let a = classify(&fit, &Tensor::new(&[10, 3], q).unwrap()).unwrap();
        let b = classify(&fit, &Tensor::new(&[10, 3], qp).unwrap()).unwrap();
        assert_eq!(b, perm.iter().map(|&i| a[i]).collect::<Vec<_>>());
    }

    #[test]
    fn kernel_scores_match_primal_scores() {
        let mut rng = Rng::new(8);
        let x = Tensor::new(&[20, 5], (0..100).map(|_| rng.normal()).collect()).unwrap();
        let set_labels: Vec<usize> = (0..20).map(|i| i / 4).collect();
        let set = ImageSet::new([1, 1, 1], vec![0.0; 20], set_labels).unwrap();
        let bank = FeatureBank {
            branches: [x.clone(), Tensor::zeros(&[20, 1]), Tensor::zeros(&[20, 1])],
            normalized: false,
        };
        let gram = bank.gram(BranchMask::single(1).unwrap());
        let ep = sample_episode(&set, 5, 2, 2, &mut Rng::new(1)).unwrap();
        let acc = episode_accuracy(&gram, 20, &ep, &LogRegConfig::default()).unwrap();
        let fit = fit_logreg(&bank.concat(&ep.support, BranchMask::single(1).unwrap()).unwrap(), &ep.support_labels, 5, &LogRegConfig::default()).unwrap();
        let preds = classify(&fit, &bank.concat(&ep.query, BranchMask::single(1).unwrap()).unwrap()).unwrap();
        let correct = preds.iter().zip(&ep.query_labels).filter(|(p, y)| p == y).count();
        assert_eq!(acc, 100.0 * correct as f64 / 10.0);
    }

    #[test]
    fn ci_uses_population_deviation() {
        let (m, c) = mean_ci95(&[0.0, 100.0]);
        assert_eq!(m, 50.0);
        assert!((c - 1.96 * 50.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn random_features_sit_at_chance() {
        let model = toy_model();
        let set = toy_set(20, 60);
        let cfg = EvalConfig { episodes: 500, seed: 17, ..EvalConfig::default() };
        let r = evaluate(&model, &set, &cfg, "x").unwrap();
        assert!((r.summary.mean - 20.0).abs() < r.summary.ci95, "{:?}", r.summary);
        assert_eq!(r.accuracies.len(), 500);
        // Episode results do not depend on scheduling.
        let again = evaluate(&model, &set, &cfg, "x").unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn summary_json_keys_are_sorted() {
        let s = EvalSummary {
            branch_mask: BranchMask::ALL,
            checkpoint_id: "ab".into(),
            ci95: 0.5,
            episodes: 2,
            mean: 40.0,
            shot: 1,
            version: SUMMARY_VERSION,
            way: 5,
        };
        let text = s.to_json().unwrap();
        let keys = ["branch_mask", "checkpoint_id", "ci95", "episodes", "mean", "shot", "version", "way"];
        let pos: Vec<usize> = keys.iter().map(|k| text.find(&format!("\"{k}\"")).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{text}");
        let back: EvalSummary = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }
}
