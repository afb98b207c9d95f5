//! Per-branch training objectives and their weighted ensemble.
//!
//! Each branch is trained with a classification-based loss (cross-entropy
//! over the joint `8·C_b` label space) plus a similarity-based supervised
//! contrastive loss over its projected unit vectors:
//!
//! ```text
//! L_sb = −Σ_i log Σ_{q∈Q(i)} exp(u_i·u_q/τ) / Σ_{a∈D(q)} exp(u_a·u_q/τ)
//! ```
//!
//! `Q(i)` holds the samples sharing `i`'s label and `D(q)` the denominator
//! indices. By default the anchor is excluded from both (`q ≠ i`, `a ≠ q`);
//! `literal_eq8` keeps them, which makes the loss bounded below by a
//! collapsed-embedding solution. Note the log sits outside the sum over
//! positives.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::{log_sum_exp, Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Sum over the batch.
    #[default]
    Sum,
    /// Sum divided by the batch size.
    Mean,
}

impl Reduction {
    pub fn scale(self, batch: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / batch as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub literal_eq8: bool,
    #[serde(default)]
    pub reduction: Reduction,
    /// Include the classification-based term.
    #[serde(default = "yes")]
    pub use_cb: bool,
    /// Include the similarity-based term.
    #[serde(default = "yes")]
    pub use_sb: bool,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn yes() -> bool {
    true
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: DEFAULT_TAU,
            literal_eq8: false,
            reduction: Reduction::Sum,
            use_cb: true,
            use_sb: true,
        }
    }
}

impl LossConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            p.push(format!("loss.tau must be > 0, got {}", self.tau));
        }
        if !self.use_cb && !self.use_sb {
            p.push("loss: at least one of use_cb / use_sb must be enabled".into());
        }
        p
    }
}

/// Per-branch loss values; `total = cb + sb`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchLossReport {
    pub cb: f64,
    pub sb: f64,
    pub total: f64,
}

impl BranchLossReport {
    pub fn new(cb: f64, sb: f64) -> Self {
        BranchLossReport {
            cb,
            sb,
            total: cb + sb,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleWeights {
    pub alpha: [f64; 3],
}

impl Default for EnsembleWeights {
    fn default() -> Self {
        EnsembleWeights { alpha: [1.0; 3] }
    }
}

impl EnsembleWeights {
    pub fn new(a1: f64, a2: f64, a3: f64) -> Result<Self> {
        let w = EnsembleWeights { alpha: [a1, a2, a3] };
        w.validate()?;
        Ok(w)
    }

    /// The down-weighted second-order setting used for some datasets.
    pub fn reduced_second_order() -> Self {
        EnsembleWeights {
            alpha: [1.0, 0.3, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (o, a) in self.alpha.iter().enumerate() {
            if !(*a >= 0.0 && a.is_finite()) {
                return Err(Error::InvalidWeights(format!(
                    "alpha_{} must be a finite value >= 0, got {a}",
                    o + 1
                )));
            }
        }
        Ok(())
    }
}

/// `−Σ_i log P[i, label_i]` over rows of a probability matrix.
pub fn cb_loss(p: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, k) = p.as_matrix("cb_loss")?;
    if labels.len() != b {
        return dim_err(format!("{} labels for {b} rows", labels.len()));
    }
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Contract(format!("label {y} out of range for {k} classes")));
        }
        let row = &p.data()[i * k..(i + 1) * k];
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::Contract(format!("row {i} is not a probability vector (sum {s})")));
        }
        loss -= row[y].ln();
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("cb_loss: zero probability on a true class".into()));
    }
    Ok(loss)
}

/// Supervised contrastive loss of `B×p` unit rows, summed over anchors.
pub fn sb_loss(u: &Tensor, labels: &[usize], tau: f64, literal_eq8: bool) -> Result<f64> {
    let (b, p) = u.as_matrix("sb_loss")?;
    check_unit_rows(u.data(), p)?;
    Ok(supcon_forward(u.data(), b, p, labels, tau, literal_eq8, 1.0)?.0)
}

pub fn branch_loss(
    p: &Tensor,
    u: &Tensor,
    labels: &[usize],
    tau: f64,
    literal_eq8: bool,
) -> Result<BranchLossReport> {
    Ok(BranchLossReport::new(
        cb_loss(p, labels)?,
        sb_loss(u, labels, tau, literal_eq8)?,
    ))
}

/// `Σ_o α_o · total_o`.
pub fn overall_loss(reports: &[BranchLossReport; 3], weights: &EnsembleWeights) -> Result<f64> {
    weights.validate()?;
    Ok(reports
        .iter()
        .zip(&weights.alpha)
        .map(|(r, a)| a * r.total)
        .sum())
}

/// Graph version of [`sb_loss`] with the reduction scale applied.
pub fn sb_loss_graph(g: &mut Graph, u: Var, labels: &[usize], cfg: &LossConfig) -> Result<Var> {
    let ut = g.value(u);
    let (b, p) = ut.as_matrix("sb_loss")?;
    check_unit_rows(ut.data(), p)?;
    let scale = cfg.reduction.scale(b);
    let (value, grad_sim) = supcon_forward(ut.data(), b, p, labels, cfg.tau, cfg.literal_eq8, scale)?;
    g.supcon(u, value, grad_sim, cfg.tau)
}

/// Graph version of the classification loss on logits (softmax folded in).
pub fn cb_loss_graph(g: &mut Graph, logits: Var, labels: &[usize], cfg: &LossConfig) -> Result<Var> {
    let b = g.value(logits).shape()[0];
    g.softmax_cross_entropy(logits, labels, cfg.reduction.scale(b))
}

fn check_unit_rows(u: &[f64], p: usize) -> Result<()> {
    for (i, row) in u.chunks_exact(p).enumerate() {
        let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("sb_loss row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// Returns the scaled loss and `dL/dS` where `S = U Uᵀ / τ`.
fn supcon_forward(
    u: &[f64],
    b: usize,
    p: usize,
    labels: &[usize],
    tau: f64,
    literal: bool,
    scale: f64,
) -> Result<(f64, Vec<f64>)> {
    if labels.len() != b {
        return dim_err(format!("{} labels for {b} rows", labels.len()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Contract(format!("temperature must be > 0, got {tau}")));
    }
    let positives: Vec<Vec<usize>> = (0..b)
        .map(|i| {
            (0..b)
                .filter(|&q| labels[q] == labels[i] && (literal || q != i))
                .collect()
        })
        .collect();
    if let Some(i) = positives.iter().position(|q| q.is_empty()) {
        return Err(Error::Contract(format!(
            "sample {i} (label {}) has no positive in the batch",
            labels[i]
        )));
    }

    let mut sim = vec![0.0; b * b];
    crate::linalg::gemm(b, p, b, 1.0 / tau, u, false, u, true, 0.0, &mut sim);

    // Column-wise log-normalizers over the denominator set D(q).
    let lse: Vec<f64> = (0..b)
        .map(|q| {
            let col: Vec<f64> = (0..b)
                .filter(|&a| literal || a != q)
                .map(|a| sim[a * b + q])
                .collect();
            if col.is_empty() {
                f64::NEG_INFINITY
            } else {
                log_sum_exp(&col)
            }
        })
        .collect();

    let mut loss = 0.0;
    let mut grad = vec![0.0; b * b];
    let mut pos_weight = vec![0.0; b];
    for (i, qs) in positives.iter().enumerate() {
        let terms: Vec<f64> = qs.iter().map(|&q| sim[i * b + q] - lse[q]).collect();
        let t = log_sum_exp(&terms);
        loss -= t;
        for (&q, &term) in qs.iter().zip(&terms) {
            let w = (term - t).exp();
            grad[i * b + q] -= scale * w;
            pos_weight[q] += w;
        }
    }
    for q in 0..b {
        if pos_weight[q] == 0.0 {
            continue;
        }
        for a in 0..b {
            if literal || a != q {
                grad[a * b + q] += scale * pos_weight[q] * (sim[a * b + q] - lse[q]).exp();
            }
        }
    }
    Ok((scale * loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn unit_rows(rng: &mut Rng, b: usize, p: usize) -> Tensor {
        let mut data: Vec<f64> = (0..b * p).map(|_| rng.normal()).collect();
        for row in data.chunks_exact_mut(p) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        Tensor::new(&[b, p], data).unwrap()
    }

    /// Direct double loop over the formula, no shared helpers.
    fn supcon_oracle(u: &Tensor, labels: &[usize], tau: f64, literal: bool) -> f64 {
        let b = labels.len();
        let p = u.shape()[1];
        let dot = |i: usize, j: usize| -> f64 { (0..p).map(|k| u.get(&[i, k]) * u.get(&[j, k])).sum() };
        let mut loss = 0.0;
        for i in 0..b {
            let mut inner = 0.0;
            for q in 0..b {
                if labels[q] != labels[i] || (!literal && q == i) {
                    continue;
                }
                let mut den = 0.0;
                for a in 0..b {
                    if literal || a != q {
                        den += (dot(a, q) / tau).exp();
                    }
                }
                inner += (dot(i, q) / tau).exp() / den;
            }
            loss -= inner.ln();
        }
        loss
    }

    #[test]
    fn cb_zero_for_confident_correct() {
        let p = Tensor::new(&[2, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(cb_loss(&p, &[1, 0]).unwrap(), 0.0);
    }

    #[test]
    fn cb_uniform_over_512_classes() {
        let p = Tensor::full(&[1, 512], 1.0 / 512.0);
        assert!((cb_loss(&p, &[0]).unwrap() - 6.238_324_625_039_508).abs() < 1e-9);
    }

    #[test]
    fn cb_rejects_out_of_range_label() {
        let p = Tensor::full(&[1, 4], 0.25);
        assert!(matches!(cb_loss(&p, &[4]), Err(Error::Contract(_))));
    }

    #[test]
    fn cb_non_negative_on_random_probabilities() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..12).map(|_| rng.normal() * 3.0).collect();
            let p = Tensor::new(&[3, 4], crate::graph::softmax_rows(3, 4, &logits)).unwrap();
            assert!(cb_loss(&p, &[0, 1, 3]).unwrap() >= 0.0);
        }
    }

    #[test]
    fn sb_two_identical_vectors() {
        let u = Tensor::new(&[2, 2], vec![0.6, 0.8, 0.6, 0.8]).unwrap();
        assert!(sb_loss(&u, &[5, 5], 1.0, false).unwrap().abs() < 1e-15);
    }

    #[test]
    fn sb_rejects_missing_positive() {
        let u = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let err = sb_loss(&u, &[0, 1], 0.1, false).unwrap_err();
        assert!(err.to_string().contains("label 0"), "{err}");
        // The literal form always counts the anchor itself.
        assert!(sb_loss(&u, &[0, 1], 0.1, true).is_ok());
    }

    #[test]
    fn sb_rejects_non_unit_rows() {
        let u = Tensor::new(&[2, 2], vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(sb_loss(&u, &[0, 0], 0.1, false).is_err());
    }

    #[test]
    fn sb_matches_double_loop() {
        let mut rng = Rng::new(12);
        let labels = [0, 1, 0, 2, 1, 2, 0, 1];
        for literal in [false, true] {
            for _ in 0..10 {
                let u = unit_rows(&mut rng, 8, 5);
                let got = sb_loss(&u, &labels, 0.3, literal).unwrap();
                let want = supcon_oracle(&u, &labels, 0.3, literal);
                assert!((got - want).abs() < 1e-10, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn sb_temperature_scaling_identity() {
        // Loss at τ·c equals loss at τ with similarities divided by c; here
        // similarities are rescaled by feeding the oracle the same vectors.
        let mut rng = Rng::new(2);
        let labels = [0, 0, 1, 1];
        let u = unit_rows(&mut rng, 4, 3);
        let c = 2.5;
        let a = sb_loss(&u, &labels, 0.2 * c, false).unwrap();
        let b = supcon_oracle(&u, &labels, 0.2 * c, false);
        assert!((a - b).abs() < 1e-12);
        // Dividing similarities by c == scaling every dot product by 1/c.
        let shrunk: f64 = {
            let b_ = 4;
            let dot = |i: usize, j: usize| -> f64 {
                (0..3).map(|k| u.get(&[i, k]) * u.get(&[j, k])).sum::<f64>() / c
            };
            let mut loss = 0.0;
            for i in 0..b_ {
                let mut inner = 0.0;
                for q in 0..b_ {
                    if labels[q] != labels[i] || q == i {
                        continue;
                    }
                    let den: f64 = (0..b_).filter(|&a| a != q).map(|a| (dot(a, q) / 0.2).exp()).sum();
                    inner += (dot(i, q) / 0.2).exp() / den;
                }
                loss -= inner.ln();
            }
            loss
        };
        assert!((a - shrunk).abs() < 1e-12);
    }

    #[test]
    fn sb_rotation_invariant() {
        let mut rng = Rng::new(5);
        let labels = [0, 0, 1, 1, 2, 2];
        let u = unit_rows(&mut rng, 6, 2);
        let th: f64 = 0.7;
        let (c, s) = (th.cos(), th.sin());
        let rot = Tensor::new(&[2, 2], vec![c, -s, s, c]).unwrap();
        let ur = u.matmul(&rot).unwrap();
        let a = sb_loss(&u, &labels, 0.1, false).unwrap();
        let b = sb_loss(&ur, &labels, 0.1, false).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn branch_total_is_sum() {
        let p = Tensor::new(&[2, 2], vec![0.7, 0.3, 0.4, 0.6]).unwrap();
        let u = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = branch_loss(&p, &u, &[0, 0], 0.5, false).unwrap();
        assert_eq!(r.total, r.cb + r.sb);
        let want_cb = -(0.7f64.ln() + 0.4f64.ln());
        assert!((r.cb - want_cb).abs() < 1e-14);
        // orthogonal pair, self-excluded denominators have one term each
        assert!(r.sb.abs() < 1e-14);
        assert_eq!(BranchLossReport::new(0.0, 0.0).total, 0.0);
    }

    #[test]
    fn overall_weighting() {
        let r = [
            BranchLossReport::new(1.0, 2.0),
            BranchLossReport::new(0.5, 0.5),
            BranchLossReport::new(2.0, 0.25),
        ];
        let all = overall_loss(&r, &EnsembleWeights::default()).unwrap();
        assert_eq!(all, 3.0 + 1.0 + 2.25);
        let only1 = overall_loss(&r, &EnsembleWeights::new(1.0, 0.0, 0.0).unwrap()).unwrap();
        assert_eq!(only1, 3.0);
        // 3 + 0.3 * 1 + 2.25
        let reduced = overall_loss(&r, &EnsembleWeights::reduced_second_order()).unwrap();
        assert!((reduced - 5.55).abs() < 1e-12);
        assert!(EnsembleWeights::new(1.0, -0.1, 1.0).is_err());
    }

    #[test]
    fn overall_linear_in_branch_total() {
        let w = EnsembleWeights::new(0.4, 1.3, 0.7).unwrap();
        let base = [BranchLossReport::new(1.0, 1.0); 3];
        let mut scaled = base;
        scaled[1] = BranchLossReport::new(3.0, 3.0);
        let d = overall_loss(&scaled, &w).unwrap() - overall_loss(&base, &w).unwrap();
        assert!((d - 1.3 * 4.0).abs() < 1e-12);
    }
}
