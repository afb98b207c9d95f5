//! Exact checks of the ensemble generalization bound on finite domains.
//!
//! A domain has `m` points carrying base and novel densities `η_b`, `η_n`,
//! label functions `f_b`, `f_n` and hypotheses `h_1..h_O` with convex
//! weights `α`. The ensemble is `h̄ = Σ α_o h_o` and two inequalities are
//! evaluated:
//!
//! ```text
//! e_n(h̄) ≤ e_b(h̄) + D + λ         D = Σ |η_b − η_n|·|h̄ − f_n|,  λ = Σ η_b |f_n − f_b|
//! e_b(h̄) ≤ Σ α_o e_b(h_o)         (convexity of the loss)
//! ```
//!
//! The first holds for the absolute loss (triangle inequality) and can fail
//! for the squared loss, so `slack1` is always computed with absolute
//! errors. The second is checked under whichever convex loss is chosen.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::rng::Rng;

pub const SUM_TOLERANCE: f64 = 1e-12;
pub const SLACK_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Abs,
    Sq,
}

impl Loss {
    pub fn eval(self, h: f64, f: f64) -> f64 {
        match self {
            Loss::Abs => (h - f).abs(),
            Loss::Sq => (h - f) * (h - f),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDomainInstance {
    pub eta_b: Vec<f64>,
    pub eta_n: Vec<f64>,
    pub f_b: Vec<f64>,
    pub f_n: Vec<f64>,
    pub hypotheses: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
}

fn check_density(name: &str, eta: &[f64]) -> Result<()> {
    if eta.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::Contract(format!("{name} has a negative or non-finite entry")));
    }
    let s: f64 = eta.iter().sum();
    if (s - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::Contract(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

fn check_unit_range(name: &str, f: &[f64]) -> Result<()> {
    if let Some(v) = f.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Contract(format!("{name} has value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Checks the convex-weight requirement `α ≥ 0`, `Σα = 1`.
pub fn check_weights(alpha: &[f64]) -> Result<()> {
    if alpha.is_empty() {
        return Err(Error::InvalidWeights("no ensemble weights".into()));
    }
    if alpha.iter().any(|&a| !(a >= 0.0 && a.is_finite())) {
        return Err(Error::InvalidWeights(format!("weights {alpha:?} must be >= 0")));
    }
    let s: f64 = alpha.iter().sum();
    if (s - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidWeights(format!("weights sum to {s}, not 1")));
    }
    Ok(())
}

impl DiscreteDomainInstance {
    pub fn m(&self) -> usize {
        self.eta_b.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        if m == 0 {
            return dim_err("domain has no points");
        }
        for (name, v) in [("eta_n", &self.eta_n), ("f_b", &self.f_b), ("f_n", &self.f_n)] {
            if v.len() != m {
                return dim_err(format!("{name} has {} entries, domain has {m}", v.len()));
            }
        }
        if self.hypotheses.len() != self.alpha.len() {
            return dim_err(format!(
                "{} hypotheses for {} weights",
                self.hypotheses.len(),
                self.alpha.len()
            ));
        }
        check_density("eta_b", &self.eta_b)?;
        check_density("eta_n", &self.eta_n)?;
        check_unit_range("f_b", &self.f_b)?;
        check_unit_range("f_n", &self.f_n)?;
        for (o, h) in self.hypotheses.iter().enumerate() {
            if h.len() != m {
                return dim_err(format!("h_{} has {} entries, domain has {m}", o + 1, h.len()));
            }
            check_unit_range(&format!("h_{}", o + 1), h)?;
        }
        check_weights(&self.alpha)
    }
}

/// Pointwise `h̄(x) = Σ_o α_o h_o(x)`.
pub fn ensemble_combine(hypotheses: &[Vec<f64>], alpha: &[f64]) -> Result<Vec<f64>> {
    check_weights(alpha)?;
    if hypotheses.len() != alpha.len() {
        return dim_err(format!("{} hypotheses for {} weights", hypotheses.len(), alpha.len()));
    }
    let m = hypotheses[0].len();
    if hypotheses.iter().any(|h| h.len() != m) {
        return dim_err("hypotheses have different domain sizes");
    }
    let mut out = vec![0.0; m];
    for (h, &a) in hypotheses.iter().zip(alpha) {
        out.iter_mut().zip(h).for_each(|(o, v)| *o += a * v);
    }
    Ok(out)
}

/// `Σ_x η(x)·ℓ(h(x), f(x))`.
pub fn expected_error(h: &[f64], f: &[f64], eta: &[f64], loss: Loss) -> f64 {
    h.iter()
        .zip(f)
        .zip(eta)
        .map(|((&h, &f), &e)| e * loss.eval(h, f))
        .sum()
}

/// `Σ_x |η_b(x) − η_n(x)|·|h̄(x) − f_n(x)|`.
pub fn divergence(eta_b: &[f64], eta_n: &[f64], h_bar: &[f64], f_n: &[f64]) -> f64 {
    eta_b
        .iter()
        .zip(eta_n)
        .zip(h_bar.iter().zip(f_n))
        .map(|((b, n), (h, f))| (b - n).abs() * (h - f).abs())
        .sum()
}

/// `Σ_x η_b(x)·|f_n(x) − f_b(x)|`.
pub fn lambda_term(eta_b: &[f64], f_b: &[f64], f_n: &[f64]) -> f64 {
    eta_b
        .iter()
        .zip(f_b.iter().zip(f_n))
        .map(|(e, (b, n))| e * (n - b).abs())
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Loss used for the error terms and `slack2`.
    pub loss: Loss,
    pub e_n_bar: f64,
    pub e_b_bar: f64,
    /// `Σ α_o e_b(h_o)`.
    pub e_b_avg: f64,
    pub divergence: f64,
    pub lambda: f64,
    /// `e_b(h̄) + D + λ − e_n(h̄)`, absolute errors.
    pub slack1: f64,
    /// `Σ α_o e_b(h_o) − e_b(h̄)`.
    pub slack2: f64,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.slack1 >= -SLACK_TOLERANCE && self.slack2 >= -SLACK_TOLERANCE
    }
}

/// Evaluates both inequalities on a validated instance.
pub fn verify_theorem1(inst: &DiscreteDomainInstance, loss: Loss) -> Result<BoundReport> {
    inst.validate()?;
    let h_bar = ensemble_combine(&inst.hypotheses, &inst.alpha)?;
    let d = divergence(&inst.eta_b, &inst.eta_n, &h_bar, &inst.f_n);
    let lambda = lambda_term(&inst.eta_b, &inst.f_b, &inst.f_n);
    let abs_n = expected_error(&h_bar, &inst.f_n, &inst.eta_n, Loss::Abs);
    let abs_b = expected_error(&h_bar, &inst.f_b, &inst.eta_b, Loss::Abs);
    let e_b_bar = expected_error(&h_bar, &inst.f_b, &inst.eta_b, loss);
    let e_b_avg: f64 = inst
        .hypotheses
        .iter()
        .zip(&inst.alpha)
        .map(|(h, a)| a * expected_error(h, &inst.f_b, &inst.eta_b, loss))
        .sum();
    let report = BoundReport {
        loss,
        e_n_bar: expected_error(&h_bar, &inst.f_n, &inst.eta_n, loss),
        e_b_bar,
        e_b_avg,
        divergence: d,
        lambda,
        slack1: abs_b + d + lambda - abs_n,
        slack2: e_b_avg - e_b_bar,
    };
    let all = [
        report.e_n_bar,
        report.e_b_bar,
        report.e_b_avg,
        report.divergence,
        report.lambda,
        report.slack1,
        report.slack2,
    ];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("bound report has a non-finite component".into()));
    }
    Ok(report)
}

fn normalized(rng: &mut Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let s: f64 = raw.iter().sum();
    if s > 0.0 {
        raw.iter().map(|v| v / s).collect()
    } else {
        vec![1.0 / n as f64; n]
    }
}

/// Densities and weights from normalized uniform draws, functions from
/// uniform `[0, 1]` draws.
pub fn random_instance(rng: &mut Rng, m: usize, o: usize) -> Result<DiscreteDomainInstance> {
    if m == 0 || o == 0 {
        return Err(Error::Contract(format!("need m >= 1 and O >= 1, got m={m}, O={o}")));
    }
    let unit = |rng: &mut Rng| (0..m).map(|_| rng.uniform()).collect::<Vec<f64>>();
    let eta_b = normalized(rng, m);
    let eta_n = normalized(rng, m);
    let f_b = unit(rng);
    let f_n = unit(rng);
    let hypotheses = (0..o).map(|_| unit(rng)).collect();
    let alpha = normalized(rng, o);
    Ok(DiscreteDomainInstance {
        eta_b,
        eta_n,
        f_b,
        f_n,
        hypotheses,
        alpha,
    })
}

/// Builds an instance from per-sample model behavior. The domain is the
/// union of the given base and novel samples, each density is uniform over
/// its own samples, both label functions are 1, and hypothesis `o` takes
/// the value `scores[o][x]` (e.g. the probability branch `o` assigns to the
/// true class, or 0/1 correctness). Error terms then measure the expected
/// shortfall from certain correctness. The result describes the sample, not
/// the underlying distributions.
pub fn bridge_instance(base: &[Vec<f64>], novel: &[Vec<f64>], alpha: &[f64]) -> Result<DiscreteDomainInstance> {
    if base.len() != alpha.len() || novel.len() != alpha.len() {
        return dim_err("one score row per hypothesis is required for both domains");
    }
    let nb = base[0].len();
    let nn = novel[0].len();
    if nb == 0 || nn == 0 || base.iter().any(|r| r.len() != nb) || novel.iter().any(|r| r.len() != nn) {
        return dim_err("score rows must be nonempty and equally long within a domain");
    }
    let m = nb + nn;
    let mut eta_b = vec![0.0; m];
    let mut eta_n = vec![0.0; m];
    eta_b[..nb].iter_mut().for_each(|v| *v = 1.0 / nb as f64);
    eta_n[nb..].iter_mut().for_each(|v| *v = 1.0 / nn as f64);
    let hypotheses = base
        .iter()
        .zip(novel)
        .map(|(b, n)| b.iter().chain(n).copied().collect())
        .collect();
    let inst = DiscreteDomainInstance {
        eta_b,
        eta_n,
        f_b: vec![1.0; m],
        f_n: vec![1.0; m],
        hypotheses,
        alpha: alpha.to_vec(),
    };
    inst.validate()?;
    Ok(inst)
}

/// One trial of a randomized suite, reported under both losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub m: usize,
    pub hypotheses: usize,
    pub reports: [BoundReport; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub trials: usize,
    pub violations: usize,
    pub min_slack1: f64,
    pub min_slack2_abs: f64,
    pub min_slack2_sq: f64,
}

/// `trials` instances with `m` uniform in `1..=max_m` and `O` uniform in
/// `1..=max_o`, trial `t` drawn from stream `t` of `seed`.
pub fn run_suite(trials: usize, max_m: usize, max_o: usize, seed: u64) -> Result<Vec<TrialReport>> {
    if max_m == 0 || max_o == 0 {
        return Err(Error::Contract("max_m and max_o must be >= 1".into()));
    }
    (0..trials)
        .map(|t| {
            let mut rng = Rng::stream(seed, t as u64);
            let m = 1 + rng.below(max_m);
            let o = 1 + rng.below(max_o);
            let inst = random_instance(&mut rng, m, o)?;
            Ok(TrialReport {
                trial: t,
                m,
                hypotheses: o,
                reports: [verify_theorem1(&inst, Loss::Abs)?, verify_theorem1(&inst, Loss::Sq)?],
            })
        })
        .collect()
}

pub fn summarize(trials: &[TrialReport]) -> SuiteSummary {
    let mut s = SuiteSummary {
        trials: trials.len(),
        violations: 0,
        min_slack1: f64::INFINITY,
        min_slack2_abs: f64::INFINITY,
        min_slack2_sq: f64::INFINITY,
    };
    for t in trials {
        if !t.reports.iter().all(BoundReport::holds) {
            s.violations += 1;
        }
        s.min_slack1 = s.min_slack1.min(t.reports[0].slack1);
        s.min_slack2_abs = s.min_slack2_abs.min(t.reports[0].slack2);
        s.min_slack2_sq = s.min_slack2_sq.min(t.reports[1].slack2);
    }
    s
}

/// One JSON line per trial and loss.
pub fn write_jsonl<W: Write>(trials: &[TrialReport], w: &mut W) -> Result<()> {
    for t in trials {
        for r in &t.reports {
            let mut v = serde_json::to_value(r)?;
            let obj = v.as_object_mut().expect("report is an object");
            obj.insert("trial".into(), t.trial.into());
            obj.insert("m".into(), t.m.into());
            obj.insert("hypotheses".into(), t.hypotheses.into());
            serde_json::to_writer(&mut *w, &v)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn oracle_error(h: &[f64], f: &[f64], eta: &[f64], sq: bool) -> f64 {
        let mut total = 0.0;
        for i in 0..h.len() {
            let diff = if h[i] > f[i] { h[i] - f[i] } else { f[i] - h[i] };
            total += eta[i] * if sq { diff * diff } else { diff };
        }
        total
    }

    #[test]
    fn combine_cases() {
        let h = vec![vec![0.2, 0.9]];
        assert_eq!(ensemble_combine(&h, &[1.0]).unwrap(), vec![0.2, 0.9]);
        let c = ensemble_combine(&[vec![0.0; 3], vec![1.0; 3]], &[0.5, 0.5]).unwrap();
        assert_eq!(c, vec![0.5; 3]);
        assert!(ensemble_combine(&h, &[0.5]).is_err());
        assert!(ensemble_combine(&[vec![0.0], vec![1.0]], &[1.5, -0.5]).is_err());
        let mut rng = Rng::new(3);
        let inst = random_instance(&mut rng, 7, 4).unwrap();
        let hb = ensemble_combine(&inst.hypotheses, &inst.alpha).unwrap();
        for x in 0..7 {
            let mut v = 0.0;
            for o in 0..4 {
                v += inst.alpha[o] * inst.hypotheses[o][x];
            }
            assert!((hb[x] - v).abs() < 1e-15);
        }
    }

    #[test]
    fn error_cases() {
        let eta = [0.25, 0.75];
        assert_eq!(expected_error(&[0.3, 0.6], &[0.3, 0.6], &eta, Loss::Abs), 0.0);
        for loss in [Loss::Abs, Loss::Sq] {
            assert_eq!(expected_error(&[0.0, 0.0], &[1.0, 1.0], &eta, loss), 1.0);
        }
        let mut rng = Rng::new(4);
        let inst = random_instance(&mut rng, 20, 1).unwrap();
        let h = &inst.hypotheses[0];
        for (loss, sq) in [(Loss::Abs, false), (Loss::Sq, true)] {
            let a = expected_error(h, &inst.f_b, &inst.eta_b, loss);
            let b = oracle_error(h, &inst.f_b, &inst.eta_b, sq);
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn divergence_cases() {
        let eta = [0.5, 0.5];
        assert_eq!(divergence(&eta, &eta, &[0.1, 0.9], &[0.7, 0.2]), 0.0);
        assert_eq!(divergence(&eta, &[0.9, 0.1], &[0.7, 0.2], &[0.7, 0.2]), 0.0);
        assert_eq!(divergence(&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0], &[1.0, 0.0]), 2.0);
    }

    #[test]
    fn lambda_cases() {
        let eta = [0.2, 0.8];
        assert_eq!(lambda_term(&eta, &[0.3, 0.4], &[0.3, 0.4]), 0.0);
        assert_eq!(lambda_term(&eta, &[0.0, 0.0], &[1.0, 1.0]), 1.0);
        let mut rng = Rng::new(5);
        let inst = random_instance(&mut rng, 16, 1).unwrap();
        let mut v = 0.0;
        for x in 0..16 {
            v += inst.eta_b[x] * (inst.f_n[x] - inst.f_b[x]).abs();
        }
        assert!((lambda_term(&inst.eta_b, &inst.f_b, &inst.f_n) - v).abs() < 1e-15);
    }

    #[test]
    fn identical_domains_have_zero_shift() {
        let mut rng = Rng::new(6);
        let mut inst = random_instance(&mut rng, 9, 3).unwrap();
        inst.eta_n = inst.eta_b.clone();
        inst.f_n = inst.f_b.clone();
        let r = verify_theorem1(&inst, Loss::Abs).unwrap();
        assert_eq!((r.divergence, r.lambda), (0.0, 0.0));
        assert!(r.slack1.abs() < 1e-15);
        assert_eq!(r.e_b_bar, r.e_n_bar);
    }

    #[test]
    fn single_hypothesis_has_zero_jensen_gap() {
        let mut rng = Rng::new(7);
        let inst = random_instance(&mut rng, 12, 1).unwrap();
        for loss in [Loss::Abs, Loss::Sq] {
            assert_eq!(verify_theorem1(&inst, loss).unwrap().slack2, 0.0);
        }
    }

    #[test]
    fn first_bound_needs_the_absolute_loss() {
        // h̄ = 0, f_b = 0.5, f_n = 1, equal densities: squared errors give
        // e_n = 1 > e_b + D + λ = 0.25 + 0 + 0.5.
        let sq_n = expected_error(&[0.0], &[1.0], &[1.0], Loss::Sq);
        let sq_b = expected_error(&[0.0], &[0.5], &[1.0], Loss::Sq);
        let lambda = lambda_term(&[1.0], &[0.5], &[1.0]);
        assert!(sq_b + lambda - sq_n < 0.0);
        let inst = DiscreteDomainInstance {
            eta_b: vec![1.0],
            eta_n: vec![1.0],
            f_b: vec![0.5],
            f_n: vec![1.0],
            hypotheses: vec![vec![0.0]],
            alpha: vec![1.0],
        };
        let r = verify_theorem1(&inst, Loss::Sq).unwrap();
        assert!(r.slack1.abs() < 1e-15 && r.holds());
    }

    #[test]
    fn invalid_instances_are_rejected() {
        let mut rng = Rng::new(8);
        let good = random_instance(&mut rng, 4, 2).unwrap();
        let mut bad = good.clone();
        bad.eta_b[0] += 1e-9;
        assert!(verify_theorem1(&bad, Loss::Abs).is_err());
        let mut bad = good.clone();
        bad.f_n[1] = 1.5;
        assert!(verify_theorem1(&bad, Loss::Abs).is_err());
        let mut bad = good.clone();
        bad.alpha = vec![1.0, 0.5];
        assert!(matches!(verify_theorem1(&bad, Loss::Abs), Err(Error::InvalidWeights(_))));
        let mut bad = good;
        bad.hypotheses[0].pop();
        assert!(verify_theorem1(&bad, Loss::Abs).is_err());
    }

    #[test]
    fn one_point_domain() {
        let inst = random_instance(&mut Rng::new(9), 1, 3).unwrap();
        assert_eq!((inst.eta_b.clone(), inst.eta_n.clone()), (vec![1.0], vec![1.0]));
        assert!(inst.validate().is_ok());
    }

    #[test]
    fn instances_are_reproducible() {
        let a = random_instance(&mut Rng::new(10), 8, 3).unwrap();
        let b = random_instance(&mut Rng::new(10), 8, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(run_suite(20, 32, 5, 1).unwrap(), run_suite(20, 32, 5, 1).unwrap());
    }

    #[test]
    fn suite_of_thousand_holds() {
        let trials = run_suite(1000, 32, 5, 2024).unwrap();
        let s = summarize(&trials);
        assert_eq!(s.violations, 0, "{s:?}");
        assert!(s.min_slack1 >= -SLACK_TOLERANCE && s.min_slack2_sq >= -SLACK_TOLERANCE);
    }

    #[test]
    fn empty_suite_is_trivially_clean() {
        let s = summarize(&run_suite(0, 32, 5, 0).unwrap());
        assert_eq!((s.trials, s.violations), (0, 0));
    }

    #[test]
    fn bridge_builds_valid_instance() {
        let base = vec![vec![1.0, 0.0, 1.0], vec![0.5, 0.5, 1.0]];
        let novel = vec![vec![0.0, 1.0], vec![1.0, 1.0]];
        let inst = bridge_instance(&base, &novel, &[0.5, 0.5]).unwrap();
        assert_eq!(inst.m(), 5);
        let r = verify_theorem1(&inst, Loss::Abs).unwrap();
        // Branch errors on the base sample: 1/3 and 1/3; the ensemble's 1/3.
        assert!((r.e_b_avg - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.e_b_bar - 1.0 / 3.0).abs() < 1e-15);
        assert!(r.holds());
        assert!(bridge_instance(&base, &novel, &[1.0]).is_err());
    }

    #[test]
    fn jsonl_has_two_lines_per_trial() {
        let trials = run_suite(3, 4, 2, 0).unwrap();
        let mut out = Vec::new();
        write_jsonl(&trials, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 6);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["loss"], "abs");
        assert!(v["slack1"].is_f64());
    }

    proptest! {
        #[test]
        fn both_bounds_hold(seed in any::<u64>(), m in 1usize..=32, o in 1usize..=5) {
            let inst = random_instance(&mut Rng::new(seed), m, o).unwrap();
            for loss in [Loss::Abs, Loss::Sq] {
                let r = verify_theorem1(&inst, loss).unwrap();
                prop_assert!(r.holds(), "{:?}", r);
            }
        }

        #[test]
        fn jensen_gap_is_nonnegative_for_arbitrary_weights(
            seed in any::<u64>(),
            raw in prop::collection::vec(0.0f64..1.0, 1..6),
        ) {
            let s: f64 = raw.iter().sum();
            prop_assume!(s > 1e-6);
            let alpha: Vec<f64> = raw.iter().map(|v| v / s).collect();
            prop_assume!(check_weights(&alpha).is_ok());
            let mut inst = random_instance(&mut Rng::new(seed), 10, alpha.len()).unwrap();
            inst.alpha = alpha;
            prop_assert!(verify_theorem1(&inst, Loss::Sq).unwrap().slack2 >= -SLACK_TOLERANCE);
        }
    }
}
