//! Multi-order statistics pooling.
//!
//! A feature map of shape `d×H×W` is viewed as `H·W` observations of a
//! `d`-dimensional variable (one row per spatial position). Three pooled
//! descriptors are taken from those observations:
//!
//! * order 1: the per-channel mean, `d` values;
//! * order 2: the biased (`1/HW`) covariance, `d×d`;
//! * order 3: the standardized coskewness,
//!   `c3[a,b] = mean_j(x_ja² · x_jb) / (σ_a² · σ_b + eps)` with `x = t − mean`
//!   and `σ² = diag(c2)`.
//!
//! Order 3 also has a `LiteralMatrix` normalization that divides the same
//! numerator entrywise by `(c2 · c2 · c2ᵀ)[a,b] + eps`.
//!
//! All powers are elementwise and every reduction runs in a fixed order, so
//! results are a pure function of the input bits.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg;
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum C3Normalization {
    #[default]
    Standardized,
    LiteralMatrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub c3_normalization: C3Normalization,
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            eps: DEFAULT_EPS,
            c3_normalization: C3Normalization::Standardized,
        }
    }
}

impl PoolConfig {
    pub fn with_eps(eps: f64) -> Self {
        PoolConfig {
            eps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Contract(format!(
                "pooling eps must be a finite value >= 0, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// `H·W × d` observations taken from one feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationMatrix {
    values: Tensor,
}

impl ObservationMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        let (rows, _) = values.as_matrix("observation matrix")?;
        if rows < 2 {
            return dim_err(format!(
                "higher-order pooling needs at least 2 observations, got {rows}"
            ));
        }
        Ok(ObservationMatrix { values })
    }

    /// Reshapes a channel-first `d×H×W` map so each spatial position becomes
    /// a row.
    pub fn from_feature_map(map: &Tensor) -> Result<Self> {
        let [d, h, w] = map.shape()[..] else {
            return dim_err(format!("feature map must be d×H×W, got {:?}", map.shape()));
        };
        let rows = linalg::transpose(d, h * w, map.data());
        Self::new(Tensor::with_dtype(&[h * w, d], rows, map.dtype())?)
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    fn dtype(&self) -> DType {
        self.values.dtype()
    }
}

/// Pooled descriptors of one observation matrix, flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchFeatures {
    pub z1: Tensor,
    pub z2: Tensor,
    pub z3: Tensor,
}

impl BranchFeatures {
    pub fn lengths(&self) -> (usize, usize, usize) {
        (self.z1.numel(), self.z2.numel(), self.z3.numel())
    }

    pub fn branch(&self, order: usize) -> &Tensor {
        match order {
            1 => &self.z1,
            2 => &self.z2,
            3 => &self.z3,
            _ => panic!("branch order must be 1, 2 or 3"),
        }
    }
}

pub fn pool_order1(t: &ObservationMatrix) -> Result<Tensor> {
    let (n, d) = (t.rows(), t.dim());
    Tensor::from_op(&[d], order1_forward(n, d, t.tensor().data()), t.dtype(), "pool_order1")
}

pub fn pool_order2(t: &ObservationMatrix) -> Result<Tensor> {
    let (n, d) = (t.rows(), t.dim());
    Tensor::from_op(&[d, d], order2_forward(n, d, t.tensor().data()), t.dtype(), "pool_order2")
}

pub fn pool_order3(t: &ObservationMatrix, cfg: &PoolConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (n, d) = (t.rows(), t.dim());
    let out = order3_forward(n, d, t.tensor().data(), cfg);
    Tensor::from_op(&[d, d], out, t.dtype(), "pool_order3")
}

pub fn pool_all(t: &ObservationMatrix, cfg: &PoolConfig) -> Result<BranchFeatures> {
    let d = t.dim();
    Ok(BranchFeatures {
        z1: pool_order1(t)?,
        z2: pool_order2(t)?.reshape(&[d * d])?,
        z3: pool_order3(t, cfg)?.reshape(&[d * d])?,
    })
}

// ---- raw kernels over row-major `n×d` slices --------------------------------

fn column_means(n: usize, d: usize, x: &[f64]) -> Vec<f64> {
    let mut mu = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, v) in mu.iter_mut().zip(row) {
            *m += v;
        }
    }
    let inv = 1.0 / n as f64;
    mu.iter_mut().for_each(|m| *m *= inv);
    mu
}

fn centered(n: usize, d: usize, x: &[f64]) -> Vec<f64> {
    let mu = column_means(n, d, x);
    let mut c = x.to_vec();
    for row in c.chunks_exact_mut(d) {
        for (v, m) in row.iter_mut().zip(&mu) {
            *v -= m;
        }
    }
    c
}

/// Subtracts the column mean of `g`: the adjoint of centering.
fn uncenter_grad(n: usize, d: usize, mut g: Vec<f64>) -> Vec<f64> {
    let mean = column_means(n, d, &g);
    for row in g.chunks_exact_mut(d) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    g
}

pub(crate) fn order1_forward(n: usize, d: usize, x: &[f64]) -> Vec<f64> {
    column_means(n, d, x)
}

pub(crate) fn order1_backward(n: usize, d: usize, g: &[f64]) -> Vec<f64> {
    let inv = 1.0 / n as f64;
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        out.extend(g.iter().map(|v| v * inv));
    }
    out
}

fn covariance_of_centered(n: usize, d: usize, xc: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; d * d];
    for row in xc.chunks_exact(d) {
        for a in 0..d {
            let ra = row[a];
            for b in a..d {
                c[a * d + b] += ra * row[b];
            }
        }
    }
    let inv = 1.0 / n as f64;
    for a in 0..d {
        for b in a..d {
            let v = c[a * d + b] * inv;
            c[a * d + b] = v;
            c[b * d + a] = v;
        }
    }
    c
}

pub(crate) fn order2_forward(n: usize, d: usize, x: &[f64]) -> Vec<f64> {
    covariance_of_centered(n, d, &centered(n, d, x))
}

/// Gradient w.r.t. the centered rows of `c2 = XᵀX / n` given `dL/dc2`.
fn covariance_grad_centered(n: usize, d: usize, xc: &[f64], g: &[f64]) -> Vec<f64> {
    let mut sym = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            sym[a * d + b] = (g[a * d + b] + g[b * d + a]) / n as f64;
        }
    }
    linalg::matmul(n, d, d, xc, &sym)
}

pub(crate) fn order2_backward(n: usize, d: usize, x: &[f64], g: &[f64]) -> Vec<f64> {
    let xc = centered(n, d, x);
    uncenter_grad(n, d, covariance_grad_centered(n, d, &xc, g))
}

/// Coskewness numerator `m[a,b] = mean_j x_ja² x_jb`.
fn third_moment(n: usize, d: usize, xc: &[f64]) -> Vec<f64> {
    let sq: Vec<f64> = xc.iter().map(|v| v * v).collect();
    let mut m = vec![0.0; d * d];
    linalg::gemm(d, n, d, 1.0 / n as f64, &sq, true, xc, false, 0.0, &mut m);
    m
}

fn literal_denominator(d: usize, c2: &[f64]) -> Vec<f64> {
    let c2c2 = linalg::matmul(d, d, d, c2, c2);
    let mut den = vec![0.0; d * d];
    linalg::gemm(d, d, d, 1.0, &c2c2, false, c2, true, 0.0, &mut den);
    den
}

pub(crate) fn order3_forward(n: usize, d: usize, x: &[f64], cfg: &PoolConfig) -> Vec<f64> {
    let xc = centered(n, d, x);
    let m = third_moment(n, d, &xc);
    let c2 = covariance_of_centered(n, d, &xc);
    let mut out = vec![0.0; d * d];
    match cfg.c3_normalization {
        C3Normalization::Standardized => {
            let var: Vec<f64> = (0..d).map(|a| c2[a * d + a]).collect();
            let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
            for a in 0..d {
                for b in 0..d {
                    out[a * d + b] = m[a * d + b] / (var[a] * sd[b] + cfg.eps);
                }
            }
        }
        C3Normalization::LiteralMatrix => {
            let den = literal_denominator(d, &c2);
            for i in 0..d * d {
                out[i] = m[i] / (den[i] + cfg.eps);
            }
        }
    }
    out
}

pub(crate) fn order3_backward(
    n: usize,
    d: usize,
    x: &[f64],
    cfg: &PoolConfig,
    g: &[f64],
) -> Vec<f64> {
    let xc = centered(n, d, x);
    let m = third_moment(n, d, &xc);
    let c2 = covariance_of_centered(n, d, &xc);
    let inv_n = 1.0 / n as f64;

    // dL/dm and the gradient flowing into c2.
    let mut dm = vec![0.0; d * d];
    let mut dc2 = vec![0.0; d * d];
    match cfg.c3_normalization {
        C3Normalization::Standardized => {
            let var: Vec<f64> = (0..d).map(|a| c2[a * d + a]).collect();
            let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
            let mut dvar = vec![0.0; d];
            let mut dsd = vec![0.0; d];
            for a in 0..d {
                for b in 0..d {
                    let den = var[a] * sd[b] + cfg.eps;
                    let gab = g[a * d + b];
                    dm[a * d + b] = gab / den;
                    let dden = -gab * m[a * d + b] / (den * den);
                    dvar[a] += dden * sd[b];
                    dsd[b] += dden * var[a];
                }
            }
            for a in 0..d {
                // sd = sqrt(var); at var == 0 every centered value in the
                // channel is zero, so the chained term vanishes.
                if sd[a] > 0.0 {
                    dvar[a] += dsd[a] / (2.0 * sd[a]);
                }
                dc2[a * d + a] = dvar[a];
            }
        }
        C3Normalization::LiteralMatrix => {
            let den = literal_denominator(d, &c2);
            let mut dden = vec![0.0; d * d];
            for i in 0..d * d {
                let dn = den[i] + cfg.eps;
                dm[i] = g[i] / dn;
                dden[i] = -g[i] * m[i] / (dn * dn);
            }
            // den = C C Cᵀ  =>  dC = dD (C Cᵀ)ᵀ + Cᵀ dD C + dDᵀ C C
            let cct = {
                let mut t = vec![0.0; d * d];
                linalg::gemm(d, d, d, 1.0, &c2, false, &c2, true, 0.0, &mut t);
                t
            };
            linalg::gemm(d, d, d, 1.0, &dden, false, &cct, true, 0.0, &mut dc2);
            let ctd = {
                let mut t = vec![0.0; d * d];
                linalg::gemm(d, d, d, 1.0, &c2, true, &dden, false, 0.0, &mut t);
                t
            };
            linalg::gemm(d, d, d, 1.0, &ctd, false, &c2, false, 1.0, &mut dc2);
            let cc = linalg::matmul(d, d, d, &c2, &c2);
            linalg::gemm(d, d, d, 1.0, &dden, true, &cc, false, 1.0, &mut dc2);
        }
    }

    // Through m = (X∘X)ᵀ X / n:
    //   dL/dx_jc = (2 x_jc Σ_b dm_cb x_jb + Σ_a dm_ac x_ja²) / n
    let mut gx = vec![0.0; n * d];
    let sq: Vec<f64> = xc.iter().map(|v| v * v).collect();
    let x_dmt = {
        let mut t = vec![0.0; n * d];
        linalg::gemm(n, d, d, 1.0, &xc, false, &dm, true, 0.0, &mut t);
        t
    };
    let sq_dm = linalg::matmul(n, d, d, &sq, &dm);
    for i in 0..n * d {
        gx[i] = (2.0 * xc[i] * x_dmt[i] + sq_dm[i]) * inv_n;
    }
    let from_c2 = covariance_grad_centered(n, d, &xc, &dc2);
    for (a, b) in gx.iter_mut().zip(&from_c2) {
        *a += b;
    }
    uncenter_grad(n, d, gx)
}

// ---- independent oracle ------------------------------------------------------

/// Deviations between the pooled outputs and a raw-moment recomputation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CumulantOracleReport {
    pub c1_err: f64,
    pub c2_err: f64,
    pub c3_err: f64,
}

impl CumulantOracleReport {
    pub fn max_err(&self) -> f64 {
        self.c1_err.max(self.c2_err).max(self.c3_err)
    }
}

/// Recomputes the three cumulants from raw (uncentered) moments
/// `E[t_a]`, `E[t_a t_b]`, `E[t_a² t_b]` using the moment-cumulant
/// relations, then compares with the pooling ops.
pub fn cumulant_oracle(t: &ObservationMatrix, cfg: &PoolConfig) -> Result<CumulantOracleReport> {
    let (n, d) = (t.rows(), t.dim());
    let x = t.tensor().data();
    let nf = n as f64;

    let mut m1 = vec![0.0; d];
    let mut m2 = vec![0.0; d * d];
    let mut m3 = vec![0.0; d * d];
    for j in 0..n {
        let row = &x[j * d..(j + 1) * d];
        for a in 0..d {
            m1[a] += row[a];
            for b in 0..d {
                m2[a * d + b] += row[a] * row[b];
                m3[a * d + b] += row[a] * row[a] * row[b];
            }
        }
    }
    m1.iter_mut().for_each(|v| *v /= nf);
    m2.iter_mut().for_each(|v| *v /= nf);
    m3.iter_mut().for_each(|v| *v /= nf);

    let mut k2 = vec![0.0; d * d];
    let mut k3 = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            k2[a * d + b] = m2[a * d + b] - m1[a] * m1[b];
            // E[(t_a-μ_a)²(t_b-μ_b)]
            k3[a * d + b] = m3[a * d + b] - m1[b] * m2[a * d + a] - 2.0 * m1[a] * m2[a * d + b]
                + 2.0 * m1[a] * m1[a] * m1[b];
        }
    }
    let mut c3 = vec![0.0; d * d];
    match cfg.c3_normalization {
        C3Normalization::Standardized => {
            for a in 0..d {
                for b in 0..d {
                    let den = k2[a * d + a] * k2[b * d + b].max(0.0).sqrt() + cfg.eps;
                    c3[a * d + b] = k3[a * d + b] / den;
                }
            }
        }
        C3Normalization::LiteralMatrix => {
            // Explicit triple loop for C·C·Cᵀ.
            for a in 0..d {
                for b in 0..d {
                    let mut den = 0.0;
                    for p in 0..d {
                        for q in 0..d {
                            den += k2[a * d + p] * k2[p * d + q] * k2[b * d + q];
                        }
                    }
                    c3[a * d + b] = k3[a * d + b] / (den + cfg.eps);
                }
            }
        }
    }

    let p1 = pool_order1(t)?;
    let p2 = pool_order2(t)?;
    let p3 = pool_order3(t, cfg)?;
    let err = |pooled: &Tensor, oracle: &[f64]| {
        pooled
            .data()
            .iter()
            .zip(oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    Ok(CumulantOracleReport {
        c1_err: err(&p1, &m1),
        c2_err: err(&p2, &k2),
        c3_err: err(&p3, &c3),
    })
}

// ---- Gaussian third-cumulant harness ----------------------------------------

/// Minimum sample count for the Gaussian harness.
pub const GAUSSIAN_TEST_MIN_N: usize = 10_000;

/// Draws `n` i.i.d. rows `mu + sigma ∘ z` with standard normal `z`, pools
/// order 3 and returns the largest `|c3|` entry. For Gaussian data every
/// entry estimates zero with error of order `1/√n`.
pub fn gaussian_cumulant_test(
    rng: &mut Rng,
    n: usize,
    d: usize,
    mu: &Tensor,
    sigma: &Tensor,
) -> Result<f64> {
    sample_and_pool_c3(rng, n, d, mu, sigma, |r| r.normal())
}

/// Same harness with skewed marginals: `(z² − 1)/√2`, a centered chi-square
/// with one degree of freedom (unit variance, skewness 2√2).
pub fn skewed_cumulant_test(
    rng: &mut Rng,
    n: usize,
    d: usize,
    mu: &Tensor,
    sigma: &Tensor,
) -> Result<f64> {
    sample_and_pool_c3(rng, n, d, mu, sigma, skewed_unit_noise)
}

/// Zero-mean, unit-variance noise with skewness `2√2`.
pub fn skewed_unit_noise(rng: &mut Rng) -> f64 {
    let z = rng.normal();
    (z * z - 1.0) / std::f64::consts::SQRT_2
}

fn sample_and_pool_c3(
    rng: &mut Rng,
    n: usize,
    d: usize,
    mu: &Tensor,
    sigma: &Tensor,
    mut noise: impl FnMut(&mut Rng) -> f64,
) -> Result<f64> {
    if n < GAUSSIAN_TEST_MIN_N {
        return Err(Error::Contract(format!(
            "cumulant harness needs n >= {GAUSSIAN_TEST_MIN_N}, got {n}"
        )));
    }
    if mu.numel() != d || sigma.numel() != d {
        return dim_err(format!("mu and sigma must have {d} entries"));
    }
    let mut rows = Vec::with_capacity(n * d);
    for _ in 0..n {
        for a in 0..d {
            rows.push(mu.data()[a] + sigma.data()[a] * noise(rng));
        }
    }
    let t = ObservationMatrix::new(Tensor::new(&[n, d], rows)?)?;
    let c3 = pool_order3(&t, &PoolConfig::default())?;
    Ok(c3.data().iter().fold(0.0, |m, v| m.max(v.abs())))
}
