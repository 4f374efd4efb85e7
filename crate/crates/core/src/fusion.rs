//! Turning logit Gaussians into class PMFs, and combining predictions.
//!
//! * [`fuse_information`]: treat every block of `ζ` as a noisy observation of
//!   one latent logit vector, `ζ = H z + v`, `v ~ N(0, R)`, and return the
//!   posterior `N((HᵀR⁻¹H)⁻¹HᵀR⁻¹ζ, (HᵀR⁻¹H)⁻¹)`.
//! * [`ella_pmf`]: sample `ζ`, average its blocks with weights, push the
//!   average through softmax.
//! * [`product_fusion`], [`log_linear_pool`], [`ensemble_average`]: operate
//!   on PMFs directly.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::aggregate::AggregatedState;
use crate::delta::LogitGaussian;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_with_jitter, psd_factor, symmetrize, MvNormal};
use crate::network::{log_sum_exp, softmax_into};
use crate::rng::rng;

/// Which estimator produced a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Softmax,
    TempScaling,
    DeepEnsemble,
    Lla,
    InfoFusion,
    Ella,
    Product,
    LogLinear,
    ParamSpace,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Softmax,
        Method::TempScaling,
        Method::DeepEnsemble,
        Method::Lla,
        Method::InfoFusion,
        Method::Ella,
        Method::Product,
        Method::LogLinear,
        Method::ParamSpace,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Softmax => "softmax",
            Method::TempScaling => "temp_scaling",
            Method::DeepEnsemble => "deep_ensemble",
            Method::Lla => "lla",
            Method::InfoFusion => "info_fusion",
            Method::Ella => "ella",
            Method::Product => "product",
            Method::LogLinear => "log_linear",
            Method::ParamSpace => "param_space",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.tag() == tag)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// A class PMF, optionally with the per-sample softmax vectors behind it
/// (one row per sample).
#[derive(Debug, Clone, PartialEq)]
pub struct PmfEstimate {
    pub pmf: Vec<f64>,
    pub cloud: Option<DMatrix<f64>>,
    pub method: Method,
    pub seed: u64,
    pub samples: usize,
}

pub(crate) struct PmfAccumulator {
    sum: Vec<f64>,
    cloud: Option<DMatrix<f64>>,
    count: usize,
    filled: usize,
}

impl PmfAccumulator {
    pub(crate) fn new(classes: usize, count: usize, keep_cloud: bool) -> Self {
        PmfAccumulator {
            sum: vec![0.0; classes],
            cloud: keep_cloud.then(|| DMatrix::zeros(count, classes)),
            count,
            filled: 0,
        }
    }

    pub(crate) fn push(&mut self, p: &[f64]) {
        for (s, v) in self.sum.iter_mut().zip(p) {
            *s += v;
        }
        if let Some(cloud) = &mut self.cloud {
            for (j, v) in p.iter().enumerate() {
                cloud[(self.filled, j)] = *v;
            }
        }
        self.filled += 1;
    }

    pub(crate) fn finish(self, method: Method, seed: u64) -> PmfEstimate {
        let k = self.count as f64;
        PmfEstimate {
            pmf: self.sum.iter().map(|s| s / k).collect(),
            cloud: self.cloud,
            method,
            seed,
            samples: self.count,
        }
    }
}

/// A Gaussian over one logit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl From<&LogitGaussian> for FusedGaussian {
    fn from(g: &LogitGaussian) -> Self {
        FusedGaussian {
            mean: g.mean.clone(),
            cov: g.cov.clone(),
        }
    }
}

impl From<LogitGaussian> for FusedGaussian {
    fn from(g: LogitGaussian) -> Self {
        FusedGaussian { mean: g.mean, cov: g.cov }
    }
}

/// Information-form fusion of every block of `ζ` into one logit Gaussian.
///
/// Solved through `R = L Lᵀ`: with `Y = L⁻¹H` and `y = L⁻¹ζ`, the fused
/// precision is `YᵀY` and the fused mean solves `(YᵀY) z = Yᵀy`.
pub fn fuse_information(state: &AggregatedState) -> Result<FusedGaussian> {
    let m = state.classes();
    if state.blocks() == 1 {
        return Ok(FusedGaussian {
            mean: state.mean().clone(),
            cov: state.cov().clone(),
        });
    }
    let r = cholesky_with_jitter(state.cov(), "aggregated covariance")?;
    let l = r.chol.l();
    let n = state.dim();
    let h = DMatrix::from_fn(n, m, |i, j| if i % m == j { 1.0 } else { 0.0 });
    let y_mat = l
        .solve_lower_triangular(&h)
        .ok_or_else(|| Error::Numerical {
            msg: "singular aggregated covariance factor".into(),
            condition: f64::INFINITY,
        })?;
    let y_vec = l
        .solve_lower_triangular(state.mean())
        .ok_or_else(|| Error::Numerical {
            msg: "singular aggregated covariance factor".into(),
            condition: f64::INFINITY,
        })?;
    let info = symmetrize(&y_mat.tr_mul(&y_mat));
    let rhs = y_mat.tr_mul(&y_vec);
    let a = cholesky_with_jitter(&info, "fused information")?;
    let mean = a.chol.solve(&rhs);
    let cov = symmetrize(&a.chol.inverse());
    if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            msg: "non-finite fused Gaussian".into(),
            condition: f64::INFINITY,
        });
    }
    Ok(FusedGaussian { mean, cov })
}

fn check_samples(samples: usize) -> Result<()> {
    if samples == 0 {
        Err(Error::contract("sample count must be >= 1"))
    } else {
        Ok(())
    }
}

/// Monte Carlo estimate of `E[softmax(z)]`, `z ~ N(mean, cov)`.
pub fn mc_pmf(g: &FusedGaussian, samples: usize, seed: u64, keep_cloud: bool, method: Method) -> Result<PmfEstimate> {
    check_samples(samples)?;
    let mvn = MvNormal::new(g.mean.clone(), &g.cov)?;
    let m = mvn.dim();
    let mut r = rng(seed);
    let mut eps = vec![0.0; m];
    let mut z = vec![0.0; m];
    let mut p = vec![0.0; m];
    let mut acc = PmfAccumulator::new(m, samples, keep_cloud);
    for _ in 0..samples {
        mvn.sample_into(&mut r, &mut eps, &mut z);
        softmax_into(&z, &mut p);
        acc.push(&p);
    }
    Ok(acc.finish(method, seed))
}

/// Equal weight per block.
pub fn uniform_weights(state: &AggregatedState) -> Vec<f64> {
    vec![1.0 / state.blocks() as f64; state.blocks()]
}

/// Weights proportional to the inverse trace of each block's covariance.
pub fn inverse_trace_weights(state: &AggregatedState) -> Result<Vec<f64>> {
    let m = state.classes();
    let raw = (0..state.blocks())
        .map(|b| {
            let tr = state.cov().view((b * m, b * m), (m, m)).trace();
            if tr > 0.0 && tr.is_finite() {
                Ok(1.0 / tr)
            } else {
                Err(Error::Degenerate(format!("block {b} has zero covariance trace")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = raw.iter().sum();
    Ok(raw.iter().map(|w| w / total).collect())
}

fn check_weights(weights: &[f64], expected: usize) -> Result<()> {
    if weights.len() != expected {
        return Err(Error::Dimension {
            expected,
            got: weights.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::contract("weights must be finite and non-negative"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("weights must sum to 1, got {sum}")));
    }
    Ok(())
}

/// `E[softmax(Σ w_b ζ_b)]` with `ζ` drawn from the joint state. Weights are
/// in block order (`c·L + l`).
pub fn ella_pmf(state: &AggregatedState, weights: &[f64], samples: usize, seed: u64, keep_cloud: bool) -> Result<PmfEstimate> {
    check_samples(samples)?;
    check_weights(weights, state.blocks())?;
    let mvn = MvNormal::from_factor(state.mean().clone(), &psd_factor(state.cov())?);
    let m = state.classes();
    let n = state.dim();
    let mut r = rng(seed);
    let mut eps = vec![0.0; n];
    let mut zeta = vec![0.0; n];
    let mut z = vec![0.0; m];
    let mut p = vec![0.0; m];
    let mut acc = PmfAccumulator::new(m, samples, keep_cloud);
    for _ in 0..samples {
        mvn.sample_into(&mut r, &mut eps, &mut zeta);
        z.iter_mut().for_each(|v| *v = 0.0);
        for (b, w) in weights.iter().enumerate() {
            for j in 0..m {
                z[j] += w * zeta[b * m + j];
            }
        }
        softmax_into(&z, &mut p);
        acc.push(&p);
    }
    Ok(acc.finish(Method::Ella, seed))
}

fn check_pmfs(pmfs: &[Vec<f64>]) -> Result<usize> {
    let first = pmfs.first().ok_or_else(|| Error::contract("need at least one PMF"))?;
    let m = first.len();
    for p in pmfs {
        if p.len() != m {
            return Err(Error::Dimension { expected: m, got: p.len() });
        }
        if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Domain("PMF entries must be finite and non-negative".into()));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("PMF sums to {s}")));
        }
    }
    Ok(m)
}

fn normalize_log(log_p: &[f64]) -> Result<Vec<f64>> {
    if log_p.iter().all(|v| *v == f64::NEG_INFINITY) {
        return Err(Error::Degenerate("every class has zero mass in the fused PMF".into()));
    }
    let lse = log_sum_exp(log_p);
    Ok(log_p.iter().map(|v| (v - lse).exp()).collect())
}

/// Normalised elementwise product, computed in log space.
pub fn product_fusion(pmfs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = check_pmfs(pmfs)?;
    let mut log_p = vec![0.0; m];
    for p in pmfs {
        for (acc, v) in log_p.iter_mut().zip(p) {
            *acc += v.ln();
        }
    }
    normalize_log(&log_p)
}

/// Normalised `Π pᵢ^{wᵢ}`. A zero entry under positive weight is rejected.
pub fn log_linear_pool(pmfs: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    let m = check_pmfs(pmfs)?;
    check_weights(weights, pmfs.len())?;
    let mut log_p = vec![0.0; m];
    for (p, &w) in pmfs.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (acc, v) in log_p.iter_mut().zip(p) {
            if *v == 0.0 {
                return Err(Error::Domain("log-linear pool got a zero probability with positive weight".into()));
            }
            *acc += w * v.ln();
        }
    }
    normalize_log(&log_p)
}

/// Plain average of member PMFs.
pub fn ensemble_average(pmfs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = check_pmfs(pmfs)?;
    let mut out = vec![0.0; m];
    for p in pmfs {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    let k = pmfs.len() as f64;
    Ok(out.into_iter().map(|v| v / k).collect())
}
