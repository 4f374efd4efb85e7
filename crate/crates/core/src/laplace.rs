//! Last-layer Laplace approximation.
//!
//! Earlier layers are frozen at the MAP estimate; the last layer's `d`
//! parameters get the Gaussian posterior
//!
//! ```text
//! P^θ = T_θ · (I_F + σ₀⁻² I)⁻¹,
//! I_F = Σₙ Σₘ fₘ(xₙ)(1 − fₘ(xₙ)) · Jₘ(xₙ) Jₘ(xₙ)ᵀ
//! ```
//!
//! where `Jₘ` is column `m` of the last-layer Jacobian. Because `Jₘ` is
//! supported on output `m`'s weights and bias only, `I_F` is block diagonal
//! over output units; [`fisher_information`] accumulates those blocks
//! directly.
//!
//! # Posterior file layout
//!
//! Little-endian, written next to the model checkpoint it belongs to.
//!
//! | field              | type                                  |
//! |--------------------|---------------------------------------|
//! | magic              | 8 bytes `b"LLAPOS\0\x01"`             |
//! | version            | `u32` (= 1)                           |
//! | `d`                | `u64`                                 |
//! | prior variance σ₀² | `f64`                                 |
//! | `T_θ`              | `f64`                                 |
//! | MAP last layer     | `d × f64`                             |
//! | Cholesky factor    | `d(d+1)/2 × f64`, lower triangle packed row by row |

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::dataset::LabeledSet;
use crate::delta::logit_gaussian_from_penultimate;
use crate::error::{Error, Result};
use crate::fusion::{Method, PmfEstimate, PmfAccumulator};
use crate::linalg::{cholesky_with_jitter, pack_lower, psd_factor, symmetrize, unpack_lower, MvNormal};
use crate::metrics::calibration;
use crate::network::{softmax, softmax_into, ByteReader, MlpClassifier};
use crate::rng::{derive_seed, fill_standard_normal, rng};

const POSTERIOR_MAGIC: &[u8; 8] = b"LLAPOS\0\x01";
const POSTERIOR_VERSION: u32 = 1;

/// Flattened indices of the weights and the bias feeding output `m`.
pub(crate) fn output_block(h: usize, m: usize, num_classes: usize) -> impl Iterator<Item = usize> {
    (m * h..(m + 1) * h).chain(std::iter::once(h * num_classes + m))
}

/// Fisher information of the last-layer parameters over `data`.
pub fn fisher_information(model: &MlpClassifier, data: &LabeledSet) -> Result<DMatrix<f64>> {
    if data.dim() != model.input_dim() {
        return Err(Error::Dimension {
            expected: model.input_dim(),
            got: data.dim(),
        });
    }
    let h = model.penultimate_width();
    let m = model.num_classes();
    let d = model.last_layer_param_count();
    let mut blocks = vec![DMatrix::<f64>::zeros(h + 1, h + 1); m];
    let theta = model.last_layer_params();

    let n = data.len();
    let chunk = 1024;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let rows = end - start;
        let x = DMatrix::from_row_slice(rows, data.dim(), &data.features()[start * data.dim()..end * data.dim()]);
        let a = model.penultimate_batch(&x)?;
        let mut aug = DMatrix::<f64>::from_element(rows, h + 1, 1.0);
        aug.columns_mut(0, h).copy_from(&a);
        let mut eta = DMatrix::<f64>::zeros(rows, m);
        for r in 0..rows {
            let ar = DVector::from_iterator(h, a.row(r).iter().copied());
            let g = model.logits_from_penultimate(&ar, theta.as_slice());
            let p = softmax(g.as_slice());
            for k in 0..m {
                eta[(r, k)] = p[k] * (1.0 - p[k]);
            }
        }
        for (k, block) in blocks.iter_mut().enumerate() {
            let mut scaled = aug.clone();
            for (r, mut row) in scaled.row_iter_mut().enumerate() {
                row *= eta[(r, k)];
            }
            block.gemm_tr(1.0, &scaled, &aug, 1.0);
        }
        start = end;
    }

    let mut fisher = DMatrix::zeros(d, d);
    for (k, block) in blocks.iter().enumerate() {
        let idx: Vec<usize> = output_block(h, k, m).collect();
        for (bi, &i) in idx.iter().enumerate() {
            for (bj, &j) in idx.iter().enumerate() {
                fisher[(i, j)] = block[(bi, bj)];
            }
        }
    }
    Ok(symmetrize(&fisher))
}

/// Gaussian posterior over the last-layer parameters of a frozen model.
#[derive(Debug, Clone)]
pub struct LaplacePosterior {
    model: MlpClassifier,
    theta_hat_last: DVector<f64>,
    cov_theta: DMatrix<f64>,
    cov_factor: DMatrix<f64>,
    prior_variance: f64,
    t_theta: f64,
}

fn check_hyper(prior_variance: f64, t_theta: f64) -> Result<()> {
    if !(prior_variance > 0.0 && prior_variance.is_finite()) {
        return Err(Error::contract("prior variance must be finite and > 0"));
    }
    if !(t_theta >= 1.0 && t_theta.is_finite()) {
        return Err(Error::contract(format!("T_theta must be >= 1, got {t_theta}")));
    }
    Ok(())
}

impl LaplacePosterior {
    /// `T_θ·(I_F + σ₀⁻²I)⁻¹` with the Fisher computed over `data`; empty data
    /// leaves the prior.
    pub fn fit(model: &MlpClassifier, data: &LabeledSet, prior_variance: f64, t_theta: f64) -> Result<Self> {
        check_hyper(prior_variance, t_theta)?;
        let d = model.last_layer_param_count();
        let fisher = if data.is_empty() {
            DMatrix::zeros(d, d)
        } else {
            fisher_information(model, data)?
        };
        Self::from_fisher(model, &fisher, prior_variance, t_theta)
    }

    pub fn from_fisher(model: &MlpClassifier, fisher: &DMatrix<f64>, prior_variance: f64, t_theta: f64) -> Result<Self> {
        check_hyper(prior_variance, t_theta)?;
        let d = model.last_layer_param_count();
        if fisher.nrows() != d || fisher.ncols() != d {
            return Err(Error::Dimension {
                expected: d,
                got: fisher.nrows(),
            });
        }
        let mut precision = symmetrize(fisher);
        for i in 0..d {
            precision[(i, i)] += 1.0 / prior_variance;
        }
        let f = cholesky_with_jitter(&precision, "posterior precision")?;
        let cov = symmetrize(&(f.chol.inverse() * t_theta));
        Self::from_covariance(model, cov, prior_variance, t_theta)
    }

    /// Wraps an explicit covariance (symmetric PSD, `d × d`).
    pub fn from_covariance(model: &MlpClassifier, cov_theta: DMatrix<f64>, prior_variance: f64, t_theta: f64) -> Result<Self> {
        check_hyper(prior_variance, t_theta)?;
        let d = model.last_layer_param_count();
        if cov_theta.nrows() != d || cov_theta.ncols() != d {
            return Err(Error::Dimension {
                expected: d,
                got: cov_theta.nrows(),
            });
        }
        let cov_factor = psd_factor(&cov_theta)?;
        Ok(LaplacePosterior {
            model: model.clone(),
            theta_hat_last: model.last_layer_params(),
            cov_theta,
            cov_factor,
            prior_variance,
            t_theta,
        })
    }

    pub fn model(&self) -> &MlpClassifier {
        &self.model
    }

    pub fn theta_hat_last(&self) -> &DVector<f64> {
        &self.theta_hat_last
    }

    pub fn cov_theta(&self) -> &DMatrix<f64> {
        &self.cov_theta
    }

    /// Lower triangular `L` with `L Lᵀ = P^θ`.
    pub fn cov_factor(&self) -> &DMatrix<f64> {
        &self.cov_factor
    }

    pub fn prior_variance(&self) -> f64 {
        self.prior_variance
    }

    pub fn t_theta(&self) -> f64 {
        self.t_theta
    }

    pub fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    /// Same posterior with the covariance rescaled to a new `T_θ`.
    pub fn with_t_theta(&self, t_theta: f64) -> Result<Self> {
        check_hyper(self.prior_variance, t_theta)?;
        let ratio = t_theta / self.t_theta;
        Ok(LaplacePosterior {
            cov_theta: &self.cov_theta * ratio,
            cov_factor: &self.cov_factor * ratio.sqrt(),
            t_theta,
            ..self.clone()
        })
    }

    /// Same posterior with the covariance multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor >= 0.0 && factor.is_finite()) {
            return Err(Error::contract("covariance scale must be finite and >= 0"));
        }
        Ok(LaplacePosterior {
            cov_theta: &self.cov_theta * factor,
            cov_factor: &self.cov_factor * factor.sqrt(),
            ..self.clone()
        })
    }

    fn sampler(&self) -> MvNormal {
        MvNormal::from_factor(self.theta_hat_last.clone(), &self.cov_factor)
    }

    /// `count` i.i.d. draws of the last-layer parameters.
    pub fn sample_parameters(&self, count: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
        if count == 0 {
            return Err(Error::contract("sample count must be >= 1"));
        }
        let mvn = self.sampler();
        let mut r = rng(seed);
        Ok((0..count).map(|_| mvn.sample(&mut r)).collect())
    }

    /// Class PMF averaged over sampled last layers, earlier layers frozen.
    pub fn parameter_space_pmf(&self, x: &[f64], count: usize, seed: u64, keep_cloud: bool) -> Result<PmfEstimate> {
        if count == 0 {
            return Err(Error::contract("sample count must be >= 1"));
        }
        let a = self.model.penultimate(x)?;
        let mvn = self.sampler();
        let mut r = rng(seed);
        let d = mvn.dim();
        let m = self.num_classes();
        let mut eps = vec![0.0; d];
        let mut theta = vec![0.0; d];
        let mut p = vec![0.0; m];
        let mut acc = PmfAccumulator::new(m, count, keep_cloud);
        for _ in 0..count {
            mvn.sample_into(&mut r, &mut eps, &mut theta);
            let g = self.model.logits_from_penultimate(&a, &theta);
            softmax_into(g.as_slice(), &mut p);
            acc.push(&p);
        }
        Ok(acc.finish(Method::ParamSpace, seed))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.theta_hat_last.len();
        let mut out = Vec::with_capacity(40 + 8 * (d + d * (d + 1) / 2));
        out.extend_from_slice(POSTERIOR_MAGIC);
        out.extend_from_slice(&POSTERIOR_VERSION.to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        out.extend_from_slice(&self.prior_variance.to_le_bytes());
        out.extend_from_slice(&self.t_theta.to_le_bytes());
        for v in self.theta_hat_last.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in pack_lower(&self.cov_factor) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Rebuilds a posterior for `model`; the stored MAP parameters must match
    /// the model's last layer bit for bit.
    pub fn from_bytes(model: &MlpClassifier, bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != POSTERIOR_MAGIC {
            return Err("not a posterior file (bad magic)".into());
        }
        let version = r.u32()?;
        if version != POSTERIOR_VERSION {
            return Err(format!("unsupported posterior version {version}"));
        }
        let d = r.u64()? as usize;
        if d != model.last_layer_param_count() {
            return Err(format!(
                "posterior has d = {d}, model last layer has {}",
                model.last_layer_param_count()
            ));
        }
        let prior_variance = r.f64()?;
        let t_theta = r.f64()?;
        let theta = (0..d).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        let packed = (0..d * (d + 1) / 2).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        if !r.is_done() {
            return Err("trailing bytes after covariance factor".into());
        }
        let theta_hat_last = DVector::from_vec(theta);
        if theta_hat_last != model.last_layer_params() {
            return Err("posterior MAP parameters do not match the model".into());
        }
        check_hyper(prior_variance, t_theta).map_err(|e| e.to_string())?;
        let cov_factor = unpack_lower(d, &packed).map_err(|e| e.to_string())?;
        let cov_theta = symmetrize(&(&cov_factor * cov_factor.transpose()));
        Ok(LaplacePosterior {
            model: model.clone(),
            theta_hat_last,
            cov_theta,
            cov_factor,
            prior_variance,
            t_theta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(model: &MlpClassifier, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(model, &bytes).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }
}

/// Settings for choosing `T_θ` on validation data.
#[derive(Debug, Clone, PartialEq)]
pub struct TThetaSearch {
    pub grid: Vec<f64>,
    pub samples: usize,
    pub bins: usize,
    pub seed: u64,
}

impl Default for TThetaSearch {
    fn default() -> Self {
        TThetaSearch {
            grid: crate::metrics::log_grid(1.0, 100.0, 25),
            samples: 200,
            bins: 10,
            seed: 0,
        }
    }
}

/// Picks the `T_θ` on the grid with the lowest validation ECE of the
/// single-model LLA PMF. Every grid point reuses the same normal draws per
/// item. Ties go to the smallest value.
pub fn fit_t_theta(post: &LaplacePosterior, validation: &LabeledSet, search: &TThetaSearch) -> Result<f64> {
    if validation.is_empty() || search.grid.is_empty() || search.samples == 0 {
        return Err(Error::contract("T_theta search needs validation data, a grid and samples"));
    }
    let base = post.with_t_theta(1.0)?;
    let m = base.num_classes();
    let k = search.samples;
    let x = DMatrix::from_row_slice(validation.len(), validation.dim(), validation.features());
    let a_all = base.model().penultimate_batch(&x)?;
    let h = base.model().penultimate_width();

    // Per item: shifted mean and L·ε for every draw at T_θ = 1.
    let mut items = Vec::with_capacity(validation.len());
    for i in 0..validation.len() {
        let a = DVector::from_iterator(h, a_all.row(i).iter().copied());
        let lg = logit_gaussian_from_penultimate(&base, &a, i, 0)?;
        let l = psd_factor(&lg.cov)?;
        let mut r = rng(derive_seed(search.seed, "t_theta", i as u64));
        let mut eps = DMatrix::<f64>::zeros(m, k);
        fill_standard_normal(&mut r, eps.as_mut_slice());
        items.push((lg.mean, l * eps));
    }

    let mut best = (f64::INFINITY, search.grid[0]);
    let mut z = vec![0.0; m];
    let mut p = vec![0.0; m];
    for &t in &search.grid {
        let s = t.sqrt();
        let preds: Vec<Vec<f64>> = items
            .iter()
            .map(|(mean, noise)| {
                let mut avg = vec![0.0; m];
                for col in noise.column_iter() {
                    for j in 0..m {
                        z[j] = mean[j] + s * col[j];
                    }
                    softmax_into(&z, &mut p);
                    for j in 0..m {
                        avg[j] += p[j];
                    }
                }
                avg.iter().map(|v| v / k as f64).collect()
            })
            .collect();
        let ece = calibration(&preds, validation.labels(), search.bins)?.ece;
        if ece < best.0 {
            best = (ece, t);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_blobs;
    use crate::network::{train_map, TrainConfig};

    fn small_model() -> (MlpClassifier, LabeledSet) {
        let data = make_blobs(3, 20, 2, 4.0, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            seed: 1,
            ..TrainConfig::default()
        };
        (train_map(&data, &[2, 5, 3], &cfg).unwrap().0, data)
    }

    #[test]
    fn zero_network_fisher_hand_value() {
        let model = MlpClassifier::zeros(&[2, 3, 2]).unwrap();
        let data = LabeledSet::new(vec![0.0, 0.0], 2, vec![0], 2).unwrap();
        let f = fisher_information(&model, &data).unwrap();
        let mut expected = DMatrix::zeros(8, 8);
        expected[(6, 6)] = 0.25;
        expected[(7, 7)] = 0.25;
        assert_eq!(f, expected);
    }

    #[test]
    fn fisher_doubles_with_duplicated_data() {
        let (model, data) = small_model();
        let f1 = fisher_information(&model, &data).unwrap();
        let f2 = fisher_information(&model, &data.concat(&data).unwrap()).unwrap();
        assert!((f2 - f1 * 2.0).abs().max() < 1e-10);
    }

    #[test]
    fn single_example_fisher_rank() {
        let (model, data) = small_model();
        let f = fisher_information(&model, &data.slice(0, 1)).unwrap();
        assert!(crate::linalg::numerical_rank(&f, 1e-10) <= 3);
    }

    #[test]
    fn empty_data_leaves_scaled_prior() {
        let (model, data) = small_model();
        let post = LaplacePosterior::fit(&model, &data.slice(0, 0), 0.5, 3.0).unwrap();
        let d = model.last_layer_param_count();
        let expected = DMatrix::<f64>::identity(d, d) * 1.5;
        assert!((post.cov_theta() - expected).abs().max() < 1e-12);
    }

    #[test]
    fn unit_fisher_halves() {
        let (model, _) = small_model();
        let d = model.last_layer_param_count();
        let post = LaplacePosterior::from_fisher(&model, &DMatrix::identity(d, d), 1.0, 1.0).unwrap();
        assert!((post.cov_theta() - DMatrix::<f64>::identity(d, d) * 0.5).abs().max() < 1e-12);
    }

    #[test]
    fn t_theta_doubles_covariance() {
        let (model, data) = small_model();
        let p1 = LaplacePosterior::fit(&model, &data, 1.0, 1.0).unwrap();
        let p2 = LaplacePosterior::fit(&model, &data, 1.0, 2.0).unwrap();
        assert!((p2.cov_theta() - p1.cov_theta() * 2.0).abs().max() < 1e-12);
        let p3 = p1.with_t_theta(2.0).unwrap();
        assert!((p3.cov_theta() - p2.cov_theta()).abs().max() < 1e-12);
        assert!(LaplacePosterior::fit(&model, &data, 1.0, 0.5).is_err());
    }

    #[test]
    fn degenerate_posterior_samples_at_map() {
        let (model, _) = small_model();
        let d = model.last_layer_param_count();
        let post = LaplacePosterior::from_covariance(&model, DMatrix::zeros(d, d), 1.0, 1.0).unwrap();
        for s in post.sample_parameters(20, 4).unwrap() {
            assert!((s - post.theta_hat_last()).abs().max() < 1e-5);
        }
        let x = [0.3, -0.7];
        let pmf = post.parameter_space_pmf(&x, 50, 1, false).unwrap();
        let direct = model.predict(&x).unwrap();
        for (a, b) in pmf.pmf.iter().zip(direct) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn single_draw_pmf_is_that_network() {
        let (model, data) = small_model();
        let post = LaplacePosterior::fit(&model, &data, 1.0, 1.0).unwrap();
        let theta = &post.sample_parameters(1, 8).unwrap()[0];
        let x = [1.0, 2.0];
        let pmf = post.parameter_space_pmf(&x, 1, 8, false).unwrap();
        let direct = model.with_last_layer_params(theta.as_slice()).unwrap().predict(&x).unwrap();
        for (a, b) in pmf.pmf.iter().zip(direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let (model, data) = small_model();
        let post = LaplacePosterior::fit(&model, &data, 1.0, 1.0).unwrap();
        assert_eq!(post.sample_parameters(3, 5).unwrap(), post.sample_parameters(3, 5).unwrap());
    }

    #[test]
    fn posterior_bytes_round_trip() {
        let (model, data) = small_model();
        let post = LaplacePosterior::fit(&model, &data, 2.0, 1.5).unwrap();
        let back = LaplacePosterior::from_bytes(&model, &post.to_bytes()).unwrap();
        assert_eq!(back.cov_factor(), post.cov_factor());
        assert!((back.cov_theta() - post.cov_theta()).abs().max() < 1e-12);
        assert_eq!(back.t_theta(), 1.5);
        let other = MlpClassifier::init(&[2, 5, 3], 99).unwrap();
        assert!(LaplacePosterior::from_bytes(&other, &post.to_bytes()).is_err());
    }

    #[test]
    fn t_theta_search_stays_on_grid() {
        let (model, data) = small_model();
        let post = LaplacePosterior::fit(&model, &data, 1.0, 1.0).unwrap();
        let val = make_blobs(3, 10, 2, 4.0, 8).unwrap();
        let search = TThetaSearch {
            samples: 20,
            ..TThetaSearch::default()
        };
        let t = fit_t_theta(&post, &val, &search).unwrap();
        assert!(search.grid.contains(&t));
    }
}
