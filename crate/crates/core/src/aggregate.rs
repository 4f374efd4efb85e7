//! Joint Gaussian over the shifted logits of `C` classifiers on `L` inputs.
//!
//! The stacked vector `ζ` is classifier-major: block `(c, l)` starts at
//! `(c·L + l)·M`. Blocks of the same classifier share a posterior, so their
//! cross-covariance is `J(x_i)ᵀ P^θ_c J(x_j)`. Independently trained
//! classifiers have no such link; [`CrossPolicy`] decides what goes there.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::delta::{check_finite_activations, cross_covariance, precision_times_jacobian, jacobian_transpose_times, LogitGaussian};
use crate::error::{Error, Result};
use crate::laplace::LaplacePosterior;
use crate::linalg::{project_psd, symmetrize};
use crate::network::shift_logits;

/// Covariance between blocks of different classifiers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum CrossPolicy {
    /// Classifiers are independent.
    #[default]
    Zero,
    /// Matching entries get `ρ·√(D_a D_b)` from the two blocks' diagonals;
    /// the result is projected back onto the PSD cone if needed.
    SharedScalar { rho: f64 },
}


/// `ζ ~ N(mean, cov)` with its block layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedState {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    classifiers: usize,
    inputs: usize,
    classes: usize,
}

impl AggregatedState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, classifiers: usize, inputs: usize, classes: usize) -> Result<Self> {
        let n = classifiers * inputs * classes;
        if classifiers == 0 || inputs == 0 || classes < 2 {
            return Err(Error::contract("aggregated state needs C >= 1, L >= 1, M >= 2"));
        }
        if mean.len() != n {
            return Err(Error::Dimension { expected: n, got: mean.len() });
        }
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::Dimension { expected: n, got: cov.nrows() });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                msg: "non-finite aggregated state".into(),
                condition: f64::INFINITY,
            });
        }
        Ok(AggregatedState {
            mean,
            cov: symmetrize(&cov),
            classifiers,
            inputs,
            classes,
        })
    }

    /// Block-diagonal state from per-block Gaussians listed in `ζ` order.
    pub fn from_blocks(blocks: &[LogitGaussian], classifiers: usize, inputs: usize) -> Result<Self> {
        if blocks.len() != classifiers * inputs || blocks.is_empty() {
            return Err(Error::Dimension {
                expected: classifiers * inputs,
                got: blocks.len(),
            });
        }
        let m = blocks[0].dim();
        let n = blocks.len() * m;
        let mut mean = DVector::zeros(n);
        let mut cov = DMatrix::zeros(n, n);
        for (b, g) in blocks.iter().enumerate() {
            if g.dim() != m || g.cov.nrows() != m || g.cov.ncols() != m {
                return Err(Error::Dimension { expected: m, got: g.dim() });
            }
            mean.rows_mut(b * m, m).copy_from(&g.mean);
            cov.view_mut((b * m, b * m), (m, m)).copy_from(&g.cov);
        }
        Self::new(mean, cov, classifiers, inputs, m)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn classifiers(&self) -> usize {
        self.classifiers
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Number of `M`-blocks, `C·L`.
    pub fn blocks(&self) -> usize {
        self.classifiers * self.inputs
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Start of block `(l, c)` in `ζ`.
    pub fn offset(&self, l: usize, c: usize) -> usize {
        (c * self.inputs + l) * self.classes
    }

    /// Marginal Gaussian of block `(l, c)`.
    pub fn marginal(&self, l: usize, c: usize) -> LogitGaussian {
        let o = self.offset(l, c);
        let m = self.classes;
        LogitGaussian {
            mean: self.mean.rows(o, m).clone_owned(),
            cov: self.cov.view((o, o), (m, m)).clone_owned(),
            classifier: c,
            input: l,
        }
    }

    /// Block `(l, c)` of every column of `samples` (one draw of `ζ` per column).
    pub fn recover(&self, l: usize, c: usize, samples: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if l >= self.inputs || c >= self.classifiers {
            return Err(Error::contract(format!("block ({l}, {c}) out of range")));
        }
        if samples.nrows() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: samples.nrows(),
            });
        }
        Ok(samples.rows(self.offset(l, c), self.classes).clone_owned())
    }
}

/// `J(x_i)ᵀ P^θ J(x_j)` for one classifier.
pub fn within_classifier_block(post: &LaplacePosterior, x_i: &[f64], x_j: &[f64]) -> Result<DMatrix<f64>> {
    let a_i = post.model().penultimate(x_i)?;
    let a_j = post.model().penultimate(x_j)?;
    check_finite_activations(&a_i)?;
    check_finite_activations(&a_j)?;
    Ok(cross_covariance(post, &a_i, &a_j))
}

/// Stacks the logit Gaussians of every classifier on every input.
pub fn aggregate(posteriors: &[LaplacePosterior], inputs: &[&[f64]], policy: CrossPolicy) -> Result<AggregatedState> {
    let c_count = posteriors.len();
    let l_count = inputs.len();
    if c_count == 0 || l_count == 0 {
        return Err(Error::contract("aggregation needs at least one classifier and one input"));
    }
    let m = posteriors[0].num_classes();
    let dim = posteriors[0].model().input_dim();
    for p in posteriors {
        if p.num_classes() != m {
            return Err(Error::Dimension {
                expected: m,
                got: p.num_classes(),
            });
        }
        if p.model().input_dim() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: p.model().input_dim(),
            });
        }
    }
    for x in inputs {
        if x.len() != dim {
            return Err(Error::Dimension { expected: dim, got: x.len() });
        }
    }

    let acts = posteriors
        .iter()
        .map(|post| inputs.iter().map(|x| post.model().penultimate(x)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    aggregate_activations(posteriors, &acts, policy)
}

/// [`aggregate`] from penultimate activations, `acts[c][l]` for classifier
/// `c` on input `l`.
pub fn aggregate_activations(
    posteriors: &[LaplacePosterior],
    acts: &[Vec<DVector<f64>>],
    policy: CrossPolicy,
) -> Result<AggregatedState> {
    let c_count = posteriors.len();
    if c_count == 0 || acts.len() != c_count {
        return Err(Error::contract("need one activation list per classifier"));
    }
    let l_count = acts[0].len();
    if l_count == 0 || acts.iter().any(|a| a.len() != l_count) {
        return Err(Error::contract("every classifier needs the same, nonzero number of inputs"));
    }
    let m = posteriors[0].num_classes();
    if posteriors.iter().any(|p| p.num_classes() != m) {
        return Err(Error::contract("classifiers disagree on the number of classes"));
    }
    if let CrossPolicy::SharedScalar { rho } = policy {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::contract(format!("shared correlation must be in [0, 1), got {rho}")));
        }
    }

    let n = c_count * l_count * m;
    let mut mean = DVector::zeros(n);
    let mut cov = DMatrix::zeros(n, n);
    for (c, post) in posteriors.iter().enumerate() {
        let acts = &acts[c];
        for a in acts {
            if a.len() != post.model().penultimate_width() {
                return Err(Error::Dimension {
                    expected: post.model().penultimate_width(),
                    got: a.len(),
                });
            }
            check_finite_activations(a)?;
        }
        for (l, a) in acts.iter().enumerate() {
            let o = (c * l_count + l) * m;
            let g = post.model().logits_from_penultimate(a, post.theta_hat_last().as_slice());
            mean.rows_mut(o, m).copy_from(&shift_logits(&g));
        }
        for (j, a_j) in acts.iter().enumerate() {
            let u = precision_times_jacobian(post, a_j);
            let oj = (c * l_count + j) * m;
            for (i, a_i) in acts.iter().enumerate().take(j + 1) {
                let oi = (c * l_count + i) * m;
                let block = jacobian_transpose_times(a_i, &u);
                cov.view_mut((oi, oj), (m, m)).copy_from(&block);
                if i != j {
                    cov.view_mut((oj, oi), (m, m)).copy_from(&block.transpose());
                }
            }
        }
    }

    if let CrossPolicy::SharedScalar { rho } = policy {
        if rho > 0.0 && c_count > 1 {
            let lm = l_count * m;
            for a in 0..c_count {
                for b in 0..c_count {
                    if a == b {
                        continue;
                    }
                    for k in 0..lm {
                        let (ia, ib) = (a * lm + k, b * lm + k);
                        cov[(ia, ib)] = rho * (cov[(ia, ia)].max(0.0) * cov[(ib, ib)].max(0.0)).sqrt();
                    }
                }
            }
            cov = project_psd(&cov);
        }
    }

    AggregatedState::new(mean, cov, c_count, l_count, m)
}
