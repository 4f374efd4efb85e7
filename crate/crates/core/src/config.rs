//! Run configuration, read from TOML.
//!
//! ```toml
//! version = 1
//! seed = 7
//! out = "runs/blobs"
//!
//! [data]
//! kind = "blobs"            # or "idx"
//! classes = 3
//! dim = 2
//!
//! [model]
//! hidden = [16, 16]
//!
//! [train]
//! epochs = 20
//!
//! [laplace]
//! t_theta = "fit"           # or a fixed scale >= 1, the default being 1
//!
//! [ensemble]
//! size = 5
//! cross_policy = { kind = "zero" }
//! weights = "uniform"      # or "inverse_trace"
//!
//! [evaluation]
//! methods = ["temp_scaling", "deep_ensemble", "lla", "info_fusion", "ella"]
//! samples = 1000
//! ```
//!
//! Every section except `data` has defaults. Relative paths are taken as
//! given, i.e. relative to the working directory. `train.seed` is ignored:
//! member seeds are derived from the top-level `seed`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregate::CrossPolicy;
use crate::dataset::Corruption;
use crate::error::{Error, Result};
use crate::fusion::Method;
use crate::metrics::log_grid;
use crate::network::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub data: DataSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub laplace: LaplaceSpec,
    #[serde(default)]
    pub ensemble: EnsembleSpec,
    #[serde(default)]
    pub evaluation: EvalSpec,
    #[serde(default)]
    pub sequence: SequenceSpec,
    #[serde(default)]
    pub fuse: FuseSpec,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// IDX image/label pairs. Training and validation come from the front of
    /// the training file, in that order.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        ood_images: Option<PathBuf>,
        #[serde(default)]
        ood_labels: Option<PathBuf>,
        #[serde(default)]
        train_count: Option<usize>,
        #[serde(default = "default_validation_count")]
        validation_count: usize,
        #[serde(default)]
        test_count: Option<usize>,
        #[serde(default)]
        ood_count: Option<usize>,
    },
    /// Gaussian blobs; the out-of-distribution set is the test set shifted by
    /// `ood_shift` in every coordinate.
    Blobs {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_blob_dim")]
        dim: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_train_per_class")]
        train_per_class: usize,
        #[serde(default = "default_eval_per_class")]
        validation_per_class: usize,
        #[serde(default = "default_eval_per_class")]
        test_per_class: usize,
        #[serde(default = "default_ood_shift")]
        ood_shift: f64,
    },
}

fn default_validation_count() -> usize {
    5000
}
fn default_classes() -> usize {
    3
}
fn default_blob_dim() -> usize {
    2
}
fn default_separation() -> f64 {
    6.0
}
fn default_train_per_class() -> usize {
    200
}
fn default_eval_per_class() -> usize {
    100
}
fn default_ood_shift() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec { hidden: vec![16, 16] }
    }
}

/// Log-spaced grid `lo..=hi` with `points` entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl GridSpec {
    pub fn values(&self) -> Vec<f64> {
        log_grid(self.lo, self.hi, self.points)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.lo > 0.0 && self.hi >= self.lo && self.hi.is_finite() && self.points >= 1 {
            Ok(())
        } else {
            Err(Error::Config(format!("{what}: need 0 < lo <= hi and points >= 1")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fit {
    Fit,
}

/// `t_theta = 2.5` fixes the covariance scale; `t_theta = "fit"` searches
/// the grid per member for the lowest validation ECE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TTheta {
    Fixed(f64),
    Search(Fit),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaplaceSpec {
    pub t_theta: TTheta,
    pub t_theta_grid: GridSpec,
    /// Draws per validation item during the `T_θ` search.
    pub t_theta_samples: usize,
    /// Use only the first this many validation items for the search.
    pub t_theta_items: Option<usize>,
}

impl Default for LaplaceSpec {
    fn default() -> Self {
        LaplaceSpec {
            t_theta: TTheta::Fixed(1.0),
            t_theta_grid: GridSpec {
                lo: 1.0,
                hi: 100.0,
                points: 25,
            },
            t_theta_samples: 200,
            t_theta_items: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    Uniform,
    InverseTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSpec {
    pub size: usize,
    pub cross_policy: CrossPolicy,
    pub weights: WeightScheme,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec {
            size: 5,
            cross_policy: CrossPolicy::Zero,
            weights: WeightScheme::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub methods: Vec<Method>,
    /// Monte Carlo draws per prediction.
    pub samples: usize,
    pub bins: usize,
    pub temperature_grid: GridSpec,
    /// Evaluate only the first this many test (and OOD) items.
    pub limit: Option<usize>,
    pub histogram_bins: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            methods: vec![
                Method::TempScaling,
                Method::DeepEnsemble,
                Method::Lla,
                Method::InfoFusion,
                Method::Ella,
            ],
            samples: 1000,
            bins: 10,
            temperature_grid: GridSpec {
                lo: 0.05,
                hi: 20.0,
                points: 100,
            },
            limit: None,
            histogram_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceSpec {
    pub length: usize,
    /// Number of sequences, each drawn from the test set with its own seed.
    pub count: usize,
    /// Class of every sequence; cycles through the classes when absent.
    pub class: Option<usize>,
    /// Applied to the single element at `corrupt_index`.
    pub corruption: Corruption,
    pub corrupt_index: usize,
    /// `ella` (default) or `info_fusion`.
    pub method: Method,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        SequenceSpec {
            length: 6,
            count: 1,
            class: None,
            corruption: Corruption::None,
            corrupt_index: 3,
            method: Method::Ella,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseRule {
    Product,
    LogLinear,
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuseSpec {
    /// Prediction dumps (JSON lines) to combine item by item.
    pub inputs: Vec<PathBuf>,
    pub rule: FuseRule,
    /// Log-linear weights, one per input; uniform when absent.
    pub weights: Option<Vec<f64>>,
}

impl Default for FuseSpec {
    fn default() -> Self {
        FuseSpec {
            inputs: Vec::new(),
            rule: FuseRule::Product,
            weights: None,
        }
    }
}

impl RunConfig {
    /// A small blobs run with every default.
    pub fn blobs(seed: u64, out: impl Into<PathBuf>) -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed,
            out: out.into(),
            data: DataSpec::Blobs {
                classes: default_classes(),
                dim: default_blob_dim(),
                separation: default_separation(),
                train_per_class: default_train_per_class(),
                validation_per_class: default_eval_per_class(),
                test_per_class: default_eval_per_class(),
                ood_shift: default_ood_shift(),
            },
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            laplace: LaplaceSpec::default(),
            ensemble: EnsembleSpec::default(),
            evaluation: EvalSpec::default(),
            sequence: SequenceSpec::default(),
            fuse: FuseSpec::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.model.hidden.contains(&0) {
            return bad("model.hidden widths must be >= 1");
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 || !(self.train.learning_rate > 0.0) {
            return bad("train: epochs, batch_size and learning_rate must be positive");
        }
        if !(self.train.prior_variance > 0.0) {
            return bad("train.prior_variance must be > 0");
        }
        if let TTheta::Fixed(t) = self.laplace.t_theta {
            if !(t >= 1.0 && t.is_finite()) {
                return bad("laplace.t_theta must be >= 1");
            }
        }
        self.laplace.t_theta_grid.validate("laplace.t_theta_grid")?;
        if self.laplace.t_theta_grid.lo < 1.0 {
            return bad("laplace.t_theta_grid must start at >= 1");
        }
        if self.laplace.t_theta_samples == 0 {
            return bad("laplace.t_theta_samples must be >= 1");
        }
        if self.ensemble.size == 0 {
            return bad("ensemble.size must be >= 1");
        }
        if let CrossPolicy::SharedScalar { rho } = self.ensemble.cross_policy {
            if !(0.0..1.0).contains(&rho) {
                return bad("ensemble.cross_policy.rho must be in [0, 1)");
            }
        }
        if self.evaluation.samples == 0 || self.evaluation.bins == 0 || self.evaluation.histogram_bins == 0 {
            return bad("evaluation: samples, bins and histogram_bins must be >= 1");
        }
        self.evaluation.temperature_grid.validate("evaluation.temperature_grid")?;
        if self
            .evaluation
            .methods
            .iter()
            .any(|m| matches!(m, Method::Product | Method::LogLinear))
        {
            return bad("evaluation.methods: product and log_linear pool prediction dumps; use the fuse command");
        }
        if self.sequence.length == 0 || self.sequence.count == 0 {
            return bad("sequence: length and count must be >= 1");
        }
        if self.sequence.corrupt_index >= self.sequence.length && self.sequence.corruption != Corruption::None {
            return bad("sequence.corrupt_index must be < sequence.length");
        }
        if !matches!(self.sequence.method, Method::InfoFusion | Method::Ella) {
            return bad("sequence.method must be info_fusion or ella");
        }
        if let Some(w) = &self.fuse.weights {
            if w.len() != self.fuse.inputs.len() {
                return bad("fuse.weights needs one weight per input");
            }
        }
        match &self.data {
            DataSpec::Blobs {
                classes,
                dim,
                separation,
                train_per_class,
                validation_per_class,
                test_per_class,
                ood_shift,
            } => {
                if *classes < 2 || *dim + 1 < *classes {
                    return bad("data: blobs need classes >= 2 and dim >= classes - 1");
                }
                if !(*separation >= 0.0) || !ood_shift.is_finite() {
                    return bad("data: separation and ood_shift must be finite, separation >= 0");
                }
                if *train_per_class == 0 || *validation_per_class == 0 || *test_per_class == 0 {
                    return bad("data: per-class counts must be >= 1");
                }
            }
            DataSpec::Idx {
                ood_images, ood_labels, ..
            } => {
                if ood_images.is_some() != ood_labels.is_some() {
                    return bad("data: ood_images and ood_labels go together");
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::blobs(3, "runs/x");
        cfg.ensemble.cross_policy = CrossPolicy::SharedScalar { rho: 0.25 };
        cfg.sequence.corruption = Corruption::Noise { sigma: 4.0 };
        cfg.laplace.t_theta = TTheta::Fixed(2.0);
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg = RunConfig::from_toml("version = 1\n[data]\nkind = \"blobs\"\n").unwrap();
        assert_eq!(cfg.ensemble.size, 5);
        assert_eq!(cfg.evaluation.temperature_grid.values().len(), 100);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for text in [
            "version = 2\n[data]\nkind = \"blobs\"\n",
            "version = 1\n",
            "version = 1\n[data]\nkind = \"blobs\"\n[ensemble]\nsize = 0\n",
            "version = 1\nunknown = 3\n[data]\nkind = \"blobs\"\n",
            "version = 1\n[data]\nkind = \"blobs\"\n[evaluation]\nmethods = [\"product\"]\n",
        ] {
            let e = RunConfig::from_toml(text).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{text}");
        }
    }
}
