//! End-to-end runs over a [`RunConfig`].
//!
//! Everything lands under `cfg.out`:
//!
//! ```text
//! manifest.json                  members, seeds, fitted T_θ and temperature
//! members/member_<c>.ckpt        model checkpoints
//! members/member_<c>.post        last-layer posteriors
//! eval/summary.csv               one row per method
//! eval/bins.csv                  calibration histograms
//! eval/report_<method>.txt       key-value reports
//! eval/predictions_<method>.jsonl
//! ood/summary.csv, ood/report_<method>.txt, ood/roc_<method>.csv,
//! ood/pr_<method>.csv, ood/entropy.csv, ood/histogram.csv,
//! ood/histogram_<method>.svg
//! sequence/trace.csv, sequence/frames.csv, sequence/summary.csv,
//! sequence/trace_0.svg
//! fuse/summary.csv, fuse/report_<method>.txt, fuse/predictions_<method>.jsonl
//! ```
//!
//! Every random stage draws from `derive_seed(cfg.seed, stage, index)` with
//! a per-item index, so results do not depend on thread scheduling.
//! Prediction dumps hold one JSON object per line:
//! `{"item":0,"label":3,"method":"lla","dims":[5,1,10],"seed":123,"samples":1000,"pmf":[...]}`,
//! where `dims` is `(C, L, M)` and `seed`/`samples` appear for sampled
//! methods only.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate_activations, AggregatedState};
use crate::config::{DataSpec, FuseRule, RunConfig, TTheta, WeightScheme};
use crate::dataset::{load_idx, make_blobs, Corruption, LabeledSet, Provenance};
use crate::dataset::build_sequence;
use crate::delta::logit_gaussian_from_penultimate;
use crate::error::{Error, Result};
use crate::fusion::{
    ella_pmf, ensemble_average, fuse_information, inverse_trace_weights, log_linear_pool, mc_pmf, product_fusion,
    uniform_weights, FusedGaussian, Method,
};
use crate::laplace::{fit_t_theta, LaplacePosterior, TThetaSearch};
use crate::metrics::{detection, entropy, fit_temperature, DetectionReport, EvalReport};
use crate::network::{argmax, softmax, train_map, MlpClassifier, TrainConfig};
use crate::plot::{bar_chart, line_chart, Series};
use crate::rng::derive_seed;

pub const MANIFEST_VERSION: u32 = 1;

/// Train, validation, test and optional out-of-distribution sets.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: LabeledSet,
    pub validation: LabeledSet,
    pub test: LabeledSet,
    pub ood: Option<LabeledSet>,
}

fn take(set: LabeledSet, count: Option<usize>) -> LabeledSet {
    match count {
        Some(n) if n < set.len() => set.slice(0, n),
        _ => set,
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<Datasets> {
    match &cfg.data {
        DataSpec::Blobs {
            classes,
            dim,
            separation,
            train_per_class,
            validation_per_class,
            test_per_class,
            ood_shift,
        } => {
            let blobs = |per: usize, k: u64| make_blobs(*classes, per, *dim, *separation, derive_seed(cfg.seed, "data", k));
            let test = blobs(*test_per_class, 2)?;
            Ok(Datasets {
                train: blobs(*train_per_class, 0)?,
                validation: blobs(*validation_per_class, 1)?,
                ood: Some(test.shifted(*ood_shift)),
                test,
            })
        }
        DataSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ood_images,
            ood_labels,
            train_count,
            validation_count,
            test_count,
            ood_count,
        } => {
            let full = load_idx(train_images, train_labels)?;
            let n_train = train_count.unwrap_or(full.len().saturating_sub(*validation_count));
            if n_train == 0 || n_train + validation_count > full.len() {
                return Err(Error::Structure(format!(
                    "{}: {} items cannot provide {n_train} training and {validation_count} validation items",
                    train_images.display(),
                    full.len()
                )));
            }
            let ood = match (ood_images, ood_labels) {
                (Some(i), Some(l)) => Some(take(load_idx(i, l)?, *ood_count)),
                _ => None,
            };
            Ok(Datasets {
                train: full.slice(0, n_train),
                validation: full.slice(n_train, n_train + validation_count),
                test: take(load_idx(test_images, test_labels)?, *test_count),
                ood,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberEntry {
    pub index: usize,
    pub seed: u64,
    pub checkpoint: String,
    pub posterior: String,
    pub t_theta: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    pub steps: usize,
}

/// Written once per training run. Holds no timestamps, so two runs with the
/// same configuration produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub architecture: Vec<usize>,
    pub prior_variance: f64,
    pub train_items: usize,
    pub validation_items: usize,
    /// Fitted on member 0's validation logits.
    pub temperature: f64,
    pub members: Vec<MemberEntry>,
}

/// Trained members with their posteriors.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub manifest: Manifest,
    pub posteriors: Vec<LaplacePosterior>,
}

fn member_files(c: usize) -> (String, String) {
    (format!("members/member_{c}.ckpt"), format!("members/member_{c}.post"))
}

fn accuracy(model: &MlpClassifier, data: &LabeledSet) -> Result<f64> {
    let x = DMatrix::from_row_slice(data.len(), data.dim(), data.features());
    let logits = model.logits_batch(&x)?;
    let hits = logits
        .row_iter()
        .zip(data.labels())
        .filter(|(row, &y)| argmax(&row.iter().copied().collect::<Vec<_>>()) == y)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

fn logits_of(model: &MlpClassifier, data: &LabeledSet) -> Result<Vec<Vec<f64>>> {
    let x = DMatrix::from_row_slice(data.len(), data.dim(), data.features());
    let logits = model.logits_batch(&x)?;
    Ok(logits.row_iter().map(|r| r.iter().copied().collect()).collect())
}

impl Ensemble {
    /// Trains `cfg.ensemble.size` members in parallel and fits their posteriors.
    pub fn train(cfg: &RunConfig, data: &Datasets) -> Result<Self> {
        let mut arch = vec![data.train.dim()];
        arch.extend(&cfg.model.hidden);
        arch.push(data.train.num_classes());
        let fit_items = cfg.laplace.t_theta_items.unwrap_or(data.validation.len()).min(data.validation.len());
        let fit_set = data.validation.slice(0, fit_items);

        let members: Vec<Result<(LaplacePosterior, MemberEntry)>> = (0..cfg.ensemble.size)
            .into_par_iter()
            .map(|c| {
                let seed = derive_seed(cfg.seed, "member", c as u64);
                let tc = TrainConfig {
                    seed,
                    ..cfg.train.clone()
                };
                let wrap = |e| Error::Member {
                    member: c,
                    source: Box::new(e),
                };
                let (model, report) = train_map(&data.train, &arch, &tc).map_err(wrap)?;
                let post = LaplacePosterior::fit(&model, &data.train, tc.prior_variance, 1.0).map_err(wrap)?;
                let t_theta = match cfg.laplace.t_theta {
                    TTheta::Fixed(t) => t,
                    TTheta::Search(_) => fit_t_theta(
                        &post,
                        &fit_set,
                        &TThetaSearch {
                            grid: cfg.laplace.t_theta_grid.values(),
                            samples: cfg.laplace.t_theta_samples,
                            bins: cfg.evaluation.bins,
                            seed: derive_seed(cfg.seed, "t_theta", c as u64),
                        },
                    )
                    .map_err(wrap)?,
                };
                let post = post.with_t_theta(t_theta).map_err(wrap)?;
                let (checkpoint, posterior) = member_files(c);
                let entry = MemberEntry {
                    index: c,
                    seed,
                    checkpoint,
                    posterior,
                    t_theta,
                    final_loss: report.final_loss,
                    train_accuracy: report.train_accuracy,
                    validation_accuracy: accuracy(&model, &data.validation).map_err(wrap)?,
                    steps: report.steps,
                };
                Ok((post, entry))
            })
            .collect();
        let (posteriors, entries): (Vec<_>, Vec<_>) = members.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();

        let temperature = fit_temperature(
            &logits_of(posteriors[0].model(), &data.validation)?,
            data.validation.labels(),
            &cfg.evaluation.temperature_grid.values(),
        )?;
        Ok(Ensemble {
            manifest: Manifest {
                version: MANIFEST_VERSION,
                seed: cfg.seed,
                architecture: arch,
                prior_variance: cfg.train.prior_variance,
                train_items: data.train.len(),
                validation_items: data.validation.len(),
                temperature,
                members: entries,
            },
            posteriors,
        })
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        for (post, entry) in self.posteriors.iter().zip(&self.manifest.members) {
            let ckpt = out.join(&entry.checkpoint);
            create_parent(&ckpt)?;
            post.model().save(&ckpt)?;
            post.save(out.join(&entry.posterior))?;
        }
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Structure(e.to_string()))?;
        write_text(&out.join("manifest.json"), &(json + "\n"))
    }

    pub fn load(out: &Path) -> Result<Self> {
        let path = out.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        if manifest.members.is_empty() {
            return Err(Error::Format {
                path,
                msg: "manifest lists no members".into(),
            });
        }
        let posteriors = manifest
            .members
            .iter()
            .map(|m| {
                let model = MlpClassifier::load(out.join(&m.checkpoint))?;
                LaplacePosterior::load(&model, out.join(&m.posterior))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Ensemble { manifest, posteriors })
    }

    pub fn num_classes(&self) -> usize {
        self.posteriors[0].num_classes()
    }

    pub fn input_dim(&self) -> usize {
        self.posteriors[0].model().input_dim()
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains the ensemble and writes checkpoints, posteriors and the manifest.
pub fn cmd_train(cfg: &RunConfig) -> Result<Ensemble> {
    let data = load_data(cfg)?;
    let ens = Ensemble::train(cfg, &data)?;
    ens.save(&cfg.out)?;
    Ok(ens)
}

/// PMFs of one method over a set, in item order.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub method: Method,
    /// `(C, L, M)` behind each prediction.
    pub dims: [usize; 3],
    /// Monte Carlo draws per item, for sampled methods.
    pub samples: Option<usize>,
    pub labels: Vec<usize>,
    pub pmfs: Vec<Vec<f64>>,
    /// Per-item seed, for sampled methods.
    pub seeds: Vec<Option<u64>>,
}

#[derive(Serialize, Deserialize)]
struct DumpRecord {
    item: usize,
    label: usize,
    method: Method,
    dims: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    samples: Option<usize>,
    pmf: Vec<f64>,
}

impl Predictions {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for (i, (p, &y)) in self.pmfs.iter().zip(&self.labels).enumerate() {
            let rec = DumpRecord {
                item: i,
                label: y,
                method: self.method,
                dims: self.dims,
                seed: self.seeds.get(i).copied().flatten(),
                samples: self.samples,
                pmf: p.clone(),
            };
            s.push_str(&serde_json::to_string(&rec).expect("dump record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let fail = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let mut method = None;
        let mut dims = [0; 3];
        let mut samples = None;
        let mut labels = Vec::new();
        let mut pmfs = Vec::new();
        let mut seeds = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: DumpRecord = serde_json::from_str(line).map_err(|e| fail(format!("line {}: {e}", n + 1)))?;
            if rec.item != pmfs.len() {
                return Err(fail(format!("line {}: expected item {}, got {}", n + 1, pmfs.len(), rec.item)));
            }
            if *method.get_or_insert(rec.method) != rec.method {
                return Err(fail(format!("line {}: mixed methods", n + 1)));
            }
            dims = rec.dims;
            samples = rec.samples;
            labels.push(rec.label);
            pmfs.push(rec.pmf);
            seeds.push(rec.seed);
        }
        let method = method.ok_or_else(|| fail("empty prediction dump".into()))?;
        Ok(Predictions {
            method,
            dims,
            samples,
            labels,
            pmfs,
            seeds,
        })
    }
}

/// Penultimate activations of every member on every item: `[member][item]`.
fn activations(ens: &Ensemble, set: &LabeledSet) -> Result<Vec<Vec<DVector<f64>>>> {
    if set.dim() != ens.input_dim() {
        return Err(Error::Dimension {
            expected: ens.input_dim(),
            got: set.dim(),
        });
    }
    ens.posteriors
        .iter()
        .map(|post| {
            let mut out = Vec::with_capacity(set.len());
            let chunk = 1024;
            for start in (0..set.len()).step_by(chunk) {
                let end = (start + chunk).min(set.len());
                let x = DMatrix::from_row_slice(end - start, set.dim(), &set.features()[start * set.dim()..end * set.dim()]);
                let a = post.model().penultimate_batch(&x)?;
                out.extend(a.row_iter().map(|r| r.transpose()));
            }
            Ok(out)
        })
        .collect()
}

/// Samples a PMF from a joint logit state with the given fusion method.
pub fn state_pmf(state: &AggregatedState, method: Method, weights: WeightScheme, samples: usize, seed: u64) -> Result<Vec<f64>> {
    match method {
        Method::InfoFusion => Ok(mc_pmf(&fuse_information(state)?, samples, seed, false, method)?.pmf),
        Method::Ella => {
            let w = match weights {
                WeightScheme::Uniform => uniform_weights(state),
                WeightScheme::InverseTrace => inverse_trace_weights(state)?,
            };
            Ok(ella_pmf(state, &w, samples, seed, false)?.pmf)
        }
        other => Err(Error::contract(format!("{other} does not act on a joint logit state"))),
    }
}

fn stage_seed(cfg: &RunConfig, stage: &str, method: Method, item: usize) -> u64 {
    derive_seed(cfg.seed, &format!("{stage}/{}", method.tag()), item as u64)
}

/// Runs `methods` over `set`. `stage` names the random streams, so the same
/// stage and item always see the same draws.
pub fn predict(ens: &Ensemble, cfg: &RunConfig, set: &LabeledSet, stage: &str, methods: &[Method]) -> Result<Vec<Predictions>> {
    let acts = activations(ens, set)?;
    let needs_state = methods.iter().any(|m| matches!(m, Method::InfoFusion | Method::Ella));
    let k = cfg.evaluation.samples;
    let t = ens.manifest.temperature;
    let per_item: Vec<Result<Vec<Vec<f64>>>> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let item_acts: Vec<Vec<DVector<f64>>> = acts.iter().map(|a| vec![a[i].clone()]).collect();
            let logits: Vec<DVector<f64>> = ens
                .posteriors
                .iter()
                .zip(&item_acts)
                .map(|(p, a)| p.model().logits_from_penultimate(&a[0], p.theta_hat_last().as_slice()))
                .collect();
            let state = if needs_state {
                Some(aggregate_activations(&ens.posteriors, &item_acts, cfg.ensemble.cross_policy)?)
            } else {
                None
            };
            methods
                .iter()
                .map(|&m| {
                    let seed = stage_seed(cfg, stage, m, i);
                    match m {
                        Method::Softmax => Ok(softmax(logits[0].as_slice())),
                        Method::TempScaling => Ok(softmax((&logits[0] / t).as_slice())),
                        Method::DeepEnsemble => ensemble_average(&logits.iter().map(|g| softmax(g.as_slice())).collect::<Vec<_>>()),
                        Method::Lla => {
                            let lg = match &state {
                                Some(s) => s.marginal(0, 0),
                                None => logit_gaussian_from_penultimate(&ens.posteriors[0], &item_acts[0][0], i, 0)?,
                            };
                            Ok(mc_pmf(&FusedGaussian::from(lg), k, seed, false, m)?.pmf)
                        }
                        Method::InfoFusion | Method::Ella => {
                            state_pmf(state.as_ref().expect("state built"), m, cfg.ensemble.weights, k, seed)
                        }
                        Method::ParamSpace => Ok(ens.posteriors[0].parameter_space_pmf(set.input(i), k, seed, false)?.pmf),
                        Method::Product | Method::LogLinear => {
                            Err(Error::Config(format!("{m} pools prediction dumps; use the fuse command")))
                        }
                    }
                })
                .collect()
        })
        .collect();
    let per_item = per_item.into_iter().collect::<Result<Vec<_>>>()?;
    let c = ens.posteriors.len();
    let classes = ens.num_classes();
    Ok(methods
        .iter()
        .enumerate()
        .map(|(j, &m)| {
            let sampled = matches!(m, Method::Lla | Method::InfoFusion | Method::Ella | Method::ParamSpace);
            let members = if matches!(m, Method::DeepEnsemble | Method::InfoFusion | Method::Ella) { c } else { 1 };
            Predictions {
                method: m,
                dims: [members, 1, classes],
                samples: sampled.then_some(k),
                labels: set.labels().to_vec(),
                pmfs: per_item.iter().map(|p| p[j].clone()).collect(),
                seeds: (0..set.len()).map(|i| sampled.then(|| stage_seed(cfg, stage, m, i))).collect(),
            }
        })
        .collect())
}

fn bins_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("method,bin,lower,upper,count,accuracy,confidence\n");
    for r in reports {
        let j = r.bins.len() as f64;
        for (b, bin) in r.bins.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{b},{},{},{},{},{}",
                r.method,
                b as f64 / j,
                (b + 1) as f64 / j,
                bin.count,
                bin.accuracy,
                bin.confidence
            );
        }
    }
    s
}

fn write_reports(dir: &Path, reports: &[EvalReport], preds: &[Predictions]) -> Result<()> {
    let mut summary = String::from(EvalReport::CSV_HEADER);
    summary.push('\n');
    for (r, p) in reports.iter().zip(preds) {
        summary.push_str(&r.csv_row());
        summary.push('\n');
        write_text(&dir.join(format!("report_{}.txt", r.method)), &r.to_kv())?;
        write_text(&dir.join(format!("predictions_{}.jsonl", r.method)), &p.to_jsonl())?;
    }
    write_text(&dir.join("summary.csv"), &summary)?;
    write_text(&dir.join("bins.csv"), &bins_csv(reports))
}

fn test_set(cfg: &RunConfig, data: &Datasets) -> LabeledSet {
    take(data.test.clone(), cfg.evaluation.limit)
}

/// Evaluates every configured method on the test set.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Vec<EvalReport>> {
    let ens = Ensemble::load(&cfg.out)?;
    let data = load_data(cfg)?;
    evaluate_with(cfg, &ens, &data)
}

pub fn evaluate_with(cfg: &RunConfig, ens: &Ensemble, data: &Datasets) -> Result<Vec<EvalReport>> {
    let test = test_set(cfg, data);
    let preds = predict(ens, cfg, &test, "test", &cfg.evaluation.methods)?;
    let reports = preds
        .iter()
        .map(|p| EvalReport::compute(p.method, "test", &p.pmfs, &p.labels, cfg.evaluation.bins))
        .collect::<Result<Vec<_>>>()?;
    write_reports(&cfg.out.join("eval"), &reports, &preds)?;
    Ok(reports)
}

/// Entropy histogram counts over `[0, ln M]`.
pub fn entropy_histogram(entropies: &[f64], classes: usize, bins: usize) -> Vec<usize> {
    let top = (classes as f64).ln();
    let mut counts = vec![0; bins];
    for &e in entropies {
        let b = ((e / top * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

/// Detection of the out-of-distribution set by predictive entropy, per method.
pub fn cmd_ood(cfg: &RunConfig) -> Result<Vec<(Method, DetectionReport)>> {
    let ens = Ensemble::load(&cfg.out)?;
    let data = load_data(cfg)?;
    ood_with(cfg, &ens, &data)
}

pub fn ood_with(cfg: &RunConfig, ens: &Ensemble, data: &Datasets) -> Result<Vec<(Method, DetectionReport)>> {
    let out_set = data
        .ood
        .as_ref()
        .ok_or_else(|| Error::Structure("the configured data has no out-of-distribution set".into()))?;
    let in_set = test_set(cfg, data);
    let out_set = take(out_set.clone(), cfg.evaluation.limit);
    if in_set.dim() != out_set.dim() {
        return Err(Error::Dimension {
            expected: in_set.dim(),
            got: out_set.dim(),
        });
    }
    let methods = &cfg.evaluation.methods;
    let p_in = predict(ens, cfg, &in_set, "test", methods)?;
    let p_out = predict(ens, cfg, &out_set, "ood", methods)?;
    let dir = cfg.out.join("ood");
    let classes = ens.num_classes();
    let hb = cfg.evaluation.histogram_bins;
    let top = (classes as f64).ln();
    let edges: Vec<f64> = (0..=hb).map(|b| top * b as f64 / hb as f64).collect();

    let mut summary = String::from(DetectionReport::CSV_HEADER);
    summary.push('\n');
    let mut ent_csv = String::from("method,set,item,entropy\n");
    let mut hist_csv = String::from("method,bin,lower,upper,in_count,out_count\n");
    let mut results = Vec::new();
    for (a, b) in p_in.iter().zip(&p_out) {
        let m = a.method;
        let e_in: Vec<f64> = a.pmfs.iter().map(|p| entropy(p)).collect();
        let e_out: Vec<f64> = b.pmfs.iter().map(|p| entropy(p)).collect();
        let rep = detection(&e_in, &e_out)?;
        summary.push_str(&rep.csv_row(m));
        summary.push('\n');
        for (set, es) in [("in", &e_in), ("out", &e_out)] {
            for (i, e) in es.iter().enumerate() {
                let _ = writeln!(ent_csv, "{m},{set},{i},{e}");
            }
        }
        let h_in = entropy_histogram(&e_in, classes, hb);
        let h_out = entropy_histogram(&e_out, classes, hb);
        for bin in 0..hb {
            let _ = writeln!(hist_csv, "{m},{bin},{},{},{},{}", edges[bin], edges[bin + 1], h_in[bin], h_out[bin]);
        }
        let svg = bar_chart(
            &format!("Predictive entropy, {m}"),
            "entropy",
            "count",
            &edges,
            &[
                ("in-distribution", h_in.iter().map(|&c| c as f64).collect()),
                ("out-of-distribution", h_out.iter().map(|&c| c as f64).collect()),
            ],
        );
        write_text(&dir.join(format!("histogram_{m}.svg")), &svg)?;
        write_text(&dir.join(format!("report_{m}.txt")), &rep.to_kv())?;
        write_text(&dir.join(format!("roc_{m}.csv")), &rep.roc_csv())?;
        write_text(&dir.join(format!("pr_{m}.csv")), &rep.pr_csv())?;
        results.push((m, rep));
    }
    write_text(&dir.join("summary.csv"), &summary)?;
    write_text(&dir.join("entropy.csv"), &ent_csv)?;
    write_text(&dir.join("histogram.csv"), &hist_csv)?;
    Ok(results)
}

/// One sequence: the cumulative fused PMF after each step and every frame's
/// own fused PMF.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRun {
    pub id: usize,
    pub true_class: usize,
    pub provenance: Vec<Provenance>,
    pub trace: Vec<Vec<f64>>,
    pub frames: Vec<Vec<f64>>,
}

impl SequenceRun {
    pub fn corrupted_frames(&self) -> Vec<usize> {
        self.provenance
            .iter()
            .enumerate()
            .filter(|(_, p)| **p != Provenance::Original)
            .map(|(l, _)| l)
            .collect()
    }

    /// Final fused argmax is the true class.
    pub fn recovered(&self) -> bool {
        argmax(self.trace.last().expect("nonempty trace")) == self.true_class
    }

    /// Some corrupted frame, fused on its own, picks a wrong class.
    pub fn corrupted_frame_wrong(&self) -> bool {
        self.corrupted_frames().iter().any(|&l| argmax(&self.frames[l]) != self.true_class)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSummary {
    pub runs: Vec<SequenceRun>,
    pub recovered: usize,
    pub corrupted_frame_wrong: usize,
}

/// Fuses `set`-drawn sequences step by step, using the configured method.
pub fn sequence_with(cfg: &RunConfig, ens: &Ensemble, set: &LabeledSet) -> Result<SequenceSummary> {
    let spec = &cfg.sequence;
    let classes = ens.num_classes();
    if let Some(c) = spec.class {
        if c >= classes {
            return Err(Error::contract(format!("sequence class {c} out of range")));
        }
    }
    let runs: Vec<Result<SequenceRun>> = (0..spec.count)
        .into_par_iter()
        .map(|s| {
            let class = spec.class.unwrap_or(s % classes);
            let mut seq = build_sequence(set, class, spec.length, Corruption::None, derive_seed(cfg.seed, "sequence", s as u64))?;
            if spec.corruption != Corruption::None {
                seq.corrupt_element(spec.corrupt_index, spec.corruption, derive_seed(cfg.seed, "corrupt", s as u64))?;
            }
            let frames_set = LabeledSet::new(
                seq.inputs().concat(),
                seq.dim(),
                vec![class; seq.len()],
                classes,
            )?;
            let acts = activations(ens, &frames_set)?;
            let stage = format!("sequence/{s}");
            // Draws are keyed by the window, so frame 0 and step 1 coincide.
            let fuse = |range: std::ops::Range<usize>| -> Result<Vec<f64>> {
                let sub: Vec<Vec<DVector<f64>>> = acts.iter().map(|a| a[range.clone()].to_vec()).collect();
                let state = aggregate_activations(&ens.posteriors, &sub, cfg.ensemble.cross_policy)?;
                let seed = derive_seed(cfg.seed, &stage, ((range.start as u64) << 32) | range.end as u64);
                state_pmf(&state, spec.method, cfg.ensemble.weights, cfg.evaluation.samples, seed)
            };
            let trace = (1..=seq.len()).map(|l| fuse(0..l)).collect::<Result<Vec<_>>>()?;
            let frames = (0..seq.len()).map(|l| fuse(l..l + 1)).collect::<Result<Vec<_>>>()?;
            Ok(SequenceRun {
                id: s,
                true_class: class,
                provenance: seq.provenance().to_vec(),
                trace,
                frames,
            })
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let recovered = runs.iter().filter(|r| r.recovered()).count();
    let corrupted_frame_wrong = runs.iter().filter(|r| r.corrupted_frame_wrong()).count();
    Ok(SequenceSummary {
        runs,
        recovered,
        corrupted_frame_wrong,
    })
}

fn provenance_tag(p: &Provenance) -> String {
    match p {
        Provenance::Original => "original".into(),
        Provenance::Corrupted { kind, magnitude } => {
            format!("{}:{magnitude}", serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
        }
    }
}

pub fn cmd_sequence(cfg: &RunConfig) -> Result<SequenceSummary> {
    let ens = Ensemble::load(&cfg.out)?;
    let data = load_data(cfg)?;
    let summary = sequence_with(cfg, &ens, &data.test)?;
    write_sequence(cfg, &summary, ens.num_classes())?;
    Ok(summary)
}

pub fn write_sequence(cfg: &RunConfig, summary: &SequenceSummary, classes: usize) -> Result<()> {
    let dir = cfg.out.join("sequence");
    let probs: String = (0..classes).map(|m| format!(",p_{m}")).collect();
    let mut trace = format!("sequence,step,true_class{probs},argmax\n");
    let mut frames = format!("sequence,frame,provenance,true_class{probs},argmax\n");
    let row = |p: &[f64]| -> String { p.iter().map(|v| format!(",{v}")).collect() };
    for r in &summary.runs {
        for (l, p) in r.trace.iter().enumerate() {
            let _ = writeln!(trace, "{},{},{}{},{}", r.id, l + 1, r.true_class, row(p), argmax(p));
        }
        for (l, p) in r.frames.iter().enumerate() {
            let _ = writeln!(
                frames,
                "{},{},{},{}{},{}",
                r.id,
                l,
                provenance_tag(&r.provenance[l]),
                r.true_class,
                row(p),
                argmax(p)
            );
        }
    }
    let csv = format!(
        "sequences,length,method,recovered,corrupted_frame_wrong\n{},{},{},{},{}\n",
        summary.runs.len(),
        cfg.sequence.length,
        cfg.sequence.method,
        summary.recovered,
        summary.corrupted_frame_wrong
    );
    write_text(&dir.join("trace.csv"), &trace)?;
    write_text(&dir.join("frames.csv"), &frames)?;
    write_text(&dir.join("summary.csv"), &csv)?;
    if let Some(r) = summary.runs.first() {
        let y = r.true_class;
        let svg = line_chart(
            &format!("Sequence 0, true class {y}"),
            "step",
            "probability of true class",
            &[
                Series {
                    label: "cumulative",
                    points: r.trace.iter().enumerate().map(|(l, p)| ((l + 1) as f64, p[y])).collect(),
                },
                Series {
                    label: "frame alone",
                    points: r.frames.iter().enumerate().map(|(l, p)| ((l + 1) as f64, p[y])).collect(),
                },
            ],
            Some((0.0, 1.0)),
        );
        write_text(&dir.join("trace_0.svg"), &svg)?;
    }
    Ok(())
}

fn rule_method(rule: FuseRule) -> Method {
    match rule {
        FuseRule::Product => Method::Product,
        FuseRule::LogLinear => Method::LogLinear,
        FuseRule::Average => Method::DeepEnsemble,
    }
}

/// Combines item-aligned prediction dumps with a PMF pooling rule.
pub fn fuse_dumps(inputs: &[PathBuf], rule: FuseRule, weights: Option<&[f64]>) -> Result<Predictions> {
    if inputs.is_empty() {
        return Err(Error::Config("fuse.inputs lists no prediction dumps".into()));
    }
    let dumps = inputs.iter().map(|p| Predictions::read(p)).collect::<Result<Vec<_>>>()?;
    for (d, path) in dumps.iter().zip(inputs).skip(1) {
        if d.labels != dumps[0].labels {
            return Err(Error::Structure(format!(
                "{} is not aligned with {} (item count or labels differ)",
                path.display(),
                inputs[0].display()
            )));
        }
    }
    let uniform = vec![1.0 / dumps.len() as f64; dumps.len()];
    let w = weights.unwrap_or(&uniform);
    let pmfs = (0..dumps[0].pmfs.len())
        .map(|i| {
            let item: Vec<Vec<f64>> = dumps.iter().map(|d| d.pmfs[i].clone()).collect();
            match rule {
                FuseRule::Product => product_fusion(&item),
                FuseRule::LogLinear => log_linear_pool(&item, w),
                FuseRule::Average => ensemble_average(&item),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Predictions {
        method: rule_method(rule),
        dims: [dumps.len(), 1, dumps[0].dims[2]],
        samples: None,
        labels: dumps[0].labels.clone(),
        seeds: vec![None; pmfs.len()],
        pmfs,
    })
}

pub fn cmd_fuse(cfg: &RunConfig) -> Result<EvalReport> {
    let preds = fuse_dumps(&cfg.fuse.inputs, cfg.fuse.rule, cfg.fuse.weights.as_deref())?;
    let report = EvalReport::compute(preds.method, "fused", &preds.pmfs, &preds.labels, cfg.evaluation.bins)?;
    write_reports(&cfg.out.join("fuse"), std::slice::from_ref(&report), std::slice::from_ref(&preds))?;
    Ok(report)
}
