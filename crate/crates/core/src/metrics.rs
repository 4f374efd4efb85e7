//! Calibration, scoring rules, entropy and out-of-distribution detection.
//!
//! # Key-value report format
//!
//! [`EvalReport::to_kv`] and [`DetectionReport::to_kv`] write one `key = value`
//! pair per line in a fixed key order. Floats use Rust's shortest round-trip
//! formatting, so parsing a report back gives identical values. Bins are
//! written as `bin.<j> = <count> <accuracy> <confidence>` and curve points as
//! `roc.<i> = <p_fa> <p_d>` / `pr.<i> = <recall> <precision>`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fusion::Method;
use crate::network::{argmax, log_sum_exp};

/// Probability floor used when the true class gets zero mass.
pub const NLL_FLOOR: f64 = 1e-300;

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            let mut g: Vec<f64> = (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect();
            g[0] = lo;
            g[n - 1] = hi;
            g
        }
    }
}

fn check_preds(preds: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension {
            expected: preds.len(),
            got: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::contract("no predictions"));
    }
    let m = preds[0].len();
    for (p, &y) in preds.iter().zip(labels) {
        if p.len() != m {
            return Err(Error::Dimension { expected: m, got: p.len() });
        }
        if y >= m {
            return Err(Error::contract(format!("label {y} out of range for {m} classes")));
        }
        if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Domain("prediction is not a PMF".into()));
        }
    }
    Ok(m)
}

/// Confidence histogram bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// `Σ_j (|B_j|/N)·|acc − conf|`, a fraction in `[0, 1]`.
    pub ece: f64,
    /// `Σ_j |acc − conf| / |B_j|` over nonempty bins.
    pub ece_paper_literal: f64,
    pub accuracy: f64,
    pub bins: Vec<Bin>,
}

/// Index of the bin `[j/J, (j+1)/J)` holding `conf`; the last bin is closed.
pub fn bin_index(conf: f64, bins: usize) -> usize {
    let jf = bins as f64;
    let mut j = ((conf * jf).floor().max(0.0) as usize).min(bins - 1);
    while j > 0 && conf < j as f64 / jf {
        j -= 1;
    }
    while j + 1 < bins && conf >= (j + 1) as f64 / jf {
        j += 1;
    }
    j
}

pub fn calibration(preds: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<Calibration> {
    if bins == 0 {
        return Err(Error::contract("need at least one bin"));
    }
    check_preds(preds, labels)?;
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hits = 0usize;
    for (p, &y) in preds.iter().zip(labels) {
        let k = argmax(p);
        let conf = p[k];
        let j = bin_index(conf, bins);
        count[j] += 1;
        conf_sum[j] += conf;
        if k == y {
            correct[j] += 1;
            hits += 1;
        }
    }
    let n = preds.len() as f64;
    let mut ece = 0.0;
    let mut literal = 0.0;
    let mut table = Vec::with_capacity(bins);
    for j in 0..bins {
        if count[j] == 0 {
            table.push(Bin {
                count: 0,
                accuracy: 0.0,
                confidence: 0.0,
            });
            continue;
        }
        let c = count[j] as f64;
        let acc = correct[j] as f64 / c;
        let conf = conf_sum[j] / c;
        let gap = (acc - conf).abs();
        ece += c / n * gap;
        literal += gap / c;
        table.push(Bin {
            count: count[j],
            accuracy: acc,
            confidence: conf,
        });
    }
    Ok(Calibration {
        ece,
        ece_paper_literal: literal,
        accuracy: hits as f64 / n,
        bins: table,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub mean_nll: f64,
    /// `Σ ln p̂(y|x)`, the positive-is-better total log-likelihood.
    pub total_ll: f64,
    pub brier: f64,
    /// Some true-class probability was zero and got floored.
    pub nll_clamped: bool,
}

pub fn scores(preds: &[Vec<f64>], labels: &[usize]) -> Result<Scores> {
    check_preds(preds, labels)?;
    let mut ll = 0.0;
    let mut brier = 0.0;
    let mut clamped = false;
    for (p, &y) in preds.iter().zip(labels) {
        let py = if p[y] > 0.0 {
            p[y]
        } else {
            clamped = true;
            NLL_FLOOR
        };
        ll += py.ln();
        for (m, v) in p.iter().enumerate() {
            let t = if m == y { 1.0 } else { 0.0 };
            brier += (t - v) * (t - v);
        }
    }
    let n = preds.len() as f64;
    Ok(Scores {
        mean_nll: -ll / n,
        total_ll: ll,
        brier: brier / n,
        nll_clamped: clamped,
    })
}

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(pmf: &[f64]) -> f64 {
    -pmf.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Everything reported for one method on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: Method,
    pub dataset: String,
    pub n: usize,
    pub accuracy: f64,
    pub mean_nll: f64,
    pub total_ll: f64,
    pub brier: f64,
    pub ece: f64,
    pub ece_paper_literal: f64,
    pub mean_entropy: f64,
    pub nll_clamped: bool,
    pub bins: Vec<Bin>,
}

impl EvalReport {
    pub fn compute(method: Method, dataset: &str, preds: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<Self> {
        let cal = calibration(preds, labels, bins)?;
        let sc = scores(preds, labels)?;
        let mean_entropy = preds.iter().map(|p| entropy(p)).sum::<f64>() / preds.len() as f64;
        Ok(EvalReport {
            method,
            dataset: dataset.to_string(),
            n: preds.len(),
            accuracy: cal.accuracy,
            mean_nll: sc.mean_nll,
            total_ll: sc.total_ll,
            brier: sc.brier,
            ece: cal.ece,
            ece_paper_literal: cal.ece_paper_literal,
            mean_entropy,
            nll_clamped: sc.nll_clamped,
            bins: cal.bins,
        })
    }

    /// ECE on the 0–100 scale.
    pub fn ece_percent(&self) -> f64 {
        self.ece * 100.0
    }

    pub const CSV_HEADER: &'static str =
        "method,dataset,n,accuracy,mean_nll,total_ll,brier,ece,ece_percent,ece_paper_literal,mean_entropy,nll_clamped";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.method,
            self.dataset,
            self.n,
            self.accuracy,
            self.mean_nll,
            self.total_ll,
            self.brier,
            self.ece,
            self.ece_percent(),
            self.ece_paper_literal,
            self.mean_entropy,
            self.nll_clamped
        )
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method = {}", self.method);
        let _ = writeln!(s, "dataset = {}", self.dataset);
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "accuracy = {}", self.accuracy);
        let _ = writeln!(s, "mean_nll = {}", self.mean_nll);
        let _ = writeln!(s, "total_ll = {}", self.total_ll);
        let _ = writeln!(s, "brier = {}", self.brier);
        let _ = writeln!(s, "ece = {}", self.ece);
        let _ = writeln!(s, "ece_percent = {}", self.ece_percent());
        let _ = writeln!(s, "ece_paper_literal = {}", self.ece_paper_literal);
        let _ = writeln!(s, "mean_entropy = {}", self.mean_entropy);
        let _ = writeln!(s, "nll_clamped = {}", self.nll_clamped);
        for (j, b) in self.bins.iter().enumerate() {
            let _ = writeln!(s, "bin.{j} = {} {} {}", b.count, b.accuracy, b.confidence);
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let bins = indexed(&kv, "bin.")?
            .into_iter()
            .map(|v| {
                let parts: Vec<&str> = v.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(kv_error(format!("bad bin entry '{v}'")));
                }
                Ok(Bin {
                    count: parse(parts[0])?,
                    accuracy: parse(parts[1])?,
                    confidence: parse(parts[2])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let method = get(&kv, "method")?;
        Ok(EvalReport {
            method: Method::from_tag(method).ok_or_else(|| kv_error(format!("unknown method '{method}'")))?,
            dataset: get(&kv, "dataset")?.to_string(),
            n: parse(get(&kv, "n")?)?,
            accuracy: parse(get(&kv, "accuracy")?)?,
            mean_nll: parse(get(&kv, "mean_nll")?)?,
            total_ll: parse(get(&kv, "total_ll")?)?,
            brier: parse(get(&kv, "brier")?)?,
            ece: parse(get(&kv, "ece")?)?,
            ece_paper_literal: parse(get(&kv, "ece_paper_literal")?)?,
            mean_entropy: parse(get(&kv, "mean_entropy")?)?,
            nll_clamped: parse(get(&kv, "nll_clamped")?)?,
            bins,
        })
    }
}

/// Detection of out-of-distribution inputs from a score where lower means
/// in-distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub auroc: f64,
    pub aupr: f64,
    /// `Σ in − Σ out` of the scores.
    pub entropy_gap_total: f64,
    /// `mean(in) − mean(out)`.
    pub entropy_gap_mean: f64,
    /// `(P_FA, P_D)` from `(0, 0)` to `(1, 1)`.
    pub roc_points: Vec<(f64, f64)>,
    /// `(recall, precision)`, starting at recall 0.
    pub pr_points: Vec<(f64, f64)>,
}

pub fn detection(in_scores: &[f64], out_scores: &[f64]) -> Result<DetectionReport> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(Error::contract("detection needs in- and out-of-distribution scores"));
    }
    if in_scores.iter().chain(out_scores).any(|v| !v.is_finite()) {
        return Err(Error::Domain("detection scores must be finite".into()));
    }
    let mut all: Vec<(f64, bool)> = in_scores
        .iter()
        .map(|&s| (s, true))
        .chain(out_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let (n_in, n_out) = (in_scores.len() as u64, out_scores.len() as u64);
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut roc = vec![(0.0, 0.0)];
    let mut pr = Vec::new();
    // Twice the ROC area in units of one (in, out) pair.
    let mut area2: u128 = 0;
    let mut aupr = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        let (tp0, fp0) = (tp, fp);
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) as u128 * (tp + tp0) as u128;
        roc.push((fp as f64 / n_out as f64, tp as f64 / n_in as f64));
        let recall = tp as f64 / n_in as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        if pr.is_empty() {
            pr.push((0.0, precision));
        }
        pr.push((recall, precision));
        aupr += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    let auroc = area2 as f64 / (2.0 * n_in as f64 * n_out as f64);
    let sum_in: f64 = in_scores.iter().sum();
    let sum_out: f64 = out_scores.iter().sum();
    Ok(DetectionReport {
        auroc,
        aupr,
        entropy_gap_total: sum_in - sum_out,
        entropy_gap_mean: sum_in / n_in as f64 - sum_out / n_out as f64,
        roc_points: roc,
        pr_points: pr,
    })
}

impl DetectionReport {
    pub const CSV_HEADER: &'static str = "method,auroc,aupr,entropy_gap_total,entropy_gap_mean";

    pub fn csv_row(&self, method: Method) -> String {
        format!(
            "{},{},{},{},{}",
            method, self.auroc, self.aupr, self.entropy_gap_total, self.entropy_gap_mean
        )
    }

    /// `p_fa,p_d` lines with a header.
    pub fn roc_csv(&self) -> String {
        let mut s = String::from("p_fa,p_d\n");
        for (x, y) in &self.roc_points {
            let _ = writeln!(s, "{x},{y}");
        }
        s
    }

    /// `recall,precision` lines with a header.
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("recall,precision\n");
        for (x, y) in &self.pr_points {
            let _ = writeln!(s, "{x},{y}");
        }
        s
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "auroc = {}", self.auroc);
        let _ = writeln!(s, "aupr = {}", self.aupr);
        let _ = writeln!(s, "entropy_gap_total = {}", self.entropy_gap_total);
        let _ = writeln!(s, "entropy_gap_mean = {}", self.entropy_gap_mean);
        for (i, (x, y)) in self.roc_points.iter().enumerate() {
            let _ = writeln!(s, "roc.{i} = {x} {y}");
        }
        for (i, (x, y)) in self.pr_points.iter().enumerate() {
            let _ = writeln!(s, "pr.{i} = {x} {y}");
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let pairs = |prefix: &str| -> Result<Vec<(f64, f64)>> {
            indexed(&kv, prefix)?
                .into_iter()
                .map(|v| {
                    let parts: Vec<&str> = v.split_whitespace().collect();
                    if parts.len() != 2 {
                        return Err(kv_error(format!("bad point '{v}'")));
                    }
                    Ok((parse(parts[0])?, parse(parts[1])?))
                })
                .collect()
        };
        Ok(DetectionReport {
            auroc: parse(get(&kv, "auroc")?)?,
            aupr: parse(get(&kv, "aupr")?)?,
            entropy_gap_total: parse(get(&kv, "entropy_gap_total")?)?,
            entropy_gap_mean: parse(get(&kv, "entropy_gap_mean")?)?,
            roc_points: pairs("roc.")?,
            pr_points: pairs("pr.")?,
        })
    }
}

fn kv_error(msg: String) -> Error {
    Error::Structure(format!("report: {msg}"))
}

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| kv_error(format!("malformed line '{line}'")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn get<'a>(kv: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    kv.get(key).map(String::as_str).ok_or_else(|| kv_error(format!("missing key '{key}'")))
}

fn indexed<'a>(kv: &'a BTreeMap<String, String>, prefix: &str) -> Result<Vec<&'a str>> {
    let mut items: Vec<(usize, &str)> = kv
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|i| (i, v.as_str())))
        .map(|(i, v)| i.parse::<usize>().map(|i| (i, v)).map_err(|_| kv_error(format!("bad index '{i}'"))))
        .collect::<Result<_>>()?;
    items.sort_by_key(|(i, _)| *i);
    if items.iter().enumerate().any(|(pos, (i, _))| pos != *i) {
        return Err(kv_error(format!("gap in '{prefix}' entries")));
    }
    Ok(items.into_iter().map(|(_, v)| v).collect())
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| kv_error(format!("cannot parse '{s}'")))
}

/// Mean NLL of `softmax(g / t)`.
pub fn tempered_nll(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let mut total = 0.0;
    let mut z = Vec::new();
    for (g, &y) in logits.iter().zip(labels) {
        z.clear();
        z.extend(g.iter().map(|v| v / t));
        total += log_sum_exp(&z) - z[y];
    }
    total / logits.len() as f64
}

/// Temperature on `grid` minimizing validation NLL; ties go to the smallest.
pub fn fit_temperature(logits: &[Vec<f64>], labels: &[usize], grid: &[f64]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::contract("temperature fit needs matching, nonempty logits and labels"));
    }
    if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::contract("temperature grid must be nonempty and positive"));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (f64::INFINITY, sorted[0]);
    for &t in &sorted {
        let nll = tempered_nll(logits, labels, t);
        if nll < best.0 {
            best = (nll, t);
        }
    }
    Ok(best.1)
}

/// Default temperature grid: 100 log-spaced points on `[0.05, 20]`.
pub fn default_temperature_grid() -> Vec<f64> {
    log_grid(0.05, 20.0, 100)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_examples() {
        let c = calibration(&[vec![0.8, 0.2], vec![0.8, 0.2]], &[0, 1], 10).unwrap();
        assert!((c.ece - 0.3).abs() < 1e-12);
        assert_eq!(c.bins[8].count, 2);
        assert_eq!(c.bins[8].accuracy, 0.5);

        let perfect = calibration(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1], 10).unwrap();
        assert_eq!((perfect.ece, perfect.accuracy), (0.0, 1.0));
        assert_eq!(perfect.bins[9].count, 2);

        let uniform = vec![vec![0.1; 10]; 4];
        let u = calibration(&uniform, &[0, 1, 2, 3], 10).unwrap();
        assert_eq!(u.bins[1].count, 4);
        assert_eq!(u.bins[0].count, 0);
        assert!(calibration(&uniform, &[0], 10).is_err());
    }

    #[test]
    fn bin_edges() {
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.3, 10), 3);
        assert_eq!(bin_index(f64::from_bits(0.3f64.to_bits() - 1), 10), 2);
        assert_eq!(bin_index(0.7, 1), 0);
    }

    #[test]
    fn scores_examples() {
        let s = scores(&[vec![0.5, 0.5]], &[0]).unwrap();
        assert!((s.mean_nll - 2f64.ln()).abs() < 1e-15);
        assert!((s.brier - 0.5).abs() < 1e-15);
        let u = scores(&[vec![0.1; 10]], &[3]).unwrap();
        assert!((u.mean_nll - 10f64.ln()).abs() < 1e-12);
        assert!((u.brier - 0.9).abs() < 1e-12);
        let z = scores(&[vec![1.0, 0.0]], &[1]).unwrap();
        assert!(z.nll_clamped && z.mean_nll.is_finite());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
        assert!((entropy(&[0.1; 10]) - 10f64.ln()).abs() < 1e-12);
        assert!((entropy(&[0.75, 0.25]) - 0.5623351446188083).abs() < 1e-12);
    }

    #[test]
    fn detection_examples() {
        let d = detection(&[0.1, 0.4], &[0.3, 0.9]).unwrap();
        assert_eq!(d.auroc, 0.75);
        let p = detection(&[0.1, 0.2], &[0.5, 0.6]).unwrap();
        assert_eq!((p.auroc, p.aupr), (1.0, 1.0));
        let same = detection(&[0.1, 0.5, 0.5], &[0.5, 0.1, 0.5]).unwrap();
        assert_eq!(same.auroc, 0.5);
        assert_eq!(*same.roc_points.last().unwrap(), (1.0, 1.0));
        assert!(detection(&[], &[1.0]).is_err());
    }

    #[test]
    fn temperature_recovers_scale() {
        let logits: Vec<Vec<f64>> = (0..50).map(|i| vec![0.0, (i % 7) as f64 * 0.3 - 1.0]).collect();
        let labels: Vec<usize> = (0..50).map(|i| (i % 3 == 0) as usize).collect();
        let grid = default_temperature_grid();
        let t = fit_temperature(&logits, &labels, &grid).unwrap();
        assert!(grid.contains(&t));
        assert!(fit_temperature(&[], &[], &grid).is_err());
        assert_eq!(grid.len(), 100);
        assert_eq!((grid[0], grid[99]), (0.05, 20.0));
    }

    #[test]
    fn kv_round_trips() {
        let preds = vec![vec![0.7, 0.3], vec![0.4, 0.6], vec![0.5, 0.5]];
        let r = EvalReport::compute(Method::Ella, "blobs", &preds, &[0, 0, 1], 5).unwrap();
        assert_eq!(EvalReport::from_kv(&r.to_kv()).unwrap(), r);
        let d = detection(&[0.1, 0.4, 0.2], &[0.3, 0.9]).unwrap();
        assert_eq!(DetectionReport::from_kv(&d.to_kv()).unwrap(), d);
        assert!(EvalReport::from_kv("method = ella\n").is_err());
    }
}
