//! Entropy-based detection of shifted inputs, per method, through the
//! pipeline API. Writes CSV and SVG output under the temp directory.
//!
//! cargo run --release --example ood_detection

use lla_fusion::config::RunConfig;
use lla_fusion::fusion::Method;
use lla_fusion::pipeline::{load_data, ood_with, Ensemble};

fn main() -> lla_fusion::Result<()> {
    let mut cfg = RunConfig::blobs(5, std::env::temp_dir().join("lla_fusion_ood"));
    cfg.train.epochs = 20;
    cfg.train.learning_rate = 5e-3;
    cfg.train.prior_variance = 100.0;
    cfg.evaluation.methods = vec![
        Method::Softmax,
        Method::TempScaling,
        Method::DeepEnsemble,
        Method::Lla,
        Method::InfoFusion,
        Method::Ella,
    ];
    cfg.evaluation.samples = 500;

    let data = load_data(&cfg)?;
    let ens = Ensemble::train(&cfg, &data)?;
    println!("{:<14} {:>7} {:>7} {:>12}", "method", "AUROC", "AUPR", "entropy gap");
    for (m, r) in ood_with(&cfg, &ens, &data)? {
        println!("{:<14} {:>7.4} {:>7.4} {:>12.4}", m.tag(), r.auroc, r.aupr, r.entropy_gap_mean);
    }
    println!("histograms and ROC/PR curves in {}", cfg.out.join("ood").display());
    Ok(())
}
