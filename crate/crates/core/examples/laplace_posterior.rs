//! Fit the last-layer Laplace posterior, draw parameters from it and
//! round-trip it through its file format.
//!
//! cargo run --example laplace_posterior

use lla_fusion::dataset::make_blobs;
use lla_fusion::laplace::{fisher_information, LaplacePosterior};
use lla_fusion::network::{train_map, TrainConfig};

fn main() -> lla_fusion::Result<()> {
    let data = make_blobs(3, 150, 2, 5.0, 3)?;
    let cfg = TrainConfig {
        epochs: 15,
        learning_rate: 5e-3,
        seed: 1,
        ..TrainConfig::default()
    };
    let (model, _) = train_map(&data, &[2, 12, 3], &cfg)?;

    let fisher = fisher_information(&model, &data)?;
    println!("last layer: d = {}, Fisher trace {:.2}", fisher.nrows(), fisher.trace());

    let post = LaplacePosterior::fit(&model, &data, 1.0, 1.0)?;
    let diag = post.cov_theta().diagonal();
    println!(
        "posterior variances: min {:.2e}, max {:.2e} (prior 1.0)",
        diag.min(),
        diag.max()
    );

    let draws = post.sample_parameters(2000, 11)?;
    let mean = draws.iter().fold(post.theta_hat_last() * 0.0, |acc, t| acc + t) / draws.len() as f64;
    println!("|sample mean - MAP| = {:.3e}", (mean - post.theta_hat_last()).abs().max());

    let inflated = post.with_t_theta(4.0)?;
    println!("T_theta 4 scales the trace by {:.3}", inflated.cov_theta().trace() / post.cov_theta().trace());

    let dir = std::env::temp_dir().join("lla_fusion_example");
    std::fs::create_dir_all(&dir).map_err(|e| lla_fusion::Error::Structure(e.to_string()))?;
    let path = dir.join("member.post");
    post.save(&path)?;
    let back = LaplacePosterior::load(&model, &path)?;
    println!("reloaded from {}: identical bytes {}", path.display(), back.to_bytes() == post.to_bytes());
    Ok(())
}
