//! Compare the delta-method logit Gaussian with brute-force sampling of the
//! last-layer parameters, for a few inputs and covariance scales.
//!
//! cargo run --release --example delta_vs_sampling

use lla_fusion::dataset::make_blobs;
use lla_fusion::delta::logit_gaussian;
use lla_fusion::fusion::{mc_pmf, FusedGaussian, Method};
use lla_fusion::laplace::LaplacePosterior;
use lla_fusion::network::{train_map, TrainConfig};

fn main() -> lla_fusion::Result<()> {
    let data = make_blobs(3, 100, 2, 4.0, 5)?;
    let cfg = TrainConfig {
        epochs: 10,
        learning_rate: 5e-3,
        seed: 2,
        ..TrainConfig::default()
    };
    let (model, _) = train_map(&data, &[2, 16, 16, 3], &cfg)?;
    let post = LaplacePosterior::fit(&model, &data, 1.0, 1.0)?;

    let k = 50_000;
    println!("scale  input          delta PMF                 sampled PMF               TV");
    for scale in [1e-3, 1e-1, 1.0] {
        let p = post.scaled(scale)?;
        for x in [[0.0, 0.0], [2.0, -1.0], [8.0, 8.0]] {
            let lg = logit_gaussian(&p, &x, 0, 0)?;
            let delta = mc_pmf(&FusedGaussian::from(lg), k, 1, false, Method::Lla)?.pmf;
            let sampled = p.parameter_space_pmf(&x, k, 2, false)?.pmf;
            let tv: f64 = delta.iter().zip(&sampled).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
            println!("{scale:<6} {:<14} {delta:.3?}  {sampled:.3?}  {tv:.4}", format!("{x:?}"));
        }
    }
    Ok(())
}
