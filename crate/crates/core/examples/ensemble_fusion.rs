//! Five independently trained members, each with its own Laplace posterior,
//! combined in logit space (information fusion, eLLA) and in PMF space
//! (average, product, log-linear pool).
//!
//! cargo run --release --example ensemble_fusion

use lla_fusion::aggregate::{aggregate, CrossPolicy};
use lla_fusion::dataset::make_blobs;
use lla_fusion::fusion::*;
use lla_fusion::laplace::LaplacePosterior;
use lla_fusion::network::{train_map, TrainConfig};
use lla_fusion::rng::derive_seed;

fn main() -> lla_fusion::Result<()> {
    let data = make_blobs(3, 150, 2, 5.0, 9)?;
    let posts = (0..5)
        .map(|c| {
            let cfg = TrainConfig {
                epochs: 15,
                learning_rate: 5e-3,
                seed: derive_seed(9, "member", c),
                ..TrainConfig::default()
            };
            let (model, _) = train_map(&data, &[2, 16, 3], &cfg)?;
            LaplacePosterior::fit(&model, &data, 1.0, 1.0)
        })
        .collect::<lla_fusion::Result<Vec<_>>>()?;

    let k = 20_000;
    for x in [[0.0, 0.0], [1.5, 1.0], [12.0, -3.0]] {
        let state = aggregate(&posts, &[&x], CrossPolicy::Zero)?;
        let members: Vec<Vec<f64>> = posts.iter().map(|p| p.model().predict(&x)).collect::<Result<_, _>>()?;
        println!("input {x:?}");
        for (c, p) in members.iter().enumerate() {
            println!("  member {c}        {p:.3?}");
        }
        println!("  average         {:.3?}", ensemble_average(&members)?);
        println!("  product         {:.3?}", product_fusion(&members)?);
        println!("  log-linear      {:.3?}", log_linear_pool(&members, &[0.2; 5])?);
        let fused = fuse_information(&state)?;
        println!("  info fusion     {:.3?}", mc_pmf(&fused, k, 1, false, Method::InfoFusion)?.pmf);
        println!("  eLLA uniform    {:.3?}", ella_pmf(&state, &uniform_weights(&state), k, 2, false)?.pmf);
        let w = inverse_trace_weights(&state)?;
        println!("  eLLA inv-trace  {:.3?}  weights {w:.2?}", ella_pmf(&state, &w, k, 2, false)?.pmf);

        let shared = aggregate(&posts, &[&x], CrossPolicy::SharedScalar { rho: 0.5 })?;
        println!("  eLLA rho 0.5    {:.3?}", ella_pmf(&shared, &uniform_weights(&shared), k, 2, false)?.pmf);
    }
    Ok(())
}
