//! Load MNIST from IDX files, train one small MLP on a subset and evaluate
//! its last-layer Laplace predictive on the test split.
//!
//! cargo run --release --example mnist_idx -- [data/mnist]

use std::path::PathBuf;

use lla_fusion::dataset::load_idx;
use lla_fusion::delta::logit_gaussian;
use lla_fusion::fusion::{mc_pmf, FusedGaussian, Method};
use lla_fusion::laplace::LaplacePosterior;
use lla_fusion::metrics::EvalReport;
use lla_fusion::network::{train_map, TrainConfig};

fn main() -> lla_fusion::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data/mnist"));
    let train = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?.slice(0, 5000);
    let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?.slice(0, 1000);
    println!("{} train / {} test images of {} pixels", train.len(), test.len(), train.dim());

    let cfg = TrainConfig {
        epochs: 3,
        seed: 1,
        ..TrainConfig::default()
    };
    let (model, report) = train_map(&train, &[784, 100, 50, 10], &cfg)?;
    println!("train accuracy {:.4}", report.train_accuracy);
    let post = LaplacePosterior::fit(&model, &train, 1.0, 1.0)?;

    let mut point = Vec::new();
    let mut lla = Vec::new();
    for (i, x) in test.inputs().enumerate() {
        point.push(model.predict(x)?);
        let lg = logit_gaussian(&post, x, i, 0)?;
        lla.push(mc_pmf(&FusedGaussian::from(lg), 500, i as u64, false, Method::Lla)?.pmf);
    }
    for (m, preds) in [(Method::Softmax, &point), (Method::Lla, &lla)] {
        let r = EvalReport::compute(m, "mnist", preds, test.labels(), 10)?;
        println!("{:<8} acc {:.4}  nll {:.4}  ECE {:.3}%", m.tag(), r.accuracy, r.mean_nll, r.ece_percent());
    }
    Ok(())
}
