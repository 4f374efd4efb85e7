//! Train a small MLP on Gaussian blobs and report train/test accuracy.
//!
//! cargo run --example train_blobs

use lla_fusion::dataset::make_blobs;
use lla_fusion::network::{argmax, train_map, TrainConfig};

fn main() -> lla_fusion::Result<()> {
    let train = make_blobs(3, 200, 2, 6.0, 1)?;
    let test = make_blobs(3, 100, 2, 6.0, 2)?;
    let cfg = TrainConfig {
        epochs: 20,
        learning_rate: 5e-3,
        seed: 7,
        ..TrainConfig::default()
    };
    let (model, report) = train_map(&train, &[2, 16, 16, 3], &cfg)?;
    println!(
        "{} steps, final loss {:.4}, train accuracy {:.3}",
        report.steps, report.final_loss, report.train_accuracy
    );

    let mut hits = 0;
    for (x, &y) in test.inputs().zip(test.labels()) {
        if argmax(&model.predict(x)?) == y {
            hits += 1;
        }
    }
    println!("test accuracy {:.3}", hits as f64 / test.len() as f64);
    println!("logits at the origin: {:.3?}", model.logits(&[0.0, 0.0])?.as_slice());
    Ok(())
}
