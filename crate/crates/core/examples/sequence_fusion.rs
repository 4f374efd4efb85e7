//! Cumulative fusion over a sequence of same-class inputs where one frame is
//! erased. Prints the per-step trace next to each frame's own prediction.
//!
//! cargo run --release --example sequence_fusion

use lla_fusion::config::{DataSpec, RunConfig};
use lla_fusion::dataset::Corruption;
use lla_fusion::fusion::Method;
use lla_fusion::network::argmax;
use lla_fusion::pipeline::{load_data, sequence_with, Ensemble};

fn main() -> lla_fusion::Result<()> {
    let mut cfg = RunConfig::blobs(7, std::env::temp_dir().join("lla_fusion_sequence"));
    cfg.data = DataSpec::Blobs {
        classes: 3,
        dim: 2,
        separation: 10.0,
        train_per_class: 200,
        validation_per_class: 50,
        test_per_class: 100,
        ood_shift: 30.0,
    };
    cfg.train.epochs = 20;
    cfg.train.learning_rate = 5e-3;
    cfg.ensemble.size = 5;
    cfg.sequence.count = 20;
    cfg.sequence.corruption = Corruption::Erase { fraction: 1.0 };
    cfg.sequence.corrupt_index = 3;

    let data = load_data(&cfg)?;
    let ens = Ensemble::train(&cfg, &data)?;
    for method in [Method::Ella, Method::InfoFusion] {
        cfg.sequence.method = method;
        let s = sequence_with(&cfg, &ens, &data.test)?;
        println!("{method}: {} of {} recovered, corrupted frame wrong in {}", s.recovered, s.runs.len(), s.corrupted_frame_wrong);
        if let Some(r) = s.runs.iter().find(|r| r.corrupted_frame_wrong()) {
            let y = r.true_class;
            println!("  sequence {} (class {y})", r.id);
            println!("  step  frame p(y)  frame argmax  fused p(y)  fused argmax");
            for l in 0..r.trace.len() {
                println!(
                    "  {:>4}  {:>10.3}  {:>12}  {:>10.3}  {:>12}",
                    l + 1,
                    r.frames[l][y],
                    argmax(&r.frames[l]),
                    r.trace[l][y],
                    argmax(&r.trace[l])
                );
            }
        }
    }
    Ok(())
}
