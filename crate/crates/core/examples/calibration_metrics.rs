//! Calibration and scoring on synthetic predictions: a calibrated source,
//! an overconfident copy, and the temperature that repairs it.
//!
//! cargo run --example calibration_metrics

use lla_fusion::metrics::{calibration, default_temperature_grid, fit_temperature, scores};
use lla_fusion::network::softmax;
use lla_fusion::rng::rng;
use rand::Rng;

fn main() -> lla_fusion::Result<()> {
    let mut r = rng(3);
    let (mut logits, mut labels) = (Vec::new(), Vec::new());
    for _ in 0..5000 {
        let g: Vec<f64> = (0..4).map(|_| r.random_range(-2.5..2.5)).collect();
        let p = softmax(&g);
        let u: f64 = r.random();
        let y = p.iter().scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        }).position(|c| u < c).unwrap_or(3);
        logits.push(g);
        labels.push(y);
    }
    let sharp: Vec<Vec<f64>> = logits.iter().map(|g| g.iter().map(|v| v * 4.0).collect()).collect();
    let t = fit_temperature(&sharp, &labels, &default_temperature_grid())?;
    let repaired: Vec<Vec<f64>> = sharp.iter().map(|g| g.iter().map(|v| v / t).collect()).collect();

    println!("fitted temperature {t:.3}");
    println!("{:<14} {:>8} {:>8} {:>8} {:>8}", "", "acc", "ECE %", "NLL", "Brier");
    for (name, set) in [("calibrated", &logits), ("overconfident", &sharp), ("rescaled", &repaired)] {
        let preds: Vec<Vec<f64>> = set.iter().map(|g| softmax(g)).collect();
        let cal = calibration(&preds, &labels, 10)?;
        let s = scores(&preds, &labels)?;
        println!(
            "{name:<14} {:>8.4} {:>8.3} {:>8.4} {:>8.4}",
            cal.accuracy,
            cal.ece * 100.0,
            s.mean_nll,
            s.brier
        );
    }

    let preds: Vec<Vec<f64>> = sharp.iter().map(|g| softmax(g)).collect();
    println!("reliability bins of the overconfident set:");
    for (j, b) in calibration(&preds, &labels, 10)?.bins.iter().enumerate().filter(|(_, b)| b.count > 0) {
        println!("  [{:.1}, {:.1})  n {:>5}  acc {:.3}  conf {:.3}", j as f64 / 10.0, (j + 1) as f64 / 10.0, b.count, b.accuracy, b.confidence);
    }
    Ok(())
}
