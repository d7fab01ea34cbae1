//! Gradient error of value-regression surrogates as the training set
//! shrinks, on Shekel-4D (reduced sizes).

use optbias::bench::{grad_error_curve, median_smooth, GradErrorConfig, Oracle};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let oracle = Oracle::by_name("shekel4")?;
    let cfg = GradErrorConfig {
        n_train: 2000,
        n_test: 500,
        steps: 300,
        hidden: vec![64, 32],
        ..Default::default()
    };
    let rows = grad_error_curve(&oracle, &cfg.fractions, &cfg, &[0, 1])?;
    println!("fraction  mean_error  std");
    for r in &rows {
        println!("{:<9} {:<11.4} {:.4}", r.fraction, r.mean_grad_error, r.std);
    }
    let means: Vec<f64> = rows.iter().map(|r| r.mean_grad_error).collect();
    println!("median-smoothed: {:?}", median_smooth(&means));
    Ok(())
}
