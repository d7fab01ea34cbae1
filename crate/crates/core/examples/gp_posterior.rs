//! Exact GP posterior on a small 1-D dataset, with marginal-likelihood
//! selection of the lengthscale.

use optbias::dataio::OfflineDataset;
use optbias::gp::{fit_hyperparams, log_grid, posterior, KernelParams};
use optbias::numerics::Matrix;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let xs: Vec<f64> = (0..8).map(|i| i as f64 * 0.8 - 3.0).collect();
    let zs: Vec<f64> = xs.iter().map(|x| (1.3 * x).sin()).collect();
    let ds = OfflineDataset::new(Matrix::from_vec(xs.len(), 1, xs.clone())?, zs)?;

    let base = KernelParams {
        noise_variance: 1e-4,
        ..Default::default()
    };
    let p = fit_hyperparams(&ds, &log_grid(&base, &[0.25, 0.5, 1.0, 2.0, 4.0]))?;
    println!("selected lengthscale {:.3}, signal variance {:.3}", p.lengthscale, p.signal_variance);

    let g = posterior(&ds, &p)?;
    println!("{:>6} {:>9} {:>9} {:>9} {:>9}", "x", "truth", "mean", "std", "d/dx");
    for i in 0..13 {
        let x = -3.0 + i as f64 * 0.5;
        let m = g.mean(&[x])?;
        let s = g.variance(&[x])?.sqrt();
        let d = g.mean_grad(&[x])?[0];
        println!("{x:>6.2} {:>9.4} {m:>9.4} {s:>9.4} {d:>9.4}", (1.3 * x).sin());
    }
    Ok(())
}
