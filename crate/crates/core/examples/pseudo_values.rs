//! Oracle values of the highest pseudo-labeled design on each synthetic
//! trajectory, against the best value in the offline data.

use optbias::bench::{benchmark_for, pseudo_value_distribution, Oracle};
use optbias::dataio::standardize;
use optbias::numerics::RngState;
use optbias::sim4opt::{generate_tasks, Sim4OptConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let oracle = Oracle::by_name("sphere4")?;
    let b = benchmark_for(&oracle, 8000, 0.01, 0)?;
    let (ds, scaler) = standardize(&b.offline_subset)?;
    let cfg = Sim4OptConfig {
        n_functions: 32,
        ..Default::default()
    };
    let tasks = generate_tasks(&ds, &cfg, &RngState::new(0).derive(1))?;
    let threshold = b.offline_subset.max_z();
    let h = pseudo_value_distribution(&tasks, &oracle, &scaler, b.y_bounds, threshold)?;
    println!("offline best {threshold:.3}, oracle range [{:.3}, {:.3}]", b.y_bounds.0, b.y_bounds.1);
    println!("share of synthetic designs above the offline best: {:.3}", h.exceed_fraction);
    let peak = *h.counts.iter().max().unwrap_or(&1).max(&1);
    for (i, c) in h.counts.iter().enumerate() {
        let bar = "#".repeat(c * 50 / peak);
        println!("{:>9.2} {:>5} {bar}", h.edges[i], c);
    }
    Ok(())
}
