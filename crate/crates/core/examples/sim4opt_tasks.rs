//! Synthetic task generation from a 1% offline subset: perturbed GP
//! posteriors, ascent/descent trajectories and monotone pseudo-labels.

use optbias::bench::{benchmark_for, Oracle};
use optbias::dataio::standardize;
use optbias::numerics::RngState;
use optbias::sim4opt::{generate_tasks, Sim4OptConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let oracle = Oracle::by_name("ackley4")?;
    let b = benchmark_for(&oracle, 8000, 0.01, 0)?;
    let (ds, _) = standardize(&b.offline_subset)?;
    let cfg = Sim4OptConfig {
        n_functions: 8,
        ..Default::default()
    };
    let tasks = generate_tasks(&ds, &cfg, &RngState::new(0).derive(1))?;
    println!("offline points {}, tasks {}", ds.len(), tasks.len());
    println!("offline label range {:.3}", ds.max_z() - ds.min_z());
    for t in &tasks {
        let tr = &t.trajectories[0];
        println!(
            "task {}: lengthscale {:.3}, variance {:.3}, {} trajectories of {} states, label range {:.3}, first trajectory {:.3} -> {:.3}",
            t.task_id,
            t.params.lengthscale,
            t.params.signal_variance,
            t.trajectories.len(),
            tr.len(),
            t.label_range(),
            tr.labels[0],
            tr.labels[tr.len() - 1]
        );
    }
    Ok(())
}
