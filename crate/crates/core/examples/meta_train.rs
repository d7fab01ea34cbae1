//! First-order meta-training against pooled pretraining on the same
//! synthetic tasks, followed by fine-tuning on the offline data.

use optbias::bench::{benchmark_for, Oracle};
use optbias::dataio::standardize;
use optbias::metatrain::{finetune, meta_train, pretrain, FinetuneConfig, MetaConfig};
use optbias::numerics::RngState;
use optbias::sim4opt::{generate_tasks, Sim4OptConfig};
use optbias::surrogate::{init_net, Architecture};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let oracle = Oracle::by_name("sphere4")?;
    let b = benchmark_for(&oracle, 8000, 0.01, 0)?;
    let (ds, _) = standardize(&b.offline_subset)?;
    let tasks = generate_tasks(
        &ds,
        &Sim4OptConfig {
            n_functions: 16,
            evolve_steps: 30,
            ..Default::default()
        },
        &RngState::new(0).derive(1),
    )?;
    let arch = Architecture::new(4, vec![64, 32]);
    let cfg = MetaConfig {
        epochs: 10,
        ..Default::default()
    };

    for (name, meta) in [("meta", true), ("pretrain", false)] {
        let mut net = init_net(&arch, &mut RngState::new(5))?;
        let mut rng = RngState::new(2);
        let stats = if meta {
            meta_train(&mut net, &tasks, &cfg, &mut rng)?
        } else {
            pretrain(&mut net, &tasks, &cfg, &mut rng)?
        };
        for e in &stats.epochs {
            println!("{name:<8} epoch {:>2}: pre {:.4} post {:.4}", e.epoch, e.mean_pre_loss, e.mean_post_loss);
        }
        let losses = finetune(&mut net, &ds, &FinetuneConfig::default(), &mut RngState::new(3))?;
        println!(
            "{name:<8} fine-tune loss {:.4} -> {:.4}",
            losses.first().copied().unwrap_or(f64::NAN),
            losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
