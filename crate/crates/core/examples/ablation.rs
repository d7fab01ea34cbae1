//! A reduced ablation grid: synthetic task count K for the meta-learned
//! surrogate, on one benchmark and two seeds.

use optbias::bench::{run_variants, summarize, AblationAxis, GridSpec, PipelineConfig};
use optbias::metatrain::MetaConfig;
use optbias::sim4opt::Sim4OptConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = PipelineConfig::default();
    cfg.sim4opt = Sim4OptConfig {
        evolve_steps: 20,
        ..Default::default()
    };
    cfg.meta = MetaConfig {
        epochs: 2,
        ..Default::default()
    };
    cfg.surrogate.hidden = vec![64, 32];
    let spec = GridSpec {
        benchmarks: vec!["sphere4".into()],
        seeds: vec![0, 1],
        ..Default::default()
    };
    let runs = run_variants(&spec, &AblationAxis::K.variants(&cfg))?;
    let rows: Vec<_> = runs.iter().map(|r| r.report.row(false)).collect();
    summarize(&rows)?.write_csv(&mut std::io::stdout())?;
    Ok(())
}
