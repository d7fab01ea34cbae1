//! Candidate selection and bounded gradient ascent on a surrogate trained
//! by gradient matching on the offline data alone.

use optbias::bench::{benchmark_for, score_designs, Oracle};
use optbias::dataio::standardize;
use optbias::metatrain::{train_match, BaselineConfig};
use optbias::numerics::RngState;
use optbias::search::{gradient_search, init_candidates, standardized_bounds, SearchConfig};
use optbias::surrogate::{init_net, Architecture};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let oracle = Oracle::by_name("sphere4")?;
    let b = benchmark_for(&oracle, 8000, 0.01, 1)?;
    let (ds, scaler) = standardize(&b.offline_subset)?;
    let mut net = init_net(&Architecture::new(4, vec![128, 32]), &mut RngState::new(0))?;
    train_match(&mut net, &ds, &BaselineConfig::default(), &mut RngState::new(1))?;

    let cfg = SearchConfig::default();
    let start = init_candidates(&net, &ds, cfg.top_k, cfg.n_candidates, &mut RngState::new(2))?;
    let bounds = standardized_bounds(&oracle.domain, &scaler, cfg.bound_expand);
    println!("subset best score {:.4}", b.subset_best_score());
    for steps in [0, 100, 300, 1000] {
        let out = gradient_search(&net, &start, cfg.gamma, steps, Some(&bounds))?;
        let r = score_designs("matchopt", &b, &out, &scaler, 1, 0.0)?;
        println!("{steps:>5} steps: best normalized score {:.4}", r.percentile100);
    }
    Ok(())
}
