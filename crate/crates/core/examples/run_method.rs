//! One method on one analytic benchmark, end to end.
//!
//! cargo run --release --example run_method -- [benchmark] [method] [seed]

use optbias::bench::{benchmark_for, run_method, Method, Oracle, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let bench = args.first().map(String::as_str).unwrap_or("sphere4");
    let method = Method::parse(args.get(1).map(String::as_str).unwrap_or("optbias"))?;
    let seed: u64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(0);

    let oracle = Oracle::by_name(bench)?;
    let b = benchmark_for(&oracle, 8000, 0.01, seed)?;
    let t0 = std::time::Instant::now();
    let r = run_method(method, &b, &PipelineConfig::default(), seed)?;
    println!("benchmark        {}", r.benchmark);
    println!("method           {}", r.method);
    println!("subset best      {:.4}", b.subset_best_score());
    println!("percentile100    {:.4}", r.percentile100);
    println!("best raw value   {:.4}", r.best_raw);
    println!("oracle calls     {}", r.oracle_calls);
    println!("elapsed          {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
