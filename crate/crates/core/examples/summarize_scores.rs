//! Aggregates score rows into mean, population std and average ranks.
//!
//! cargo run --example summarize_scores -- path/to/scores.csv

use optbias::bench::summarize;
use optbias::dataio::{read_score_rows, ScoreRow};

fn row(method: &str, benchmark: &str, seed: u64, p: f64) -> ScoreRow {
    ScoreRow {
        method: method.into(),
        benchmark: benchmark.into(),
        seed,
        percentile100: p,
        best_raw: 0.0,
        runtime_s: 0.0,
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rows = match std::env::args().nth(1) {
        Some(path) => read_score_rows(std::fs::File::open(path)?)?,
        None => vec![
            row("optbias", "ackley4", 0, 0.81),
            row("optbias", "ackley4", 1, 0.77),
            row("ga", "ackley4", 0, 0.62),
            row("ga", "ackley4", 1, 0.70),
            row("optbias", "shekel4", 0, 0.35),
            row("optbias", "shekel4", 1, 0.41),
            row("ga", "shekel4", 0, 0.38),
            row("ga", "shekel4", 1, 0.38),
        ],
    };
    summarize(&rows)?.write_csv(&mut std::io::stdout())?;
    Ok(())
}
