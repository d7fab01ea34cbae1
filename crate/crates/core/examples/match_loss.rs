//! Path integrals of a surrogate's input gradient: exact telescoping
//! against midpoint quadrature, and the gradient-matching loss.

use optbias::matchloss::{match_loss, path_integral, IntegralMode, PairBatch};
use optbias::numerics::{Matrix, RngState};
use optbias::surrogate::{init_net, Architecture, Mode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = RngState::new(7);
    let mut net = init_net(&Architecture::new(3, vec![64, 16]), &mut rng)?;
    net.set_mode(Mode::Eval);

    let a = [-1.0, 0.5, 0.2];
    let b = [1.2, -0.3, 0.9];
    let exact = path_integral(&net, &a, &b, IntegralMode::exact())?;
    println!("exact g(b) - g(a) = {exact:.6}");
    for s in [1, 2, 4, 16, 64] {
        let q = path_integral(&net, &a, &b, IntegralMode::quadrature(s))?;
        println!("quadrature S={s:<3} {q:.6}  (error {:.2e})", (q - exact).abs());
    }

    let starts = Matrix::from_rows(&[a, [0.0, 0.0, 0.0]])?;
    let ends = Matrix::from_rows(&[b, [0.5, 0.5, 0.5]])?;
    let pairs = PairBatch::new(starts, ends, vec![1.0, -0.5])?;
    let (loss, grad) = match_loss(&net, &pairs, IntegralMode::default())?;
    println!("match loss {loss:.6}, parameter gradient norm {:.6}", grad.norm());
    Ok(())
}
