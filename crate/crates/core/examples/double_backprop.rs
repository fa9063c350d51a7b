//! Differentiates a loss on an input gradient, the core operation behind
//! explanation attacks, and checks it against finite differences.
//!
//! cargo run --release --example double_backprop

use aggexplain::autodiff::{grad_of_loss_on_grad, Tape, Tensor};

fn f(x: &[f64]) -> f64 {
    // y = Σ softplus_2(w ⊙ x), loss = ‖∂y/∂x‖²
    let w = [0.5, -1.5, 2.0];
    let g: Vec<f64> = x
        .iter()
        .zip(w)
        .map(|(xi, wi)| wi / (1.0 + (-2.0 * wi * xi).exp()))
        .collect();
    g.iter().map(|v| v * v).sum()
}

fn main() -> aggexplain::Result<()> {
    let x0 = vec![0.3, -0.2, 0.1];
    let tape = Tape::new();
    let x = tape.var(Tensor::vector(x0.clone())?);
    let w = tape.constant(Tensor::vector(vec![0.5, -1.5, 2.0])?);
    let y = w.mul(x)?.softplus(2.0)?.sum();
    let d = grad_of_loss_on_grad(&tape, y, x, |g| Ok(g.square().sum()))?;

    let h = 1e-6;
    for (i, got) in d.value().data().iter().enumerate() {
        let (mut up, mut down) = (x0.clone(), x0.clone());
        up[i] += h;
        down[i] -= h;
        let fd = (f(&up) - f(&down)) / (2.0 * h);
        println!("d loss / d x{i}: tape {got:+.9}, finite difference {fd:+.9}");
    }
    Ok(())
}
