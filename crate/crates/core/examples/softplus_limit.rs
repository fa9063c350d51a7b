//! Shows the Softplus surrogate approaching the ReLU network as β grows.
//!
//! cargo run --release --example softplus_limit -- [model.xhw]

use aggexplain::autodiff::ActivationKind;
use aggexplain::data::load_idx;
use aggexplain::model::load_model;

fn main() -> aggexplain::Result<()> {
    let model = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../target/digits.xhw").into());
    let net = load_model(&model)?;
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data");
    let data = load_idx(
        format!("{root}/digits-images-idx3-ubyte"),
        format!("{root}/digits-labels-idx1-ubyte"),
    )?;
    let (_, test) = data.split_at(8000);
    let x = test.image(0);
    let relu = net.predict(x)?;

    println!("{:>6} {:>12} {:>10}", "beta", "logit gap", "ln2/beta");
    for beta in [1.0, 10.0, 100.0, 1000.0] {
        let soft = net.set_activation_mode(ActivationKind::softplus(beta)?)?.predict(x)?;
        let gap = soft
            .data()
            .iter()
            .zip(relu.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        println!("{beta:>6} {gap:>12.4e} {:>10.4e}", std::f64::consts::LN_2 / beta);
    }
    Ok(())
}
