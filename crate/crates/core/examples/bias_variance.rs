//! Splits the error of single explanation methods into the error of their
//! mean map plus the spread of the methods around it.
//!
//! The reference map is integrated gradients with 512 steps, standing in for
//! a ground-truth explanation.
//!
//! cargo run --release --example bias_variance -- [model.xhw] [samples]

use aggexplain::aggregate::bias_variance_report;
use aggexplain::data::load_idx;
use aggexplain::explain::{explain_normalized, ExplainerSpec};
use aggexplain::model::load_model;

fn main() -> aggexplain::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = args
        .next()
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../target/digits.xhw").into());
    let samples: usize = args.next().map(|s| s.parse().expect("samples")).unwrap_or(20);

    let net = load_model(&model)?;
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data");
    let data = load_idx(
        format!("{root}/digits-images-idx3-ubyte"),
        format!("{root}/digits-labels-idx1-ubyte"),
    )?;
    let (_, test) = data.split_at(8000);

    let reference = ExplainerSpec::IntegratedGradients {
        baseline: 0.0,
        steps: 512,
    };
    let methods = [
        ExplainerSpec::Saliency,
        ExplainerSpec::GuidedBackprop,
        ExplainerSpec::smoothgrad(0),
        ExplainerSpec::lrp(),
    ];
    let mut truth = Vec::new();
    let mut maps = vec![Vec::new(); methods.len()];
    for n in 0..samples.min(test.len()) {
        let x = test.image(n);
        let class = net.predict_class(x)?;
        truth.push(explain_normalized(&net, x, class, &reference)?);
        for (j, m) in methods.iter().enumerate() {
            maps[j].push(explain_normalized(&net, x, class, m)?);
        }
    }
    let report = bias_variance_report(&truth, &maps)?;
    for (m, e) in methods.iter().zip(&report.method_mse) {
        println!("{:<4} mse {e:.4e}", m.name());
    }
    println!("mean of single-method errors   {:.4e}", report.mean_mse);
    println!("error of the mean map          {:.4e}", report.aggregate_mse);
    println!("spread around the mean map     {:.4e}", report.variance);
    println!(
        "identity residual              {:.1e}",
        report.mean_mse - report.aggregate_mse - report.variance
    );
    Ok(())
}
