//! Tries to empty the central square of each method's explanation of one
//! digit and reports how much in-square relevance survives.
//!
//! cargo run --release --example blank_square -- [model.xhw] [test index] [iters]

use aggexplain::aggregate::Ensemble;
use aggexplain::attack::{attack_blank_square, AttackConfig, Explainer};
use aggexplain::data::load_idx;
use aggexplain::explain::ExplainerSpec;
use aggexplain::model::load_model;

fn main() -> aggexplain::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = args
        .next()
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../target/digits.xhw").into());
    let index: usize = args.next().map(|s| s.parse().expect("index")).unwrap_or(0);
    let iters = args.next().map(|s| s.parse().expect("iters")).unwrap_or(1500);

    let net = load_model(&model)?;
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data");
    let data = load_idx(
        format!("{root}/digits-images-idx3-ubyte"),
        format!("{root}/digits-labels-idx1-ubyte"),
    )?;
    let (_, test) = data.split_at(8000);
    let x = test.image(index);

    let cfg = AttackConfig {
        iters,
        ..AttackConfig::default()
    };
    let explainers: Vec<Explainer> = vec![
        ExplainerSpec::Saliency.into(),
        ExplainerSpec::GuidedBackprop.into(),
        ExplainerSpec::lrp().into(),
        Ensemble::default_mean().into(),
    ];
    println!("{:<22} {:>8} {:>8} {:>9} {:>10}", "method", "before", "after", "preserved", "image mse");
    for e in &explainers {
        let r = attack_blank_square(&net, x, e, &cfg)?;
        println!(
            "{:<22} {:>8.4} {:>8.4} {:>9.4} {:>10.2e}",
            e.name(),
            r.relevance_before,
            r.relevance_after,
            r.preserved_ratio(),
            r.result.image_mse
        );
    }
    Ok(())
}
