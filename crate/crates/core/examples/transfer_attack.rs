//! Attacks guided backprop on one digit pair and checks whether the
//! manipulation carries over to LRP.
//!
//! cargo run --release --example transfer_attack -- [model.xhw] [source index] [target index]

use aggexplain::attack::{attack_transfer, AttackConfig, Explainer};
use aggexplain::data::load_idx;
use aggexplain::explain::ExplainerSpec;
use aggexplain::metrics::DEFAULT_TOPK;
use aggexplain::model::load_model;

fn main() -> aggexplain::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = args
        .next()
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../target/digits.xhw").into());
    let source: usize = args.next().map(|s| s.parse().expect("source")).unwrap_or(0);
    let target: Option<usize> = args.next().map(|s| s.parse().expect("target"));

    let net = load_model(&model)?;
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data");
    let data = load_idx(
        format!("{root}/digits-images-idx3-ubyte"),
        format!("{root}/digits-labels-idx1-ubyte"),
    )?;
    let (_, test) = data.split_at(8000);
    // default target: the next image showing a different digit
    let target = target.unwrap_or_else(|| {
        (source + 1..test.len())
            .find(|&i| test.label(i) != test.label(source))
            .expect("a differently labelled image")
    });

    let attacked = Explainer::from(ExplainerSpec::GuidedBackprop);
    let evaluated = Explainer::from(ExplainerSpec::lrp());
    let out = attack_transfer(
        &net,
        test.image(source),
        test.image(target),
        &attacked,
        &evaluated,
        &AttackConfig::default(),
        DEFAULT_TOPK,
    )?;
    println!(
        "digit {} pushed toward digit {} (label kept: {})",
        test.label(source),
        test.label(target),
        out.result.label_preserved
    );
    for (name, r) in [("GB (attacked)", &out.attacked), ("LRP (evaluated)", &out.evaluated)] {
        println!(
            "{name:<16} delta pcc {:+.4}  delta top-k {:+.4}  delta mse {:+.3e}",
            r.delta_pcc, r.delta_topk, r.delta_mse
        );
    }
    println!("image mse {:.2e}", out.result.image_mse);
    Ok(())
}
