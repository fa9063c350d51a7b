//! Explains one held-out digit with every method plus both aggregates and
//! writes the heatmaps as PGM files.
//!
//! cargo run --release --example explain_heatmaps -- [model.xhw] [test index] [out dir]

use std::fs;

use aggexplain::aggregate::{AggregationKind, Ensemble};
use aggexplain::bench::{render_heatmap, render_image};
use aggexplain::data::load_idx;
use aggexplain::explain::{explain_normalized, ExplainerSpec};
use aggexplain::model::load_model;

fn main() -> aggexplain::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = args
        .next()
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../target/digits.xhw").into());
    let index: usize = args.next().map(|s| s.parse().expect("index")).unwrap_or(0);
    let out = args.next().unwrap_or_else(|| "heatmaps".into());

    let net = load_model(&model)?;
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data");
    let data = load_idx(
        format!("{root}/digits-images-idx3-ubyte"),
        format!("{root}/digits-labels-idx1-ubyte"),
    )?;
    let (_, test) = data.split_at(8000);
    let x = test.image(index);
    let class = net.predict_class(x)?;
    println!("test image {index}: label {}, predicted {class}", test.label(index));

    fs::create_dir_all(&out).expect("create output dir");
    render_image(x, format!("{out}/input.pgm"))?;
    let methods = [
        ExplainerSpec::Saliency,
        ExplainerSpec::GuidedBackprop,
        ExplainerSpec::integrated_gradients(),
        ExplainerSpec::smoothgrad(0),
        ExplainerSpec::lrp(),
    ];
    for spec in &methods {
        let h = explain_normalized(&net, x, class, spec)?;
        let path = format!("{out}/{}.pgm", spec.name());
        render_heatmap(&h, &path)?;
        let peak = h.values().iter().cloned().fold(0.0, f64::max);
        println!("{:<4} peak relevance {peak:.4} -> {path}", spec.name());
    }
    for kind in [AggregationKind::Mean, AggregationKind::Var] {
        let e = Ensemble::new(methods[..2].iter().chain(&methods[4..]).cloned().collect(), kind)?;
        let h = e.explain(&net, x, class)?;
        let path = format!("{out}/{}.pgm", if kind == AggregationKind::Mean { "AGG-Mean" } else { "AGG-Var" });
        render_heatmap(&h, &path)?;
        println!("{} -> {path}", e.name());
    }
    Ok(())
}
