//! Attacks one explanation method on a trained digit classifier so that the
//! explanation of a digit moves toward that of a different digit.
//!
//! cargo run --release --example targeted_attack -- [model.xhw] [SM|GB|IG|SG|LRP|AGG] [iters] [sign|gradient|normalized] [reference mse]

use std::time::Instant;

use aggexplain::aggregate::Ensemble;
use aggexplain::attack::{attack_target, AttackConfig, Explainer, StepRule};
use aggexplain::data::load_idx;
use aggexplain::explain::ExplainerSpec;
use aggexplain::metrics::{MetricRecord, DEFAULT_TOPK};
use aggexplain::model::load_model;

fn main() -> aggexplain::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = args.next().unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../target/digits.xhw").into());
    let method = args.next().unwrap_or_else(|| "SM".into());
    let iters = args.next().map(|s| s.parse().expect("iters")).unwrap_or(1500);
    let step = match args.next().as_deref() {
        Some("gradient") => StepRule::Gradient,
        Some("normalized") => StepRule::Normalized,
        _ => StepRule::Sign,
    };

    let net = load_model(&model)?;
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data");
    let data = load_idx(
        format!("{root}/digits-images-idx3-ubyte"),
        format!("{root}/digits-labels-idx1-ubyte"),
    )?;
    let (_, test) = data.split_at(8000);
    let target = (1..test.len()).find(|&i| test.label(i) != test.label(0)).expect("a second digit");
    let (x, x_hat) = (test.image(0), test.image(target));

    let explainer: Explainer = if method.eq_ignore_ascii_case("AGG") {
        Ensemble::default_mean().into()
    } else {
        method.parse::<ExplainerSpec>()?.into()
    };
    let target = explainer.explain(&net, x_hat, net.predict_class(x_hat)?)?;
    let reference_mse = args.next().map(|s| s.parse().expect("reference mse")).unwrap_or(1e-3);
    let cfg = AttackConfig {
        iters,
        step,
        reference_mse,
        ..AttackConfig::default()
    };
    let start = Instant::now();
    let r = attack_target(&net, x, &explainer, &target, &cfg)?;
    let rec = MetricRecord::compute(&target, &r.start_map, &r.final_map, x, &r.adversarial, DEFAULT_TOPK)?;
    println!("{} attack, {} iterations in {:.1}s", explainer.name(), iters, start.elapsed().as_secs_f64());
    println!(
        "explanation loss {:.3e} -> {:.3e}, gamma {:.3e}",
        r.explanation_loss.first().copied().unwrap_or(0.0),
        r.explanation_loss.last().copied().unwrap_or(0.0),
        r.gamma
    );
    println!(
        "delta pcc {:+.3}, delta top-k {:+.3}, delta mse {:+.3e}, image mse {:.2e}, label kept {}",
        rec.delta_pcc, rec.delta_topk, rec.delta_mse, rec.image_mse, r.label_preserved
    );
    Ok(())
}
