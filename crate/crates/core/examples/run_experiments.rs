//! Runs the transfer matrix, the robustness table and the blank-square table
//! from one config, writing CSV files to an output directory.
//!
//! cargo run --release --example run_experiments -- [config.json] [pairs] [out dir]

use aggexplain::bench::{Experiment, ExperimentConfig};

fn main() -> aggexplain::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = args
        .next()
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.json").into());
    let pairs: Option<usize> = args.next().map(|s| s.parse().expect("pairs"));
    let out = args.next().unwrap_or_else(|| "experiments".into());

    let mut cfg = ExperimentConfig::load(&config)?;
    if let Some(n) = pairs {
        cfg.n_pairs = n;
    }
    let ex = Experiment::prepare(cfg)?;

    let transfer = ex.run_transfer_matrix()?;
    transfer.write(&out)?;
    println!("transfer, mean delta pcc (attacked -> evaluated)");
    for c in &transfer.cells {
        println!("  {:>4} -> {:<4} {:+.4}", c.attacked, c.evaluated, c.delta_pcc.mean);
    }

    let robust = ex.run_aggregate_robustness()?;
    robust.write(&out)?;
    println!("robustness, mean delta pcc / delta top-k");
    for r in &robust.rows {
        println!("  {:<22} {:+.4} / {:+.4}", r.method, r.delta_pcc.mean, r.delta_topk.mean);
    }

    let blank = ex.run_blank_square()?;
    blank.write(&out)?;
    println!("blank square, mean preserved ratio");
    for r in &blank.rows {
        println!("  {:<22} {:.4}", r.method, r.preserved_ratio.mean);
    }
    println!("csv files in {out}");
    Ok(())
}
