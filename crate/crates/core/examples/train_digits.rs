//! Trains the reference convolutional net on the bundled digit set and saves it.
//!
//! cargo run --release --example train_digits -- [out.xhw] [epochs]

use std::time::Instant;

use aggexplain::data::load_idx;
use aggexplain::model::{save_model, train, Architecture, TrainConfig};

fn main() -> aggexplain::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../target/digits.xhw").into());
    let epochs = args.next().map(|e| e.parse().expect("epochs")).unwrap_or(3);

    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data");
    let data = load_idx(
        format!("{root}/digits-images-idx3-ubyte"),
        format!("{root}/digits-labels-idx1-ubyte"),
    )?;
    let (train_set, test_set) = data.split_at(8000);
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let outcome = train(&Architecture::reference(), &train_set, Some(&test_set), &cfg)?;
    println!(
        "train accuracy {:.4}, test accuracy {:.4} ({:.1}s)",
        outcome.train_accuracy,
        outcome.test_accuracy.unwrap_or(f64::NAN),
        start.elapsed().as_secs_f64()
    );
    save_model(&outcome.network, &out)?;
    println!("saved {out}");
    Ok(())
}
