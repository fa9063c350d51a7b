use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aggexplain::bench::{self, Experiment, ExperimentConfig, DEFAULT_TEST_FROM};
use aggexplain::data::load_idx;
use aggexplain::explain::ExplainerSpec;
use aggexplain::metrics::Summary;
use aggexplain::model::{load_model, save_model, train, Architecture, TrainConfig};
use aggexplain::{Error, Result};

#[derive(Parser)]
#[command(version, about = "Explanation attacks and explanation ensembles on small image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network on IDX data and save weights plus an architecture sidecar.
    Train {
        /// Architecture JSON file, or `reference`.
        #[arg(long, default_value = "reference")]
        spec: String,
        /// IDX3 image file.
        #[arg(long)]
        data: PathBuf,
        /// IDX1 label file (default: `data` with `images-idx3` replaced by `labels-idx1`).
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Images from this index on are held out and only evaluated.
        #[arg(long, default_value_t = DEFAULT_TEST_FROM)]
        test_from: usize,
    },
    /// Render one explanation as a PGM heatmap.
    Explain {
        #[arg(long)]
        model: PathBuf,
        /// Binary PGM input image, or an IDX3 file when `--index` is given.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        index: Option<usize>,
        /// SM, GB, IG, SG or LRP, or a JSON spec object.
        #[arg(long)]
        method: String,
        /// Class to explain (default: the predicted class).
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack the first configured pair with every method and write images.
    Attack {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transfer matrix: attack each method, score under every method.
    Transfer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Robustness of single methods against the ensemble.
    AggregateBench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drive relevance out of the central square.
    BlankSquare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn default_labels(images: &Path) -> PathBuf {
    let name = images.file_name().map(|n| n.to_string_lossy().replace("images-idx3", "labels-idx1"));
    images.with_file_name(name.unwrap_or_default())
}

fn parse_method(s: &str) -> Result<ExplainerSpec> {
    if s.trim_start().starts_with('{') {
        Ok(serde_json::from_str(s)?)
    } else {
        s.parse()
    }
}

fn fmt(s: &Summary) -> String {
    format!("{:+.4} ± {:.4}", s.mean, s.se)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            spec,
            data,
            labels,
            out,
            seed,
            epochs,
            lr,
            batch,
            test_from,
        } => {
            let arch = if spec == "reference" {
                Architecture::reference()
            } else {
                let text = fs::read_to_string(&spec).map_err(|e| Error::Config(format!("{spec}: {e}")))?;
                serde_json::from_str(&text)?
            };
            let labels = labels.unwrap_or_else(|| default_labels(&data));
            let (train_set, test_set) = load_idx(&data, &labels)?.split_at(test_from);
            let cfg = TrainConfig {
                epochs,
                learning_rate: lr,
                batch_size: batch,
                seed,
            };
            let test = (!test_set.is_empty()).then_some(&test_set);
            let outcome = train(&arch, &train_set, test, &cfg)?;
            println!("train accuracy {:.4}", outcome.train_accuracy);
            if let Some(acc) = outcome.test_accuracy {
                println!("test accuracy {acc:.4}");
            }
            save_model(&outcome.network, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Explain {
            model,
            image,
            index,
            method,
            class,
            out,
        } => {
            let net = load_model(&model)?;
            let x = match index {
                Some(i) => {
                    let data = load_idx(&image, default_labels(&image))?;
                    if i >= data.len() {
                        return Err(Error::InvalidParameter(format!("index {i} beyond {} images", data.len())));
                    }
                    data.image(i).clone()
                }
                None => bench::read_pgm(&image)?,
            };
            let spec = parse_method(&method)?;
            spec.validate()?;
            bench::explain_to_pgm(&net, &x, &spec, class, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Attack { model, config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(m) = model {
                cfg.model = m;
            }
            let entries = Experiment::prepare(cfg)?.run_attack_gallery(&out)?;
            println!("{:<24} {:>8} {:>8} {:>10} {:>6}", "method", "Δpcc", "Δtopk", "image mse", "label");
            for e in entries {
                let kept = if e.label_preserved { "kept" } else { "FLIP" };
                println!(
                    "{:<24} {:>+8.4} {:>+8.4} {:>10.2e} {:>6}",
                    e.method, e.record.delta_pcc, e.record.delta_topk, e.record.image_mse, kept
                );
            }
        }
        Command::Transfer { config, out } => {
            let report = bench::run_transfer_matrix(&ExperimentConfig::load(&config)?)?;
            report.write(&out)?;
            println!("mean Δpcc (rows attacked, columns evaluated)");
            print!("{:<8}", "");
            for m in &report.methods {
                print!("{m:>20}");
            }
            println!();
            for a in &report.methods {
                print!("{a:<8}");
                for b in &report.methods {
                    print!("{:>20}", fmt(&report.cell(a, b).expect("cell").delta_pcc));
                }
                println!();
            }
        }
        Command::AggregateBench { config, out } => {
            let report = bench::run_aggregate_robustness(&ExperimentConfig::load(&config)?)?;
            report.write(&out)?;
            println!("{:<24} {:>18} {:>18} {:>18} {:>10}", "method", "Δmse", "Δpcc", "Δtopk", "image mse");
            for r in &report.rows {
                println!(
                    "{:<24} {:>18} {:>18} {:>18} {:>10.2e}",
                    r.method,
                    fmt(&r.delta_mse),
                    fmt(&r.delta_pcc),
                    fmt(&r.delta_topk),
                    r.image_mse.mean
                );
            }
        }
        Command::BlankSquare { config, out } => {
            let report = bench::run_blank_square(&ExperimentConfig::load(&config)?)?;
            report.write(&out)?;
            println!("{:<24} {:>10} {:>10} {:>18}", "method", "before", "after", "preserved");
            for r in &report.rows {
                println!(
                    "{:<24} {:>10.4} {:>10.4} {:>18}",
                    r.method,
                    r.relevance_before.mean,
                    r.relevance_after.mean,
                    fmt(&r.preserved_ratio)
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
