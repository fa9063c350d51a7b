//! Experiment orchestration: the transfer matrix, the aggregate-robustness
//! table, the blank-square table and heatmap rendering, all at desk scale.
//!
//! Every run is driven by an [`ExperimentConfig`]. Jobs run in parallel, each
//! seeded from `(global seed, sample index, method index)`, and results are
//! collected in job order, so outputs do not depend on the thread schedule.

pub mod render;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use render::{heatmap_bytes, percentile, read_pgm, render_heatmap, render_image};

use crate::aggregate::Ensemble;
use crate::attack::{self, iteration_seed, AttackConfig, AttackResult, Explainer};
use crate::autodiff::{ActivationKind, Tensor};
use crate::data::{load_idx, Dataset};
use crate::error::{Error, Result};
use crate::explain::{self, ExplainerSpec, Heatmap};
use crate::metrics::{MetricRecord, Summary, DEFAULT_TOPK};
use crate::model::{load_model, Network};

pub const DEFAULT_PAIRS: usize = 20;
/// Index of the first held-out image in the digit files.
pub const DEFAULT_TEST_FROM: usize = 8000;

/// Written into every report header.
pub const PAIRING_NOTE: &str = "pairing: seeded ChaCha8 shuffle of the held-out split, correctly classified images only; \
each source is paired with the next queued image of a different label (assumed procedure)";

fn default_pairs() -> usize {
    DEFAULT_PAIRS
}
fn default_test_from() -> usize {
    DEFAULT_TEST_FROM
}
fn default_topk() -> f64 {
    DEFAULT_TOPK
}
fn default_explainers() -> Vec<ExplainerSpec> {
    vec![ExplainerSpec::Saliency, ExplainerSpec::GuidedBackprop, ExplainerSpec::lrp()]
}

/// IDX image and label files; images from `test_from` on are held out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub images: PathBuf,
    pub labels: PathBuf,
    #[serde(default = "default_test_from")]
    pub test_from: usize,
}

/// Everything an experiment needs. Relative paths resolve against the
/// directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Weight file; its `.arch.json` sidecar supplies the architecture.
    pub model: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default = "default_pairs")]
    pub n_pairs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_explainers", deserialize_with = "explain::deserialize_specs")]
    pub explainers: Vec<ExplainerSpec>,
    #[serde(default = "Ensemble::default_mean")]
    pub ensemble: Ensemble,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default = "default_topk")]
    pub topk: f64,
}

impl ExperimentConfig {
    /// Defaults for everything except the file locations.
    pub fn new(model: impl Into<PathBuf>, images: impl Into<PathBuf>, labels: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            model: model.into(),
            dataset: DatasetConfig {
                images: images.into(),
                labels: labels.into(),
                test_from: DEFAULT_TEST_FROM,
            },
            n_pairs: DEFAULT_PAIRS,
            seed: 0,
            explainers: default_explainers(),
            ensemble: Ensemble::default_mean(),
            attack: AttackConfig::default(),
            topk: DEFAULT_TOPK,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    /// Makes relative paths relative to `dir`.
    pub fn resolve_paths(&mut self, dir: &Path) {
        for p in [&mut self.model, &mut self.dataset.images, &mut self.dataset.labels] {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(what));
        if self.n_pairs == 0 {
            return bad("n_pairs must be at least 1".into());
        }
        if self.explainers.is_empty() {
            return bad("at least one explainer is required".into());
        }
        for (i, a) in self.explainers.iter().enumerate() {
            a.validate()?;
            if self.explainers[..i].contains(a) {
                return bad(format!("explainer {a} listed twice"));
            }
        }
        if !(self.topk > 0.0 && self.topk <= 1.0) {
            return bad(format!("topk {} outside (0, 1]", self.topk));
        }
        self.attack.validate()
    }

    /// Compact JSON of the config with every default filled in.
    pub fn resolved_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Loads the network (ReLU mode) and the held-out split.
    pub fn load_inputs(&self) -> Result<(Network, Dataset)> {
        for p in [&self.model, &self.dataset.images, &self.dataset.labels] {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        let net = load_model(&self.model)?.set_activation_mode(ActivationKind::Relu)?;
        let data = load_idx(&self.dataset.images, &self.dataset.labels)?;
        let (_, test) = data.split_at(self.dataset.test_from);
        if test.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok((net, test))
    }
}

/// A source image and the image whose explanation it is pushed toward,
/// as indices into the held-out split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePair {
    pub source: usize,
    pub target: usize,
}

/// Draws `n` pairs. Only correctly classified images enter the queue; the
/// target of queue entry `i` is the first later entry with another label.
pub fn draw_pairs(net: &Network, test: &Dataset, n: usize, seed: u64) -> Result<Vec<SamplePair>> {
    let mut order: Vec<usize> = (0..test.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut queue: Vec<usize> = Vec::new();
    let mut pairs: Vec<Option<usize>> = Vec::new();
    for i in order {
        if net.predict_class(test.image(i))? != test.label(i) {
            continue;
        }
        for (src, tgt) in queue.iter().zip(pairs.iter_mut()) {
            if tgt.is_none() && test.label(*src) != test.label(i) {
                *tgt = Some(i);
            }
        }
        queue.push(i);
        pairs.push(None);
        if pairs.len() >= n && pairs[..n].iter().all(Option::is_some) {
            break;
        }
    }
    let found: Vec<SamplePair> = queue
        .iter()
        .zip(&pairs)
        .take(n)
        .filter_map(|(&source, t)| t.map(|target| SamplePair { source, target }))
        .collect();
    if found.len() < n {
        return Err(Error::Config(format!(
            "only {} usable source/target pairs in {} held-out images, {n} requested",
            found.len(),
            test.len()
        )));
    }
    Ok(found)
}

/// Seed of the job attacking sample `sample` with method `method`.
pub fn job_seed(global: u64, sample: usize, method: usize) -> u64 {
    iteration_seed(iteration_seed(global, sample), method)
}

/// Mean ± SE, or NaN when every sample was excluded.
fn summarize(values: &[f64]) -> Summary {
    Summary::of(values).unwrap_or(Summary {
        mean: f64::NAN,
        se: f64::NAN,
        n: 0,
    })
}

/// A loaded network, held-out data and the drawn pairs.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub net: Network,
    pub test: Dataset,
    pub pairs: Vec<SamplePair>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, net: Network, test: Dataset) -> Result<Self> {
        config.validate()?;
        let net = net.set_activation_mode(ActivationKind::Relu)?;
        let pairs = draw_pairs(&net, &test, config.n_pairs, config.seed)?;
        Ok(Experiment {
            config,
            net,
            test,
            pairs,
        })
    }

    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        let (net, test) = config.load_inputs()?;
        Self::new(config, net, test)
    }

    fn attack_cfg(&self, sample: usize, method: usize) -> AttackConfig {
        AttackConfig {
            seed: job_seed(self.config.seed, sample, method),
            ..self.config.attack.clone()
        }
    }

    fn singles(&self) -> Vec<Explainer> {
        self.config.explainers.iter().cloned().map(Explainer::from).collect()
    }

    /// The configured single methods followed by the ensemble.
    pub fn rows(&self) -> Vec<Explainer> {
        let mut rows = self.singles();
        rows.push(self.config.ensemble.clone().into());
        rows
    }

    fn header(&self) -> String {
        format!("# config: {}\n# {PAIRING_NOTE}\n", self.config.resolved_json())
    }

    fn dataset_index(&self, i: usize) -> usize {
        self.config.dataset.test_from + i
    }

    /// Attacks `explainer` on the source of `pair` toward its own explanation
    /// of the target image.
    fn targeted(&self, pair: SamplePair, explainer: &Explainer, cfg: &AttackConfig) -> Result<(Heatmap, AttackResult)> {
        let target_image = self.test.image(pair.target);
        let target = explainer.explain(&self.net, target_image, self.test.label(pair.target))?;
        let result = attack::attack_target(&self.net, self.test.image(pair.source), explainer, &target, cfg)?;
        Ok((target, result))
    }

    /// Attacks every configured explainer and scores the result under every
    /// configured explainer.
    pub fn run_transfer_matrix(&self) -> Result<TransferReport> {
        let methods = self.singles();
        if methods.len() < 2 {
            return Err(Error::Config("the transfer matrix needs at least two explainers".into()));
        }
        let jobs: Vec<(usize, usize)> = (0..self.pairs.len())
            .flat_map(|s| (0..methods.len()).map(move |a| (s, a)))
            .collect();
        let outcomes = jobs
            .par_iter()
            .map(|&(s, a)| {
                let pair = self.pairs[s];
                let (target_a, result) = self.targeted(pair, &methods[a], &self.attack_cfg(s, a))?;
                let x = self.test.image(pair.source);
                let records = methods
                    .iter()
                    .enumerate()
                    .map(|(b, eval)| {
                        if b == a {
                            return MetricRecord::compute(
                                &target_a,
                                &result.start_map,
                                &result.final_map,
                                x,
                                &result.adversarial,
                                self.config.topk,
                            );
                        }
                        let target_b = eval.explain(&self.net, self.test.image(pair.target), self.test.label(pair.target))?;
                        let start_b = eval.explain(&self.net, x, result.label)?;
                        let adv_b = eval.explain(&self.net, &result.adversarial, result.label)?;
                        MetricRecord::compute(&target_b, &start_b, &adv_b, x, &result.adversarial, self.config.topk)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((result.label_preserved, records))
            })
            .collect::<Result<Vec<_>>>()?;

        let names: Vec<String> = methods.iter().map(Explainer::name).collect();
        let mut scatter = Vec::new();
        for (&(s, a), (kept, records)) in jobs.iter().zip(&outcomes) {
            for (b, record) in records.iter().enumerate() {
                scatter.push(ScatterRow {
                    pair: s,
                    source: self.dataset_index(self.pairs[s].source),
                    target: self.dataset_index(self.pairs[s].target),
                    attacked: names[a].clone(),
                    evaluated: names[b].clone(),
                    label_preserved: *kept,
                    record: *record,
                });
            }
        }
        let mut cells = Vec::new();
        for a in &names {
            for b in &names {
                let rows: Vec<&ScatterRow> = scatter.iter().filter(|r| &r.attacked == a && &r.evaluated == b).collect();
                let kept: Vec<&MetricRecord> = rows.iter().filter(|r| r.label_preserved).map(|r| &r.record).collect();
                let field = |f: fn(&MetricRecord) -> f64| summarize(&kept.iter().map(|r| f(r)).collect::<Vec<_>>());
                cells.push(TransferCell {
                    attacked: a.clone(),
                    evaluated: b.clone(),
                    delta_mse: field(|r| r.delta_mse),
                    delta_pcc: field(|r| r.delta_pcc),
                    delta_topk: field(|r| r.delta_topk),
                    flipped: rows.len() - kept.len(),
                });
            }
        }
        Ok(TransferReport {
            header: self.header(),
            methods: names,
            cells,
            scatter,
        })
    }

    /// Attacks each single method and the ensemble toward their own target
    /// explanations.
    pub fn run_aggregate_robustness(&self) -> Result<RobustnessReport> {
        let rows = self.rows();
        let samples = self
            .par_jobs(rows.len(), |s, m| {
                let pair = self.pairs[s];
                let (target, r) = self.targeted(pair, &rows[m], &self.attack_cfg(s, m))?;
                let record = MetricRecord::compute(
                    &target,
                    &r.start_map,
                    &r.final_map,
                    self.test.image(pair.source),
                    &r.adversarial,
                    self.config.topk,
                )?;
                Ok(RobustnessSample {
                    method: rows[m].name(),
                    pair: s,
                    source: self.dataset_index(pair.source),
                    target: self.dataset_index(pair.target),
                    label_preserved: r.label_preserved,
                    record,
                })
            })?;
        let summary = rows
            .iter()
            .map(|e| {
                let name = e.name();
                let all: Vec<&RobustnessSample> = samples.iter().filter(|r| r.method == name).collect();
                let kept: Vec<&MetricRecord> = all.iter().filter(|r| r.label_preserved).map(|r| &r.record).collect();
                let field = |f: fn(&MetricRecord) -> f64| summarize(&kept.iter().map(|r| f(r)).collect::<Vec<_>>());
                RobustnessRow {
                    delta_mse: field(|r| r.delta_mse),
                    delta_pcc: field(|r| r.delta_pcc),
                    delta_topk: field(|r| r.delta_topk),
                    image_mse: field(|r| r.image_mse),
                    flipped: all.len() - kept.len(),
                    method: name,
                }
            })
            .collect();
        Ok(RobustnessReport {
            header: self.header(),
            rows: summary,
            samples,
        })
    }

    /// Blank-square attack on the source image of every pair, for each single
    /// method and the ensemble.
    pub fn run_blank_square(&self) -> Result<BlankSquareReport> {
        let rows = self.rows();
        let samples = self.par_jobs(rows.len(), |s, m| {
            let source = self.pairs[s].source;
            let r = attack::attack_blank_square(&self.net, self.test.image(source), &rows[m], &self.attack_cfg(s, m))?;
            Ok(BlankSquareSample {
                method: rows[m].name(),
                sample: s,
                source: self.dataset_index(source),
                label_preserved: r.result.label_preserved,
                relevance_before: r.relevance_before,
                relevance_after: r.relevance_after,
                preserved_ratio: r.preserved_ratio(),
                image_mse: r.result.image_mse,
            })
        })?;
        let summary = rows
            .iter()
            .map(|e| {
                let name = e.name();
                let all: Vec<&BlankSquareSample> = samples.iter().filter(|r| r.method == name).collect();
                let kept: Vec<&BlankSquareSample> = all.iter().copied().filter(|r| r.label_preserved).collect();
                let field = |f: fn(&BlankSquareSample) -> f64| summarize(&kept.iter().map(|r| f(r)).collect::<Vec<_>>());
                BlankSquareRow {
                    relevance_before: field(|r| r.relevance_before),
                    relevance_after: field(|r| r.relevance_after),
                    preserved_ratio: field(|r| r.preserved_ratio),
                    image_mse: field(|r| r.image_mse),
                    flipped: all.len() - kept.len(),
                    method: name,
                }
            })
            .collect();
        Ok(BlankSquareReport {
            header: self.header(),
            rows: summary,
            samples,
        })
    }

    /// Attacks the first pair with every single method and the ensemble,
    /// writing images, heatmaps and a metric table to `dir`.
    pub fn run_attack_gallery(&self, dir: impl AsRef<Path>) -> Result<Vec<GalleryEntry>> {
        let dir = dir.as_ref();
        create_dir(dir)?;
        let pair = self.pairs[0];
        let x = self.test.image(pair.source);
        render_image(x, dir.join("source.pgm"))?;
        render_image(self.test.image(pair.target), dir.join("target.pgm"))?;
        let rows = self.rows();
        let entries = (0..rows.len())
            .into_par_iter()
            .map(|m| {
                let (target, r) = self.targeted(pair, &rows[m], &self.attack_cfg(0, m))?;
                let record = MetricRecord::compute(&target, &r.start_map, &r.final_map, x, &r.adversarial, self.config.topk)?;
                let stem = file_stem(&rows[m].name());
                render_heatmap(&r.start_map, dir.join(format!("{stem}_start.pgm")))?;
                render_heatmap(&target, dir.join(format!("{stem}_target.pgm")))?;
                render_heatmap(&r.final_map, dir.join(format!("{stem}_adversarial.pgm")))?;
                render_image(&r.adversarial, dir.join(format!("{stem}_adversarial_image.pgm")))?;
                Ok(GalleryEntry {
                    method: rows[m].name(),
                    label_preserved: r.label_preserved,
                    gamma: r.gamma,
                    final_loss: r.explanation_loss.last().copied().unwrap_or(f64::NAN),
                    record,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut w = csv_writer(&dir.join("attack.csv"), &self.header())?;
        w.write_record(["method", "label_preserved", "gamma", "final_loss"].into_iter().chain(MetricRecord::FIELDS))?;
        for e in &entries {
            let mut rec = vec![e.method.clone(), e.label_preserved.to_string(), e.gamma.to_string(), e.final_loss.to_string()];
            rec.extend(e.record.values().iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
        Ok(entries)
    }

    /// Runs `f(sample, method)` for every pair and method index in parallel,
    /// returning results in sample-major order.
    fn par_jobs<T: Send>(&self, methods: usize, f: impl Fn(usize, usize) -> Result<T> + Sync) -> Result<Vec<T>> {
        let jobs: Vec<(usize, usize)> = (0..self.pairs.len()).flat_map(|s| (0..methods).map(move |m| (s, m))).collect();
        jobs.par_iter().map(|&(s, m)| f(s, m)).collect()
    }
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn csv_writer(path: &Path, header: &str) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = BufWriter::new(file);
    buf.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(buf))
}

fn summary_fields(s: &Summary) -> [String; 2] {
    [s.mean.to_string(), s.se.to_string()]
}

/// One attacked/evaluated cell of the transfer matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransferCell {
    pub attacked: String,
    pub evaluated: String,
    pub delta_mse: Summary,
    pub delta_pcc: Summary,
    pub delta_topk: Summary,
    /// Samples whose predicted label changed; excluded from the summaries.
    pub flipped: usize,
}

/// Per-sample transfer measurement.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScatterRow {
    pub pair: usize,
    pub source: usize,
    pub target: usize,
    pub attacked: String,
    pub evaluated: String,
    pub label_preserved: bool,
    pub record: MetricRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferReport {
    pub header: String,
    pub methods: Vec<String>,
    pub cells: Vec<TransferCell>,
    pub scatter: Vec<ScatterRow>,
}

impl TransferReport {
    pub fn cell(&self, attacked: &str, evaluated: &str) -> Option<&TransferCell> {
        self.cells.iter().find(|c| c.attacked == attacked && c.evaluated == evaluated)
    }

    /// Methods whose own attack does not strictly beat every transfer to
    /// another method, by mean Δpcc.
    pub fn non_dominant_rows(&self) -> Vec<String> {
        self.methods
            .iter()
            .filter(|a| {
                let diag = self.cell(a, a).map_or(f64::NAN, |c| c.delta_pcc.mean);
                !self
                    .methods
                    .iter()
                    .filter(|b| b != a)
                    .all(|b| self.cell(a, b).is_some_and(|c| c.delta_pcc.mean < diag))
            })
            .cloned()
            .collect()
    }

    /// Writes `transfer_matrix.csv` and `transfer_scatter.csv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        create_dir(dir)?;
        let mut w = csv_writer(&dir.join("transfer_matrix.csv"), &self.header)?;
        w.write_record([
            "attacked",
            "evaluated",
            "n",
            "flipped",
            "delta_mse_mean",
            "delta_mse_se",
            "delta_pcc_mean",
            "delta_pcc_se",
            "delta_topk_mean",
            "delta_topk_se",
        ])?;
        for c in &self.cells {
            let mut rec = vec![c.attacked.clone(), c.evaluated.clone(), c.delta_pcc.n.to_string(), c.flipped.to_string()];
            for s in [&c.delta_mse, &c.delta_pcc, &c.delta_topk] {
                rec.extend(summary_fields(s));
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = csv_writer(&dir.join("transfer_scatter.csv"), &self.header)?;
        w.write_record(
            ["pair", "source", "target", "attacked", "evaluated", "label_preserved"]
                .into_iter()
                .chain(MetricRecord::FIELDS),
        )?;
        for r in &self.scatter {
            let mut rec = vec![
                r.pair.to_string(),
                r.source.to_string(),
                r.target.to_string(),
                r.attacked.clone(),
                r.evaluated.clone(),
                r.label_preserved.to_string(),
            ];
            rec.extend(r.record.values().iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(dir, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessSample {
    pub method: String,
    pub pair: usize,
    pub source: usize,
    pub target: usize,
    pub label_preserved: bool,
    pub record: MetricRecord,
}

/// One method's row of the robustness table; flipped samples are excluded.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessRow {
    pub method: String,
    pub delta_mse: Summary,
    pub delta_pcc: Summary,
    pub delta_topk: Summary,
    pub image_mse: Summary,
    pub flipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessReport {
    pub header: String,
    pub rows: Vec<RobustnessRow>,
    pub samples: Vec<RobustnessSample>,
}

impl RobustnessReport {
    pub fn row(&self, method: &str) -> Option<&RobustnessRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Writes `aggregate_robustness.csv` and `aggregate_samples.csv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        create_dir(dir)?;
        let mut w = csv_writer(&dir.join("aggregate_robustness.csv"), &self.header)?;
        w.write_record([
            "method",
            "n",
            "flipped",
            "delta_mse_mean",
            "delta_mse_se",
            "delta_pcc_mean",
            "delta_pcc_se",
            "delta_topk_mean",
            "delta_topk_se",
            "image_mse_mean",
            "image_mse_se",
        ])?;
        for r in &self.rows {
            let mut rec = vec![r.method.clone(), r.delta_pcc.n.to_string(), r.flipped.to_string()];
            for s in [&r.delta_mse, &r.delta_pcc, &r.delta_topk, &r.image_mse] {
                rec.extend(summary_fields(s));
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = csv_writer(&dir.join("aggregate_samples.csv"), &self.header)?;
        w.write_record(
            ["method", "pair", "source", "target", "label_preserved"]
                .into_iter()
                .chain(MetricRecord::FIELDS),
        )?;
        for s in &self.samples {
            let mut rec = vec![
                s.method.clone(),
                s.pair.to_string(),
                s.source.to_string(),
                s.target.to_string(),
                s.label_preserved.to_string(),
            ];
            rec.extend(s.record.values().iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(dir, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlankSquareSample {
    pub method: String,
    pub sample: usize,
    pub source: usize,
    pub label_preserved: bool,
    pub relevance_before: f64,
    pub relevance_after: f64,
    pub preserved_ratio: f64,
    pub image_mse: f64,
}

/// One method's row of the blank-square table; flipped samples are excluded.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlankSquareRow {
    pub method: String,
    pub relevance_before: Summary,
    pub relevance_after: Summary,
    pub preserved_ratio: Summary,
    pub image_mse: Summary,
    pub flipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlankSquareReport {
    pub header: String,
    pub rows: Vec<BlankSquareRow>,
    pub samples: Vec<BlankSquareSample>,
}

impl BlankSquareReport {
    pub fn row(&self, method: &str) -> Option<&BlankSquareRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Writes `blank_square.csv` and `blank_square_samples.csv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        create_dir(dir)?;
        let mut w = csv_writer(&dir.join("blank_square.csv"), &self.header)?;
        w.write_record([
            "method",
            "n",
            "flipped",
            "relevance_before_mean",
            "relevance_before_se",
            "relevance_after_mean",
            "relevance_after_se",
            "preserved_ratio_mean",
            "preserved_ratio_se",
            "image_mse_mean",
            "image_mse_se",
        ])?;
        for r in &self.rows {
            let mut rec = vec![r.method.clone(), r.preserved_ratio.n.to_string(), r.flipped.to_string()];
            for s in [&r.relevance_before, &r.relevance_after, &r.preserved_ratio, &r.image_mse] {
                rec.extend(summary_fields(s));
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = csv_writer(&dir.join("blank_square_samples.csv"), &self.header)?;
        w.write_record([
            "method",
            "sample",
            "source",
            "label_preserved",
            "relevance_before",
            "relevance_after",
            "preserved_ratio",
            "image_mse",
        ])?;
        for s in &self.samples {
            w.write_record([
                s.method.clone(),
                s.sample.to_string(),
                s.source.to_string(),
                s.label_preserved.to_string(),
                s.relevance_before.to_string(),
                s.relevance_after.to_string(),
                s.preserved_ratio.to_string(),
                s.image_mse.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))
    }
}

/// One method's outcome in [`Experiment::run_attack_gallery`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GalleryEntry {
    pub method: String,
    pub label_preserved: bool,
    pub gamma: f64,
    pub final_loss: f64,
    pub record: MetricRecord,
}

/// Loads the inputs named by `cfg` and runs the transfer matrix.
pub fn run_transfer_matrix(cfg: &ExperimentConfig) -> Result<TransferReport> {
    Experiment::prepare(cfg.clone())?.run_transfer_matrix()
}

/// Loads the inputs named by `cfg` and runs the robustness comparison.
pub fn run_aggregate_robustness(cfg: &ExperimentConfig) -> Result<RobustnessReport> {
    Experiment::prepare(cfg.clone())?.run_aggregate_robustness()
}

/// Loads the inputs named by `cfg` and runs the blank-square comparison.
pub fn run_blank_square(cfg: &ExperimentConfig) -> Result<BlankSquareReport> {
    Experiment::prepare(cfg.clone())?.run_blank_square()
}

/// Explains one image with a single method, predicting the class if none is
/// given, and renders the normalized map.
pub fn explain_to_pgm(
    net: &Network,
    x: &Tensor,
    spec: &ExplainerSpec,
    class: Option<usize>,
    path: impl AsRef<Path>,
) -> Result<Heatmap> {
    let net = net.set_activation_mode(ActivationKind::Relu)?;
    let class = match class {
        Some(c) => c,
        None => net.predict_class(x)?,
    };
    let h = explain::explain_normalized(&net, x, class, spec)?;
    render_heatmap(&h, path)?;
    Ok(h)
}
