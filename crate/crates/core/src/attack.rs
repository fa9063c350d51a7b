//! Input perturbations that manipulate explanations while keeping the input
//! close to the original.
//!
//! Each iteration runs the network in Softplus mode so the explanation can be
//! differentiated with respect to the input; explanations that are reported
//! back are always recomputed with ReLU activations.

use serde::{Deserialize, Serialize};

use crate::aggregate::{self, Ensemble};
use crate::autodiff::{ActivationKind, GradOptions, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::explain::{self, ExplainerSpec, Heatmap};
use crate::metrics::{self, MetricRecord};
use crate::model::Network;

/// What is being attacked: one method or an aggregate of several.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Explainer {
    Single(ExplainerSpec),
    Ensemble(Ensemble),
}

impl Explainer {
    pub fn name(&self) -> String {
        match self {
            Explainer::Single(s) => s.name().to_string(),
            Explainer::Ensemble(e) => e.name(),
        }
    }

    /// Normalized heatmap in the network's current activation mode.
    pub fn explain(&self, net: &Network, x: &Tensor, class: usize) -> Result<Heatmap> {
        match self {
            Explainer::Single(s) => explain::explain_normalized(net, x, class, s),
            Explainer::Ensemble(e) => e.explain(net, x, class),
        }
    }

    /// Normalized map as a twice-differentiable expression.
    fn map_on_tape<'t>(&self, net: &Network, tape: &'t Tape, x: Var<'t>, class: usize, seed: u64) -> Result<Var<'t>> {
        match self {
            Explainer::Single(s) => {
                explain::normalize_on_tape(explain::raw_map_on_tape(net, tape, x, class, &s.with_seed(seed), true)?)
            }
            Explainer::Ensemble(e) => aggregate::ensemble_map_on_tape(e, net, tape, x, class, seed),
        }
    }
}

impl From<ExplainerSpec> for Explainer {
    fn from(s: ExplainerSpec) -> Self {
        Explainer::Single(s)
    }
}

impl From<Ensemble> for Explainer {
    fn from(e: Ensemble) -> Self {
        Explainer::Ensemble(e)
    }
}

/// How β moves from `beta_start` to `beta_end` over the iterations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BetaGrowth {
    #[default]
    Exponential,
    Linear,
}

/// Direction taken each iteration from the explanation-loss gradient `g`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    /// `g` itself.
    Gradient,
    /// `g / max|g|`, so the largest per-pixel move is exactly `eta`.
    Normalized,
    /// `sign(g)`: every pixel with a nonzero gradient moves by `eta`.
    #[default]
    Sign,
}

fn default_eta() -> f64 {
    1e-3
}
fn default_iters() -> usize {
    1500
}
fn default_beta_start() -> f64 {
    10.0
}
fn default_beta_end() -> f64 {
    100.0
}
fn default_clamp() -> [f64; 2] {
    [0.0, 1.0]
}
fn default_reference_mse() -> f64 {
    1e-3
}

/// Optimization settings shared by all attack objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_iters")]
    pub iters: usize,
    /// Weight of `‖x′ − x‖²`; `None` derives it at the first iteration from
    /// [`AttackConfig::reference_mse`].
    #[serde(default)]
    pub gamma: Option<f64>,
    /// With automatic γ: the squared per-pixel displacement at which the
    /// distance term pulls back as hard as the explanation term pushes.
    #[serde(default = "default_reference_mse")]
    pub reference_mse: f64,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    #[serde(default)]
    pub beta_growth: BetaGrowth,
    #[serde(default)]
    pub step: StepRule,
    #[serde(default = "default_clamp")]
    pub clamp: [f64; 2],
    #[serde(default)]
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            eta: default_eta(),
            iters: default_iters(),
            gamma: None,
            reference_mse: default_reference_mse(),
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
            beta_growth: BetaGrowth::default(),
            step: StepRule::default(),
            clamp: default_clamp(),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidParameter(what));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("step size {}", self.eta));
        }
        if let Some(g) = self.gamma {
            if !(g >= 0.0 && g.is_finite()) {
                return bad(format!("gamma {g}"));
            }
        }
        if !(self.reference_mse > 0.0 && self.reference_mse.is_finite()) {
            return bad(format!("reference mse {}", self.reference_mse));
        }
        ActivationKind::softplus(self.beta_start)?;
        ActivationKind::softplus(self.beta_end)?;
        if self.beta_start > self.beta_end {
            return bad(format!("beta start {} above beta end {}", self.beta_start, self.beta_end));
        }
        let [lo, hi] = self.clamp;
        if !(lo < hi) {
            return bad(format!("clamp range [{lo}, {hi}]"));
        }
        Ok(())
    }

    /// β used at iteration `t`.
    pub fn beta(&self, t: usize) -> f64 {
        if self.iters <= 1 {
            return self.beta_start;
        }
        let f = t as f64 / (self.iters - 1) as f64;
        match self.beta_growth {
            BetaGrowth::Exponential => self.beta_start * (self.beta_end / self.beta_start).powf(f),
            BetaGrowth::Linear => self.beta_start + (self.beta_end - self.beta_start) * f,
        }
    }
}

/// Axis-aligned block of pixels `[row, row + rows) × [col, col + cols)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Region {
    /// Centered square covering a quarter of the image area.
    pub fn centered_quarter(rows: usize, cols: usize) -> Region {
        let (h, w) = (rows / 2, cols / 2);
        Region {
            row: (rows - h) / 2,
            col: (cols - w) / 2,
            rows: h,
            cols: w,
        }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row..self.row + self.rows).contains(&r) && (self.col..self.col + self.cols).contains(&c)
    }

    /// 0/1 indicator over a `rows × cols` grid.
    pub fn mask(&self, rows: usize, cols: usize) -> Vec<f64> {
        (0..rows * cols)
            .map(|i| if self.contains(i / cols, i % cols) { 1.0 } else { 0.0 })
            .collect()
    }

    /// Sum of `h` inside the region.
    pub fn total(&self, h: &Heatmap) -> f64 {
        h.values()
            .iter()
            .enumerate()
            .filter(|(i, _)| self.contains(i / h.cols(), i % h.cols()))
            .map(|(_, v)| v)
            .sum()
    }
}

/// What the attack minimizes besides the input distance.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    /// `‖norm(E_x′) − target‖²`.
    TargetExplanation(Heatmap),
    /// Relevance of `norm(E_x′)` inside the region.
    BlankSquare(Region),
}

/// Outcome of one attack run.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub adversarial: Tensor,
    /// Total loss (explanation term plus γ-weighted distance) before each step.
    pub loss_trace: Vec<f64>,
    /// Explanation term alone before each step.
    pub explanation_loss: Vec<f64>,
    pub betas: Vec<f64>,
    pub gamma: f64,
    /// Predicted class of the original input.
    pub label: usize,
    pub adversarial_label: usize,
    pub label_preserved: bool,
    /// Normalized ReLU-mode explanation of the original input for `label`.
    pub start_map: Heatmap,
    /// Normalized ReLU-mode explanation of the adversarial input for `label`.
    pub final_map: Heatmap,
    pub image_mse: f64,
}

pub(crate) fn iteration_seed(seed: u64, t: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (t as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// γ at which the pull of the distance term on a pixel displaced by
/// `√reference_mse` matches the largest pull of the explanation term at the
/// first iteration.
fn auto_gamma(cfg: &AttackConfig, grad: &[f64]) -> f64 {
    let pull = match cfg.step {
        StepRule::Gradient => grad.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        StepRule::Normalized | StepRule::Sign => 1.0,
    };
    pull / (2.0 * cfg.reference_mse.sqrt())
}

fn objective_on_tape<'t>(tape: &'t Tape, map: Var<'t>, objective: &Objective) -> Result<Var<'t>> {
    match objective {
        Objective::TargetExplanation(target) => {
            let t = Tensor::new(vec![target.rows(), target.cols()], target.values().to_vec())?;
            Ok(map.sub(tape.constant(t))?.square().sum())
        }
        Objective::BlankSquare(region) => {
            let s = map.shape();
            let mask = Tensor::new(s.clone(), region.mask(s[0], s[1]))?;
            Ok(map.mul(tape.constant(mask))?.sum())
        }
    }
}

/// Explanation term of the attack loss at `x` and its gradient with respect
/// to `x`, with the network in Softplus mode at `beta`. `seed` drives the
/// noise of sampling methods.
pub fn explanation_loss_grad(
    net: &Network,
    x: &Tensor,
    class: usize,
    explainer: &Explainer,
    objective: &Objective,
    beta: f64,
    seed: u64,
) -> Result<(f64, Tensor)> {
    let soft = net.set_activation_mode(ActivationKind::softplus(beta)?)?;
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let map = explainer.map_on_tape(&soft, &tape, xv, class, seed)?;
    let loss = objective_on_tape(&tape, map, objective)?;
    let grad = tape.grad(loss, &[xv], GradOptions::default())?[0].value();
    Ok((loss.item(), std::sync::Arc::unwrap_or_clone(grad)))
}

/// Runs the attack loop for any objective.
pub fn attack(
    net: &Network,
    x: &Tensor,
    explainer: &Explainer,
    objective: &Objective,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let [lo, hi] = cfg.clamp;
    if let Some(v) = x.data().iter().find(|&&v| v < lo || v > hi) {
        return Err(Error::InvalidParameter(format!("input value {v} outside clamp range [{lo}, {hi}]")));
    }
    let relu = net.set_activation_mode(ActivationKind::Relu)?;
    let label = relu.predict_class(x)?;
    let start_map = explainer.explain(&relu, x, label)?;
    match objective {
        Objective::TargetExplanation(t) => {
            start_map.check_same_shape(t, "attack target")?;
            if !t.is_normalized() {
                return Err(Error::NotNormalized);
            }
        }
        Objective::BlankSquare(r) => {
            if r.rows == 0 || r.cols == 0 || r.row + r.rows > start_map.rows() || r.col + r.cols > start_map.cols() {
                return Err(Error::InvalidParameter(format!("region {r:?} outside the map")));
            }
        }
    }

    let mut gamma = cfg.gamma;
    let mut adv = x.clone();
    let mut loss_trace = Vec::with_capacity(cfg.iters);
    let mut explanation_loss = Vec::with_capacity(cfg.iters);
    let mut betas = Vec::with_capacity(cfg.iters);
    for t in 0..cfg.iters {
        let abort = |reason: String| Error::AttackAborted { iteration: t, reason };
        let beta = cfg.beta(t);
        betas.push(beta);
        let (le, grad) = match explanation_loss_grad(net, &adv, label, explainer, objective, beta, iteration_seed(cfg.seed, t)) {
            Err(Error::DegenerateExplanation) => return Err(abort("degenerate explanation".into())),
            other => other?,
        };
        if !le.is_finite() {
            return Err(abort(format!("loss {le}")));
        }
        if let Some(v) = grad.data().iter().find(|v| !v.is_finite()) {
            return Err(abort(format!("gradient component {v}")));
        }
        let g = *gamma.get_or_insert_with(|| auto_gamma(cfg, grad.data()));
        let dist: f64 = adv.data().iter().zip(x.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        explanation_loss.push(le);
        loss_trace.push(le + g * dist);

        let step: Vec<f64> = match cfg.step {
            StepRule::Gradient => grad.data().iter().map(|d| cfg.eta * d).collect(),
            StepRule::Normalized => {
                let m = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let scale = if m > 0.0 { cfg.eta / m } else { 0.0 };
                grad.data().iter().map(|d| scale * d).collect()
            }
            StepRule::Sign => grad
                .data()
                .iter()
                .map(|&d| if d == 0.0 { 0.0 } else { cfg.eta * d.signum() })
                .collect(),
        };
        // gradient step on the explanation term, exact proximal step on the
        // distance term (stable for any γ)
        let shrink = 2.0 * cfg.eta * g;
        for ((a, d), &x0) in adv.data_mut().iter_mut().zip(step).zip(x.data()) {
            *a = ((*a - d + shrink * x0) / (1.0 + shrink)).clamp(lo, hi);
        }
    }

    let adversarial_label = relu.predict_class(&adv)?;
    let final_map = explainer.explain(&relu, &adv, label)?;
    Ok(AttackResult {
        image_mse: metrics::image_mse(x, &adv)?,
        adversarial: adv,
        loss_trace,
        explanation_loss,
        betas,
        gamma: gamma.unwrap_or(0.0),
        label,
        adversarial_label,
        label_preserved: adversarial_label == label,
        start_map,
        final_map,
    })
}

/// Pushes the explanation of `x` toward `target` (a normalized map).
pub fn attack_target(
    net: &Network,
    x: &Tensor,
    explainer: &Explainer,
    target: &Heatmap,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    attack(net, x, explainer, &Objective::TargetExplanation(target.clone()), cfg)
}

/// Blank-square attack outcome with its relevance bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct BlankSquareResult {
    pub result: AttackResult,
    pub region: Region,
    pub relevance_before: f64,
    pub relevance_after: f64,
}

impl BlankSquareResult {
    /// In-region relevance after the attack over in-region relevance before.
    pub fn preserved_ratio(&self) -> f64 {
        self.relevance_after / self.relevance_before
    }
}

/// Drives relevance out of the centered quarter-area square.
pub fn attack_blank_square(
    net: &Network,
    x: &Tensor,
    explainer: &Explainer,
    cfg: &AttackConfig,
) -> Result<BlankSquareResult> {
    let [rows, cols] = explain::map_shape(x.shape())?;
    attack_blank_region(net, x, explainer, Region::centered_quarter(rows, cols), cfg)
}

pub fn attack_blank_region(
    net: &Network,
    x: &Tensor,
    explainer: &Explainer,
    region: Region,
    cfg: &AttackConfig,
) -> Result<BlankSquareResult> {
    let result = attack(net, x, explainer, &Objective::BlankSquare(region), cfg)?;
    let relevance_before = region.total(&result.start_map);
    let relevance_after = region.total(&result.final_map);
    Ok(BlankSquareResult {
        result,
        region,
        relevance_before,
        relevance_after,
    })
}

/// Metrics of one attacked input under the attacked method and another one.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferOutcome {
    pub result: AttackResult,
    /// Measured with the attacked method.
    pub attacked: MetricRecord,
    /// Measured with the evaluated method.
    pub evaluated: MetricRecord,
}

/// Attacks `attacked` toward its own explanation of `target_image`, then
/// scores the adversarial input with both methods against their respective
/// explanations of `target_image`.
pub fn attack_transfer(
    net: &Network,
    x: &Tensor,
    target_image: &Tensor,
    attacked: &Explainer,
    evaluated: &Explainer,
    cfg: &AttackConfig,
    topk: f64,
) -> Result<TransferOutcome> {
    let relu = net.set_activation_mode(ActivationKind::Relu)?;
    let target_class = relu.predict_class(target_image)?;
    let target_a = attacked.explain(&relu, target_image, target_class)?;
    let result = attack_target(net, x, attacked, &target_a, cfg)?;
    let score = |e: &Explainer, target: &Heatmap, start: &Heatmap| -> Result<MetricRecord> {
        let adv = e.explain(&relu, &result.adversarial, result.label)?;
        MetricRecord::compute(target, start, &adv, x, &result.adversarial, topk)
    };
    let attacked_rec = MetricRecord::compute(&target_a, &result.start_map, &result.final_map, x, &result.adversarial, topk)?;
    let evaluated_rec = if evaluated == attacked {
        attacked_rec
    } else {
        let target_b = evaluated.explain(&relu, target_image, target_class)?;
        let start_b = evaluated.explain(&relu, x, result.label)?;
        score(evaluated, &target_b, &start_b)?
    };
    Ok(TransferOutcome {
        result,
        attacked: attacked_rec,
        evaluated: evaluated_rec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, LayerSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_net(seed: u64) -> Network {
        let arch = Architecture {
            input: vec![1, 8, 8],
            classes: 3,
            layers: vec![
                LayerSpec::Conv {
                    kernel: [3, 3],
                    in_channels: 1,
                    out_channels: 4,
                    stride: 1,
                    bias: true,
                },
                LayerSpec::Activation,
                LayerSpec::MaxPool { window: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 36,
                    outputs: 3,
                    bias: true,
                },
            ],
        };
        Network::init(arch, seed).unwrap()
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn cfg(iters: usize) -> AttackConfig {
        AttackConfig {
            iters,
            eta: 0.01,
            ..AttackConfig::default()
        }
    }

    fn target(net: &Network, seed: u64) -> Heatmap {
        let x = image(seed);
        let c = net.predict_class(&x).unwrap();
        explain::explain_normalized(net, &x, c, &ExplainerSpec::Saliency).unwrap()
    }

    #[test]
    fn zero_iterations_change_nothing() {
        let net = small_net(1);
        let x = image(2);
        let e = Explainer::Single(ExplainerSpec::Saliency);
        let t = target(&net, 3);
        let r = attack_target(&net, &x, &e, &t, &cfg(0)).unwrap();
        assert_eq!(r.adversarial, x);
        assert_eq!(r.image_mse, 0.0);
        assert_eq!(r.final_map, r.start_map);
        assert!(r.loss_trace.is_empty());
        let b = attack_blank_square(&net, &x, &e, &cfg(0)).unwrap();
        assert_eq!(b.preserved_ratio(), 1.0);
    }

    #[test]
    fn huge_gamma_pins_the_input() {
        let net = small_net(1);
        let x = image(2);
        let c = AttackConfig {
            gamma: Some(1e9),
            ..cfg(50)
        };
        let r = attack_target(&net, &x, &ExplainerSpec::Saliency.into(), &target(&net, 3), &c).unwrap();
        assert!(r.image_mse <= 1e-10, "{}", r.image_mse);
    }

    #[test]
    fn attack_reduces_loss_and_keeps_network_and_range() {
        let net = small_net(4);
        let before = net.checksum();
        let x = image(5);
        let t = target(&net, 6);
        let c = AttackConfig {
            clamp: [0.0, 1.0],
            ..cfg(200)
        };
        let r = attack_target(&net, &x, &ExplainerSpec::Saliency.into(), &t, &c).unwrap();
        assert_eq!(net.checksum(), before);
        assert!(r.adversarial.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(r.explanation_loss.last().unwrap() < &r.explanation_loss[0]);
        assert_eq!(r.betas.len(), 200);
        assert_eq!(r.betas[0], 10.0);
        assert!((r.betas[199] - 100.0).abs() < 1e-12);
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let net = small_net(7);
        let x = image(8);
        let t = target(&net, 9);
        let e = Explainer::Single(ExplainerSpec::SmoothGrad {
            sigma: 0.1,
            samples: 2,
            seed: 0,
        });
        let a = attack_target(&net, &x, &e, &t, &cfg(5)).unwrap();
        let b = attack_target(&net, &x, &e, &t, &cfg(5)).unwrap();
        assert!(a.adversarial.data().iter().zip(b.adversarial.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn region_geometry() {
        let r = Region::centered_quarter(28, 28);
        assert_eq!((r.row, r.col, r.rows, r.cols), (7, 7, 14, 14));
        assert!(r.contains(7, 20) && !r.contains(6, 10) && !r.contains(21, 10));
        assert_eq!(r.mask(28, 28).iter().sum::<f64>(), 196.0);
    }

    #[test]
    fn transfer_to_same_method_is_identical() {
        let net = small_net(10);
        let (x, xt) = (image(11), image(12));
        let e = Explainer::Single(ExplainerSpec::GuidedBackprop);
        let out = attack_transfer(&net, &x, &xt, &e, &e, &cfg(3), 0.1).unwrap();
        assert_eq!(out.attacked, out.evaluated);
        let zero = attack_transfer(&net, &x, &xt, &e, &ExplainerSpec::lrp().into(), &cfg(0), 0.1).unwrap();
        for r in [zero.attacked, zero.evaluated] {
            assert_eq!((r.delta_mse, r.delta_pcc, r.delta_topk, r.image_mse), (0.0, 0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn var_ensembles_cannot_be_attacked() {
        let net = small_net(1);
        let e = Ensemble::new(
            vec![ExplainerSpec::Saliency, ExplainerSpec::GuidedBackprop],
            aggregate::AggregationKind::Var,
        )
        .unwrap();
        let t = target(&net, 3);
        assert!(matches!(
            attack_target(&net, &image(2), &e.into(), &t, &cfg(1)),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig { eta: 0.0, ..cfg(1) }.validate().is_err());
        assert!(AttackConfig {
            beta_start: 200.0,
            ..cfg(1)
        }
        .validate()
        .is_err());
        assert!(AttackConfig {
            clamp: [1.0, 0.0],
            ..cfg(1)
        }
        .validate()
        .is_err());
        let c: AttackConfig = serde_json::from_str(r#"{"iters": 3}"#).unwrap();
        assert_eq!(c.eta, 1e-3);
        assert!(serde_json::from_str::<AttackConfig>(r#"{"itrs": 3}"#).is_err());
    }
}
