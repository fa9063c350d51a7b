//! Gradient-based explanation methods. Every method maps
//! `(network, input, class)` to a [`Heatmap`] over the input's spatial grid.
//!
//! The methods are built as expressions on an autodiff [`Tape`], so the same
//! code produces plain heatmaps and the differentiable maps that attacks
//! optimize through.

mod heatmap;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use heatmap::{normalize, Heatmap, NORMALIZED_TOL};

use crate::autodiff::{maxpool_indices, ActivationKind, GradOptions, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{LayerSpec, Network};

pub const DEFAULT_IG_STEPS: usize = 32;
pub const DEFAULT_SG_SIGMA: f64 = 0.1;
pub const DEFAULT_SG_SAMPLES: usize = 32;
pub const DEFAULT_LRP_EPSILON: f64 = 1e-6;

fn default_ig_steps() -> usize {
    DEFAULT_IG_STEPS
}
fn default_sg_sigma() -> f64 {
    DEFAULT_SG_SIGMA
}
fn default_sg_samples() -> usize {
    DEFAULT_SG_SAMPLES
}
fn default_lrp_epsilon() -> f64 {
    DEFAULT_LRP_EPSILON
}

/// An explanation method and its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", deny_unknown_fields)]
pub enum ExplainerSpec {
    #[serde(rename = "SM")]
    Saliency,
    #[serde(rename = "GB")]
    GuidedBackprop,
    /// Baseline is a constant image with every pixel set to `baseline`.
    #[serde(rename = "IG")]
    IntegratedGradients {
        #[serde(default)]
        baseline: f64,
        #[serde(default = "default_ig_steps")]
        steps: usize,
    },
    #[serde(rename = "SG")]
    SmoothGrad {
        #[serde(default = "default_sg_sigma")]
        sigma: f64,
        #[serde(default = "default_sg_samples")]
        samples: usize,
        #[serde(default)]
        seed: u64,
    },
    #[serde(rename = "LRP")]
    Lrp {
        #[serde(default = "default_lrp_epsilon")]
        epsilon: f64,
    },
}

impl ExplainerSpec {
    pub fn integrated_gradients() -> Self {
        ExplainerSpec::IntegratedGradients {
            baseline: 0.0,
            steps: DEFAULT_IG_STEPS,
        }
    }

    pub fn smoothgrad(seed: u64) -> Self {
        ExplainerSpec::SmoothGrad {
            sigma: DEFAULT_SG_SIGMA,
            samples: DEFAULT_SG_SAMPLES,
            seed,
        }
    }

    pub fn lrp() -> Self {
        ExplainerSpec::Lrp {
            epsilon: DEFAULT_LRP_EPSILON,
        }
    }

    /// Short name: `SM`, `GB`, `IG`, `SG` or `LRP`.
    pub fn name(&self) -> &'static str {
        match self {
            ExplainerSpec::Saliency => "SM",
            ExplainerSpec::GuidedBackprop => "GB",
            ExplainerSpec::IntegratedGradients { .. } => "IG",
            ExplainerSpec::SmoothGrad { .. } => "SG",
            ExplainerSpec::Lrp { .. } => "LRP",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidParameter(what));
        match *self {
            ExplainerSpec::IntegratedGradients { steps, baseline } => {
                if steps == 0 {
                    return bad("IG steps must be at least 1".into());
                }
                if !baseline.is_finite() {
                    return bad(format!("IG baseline {baseline}"));
                }
            }
            ExplainerSpec::SmoothGrad { sigma, samples, .. } => {
                if samples == 0 {
                    return bad("SG samples must be at least 1".into());
                }
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return bad(format!("SG sigma {sigma}"));
                }
            }
            ExplainerSpec::Lrp { epsilon } if !(epsilon >= 0.0 && epsilon.is_finite()) => {
                return bad(format!("LRP epsilon {epsilon}"));
            }
            _ => {}
        }
        Ok(())
    }

    /// Same method with its noise seed replaced (no-op for noiseless methods).
    pub fn with_seed(&self, new_seed: u64) -> Self {
        match *self {
            ExplainerSpec::SmoothGrad { sigma, samples, .. } => ExplainerSpec::SmoothGrad {
                sigma,
                samples,
                seed: new_seed,
            },
            ref other => other.clone(),
        }
    }
}

/// Reads a list whose entries are method names (`"SM"`) or full spec objects.
pub(crate) fn deserialize_specs<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<ExplainerSpec>, D::Error> {
    use serde::de::Error as _;
    Vec::<serde_json::Value>::deserialize(d)?
        .into_iter()
        .map(|v| match v {
            serde_json::Value::String(s) => s.parse().map_err(D::Error::custom),
            other => ExplainerSpec::deserialize(other).map_err(D::Error::custom),
        })
        .collect()
}

impl fmt::Display for ExplainerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExplainerSpec {
    type Err = Error;

    /// Parses a method name with default parameters.
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SM" | "SALIENCY" => Ok(ExplainerSpec::Saliency),
            "GB" | "GUIDED" => Ok(ExplainerSpec::GuidedBackprop),
            "IG" => Ok(ExplainerSpec::integrated_gradients()),
            "SG" | "SMOOTHGRAD" => Ok(ExplainerSpec::smoothgrad(0)),
            "LRP" => Ok(ExplainerSpec::lrp()),
            _ => Err(Error::InvalidParameter(format!(
                "unknown explanation method {s:?} (expected SM, GB, IG, SG or LRP)"
            ))),
        }
    }
}

/// Spatial shape of the map produced for inputs of shape `input`.
pub fn map_shape(input: &[usize]) -> Result<[usize; 2]> {
    match *input {
        [_, h, w] => Ok([h, w]),
        [n] => Ok([1, n]),
        _ => Err(Error::Unsupported(format!("explanations for inputs shaped {input:?}"))),
    }
}

/// Reduces an attribution shaped like the input to a `[rows, cols]` map.
/// Single-channel attributions keep their sign; several channels are
/// combined by summing absolute values.
fn reduce_channels<'t>(attr: Var<'t>) -> Result<Var<'t>> {
    let shape = attr.shape();
    let [rows, cols] = map_shape(&shape)?;
    match shape.len() {
        3 if shape[0] > 1 => attr.abs().sum_leading().reshape(&[rows, cols]),
        _ => attr.reshape(&[rows, cols]),
    }
}

fn onehot(classes: usize, class: usize) -> Tensor {
    let mut t = Tensor::zeros(&[classes]);
    t.data_mut()[class] = 1.0;
    t
}

fn target_logit<'t>(net: &Network, tape: &'t Tape, x: Var<'t>, class: usize) -> Result<Var<'t>> {
    let logits = net.forward(tape, x)?.logits;
    Ok(logits.mul(tape.constant(onehot(net.classes(), class)))?.sum())
}

fn input_grad<'t>(
    net: &Network,
    tape: &'t Tape,
    x: Var<'t>,
    class: usize,
    opts: GradOptions,
) -> Result<Var<'t>> {
    let y = target_logit(net, tape, x, class)?;
    Ok(tape.grad(y, &[x], opts)?[0])
}

/// Attribution shaped like `x` (before channel reduction).
///
/// With `second_order` set the result can be differentiated again with
/// respect to `x`; that requires the network to be in a smooth activation mode.
pub(crate) fn attribution_on_tape<'t>(
    net: &Network,
    tape: &'t Tape,
    x: Var<'t>,
    class: usize,
    spec: &ExplainerSpec,
    second_order: bool,
) -> Result<Var<'t>> {
    spec.validate()?;
    net.check_class(class)?;
    let opts = GradOptions {
        guided: false,
        smooth: second_order,
    };
    match *spec {
        ExplainerSpec::Saliency => input_grad(net, tape, x, class, opts),
        ExplainerSpec::GuidedBackprop => input_grad(
            net,
            tape,
            x,
            class,
            GradOptions {
                guided: true,
                ..opts
            },
        ),
        ExplainerSpec::IntegratedGradients { baseline, steps } => {
            let base = tape.constant(Tensor::filled(&x.shape(), baseline));
            ig_on_tape(net, tape, x, base, class, steps, opts)
        }
        ExplainerSpec::SmoothGrad { sigma: 0.0, .. } => input_grad(net, tape, x, class, opts),
        ExplainerSpec::SmoothGrad { sigma, samples, seed } => {
            let noise = sg_noise(&x.shape(), sigma, samples, seed)?;
            let mut total: Option<Var<'t>> = None;
            for xi in noise {
                let g = input_grad(net, tape, x.add(tape.constant(xi))?, class, opts)?;
                total = Some(match total {
                    Some(t) => t.add(g)?,
                    None => g,
                });
            }
            Ok(total.expect("at least one sample").scale(1.0 / samples as f64))
        }
        ExplainerSpec::Lrp { epsilon } => lrp_on_tape(net, tape, x, class, epsilon, second_order),
    }
}

fn ig_on_tape<'t>(
    net: &Network,
    tape: &'t Tape,
    x: Var<'t>,
    base: Var<'t>,
    class: usize,
    steps: usize,
    opts: GradOptions,
) -> Result<Var<'t>> {
    let diff = x.sub(base)?;
    let mut total: Option<Var<'t>> = None;
    for k in 0..steps {
        let alpha = (k as f64 + 0.5) / steps as f64;
        let xk = base.add(diff.scale(alpha))?;
        let g = input_grad(net, tape, xk, class, opts)?;
        total = Some(match total {
            Some(t) => t.add(g)?,
            None => g,
        });
    }
    let mean = total.expect("at least one step").scale(1.0 / steps as f64);
    diff.mul(mean)
}

/// The `samples` noise tensors SmoothGrad adds, in order.
pub fn sg_noise(shape: &[usize], sigma: f64, samples: usize, seed: u64) -> Result<Vec<Tensor>> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(format!("SG sigma: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    (0..samples)
        .map(|_| Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect()))
        .collect()
}

/// ε-rule relevance propagation from `logit_class` back to the input.
///
/// For an affine layer `z = W a + b` the upper relevance `R` is passed down as
/// `a ⊙ Wᵀ (R / (z + ε·sign z))`; activations pass relevance through
/// unchanged, max-pooling routes it to the pooled argmax and average pooling
/// spreads it uniformly over the window.
///
/// Softplus is a poor surrogate here: `softplus(0) > 0`, so the rule's
/// division by `z` blows up near `z = 0`. When a twice-differentiable map is
/// requested from a Softplus network, the propagation instead runs on the
/// same weights with `z·σ(βz)` activations, which also tend to ReLU as β
/// grows but vanish at zero, keeping `a / z = σ(βz)` bounded.
fn lrp_on_tape<'t>(
    net: &Network,
    tape: &'t Tape,
    x: Var<'t>,
    class: usize,
    epsilon: f64,
    second_order: bool,
) -> Result<Var<'t>> {
    let trace = match net.activation() {
        ActivationKind::Softplus { beta } if second_order => {
            net.forward_with(tape, x, &|z: Var<'t>| z.mul(z.sigmoid(beta)?))?
        }
        _ => net.forward(tape, x)?,
    };
    let mut r = trace.logits.mul(tape.constant(onehot(net.classes(), class)))?;
    for (layer, step) in net.architecture().layers.iter().zip(&trace.steps).rev() {
        let in_shape = step.input.shape();
        r = match *layer {
            LayerSpec::Dense { .. } | LayerSpec::Conv { .. } => {
                let z = step.output.value();
                let stab = z.map(|v| {
                    if v > 0.0 {
                        epsilon
                    } else if v < 0.0 {
                        -epsilon
                    } else if epsilon > 0.0 {
                        epsilon
                    } else {
                        1.0
                    }
                });
                let s = r.mul(step.output.add(tape.constant(stab))?.recip())?;
                let w = step.weight.expect("affine layer weight");
                let c = match *layer {
                    LayerSpec::Dense { .. } => w.matvec_t(s)?,
                    LayerSpec::Conv { stride, .. } => s.conv2d_transpose(w, stride, &in_shape)?,
                    _ => unreachable!(),
                };
                step.input.mul(c)?
            }
            LayerSpec::Activation => r,
            LayerSpec::MaxPool { window } => {
                let idx = maxpool_indices(step.input.value().data(), in_shape[0], in_shape[1], in_shape[2], window);
                r.scatter(idx.into(), &in_shape)
            }
            LayerSpec::AvgPool { window } => r.avgpool_transpose(window, &in_shape)?,
            LayerSpec::Flatten => r.reshape(&in_shape)?,
        };
    }
    Ok(r)
}

/// Raw `[rows, cols]` map as a tape expression.
pub(crate) fn raw_map_on_tape<'t>(
    net: &Network,
    tape: &'t Tape,
    x: Var<'t>,
    class: usize,
    spec: &ExplainerSpec,
    second_order: bool,
) -> Result<Var<'t>> {
    reduce_channels(attribution_on_tape(net, tape, x, class, spec, second_order)?)
}

/// `|map| / Σ|map|` as a tape expression.
pub(crate) fn normalize_on_tape(map: Var<'_>) -> Result<Var<'_>> {
    let a = map.abs();
    let total = a.sum();
    if total.item() == 0.0 {
        return Err(Error::DegenerateExplanation);
    }
    a.mul_scalar(total.recip())
}

pub(crate) fn to_heatmap(map: Var<'_>) -> Result<Heatmap> {
    let v = map.value();
    let s = v.shape();
    Heatmap::new(s[0], s[1], v.data().to_vec())
}

fn check_input(net: &Network, x: &Tensor) -> Result<()> {
    if x.shape() != net.input_shape() {
        return Err(Error::ShapeMismatch {
            op: "explain input",
            lhs: x.shape().to_vec(),
            rhs: net.input_shape().to_vec(),
        });
    }
    Ok(())
}

/// Full attribution shaped like `x`, before channel reduction.
pub fn attribution(net: &Network, x: &Tensor, class: usize, spec: &ExplainerSpec) -> Result<Tensor> {
    check_input(net, x)?;
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let a = attribution_on_tape(net, &tape, xv, class, spec, false)?;
    Ok((*a.value()).clone())
}

/// Raw heatmap of `x` for `class` using the network's current activation mode.
pub fn explain(net: &Network, x: &Tensor, class: usize, spec: &ExplainerSpec) -> Result<Heatmap> {
    check_input(net, x)?;
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    to_heatmap(raw_map_on_tape(net, &tape, xv, class, spec, false)?)
}

/// Normalized heatmap; see [`Heatmap::normalize`].
pub fn explain_normalized(net: &Network, x: &Tensor, class: usize, spec: &ExplainerSpec) -> Result<Heatmap> {
    explain(net, x, class, spec)?.normalize()
}

/// `∂logit_class / ∂x`.
pub fn saliency(net: &Network, x: &Tensor, class: usize) -> Result<Heatmap> {
    explain(net, x, class, &ExplainerSpec::Saliency)
}

/// Saliency with negative gradients clamped at every activation.
pub fn guided_backprop(net: &Network, x: &Tensor, class: usize) -> Result<Heatmap> {
    explain(net, x, class, &ExplainerSpec::GuidedBackprop)
}

/// `(x − baseline) ⊙` the mean gradient at `steps` midpoints of the straight
/// path from `baseline` to `x`.
pub fn integrated_gradients(
    net: &Network,
    x: &Tensor,
    class: usize,
    baseline: &Tensor,
    steps: usize,
) -> Result<Heatmap> {
    check_input(net, x)?;
    if baseline.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "integrated gradients baseline",
            lhs: x.shape().to_vec(),
            rhs: baseline.shape().to_vec(),
        });
    }
    if steps == 0 {
        return Err(Error::InvalidParameter("IG steps must be at least 1".into()));
    }
    net.check_class(class)?;
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let base = tape.constant(baseline.clone());
    let a = ig_on_tape(net, &tape, xv, base, class, steps, GradOptions::default())?;
    to_heatmap(reduce_channels(a)?)
}

/// Mean saliency over `samples` copies of `x` with Gaussian noise of standard
/// deviation `sigma`, drawn from a generator seeded with `seed`.
pub fn smoothgrad(net: &Network, x: &Tensor, class: usize, sigma: f64, samples: usize, seed: u64) -> Result<Heatmap> {
    explain(net, x, class, &ExplainerSpec::SmoothGrad { sigma, samples, seed })
}

/// ε-rule layer-wise relevance propagation.
pub fn lrp(net: &Network, x: &Tensor, class: usize, epsilon: f64) -> Result<Heatmap> {
    explain(net, x, class, &ExplainerSpec::Lrp { epsilon })
}
