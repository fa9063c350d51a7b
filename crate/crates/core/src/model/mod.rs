//! Small feed-forward classifiers: architecture description, parameters,
//! tape-recorded forward pass, weight files and a minimal SGD trainer.

mod io;
mod train;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ActivationKind, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use io::{load_model, load_weights, save_model, save_weights, MAGIC};
pub use train::{train, TrainConfig, TrainOutcome};

fn default_true() -> bool {
    true
}

fn default_stride() -> usize {
    1
}

/// One layer of a feed-forward network. Activation layers use the
/// network-wide [`ActivationKind`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Conv {
        kernel: [usize; 2],
        in_channels: usize,
        out_channels: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    MaxPool {
        window: usize,
    },
    AvgPool {
        window: usize,
    },
    Activation,
    Flatten,
}

impl LayerSpec {
    pub(crate) fn tag(&self) -> u8 {
        match self {
            LayerSpec::Dense { .. } => 0,
            LayerSpec::Conv { .. } => 1,
            LayerSpec::MaxPool { .. } => 2,
            LayerSpec::AvgPool { .. } => 3,
            LayerSpec::Activation => 4,
            LayerSpec::Flatten => 5,
        }
    }

    /// Weight shape, if the layer has parameters.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs, .. } => Some(vec![outputs, inputs]),
            LayerSpec::Conv {
                kernel,
                in_channels,
                out_channels,
                ..
            } => Some(vec![out_channels, in_channels, kernel[0], kernel[1]]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense { outputs, bias: true, .. } => Some(outputs),
            LayerSpec::Conv {
                out_channels,
                bias: true,
                ..
            } => Some(out_channels),
            _ => None,
        }
    }
}

/// Input shape, class count and layer list of a network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// `[C, H, W]` for images or `[n]` for plain vectors.
    pub input: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// conv(5×5, 1→8) → act → maxpool(2) → conv(5×5, 8→16) → act → maxpool(2)
    /// → flatten → dense(256→10), for 28×28 grayscale digits.
    pub fn reference() -> Self {
        Architecture {
            input: vec![1, 28, 28],
            classes: 10,
            layers: vec![
                LayerSpec::Conv {
                    kernel: [5, 5],
                    in_channels: 1,
                    out_channels: 8,
                    stride: 1,
                    bias: true,
                },
                LayerSpec::Activation,
                LayerSpec::MaxPool { window: 2 },
                LayerSpec::Conv {
                    kernel: [5, 5],
                    in_channels: 8,
                    out_channels: 16,
                    stride: 1,
                    bias: true,
                },
                LayerSpec::Activation,
                LayerSpec::MaxPool { window: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 256,
                    outputs: 10,
                    bias: true,
                },
            ],
        }
    }

    /// Output shape after every layer; fails if consecutive layers do not compose.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let bad = |i: usize, msg: String| Error::Architecture(format!("layer {i}: {msg}"));
        if !(self.input.len() == 1 || self.input.len() == 3) || self.input.contains(&0) {
            return Err(Error::Architecture(format!(
                "input shape must be [n] or [C, H, W], got {:?}",
                self.input
            )));
        }
        let image_input = self.input.len() == 3;
        let mut flattens = 0;
        let mut seen_dense = false;
        let mut cur = self.input.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::Dense { inputs, outputs, .. } => {
                    if image_input && flattens == 0 && !seen_dense {
                        return Err(bad(i, "dense layer needs a flatten before it".into()));
                    }
                    if cur != [inputs] {
                        return Err(bad(i, format!("dense expects [{inputs}], got {cur:?}")));
                    }
                    seen_dense = true;
                    vec![outputs]
                }
                LayerSpec::Conv {
                    kernel,
                    in_channels,
                    out_channels,
                    stride,
                    ..
                } => {
                    if cur.len() != 3 || cur[0] != in_channels {
                        return Err(bad(i, format!("conv expects [{in_channels}, H, W], got {cur:?}")));
                    }
                    if stride == 0 || cur[1] < kernel[0] || cur[2] < kernel[1] {
                        return Err(bad(i, format!("kernel {kernel:?} does not fit {cur:?}")));
                    }
                    vec![
                        out_channels,
                        (cur[1] - kernel[0]) / stride + 1,
                        (cur[2] - kernel[1]) / stride + 1,
                    ]
                }
                LayerSpec::MaxPool { window } | LayerSpec::AvgPool { window } => {
                    if cur.len() != 3 || window == 0 || cur[1] < window || cur[2] < window {
                        return Err(bad(i, format!("pool window {window} does not fit {cur:?}")));
                    }
                    vec![cur[0], cur[1] / window, cur[2] / window]
                }
                LayerSpec::Activation => cur,
                LayerSpec::Flatten => {
                    flattens += 1;
                    if flattens > 1 {
                        return Err(bad(i, "more than one flatten".into()));
                    }
                    vec![cur.iter().product()]
                }
            };
            out.push(cur.clone());
        }
        if cur != [self.classes] {
            return Err(Error::Architecture(format!(
                "final output {cur:?} does not match {} classes",
                self.classes
            )));
        }
        Ok(out)
    }
}

/// Parameters of one layer.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LayerParams {
    pub weight: Option<Arc<Tensor>>,
    pub bias: Option<Arc<Tensor>>,
}

/// A classifier: architecture, parameters and the activation mode used by
/// all activation layers. Immutable once built; share it freely across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: Architecture,
    params: Vec<LayerParams>,
    activation: ActivationKind,
}

/// Values recorded while running a network on a tape.
pub struct Trace<'t> {
    pub steps: Vec<TraceStep<'t>>,
    pub logits: Var<'t>,
}

/// Input, output and parameter handles of one layer in a [`Trace`].
#[derive(Clone, Copy, Debug)]
pub struct TraceStep<'t> {
    pub input: Var<'t>,
    pub output: Var<'t>,
    pub weight: Option<Var<'t>>,
    pub bias: Option<Var<'t>>,
}

impl Network {
    pub fn new(arch: Architecture, params: Vec<LayerParams>) -> Result<Self> {
        arch.shapes()?;
        if params.len() != arch.layers.len() {
            return Err(Error::Architecture(format!(
                "{} parameter sets for {} layers",
                params.len(),
                arch.layers.len()
            )));
        }
        for (i, (layer, p)) in arch.layers.iter().zip(&params).enumerate() {
            let want_w = layer.weight_shape();
            let got_w = p.weight.as_ref().map(|w| w.shape().to_vec());
            let want_b = layer.bias_len().map(|n| vec![n]);
            let got_b = p.bias.as_ref().map(|b| b.shape().to_vec());
            if want_w != got_w || want_b != got_b {
                return Err(Error::WeightShape {
                    layer: i,
                    detail: format!("expected weight {want_w:?} bias {want_b:?}, got {got_w:?} / {got_b:?}"),
                });
            }
            for t in p.weight.iter().chain(p.bias.iter()) {
                if let Some((index, &value)) = t.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
                    return Err(Error::NonFinite { index, value });
                }
            }
        }
        Ok(Network {
            arch,
            params,
            activation: ActivationKind::Relu,
        })
    }

    /// He-uniform weights and zero biases drawn from a seeded generator.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .layers
            .iter()
            .map(|layer| {
                let weight = layer.weight_shape().map(|shape| {
                    let fan_in: usize = shape[1..].iter().product();
                    let limit = (6.0 / fan_in as f64).sqrt();
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
                    Arc::new(Tensor::from_raw(shape, data))
                });
                let bias = layer.bias_len().map(|n| Arc::new(Tensor::zeros(&[n])));
                LayerParams { weight, bias }
            })
            .collect();
        Network::new(arch, params)
    }

    /// All parameters zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        let params = arch
            .layers
            .iter()
            .map(|layer| LayerParams {
                weight: layer.weight_shape().map(|s| Arc::new(Tensor::zeros(&s))),
                bias: layer.bias_len().map(|n| Arc::new(Tensor::zeros(&[n]))),
            })
            .collect();
        Network::new(arch, params)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.arch.input
    }

    /// Copy of the network whose activation layers evaluate with `mode`.
    /// Parameters are shared, not copied.
    pub fn set_activation_mode(&self, mode: ActivationKind) -> Result<Network> {
        mode.validate()?;
        Ok(Network {
            arch: self.arch.clone(),
            params: self.params.clone(),
            activation: mode,
        })
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for t in p.weight.iter().chain(p.bias.iter()) {
                for v in t.data() {
                    for byte in v.to_bits().to_le_bytes() {
                        h ^= byte as u64;
                        h = h.wrapping_mul(0x0100_0000_01b3);
                    }
                }
            }
        }
        h
    }

    pub(crate) fn check_input(&self, x: &[usize]) -> Result<()> {
        if x != self.arch.input.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "network input",
                lhs: x.to_vec(),
                rhs: self.arch.input.clone(),
            });
        }
        Ok(())
    }

    pub fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.arch.classes {
            return Err(Error::ClassOutOfRange {
                class,
                classes: self.arch.classes,
            });
        }
        Ok(())
    }

    /// Records the forward pass with parameters as constants.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Trace<'t>> {
        self.forward_impl(tape, x, false, &|v| self.activation.apply(v))
    }

    /// Records the forward pass with parameters as differentiable leaves.
    pub fn forward_trainable<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Trace<'t>> {
        self.forward_impl(tape, x, true, &|v| self.activation.apply(v))
    }

    /// Forward pass with a caller-supplied activation in place of the
    /// network's own mode.
    pub(crate) fn forward_with<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        activation: &dyn Fn(Var<'t>) -> Result<Var<'t>>,
    ) -> Result<Trace<'t>> {
        self.forward_impl(tape, x, false, activation)
    }

    fn forward_impl<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        trainable: bool,
        activation: &dyn Fn(Var<'t>) -> Result<Var<'t>>,
    ) -> Result<Trace<'t>> {
        self.check_input(&x.shape())?;
        let leaf = |t: &Arc<Tensor>| {
            if trainable {
                tape.var_shared(t.clone())
            } else {
                tape.constant_shared(t.clone())
            }
        };
        let mut cur = x;
        let mut steps = Vec::with_capacity(self.arch.layers.len());
        for (layer, p) in self.arch.layers.iter().zip(&self.params) {
            let input = cur;
            let weight = p.weight.as_ref().map(leaf);
            let bias = p.bias.as_ref().map(leaf);
            cur = match *layer {
                LayerSpec::Dense { .. } => {
                    let z = weight.expect("dense weight").matvec(cur)?;
                    match bias {
                        Some(b) => z.add(b)?,
                        None => z,
                    }
                }
                LayerSpec::Conv { stride, .. } => {
                    let z = cur.conv2d(weight.expect("conv kernel"), stride)?;
                    match bias {
                        Some(b) => z.add(b.expand_channels(&z.shape())?)?,
                        None => z,
                    }
                }
                LayerSpec::MaxPool { window } => cur.maxpool(window)?,
                LayerSpec::AvgPool { window } => cur.avgpool(window)?,
                LayerSpec::Activation => activation(cur)?,
                LayerSpec::Flatten => {
                    let n = cur.value().len();
                    cur.reshape(&[n])?
                }
            };
            steps.push(TraceStep {
                input,
                output: cur,
                weight,
                bias,
            });
        }
        Ok(Trace { steps, logits: cur })
    }

    /// Class logits for one input. Deterministic.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let trace = self.forward(&tape, xv)?;
        let logits = trace.logits.value();
        Ok((*logits).clone())
    }

    pub fn predict_class(&self, x: &Tensor) -> Result<usize> {
        Ok(self.predict(x)?.argmax())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_arch(inputs: usize, outputs: usize, bias: bool) -> Architecture {
        Architecture {
            input: vec![inputs],
            classes: outputs,
            layers: vec![LayerSpec::Dense { inputs, outputs, bias }],
        }
    }

    #[test]
    fn reference_architecture_composes() {
        let shapes = Architecture::reference().shapes().unwrap();
        assert_eq!(shapes[0], vec![8, 24, 24]);
        assert_eq!(shapes[5], vec![16, 4, 4]);
        assert_eq!(shapes.last().unwrap(), &vec![10]);
    }

    #[test]
    fn architecture_rejects_bad_compositions() {
        let mut a = Architecture::reference();
        a.layers.remove(6); // flatten
        assert!(matches!(a.shapes(), Err(Error::Architecture(_))));
        let mut a = Architecture::reference();
        a.layers.insert(6, LayerSpec::Flatten);
        assert!(a.shapes().is_err());
        let mut a = Architecture::reference();
        a.classes = 9;
        assert!(a.shapes().is_err());
    }

    #[test]
    fn zero_net_gives_zero_logits() {
        let net = Network::zeros(Architecture::reference()).unwrap();
        let x = Tensor::filled(&[1, 28, 28], 0.5);
        assert!(net.predict(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_dense_net() {
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let net = Network::new(
            dense_arch(3, 3, false),
            vec![LayerParams {
                weight: Some(Arc::new(eye)),
                bias: None,
            }],
        )
        .unwrap();
        let x = Tensor::vector(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(net.predict(&x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn predict_rejects_wrong_shape() {
        let net = Network::init(Architecture::reference(), 1).unwrap();
        assert!(matches!(
            net.predict(&Tensor::zeros(&[1, 27, 28])),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn activation_switch_leaves_parameters_alone() {
        let net = Network::init(Architecture::reference(), 3).unwrap();
        let x = Tensor::filled(&[1, 28, 28], 0.3);
        let relu = net.predict(&x).unwrap();
        let soft = net.set_activation_mode(ActivationKind::softplus(10.0).unwrap()).unwrap();
        assert_ne!(soft.predict(&x).unwrap(), relu);
        let back = soft.set_activation_mode(ActivationKind::Relu).unwrap();
        assert_eq!(back.predict(&x).unwrap(), relu);
        assert_eq!(back.checksum(), net.checksum());
        assert!(matches!(
            net.set_activation_mode(ActivationKind::Softplus { beta: 0.0 }),
            Err(Error::InvalidBeta(_))
        ));
    }

    #[test]
    fn huge_beta_matches_relu() {
        let net = Network::init(Architecture::reference(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::new(vec![1, 28, 28], (0..784).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let relu = net.predict(&x).unwrap();
        let soft = net
            .set_activation_mode(ActivationKind::softplus(1e6).unwrap())
            .unwrap()
            .predict(&x)
            .unwrap();
        for (a, b) in relu.data().iter().zip(soft.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn softplus_at_zero_input_without_bias() {
        let arch = Architecture {
            input: vec![2],
            classes: 3,
            layers: vec![
                LayerSpec::Dense { inputs: 2, outputs: 3, bias: false },
                LayerSpec::Activation,
            ],
        };
        let net = Network::init(arch, 5)
            .unwrap()
            .set_activation_mode(ActivationKind::softplus(1.0).unwrap())
            .unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2]));
        let trace = net.forward(&tape, x).unwrap();
        for v in trace.steps[1].output.value().data() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }
}
