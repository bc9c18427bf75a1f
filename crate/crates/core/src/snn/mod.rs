//! Spiking (and ReLU) network description, rate encoding, LIF dynamics and
//! the batched forward engine shared by evaluation and training.

mod encode;
mod forward;
mod lif;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Purpose, RandomStream, Tensor};

pub use encode::{poisson_encode, PoissonEncoder};
pub use forward::{
    ann_forward, predict, run_ann, run_snn, snn_forward, spike_rate, AnnRun, BatchStats, Cache, NormMode, RunOptions,
    SnnRun, StepObserver, Trajectory,
};
pub use lif::{lif_step, LifParams};

/// One layer of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    AvgPool {
        window: usize,
    },
    Lif {
        threshold: f64,
        leak: f64,
    },
    /// Per-time-step batch norm with a learnable scale only.
    BnttNorm {
        name: String,
        channels: usize,
        time_steps: usize,
        momentum: f64,
        eps: f64,
    },
    Relu,
    OutputAccumulator,
}

impl LayerSpec {
    /// Name of the layer owning trainable tensors, if any.
    pub fn name(&self) -> Option<&str> {
        match self {
            LayerSpec::Conv { name, .. } | LayerSpec::Linear { name, .. } | LayerSpec::BnttNorm { name, .. } => {
                Some(name)
            }
            _ => None,
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Linear { .. })
    }
}

pub fn weight_key(layer: &str) -> String {
    format!("{layer}.weight")
}

pub fn bias_key(layer: &str) -> String {
    format!("{layer}.bias")
}

pub fn gamma_key(layer: &str) -> String {
    format!("{layer}.gamma")
}

pub fn running_mean_key(layer: &str) -> String {
    format!("{layer}.running_mean")
}

pub fn running_var_key(layer: &str) -> String {
    format!("{layer}.running_var")
}

/// Ordered layer list plus what the network is for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// `vgg5`, `vgg9`, `mlp` or `custom`.
    pub architecture: String,
    pub dataset: String,
    /// Simulation length for SNNs; 0 for ANNs.
    pub time_steps: usize,
    /// `[channels, height, width]` of one input image.
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn is_snn(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::OutputAccumulator))
    }

    /// Per-sample output shape of every layer, after checking the chain.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::Structure(format!("layer {k}: {msg}"));
            cur = match layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if cur.len() != 3 || cur[0] != *in_channels {
                        return Err(bad(format!("conv expects {in_channels} channels, input is {cur:?}")));
                    }
                    if *stride == 0 || *kernel == 0 || cur[1] + 2 * padding < *kernel || cur[2] + 2 * padding < *kernel
                    {
                        return Err(bad(format!("conv kernel {kernel} stride {stride} on {cur:?}")));
                    }
                    let oh = (cur[1] + 2 * padding - kernel) / stride + 1;
                    let ow = (cur[2] + 2 * padding - kernel) / stride + 1;
                    vec![*out_channels, oh, ow]
                }
                LayerSpec::Linear {
                    in_features,
                    out_features,
                    ..
                } => {
                    let n: usize = cur.iter().product();
                    if n != *in_features {
                        return Err(bad(format!("linear expects {in_features} inputs, got {n}")));
                    }
                    vec![*out_features]
                }
                LayerSpec::AvgPool { window } => {
                    if cur.len() != 3 || *window == 0 || cur[1] < *window || cur[2] < *window {
                        return Err(bad(format!("avgpool {window} on {cur:?}")));
                    }
                    vec![cur[0], cur[1] / window, cur[2] / window]
                }
                LayerSpec::BnttNorm {
                    channels,
                    time_steps,
                    momentum,
                    eps,
                    ..
                } => {
                    if cur[0] != *channels {
                        return Err(bad(format!("bntt_norm over {channels} channels, input {cur:?}")));
                    }
                    if *time_steps == 0 || !(0.0..=1.0).contains(momentum) || !(*eps > 0.0) {
                        return Err(bad(
                            "bntt_norm needs time_steps >= 1, momentum in [0, 1], eps > 0".into()
                        ));
                    }
                    cur
                }
                LayerSpec::Lif { threshold, leak } => {
                    LifParams::new(*threshold, *leak).map_err(|e| bad(e.to_string()))?;
                    cur
                }
                LayerSpec::Relu | LayerSpec::OutputAccumulator => cur,
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Checks chain consistency and the ANN/SNN layer rules.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        let last = shapes
            .last()
            .ok_or_else(|| Error::Structure("network has no layers".into()))?;
        if last.iter().product::<usize>() != self.classes {
            return Err(Error::Structure(format!(
                "network ends in {last:?}, expected {} classes",
                self.classes
            )));
        }
        let accumulators = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::OutputAccumulator))
            .count();
        let has = |f: fn(&LayerSpec) -> bool| self.layers.iter().any(f);
        if accumulators > 0 {
            if accumulators != 1 || !matches!(self.layers.last(), Some(LayerSpec::OutputAccumulator)) {
                return Err(Error::Structure(
                    "SNN needs exactly one terminal output_accumulator".into(),
                ));
            }
            if has(|l| matches!(l, LayerSpec::Relu)) {
                return Err(Error::Structure("relu layer in an SNN".into()));
            }
            if self.time_steps == 0 {
                return Err(Error::Structure("SNN with time_steps = 0".into()));
            }
        } else if has(|l| matches!(l, LayerSpec::Lif { .. } | LayerSpec::BnttNorm { .. })) {
            return Err(Error::Structure("lif or bntt_norm layer in an ANN".into()));
        }
        for l in &self.layers {
            if let LayerSpec::BnttNorm { time_steps, .. } = l {
                if *time_steps != self.time_steps {
                    return Err(Error::Structure(format!(
                        "bntt_norm has {time_steps} time slices, network runs {}",
                        self.time_steps
                    )));
                }
            }
        }
        let mut names = std::collections::BTreeSet::new();
        for name in self.layers.iter().filter_map(LayerSpec::name) {
            if !names.insert(name) {
                return Err(Error::Structure(format!("duplicate layer name `{name}`")));
            }
        }
        Ok(())
    }

    /// Shapes of every tensor the spec needs, by name.
    pub fn tensor_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out = BTreeMap::new();
        for l in &self.layers {
            match l {
                LayerSpec::Conv {
                    name,
                    in_channels,
                    out_channels,
                    kernel,
                    bias,
                    ..
                } => {
                    out.insert(weight_key(name), vec![*out_channels, *in_channels, *kernel, *kernel]);
                    if *bias {
                        out.insert(bias_key(name), vec![*out_channels]);
                    }
                }
                LayerSpec::Linear {
                    name,
                    in_features,
                    out_features,
                    bias,
                } => {
                    out.insert(weight_key(name), vec![*out_features, *in_features]);
                    if *bias {
                        out.insert(bias_key(name), vec![*out_features]);
                    }
                }
                LayerSpec::BnttNorm {
                    name,
                    channels,
                    time_steps,
                    ..
                } => {
                    for key in [gamma_key(name), running_mean_key(name), running_var_key(name)] {
                        out.insert(key, vec![*time_steps, *channels]);
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Indices of the LIF layers in order.
    pub fn lif_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&k| matches!(self.layers[k], LayerSpec::Lif { .. }))
            .collect()
    }

    pub fn has_bntt(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::BnttNorm { .. }))
    }
}

/// Architecture family and widths used by the builders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// `vgg5`, `vgg9` or `mlp`.
    pub name: String,
    /// Conv widths: 2 for vgg5, 3 (each used twice) for vgg9, unused for mlp.
    #[serde(default)]
    pub channels: Vec<usize>,
    /// Hidden fully connected widths.
    pub hidden: Vec<usize>,
}

impl ArchitectureConfig {
    pub fn vgg5(c1: usize, c2: usize, hidden: usize) -> Self {
        ArchitectureConfig {
            name: "vgg5".into(),
            channels: vec![c1, c2],
            hidden: vec![hidden],
        }
    }

    pub fn vgg9(c1: usize, c2: usize, c3: usize, hidden: usize) -> Self {
        ArchitectureConfig {
            name: "vgg9".into(),
            channels: vec![c1, c2, c3],
            hidden: vec![hidden],
        }
    }

    pub fn mlp(hidden: &[usize]) -> Self {
        ArchitectureConfig {
            name: "mlp".into(),
            channels: vec![],
            hidden: hidden.to_vec(),
        }
    }
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self::vgg5(16, 32, 256)
    }
}

/// Builds the ReLU (ANN) form of an architecture. No biases: the crossbar
/// maps weight matrices only.
pub fn build_ann(
    arch: &ArchitectureConfig,
    dataset: &str,
    input_shape: [usize; 3],
    classes: usize,
) -> Result<NetworkSpec> {
    let mut layers = Vec::new();
    let mut shape = input_shape.to_vec();
    let mut conv_count = 0;
    let mut conv = |layers: &mut Vec<LayerSpec>, shape: &mut Vec<usize>, out: usize| {
        conv_count += 1;
        layers.push(LayerSpec::Conv {
            name: format!("conv{conv_count}"),
            in_channels: shape[0],
            out_channels: out,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: false,
        });
        layers.push(LayerSpec::Relu);
        shape[0] = out;
    };
    let pool = |layers: &mut Vec<LayerSpec>, shape: &mut Vec<usize>| {
        layers.push(LayerSpec::AvgPool { window: 2 });
        shape[1] /= 2;
        shape[2] /= 2;
    };
    match arch.name.as_str() {
        "vgg5" => {
            if arch.channels.len() != 2 || arch.hidden.len() != 1 {
                return Err(Error::Config("vgg5 needs 2 conv widths and 1 hidden width".into()));
            }
            for &c in &arch.channels {
                conv(&mut layers, &mut shape, c);
                pool(&mut layers, &mut shape);
            }
        }
        "vgg9" => {
            if arch.channels.len() != 3 || arch.hidden.len() != 1 {
                return Err(Error::Config("vgg9 needs 3 conv widths and 1 hidden width".into()));
            }
            for &c in &arch.channels {
                conv(&mut layers, &mut shape, c);
                conv(&mut layers, &mut shape, c);
                pool(&mut layers, &mut shape);
            }
        }
        "mlp" => {}
        other => return Err(Error::Config(format!("unknown architecture `{other}`"))),
    }
    let mut features: usize = shape.iter().product();
    let widths = arch.hidden.iter().copied().chain(std::iter::once(classes));
    let n_fc = arch.hidden.len() + 1;
    for (k, width) in widths.enumerate() {
        if width == 0 {
            return Err(Error::Config("layer width 0".into()));
        }
        layers.push(LayerSpec::Linear {
            name: format!("fc{}", k + 1),
            in_features: features,
            out_features: width,
            bias: false,
        });
        if k + 1 < n_fc {
            layers.push(LayerSpec::Relu);
        }
        features = width;
    }
    let spec = NetworkSpec {
        architecture: arch.name.clone(),
        dataset: dataset.to_string(),
        time_steps: 0,
        input_shape,
        classes,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

/// Options for turning an ANN spec into its spiking counterpart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnnOptions {
    pub time_steps: usize,
    pub lif: LifParams,
    /// Insert a time-indexed norm before every LIF layer.
    pub bntt: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl SnnOptions {
    pub fn surrogate(time_steps: usize) -> Self {
        SnnOptions {
            time_steps,
            lif: LifParams {
                threshold: 1.0,
                leak: 0.99,
            },
            bntt: false,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn bntt(time_steps: usize) -> Self {
        SnnOptions {
            bntt: true,
            ..Self::surrogate(time_steps)
        }
    }

    /// Integrate-and-fire neurons for conversion; thresholds are calibrated later.
    pub fn converted(time_steps: usize) -> Self {
        SnnOptions {
            lif: LifParams {
                threshold: 1.0,
                leak: 1.0,
            },
            ..Self::surrogate(time_steps)
        }
    }
}

/// Replaces every ReLU with LIF neurons and terminates the net in an output
/// accumulator. Weight tensor names and shapes are unchanged.
pub fn ann_to_snn(ann: &NetworkSpec, opts: &SnnOptions) -> Result<NetworkSpec> {
    ann.validate()?;
    if ann.is_snn() {
        return Err(Error::Structure("spec is already an SNN".into()));
    }
    LifParams::new(opts.lif.threshold, opts.lif.leak)?;
    let mut layers = Vec::with_capacity(ann.layers.len() + 4);
    let mut last_weighted: Option<(String, usize)> = None;
    for l in &ann.layers {
        match l {
            LayerSpec::Relu => {
                if opts.bntt {
                    let (name, channels) = last_weighted
                        .clone()
                        .ok_or_else(|| Error::Structure("relu before any weighted layer".into()))?;
                    layers.push(LayerSpec::BnttNorm {
                        name: format!("{name}_bn"),
                        channels,
                        time_steps: opts.time_steps,
                        momentum: opts.bn_momentum,
                        eps: opts.bn_eps,
                    });
                }
                layers.push(LayerSpec::Lif {
                    threshold: opts.lif.threshold,
                    leak: opts.lif.leak,
                });
            }
            other => {
                match other {
                    LayerSpec::Conv { name, out_channels, .. } => last_weighted = Some((name.clone(), *out_channels)),
                    LayerSpec::Linear { name, out_features, .. } => last_weighted = Some((name.clone(), *out_features)),
                    _ => {}
                }
                layers.push(other.clone());
            }
        }
    }
    layers.push(LayerSpec::OutputAccumulator);
    let spec = NetworkSpec {
        time_steps: opts.time_steps,
        layers,
        ..ann.clone()
    };
    spec.validate()?;
    Ok(spec)
}

/// The ReLU counterpart of an SNN spec (norm layers and accumulator dropped).
pub fn snn_to_ann(snn: &NetworkSpec) -> Result<NetworkSpec> {
    let layers = snn
        .layers
        .iter()
        .filter_map(|l| match l {
            LayerSpec::Lif { .. } => Some(LayerSpec::Relu),
            LayerSpec::BnttNorm { .. } | LayerSpec::OutputAccumulator => None,
            other => Some(other.clone()),
        })
        .collect();
    let spec = NetworkSpec {
        time_steps: 0,
        layers,
        ..snn.clone()
    };
    spec.validate()?;
    Ok(spec)
}

/// A network spec with its named tensors and free-form provenance tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Model {
    /// Fresh model: weights uniform in `±sqrt(6 / fan_in)` from the init
    /// stream, biases 0, norm scales 1, running stats (0, 1).
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut tensors = BTreeMap::new();
        for (k, (name, shape)) in spec.tensor_shapes().into_iter().enumerate() {
            let t = if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut s = RandomStream::new(seed, Purpose::Init, k as u64);
                let n: usize = shape.iter().product();
                let mut t = Tensor::from_vec(&shape, (0..n).map(|_| s.uniform_range(-bound, bound)).collect())?;
                t.round_to_f32();
                t
            } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
                Tensor::full(&shape, 1.0)
            } else {
                Tensor::zeros(&shape)
            };
            tensors.insert(name, t);
        }
        Ok(Model {
            spec,
            tensors,
            metadata: BTreeMap::new(),
        })
    }

    /// Checks that every tensor the spec needs is present with the right
    /// shape and finite values, and that there are no extras.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let want = self.spec.tensor_shapes();
        for (name, shape) in &want {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Structure(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Structure(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Structure(format!("tensor `{name}` has non-finite values")));
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !want.contains_key(*k)) {
            return Err(Error::Structure(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Structure(format!("missing tensor `{name}`")))
    }

    pub fn is_snn(&self) -> bool {
        self.spec.is_snn()
    }

    /// Names of the conv/linear weight tensors, in layer order.
    pub fn weight_names(&self) -> Vec<String> {
        self.spec
            .layers
            .iter()
            .filter(|l| l.is_weighted())
            .filter_map(|l| l.name().map(weight_key))
            .collect()
    }

    /// Sets the threshold of the `k`-th LIF layer.
    pub fn set_threshold(&mut self, lif_index: usize, threshold: f64) -> Result<()> {
        let idx = *self
            .spec
            .lif_layers()
            .get(lif_index)
            .ok_or_else(|| Error::invalid(format!("no LIF layer {lif_index}")))?;
        if let LayerSpec::Lif { threshold: t, .. } = &mut self.spec.layers[idx] {
            *t = threshold;
        }
        Ok(())
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.spec
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Lif { threshold, .. } => Some(*threshold),
                _ => None,
            })
            .collect()
    }
}
