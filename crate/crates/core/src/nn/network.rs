//! Network configuration, the quantification architecture and the layer
//! stack container.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv2d, Dense, Dropout, Layer, MaxPool, Padding, Relu, Shape3, Softmax};
use super::{shape_err, Batch, Mode, NnError, Result};
use crate::preprocess::InputTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeVariant {
    Small,
    Medium,
    Large,
}

impl SizeVariant {
    pub const ALL: [SizeVariant; 3] = [SizeVariant::Small, SizeVariant::Medium, SizeVariant::Large];

    /// Kernel widths of conv1, conv2 and reduction1.
    pub fn kernel_widths(self) -> (usize, usize, usize) {
        match self {
            SizeVariant::Small => (7, 5, 3),
            SizeVariant::Medium => (9, 7, 5),
            SizeVariant::Large => (16, 8, 7),
        }
    }
}

impl FromStr for SizeVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(SizeVariant::Small),
            "medium" => Ok(SizeVariant::Medium),
            "large" => Ok(SizeVariant::Large),
            other => Err(format!("unknown network size `{other}` (small, medium, large)")),
        }
    }
}

impl fmt::Display for SizeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SizeVariant::Small => "small",
            SizeVariant::Medium => "medium",
            SizeVariant::Large => "large",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionVariant {
    /// Column reduction by 1x3 convolutions with stride 3.
    Strided,
    /// Column reduction by 1x3 convolutions followed by 1x3 max-pooling.
    Pooling,
}

impl ReductionVariant {
    pub const ALL: [ReductionVariant; 2] = [ReductionVariant::Strided, ReductionVariant::Pooling];
}

impl FromStr for ReductionVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "strided" => Ok(ReductionVariant::Strided),
            "pooling" => Ok(ReductionVariant::Pooling),
            other => Err(format!("unknown reduction `{other}` (strided, pooling)")),
        }
    }
}

impl fmt::Display for ReductionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReductionVariant::Strided => "strided",
            ReductionVariant::Pooling => "pooling",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub size: SizeVariant,
    pub reduction: ReductionVariant,
    pub input_rows: usize,
    pub input_cols: usize,
    pub output_dim: usize,
    /// Multiplier on the 256 and 512 channel counts, in `(0, 1]`.
    pub channel_scale: f64,
    /// Seeds weight initialisation and dropout masks.
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            size: SizeVariant::Small,
            reduction: ReductionVariant::Strided,
            input_rows: 2,
            input_cols: 2048,
            output_dim: 5,
            channel_scale: 1.0,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=9).contains(&self.input_rows) {
            return Err(NnError::InvalidConfig(format!("input rows {} outside 1..=9", self.input_rows)));
        }
        if !(self.channel_scale > 0.0 && self.channel_scale <= 1.0) {
            return Err(NnError::InvalidConfig(format!("channel scale {} outside (0, 1]", self.channel_scale)));
        }
        if self.output_dim == 0 || self.input_cols == 0 {
            return Err(NnError::InvalidConfig("input columns and output size must be positive".into()));
        }
        Ok(())
    }

    /// Scaled counts for the 256- and 512-channel layers.
    pub fn channels(&self) -> (usize, usize) {
        let scale = |c: f64| ((c * self.channel_scale) - 1e-9).ceil().max(1.0) as usize;
        (scale(256.0), scale(512.0))
    }

    /// The layer stack, without weights.
    pub fn layer_specs(&self) -> Result<Vec<(String, LayerSpec)>> {
        self.validate()?;
        let (k1, k2, kr) = self.size.kernel_widths();
        let (c1, c2) = self.channels();
        let mut specs: Vec<(String, LayerSpec)> = Vec::new();
        let mut push = |name: &str, spec: LayerSpec| specs.push((name.to_string(), spec));
        let conv = |oc, kernel, stride, padding| LayerSpec::Conv2d { out_channels: oc, kernel, stride, padding };
        let drop = |rate| LayerSpec::Dropout { rate, seed: 0 };

        push("conv1", conv(c1, (1, k1), (1, 2), Padding::Valid));
        push("conv1.relu", LayerSpec::Relu);
        push("conv1.bn", LayerSpec::BatchNorm { momentum: 0.99, eps: 1e-3 });
        push("conv1.dropout", drop(0.4));
        push("conv2", conv(c1, (1, k2), (1, 2), Padding::Valid));
        push("conv2.relu", LayerSpec::Relu);
        push("conv2.dropout", drop(0.4));

        let mut rows = self.input_rows;
        let mut rep = 1;
        loop {
            let kh = rows.min(3);
            let name = format!("reduction1.{rep}");
            push(&name, conv(c1, (kh, kr), (1, 1), Padding::Valid));
            push(&format!("{name}.relu"), LayerSpec::Relu);
            push(&format!("{name}.dropout"), drop(0.25));
            rows = rows - kh + 1;
            rep += 1;
            if rows == 1 {
                break;
            }
        }

        for (conv_name, red_name, channels) in [("conv3", "reduction2", c1), ("conv4", "reduction3", c2)] {
            for rep in 1..=2 {
                let name = format!("{conv_name}.{rep}");
                push(&name, conv(channels, (1, 3), (1, 1), Padding::Same));
                push(&format!("{name}.relu"), LayerSpec::Relu);
                push(&format!("{name}.dropout"), drop(0.25));
                let name = format!("{red_name}.{rep}");
                match self.reduction {
                    ReductionVariant::Strided => push(&name, conv(channels, (1, 3), (1, 3), Padding::Valid)),
                    ReductionVariant::Pooling => push(&name, conv(channels, (1, 3), (1, 1), Padding::Valid)),
                }
                push(&format!("{name}.relu"), LayerSpec::Relu);
                push(&format!("{name}.dropout"), drop(0.25));
                if self.reduction == ReductionVariant::Pooling {
                    push(&format!("{name}.pool"), LayerSpec::MaxPool { window: (1, 3), stride: (1, 3) });
                }
            }
        }
        push("dense1", LayerSpec::Dense { out_features: 1024 });
        push("output", LayerSpec::Dense { out_features: self.output_dim });
        push("output.softmax", LayerSpec::Softmax);
        Ok(specs)
    }
}

/// Serialisable description of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { out_channels: usize, kernel: (usize, usize), stride: (usize, usize), padding: Padding },
    Relu,
    BatchNorm { momentum: f64, eps: f64 },
    Dropout { rate: f64, seed: u64 },
    MaxPool { window: (usize, usize), stride: (usize, usize) },
    Dense { out_features: usize },
    Softmax,
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    names: Vec<String>,
    specs: Vec<LayerSpec>,
    input: Shape3,
    config: Option<NetworkConfig>,
    /// Training step, used to select dropout masks.
    step: u64,
}

/// Instantiates the quantification network for `cfg`.
pub fn build_network(cfg: &NetworkConfig) -> Result<Network> {
    let specs = cfg.layer_specs()?;
    let mut net = Network::from_specs((1, cfg.input_rows, cfg.input_cols), &specs, cfg.seed).map_err(|e| match e {
        NnError::Shape(msg) => NnError::Architecture(format!(
            "{} input columns are too few for the {} {} network: {msg}",
            cfg.input_cols, cfg.size, cfg.reduction
        )),
        other => other,
    })?;
    net.config = Some(*cfg);
    Ok(net)
}

impl Network {
    /// Builds a stack from specs, initialising weights from `seed`. Dropout
    /// layers whose spec seed is 0 draw one from the same generator.
    pub fn from_specs(input: Shape3, specs: &[(String, LayerSpec)], seed: u64) -> Result<Network> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input;
        let mut layers = Vec::with_capacity(specs.len());
        let mut resolved = Vec::with_capacity(specs.len());
        for (name, spec) in specs {
            let mut spec = spec.clone();
            let layer = match &mut spec {
                LayerSpec::Conv2d { out_channels, kernel, stride, padding } => {
                    Layer::Conv2d(Conv2d::new(shape, *out_channels, *kernel, *stride, *padding, &mut rng)?)
                }
                LayerSpec::Relu => Layer::Relu(Relu::new()),
                LayerSpec::BatchNorm { momentum, eps } => {
                    let mut bn = BatchNorm::new(shape.0);
                    bn.momentum = *momentum;
                    bn.eps = *eps;
                    Layer::BatchNorm(bn)
                }
                LayerSpec::Dropout { rate, seed } => {
                    if *seed == 0 {
                        *seed = rng.random::<u64>() | 1;
                    }
                    Layer::Dropout(Dropout::new(*rate, *seed)?)
                }
                LayerSpec::MaxPool { window, stride } => Layer::MaxPool(MaxPool::new(shape, *window, *stride)?),
                LayerSpec::Dense { out_features } => Layer::Dense(Dense::new(shape, *out_features, &mut rng)?),
                LayerSpec::Softmax => Layer::Softmax(Softmax::new()),
            };
            shape = layer.output_shape(shape).map_err(|e| shape_err(format!("{name}: {e}")))?;
            if shape.0 * shape.1 * shape.2 == 0 {
                return Err(shape_err(format!("{name} produces an empty output")));
            }
            layers.push(layer);
            resolved.push(spec);
        }
        Ok(Network { layers, names: specs.iter().map(|(n, _)| n.clone()).collect(), specs: resolved, input, config: None, step: 0 })
    }

    /// A stack from pre-built layers (for custom experiments and tests).
    pub fn from_layers(input: Shape3, layers: Vec<(String, Layer)>) -> Result<Network> {
        let mut shape = input;
        let mut specs = Vec::new();
        let mut names = Vec::new();
        let mut out = Vec::new();
        for (name, layer) in layers {
            shape = layer.output_shape(shape).map_err(|e| shape_err(format!("{name}: {e}")))?;
            specs.push(spec_of(&layer));
            names.push(name);
            out.push(layer);
        }
        Ok(Network { layers: out, names, specs, input, config: None, step: 0 })
    }

    pub fn config(&self) -> Option<&NetworkConfig> {
        self.config.as_ref()
    }

    pub(crate) fn set_config(&mut self, cfg: Option<NetworkConfig>) {
        self.config = cfg;
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    pub fn specs(&self) -> Vec<(String, LayerSpec)> {
        self.names.iter().cloned().zip(self.specs.iter().cloned()).collect()
    }

    /// Per-layer output shapes, starting with the input.
    pub fn shapes(&self) -> Vec<Shape3> {
        let mut s = self.input;
        let mut out = vec![s];
        for l in &self.layers {
            s = l.output_shape(s).expect("validated at construction");
            out.push(s);
        }
        out
    }

    pub fn output_dim(&self) -> usize {
        let (c, h, w) = *self.shapes().last().unwrap();
        c * h * w
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Moves to the next dropout mask.
    pub fn advance_step(&mut self) {
        self.step += 1;
    }

    fn check_batch(&self, x: &Batch) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if (c, h, w) != self.input {
            return Err(shape_err(format!("network expects {:?} per sample, got {:?}", self.input, (c, h, w))));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Batch, mode: Mode) -> Result<Batch> {
        self.check_batch(x)?;
        let step = self.step;
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, mode, step)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, grad: &Batch) -> Result<Batch> {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    /// Inference-mode outputs, one row per sample.
    pub fn predict(&self, x: &Batch) -> Result<Array2<f64>> {
        self.check_batch(x)?;
        let mut h = x.clone();
        for l in &self.layers {
            h = l.infer(&h)?;
        }
        let n = h.dim().0;
        let k = h.len() / n.max(1);
        Ok(h.into_shape_with_order((n, k)).expect("flatten output"))
    }

    pub fn predict_tensor(&self, x: &InputTensor) -> Result<Vec<f64>> {
        let batch = x.data.clone().insert_axis(Axis(0)).insert_axis(Axis(0));
        Ok(self.predict(&batch)?.row(0).to_vec())
    }

    pub fn params_and_grads(&mut self) -> Vec<(&mut [f64], &[f64])> {
        self.layers.iter_mut().flat_map(|l| l.params_and_grads()).collect()
    }

    pub fn buffers(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.buffers_mut()).collect()
    }

    /// Copy of every buffer, for restoring later.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.buffers().into_iter().map(<[f64]>::to_vec).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        for (dst, src) in self.buffers_mut().into_iter().zip(snapshot) {
            dst.copy_from_slice(src);
        }
    }

    pub fn clear_caches(&mut self) {
        for l in &mut self.layers {
            l.clear_cache();
        }
    }
}

fn spec_of(layer: &Layer) -> LayerSpec {
    match layer {
        Layer::Conv2d(l) => {
            LayerSpec::Conv2d { out_channels: l.out_channels, kernel: l.kernel, stride: l.stride, padding: l.padding }
        }
        Layer::Relu(_) => LayerSpec::Relu,
        Layer::BatchNorm(l) => LayerSpec::BatchNorm { momentum: l.momentum, eps: l.eps },
        Layer::Dropout(l) => LayerSpec::Dropout { rate: l.rate, seed: l.seed },
        Layer::MaxPool(l) => LayerSpec::MaxPool { window: l.window, stride: l.stride },
        Layer::Dense(l) => LayerSpec::Dense { out_features: l.out_features },
        Layer::Softmax(_) => LayerSpec::Softmax,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn cfg(size: SizeVariant, reduction: ReductionVariant, rows: usize) -> NetworkConfig {
        NetworkConfig { size, reduction, input_rows: rows, channel_scale: 1.0 / 64.0, ..NetworkConfig::default() }
    }

    fn conv_specs(net: &Network, prefix: &str) -> Vec<(String, LayerSpec)> {
        net.specs().into_iter().filter(|(n, s)| n.starts_with(prefix) && matches!(s, LayerSpec::Conv2d { .. })).collect()
    }

    #[test]
    fn small_strided_two_rows() {
        let net = build_network(&cfg(SizeVariant::Small, ReductionVariant::Strided, 2)).unwrap();
        let red = conv_specs(&net, "reduction1");
        assert_eq!(red.len(), 1);
        assert!(matches!(red[0].1, LayerSpec::Conv2d { kernel: (2, 3), .. }));
        let cols: Vec<usize> = net
            .layer_names()
            .iter()
            .zip(net.shapes().iter().skip(1))
            .filter(|(n, _)| !n.contains('.') || n.starts_with("reduction") || n.starts_with("conv"))
            .filter(|(n, _)| n.split('.').count() <= 2 && !n.ends_with("relu") && !n.ends_with("dropout") && !n.ends_with("bn"))
            .map(|(_, s)| s.2)
            .collect();
        assert_eq!(&cols[..9], &[1021, 509, 507, 507, 169, 169, 56, 56, 18]);
        assert_eq!(net.output_dim(), 5);
        assert_eq!(*net.shapes().last().unwrap(), (5, 1, 1));
    }

    #[test]
    fn nine_rows_need_four_reductions() {
        let net = build_network(&cfg(SizeVariant::Small, ReductionVariant::Strided, 9)).unwrap();
        let red = conv_specs(&net, "reduction1");
        assert_eq!(red.len(), 4);
        assert!(red.iter().all(|(_, s)| matches!(s, LayerSpec::Conv2d { kernel: (3, 3), .. })));
    }

    #[test]
    fn one_row_reduces_once_with_single_row_kernel() {
        for size in SizeVariant::ALL {
            let net = build_network(&cfg(size, ReductionVariant::Strided, 1)).unwrap();
            let red = conv_specs(&net, "reduction1");
            assert_eq!(red.len(), 1);
            let w = size.kernel_widths().2;
            assert!(matches!(red[0].1, LayerSpec::Conv2d { kernel: (1, kw), .. } if kw == w));
        }
    }

    #[test]
    fn pooling_variant_structure() {
        let net = build_network(&cfg(SizeVariant::Medium, ReductionVariant::Pooling, 3)).unwrap();
        let pools = net.layers().iter().filter(|l| matches!(l, Layer::MaxPool(_))).count();
        assert_eq!(pools, 4);
        for (name, spec) in net.specs() {
            if name.starts_with("reduction2") || name.starts_with("reduction3") {
                if let LayerSpec::Conv2d { stride, .. } = spec {
                    assert_eq!(stride, (1, 1), "{name}");
                }
            }
        }
    }

    #[test]
    fn channel_counts_round_up() {
        let c = NetworkConfig { channel_scale: 1.0 / 3.0, ..NetworkConfig::default() };
        assert_eq!(c.channels(), (86, 171));
        assert_eq!(NetworkConfig::default().channels(), (256, 512));
        assert_eq!(NetworkConfig { channel_scale: 1.0 / 16.0, ..NetworkConfig::default() }.channels(), (16, 32));
    }

    #[test]
    fn too_few_columns_is_architecture_error() {
        let c = NetworkConfig { input_cols: 64, ..cfg(SizeVariant::Large, ReductionVariant::Pooling, 2) };
        assert!(matches!(build_network(&c), Err(NnError::Architecture(_))));
    }

    #[test]
    fn outputs_on_simplex_and_deterministic() {
        let net = build_network(&cfg(SizeVariant::Small, ReductionVariant::Strided, 2)).unwrap();
        let x = Array4::from_shape_fn((3, 1, 2, 2048), |(n, _, r, c)| ((n + 1) as f64 * 0.01 * (c + r) as f64).sin());
        let p = net.predict(&x).unwrap();
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6 && row.iter().all(|&v| v >= 0.0));
        }
        assert_eq!(p, net.predict(&x).unwrap());
        assert!(net.predict(&Array4::zeros((1, 1, 3, 2048))).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_network(&cfg(SizeVariant::Small, ReductionVariant::Strided, 2)).unwrap();
        let b = build_network(&cfg(SizeVariant::Small, ReductionVariant::Strided, 2)).unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
        let c = build_network(&NetworkConfig { seed: 1, ..cfg(SizeVariant::Small, ReductionVariant::Strided, 2) }).unwrap();
        assert_ne!(a.snapshot(), c.snapshot());
    }
}
