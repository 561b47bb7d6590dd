//! The fully convolutional height network.
//!
//! ```text
//! image (N,3,H,W)
//!   stem     3x3 conv, stride 2  -> instance standardization -> ReLU
//!   stage 1  residual blocks, first block stride 2
//!   stage 2  residual blocks, first block stride 2        (H/8 from here on)
//!   stage 3  residual blocks, stride 1, dilation 2
//!   stage 4  residual blocks, stride 1, dilation 2
//!   ASPP     3x3 conv at rate 1 and at each configured rate, concatenated
//!   compress 1x1 conv -> ReLU
//!   output   1x1 conv to the head's channel count (2K, K or 1)
//!   bilinear upsample x8 back to (H, W)
//! ```

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::net::graph::{Graph, NodeId};
use crate::net::ops::ConvGeom;
use crate::net::params::{ParamGrads, ParamId, ParamSet};
use crate::net::tensor::{Real, Tensor};
use crate::rng::SplitMix64;

pub const OUTPUT_STRIDE: usize = 8;
const STAGE_STRIDES: [usize; 4] = [2, 2, 1, 1];
const STAGE_DILATIONS: [usize; 4] = [1, 1, 2, 2];

/// What the output layer predicts and which loss trains it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// 2K channels, paired softmax, ordinal loss.
    Ordinal,
    /// K channels, softmax cross-entropy over classes.
    Mcc,
    /// One channel regressing meters with squared error.
    Mse,
}

impl HeadKind {
    pub fn channels(self, k: usize) -> usize {
        match self {
            HeadKind::Ordinal => 2 * k,
            HeadKind::Mcc => k,
            HeadKind::Mse => 1,
        }
    }

    pub fn to_byte(self) -> u8 {
        match self {
            HeadKind::Ordinal => 0,
            HeadKind::Mcc => 1,
            HeadKind::Mse => 2,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(HeadKind::Ordinal),
            1 => Ok(HeadKind::Mcc),
            2 => Ok(HeadKind::Mse),
            _ => Err(Error::Format(format!("unknown head byte {b}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Ordinal => "ordinal_2k",
            HeadKind::Mcc => "mcc_k",
            HeadKind::Mse => "mse_1",
        }
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ordinal_2k" | "ordinal" => Ok(HeadKind::Ordinal),
            "mcc_k" | "mcc" => Ok(HeadKind::Mcc),
            "mse_1" | "mse" => Ok(HeadKind::Mse),
            _ => Err(Error::InvalidArgument(format!("unknown head {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub aspp_rates: [usize; 3],
    pub aspp_channels: usize,
    pub k: usize,
    pub head: HeadKind,
    pub patch_size: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            stage_channels: [16, 32, 64, 64],
            blocks_per_stage: [2, 2, 2, 2],
            aspp_rates: [6, 12, 18],
            aspp_channels: 32,
            k: 64,
            head: HeadKind::Ordinal,
            patch_size: 256,
        }
    }
}

impl NetConfig {
    /// 64-pixel patches with ASPP rates that fit an 8x8 feature map.
    pub fn desk() -> Self {
        Self {
            aspp_rates: [1, 2, 3],
            k: 16,
            patch_size: 64,
            ..Self::default()
        }
    }

    /// Smallest useful network, used by gradient checks.
    pub fn tiny(k: usize) -> Self {
        Self {
            stem_channels: 4,
            stage_channels: [4, 4, 4, 4],
            blocks_per_stage: [1, 1, 1, 1],
            aspp_rates: [1, 2, 3],
            aspp_channels: 4,
            k,
            head: HeadKind::Ordinal,
            patch_size: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.stem_channels == 0 || self.aspp_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.stage_channels.contains(&0) || self.blocks_per_stage.contains(&0) {
            return bad("every stage needs at least one block and one channel".into());
        }
        if self.aspp_rates[0] == 0 || self.aspp_rates.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!(
                "aspp_rates must be strictly increasing and >= 1, got {:?}",
                self.aspp_rates
            ));
        }
        if self.k == 0 || self.k > u16::MAX as usize {
            return bad(format!("K={} out of range", self.k));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(OUTPUT_STRIDE) {
            return bad(format!(
                "patch_size {} must be a positive multiple of {OUTPUT_STRIDE}",
                self.patch_size
            ));
        }
        Ok(())
    }

    /// Rates whose 3x3 footprint spans the whole feature map at this patch size.
    pub fn aspp_warnings(&self) -> Vec<String> {
        let extent = self.patch_size / OUTPUT_STRIDE;
        self.aspp_rates
            .iter()
            .filter(|&&r| 2 * r >= extent)
            .map(|r| {
                format!(
                    "ASPP rate {r} reaches past a {extent}x{extent} feature map; outer taps only see padding"
                )
            })
            .collect()
    }

    pub fn head_channels(&self) -> usize {
        self.head.channels(self.k)
    }

    pub const ENCODED_LEN: usize = 61;

    /// Checkpoint config block, little-endian u32 fields plus one head byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::ENCODED_LEN);
        let mut put = |v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        put(self.stem_channels);
        self.stage_channels.iter().for_each(|&v| put(v));
        self.blocks_per_stage.iter().for_each(|&v| put(v));
        self.aspp_rates.iter().for_each(|&v| put(v));
        put(self.aspp_channels);
        put(self.k);
        out.push(self.head.to_byte());
        out.extend_from_slice(&(self.patch_size as u32).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < Self::ENCODED_LEN {
            return Err(Error::Format("config block truncated".into()));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let cfg = Self {
            stem_channels: u(0),
            stage_channels: [u(1), u(2), u(3), u(4)],
            blocks_per_stage: [u(5), u(6), u(7), u(8)],
            aspp_rates: [u(9), u(10), u(11)],
            aspp_channels: u(12),
            k: u(13),
            head: HeadKind::from_byte(bytes[56])?,
            patch_size: u32::from_le_bytes(bytes[57..61].try_into().unwrap()) as usize,
        };
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    KaimingUniform { fan_in: usize },
    Zero,
}

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    geom: ConvGeom,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: ConvLayer,
    conv2: ConvLayer,
    shortcut: Option<ConvLayer>,
}

#[derive(Debug, Clone)]
struct Layers {
    stem: ConvLayer,
    stages: Vec<Vec<Block>>,
    aspp: Vec<ConvLayer>,
    compress: ConvLayer,
    out: ConvLayer,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

struct Builder {
    specs: Vec<Spec>,
}

impl Builder {
    fn conv(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        geom: ConvGeom,
        zero: bool,
    ) -> ConvLayer {
        let fan_in = cin * kernel * kernel;
        let weight = ParamId(self.specs.len());
        self.specs.push(Spec {
            name: format!("{prefix}.weight"),
            shape: vec![cout, cin, kernel, kernel],
            init: if zero { Init::Zero } else { Init::KaimingUniform { fan_in } },
        });
        let bias = ParamId(self.specs.len());
        self.specs.push(Spec {
            name: format!("{prefix}.bias"),
            shape: vec![cout],
            init: Init::Zero,
        });
        ConvLayer { weight, bias, geom }
    }
}

fn architecture(cfg: &NetConfig, dilations: [usize; 4]) -> (Vec<Spec>, Layers) {
    let mut b = Builder { specs: Vec::new() };
    let stem = b.conv(
        "backbone.stem",
        3,
        cfg.stem_channels,
        3,
        ConvGeom::new(2, 1, 1),
        false,
    );
    let mut cin = cfg.stem_channels;
    let mut stages = Vec::with_capacity(4);
    for s in 0..4 {
        let cout = cfg.stage_channels[s];
        let d = dilations[s];
        let mut blocks = Vec::with_capacity(cfg.blocks_per_stage[s]);
        for bi in 0..cfg.blocks_per_stage[s] {
            let stride = if bi == 0 { STAGE_STRIDES[s] } else { 1 };
            let prefix = format!("backbone.stage{}.block{}", s + 1, bi + 1);
            let conv1 = b.conv(
                &format!("{prefix}.conv1"),
                cin,
                cout,
                3,
                ConvGeom::new(stride, d, d),
                false,
            );
            let conv2 = b.conv(&format!("{prefix}.conv2"), cout, cout, 3, ConvGeom::same(3, d), false);
            let shortcut = (stride != 1 || cin != cout).then(|| {
                b.conv(
                    &format!("{prefix}.shortcut"),
                    cin,
                    cout,
                    1,
                    ConvGeom::new(stride, 1, 0),
                    false,
                )
            });
            blocks.push(Block {
                conv1,
                conv2,
                shortcut,
            });
            cin = cout;
        }
        stages.push(blocks);
    }
    let mut aspp = Vec::with_capacity(4);
    for (i, rate) in std::iter::once(1).chain(cfg.aspp_rates).enumerate() {
        aspp.push(b.conv(
            &format!("head.aspp{i}"),
            cin,
            cfg.aspp_channels,
            3,
            ConvGeom::same(3, rate),
            false,
        ));
    }
    let compress = b.conv(
        "head.compress",
        4 * cfg.aspp_channels,
        cfg.aspp_channels,
        1,
        ConvGeom::new(1, 1, 0),
        false,
    );
    let out = b.conv(
        "head.out",
        cfg.aspp_channels,
        cfg.head_channels(),
        1,
        ConvGeom::new(1, 1, 0),
        true,
    );
    (
        b.specs,
        Layers {
            stem,
            stages,
            aspp,
            compress,
            out,
        },
    )
}

/// Recorded forward pass; keep it to run the backward pass.
pub struct ForwardPass<'a, T: Real> {
    pub graph: Graph<'a, T>,
    /// Full-resolution head output `(N, C, H, W)`.
    pub output: NodeId,
    /// Head output before upsampling, at 1/8 resolution.
    pub coarse: NodeId,
    /// Concatenated ASPP branches.
    pub aspp: NodeId,
    /// Final backbone feature map.
    pub features: NodeId,
}

impl<T: Real> ForwardPass<'_, T> {
    pub fn output(&self) -> &Tensor<T> {
        self.graph.value(self.output)
    }
}

#[derive(Debug, Clone)]
pub struct OrdinalNet<T: Real> {
    config: NetConfig,
    params: ParamSet<T>,
    layers: Layers,
}

impl<T: Real> OrdinalNet<T> {
    /// Kaiming-uniform convolutions, zero biases, zero output layer.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        Self::with_dilations(config, STAGE_DILATIONS, seed)
    }

    /// Same as [`OrdinalNet::new`] with explicit per-stage dilations.
    pub fn with_dilations(config: NetConfig, dilations: [usize; 4], seed: u64) -> Result<Self> {
        config.validate()?;
        if dilations.contains(&0) {
            return Err(Error::Config("dilations must be positive".into()));
        }
        let (specs, layers) = architecture(&config, dilations);
        let mut rng = SplitMix64::new(seed);
        let mut params = ParamSet::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zero => vec![T::zero(); n],
                Init::KaimingUniform { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| T::of(rng.uniform(-bound, bound))).collect()
                }
            };
            params.add(spec.name, Tensor::from_vec(&spec.shape, data)?)?;
        }
        Ok(Self {
            config,
            params,
            layers,
        })
    }

    /// Rebuilds a network from named tensors; names and shapes must match
    /// the architecture exactly.
    pub fn from_named(config: NetConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (specs, layers) = architecture(&config, STAGE_DILATIONS);
        if tensors.len() != specs.len() {
            return Err(Error::Shape(format!(
                "architecture has {} parameters, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..specs.len()).map(|_| None).collect();
        for (name, t) in tensors {
            let i = specs
                .iter()
                .position(|s| s.name == name)
                .ok_or_else(|| Error::Shape(format!("unexpected parameter {name:?}")))?;
            if t.shape() != specs[i].shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    specs[i].shape
                )));
            }
            if slots[i].replace(t).is_some() {
                return Err(Error::Shape(format!("parameter {name:?} given twice")));
            }
        }
        let mut params = ParamSet::new();
        for (spec, t) in specs.into_iter().zip(slots) {
            params.add(spec.name, t.expect("all slots filled"))?;
        }
        Ok(Self {
            config,
            params,
            layers,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> OrdinalNet<U> {
        OrdinalNet {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    fn conv(&self, g: &mut Graph<'_, T>, x: NodeId, layer: &ConvLayer) -> Result<NodeId> {
        let w = g.param(layer.weight);
        let b = g.param(layer.bias);
        g.conv2d(x, w, Some(b), layer.geom)
    }

    /// Runs the network on an `(N, 3, H, W)` batch; `H` and `W` must be
    /// multiples of 8.
    pub fn forward(&self, input: Tensor<T>) -> Result<ForwardPass<'_, T>> {
        let (_, c, h, w) = input.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("network expects 3 input channels, got {c}")));
        }
        if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not a positive multiple of {OUTPUT_STRIDE}"
            )));
        }
        let mut g = Graph::new(&self.params);
        let mut x = g.input(input);
        x = self.conv(&mut g, x, &self.layers.stem)?;
        x = g.instance_norm(x)?;
        x = g.relu(x);
        for stage in &self.layers.stages {
            for block in stage {
                let y = self.conv(&mut g, x, &block.conv1)?;
                let y = g.relu(y);
                let y = self.conv(&mut g, y, &block.conv2)?;
                let skip = match &block.shortcut {
                    Some(sc) => self.conv(&mut g, x, sc)?,
                    None => x,
                };
                let y = g.add(y, skip)?;
                x = g.relu(y);
            }
        }
        let features = x;
        let mut branches = Vec::with_capacity(self.layers.aspp.len());
        for layer in &self.layers.aspp {
            let y = self.conv(&mut g, features, layer)?;
            branches.push(g.relu(y));
        }
        let aspp = g.concat(&branches)?;
        let y = self.conv(&mut g, aspp, &self.layers.compress)?;
        let y = g.relu(y);
        let coarse = self.conv(&mut g, y, &self.layers.out)?;
        let output = g.upsample(coarse, OUTPUT_STRIDE)?;
        Ok(ForwardPass {
            graph: g,
            output,
            coarse,
            aspp,
            features,
        })
    }

    /// Parameter gradients for an upstream gradient on the full-resolution output.
    pub fn backward(&self, pass: &ForwardPass<'_, T>, output_grad: &[T]) -> Result<ParamGrads<T>> {
        Ok(pass.graph.backward(pass.output, output_grad)?.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = SplitMix64::new(seed);
        Tensor::from_vec(
            &[n, 3, h, w],
            (0..n * 3 * h * w).map(|_| rng.next_f64() as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn output_shape_contract() {
        let cfg = NetConfig {
            k: 8,
            ..NetConfig::tiny(8)
        };
        let net = OrdinalNet::<f32>::new(cfg, 1).unwrap();
        let pass = net.forward(input(2, 64, 64, 2)).unwrap();
        assert_eq!(pass.output().shape(), &[2, 16, 64, 64]);
        assert_eq!(pass.graph.value(pass.features).shape()[2..], [8, 8]);
        assert_eq!(pass.graph.value(pass.coarse).shape()[2..], [8, 8]);
    }

    #[test]
    fn output_stride_for_several_sizes() {
        let net = OrdinalNet::<f32>::new(NetConfig::tiny(4), 1).unwrap();
        for (h, w) in [(16, 16), (24, 40), (64, 32)] {
            let pass = net.forward(input(1, h, w, 3)).unwrap();
            assert_eq!(pass.graph.value(pass.features).shape()[2..], [h / 8, w / 8]);
        }
    }

    #[test]
    fn rejects_non_divisible_input() {
        let net = OrdinalNet::<f32>::new(NetConfig::tiny(4), 1).unwrap();
        assert!(net.forward(input(1, 20, 16, 1)).is_err());
    }

    #[test]
    fn deterministic_forward() {
        let net = OrdinalNet::<f32>::new(NetConfig::tiny(4), 9).unwrap();
        let a = net.forward(input(1, 32, 32, 5)).unwrap().output().clone();
        let b = net.forward(input(1, 32, 32, 5)).unwrap().output().clone();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let net = OrdinalNet::<f32>::new(NetConfig::tiny(4), 9).unwrap();
        let pass = net.forward(input(1, 16, 16, 5)).unwrap();
        assert!(pass.output().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dilation_does_not_change_parameter_count() {
        let cfg = NetConfig::desk();
        let a = OrdinalNet::<f32>::with_dilations(cfg.clone(), [1, 1, 1, 1], 0).unwrap();
        let b = OrdinalNet::<f32>::with_dilations(cfg.clone(), [1, 1, 2, 2], 0).unwrap();
        let c = OrdinalNet::<f32>::with_dilations(cfg, [1, 1, 2, 4], 0).unwrap();
        assert_eq!(a.params().numel(), b.params().numel());
        assert_eq!(b.params().numel(), c.params().numel());
    }

    #[test]
    fn groups_partition_by_prefix() {
        let net = OrdinalNet::<f32>::new(NetConfig::desk(), 0).unwrap();
        for p in net.params().iter() {
            let is_head = p.name.starts_with("head.");
            assert_eq!(is_head, p.group == crate::net::ParamGroup::Head, "{}", p.name);
            let is_aspp_or_out = p.name.contains("aspp") || p.name.contains("compress") || p.name.contains(".out.");
            assert_eq!(is_head, is_aspp_or_out, "{}", p.name);
        }
    }

    #[test]
    fn config_validation_and_warnings() {
        let mut cfg = NetConfig::desk();
        assert!(cfg.validate().is_ok());
        assert!(cfg.aspp_warnings().is_empty());
        cfg.aspp_rates = [6, 12, 18];
        assert_eq!(cfg.aspp_warnings().len(), 3);
        cfg.aspp_rates = [3, 2, 4];
        assert!(cfg.validate().is_err());
        cfg = NetConfig::desk();
        cfg.patch_size = 60;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_bytes_round_trip() {
        let cfg = NetConfig {
            head: HeadKind::Mcc,
            ..NetConfig::desk()
        };
        let bytes = cfg.to_bytes();
        assert_eq!(bytes.len(), NetConfig::ENCODED_LEN);
        assert_eq!(NetConfig::from_bytes(&bytes).unwrap(), cfg);
    }

    #[test]
    fn from_named_checks_shapes() {
        let net = OrdinalNet::<f32>::new(NetConfig::tiny(4), 3).unwrap();
        let named: Vec<(String, Tensor<f32>)> = net
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .rev()
            .collect();
        let back = OrdinalNet::from_named(NetConfig::tiny(4), named.clone()).unwrap();
        assert_eq!(back.params(), net.params());

        let mut bad = named.clone();
        bad[0].1 = Tensor::zeros(&[1]);
        assert!(OrdinalNet::from_named(NetConfig::tiny(4), bad).is_err());
        assert!(OrdinalNet::from_named(NetConfig::tiny(4), named[1..].to_vec()).is_err());
    }
}
