//! Generator and critic architectures, initialization, slab wiring between
//! the 3D generator output and the 2.5D critic, and the checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conv::out_extent;
use crate::error::{Error, Result};
use crate::graph::{conv2d, conv3d, dense, Graph, Value};
use crate::tensor::{checksum_named, Tensor};

/// One generator convolution layer: filter count and (depth, height, width)
/// kernel extents.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub filters: usize,
    pub kernel: [usize; 3],
}

/// Generator architecture. All convolutions are valid (unpadded), stride 1,
/// with a ReLU after every layer.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub layers: Vec<ConvLayerSpec>,
}

impl GeneratorSpec {
    /// The 8-layer 3D generator: odd layers use 1x3x3 kernels, even layers
    /// 3x3x3; 32 filters except the single-filter output layer.
    pub fn smgan_3d() -> Self {
        let mut layers = Vec::with_capacity(8);
        for i in 1..=8usize {
            let filters = if i == 8 { 1 } else { 32 };
            let kernel = if i % 2 == 1 { [1, 3, 3] } else { [3, 3, 3] };
            layers.push(ConvLayerSpec { filters, kernel });
        }
        GeneratorSpec {
            in_channels: 1,
            layers,
        }
    }

    /// 2D variant: every kernel is 1x3x3, so depth passes through unchanged
    /// and single-slice inputs stay single-slice.
    pub fn smgan_2d() -> Self {
        let mut spec = Self::smgan_3d();
        for l in &mut spec.layers {
            l.kernel[0] = 1;
        }
        spec
    }

    /// Arbitrary layer stack, for reduced test networks.
    pub fn custom(in_channels: usize, layers: Vec<ConvLayerSpec>) -> Self {
        GeneratorSpec {
            in_channels,
            layers,
        }
    }

    /// Output shape for an input `[B, C, D, H, W]`, or a dimension error.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 5 || input[1] != self.in_channels {
            return Err(Error::shape(format!(
                "generator expects [B,{},D,H,W], got {:?}",
                self.in_channels, input
            )));
        }
        let (b, mut d, mut h, mut w) = (input[0], input[2], input[3], input[4]);
        let mut filters = self.in_channels;
        for (i, l) in self.layers.iter().enumerate() {
            d = out_extent(d, l.kernel[0], 1).ok_or_else(|| {
                Error::shape(format!("generator layer {i}: depth {d} < kernel {}", l.kernel[0]))
            })?;
            h = out_extent(h, l.kernel[1], 1).ok_or_else(|| {
                Error::shape(format!("generator layer {i}: height {h} < kernel {}", l.kernel[1]))
            })?;
            w = out_extent(w, l.kernel[2], 1).ok_or_else(|| {
                Error::shape(format!("generator layer {i}: width {w} < kernel {}", l.kernel[2]))
            })?;
            filters = l.filters;
        }
        Ok(vec![b, filters, d, h, w])
    }
}

/// Kernel and per-filter bias of one convolution layer.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Generator parameters: one [`ConvLayer`] per spec layer.
#[derive(Clone, Debug)]
pub struct GeneratorParams {
    pub spec: GeneratorSpec,
    pub layers: Vec<ConvLayer>,
}

fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("std is positive");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

impl GeneratorParams {
    /// Fan-in-scaled normal initialization (std = sqrt(2/fan_in)), zero
    /// biases.
    pub fn init(spec: GeneratorSpec, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut in_ch = spec.in_channels;
        for l in &spec.layers {
            let fan_in = in_ch * l.kernel[0] * l.kernel[1] * l.kernel[2];
            let kernel = he_normal(
                rng,
                &[l.filters, in_ch, l.kernel[0], l.kernel[1], l.kernel[2]],
                fan_in,
            );
            layers.push(ConvLayer {
                kernel,
                bias: Tensor::zeros(&[l.filters]),
            });
            in_ch = l.filters;
        }
        GeneratorParams { spec, layers }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("gen.layer{i}.kernel"), &l.kernel));
            out.push((format!("gen.layer{i}.bias"), &l.bias));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("gen.layer{i}.kernel"), &mut l.kernel));
            out.push((format!("gen.layer{i}.bias"), &mut l.bias));
        }
        out
    }

    pub fn checksum(&self) -> u64 {
        checksum_named(&self.named_tensors())
    }

    /// Mirrors the parameters into a graph as leaves.
    pub fn to_values(&self, g: &Graph, requires_grad: bool) -> Result<GeneratorValues> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            layers.push((
                g.leaf(l.kernel.clone(), requires_grad)?,
                g.leaf(l.bias.clone(), requires_grad)?,
            ));
        }
        Ok(GeneratorValues { layers })
    }
}

/// Graph-resident generator parameters for one training step.
pub struct GeneratorValues {
    pub layers: Vec<(Value, Value)>,
}

impl GeneratorValues {
    pub fn leaves(&self) -> Vec<&Value> {
        self.layers.iter().flat_map(|(k, b)| [k, b]).collect()
    }
}

/// Valid-convolution cascade with a ReLU after every layer (including the
/// last one: outputs are non-negative like the [0,1] targets).
pub fn generator_forward(params: &GeneratorValues, y: &Value) -> Result<Value> {
    let mut x = y.clone();
    for (kernel, bias) in &params.layers {
        x = conv3d(&x, kernel, bias, [1, 1, 1])?.relu();
    }
    Ok(x)
}

/// One critic convolution: 3x3 kernels, stride per spec.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct CriticConvSpec {
    pub filters: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
}

/// Critic architecture: conv stack, two dense layers (hidden then scalar),
/// leaky-ReLU after every layer except the final dense, no output
/// nonlinearity (raw Wasserstein score).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CriticSpec {
    pub in_channels: usize,
    pub input_hw: [usize; 2],
    pub convs: Vec<CriticConvSpec>,
    pub fc_hidden: usize,
    pub leaky_alpha: f64,
}

impl CriticSpec {
    /// The six-layer critic for 64x64 slabs: filters 64,64,128,128,256,256,
    /// strides alternating 1 and 2, dense 1024 then 1.
    pub fn smgan() -> Self {
        let filters = [64, 64, 128, 128, 256, 256];
        let convs = filters
            .iter()
            .enumerate()
            .map(|(i, &f)| CriticConvSpec {
                filters: f,
                kernel: [3, 3],
                stride: if i % 2 == 0 { [1, 1] } else { [2, 2] },
            })
            .collect();
        CriticSpec {
            in_channels: 3,
            input_hw: [64, 64],
            convs,
            fc_hidden: 1024,
            leaky_alpha: 0.2,
        }
    }

    /// Four-layer critic for small slabs; the six-layer stack needs at least
    /// 29x29 inputs, which 40x40-patch outputs (24x24) do not reach.
    pub fn reduced(input_hw: [usize; 2]) -> Self {
        let filters = [64, 64, 128, 128];
        let convs = filters
            .iter()
            .enumerate()
            .map(|(i, &f)| CriticConvSpec {
                filters: f,
                kernel: [3, 3],
                stride: if i % 2 == 0 { [1, 1] } else { [2, 2] },
            })
            .collect();
        CriticSpec {
            in_channels: 3,
            input_hw,
            convs,
            fc_hidden: 256,
            leaky_alpha: 0.2,
        }
    }

    /// Two-convolution stack for very small slabs (tests, tiny experiments).
    pub fn tiny(input_hw: [usize; 2]) -> Self {
        CriticSpec {
            in_channels: 3,
            input_hw,
            convs: vec![
                CriticConvSpec {
                    filters: 32,
                    kernel: [3, 3],
                    stride: [1, 1],
                },
                CriticConvSpec {
                    filters: 64,
                    kernel: [3, 3],
                    stride: [2, 2],
                },
            ],
            fc_hidden: 128,
            leaky_alpha: 0.2,
        }
    }

    /// Picks the deepest architecture that fits the slab size: the full
    /// six-layer critic, then the four-layer stack, then the tiny one.
    pub fn for_input(input_hw: [usize; 2]) -> Result<CriticSpec> {
        let full = CriticSpec {
            input_hw,
            ..CriticSpec::smgan()
        };
        if full.trace().is_ok() {
            return Ok(full);
        }
        let reduced = CriticSpec::reduced(input_hw);
        if reduced.trace().is_ok() {
            return Ok(reduced);
        }
        let tiny = CriticSpec::tiny(input_hw);
        tiny.trace()?;
        Ok(tiny)
    }

    /// Spatial size after each convolution, or a dimension error where the
    /// stack stops fitting.
    pub fn trace(&self) -> Result<Vec<[usize; 2]>> {
        let mut hw = self.input_hw;
        let mut out = Vec::with_capacity(self.convs.len());
        for (i, c) in self.convs.iter().enumerate() {
            let h = out_extent(hw[0], c.kernel[0], c.stride[0]);
            let w = out_extent(hw[1], c.kernel[1], c.stride[1]);
            match (h, w) {
                (Some(h), Some(w)) => hw = [h, w],
                _ => {
                    return Err(Error::shape(format!(
                        "critic conv {i}: kernel {:?} stride {:?} does not fit {}x{}",
                        c.kernel, c.stride, hw[0], hw[1]
                    )))
                }
            }
            out.push(hw);
        }
        Ok(out)
    }

    /// Flattened feature count entering the first dense layer.
    pub fn flat_features(&self) -> Result<usize> {
        let trace = self.trace()?;
        let last = trace.last().ok_or_else(|| {
            Error::config("critic needs at least one convolution".to_string())
        })?;
        let filters = self.convs.last().expect("non-empty").filters;
        Ok(filters * last[0] * last[1])
    }
}

/// Weight (`[out, in]`) and bias of a dense layer.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Critic parameters.
#[derive(Clone, Debug)]
pub struct CriticParams {
    pub spec: CriticSpec,
    pub convs: Vec<ConvLayer>,
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
}

impl CriticParams {
    pub fn init(spec: CriticSpec, rng: &mut impl Rng) -> Result<Self> {
        let flat = spec.flat_features()?;
        let mut convs = Vec::with_capacity(spec.convs.len());
        let mut in_ch = spec.in_channels;
        for c in &spec.convs {
            let fan_in = in_ch * c.kernel[0] * c.kernel[1];
            convs.push(ConvLayer {
                kernel: he_normal(rng, &[c.filters, in_ch, c.kernel[0], c.kernel[1]], fan_in),
                bias: Tensor::zeros(&[c.filters]),
            });
            in_ch = c.filters;
        }
        let fc1 = DenseLayer {
            weight: he_normal(rng, &[spec.fc_hidden, flat], flat),
            bias: Tensor::zeros(&[spec.fc_hidden]),
        };
        let fc2 = DenseLayer {
            weight: he_normal(rng, &[1, spec.fc_hidden], spec.fc_hidden),
            bias: Tensor::zeros(&[1]),
        };
        Ok(CriticParams {
            spec,
            convs,
            fc1,
            fc2,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.convs.iter().enumerate() {
            out.push((format!("critic.conv{i}.kernel"), &l.kernel));
            out.push((format!("critic.conv{i}.bias"), &l.bias));
        }
        out.push(("critic.fc1.weight".to_string(), &self.fc1.weight));
        out.push(("critic.fc1.bias".to_string(), &self.fc1.bias));
        out.push(("critic.fc2.weight".to_string(), &self.fc2.weight));
        out.push(("critic.fc2.bias".to_string(), &self.fc2.bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.convs.iter_mut().enumerate() {
            out.push((format!("critic.conv{i}.kernel"), &mut l.kernel));
            out.push((format!("critic.conv{i}.bias"), &mut l.bias));
        }
        out.push(("critic.fc1.weight".to_string(), &mut self.fc1.weight));
        out.push(("critic.fc1.bias".to_string(), &mut self.fc1.bias));
        out.push(("critic.fc2.weight".to_string(), &mut self.fc2.weight));
        out.push(("critic.fc2.bias".to_string(), &mut self.fc2.bias));
        out
    }

    pub fn checksum(&self) -> u64 {
        checksum_named(&self.named_tensors())
    }

    pub fn to_values(&self, g: &Graph, requires_grad: bool) -> Result<CriticValues> {
        let mut convs = Vec::with_capacity(self.convs.len());
        for l in &self.convs {
            convs.push((
                g.leaf(l.kernel.clone(), requires_grad)?,
                g.leaf(l.bias.clone(), requires_grad)?,
            ));
        }
        Ok(CriticValues {
            spec: self.spec.clone(),
            convs,
            fc1: (
                g.leaf(self.fc1.weight.clone(), requires_grad)?,
                g.leaf(self.fc1.bias.clone(), requires_grad)?,
            ),
            fc2: (
                g.leaf(self.fc2.weight.clone(), requires_grad)?,
                g.leaf(self.fc2.bias.clone(), requires_grad)?,
            ),
        })
    }
}

/// Graph-resident critic parameters for one training step.
pub struct CriticValues {
    pub spec: CriticSpec,
    pub convs: Vec<(Value, Value)>,
    pub fc1: (Value, Value),
    pub fc2: (Value, Value),
}

impl CriticValues {
    pub fn leaves(&self) -> Vec<&Value> {
        let mut out: Vec<&Value> = self.convs.iter().flat_map(|(k, b)| [k, b]).collect();
        out.extend([&self.fc1.0, &self.fc1.1, &self.fc2.0, &self.fc2.1]);
        out
    }
}

/// Scores a batch of slabs `[B, 3, H, W] -> [B]`. Raw scores: no sigmoid.
pub fn critic_forward(params: &CriticValues, slab: &Value) -> Result<Value> {
    let s = slab.shape();
    if s.len() != 4 || s[1] != params.spec.in_channels {
        return Err(Error::shape(format!(
            "critic expects [B,{},H,W], got {:?}",
            params.spec.in_channels, s
        )));
    }
    if [s[2], s[3]] != params.spec.input_hw {
        return Err(Error::shape(format!(
            "critic built for {}x{} slabs, got {}x{}",
            params.spec.input_hw[0], params.spec.input_hw[1], s[2], s[3]
        )));
    }
    let alpha = params.spec.leaky_alpha;
    let mut x = slab.clone();
    for ((kernel, bias), cs) in params.convs.iter().zip(&params.spec.convs) {
        x = conv2d(&x, kernel, bias, cs.stride)?.leaky_relu(alpha)?;
    }
    let xs = x.shape();
    let flat: usize = xs[1..].iter().product();
    let x = x.reshape(&[xs[0], flat])?;
    let x = dense(&x, &params.fc1.0, &params.fc1.1)?.leaky_relu(alpha)?;
    let out = dense(&x, &params.fc2.0, &params.fc2.1)?;
    out.reshape(&[xs[0]])
}

/// Reinterprets a depth-3 generator output as the critic's 3 input channels;
/// deeper outputs yield every consecutive 3-slice window.
pub fn slab_views(g_out: &Value) -> Result<Vec<Value>> {
    let s = g_out.shape();
    if s.len() != 5 || s[1] != 1 {
        return Err(Error::shape(format!(
            "slab_views expects [B,1,D,H,W], got {:?}",
            s
        )));
    }
    let depth = s[2];
    if depth < 3 {
        return Err(Error::shape(format!(
            "slab_views needs depth >= 3, got {depth}"
        )));
    }
    let mut out = Vec::with_capacity(depth - 2);
    for start in 0..=depth - 3 {
        let slab = g_out
            .narrow(2, start, 3)?
            .reshape(&[s[0], 3, s[3], s[4]])?;
        out.push(slab);
    }
    Ok(out)
}

/// 2D-variant wiring: the single output slice replicated to 3 channels.
pub fn slab_view_2d(g_out: &Value) -> Result<Value> {
    let s = g_out.shape();
    if s.len() != 5 || s[1] != 1 || s[2] != 1 {
        return Err(Error::shape(format!(
            "slab_view_2d expects [B,1,1,H,W], got {:?}",
            s
        )));
    }
    g_out.reshape(&[s[0], 1, s[3], s[4]])?.repeat_channel(3)
}

/// Tensor-level slab stacking for critic minibatches: `[B,1,D,H,W]` becomes
/// `[B*(D-2), 3, H, W]` (or channel replication for single-slice outputs).
pub fn stack_slabs(t: &Tensor) -> Result<Tensor> {
    let s = t.shape().to_vec();
    if s.len() != 5 || s[1] != 1 {
        return Err(Error::shape(format!(
            "stack_slabs expects [B,1,D,H,W], got {:?}",
            s
        )));
    }
    let (b, d, h, w) = (s[0], s[2], s[3], s[4]);
    let plane = h * w;
    if d == 1 {
        let mut out = Tensor::zeros(&[b, 3, h, w]);
        for bi in 0..b {
            let src = &t.data()[bi * plane..][..plane];
            for c in 0..3 {
                out.data_mut()[(bi * 3 + c) * plane..][..plane].copy_from_slice(src);
            }
        }
        return Ok(out);
    }
    if d < 3 {
        return Err(Error::shape(format!("stack_slabs needs depth >= 3 or 1, got {d}")));
    }
    let windows = d - 2;
    let mut out = Tensor::zeros(&[b * windows, 3, h, w]);
    for bi in 0..b {
        for wstart in 0..windows {
            for c in 0..3 {
                let src = &t.data()[(bi * d + wstart + c) * plane..][..plane];
                let row = bi * windows + wstart;
                out.data_mut()[(row * 3 + c) * plane..][..plane].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

pub const CHECKPOINT_FORMAT: &str = "smgan-ckpt-1";

/// Everything needed to rebuild the networks and normalization of a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub variant: String,
    pub gen_spec: GeneratorSpec,
    pub critic_spec: Option<CriticSpec>,
    pub patch: [usize; 3],
    pub hu_lo: f64,
    pub hu_hi: f64,
}

impl CheckpointMeta {
    /// Stable hash of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("meta serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Named f64 tensors plus step counter, serialized as a one-line JSON header
/// followed by little-endian payloads. Round-trips bit-identically.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct HeaderTensor {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config_hash: String,
    step: u64,
    meta: CheckpointMeta,
    tensors: Vec<HeaderTensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            tensors.push(HeaderTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += (t.numel() * 8) as u64;
        }
        let header = Header {
            format: CHECKPOINT_FORMAT.to_string(),
            config_hash: self.meta.config_hash(),
            step: self.step,
            meta: self.meta.clone(),
            tensors,
        };
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut file, &header)?;
        file.write_all(b"\n")?;
        for (_, t) in &self.tensors {
            for v in t.data() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint header line missing".to_string()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Format(format!("checkpoint header unreadable: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "checkpoint format '{}' does not match '{}'",
                header.format, CHECKPOINT_FORMAT
            )));
        }
        if header.config_hash != header.meta.config_hash() {
            return Err(Error::Format(
                "checkpoint config hash does not match its meta".to_string(),
            ));
        }
        let data = &bytes[nl + 1..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for ht in &header.tensors {
            let numel: usize = ht.shape.iter().product();
            let start = ht.offset as usize;
            let end = start + numel * 8;
            if end > data.len() {
                return Err(Error::Format(format!(
                    "checkpoint payload truncated for tensor '{}'",
                    ht.name
                )));
            }
            let mut vals = Vec::with_capacity(numel);
            for chunk in data[start..end].chunks_exact(8) {
                vals.push(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
            }
            tensors.push((ht.name.clone(), Tensor::new(ht.shape.clone(), vals)?));
        }
        Ok(Checkpoint {
            meta: header.meta,
            step: header.step,
            tensors,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Rebuilds generator parameters from the stored tensors.
    pub fn generator_params(&self) -> Result<GeneratorParams> {
        let spec = self.meta.gen_spec.clone();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for i in 0..spec.layers.len() {
            let kernel = self
                .tensor(&format!("gen.layer{i}.kernel"))
                .ok_or_else(|| Error::Format(format!("checkpoint missing gen.layer{i}.kernel")))?
                .clone();
            let bias = self
                .tensor(&format!("gen.layer{i}.bias"))
                .ok_or_else(|| Error::Format(format!("checkpoint missing gen.layer{i}.bias")))?
                .clone();
            layers.push(ConvLayer { kernel, bias });
        }
        Ok(GeneratorParams { spec, layers })
    }

    /// Rebuilds critic parameters when the checkpoint carries them.
    pub fn critic_params(&self) -> Result<Option<CriticParams>> {
        let Some(spec) = self.meta.critic_spec.clone() else {
            return Ok(None);
        };
        let mut convs = Vec::with_capacity(spec.convs.len());
        for i in 0..spec.convs.len() {
            let kernel = self
                .tensor(&format!("critic.conv{i}.kernel"))
                .ok_or_else(|| Error::Format(format!("checkpoint missing critic.conv{i}.kernel")))?
                .clone();
            let bias = self
                .tensor(&format!("critic.conv{i}.bias"))
                .ok_or_else(|| Error::Format(format!("checkpoint missing critic.conv{i}.bias")))?
                .clone();
            convs.push(ConvLayer { kernel, bias });
        }
        let fetch = |n: &str| -> Result<Tensor> {
            self.tensor(n)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint missing {n}")))
        };
        Ok(Some(CriticParams {
            spec,
            convs,
            fc1: DenseLayer {
                weight: fetch("critic.fc1.weight")?,
                bias: fetch("critic.fc1.bias")?,
            },
            fc2: DenseLayer {
                weight: fetch("critic.fc2.weight")?,
                bias: fetch("critic.fc2.bias")?,
            },
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            variant: "smgan3d".to_string(),
            gen_spec: GeneratorSpec::smgan_3d(),
            critic_spec: Some(CriticSpec::smgan()),
            patch: [11, 80, 80],
            hu_lo: -1024.0,
            hu_hi: 3071.0,
        }
    }

    #[test]
    fn generator_maps_80x80x11_to_64x64x3() {
        let spec = GeneratorSpec::smgan_3d();
        assert_eq!(
            spec.output_shape(&[2, 1, 11, 80, 80]).unwrap(),
            vec![2, 1, 3, 64, 64]
        );
        // Desk scale: same arithmetic.
        assert_eq!(
            spec.output_shape(&[1, 1, 11, 40, 40]).unwrap(),
            vec![1, 1, 3, 24, 24]
        );
    }

    #[test]
    fn generator_shape_invariant_generic() {
        let spec = GeneratorSpec::smgan_3d();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..8 {
            let d = rng.gen_range(9..14usize);
            let h = rng.gen_range(17..40usize);
            let w = rng.gen_range(17..40usize);
            assert_eq!(
                spec.output_shape(&[1, 1, d, h, w]).unwrap(),
                vec![1, 1, d - 8, h - 16, w - 16]
            );
        }
        assert!(spec.output_shape(&[1, 1, 8, 20, 20]).is_err());
    }

    use rand::Rng;

    #[test]
    fn all_zero_parameters_give_all_zero_output() {
        let spec = GeneratorSpec::custom(
            1,
            vec![
                ConvLayerSpec {
                    filters: 4,
                    kernel: [1, 3, 3],
                },
                ConvLayerSpec {
                    filters: 1,
                    kernel: [3, 3, 3],
                },
            ],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = GeneratorParams::init(spec, &mut rng);
        for l in &mut params.layers {
            l.kernel = Tensor::zeros(l.kernel.shape());
        }
        let g = Graph::new();
        let vals = params.to_values(&g, false).unwrap();
        let y = g.constant(Tensor::filled(&[1, 1, 5, 9, 9], 0.5)).unwrap();
        let out = generator_forward(&vals, &y).unwrap();
        assert!(out.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn critic_trace_and_flatten_match_the_stated_cascade() {
        let spec = CriticSpec::smgan();
        let trace = spec.trace().unwrap();
        let hs: Vec<usize> = trace.iter().map(|t| t[0]).collect();
        assert_eq!(hs, vec![62, 30, 28, 13, 11, 5]);
        assert_eq!(spec.flat_features().unwrap(), 256 * 5 * 5);
    }

    #[test]
    fn critic_zero_parameters_score_zero_and_batch_independent() {
        let spec = CriticSpec::reduced([16, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = CriticParams::init(spec, &mut rng).unwrap();
        for l in &mut params.convs {
            l.kernel = Tensor::zeros(l.kernel.shape());
        }
        params.fc1.weight = Tensor::zeros(params.fc1.weight.shape());
        params.fc2.weight = Tensor::zeros(params.fc2.weight.shape());

        let g = Graph::new();
        let vals = params.to_values(&g, false).unwrap();
        let slab = g.constant(Tensor::filled(&[2, 3, 16, 16], 0.3)).unwrap();
        let scores = critic_forward(&vals, &slab).unwrap();
        assert_eq!(scores.tensor().data(), &[0.0, 0.0]);
    }

    #[test]
    fn critic_scores_permute_with_batch_order() {
        let spec = CriticSpec::reduced([16, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = CriticParams::init(spec, &mut rng).unwrap();
        let g = Graph::new();
        let vals = params.to_values(&g, false).unwrap();

        let a: Vec<f64> = (0..3 * 256).map(|i| (i as f64).sin().abs()).collect();
        let b: Vec<f64> = (0..3 * 256).map(|i| (i as f64).cos().abs()).collect();
        let mut ab = a.clone();
        ab.extend(&b);
        let mut ba = b.clone();
        ba.extend(&a);

        let s_ab = critic_forward(
            &vals,
            &g.constant(Tensor::new(vec![2, 3, 16, 16], ab).unwrap()).unwrap(),
        )
        .unwrap()
        .tensor();
        let s_ba = critic_forward(
            &vals,
            &g.constant(Tensor::new(vec![2, 3, 16, 16], ba).unwrap()).unwrap(),
        )
        .unwrap()
        .tensor();
        assert_eq!(s_ab.data()[0], s_ba.data()[1]);
        assert_eq!(s_ab.data()[1], s_ba.data()[0]);
    }

    #[test]
    fn init_is_seeded_and_he_scaled() {
        let spec = GeneratorSpec::smgan_3d();
        let a = GeneratorParams::init(spec.clone(), &mut ChaCha8Rng::seed_from_u64(5));
        let b = GeneratorParams::init(spec.clone(), &mut ChaCha8Rng::seed_from_u64(5));
        let c = GeneratorParams::init(spec.clone(), &mut ChaCha8Rng::seed_from_u64(6));
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());

        // Layer 2 kernel holds 32*32*3*3*3 = 27648 draws: sample variance
        // within 20% of 2/fan_in.
        let k = &a.layers[1].kernel;
        let fan_in = 32 * 3 * 3 * 3;
        let want = 2.0 / fan_in as f64;
        let mean: f64 = k.data().iter().sum::<f64>() / k.numel() as f64;
        let var: f64 =
            k.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k.numel() as f64;
        assert!(
            (var - want).abs() < 0.2 * want,
            "sample var {var} vs target {want}"
        );
    }

    #[test]
    fn slab_views_depth_three_is_one_bit_exact_slab() {
        let g = Graph::new();
        let n = 2 * 3 * 4 * 4;
        let t = Tensor::new(vec![2, 1, 3, 4, 4], (0..n).map(|v| v as f64).collect()).unwrap();
        let v = g.constant(t.clone()).unwrap();
        let slabs = slab_views(&v).unwrap();
        assert_eq!(slabs.len(), 1);
        assert_eq!(slabs[0].shape(), vec![2, 3, 4, 4]);
        assert_eq!(slabs[0].tensor().data(), t.data());

        let stacked = stack_slabs(&t).unwrap();
        assert_eq!(stacked.shape(), &[2, 3, 4, 4]);
        assert_eq!(stacked.data(), t.data());
    }

    #[test]
    fn slab_views_depth_five_gives_three_windows() {
        let g = Graph::new();
        let n = 1 * 5 * 2 * 2;
        let t = Tensor::new(vec![1, 1, 5, 2, 2], (0..n).map(|v| v as f64).collect()).unwrap();
        let v = g.constant(t.clone()).unwrap();
        let slabs = slab_views(&v).unwrap();
        assert_eq!(slabs.len(), 3);
        // Window k starts at slice k; channel c is slice k+c.
        for (k, slab) in slabs.iter().enumerate() {
            let st = slab.tensor();
            for c in 0..3 {
                let want = &t.data()[(k + c) * 4..][..4];
                assert_eq!(&st.data()[c * 4..][..4], want);
            }
        }

        let shallow = g.constant(Tensor::zeros(&[1, 1, 2, 2, 2])).unwrap();
        assert!(slab_views(&shallow).is_err());
    }

    #[test]
    fn slab_view_2d_replicates_channels() {
        let g = Graph::new();
        let t = Tensor::new(vec![1, 1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = g.constant(t).unwrap();
        let slab = slab_view_2d(&v).unwrap();
        assert_eq!(slab.shape(), vec![1, 3, 2, 2]);
        for c in 0..3 {
            assert_eq!(&slab.tensor().data()[c * 4..][..4], &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gen = GeneratorParams::init(GeneratorSpec::smgan_2d(), &mut rng);
        let mut tensors: Vec<(String, Tensor)> = gen
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        tensors.push(("adam.step_scale".to_string(), Tensor::scalar(0.1)));

        let ckpt = Checkpoint {
            meta: meta(),
            step: 123,
            tensors,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.step, 123);
        assert_eq!(loaded.tensors.len(), ckpt.tensors.len());
        for ((an, at), (bn, bt)) in ckpt.tensors.iter().zip(&loaded.tensors) {
            assert_eq!(an, bn);
            assert_eq!(at.checksum(), bt.checksum());
        }
        // Forward outputs reproduce bit-exactly.
        let rebuilt = loaded.generator_params().unwrap();
        let g = Graph::new();
        let y = Tensor::filled(&[1, 1, 1, 20, 20], 0.4);
        let a = generator_forward(&gen.to_values(&g, false).unwrap(), &g.constant(y.clone()).unwrap())
            .unwrap()
            .tensor();
        let g2 = Graph::new();
        let b = generator_forward(
            &rebuilt.to_values(&g2, false).unwrap(),
            &g2.constant(y).unwrap(),
        )
        .unwrap()
        .tensor();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn checkpoint_version_mismatch_is_a_format_error() {
        let ckpt = Checkpoint {
            meta: meta(),
            step: 0,
            tensors: vec![("t".to_string(), Tensor::scalar(1.0))],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        ckpt.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let s = String::from_utf8_lossy(&bytes).replace("smgan-ckpt-1", "smgan-ckpt-9");
        bytes = s.into_bytes();
        std::fs::write(&path, bytes).unwrap();
        match Checkpoint::load(&path) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn critic_for_input_picks_fitting_stack() {
        assert_eq!(CriticSpec::for_input([64, 64]).unwrap().convs.len(), 6);
        let small = CriticSpec::for_input([24, 24]).unwrap();
        assert_eq!(small.convs.len(), 4);
        assert!(small.trace().is_ok());
    }
}
