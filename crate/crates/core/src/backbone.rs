//! Small strided convolutional embedding network.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_out_size, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::{crop_normalized, Image};
use crate::top_prior::{pool_mass, TopMap};

const CHECKPOINT_MAGIC: &[u8; 4] = b"SOCL";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl LayerSpec {
    pub const fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Layer list plus the square input size it expects. ReLU follows every
/// layer except the last.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input_size: usize,
    pub layers: Vec<LayerSpec>,
}

impl Arch {
    /// 3->16 k5 s2, 16->32 k3 s2, 32->32 k3 s2, 32->32 k3 s1 p1 on 96x96.
    pub fn desk() -> Self {
        Self {
            input_size: 96,
            layers: vec![
                LayerSpec::new(3, 16, 5, 2, 0),
                LayerSpec::new(16, 32, 3, 2, 0),
                LayerSpec::new(32, 32, 3, 2, 0),
                LayerSpec::new(32, 32, 3, 1, 1),
            ],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("architecture has no layers".into()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::Config(format!(
                    "layer {} outputs {} channels but layer {} expects {}",
                    i,
                    pair[0].out_channels,
                    i + 1,
                    pair[1].in_channels
                )));
            }
        }
        if self.layers.iter().any(|l| l.kernel == 0 || l.stride == 0 || l.in_channels == 0 || l.out_channels == 0) {
            return Err(Error::Config("kernel, stride and channel counts must be positive".into()));
        }
        self.output_size_for(self.input_size).map(|_| ())
    }

    /// Spatial size after every layer for a square input.
    pub fn output_size_for(&self, input: usize) -> Result<usize> {
        self.layers.iter().try_fold(input, |s, l| {
            conv_out_size(s, l.kernel, l.stride, l.pad)
                .filter(|&o| o > 0)
                .ok_or_else(|| Error::Config(format!("input {input} too small for the layer chain")))
        })
    }

    pub fn output_size(&self) -> usize {
        self.output_size_for(self.input_size).unwrap_or(0)
    }

    /// Total stride and the input coordinate (continuous, pixel centers at
    /// +0.5) of feature cell 0's receptive-field center.
    pub fn cell_geometry(&self) -> (f64, f64) {
        let mut stride = 1.0;
        let mut offset = 0.5;
        for l in &self.layers {
            offset += stride * ((l.kernel as f64 - 1.0) / 2.0 - l.pad as f64);
            stride *= l.stride as f64;
        }
        (stride, offset)
    }

    /// Input-coordinate center of feature cell `i`.
    pub fn cell_center(&self, i: f64) -> f64 {
        let (stride, offset) = self.cell_geometry();
        offset + stride * i
    }

    /// Cell boundaries in input coordinates: cell `i` spans
    /// `[center(i) - stride/2, center(i) + stride/2)`.
    pub fn cell_edges(&self) -> Vec<f64> {
        let (stride, offset) = self.cell_geometry();
        (0..=self.output_size()).map(|i| offset - 0.5 * stride + stride * i as f64).collect()
    }
}

/// Network weights. Kernels are `[out, in, k, k]`, biases `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub arch: Arch,
    pub kernels: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

/// He-uniform kernels (bound `sqrt(6/fan_in)`), biases uniform in `+-1/sqrt(fan_in)`.
pub fn init_backbone(arch: &Arch, seed: u64) -> Result<BackboneParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kernels = Vec::new();
    let mut biases = Vec::new();
    for l in &arch.layers {
        let fan_in = l.fan_in() as f64;
        let bound = (6.0 / fan_in).sqrt();
        kernels.push(Tensor::from_fn([l.out_channels, l.in_channels, l.kernel, l.kernel], |_| {
            rng.gen_range(-bound..bound)
        }));
        let bb = 1.0 / fan_in.sqrt();
        biases.push(Tensor::from_fn([l.out_channels], |_| rng.gen_range(-bb..bb)));
    }
    Ok(BackboneParams {
        arch: arch.clone(),
        kernels,
        biases,
    })
}

impl BackboneParams {
    /// Parameter tensors in a fixed order (kernel, bias per layer).
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.kernels.iter().zip(&self.biases).flat_map(|(k, b)| [k, b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.kernels
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(k, b)| [k, b])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Add the parameters to `g`, in [`BackboneParams::tensors`] order.
    pub fn register(&self, g: &mut Graph, requires_grad: bool) -> Vec<Var> {
        self.tensors().into_iter().map(|t| g.leaf(t.clone(), requires_grad)).collect()
    }

    /// Write the checkpoint format: magic, version, layer count, then per
    /// tensor its rank, dims and little-endian f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arch.layers.len() as u32).to_le_bytes());
        for t in self.tensors() {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Parse a checkpoint, validating every shape against `arch`.
    pub fn from_bytes(bytes: &[u8], arch: &Arch, path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| fail("truncated header".into()))? != CHECKPOINT_MAGIC {
            return Err(fail("bad checkpoint magic".into()));
        }
        let version = cur.u32().ok_or_else(|| fail("truncated header".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(fail(format!("unsupported checkpoint version {version}")));
        }
        let layers = cur.u32().ok_or_else(|| fail("truncated header".into()))? as usize;
        if layers != arch.layers.len() {
            return Err(fail(format!("checkpoint has {layers} layers, architecture has {}", arch.layers.len())));
        }
        let template = init_shapes(arch);
        let mut tensors = Vec::new();
        for want in &template {
            let rank = cur.u32().ok_or_else(|| fail("truncated tensor header".into()))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32().ok_or_else(|| fail("truncated tensor header".into()))? as usize);
            }
            if &shape != want {
                return Err(fail(format!("tensor shape {shape:?} does not match architecture {want:?}")));
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let raw = cur.take(4).ok_or_else(|| fail("truncated tensor data".into()))?;
                data.push(f64::from(f32::from_le_bytes(raw.try_into().expect("4 bytes"))));
            }
            tensors.push(Tensor::new(shape, data)?);
        }
        if cur.pos != bytes.len() {
            return Err(fail("trailing bytes after checkpoint".into()));
        }
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for (i, t) in tensors.into_iter().enumerate() {
            if i % 2 == 0 {
                kernels.push(t);
            } else {
                biases.push(t);
            }
        }
        Ok(Self {
            arch: arch.clone(),
            kernels,
            biases,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>, arch: &Arch) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, arch, path)
    }
}

fn init_shapes(arch: &Arch) -> Vec<Vec<usize>> {
    arch.layers
        .iter()
        .flat_map(|l| [vec![l.out_channels, l.in_channels, l.kernel, l.kernel], vec![l.out_channels]])
        .collect()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Forward pass on a `[B, C, S, S]` input node; returns `[B, C_out, H, W]`.
pub fn forward(g: &mut Graph, arch: &Arch, params: &[Var], input: Var) -> Result<Var> {
    let mut x = input;
    for (i, l) in arch.layers.iter().enumerate() {
        x = g.conv2d(x, params[2 * i], Some(params[2 * i + 1]), l.stride, l.pad)?;
        if i + 1 < arch.layers.len() {
            x = g.relu(x);
        }
    }
    Ok(x)
}

/// Location-major `HW x C` view of item `b` of a `[B, C, H, W]` node.
pub fn feature_rows(g: &mut Graph, out: Var, b: usize) -> Result<Var> {
    let s = g.shape(out).to_vec();
    let item = g.index0(out, b)?;
    let flat = g.reshape(item, [s[1], s[2] * s[3]])?;
    g.transpose(flat)
}

/// Feature grid of one crop, stored location-major (`HW x C`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn row(&self, p: usize) -> &[f64] {
        &self.values[p * self.channels..(p + 1) * self.channels]
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }
}

/// Embed a crop already sampled at the architecture's input size.
pub fn embed(params: &BackboneParams, crop: &Image) -> Result<FeatureMap> {
    let s = params.arch.input_size;
    if crop.width() != s || crop.height() != s {
        return Err(Error::Shape(format!(
            "crop is {}x{}, architecture expects {s}x{s}",
            crop.width(),
            crop.height()
        )));
    }
    let input = crop_normalized(crop, s as f64 / 2.0, s as f64 / 2.0, s as f64, s as f64, s, s, params.arch.in_channels());
    embed_input(params, input)
}

/// Embed a normalized channel-major input of the architecture's input size.
pub fn embed_input(params: &BackboneParams, input: Vec<f64>) -> Result<FeatureMap> {
    let s = params.arch.input_size;
    let mut g = Graph::new();
    let vars = params.register(&mut g, false);
    let x = g.constant(Tensor::new([1, params.arch.in_channels(), s, s], input)?);
    let out = forward(&mut g, &params.arch, &vars, x)?;
    let rows = feature_rows(&mut g, out, 0)?;
    let shape = g.shape(out).to_vec();
    Ok(FeatureMap {
        channels: shape[1],
        height: shape[2],
        width: shape[3],
        values: g.value(rows).data().to_vec(),
    })
}

/// Whole frame resampled to the architecture input, as used for training.
pub fn frame_input(arch: &Arch, frame: &Image) -> Vec<f64> {
    let s = arch.input_size;
    let (w, h) = (frame.width() as f64, frame.height() as f64);
    crop_normalized(frame, w / 2.0, h / 2.0, w, h, s, s, arch.in_channels())
}

/// Pool a frame-resolution TOP map onto the feature grid of a whole-frame
/// input, using the receptive-field cell boundaries.
pub fn top_to_features(arch: &Arch, map: &TopMap) -> Result<TopMap> {
    let s = arch.input_size as f64;
    let edges = arch.cell_edges();
    let xs: Vec<f64> = edges.iter().map(|e| e * map.width() as f64 / s).collect();
    let ys: Vec<f64> = edges.iter().map(|e| e * map.height() as f64 / s).collect();
    pool_mass(map, &xs, &ys)
}
