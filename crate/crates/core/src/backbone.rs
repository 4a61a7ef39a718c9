//! Slice-wise convolutional feature extractor and the model parameter set.
//!
//! Each selected axial slice runs through `conv -> relu -> ... -> conv`
//! independently with same padding, so the feature lattice keeps the input
//! resolution. Per-slice outputs are stacked along depth into an `[N, C]`
//! instance matrix, one row per lattice location.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::data::VolumeSample;
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: [u8; 4] = *b"IAGM";
pub const MODEL_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub depth: usize,
    pub width: usize,
    pub kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            depth: 3,
            width: 16,
            kernel: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 {
            return Err(Error::invalid(format!("backbone needs depth and width >= 1, got {self:?}")));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {}", self.kernel)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[Cout, Cin, k, k]`
    pub kernels: Tensor,
    /// `[Cout]`
    pub bias: Tensor,
}

/// Backbone weights plus the attention, global and local heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<ConvLayer>,
    pub w_attention: Tensor,
    pub w_global: Tensor,
    pub w_local: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl ModelParams {
    /// Uniform initialization in `[-s, s]` with `s = 1/sqrt(fan_in)`.
    pub fn init(config: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let mut layers = Vec::with_capacity(config.depth);
        let mut cin = 1;
        for _ in 0..config.depth {
            let bound = 1.0 / ((cin * k * k) as f64).sqrt();
            let kernels = uniform(rng, vec![config.width, cin, k, k], bound);
            let bias = uniform(rng, vec![config.width], bound);
            layers.push(ConvLayer { kernels, bias });
            cin = config.width;
        }
        let head = 1.0 / (config.width as f64).sqrt();
        Ok(ModelParams {
            layers,
            w_attention: uniform(rng, vec![config.width], head),
            w_global: uniform(rng, vec![config.width], head),
            w_local: uniform(rng, vec![config.width], head),
        })
    }

    /// Feature channels `C` produced by the last layer.
    pub fn channels(&self) -> usize {
        self.layers.last().map(|l| l.kernels.shape()[0]).unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let mut cin = 1;
        for (i, l) in self.layers.iter().enumerate() {
            let ks = l.kernels.shape();
            if ks.len() != 4 || ks[1] != cin || ks[2] != ks[3] || ks[2] % 2 == 0 || l.bias.shape() != [ks[0]] {
                return Err(Error::shape(
                    "model",
                    format!("layer {i}: kernels {ks:?}, bias {:?}, expected {cin} input channels", l.bias.shape()),
                ));
            }
            cin = ks[0];
        }
        for (name, head) in self.heads() {
            if head.len() != cin {
                return Err(Error::shape(
                    "model",
                    format!("head {name} has {} entries but features have {cin} channels", head.len()),
                ));
            }
        }
        if self.tensors().any(|t| !t.is_finite()) {
            return Err(Error::invalid("model parameters contain non-finite values"));
        }
        Ok(())
    }

    fn heads(&self) -> [(&'static str, &Tensor); 3] {
        [
            ("attention", &self.w_attention),
            ("global", &self.w_global),
            ("local", &self.w_local),
        ]
    }

    /// All parameter tensors in a fixed order: per layer kernels then bias,
    /// then the attention, global and local heads.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.kernels, &l.bias])
            .chain([&self.w_attention, &self.w_global, &self.w_local])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.kernels, &mut l.bias])
            .chain([&mut self.w_attention, &mut self.w_global, &mut self.w_local])
    }

    /// Human-readable names matching [`ModelParams::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.layers.len() {
            names.push(format!("conv{i}.kernels"));
            names.push(format!("conv{i}.bias"));
        }
        names.extend(["w_attention", "w_global", "w_local"].map(String::from));
        names
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Versioned little-endian encoding: magic `IAGM`, version byte, layer
    /// count, `(cout, cin, k)` per layer as `u32`, then every tensor of
    /// [`ModelParams::tensors`] as `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.num_params());
        out.extend_from_slice(&MODEL_MAGIC);
        out.push(MODEL_VERSION);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            let s = l.kernels.shape();
            for d in [s[0], s[1], s[2]] {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for t in self.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != MODEL_MAGIC {
            return Err(FormatError::BadMagic {
                expected: MODEL_MAGIC,
                found: magic,
            }
            .into());
        }
        let version = r.take(1)?[0];
        if version != MODEL_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let n_layers = r.u32()? as usize;
        if n_layers == 0 || n_layers > 1024 {
            return Err(FormatError::InvalidField {
                field: "layers",
                value: n_layers as u64,
            }
            .into());
        }
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let (cout, cin, k) = (r.u32()? as u64, r.u32()? as u64, r.u32()? as u64);
            cout.checked_mul(cin)
                .and_then(|v| v.checked_mul(k))
                .and_then(|v| v.checked_mul(k))
                .filter(|&v| v > 0 && v <= 1 << 28)
                .ok_or_else(|| FormatError::DimOverflow(vec![cout, cin, k, k]))?;
            shapes.push([cout as usize, cin as usize, k as usize]);
        }
        let mut layers = Vec::with_capacity(n_layers);
        for [cout, cin, k] in shapes {
            let kernels = Tensor::new(vec![cout, cin, k, k], r.f64s(cout * cin * k * k)?)?;
            let bias = Tensor::new(vec![cout], r.f64s(cout)?)?;
            layers.push(ConvLayer { kernels, bias });
        }
        let c = layers.last().expect("at least one layer").kernels.shape()[0];
        let w_attention = Tensor::vector(r.f64s(c)?);
        let w_global = Tensor::vector(r.f64s(c)?);
        let w_local = Tensor::vector(r.f64s(c)?);
        if r.pos != bytes.len() {
            return Err(FormatError::TrailingBytes(bytes.len() - r.pos).into());
        }
        let params = ModelParams {
            layers,
            w_attention,
            w_global,
            w_local,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(FormatError::Truncated {
            expected: self.pos.saturating_add(n),
            actual: self.bytes.len(),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let raw = self.take(n.checked_mul(8).ok_or(FormatError::DimOverflow(vec![n as u64]))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub layers: Vec<(Var, Var)>,
    pub w_attention: Var,
    pub w_global: Var,
    pub w_local: Var,
}

impl ParamVars {
    /// Registers every tensor; `trainable` selects param vs constant leaves.
    pub fn register(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let layers = params.layers.iter().map(|l| (leaf(&l.kernels), leaf(&l.bias))).collect();
        ParamVars {
            layers,
            w_attention: leaf(&params.w_attention),
            w_global: leaf(&params.w_global),
            w_local: leaf(&params.w_local),
        }
    }

    /// Vars in the order of [`ModelParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|&(k, b)| [k, b])
            .chain([self.w_attention, self.w_global, self.w_local])
            .collect()
    }

    /// Gradients in [`ModelParams::tensors`] order; a parameter the loss
    /// does not reach gets zeros.
    pub fn collect_grads(&self, grads: &Gradients, params: &ModelParams) -> Vec<Vec<f64>> {
        self.vars()
            .into_iter()
            .zip(params.tensors())
            .map(|(v, t)| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    }
}

/// Spatial index set of a feature map: `depth` stacked slices of
/// `height x width`, flattened depth-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lattice {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Lattice {
    pub fn len(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Instance features on a tape: `features` is `[N, C]` with row `x`
/// holding `f_x`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub features: Var,
    pub lattice: Lattice,
    pub channels: usize,
}

pub fn validate_slices(depth: usize, slices: &[usize]) -> Result<()> {
    if slices.is_empty() {
        return Err(Error::invalid("slice list is empty"));
    }
    if slices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!("slice indices must be strictly increasing, got {slices:?}")));
    }
    if let Some(&last) = slices.last() {
        if last >= depth {
            return Err(Error::invalid(format!("slice {last} out of range for depth {depth}")));
        }
    }
    Ok(())
}

/// Runs the conv stack on each selected slice and stacks the results.
pub fn extract_features(tape: &mut Tape, vars: &ParamVars, volume: &VolumeSample, slices: &[usize]) -> Result<FeatureMap> {
    validate_slices(volume.depth(), slices)?;
    let [_, h, w] = volume.dims;
    let mut planes = Vec::with_capacity(slices.len());
    for &z in slices {
        let input = tape.constant(Tensor::new(vec![1, h, w], volume.slice(z))?);
        planes.push(conv_stack(tape, vars, input)?);
    }
    let features = tape.channels_last(&planes)?;
    let channels = tape.value(features).shape()[1];
    for (name, head) in [("attention", vars.w_attention), ("global", vars.w_global), ("local", vars.w_local)] {
        let len = tape.value(head).len();
        if len != channels {
            return Err(Error::shape(
                "extract_features",
                format!("{name} head has {len} entries, feature map has {channels} channels"),
            ));
        }
    }
    Ok(FeatureMap {
        features,
        lattice: Lattice {
            depth: slices.len(),
            height: h,
            width: w,
        },
        channels,
    })
}

/// `conv -> relu -> ... -> conv` on one `[Cin, H, W]` plane.
pub fn conv_stack(tape: &mut Tape, vars: &ParamVars, input: Var) -> Result<Var> {
    let mut x = input;
    for (i, &(k, b)) in vars.layers.iter().enumerate() {
        if i > 0 {
            x = tape.relu(x);
        }
        x = tape.conv2d(x, k, b)?;
    }
    Ok(x)
}
