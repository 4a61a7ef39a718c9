//! Synthetic volumetric phantoms, their binary file format, and the dataset
//! manifest.
//!
//! Every sample holds a soft ellipsoidal "organ"; positives also hold a
//! smaller, brighter ellipsoidal "lesion" whose voxels form the mask.
//!
//! Volume file layout (little-endian):
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 4     | magic `IAGV`                            |
//! | 1     | version (1)                             |
//! | 12    | depth, height, width as `u32`           |
//! | 1     | image label (0/1)                       |
//! | 1     | has-voxel-labels flag (0/1)             |
//! | 1     | reserved, zero                          |
//! | 4·DHW | voxels as `f32`, depth-major            |
//! | DHW   | mask bytes (0/1)                        |

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

pub const VOLUME_MAGIC: [u8; 4] = *b"IAGV";
pub const VOLUME_VERSION: u8 = 1;
pub const VOLUME_HEADER_LEN: usize = 20;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Intensity window (HU) applied before scaling to `[0, 1]`.
pub const HU_WINDOW: (f64, f64) = (-125.0, 350.0);

/// Largest volume the reader accepts, in voxels.
const MAX_VOXELS: u64 = 1 << 31;

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub id: String,
    /// `[depth, height, width]`
    pub dims: [usize; 3],
    /// Depth-major intensities in `[0, 1]`.
    pub voxels: Vec<f32>,
    /// Ground-truth lesion mask. Present for every sample on disk; training
    /// only reads it when `has_voxel_labels` is set.
    pub mask: Vec<u8>,
    pub image_label: u8,
    pub has_voxel_labels: bool,
}

impl VolumeSample {
    pub fn depth(&self) -> usize {
        self.dims[0]
    }

    pub fn plane(&self) -> usize {
        self.dims[1] * self.dims[2]
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_positive(&self) -> bool {
        self.image_label == 1
    }

    /// Intensities of one axial slice as `f64`.
    pub fn slice(&self, z: usize) -> Vec<f64> {
        let p = self.plane();
        self.voxels[z * p..(z + 1) * p].iter().map(|&v| v as f64).collect()
    }

    /// Mask entries of the given slices, concatenated, as `0.0`/`1.0`.
    pub fn mask_for_slices(&self, slices: &[usize]) -> Vec<f64> {
        gather_slices(&self.mask, self.plane(), slices)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_voxels();
        if self.voxels.len() != n || self.mask.len() != n {
            return Err(Error::shape(
                "volume",
                format!(
                    "dims {:?} need {n} voxels, have {} voxels and {} mask bytes",
                    self.dims,
                    self.voxels.len(),
                    self.mask.len()
                ),
            ));
        }
        if self.voxels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("{}: voxel outside [0, 1]", self.id)));
        }
        if self.mask.iter().any(|&m| m > 1) {
            return Err(Error::invalid(format!("{}: mask entries must be 0 or 1", self.id)));
        }
        let has_lesion = self.mask.contains(&1);
        if has_lesion != (self.image_label == 1) {
            return Err(Error::invalid(format!(
                "{}: image label {} disagrees with mask",
                self.id, self.image_label
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.num_voxels();
        let mut out = Vec::with_capacity(VOLUME_HEADER_LEN + 5 * n);
        out.extend_from_slice(&VOLUME_MAGIC);
        out.push(VOLUME_VERSION);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(self.image_label);
        out.push(self.has_voxel_labels as u8);
        out.push(0);
        for v in &self.voxels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.mask);
        out
    }

    pub fn from_bytes(id: impl Into<String>, bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < VOLUME_HEADER_LEN {
            return Err(FormatError::Truncated {
                expected: VOLUME_HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != VOLUME_MAGIC {
            return Err(FormatError::BadMagic {
                expected: VOLUME_MAGIC,
                found: magic,
            });
        }
        if bytes[4] != VOLUME_VERSION {
            return Err(FormatError::UnsupportedVersion(bytes[4]));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().expect("4 bytes")) as u64;
        let raw_dims = [dim(0), dim(1), dim(2)];
        let voxels = raw_dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_VOXELS)
            .ok_or_else(|| FormatError::DimOverflow(raw_dims.to_vec()))?;
        if voxels == 0 {
            return Err(FormatError::InvalidField {
                field: "dims",
                value: 0,
            });
        }
        let n = voxels as usize;
        let (label, flag, reserved) = (bytes[17], bytes[18], bytes[19]);
        if label > 1 {
            return Err(FormatError::InvalidField {
                field: "image_label",
                value: label as u64,
            });
        }
        if flag > 1 {
            return Err(FormatError::InvalidField {
                field: "has_voxel_labels",
                value: flag as u64,
            });
        }
        if reserved != 0 {
            return Err(FormatError::InvalidField {
                field: "reserved",
                value: reserved as u64,
            });
        }
        let expected = VOLUME_HEADER_LEN + 5 * n;
        if bytes.len() < expected {
            return Err(FormatError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(FormatError::TrailingBytes(bytes.len() - expected));
        }
        let body = &bytes[VOLUME_HEADER_LEN..];
        let voxels = body[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mask = body[4 * n..].to_vec();
        Ok(VolumeSample {
            id: id.into(),
            dims: raw_dims.map(|d| d as usize),
            voxels,
            mask,
            image_label: label,
            has_voxel_labels: flag == 1,
        })
    }
}

/// Expected on-disk size of a volume file.
pub fn volume_file_len(dims: [usize; 3]) -> usize {
    let n: usize = dims.iter().product();
    VOLUME_HEADER_LEN + 4 * n + n
}

pub fn save_sample(sample: &VolumeSample, path: &Path) -> Result<()> {
    fs::write(path, sample.to_bytes())?;
    Ok(())
}

pub fn load_sample(path: &Path) -> Result<VolumeSample> {
    let bytes = fs::read(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(VolumeSample::from_bytes(id, &bytes)?)
}

pub(crate) fn gather_slices<T: Copy + Into<f64>>(values: &[T], plane: usize, slices: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(slices.len() * plane);
    for &z in slices {
        out.extend(values[z * plane..(z + 1) * plane].iter().map(|&v| v.into()));
    }
    out
}

/// Clamps to `[lo, hi]` and maps affinely onto `[0, 1]`.
pub fn normalize_intensity(raw: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>> {
    if !(lo < hi) {
        return Err(Error::invalid(format!("intensity window needs lo < hi, got [{lo}, {hi}]")));
    }
    Ok(raw.iter().map(|&v| (v.clamp(lo, hi) - lo) / (hi - lo)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub num: usize,
    pub pos_frac: f64,
    pub labeled_frac: f64,
    pub dims: [usize; 3],
    pub seed: u64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            num: 32,
            pos_frac: 0.5,
            labeled_frac: 0.5,
            dims: [12, 24, 24],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub path: String,
    pub image_label: u8,
    pub has_voxel_labels: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub generator: GeneratorParams,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.image_label == 1).count()
    }

    pub fn labeled(&self) -> usize {
        self.samples.iter().filter(|s| s.has_voxel_labels).count()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::invalid(format!("unsupported manifest version {}", manifest.version)));
        }
        let mut ids: Vec<&str> = manifest.samples.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("manifest sample ids are not unique"));
        }
        Ok(manifest)
    }
}

/// Loads every sample listed in `dir/manifest.json`, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<VolumeSample>)> {
    let manifest = DatasetManifest::load(dir)?;
    let samples = manifest
        .samples
        .iter()
        .map(|rec| {
            let mut s = load_sample(&dir.join(&rec.path))?;
            s.id = rec.id.clone();
            if s.image_label != rec.image_label || s.has_voxel_labels != rec.has_voxel_labels {
                return Err(Error::invalid(format!("{}: file header disagrees with manifest", rec.id)));
            }
            s.validate()?;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

/// Geometry of a generated ellipsoid in voxel coordinates.
#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Normalized radial distance; `< 1` inside.
    fn rho(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

const BACKGROUND_LEVEL: f64 = 0.15;
const ORGAN_BAND: (f64, f64) = (0.4, 0.6);
const LESION_BAND: (f64, f64) = (0.65, 0.85);
const LESION_VOLUME_FRAC: (f64, f64) = (0.05, 0.15);
const NOISE_SIGMA: f64 = 0.05;
/// Width of the organ's soft boundary in normalized radius.
const ORGAN_SOFTNESS: f64 = 0.08;
/// Smallest lesion radius, in voxels, along any axis.
const MIN_LESION_RADIUS: f64 = 0.87;

/// Generates one phantom. Pure function of its arguments.
pub fn generate_sample(id: &str, dims: [usize; 3], positive: bool, labeled: bool, rng: &mut ChaCha8Rng) -> Result<VolumeSample> {
    let [d, h, w] = dims;
    let extent = [d as f64, h as f64, w as f64];
    let organ_radii = extent.map(|e| e * rng.random_range(0.30..0.36));
    let organ = Ellipsoid {
        center: std::array::from_fn(|i| (extent[i] - 1.0) / 2.0 + rng.random_range(-0.05..0.05) * extent[i]),
        radii: organ_radii,
    };
    let organ_level = rng.random_range(ORGAN_BAND.0..ORGAN_BAND.1);
    let lesion = if positive {
        let frac = rng.random_range(LESION_VOLUME_FRAC.0..LESION_VOLUME_FRAC.1);
        let scale = frac.cbrt();
        let radii = organ.radii.map(|r| r * scale);
        if radii.iter().any(|&r| r < MIN_LESION_RADIUS) {
            return Err(Error::invalid(format!(
                "dims {dims:?} too small to fit a lesion inside the organ"
            )));
        }
        // Offsets below (1 - scale) in normalized organ units keep the lesion inside.
        let reach = 0.6 * (1.0 - scale);
        let dir: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        let t = rng.random_range(0.0..reach);
        let center = std::array::from_fn(|i| organ.center[i] + dir[i] / norm * t * organ.radii[i]);
        let level = rng.random_range(LESION_BAND.0..LESION_BAND.1);
        Some((Ellipsoid { center, radii }, level))
    } else {
        None
    };
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");

    let n = d * h * w;
    let mut voxels = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let rho = organ.rho(p);
                let inside = crate::kernels::sigmoid((1.0 - rho) / ORGAN_SOFTNESS);
                let mut level = BACKGROUND_LEVEL + (organ_level - BACKGROUND_LEVEL) * inside;
                let mut in_lesion = false;
                if let Some((les, les_level)) = &lesion {
                    if les.rho(p) <= 1.0 {
                        level = *les_level;
                        in_lesion = true;
                    }
                }
                let v = (level + noise.sample(rng)).clamp(0.0, 1.0);
                voxels.push(v as f32);
                mask.push(in_lesion as u8);
            }
        }
    }
    if positive && !mask.contains(&1) {
        return Err(Error::invalid(format!("dims {dims:?} produced an empty lesion mask")));
    }
    let sample = VolumeSample {
        id: id.to_string(),
        dims,
        voxels,
        mask,
        image_label: positive as u8,
        has_voxel_labels: positive && labeled,
    };
    sample.validate()?;
    Ok(sample)
}

/// Draws the positive/labeled assignment and all phantoms for `params`.
pub fn generate_samples(params: &GeneratorParams) -> Result<Vec<VolumeSample>> {
    if params.num < 2 {
        return Err(Error::invalid("need at least 2 samples"));
    }
    if !(params.pos_frac > 0.0 && params.pos_frac < 1.0) {
        return Err(Error::invalid(format!("pos_frac must lie in (0, 1), got {}", params.pos_frac)));
    }
    if !(0.0..=1.0).contains(&params.labeled_frac) {
        return Err(Error::invalid(format!("labeled_frac must lie in [0, 1], got {}", params.labeled_frac)));
    }
    if params.dims.iter().any(|&e| e < 3) {
        return Err(Error::invalid(format!("dims {:?} too small", params.dims)));
    }
    let positives = (params.num as f64 * params.pos_frac).round() as usize;
    let labeled = (positives as f64 * params.labeled_frac).round() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut order: Vec<usize> = (0..params.num).collect();
    order.shuffle(&mut rng);
    let mut kind = vec![(false, false); params.num];
    for (rank, &i) in order.iter().enumerate() {
        kind[i] = (rank < positives, rank < labeled);
    }

    kind.par_iter()
        .enumerate()
        .map(|(i, &(positive, is_labeled))| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(i as u64 + 1);
            generate_sample(&format!("case{i:04}"), params.dims, positive, is_labeled, &mut rng)
        })
        .collect()
}

/// Generates a dataset into `out_dir` (files plus manifest).
pub fn generate_dataset(params: &GeneratorParams, out_dir: &Path) -> Result<DatasetManifest> {
    let samples = generate_samples(params)?;
    fs::create_dir_all(out_dir)?;
    let records = samples
        .par_iter()
        .map(|s| {
            let file = format!("{}.iagv", s.id);
            save_sample(s, &out_dir.join(&file))?;
            Ok(SampleRecord {
                id: s.id.clone(),
                path: file,
                image_label: s.image_label,
                has_voxel_labels: s.has_voxel_labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        generator: params.clone(),
        samples: records,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

pub fn sample_path(dir: &Path, rec: &SampleRecord) -> PathBuf {
    dir.join(&rec.path)
}
