//! Procedural source/target domains sharing one label space.
//!
//! Each class is a fixed tri-channel glyph made of a few colored Gaussian
//! blobs. A domain applies one shift to every glyph: rotation about the image
//! center, a 3×3 per-pixel channel mix, then additive Gaussian noise. Images
//! are flat `C × H × W` vectors of `f32` in `[0, 1]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Glyphs are derived from this seed alone, so every domain sees the same
/// class shapes regardless of its own seed.
const GLYPH_SEED: u64 = 0x676c_7970_6873;
const BLOBS_PER_GLYPH: usize = 3;

pub type Image = Vec<f32>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    pub rotation_deg: f64,
    pub channel_mix: [[f64; 3]; 3],
    pub noise_std: f64,
}

impl DomainShift {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            channel_mix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            noise_std: 0.0,
        }
    }

    fn determinant(&self) -> f64 {
        let m = &self.channel_mix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: u32,
    pub shift: DomainShift,
    pub n_per_class: usize,
    pub image_size: usize,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class < 2 {
            return Err(Error::Config(format!("domain {}: n_per_class must be >= 2", self.domain_id)));
        }
        if self.image_size < 2 {
            return Err(Error::Config(format!("domain {}: image_size must be >= 2", self.domain_id)));
        }
        if self.shift.determinant().abs() <= 1e-6 {
            return Err(Error::Config(format!("domain {}: channel_mix is not invertible", self.domain_id)));
        }
        if !(self.shift.noise_std >= 0.0) || !self.shift.noise_std.is_finite() {
            return Err(Error::Config(format!("domain {}: noise_std must be finite and >= 0", self.domain_id)));
        }
        if !self.shift.rotation_deg.is_finite() {
            return Err(Error::Config(format!("domain {}: rotation_deg must be finite", self.domain_id)));
        }
        Ok(())
    }

    pub fn image_len(&self) -> usize {
        CHANNELS * self.image_size * self.image_size
    }
}

/// A fully labeled domain as produced by [`generate_domain`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DomainSpec,
    pub num_classes: usize,
    pub seed: u64,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// One domain's annotated/unannotated partition.
///
/// `unannotated_labels` holds the ground truth of the unannotated pool. The
/// trainer never reads it; it exists so target accuracy can be measured.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainFewShotSplit {
    pub domain_id: u32,
    pub num_classes: usize,
    pub image_size: usize,
    pub annotated: Vec<(Image, usize)>,
    pub unannotated: Vec<Image>,
    pub unannotated_labels: Vec<usize>,
    pub annotated_indices: Vec<usize>,
    pub unannotated_indices: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitMode {
    /// Per-class sampling of this many annotated examples.
    Shots(usize),
    /// Global sampling of `round(fraction · N)` annotated examples; classes may end up unbalanced.
    Fraction(f64),
}

/// Base glyph of class `class` on a `size × size` grid, values in `[0, 1]`.
pub fn base_glyph(class: usize, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(GLYPH_SEED ^ (class as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let s = size as f64;
    let mut img = vec![0.0f64; CHANNELS * size * size];
    for _ in 0..BLOBS_PER_GLYPH {
        let cx = rng.random_range(0.15..0.85) * (s - 1.0);
        let cy = rng.random_range(0.15..0.85) * (s - 1.0);
        let sigma = rng.random_range(0.08..0.18) * s;
        let color: [f64; 3] = [rng.random_range(0.1..1.0), rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)];
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let a = (-d2 / (2.0 * sigma * sigma)).exp();
                for (c, col) in color.iter().enumerate() {
                    img[c * size * size + y * size + x] += a * col;
                }
            }
        }
    }
    img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect()
}

fn apply_shift<R: Rng>(glyph: &[f32], size: usize, shift: &DomainShift, noise: Option<&Normal<f64>>, rng: &mut R) -> Image {
    let plane = size * size;
    let center = (size as f64 - 1.0) / 2.0;
    let (sin, cos) = shift.rotation_deg.to_radians().sin_cos();
    let sample = |c: usize, x: f64, y: f64| -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let px = |xi: f64, yi: f64| -> f64 {
            if xi < 0.0 || yi < 0.0 || xi > size as f64 - 1.0 || yi > size as f64 - 1.0 {
                0.0
            } else {
                glyph[c * plane + yi as usize * size + xi as usize] as f64
            }
        };
        let mut v = 0.0;
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                if wx * wy != 0.0 {
                    v += wx * wy * px(x0 + dx, y0 + dy);
                }
            }
        }
        v
    };
    let mut rotated = vec![0.0f64; CHANNELS * plane];
    for y in 0..size {
        for x in 0..size {
            // inverse rotation: where does output pixel (x, y) come from
            let (ox, oy) = (x as f64 - center, y as f64 - center);
            let sx = cos * ox + sin * oy + center;
            let sy = -sin * ox + cos * oy + center;
            for c in 0..CHANNELS {
                rotated[c * plane + y * size + x] = sample(c, sx, sy);
            }
        }
    }
    let mut out = vec![0.0f32; CHANNELS * plane];
    for p in 0..plane {
        let px = [rotated[p], rotated[plane + p], rotated[2 * plane + p]];
        for c in 0..CHANNELS {
            let mix = &shift.channel_mix[c];
            let mut v = mix[0] * px[0] + mix[1] * px[1] + mix[2] * px[2];
            if let Some(n) = noise {
                v += n.sample(rng);
            }
            out[c * plane + p] = v.clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// `K · n_per_class` images ordered class-major, deterministic in `seed`.
pub fn generate_domain(spec: &DomainSpec, num_classes: usize, seed: u64) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::Config(format!("K must be >= 2, got {num_classes}")));
    }
    spec.validate()?;
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((spec.domain_id as u64) << 32));
    let noise = (spec.shift.noise_std > 0.0).then(|| Normal::new(0.0, spec.shift.noise_std).expect("validated"));
    let mut images = Vec::with_capacity(num_classes * spec.n_per_class);
    let mut labels = Vec::with_capacity(num_classes * spec.n_per_class);
    for class in 0..num_classes {
        let glyph = base_glyph(class, size);
        for _ in 0..spec.n_per_class {
            images.push(apply_shift(&glyph, size, &spec.shift, noise.as_ref(), &mut rng));
            labels.push(class);
        }
    }
    Ok(Dataset { spec: spec.clone(), num_classes, seed, images, labels })
}

pub fn make_few_shot_split(dataset: &Dataset, mode: SplitMode, seed: u64) -> Result<DomainFewShotSplit> {
    let n = dataset.len();
    let k = dataset.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5b17 ^ ((dataset.spec.domain_id as u64) << 40));
    let mut chosen: Vec<usize> = match mode {
        SplitMode::Shots(shots) => {
            if shots == 0 {
                return Err(Error::Split("shots per class must be >= 1".into()));
            }
            let mut out = Vec::with_capacity(shots * k);
            for class in 0..k {
                let members: Vec<usize> = (0..n).filter(|&i| dataset.labels[i] == class).collect();
                if members.len() < shots {
                    return Err(Error::Split(format!(
                        "class {class} has {} examples, cannot draw {shots} shots",
                        members.len()
                    )));
                }
                out.extend(index::sample(&mut rng, members.len(), shots).into_iter().map(|j| members[j]));
            }
            out
        }
        SplitMode::Fraction(f) => {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Split(format!("annotated fraction must lie in (0, 1), got {f}")));
            }
            let count = ((f * n as f64).round() as usize).max(1);
            if count > n {
                return Err(Error::Split(format!("requested {count} annotated of {n}")));
            }
            index::sample(&mut rng, n, count).into_vec()
        }
    };
    chosen.sort_unstable();
    if chosen.len() >= n - chosen.len() {
        return Err(Error::Split(format!(
            "annotated pool ({}) must be smaller than unannotated pool ({})",
            chosen.len(),
            n - chosen.len()
        )));
    }
    let mut is_annotated = vec![false; n];
    for &i in &chosen {
        is_annotated[i] = true;
    }
    let rest: Vec<usize> = (0..n).filter(|&i| !is_annotated[i]).collect();
    Ok(DomainFewShotSplit {
        domain_id: dataset.spec.domain_id,
        num_classes: k,
        image_size: dataset.spec.image_size,
        annotated: chosen.iter().map(|&i| (dataset.images[i].clone(), dataset.labels[i])).collect(),
        unannotated: rest.iter().map(|&i| dataset.images[i].clone()).collect(),
        unannotated_labels: rest.iter().map(|&i| dataset.labels[i]).collect(),
        annotated_indices: chosen,
        unannotated_indices: rest,
    })
}

/// Indices into `split.annotated` / `split.unannotated` for one training step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceBatch {
    pub annotated: Vec<usize>,
    pub unannotated: Vec<usize>,
}

pub fn sample_batch<R: Rng + ?Sized>(split: &DomainFewShotSplit, n_a: usize, n_u: usize, rng: &mut R) -> Result<SourceBatch> {
    Ok(SourceBatch {
        annotated: sample_indices(split.annotated.len(), n_a, "annotated", rng)?,
        unannotated: sample_indices(split.unannotated.len(), n_u, "unannotated", rng)?,
    })
}

/// `count` distinct indices from `0..pool`, in random order.
pub fn sample_indices<R: Rng + ?Sized>(pool: usize, count: usize, what: &str, rng: &mut R) -> Result<Vec<usize>> {
    if count > pool {
        return Err(Error::Sampling(format!("{what} batch of {count} exceeds pool of {pool}")));
    }
    Ok(index::sample(rng, pool, count).into_vec())
}

// ---------------------------------------------------------------------------
// On-disk form: manifest.json + one little-endian f32 blob per partition,
// laid out (count, channels, height, width).

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionManifest {
    pub file: String,
    pub count: usize,
    pub labels: Vec<usize>,
    pub source_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub domain_id: u32,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub generation_seed: u64,
    pub split_seed: u64,
    pub spec: DomainSpec,
    pub split: Option<SplitMode>,
    pub annotated: PartitionManifest,
    pub unannotated: PartitionManifest,
}

/// Wraps a whole dataset as a split with every example on one side.
pub fn whole_dataset_split(dataset: &Dataset, annotated: bool) -> DomainFewShotSplit {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let (ann, un) = if annotated { (all, Vec::new()) } else { (Vec::new(), all) };
    DomainFewShotSplit {
        domain_id: dataset.spec.domain_id,
        num_classes: dataset.num_classes,
        image_size: dataset.spec.image_size,
        annotated: ann.iter().map(|&i| (dataset.images[i].clone(), dataset.labels[i])).collect(),
        unannotated: un.iter().map(|&i| dataset.images[i].clone()).collect(),
        unannotated_labels: un.iter().map(|&i| dataset.labels[i]).collect(),
        annotated_indices: ann,
        unannotated_indices: un,
    }
}

fn write_blob(path: &Path, images: &[&Image]) -> Result<()> {
    let mut bytes = Vec::with_capacity(images.iter().map(|i| i.len() * 4).sum());
    for img in images {
        for v in img.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

fn read_blob(path: &Path, count: usize, image_len: usize) -> Result<Vec<Image>> {
    let bytes = fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
    if bytes.len() != count * image_len * 4 {
        return Err(Error::deserialize(
            "count",
            format!("blob {} has {} bytes, expected {}", path.display(), bytes.len(), count * image_len * 4),
        ));
    }
    Ok(bytes
        .chunks_exact(image_len * 4)
        .map(|chunk| chunk.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
        .collect())
}

pub fn export_split(
    dir: &Path,
    split: &DomainFewShotSplit,
    spec: &DomainSpec,
    generation_seed: u64,
    split_seed: u64,
    mode: Option<SplitMode>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        domain_id: split.domain_id,
        num_classes: split.num_classes,
        channels: CHANNELS,
        height: split.image_size,
        width: split.image_size,
        generation_seed,
        split_seed,
        spec: spec.clone(),
        split: mode,
        annotated: PartitionManifest {
            file: "annotated.f32".into(),
            count: split.annotated.len(),
            labels: split.annotated.iter().map(|(_, l)| *l).collect(),
            source_indices: split.annotated_indices.clone(),
        },
        unannotated: PartitionManifest {
            file: "unannotated.f32".into(),
            count: split.unannotated.len(),
            labels: split.unannotated_labels.clone(),
            source_indices: split.unannotated_indices.clone(),
        },
    };
    let ann: Vec<&Image> = split.annotated.iter().map(|(i, _)| i).collect();
    let un: Vec<&Image> = split.unannotated.iter().collect();
    write_blob(&dir.join(&manifest.annotated.file), &ann)?;
    write_blob(&dir.join(&manifest.unannotated.file), &un)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn import_split(dir: &Path) -> Result<(DomainFewShotSplit, DatasetManifest)> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::from(e).in_file(&mpath))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::from(e).in_file(&mpath))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::deserialize("format_version", format!("unsupported version {}", manifest.format_version)));
    }
    if manifest.channels != CHANNELS || manifest.height != manifest.width {
        return Err(Error::deserialize("channels", "expected square tri-channel images"));
    }
    for part in [&manifest.annotated, &manifest.unannotated] {
        if part.labels.len() != part.count || part.source_indices.len() != part.count {
            return Err(Error::deserialize("labels", format!("{}: label count does not match count", part.file)));
        }
        if let Some(&bad) = part.labels.iter().find(|&&l| l >= manifest.num_classes) {
            return Err(Error::deserialize("labels", format!("label {bad} outside 0..{}", manifest.num_classes)));
        }
    }
    let image_len = CHANNELS * manifest.height * manifest.width;
    let ann = read_blob(&dir.join(&manifest.annotated.file), manifest.annotated.count, image_len)?;
    let un = read_blob(&dir.join(&manifest.unannotated.file), manifest.unannotated.count, image_len)?;
    let split = DomainFewShotSplit {
        domain_id: manifest.domain_id,
        num_classes: manifest.num_classes,
        image_size: manifest.height,
        annotated: ann.into_iter().zip(manifest.annotated.labels.iter().copied()).collect(),
        unannotated: un,
        unannotated_labels: manifest.unannotated.labels.clone(),
        annotated_indices: manifest.annotated.source_indices.clone(),
        unannotated_indices: manifest.unannotated.source_indices.clone(),
    };
    Ok((split, manifest))
}
