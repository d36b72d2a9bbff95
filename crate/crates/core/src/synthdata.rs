//! Deterministic five-stage synthetic "fusion staging" dataset.
//!
//! Each sample is a grayscale full image containing one region of interest
//! (ROI) whose pattern encodes the stage, several stage-1 look-alike
//! distractors, a smooth background and Gaussian pixel noise. The ROI is a
//! bright block crossed by a dark horizontal gap band:
//!
//! | stage | gap band                                   |
//! |-------|--------------------------------------------|
//! | 1     | fully open                                 |
//! | 2     | first quarter of its columns filled        |
//! | 3     | first half of its columns filled           |
//! | 4     | fully filled, bright one-pixel scar line   |
//! | 5     | fully filled, no scar                      |
//!
//! The label depends on ROI pixels only; distractors are drawn without
//! looking at it.
//!
//! On disk a dataset is a directory with a line-oriented `manifest` (first
//! line a JSON header with the generating config, then one JSON object per
//! sample: `id`, `label`, `bbox`, `seed`, `fold`) and
//! `samples/<id>.{full,crop,mask}.dtk` tensor containers.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::gradcam::{interpolation_matrix, BBox, RoiMask};
use crate::seeds::{derive_seed, stream_rng};
use crate::tensor::Tensor;

pub const NUM_STAGES: usize = 5;

/// Class counts of the clinical corpus, stages 1 to 5.
pub const CLINICAL_STAGE_COUNTS: [usize; NUM_STAGES] = [159, 92, 92, 125, 255];

const BONE: f32 = 0.70;
const GAP: f32 = 0.50;
const SCAR: f32 = 0.95;
const TEXTURE: f32 = 0.03;
const BACKGROUND: f32 = 0.25;
const ROI_MARGIN: usize = 2;
const DISTRACTOR_SPACING: usize = 2;
const PLACEMENT_TRIES: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// `(H, W)` of full images and crops.
    pub image_size: (usize, usize),
    /// `(h, w)` of the ROI, with `w = 2h`.
    pub roi_size: (usize, usize),
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    pub distractor_count: usize,
    pub master_seed: u64,
    /// Use the clinical class imbalance instead of equal counts.
    #[serde(default)]
    pub clinical_proportions: bool,
    pub folds: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: (64, 64),
            roi_size: (12, 24),
            samples_per_class: 100,
            noise_sigma: 0.05,
            distractor_count: 3,
            master_seed: 0,
            clinical_proportions: false,
            folds: 5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let (rh, rw) = self.roi_size;
        if rh < 4 || rw != 2 * rh {
            return Err(Error::Config(format!(
                "ROI must be 2:1 (width = 2 x height) with height >= 4, got {rh}x{rw}"
            )));
        }
        if rh + 2 * ROI_MARGIN > h || rw + 2 * ROI_MARGIN > w {
            return Err(Error::Config(format!(
                "ROI {rh}x{rw} does not fit in a {h}x{w} image with a {ROI_MARGIN}-pixel margin"
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples per class must be positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        Ok(())
    }

    /// Samples per stage, in stage order.
    pub fn class_counts(&self) -> [usize; NUM_STAGES] {
        if !self.clinical_proportions {
            return [self.samples_per_class; NUM_STAGES];
        }
        // Largest-remainder rescaling to the same total budget.
        let budget = self.samples_per_class * NUM_STAGES;
        let total: usize = CLINICAL_STAGE_COUNTS.iter().sum();
        let mut counts = [0usize; NUM_STAGES];
        let mut remainders = Vec::with_capacity(NUM_STAGES);
        for (i, &c) in CLINICAL_STAGE_COUNTS.iter().enumerate() {
            counts[i] = c * budget / total;
            remainders.push(((c * budget) % total, i));
        }
        remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let short = budget - counts.iter().sum::<usize>();
        for &(_, i) in remainders.iter().take(short) {
            counts[i] += 1;
        }
        counts
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Stage, 1 to 5.
    pub label: u8,
    pub bbox: BBox,
    pub seed: u64,
    pub fold: Option<usize>,
}

impl ManifestEntry {
    /// Zero-based class index.
    pub fn class_index(&self) -> usize {
        self.label as usize - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    config: SynthConfig,
    num_samples: usize,
}

const DATASET_FORMAT: &str = "spatialkd-dataset/1";
pub const MANIFEST_NAME: &str = "manifest";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub entry: ManifestEntry,
    /// `(1, H, W)` in `[0, 1]`.
    pub full_image: Tensor<f32>,
    /// ROI of the full image resampled to `(1, H, W)`.
    pub cropped_image: Tensor<f32>,
    pub mask: RoiMask<f32>,
}

impl SynthSample {
    pub fn id(&self) -> &str {
        &self.entry.id
    }

    pub fn class_index(&self) -> usize {
        self.entry.class_index()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub samples: Vec<SynthSample>,
}

impl Dataset {
    pub fn entries(&self) -> Vec<ManifestEntry> {
        self.samples.iter().map(|s| s.entry.clone()).collect()
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.config.image_size
    }
}

/// Geometry of a rendered ROI patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchLayout {
    pub band_top: usize,
    pub band_height: usize,
    pub filled_columns: usize,
    pub scar_row: Option<usize>,
}

pub fn patch_layout(stage: u8, roi_size: (usize, usize)) -> Result<PatchLayout> {
    let (h, w) = roi_size;
    let band_height = (h / 4).max(2);
    let band_top = (h - band_height) / 2;
    let filled_columns = match stage {
        1 => 0,
        2 => w / 4,
        3 => w / 2,
        4 | 5 => w,
        _ => return Err(Error::Domain(format!("stage must be 1..=5, got {stage}"))),
    };
    let scar_row = (stage == 4).then_some(band_top + band_height / 2);
    Ok(PatchLayout {
        band_top,
        band_height,
        filled_columns,
        scar_row,
    })
}

/// `(h, w)` ROI patch for a stage. Texture is drawn before the stage pattern,
/// so equal RNG states give equal texture for every stage.
pub fn render_stage(stage: u8, roi_size: (usize, usize), rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let layout = patch_layout(stage, roi_size)?;
    let (h, w) = roi_size;
    let texture: Vec<f32> = (0..h * w).map(|_| rng.random_range(-TEXTURE..TEXTURE)).collect();
    let mut patch = vec![0f32; h * w];
    for r in 0..h {
        let in_band = r >= layout.band_top && r < layout.band_top + layout.band_height;
        for c in 0..w {
            let base = if Some(r) == layout.scar_row {
                SCAR
            } else if in_band && c >= layout.filled_columns {
                GAP
            } else {
                BONE
            };
            patch[r * w + c] = base + texture[r * w + c];
        }
    }
    Ok(Tensor::from_parts(vec![h, w], patch))
}

fn paste(image: &mut [f32], width: usize, patch: &Tensor<f32>, at: BBox) {
    let pw = patch.shape()[1];
    for r in 0..at.height {
        let dst = (at.row + r) * width + at.col;
        image[dst..dst + at.width].copy_from_slice(&patch.data()[r * pw..r * pw + at.width]);
    }
}

fn random_box(rng: &mut impl Rng, image: (usize, usize), size: (usize, usize), margin: usize) -> BBox {
    BBox {
        row: rng.random_range(margin..=image.0 - size.0 - margin),
        col: rng.random_range(margin..=image.1 - size.1 - margin),
        height: size.0,
        width: size.1,
    }
}

/// Bilinear (aligned-corner) resize of an `(h, w)` region of `image`.
pub fn resample_region(image: &[f32], width: usize, region: BBox, out: (usize, usize)) -> Tensor<f32> {
    let rows: Tensor<f64> = interpolation_matrix(out.0, region.height);
    let cols: Tensor<f64> = interpolation_matrix(out.1, region.width);
    let mut result = Vec::with_capacity(out.0 * out.1);
    for i in 0..out.0 {
        let wr = &rows.data()[i * region.height..(i + 1) * region.height];
        for j in 0..out.1 {
            let wc = &cols.data()[j * region.width..(j + 1) * region.width];
            let mut acc = 0.0f64;
            for (r, &a) in wr.iter().enumerate().filter(|(_, &a)| a != 0.0) {
                let src = &image[(region.row + r) * width + region.col..];
                for (c, &b) in wc.iter().enumerate().filter(|(_, &b)| b != 0.0) {
                    acc += a * b * src[c] as f64;
                }
            }
            result.push(acc as f32);
        }
    }
    Tensor::from_parts(vec![1, out.0, out.1], result)
}

/// Full image, crop and mask of one sample.
pub fn render_sample(config: &SynthConfig, entry_label: u8, seed: u64) -> Result<(Tensor<f32>, Tensor<f32>, BBox)> {
    let (h, w) = config.image_size;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);

    let mut image = vec![BACKGROUND; h * w];
    for _ in 0..3 {
        let amp: f32 = rng.random_range(-0.08..0.08);
        let sigma: f32 = rng.random_range(8.0..20.0);
        let (cy, cx): (f32, f32) = (rng.random_range(0.0..h as f32), rng.random_range(0.0..w as f32));
        for r in 0..h {
            for c in 0..w {
                let d2 = (r as f32 - cy).powi(2) + (c as f32 - cx).powi(2);
                image[r * w + c] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }

    let roi = random_box(&mut rng, (h, w), config.roi_size, ROI_MARGIN);
    let patch = render_stage(entry_label, config.roi_size, &mut rng)?;
    paste(&mut image, w, &patch, roi);

    let mut occupied = vec![roi];
    for _ in 0..config.distractor_count {
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let b = random_box(&mut rng, (h, w), config.roi_size, 0);
            if occupied.iter().all(|o| !o.overlaps(&b, DISTRACTOR_SPACING)) {
                placed = Some(b);
                break;
            }
        }
        let patch = render_stage(1, config.roi_size, &mut rng)?;
        if let Some(b) = placed {
            paste(&mut image, w, &patch, b);
            occupied.push(b);
        }
    }

    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
        for v in &mut image {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    for v in &mut image {
        *v = v.clamp(0.0, 1.0);
    }

    let crop = resample_region(&image, w, roi, (h, w));
    Ok((Tensor::from_parts(vec![1, h, w], image), crop, roi))
}

fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Stratified assignment of `k` folds: within each class the order is a seeded
/// shuffle dealt round-robin, starting where the previous class stopped.
pub fn assign_folds(entries: &mut [ManifestEntry], k: usize, seed: u64) -> Result<()> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        by_class.entry(e.label).or_default().push(i);
    }
    for (label, members) in &by_class {
        if members.len() < k {
            return Err(Error::Config(format!(
                "stage {label} has {} samples, fewer than {k} folds",
                members.len()
            )));
        }
    }
    let mut next = 0usize;
    for (label, mut members) in by_class {
        members.shuffle(&mut stream_rng(seed, "folds", label as u64));
        for idx in members {
            entries[idx].fold = Some(next % k);
            next += 1;
        }
    }
    Ok(())
}

fn sample_path(dir: &Path, id: &str, kind: &str) -> PathBuf {
    dir.join("samples").join(format!("{id}.{kind}.dtk"))
}

/// Builds every sample in memory.
pub fn build(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut entries = Vec::new();
    for (stage_idx, &count) in config.class_counts().iter().enumerate() {
        for _ in 0..count {
            let id = sample_id(entries.len());
            entries.push(ManifestEntry {
                seed: derive_seed(config.master_seed, "data", entries.len() as u64),
                id,
                label: stage_idx as u8 + 1,
                bbox: BBox {
                    row: 0,
                    col: 0,
                    height: 0,
                    width: 0,
                },
                fold: None,
            });
        }
    }
    assign_folds(&mut entries, config.folds, config.master_seed)?;
    let (h, w) = config.image_size;
    let samples = entries
        .into_par_iter()
        .map(|mut entry| {
            let (full, crop, roi) = render_sample(config, entry.label, entry.seed)?;
            entry.bbox = roi;
            Ok(SynthSample {
                mask: RoiMask::from_bbox(h, w, roi)?,
                entry,
                full_image: full,
                cropped_image: crop,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: config.clone(),
        samples,
    })
}

/// Generates the dataset and writes it under `dir`.
pub fn generate(config: &SynthConfig, dir: &Path) -> Result<Dataset> {
    let dataset = build(config)?;
    write_dataset(&dataset, dir)?;
    Ok(dataset)
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let samples_dir = dir.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    for s in &dataset.samples {
        container::write(&sample_path(dir, s.id(), "full"), &s.full_image)?;
        container::write(&sample_path(dir, s.id(), "crop"), &s.cropped_image)?;
        container::write(&sample_path(dir, s.id(), "mask"), s.mask.values())?;
    }
    write_manifest(dir, &dataset.config, &dataset.entries())
}

pub fn write_manifest(dir: &Path, config: &SynthConfig, entries: &[ManifestEntry]) -> Result<()> {
    let path = dir.join(MANIFEST_NAME);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    let header = ManifestHeader {
        format: DATASET_FORMAT.into(),
        config: config.clone(),
        num_samples: entries.len(),
    };
    let mut emit = |line: String| writeln!(out, "{line}").map_err(|e| Error::io(&path, e));
    emit(serde_json::to_string(&header)?)?;
    for e in entries {
        emit(serde_json::to_string(e)?)?;
    }
    out.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<(SynthConfig, Vec<ManifestEntry>)> {
    let path = dir.join(MANIFEST_NAME);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |what: String| Error::Corrupt(format!("{}: {what}", path.display()));
    let header_line = lines
        .next()
        .ok_or_else(|| bad("empty manifest".into()))?
        .map_err(|e| Error::io(&path, e))?;
    let header: ManifestHeader = serde_json::from_str(&header_line).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(bad(format!("unknown format {:?}", header.format)));
    }
    let mut entries = Vec::with_capacity(header.num_samples);
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", n + 2)))?;
        entries.push(e);
    }
    if entries.len() != header.num_samples {
        return Err(bad(format!(
            "header announces {} samples, found {}",
            header.num_samples,
            entries.len()
        )));
    }
    Ok((header.config, entries))
}

fn read_sample_tensor(dir: &Path, id: &str, kind: &str) -> Result<Tensor<f32>> {
    let path = sample_path(dir, id, kind);
    if !path.exists() {
        return Err(Error::MissingFile { id: id.into(), path });
    }
    container::read(&path)
}

/// Reads a dataset written by [`generate`], validating every sample.
pub fn load(dir: &Path) -> Result<Dataset> {
    let (config, entries) = read_manifest(dir)?;
    config.validate()?;
    let (h, w) = config.image_size;
    let samples = entries
        .into_par_iter()
        .map(|entry| {
            let invalid = |what: &str| Error::Corrupt(format!("sample {}: {what}", entry.id));
            if !(1..=NUM_STAGES as u8).contains(&entry.label) {
                return Err(invalid("label out of range"));
            }
            let full = read_sample_tensor(dir, &entry.id, "full")?;
            let crop = read_sample_tensor(dir, &entry.id, "crop")?;
            let mask_values = read_sample_tensor(dir, &entry.id, "mask")?;
            if full.shape() != [1, h, w] || crop.shape() != [1, h, w] {
                return Err(invalid("image shape does not match the manifest config"));
            }
            if full.data().iter().chain(crop.data()).any(|v| !(0.0..=1.0).contains(v)) {
                return Err(invalid("pixel values outside [0, 1]"));
            }
            let mask = RoiMask::from_tensor(&mask_values).map_err(|e| invalid(&e.to_string()))?;
            if mask.bbox() != entry.bbox || mask.grid() != (h, w) {
                return Err(invalid("mask does not match the manifest bbox"));
            }
            Ok(SynthSample {
                entry,
                full_image: full,
                cropped_image: crop,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { config, samples })
}
