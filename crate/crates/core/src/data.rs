//! Datasets: the `NMDS` raster bundle, preprocessing, stratified splits and
//! the synthetic multi-modality generator.
//!
//! Bundle layout (little-endian):
//!
//! ```text
//! magic "NMDS" | version u32 | num_samples u32 | channels u32 | height u32
//! | width u32 | num_classes u32 | norm_mean f64 × channels
//! | norm_std f64 × channels | pixels u8 × (num_samples·C·H·W)
//! | labels u16 × num_samples | modality u8 × num_samples
//! ```
//!
//! An optional sidecar `<bundle>.csv` with header `id,label,modality,concept`
//! carries human-readable concept names and is cross-checked on load.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BUNDLE_MAGIC: &[u8; 4] = b"NMDS";
pub const BUNDLE_VERSION: u32 = 1;
const HEADER_INTS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Images are stored as 8-bit intensities `k/255`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    pixels: Vec<u8>,
    labels: Vec<u16>,
    modalities: Vec<u8>,
    concepts: Vec<String>,
    splits: Vec<Split>,
    norm_mean: Vec<f64>,
    norm_std: Vec<f64>,
}

impl Dataset {
    /// All samples start in the train split with identity normalisation.
    pub fn new(
        (channels, height, width): (usize, usize, usize),
        num_classes: usize,
        pixels: Vec<u8>,
        labels: Vec<u16>,
        modalities: Vec<u8>,
        concepts: Vec<String>,
    ) -> Result<Self> {
        let n = labels.len();
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Config("image extents must be positive".into()));
        }
        if pixels.len() != n * channels * height * width || modalities.len() != n || concepts.len() != n {
            return Err(Error::Shape(format!(
                "parallel sequences disagree: {} labels, {} pixel bytes, {} modality tags, {} concepts",
                n,
                pixels.len(),
                modalities.len(),
                concepts.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Index(format!("label {l} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            channels,
            height,
            width,
            num_classes,
            pixels,
            labels,
            modalities,
            concepts,
            splits: vec![Split::Train; n],
            norm_mean: vec![0.0; channels],
            norm_std: vec![1.0; channels],
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn modality(&self, i: usize) -> u8 {
        self.modalities[i]
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.iter().map(|&m| m as usize + 1).max().unwrap_or(0)
    }

    pub fn concept(&self, i: usize) -> &str {
        &self.concepts[i]
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn set_splits(&mut self, splits: Vec<Split>) -> Result<()> {
        if splits.len() != self.len() {
            return Err(Error::Shape(format!("{} split tags for {} samples", splits.len(), self.len())));
        }
        self.splits = splits;
        Ok(())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn norm(&self) -> (&[f64], &[f64]) {
        (&self.norm_mean, &self.norm_std)
    }

    pub fn set_norm(&mut self, mean: Vec<f64>, std: Vec<f64>) -> Result<()> {
        if mean.len() != self.channels || std.len() != self.channels {
            return Err(Error::Shape("normalisation stats need one value per channel".into()));
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Domain("normalisation std must be positive".into()));
        }
        self.norm_mean = mean;
        self.norm_std = std;
        Ok(())
    }

    /// Per-channel mean and population std over `indices`. A zero std is reported as 1.
    pub fn channel_stats(&self, indices: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let plane = self.height * self.width;
        let mut mean = vec![0.0; self.channels];
        let mut std = vec![1.0; self.channels];
        if indices.is_empty() {
            return (mean, std);
        }
        for c in 0..self.channels {
            let (mut s, mut s2) = (0.0, 0.0);
            for &i in indices {
                let base = (i * self.channels + c) * plane;
                for &p in &self.pixels[base..base + plane] {
                    let v = p as f64 / 255.0;
                    s += v;
                    s2 += v * v;
                }
            }
            let n = (indices.len() * plane) as f64;
            mean[c] = s / n;
            let var = (s2 / n - mean[c] * mean[c]).max(0.0);
            if var > 0.0 {
                std[c] = var.sqrt();
            }
        }
        (mean, std)
    }

    /// Image `i` as `[C, H, W]` in `[0,1]`.
    pub fn image(&self, i: usize) -> Tensor {
        let size = self.channels * self.height * self.width;
        let data = self.pixels[i * size..(i + 1) * size]
            .iter()
            .map(|&p| p as f64 / 255.0)
            .collect();
        Tensor::new(vec![self.channels, self.height, self.width], data).expect("bundle extents")
    }

    /// Stack of raw images `[N, C, H, W]`.
    pub fn raw_batch(&self, indices: &[usize]) -> Tensor {
        let items: Vec<Tensor> = indices.iter().map(|&i| self.image(i)).collect();
        Tensor::stack(&items).expect("equal image shapes")
    }

    /// Stack of preprocessed images; `rng` is only drawn from when `aug` augments.
    pub fn batch(&self, indices: &[usize], aug: &Augment, rng: &mut Rng) -> Tensor {
        let items: Vec<Tensor> = indices.iter().map(|&i| preprocess(&self.image(i), aug, rng)).collect();
        Tensor::stack(&items).expect("equal image shapes")
    }

    pub fn eval_augment(&self) -> Augment {
        Augment::eval(self.norm_mean.clone(), self.norm_std.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.pixels.len() + 3 * self.len());
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        for v in [self.len(), self.channels, self.height, self.width, self.num_classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.norm_mean.iter().chain(&self.norm_std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out.extend_from_slice(&self.modalities);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::format(path, reason);
        let need = |end: usize, what: &str| {
            if end > bytes.len() {
                Err(fail(format!(
                    "truncated payload: {what} needs {end} bytes, file has {}",
                    bytes.len()
                )))
            } else {
                Ok(())
            }
        };
        need(4 + 4 * HEADER_INTS, "header")?;
        if &bytes[..4] != BUNDLE_MAGIC {
            return Err(fail("bad magic (expected NMDS)".into()));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as usize;
        let version = word(0) as u32;
        if version != BUNDLE_VERSION {
            return Err(fail(format!("unsupported bundle version {version}")));
        }
        let (n, c, h, w, k) = (word(1), word(2), word(3), word(4), word(5));
        if c == 0 || h == 0 || w == 0 {
            return Err(fail("image extents must be positive".into()));
        }
        let mut pos = 4 + 4 * HEADER_INTS;
        need(pos + 16 * c, "normalisation stats")?;
        let floats: Vec<f64> = bytes[pos..pos + 16 * c]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        pos += 16 * c;
        let npix = n * c * h * w;
        need(pos + npix, "pixel payload")?;
        let pixels = bytes[pos..pos + npix].to_vec();
        pos += npix;
        need(pos + 2 * n, "labels")?;
        let labels: Vec<u16> = bytes[pos..pos + 2 * n]
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        pos += 2 * n;
        need(pos + n, "modality tags")?;
        let modalities = bytes[pos..pos + n].to_vec();
        pos += n;
        if pos != bytes.len() {
            return Err(fail(format!(
                "count mismatch: header declares {n} samples but {} extra bytes follow",
                bytes.len() - pos
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= k) {
            return Err(fail(format!("label range: sample {i} has label {l} but num_classes is {k}")));
        }
        let concepts = labels.iter().map(|l| format!("class{l}")).collect();
        let mut ds = Dataset::new((c, h, w), k, pixels, labels, modalities, concepts).map_err(|e| fail(e.to_string()))?;
        ds.set_norm(floats[..c].to_vec(), floats[c..].to_vec())
            .map_err(|e| fail(e.to_string()))?;
        Ok(ds)
    }

    /// SHA-256 of the bundle encoding, as lowercase hex.
    pub fn content_hash(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }

    pub fn sidecar_path(bundle: &Path) -> PathBuf {
        bundle.with_extension("csv")
    }

    pub fn sidecar_csv(&self) -> String {
        let mut s = String::from("id,label,modality,concept\n");
        for i in 0..self.len() {
            s.push_str(&format!("{i},{},{},{}\n", self.labels[i], self.modalities[i], self.concepts[i]));
        }
        s
    }

    /// Write the bundle and its sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let side = Self::sidecar_path(path);
        fs::write(&side, self.sidecar_csv()).map_err(|e| Error::io(side, e))
    }

    /// Read a bundle; a sidecar, when present, must agree with it.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut ds = Self::from_bytes(&bytes, path)?;
        let side = Self::sidecar_path(path);
        if side.exists() {
            ds.concepts = read_sidecar(&side, &ds)?;
        }
        Ok(ds)
    }
}

fn read_sidecar(path: &Path, ds: &Dataset) -> Result<Vec<String>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut concepts = Vec::with_capacity(ds.len());
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        if row >= ds.len() {
            return Err(Error::format(path, format!("count mismatch: more than {} label rows", ds.len())));
        }
        let field = |k: usize| rec.get(k).unwrap_or("");
        let label: usize = field(1)
            .parse()
            .map_err(|_| Error::format(path, format!("row {row}: label `{}` is not an integer", field(1))))?;
        if label >= ds.num_classes() {
            return Err(Error::format(
                path,
                format!("label range: row {row} has label {label} but num_classes is {}", ds.num_classes()),
            ));
        }
        if label != ds.label(row) || field(2) != ds.modality(row).to_string() {
            return Err(Error::format(path, format!("row {row} disagrees with the bundle")));
        }
        concepts.push(field(3).to_string());
    }
    if concepts.len() != ds.len() {
        return Err(Error::format(
            path,
            format!("count mismatch: {} label rows for {} images", concepts.len(), ds.len()),
        ));
    }
    Ok(concepts)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Convert a flat `u8` image dump plus a label CSV into a dataset.
///
/// The CSV needs a `label` column; `modality` (default 0) and `concept`
/// (default `class<label>`) are optional.
pub fn import_raw(images: &Path, labels_csv: &Path, extents: (usize, usize, usize), num_classes: usize) -> Result<Dataset> {
    let pixels = fs::read(images).map_err(|e| Error::io(images, e))?;
    let mut reader = csv::Reader::from_path(labels_csv).map_err(|e| Error::format(labels_csv, e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::format(labels_csv, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let label_col = col("label").ok_or_else(|| Error::format(labels_csv, "missing `label` column"))?;
    let (mod_col, concept_col) = (col("modality"), col("concept"));
    let (mut labels, mut modalities, mut concepts) = (Vec::new(), Vec::new(), Vec::new());
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(labels_csv, e.to_string()))?;
        let label: u16 = rec
            .get(label_col)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::format(labels_csv, format!("row {row}: bad label")))?;
        if label as usize >= num_classes {
            return Err(Error::format(
                labels_csv,
                format!("label range: row {row} has label {label} but num_classes is {num_classes}"),
            ));
        }
        let modality: u8 = match mod_col.and_then(|c| rec.get(c)) {
            Some(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::format(labels_csv, format!("row {row}: bad modality")))?,
            None => 0,
        };
        labels.push(label);
        modalities.push(modality);
        concepts.push(match concept_col.and_then(|c| rec.get(c)) {
            Some(v) => v.trim().to_string(),
            None => format!("class{label}"),
        });
    }
    let (c, h, w) = extents;
    if pixels.len() != labels.len() * c * h * w {
        return Err(Error::format(
            images,
            format!(
                "count mismatch: {} pixel bytes for {} labels of {c}x{h}x{w}",
                pixels.len(),
                labels.len()
            ),
        ));
    }
    Dataset::new(extents, num_classes, pixels, labels, modalities, concepts)
}

/// Augmentation and normalisation for [`preprocess`].
#[derive(Clone, Debug, PartialEq)]
pub struct Augment {
    pub flip_prob: f64,
    pub crop_pad: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Augment {
    /// Normalisation only.
    pub fn eval(mean: Vec<f64>, std: Vec<f64>) -> Self {
        Augment {
            flip_prob: 0.0,
            crop_pad: 0,
            mean,
            std,
        }
    }
}

/// Random horizontal flip, zero-pad-and-random-crop, then per-channel normalisation.
pub fn preprocess(image: &Tensor, aug: &Augment, rng: &mut Rng) -> Tensor {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => panic!("preprocess expects [C,H,W], got {s:?}"),
    };
    assert_eq!(aug.mean.len(), c, "one normalisation mean per channel");
    let flip = aug.flip_prob > 0.0 && rng.uniform() < aug.flip_prob;
    let p = aug.crop_pad;
    let (dy, dx) = if p > 0 {
        (rng.below(2 * p + 1), rng.below(2 * p + 1))
    } else {
        (p, p)
    };
    let src = image.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                // Output (y, x) reads padded (y+dy, x+dx), i.e. source (y+dy−p, x+dx−p).
                let sy = (y + dy).checked_sub(p).filter(|&v| v < h);
                let sx = (x + dx).checked_sub(p).filter(|&v| v < w);
                let v = match (sy, sx) {
                    (Some(sy), Some(sx)) => {
                        let sx = if flip { w - 1 - sx } else { sx };
                        src[(ch * h + sy) * w + sx]
                    }
                    _ => 0.0,
                };
                out.push((v - aug.mean[ch]) / aug.std[ch]);
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("same extents")
}

/// Per-class shuffle, then `round(n·f)` samples to val and test (at least one
/// each) and the remainder to train. Classes with fewer than three samples go
/// entirely to train.
pub fn stratified_split(labels: &[u16], num_classes: usize, fractions: (f64, f64, f64), seed: u64) -> Result<Vec<Split>> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got ({ft}, {fv}, {fs})"
        )));
    }
    let mut splits = vec![Split::Train; labels.len()];
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] as usize == class).collect();
        let n = members.len();
        if n == 0 {
            continue;
        }
        if n < 3 {
            warn!("class {class} has {n} samples; all assigned to train");
            continue;
        }
        Rng::new(Rng::child_seed(seed, class as u64)).shuffle(&mut members);
        let n_val = ((n as f64 * fv).round() as usize).clamp(1, n - 2);
        let n_test = ((n as f64 * fs).round() as usize).max(1);
        let n_test = n_test.min(n - 1 - n_val);
        for &i in &members[..n_val] {
            splits[i] = Split::Val;
        }
        for &i in &members[n_val..n_val + n_test] {
            splits[i] = Split::Test;
        }
    }
    Ok(splits)
}

/// Stratified split, then normalisation statistics from the train part.
pub fn assign_splits(dataset: &mut Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<()> {
    let splits = stratified_split(dataset.labels(), dataset.num_classes(), fractions, seed)?;
    dataset.set_splits(splits)?;
    let (mean, std) = dataset.channel_stats(&dataset.indices(Split::Train));
    dataset.set_norm(mean, std)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Blob,
    Ring,
    HBar,
    VBar,
    Cross,
    Frame,
}

pub const SHAPES: [Shape; 6] = [Shape::Blob, Shape::Ring, Shape::HBar, Shape::VBar, Shape::Cross, Shape::Frame];

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Blob => "blob",
            Shape::Ring => "ring",
            Shape::HBar => "hbar",
            Shape::VBar => "vbar",
            Shape::Cross => "cross",
            Shape::Frame => "frame",
        }
    }

    /// Membership of offset `(dy, dx)` from the centre for size `r`.
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        let d = (dy * dy + dx * dx).sqrt();
        let half = r * 0.3;
        match self {
            Shape::Blob => d <= r * 0.8,
            Shape::Ring => d <= r && d >= r * 0.55,
            Shape::HBar => dx.abs() <= r && dy.abs() <= half,
            Shape::VBar => dy.abs() <= r && dx.abs() <= half,
            Shape::Cross => (dx.abs() <= r && dy.abs() <= half * 0.7) || (dy.abs() <= r && dx.abs() <= half * 0.7),
            Shape::Frame => {
                let m = dy.abs().max(dx.abs());
                m <= r * 0.85 && m >= r * 0.5
            }
        }
    }
}

/// Intensity law of one modality: `clamp(background + contrast·shape + noise)^gamma`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModalityLaw {
    pub background: f64,
    pub contrast: f64,
    pub gamma: f64,
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_modalities: usize,
    pub classes_per_modality: usize,
    pub samples_per_class: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub laws: Vec<ModalityLaw>,
    pub seed: u64,
}

pub const MIN_MODALITY_GAP: f64 = 0.15;

impl SynthSpec {
    pub fn new(num_modalities: usize, classes_per_modality: usize, samples_per_class: usize, seed: u64) -> Self {
        SynthSpec {
            num_modalities,
            classes_per_modality,
            samples_per_class,
            image_h: 28,
            image_w: 28,
            laws: default_laws(num_modalities),
            seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_modalities * self.classes_per_modality
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_modalities == 0 || self.classes_per_modality == 0 || self.samples_per_class == 0 {
            return Err(Error::Config("synthetic counts must be positive".into()));
        }
        if self.classes_per_modality > SHAPES.len() {
            return Err(Error::Config(format!(
                "at most {} classes per modality, got {}",
                SHAPES.len(),
                self.classes_per_modality
            )));
        }
        if self.num_classes() > u16::MAX as usize || self.num_modalities > u8::MAX as usize + 1 {
            return Err(Error::Config("too many classes or modalities for the bundle format".into()));
        }
        if self.image_h < 8 || self.image_w < 8 {
            return Err(Error::Config("synthetic images must be at least 8x8".into()));
        }
        if self.laws.len() != self.num_modalities {
            return Err(Error::Config(format!(
                "{} intensity laws for {} modalities",
                self.laws.len(),
                self.num_modalities
            )));
        }
        for (i, a) in self.laws.iter().enumerate() {
            for b in &self.laws[i + 1..] {
                if (law_mean(a) - law_mean(b)).abs() < MIN_MODALITY_GAP {
                    return Err(Error::Config(format!(
                        "modality mean intensities {:.3} and {:.3} are closer than {MIN_MODALITY_GAP}",
                        law_mean(a),
                        law_mean(b)
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Nominal mean intensity of a law (background level after the gamma curve).
pub fn law_mean(law: &ModalityLaw) -> f64 {
    law.background.clamp(0.0, 1.0).powf(law.gamma)
}

/// Backgrounds spread over `[0.12, 0.68]`, dimmer modalities with higher
/// contrast, darker gamma and less noise.
pub fn default_laws(n: usize) -> Vec<ModalityLaw> {
    (0..n)
        .map(|m| {
            let t = if n > 1 { m as f64 / (n - 1) as f64 } else { 0.5 };
            ModalityLaw {
                background: 0.12 + 0.56 * t,
                contrast: 0.30 - 0.08 * t,
                gamma: 1.2 - 0.4 * t,
                noise_std: 0.04 + 0.08 * t,
            }
        })
        .collect()
}

/// Render the dataset. Labels are `modality · classes_per_modality + class`.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let (h, w) = (spec.image_h, spec.image_w);
    let n = spec.num_classes() * spec.samples_per_class;
    let mut pixels = Vec::with_capacity(n * h * w);
    let (mut labels, mut modalities, mut concepts) = (Vec::new(), Vec::new(), Vec::new());
    let mut rng = Rng::new(spec.seed);
    let base_r = h.min(w) as f64 * 0.28;
    for (m, law) in spec.laws.iter().enumerate() {
        for (c, shape) in SHAPES.iter().take(spec.classes_per_modality).enumerate() {
            for _ in 0..spec.samples_per_class {
                let cy = (h as f64 - 1.0) / 2.0 + (rng.uniform() - 0.5) * 0.25 * h as f64;
                let cx = (w as f64 - 1.0) / 2.0 + (rng.uniform() - 0.5) * 0.25 * w as f64;
                let r = base_r * (0.8 + 0.4 * rng.uniform());
                let contrast = law.contrast * (0.7 + 0.6 * rng.uniform());
                let shift = (rng.uniform() - 0.5) * 0.1;
                for y in 0..h {
                    for x in 0..w {
                        let inside = shape.contains(y as f64 - cy, x as f64 - cx, r);
                        let noise = law.noise_std * rng.normal();
                        let v = law.background + shift + if inside { contrast } else { 0.0 } + noise;
                        let v = v.clamp(0.0, 1.0).powf(law.gamma);
                        pixels.push((v * 255.0).round() as u8);
                    }
                }
                labels.push((m * spec.classes_per_modality + c) as u16);
                modalities.push(m as u8);
                concepts.push(format!("m{m}-{}", shape.name()));
            }
        }
    }
    Dataset::new((1, h, w), spec.num_classes(), pixels, labels, modalities, concepts)
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (train|val|test)"))),
        }
    }
}
