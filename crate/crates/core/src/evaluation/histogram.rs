use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mask::apply_mask;
use crate::tensor::Tensor;

pub const HIST_BINS: usize = 64;
pub const HISTOGRAM_CSV_HEADER: &str = "image_id,bin_lo,bin_hi,count_original,count_masked,count_mask";

/// 64-bin counts on `[0,1]` for one image, its masked version and its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageHistogram {
    pub original: Vec<u64>,
    pub masked: Vec<u64>,
    pub mask: Vec<u64>,
    pub original_mean: f64,
    pub masked_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramReport {
    pub images: Vec<ImageHistogram>,
    /// Per modality: (mean original intensity, mean masked intensity).
    pub modality_means: BTreeMap<u8, (f64, f64)>,
    /// Population std across modalities of the per-modality means.
    pub dispersion_original: f64,
    pub dispersion_masked: f64,
}

fn bin(v: f64) -> usize {
    ((v * HIST_BINS as f64).floor().max(0.0) as usize).min(HIST_BINS - 1)
}

fn histogram(values: &[f64]) -> Vec<u64> {
    let mut h = vec![0; HIST_BINS];
    for &v in values {
        h[bin(v)] += 1;
    }
    h
}

fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Histograms of images `[C,H,W]`, masks `[H,W]` and their products, with the
/// across-modality dispersion of mean intensity before and after masking.
pub fn histogram_report(images: &[Tensor], masks: &[Tensor], modalities: &[u8]) -> Result<HistogramReport> {
    if images.len() != masks.len() || images.len() != modalities.len() {
        return Err(Error::Shape(format!(
            "{} images, {} masks, {} modality tags",
            images.len(),
            masks.len(),
            modalities.len()
        )));
    }
    let mut per_image = Vec::with_capacity(images.len());
    let mut sums: BTreeMap<u8, (f64, f64, usize)> = BTreeMap::new();
    for ((img, mask), &m) in images.iter().zip(masks).zip(modalities) {
        if mask.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("mask values must lie in [0,1]".into()));
        }
        let masked = apply_mask(img, mask)?;
        let h = ImageHistogram {
            original: histogram(img.data()),
            masked: histogram(masked.data()),
            mask: histogram(mask.data()),
            original_mean: img.mean(),
            masked_mean: masked.mean(),
        };
        let e = sums.entry(m).or_insert((0.0, 0.0, 0));
        e.0 += h.original_mean;
        e.1 += h.masked_mean;
        e.2 += 1;
        per_image.push(h);
    }
    let modality_means: BTreeMap<u8, (f64, f64)> = sums
        .into_iter()
        .map(|(m, (o, k, n))| (m, (o / n as f64, k / n as f64)))
        .collect();
    let orig: Vec<f64> = modality_means.values().map(|v| v.0).collect();
    let mskd: Vec<f64> = modality_means.values().map(|v| v.1).collect();
    Ok(HistogramReport {
        images: per_image,
        dispersion_original: population_std(&orig),
        dispersion_masked: population_std(&mskd),
        modality_means,
    })
}

impl HistogramReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{HISTOGRAM_CSV_HEADER}\n");
        for (id, h) in self.images.iter().enumerate() {
            for b in 0..HIST_BINS {
                s.push_str(&format!(
                    "{id},{},{},{},{},{}\n",
                    b as f64 / HIST_BINS as f64,
                    (b + 1) as f64 / HIST_BINS as f64,
                    h.original[b],
                    h.masked[b],
                    h.mask[b]
                ));
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::from("modality,mean_original,mean_masked\n");
        for (m, (o, k)) in &self.modality_means {
            s.push_str(&format!("{m},{o},{k}\n"));
        }
        s.push_str(&format!(
            "dispersion_original={}\ndispersion_masked={}\nhomogenised={}\n",
            self.dispersion_original,
            self.dispersion_masked,
            self.dispersion_masked <= self.dispersion_original
        ));
        s
    }
}

/// Mean implied by bin centres and counts.
pub fn histogram_mean(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let w = 1.0 / counts.len() as f64;
    counts
        .iter()
        .enumerate()
        .map(|(b, &c)| (b as f64 + 0.5) * w * c as f64)
        .sum::<f64>()
        / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> Tensor {
        Tensor::new(vec![1, 2, 3], vec![0.0, 0.1, 0.3, 0.5, 0.9, 1.0]).unwrap()
    }

    #[test]
    fn ones_mask_keeps_histogram() {
        let r = histogram_report(&[image()], &[Tensor::ones(&[2, 3])], &[0]).unwrap();
        assert_eq!(r.images[0].original, r.images[0].masked);
        assert_eq!(r.images[0].mask[HIST_BINS - 1], 6);
    }

    #[test]
    fn half_mask_halves_every_pixel() {
        let r = histogram_report(&[image()], &[Tensor::full(&[2, 3], 0.5)], &[0]).unwrap();
        let expected = histogram(&image().data().iter().map(|v| v * 0.5).collect::<Vec<_>>());
        assert_eq!(r.images[0].masked, expected);
        assert!((r.images[0].masked_mean - 0.5 * r.images[0].original_mean).abs() < 1e-15);
    }

    #[test]
    fn histogram_mean_within_bin_resolution() {
        let r = histogram_report(&[image()], &[Tensor::full(&[2, 3], 0.7)], &[0]).unwrap();
        let h = &r.images[0];
        assert!((histogram_mean(&h.masked) - h.masked_mean).abs() <= 1.0 / HIST_BINS as f64);
    }

    #[test]
    fn csv_has_one_row_per_bin() {
        let r = histogram_report(&[image(), image()], &[Tensor::ones(&[2, 3]), Tensor::ones(&[2, 3])], &[0, 1]).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 2 * HIST_BINS);
        assert!(csv.starts_with(HISTOGRAM_CSV_HEADER));
        assert_eq!(r.dispersion_original, 0.0);
    }
}
