//! Low-resolution noise matrix → full-resolution multiplicative mask.
//!
//! The pipeline is upsample, then Gaussian blur, then an element-wise product
//! with every channel of the image. Upsampling and the normalised blur are
//! nonnegative averaging operators, so a raw matrix in `(0,1)` yields a full
//! mask in `[0,1]`, and the map is monotone in the raw values.
//!
//! The blur size parameter `S` is read as the Gaussian standard deviation,
//! not as a convolution stride: a strided blur would shrink the mask below
//! the image size it has to cover.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    /// Block replication, source index `floor(i·h/H)`.
    Nearest,
    /// Half-pixel centres (align-corners = false), edges clamped.
    Bilinear,
}

impl FromStr for UpsampleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(UpsampleMode::Nearest),
            "bilinear" => Ok(UpsampleMode::Bilinear),
            other => Err(Error::Config(format!("unknown upsample mode `{other}` (nearest|bilinear)"))),
        }
    }
}

impl fmt::Display for UpsampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpsampleMode::Nearest => "nearest",
            UpsampleMode::Bilinear => "bilinear",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskConfig {
    pub noise_h: usize,
    pub noise_w: usize,
    pub upsample: UpsampleMode,
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub blur_enabled: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            noise_h: 8,
            noise_w: 8,
            upsample: UpsampleMode::Nearest,
            blur_kernel: 13,
            blur_sigma: 6.0,
            blur_enabled: true,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self, image_h: usize, image_w: usize) -> Result<()> {
        if self.noise_h == 0 || self.noise_w == 0 {
            return Err(Error::Config("noise matrix extents must be positive".into()));
        }
        if self.noise_h > image_h || self.noise_w > image_w {
            return Err(Error::Config(format!(
                "noise matrix {}x{} larger than image {image_h}x{image_w}",
                self.noise_h, self.noise_w
            )));
        }
        if self.blur_enabled {
            if self.blur_kernel.is_multiple_of(2) {
                return Err(Error::Config(format!("blur kernel must be odd, got {}", self.blur_kernel)));
            }
            if self.blur_kernel > image_h.min(image_w) {
                return Err(Error::Config(format!(
                    "blur kernel {} exceeds image side {}",
                    self.blur_kernel,
                    image_h.min(image_w)
                )));
            }
            if !(self.blur_sigma > 0.0) {
                return Err(Error::Config(format!("blur sigma must be positive, got {}", self.blur_sigma)));
            }
        }
        Ok(())
    }
}

/// A sampled mask: the raw low-resolution draw, its element log-densities,
/// and the post-processed full-resolution mask.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMask {
    pub raw: Tensor,
    pub log_prob: Tensor,
    pub full: Tensor,
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        &[h, w] => Ok((h, w)),
        s => Err(Error::Shape(format!("{what} must be 2-D, got {s:?}"))),
    }
}

/// `(lo, hi, t)` source taps and weight for bilinear output index `i`.
fn bilinear_taps(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
    let lo = (pos.floor() as usize).min(src - 1);
    let hi = (lo + 1).min(src - 1);
    (lo, hi, pos - lo as f64)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    ((1.0 - t) * a + t * b).clamp(a.min(b), a.max(b))
}

pub fn upsample(matrix: &Tensor, target_h: usize, target_w: usize, mode: UpsampleMode) -> Result<Tensor> {
    let (h, w) = dims2(matrix, "upsample input")?;
    if target_h < h || target_w < w {
        return Err(Error::Contract(format!(
            "upsample cannot shrink {h}x{w} to {target_h}x{target_w}"
        )));
    }
    let src = matrix.data();
    let mut out = Vec::with_capacity(target_h * target_w);
    match mode {
        UpsampleMode::Nearest => {
            for i in 0..target_h {
                let si = i * h / target_h;
                for j in 0..target_w {
                    out.push(src[si * w + j * w / target_w]);
                }
            }
        }
        UpsampleMode::Bilinear => {
            let cols: Vec<_> = (0..target_w).map(|j| bilinear_taps(j, w, target_w)).collect();
            for i in 0..target_h {
                let (r0, r1, ty) = bilinear_taps(i, h, target_h);
                for &(c0, c1, tx) in &cols {
                    let top = lerp(src[r0 * w + c0], src[r0 * w + c1], tx);
                    let bottom = lerp(src[r1 * w + c0], src[r1 * w + c1], tx);
                    out.push(lerp(top, bottom, ty));
                }
            }
        }
    }
    Tensor::new(vec![target_h, target_w], out)
}

/// Normalised 1-D Gaussian taps of odd length `k`.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Result<Vec<f64>> {
    if k.is_multiple_of(2) {
        return Err(Error::Contract(format!("blur kernel must be odd, got {k}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Contract(format!("blur sigma must be positive, got {sigma}")));
    }
    let r = (k / 2) as f64;
    let raw: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Mirror index with the edge sample repeated (`cba|abcd|dcb`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Separable normalised Gaussian blur, stride 1, reflected borders.
pub fn gaussian_blur(matrix: &Tensor, kernel: usize, sigma: f64) -> Result<Tensor> {
    let (h, w) = dims2(matrix, "blur input")?;
    let taps = gaussian_kernel(kernel, sigma)?;
    let r = (kernel / 2) as isize;
    let src = matrix.data();
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = taps
                .iter()
                .enumerate()
                .map(|(k, &t)| t * src[i * w + reflect(j as isize + k as isize - r, w)])
                .sum();
        }
    }
    let (lo, hi) = (matrix.min(), matrix.max());
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let v: f64 = taps
                .iter()
                .enumerate()
                .map(|(k, &t)| t * tmp[reflect(i as isize + k as isize - r, h) * w + j])
                .sum();
            // weights sum to 1 only up to rounding
            out[i * w + j] = v.clamp(lo, hi);
        }
    }
    Tensor::new(vec![h, w], out)
}

/// `out[c,i,j] = image[c,i,j] · mask[i,j]`.
pub fn apply_mask(image: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (mh, mw) = dims2(mask, "mask")?;
    match image.shape() {
        &[_, h, w] if h == mh && w == mw => {}
        s => {
            return Err(Error::Shape(format!(
                "image {s:?} does not match mask {mh}x{mw}"
            )))
        }
    }
    let m = mask.data();
    let plane = mh * mw;
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * m[i % plane])
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}

/// Upsample the raw matrix to the image size, then blur if enabled.
pub fn make_full_mask(raw: &Tensor, image_h: usize, image_w: usize, cfg: &MaskConfig) -> Result<Tensor> {
    let up = upsample(raw, image_h, image_w, cfg.upsample)?;
    if cfg.blur_enabled {
        gaussian_blur(&up, cfg.blur_kernel, cfg.blur_sigma)
    } else {
        Ok(up)
    }
}

/// Fixed-distribution masks for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    /// `Normal(0.5, 0.25)` clipped to `[0,1]`.
    Gaussian,
    /// `U(0,1)`.
    Uniform,
    /// `U(0,1)` at full image resolution, applied without post-processing.
    Pure,
}

pub const GAUSSIAN_MASK_MEAN: f64 = 0.5;
pub const GAUSSIAN_MASK_STD: f64 = 0.25;

impl NoiseKind {
    /// Whether the mask goes through [`make_full_mask`].
    pub fn post_processed(self) -> bool {
        !matches!(self, NoiseKind::Pure)
    }
}

pub fn fixed_noise_mask(kind: NoiseKind, h: usize, w: usize, rng: &mut Rng) -> Tensor {
    let data = (0..h * w)
        .map(|_| match kind {
            NoiseKind::Uniform | NoiseKind::Pure => rng.uniform(),
            NoiseKind::Gaussian => (GAUSSIAN_MASK_MEAN + GAUSSIAN_MASK_STD * rng.normal()).clamp(0.0, 1.0),
        })
        .collect();
    Tensor::new(vec![h, w], data).expect("h*w elements")
}

/// Sum of absolute differences between horizontally and vertically adjacent entries.
pub fn total_variation(matrix: &Tensor) -> Result<f64> {
    let (h, w) = dims2(matrix, "total_variation input")?;
    let d = matrix.data();
    let mut tv = 0.0;
    for i in 0..h {
        for j in 0..w {
            if j + 1 < w {
                tv += (d[i * w + j + 1] - d[i * w + j]).abs();
            }
            if i + 1 < h {
                tv += (d[(i + 1) * w + j] - d[i * w + j]).abs();
            }
        }
    }
    Ok(tv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(h: usize, w: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![h, w], data.to_vec()).unwrap()
    }

    #[test]
    fn nearest_block_replication() {
        let up = upsample(&m(2, 2, &[1.0, 2.0, 3.0, 4.0]), 4, 4, UpsampleMode::Nearest).unwrap();
        assert_eq!(
            up.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn bilinear_half_pixel_convention() {
        let up = upsample(&m(2, 2, &[0.0, 1.0, 0.0, 1.0]), 4, 4, UpsampleMode::Bilinear).unwrap();
        for row in up.data().chunks(4) {
            assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn constant_is_preserved_by_both_modes() {
        let c = Tensor::full(&[3, 5], 0.37);
        for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
            let up = upsample(&c, 11, 17, mode).unwrap();
            assert!(up.data().iter().all(|&v| v == 0.37));
        }
    }

    #[test]
    fn downscaling_is_rejected() {
        assert!(matches!(
            upsample(&Tensor::zeros(&[4, 4]), 3, 4, UpsampleMode::Nearest),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn blur_preserves_constants_and_range() {
        let c = Tensor::full(&[20, 20], 0.7);
        let b = gaussian_blur(&c, 13, 6.0).unwrap();
        assert!(b.data().iter().all(|&v| v == 0.7));
        let mut rng = Rng::new(1);
        let x = fixed_noise_mask(NoiseKind::Uniform, 16, 16, &mut rng);
        let b = gaussian_blur(&x, 5, 1.5).unwrap();
        assert!(b.min() >= x.min() && b.max() <= x.max());
    }

    #[test]
    fn blur_impulse_reproduces_kernel() {
        let mut x = Tensor::zeros(&[13, 13]);
        x.data_mut()[6 * 13 + 6] = 1.0;
        let b = gaussian_blur(&x, 13, 6.0).unwrap();
        let k = gaussian_kernel(13, 6.0).unwrap();
        for i in 0..13 {
            for j in 0..13 {
                assert!((b.data()[i * 13 + j] - k[i] * k[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn even_kernel_is_rejected() {
        assert!(matches!(gaussian_blur(&Tensor::zeros(&[5, 5]), 4, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn reflect_repeats_edge() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn apply_mask_cases() {
        let img = Tensor::new(vec![2, 2, 2], vec![0.2, 0.4, 0.6, 0.8, 1.0, 0.0, 0.5, 0.3]).unwrap();
        assert_eq!(apply_mask(&img, &Tensor::ones(&[2, 2])).unwrap(), img);
        let half = apply_mask(&img, &Tensor::full(&[2, 2], 0.5)).unwrap();
        for (h, v) in half.data().iter().zip(img.data()) {
            assert_eq!(*h, v * 0.5);
        }
        assert!(matches!(apply_mask(&img, &Tensor::ones(&[3, 2])), Err(Error::Shape(_))));
    }

    #[test]
    fn full_mask_constant_and_no_blur() {
        let cfg = MaskConfig::default();
        let full = make_full_mask(&Tensor::full(&[8, 8], 0.7), 28, 28, &cfg).unwrap();
        assert!(full.data().iter().all(|&v| v == 0.7));
        let raw = m(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        let cfg = MaskConfig {
            blur_enabled: false,
            ..cfg
        };
        let full = make_full_mask(&raw, 4, 4, &cfg).unwrap();
        assert_eq!(full, upsample(&raw, 4, 4, UpsampleMode::Nearest).unwrap());
    }

    #[test]
    fn blur_reduces_total_variation() {
        let mut rng = Rng::new(4);
        let raw = fixed_noise_mask(NoiseKind::Uniform, 8, 8, &mut rng);
        let cfg = MaskConfig::default();
        let blurred = make_full_mask(&raw, 28, 28, &cfg).unwrap();
        let sharp = make_full_mask(
            &raw,
            28,
            28,
            &MaskConfig {
                blur_enabled: false,
                ..cfg
            },
        )
        .unwrap();
        assert!(total_variation(&blurred).unwrap() < total_variation(&sharp).unwrap());
    }

    #[test]
    fn fixed_masks_statistics() {
        let mut rng = Rng::new(2);
        let u = fixed_noise_mask(NoiseKind::Uniform, 1000, 1000, &mut rng);
        assert!((u.mean() - 0.5).abs() < 0.002);
        let g = fixed_noise_mask(NoiseKind::Gaussian, 1000, 1000, &mut rng);
        let inside = g.data().iter().filter(|&&v| v > 0.0 && v < 1.0).count() as f64 / 1e6;
        assert!(inside >= 0.95, "retained {inside}");
        assert!(g.min() >= 0.0 && g.max() <= 1.0);
    }

    #[test]
    fn config_validation() {
        let cfg = MaskConfig::default();
        assert!(cfg.validate(28, 28).is_ok());
        assert!(cfg.validate(12, 28).is_err());
        assert!(MaskConfig { blur_kernel: 12, ..cfg.clone() }.validate(28, 28).is_err());
        assert!(MaskConfig { noise_h: 29, ..cfg }.validate(28, 28).is_err());
    }
}
