//! Frequency-view preprocessing for the dual-stream attribute classifier:
//! grayscale conversion, single-level 2-D db4 wavelet decomposition,
//! per-channel min-max normalization, and the sigmoid-gated fusion of the
//! spatial and frequency embeddings.

use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Daubechies-4 (8-tap) analysis lowpass filter.
pub const DB4_DEC_LO: [f64; 8] = [
    -0.010597401785069032,
    0.0328830116668852,
    0.030841381835560764,
    -0.18703481171909309,
    -0.027983769416859854,
    0.6308807679298589,
    0.7148465705529157,
    0.2303778133088965,
];
pub const FILTER_LEN: usize = DB4_DEC_LO.len();
pub const MIN_SIDE: usize = FILTER_LEN;
/// Phase of the periodized filter bank.
const PERIODIC_SHIFT: usize = FILTER_LEN / 2;

/// BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Error)]
pub enum FreqError {
    #[error("expected {expected} channels, got {got}")]
    Format { expected: usize, got: usize },
    #[error("plane is {width}x{height}; both sides must be at least {MIN_SIDE}")]
    TooSmall { width: usize, height: usize },
    #[error("pixel buffer has {got} values, expected {expected}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite pixel at index {0}")]
    NonFinite(usize),
    #[error("channel sizes differ")]
    Mismatch,
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("batch of {0} cannot be split into two halves")]
    OddBatch(usize),
    #[error("filter self-check failed: {0}")]
    Filter(String),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// Row-major intensity grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ImagePlane {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self, FreqError> {
        if pixels.len() != width * height {
            return Err(FreqError::Shape {
                expected: width * height,
                got: pixels.len(),
            });
        }
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(FreqError::NonFinite(i));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self { width, height, pixels }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn energy(&self) -> f64 {
        self.pixels.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &ImagePlane) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.pixels.chunks(self.width)
    }

    fn transpose(&self) -> ImagePlane {
        ImagePlane::from_fn(self.height, self.width, |x, y| self.get(y, x))
    }
}

/// Channel stack (RGB input or a frequency view).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ImageStack {
    pub channels: Vec<ImagePlane>,
}

impl ImageStack {
    pub fn new(channels: Vec<ImagePlane>) -> Result<Self, FreqError> {
        if let Some(first) = channels.first() {
            if channels.iter().any(|c| c.width != first.width || c.height != first.height) {
                return Err(FreqError::Mismatch);
            }
        }
        Ok(Self { channels })
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        let first = self.channels.first();
        (
            self.channels.len(),
            first.map_or(0, |c| c.height),
            first.map_or(0, |c| c.width),
        )
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self, FreqError> {
        let img = image::open(path)?.to_rgb32f();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let channels = (0..3)
            .map(|c| ImagePlane {
                width: w,
                height: h,
                pixels: img.pixels().map(|p| p.0[c] as f64).collect(),
            })
            .collect();
        Ok(Self { channels })
    }

    /// Writes 1 channel as grayscale or 3 as RGB, clamping to [0, 1].
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<(), FreqError> {
        let (c, h, w) = self.shape();
        let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match c {
            1 => {
                let buf = self.channels[0].pixels.iter().map(|&v| to_u8(v)).collect();
                image::GrayImage::from_raw(w as u32, h as u32, buf)
                    .expect("buffer sized from shape")
                    .save(path)?;
            }
            3 => {
                let buf = (0..w * h)
                    .flat_map(|i| self.channels.iter().map(move |ch| to_u8(ch.pixels[i])))
                    .collect();
                image::RgbImage::from_raw(w as u32, h as u32, buf)
                    .expect("buffer sized from shape")
                    .save(path)?;
            }
            got => return Err(FreqError::Format { expected: 3, got }),
        }
        Ok(())
    }
}

/// BT.601 luma of a 3-channel image.
pub fn grayscale(rgb: &ImageStack) -> Result<ImagePlane, FreqError> {
    if rgb.channels.len() != 3 {
        return Err(FreqError::Format {
            expected: 3,
            got: rgb.channels.len(),
        });
    }
    let [r, g, b] = [&rgb.channels[0], &rgb.channels[1], &rgb.channels[2]];
    let pixels = (0..r.pixels.len())
        .map(|i| LUMA[0] * r.pixels[i] + LUMA[1] * g.pixels[i] + LUMA[2] * b.pixels[i])
        .collect();
    Ok(ImagePlane {
        width: r.width,
        height: r.height,
        pixels,
    })
}

/// Analysis highpass: `g[j] = (-1)^(j+1) h[L-1-j]`.
pub fn db4_dec_hi() -> [f64; FILTER_LEN] {
    std::array::from_fn(|j| {
        let sign = if j % 2 == 0 { -1.0 } else { 1.0 };
        sign * DB4_DEC_LO[FILTER_LEN - 1 - j]
    })
}

/// Checks unit energy, DC gain √2 and even-shift orthogonality of the
/// filter table.
pub fn db4_self_check() -> Result<(), FreqError> {
    let h = DB4_DEC_LO;
    let energy: f64 = h.iter().map(|v| v * v).sum();
    let gain: f64 = h.iter().sum();
    if (energy - 1.0).abs() > 1e-12 {
        return Err(FreqError::Filter(format!("sum of squares {energy}")));
    }
    if (gain - std::f64::consts::SQRT_2).abs() > 1e-12 {
        return Err(FreqError::Filter(format!("sum {gain}")));
    }
    for k in 1..FILTER_LEN / 2 {
        let dot: f64 = (0..FILTER_LEN - 2 * k).map(|n| h[n] * h[n + 2 * k]).sum();
        if dot.abs() > 1e-12 {
            return Err(FreqError::Filter(format!("shift {k} inner product {dot}")));
        }
    }
    Ok(())
}

/// Signal extension at the borders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Half-sample symmetric extension; `floor((n + 7) / 2)` coefficients.
    #[default]
    Symmetric,
    /// Periodic extension with `ceil(n / 2)` coefficients (odd lengths are
    /// padded by repeating the last sample).
    Periodization,
}

impl Boundary {
    pub fn output_len(self, n: usize) -> usize {
        match self {
            Boundary::Symmetric => (n + FILTER_LEN - 1) / 2,
            Boundary::Periodization => n.div_ceil(2),
        }
    }
}

fn symmetric_index(k: isize, n: isize) -> usize {
    let period = 2 * n;
    let mut k = k.rem_euclid(period);
    if k >= n {
        k = period - 1 - k;
    }
    k as usize
}

fn analyze_1d(x: &[f64], boundary: Boundary, lo: &mut Vec<f64>, hi: &mut Vec<f64>) {
    let h = DB4_DEC_LO;
    let g = db4_dec_hi();
    lo.clear();
    hi.clear();
    match boundary {
        Boundary::Symmetric => {
            let n = x.len() as isize;
            for o in 0..boundary.output_len(x.len()) {
                let (mut a, mut d) = (0.0, 0.0);
                for j in 0..FILTER_LEN {
                    let v = x[symmetric_index(2 * o as isize + 1 - j as isize, n)];
                    a += h[j] * v;
                    d += g[j] * v;
                }
                lo.push(a);
                hi.push(d);
            }
        }
        Boundary::Periodization => {
            let n = x.len() + x.len() % 2;
            let at = |k: isize| x[(k.rem_euclid(n as isize) as usize).min(x.len() - 1)];
            for o in 0..n / 2 {
                let (mut a, mut d) = (0.0, 0.0);
                for j in 0..FILTER_LEN {
                    let v = at((2 * o + PERIODIC_SHIFT) as isize - j as isize);
                    a += h[j] * v;
                    d += g[j] * v;
                }
                lo.push(a);
                hi.push(d);
            }
        }
    }
}

fn synthesize_1d(lo: &[f64], hi: &[f64], n: usize, boundary: Boundary) -> Vec<f64> {
    let h = DB4_DEC_LO;
    let g = db4_dec_hi();
    let mut x = vec![0.0; n];
    match boundary {
        Boundary::Symmetric => {
            // x[m] = Σ_o a[o] h[2o+1-m] + d[o] g[2o+1-m]
            for (m, xm) in x.iter_mut().enumerate() {
                let first = m.saturating_sub(1).div_ceil(2);
                for o in first..lo.len() {
                    let j = 2 * o + 1;
                    if j < m {
                        continue;
                    }
                    let j = j - m;
                    if j >= FILTER_LEN {
                        break;
                    }
                    *xm += lo[o] * h[j] + hi[o] * g[j];
                }
            }
        }
        Boundary::Periodization => {
            let padded = n + n % 2;
            let mut full = vec![0.0; padded];
            for o in 0..lo.len() {
                for j in 0..FILTER_LEN {
                    let m = ((2 * o + PERIODIC_SHIFT) as isize - j as isize).rem_euclid(padded as isize) as usize;
                    full[m] += lo[o] * h[j] + hi[o] * g[j];
                }
            }
            full.truncate(n);
            x = full;
        }
    }
    x
}

/// Single-level sub-bands. `ch` holds details along the vertical axis,
/// `cv` along the horizontal axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct WaveletBands {
    pub ca: ImagePlane,
    pub ch: ImagePlane,
    pub cv: ImagePlane,
    pub cd: ImagePlane,
    pub boundary: Boundary,
    /// Size of the transformed plane.
    pub source_width: usize,
    pub source_height: usize,
}

/// Filters every row, returning the (lowpass, highpass) halves.
fn rows_pass(plane: &ImagePlane, boundary: Boundary) -> (ImagePlane, ImagePlane) {
    let out_w = boundary.output_len(plane.width);
    let mut lo_all = Vec::with_capacity(out_w * plane.height);
    let mut hi_all = Vec::with_capacity(out_w * plane.height);
    let (mut lo, mut hi) = (Vec::new(), Vec::new());
    for row in plane.rows() {
        analyze_1d(row, boundary, &mut lo, &mut hi);
        lo_all.extend_from_slice(&lo);
        hi_all.extend_from_slice(&hi);
    }
    (
        ImagePlane { width: out_w, height: plane.height, pixels: lo_all },
        ImagePlane { width: out_w, height: plane.height, pixels: hi_all },
    )
}

fn rows_inverse(lo: &ImagePlane, hi: &ImagePlane, width: usize, boundary: Boundary) -> ImagePlane {
    let mut pixels = Vec::with_capacity(width * lo.height);
    for (l, h) in lo.rows().zip(hi.rows()) {
        pixels.extend(synthesize_1d(l, h, width, boundary));
    }
    ImagePlane { width, height: lo.height, pixels }
}

/// Separable single-level 2-D db4 decomposition.
pub fn dwt2_db4(plane: &ImagePlane, boundary: Boundary) -> Result<WaveletBands, FreqError> {
    if plane.width < MIN_SIDE || plane.height < MIN_SIDE {
        return Err(FreqError::TooSmall {
            width: plane.width,
            height: plane.height,
        });
    }
    // along x, then along y via transposition
    let (lx, hx) = rows_pass(plane, boundary);
    let (ll, lh) = rows_pass(&lx.transpose(), boundary);
    let (hl, hh) = rows_pass(&hx.transpose(), boundary);
    Ok(WaveletBands {
        ca: ll.transpose(),
        ch: lh.transpose(),
        cv: hl.transpose(),
        cd: hh.transpose(),
        boundary,
        source_width: plane.width,
        source_height: plane.height,
    })
}

/// Inverse of [`dwt2_db4`].
pub fn idwt2_db4(bands: &WaveletBands) -> ImagePlane {
    let (w, h, b) = (bands.source_width, bands.source_height, bands.boundary);
    let lx = rows_inverse(&bands.ca.transpose(), &bands.ch.transpose(), h, b).transpose();
    let hx = rows_inverse(&bands.cv.transpose(), &bands.cd.transpose(), h, b).transpose();
    rows_inverse(&lx, &hx, w, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    PerImage,
    PerBatch,
}

/// Min-max scaling to [0, 1]; a constant plane maps to zeros.
pub fn min_max_normalize(plane: &ImagePlane, range: (f64, f64)) -> ImagePlane {
    let (lo, hi) = range;
    let span = hi - lo;
    let pixels = if span > 0.0 {
        plane.pixels.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; plane.pixels.len()]
    };
    ImagePlane {
        width: plane.width,
        height: plane.height,
        pixels,
    }
}

fn band_triplet(bands: &WaveletBands) -> [&ImagePlane; 3] {
    [&bands.ca, &bands.ch, &bands.cv]
}

/// Normalized `[cA, cH, cV]` stack of a grayscale plane; `cD` is dropped.
pub fn frequency_view(plane: &ImagePlane, boundary: Boundary) -> Result<ImageStack, FreqError> {
    let bands = dwt2_db4(plane, boundary)?;
    Ok(ImageStack {
        channels: band_triplet(&bands)
            .iter()
            .map(|b| min_max_normalize(b, b.min_max()))
            .collect(),
    })
}

/// Frequency views of a batch of RGB images with per-image or per-batch
/// channel ranges.
pub fn frequency_view_batch(
    images: &[ImageStack],
    boundary: Boundary,
    normalization: Normalization,
) -> Result<Vec<ImageStack>, FreqError> {
    let bands = images
        .iter()
        .map(|img| dwt2_db4(&grayscale(img)?, boundary))
        .collect::<Result<Vec<_>, _>>()?;
    let ranges: Option<[(f64, f64); 3]> = (normalization == Normalization::PerBatch).then(|| {
        std::array::from_fn(|c| {
            bands.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), b| {
                let (l, h) = band_triplet(b)[c].min_max();
                (lo.min(l), hi.max(h))
            })
        })
    });
    Ok(bands
        .iter()
        .map(|b| ImageStack {
            channels: band_triplet(b)
                .iter()
                .enumerate()
                .map(|(c, band)| min_max_normalize(band, ranges.map_or_else(|| band.min_max(), |r| r[c])))
                .collect(),
        })
        .collect())
}

/// Learnable scalar gate; `alpha = sigmoid(w_fusion)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
pub struct FusionGate {
    pub w_fusion: f64,
}

impl FusionGate {
    pub fn alpha(&self) -> f64 {
        fusion_alpha(self.w_fusion)
    }
}

pub fn fusion_alpha(w: f64) -> f64 {
    1.0 / (1.0 + (-w).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EmbeddingPair {
    pub f_s: Vec<f64>,
    pub f_w: Vec<f64>,
    pub z: Vec<f64>,
}

/// `concat(alpha * f_s, (1 - alpha) * f_w)`.
pub fn fuse(f_s: &[f64], f_w: &[f64], gate: FusionGate) -> Result<Vec<f64>, FreqError> {
    if f_s.len() != f_w.len() {
        return Err(FreqError::Dimension(f_s.len(), f_w.len()));
    }
    let alpha = gate.alpha();
    let beta = 1.0 - alpha;
    Ok(f_s
        .iter()
        .map(|v| alpha * v)
        .chain(f_w.iter().map(|v| beta * v))
        .collect())
}

/// Stacks the spatial batch in front of the frequency batch.
pub fn concat_batch<T: Clone>(spatial: &[T], frequency: &[T]) -> Result<Vec<T>, FreqError> {
    if spatial.len() != frequency.len() {
        return Err(FreqError::Dimension(spatial.len(), frequency.len()));
    }
    Ok(spatial.iter().chain(frequency).cloned().collect())
}

/// Inverse of [`concat_batch`].
pub fn split_batch<T: Clone>(batch: &[T]) -> Result<(Vec<T>, Vec<T>), FreqError> {
    if batch.len() % 2 != 0 {
        return Err(FreqError::OddBatch(batch.len()));
    }
    let (s, f) = batch.split_at(batch.len() / 2);
    Ok((s.to_vec(), f.to_vec()))
}

/// Opaque image-stack encoder (a frozen backbone in practice).
pub trait EmbeddingProvider {
    fn embed(&self, stack: &ImageStack) -> Vec<f64>;
}

impl<F: Fn(&ImageStack) -> Vec<f64>> EmbeddingProvider for F {
    fn embed(&self, stack: &ImageStack) -> Vec<f64> {
        self(stack)
    }
}

/// Builds the doubled batch, embeds it with one provider and fuses each
/// image's spatial and frequency features.
pub struct FusedPipeline<P> {
    pub provider: P,
    pub gate: FusionGate,
    pub boundary: Boundary,
    pub normalization: Normalization,
}

impl<P: EmbeddingProvider> FusedPipeline<P> {
    pub fn new(provider: P) -> Self {
        Self {
            provider,
            gate: FusionGate::default(),
            boundary: Boundary::default(),
            normalization: Normalization::default(),
        }
    }

    pub fn run(&self, images: &[ImageStack]) -> Result<Vec<EmbeddingPair>, FreqError> {
        let views = frequency_view_batch(images, self.boundary, self.normalization)?;
        let batch = concat_batch(images, &views)?;
        let features: Vec<Vec<f64>> = batch.iter().map(|s| self.provider.embed(s)).collect();
        let (spatial, freq) = split_batch(&features)?;
        spatial
            .into_iter()
            .zip(freq)
            .map(|(f_s, f_w)| {
                let z = fuse(&f_s, &f_w, self.gate)?;
                Ok(EmbeddingPair { f_s, f_w, z })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rgb(r: f64, g: f64, b: f64) -> ImageStack {
        ImageStack::new(vec![
            ImagePlane::filled(8, 8, r),
            ImagePlane::filled(8, 8, g),
            ImagePlane::filled(8, 8, b),
        ])
        .unwrap()
    }

    #[test]
    fn grayscale_examples() {
        assert_abs_diff_eq!(grayscale(&rgb(1.0, 1.0, 1.0)).unwrap().pixels[0], 1.0, epsilon = 1e-15);
        assert_eq!(grayscale(&rgb(1.0, 0.0, 0.0)).unwrap().pixels[0], 0.299);
        assert_abs_diff_eq!(grayscale(&rgb(0.37, 0.37, 0.37)).unwrap().pixels[0], 0.37, epsilon = 1e-15);
        let two = ImageStack::new(vec![ImagePlane::filled(8, 8, 0.0); 2]).unwrap();
        assert!(matches!(grayscale(&two), Err(FreqError::Format { got: 2, .. })));
    }

    #[test]
    fn filter_self_check_passes() {
        db4_self_check().unwrap();
        let g = db4_dec_hi();
        assert_abs_diff_eq!(g.iter().sum::<f64>(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn too_small_plane_rejected() {
        let p = ImagePlane::filled(7, 16, 0.5);
        assert!(matches!(dwt2_db4(&p, Boundary::Symmetric), Err(FreqError::TooSmall { .. })));
    }

    #[test]
    fn band_shapes() {
        let p = ImagePlane::filled(9, 16, 0.5);
        let s = dwt2_db4(&p, Boundary::Symmetric).unwrap();
        assert_eq!((s.ca.width, s.ca.height), (8, 11));
        let q = dwt2_db4(&p, Boundary::Periodization).unwrap();
        assert_eq!((q.ca.width, q.ca.height), (5, 8));
    }

    #[test]
    fn constant_plane_has_no_detail() {
        for boundary in [Boundary::Symmetric, Boundary::Periodization] {
            let p = ImagePlane::filled(16, 12, 0.3);
            let b = dwt2_db4(&p, boundary).unwrap();
            for band in [&b.ch, &b.cv, &b.cd] {
                assert!(band.pixels.iter().all(|v| v.abs() < 1e-12));
            }
            assert!(b.ca.pixels.iter().all(|v| (v - 0.6).abs() < 1e-12));
            assert!(idwt2_db4(&b).max_abs_diff(&p) < 1e-12);
        }
    }

    #[test]
    fn matches_reference_implementation_values() {
        // reference coefficients from an independent wavelet library on
        // x[r][c] = sin(0.37 (10 r + c)) + (10 r + c) / 10, 8 rows by 10 columns
        let p = ImagePlane::from_fn(10, 8, |x, y| {
            let v = (10 * y + x) as f64;
            (v * 0.37).sin() + 0.1 * v
        });
        let s = dwt2_db4(&p, Boundary::Symmetric).unwrap();
        assert_eq!((s.ca.width, s.ca.height), (8, 7));
        let tol = 1e-12;
        assert_abs_diff_eq!(s.ca.get(0, 0), 8.867368164304755, epsilon = tol);
        assert_abs_diff_eq!(s.ca.get(2, 0), 7.900872484753897, epsilon = tol);
        assert_abs_diff_eq!(s.ch.get(1, 1), 2.174758188154588, epsilon = tol);
        assert_abs_diff_eq!(s.cv.get(0, 2), 0.023283022295573563, epsilon = tol);
        assert_abs_diff_eq!(s.cd.get(2, 3), 0.04395339425129968, epsilon = tol);

        let q = dwt2_db4(&p, Boundary::Periodization).unwrap();
        assert_eq!((q.ca.width, q.ca.height), (5, 4));
        assert_abs_diff_eq!(q.ca.get(0, 0), 15.185692509098654, epsilon = tol);
        assert_abs_diff_eq!(q.ca.get(2, 0), 14.671391889007804, epsilon = tol);
        assert_abs_diff_eq!(q.ch.get(1, 1), -0.5598522519153393, epsilon = tol);
        assert_abs_diff_eq!(q.cv.get(0, 2), -0.01837208820350262, epsilon = tol);
        assert_abs_diff_eq!(q.cd.get(2, 3), 0.0104968862425976, epsilon = tol);
    }

    #[test]
    fn odd_sizes_reconstruct() {
        for boundary in [Boundary::Symmetric, Boundary::Periodization] {
            let p = ImagePlane::from_fn(13, 9, |x, y| ((x * 7 + y * 3) % 11) as f64 / 10.0);
            let b = dwt2_db4(&p, boundary).unwrap();
            assert!(idwt2_db4(&b).max_abs_diff(&p) < 1e-10, "{boundary:?}");
        }
    }

    #[test]
    fn fusion_examples() {
        assert_eq!(fusion_alpha(0.0), 0.5);
        assert!(fusion_alpha(20.0) > 1.0 - 1e-8);
        let z = fuse(&[1.0; 4], &[1.0; 4], FusionGate::default()).unwrap();
        assert_eq!(z, vec![0.5; 8]);
        let gate = FusionGate { w_fusion: (1.0f64 / 3.0).ln() };
        assert_abs_diff_eq!(gate.alpha(), 0.25, epsilon = 1e-15);
        let z = fuse(&[1.0, 2.0], &[3.0, 4.0], gate).unwrap();
        for (a, b) in z.iter().zip([0.25, 0.5, 2.25, 3.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert!(matches!(fuse(&[1.0], &[1.0, 2.0], gate), Err(FreqError::Dimension(1, 2))));
    }

    #[test]
    fn checkerboard_view_is_non_degenerate() {
        let p = ImagePlane::from_fn(8, 8, |x, y| ((x + y) % 2) as f64);
        let view = frequency_view(&p, Boundary::Symmetric).unwrap();
        for ch in &view.channels[1..] {
            let (lo, hi) = ch.min_max();
            assert_eq!((lo, hi), (0.0, 1.0));
        }
    }

    #[test]
    fn pipeline_runs_with_closure_provider() {
        let provider = |s: &ImageStack| {
            s.channels
                .iter()
                .map(|c| c.pixels.iter().sum::<f64>() / c.pixels.len() as f64)
                .collect::<Vec<f64>>()
        };
        let pipe = FusedPipeline::new(provider);
        let out = pipe.run(&[rgb(0.2, 0.4, 0.6), rgb(0.9, 0.1, 0.5)]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].z.len(), 6);
        assert_abs_diff_eq!(out[0].z[0], 0.1, epsilon = 1e-15);
    }
}
