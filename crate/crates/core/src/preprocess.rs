//! Fundus preprocessing: illumination correction and two edge maps, stacked
//! with the raw and corrected colour planes into the 8-channel network input.

use std::f64::consts::PI;
use std::fmt;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted image extent.
pub const MIN_EXTENT: usize = 64;

/// Planar image, `(C, H, W)` with `C` = 3 (RGB) or 1 (grayscale), values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    data: Array3<f64>,
}

impl RawImage {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("images need 1 or 3 channels, got {c}")));
        }
        if h < MIN_EXTENT || w < MIN_EXTENT {
            return Err(Error::Shape(format!("image {h}x{w} is smaller than {MIN_EXTENT}x{MIN_EXTENT}")));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn is_grayscale(&self) -> bool {
        self.channels() == 1
    }

    /// Plane the edge filters run on: green for colour, the only plane otherwise.
    pub fn filter_plane(&self) -> ArrayView2<'_, f64> {
        let idx = if self.is_grayscale() { 0 } else { 1 };
        self.data.index_axis(Axis(0), idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelLabel {
    RawR,
    RawG,
    RawB,
    CorrectedR,
    CorrectedG,
    CorrectedB,
    Gabor,
    Line,
    Gray,
}

impl ChannelLabel {
    pub const STACK_ORDER: [ChannelLabel; 8] = [
        ChannelLabel::RawR,
        ChannelLabel::RawG,
        ChannelLabel::RawB,
        ChannelLabel::CorrectedR,
        ChannelLabel::CorrectedG,
        ChannelLabel::CorrectedB,
        ChannelLabel::Gabor,
        ChannelLabel::Line,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ChannelLabel::RawR => "raw-R",
            ChannelLabel::RawG => "raw-G",
            ChannelLabel::RawB => "raw-B",
            ChannelLabel::CorrectedR => "corrected-R",
            ChannelLabel::CorrectedG => "corrected-G",
            ChannelLabel::CorrectedB => "corrected-B",
            ChannelLabel::Gabor => "gabor",
            ChannelLabel::Line => "line",
            ChannelLabel::Gray => "gray",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::STACK_ORDER
            .iter()
            .chain(std::iter::once(&ChannelLabel::Gray))
            .copied()
            .find(|l| l.as_str() == s)
    }
}

impl fmt::Display for ChannelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Network input planes with their provenance, `(C, H, W)` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    channels: Array3<f64>,
    labels: Vec<ChannelLabel>,
}

impl ChannelStack {
    pub fn new(channels: Array3<f64>, labels: Vec<ChannelLabel>) -> Result<Self> {
        if channels.dim().0 != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} channels",
                labels.len(),
                channels.dim().0
            )));
        }
        if let Some(v) = channels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("stack value {v} outside [0, 1]")));
        }
        Ok(Self { channels, labels })
    }

    /// Single-plane stack for grayscale modalities, used without filtering.
    pub fn passthrough(img: &RawImage) -> Result<Self> {
        if !img.is_grayscale() {
            return Err(Error::Shape("pass-through stacks need a grayscale image".into()));
        }
        Ok(Self {
            channels: img.data().clone(),
            labels: vec![ChannelLabel::Gray],
        })
    }

    pub fn channels(&self) -> &Array3<f64> {
        &self.channels
    }

    pub fn labels(&self) -> &[ChannelLabel] {
        &self.labels
    }

    pub fn is_passthrough(&self) -> bool {
        self.labels == [ChannelLabel::Gray]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.channels.dim().1
    }

    pub fn width(&self) -> usize {
        self.channels.dim().2
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        let labels: Vec<String> = self.labels.iter().map(|l| l.as_str().to_string()).collect();
        crate::container::write(path, &labels, &self.channels)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let (labels, data) = crate::container::read(path)?;
        let labels = labels
            .iter()
            .map(|l| {
                ChannelLabel::parse(l).ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    message: format!("unknown channel label {l:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(data, labels)
    }
}

/// Which vessel contrast the line detector responds to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    #[default]
    Bright,
    Dark,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub background_kernel_radius: usize,
    pub gabor_wavelength: f64,
    pub gabor_orientations: usize,
    pub line_length: usize,
    pub line_orientations: usize,
    pub polarity: Polarity,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            background_kernel_radius: 15,
            gabor_wavelength: 8.0,
            gabor_orientations: 12,
            line_length: 15,
            line_orientations: 12,
            polarity: Polarity::Bright,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.background_kernel_radius == 0 || self.line_length == 0 || !(self.gabor_wavelength > 0.0) {
            return Err(Error::Config("preprocessing sizes must be positive".into()));
        }
        if self.gabor_orientations < 4 || self.line_orientations < 4 {
            return Err(Error::Config("at least 4 filter orientations are required".into()));
        }
        if self.line_length % 2 == 0 {
            return Err(Error::Config(format!(
                "line_length must be odd so the line has a centre pixel, got {}",
                self.line_length
            )));
        }
        Ok(())
    }

    /// Gaussian envelope width of the Gabor kernels (one-octave bandwidth).
    pub fn gabor_sigma(&self) -> f64 {
        0.56 * self.gabor_wavelength
    }
}

/// Orthogonal projector onto the first `keep` orthonormal DCT-II modes of length `n`.
fn dct_lowpass_matrix(n: usize, keep: usize) -> Array2<f64> {
    let basis = Array2::from_shape_fn((keep, n), |(k, i)| {
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        scale * (PI * k as f64 * (i as f64 + 0.5) / n as f64).cos()
    });
    basis.t().dot(&basis)
}

/// Number of cosine modes whose period `2n / k` is at least `2 (2r + 1)`
/// pixels, i.e. below half the first zero of a `2r + 1` box filter.
fn modes_kept(n: usize, r: usize) -> usize {
    (n / (2 * r + 1) + 1).min(n)
}

/// Smooth background: the orthogonal projection of the plane onto the
/// low-frequency cosine modes (period of at least `2 (2r + 1)` pixels along
/// each axis) together with the two linear ramps. Linear illumination is removed
/// exactly and, being a projection, re-estimating the background of a
/// corrected image returns a constant.
pub fn background(plane: ArrayView2<f64>, r: usize) -> Array2<f64> {
    let (h, w) = plane.dim();
    let lh = dct_lowpass_matrix(h, modes_kept(h, r));
    let lw = dct_lowpass_matrix(w, modes_kept(w, r));
    let mut bg = lh.dot(&plane).dot(&lw);
    // ramp components not captured by the cosine modes; orthogonal to them and to each other
    let ramp = |n: usize| ndarray::Array1::from_shape_fn(n, |i| i as f64);
    let rx = &ramp(w) - &lw.dot(&ramp(w));
    let ry = &ramp(h) - &lh.dot(&ramp(h));
    let nx = h as f64 * rx.dot(&rx);
    let ny = w as f64 * ry.dot(&ry);
    if nx > 1e-12 {
        let c = plane.dot(&rx).sum() / nx;
        for mut row in bg.rows_mut() {
            row.scaled_add(c, &rx);
        }
    }
    if ny > 1e-12 {
        let c = plane.t().dot(&ry).sum() / ny;
        for mut col in bg.columns_mut() {
            col.scaled_add(c, &ry);
        }
    }
    bg
}

/// Subtracts a wide low-pass background from every channel and re-centres
/// on the channel mean, clipping to `[0, 1]`.
pub fn correct_illumination(img: &RawImage, cfg: &PreprocessConfig) -> Result<RawImage> {
    cfg.validate()?;
    let r = cfg.background_kernel_radius;
    let extent = img.height().min(img.width());
    if 2 * r >= extent {
        return Err(Error::Config(format!(
            "background radius {r} must be below half the image extent {extent}"
        )));
    }
    let mut out = img.data().clone();
    for (mut plane, src) in out.outer_iter_mut().zip(img.data().outer_iter()) {
        let bg = background(src, r);
        let mean = src.mean().unwrap_or(0.0);
        ndarray::Zip::from(&mut plane)
            .and(&bg)
            .for_each(|v, &b| *v = (*v - b + mean).clamp(0.0, 1.0));
    }
    RawImage::new(out)
}

/// Per-image min-max scaling; maps with no spread become all-zero.
pub fn normalize_unit(map: &Array2<f64>) -> Array2<f64> {
    let (lo, hi) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi - lo > 1e-12) {
        return Array2::zeros(map.dim());
    }
    map.mapv(|v| (v - lo) / (hi - lo))
}

/// Zero-mean even-symmetric Gabor kernel at orientation `theta`.
pub fn gabor_kernel(wavelength: f64, sigma: f64, theta: f64) -> Array2<f64> {
    let half = (2.5 * sigma).ceil() as isize;
    let size = (2 * half + 1) as usize;
    let gamma = 0.5;
    let (sin, cos) = theta.sin_cos();
    let mut k = Array2::from_shape_fn((size, size), |(iy, ix)| {
        let x = ix as f64 - half as f64;
        let y = iy as f64 - half as f64;
        let xr = x * cos + y * sin;
        let yr = -x * sin + y * cos;
        (-(xr * xr + gamma * gamma * yr * yr) / (2.0 * sigma * sigma)).exp() * (2.0 * PI * xr / wavelength).cos()
    });
    let mean = k.mean().unwrap();
    k.mapv_inplace(|v| v - mean);
    k
}

fn correlate_clamped(plane: ArrayView2<f64>, kernel: &Array2<f64>) -> Array2<f64> {
    let (h, w) = plane.dim();
    let kh = kernel.dim().0 as isize / 2;
    let kw = kernel.dim().1 as isize / 2;
    // Replicate-padded copy so the inner loop is branch-free.
    let ph = h + 2 * kh as usize;
    let pw = w + 2 * kw as usize;
    let padded = Array2::from_shape_fn((ph, pw), |(y, x)| {
        let sy = (y as isize - kh).clamp(0, h as isize - 1) as usize;
        let sx = (x as isize - kw).clamp(0, w as isize - 1) as usize;
        plane[[sy, sx]]
    });
    let ks = kernel.as_standard_layout();
    let ks = ks.as_slice().unwrap();
    let ps = padded.as_slice().unwrap();
    let kwid = kernel.dim().1;
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ky, krow) in ks.chunks_exact(kwid).enumerate() {
                let base = (y + ky) * pw + x;
                for (kv, pv) in krow.iter().zip(&ps[base..base + kwid]) {
                    acc += kv * pv;
                }
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Maximum absolute Gabor response over the orientation bank, before scaling.
pub fn gabor_raw(plane: ArrayView2<f64>, cfg: &PreprocessConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let sigma = cfg.gabor_sigma();
    let mut best = Array2::<f64>::zeros(plane.dim());
    for i in 0..cfg.gabor_orientations {
        let theta = i as f64 * PI / cfg.gabor_orientations as f64;
        let resp = correlate_clamped(plane, &gabor_kernel(cfg.gabor_wavelength, sigma, theta));
        ndarray::Zip::from(&mut best).and(&resp).for_each(|b, &r| *b = b.max(r.abs()));
    }
    Ok(best)
}

/// Gabor edge map of the (illumination-corrected) filter plane, in `[0, 1]`.
pub fn gabor_response(img: &RawImage, cfg: &PreprocessConfig) -> Result<Array2<f64>> {
    Ok(normalize_unit(&gabor_raw(img.filter_plane(), cfg)?))
}

/// Pixel offsets of a centred line of `length` pixels at angle `theta`.
fn line_offsets(length: usize, theta: f64) -> Vec<(isize, isize)> {
    let half = (length as isize - 1) / 2;
    let (sin, cos) = theta.sin_cos();
    (-half..=half)
        .map(|t| ((t as f64 * sin).round() as isize, (t as f64 * cos).round() as isize))
        .collect()
}

/// Signed line-detector response `max_theta(line mean) - window mean`
/// (bright polarity) or `window mean - min_theta(line mean)` (dark polarity).
pub fn line_raw(plane: ArrayView2<f64>, cfg: &PreprocessConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let (h, w) = plane.dim();
    let half = (cfg.line_length / 2) as isize;
    let clamp_at = |y: isize, x: isize| plane[[y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize]];
    let win_inv = 1.0 / (cfg.line_length * cfg.line_length) as f64;
    let lines: Vec<Vec<(isize, isize)>> = (0..cfg.line_orientations)
        .map(|i| line_offsets(cfg.line_length, i as f64 * PI / cfg.line_orientations as f64))
        .collect();
    let inv = 1.0 / cfg.line_length as f64;
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut hi = f64::NEG_INFINITY;
            let mut lo = f64::INFINITY;
            let (yi, xi) = (y as isize, x as isize);
            let mut window = 0.0;
            for dy in -half..=half {
                for dx in -half..=half {
                    window += clamp_at(yi + dy, xi + dx);
                }
            }
            let window = window * win_inv;
            for offs in &lines {
                let mut sum = 0.0;
                for &(dy, dx) in offs {
                    sum += clamp_at(yi + dy, xi + dx);
                }
                let m = sum * inv;
                hi = hi.max(m);
                lo = lo.min(m);
            }
            out[[y, x]] = match cfg.polarity {
                Polarity::Bright => hi - window,
                Polarity::Dark => window - lo,
            };
        }
    }
    Ok(out)
}

/// Line-detector map: negative responses clipped, then min-max scaled.
pub fn line_response(img: &RawImage, cfg: &PreprocessConfig) -> Result<Array2<f64>> {
    let raw = line_raw(img.filter_plane(), cfg)?;
    Ok(normalize_unit(&raw.mapv(|v| v.max(0.0))))
}

/// Stacks raw RGB, corrected RGB, Gabor and line maps in that order.
pub fn assemble_channels(raw: &RawImage, corrected: &RawImage, gabor: &Array2<f64>, line: &Array2<f64>) -> Result<ChannelStack> {
    let dims = (raw.height(), raw.width());
    for (name, d) in [
        ("corrected image", (corrected.height(), corrected.width())),
        ("gabor map", gabor.dim()),
        ("line map", line.dim()),
    ] {
        if d != dims {
            return Err(Error::Shape(format!("{name} is {}x{}, expected {}x{}", d.0, d.1, dims.0, dims.1)));
        }
    }
    if raw.channels() != 3 || corrected.channels() != 3 {
        return Err(Error::Shape("8-channel assembly needs RGB images".into()));
    }
    let mut stack = Array3::zeros((8, dims.0, dims.1));
    stack.slice_mut(s![0..3, .., ..]).assign(raw.data());
    stack.slice_mut(s![3..6, .., ..]).assign(corrected.data());
    stack.index_axis_mut(Axis(0), 6).assign(gabor);
    stack.index_axis_mut(Axis(0), 7).assign(line);
    ChannelStack::new(stack, ChannelLabel::STACK_ORDER.to_vec())
}

/// Full pipeline. Grayscale inputs pass through unfiltered as a 1-channel stack.
pub fn preprocess(img: &RawImage, cfg: &PreprocessConfig) -> Result<ChannelStack> {
    cfg.validate()?;
    if img.is_grayscale() {
        return ChannelStack::passthrough(img);
    }
    let corrected = correct_illumination(img, cfg)?;
    let gabor = gabor_response(&corrected, cfg)?;
    let line = line_response(&corrected, cfg)?;
    assemble_channels(img, &corrected, &gabor, &line)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> RawImage {
        RawImage::new(Array3::from_shape_fn((1, h, w), |(_, y, x)| f(y, x))).unwrap()
    }

    fn rgb(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> RawImage {
        RawImage::new(Array3::from_shape_fn((3, h, w), |(c, y, x)| f(c, y, x))).unwrap()
    }

    #[test]
    fn constant_and_zero_images_are_fixed_points() {
        let cfg = PreprocessConfig::default();
        let img = rgb(64, 64, |_, _, _| 0.5);
        let out = correct_illumination(&img, &cfg).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        let zero = rgb(64, 64, |_, _, _| 0.0);
        let out = correct_illumination(&zero, &cfg).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn background_is_a_projection() {
        let plane = Array2::from_shape_fn((40, 33), |(y, x)| ((y * 13 + x * 7) % 11) as f64 / 11.0 + 0.01 * x as f64);
        let once = background(plane.view(), 4);
        let twice = background(once.view(), 4);
        for (a, b) in once.iter().zip(twice.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // the residual is orthogonal to the background (brute-force inner products)
        let resid = &plane - &once;
        let ip: f64 = resid.iter().zip(once.iter()).map(|(a, b)| a * b).sum();
        assert!(ip.abs() < 1e-9, "{ip}");
        // low modes and ramps are reproduced exactly
        let smooth = Array2::from_shape_fn((40, 33), |(y, x)| {
            0.3 + 0.02 * y as f64 - 0.01 * x as f64 + 0.1 * (PI * (y as f64 + 0.5) / 40.0).cos()
        });
        let bg = background(smooth.view(), 4);
        for (a, b) in smooth.iter().zip(bg.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ramp_is_flattened() {
        let (h, w) = (96, 96);
        let (cy, cx, rad) = (48.0, 40.0, 6.0);
        let inside = |y: usize, x: usize| ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() <= rad;
        let img = rgb(h, w, |_, y, x| 0.2 + 0.5 * x as f64 / (w - 1) as f64 + if inside(y, x) { 0.2 } else { 0.0 });
        let cfg = PreprocessConfig::default();
        let out = correct_illumination(&img, &cfg).unwrap();
        let range = |d: &Array3<f64>| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for y in 0..h {
                for x in 0..w {
                    if !inside(y, x) {
                        lo = lo.min(d[[1, y, x]]);
                        hi = hi.max(d[[1, y, x]]);
                    }
                }
            }
            hi - lo
        };
        let before = range(img.data());
        let after = range(out.data());
        assert!(after <= 0.1 * before, "residual {after} vs {before}");
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let cfg = PreprocessConfig {
            background_kernel_radius: 32,
            ..Default::default()
        };
        let img = rgb(64, 64, |_, _, _| 0.3);
        assert!(matches!(correct_illumination(&img, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn constant_image_has_no_edges() {
        let cfg = PreprocessConfig::default();
        let img = gray(64, 64, |_, _| 0.4);
        assert!(gabor_response(&img, &cfg).unwrap().iter().all(|&v| v == 0.0));
        assert!(line_response(&img, &cfg).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gabor_peaks_on_line() {
        let cfg = PreprocessConfig::default();
        let img = gray(64, 64, |y, _| if y == 32 { 1.0 } else { 0.0 });
        let resp = gabor_raw(img.filter_plane(), &cfg).unwrap();
        // brute-force direct evaluation of one kernel at the line centre
        let sigma = cfg.gabor_sigma();
        let best_direct = (0..cfg.gabor_orientations)
            .map(|i| {
                let k = gabor_kernel(cfg.gabor_wavelength, sigma, i as f64 * PI / cfg.gabor_orientations as f64);
                let half = k.dim().0 as isize / 2;
                let mut acc = 0.0;
                for ky in 0..k.dim().0 {
                    for kx in 0..k.dim().1 {
                        let y = (32 + ky as isize - half).clamp(0, 63) as usize;
                        if y == 32 {
                            acc += k[[ky, kx]];
                        }
                    }
                }
                acc.abs()
            })
            .fold(0.0f64, f64::max);
        assert!((resp[[32, 32]] - best_direct).abs() < 1e-9);
        let far = 2 * cfg.gabor_wavelength as usize;
        for x in 0..64 {
            for y in 0..64 {
                if (y as isize - 32).unsigned_abs() >= far {
                    assert!(resp[[32, x]] > resp[[y, x]], "({y},{x})");
                }
            }
        }
    }

    #[test]
    fn gabor_is_rotation_consistent_for_right_angles() {
        let cfg = PreprocessConfig::default();
        let img = gray(64, 64, |y, x| if y == 20 && (8..56).contains(&x) { 1.0 } else { 0.1 });
        // rotate by 90 degrees: (y, x) -> (x, 63 - y)
        let rot = gray(64, 64, |y, x| img.data()[[0, 63 - x, y]]);
        let a = gabor_raw(img.filter_plane(), &cfg).unwrap();
        let b = gabor_raw(rot.filter_plane(), &cfg).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                assert!((a[[y, x]] - b[[x, 63 - y]]).abs() < 1e-6);
            }
        }
    }

    /// Mean along a centred line, pixels chosen by rounding the continuous
    /// parametrisation `p + t (sin, cos)`.
    fn oracle_line_raw(img: &Array2<f64>, y: usize, x: usize, len: usize, n: usize) -> f64 {
        let half = (len / 2) as f64;
        let mut best = f64::NEG_INFINITY;
        for i in 0..n {
            let th = i as f64 * PI / n as f64;
            let mut acc = 0.0;
            let mut t = -half;
            while t <= half {
                let py = (y as f64 + (t * th.sin()).round()) as usize;
                let px = (x as f64 + (t * th.cos()).round()) as usize;
                acc += img[[py, px]];
                t += 1.0;
            }
            best = best.max(acc / len as f64);
        }
        let r = len / 2;
        let win = img.slice(s![y - r..=y + r, x - r..=x + r]).sum() / (len * len) as f64;
        best - win
    }

    #[test]
    fn line_detector_polarity() {
        let cfg = PreprocessConfig::default();
        let bright = gray(64, 64, |y, _| if y == 30 { 1.0 } else { 0.0 });
        let plane = bright.data().index_axis(Axis(0), 0).to_owned();
        let resp = line_response(&bright, &cfg).unwrap();
        let raw = line_raw(bright.filter_plane(), &cfg).unwrap();
        let r = cfg.line_length / 2;
        for x in 0..64 {
            assert!(raw[[30, x]] > 0.5);
            assert_eq!(resp[[30, x]], 1.0);
            for y in 0..64 {
                if (y as isize - 30).unsigned_abs() > r {
                    assert!(resp[[y, x]].abs() < 1e-12);
                } else if y != 30 {
                    assert!(resp[[y, x]] < resp[[30, x]]);
                }
                if (r..64 - r).contains(&y) && (r..64 - r).contains(&x) {
                    let o = oracle_line_raw(&plane, y, x, cfg.line_length, cfg.line_orientations);
                    assert!((raw[[y, x]] - o).abs() < 1e-12, "({y},{x}) {} vs {o}", raw[[y, x]]);
                }
            }
        }
        let dark = gray(64, 64, |y, _| if y == 30 { 0.0 } else { 1.0 });
        let raw = line_raw(dark.filter_plane(), &cfg).unwrap();
        let resp = line_response(&dark, &cfg).unwrap();
        for x in 0..64 {
            assert!(raw[[30, x]] <= 1e-12);
            assert_eq!(resp[[30, x]], 0.0);
        }
        let flipped = PreprocessConfig {
            polarity: Polarity::Dark,
            ..cfg
        };
        let resp = line_response(&dark, &flipped).unwrap();
        for x in 0..64 {
            assert_eq!(resp[[30, x]], 1.0);
        }
    }

    #[test]
    fn even_line_length_rejected() {
        let cfg = PreprocessConfig {
            line_length: 14,
            ..Default::default()
        };
        let img = gray(64, 64, |_, _| 0.2);
        assert!(matches!(line_response(&img, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn filters_are_translation_equivariant() {
        let cfg = PreprocessConfig::default();
        let base = |y: usize, x: usize| (((y * 37 + x * 11) % 17) as f64 / 17.0) * 0.5 + if (x + y) % 23 == 0 { 0.4 } else { 0.0 };
        let (dy, dx) = (3usize, 5usize);
        let a = gray(80, 80, base);
        let b = gray(80, 80, |y, x| base((y + 80 - dy) % 80, (x + 80 - dx) % 80));
        let ga = gabor_raw(a.filter_plane(), &cfg).unwrap();
        let gb = gabor_raw(b.filter_plane(), &cfg).unwrap();
        let la = line_raw(a.filter_plane(), &cfg).unwrap();
        let lb = line_raw(b.filter_plane(), &cfg).unwrap();
        let margin = 16;
        for y in margin..80 - margin - dy {
            for x in margin..80 - margin - dx {
                assert_eq!(ga[[y, x]], gb[[y + dy, x + dx]]);
                assert_eq!(la[[y, x]], lb[[y + dy, x + dx]]);
            }
        }
    }

    #[test]
    fn assembly_order_and_errors() {
        let raw = rgb(64, 64, |c, _, _| 0.1 * (c + 1) as f64);
        let corr = rgb(64, 64, |c, _, _| 0.2 * (c + 1) as f64);
        let g = Array2::from_elem((64, 64), 0.7);
        let l = Array2::from_elem((64, 64), 0.9);
        let stack = assemble_channels(&raw, &corr, &g, &l).unwrap();
        assert_eq!(stack.labels(), &ChannelLabel::STACK_ORDER);
        let ch = stack.channels();
        assert_eq!(ch[[0, 1, 1]], 0.1);
        assert_eq!(ch[[2, 1, 1]], 0.30000000000000004);
        assert_eq!(ch[[3, 1, 1]], 0.2);
        assert_eq!(ch[[6, 1, 1]], 0.7);
        assert_eq!(ch[[7, 1, 1]], 0.9);
        let short = Array2::from_elem((65, 64), 0.7);
        assert!(matches!(assemble_channels(&raw, &corr, &short, &l), Err(Error::Shape(_))));
    }

    #[test]
    fn grayscale_passes_through() {
        let img = gray(64, 64, |y, x| ((y + x) % 5) as f64 / 5.0);
        let stack = preprocess(&img, &PreprocessConfig::default()).unwrap();
        assert!(stack.is_passthrough());
        assert_eq!(stack.channels(), img.data());
    }

    #[test]
    fn stack_file_roundtrip() {
        let img = rgb(64, 64, |c, y, x| ((c * 3 + y * 5 + x) % 9) as f64 / 9.0);
        let stack = preprocess(&img, &PreprocessConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.vfcs");
        stack.write(&path).unwrap();
        let back = ChannelStack::read(&path).unwrap();
        assert_eq!(back.labels(), stack.labels());
        for (a, b) in back.channels().iter().zip(stack.channels().iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn correction_is_nearly_idempotent() {
        // smooth shading plus thin bright structures, the regime the correction targets
        let img = rgb(96, 96, |c, y, x| {
            let shade = 0.3 + 0.2 * (x as f64 / 95.0) + 0.1 * (y as f64 / 95.0) + 0.05 * c as f64;
            let vessel = if (x as isize - 2 * y as isize / 3 - 20).abs() <= 1 { 0.15 } else { 0.0 };
            shade + vessel
        });
        let cfg = PreprocessConfig::default();
        let once = correct_illumination(&img, &cfg).unwrap();
        let twice = correct_illumination(&once, &cfg).unwrap();
        let n = once.data().len() as f64;
        let rms = (once
            .data()
            .iter()
            .zip(twice.data().iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
            .sqrt();
        assert!(rms < 1e-3, "rms {rms}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn stack_values_stay_in_unit_range(seed in 0u64..10_000) {
            let img = rgb(64, 64, |c, y, x| {
                let v = (seed.wrapping_mul(6364136223846793005).wrapping_add(((c * 4096 + y * 64 + x) as u64).wrapping_mul(1442695040888963407)) >> 40) as f64;
                (v / (1u64 << 24) as f64).fract()
            });
            let stack = preprocess(&img, &PreprocessConfig::default()).unwrap();
            prop_assert_eq!(stack.len(), 8);
            prop_assert!(stack.channels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
