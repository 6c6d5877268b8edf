//! Multi-scale training crops and sliding-window stitching.

use ndarray::{s, Array2, Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSpec {
    /// Square crop sizes drawn uniformly for training.
    pub train_scales: Vec<usize>,
    /// Network input size every crop is resampled to.
    pub canonical_size: usize,
    pub test_stride: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            train_scales: vec![64, 96, 128],
            canonical_size: 64,
            test_stride: 10,
        }
    }
}

impl PatchSpec {
    /// `size_multiple` is the divisibility the network needs of its input.
    pub fn validate(&self, size_multiple: usize) -> Result<()> {
        if self.canonical_size == 0 || self.canonical_size % size_multiple.max(1) != 0 {
            return Err(Error::Config(format!(
                "canonical_size {} must be a positive multiple of {size_multiple}",
                self.canonical_size
            )));
        }
        if self.test_stride == 0 || self.test_stride > self.canonical_size {
            return Err(Error::Config(format!(
                "test_stride {} must lie in [1, {}]",
                self.test_stride, self.canonical_size
            )));
        }
        if self.train_scales.is_empty() || self.train_scales.iter().any(|&s| s < self.canonical_size) {
            return Err(Error::Config(format!(
                "train_scales {:?} must be non-empty and at least {}",
                self.train_scales, self.canonical_size
            )));
        }
        Ok(())
    }

    pub fn largest_scale(&self) -> usize {
        self.train_scales.iter().copied().max().unwrap_or(self.canonical_size)
    }
}

/// Window origins along one axis: multiples of `stride` plus a final
/// window flush with the far border.
pub fn window_positions(extent: usize, size: usize, stride: usize) -> Result<Vec<usize>> {
    if extent < size {
        return Err(Error::Shape(format!("extent {extent} is smaller than window {size}")));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let last = extent - size;
    let mut pos: Vec<usize> = (0..=last).step_by(stride).collect();
    if *pos.last().unwrap() != last {
        pos.push(last);
    }
    Ok(pos)
}

/// All window origins `(row, col)` in row-major order.
pub fn window_grid(h: usize, w: usize, spec: &PatchSpec) -> Result<Vec<(usize, usize)>> {
    let rows = window_positions(h, spec.canonical_size, spec.test_stride)?;
    let cols = window_positions(w, spec.canonical_size, spec.test_stride)?;
    Ok(rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect())
}

/// Cuts a `(C, H, W)` array into canonical-size windows.
pub fn extract_windows(stack: ArrayView3<f64>, spec: &PatchSpec) -> Result<Vec<((usize, usize), Array3<f64>)>> {
    let (_, h, w) = stack.dim();
    let k = spec.canonical_size;
    Ok(window_grid(h, w, spec)?
        .into_iter()
        .map(|(r, c)| ((r, c), stack.slice(s![.., r..r + k, c..c + k]).to_owned()))
        .collect())
}

/// Accumulates overlapping window outputs for averaging.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitCanvas {
    sum: Array3<f64>,
    count: Array2<u32>,
}

impl LogitCanvas {
    pub fn new(channels: usize, h: usize, w: usize) -> Self {
        Self {
            sum: Array3::zeros((channels, h, w)),
            count: Array2::zeros((h, w)),
        }
    }

    pub fn add(&mut self, pos: (usize, usize), patch: ArrayView3<f64>) -> Result<()> {
        let (c, ph, pw) = patch.dim();
        let (sc, h, w) = self.sum.dim();
        if c != sc || pos.0 + ph > h || pos.1 + pw > w {
            return Err(Error::Shape(format!(
                "patch {:?} at {pos:?} does not fit canvas ({sc}, {h}, {w})",
                patch.shape()
            )));
        }
        let (r, col) = pos;
        self.sum.slice_mut(s![.., r..r + ph, col..col + pw]).zip_mut_with(&patch, |a, &b| *a += b);
        self.count.slice_mut(s![r..r + ph, col..col + pw]).mapv_inplace(|n| n + 1);
        Ok(())
    }

    pub fn count(&self) -> &Array2<u32> {
        &self.count
    }

    /// Per-pixel mean of the accumulated windows.
    pub fn finalize(self) -> Result<Array3<f64>> {
        if let Some(((row, col), _)) = self.count.indexed_iter().find(|(_, &n)| n == 0) {
            return Err(Error::Coverage { row, col });
        }
        let mut out = self.sum;
        for mut plane in out.outer_iter_mut() {
            plane.zip_mut_with(&self.count, |v, &n| *v /= n as f64);
        }
        Ok(out)
    }
}

/// Adds every contribution to `canvas` and returns the averaged map.
pub fn merge_logits<'a, I>(mut canvas: LogitCanvas, contributions: I) -> Result<Array3<f64>>
where
    I: IntoIterator<Item = ((usize, usize), ArrayView3<'a, f64>)>,
{
    for (pos, patch) in contributions {
        canvas.add(pos, patch)?;
    }
    canvas.finalize()
}

/// A square crop of side `scale` at `(row, col)`, resampled to `out` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub row: usize,
    pub col: usize,
    pub scale: usize,
    pub out: usize,
}

impl Crop {
    /// Draws a scale uniformly from the spec, then a position uniformly
    /// over all valid origins.
    pub fn sample<R: Rng>(spec: &PatchSpec, h: usize, w: usize, rng: &mut R) -> Result<Self> {
        let scale = spec.train_scales[rng.random_range(0..spec.train_scales.len())];
        if scale > h || scale > w {
            return Err(Error::Sampling(format!("crop size {scale} exceeds image {h}x{w}")));
        }
        let row = rng.random_range(0..=h - scale);
        let col = rng.random_range(0..=w - scale);
        Ok(Self {
            row,
            col,
            scale,
            out: spec.canonical_size,
        })
    }

    fn source(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.scale as f64 / self.out as f64 - 0.5
    }

    /// Bilinear (half-pixel centres) resample of the crop region.
    pub fn bilinear(&self, src: ArrayView3<f64>) -> Array3<f64> {
        let region = src.slice(s![.., self.row..self.row + self.scale, self.col..self.col + self.scale]);
        if self.scale == self.out {
            return region.to_owned();
        }
        let taps: Vec<(usize, usize, f64)> = (0..self.out)
            .map(|i| {
                let p = self.source(i).clamp(0.0, (self.scale - 1) as f64);
                let lo = p.floor() as usize;
                let hi = (lo + 1).min(self.scale - 1);
                (lo, hi, p - lo as f64)
            })
            .collect();
        let c = src.dim().0;
        Array3::from_shape_fn((c, self.out, self.out), |(ch, y, x)| {
            let (y0, y1, fy) = taps[y];
            let (x0, x1, fx) = taps[x];
            let top = region[[ch, y0, x0]] * (1.0 - fx) + region[[ch, y0, x1]] * fx;
            let bot = region[[ch, y1, x0]] * (1.0 - fx) + region[[ch, y1, x1]] * fx;
            top * (1.0 - fy) + bot * fy
        })
    }

    /// Nearest-neighbour resample; never produces values absent from the source.
    pub fn nearest(&self, src: ArrayView3<f64>) -> Array3<f64> {
        let region = src.slice(s![.., self.row..self.row + self.scale, self.col..self.col + self.scale]);
        if self.scale == self.out {
            return region.to_owned();
        }
        let idx: Vec<usize> = (0..self.out)
            .map(|i| (((i as f64 + 0.5) * self.scale as f64 / self.out as f64) as usize).min(self.scale - 1))
            .collect();
        let c = src.dim().0;
        Array3::from_shape_fn((c, self.out, self.out), |(ch, y, x)| region[[ch, idx[y], idx[x]]])
    }
}

/// One training crop: image channels resampled bilinearly, label maps by nearest neighbour.
pub fn sample_training_patch_with<R: Rng>(
    stack: ArrayView3<f64>,
    targets: ArrayView3<f64>,
    spec: &PatchSpec,
    rng: &mut R,
) -> Result<(Array3<f64>, Array3<f64>)> {
    let (_, h, w) = stack.dim();
    if targets.dim().1 != h || targets.dim().2 != w {
        return Err(Error::Shape(format!(
            "targets {:?} do not match image {h}x{w}",
            targets.shape()
        )));
    }
    let crop = Crop::sample(spec, h, w, rng)?;
    Ok((crop.bilinear(stack), crop.nearest(targets)))
}

/// Seeded convenience wrapper around [`sample_training_patch_with`].
pub fn sample_training_patch(
    stack: ArrayView3<f64>,
    targets: ArrayView3<f64>,
    spec: &PatchSpec,
    seed: u64,
) -> Result<(Array3<f64>, Array3<f64>)> {
    sample_training_patch_with(stack, targets, spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |(k, y, x)| ((k * 7919 + y * 131 + x * 17) % 1000) as f64 / 1000.0)
    }

    #[test]
    fn window_counts() {
        let spec = PatchSpec::default();
        assert_eq!(window_grid(64, 64, &spec).unwrap(), vec![(0, 0)]);
        assert_eq!(window_positions(74, 64, 10).unwrap(), vec![0, 10]);
        assert_eq!(window_grid(74, 74, &spec).unwrap().len(), 4);
        assert_eq!(window_positions(75, 64, 10).unwrap(), vec![0, 10, 11]);
        assert_eq!(window_grid(75, 75, &spec).unwrap().len(), 9);
        assert!(window_positions(63, 64, 10).is_err());
    }

    #[test]
    fn two_patch_average() {
        let mut canvas = LogitCanvas::new(1, 1, 3);
        let a = Array3::from_elem((1, 1, 2), 0.2);
        let b = Array3::from_elem((1, 1, 2), 0.6);
        canvas.add((0, 0), a.view()).unwrap();
        canvas.add((0, 1), b.view()).unwrap();
        let out = canvas.finalize().unwrap();
        assert!((out[[0, 0, 1]] - 0.4).abs() < 1e-15);
        assert_eq!(out[[0, 0, 0]], 0.2);
        assert_eq!(out[[0, 0, 2]], 0.6);
    }

    #[test]
    fn coverage_gap_is_reported() {
        let mut canvas = LogitCanvas::new(1, 4, 4);
        canvas.add((0, 0), Array3::zeros((1, 2, 4)).view()).unwrap();
        match canvas.finalize() {
            Err(Error::Coverage { row, col }) => assert_eq!((row, col), (2, 0)),
            other => panic!("expected coverage error, got {other:?}"),
        }
    }

    #[test]
    fn identity_scale_is_bit_exact() {
        let img = ramp(3, 100, 90);
        let lab = img.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let spec = PatchSpec {
            train_scales: vec![64],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let crop = Crop::sample(&spec, 100, 90, &mut rng).unwrap();
        let (p, t) = sample_training_patch(img.view(), lab.view(), &spec, 3).unwrap();
        assert_eq!(p, img.slice(s![.., crop.row..crop.row + 64, crop.col..crop.col + 64]));
        assert_eq!(t, lab.slice(s![.., crop.row..crop.row + 64, crop.col..crop.col + 64]));
    }

    #[test]
    fn checkerboard_labels_stay_binary() {
        let lab = Array3::from_shape_fn((1, 128, 128), |(_, y, x)| ((y + x) % 2) as f64);
        let crop = Crop {
            row: 0,
            col: 0,
            scale: 128,
            out: 64,
        };
        let out = crop.nearest(lab.view());
        assert!(out.iter().all(|&v| v == 0.0 || v == 1.0));
        // bilinear of the same map produces intermediate values, nearest must not
        assert!(crop.bilinear(lab.view()).iter().any(|&v| v != 0.0 && v != 1.0));
    }

    #[test]
    fn bilinear_preserves_constants_and_ramps() {
        let src = Array3::from_shape_fn((1, 96, 96), |(_, y, x)| 0.01 * x as f64 + 0.002 * y as f64);
        let crop = Crop {
            row: 0,
            col: 0,
            scale: 96,
            out: 64,
        };
        let out = crop.bilinear(src.view());
        for y in 1..63 {
            for x in 1..63 {
                let sx = (x as f64 + 0.5) * 1.5 - 0.5;
                let sy = (y as f64 + 0.5) * 1.5 - 0.5;
                assert!((out[[0, y, x]] - (0.01 * sx + 0.002 * sy)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let img = ramp(2, 140, 150);
        let lab = img.mapv(|v| (v > 0.3) as u8 as f64);
        let spec = PatchSpec::default();
        let a = sample_training_patch(img.view(), lab.view(), &spec, 11).unwrap();
        let b = sample_training_patch(img.view(), lab.view(), &spec, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_small_image_is_a_sampling_error() {
        let img = ramp(1, 100, 100);
        let spec = PatchSpec {
            train_scales: vec![128],
            ..Default::default()
        };
        assert!(matches!(
            sample_training_patch(img.view(), img.view(), &spec, 0),
            Err(Error::Sampling(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn extract_merge_roundtrip(h in 64usize..110, w in 64usize..110, stride in 1usize..40) {
            let img = ramp(2, h, w);
            let spec = PatchSpec { test_stride: stride, ..Default::default() };
            let wins = extract_windows(img.view(), &spec).unwrap();
            let mut covered = Array2::from_elem((h, w), false);
            for ((r, c), _) in &wins {
                covered.slice_mut(s![*r..r + 64, *c..c + 64]).fill(true);
            }
            prop_assert!(covered.iter().all(|&v| v));
            let merged = merge_logits(LogitCanvas::new(2, h, w), wins.iter().map(|(p, a)| (*p, a.view()))).unwrap();
            for (a, b) in merged.iter().zip(img.iter()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            let rev = merge_logits(LogitCanvas::new(2, h, w), wins.iter().rev().map(|(p, a)| (*p, a.view()))).unwrap();
            for (a, b) in merged.iter().zip(rev.iter()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
