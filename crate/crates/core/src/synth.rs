//! Seeded two-subtype branching vessel phantoms and the on-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/images/<id>.png    16-bit RGB
//! <root>/labels/<id>.png    8-bit codes: 0 background, 1 subtype 1, 2 subtype 2, 3 both
//! <root>/masks/<id>.png     optional field-of-view mask
//! ```

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imageio;
use crate::preprocess::RawImage;

/// Per-channel stroke colour of subtype 1 and subtype 2. Green is shared so
/// the green-channel edge maps do not separate the subtypes on their own.
pub const SUBTYPE_COLORS: [[f64; 3]; 2] = [[1.0, 0.8, 0.45], [0.45, 0.8, 1.0]];

/// Depth-map value of pixels outside every vessel.
pub const NO_DEPTH: u8 = u8::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub trees_per_subtype: usize,
    /// Number of branch generations; the root is generation 0.
    pub branch_depth: usize,
    pub root_width: f64,
    pub width_decay: f64,
    /// Intensity added by a generation-0 vessel at full coverage.
    pub contrast: f64,
    pub contrast_decay: f64,
    pub background: f64,
    /// Peak-to-peak amplitude of the horizontal illumination ramp.
    pub illumination_gradient: f64,
    pub noise_sigma: f64,
    /// Blank everything outside a centred disc.
    pub circular_fov: bool,
    /// Scales the colour difference between the subtypes; 1 keeps [`SUBTYPE_COLORS`].
    pub subtype_separation: f64,
    /// Per-image white balance: each channel is scaled by a gain drawn from
    /// `[1 - color_jitter, 1 + color_jitter]`.
    pub color_jitter: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            height: 256,
            width: 256,
            trees_per_subtype: 2,
            branch_depth: 4,
            root_width: 6.0,
            width_decay: 0.6,
            contrast: 0.35,
            contrast_decay: 0.7,
            background: 0.3,
            illumination_gradient: 0.15,
            noise_sigma: 0.015,
            circular_fov: false,
            subtype_separation: 1.0,
            color_jitter: 0.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn width_at(&self, depth: usize) -> f64 {
        self.root_width * self.width_decay.powi(depth as i32)
    }

    pub fn contrast_at(&self, depth: usize) -> f64 {
        self.contrast * self.contrast_decay.powi(depth as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 64 || self.width < 64 {
            return Err(Error::Config(format!(
                "phantom size {}x{} is below 64x64",
                self.height, self.width
            )));
        }
        if self.trees_per_subtype == 0 || self.branch_depth == 0 {
            return Err(Error::Config("phantoms need at least one tree and one generation".into()));
        }
        if !(self.width_decay > 0.0 && self.width_decay <= 1.0) || !(self.contrast_decay > 0.0 && self.contrast_decay <= 1.0) {
            return Err(Error::Config("decay factors must lie in (0, 1]".into()));
        }
        let thinnest = self.width_at(self.branch_depth - 1);
        if thinnest < 1.0 {
            return Err(Error::Config(format!(
                "deepest branches would be {thinnest:.3} px wide; at least 1 px is required"
            )));
        }
        let faintest = self.contrast_at(self.branch_depth - 1);
        if faintest < 2.0 * self.noise_sigma {
            return Err(Error::Config(format!(
                "deepest branch contrast {faintest:.4} is below twice the noise sigma {}",
                self.noise_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.subtype_separation) || !(0.0..0.5).contains(&self.color_jitter) {
            return Err(Error::Config(format!(
                "subtype_separation must lie in [0, 1] and color_jitter in [0, 0.5), got {} and {}",
                self.subtype_separation, self.color_jitter
            )));
        }
        if !(0.0..=1.0).contains(&self.background) || self.noise_sigma < 0.0 || self.illumination_gradient < 0.0 {
            return Err(Error::Config("background must lie in [0, 1]; noise and gradient non-negative".into()));
        }
        Ok(())
    }
}

/// A generated phantom with its exact ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: RawImage,
    /// `(3, H, W)` binary: vessel, subtype 1, subtype 2.
    pub targets: Array3<f64>,
    pub fov: Array2<bool>,
    /// Nominal stroke width of the dominant branch at vessel pixels, 0 elsewhere.
    pub width_map: Array2<f64>,
    /// Branch generation of the dominant branch, [`NO_DEPTH`] elsewhere.
    pub depth_map: Array2<u8>,
}

struct Segment {
    a: (f64, f64),
    b: (f64, f64),
    depth: usize,
    subtype: usize,
}

fn grow<R: Rng>(
    rng: &mut R,
    spec: &PhantomSpec,
    start: (f64, f64),
    angle: f64,
    length: f64,
    depth: usize,
    subtype: usize,
    out: &mut Vec<Segment>,
) {
    if depth >= spec.branch_depth {
        return;
    }
    let pieces = 4;
    let mut p = start;
    let mut dir = angle;
    for _ in 0..pieces {
        dir += rng.random_range(-0.2..0.2);
        let step = length / pieces as f64;
        let q = (p.0 + step * dir.sin(), p.1 + step * dir.cos());
        out.push(Segment { a: p, b: q, depth, subtype });
        p = q;
    }
    let spread = rng.random_range(0.45..0.75);
    let tilt = rng.random_range(-0.15..0.15);
    for side in [-1.0, 1.0] {
        grow(rng, spec, p, dir + tilt + side * spread, length * 0.75, depth + 1, subtype, out);
    }
}

fn segment_distance(p: (f64, f64), s: &Segment) -> f64 {
    let (dy, dx) = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 > 0.0 {
        (((p.0 - s.a.0) * dy + (p.1 - s.a.1) * dx) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qy, qx) = (s.a.0 + t * dy, s.a.1 + t * dx);
    ((p.0 - qy).powi(2) + (p.1 - qx).powi(2)).sqrt()
}

fn subtype_colors(separation: f64) -> [[f64; 3]; 2] {
    if separation == 1.0 {
        return SUBTYPE_COLORS;
    }
    let mut out = SUBTYPE_COLORS;
    for c in 0..3 {
        let mean = 0.5 * (SUBTYPE_COLORS[0][c] + SUBTYPE_COLORS[1][c]);
        for s in 0..2 {
            out[s][c] = mean + separation * (SUBTYPE_COLORS[s][c] - mean);
        }
    }
    out
}

/// Renders one phantom. Identical specs give identical phantoms.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let extent = h.min(w) as f64;
    let disc = (
        h as f64 / 2.0 + rng.random_range(-0.15..0.15) * extent,
        w as f64 / 2.0 + rng.random_range(-0.15..0.15) * extent,
    );
    let n_trees = 2 * spec.trees_per_subtype;
    let base = rng.random_range(0.0..2.0 * PI);
    let mut segments = Vec::new();
    for k in 0..n_trees {
        // alternate subtypes around the disc
        let subtype = k % 2;
        let angle = base + k as f64 * 2.0 * PI / n_trees as f64 + rng.random_range(-0.3..0.3);
        grow(&mut rng, spec, disc, angle, 0.3 * extent, 0, subtype, &mut segments);
    }

    // per subtype: best anti-aliased coverage and its branch
    let mut cover = Array3::<f64>::zeros((2, h, w));
    let mut intensity = Array3::<f64>::zeros((2, h, w));
    let mut width_map = Array2::<f64>::zeros((h, w));
    let mut depth_map = Array2::from_elem((h, w), NO_DEPTH);
    let mut best = Array2::<f64>::zeros((h, w));
    for s in &segments {
        let half = spec.width_at(s.depth) / 2.0;
        let contrast = spec.contrast_at(s.depth);
        let pad = half + 1.0;
        let y0 = (s.a.0.min(s.b.0) - pad).floor().max(0.0) as usize;
        let y1 = ((s.a.0.max(s.b.0) + pad).ceil().max(0.0) as usize).min(h);
        let x0 = (s.a.1.min(s.b.1) - pad).floor().max(0.0) as usize;
        let x1 = ((s.a.1.max(s.b.1) + pad).ceil().max(0.0) as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = segment_distance((y as f64, x as f64), s);
                let c = (half - d + 0.5).clamp(0.0, 1.0);
                if c <= 0.0 {
                    continue;
                }
                let idx = [s.subtype, y, x];
                cover[idx] = cover[idx].max(c);
                intensity[idx] = intensity[idx].max(c * contrast);
                if d <= half {
                    let wd = 2.0 * half;
                    if c > best[[y, x]] || (c == best[[y, x]] && wd > width_map[[y, x]]) {
                        best[[y, x]] = c;
                        width_map[[y, x]] = wd;
                        depth_map[[y, x]] = s.depth as u8;
                    }
                }
            }
        }
    }

    let r = extent / 2.0 - 1.0;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let fov = Array2::from_shape_fn((h, w), |(y, x)| {
        !spec.circular_fov || (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r
    });

    let mut targets = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            if !fov[[y, x]] {
                width_map[[y, x]] = 0.0;
                depth_map[[y, x]] = NO_DEPTH;
                continue;
            }
            let a = cover[[0, y, x]] >= 0.5;
            let b = cover[[1, y, x]] >= 0.5;
            targets[[1, y, x]] = a as u8 as f64;
            targets[[2, y, x]] = b as u8 as f64;
            targets[[0, y, x]] = (a || b) as u8 as f64;
            if !(a || b) {
                width_map[[y, x]] = 0.0;
                depth_map[[y, x]] = NO_DEPTH;
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let colors = subtype_colors(spec.subtype_separation);
    // separate stream so jitter leaves geometry and noise untouched
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xC01D_BA1A);
    let gains: [f64; 3] = if spec.color_jitter > 0.0 {
        std::array::from_fn(|_| 1.0 + jitter_rng.random_range(-spec.color_jitter..spec.color_jitter))
    } else {
        [1.0; 3]
    };
    let mut data = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let shade = spec.illumination_gradient * (x as f64 / (w - 1) as f64 - 0.5);
            for c in 0..3 {
                let v = if fov[[y, x]] {
                    let vessel: f64 = (0..2).map(|s| colors[s][c] * intensity[[s, y, x]]).sum();
                    gains[c] * (spec.background + shade + vessel) + noise.sample(&mut rng)
                } else {
                    0.0
                };
                // quantize to the 16-bit grid so PNG storage is lossless
                data[[c, y, x]] = (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0;
            }
        }
    }
    Ok(Phantom {
        image: RawImage::new(data)?,
        targets,
        fov,
        width_map,
        depth_map,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

/// One image of a dataset. Unlabeled records carry no targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub image: RawImage,
    pub targets: Option<Array3<f64>>,
    pub fov: Option<Array2<bool>>,
}

/// Images grouped by split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetHandle {
    pub labeled: Vec<Record>,
    pub unlabeled: Vec<Record>,
    pub test: Vec<Record>,
}

impl DatasetHandle {
    pub fn split(&self, split: Split) -> &[Record] {
        match split {
            Split::Labeled => &self.labeled,
            Split::Unlabeled => &self.unlabeled,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Record> {
        match split {
            Split::Labeled => &mut self.labeled,
            Split::Unlabeled => &mut self.unlabeled,
            Split::Test => &mut self.test,
        }
    }

    pub fn push(&mut self, split: Split, record: Record) -> Result<()> {
        if split != Split::Unlabeled && record.targets.is_none() {
            return Err(Error::Contract(format!("{:?} record {} has no targets", split, record.id)));
        }
        if let Some(t) = &record.targets {
            check_targets(&record.id, t, &record.image)?;
        }
        self.split_mut(split).push(record);
        Ok(())
    }

    /// SHA-256 over ids, pixels and labels, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for split in [Split::Labeled, Split::Unlabeled, Split::Test] {
            for r in self.split(split) {
                h.update(r.id.as_bytes());
                for v in r.image.data().iter() {
                    h.update(v.to_le_bytes());
                }
                if let Some(t) = &r.targets {
                    for v in t.iter() {
                        h.update([*v as u8]);
                    }
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn check_targets(id: &str, t: &Array3<f64>, image: &RawImage) -> Result<()> {
    if t.dim() != (3, image.height(), image.width()) {
        return Err(Error::Shape(format!(
            "targets of {id} are {:?}, image is {}x{}",
            t.shape(),
            image.height(),
            image.width()
        )));
    }
    imageio::encode_labels(t.view()).map(|_| ())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: String,
    split: Split,
    image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fov: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    records: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes images, label maps, masks and the manifest under `dir`.
pub fn write_dataset(dir: &Path, data: &DatasetHandle) -> Result<()> {
    for sub in ["images", "labels", "masks"] {
        create_dir(&dir.join(sub))?;
    }
    let mut records = Vec::new();
    for split in [Split::Labeled, Split::Unlabeled, Split::Test] {
        for r in data.split(split) {
            let image = format!("images/{}.png", r.id);
            imageio::write_image(&dir.join(&image), r.image.data().view())?;
            let label = match (&r.targets, split) {
                (Some(t), Split::Labeled | Split::Test) => {
                    let p = format!("labels/{}.png", r.id);
                    imageio::write_labels(&dir.join(&p), t.view())?;
                    Some(p)
                }
                _ => None,
            };
            let fov = match &r.fov {
                Some(m) => {
                    let p = format!("masks/{}.png", r.id);
                    imageio::write_gray8(&dir.join(&p), m.mapv(|b| b as u8 as f64).view())?;
                    Some(p)
                }
                None => None,
            };
            records.push(ManifestEntry {
                id: r.id.clone(),
                split,
                image,
                label,
                fov,
            });
        }
    }
    let manifest = Manifest { version: 1, records };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Loads a dataset directory, validating every label map.
pub fn read_dataset(dir: &Path) -> Result<DatasetHandle> {
    if !dir.is_dir() {
        return Err(Error::Dataset {
            path: dir.to_path_buf(),
            message: "dataset directory does not exist".into(),
        });
    }
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Dataset {
        path: path.clone(),
        message: format!("malformed manifest: {e}"),
    })?;
    if manifest.version != 1 {
        return Err(Error::Dataset {
            path,
            message: format!("unsupported manifest version {}", manifest.version),
        });
    }
    let mut seen = std::collections::HashSet::new();
    let mut out = DatasetHandle::default();
    for e in manifest.records {
        if !seen.insert(e.id.clone()) {
            return Err(Error::Dataset {
                path: path.clone(),
                message: format!("duplicate record id {}", e.id),
            });
        }
        let resolve = |rel: &str| -> PathBuf { dir.join(rel) };
        let image = imageio::read_image(&resolve(&e.image))?;
        let targets = match (&e.label, e.split) {
            (Some(l), _) => Some(imageio::read_labels(&resolve(l))?),
            (None, Split::Unlabeled) => None,
            (None, split) => {
                return Err(Error::Dataset {
                    path: path.clone(),
                    message: format!("{split:?} record {} has no label map", e.id),
                })
            }
        };
        let fov = e.fov.as_deref().map(|f| imageio::read_mask(&resolve(f))).transpose()?;
        if let Some(m) = &fov {
            if m.dim() != (image.height(), image.width()) {
                return Err(Error::Dataset {
                    path: resolve(e.fov.as_deref().unwrap()),
                    message: "field-of-view mask does not match the image size".into(),
                });
            }
        }
        let targets = if e.split == Split::Unlabeled { None } else { targets };
        out.push(
            e.split,
            Record {
                id: e.id,
                image,
                targets,
                fov,
            },
        )
        .map_err(|err| Error::Dataset {
            path: path.clone(),
            message: err.to_string(),
        })?;
    }
    Ok(out)
}

/// Record counts per split for [`synth_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            labeled: 4,
            unlabeled: 16,
            test: 8,
        }
    }
}

/// Seed of the `i`-th phantom of a dataset built from `base`.
pub fn phantom_seed(base: u64, i: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1)
}

/// Generates phantoms for each split. Also returns the phantoms in record order
/// (labeled, unlabeled, test) for callers that need width or depth maps.
pub fn synth_dataset(base: &PhantomSpec, counts: SplitCounts) -> Result<(DatasetHandle, Vec<Phantom>)> {
    let mut data = DatasetHandle::default();
    let mut phantoms = Vec::new();
    let mut i = 0;
    for (split, n) in [
        (Split::Labeled, counts.labeled),
        (Split::Unlabeled, counts.unlabeled),
        (Split::Test, counts.test),
    ] {
        for _ in 0..n {
            let spec = PhantomSpec {
                seed: phantom_seed(base.seed, i),
                ..*base
            };
            let p = generate_phantom(&spec)?;
            let fov = base.circular_fov.then(|| p.fov.clone());
            data.push(
                split,
                Record {
                    id: format!("phantom_{i:03}"),
                    image: p.image.clone(),
                    targets: (split != Split::Unlabeled).then(|| p.targets.clone()),
                    fov,
                },
            )?;
            phantoms.push(p);
            i += 1;
        }
    }
    Ok((data, phantoms))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> PhantomSpec {
        PhantomSpec {
            height: 128,
            width: 128,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn vessel_is_union_of_subtypes() {
        for seed in 0..5 {
            let p = generate_phantom(&small(seed)).unwrap();
            for y in 0..128 {
                for x in 0..128 {
                    let a = p.targets[[1, y, x]];
                    let b = p.targets[[2, y, x]];
                    assert_eq!(p.targets[[0, y, x]], a.max(b));
                }
            }
            assert!(p.targets.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate_phantom(&small(7)).unwrap(), generate_phantom(&small(7)).unwrap());
        assert_ne!(generate_phantom(&small(7)).unwrap(), generate_phantom(&small(8)).unwrap());
    }

    #[test]
    fn capillaries_are_fainter() {
        let spec = PhantomSpec::default();
        let p = generate_phantom(&spec).unwrap();
        let mean_at = |d: u8| {
            let mut s = 0.0;
            let mut n = 0;
            for ((y, x), &v) in p.depth_map.indexed_iter() {
                if v == d {
                    s += p.image.data()[[1, y, x]];
                    n += 1;
                }
            }
            assert!(n > 0, "no pixels at depth {d}");
            s / n as f64
        };
        assert!(mean_at(3) < mean_at(0));
    }

    #[test]
    fn junction_overlap_exists_in_some_phantom() {
        let any = (0..10).any(|s| {
            let p = generate_phantom(&small(s)).unwrap();
            p.targets
                .index_axis(ndarray::Axis(0), 1)
                .iter()
                .zip(p.targets.index_axis(ndarray::Axis(0), 2).iter())
                .any(|(&a, &b)| a == 1.0 && b == 1.0)
        });
        assert!(any);
    }

    #[test]
    fn stroke_width_matches_distance_transform() {
        // brute-force distance to background along the centre of a root branch
        let spec = PhantomSpec {
            trees_per_subtype: 1,
            branch_depth: 1,
            noise_sigma: 0.0,
            root_width: 6.0,
            ..Default::default()
        };
        let p = generate_phantom(&spec).unwrap();
        let vessel = p.targets.index_axis(ndarray::Axis(0), 0);
        let bg: Vec<(usize, usize)> = vessel.indexed_iter().filter(|(_, &v)| v == 0.0).map(|(i, _)| i).collect();
        let mut max_inscribed = 0.0f64;
        for ((y, x), &v) in vessel.indexed_iter() {
            if v == 1.0 {
                let d = bg
                    .iter()
                    .map(|&(by, bx)| ((by as f64 - y as f64).powi(2) + (bx as f64 - x as f64).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                max_inscribed = max_inscribed.max(d);
            }
        }
        // 2 * (distance to nearest background pixel) overestimates by at most one pixel
        assert!((2.0 * max_inscribed - 1.0 - spec.root_width).abs() <= 1.0, "{max_inscribed}");
    }

    fn red_minus_blue(p: &Phantom, channel: usize) -> f64 {
        let d = p.image.data();
        let (mut s, mut n) = (0.0, 0.0);
        for ((y, x), &w) in p.width_map.indexed_iter() {
            let only = p.targets[[channel, y, x]] == 1.0 && p.targets[[3 - channel, y, x]] == 0.0;
            if w >= 4.0 && only {
                s += d[[0, y, x]] - d[[2, y, x]];
                n += 1.0;
            }
        }
        s / n
    }

    #[test]
    fn separation_controls_subtype_colour_gap() {
        let gap = |sep: f64| {
            let p = generate_phantom(&PhantomSpec { subtype_separation: sep, ..small(3) }).unwrap();
            red_minus_blue(&p, 1) - red_minus_blue(&p, 2)
        };
        let (full, low, none) = (gap(1.0), gap(0.3), gap(0.0));
        assert!(full > low && low > none.abs(), "{full} {low} {none}");
        assert!(none.abs() < 0.02, "{none}");
    }

    #[test]
    fn jitter_changes_intensities_only() {
        let plain = generate_phantom(&small(5)).unwrap();
        let jittered = generate_phantom(&PhantomSpec { color_jitter: 0.2, ..small(5) }).unwrap();
        assert_eq!(plain.targets, jittered.targets);
        assert_eq!(plain.width_map, jittered.width_map);
        assert_ne!(plain.image, jittered.image);
        let same = generate_phantom(&PhantomSpec { color_jitter: 0.0, subtype_separation: 1.0, ..small(5) }).unwrap();
        assert_eq!(plain, same);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for bad in [
            PhantomSpec { subtype_separation: -0.1, ..Default::default() },
            PhantomSpec { subtype_separation: 1.5, ..Default::default() },
            PhantomSpec { color_jitter: 0.5, ..Default::default() },
            PhantomSpec { color_jitter: f64::NAN, ..Default::default() },
        ] {
            assert!(matches!(generate_phantom(&bad), Err(Error::Config(_))));
        }
        let thin = PhantomSpec {
            root_width: 2.0,
            ..Default::default()
        };
        assert!(matches!(generate_phantom(&thin), Err(Error::Config(_))));
        let faint = PhantomSpec {
            noise_sigma: 0.2,
            ..Default::default()
        };
        assert!(matches!(generate_phantom(&faint), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_roundtrip() {
        let base = PhantomSpec {
            height: 64,
            width: 80,
            circular_fov: true,
            ..Default::default()
        };
        let (data, _) = synth_dataset(
            &base,
            SplitCounts {
                labeled: 2,
                unlabeled: 1,
                test: 1,
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
        let text = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        let m: serde_json::Value = serde_json::from_str(&text).unwrap();
        for r in m["records"].as_array().unwrap() {
            assert_eq!(r.get("label").is_none(), r["split"] == "unlabeled");
        }
    }

    #[test]
    fn missing_directory_is_a_dataset_error() {
        let err = read_dataset(Path::new("/nonexistent/vessel-data")).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("/nonexistent/vessel-data"));
    }
}
