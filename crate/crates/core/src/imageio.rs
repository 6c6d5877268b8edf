//! PNG input and output for images, probability maps and label maps.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};
use crate::preprocess::RawImage;

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn save<P, C>(path: &Path, img: &ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads any 8/16-bit PNG. Single-channel files give grayscale images,
/// everything else is converted to RGB (alpha dropped).
pub fn read_image(path: &Path) -> Result<RawImage> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = if img.color().channel_count() <= 2 {
        let g = img.to_luma16();
        Array3::from_shape_fn((1, h, w), |(_, y, x)| g.get_pixel(x as u32, y as u32)[0] as f64 / 65535.0)
    } else {
        let rgb = img.to_rgb16();
        Array3::from_shape_fn((3, h, w), |(c, y, x)| rgb.get_pixel(x as u32, y as u32)[c] as f64 / 65535.0)
    };
    RawImage::new(data)
}

/// 16-bit RGB or grayscale PNG of a `(C, H, W)` array with `C` in {1, 3}.
pub fn write_image(path: &Path, data: ArrayView3<f64>) -> Result<()> {
    let (c, h, w) = data.dim();
    match c {
        1 => save(
            path,
            &ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([to_u16(data[[0, y as usize, x as usize]])])),
        ),
        3 => save(
            path,
            &ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                Rgb([0, 1, 2].map(|k| to_u16(data[[k, y as usize, x as usize]])))
            }),
        ),
        _ => Err(Error::Shape(format!("cannot write {c}-channel PNG"))),
    }
}

/// 16-bit grayscale PNG of a `[0, 1]` map.
pub fn write_gray16(path: &Path, map: ArrayView2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    save(
        path,
        &ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([to_u16(map[[y as usize, x as usize]])])),
    )
}

/// 8-bit grayscale PNG of a `[0, 1]` map (binary masks become 0/255).
pub fn write_gray8(path: &Path, map: ArrayView2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    save(
        path,
        &ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(map[[y as usize, x as usize]])])),
    )
}

/// Single-channel PNG rescaled to `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Array2<f64>> {
    let g = open(path)?.to_luma16();
    let (w, h) = g.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        g.get_pixel(x as u32, y as u32)[0] as f64 / 65535.0
    }))
}

/// Binary mask from a grayscale PNG: nonzero pixels are inside.
pub fn read_mask(path: &Path) -> Result<Array2<bool>> {
    let g = open(path)?.to_luma16();
    let (w, h) = g.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| g.get_pixel(x as u32, y as u32)[0] > 0))
}

/// Label code of a pixel: 0 background, 1 subtype 1 only, 2 subtype 2 only, 3 both.
pub fn encode_labels(targets: ArrayView3<f64>) -> Result<Array2<u8>> {
    let (c, h, w) = targets.dim();
    if c != 3 {
        return Err(Error::Shape(format!("targets need 3 channels, got {c}")));
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let a = targets[[1, y, x]] == 1.0;
            let b = targets[[2, y, x]] == 1.0;
            if targets[[0, y, x]] != (a || b) as u8 as f64 {
                return Err(Error::Domain(format!(
                    "vessel channel at ({y}, {x}) is not the union of the subtype channels"
                )));
            }
            out[[y, x]] = a as u8 + 2 * b as u8;
        }
    }
    Ok(out)
}

/// Inverse of [`encode_labels`]: `(3, H, W)` binary targets.
pub fn decode_labels(codes: ArrayView2<u8>) -> Array3<f64> {
    let (h, w) = codes.dim();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let v = codes[[y, x]];
        let bit = match c {
            0 => v != 0,
            1 => v & 1 != 0,
            _ => v & 2 != 0,
        };
        bit as u8 as f64
    })
}

pub fn write_labels(path: &Path, targets: ArrayView3<f64>) -> Result<()> {
    let codes = encode_labels(targets)?;
    let (h, w) = codes.dim();
    save(
        path,
        &ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([codes[[y as usize, x as usize]]])),
    )
}

/// Reads a label PNG, rejecting codes outside 0..=3.
pub fn read_labels(path: &Path) -> Result<Array3<f64>> {
    let img = open(path)?;
    if img.color().channel_count() != 1 {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            message: "label maps must be single-channel".into(),
        });
    }
    let g = img.to_luma16();
    let scale = if matches!(img, DynamicImage::ImageLuma8(_)) { 257 } else { 1 };
    let (w, h) = g.dimensions();
    let mut codes = Array2::zeros((h as usize, w as usize));
    for (x, y, p) in g.enumerate_pixels() {
        let v = p[0] / scale;
        if v > 3 {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                message: format!("label value {v} at pixel (row {y}, col {x}) is outside 0..=3"),
            });
        }
        codes[[y as usize, x as usize]] = v as u8;
    }
    Ok(decode_labels(codes.view()))
}
