//! Image file decoding, encoding and bilinear resizing.

use std::path::Path;

use std::fs::File;
use std::io::BufReader;

use image::{ImageBuffer, ImageReader, Rgb};

use crate::error::{Error, Result};
use crate::image::{ImageGrid, CHANNELS};

fn decode_error(path: &Path, e: impl ToString) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn reader(path: &Path) -> Result<ImageReader<BufReader<File>>> {
    ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| decode_error(path, e))
}

/// `(height, width)` from the file header, without decoding pixels.
pub fn probe_image(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = reader(path)?.into_dimensions().map_err(|e| decode_error(path, e))?;
    Ok((h as usize, w as usize))
}

/// Decodes a PNG or JPEG file into `[0, 1]` RGB. The format is sniffed from
/// the content, not the extension.
pub fn load_image(path: &Path) -> Result<ImageGrid> {
    let decoded = reader(path)?.decode().map_err(|e| decode_error(path, e))?;
    let rgb = decoded.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    Ok(ImageGrid::from_fn(h, w, |c, y, x| raw[(y * w + x) * CHANNELS + c].clamp(0.0, 1.0)))
}

/// Decodes and resizes to `height x width`.
pub fn load_and_resize(path: &Path, height: usize, width: usize) -> Result<ImageGrid> {
    let img = load_image(path)?;
    Ok(resize_bilinear(&img, height, width))
}

/// 8-bit PNG (or JPEG, by extension); values are clamped to `[0, 1]`.
pub fn save_image(img: &ImageGrid, path: &Path) -> Result<()> {
    let (w, h) = (img.width(), img.height());
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Rgb(std::array::from_fn(|c| to_u8(img.get(c, y as usize, x as usize))))
    });
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: format!("encode failed: {e}"),
    })
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Half-pixel-centred bilinear resampling with edge clamping. Resizing to the
/// same size is the identity.
pub fn resize_bilinear(img: &ImageGrid, height: usize, width: usize) -> ImageGrid {
    if (img.height(), img.width()) == (height, width) {
        return img.clone();
    }
    let ys = taps(img.height(), height);
    let xs = taps(img.width(), width);
    ImageGrid::from_fn(height, width, |c, y, x| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
        let bottom = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}
