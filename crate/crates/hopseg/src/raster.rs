//! Raster images: the in-memory sample type plus PNG/PPM I/O.
//!
//! Pixels are `f64` in `[0, 1]`, row-major `[y][x][c]`. Labels, when
//! attached, are one class id per pixel. Both sides of the 8-bit
//! conversion are fixed here so files round-trip deterministically.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major `[y][x][c]`.
    pub pixels: Vec<f64>,
    /// Per-pixel class ids, row-major `[y][x]`.
    pub labels: Option<Vec<u8>>,
    /// Free-form split/domain marker carried through pipelines.
    pub domain_tag: Option<String>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::InvalidInput(format!(
                "image must be at least 2x2, got {height}x{width}"
            )));
        }
        if channels == 0 {
            return Err(Error::InvalidInput("image needs at least one channel".into()));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::InvalidInput(format!(
                "pixel buffer has {} values, expected {}",
                pixels.len(),
                height * width * channels
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("image contains non-finite pixels".into()));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
            labels: None,
            domain_tag: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<u8>, cls: usize) -> Result<Self> {
        if labels.len() != self.height * self.width {
            return Err(Error::InvalidInput(format!(
                "label map has {} entries, expected {}",
                labels.len(),
                self.height * self.width
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| usize::from(l) >= cls) {
            return Err(Error::InvalidInput(format!(
                "label id {bad} out of range for {cls} classes"
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[self.idx(y, x, c)]
    }
}

fn byte_to_real(b: u8) -> f64 {
    f64::from(b) / 255.0
}

fn real_to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Load an 8-bit PNG or PPM as a 3-channel image with values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let decoded = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut pixels = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let p = rgb.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                pixels.push(byte_to_real(p[c]));
            }
        }
    }
    Image::new(h, w, 3, pixels)
}

/// Write a 1- or 3-channel image as 8-bit PNG.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let w = img.width as u32;
    let h = img.height as u32;
    match img.channels {
        3 => {
            let mut buf = image::RgbImage::new(w, h);
            for y in 0..img.height {
                for x in 0..img.width {
                    let px = image::Rgb([
                        real_to_byte(img.pixel(y, x, 0)),
                        real_to_byte(img.pixel(y, x, 1)),
                        real_to_byte(img.pixel(y, x, 2)),
                    ]);
                    buf.put_pixel(x as u32, y as u32, px);
                }
            }
            buf.save(path)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
        }
        1 => {
            let mut buf = image::GrayImage::new(w, h);
            for y in 0..img.height {
                for x in 0..img.width {
                    buf.put_pixel(x as u32, y as u32, image::Luma([real_to_byte(img.pixel(y, x, 0))]));
                }
            }
            buf.save(path)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
        }
        c => Err(Error::InvalidInput(format!("cannot encode {c}-channel image"))),
    }
}

/// Load a single-channel PNG of class ids.
pub fn load_labels(path: &Path) -> Result<Vec<u8>> {
    let decoded = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let gray = decoded.to_luma8();
    Ok(gray.into_raw())
}

/// Write class ids as a single-channel PNG.
pub fn save_labels(labels: &[u8], height: usize, width: usize, path: &Path) -> Result<()> {
    if labels.len() != height * width {
        return Err(Error::InvalidInput(format!(
            "label map has {} entries, expected {}",
            labels.len(),
            height * width
        )));
    }
    let buf = image::GrayImage::from_raw(width as u32, height as u32, labels.to_vec())
        .expect("dimensions checked above");
    buf.save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Bilinear resample to `(new_h, new_w)`. Labels, when present, follow by
/// nearest neighbour so class ids are never blended.
pub fn bilinear_resize(img: &Image, new_h: usize, new_w: usize) -> Result<Image> {
    if new_h < 2 || new_w < 2 {
        return Err(Error::Parameter(format!(
            "target resolution must be at least 2x2, got {new_h}x{new_w}"
        )));
    }
    let sy = img.height as f64 / new_h as f64;
    let sx = img.width as f64 / new_w as f64;
    let src = |d: usize, scale: f64, limit: usize| -> f64 {
        ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (limit - 1) as f64)
    };
    let mut pixels = vec![0.0; new_h * new_w * img.channels];
    for y in 0..new_h {
        let fy = src(y, sy, img.height);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f64;
        for x in 0..new_w {
            let fx = src(x, sx, img.width);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f64;
            for c in 0..img.channels {
                let v00 = img.pixel(y0, x0, c);
                let v01 = img.pixel(y0, x1, c);
                let v10 = img.pixel(y1, x0, c);
                let v11 = img.pixel(y1, x1, c);
                let top = v00 + wx * (v01 - v00);
                let bot = v10 + wx * (v11 - v10);
                pixels[(y * new_w + x) * img.channels + c] = top + wy * (bot - top);
            }
        }
    }
    let mut out = Image::new(new_h, new_w, img.channels, pixels)?;
    if let Some(labels) = &img.labels {
        let mut new_labels = vec![0u8; new_h * new_w];
        for y in 0..new_h {
            let ny = src(y, sy, img.height).round() as usize;
            for x in 0..new_w {
                let nx = src(x, sx, img.width).round() as usize;
                new_labels[y * new_w + x] = labels[ny * img.width + nx];
            }
        }
        out.labels = Some(new_labels);
    }
    out.domain_tag = img.domain_tag.clone();
    Ok(out)
}
