//! PNG reading/writing and the crop-and-resize preprocessing.

use std::path::Path;

use tecswin_tensor::Tensor;

use crate::error::{Error, Result};

/// Interleaved 8-bit RGB pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 || width == 0 || height == 0 {
            return Err(Error::Image(format!(
                "{} bytes for a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        image::save_buffer_with_format(
            path,
            &self.pixels,
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    /// Central square with side `min(width, height)`.
    pub fn center_crop(&self) -> Self {
        let side = self.width.min(self.height);
        let x0 = (self.width - side) / 2;
        let y0 = (self.height - side) / 2;
        let mut pixels = Vec::with_capacity(side * side * 3);
        for y in y0..y0 + side {
            let row = (y * self.width + x0) * 3;
            pixels.extend_from_slice(&self.pixels[row..row + side * 3]);
        }
        Self {
            width: side,
            height: side,
            pixels,
        }
    }
}

/// Bilinear resize with half-pixel centres; same-size input is returned
/// unchanged.
pub fn resize_bilinear(src: &[f32], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    if w == out_w && h == out_h {
        return src.to_vec();
    }
    let sample = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        let pos = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (pos - i0 as f64) as f32)
    };
    let mut out = vec![0.0f32; out_w * out_h * 3];
    for oy in 0..out_h {
        let (y0, y1, fy) = sample(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = sample(ox, w, out_w);
            for c in 0..3 {
                let p = |y: usize, x: usize| src[(y * w + x) * 3 + c];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(oy * out_w + ox) * 3 + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Center crop, bilinear resize to `size x size`, scale to `[-1, 1]`;
/// returns `[size, size, 3]`.
pub fn preprocess_image(img: &RgbImage, size: usize) -> Result<Tensor> {
    let sq = img.center_crop();
    let unit: Vec<f32> = sq.pixels.iter().map(|&p| p as f32 / 127.5 - 1.0).collect();
    let out = resize_bilinear(&unit, sq.width, sq.height, size, size);
    Ok(Tensor::from_vec(out, &[size, size, 3])?)
}

/// `[-1, 1]` values of one `[H, W, 3]` image to 8-bit RGB.
pub fn to_rgb8(values: &[f32], width: usize, height: usize) -> Result<RgbImage> {
    let pixels = values
        .iter()
        .map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
        .collect();
    RgbImage::new(width, height, pixels)
}

/// Splits `[B, H, W, 3]` into one image per sample.
pub fn batch_to_images(batch: &Tensor) -> Result<Vec<RgbImage>> {
    let [_, h, w, 3] = *batch.shape() else {
        return Err(Error::Image(format!("expected [B,H,W,3], got {:?}", batch.shape())));
    };
    batch
        .data()
        .chunks_exact(h * w * 3)
        .map(|chunk| to_rgb8(chunk, w, h))
        .collect()
}

/// Tiles images row-major into a grid with `cols` columns.
pub fn image_grid(images: &[RgbImage], cols: usize) -> Result<RgbImage> {
    let first = images.first().ok_or_else(|| Error::Image("empty grid".into()))?;
    let (w, h) = (first.width, first.height);
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let gw = cols * w;
    let mut pixels = vec![0u8; gw * rows * h * 3];
    for (i, img) in images.iter().enumerate() {
        if img.width != w || img.height != h {
            return Err(Error::Image("grid images differ in size".into()));
        }
        let (r, c) = (i / cols, i % cols);
        for y in 0..h {
            let dst = ((r * h + y) * gw + c * w) * 3;
            pixels[dst..dst + w * 3].copy_from_slice(&img.pixels[y * w * 3..(y + 1) * w * 3]);
        }
    }
    RgbImage::new(gw, rows * h, pixels)
}

/// Loads every `.png` in `dir` (sorted by name) as a `[N, size, size, 3]`
/// batch.
pub fn load_dir(dir: impl AsRef<Path>, size: usize) -> Result<Tensor> {
    let mut paths: Vec<_> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Image(format!("no PNG files in {}", dir.as_ref().display())));
    }
    let mut data = Vec::with_capacity(paths.len() * size * size * 3);
    for p in &paths {
        data.extend(preprocess_image(&RgbImage::load(p)?, size)?.to_vec());
    }
    Ok(Tensor::from_vec(data, &[paths.len(), size, size, 3])?)
}
