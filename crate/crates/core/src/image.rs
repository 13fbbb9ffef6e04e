//! Fixed-size float images and their byte-level export formats.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transform::TimeFreqMap;

/// Side length of the image the model consumes.
pub const MODEL_IMAGE_SIZE: usize = 224;
pub const CHANNELS: usize = 3;

/// HxWx3 float image, values in [0, 1], row-major with channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width * CHANNELS {
            return Err(Error::data(format!(
                "image buffer {} does not match {height}x{width}x{CHANNELS}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::data("image values must be finite and in [0, 1]"));
        }
        Ok(ImageTensor {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageTensor {
            height,
            width,
            values: vec![0.0; height * width * CHANNELS],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.values[(y * self.width + x) * CHANNELS + c] = v;
    }

    /// Gray view of channel 0 as a map-like matrix (for round-tripping a
    /// rendered image back through the renderer).
    pub fn channel_matrix(&self, c: usize) -> Tensor {
        let mut t = Tensor::zeros(&[self.height, self.width]);
        for y in 0..self.height {
            for x in 0..self.width {
                t.set(y, x, self.at(y, x, c));
            }
        }
        t
    }
}

/// Render a map to the model's 224x224x3 input: bilinear resize
/// (corner-aligned), then per-image min-max normalization to [0, 1]
/// (constant maps go to all zeros), gray replicated across channels.
/// Row 0 of the map lands at the top of the image.
pub fn render_image(map: &TimeFreqMap) -> Result<ImageTensor> {
    render_to(map, MODEL_IMAGE_SIZE, MODEL_IMAGE_SIZE)
}

/// Same pipeline at an arbitrary output size (the desk-scale test
/// configuration renders 32x32).
pub fn render_to(map: &TimeFreqMap, height: usize, width: usize) -> Result<ImageTensor> {
    if map.values.is_empty() {
        return Err(Error::data("cannot render an empty map"));
    }
    if !map.values.is_finite() {
        return Err(Error::data("map contains non-finite values"));
    }
    let resized = resize_bilinear(&map.values, height, width);
    let normalized = min_max_normalize(&resized);
    let mut img = ImageTensor::zeros(height, width);
    for y in 0..height {
        for x in 0..width {
            let v = normalized.at(y, x);
            for c in 0..CHANNELS {
                img.set(y, x, c, v);
            }
        }
    }
    Ok(img)
}

/// Corner-aligned bilinear resize: output pixel `i` samples source
/// coordinate `i * (src - 1) / (dst - 1)`; a source axis of length 1 is
/// treated as constant. Equal sizes reproduce the input exactly.
pub fn resize_bilinear(src: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (h, w) = (src.rows(), src.cols());
    let mut out = Tensor::zeros(&[out_h, out_w]);
    let sy_step = if out_h > 1 && h > 1 {
        (h - 1) as f64 / (out_h - 1) as f64
    } else {
        0.0
    };
    let sx_step = if out_w > 1 && w > 1 {
        (w - 1) as f64 / (out_w - 1) as f64
    } else {
        0.0
    };
    for i in 0..out_h {
        let sy = i as f64 * sy_step;
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for j in 0..out_w {
            let sx = j as f64 * sx_step;
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            // lerp as a + f*(b-a): exact for equal endpoints, so constant
            // maps stay exactly constant through the resize
            let lerp = |a: f64, b: f64, f: f64| a + f * (b - a);
            let top = lerp(src.at(y0, x0), src.at(y0, x1), fx);
            let bottom = lerp(src.at(y1, x0), src.at(y1, x1), fx);
            out.set(i, j, lerp(top, bottom, fy));
        }
    }
    out
}

/// Min-max rescale to [0, 1]; a constant input maps to all zeros.
pub fn min_max_normalize(t: &Tensor) -> Tensor {
    let min = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = t.clone();
    if max > min {
        let span = max - min;
        for v in out.data_mut() {
            *v = (*v - min) / span;
        }
    } else {
        for v in out.data_mut() {
            *v = 0.0;
        }
    }
    out
}

// ---- PGM / PPM export (inspection formats; the model consumes floats) ----

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Binary PGM (P5, 8-bit) of a map, min-max normalized, top row first.
pub fn write_map_pgm(map: &TimeFreqMap, path: &Path) -> Result<()> {
    let norm = min_max_normalize(&map.values);
    let mut out = Vec::with_capacity(norm.len() + 32);
    write!(out, "P5\n{} {}\n255\n", norm.cols(), norm.rows())?;
    out.extend(norm.data().iter().map(|&v| quantize(v)));
    std::fs::write(path, out)?;
    Ok(())
}

/// Binary PPM (P6, 8-bit) of a rendered image, `round(255 * v)` per channel.
pub fn write_image_ppm(img: &ImageTensor, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(img.values.len() + 32);
    write!(out, "P6\n{} {}\n255\n", img.width, img.height)?;
    out.extend(img.values.iter().map(|&v| quantize(v)));
    std::fs::write(path, out)?;
    Ok(())
}

/// Read back a P6 PPM into floats (values / 255).
pub fn read_image_ppm(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path)?;
    let (w, h, pixels) = parse_netpbm(&bytes, b"P6", CHANNELS)?;
    ImageTensor::new(h, w, pixels)
}

/// Read back a P5 PGM as a matrix of floats in [0, 1].
pub fn read_map_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let (w, h, pixels) = parse_netpbm(&bytes, b"P5", 1)?;
    Ok(Tensor::matrix(h, w, pixels))
}

fn parse_netpbm(bytes: &[u8], magic: &[u8], channels: usize) -> Result<(usize, usize, Vec<f64>)> {
    let mut pos = 0usize;
    let mut token = || -> Result<Vec<u8>> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse("truncated netpbm header"));
        }
        Ok(bytes[start..pos].to_vec())
    };
    if token()? != magic {
        return Err(Error::parse("unexpected netpbm magic"));
    }
    let parse_num = |t: Vec<u8>| -> Result<usize> {
        std::str::from_utf8(&t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse("bad netpbm header number"))
    };
    let w = parse_num(token()?)?;
    let h = parse_num(token()?)?;
    let maxval = parse_num(token()?)?;
    if maxval != 255 {
        return Err(Error::parse("only 8-bit netpbm supported"));
    }
    let data_start = pos + 1; // single whitespace after maxval
    let expected = w * h * channels;
    let raw = bytes
        .get(data_start..data_start + expected)
        .ok_or_else(|| Error::parse("netpbm pixel data truncated"))?;
    Ok((w, h, raw.iter().map(|&b| b as f64 / 255.0).collect()))
}
