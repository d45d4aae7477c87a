//! Flow fields, the `.flo` and KITTI 16-bit PNG formats, and color coding.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FLO_TAG: f32 = 202021.25;
const KITTI_OFFSET: f64 = 32768.0;
const KITTI_SCALE: f64 = 64.0;

/// Per-pixel displacement in input pixels: channel 0 horizontal, channel 1
/// vertical. `mask`, when present, is `[H, W]` with nonzero meaning valid.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub data: Tensor,
    pub mask: Option<Tensor>,
}

impl FlowField {
    pub fn new(data: Tensor) -> Result<Self> {
        data.expect_rank("FlowField", "flow", 3)?;
        if data.dim(0) != 2 {
            return Err(Error::shape(
                "FlowField",
                "flow axis 0 (components)",
                2,
                data.dim(0),
            ));
        }
        if !data.is_finite() {
            return Err(Error::Numerical("flow field has non-finite values".into()));
        }
        Ok(Self { data, mask: None })
    }

    pub fn with_mask(mut self, mask: Tensor) -> Result<Self> {
        mask.expect_shape("FlowField", "mask", &[self.height(), self.width()])?;
        self.mask = Some(mask);
        Ok(self)
    }

    /// A field with the same vector at every pixel.
    pub fn constant(height: usize, width: usize, u: f64, v: f64) -> Self {
        let plane = height * width;
        let data = Tensor::from_fn(&[2, height, width], |i| if i < plane { u } else { v });
        Self { data, mask: None }
    }

    pub fn height(&self) -> usize {
        self.data.dim(1)
    }

    pub fn width(&self) -> usize {
        self.data.dim(2)
    }

    /// `(u, v)` at `(y, x)`.
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        (self.data.at(&[0, y, x]), self.data.at(&[1, y, x]))
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m.at(&[y, x]) > 0.0)
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Serializes to the Middlebury `.flo` layout.
pub fn flo_bytes(field: &FlowField) -> Vec<u8> {
    let (h, w) = (field.height(), field.width());
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(&FLO_TAG.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            let (u, v) = field.at(y, x);
            out.extend_from_slice(&(u as f32).to_le_bytes());
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn parse_flo(bytes: &[u8], path: &Path) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::format(path, "truncated header"));
    }
    let word = |k: usize| -> [u8; 4] { bytes[4 * k..4 * k + 4].try_into().expect("4 bytes") };
    if f32::from_le_bytes(word(0)) != FLO_TAG {
        return Err(Error::format(path, "bad magic, expected 202021.25"));
    }
    let (w, h) = (i32::from_le_bytes(word(1)), i32::from_le_bytes(word(2)));
    if w <= 0 || h <= 0 {
        return Err(Error::format(
            path,
            format!("nonpositive dimensions {w}x{h}"),
        ));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = 12 + 8 * w * h;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, expected {}", bytes.len(), expected),
        ));
    }
    let plane = w * h;
    let mut data = vec![0.0; 2 * plane];
    for p in 0..plane {
        data[p] = f32::from_le_bytes(word(3 + 2 * p)) as f64;
        data[plane + p] = f32::from_le_bytes(word(4 + 2 * p)) as f64;
    }
    let t = Tensor::new(vec![2, h, w], data)?;
    FlowField::new(t).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_flo(field: &FlowField, path: &Path) -> Result<()> {
    fs::write(path, flo_bytes(field)).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    parse_flo(&read_bytes(path)?, path)
}

fn kitti_encode(v: f64) -> u16 {
    (v * KITTI_SCALE + KITTI_OFFSET).round().clamp(0.0, 65535.0) as u16
}

/// Writes a 16-bit RGB PNG with `u`, `v` in the first two channels and the
/// validity flag in the third. Values are quantized to 1/64 px.
pub fn write_kitti_png(field: &FlowField, path: &Path) -> Result<()> {
    let (h, w) = (field.height(), field.width());
    let img: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let (u, v) = field.at(y, x);
        Rgb([
            kitti_encode(u),
            kitti_encode(v),
            field.is_valid(y, x) as u16,
        ])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_kitti_png(path: &Path) -> Result<FlowField> {
    decode_kitti_png(&read_bytes(path)?, path)
}

/// [`read_kitti_png`] on bytes already in memory; `path` is used for errors.
pub fn decode_kitti_png(bytes: &[u8], path: &Path) -> Result<FlowField> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let rgb = match img {
        image::DynamicImage::ImageRgb16(b) => b,
        other => {
            return Err(Error::format(
                path,
                format!("expected 16-bit RGB, got {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 2 * plane];
    let mut mask = vec![0.0; plane];
    for (x, y, px) in rgb.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        data[p] = (px[0] as f64 - KITTI_OFFSET) / KITTI_SCALE;
        data[plane + p] = (px[1] as f64 - KITTI_OFFSET) / KITTI_SCALE;
        mask[p] = (px[2] > 0) as u8 as f64;
    }
    FlowField::new(Tensor::new(vec![2, h, w], data)?)?.with_mask(Tensor::new(vec![h, w], mask)?)
}

/// The 55-entry Middlebury color wheel (RY 15, YG 6, GC 4, CB 11, BM 13, MR 6).
fn color_wheel() -> Vec<[f64; 3]> {
    let segments: [(usize, [f64; 3], [f64; 3]); 6] = [
        (15, [255.0, 0.0, 0.0], [0.0, 255.0, 0.0]),
        (6, [255.0, 255.0, 0.0], [-255.0, 0.0, 0.0]),
        (4, [0.0, 255.0, 0.0], [0.0, 0.0, 255.0]),
        (11, [0.0, 255.0, 255.0], [0.0, -255.0, 0.0]),
        (13, [0.0, 0.0, 255.0], [255.0, 0.0, 0.0]),
        (6, [255.0, 0.0, 255.0], [0.0, 0.0, -255.0]),
    ];
    let mut wheel = Vec::with_capacity(55);
    for (n, base, delta) in segments {
        for i in 0..n {
            let t = (i as f64 / n as f64 * 255.0).floor() / 255.0;
            wheel.push([
                base[0] + delta[0] * t,
                base[1] + delta[1] * t,
                base[2] + delta[2] * t,
            ]);
        }
    }
    wheel
}

/// 99th percentile of the per-pixel magnitudes.
fn percentile_99(field: &FlowField) -> f64 {
    let mut mags: Vec<f64> = (0..field.height())
        .flat_map(|y| (0..field.width()).map(move |x| (y, x)))
        .map(|(y, x)| {
            let (u, v) = field.at(y, x);
            u.hypot(v)
        })
        .collect();
    mags.sort_by(f64::total_cmp);
    let idx = ((mags.len() - 1) as f64 * 0.99).round() as usize;
    mags[idx]
}

/// Middlebury color coding: hue from direction, saturation from magnitude
/// relative to `max_mag` (default: the 99th percentile magnitude). Pixels
/// beyond `max_mag` are darkened; invalid pixels are black.
pub fn flow_to_color(field: &FlowField, max_mag: Option<f64>) -> RgbImage {
    let wheel = color_wheel();
    let ncols = wheel.len() as f64;
    let max = max_mag.unwrap_or_else(|| percentile_99(field));
    let max = if max > 0.0 { max } else { 1.0 };
    RgbImage::from_fn(field.width() as u32, field.height() as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        if !field.is_valid(y, x) {
            return image::Rgb([0, 0, 0]);
        }
        let (u, v) = field.at(y, x);
        let (u, v) = (u / max, v / max);
        let rad = u.hypot(v);
        let a = (-v).atan2(-u) / std::f64::consts::PI;
        let fk = (a + 1.0) / 2.0 * (ncols - 1.0);
        let k0 = fk.floor() as usize % wheel.len();
        let k1 = (k0 + 1) % wheel.len();
        let f = fk - fk.floor();
        let mut px = [0u8; 3];
        for c in 0..3 {
            let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
            let col = if rad <= 1.0 {
                1.0 - rad * (1.0 - col)
            } else {
                col * 0.75
            };
            px[c] = (255.0 * col).round().clamp(0.0, 255.0) as u8;
        }
        image::Rgb(px)
    })
}

pub fn write_color_png(field: &FlowField, max_mag: Option<f64>, path: &Path) -> Result<()> {
    flow_to_color(field, max_mag)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Loads a PNG or PPM as a `[3, H, W]` tensor scaled to `[-1, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    decode_image(&read_bytes(path)?, path)
}

/// [`read_image`] on bytes already in memory; `path` is used for errors.
pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::format(path, e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, px) in rgb.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + p] = px[c] as f64 / 127.5 - 1.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes a `[3, H, W]` tensor in `[-1, 1]` as an 8-bit PNG.
pub fn write_image(image: &Tensor, path: &Path) -> Result<()> {
    image.expect_rank("write_image", "image", 3)?;
    let (h, w) = (image.dim(1), image.dim(2));
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let mut px = [0u8; 3];
        for (c, v) in px.iter_mut().enumerate() {
            let f = image.at(&[c, y as usize, x as usize]);
            *v = ((f + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        }
        image::Rgb(px)
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}
