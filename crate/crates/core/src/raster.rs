//! Pixel-level visual sub-prompts.
//!
//! Regions are marked by alpha-blending a solid color over either the
//! rasterized bounding box (a colored block) or a segmentation mask. The
//! blend weight `alpha` belongs to the original pixel:
//! `out = round(alpha * orig + (1 - alpha) * color)` per channel, with
//! round-half-up.

use std::io::Cursor;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorspec::{Color, Rgb};

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
    #[error("pixel buffer holds {actual} pixels, expected {expected}")]
    PixelCount { expected: usize, actual: usize },
    #[error("invalid bounding box {0:?}: need finite x,y >= 0 and w,h > 0")]
    InvalidBox([f64; 4]),
    #[error("box {0:?} covers no pixel of a {1}x{2} image")]
    EmptyIntersection([f64; 4], u32, u32),
    #[error("mask is {mask_w}x{mask_h} but image is {img_w}x{img_h}")]
    DimensionMismatch {
        mask_w: u32,
        mask_h: u32,
        img_w: u32,
        img_h: u32,
    },
    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("transparency must lie strictly between 0 and 1, got {0}")]
    InvalidTransparency(f64),
    #[error("color text {0:?} is assigned to more than one region")]
    DuplicateColor(String),
    #[error("assignment {0} has no segmentation mask")]
    MissingMask(usize),
    #[error("malformed run-length mask: {0}")]
    BadRle(String),
    #[error("png codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Row-major 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<Rgb>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, pixels: Vec<Rgb>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyImage { width, height });
        }
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(RasterError::PixelCount {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: Rgb) -> Result<Self, RasterError> {
        Self::new(width, height, vec![rgb; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> Rgb {
        self.pixels[self.index(x, y)]
    }

    fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    /// Mean color over the rasterized box, or `None` when it covers no pixel.
    pub fn mean_over(&self, bbox: &BoundingBox) -> Option<[f64; 3]> {
        let rect = bbox.rasterize(self.width, self.height)?;
        let mut sum = [0u64; 3];
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                let p = self.pixel(x, y).channels();
                for c in 0..3 {
                    sum[c] += u64::from(p[c]);
                }
            }
        }
        let n = rect.area() as f64;
        Some(sum.map(|s| s as f64 / n))
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, RasterError> {
        let raw: Vec<u8> = self.pixels.iter().flat_map(|p| p.channels()).collect();
        let buf: ImageBuffer<image::Rgb<u8>, _> =
            ImageBuffer::from_raw(self.width, self.height, raw)
                .expect("buffer length matches dimensions");
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Decodes any PNG; alpha and 16-bit channels are reduced to 8-bit RGB.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self, RasterError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.into_rgb8();
        let (width, height) = img.dimensions();
        let pixels = img.pixels().map(|p| Rgb::from_channels(p.0)).collect();
        Self::new(width, height, pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self, RasterError> {
        Self::from_png_bytes(&std::fs::read(path)?)
    }
}

/// Axis-aligned box in pixel coordinates, `(x, y)` is the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    pub fn area(&self) -> u64 {
        u64::from(self.x1 - self.x0) * u64::from(self.y1 - self.y0)
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, RasterError> {
        let ok = [x, y, w, h].iter().all(|v| v.is_finite()) && x >= 0.0 && y >= 0.0;
        if !ok || w <= 0.0 || h <= 0.0 {
            return Err(RasterError::InvalidBox([x, y, w, h]));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    /// Floor the top-left corner, ceil the bottom-right, clip to the image.
    pub fn rasterize(&self, width: u32, height: u32) -> Option<PixelRect> {
        let clip = |v: f64, max: u32| v.clamp(0.0, f64::from(max)) as u32;
        let rect = PixelRect {
            x0: clip(self.x.floor(), width),
            y0: clip(self.y.floor(), height),
            x1: clip((self.x + self.w).ceil(), width),
            y1: clip((self.y + self.h).ceil(), height),
        };
        (rect.x1 > rect.x0 && rect.y1 > rect.y0).then_some(rect)
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = RasterError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

impl std::fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.x, self.y, self.w, self.h)
    }
}

impl std::str::FromStr for BoundingBox {
    type Err = RasterError;

    /// Parses `x,y,w,h`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let vals: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| RasterError::InvalidBox([f64::NAN; 4]))?;
        let arr: [f64; 4] = vals
            .try_into()
            .map_err(|_| RasterError::InvalidBox([f64::NAN; 4]))?;
        Self::try_from(arr)
    }
}

/// Per-pixel object mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl SegmentMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyImage { width, height });
        }
        let expected = width as usize * height as usize;
        if bits.len() != expected {
            return Err(RasterError::PixelCount {
                expected,
                actual: bits.len(),
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    /// Mask whose set pixels are exactly the rasterized box.
    pub fn from_box(width: u32, height: u32, bbox: &BoundingBox) -> Result<Self, RasterError> {
        let rect = bbox.rasterize(width, height);
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| rect.is_some_and(|r| r.contains(x, y)))
            .collect();
        Self::new(width, height, bits)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Parses `w,h:count,count,...`, alternating unset/set runs starting unset.
    pub fn from_rle(text: &str) -> Result<Self, RasterError> {
        let bad = |why: &str| RasterError::BadRle(format!("{why} in {text:?}"));
        let (dims, runs) = text
            .trim()
            .split_once(':')
            .ok_or_else(|| bad("missing ':'"))?;
        let (w, h) = dims
            .split_once(',')
            .ok_or_else(|| bad("missing dimensions"))?;
        let width: u32 = w.trim().parse().map_err(|_| bad("bad width"))?;
        let height: u32 = h.trim().parse().map_err(|_| bad("bad height"))?;
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        let mut value = false;
        for run in runs.split(',').filter(|r| !r.trim().is_empty()) {
            let n: usize = run.trim().parse().map_err(|_| bad("bad run length"))?;
            bits.extend(std::iter::repeat_n(value, n));
            value = !value;
        }
        if bits.len() != width as usize * height as usize {
            return Err(bad("runs do not cover the mask exactly"));
        }
        Self::new(width, height, bits)
    }

    pub fn to_rle(&self) -> String {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0usize;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        let runs: Vec<String> = runs.iter().map(usize::to_string).collect();
        format!("{},{}:{}", self.width, self.height, runs.join(","))
    }

    /// Single-channel (or any) PNG; a pixel is set when its luma is nonzero.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self, RasterError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.into_luma8();
        let (width, height) = img.dimensions();
        let bits = img.pixels().map(|p| p.0[0] != 0).collect();
        Self::new(width, height, bits)
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, RasterError> {
        let raw: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        let buf: ImageBuffer<Luma<u8>, _> =
            ImageBuffer::from_raw(self.width, self.height, raw).expect("mask dims");
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn load_png(path: &Path) -> Result<Self, RasterError> {
        Self::from_png_bytes(&std::fs::read(path)?)
    }
}

/// Overlay transparency, strictly between 0 and 1.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Transparency(f64);

impl Transparency {
    pub fn new(alpha: f64) -> Result<Self, RasterError> {
        if alpha > 0.0 && alpha < 1.0 {
            Ok(Self(alpha))
        } else {
            Err(RasterError::InvalidTransparency(alpha))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Transparency {
    type Error = RasterError;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<Transparency> for f64 {
    fn from(t: Transparency) -> Self {
        t.0
    }
}

/// Blends one channel; `alpha` weighs the original value.
pub fn blend_channel(orig: u8, overlay: u8, alpha: f64) -> u8 {
    let v = alpha * f64::from(orig) + (1.0 - alpha) * f64::from(overlay);
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn blend_pixel(orig: Rgb, overlay: Rgb, alpha: f64) -> Rgb {
    Rgb::new(
        blend_channel(orig.r, overlay.r, alpha),
        blend_channel(orig.g, overlay.g, alpha),
        blend_channel(orig.b, overlay.b, alpha),
    )
}

fn check_alpha(alpha: f64) -> Result<(), RasterError> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(RasterError::InvalidAlpha(alpha))
    }
}

pub fn blend_block(
    img: &RasterImage,
    bbox: &BoundingBox,
    rgb: Rgb,
    alpha: f64,
) -> Result<RasterImage, RasterError> {
    check_alpha(alpha)?;
    let rect = bbox
        .rasterize(img.width, img.height)
        .ok_or(RasterError::EmptyIntersection(
            bbox.to_array(),
            img.width,
            img.height,
        ))?;
    let mut out = img.clone();
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            let i = out.index(x, y);
            out.pixels[i] = blend_pixel(out.pixels[i], rgb, alpha);
        }
    }
    Ok(out)
}

pub fn blend_mask(
    img: &RasterImage,
    mask: &SegmentMask,
    rgb: Rgb,
    alpha: f64,
) -> Result<RasterImage, RasterError> {
    check_alpha(alpha)?;
    if mask.width != img.width || mask.height != img.height {
        return Err(RasterError::DimensionMismatch {
            mask_w: mask.width,
            mask_h: mask.height,
            img_w: img.width,
            img_h: img.height,
        });
    }
    let mut out = img.clone();
    for (px, _) in out.pixels.iter_mut().zip(&mask.bits).filter(|(_, &b)| b) {
        *px = blend_pixel(*px, rgb, alpha);
    }
    Ok(out)
}

/// Solid single-color image used to probe a model for a color's name.
pub fn pure_color_block(rgb: Rgb, width: u32, height: u32) -> Result<RasterImage, RasterError> {
    RasterImage::filled(width, height, rgb)
}

/// How a region is marked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    #[default]
    Block,
    Mask,
}

impl std::str::FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "block" => Ok(Shape::Block),
            "mask" => Ok(Shape::Mask),
            other => Err(format!("unknown shape {other:?}, expected block or mask")),
        }
    }
}

/// A region proposal: its box and, when available, its segmentation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub bbox: BoundingBox,
    pub mask: Option<SegmentMask>,
}

impl Region {
    pub fn from_box(bbox: BoundingBox) -> Self {
        Self { bbox, mask: None }
    }
}

/// Colors every assigned region, in list order, so later assignments blend
/// over earlier output where regions overlap.
pub fn apply_visual_subprompt(
    img: &RasterImage,
    assignments: &[(&Region, &Color)],
    alpha: Transparency,
    shape: Shape,
) -> Result<RasterImage, RasterError> {
    let mut seen = std::collections::HashSet::new();
    for (_, color) in assignments {
        if !seen.insert(color.text.as_str()) {
            return Err(RasterError::DuplicateColor(color.text.to_string()));
        }
    }
    let mut out = img.clone();
    for (i, (region, color)) in assignments.iter().enumerate() {
        out = match shape {
            Shape::Block => blend_block(&out, &region.bbox, color.visual, alpha.get())?,
            Shape::Mask => {
                let mask = region.mask.as_ref().ok_or(RasterError::MissingMask(i))?;
                blend_mask(&out, mask, color.visual, alpha.get())?
            }
        };
    }
    Ok(out)
}
