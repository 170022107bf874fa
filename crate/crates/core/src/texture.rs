//! Post-processing of raw generations: center-crop and bilinear scaling to
//! square power-of-two textures, mask compositing, and PNG encoding with
//! embedded provenance.

use std::io::Cursor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ImageFormat, Provenance, TextureArtifact};
use crate::raster::{Mask, RgbaImage};

/// iTXt keyword carrying provenance JSON.
pub const PROVENANCE_KEYWORD: &str = "tmdf";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum TextureSize {
    S256,
    #[default]
    S512,
    S1024,
}

impl TextureSize {
    pub fn pixels(self) -> u32 {
        match self {
            TextureSize::S256 => 256,
            TextureSize::S512 => 512,
            TextureSize::S1024 => 1024,
        }
    }
}

impl TryFrom<u32> for TextureSize {
    type Error = String;

    fn try_from(v: u32) -> Result<Self, Self::Error> {
        match v {
            256 => Ok(TextureSize::S256),
            512 => Ok(TextureSize::S512),
            1024 => Ok(TextureSize::S1024),
            other => Err(format!("texture size must be 256, 512 or 1024, got {other}")),
        }
    }
}

impl From<TextureSize> for u32 {
    fn from(s: TextureSize) -> u32 {
        s.pixels()
    }
}

/// Square sRGB PNG of a fixed power-of-two side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StandardizationTarget {
    pub size: TextureSize,
}

impl StandardizationTarget {
    pub fn new(size: TextureSize) -> Self {
        Self { size }
    }
}

#[derive(Debug, Error)]
pub enum TextureError {
    #[error("image has zero width or height")]
    EmptyImage,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("corrupt PNG: {0}")]
    CorruptFile(String),
    #[error("mask pixels must be 0 or 255 (found {value} at {x},{y})")]
    NonBinaryMask { x: u32, y: u32, value: u8 },
    #[error("artifact is not standardized: {0}")]
    NotStandardized(String),
    #[error("artifact has no provenance chunk")]
    MissingProvenance,
}

/// Pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

/// Largest square centered in a `width × height` image.
pub fn center_crop_rect(width: u32, height: u32) -> CropRect {
    let side = width.min(height);
    let x0 = (width - side) / 2;
    let y0 = (height - side) / 2;
    CropRect {
        x0,
        y0,
        x1: x0 + side,
        y1: y0 + side,
    }
}

/// Source sample for one destination coordinate: low index, high index and
/// the weight of the high index as a numerator over `2 * dst`.
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: u64,
}

fn taps(src: u32, dst: u32) -> Vec<Tap> {
    let (src, dst) = (src as i64, dst as i64);
    let den = 2 * dst;
    (0..dst)
        .map(|x| {
            // sample position (x + 0.5) * src / dst - 0.5, times 2*dst
            let num = (2 * x + 1) * src - dst;
            if num <= 0 {
                return Tap { lo: 0, hi: 0, frac: 0 };
            }
            let lo = num / den;
            if lo >= src - 1 {
                let last = (src - 1) as usize;
                return Tap {
                    lo: last,
                    hi: last,
                    frac: 0,
                };
            }
            Tap {
                lo: lo as usize,
                hi: lo as usize + 1,
                frac: (num - lo * den) as u64,
            }
        })
        .collect()
}

/// Bilinear resampling with pixel-center alignment and edge clamping, in exact
/// integer arithmetic with round-half-up. Same-size input is returned as-is.
pub fn resize_bilinear(img: &RgbaImage, width: u32, height: u32) -> RgbaImage {
    if img.dimensions() == (width, height) {
        return img.clone();
    }
    let xt = taps(img.width(), width);
    let yt = taps(img.height(), height);
    let dx = 2 * width as u64;
    let dy = 2 * height as u64;
    let denom = dx * dy;
    let src = img.as_raw();
    let stride = img.width() as usize * 4;
    let mut out = Vec::with_capacity(width as usize * height as usize * 4);
    for ty in &yt {
        let (wy1, wy0) = (ty.frac, dy - ty.frac);
        let row0 = &src[ty.lo * stride..ty.lo * stride + stride];
        let row1 = &src[ty.hi * stride..ty.hi * stride + stride];
        for tx in &xt {
            let (wx1, wx0) = (tx.frac, dx - tx.frac);
            for c in 0..4 {
                let p00 = row0[tx.lo * 4 + c] as u64;
                let p10 = row0[tx.hi * 4 + c] as u64;
                let p01 = row1[tx.lo * 4 + c] as u64;
                let p11 = row1[tx.hi * 4 + c] as u64;
                let num = (p00 * wx0 + p10 * wx1) * wy0 + (p01 * wx0 + p11 * wx1) * wy1;
                out.push(((2 * num + denom) / (2 * denom)) as u8);
            }
        }
    }
    RgbaImage::from_raw(width, height, out).expect("buffer sized for output")
}

/// Center-crops to a square, then scales to the target side.
pub fn standardize_pixels(raw: &RgbaImage, target: StandardizationTarget) -> Result<RgbaImage, TextureError> {
    if raw.is_empty() {
        return Err(TextureError::EmptyImage);
    }
    let side = target.size.pixels();
    let r = center_crop_rect(raw.width(), raw.height());
    let square = if (r.x0, r.y0, r.x1, r.y1) == (0, 0, raw.width(), raw.height()) {
        raw.clone()
    } else {
        raw.crop(r.x0, r.y0, r.x1, r.y1)
    };
    Ok(resize_bilinear(&square, side, side))
}

pub fn standardize(
    raw: &RgbaImage,
    target: StandardizationTarget,
    provenance: Provenance,
) -> Result<TextureArtifact, TextureError> {
    let pixels = standardize_pixels(raw, target)?;
    Ok(TextureArtifact {
        pixels,
        format: ImageFormat::Png,
        provenance,
    })
}

/// `out[p] = patch[p]` where the mask is set, otherwise `base[p]`.
pub fn composite_inpaint(base: &RgbaImage, mask: &Mask, patch: &RgbaImage) -> Result<RgbaImage, TextureError> {
    if mask.dimensions() != base.dimensions() || patch.dimensions() != base.dimensions() {
        return Err(TextureError::DimensionMismatch(format!(
            "base {:?}, mask {:?}, patch {:?}",
            base.dimensions(),
            mask.dimensions(),
            patch.dimensions()
        )));
    }
    let mut out = base.as_raw().to_vec();
    for ((dst, src), &bit) in out
        .chunks_exact_mut(4)
        .zip(patch.as_raw().chunks_exact(4))
        .zip(mask.bits())
    {
        if bit == 1 {
            dst.copy_from_slice(src);
        }
    }
    Ok(RgbaImage::from_raw(base.width(), base.height(), out).expect("same size as base"))
}

fn png_err(e: impl std::fmt::Display) -> TextureError {
    TextureError::CorruptFile(e.to_string())
}

/// Encodes 8-bit RGBA PNG with an sRGB chunk and optional iTXt entries.
pub fn encode_png(img: &RgbaImage, text: &[(&str, &str)]) -> Result<Vec<u8>, TextureError> {
    if img.is_empty() {
        return Err(TextureError::EmptyImage);
    }
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, img.width(), img.height());
        enc.set_color(png::ColorType::Rgba);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_source_srgb(png::SrgbRenderingIntent::Perceptual);
        for (k, v) in text {
            enc.add_itxt_chunk((*k).to_owned(), (*v).to_owned()).map_err(png_err)?;
        }
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(img.as_raw()).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
    }
    Ok(buf)
}

/// A decoded PNG and its iTXt/tEXt entries.
pub struct DecodedPng {
    pub image: RgbaImage,
    pub text: Vec<(String, String)>,
}

pub fn decode_png(bytes: &[u8]) -> Result<DecodedPng, TextureError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| TextureError::CorruptFile("image too large".into()))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(png_err)?;
    buf.truncate(frame.buffer_size());
    reader.finish().map_err(png_err)?;
    let (w, h) = (frame.width, frame.height);
    let rgba: Vec<u8> = match frame.color_type {
        png::ColorType::Rgba => buf,
        png::ColorType::Rgb => buf.chunks_exact(3).flat_map(|c| [c[0], c[1], c[2], 255]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g, 255]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|c| [c[0], c[0], c[0], c[1]]).collect(),
        png::ColorType::Indexed => return Err(TextureError::CorruptFile("unexpanded palette".into())),
    };
    let image = RgbaImage::from_raw(w, h, rgba).ok_or_else(|| TextureError::CorruptFile("short pixel data".into()))?;
    let info = reader.info();
    let mut text = Vec::new();
    for chunk in &info.utf8_text {
        text.push((chunk.keyword.clone(), chunk.get_text().map_err(png_err)?));
    }
    for chunk in &info.uncompressed_latin1_text {
        text.push((chunk.keyword.clone(), chunk.text.clone()));
    }
    Ok(DecodedPng { image, text })
}

/// Decodes a mask PNG. The first channel must be 0 (keep) or 255 (edit);
/// value 1 is also read as set.
pub fn decode_mask_png(bytes: &[u8]) -> Result<Mask, TextureError> {
    let img = decode_png(bytes)?.image;
    let mut bits = Vec::with_capacity(img.width() as usize * img.height() as usize);
    for (i, px) in img.pixels().enumerate() {
        bits.push(match px[0] {
            0 => 0,
            1 | 255 => 1,
            value => {
                let w = img.width() as usize;
                return Err(TextureError::NonBinaryMask {
                    x: (i % w) as u32,
                    y: (i / w) as u32,
                    value,
                });
            }
        });
    }
    Ok(Mask::from_bits(img.width(), img.height(), bits).expect("bits are binary"))
}

/// Encodes a mask as an 8-bit grayscale-looking RGBA PNG (0 / 255).
pub fn encode_mask_png(mask: &Mask) -> Result<Vec<u8>, TextureError> {
    let data = mask
        .bits()
        .iter()
        .flat_map(|&b| {
            let v = b * 255;
            [v, v, v, 255]
        })
        .collect();
    let img = RgbaImage::from_raw(mask.width(), mask.height(), data).expect("mask sized buffer");
    encode_png(&img, &[])
}

pub fn encode_artifact(artifact: &TextureArtifact) -> Result<Vec<u8>, TextureError> {
    if !artifact.is_standardized() {
        return Err(TextureError::NotStandardized(format!(
            "{}x{}",
            artifact.width(),
            artifact.height()
        )));
    }
    let json = serde_json::to_string(&artifact.provenance).expect("provenance serializes");
    encode_png(&artifact.pixels, &[(PROVENANCE_KEYWORD, &json)])
}

pub fn decode_artifact(bytes: &[u8]) -> Result<TextureArtifact, TextureError> {
    let decoded = decode_png(bytes)?;
    let json = decoded
        .text
        .iter()
        .find(|(k, _)| k == PROVENANCE_KEYWORD)
        .map(|(_, v)| v)
        .ok_or(TextureError::MissingProvenance)?;
    let provenance: Provenance =
        serde_json::from_str(json).map_err(|e| TextureError::CorruptFile(format!("provenance: {e}")))?;
    Ok(TextureArtifact {
        pixels: decoded.image,
        format: ImageFormat::Png,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metering::MeterRecord;
    use crate::model::ScenarioKind;

    fn gradient(w: u32, h: u32) -> RgbaImage {
        let mut img = RgbaImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.put(x, y, [(x * 7 % 256) as u8, (y * 5 % 256) as u8, ((x + y) % 256) as u8, 255]);
            }
        }
        img
    }

    fn provenance() -> Provenance {
        Provenance {
            request_id: "01TEST".into(),
            scenario: ScenarioKind::Prompt,
            backend_id: "offline-t2i".into(),
            original_prompt: "crack on the rail".into(),
            tuned_prompt: "A transverse crack, ünïcode ok".into(),
            seed: 7,
            meter: MeterRecord::new("01TEST", ScenarioKind::Prompt, "offline-t2i"),
        }
    }

    #[test]
    fn crop_rect_640x480() {
        assert_eq!(
            center_crop_rect(640, 480),
            CropRect {
                x0: 80,
                y0: 0,
                x1: 560,
                y1: 480
            }
        );
        assert_eq!(
            center_crop_rect(3, 8),
            CropRect {
                x0: 0,
                y0: 2,
                x1: 3,
                y1: 5
            }
        );
    }

    #[test]
    fn same_size_is_identity() {
        let img = gradient(512, 512);
        let out = standardize_pixels(&img, StandardizationTarget::new(TextureSize::S512)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn empty_input() {
        let err = standardize_pixels(&RgbaImage::new(0, 0), StandardizationTarget::default()).unwrap_err();
        assert!(matches!(err, TextureError::EmptyImage));
    }

    #[test]
    fn upscale_constant_stays_constant() {
        let img = RgbaImage::filled(3, 5, [10, 200, 33, 255]);
        let out = standardize_pixels(&img, StandardizationTarget::new(TextureSize::S256)).unwrap();
        assert_eq!(out.dimensions(), (256, 256));
        assert!(out.pixels().all(|p| p == [10, 200, 33, 255]));
    }

    #[test]
    fn composite_extremes() {
        let base = gradient(16, 16);
        let patch = RgbaImage::filled(16, 16, [1, 2, 3, 4]);
        assert_eq!(composite_inpaint(&base, &Mask::zeros(16, 16), &patch).unwrap(), base);
        assert_eq!(composite_inpaint(&base, &Mask::ones(16, 16), &patch).unwrap(), patch);
        assert!(matches!(
            composite_inpaint(&base, &Mask::zeros(8, 16), &patch),
            Err(TextureError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn artifact_round_trip_keeps_provenance() {
        let artifact = standardize(&gradient(300, 200), StandardizationTarget::new(TextureSize::S256), provenance()).unwrap();
        let bytes = encode_artifact(&artifact).unwrap();
        let back = decode_artifact(&bytes).unwrap();
        assert_eq!(back, artifact);
        // deterministic encoding
        assert_eq!(encode_artifact(&artifact).unwrap(), bytes);
    }

    #[test]
    fn truncated_png_is_corrupt() {
        let artifact = standardize(&gradient(64, 64), StandardizationTarget::new(TextureSize::S256), provenance()).unwrap();
        let bytes = encode_artifact(&artifact).unwrap();
        for cut in [0, 8, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode_artifact(&bytes[..cut]), Err(TextureError::CorruptFile(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn non_standard_artifact_refused() {
        let artifact = TextureArtifact {
            pixels: gradient(30, 20),
            format: ImageFormat::Png,
            provenance: provenance(),
        };
        assert!(matches!(encode_artifact(&artifact), Err(TextureError::NotStandardized(_))));
    }

    #[test]
    fn mask_png_round_trip() {
        let mask = Mask::from_fn(9, 4, |x, y| (x + y) % 3 == 0);
        let bytes = encode_mask_png(&mask).unwrap();
        assert_eq!(decode_mask_png(&bytes).unwrap(), mask);

        let grey = encode_png(&RgbaImage::filled(2, 2, [128, 128, 128, 255]), &[]).unwrap();
        assert!(matches!(
            decode_mask_png(&grey),
            Err(TextureError::NonBinaryMask { value: 128, .. })
        ));
    }
}
