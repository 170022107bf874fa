//! In-memory 8-bit RGBA rasters and binary masks.

use std::fmt;

/// An 8-bit-per-channel RGBA image stored row-major, top row first.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct RgbaImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl fmt::Debug for RgbaImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RgbaImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl RgbaImage {
    /// A fully transparent black image.
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize * 4],
        }
    }

    pub fn filled(width: u32, height: u32, px: [u8; 4]) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * 4);
        for _ in 0..(width as usize * height as usize) {
            data.extend_from_slice(&px);
        }
        Self { width, height, data }
    }

    /// Wraps raw RGBA bytes. Returns `None` when the length does not match.
    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Option<Self> {
        (data.len() == width as usize * height as usize * 4).then_some(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        (y as usize * self.width as usize + x as usize) * 4
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [u8; 4] {
        let o = self.offset(x, y);
        [self.data[o], self.data[o + 1], self.data[o + 2], self.data[o + 3]]
    }

    #[inline]
    pub fn put(&mut self, x: u32, y: u32, px: [u8; 4]) {
        let o = self.offset(x, y);
        self.data[o..o + 4].copy_from_slice(&px);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 4]> + '_ {
        self.data.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]])
    }

    pub fn is_opaque(&self) -> bool {
        self.data.chunks_exact(4).all(|c| c[3] == 255)
    }

    /// Copies the rectangle `[x0, x1) × [y0, y1)` into a new image.
    pub fn crop(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> RgbaImage {
        assert!(x0 <= x1 && x1 <= self.width && y0 <= y1 && y1 <= self.height);
        let w = x1 - x0;
        let mut data = Vec::with_capacity(w as usize * (y1 - y0) as usize * 4);
        for y in y0..y1 {
            let start = self.offset(x0, y);
            data.extend_from_slice(&self.data[start..start + w as usize * 4]);
        }
        RgbaImage {
            width: w,
            height: y1 - y0,
            data,
        }
    }

    /// Rec. 601 luma of one pixel, ignoring alpha.
    #[inline]
    pub fn luminance(px: [u8; 4]) -> f64 {
        0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64
    }
}

/// A binary mask; each cell is 0 (keep) or 1 (edit).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<u8>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Mask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("set", &self.count_set())
            .finish()
    }
}

impl Mask {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![0; width as usize * height as usize],
        }
    }

    pub fn ones(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![1; width as usize * height as usize],
        }
    }

    /// Builds a mask from 0/1 cells. Returns `None` on a length mismatch or any
    /// cell outside {0, 1}.
    pub fn from_bits(width: u32, height: u32, bits: Vec<u8>) -> Option<Self> {
        if bits.len() != width as usize * height as usize || bits.iter().any(|&b| b > 1) {
            return None;
        }
        Some(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y) as u8);
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn is_set(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize] == 1
    }

    pub fn count_set(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// Tight bounding box of set cells as `(x0, y0, x1, y1)` with exclusive
    /// upper bounds, or `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<(u32, u32, u32, u32)> {
        let mut bb: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_set(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                    });
                }
            }
        }
        bb
    }
}
