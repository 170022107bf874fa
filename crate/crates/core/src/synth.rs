//! Seeded procedural texture synthesizer used as the offline image backend.
//!
//! The output is a pure function of the prompt, seed, size and (for edits)
//! base image. Image x runs along the component (longitudinal), y across it.
//!
//! | keyword group          | effect                                              |
//! |------------------------|-----------------------------------------------------|
//! | (always)               | base-material field: palette × fBm value noise      |
//! | crack family           | dark random-walk polyline plus two thinner branches |
//! | rust / decay family    | low-frequency blotches in an oxide palette          |
//! | wear family            | streaks stretched along the wear direction          |
//! | squat                  | dark elliptical depression with a bright rim        |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::raster::RgbaImage;

/// Base palettes keyed by component words; first match wins.
const MATERIAL_PALETTES: &[(&[&str], [f64; 3])] = &[
    (&["sleeper", "concrete", "crosstie"], [152.0, 148.0, 140.0]),
    (&["freight", "panel", "wagon"], [72.0, 92.0, 112.0]),
    (&["fastener", "clip", "bolt"], [96.0, 98.0, 102.0]),
    (&["rail", "track", "steel"], [122.0, 118.0, 112.0]),
];
const DEFAULT_PALETTE: [f64; 3] = [128.0, 124.0, 118.0];
const BASE_NOISE_FREQ: f64 = 6.0;
const BASE_NOISE_OCTAVES: u32 = 4;
const BASE_CONTRAST: f64 = 0.30;
const GRAIN: f64 = 10.0;

const CRACK_WORDS: &[&str] = &["crack", "cracks", "cracked", "cracking", "fracture", "fissure"];
const CRACK_COLOR: [f64; 3] = [18.0, 16.0, 15.0];
/// Step length and stroke radius as fractions of the shorter side.
const CRACK_STEP: f64 = 1.0 / 96.0;
const CRACK_RADIUS: f64 = 1.0 / 160.0;
const CRACK_JITTER: f64 = 0.45;
const CRACK_BRANCHES: usize = 2;

const OXIDE_WORDS: &[&str] = &["rust", "rusty", "rusted", "corrosion", "corroded", "oxidation"];
const DECAY_WORDS: &[&str] = &["decay", "decayed", "rot", "rotten", "rotting", "deterioration", "spalling"];
const OXIDE_PALETTE: [[f64; 3]; 3] = [[158.0, 78.0, 30.0], [118.0, 54.0, 24.0], [186.0, 104.0, 44.0]];
const DECAY_PALETTE: [[f64; 3]; 3] = [[92.0, 66.0, 44.0], [70.0, 52.0, 38.0], [112.0, 84.0, 58.0]];
const BLOTCH_FREQ: f64 = 2.5;
const BLOTCH_OCTAVES: u32 = 3;
const BLOTCH_LO: f64 = 0.52;
const BLOTCH_HI: f64 = 0.72;
const BLOTCH_STRENGTH: f64 = 0.85;

const WEAR_WORDS: &[&str] = &["wear", "worn", "abrasion", "abraded"];
const WEAR_STREAK_FREQ: (f64, f64) = (0.6, 24.0);
const WEAR_GAIN: f64 = 55.0;

const SQUAT_WORDS: &[&str] = &["squat", "squats"];
const SQUAT_COLOR: [f64; 3] = [44.0, 40.0, 38.0];

/// Weight of the synthesized texture over the base image in edits.
const EDIT_BLEND: f64 = 0.75;

fn has_word(text: &str, words: &[&str]) -> bool {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .any(|tok| words.contains(&tok))
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 2-D value noise on an integer lattice with smoothstep interpolation.
#[derive(Clone, Copy)]
struct ValueNoise {
    salt: u64,
}

impl ValueNoise {
    #[inline]
    fn lattice(&self, ix: i64, iy: i64, octave: u32) -> f64 {
        let h = splitmix(self.salt ^ splitmix((ix as u64) ^ splitmix((iy as u64) ^ ((octave as u64) << 48))));
        (h >> 11) as f64 / (1u64 << 53) as f64
    }

    #[inline]
    fn sample(&self, x: f64, y: f64, octave: u32) -> f64 {
        let (fx, fy) = (x.floor(), y.floor());
        let (ix, iy) = (fx as i64, fy as i64);
        let (tx, ty) = (x - fx, y - fy);
        let sx = tx * tx * (3.0 - 2.0 * tx);
        let sy = ty * ty * (3.0 - 2.0 * ty);
        let a = self.lattice(ix, iy, octave);
        let b = self.lattice(ix + 1, iy, octave);
        let c = self.lattice(ix, iy + 1, octave);
        let d = self.lattice(ix + 1, iy + 1, octave);
        let top = a + (b - a) * sx;
        let bottom = c + (d - c) * sx;
        top + (bottom - top) * sy
    }

    /// Fractal sum normalized to `[0, 1]`.
    fn fbm(&self, x: f64, y: f64, octaves: u32) -> f64 {
        let (mut sum, mut amp, mut freq, mut norm) = (0.0, 1.0, 1.0, 0.0);
        for o in 0..octaves {
            sum += amp * self.sample(x * freq, y * freq, o);
            norm += amp;
            amp *= 0.5;
            freq *= 2.0;
        }
        sum / norm
    }
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn smoothstep(lo: f64, hi: f64, v: f64) -> f64 {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Float RGB canvas used while compositing layers.
struct Canvas {
    w: usize,
    h: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn stamp_disc(&mut self, cx: f64, cy: f64, r: f64, color: [f64; 3]) {
        let r2 = r * r;
        let x0 = (cx - r).floor().max(0.0) as i64;
        let x1 = (cx + r).ceil().min(self.w as f64 - 1.0) as i64;
        let y0 = (cy - r).floor().max(0.0) as i64;
        let y1 = (cy + r).ceil().min(self.h as f64 - 1.0) as i64;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r2 {
                    self.px[y as usize * self.w + x as usize] = color;
                }
            }
        }
    }

    fn into_image(self) -> RgbaImage {
        let mut data = Vec::with_capacity(self.w * self.h * 4);
        for p in self.px {
            data.extend(p.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
            data.push(255);
        }
        RgbaImage::from_raw(self.w as u32, self.h as u32, data).expect("canvas sized buffer")
    }
}

/// Which way a linear defect runs, from orientation words in the prompt.
fn main_angle(prompt: &str, default: f64) -> f64 {
    if has_word(prompt, &["longitudinal", "lengthwise"]) {
        0.0
    } else if has_word(prompt, &["transverse", "transversal", "crosswise"]) {
        std::f64::consts::FRAC_PI_2
    } else if has_word(prompt, &["diagonal", "diagonally", "oblique"]) {
        std::f64::consts::FRAC_PI_4
    } else {
        default
    }
}

fn walk_crack(canvas: &mut Canvas, rng: &mut ChaCha8Rng, start: (f64, f64), angle: f64, max_steps: usize, radius: f64) -> Vec<(f64, f64)> {
    let side = canvas.w.min(canvas.h) as f64;
    let step = (side * CRACK_STEP).max(1.0);
    let (mut x, mut y) = start;
    let mut heading = angle;
    let mut path = Vec::with_capacity(max_steps);
    for _ in 0..max_steps {
        if x < -radius || y < -radius || x > canvas.w as f64 + radius || y > canvas.h as f64 + radius {
            break;
        }
        canvas.stamp_disc(x, y, radius, CRACK_COLOR);
        path.push((x, y));
        // jitter around the main direction, pulled back toward it
        heading += rng.random_range(-CRACK_JITTER..CRACK_JITTER) + 0.25 * (angle - heading);
        x += step * heading.cos();
        y += step * heading.sin();
    }
    path
}

fn draw_cracks(canvas: &mut Canvas, rng: &mut ChaCha8Rng, prompt: &str) {
    let (w, h) = (canvas.w as f64, canvas.h as f64);
    let side = w.min(h);
    let radius = (side * CRACK_RADIUS).max(1.0);
    let angle = main_angle(prompt, std::f64::consts::FRAC_PI_2);
    // enter from the edge opposite the main direction
    let (dx, dy) = (angle.cos(), angle.sin());
    let start = if dx.abs() >= dy.abs() {
        (0.0, rng.random_range(0.25..0.75) * h)
    } else {
        (rng.random_range(0.25..0.75) * w, 0.0)
    };
    let max_steps = (4.0 * (w + h) / (side * CRACK_STEP).max(1.0)) as usize;
    let path = walk_crack(canvas, rng, start, angle, max_steps, radius);
    if path.len() < 4 {
        return;
    }
    for _ in 0..CRACK_BRANCHES {
        let origin = path[rng.random_range(path.len() / 4..path.len() * 3 / 4)];
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let branch_angle = angle + sign * rng.random_range(0.5..1.0);
        let steps = rng.random_range(path.len() / 6..path.len() / 3 + 1);
        walk_crack(canvas, rng, origin, branch_angle, steps, (radius * 0.6).max(0.75));
    }
}

fn draw_blotches(canvas: &mut Canvas, noise: ValueNoise, tint: ValueNoise, palette: &[[f64; 3]; 3]) {
    let (w, h) = (canvas.w, canvas.h);
    let side = w.min(h) as f64;
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / side, y as f64 / side);
            let n = noise.fbm(u * BLOTCH_FREQ, v * BLOTCH_FREQ, BLOTCH_OCTAVES);
            let weight = smoothstep(BLOTCH_LO, BLOTCH_HI, n) * BLOTCH_STRENGTH;
            if weight <= 0.0 {
                continue;
            }
            let t = tint.fbm(u * 8.0, v * 8.0, 2);
            let color = if t < 0.5 {
                lerp3(palette[1], palette[0], t * 2.0)
            } else {
                lerp3(palette[0], palette[2], (t - 0.5) * 2.0)
            };
            let p = &mut canvas.px[y * w + x];
            *p = lerp3(*p, color, weight);
        }
    }
}

fn draw_wear(canvas: &mut Canvas, noise: ValueNoise, prompt: &str) {
    let (w, h) = (canvas.w, canvas.h);
    let side = w.min(h) as f64;
    let angle = main_angle(prompt, 0.0);
    let (c, s) = (angle.cos(), angle.sin());
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / side, y as f64 / side);
            // along / across the wear direction
            let (a, b) = (u * c + v * s, -u * s + v * c);
            let n = noise.fbm(a * WEAR_STREAK_FREQ.0, b * WEAR_STREAK_FREQ.1, 3);
            let gain = (n - 0.45) * WEAR_GAIN;
            let p = &mut canvas.px[y * w + x];
            for ch in p.iter_mut() {
                *ch += gain;
            }
        }
    }
}

fn draw_squat(canvas: &mut Canvas, rng: &mut ChaCha8Rng) {
    let (w, h) = (canvas.w as f64, canvas.h as f64);
    let side = w.min(h);
    let (cx, cy) = (rng.random_range(0.3..0.7) * w, rng.random_range(0.3..0.7) * h);
    let (rx, ry) = (rng.random_range(0.12..0.2) * side, rng.random_range(0.08..0.14) * side);
    for y in 0..canvas.h {
        for x in 0..canvas.w {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
            let d = (dx * dx + dy * dy).sqrt();
            let p = &mut canvas.px[y * canvas.w + x];
            if d < 1.0 {
                *p = lerp3(*p, SQUAT_COLOR, 0.85 * (1.0 - d * d));
            } else if d < 1.25 {
                let rim = 1.0 - ((d - 1.125) / 0.125).abs();
                for ch in p.iter_mut() {
                    *ch += 50.0 * rim;
                }
            }
        }
    }
}

fn rng_for(prompt: &str, seed: u64, width: u32, height: u32) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"tmd-synth/1");
    h.update(seed.to_le_bytes());
    h.update(width.to_le_bytes());
    h.update(height.to_le_bytes());
    h.update(prompt.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Synthesizes a `width × height` defect texture for `prompt`. With a base
/// image (which must be `width × height`), the texture is blended over it.
pub fn synthesize(prompt: &str, seed: u64, width: u32, height: u32, base: Option<&RgbaImage>) -> RgbaImage {
    let lower = prompt.to_lowercase();
    let mut rng = rng_for(&lower, seed, width, height);
    let palette = MATERIAL_PALETTES
        .iter()
        .find(|(words, _)| has_word(&lower, words))
        .map(|(_, p)| *p)
        .unwrap_or(DEFAULT_PALETTE);

    let base_noise = ValueNoise { salt: rng.random() };
    let grain_noise = ValueNoise { salt: rng.random() };
    let (w, h) = (width as usize, height as usize);
    let side = w.min(h).max(1) as f64;
    let mut px = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / side, y as f64 / side);
            let n = base_noise.fbm(u * BASE_NOISE_FREQ, v * BASE_NOISE_FREQ, BASE_NOISE_OCTAVES);
            let g = grain_noise.sample(x as f64 * 0.7, y as f64 * 0.7, 0) - 0.5;
            let k = 1.0 - BASE_CONTRAST / 2.0 + BASE_CONTRAST * n;
            px.push([palette[0] * k + g * GRAIN, palette[1] * k + g * GRAIN, palette[2] * k + g * GRAIN]);
        }
    }
    let mut canvas = Canvas { w, h, px };

    if w > 0 && h > 0 {
        let blotch_noise = ValueNoise { salt: rng.random() };
        let tint_noise = ValueNoise { salt: rng.random() };
        if has_word(&lower, OXIDE_WORDS) {
            draw_blotches(&mut canvas, blotch_noise, tint_noise, &OXIDE_PALETTE);
        }
        if has_word(&lower, DECAY_WORDS) {
            let decay_noise = ValueNoise {
                salt: splitmix(blotch_noise.salt),
            };
            draw_blotches(&mut canvas, decay_noise, tint_noise, &DECAY_PALETTE);
        }
        if has_word(&lower, WEAR_WORDS) {
            draw_wear(&mut canvas, ValueNoise { salt: rng.random() }, &lower);
        }
        if has_word(&lower, SQUAT_WORDS) {
            draw_squat(&mut canvas, &mut rng);
        }
        if has_word(&lower, CRACK_WORDS) {
            draw_cracks(&mut canvas, &mut rng, &lower);
        }
    }

    if let Some(base) = base {
        assert_eq!(base.dimensions(), (width, height), "edit base must match output size");
        for (i, p) in canvas.px.iter_mut().enumerate() {
            let b = base.as_raw();
            let bp = [b[i * 4] as f64, b[i * 4 + 1] as f64, b[i * 4 + 2] as f64];
            *p = lerp3(bp, *p, EDIT_BLEND);
        }
    }
    canvas.into_image()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dark_fraction(img: &RgbaImage) -> f64 {
        let lum: Vec<f64> = img.pixels().map(RgbaImage::luminance).collect();
        let mean = lum.iter().sum::<f64>() / lum.len() as f64;
        lum.iter().filter(|&&l| l < 0.25 * mean).count() as f64 / lum.len() as f64
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = synthesize("crack on the rail", 7, 64, 48, None);
        let b = synthesize("crack on the rail", 7, 64, 48, None);
        let c = synthesize("crack on the rail", 8, 64, 48, None);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.dimensions(), (64, 48));
        assert!(a.is_opaque());
    }

    #[test]
    fn crack_leaves_dark_pixels_other_prompts_do_not() {
        assert!(dark_fraction(&synthesize("a crack", 1, 128, 128, None)) >= 0.005);
        assert_eq!(dark_fraction(&synthesize("rail surface", 1, 128, 128, None)), 0.0);
    }

    #[test]
    fn degenerate_sizes() {
        assert_eq!(synthesize("crack", 0, 0, 0, None).dimensions(), (0, 0));
        assert_eq!(synthesize("crack", 0, 1, 1, None).dimensions(), (1, 1));
        assert_eq!(synthesize("crack rust wear squat decay", 0, 3, 200, None).dimensions(), (3, 200));
    }

    #[test]
    fn keyword_matching_is_whole_word() {
        assert!(has_word("a rusty bolt", OXIDE_WORDS));
        assert!(!has_word("trustworthy", OXIDE_WORDS));
    }
}
