//! Procedural image pairs with analytic ground-truth flow.
//!
//! The first image is a crop of a band-limited value-noise canvas that
//! extends past the frame by the largest displacement; the second image is
//! that canvas bilinearly resampled at the backward-mapped positions, so the
//! flow at pixel `p` of the first image satisfies `I2(p + f(p)) = I1(p)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::ImagePair;
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::tensor::Tensor;

/// Largest displacement representable by the canonical cost volumes.
pub const MAX_MAGNITUDE: f64 = 672.0;

/// Lattice spacings and amplitudes of the noise octaves.
const OCTAVES: [(usize, f64); 4] = [(24, 1.0), (12, 0.6), (6, 0.4), (3, 0.25)];

/// A motion model in image coordinates (`x` right, `y` down).
#[derive(Clone, Debug, PartialEq)]
pub enum Motion {
    Translation {
        u: f64,
        v: f64,
    },
    /// `f(p) = A (p - c) + b` with `c` the image center.
    Affine {
        a: [[f64; 2]; 2],
        b: [f64; 2],
    },
    /// Sum of low-frequency sinusoids, contractive so the warp is invertible.
    Smooth {
        terms: Vec<SineTerm>,
    },
}

/// `amp * sin(kx x + ky y + phase)` added to component `axis` (0 = u).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SineTerm {
    pub axis: usize,
    pub amp: f64,
    pub kx: f64,
    pub ky: f64,
    pub phase: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    Translation,
    Affine,
    SmoothRandom,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translation" => Ok(Self::Translation),
            "affine" => Ok(Self::Affine),
            "smooth-random" => Ok(Self::SmoothRandom),
            _ => Err(Error::invalid(
                "SyntheticKind",
                format!("unknown kind {s:?}; expected translation, affine or smooth-random"),
            )),
        }
    }
}

impl Motion {
    /// Flow at `(x, y)` for an image of size `(h, w)`.
    pub fn flow_at(&self, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
        match self {
            Motion::Translation { u, v } => (*u, *v),
            Motion::Affine { a, b } => {
                let (cx, cy) = center(h, w);
                let (dx, dy) = (x - cx, y - cy);
                (
                    a[0][0] * dx + a[0][1] * dy + b[0],
                    a[1][0] * dx + a[1][1] * dy + b[1],
                )
            }
            Motion::Smooth { terms } => {
                let mut f = [0.0; 2];
                for t in terms {
                    f[t.axis] += t.amp * (t.kx * x + t.ky * y + t.phase).sin();
                }
                (f[0], f[1])
            }
        }
    }

    /// The first-image position that lands on `(qx, qy)`.
    fn preimage(&self, qx: f64, qy: f64, h: usize, w: usize) -> (f64, f64) {
        match self {
            Motion::Translation { u, v } => (qx - u, qy - v),
            Motion::Affine { a, b } => {
                let (cx, cy) = center(h, w);
                let (rx, ry) = (qx - cx - b[0], qy - cy - b[1]);
                let m = [[1.0 + a[0][0], a[0][1]], [a[1][0], 1.0 + a[1][1]]];
                let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
                (
                    cx + (m[1][1] * rx - m[0][1] * ry) / det,
                    cy + (-m[1][0] * rx + m[0][0] * ry) / det,
                )
            }
            Motion::Smooth { .. } => {
                let (mut px, mut py) = (qx, qy);
                for _ in 0..100 {
                    let (u, v) = self.flow_at(px, py, h, w);
                    let (nx, ny) = (qx - u, qy - v);
                    let done = (nx - px).abs().max((ny - py).abs()) < 1e-12;
                    (px, py) = (nx, ny);
                    if done {
                        break;
                    }
                }
                (px, py)
            }
        }
    }

    /// Analytic divergence `du/dx + dv/dy` at `(x, y)`.
    pub fn divergence(&self, x: f64, y: f64) -> f64 {
        match self {
            Motion::Translation { .. } => 0.0,
            Motion::Affine { a, .. } => a[0][0] + a[1][1],
            Motion::Smooth { terms } => terms
                .iter()
                .map(|t| {
                    let k = if t.axis == 0 { t.kx } else { t.ky };
                    t.amp * k * (t.kx * x + t.ky * y + t.phase).cos()
                })
                .sum(),
        }
    }

    /// The dense ground-truth field.
    pub fn field(&self, h: usize, w: usize) -> FlowField {
        let plane = h * w;
        let mut data = vec![0.0; 2 * plane];
        for y in 0..h {
            for x in 0..w {
                let (u, v) = self.flow_at(x as f64, y as f64, h, w);
                data[y * w + x] = u;
                data[plane + y * w + x] = v;
            }
        }
        FlowField {
            data: Tensor::new(vec![2, h, w], data).expect("shape matches data"),
            mask: None,
        }
    }
}

fn center(h: usize, w: usize) -> (f64, f64) {
    ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Band-limited value noise, `[3, h, w]`, roughly within `[-1, 1]`.
pub fn value_noise(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm: f64 = OCTAVES.iter().map(|o| o.1).sum::<f64>() * 0.6;
    let plane = h * w;
    let mut out = Tensor::zeros(&[3, h, w]);
    for c in 0..3 {
        for &(spacing, amp) in &OCTAVES {
            let (lh, lw) = (h / spacing + 2, w / spacing + 2);
            let lattice: Vec<f64> = (0..lh * lw).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dst = &mut out.data_mut()[c * plane..(c + 1) * plane];
            for y in 0..h {
                let (gy, fy) = (
                    y / spacing,
                    smoothstep((y % spacing) as f64 / spacing as f64),
                );
                for x in 0..w {
                    let (gx, fx) = (
                        x / spacing,
                        smoothstep((x % spacing) as f64 / spacing as f64),
                    );
                    let l = |yy: usize, xx: usize| lattice[yy * lw + xx];
                    let top = l(gy, gx) * (1.0 - fx) + l(gy, gx + 1) * fx;
                    let bot = l(gy + 1, gx) * (1.0 - fx) + l(gy + 1, gx + 1) * fx;
                    dst[y * w + x] += amp * (top * (1.0 - fy) + bot * fy) / norm;
                }
            }
        }
    }
    out.map(|v| v.clamp(-1.0, 1.0))
}

/// Bilinear sample of channel plane `src` (`h x w`) with coordinates
/// clamped to the border.
fn bilinear(src: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Backward warp: `out(p) = image(p + flow(p))`, bilinear, border-clamped.
pub fn warp(image: &Tensor, flow: &FlowField) -> Result<Tensor> {
    image.expect_rank("warp", "image", 3)?;
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    flow.data.expect_shape("warp", "flow", &[2, h, w])?;
    let plane = h * w;
    let mut out = Tensor::zeros(image.shape());
    for ch in 0..c {
        let src = &image.data()[ch * plane..(ch + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let (u, v) = flow.at(y, x);
                out.data_mut()[ch * plane + y * w + x] =
                    bilinear(src, h, w, x as f64 + u, y as f64 + v);
            }
        }
    }
    Ok(out)
}

/// Largest `|u|` or `|v|` of `motion` over an `h x w` frame.
fn max_component(motion: &Motion, h: usize, w: usize) -> f64 {
    let f = motion.field(h, w);
    f.data.max_abs()
}

/// Renders the pair for an explicit motion.
pub fn synthetic_pair_with(
    motion: &Motion,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<(ImagePair, FlowField)> {
    let reach = max_component(motion, height, width);
    if !(reach <= MAX_MAGNITUDE) {
        return Err(Error::invalid(
            "synthetic_pair",
            format!("flow reaches {reach:.1} px, beyond the {MAX_MAGNITUDE} px limit"),
        ));
    }
    let margin = reach.ceil() as usize + 2;
    let (ch, cw) = (height + 2 * margin, width + 2 * margin);
    let canvas = value_noise(ch, cw, seed);
    let cplane = ch * cw;
    let plane = height * width;
    let mut first = Tensor::zeros(&[3, height, width]);
    let mut second = Tensor::zeros(&[3, height, width]);
    for c in 0..3 {
        let src = &canvas.data()[c * cplane..(c + 1) * cplane];
        for y in 0..height {
            for x in 0..width {
                first.data_mut()[c * plane + y * width + x] = src[(y + margin) * cw + x + margin];
                let (px, py) = motion.preimage(x as f64, y as f64, height, width);
                second.data_mut()[c * plane + y * width + x] =
                    bilinear(src, ch, cw, px + margin as f64, py + margin as f64);
            }
        }
    }
    Ok((ImagePair::new(first, second)?, motion.field(height, width)))
}

/// Draws a motion of the given kind whose components stay within
/// `magnitude` pixels.
pub fn random_motion(
    kind: SyntheticKind,
    magnitude: f64,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Motion> {
    if !(0.0..=MAX_MAGNITUDE).contains(&magnitude) {
        return Err(Error::invalid(
            "synthetic_pair",
            format!("magnitude {magnitude} outside [0, {MAX_MAGNITUDE}]"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    Ok(match kind {
        SyntheticKind::Translation => {
            let r = magnitude * rng.random_range(0.0f64..1.0).sqrt();
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            Motion::Translation {
                u: r * phi.cos(),
                v: r * phi.sin(),
            }
        }
        SyntheticKind::Affine => {
            let mut a = [[0.0f64; 2]; 2];
            for row in &mut a {
                for e in row.iter_mut() {
                    *e = rng.random_range(-0.1..0.1);
                }
            }
            let mut b = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let half = (height.max(width) as f64) / 2.0;
            let reach =
                (a[0][0].abs() + a[0][1].abs()).max(a[1][0].abs() + a[1][1].abs()) * half + 1.0;
            let s = (magnitude / reach).min(1.0);
            for row in &mut a {
                for e in row.iter_mut() {
                    *e *= s;
                }
            }
            b.iter_mut().for_each(|e| *e *= s);
            Motion::Affine { a, b }
        }
        SyntheticKind::SmoothRandom => {
            let mut terms = Vec::new();
            for axis in 0..2 {
                for _ in 0..2 {
                    let period = rng.random_range(0.5..1.5) * height.max(width) as f64;
                    let theta = rng.random_range(0.0..std::f64::consts::TAU);
                    let k = std::f64::consts::TAU / period;
                    terms.push(SineTerm {
                        axis,
                        amp: magnitude / 2.0,
                        kx: k * theta.cos(),
                        ky: k * theta.sin(),
                        phase: rng.random_range(0.0..std::f64::consts::TAU),
                    });
                }
            }
            // Keep the warp contractive: sum of amp * |k| below 0.5.
            let lip: f64 = terms.iter().map(|t| t.amp * t.kx.hypot(t.ky)).sum();
            if lip > 0.5 {
                terms.iter_mut().for_each(|t| t.amp *= 0.5 / lip);
            }
            Motion::Smooth { terms }
        }
    })
}

/// A textured pair related by a random motion of `kind` bounded by
/// `magnitude` px, with its ground truth. Deterministic per seed.
pub fn synthetic_pair(
    kind: SyntheticKind,
    magnitude: f64,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<(ImagePair, FlowField)> {
    let motion = random_motion(kind, magnitude, height, width, seed)?;
    synthetic_pair_with(&motion, height, width, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_translation_is_an_exact_shift() {
        let (pair, gt) =
            synthetic_pair_with(&Motion::Translation { u: 8.0, v: 0.0 }, 16, 24, 3).unwrap();
        assert_eq!(gt.at(5, 5), (8.0, 0.0));
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    assert_eq!(pair.first.at(&[c, y, x]), pair.second.at(&[c, y, x + 8]));
                }
            }
        }
    }

    #[test]
    fn identity_motion_copies_the_image() {
        let (pair, gt) =
            synthetic_pair_with(&Motion::Translation { u: 0.0, v: 0.0 }, 16, 16, 1).unwrap();
        assert_eq!(pair.first, pair.second);
        assert_eq!(gt.data.max_abs(), 0.0);
    }

    #[test]
    fn magnitude_limit() {
        assert!(synthetic_pair(SyntheticKind::Translation, 700.0, 16, 16, 0).is_err());
        assert!(synthetic_pair_with(&Motion::Translation { u: 680.0, v: 0.0 }, 8, 8, 0).is_err());
    }

    #[test]
    fn random_motions_respect_magnitude() {
        for kind in [
            SyntheticKind::Translation,
            SyntheticKind::Affine,
            SyntheticKind::SmoothRandom,
        ] {
            for seed in 0..4 {
                let m = random_motion(kind, 12.0, 32, 48, seed).unwrap();
                assert!(max_component(&m, 32, 48) <= 12.0 + 1e-9, "{kind:?}");
            }
        }
    }

    #[test]
    fn noise_is_bounded_and_seeded() {
        let a = value_noise(20, 30, 5);
        assert!(a.max_abs() <= 1.0);
        assert_eq!(a, value_noise(20, 30, 5));
        assert_ne!(a, value_noise(20, 30, 6));
    }
}
