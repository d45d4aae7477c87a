//! Dilated cost volumes.
//!
//! A volume compares every feature vector of the first image with a
//! `(2k+1) x (2k+1)` grid of candidates in the second image, spaced `d`
//! feature cells apart. Candidate displacements in input pixels are
//! therefore `s * d * {-k..k}` per axis.
//!
//! Axis order of a volume is `[sub-vector, vertical offset, horizontal
//! offset, row, column]`, so flattening the two offset axes gives the
//! displacement index `i * (2k+1) + j`, the same row-major (vertical outer)
//! order as [`displacement_table`].

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::spatial_subsample;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct CostVolumeSpec {
    /// Feature-map stride relative to the input image.
    pub stride: usize,
    /// Spacing between candidate correspondences, in feature cells.
    pub dilation: usize,
    /// Neighborhood radius `k`; the window is `2k + 1` wide.
    pub radius: usize,
    /// Number of sub-vectors the channel vector is split into.
    pub groups: usize,
}

impl CostVolumeSpec {
    pub const fn new(stride: usize, dilation: usize) -> Self {
        Self {
            stride,
            dilation,
            radius: 4,
            groups: 4,
        }
    }

    pub fn window(&self) -> usize {
        2 * self.radius + 1
    }

    /// Number of candidate displacements, `U * V`.
    pub fn candidates(&self) -> usize {
        self.window() * self.window()
    }

    /// Largest displacement magnitude per axis, in input pixels.
    pub fn reach(&self) -> usize {
        self.stride * self.dilation * self.radius
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::invalid(
                "CostVolumeSpec",
                "stride, dilation and group count must be >= 1",
            ));
        }
        Ok(())
    }
}

impl std::fmt::Display for CostVolumeSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "s={},d={}", self.stride, self.dilation)
    }
}

/// The seven volumes of the network, in stacking order: the fine stride-2
/// volume, then the stride-8 volumes by increasing dilation.
pub const CANONICAL_SPECS: [CostVolumeSpec; 7] = [
    CostVolumeSpec::new(2, 1),
    CostVolumeSpec::new(8, 1),
    CostVolumeSpec::new(8, 3),
    CostVolumeSpec::new(8, 5),
    CostVolumeSpec::new(8, 9),
    CostVolumeSpec::new(8, 13),
    CostVolumeSpec::new(8, 21),
];

/// Offset in feature cells of window index `i` along one axis.
pub fn displacement_grid_offset(spec: &CostVolumeSpec, i: usize) -> i64 {
    spec.dilation as i64 * (i as i64 - spec.radius as i64)
}

/// Candidate displacements `(u, v)` in input pixels, vertical index outer.
pub fn displacement_table(spec: &CostVolumeSpec) -> Vec<(i64, i64)> {
    let s = spec.stride as i64;
    let win = spec.window();
    (0..win)
        .flat_map(|i| {
            (0..win).map(move |j| {
                (
                    s * displacement_grid_offset(spec, j),
                    s * displacement_grid_offset(spec, i),
                )
            })
        })
        .collect()
}

/// Per-sub-vector cosine similarity of two equal-length vectors.
///
/// The vectors are split into `groups` contiguous sub-vectors; a sub-vector
/// pair with a zero norm yields 0.
pub fn similarity(v1: &[f64], v2: &[f64], groups: usize) -> Result<Vec<f64>> {
    if v1.len() != v2.len() {
        return Err(Error::shape(
            "similarity",
            "vector length",
            v1.len(),
            v2.len(),
        ));
    }
    if groups == 0 || !v1.len().is_multiple_of(groups) {
        return Err(Error::shape(
            "similarity",
            "vector length",
            format!("multiple of {groups}"),
            v1.len(),
        ));
    }
    let sub = v1.len() / groups;
    Ok(v1
        .chunks(sub)
        .zip(v2.chunks(sub))
        .map(|(a, b)| cosine(a, b, norm(a), norm(b)))
        .collect())
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in a {
        s += v * v;
    }
    s.sqrt()
}

#[inline]
fn cosine(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let mut dot = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
    }
    dot / (na * nb)
}

/// A single-spec cost volume, `[C, U, V, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    pub spec: CostVolumeSpec,
    pub data: Tensor,
}

/// Channel-first `[ch, h, w]` to position-major `[h * w, ch]`.
fn to_position_major(f: &Tensor) -> Vec<f64> {
    let (ch, plane) = (f.dim(0), f.dim(1) * f.dim(2));
    let mut out = vec![0.0; f.len()];
    for c in 0..ch {
        for p in 0..plane {
            out[p * ch + c] = f.data()[c * plane + p];
        }
    }
    out
}

fn from_position_major(data: &[f64], shape: &[usize]) -> Result<Tensor> {
    let (ch, plane) = (shape[0], shape[1] * shape[2]);
    let mut out = vec![0.0; data.len()];
    for p in 0..plane {
        for c in 0..ch {
            out[c * plane + p] = data[p * ch + c];
        }
    }
    Tensor::new(shape.to_vec(), out)
}

fn check_features(f1: &Tensor, f2: &Tensor, spec: &CostVolumeSpec) -> Result<()> {
    spec.validate()?;
    f1.expect_rank("build_cost_volume", "f1", 3)?;
    f2.expect_shape("build_cost_volume", "f2", f1.shape())?;
    if !f1.dim(0).is_multiple_of(spec.groups) {
        return Err(Error::shape(
            "build_cost_volume",
            "feature channels",
            format!("multiple of {}", spec.groups),
            f1.dim(0),
        ));
    }
    Ok(())
}

/// Sub-vector norms for every position, `[h * w, groups]`.
fn group_norms(pm: &[f64], ch: usize, groups: usize) -> Vec<f64> {
    let sub = ch / groups;
    pm.chunks(sub).map(norm).collect()
}

/// Target cell of window entry `(i, j)` for position `(y, x)`, if in bounds.
#[inline]
fn target(
    spec: &CostVolumeSpec,
    h: usize,
    w: usize,
    y: usize,
    x: usize,
    i: usize,
    j: usize,
) -> Option<usize> {
    let y2 = y as i64 + displacement_grid_offset(spec, i);
    let x2 = x as i64 + displacement_grid_offset(spec, j);
    (y2 >= 0 && x2 >= 0 && (y2 as usize) < h && (x2 as usize) < w)
        .then(|| y2 as usize * w + x2 as usize)
}

/// Sub-vector norms in channel-first order, `[groups, h * w]`. Squares are
/// summed channel by channel, the same order as a per-position loop.
fn plane_norms(f: &[f64], ch: usize, plane: usize, groups: usize) -> Vec<f64> {
    let sub = ch / groups;
    let mut out = vec![0.0; groups * plane];
    for (c, dst) in out.chunks_mut(plane).enumerate() {
        for k in c * sub..(c + 1) * sub {
            for (d, &v) in dst.iter_mut().zip(&f[k * plane..(k + 1) * plane]) {
                *d += v * v;
            }
        }
        dst.iter_mut().for_each(|d| *d = d.sqrt());
    }
    out
}

/// Window size handled by [`WindowRows`].
const WINDOW: usize = 9;

/// One row of `a` against every horizontally shifted row of `b`.
struct WindowRows<'a> {
    a: &'a [f64],
    b: &'a [f64],
    a0: usize,
    b0: usize,
    plane: usize,
    w: usize,
}

impl WindowRows<'_> {
    /// `acc[j * w + x] = sum_k a[k][a0 + x] * b[k][b0 + x + offsets[j]]` for
    /// `x` in `xs` (a multiple of 4 long, every shift in bounds).
    fn dot(&self, acc: &mut [f64], offsets: [i64; WINDOW], ks: Range<usize>, xs: Range<usize>) {
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx512f") {
                // SAFETY: the feature was detected at runtime.
                unsafe { self.dot_avx512(acc, offsets, ks, xs) };
                return;
            }
            if std::is_x86_feature_detected!("avx2") {
                // SAFETY: the feature was detected at runtime.
                unsafe { self.dot_avx2(acc, offsets, ks, xs) };
                return;
            }
        }
        self.dot_generic(acc, offsets, ks, xs);
    }

    /// Start of the shifted `b` segment for each offset, after checking that
    /// every load and store of `dot` stays in bounds.
    fn checked_starts(
        &self,
        acc: &[f64],
        offsets: [i64; WINDOW],
        ks: &Range<usize>,
        xs: &Range<usize>,
    ) -> [usize; WINDOW] {
        let last = (ks.end - 1) * self.plane;
        assert!(xs.end <= self.w && acc.len() >= (WINDOW - 1) * self.w + xs.end);
        assert!(last + self.a0 + xs.end <= self.a.len());
        assert!(xs.len().is_multiple_of(4));
        offsets.map(|du| {
            let st = usize::try_from(self.b0 as i64 + xs.start as i64 + du)
                .expect("shift stays in bounds");
            assert!(last + st + xs.len() <= self.b.len());
            st
        })
    }

    /// Eight lanes at a time, then a four-lane tail; same operation order
    /// per element as the other paths.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f,avx2")]
    unsafe fn dot_avx512(
        &self,
        acc: &mut [f64],
        offsets: [i64; WINDOW],
        ks: Range<usize>,
        xs: Range<usize>,
    ) {
        use std::arch::x86_64::*;
        let starts = self.checked_starts(acc, offsets, &ks, &xs);
        let a0 = self.a0 + xs.start;
        let n8 = xs.len() / 8 * 8;
        let (pa, pb) = (self.a.as_ptr(), self.b.as_ptr());
        let out = acc.as_mut_ptr().add(xs.start);
        for x in (0..n8).step_by(8) {
            let mut s = [_mm512_setzero_pd(); WINDOW];
            let ia = a0.wrapping_add(x);
            let ib = starts.map(|st| st.wrapping_add(x));
            for k in ks.clone() {
                let base = k.wrapping_mul(self.plane);
                let va = _mm512_loadu_pd(pa.add(base.wrapping_add(ia)));
                for (sj, &o) in s.iter_mut().zip(&ib) {
                    let vb = _mm512_loadu_pd(pb.add(base.wrapping_add(o)));
                    *sj = _mm512_add_pd(*sj, _mm512_mul_pd(va, vb));
                }
            }
            for (j, sj) in s.iter().enumerate() {
                _mm512_storeu_pd(out.add(j.wrapping_mul(self.w).wrapping_add(x)), *sj);
            }
        }
        if n8 < xs.len() {
            self.dot_avx2(acc, offsets, ks, xs.start + n8..xs.end);
        }
    }

    /// Separate multiply and add (no FMA) so results match the generic path.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn dot_avx2(
        &self,
        acc: &mut [f64],
        offsets: [i64; WINDOW],
        ks: Range<usize>,
        xs: Range<usize>,
    ) {
        use std::arch::x86_64::*;
        let starts = self.checked_starts(acc, offsets, &ks, &xs);
        let (a0, n) = (self.a0 + xs.start, xs.len());
        let (pa, pb) = (self.a.as_ptr(), self.b.as_ptr());
        let out = acc.as_mut_ptr().add(xs.start);
        // Wrapping index arithmetic: bounds were asserted above, and checked
        // adds in this loop cost more than the loads.
        for x in (0..n).step_by(4) {
            let mut s = [_mm256_setzero_pd(); WINDOW];
            let ia = a0.wrapping_add(x);
            let ib = starts.map(|st| st.wrapping_add(x));
            for k in ks.clone() {
                let base = k.wrapping_mul(self.plane);
                let va = _mm256_loadu_pd(pa.add(base.wrapping_add(ia)));
                for (sj, &o) in s.iter_mut().zip(&ib) {
                    let vb = _mm256_loadu_pd(pb.add(base.wrapping_add(o)));
                    *sj = _mm256_add_pd(*sj, _mm256_mul_pd(va, vb));
                }
            }
            for (j, sj) in s.iter().enumerate() {
                _mm256_storeu_pd(out.add(j.wrapping_mul(self.w).wrapping_add(x)), *sj);
            }
        }
    }

    #[inline(always)]
    fn dot_generic(
        &self,
        acc: &mut [f64],
        offsets: [i64; WINDOW],
        ks: Range<usize>,
        xs: Range<usize>,
    ) {
        // Start of the shifted `b` segment for each offset; `x` runs from 0.
        let starts = offsets
            .map(|du| usize::try_from(self.b0 as i64 + xs.start as i64 + du))
            .map(|st| st.expect("shift stays in bounds"));
        let a0 = self.a0 + xs.start;
        for x in (0..xs.len()).step_by(4) {
            let mut s = [[0.0f64; 4]; WINDOW];
            for k in ks.clone() {
                let base = k * self.plane;
                let pa: &[f64; 4] = self.a[base + a0 + x..][..4].try_into().unwrap();
                for (sj, &st) in s.iter_mut().zip(&starts) {
                    let pb: &[f64; 4] = self.b[base + st + x..][..4].try_into().unwrap();
                    for t in 0..4 {
                        sj[t] += pa[t] * pb[t];
                    }
                }
            }
            for (j, sj) in s.iter().enumerate() {
                acc[j * self.w + xs.start + x..][..4].copy_from_slice(sj);
            }
        }
    }
}

/// Same-length row segments of two channel-first maps.
struct RowPair<'a> {
    a: &'a [f64],
    b: &'a [f64],
    a0: usize,
    b0: usize,
    plane: usize,
}

impl RowPair<'_> {
    /// `acc[x] = sum_k a[k][a0 + x] * b[k][b0 + x]`, summed in channel order.
    fn dot(&self, acc: &mut [f64], ks: Range<usize>) {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { self.dot_avx2(acc, ks) };
            return;
        }
        self.dot_generic(acc, ks);
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn dot_avx2(&self, acc: &mut [f64], ks: Range<usize>) {
        self.dot_generic(acc, ks);
    }

    #[inline(always)]
    fn dot_generic(&self, acc: &mut [f64], ks: Range<usize>) {
        let n = acc.len();
        let (a, b, plane) = (self.a, self.b, self.plane);
        let row_a = |k: usize| &a[k * plane + self.a0..][..n];
        let row_b = |k: usize| &b[k * plane + self.b0..][..n];
        acc.fill(0.0);
        let mut k = ks.start;
        // Eight channels per pass keeps the accumulator out of memory; the
        // additions stay left to right so the result is unchanged.
        while k + 8 <= ks.end {
            let (p0, p1, p2, p3) = (row_a(k), row_a(k + 1), row_a(k + 2), row_a(k + 3));
            let (p4, p5, p6, p7) = (row_a(k + 4), row_a(k + 5), row_a(k + 6), row_a(k + 7));
            let (q0, q1, q2, q3) = (row_b(k), row_b(k + 1), row_b(k + 2), row_b(k + 3));
            let (q4, q5, q6, q7) = (row_b(k + 4), row_b(k + 5), row_b(k + 6), row_b(k + 7));
            for x in 0..n {
                acc[x] = acc[x]
                    + p0[x] * q0[x]
                    + p1[x] * q1[x]
                    + p2[x] * q2[x]
                    + p3[x] * q3[x]
                    + p4[x] * q4[x]
                    + p5[x] * q5[x]
                    + p6[x] * q6[x]
                    + p7[x] * q7[x];
            }
            k += 8;
        }
        for k in k..ks.end {
            for ((s, &p), &q) in acc.iter_mut().zip(row_a(k)).zip(row_b(k)) {
                *s += p * q;
            }
        }
    }
}

/// Valid `[lo, hi)` range of `t` in `0..n` such that `t + off` is in bounds.
#[inline]
fn overlap(n: usize, off: i64) -> (usize, usize) {
    let lo = (-off).clamp(0, n as i64) as usize;
    let hi = (n as i64 - off).clamp(0, n as i64) as usize;
    (lo, hi.max(lo))
}

/// Builds the cost volume of `f1` against `f2` (both `[ch, h, w]`).
/// Out-of-bounds candidates are exactly 0.
///
/// Work is split by `(sub-vector, vertical offset)`; within a block the dot
/// products of a whole row segment are accumulated together, channel by
/// channel, so each output still sums its terms in channel order.
pub fn build_cost_volume(f1: &Tensor, f2: &Tensor, spec: &CostVolumeSpec) -> Result<CostVolume> {
    check_features(f1, f2, spec)?;
    let (ch, h, w) = (f1.dim(0), f1.dim(1), f1.dim(2));
    let groups = spec.groups;
    let sub = ch / groups;
    let win = spec.window();
    let plane = h * w;
    let (a, b) = (f1.data(), f2.data());
    let na = plane_norms(a, ch, plane, groups);
    let nb = plane_norms(b, ch, plane, groups);

    let mut out = vec![0.0; groups * win * win * plane];
    out.par_chunks_mut(win * plane)
        .enumerate()
        .for_each(|(block, dst)| {
            let (c, i) = (block / win, block % win);
            let dv = displacement_grid_offset(spec, i);
            let (y_lo, y_hi) = overlap(h, dv);
            let mut acc = vec![0.0; win * w];
            let ks = c * sub..(c + 1) * sub;
            // Columns whose whole window is in bounds are done for all
            // horizontal offsets at once, four at a time.
            let reach = (spec.dilation * spec.radius).min(w);
            let (f_lo, f_hi) = if win == WINDOW && w > 2 * reach {
                (reach, reach + (w - 2 * reach) / 4 * 4)
            } else {
                (0, 0)
            };
            let offsets: Vec<i64> = (0..win)
                .map(|j| displacement_grid_offset(spec, j))
                .collect();
            for y in y_lo..y_hi {
                let y2 = (y as i64 + dv) as usize;
                if f_hi > f_lo {
                    let rows = WindowRows {
                        a,
                        b,
                        a0: y * w,
                        b0: y2 * w,
                        plane,
                        w,
                    };
                    rows.dot(
                        &mut acc,
                        offsets[..].try_into().unwrap(),
                        ks.clone(),
                        f_lo..f_hi,
                    );
                }
                for (j, &du) in offsets.iter().enumerate() {
                    let (x_lo, x_hi) = overlap(w, du);
                    if x_hi == x_lo {
                        continue;
                    }
                    let pieces = [(x_lo, x_hi.min(f_lo)), (x_lo.max(f_hi), x_hi)];
                    for (lo, hi) in pieces.into_iter().filter(|(lo, hi)| lo < hi) {
                        let x2 = (lo as i64 + du) as usize;
                        let rows = RowPair {
                            a,
                            b,
                            a0: y * w + lo,
                            b0: y2 * w + x2,
                            plane,
                        };
                        rows.dot(&mut acc[j * w + lo..j * w + hi], ks.clone());
                    }
                    let n = x_hi - x_lo;
                    let x2 = (x_lo as i64 + du) as usize;
                    let n1 = &na[c * plane + y * w + x_lo..][..n];
                    let n2 = &nb[c * plane + y2 * w + x2..][..n];
                    let dots = &acc[j * w + x_lo..][..n];
                    let row = &mut dst[j * plane + y * w + x_lo..][..n];
                    for (((r, &d), &p), &q) in row.iter_mut().zip(dots).zip(n1).zip(n2) {
                        *r = if p == 0.0 || q == 0.0 {
                            0.0
                        } else {
                            d / (p * q)
                        };
                    }
                }
            }
        });
    Ok(CostVolume {
        spec: *spec,
        data: Tensor::new(vec![groups, win, win, h, w], out)?,
    })
}

/// Gradients of [`build_cost_volume`] w.r.t. both feature maps, given the
/// forward volume and an upstream gradient of the same shape.
///
/// For `c = <a, b> / (|a| |b|)`: `dc/da = (b / |b| - c a / |a|) / |a|`.
pub fn cost_volume_backward(
    f1: &Tensor,
    f2: &Tensor,
    spec: &CostVolumeSpec,
    volume: &Tensor,
    grad: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_features(f1, f2, spec)?;
    grad.expect_shape("cost_volume_backward", "upstream gradient", volume.shape())?;
    let (ch, h, w) = (f1.dim(0), f1.dim(1), f1.dim(2));
    let groups = spec.groups;
    let sub = ch / groups;
    let win = spec.window();
    let n_cand = spec.candidates();
    let plane = h * w;
    let a = to_position_major(f1);
    let b = to_position_major(f2);
    let na = group_norms(&a, ch, groups);
    let nb = group_norms(&b, ch, groups);
    let at = |c: usize, n: usize, p: usize| (c * n_cand + n) * plane + p;
    let (vol, g) = (volume.data(), grad.data());

    // d f1 at p gathers over its own candidates.
    let da: Vec<f64> = (0..plane)
        .into_par_iter()
        .flat_map_iter(|p| {
            let (y, x) = (p / w, p % w);
            let mut acc = vec![0.0; ch];
            for i in 0..win {
                for j in 0..win {
                    let Some(q) = target(spec, h, w, y, x, i, j) else {
                        continue;
                    };
                    let n = i * win + j;
                    for c in 0..groups {
                        let (n1, n2) = (na[p * groups + c], nb[q * groups + c]);
                        if n1 == 0.0 || n2 == 0.0 {
                            continue;
                        }
                        let gv = g[at(c, n, p)];
                        let (wb, wa) = (gv / (n1 * n2), gv * vol[at(c, n, p)] / (n1 * n1));
                        let r = c * sub..(c + 1) * sub;
                        let (va, vb) = (&a[p * ch..][r.clone()], &b[q * ch..][r.clone()]);
                        for ((d, x1), x2) in acc[r].iter_mut().zip(va).zip(vb) {
                            *d += wb * x2 - wa * x1;
                        }
                    }
                }
            }
            acc
        })
        .collect();

    // d f2 at q gathers over every p whose candidate lands on q.
    let db: Vec<f64> = (0..plane)
        .into_par_iter()
        .flat_map_iter(|q| {
            let (y2, x2) = (q / w, q % w);
            let mut acc = vec![0.0; ch];
            for i in 0..win {
                for j in 0..win {
                    let y = y2 as i64 - displacement_grid_offset(spec, i);
                    let x = x2 as i64 - displacement_grid_offset(spec, j);
                    if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                        continue;
                    }
                    let p = y as usize * w + x as usize;
                    let n = i * win + j;
                    for c in 0..groups {
                        let (n1, n2) = (na[p * groups + c], nb[q * groups + c]);
                        if n1 == 0.0 || n2 == 0.0 {
                            continue;
                        }
                        let gv = g[at(c, n, p)];
                        let (wa, wb) = (gv / (n1 * n2), gv * vol[at(c, n, p)] / (n2 * n2));
                        let r = c * sub..(c + 1) * sub;
                        let (va, vb) = (&a[p * ch..][r.clone()], &b[q * ch..][r.clone()]);
                        for ((d, x1), x2) in acc[r].iter_mut().zip(va).zip(vb) {
                            *d += wa * x1 - wb * x2;
                        }
                    }
                }
            }
            acc
        })
        .collect();

    Ok((
        from_position_major(&da, f1.shape())?,
        from_position_major(&db, f2.shape())?,
    ))
}

/// The concatenated multi-dilation volume fed to the 3D U-Net,
/// `[D * C, U * V, H/8, W/8]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolumeStack {
    pub data: Tensor,
    pub specs: Vec<CostVolumeSpec>,
}

/// Spatial subsampling factor taking a stride-`s` volume to stride 8.
pub fn subsample_factor(spec: &CostVolumeSpec) -> usize {
    8 / spec.stride
}

pub(crate) fn check_canonical_order(specs: &[CostVolumeSpec]) -> Result<()> {
    if specs != CANONICAL_SPECS {
        let names: Vec<String> = CANONICAL_SPECS.iter().map(|s| s.to_string()).collect();
        let got: Vec<String> = specs.iter().map(|s| s.to_string()).collect();
        return Err(Error::invalid(
            "assemble_stack",
            format!(
                "expected specs [{}] in order, got [{}]",
                names.join(", "),
                got.join(", ")
            ),
        ));
    }
    Ok(())
}

/// Subsamples the stride-2 volume by 4, flattens every volume's offset axes
/// into `D' = U * V` and concatenates along channels in canonical order.
pub fn assemble_stack(volumes: &[CostVolume]) -> Result<CostVolumeStack> {
    let specs: Vec<CostVolumeSpec> = volumes.iter().map(|v| v.spec).collect();
    check_canonical_order(&specs)?;
    let mut parts = Vec::with_capacity(volumes.len());
    for v in volumes {
        let s = v.data.shape();
        let flat = v.data.clone().reshape(&[s[0], s[1] * s[2], s[3], s[4]])?;
        parts.push(spatial_subsample(&flat, subsample_factor(&v.spec))?);
    }
    let first = parts[0].shape().to_vec();
    for (k, p) in parts.iter().enumerate().skip(1) {
        if p.shape()[1..] != first[1..] {
            return Err(Error::shape(
                "assemble_stack",
                format!("volume {} ({}) after subsampling", k, specs[k]),
                format!("{:?}", &first[1..]),
                format!("{:?}", &p.shape()[1..]),
            ));
        }
    }
    let channels: usize = parts.iter().map(|p| p.dim(0)).sum();
    let mut data = Vec::with_capacity(channels * first[1] * first[2] * first[3]);
    for p in &parts {
        data.extend_from_slice(p.data());
    }
    Ok(CostVolumeStack {
        data: Tensor::new(vec![channels, first[1], first[2], first[3]], data)?,
        specs,
    })
}

/// Non-learned features for inspecting volumes without a trained encoder:
/// every `stride x stride` pixel block of a `3 x H x W` image becomes one
/// `3 * stride^2` vector, centered and L2-normalized.
pub fn patch_features(image: &Tensor, stride: usize) -> Result<Tensor> {
    image.expect_rank("patch_features", "image", 3)?;
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::shape(
            "patch_features",
            "image extent",
            format!("multiple of {stride}"),
            format!("{h}x{w}"),
        ));
    }
    let (fh, fw) = (h / stride, w / stride);
    let ch = c * stride * stride;
    let mut out = Tensor::zeros(&[ch, fh, fw]);
    let mut v = vec![0.0; ch];
    for y in 0..fh {
        for x in 0..fw {
            let mut k = 0;
            for cc in 0..c {
                for dy in 0..stride {
                    for dx in 0..stride {
                        v[k] = image.at(&[cc, y * stride + dy, x * stride + dx]);
                        k += 1;
                    }
                }
            }
            let mean = v.iter().sum::<f64>() / ch as f64;
            v.iter_mut().for_each(|e| *e -= mean);
            let n = norm(&v);
            for (k, e) in v.iter().enumerate() {
                out.set(&[k, y, x], if n > 0.0 { e / n } else { 0.0 });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_kernel_paths_agree() {
        let (ch, h, w) = (5, 3, 40);
        let a: Vec<f64> = (0..ch * h * w)
            .map(|i| ((i * 37) % 101) as f64 / 50.0 - 1.0)
            .collect();
        let b: Vec<f64> = (0..ch * h * w)
            .map(|i| ((i * 53) % 97) as f64 / 48.0 - 1.0)
            .collect();
        let rows = WindowRows {
            a: &a,
            b: &b,
            a0: w,
            b0: 0,
            plane: h * w,
            w,
        };
        let offsets: [i64; WINDOW] = std::array::from_fn(|j| 2 * (j as i64 - 4));
        let mut fast = vec![0.0; WINDOW * w];
        let mut plain = vec![0.0; WINDOW * w];
        rows.dot(&mut fast, offsets, 1..ch, 8..36);
        rows.dot_generic(&mut plain, offsets, 1..ch, 8..36);
        assert_eq!(fast, plain);
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            let mut narrow = vec![0.0; WINDOW * w];
            // SAFETY: the feature was detected at runtime.
            unsafe { rows.dot_avx2(&mut narrow, offsets, 1..ch, 8..36) };
            assert_eq!(narrow, plain);
        }
        let (j, x) = (2, 12);
        let want = (1..ch).fold(0.0, |s, k| {
            s + a[k * h * w + w + x] * b[k * h * w + (x as i64 + offsets[j]) as usize]
        });
        assert_eq!(plain[j * w + x], want);
    }

    #[test]
    fn degenerate_radius_has_one_candidate() {
        let spec = CostVolumeSpec {
            stride: 1,
            dilation: 1,
            radius: 0,
            groups: 1,
        };
        assert_eq!(displacement_table(&spec), vec![(0, 0)]);
    }

    #[test]
    fn table_is_vertical_outer() {
        let t = displacement_table(&CostVolumeSpec::new(8, 1));
        assert_eq!(t[0], (-32, -32));
        assert_eq!(t[1], (-24, -32));
        assert_eq!(t[9], (-32, -24));
        assert_eq!(t[40], (0, 0));
        assert_eq!(t.len(), 81);
    }

    #[test]
    fn similarity_cases() {
        let v: Vec<f64> = (1..=8).map(|i| i as f64 * 0.7 - 2.0).collect();
        let s = similarity(&v, &v, 4).unwrap();
        for x in s {
            assert!((x - 1.0).abs() < 1e-15);
        }
        let a = [1.0, 0.0, 0.0, 2.0];
        let b = [0.0, 3.0, 1.0, 0.0];
        assert_eq!(similarity(&a, &b, 2).unwrap(), vec![0.0, 0.0]);
        assert_eq!(similarity(&[0.0; 4], &b, 2).unwrap(), vec![0.0, 0.0]);
        assert!(similarity(&[1.0; 6], &[1.0; 6], 4).is_err());
    }

    #[test]
    fn out_of_bounds_is_zero() {
        let f = Tensor::full(&[4, 3, 3], 0.5);
        let cv = build_cost_volume(&f, &f, &CostVolumeSpec::new(8, 1)).unwrap();
        // Offset (-4, -4) cells from (0, 0) is outside.
        for c in 0..4 {
            assert_eq!(cv.data.at(&[c, 0, 0, 0, 0]), 0.0);
            assert_eq!(cv.data.at(&[c, 4, 4, 0, 0]), 1.0);
        }
    }

    #[test]
    fn wrong_spec_order_is_rejected() {
        let v = CostVolume {
            spec: CostVolumeSpec::new(8, 1),
            data: Tensor::zeros(&[4, 9, 9, 1, 1]),
        };
        let err = assemble_stack(&[v]).unwrap_err();
        assert!(err.to_string().contains("s=2,d=1"));
    }
}
