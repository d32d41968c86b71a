//! Random binary patterns: the projector image is cut into `cell x cell`
//! squares and each square is independently black or white.
//!
//! Cell values come from SplitMix64 used as a counter-based generator, so a
//! pattern is a pure function of `(seed, cell coordinates)` and regenerates
//! bit-identically on any platform:
//!
//! ```text
//! counter = (cell_row << 32) | cell_col
//! z       = seed + (counter + 1) * 0x9E3779B97F4A7C15      (wrapping)
//! z       = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z       = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! z       =  z ^ (z >> 31)
//! value   = z >> 63
//! ```

use crate::error::{invalid, Result};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Cell sizes (px) of the default pattern family, coarse to fine.
pub const CELL_SIZES: [usize; 3] = [20, 10, 5];

/// Order in which patterns are dropped from the nine-pattern set when fewer
/// patterns are requested.
pub const REMOVAL_ORDER: [usize; 7] = [20, 10, 5, 20, 10, 5, 20];

#[inline]
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn cell_value(seed: u64, cell_row: usize, cell_col: usize) -> bool {
    let counter = ((cell_row as u64) << 32) | cell_col as u64;
    let z = seed.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA));
    splitmix64(z) >> 63 == 1
}

/// A projected pattern with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
    /// Generating square size (px); 0 for patterns not produced here.
    pub cell: usize,
    pub seed: u64,
}

impl Pattern {
    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return invalid(format!(
                "pattern data of length {} does not match {width}x{height}",
                data.len()
            ));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return invalid("pattern values must lie in [0, 1]");
        }
        Ok(Self {
            width,
            height,
            data,
            cell: 0,
            seed: 0,
        })
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
            cell: 0,
            seed: 0,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// half-integers). Outside `[0, width) x [0, height)` the projector emits
    /// nothing and the value is 0.
    pub fn sample(&self, u: f64, v: f64) -> f64 {
        self.sample_with_grad(u, v).0
    }

    /// Bilinear value and its derivatives along `u` and `v`.
    pub fn sample_with_grad(&self, u: f64, v: f64) -> (f64, f64, f64) {
        let Some(q) = BilinearQuad::locate(u, v, self.width, self.height) else {
            return (0.0, 0.0, 0.0);
        };
        let p = |r: usize, c: usize| self.get(r, c) as f64;
        let (p00, p01, p10, p11) = (p(q.r0, q.c0), p(q.r0, q.c1), p(q.r1, q.c0), p(q.r1, q.c1));
        q.combine(p00, p01, p10, p11)
    }

    /// Separable Gaussian blur with the given standard deviation (px),
    /// truncated at three sigma and clamped at the borders.
    pub fn blurred(&self, sigma: f64) -> Pattern {
        if !(sigma > 0.0) {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        let (w, h) = (self.width as isize, self.height as isize);
        let mut tmp = vec![0f32; self.data.len()];
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let cc = (c + k as isize - radius).clamp(0, w - 1);
                    acc += kv * self.data[(r * w + cc) as usize] as f64;
                }
                tmp[(r * w + c) as usize] = (acc / norm) as f32;
            }
        }
        let mut out = vec![0f32; self.data.len()];
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let rr = (r + k as isize - radius).clamp(0, h - 1);
                    acc += kv * tmp[(rr * w + c) as usize] as f64;
                }
                out[(r * w + c) as usize] = ((acc / norm) as f32).clamp(0.0, 1.0);
            }
        }
        Pattern {
            data: out,
            ..self.clone()
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// The four texels around a continuous coordinate and the blend factors.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BilinearQuad {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
    pub tu: f64,
    pub tv: f64,
    /// Whether `u` / `v` moved the sample (false where clamped at a border).
    pub du_live: bool,
    pub dv_live: bool,
}

impl BilinearQuad {
    #[inline]
    pub fn locate(u: f64, v: f64, width: usize, height: usize) -> Option<Self> {
        if !(u >= 0.0 && u < width as f64 && v >= 0.0 && v < height as f64) {
            return None;
        }
        let (c0, c1, tu, du_live) = axis(u - 0.5, width);
        let (r0, r1, tv, dv_live) = axis(v - 0.5, height);
        Some(Self {
            r0,
            r1,
            c0,
            c1,
            tu,
            tv,
            du_live,
            dv_live,
        })
    }

    /// `p_rc` are the texels at (r0|r1, c0|c1). Returns (value, d/du, d/dv).
    #[inline]
    pub fn combine(&self, p00: f64, p01: f64, p10: f64, p11: f64) -> (f64, f64, f64) {
        let (tu, tv) = (self.tu, self.tv);
        let top = p00 + (p01 - p00) * tu;
        let bottom = p10 + (p11 - p10) * tu;
        let value = top + (bottom - top) * tv;
        let du = if self.du_live {
            (1.0 - tv) * (p01 - p00) + tv * (p11 - p10)
        } else {
            0.0
        };
        let dv = if self.dv_live { bottom - top } else { 0.0 };
        (value, du, dv)
    }
}

#[inline]
fn axis(f: f64, n: usize) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let max = (n - 1) as f64;
    if f <= 0.0 {
        (0, 1, 0.0, false)
    } else if f >= max {
        (n - 2, n - 1, 1.0, false)
    } else {
        let i0 = (f as usize).min(n - 2);
        (i0, i0 + 1, f - i0 as f64, true)
    }
}

/// One random binary pattern of `width x height` with `cell x cell` squares;
/// squares at the right and bottom edges are truncated.
pub fn random_binary_pattern(width: usize, height: usize, cell: usize, seed: u64) -> Result<Pattern> {
    if cell == 0 {
        return invalid("cell size must be at least 1");
    }
    if width < cell || height < cell {
        return invalid(format!(
            "pattern {width}x{height} is smaller than one {cell}px cell"
        ));
    }
    let mut data = vec![0f32; width * height];
    for (row, line) in data.chunks_exact_mut(width).enumerate() {
        let cr = row / cell;
        for (col, px) in line.iter_mut().enumerate() {
            if cell_value(seed, cr, col / cell) {
                *px = 1.0;
            }
        }
    }
    Ok(Pattern {
        width,
        height,
        data,
        cell,
        seed,
    })
}

/// Seed of replicate `replicate` at scale index `scale` (0 = 20 px).
pub fn pattern_seed(master: u64, scale: usize, replicate: usize) -> u64 {
    master.wrapping_add((3 * scale + replicate) as u64)
}

fn pattern_family(width: usize, height: usize, master: u64, per_scale: usize) -> Result<Vec<Pattern>> {
    let mut out = Vec::with_capacity(per_scale * CELL_SIZES.len());
    for (scale, &cell) in CELL_SIZES.iter().enumerate() {
        for rep in 0..per_scale {
            out.push(random_binary_pattern(width, height, cell, pattern_seed(master, scale, rep))?);
        }
    }
    Ok(out)
}

/// Six patterns, two per cell size, ordered (20, 20, 10, 10, 5, 5).
pub fn default_pattern_set(width: usize, height: usize, master: u64) -> Result<Vec<Pattern>> {
    pattern_family(width, height, master, 2)
}

/// Nine patterns, three per cell size. Its first two replicates per scale
/// are exactly [`default_pattern_set`].
pub fn extended_pattern_set(width: usize, height: usize, master: u64) -> Result<Vec<Pattern>> {
    pattern_family(width, height, master, 3)
}

/// Reduces the nine-pattern set to `count` patterns by dropping, in
/// [`REMOVAL_ORDER`], the last remaining pattern of the named cell size.
pub fn pattern_subset(extended: &[Pattern], count: usize) -> Result<Vec<Pattern>> {
    if extended.len() != 9 {
        return invalid("pattern_subset expects the nine-pattern set");
    }
    if !(2..=9).contains(&count) {
        return invalid(format!("pattern count must be in 2..=9, got {count}"));
    }
    let mut keep: Vec<Pattern> = extended.to_vec();
    for &cell in REMOVAL_ORDER.iter().take(9 - count) {
        let pos = keep
            .iter()
            .rposition(|p| p.cell == cell)
            .expect("removal order never exhausts a scale");
        keep.remove(pos);
    }
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn splitmix_reference_value() {
        // First output of SplitMix64 seeded with 0.
        assert_eq!(splitmix64(GOLDEN_GAMMA), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn single_cell_pattern_is_constant() {
        for seed in 0..8 {
            let p = random_binary_pattern(16, 16, 16, seed).unwrap();
            let v = p.data[0];
            assert!(v == 0.0 || v == 1.0);
            assert!(p.data.iter().all(|&x| x == v));
        }
    }

    #[test]
    fn cells_are_constant_blocks() {
        let p = random_binary_pattern(140, 151, 20, 42).unwrap();
        for r in 0..p.height {
            for c in 0..p.width {
                assert_eq!(p.get(r, c), p.get(20 * (r / 20), 20 * (c / 20)));
                assert!(p.get(r, c) == 0.0 || p.get(r, c) == 1.0);
            }
        }
    }

    #[test]
    fn seeds_are_reproducible_and_distinct() {
        let a = random_binary_pattern(200, 100, 10, 5).unwrap();
        assert_eq!(a, random_binary_pattern(200, 100, 10, 5).unwrap());
        for seed in 6..16 {
            assert_ne!(a.data, random_binary_pattern(200, 100, 10, seed).unwrap().data);
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(random_binary_pattern(10, 10, 0, 1).is_err());
        assert!(random_binary_pattern(4, 10, 5, 1).is_err());
    }

    #[test]
    fn default_and_extended_sets() {
        let set = default_pattern_set(400, 300, 77).unwrap();
        assert_eq!(set.iter().map(|p| p.cell).collect::<Vec<_>>(), vec![20, 20, 10, 10, 5, 5]);
        let ext = extended_pattern_set(400, 300, 77).unwrap();
        assert_eq!(ext.len(), 9);
        assert_eq!(ext.iter().map(|p| p.cell).collect::<Vec<_>>(), vec![20, 20, 20, 10, 10, 10, 5, 5, 5]);
        assert_eq!(pattern_subset(&ext, 6).unwrap(), set);
        let mut seeds: Vec<u64> = ext.iter().map(|p| p.seed).collect();
        seeds.dedup();
        assert_eq!(seeds.len(), 9);
    }

    #[test]
    fn subset_follows_removal_order() {
        let ext = extended_pattern_set(60, 60, 1).unwrap();
        let cells = |n: usize| {
            let s = pattern_subset(&ext, n).unwrap();
            let count = |c: usize| s.iter().filter(|p| p.cell == c).count();
            (count(20), count(10), count(5))
        };
        assert_eq!(cells(9), (3, 3, 3));
        assert_eq!(cells(8), (2, 3, 3));
        assert_eq!(cells(6), (2, 2, 2));
        assert_eq!(cells(4), (1, 1, 2));
        assert_eq!(cells(2), (0, 1, 1));
        assert!(pattern_subset(&ext, 1).is_err());
    }

    #[test]
    fn pattern_means_concentrate_near_half() {
        // 1400x1512 at 20 px has 70 * 76 = 5320 cells: a 0.05 deviation is
        // more than 7 standard deviations of the binomial mean.
        for p in default_pattern_set(1400, 1512, 2024).unwrap() {
            let m = p.mean();
            assert!((0.45..=0.55).contains(&m), "cell {} mean {m}", p.cell);
        }
    }

    #[test]
    fn bilinear_edge_between_black_and_white() {
        let mut p = Pattern::constant(4, 2, 0.0);
        for r in 0..2 {
            p.data[r * 4 + 2] = 1.0;
            p.data[r * 4 + 3] = 1.0;
        }
        // the shared edge of texels 1 and 2 sits at u = 2
        assert_relative_eq!(p.sample(2.0, 1.0), 0.5, epsilon = 1e-15);
        assert_eq!(p.sample(1.5, 1.0), 0.0);
        assert_eq!(p.sample(2.5, 1.0), 1.0);
        assert_eq!(p.sample(-0.1, 1.0), 0.0);
        assert_eq!(p.sample(4.0, 1.0), 0.0);
    }

    #[test]
    fn bilinear_gradient_is_piecewise_constant() {
        let p = random_binary_pattern(30, 30, 3, 9).unwrap().blurred(1.5);
        for &(u, v) in &[(5.7, 8.2), (12.1, 3.9), (20.55, 20.45)] {
            let (_, du, dv) = p.sample_with_grad(u, v);
            let h = 1e-3;
            let fd_u = (p.sample(u + h, v) - p.sample(u - h, v)) / (2.0 * h);
            let fd_v = (p.sample(u, v + h) - p.sample(u, v - h)) / (2.0 * h);
            assert!((fd_u - du).abs() < 1e-6);
            assert!((fd_v - dv).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_keeps_range_and_is_identity_at_zero() {
        let p = random_binary_pattern(40, 30, 5, 3).unwrap();
        assert_eq!(p.blurred(0.0), p);
        let b = p.blurred(2.0);
        assert!(b.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(b.data.iter().any(|&v| v > 0.0 && v < 1.0));
    }

    proptest! {
        #[test]
        fn bilinear_is_continuous(u in 0.6f64..28.4, v in 0.6f64..28.4, seed in 0u64..50) {
            let p = random_binary_pattern(30, 30, 2, seed).unwrap();
            let eps = 1e-9;
            prop_assert!((p.sample(u + eps, v) - p.sample(u, v)).abs() < 1e-8);
            prop_assert!((p.sample(u, v + eps) - p.sample(u, v)).abs() < 1e-8);
        }

        #[test]
        fn slope_is_constant_inside_a_quad(cu in 1usize..28, cv in 1usize..28, a in 0.05f64..0.45, b in 0.55f64..0.95, seed in 0u64..50) {
            let p = random_binary_pattern(30, 30, 2, seed).unwrap();
            let v = cv as f64 + 0.5 + 0.3;
            let h = 1e-4;
            let slope = |t: f64| {
                let u = cu as f64 + 0.5 + t;
                (p.sample(u + h, v) - p.sample(u - h, v)) / (2.0 * h)
            };
            prop_assert!((slope(a) - slope(b)).abs() < 1e-6);
        }
    }
}
