//! Forward rendering: NDC ray sampling, pattern colors, radiometric maps and
//! alpha compositing.
//!
//! A sample's color is not learned. It is read from the projected pattern at
//! the sample's re-projection and mapped through the pixel's background level
//! `B` and fringe contrast `F`: `c = B + F * P(pi(x))`.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::geometry::{CameraModel, NdcFrame, PatternPoint, ProjectorModel, Ray, Vec3};
use crate::grid::DensityGrid;
use crate::patterns::{BilinearQuad, Pattern};
use crate::raster::{Image, Mask};

/// Contrast below which a pixel is treated as unlit / occluded.
pub const DEFAULT_F_MIN: f64 = 0.02;

/// Per-pixel background level and fringe contrast derived from the captures.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelStats {
    pub width: usize,
    pub height: usize,
    pub background: Vec<f64>,
    pub contrast: Vec<f64>,
    pub valid: Mask,
}

impl PixelStats {
    #[inline]
    pub fn at(&self, idx: usize) -> (f64, f64) {
        (self.background[idx], self.contrast[idx])
    }

    pub fn background_image(&self) -> Image {
        Image::new(self.width, self.height, self.background.clone()).unwrap()
    }

    pub fn contrast_image(&self) -> Image {
        Image::new(self.width, self.height, self.contrast.clone()).unwrap()
    }
}

/// `B = min_j I_j`, `F = max_j I_j - B`, valid where `F >= f_min`.
pub fn compute_background_and_contrast(captures: &[Image], f_min: f64) -> Result<PixelStats> {
    if captures.len() < 2 {
        return invalid(format!("need at least 2 captures, got {}", captures.len()));
    }
    let (w, h) = captures[0].dims();
    if captures.iter().any(|c| c.dims() != (w, h)) {
        return invalid("captures have mismatched dimensions");
    }
    let n = w * h;
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for c in captures {
        for ((l, u), &v) in lo.iter_mut().zip(hi.iter_mut()).zip(&c.data) {
            *l = l.min(v);
            *u = u.max(v);
        }
    }
    let contrast: Vec<f64> = hi.iter().zip(&lo).map(|(u, l)| u - l).collect();
    let valid = Mask {
        width: w,
        height: h,
        data: contrast.iter().map(|&f| f >= f_min).collect(),
    };
    Ok(PixelStats {
        width: w,
        height: h,
        background: lo,
        contrast,
        valid,
    })
}

/// Patterns interleaved per texel so that one lookup reads all `n` values of a
/// texel from adjacent memory.
#[derive(Debug, Clone)]
pub struct PatternStack {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    data: Vec<f32>,
}

impl PatternStack {
    pub fn new(patterns: &[Pattern]) -> Result<Self> {
        Self::with_blur(patterns, 0.0)
    }

    /// Optionally pre-blurs each pattern with a Gaussian of `blur_sigma` px.
    pub fn with_blur(patterns: &[Pattern], blur_sigma: f64) -> Result<Self> {
        let Some(first) = patterns.first() else {
            return invalid("empty pattern set");
        };
        let (w, h, n) = (first.width, first.height, patterns.len());
        if patterns.iter().any(|p| p.width != w || p.height != h) {
            return invalid("patterns have mismatched dimensions");
        }
        let blurred: Vec<Pattern>;
        let source: &[Pattern] = if blur_sigma > 0.0 {
            blurred = patterns.iter().map(|p| p.blurred(blur_sigma)).collect();
            &blurred
        } else {
            patterns
        };
        let mut data = vec![0f32; w * h * n];
        for (j, p) in source.iter().enumerate() {
            for (i, &v) in p.data.iter().enumerate() {
                data[i * n + j] = v;
            }
        }
        Ok(Self {
            width: w,
            height: h,
            count: n,
            data,
        })
    }

    #[inline]
    fn texel(&self, row: usize, col: usize) -> &[f32] {
        let o = (row * self.width + col) * self.count;
        &self.data[o..o + self.count]
    }

    /// Bilinear values of every pattern at `(u, v)`. Returns `false` (and
    /// zeros) outside the pattern.
    #[inline]
    pub fn sample(&self, u: f64, v: f64, out: &mut [f64]) -> bool {
        let Some(q) = BilinearQuad::locate(u, v, self.width, self.height) else {
            out.fill(0.0);
            return false;
        };
        let (a, b, c, d) = (
            self.texel(q.r0, q.c0),
            self.texel(q.r0, q.c1),
            self.texel(q.r1, q.c0),
            self.texel(q.r1, q.c1),
        );
        let (tu, tv) = (q.tu, q.tv);
        for j in 0..self.count {
            let top = a[j] as f64 + (b[j] - a[j]) as f64 * tu;
            let bottom = c[j] as f64 + (d[j] - c[j]) as f64 * tu;
            out[j] = top + (bottom - top) * tv;
        }
        true
    }

    /// Values and `(d/du, d/dv)` of every pattern at `(u, v)`.
    pub fn sample_with_grad(&self, u: f64, v: f64, val: &mut [f64], du: &mut [f64], dv: &mut [f64]) -> bool {
        let Some(q) = BilinearQuad::locate(u, v, self.width, self.height) else {
            val.fill(0.0);
            du.fill(0.0);
            dv.fill(0.0);
            return false;
        };
        let (a, b, c, d) = (
            self.texel(q.r0, q.c0),
            self.texel(q.r0, q.c1),
            self.texel(q.r1, q.c0),
            self.texel(q.r1, q.c1),
        );
        for j in 0..self.count {
            let (v0, gu, gv) = q.combine(a[j] as f64, b[j] as f64, c[j] as f64, d[j] as f64);
            val[j] = v0;
            du[j] = gu;
            dv[j] = gv;
        }
        true
    }
}

/// How a camera ray is discretized in NDC depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    /// Number of intervals `K`.
    pub samples: usize,
    /// Far end of the sampled NDC segment; the near end is always `-1`.
    pub z_max: f64,
    pub jitter: bool,
    /// Length of one grid voxel along NDC z; interval lengths `delta` are
    /// expressed in these units.
    pub voxel_size: f64,
}

impl SamplingConfig {
    /// `K` chosen so that the step is `step_ratio` voxels.
    pub fn for_grid(grid: &DensityGrid, step_ratio: f64, z_max: f64, jitter: bool) -> Result<Self> {
        if !(step_ratio > 0.0) {
            return invalid("step ratio must be positive");
        }
        if !(z_max > -1.0 && z_max <= 1.0) {
            return invalid(format!("z_max must lie in (-1, 1], got {z_max}"));
        }
        let voxel = grid.voxel_size_z();
        let samples = ((z_max + 1.0) / (step_ratio * voxel)).round().max(2.0) as usize;
        Ok(Self {
            samples,
            z_max,
            jitter,
            voxel_size: voxel,
        })
    }

    pub fn extent(&self) -> f64 {
        self.z_max + 1.0
    }

    /// NDC interval length.
    pub fn step(&self) -> f64 {
        self.extent() / self.samples as f64
    }

    /// Interval length in voxel units; the `delta` of the compositing rule.
    pub fn delta(&self) -> f64 {
        self.step() / self.voxel_size
    }

    /// `K + 1` equally spaced boundaries from `-1` to `z_max`.
    pub fn boundaries(&self) -> Vec<f64> {
        let step = self.step();
        (0..=self.samples)
            .map(|i| if i == self.samples { self.z_max } else { -1.0 + step * i as f64 })
            .collect()
    }

    /// Sample position inside interval `i` (midpoint, or uniform when jittering).
    #[inline]
    pub fn position<R: Rng + ?Sized>(&self, i: usize, rng: Option<&mut R>) -> f64 {
        let step = self.step();
        let offset = match (self.jitter, rng) {
            (true, Some(rng)) => rng.random::<f64>(),
            _ => 0.5,
        };
        -1.0 + step * (i as f64 + offset)
    }
}

/// Samples of one ray plus (after [`RaySamples::composite_with`]) its
/// compositing terms.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub ray: Ray,
    /// `K + 1` NDC depth boundaries.
    pub s: Vec<f64>,
    pub x_ndc: Vec<Vec3>,
    pub x_world: Vec<Vec3>,
    /// Interval lengths in voxel units.
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub weight: Vec<f64>,
}

/// NDC `(x*, y*)` of a ray from the camera center; constant along the ray.
pub fn ray_ndc_xy(ray: &Ray, cam: &CameraModel, frame: &NdcFrame) -> (f64, f64) {
    let d = cam.pose.inverse_apply_vector(&ray.direction);
    (
        -frame.near * d.x / (frame.r * d.z),
        -frame.near * d.y / (frame.t * d.z),
    )
}

pub fn sample_along_ray<R: Rng + ?Sized>(
    ray: &Ray,
    cam: &CameraModel,
    frame: &NdcFrame,
    cfg: &SamplingConfig,
    mut rng: Option<&mut R>,
) -> RaySamples {
    let (xs, ys) = ray_ndc_xy(ray, cam, frame);
    let s = cfg.boundaries();
    let k = cfg.samples;
    let mut x_ndc = Vec::with_capacity(k);
    let mut x_world = Vec::with_capacity(k);
    for i in 0..k {
        let z = if cfg.jitter {
            s[i] + (s[i + 1] - s[i]) * rng.as_deref_mut().map_or(0.5, |r| r.random::<f64>())
        } else {
            0.5 * (s[i] + s[i + 1])
        };
        let q = Vec3::new(xs, ys, z);
        x_world.push(cam.pose.apply_point(&frame.ndc_to_world_unchecked(&q)));
        x_ndc.push(q);
    }
    let delta = s.windows(2).map(|w| (w[1] - w[0]) / cfg.voxel_size).collect();
    RaySamples {
        ray: *ray,
        s,
        x_ndc,
        x_world,
        delta,
        sigma: Vec::new(),
        alpha: Vec::new(),
        transmittance: Vec::new(),
        weight: Vec::new(),
    }
}

impl RaySamples {
    /// Queries densities from `grid` and fills the compositing terms.
    pub fn composite_with(&mut self, grid: &DensityGrid) {
        self.sigma = self.x_ndc.iter().map(|x| grid.query_density(x)).collect();
        let c = composite(&self.sigma, &self.delta);
        self.alpha = c.alpha;
        self.transmittance = c.transmittance;
        self.weight = c.weight;
    }
}

/// Per-sample compositing terms.
#[derive(Debug, Clone, PartialEq)]
pub struct Compositing {
    pub alpha: Vec<f64>,
    /// `T_i`, transmittance in front of sample `i`; `T_0 = 1`.
    pub transmittance: Vec<f64>,
    pub weight: Vec<f64>,
}

impl Compositing {
    pub fn total_weight(&self) -> f64 {
        self.weight.iter().sum()
    }
}

/// `alpha_i = 1 - exp(-sigma_i delta_i)`, `T_i = prod_{j<i} (1 - alpha_j)`,
/// `w_i = T_i alpha_i`.
pub fn composite(sigma: &[f64], delta: &[f64]) -> Compositing {
    assert_eq!(sigma.len(), delta.len());
    let k = sigma.len();
    let mut alpha = Vec::with_capacity(k);
    let mut transmittance = Vec::with_capacity(k);
    let mut weight = Vec::with_capacity(k);
    let mut t = 1.0;
    for (&s, &d) in sigma.iter().zip(delta) {
        let keep = (-s * d).exp();
        let a = 1.0 - keep;
        alpha.push(a);
        transmittance.push(t);
        weight.push(t * a);
        t *= keep;
    }
    Compositing {
        alpha,
        transmittance,
        weight,
    }
}

/// `sum_i w_i c_i`; no background term is added.
pub fn render_color(w: &[f64], c: &[f64]) -> f64 {
    assert_eq!(w.len(), c.len());
    w.iter().zip(c).map(|(a, b)| a * b).sum()
}

/// `sum_i w_i x_i`.
pub fn render_surface_point(w: &[f64], x: &[Vec3]) -> Vec3 {
    assert_eq!(w.len(), x.len());
    w.iter().zip(x).fold(Vec3::zeros(), |acc, (wi, xi)| acc + xi * *wi)
}

/// `B + F * P(pi(x))`; out-of-view points see pattern value 0.
pub fn lookup_pattern_color(x_world: &Vec3, stats_at_ray: (f64, f64), pattern: &Pattern, proj: &ProjectorModel) -> f64 {
    let (b, f) = stats_at_ray;
    match proj.project(x_world) {
        PatternPoint::InFront { u, v, .. } => b + f * pattern.sample(u, v),
        PatternPoint::Behind => b,
    }
}

/// Color of the rendered surface point, same rule as [`lookup_pattern_color`].
pub fn surface_color(s_l: &Vec3, stats_at_ray: (f64, f64), pattern: &Pattern, proj: &ProjectorModel) -> f64 {
    lookup_pattern_color(s_l, stats_at_ray, pattern, proj)
}

/// Projector-space parametrization of a camera ray: the projector-frame
/// position of the point at metric depth `d` is `d * a + b`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ProjectorRay {
    a: Vec3,
    b: Vec3,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl ProjectorRay {
    /// `dir_depth` is the camera-frame direction scaled to unit depth
    /// (`z = -1`).
    pub fn new(cam: &CameraModel, proj: &ProjectorModel, dir_depth: &Vec3) -> Self {
        let pose = &proj.intrinsics.pose;
        let dir_world = cam.pose.apply_vector(dir_depth);
        Self {
            a: pose.inverse_apply_vector(&dir_world),
            b: pose.inverse_apply_point(&cam.center()),
            fx: proj.intrinsics.fx,
            fy: proj.intrinsics.fy,
            cx: proj.intrinsics.cx,
            cy: proj.intrinsics.cy,
        }
    }

    #[inline]
    pub fn project(&self, depth: f64) -> Option<(f64, f64)> {
        let p = self.a * depth + self.b;
        let z = -p.z;
        if z <= 0.0 {
            return None;
        }
        let inv = 1.0 / z;
        Some((self.fx * p.x * inv + self.cx, self.fy * p.y * inv + self.cy))
    }
}
