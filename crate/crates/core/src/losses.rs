//! Training losses and the hand-written backward pass.
//!
//! The batch kernel works per camera ray. A ray's NDC `(x*, y*)` is fixed, so
//! its samples only touch four grid columns: those are gathered into a 1D raw
//! profile once, every sample reads the profile by linear interpolation in z,
//! and the adjoint is scattered back onto the same four columns.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{pixel_ndc_xy, CameraModel, NdcFrame, ProjectorModel, Vec3};
use crate::grid::{activate, activate_grad, lattice_coord, ColumnStencil, DensityGrid, GridGradient};
use crate::patterns::splitmix64;
use crate::raster::Image;
use crate::renderer::{PatternStack, PixelStats, ProjectorRay, SamplingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_s: f64,
}

impl LossWeights {
    pub fn new(lambda_d: f64, lambda_s: f64) -> Result<Self> {
        if !(lambda_d >= 0.0 && lambda_s >= 0.0) {
            return invalid(format!("loss weights must be non-negative, got ({lambda_d}, {lambda_s})"));
        }
        Ok(Self { lambda_d, lambda_s })
    }

    pub fn photo_only() -> Self {
        Self {
            lambda_d: 0.0,
            lambda_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub photo: f64,
    pub dist: f64,
    pub surface: f64,
    pub total: f64,
    /// Number of (ray, pattern) residuals that entered the losses.
    pub ray_count: usize,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.photo.is_finite() && self.dist.is_finite() && self.surface.is_finite() && self.total.is_finite()
    }
}

fn mean_squared_error(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return invalid(format!("length mismatch: {} vs {}", a.len(), b.len()));
    }
    if a.is_empty() {
        return invalid("empty batch");
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Mean over all (ray, pattern) pairs of the squared rendering error.
pub fn photometric_loss(rendered: &[f64], captured: &[f64]) -> Result<f64> {
    mean_squared_error(rendered, captured)
}

/// Same contract as [`photometric_loss`], applied to surface colors.
pub fn surface_loss(surface_rendered: &[f64], captured: &[f64]) -> Result<f64> {
    mean_squared_error(surface_rendered, captured)
}

/// Distortion of one ray: `sum_ij w_i w_j |m_i - m_j| + 1/3 sum_i w_i^2 (s_{i+1} - s_i)`
/// with `m_i` the interval midpoints, evaluated in O(K).
pub fn distortion_loss_ray(s: &[f64], w: &[f64]) -> f64 {
    distortion_impl(s, w, None)
}

/// [`distortion_loss_ray`] plus its gradient with respect to `w`, written to `grad`.
pub fn distortion_loss_ray_with_grad(s: &[f64], w: &[f64], grad: &mut [f64]) -> f64 {
    distortion_impl(s, w, Some(grad))
}

fn distortion_impl(s: &[f64], w: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let k = w.len();
    assert_eq!(s.len(), k + 1, "need K + 1 boundaries for K weights");
    let mut pair = 0.0;
    let mut unary = 0.0;
    let mut w_before = 0.0;
    let mut wm_before = 0.0;
    for i in 0..k {
        let m = 0.5 * (s[i] + s[i + 1]);
        let d = s[i + 1] - s[i];
        pair += w[i] * (m * w_before - wm_before);
        unary += w[i] * w[i] * d;
        w_before += w[i];
        wm_before += w[i] * m;
    }
    if let Some(grad) = grad {
        // sum_j w_j |m_k - m_j| split into the parts before and after k
        let (w_total, wm_total) = (w_before, wm_before);
        let (mut wb, mut wmb) = (0.0, 0.0);
        for i in 0..k {
            let m = 0.5 * (s[i] + s[i + 1]);
            let d = s[i + 1] - s[i];
            let (wa, wma) = (w_total - wb - w[i], wm_total - wmb - w[i] * m);
            let spread = m * wb - wmb + wma - m * wa;
            grad[i] = 2.0 * spread + 2.0 / 3.0 * w[i] * d;
            wb += w[i];
            wmb += w[i] * m;
        }
    }
    2.0 * pair + unary / 3.0
}

/// Mean of the per-ray distortion values.
pub fn distortion_loss_total(per_ray: &[f64]) -> Result<f64> {
    if per_ray.is_empty() {
        return invalid("empty batch");
    }
    Ok(per_ray.iter().sum::<f64>() / per_ray.len() as f64)
}

/// `photo + lambda_d * dist + lambda_s * surface`.
pub fn total_loss(photo: f64, dist: f64, surface: f64, weights: &LossWeights, ray_count: usize) -> LossReport {
    LossReport {
        photo,
        dist,
        surface,
        total: photo + weights.lambda_d * dist + weights.lambda_s * surface,
        ray_count,
    }
}

/// Everything the batch kernel reads besides the grid.
#[derive(Debug, Clone, Copy)]
pub struct TrainingView<'a> {
    pub cam: &'a CameraModel,
    pub proj: &'a ProjectorModel,
    pub frame: NdcFrame,
    pub patterns: &'a PatternStack,
    pub captures: &'a [Image],
    pub stats: &'a PixelStats,
    pub sampling: SamplingConfig,
    /// A ray stops once its transmittance falls below this; 0 marches every
    /// sample and keeps the gradient exact.
    pub min_transmittance: f64,
}

impl<'a> TrainingView<'a> {
    pub fn validate(&self, grid: &DensityGrid) -> Result<()> {
        let n = self.captures.len();
        if n < 2 {
            return invalid(format!("need at least 2 captures, got {n}"));
        }
        if self.patterns.count != n {
            return invalid(format!("{} patterns for {n} captures", self.patterns.count));
        }
        if self.captures.iter().any(|c| c.dims() != (self.cam.width, self.cam.height))
            || (self.stats.width, self.stats.height) != (self.cam.width, self.cam.height)
        {
            return invalid("capture size does not match the camera");
        }
        if (self.patterns.width, self.patterns.height) != (self.proj.width(), self.proj.height()) {
            return invalid("pattern size does not match the projector");
        }
        if (self.sampling.voxel_size - grid.voxel_size_z()).abs() > 1e-12 {
            return invalid("sampling voxel size does not match the grid");
        }
        Ok(())
    }
}

/// Per-ray result of the batch kernel.
struct RayOutput {
    photo_sse: f64,
    dist: f64,
    surface_sse: f64,
    stencil: ColumnStencil,
    column_grad: Option<Vec<f64>>,
}

#[derive(Default)]
struct Scratch {
    profile: Vec<f64>,
    iz: Vec<usize>,
    tz: Vec<f64>,
    depth: Vec<f64>,
    raw: Vec<f64>,
    alpha: Vec<f64>,
    trans: Vec<f64>,
    w: Vec<f64>,
    pat: Vec<f64>,
    g: Vec<f64>,
    dist_grad: Vec<f64>,
    s_norm: Vec<f64>,
    rendered: Vec<f64>,
}

/// Sub-seed for ray `index` of a batch jittered with `seed`.
fn ray_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Loss terms of one pixel's ray and, on request, the adjoint w.r.t. the
/// gathered raw column profile.
fn trace_ray(
    view: &TrainingView<'_>,
    grid: &DensityGrid,
    pixel: (usize, usize),
    weights: &LossWeights,
    norm: (f64, f64),
    jitter_seed: Option<u64>,
    want_grad: bool,
    sc: &mut Scratch,
) -> RayOutput {
    let cfg = &view.sampling;
    let k = cfg.samples;
    let n = view.patterns.count;
    let nz = grid.dims[2];
    let (row, col) = pixel;
    let idx = row * view.cam.width + col;
    let (b, f) = view.stats.at(idx);

    let (xs, ys) = pixel_ndc_xy(view.cam, pixel);
    let stencil = grid.column_stencil(xs, ys);
    sc.profile.resize(nz, 0.0);
    grid.gather_column(&stencil, &mut sc.profile);

    let dir = view.cam.local_direction(col as f64 + 0.5, row as f64 + 0.5);
    let pray = ProjectorRay::new(view.cam, view.proj, &dir);
    let step = cfg.step();
    let delta = cfg.delta();
    let mut rng = jitter_seed.map(|s| ChaCha8Rng::seed_from_u64(s));

    for v in [&mut sc.tz, &mut sc.depth, &mut sc.raw, &mut sc.alpha, &mut sc.trans, &mut sc.w] {
        v.clear();
    }
    sc.iz.clear();
    sc.pat.clear();
    sc.pat.resize(k * n, 0.0);
    sc.rendered.clear();
    sc.rendered.resize(n, 0.0);

    let mut t = 1.0;
    for i in 0..k {
        let off = rng.as_mut().map_or(0.5, |r| r.random::<f64>());
        let z = -1.0 + step * (i as f64 + off);
        let (iz, tz) = lattice_coord(z, nz);
        let raw = sc.profile[iz] + (sc.profile[iz + 1] - sc.profile[iz]) * tz;
        let sigma = activate(raw, grid.bias);
        let keep = (-sigma * delta).exp();
        let alpha = 1.0 - keep;
        let w = t * alpha;
        let depth = view.frame.depth_of(z);
        sc.iz.push(iz);
        sc.tz.push(tz);
        sc.raw.push(raw);
        sc.alpha.push(alpha);
        sc.trans.push(t);
        sc.w.push(w);
        sc.depth.push(depth);
        t *= keep;
        let last = t < view.min_transmittance;
        if let Some((u, v)) = pray.project(depth) {
            let p = &mut sc.pat[i * n..(i + 1) * n];
            view.patterns.sample(u, v, p);
            for (r, &pv) in sc.rendered.iter_mut().zip(p.iter()) {
                *r += w * (b + f * pv);
            }
        } else {
            for r in sc.rendered.iter_mut() {
                *r += w * b;
            }
        }
        if last {
            break;
        }
    }
    let k = sc.w.len();

    let (norm_photo, norm_ray) = norm;
    let mut photo_sse = 0.0;
    // d(photo)/d(rendered_j), reused below for dL/dw
    let mut coef = [0.0f64; 16];
    let mut coef_vec;
    let coef: &mut [f64] = if n <= 16 {
        &mut coef[..n]
    } else {
        coef_vec = vec![0.0; n];
        &mut coef_vec
    };
    for j in 0..n {
        let r = sc.rendered[j] - view.captures[j].data[idx];
        photo_sse += r * r;
        coef[j] = 2.0 * r * norm_photo;
    }

    // distortion on boundaries normalized to [0, 1] along the segment
    sc.s_norm.clear();
    sc.s_norm.extend((0..=k).map(|i| i as f64 / cfg.samples as f64));
    sc.dist_grad.resize(k, 0.0);
    let dist = if want_grad && weights.lambda_d != 0.0 {
        distortion_loss_ray_with_grad(&sc.s_norm, &sc.w, &mut sc.dist_grad)
    } else {
        distortion_loss_ray(&sc.s_norm, &sc.w)
    };

    // surface point in world coordinates
    let cam_c = view.cam.center();
    let dir_world = view.cam.pose.apply_vector(&dir);
    let w_sum: f64 = sc.w.iter().sum();
    let mean_depth: f64 = sc.w.iter().zip(&sc.depth).map(|(w, d)| w * d).sum();
    let s_l = cam_c * w_sum + dir_world * mean_depth;
    let mut surface_sse = 0.0;
    let mut ds_l = Vec3::zeros();
    {
        let mut sval = [0.0f64; 16];
        let (mut sdu, mut sdv) = ([0.0f64; 16], [0.0f64; 16]);
        let (mut sv, mut su, mut sw);
        let (val, du, dv): (&mut [f64], &mut [f64], &mut [f64]) = if n <= 16 {
            (&mut sval[..n], &mut sdu[..n], &mut sdv[..n])
        } else {
            sv = vec![0.0; n];
            su = vec![0.0; n];
            sw = vec![0.0; n];
            (&mut sv, &mut su, &mut sw)
        };
        let jac = view.proj.project_with_jacobian(&s_l);
        let inside = match jac {
            Some(((u, v), _)) => view.patterns.sample_with_grad(u, v, val, du, dv),
            None => false,
        };
        if !inside {
            val.fill(0.0);
        }
        for j in 0..n {
            let q = b + f * val[j] - view.captures[j].data[idx];
            surface_sse += q * q;
            if inside && want_grad && weights.lambda_s != 0.0 && w_sum != 0.0 {
                let (_, jm) = jac.unwrap();
                let c = weights.lambda_s * 2.0 * q * norm_photo * f;
                for a in 0..3 {
                    ds_l[a] += c * (du[j] * jm[0][a] + dv[j] * jm[1][a]);
                }
            }
        }
    }

    if !want_grad {
        return RayOutput {
            photo_sse,
            dist,
            surface_sse,
            stencil,
            column_grad: None,
        };
    }

    // dL/dw_i
    let surf_c = ds_l.dot(&cam_c);
    let surf_d = ds_l.dot(&dir_world);
    sc.g.clear();
    for i in 0..k {
        let mut g = 0.0;
        let p = &sc.pat[i * n..(i + 1) * n];
        for j in 0..n {
            g += coef[j] * (b + f * p[j]);
        }
        if weights.lambda_d != 0.0 {
            g += weights.lambda_d * norm_ray * sc.dist_grad[i];
        }
        g += surf_c + surf_d * sc.depth[i];
        sc.g.push(g);
    }

    // dL/dsigma_k = delta [T_{k+1} g_k - sum_{i>k} g_i w_i], then onto the profile
    let mut column_grad = vec![0.0; nz];
    let mut tail = 0.0;
    for i in (0..k).rev() {
        let t_next = sc.trans[i] * (1.0 - sc.alpha[i]);
        let d_sigma = delta * (t_next * sc.g[i] - tail);
        tail += sc.g[i] * sc.w[i];
        let d_raw = d_sigma * activate_grad(sc.raw[i], grid.bias);
        let (iz, tz) = (sc.iz[i], sc.tz[i]);
        column_grad[iz] += d_raw * (1.0 - tz);
        column_grad[iz + 1] += d_raw * tz;
    }

    RayOutput {
        photo_sse,
        dist,
        surface_sse,
        stencil,
        column_grad: Some(column_grad),
    }
}

fn run_batch(
    view: &TrainingView<'_>,
    grid: &DensityGrid,
    pixels: &[(usize, usize)],
    weights: &LossWeights,
    jitter_seed: Option<u64>,
    want_grad: bool,
) -> Result<(LossReport, Option<GridGradient>)> {
    view.validate(grid)?;
    let rays: Vec<(usize, (usize, usize))> = pixels
        .iter()
        .copied()
        .filter(|&(r, c)| r < view.cam.height && c < view.cam.width && view.stats.valid.get(r, c))
        .enumerate()
        .collect();
    if rays.is_empty() {
        return invalid("batch contains no valid pixels");
    }
    let m = rays.len() as f64;
    let n = view.captures.len() as f64;
    let norm = (1.0 / (m * n), 1.0 / m);
    let jitter = jitter_seed.filter(|_| view.sampling.jitter);

    let outputs: Vec<RayOutput> = rays
        .par_iter()
        .map_init(Scratch::default, |sc, &(i, px)| {
            trace_ray(view, grid, px, weights, norm, jitter.map(|s| ray_seed(s, i)), want_grad, sc)
        })
        .collect();

    let (mut photo, mut dist, mut surface) = (0.0, 0.0, 0.0);
    let mut grad = want_grad.then(|| GridGradient::zeros_like(grid));
    for out in &outputs {
        photo += out.photo_sse;
        dist += out.dist;
        surface += out.surface_sse;
        if let (Some(g), Some(cg)) = (grad.as_mut(), out.column_grad.as_ref()) {
            g.scatter_column(&out.stencil, cg);
        }
    }
    let report = total_loss(photo * norm.0, dist * norm.1, surface * norm.0, weights, rays.len() * view.captures.len());
    Ok((report, grad))
}

/// Losses of a batch of pixels and their exact gradient with respect to the
/// raw grid values. Pixels masked invalid are skipped. Rays run in parallel
/// on the current rayon pool and are reduced in batch order, so the result
/// does not depend on the worker count.
pub fn backward_batch(
    view: &TrainingView<'_>,
    grid: &DensityGrid,
    pixels: &[(usize, usize)],
    weights: &LossWeights,
    jitter_seed: Option<u64>,
) -> Result<(LossReport, GridGradient)> {
    let (report, grad) = run_batch(view, grid, pixels, weights, jitter_seed, true)?;
    Ok((report, grad.expect("gradient requested")))
}

/// Forward half of [`backward_batch`].
pub fn batch_loss(
    view: &TrainingView<'_>,
    grid: &DensityGrid,
    pixels: &[(usize, usize)],
    weights: &LossWeights,
    jitter_seed: Option<u64>,
) -> Result<LossReport> {
    Ok(run_batch(view, grid, pixels, weights, jitter_seed, false)?.0)
}
