//! Synthetic captures with exact ground truth.
//!
//! Scenes are height fields over the camera image: every camera pixel sees
//! exactly one surface point, and everything behind the surface is solid.
//! Captures evaluate `B0 + F0 * P(pi(x))` at the true surface point.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{CameraModel, PatternPoint, ProjectorModel, Vec3};
use crate::metrics::DepthMap;
use crate::patterns::Pattern;
use crate::raster::{Image, Mask};

/// Depth tolerance (mm) of the projector occlusion test.
pub const SHADOW_EPSILON: f64 = 1.0;

/// Analytic scene, in the camera frame. Depths are positive distances along
/// the camera's `-z` axis in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SceneKind {
    /// Fronto-parallel plane.
    Plane { depth: f64 },
    /// Depth linear in the image column, `left` at `u = 0` and `right` at
    /// `u = width`.
    Ramp { left: f64, right: f64 },
    /// Sphere centered on the optical axis; rays that miss it hit a
    /// fronto-parallel background plane if one is given.
    Sphere {
        center_depth: f64,
        radius: f64,
        #[serde(default)]
        background: Option<f64>,
    },
    /// Two fronto-parallel planes meeting at the vertical line `u = edge_u`.
    Step {
        near: f64,
        far: f64,
        edge_u: f64,
        near_left: bool,
    },
}

impl SceneKind {
    pub fn name(&self) -> &'static str {
        match self {
            SceneKind::Plane { .. } => "plane",
            SceneKind::Ramp { .. } => "ramp",
            SceneKind::Sphere { .. } => "sphere",
            SceneKind::Step { .. } => "step",
        }
    }

    /// Default parameters for `name` at the camera's image size.
    pub fn preset(name: &str, cam: &CameraModel) -> Result<Self> {
        let w = cam.width as f64;
        Ok(match name {
            "plane" => SceneKind::Plane { depth: 1000.0 },
            "ramp" => SceneKind::Ramp {
                left: 800.0,
                right: 1200.0,
            },
            "sphere" => SceneKind::Sphere {
                center_depth: 1500.0,
                radius: 1000.0,
                background: None,
            },
            "step" => SceneKind::Step {
                near: 900.0,
                far: 1100.0,
                edge_u: (w / 2.0).round(),
                near_left: true,
            },
            other => return invalid(format!("unknown scene kind '{other}'")),
        })
    }

    /// Surface depth seen through continuous pixel coordinates `(u, v)`.
    pub fn depth_at(&self, cam: &CameraModel, u: f64, v: f64) -> Option<f64> {
        match *self {
            SceneKind::Plane { depth } => Some(depth),
            SceneKind::Ramp { left, right } => Some(left + (right - left) * u / cam.width as f64),
            SceneKind::Sphere {
                center_depth,
                radius,
                background,
            } => {
                let d = cam.local_direction(u, v);
                let a = d.norm_squared();
                // |t d - c|^2 = R^2 with c = (0, 0, -D) and d.c = D
                let disc = center_depth * center_depth - a * (center_depth * center_depth - radius * radius);
                if disc < 0.0 {
                    background
                } else {
                    Some((center_depth - disc.sqrt()) / a)
                }
            }
            SceneKind::Step {
                near,
                far,
                edge_u,
                near_left,
            } => Some(if (u < edge_u) == near_left { near } else { far }),
        }
    }

    /// Parameters `t` in `(0, 1)` where the camera-frame segment `s + t d`
    /// crosses a depth discontinuity of the surface.
    fn discontinuities(&self, cam: &CameraModel, s: &Vec3, d: &Vec3) -> Vec<f64> {
        let mut roots = Vec::new();
        match *self {
            SceneKind::Step { edge_u, .. } => {
                // u(t) = e  <=>  fx x(t) + (e - cx) z(t) = 0
                let a = cam.fx * s.x + (edge_u - cam.cx) * s.z;
                let b = cam.fx * d.x + (edge_u - cam.cx) * d.z;
                if b != 0.0 {
                    roots.push(-a / b);
                }
            }
            SceneKind::Sphere {
                center_depth,
                radius,
                background: Some(_),
            } => {
                // the camera ray through q grazes the sphere where
                // (D^2 - R^2)(x^2 + y^2) - R^2 z^2 = 0
                let k = center_depth * center_depth - radius * radius;
                let r2 = radius * radius;
                let qa = k * (d.x * d.x + d.y * d.y) - r2 * d.z * d.z;
                let qb = 2.0 * (k * (s.x * d.x + s.y * d.y) - r2 * s.z * d.z);
                let qc = k * (s.x * s.x + s.y * s.y) - r2 * s.z * s.z;
                if qa.abs() < 1e-300 {
                    if qb != 0.0 {
                        roots.push(-qc / qb);
                    }
                } else {
                    let disc = qb * qb - 4.0 * qa * qc;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        roots.push((-qb - sq) / (2.0 * qa));
                        roots.push((-qb + sq) / (2.0 * qa));
                    }
                }
            }
            _ => {}
        }
        roots.retain(|t| *t > 0.0 && *t < 1.0);
        roots.sort_by(f64::total_cmp);
        roots
    }
}

/// Ground-truth depth of every camera pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDepth {
    pub kind: SceneKind,
    pub map: DepthMap,
}

impl SceneDepth {
    pub fn min_depth(&self) -> f64 {
        self.valid_depths().fold(f64::INFINITY, f64::min)
    }

    pub fn mean_depth(&self) -> f64 {
        self.map.mean_valid().unwrap_or(f64::NAN)
    }

    pub fn max_depth(&self) -> f64 {
        self.valid_depths().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Near plane at 3/4 of the closest depth, and the NDC depth at 1.5x
    /// the farthest one, where ray sampling stops.
    pub fn sampling_bounds(&self) -> (f64, f64) {
        let near = 0.75 * self.min_depth();
        (near, 1.0 - 2.0 * near / (1.5 * self.max_depth()))
    }

    fn valid_depths(&self) -> impl Iterator<Item = f64> + '_ {
        self.map
            .depth
            .iter()
            .zip(&self.map.valid.data)
            .filter(|(_, &v)| v)
            .map(|(&d, _)| d)
    }
}

pub fn analytic_scene(kind: SceneKind, cam: &CameraModel) -> Result<SceneDepth> {
    let (w, h) = (cam.width, cam.height);
    let mut depth = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            match kind.depth_at(cam, col as f64 + 0.5, row as f64 + 0.5) {
                Some(d) if d.is_finite() && d > 0.0 => depth.push(d),
                _ => {
                    return invalid(format!(
                        "{} scene has no surface in front of the camera at pixel ({row}, {col})",
                        kind.name()
                    ))
                }
            }
        }
    }
    Ok(SceneDepth {
        kind,
        map: DepthMap::new(w, h, depth, Mask::filled(w, h, true))?,
    })
}

/// Surface point of a pixel in the camera frame.
fn surface_local(cam: &CameraModel, row: usize, col: usize, depth: f64) -> Vec3 {
    cam.local_direction(col as f64 + 0.5, row as f64 + 0.5) * depth
}

/// How far (mm) the camera-frame point `q` lies behind the surface, minus the
/// shadow tolerance. `None` outside the camera view, where nothing occludes.
fn solid_margin(kind: &SceneKind, cam: &CameraModel, q: &Vec3) -> Option<f64> {
    let (u, v) = cam.project_local(q)?;
    if !(u >= 0.0 && u < cam.width as f64 && v >= 0.0 && v < cam.height as f64) {
        return None;
    }
    let d = kind.depth_at(cam, u, v)?;
    Some(-q.z - d - SHADOW_EPSILON)
}

/// Maximum of a unimodal `f` over `[lo, hi]` by golden-section search.
fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..60 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        }
    }
    f1.max(f2)
}

/// Whether the segment from the surface point `s` to the projector center
/// `p` (both camera frame) passes through the solid. The segment is split at
/// the surface's depth discontinuities; each smooth piece is marched in steps
/// of at most half a pixel, its ends are probed, and sampled local maxima of
/// the margin are refined.
fn occluded(kind: &SceneKind, cam: &CameraModel, s: &Vec3, p: &Vec3) -> bool {
    let dir = p - s;
    let at = |t: f64| s + dir * t;
    let f = |t: f64| solid_margin(kind, cam, &at(t)).unwrap_or(f64::NEG_INFINITY);

    let mut cuts = vec![0.0];
    cuts.extend(kind.discontinuities(cam, s, &dir));
    cuts.push(1.0);
    for piece in cuts.windows(2) {
        let eta = 1e-9 * (piece[1] - piece[0]).max(1e-12);
        let (a, b) = (piece[0] + eta, piece[1] - eta);
        if a >= b {
            continue;
        }
        let mut samples = vec![(a, f(a))];
        let mut t = a;
        loop {
            let q = at(t);
            let Some((u0, v0)) = cam.project_local(&q) else {
                break;
            };
            if !(u0 >= -1.0 && u0 <= cam.width as f64 + 1.0 && v0 >= -1.0 && v0 <= cam.height as f64 + 1.0) {
                break;
            }
            let qd = -q.z;
            let du = cam.fx * (dir.x * qd + q.x * dir.z) / (qd * qd);
            let dv = cam.fy * (dir.y * qd + q.y * dir.z) / (qd * qd);
            let speed = (du * du + dv * dv).sqrt();
            let dt = if speed > 0.0 { 0.5 / speed } else { 1.0 };
            t += dt.min(0.05);
            if t >= b {
                break;
            }
            samples.push((t, f(t)));
        }
        samples.push((b, f(b)));
        if samples.iter().any(|&(_, m)| m > 0.0) {
            return true;
        }
        let last = samples.len() - 1;
        for i in 0..=last {
            let (lo, hi) = (i.saturating_sub(1), (i + 1).min(last));
            let mc = samples[i].1;
            if mc.is_finite() && mc >= samples[lo].1 && mc >= samples[hi].1 && golden_max(f, samples[lo].0, samples[hi].0) > 0.0 {
                return true;
            }
        }
    }
    false
}

/// Pixels whose surface point the projector cannot see because the scene
/// itself blocks the light path.
pub fn projector_shadow_mask(scene: &SceneDepth, cam: &CameraModel, proj: &ProjectorModel) -> Mask {
    let (w, h) = (cam.width, cam.height);
    let p = cam.pose.inverse_apply_point(&proj.intrinsics.center());
    let data: Vec<bool> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (row, col) = (i / w, i % w);
            if !scene.map.valid.data[i] {
                return false;
            }
            let s = surface_local(cam, row, col, scene.map.depth[i]);
            occluded(&scene.kind, cam, &s, &p)
        })
        .collect();
    Mask {
        width: w,
        height: h,
        data,
    }
}

/// Pixels whose surface point receives projector light: in front of the
/// projector, inside its image, and not shadowed.
pub fn lit_mask(scene: &SceneDepth, cam: &CameraModel, proj: &ProjectorModel, shadow: &Mask) -> Mask {
    let w = cam.width;
    let data = (0..w * cam.height)
        .map(|i| {
            let (row, col) = (i / w, i % w);
            if !scene.map.valid.data[i] || shadow.data[i] {
                return false;
            }
            let x = cam.pose.apply_point(&surface_local(cam, row, col, scene.map.depth[i]));
            match proj.project(&x) {
                PatternPoint::InFront { u, v, .. } => {
                    u >= 0.0 && u < proj.width() as f64 && v >= 0.0 && v < proj.height() as f64
                }
                PatternPoint::Behind => false,
            }
        })
        .collect();
    Mask {
        width: w,
        height: cam.height,
        data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadiometricParams {
    #[serde(rename = "B0")]
    pub b0: f64,
    #[serde(rename = "F0")]
    pub f0: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    /// 8 to quantize to 8-bit gray levels, 0 to keep full precision.
    #[serde(default)]
    pub quantize_bits: u32,
}

impl Default for RadiometricParams {
    fn default() -> Self {
        Self {
            b0: 0.1,
            f0: 0.8,
            noise_sigma: 0.0,
            quantize_bits: 0,
        }
    }
}

impl RadiometricParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.b0 >= 0.0 && self.f0 >= 0.0 && self.b0 + self.f0 <= 1.0) {
            return invalid(format!("need B0, F0 >= 0 and B0 + F0 <= 1, got ({}, {})", self.b0, self.f0));
        }
        if !(self.noise_sigma >= 0.0) {
            return invalid("noise_sigma must be non-negative");
        }
        if !matches!(self.quantize_bits, 0 | 8) {
            return invalid(format!("quantize_bits must be 0 or 8, got {}", self.quantize_bits));
        }
        Ok(())
    }
}

/// Everything a simulation run produces.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub scene: SceneDepth,
    pub captures: Vec<Image>,
    pub shadow: Mask,
    pub lit: Mask,
}

/// One capture per pattern. Shadowed and out-of-view pixels receive `B0`.
pub fn simulate_captures(
    scene: &SceneDepth,
    patterns: &[Pattern],
    cam: &CameraModel,
    proj: &ProjectorModel,
    rad: &RadiometricParams,
    seed: u64,
) -> Result<Simulation> {
    rad.validate()?;
    if patterns.is_empty() {
        return invalid("no patterns");
    }
    if (scene.map.width, scene.map.height) != (cam.width, cam.height) {
        return invalid("scene size does not match the camera");
    }
    if patterns.iter().any(|p| (p.width, p.height) != (proj.width(), proj.height())) {
        return invalid("pattern size does not match the projector");
    }
    let shadow = projector_shadow_mask(scene, cam, proj);
    let lit = lit_mask(scene, cam, proj, &shadow);
    let w = cam.width;
    let uv: Vec<Option<(f64, f64)>> = (0..w * cam.height)
        .map(|i| {
            if !lit.data[i] {
                return None;
            }
            let x = cam.pose.apply_point(&surface_local(cam, i / w, i % w, scene.map.depth[i]));
            proj.project(&x).coords()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (rad.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, rad.noise_sigma).expect("sigma validated"));
    let mut captures = Vec::with_capacity(patterns.len());
    for pat in patterns {
        let mut data: Vec<f64> = uv
            .iter()
            .map(|c| match c {
                Some((u, v)) => rad.b0 + rad.f0 * pat.sample(*u, *v),
                None => rad.b0,
            })
            .collect();
        if let Some(n) = &noise {
            for v in data.iter_mut() {
                *v += n.sample(&mut rng);
            }
        }
        for v in data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
            if rad.quantize_bits == 8 {
                *v = (*v * 255.0).round() / 255.0;
            }
        }
        captures.push(Image::new(w, cam.height, data)?);
    }
    Ok(Simulation {
        scene: scene.clone(),
        captures,
        shadow,
        lit,
    })
}
