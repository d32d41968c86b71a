//! Two-phase optimization of the density grid and depth extraction.

use std::path::PathBuf;
use std::time::Instant;

use log::{info, warn};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{ndc_frame_from_camera, pixel_ndc_xy, CameraModel, NdcFrame, ProjectorModel};
use crate::grid::{activate, init_bias, lattice_coord, DensityGrid, GridGradient};
use crate::losses::{backward_batch, LossReport, LossWeights, TrainingView};
use crate::metrics::{depth_to_disparity, DepthMap, DisparityMap};
use crate::patterns::{splitmix64, Pattern};
use crate::raster::{Image, Mask};
use crate::renderer::{compute_background_and_contrast, PatternStack, SamplingConfig, DEFAULT_F_MIN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub grid_dims: [usize; 3],
    pub alpha_init: f64,
    /// Ray step as a fraction of the z voxel size.
    pub step_size: f64,
    pub rays_per_iter: usize,
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub lambda_d: f64,
    pub lambda_s_phase2: f64,
    pub learning_rate: f64,
    /// Learning rate reached at the last iteration (exponential decay).
    pub learning_rate_final: f64,
    pub seed: u64,
    /// Near plane of the NDC warp, mm.
    pub near: Option<f64>,
    pub jitter: bool,
    /// Far end of the sampled NDC depth range.
    pub z_max: f64,
    pub f_min: f64,
    /// Accumulated weight below which a pixel's depth is invalid.
    pub w_min: f64,
    /// Divide the rendered surface point by the accumulated weight.
    pub normalize_depth: bool,
    /// Gaussian pre-blur of the patterns in projector pixels; 0 disables.
    pub pattern_blur: f64,
    pub log_interval: usize,
    /// Rays stop marching once their transmittance drops below this.
    pub min_transmittance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            grid_dims: [256, 256, 256],
            alpha_init: 1e-2,
            step_size: 0.5,
            rays_per_iter: 8192,
            phase1_iters: 3000,
            phase2_iters: 29000,
            lambda_d: 0.01,
            lambda_s_phase2: 1.0,
            learning_rate: 0.1,
            learning_rate_final: 0.01,
            seed: 0,
            near: None,
            jitter: true,
            z_max: 1.0,
            f_min: DEFAULT_F_MIN,
            w_min: 0.5,
            normalize_depth: false,
            pattern_blur: 0.0,
            log_interval: 100,
            min_transmittance: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_dims.iter().any(|&d| d < 2) {
            return invalid(format!("grid_dims must be >= 2, got {:?}", self.grid_dims));
        }
        if self.rays_per_iter == 0 || self.phase1_iters + self.phase2_iters == 0 {
            return invalid("rays_per_iter and the iteration counts must be positive");
        }
        if !(self.step_size > 0.0) || !(self.learning_rate > 0.0) || !(self.learning_rate_final > 0.0) {
            return invalid("step_size and learning rates must be positive");
        }
        if !(self.lambda_d >= 0.0 && self.lambda_s_phase2 >= 0.0) {
            return invalid("loss weights must be non-negative");
        }
        if let Some(n) = self.near {
            if !(n > 0.0) {
                return invalid("near must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.min_transmittance) {
            return invalid("min_transmittance must lie in [0, 1)");
        }
        if self.log_interval == 0 {
            return invalid("log_interval must be positive");
        }
        Ok(())
    }

    pub fn total_iters(&self) -> usize {
        self.phase1_iters + self.phase2_iters
    }

    /// Loss weights of 1-based `iteration`: surface loss off in phase 1.
    pub fn loss_weights_at(&self, iteration: usize) -> LossWeights {
        LossWeights {
            lambda_d: self.lambda_d,
            lambda_s: if iteration <= self.phase1_iters { 0.0 } else { self.lambda_s_phase2 },
        }
    }

    /// Exponential decay from `learning_rate` to `learning_rate_final`.
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let total = self.total_iters().max(2) - 1;
        let frac = (iteration.saturating_sub(1)) as f64 / total as f64;
        self.learning_rate * (self.learning_rate_final / self.learning_rate).powf(frac.min(1.0))
    }

    pub fn near_plane(&self) -> Result<f64> {
        self.near.ok_or_else(|| Error::Config("near plane is not set".into()))
    }
}

/// Adam moments for every raw grid value.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<f32>,
    pub second_moment: Vec<f32>,
    pub step_count: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.99;
pub const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(grid: &DensityGrid) -> Self {
        Self {
            first_moment: vec![0.0; grid.len()],
            second_moment: vec![0.0; grid.len()],
            step_count: 0,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.first_moment.iter().chain(&self.second_moment).all(|v| v.is_finite())
    }
}

/// One Adam step touching only voxels with a nonzero gradient; bias
/// correction uses the global step count.
pub fn adam_step(grid: &mut DensityGrid, grad: &GridGradient, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if grad.dims != grid.dims || state.first_moment.len() != grid.len() {
        return invalid("optimizer, gradient and grid shapes disagree");
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    grid.raw
        .par_iter_mut()
        .zip(state.first_moment.par_iter_mut())
        .zip(state.second_moment.par_iter_mut())
        .zip(grad.raw_grad.par_iter())
        .for_each(|(((x, m), v), &g)| {
            if g == 0.0 {
                return;
            }
            let mn = ADAM_BETA1 * *m as f64 + (1.0 - ADAM_BETA1) * g;
            let vn = ADAM_BETA2 * *v as f64 + (1.0 - ADAM_BETA2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let step = lr * (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS);
            *x = (*x as f64 - step) as f32;
        });
    Ok(())
}

/// Row-major `(row, col)` of every valid pixel.
pub fn valid_pixels(mask: &Mask) -> Vec<(usize, usize)> {
    (0..mask.data.len())
        .filter(|&i| mask.data[i])
        .map(|i| (i / mask.width, i % mask.width))
        .collect()
}

/// `m` valid pixels drawn uniformly without replacement (with replacement,
/// and a warning, when fewer than `m` exist).
pub fn make_batch<R: Rng + ?Sized>(valid: &[(usize, usize)], rng: &mut R, m: usize) -> Result<Vec<(usize, usize)>> {
    if valid.is_empty() {
        return invalid("no valid pixels to sample");
    }
    if m <= valid.len() {
        Ok(index::sample(rng, valid.len(), m).into_iter().map(|i| valid[i]).collect())
    } else {
        warn!("only {} valid pixels for a batch of {m}; sampling with replacement", valid.len());
        Ok((0..m).map(|_| valid[rng.random_range(0..valid.len())]).collect())
    }
}

/// One logged training row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub photo: f64,
    pub dist: f64,
    pub surface: f64,
    pub total: f64,
    pub wall_clock_s: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "iteration,photo,dist,surface,total,wall_clock_s";

    pub fn new(iteration: usize, r: &LossReport, wall_clock_s: f64) -> Self {
        Self {
            iteration,
            photo: r.photo,
            dist: r.dist,
            surface: r.surface,
            total: r.total,
            wall_clock_s,
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.3}",
            self.iteration, self.photo, self.dist, self.surface, self.total, self.wall_clock_s
        )
    }
}

/// Runtime knobs that do not change the result.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Worker threads; 0 uses the rayon default.
    pub workers: usize,
    /// Where to dump the grid if the loss turns non-finite.
    pub snapshot_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub grid: DensityGrid,
    pub log: Vec<LogRow>,
    pub elapsed_s: f64,
    pub frame: NdcFrame,
    pub sampling: SamplingConfig,
}

/// The grid's sampling layout under `config`.
pub fn sampling_for(grid: &DensityGrid, config: &TrainConfig, jitter: bool) -> Result<SamplingConfig> {
    SamplingConfig::for_grid(grid, config.step_size, config.z_max, jitter)
}

pub fn train(
    captures: &[Image],
    patterns: &[Pattern],
    cam: &CameraModel,
    proj: &ProjectorModel,
    config: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainResult> {
    config.validate()?;
    if captures.len() != patterns.len() {
        return invalid(format!("{} captures for {} patterns", captures.len(), patterns.len()));
    }
    let frame = ndc_frame_from_camera(cam, config.near_plane()?)?;
    let stats = compute_background_and_contrast(captures, config.f_min)?;
    let stack = PatternStack::with_blur(patterns, config.pattern_blur)?;
    let probe = DensityGrid::new(config.grid_dims, 0.0)?;
    let sampling = sampling_for(&probe, config, config.jitter)?;
    let bias = init_bias(config.alpha_init, sampling.delta())?;
    let mut grid = DensityGrid::new(config.grid_dims, bias)?;
    let mut state = OptimizerState::new(&grid);
    let view = TrainingView {
        cam,
        proj,
        frame,
        patterns: &stack,
        captures,
        stats: &stats,
        sampling,
        min_transmittance: config.min_transmittance,
    };
    view.validate(&grid)?;
    let valid = valid_pixels(&stats.valid);
    info!(
        "training {:?} grid, {} samples/ray, {} valid pixels, {} iterations",
        grid.dims,
        sampling.samples,
        valid.len(),
        config.total_iters()
    );

    let mut pool = rayon::ThreadPoolBuilder::new();
    if opts.workers > 0 {
        pool = pool.num_threads(opts.workers);
    }
    let pool = pool.build().map_err(|e| Error::Config(e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let start = Instant::now();
    let mut log = Vec::new();
    let total = config.total_iters();
    pool.install(|| -> Result<()> {
        for it in 1..=total {
            let batch = make_batch(&valid, &mut rng, config.rays_per_iter)?;
            let weights = config.loss_weights_at(it);
            let jitter_seed = splitmix64(config.seed ^ (it as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let (report, grad) = backward_batch(&view, &grid, &batch, &weights, Some(jitter_seed))?;
            if !report.is_finite() || !grad.all_finite() {
                let snapshot = match &opts.snapshot_path {
                    Some(p) => {
                        crate::io::write_checkpoint(p, &grid)?;
                        Some(p.clone())
                    }
                    None => None,
                };
                return Err(Error::NonFiniteLoss {
                    iteration: it,
                    snapshot,
                });
            }
            if it % config.log_interval == 0 || it == total || it == 1 {
                let row = LogRow::new(it, &report, start.elapsed().as_secs_f64());
                info!("{}", row.csv_line());
                log.push(row);
            }
            adam_step(&mut grid, &grad, &mut state, config.learning_rate_at(it))?;
        }
        Ok(())
    })?;
    let elapsed_s = start.elapsed().as_secs_f64();
    info!("training finished in {elapsed_s:.1} s");
    Ok(TrainResult {
        grid,
        log,
        elapsed_s,
        frame,
        sampling: SamplingConfig {
            jitter: false,
            ..sampling
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractOptions {
    pub w_min: f64,
    pub normalize_depth: bool,
}

impl From<&TrainConfig> for ExtractOptions {
    fn from(c: &TrainConfig) -> Self {
        Self {
            w_min: c.w_min,
            normalize_depth: c.normalize_depth,
        }
    }
}

/// Accumulated weight and depth of the rendered surface point for every
/// camera pixel, sampling at interval midpoints.
///
/// The surface point is `sum_i w_i x_i` in the camera frame (divided by
/// `sum_i w_i` when normalizing); its depth is its distance along `-z`.
pub fn render_depth(grid: &DensityGrid, cam: &CameraModel, frame: &NdcFrame, sampling: &SamplingConfig, normalize: bool) -> (Vec<f64>, Vec<f64>) {
    let nz = grid.dims[2];
    let k = sampling.samples;
    let step = sampling.step();
    let delta = sampling.delta();
    let z: Vec<f64> = (0..k).map(|i| -1.0 + step * (i as f64 + 0.5)).collect();
    let depth_i: Vec<f64> = z.iter().map(|&z| frame.depth_of(z)).collect();
    let cells: Vec<(usize, f64)> = z.iter().map(|&z| lattice_coord(z, nz)).collect();
    let out: Vec<(f64, f64)> = (0..cam.pixel_count())
        .into_par_iter()
        .map_init(
            || vec![0.0; nz],
            |profile, i| {
                let px = (i / cam.width, i % cam.width);
                let (xs, ys) = pixel_ndc_xy(cam, px);
                grid.gather_column(&grid.column_stencil(xs, ys), profile);
                let (mut t, mut w_sum, mut d_sum) = (1.0, 0.0, 0.0);
                for (&(iz, tz), &d) in cells.iter().zip(&depth_i) {
                    let raw = profile[iz] + (profile[iz + 1] - profile[iz]) * tz;
                    let keep = (-activate(raw, grid.bias) * delta).exp();
                    let w = t * (1.0 - keep);
                    w_sum += w;
                    d_sum += w * d;
                    t *= keep;
                }
                let depth = if normalize && w_sum > 0.0 { d_sum / w_sum } else { d_sum };
                (w_sum, depth)
            },
        )
        .collect();
    out.into_iter().unzip()
}

/// Depth and disparity maps of the trained grid; pixels whose accumulated
/// weight is below `w_min` are invalid.
pub fn extract_depth_map(
    grid: &DensityGrid,
    cam: &CameraModel,
    frame: &NdcFrame,
    sampling: &SamplingConfig,
    opts: ExtractOptions,
    baseline: f64,
) -> Result<(DepthMap, DisparityMap)> {
    let sampling = SamplingConfig {
        jitter: false,
        ..*sampling
    };
    let (w_sum, depth) = render_depth(grid, cam, frame, &sampling, opts.normalize_depth);
    let valid = Mask {
        width: cam.width,
        height: cam.height,
        data: w_sum.iter().map(|&w| w >= opts.w_min).collect(),
    };
    let depth = DepthMap::new(cam.width, cam.height, depth, valid)?;
    let disp = depth_to_disparity(&depth, cam.fx, baseline)?;
    Ok((depth, disp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;
    use crate::simulator::{analytic_scene, simulate_captures, RadiometricParams, SceneKind};
    use approx::assert_relative_eq;

    #[test]
    fn defaults_match_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.grid_dims, [256, 256, 256]);
        assert_eq!((c.rays_per_iter, c.phase1_iters, c.phase2_iters), (8192, 3000, 29000));
        assert_eq!((c.lambda_d, c.lambda_s_phase2, c.alpha_init, c.step_size), (0.01, 1.0, 1e-2, 0.5));
        assert_eq!(c.loss_weights_at(3000).lambda_s, 0.0);
        assert_eq!(c.loss_weights_at(3001).lambda_s, 1.0);
        assert_eq!(c.loss_weights_at(1).lambda_d, 0.01);
        assert_eq!(c.loss_weights_at(32000).lambda_d, 0.01);
        assert_relative_eq!(c.learning_rate_at(1), 0.1, epsilon = 1e-15);
        assert_relative_eq!(c.learning_rate_at(32000), 0.01, epsilon = 1e-15);
        assert!(c.learning_rate_at(100) > c.learning_rate_at(200));
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let c: TrainConfig = serde_json::from_str(r#"{"rays_per_iter": 64, "near": 300}"#).unwrap();
        assert_eq!(c.rays_per_iter, 64);
        assert_eq!(c.near, Some(300.0));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"rays": 64}"#).is_err());
    }

    #[test]
    fn samples_per_ray_follow_grid_depth() {
        let c = TrainConfig::default();
        let g = DensityGrid::new([2, 2, 256], 0.0).unwrap();
        let s = sampling_for(&g, &c, false).unwrap();
        assert!((s.samples as f64 - 2.0 * 256.0).abs() <= 1.0);
        let c = TrainConfig { z_max: 0.5, ..c };
        let s = sampling_for(&g, &c, false).unwrap();
        assert!((s.samples as f64 - 2.0 * 256.0 * 1.5 / 2.0).abs() <= 1.0);
    }

    #[test]
    fn batches() {
        let mask = Mask::filled(7, 5, true);
        let valid = valid_pixels(&mask);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = make_batch(&valid, &mut rng, 35).unwrap();
        b.sort();
        assert_eq!(b, valid);

        let a1 = make_batch(&valid, &mut ChaCha8Rng::seed_from_u64(4), 10).unwrap();
        let a2 = make_batch(&valid, &mut ChaCha8Rng::seed_from_u64(4), 10).unwrap();
        assert_eq!(a1, a2);

        let mut sparse = Mask::filled(7, 5, false);
        for i in [3, 8, 20] {
            sparse.data[i] = true;
        }
        let valid = valid_pixels(&sparse);
        let b = make_batch(&valid, &mut rng, 50).unwrap();
        assert_eq!(b.len(), 50);
        assert!(b.iter().all(|&(r, c)| sparse.get(r, c)));
        let b = make_batch(&valid, &mut rng, 3).unwrap();
        assert!(b.iter().all(|&(r, c)| sparse.get(r, c)));
        assert!(make_batch(&[], &mut rng, 3).is_err());
    }

    fn tiny_grid() -> (DensityGrid, GridGradient, OptimizerState) {
        let g = DensityGrid::new([2, 2, 2], 0.0).unwrap();
        let grad = GridGradient::zeros_like(&g);
        let st = OptimizerState::new(&g);
        (g, grad, st)
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let (mut g, grad, mut st) = tiny_grid();
        g.raw.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32);
        let before = g.clone();
        adam_step(&mut g, &grad, &mut st, 0.1).unwrap();
        assert_eq!(g, before);
    }

    #[test]
    fn adam_descends_on_a_parabola() {
        let (mut g, mut grad, mut st) = tiny_grid();
        g.raw[0] = 1.0;
        for _ in 0..50 {
            grad.raw_grad[0] = 2.0 * g.raw[0] as f64;
            let before = g.raw[0];
            adam_step(&mut g, &grad, &mut st, 0.1).unwrap();
            if st.step_count == 1 {
                assert!(g.raw[0] < before);
                assert_relative_eq!((before - g.raw[0]) as f64, 0.1, epsilon = 1e-6);
            }
        }
        assert!(g.raw[0].abs() < 0.2);
    }

    /// `|step| <= lr (1 - b1) / sqrt(1 - b2) * sqrt(sum_{j<t} g^j) * sqrt(1 - b2^t) / (1 - b1^t)`
    /// with `g = b1^2 / b2`, from Cauchy-Schwarz on the moment sums.
    fn adam_bound(lr: f64, t: i32) -> f64 {
        let gamma = ADAM_BETA1 * ADAM_BETA1 / ADAM_BETA2;
        let geo: f64 = (0..t).map(|j| gamma.powi(j)).sum();
        lr * (1.0 - ADAM_BETA1) / (1.0 - ADAM_BETA2).sqrt() * geo.sqrt() * (1.0 - ADAM_BETA2.powi(t)).sqrt()
            / (1.0 - ADAM_BETA1.powi(t))
    }

    #[test]
    fn adam_update_bounds() {
        let (mut g, mut grad, mut st) = tiny_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lr = 0.1;
        for _ in 0..300 {
            for v in grad.raw_grad.iter_mut() {
                *v = rng.random_range(-5.0..5.0);
            }
            let before = g.raw.clone();
            adam_step(&mut g, &grad, &mut st, lr).unwrap();
            let bound = adam_bound(lr, st.step_count as i32);
            for (a, b) in before.iter().zip(&g.raw) {
                assert!(((a - b) as f64).abs() <= bound * (1.0 + 1e-5) + 1e-6);
            }
        }
        // a constant gradient steps by lr exactly, up to eps
        let (mut g, mut grad, mut st) = tiny_grid();
        grad.raw_grad.iter_mut().for_each(|v| *v = 2.5);
        for _ in 0..50 {
            let before = g.raw.clone();
            adam_step(&mut g, &grad, &mut st, lr).unwrap();
            for (a, b) in before.iter().zip(&g.raw) {
                assert!((((a - b) as f64) - lr).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn adam_is_sparse() {
        let (mut g, mut grad, mut st) = tiny_grid();
        grad.raw_grad[3] = 1.0;
        adam_step(&mut g, &grad, &mut st, 0.1).unwrap();
        for (i, &v) in g.raw.iter().enumerate() {
            assert_eq!(v != 0.0, i == 3);
        }
        assert_eq!(st.first_moment[0], 0.0);
    }

    fn extraction_rig() -> (CameraModel, NdcFrame) {
        let cam = CameraModel::new(50.0, 50.0, 20.0, 15.0, 40, 30, RigidTransform::identity()).unwrap();
        let frame = ndc_frame_from_camera(&cam, 400.0).unwrap();
        (cam, frame)
    }

    #[test]
    fn slab_extraction() {
        let (cam, frame) = extraction_rig();
        let mut grid = DensityGrid::new([9, 9, 33], init_bias(1e-2, 0.5).unwrap()).unwrap();
        let slab = 20;
        for ix in 0..9 {
            for iy in 0..9 {
                for iz in 0..33 {
                    let i = grid.index(ix, iy, iz);
                    grid.raw[i] = if iz == slab { 200.0 } else { -200.0 };
                }
            }
        }
        let sampling = SamplingConfig::for_grid(&grid, 0.5, 1.0, false).unwrap();
        let opts = ExtractOptions {
            w_min: 0.5,
            normalize_depth: false,
        };
        let (d, disp) = extract_depth_map(&grid, &cam, &frame, &sampling, opts, 100.0).unwrap();
        let z_slab = grid.node_coord(2, slab);
        assert_eq!(d.valid.count(), cam.pixel_count());
        for &depth in &d.depth {
            let z = frame.ndc_of_depth(depth);
            assert!((z - z_slab).abs() <= 0.5 * grid.voxel_size_z(), "{z} vs {z_slab}");
        }
        assert!(disp.valid.data.iter().all(|&v| v));

        let (d2, _) = extract_depth_map(&grid, &cam, &frame, &sampling, opts, 100.0).unwrap();
        assert_eq!(d.depth, d2.depth);
        assert_eq!(d.valid, d2.valid);
    }

    #[test]
    fn empty_grid_extracts_nothing() {
        let (cam, frame) = extraction_rig();
        let grid = DensityGrid::new([9, 9, 33], init_bias(1e-3, 0.5).unwrap()).unwrap();
        let sampling = SamplingConfig::for_grid(&grid, 0.5, 1.0, false).unwrap();
        let opts = ExtractOptions {
            w_min: 0.5,
            normalize_depth: false,
        };
        let (d, _) = extract_depth_map(&grid, &cam, &frame, &sampling, opts, 100.0).unwrap();
        assert_eq!(d.valid.count(), 0);
    }

    fn tiny_problem() -> (Vec<Image>, Vec<Pattern>, CameraModel, ProjectorModel, TrainConfig) {
        let cam = CameraModel::reference_camera().scaled(0.0625).unwrap();
        let intr = CameraModel::reference_projector_intrinsics().scaled(0.125).unwrap();
        let proj = ProjectorModel::new(
            CameraModel {
                pose: RigidTransform::from_yaw((209.39f64 / 1000.0).atan(), crate::geometry::Vec3::new(209.39, 0.0, 0.0)),
                ..intr
            },
            &cam,
        );
        let pats: Vec<Pattern> = (0..4)
            .map(|s| crate::patterns::random_binary_pattern(proj.width(), proj.height(), 3, s).unwrap().blurred(0.7))
            .collect();
        let scene = analytic_scene(SceneKind::Plane { depth: 1000.0 }, &cam).unwrap();
        let sim = simulate_captures(&scene, &pats, &cam, &proj, &RadiometricParams::default(), 0).unwrap();
        let config = TrainConfig {
            grid_dims: [16, 16, 24],
            rays_per_iter: 256,
            phase1_iters: 150,
            phase2_iters: 50,
            near: Some(500.0),
            log_interval: 50,
            ..Default::default()
        };
        (sim.captures, pats, cam, proj, config)
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let (caps, pats, cam, proj, config) = tiny_problem();
        let a = train(&caps, &pats, &cam, &proj, &config, &TrainOptions { workers: 1, ..Default::default() }).unwrap();
        let b = train(&caps, &pats, &cam, &proj, &config, &TrainOptions { workers: 3, ..Default::default() }).unwrap();
        assert_eq!(a.grid, b.grid);
        let first = a.log.first().unwrap();
        let at150 = a.log.iter().find(|r| r.iteration == 150).unwrap();
        assert!(at150.total < first.total);
        assert_eq!(a.log.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![1, 50, 100, 150, 200]);
        assert_eq!(a.log[..4].iter().map(|r| r.total - r.photo - 0.01 * r.dist).map(f64::abs).fold(0.0, f64::max) < 1e-12, true);
    }

    #[test]
    fn train_rejects_bad_input() {
        let (caps, pats, cam, proj, config) = tiny_problem();
        let opts = TrainOptions::default();
        assert!(train(&caps[..2], &pats, &cam, &proj, &config, &opts).is_err());
        let no_near = TrainConfig { near: None, ..config.clone() };
        assert!(matches!(train(&caps, &pats, &cam, &proj, &no_near, &opts), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_loss_aborts_with_snapshot() {
        let (mut caps, pats, cam, proj, config) = tiny_problem();
        caps[0].data.iter_mut().for_each(|v| *v = f64::NAN);
        caps[0].data[0] = 0.0;
        let dir = tempfile::tempdir().unwrap();
        let snap = dir.path().join("snap.vslg");
        let opts = TrainOptions {
            workers: 1,
            snapshot_path: Some(snap.clone()),
        };
        // min/max skip NaN, so pixels stay valid while their residuals turn NaN
        let err = train(&caps, &pats, &cam, &proj, &config, &opts).unwrap_err();
        match err {
            Error::NonFiniteLoss { iteration, snapshot } => {
                assert_eq!(iteration, 1);
                assert_eq!(snapshot, Some(snap.clone()));
                assert!(snap.exists());
            }
            other => panic!("unexpected {other}"),
        }
    }
}
