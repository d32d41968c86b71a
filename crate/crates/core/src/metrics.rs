//! Depth/disparity conversion and evaluation metrics: MAE with outlier
//! substitution and the outlier percentage `o(t)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::raster::{Image, Mask};

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// Metric depth in mm; meaningful only where `valid`.
    pub depth: Vec<f64>,
    pub valid: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub width: usize,
    pub height: usize,
    /// Disparity in px; meaningful only where `valid`.
    pub disp: Vec<f64>,
    pub valid: Mask,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, depth: Vec<f64>, valid: Mask) -> Result<Self> {
        if depth.len() != width * height || (valid.width, valid.height) != (width, height) {
            return invalid("depth map and mask sizes disagree");
        }
        let valid = Mask {
            width,
            height,
            data: valid
                .data
                .iter()
                .zip(&depth)
                .map(|(&v, &d)| v && d.is_finite() && d > 0.0)
                .collect(),
        };
        Ok(Self {
            width,
            height,
            depth,
            valid,
        })
    }

    /// Valid wherever the value is finite and positive (the convention used
    /// for PFM files, where invalid pixels hold 0 or a non-finite value).
    pub fn from_image(img: &Image) -> Self {
        let valid = Mask {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|&d| d.is_finite() && d > 0.0).collect(),
        };
        Self {
            width: img.width,
            height: img.height,
            depth: img.data.clone(),
            valid,
        }
    }

    /// Invalid pixels become 0.
    pub fn to_image(&self) -> Image {
        let data = self
            .depth
            .iter()
            .zip(&self.valid.data)
            .map(|(&d, &v)| if v { d } else { 0.0 })
            .collect();
        Image::new(self.width, self.height, data).expect("consistent sizes")
    }

    /// Same depths with the validity further restricted by `mask`.
    pub fn restricted(&self, mask: &Mask) -> Self {
        Self {
            valid: self.valid.and(mask),
            ..self.clone()
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Mean over valid pixels, `None` if there are none.
    pub fn mean_valid(&self) -> Option<f64> {
        let (sum, count) = self
            .depth
            .iter()
            .zip(&self.valid.data)
            .filter(|(_, &v)| v)
            .fold((0.0, 0usize), |(s, c), (&d, _)| (s + d, c + 1));
        (count > 0).then(|| sum / count as f64)
    }
}

impl DisparityMap {
    /// Invalid pixels become 0.
    pub fn to_image(&self) -> Image {
        let data = self
            .disp
            .iter()
            .zip(&self.valid.data)
            .map(|(&d, &v)| if v { d } else { 0.0 })
            .collect();
        Image::new(self.width, self.height, data).expect("consistent sizes")
    }

    pub fn from_image(img: &Image) -> Self {
        let d = DepthMap::from_image(img);
        Self {
            width: d.width,
            height: d.height,
            disp: d.depth,
            valid: d.valid,
        }
    }
}

fn check_scale(fx: f64, baseline: f64) -> Result<()> {
    if !(fx > 0.0 && baseline > 0.0) {
        return invalid(format!("fx and baseline must be positive, got ({fx}, {baseline})"));
    }
    Ok(())
}

/// `disp = fx * baseline / depth` on valid pixels.
pub fn depth_to_disparity(d: &DepthMap, fx: f64, baseline: f64) -> Result<DisparityMap> {
    check_scale(fx, baseline)?;
    let k = fx * baseline;
    Ok(DisparityMap {
        width: d.width,
        height: d.height,
        disp: d
            .depth
            .iter()
            .zip(&d.valid.data)
            .map(|(&z, &v)| if v { k / z } else { 0.0 })
            .collect(),
        valid: d.valid.clone(),
    })
}

pub fn disparity_to_depth(d: &DisparityMap, fx: f64, baseline: f64) -> Result<DepthMap> {
    check_scale(fx, baseline)?;
    let k = fx * baseline;
    DepthMap::new(
        d.width,
        d.height,
        d.disp
            .iter()
            .zip(&d.valid.data)
            .map(|(&p, &v)| if v { k / p } else { 0.0 })
            .collect(),
        d.valid.clone(),
    )
}

/// Disparity threshold for declaring an estimate an outlier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlierRule {
    pub threshold_px: f64,
    pub fx: f64,
    pub baseline: f64,
}

/// Mean absolute depth error over pixels valid in `gt`.
///
/// Estimated pixels that are invalid are replaced by the mean of the valid
/// estimated depths. With a rule, pixels whose disparity error exceeds the
/// threshold are replaced the same way.
pub fn mae_depth(est: &DepthMap, gt: &DepthMap, rule: Option<OutlierRule>) -> Result<f64> {
    if est.dims() != gt.dims() {
        return invalid(format!("size mismatch: {:?} vs {:?}", est.dims(), gt.dims()));
    }
    if gt.valid.count() == 0 {
        return invalid("ground truth has no valid pixels");
    }
    if let Some(r) = rule {
        check_scale(r.fx, r.baseline)?;
    }
    let fill = est
        .mean_valid()
        .ok_or_else(|| Error::Domain("estimate has no valid pixels".into()))?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..gt.depth.len() {
        if !gt.valid.data[i] {
            continue;
        }
        let g = gt.depth[i];
        let mut e = if est.valid.data[i] { est.depth[i] } else { fill };
        if let Some(r) = rule {
            if est.valid.data[i] {
                let k = r.fx * r.baseline;
                if (k / e - k / g).abs() > r.threshold_px {
                    e = fill;
                }
            }
        }
        sum += (e - g).abs();
        count += 1;
    }
    Ok(sum / count as f64)
}

/// Percentage of GT-valid pixels whose disparity error exceeds `t`; invalid
/// estimates count as outliers.
pub fn outlier_percentage(est: &DisparityMap, gt: &DisparityMap, t: f64) -> Result<f64> {
    if (est.width, est.height) != (gt.width, gt.height) {
        return invalid("size mismatch");
    }
    if !(t > 0.0) {
        return invalid(format!("threshold must be positive, got {t}"));
    }
    let total = gt.valid.count();
    if total == 0 {
        return invalid("ground truth has no valid pixels");
    }
    let bad = (0..gt.disp.len())
        .filter(|&i| gt.valid.data[i])
        .filter(|&i| !est.valid.data[i] || (est.disp[i] - gt.disp[i]).abs() > t)
        .count();
    Ok(100.0 * bad as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierEntry {
    pub t: f64,
    pub percent: f64,
    /// MAE with outliers at this threshold replaced by the mean estimate.
    pub mae_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae_mm: f64,
    pub outliers: Vec<OutlierEntry>,
    pub evaluated_pixels: usize,
    pub invalid_estimates: usize,
}

/// MAE plus `o(t)` for each threshold, over pixels valid in `gt`.
pub fn evaluate(est: &DepthMap, gt: &DepthMap, fx: f64, baseline: f64, thresholds: &[f64]) -> Result<EvalReport> {
    let est_disp = depth_to_disparity(est, fx, baseline)?;
    let gt_disp = depth_to_disparity(gt, fx, baseline)?;
    let mut outliers = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        outliers.push(OutlierEntry {
            t,
            percent: outlier_percentage(&est_disp, &gt_disp, t)?,
            mae_mm: mae_depth(
                est,
                gt,
                Some(OutlierRule {
                    threshold_px: t,
                    fx,
                    baseline,
                }),
            )?,
        });
    }
    let invalid_estimates = (0..gt.depth.len())
        .filter(|&i| gt.valid.data[i] && !est.valid.data[i])
        .count();
    Ok(EvalReport {
        mae_mm: mae_depth(est, gt, None)?,
        outliers,
        evaluated_pixels: gt.valid.count(),
        invalid_estimates,
    })
}

/// Table-style rounding: MAE to three decimals, percentages to two.
pub fn round_report(r: &EvalReport) -> EvalReport {
    let r3 = |v: f64| (v * 1e3).round() / 1e3;
    let r2 = |v: f64| (v * 1e2).round() / 1e2;
    EvalReport {
        mae_mm: r3(r.mae_mm),
        outliers: r
            .outliers
            .iter()
            .map(|o| OutlierEntry {
                t: o.t,
                percent: r2(o.percent),
                mae_mm: r3(o.mae_mm),
            })
            .collect(),
        ..r.clone()
    }
}
