//! Density voxel grid over the NDC cube `[-1, 1]^3`.
//!
//! The grid stores raw (pre-activation) densities on an `nx * ny * nz`
//! lattice whose nodes sit at `-1 + 2 i / (n - 1)` along each axis. Queries
//! interpolate trilinearly; the softplus activation is applied after
//! interpolation. Storage is z-fastest so the samples of one camera ray
//! (fixed `x*`, `y*`, varying `z*`) read contiguous memory.

use std::io::{Read, Write};

use crate::error::{invalid, Error, Result};
use crate::geometry::Vec3;

const MAGIC: &[u8; 4] = b"VSLG";
const VERSION: u32 = 1;

/// Shift `b` so that a zero raw density yields opacity `alpha_init` over an
/// interval of length `delta`.
pub fn init_bias(alpha_init: f64, delta: f64) -> Result<f64> {
    if !(alpha_init > 0.0 && alpha_init < 1.0) {
        return invalid(format!("alpha_init must lie in (0, 1), got {alpha_init}"));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return invalid(format!("step size must be positive, got {delta}"));
    }
    Ok(((1.0 - alpha_init).powf(-1.0 / delta) - 1.0).ln())
}

/// Shifted softplus `log(1 + exp(raw + b))`.
#[inline]
pub fn activate(raw: f64, b: f64) -> f64 {
    let z = raw + b;
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

/// Derivative of [`activate`] with respect to `raw`: `sigmoid(raw + b)`.
#[inline]
pub fn activate_grad(raw: f64, b: f64) -> f64 {
    let z = raw + b;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Lattice coordinate of an NDC coordinate along an axis with `n` nodes,
/// clamped to the cube: returns the lower node and the fractional offset.
#[inline]
pub(crate) fn lattice_coord(c: f64, n: usize) -> (usize, f64) {
    let g = ((c.clamp(-1.0, 1.0) + 1.0) * 0.5) * (n - 1) as f64;
    let i0 = (g as usize).min(n - 2);
    (i0, g - i0 as f64)
}

/// Eight-corner trilinear stencil: flat indices and weights.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

/// Four-column stencil in the xy-plane; columns are flat offsets of the
/// `z = 0` node of each column.
#[derive(Debug, Clone, Copy)]
pub struct ColumnStencil {
    pub offset: [usize; 4],
    pub weight: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub raw: Vec<f32>,
    pub dims: [usize; 3],
    pub bias: f64,
}

impl DensityGrid {
    /// All raw values start at exactly zero.
    pub fn new(dims: [usize; 3], bias: f64) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return invalid(format!("grid dims must be >= 2 per axis, got {dims:?}"));
        }
        if !bias.is_finite() {
            return invalid("bias must be finite");
        }
        let len = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::InvalidArgument("grid too large".into()))?;
        Ok(Self {
            raw: vec![0.0; len],
            dims,
            bias,
        })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.dims[1] + iy) * self.dims[2] + iz
    }

    /// NDC coordinate of lattice node `i` along `axis`.
    pub fn node_coord(&self, axis: usize, i: usize) -> f64 {
        -1.0 + 2.0 * i as f64 / (self.dims[axis] - 1) as f64
    }

    /// Length of one voxel along NDC `z`: the cube depth divided by `nz`.
    pub fn voxel_size_z(&self) -> f64 {
        2.0 / self.dims[2] as f64
    }

    pub fn stencil(&self, x: &Vec3) -> Stencil {
        let (ix, tx) = lattice_coord(x.x, self.dims[0]);
        let (iy, ty) = lattice_coord(x.y, self.dims[1]);
        let (iz, tz) = lattice_coord(x.z, self.dims[2]);
        let mut index = [0usize; 8];
        let mut weight = [0.0f64; 8];
        for corner in 0..8 {
            let (dx, dy, dz) = (corner >> 2 & 1, corner >> 1 & 1, corner & 1);
            index[corner] = self.index(ix + dx, iy + dy, iz + dz);
            let wx = if dx == 1 { tx } else { 1.0 - tx };
            let wy = if dy == 1 { ty } else { 1.0 - ty };
            let wz = if dz == 1 { tz } else { 1.0 - tz };
            weight[corner] = wx * wy * wz;
        }
        Stencil { index, weight }
    }

    pub fn column_stencil(&self, x_ndc: f64, y_ndc: f64) -> ColumnStencil {
        let (ix, tx) = lattice_coord(x_ndc, self.dims[0]);
        let (iy, ty) = lattice_coord(y_ndc, self.dims[1]);
        ColumnStencil {
            offset: [
                self.index(ix, iy, 0),
                self.index(ix, iy + 1, 0),
                self.index(ix + 1, iy, 0),
                self.index(ix + 1, iy + 1, 0),
            ],
            weight: [
                (1.0 - tx) * (1.0 - ty),
                (1.0 - tx) * ty,
                tx * (1.0 - ty),
                tx * ty,
            ],
        }
    }

    /// Blends the four columns of a stencil into one z-profile of raw values.
    pub fn gather_column(&self, stencil: &ColumnStencil, out: &mut [f64]) {
        let nz = self.dims[2];
        debug_assert_eq!(out.len(), nz);
        out.fill(0.0);
        for c in 0..4 {
            let w = stencil.weight[c];
            if w == 0.0 {
                continue;
            }
            let col = &self.raw[stencil.offset[c]..stencil.offset[c] + nz];
            for (o, &r) in out.iter_mut().zip(col) {
                *o += w * r as f64;
            }
        }
    }

    /// Trilinear interpolation of the raw values; coordinates outside the
    /// cube are clamped to its surface.
    pub fn query_raw(&self, x: &Vec3) -> f64 {
        let s = self.stencil(x);
        s.index
            .iter()
            .zip(&s.weight)
            .map(|(&i, &w)| w * self.raw[i] as f64)
            .sum()
    }

    /// Activated density at an NDC point.
    pub fn query_density(&self, x: &Vec3) -> f64 {
        activate(self.query_raw(x), self.bias)
    }

    pub fn all_finite(&self) -> bool {
        self.raw.iter().all(|v| v.is_finite())
    }

    /// Little-endian checkpoint: magic, version, dims, bias, raw values.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::InvalidArgument("dim exceeds u32".into()))?;
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&self.bias.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.raw.len() * 4);
        for v in &self.raw {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let header = 4 + 4 + 12 + 8;
        if bytes.len() < header {
            return Err(Error::Parse {
                offset: bytes.len(),
                message: "truncated checkpoint header".into(),
            });
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "bad checkpoint magic".into(),
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::Parse {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
        let bias = f64::from_le_bytes(bytes[20..28].try_into().unwrap());
        let mut grid = Self::new(dims, bias).map_err(|e| Error::Parse {
            offset: 8,
            message: e.to_string(),
        })?;
        let expected = header + grid.raw.len() * 4;
        if bytes.len() != expected {
            return Err(Error::Parse {
                offset: bytes.len().min(expected),
                message: format!("expected {expected} bytes, found {}", bytes.len()),
            });
        }
        for (v, chunk) in grid.raw.iter_mut().zip(bytes[header..].chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(grid)
    }
}

/// Adjoint buffer of a [`DensityGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridGradient {
    pub raw_grad: Vec<f64>,
    pub dims: [usize; 3],
}

impl GridGradient {
    pub fn zeros_like(grid: &DensityGrid) -> Self {
        Self {
            raw_grad: vec![0.0; grid.raw.len()],
            dims: grid.dims,
        }
    }

    /// Scatters `upstream` over the trilinear stencil of `x`; the adjoint of
    /// [`DensityGrid::query_raw`].
    pub fn accumulate_grad(&mut self, grid: &DensityGrid, x: &Vec3, upstream: f64) {
        debug_assert_eq!(self.dims, grid.dims);
        let s = grid.stencil(x);
        for (&i, &w) in s.index.iter().zip(&s.weight) {
            self.raw_grad[i] += upstream * w;
        }
    }

    /// Scatters a column-profile gradient back onto the four columns.
    pub fn scatter_column(&mut self, stencil: &ColumnStencil, column_grad: &[f64]) {
        let nz = self.dims[2];
        for c in 0..4 {
            let w = stencil.weight[c];
            if w == 0.0 {
                continue;
            }
            let dst = &mut self.raw_grad[stencil.offset[c]..stencil.offset[c] + nz];
            for (d, &g) in dst.iter_mut().zip(column_grad) {
                *d += w * g;
            }
        }
    }

    pub fn fill_zero(&mut self) {
        self.raw_grad.fill(0.0);
    }

    pub fn all_finite(&self) -> bool {
        self.raw_grad.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, k: f64) {
        self.raw_grad.iter_mut().for_each(|g| *g *= k);
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.raw_grad.iter().zip(other).map(|(a, b)| a * b).sum()
    }
}
