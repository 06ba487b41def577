use crate::error::{Error, Result};

/// Hard cap on chart dimension; keeps node indices on the stack.
pub const MAX_DIM: usize = 4;

/// Structured grid over a periodic box. Node positions are
/// `x_a = i_a * spacing_a` with period `counts_a * spacing_a` on each axis.
#[derive(Debug, Clone)]
pub struct PeriodicGrid {
    counts: [usize; MAX_DIM],
    spacing: [f64; MAX_DIM],
    strides: [usize; MAX_DIM],
    dim: usize,
    len: usize,
}

impl PeriodicGrid {
    pub fn new(counts: &[usize], periods: &[f64]) -> Result<Self> {
        let dim = counts.len();
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::invariant(format!(
                "grid dimension {dim} outside supported range 1..={MAX_DIM}"
            )));
        }
        if periods.len() != dim {
            return Err(Error::invariant("periods length must match dimension"));
        }
        let mut c = [1usize; MAX_DIM];
        let mut s = [1.0f64; MAX_DIM];
        let mut len = 1usize;
        for a in 0..dim {
            if counts[a] < 4 {
                return Err(Error::invariant("need at least 4 nodes per axis"));
            }
            if !(periods[a] > 0.0) || !periods[a].is_finite() {
                return Err(Error::invariant("axis period must be positive and finite"));
            }
            c[a] = counts[a];
            s[a] = periods[a] / counts[a] as f64;
            len *= counts[a];
        }
        // row-major: last axis fastest
        let mut strides = [0usize; MAX_DIM];
        let mut acc = 1usize;
        for a in (0..dim).rev() {
            strides[a] = acc;
            acc *= c[a];
        }
        Ok(PeriodicGrid { counts: c, spacing: s, strides, dim, len })
    }

    /// Square grid with the default box [0, 2*pi)^dim.
    pub fn square(dim: usize, nodes_per_axis: usize) -> Result<Self> {
        let counts = vec![nodes_per_axis; dim];
        let periods = vec![std::f64::consts::TAU; dim];
        Self::new(&counts, &periods)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn count(&self, axis: usize) -> usize {
        self.counts[axis]
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.spacing[axis]
    }

    pub fn period(&self, axis: usize) -> f64 {
        self.spacing[axis] * self.counts[axis] as f64
    }

    pub fn min_spacing(&self) -> f64 {
        (0..self.dim).map(|a| self.spacing[a]).fold(f64::INFINITY, f64::min)
    }

    pub fn axis_index(&self, flat: usize, axis: usize) -> usize {
        (flat / self.strides[axis]) % self.counts[axis]
    }

    pub fn coord(&self, flat: usize, axis: usize) -> f64 {
        self.axis_index(flat, axis) as f64 * self.spacing[axis]
    }

    pub fn position(&self, flat: usize) -> Vec<f64> {
        (0..self.dim).map(|a| self.coord(flat, a)).collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut f = 0usize;
        for a in 0..self.dim {
            f += (idx[a] % self.counts[a]) * self.strides[a];
        }
        f
    }

    /// Neighbor along one axis with periodic wrap. `offset` is in node units.
    pub fn neighbor(&self, flat: usize, axis: usize, offset: i64) -> usize {
        let n = self.counts[axis] as i64;
        let i = self.axis_index(flat, axis) as i64;
        let j = (i + offset).rem_euclid(n) as usize;
        let base = flat - self.axis_index(flat, axis) * self.strides[axis];
        base + j * self.strides[axis]
    }

    /// Shift every axis index by `shift` (periodic). Used by translation tests.
    pub fn shifted(&self, flat: usize, shift: &[i64]) -> usize {
        let mut f = flat;
        for a in 0..self.dim {
            f = self.neighbor(f, a, shift[a]);
        }
        f
    }

    /// Minimal periodic representative of `a - b`, component-wise.
    pub fn wrap_diff(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        for ax in 0..self.dim {
            let p = self.period(ax);
            let mut d = (a[ax] - b[ax]) % p;
            if d > 0.5 * p {
                d -= p;
            } else if d < -0.5 * p {
                d += p;
            }
            out[ax] = d;
        }
    }

    /// Exact periodic Euclidean distance between two chart points.
    pub fn periodic_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut d = [0.0f64; MAX_DIM];
        self.wrap_diff(a, b, &mut d[..self.dim]);
        d[..self.dim].iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|a| self.spacing[a]).product()
    }
}
