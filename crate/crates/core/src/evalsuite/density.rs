use std::f64::consts::{LN_2, PI};

use serde::Serialize;

use crate::error::{Error, Result};

pub const GRID_POINTS: usize = 512;
pub const GRID_PAD_BANDWIDTHS: f64 = 4.0;
pub const DENSITY_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
enum Source {
    Kernel { samples: Vec<f64> },
    Tabulated,
}

/// A density tabulated on an increasing grid. Kernel estimates keep their
/// samples so they can be re-evaluated exactly on another grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityEstimate {
    pub n_samples: usize,
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    source: Source,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| if i == n - 1 { hi } else { lo + i as f64 * step }).collect()
}

pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

fn sample_std(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Scott's rule `n^(-1/5) * sample std`; `None` when the spread is zero or undefined.
pub fn scott_bandwidth(samples: &[f64]) -> Option<f64> {
    if samples.len() < 2 {
        return None;
    }
    let h = (samples.len() as f64).powf(-0.2) * sample_std(samples);
    (h > 0.0 && h.is_finite()).then_some(h)
}

fn kernel_density(samples: &[f64], h: f64, x: f64) -> f64 {
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * PI).sqrt());
    samples
        .iter()
        .map(|s| {
            let z = (x - s) / h;
            (-0.5 * z * z).exp()
        })
        .sum::<f64>()
        * norm
}

/// Gaussian kernel density estimate on `[min - 4h, max + 4h]` with 512 points.
pub fn kde(samples: &[f64], bandwidth: Option<f64>) -> Result<DensityEstimate> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("kde needs at least one sample".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "kde" });
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::InvalidArgument(format!("bandwidth {h} must be > 0"))),
        None => scott_bandwidth(samples).ok_or_else(|| {
            Error::InvalidArgument("samples have zero variance; pass an explicit bandwidth".into())
        })?,
    };
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - GRID_PAD_BANDWIDTHS * h;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + GRID_PAD_BANDWIDTHS * h;
    let grid = linspace(lo, hi, GRID_POINTS);
    let density = grid.iter().map(|&x| kernel_density(samples, h, x)).collect();
    Ok(DensityEstimate {
        n_samples: samples.len(),
        bandwidth: h,
        grid,
        density,
        source: Source::Kernel {
            samples: samples.to_vec(),
        },
    })
}

/// Like [`kde`], but zero-spread samples get a narrow spike of width
/// `1e-3 * max(1, |x|)` instead of an error.
pub fn kde_or_spike(samples: &[f64]) -> Result<DensityEstimate> {
    match samples.first() {
        Some(&x) if scott_bandwidth(samples).is_none() => kde(samples, Some(1e-3 * x.abs().max(1.0))),
        _ => kde(samples, None),
    }
}

impl DensityEstimate {
    /// Tabulates a known density on `n` evenly spaced points of `[lo, hi]`.
    pub fn from_fn(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        if !(lo < hi) || n < 2 {
            return Err(Error::InvalidArgument(format!("bad grid [{lo}, {hi}] with {n} points")));
        }
        let grid = linspace(lo, hi, n);
        let density: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
        if density.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("density values must be finite and >= 0".into()));
        }
        Ok(DensityEstimate {
            n_samples: 0,
            bandwidth: (hi - lo) / (n - 1) as f64,
            grid,
            density,
            source: Source::Tabulated,
        })
    }

    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }

    /// Density at `x`: exact for kernel estimates, linear interpolation
    /// (zero outside the grid) for tabulated ones.
    pub fn eval(&self, x: f64) -> f64 {
        match &self.source {
            Source::Kernel { samples } => kernel_density(samples, self.bandwidth, x),
            Source::Tabulated => {
                let g = &self.grid;
                if x < g[0] || x > g[g.len() - 1] {
                    return 0.0;
                }
                let i = g.partition_point(|&v| v <= x).clamp(1, g.len() - 1);
                let (x0, x1) = (g[i - 1], g[i]);
                let w = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
                self.density[i - 1] * (1.0 - w) + self.density[i] * w
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JSReport {
    pub value_nats: f64,
    pub value_bits: f64,
    pub grid_points: usize,
    pub grid_min: f64,
    pub grid_max: f64,
    pub epsilon: f64,
}

fn union_grid(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let next = if j == b.len() || (i < a.len() && a[i] <= b[j]) {
            i += 1;
            a[i - 1]
        } else {
            j += 1;
            b[j - 1]
        };
        if out.last() != Some(&next) {
            out.push(next);
        }
    }
    out
}

/// Jensen-Shannon divergence between two densities on the sorted union of
/// their grids. Both are floored at [`DENSITY_FLOOR`] and renormalized before
/// the trapezoidal integral; the result is clamped to `[0, ln 2]`.
pub fn js_divergence(p: &DensityEstimate, q: &DensityEstimate) -> Result<JSReport> {
    for d in [p, q] {
        if d.grid.len() < 2 || d.grid.iter().any(|v| !v.is_finite()) || d.grid.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("density grids must be finite, sorted and non-trivial".into()));
        }
    }
    let grid = union_grid(&p.grid, &q.grid);
    let tabulate = |d: &DensityEstimate| -> Vec<f64> {
        let raw: Vec<f64> = grid.iter().map(|&x| d.eval(x).max(DENSITY_FLOOR)).collect();
        let z = trapezoid(&grid, &raw);
        raw.into_iter().map(|v| v / z).collect()
    };
    let (pv, qv) = (tabulate(p), tabulate(q));
    let terms: Vec<f64> = pv
        .iter()
        .zip(&qv)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * (a * (a / m).ln() + b * (b / m).ln())
        })
        .collect();
    let js = trapezoid(&grid, &terms).clamp(0.0, LN_2);
    Ok(JSReport {
        value_nats: js,
        value_bits: js / LN_2,
        grid_points: grid.len(),
        grid_min: grid[0],
        grid_max: grid[grid.len() - 1],
        epsilon: DENSITY_FLOOR,
    })
}

/// JS between the kernel estimates of two sample sets.
pub fn js_samples(a: &[f64], b: &[f64]) -> Result<JSReport> {
    js_divergence(&kde_or_spike(a)?, &kde_or_spike(b)?)
}
