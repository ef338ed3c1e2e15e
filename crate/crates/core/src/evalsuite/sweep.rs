use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_TAU_GRID: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

/// Variance statistics for one temperature.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub tau: f64,
    /// Mean over utterances and draws of the variance within one sampled contour.
    pub within_utterance_var: f64,
    /// Mean over utterances of the variance, across draws, of the contour mean.
    pub across_draw_var: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Exactly zero for identical values, which rounding in the mean would otherwise spoil.
fn population_var(v: &[f64]) -> f64 {
    if v.iter().all(|&x| x == v[0]) {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

/// Both variance statistics for one utterance's draws, each a contour.
pub fn draw_statistics(draws: &[Vec<f64>]) -> Result<(f64, f64)> {
    if draws.is_empty() || draws.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("sweep needs non-empty draws".into()));
    }
    let within = mean(&draws.iter().map(|d| population_var(d)).collect::<Vec<_>>());
    let means: Vec<f64> = draws.iter().map(|d| mean(d)).collect();
    Ok((within, population_var(&means)))
}

/// Runs `sample(utterance, tau)` for every utterance and temperature;
/// `sample` returns the drawn contours of one utterance.
pub fn temp_sweep(
    n_utterances: usize,
    taus: &[f64],
    mut sample: impl FnMut(usize, f64) -> Result<Vec<Vec<f64>>>,
) -> Result<SweepTable> {
    if n_utterances == 0 || taus.is_empty() {
        return Err(Error::InvalidArgument("sweep needs utterances and temperatures".into()));
    }
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let mut within = 0.0;
        let mut across = 0.0;
        for u in 0..n_utterances {
            let (w, a) = draw_statistics(&sample(u, tau)?)?;
            within += w;
            across += a;
        }
        rows.push(SweepRow {
            tau,
            within_utterance_var: within / n_utterances as f64,
            across_draw_var: across / n_utterances as f64,
        });
    }
    Ok(SweepTable { rows })
}

impl SweepTable {
    pub fn taus(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.tau).collect()
    }

    pub fn within(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.within_utterance_var).collect()
    }

    pub fn across(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.across_draw_var).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,within_utterance_var,across_draw_var\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.tau, r.within_utterance_var, r.across_draw_var));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogLinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least squares `value = slope * ln(tau) + intercept`. A constant response
/// has no explained variance and reports `r_squared = 0`.
pub fn loglinear_fit(taus: &[f64], values: &[f64]) -> Result<LogLinearFit> {
    if taus.len() != values.len() || taus.len() < 3 {
        return Err(Error::InvalidArgument("log-linear fit needs >= 3 paired points".into()));
    }
    if taus.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::InvalidArgument("log-linear fit needs tau > 0".into()));
    }
    if values.iter().all(|&v| v == values[0]) {
        return Ok(LogLinearFit {
            slope: 0.0,
            intercept: values[0],
            r_squared: 0.0,
        });
    }
    let x: Vec<f64> = taus.iter().map(|t| t.ln()).collect();
    let (mx, my) = (mean(&x), mean(values));
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(values).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = values.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("log-linear fit needs distinct temperatures".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 0.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(LogLinearFit {
        slope,
        intercept,
        r_squared,
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; `0` if either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs >= 2 paired points".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}
