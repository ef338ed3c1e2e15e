use serde::Serialize;

use super::density::{js_samples, kde_or_spike, DensityEstimate};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::generative::{euler_trajectory, FlowModel};
use crate::synthdata::{ContourSet, Variable};

/// Per-realization mean and within-realization variance of one variable,
/// with a kernel estimate of each.
#[derive(Clone, Debug)]
pub struct RealizationSummary {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub means_kde: DensityEstimate,
    pub variances_kde: DensityEstimate,
}

pub fn realization_summary(realizations: &[ContourSet], var: Variable) -> Result<RealizationSummary> {
    if realizations.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "realization summary needs >= 2 realizations, got {}",
            realizations.len()
        )));
    }
    let mut means = Vec::with_capacity(realizations.len());
    let mut variances = Vec::with_capacity(realizations.len());
    for r in realizations {
        let v = r.raw_values(var);
        if v.is_empty() {
            return Err(Error::InvalidArgument("empty realization".into()));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        means.push(m);
        variances.push(v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64);
    }
    Ok(RealizationSummary {
        means_kde: kde_or_spike(&means)?,
        variances_kde: kde_or_spike(&variances)?,
        means,
        variances,
    })
}

/// Number of local maxima of a tabulated density above `rel_height` times its peak.
pub fn count_modes(d: &DensityEstimate, rel_height: f64) -> usize {
    let peak = d.density.iter().copied().fold(0.0, f64::max);
    d.density
        .windows(3)
        .filter(|w| w[1] > w[0] && w[1] >= w[2] && w[1] >= rel_height * peak)
        .count()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Curvature {
    pub value: f64,
    /// Set when the chord has zero length; `value` is then 0.
    pub degenerate: bool,
}

/// Largest perpendicular distance of a trajectory from the chord between its
/// first and last points, divided by the chord length.
pub fn path_curvature(points: &[Vec<f64>]) -> Result<Curvature> {
    let (first, last) = match (points.first(), points.last()) {
        (Some(a), Some(b)) if points.len() >= 2 => (a, b),
        _ => return Err(Error::InvalidArgument("trajectory needs >= 2 points".into())),
    };
    if points.iter().any(|p| p.len() != first.len()) {
        return Err(Error::shape("path_curvature", "points differ in dimension"));
    }
    let chord: Vec<f64> = last.iter().zip(first).map(|(b, a)| b - a).collect();
    let len = chord.iter().map(|c| c * c).sum::<f64>().sqrt();
    if len == 0.0 {
        return Ok(Curvature {
            value: 0.0,
            degenerate: true,
        });
    }
    let u: Vec<f64> = chord.iter().map(|c| c / len).collect();
    let mut max_dev = 0.0f64;
    for p in points {
        let d: Vec<f64> = p.iter().zip(first).map(|(x, a)| x - a).collect();
        let along: f64 = d.iter().zip(&u).map(|(a, b)| a * b).sum();
        let perp2: f64 = d.iter().zip(&u).map(|(a, b)| (a - along * b).powi(2)).sum();
        max_dev = max_dev.max(perp2.max(0.0).sqrt());
    }
    Ok(Curvature {
        value: max_dev / len,
        degenerate: false,
    })
}

/// Curvature of each batch element's Euler trajectory under an ODE model.
pub fn model_path_curvature(
    model: &FlowModel,
    cond: &Tensor,
    mask: &Tensor,
    x0: &Tensor,
    fine_steps: usize,
) -> Result<Vec<Curvature>> {
    if !model.kind().is_ode() {
        return Err(Error::InvalidArgument(format!("{} model has no ODE trajectory", model.kind())));
    }
    let traj = euler_trajectory(&model.field(cond, mask), x0, fine_steps)?;
    let b = x0.shape()[0];
    let per = x0.numel() / b.max(1);
    (0..b)
        .map(|i| {
            let pts: Vec<Vec<f64>> = traj.iter().map(|s| s.data()[i * per..(i + 1) * per].to_vec()).collect();
            path_curvature(&pts)
        })
        .collect()
}

/// JS divergence per token class between pooled model draws and pooled
/// reference draws. `None` marks classes that do not occur.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassJs {
    pub variable: Variable,
    pub per_class: Vec<Option<f64>>,
    pub unimodal: Vec<bool>,
}

impl ClassJs {
    fn average(&self, keep: impl Fn(usize) -> bool) -> f64 {
        let vals: Vec<f64> = self
            .per_class
            .iter()
            .enumerate()
            .filter(|&(c, _)| keep(c))
            .filter_map(|(_, v)| *v)
            .collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    pub fn mean(&self) -> f64 {
        self.average(|_| true)
    }

    pub fn mean_unimodal(&self) -> f64 {
        self.average(|c| self.unimodal[c])
    }

    pub fn max_unimodal(&self) -> f64 {
        self.per_class
            .iter()
            .zip(&self.unimodal)
            .filter(|(_, &u)| u)
            .filter_map(|(v, _)| *v)
            .fold(f64::NAN, f64::max)
    }
}

fn pool(tokens: &[Vec<usize>], sets: &[Vec<ContourSet>], var: Variable, n_classes: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); n_classes];
    for (toks, draws) in tokens.iter().zip(sets) {
        for d in draws {
            if d.len() != toks.len() {
                return Err(Error::shape("class_js", format!("{} tokens vs {} values", toks.len(), d.len())));
            }
            for (&c, v) in toks.iter().zip(d.raw_values(var)) {
                out.get_mut(c)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown token class {c}")))?
                    .push(v);
            }
        }
    }
    Ok(out)
}

/// `tokens[u]` are utterance `u`'s classes; `model[u]` and `reference[u]`
/// hold its sampled and ground-truth realizations.
pub fn class_js(
    tokens: &[Vec<usize>],
    model: &[Vec<ContourSet>],
    reference: &[Vec<ContourSet>],
    var: Variable,
    unimodal: &[bool],
) -> Result<ClassJs> {
    if tokens.len() != model.len() || tokens.len() != reference.len() {
        return Err(Error::shape("class_js", "utterance counts differ"));
    }
    let n = unimodal.len();
    let a = pool(tokens, model, var, n)?;
    let b = pool(tokens, reference, var, n)?;
    let per_class = a
        .iter()
        .zip(&b)
        .map(|(x, y)| {
            if x.is_empty() || y.is_empty() {
                Ok(None)
            } else {
                js_samples(x, y).map(|r| Some(r.value_nats))
            }
        })
        .collect::<Result<_>>()?;
    Ok(ClassJs {
        variable: var,
        per_class,
        unimodal: unimodal.to_vec(),
    })
}
