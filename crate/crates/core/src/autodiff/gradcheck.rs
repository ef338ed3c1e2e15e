//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used to build the numeric gradient, so the
//! check stays independent of the backward rules it is validating.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of a gradient check for one input tensor.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Tensor,
    pub numeric: Tensor,
    /// `|a - n|_2 / max(|a|_2 + |n|_2, 1e-12)`
    pub relative_error: f64,
}

fn scalar_loss(f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

/// Checks `d f / d inputs` where `f` builds a scalar on the graph.
pub fn check_gradients(
    inputs: &[Tensor],
    h: f64,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<Vec<GradCheck>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut results = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]).expect("leaf requires grad");
        let mut numeric = Tensor::zeros(input.shape());
        for k in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= h;
            let d = (scalar_loss(&f, &plus)? - scalar_loss(&f, &minus)?) / (2.0 * h);
            numeric.data_mut()[k] = d;
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        results.push(GradCheck {
            relative_error: diff / (na + nn).max(1e-12),
            analytic,
            numeric,
        });
    }
    Ok(results)
}

/// Reduces a tensor-valued output to a scalar by a fixed weighted sum, so that
/// every entry of the Jacobian contributes to the check.
pub fn weighted_sum(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

/// Runs a gradient check for every operator kind on small random inputs
/// drawn from `[-2, 2]` and returns the worst relative error per operator.
pub fn check_all_ops(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rand_t = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0));
    // Keep relu inputs away from the kink so the finite difference is valid.
    let relu_in = rand_t(&[3, 5]).map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });

    type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);
    let w35 = rand_t(&[3, 5]);
    let w234 = rand_t(&[2, 3, 4]);
    let w4 = rand_t(&[2, 4, 3]);
    let w6 = rand_t(&[2, 6]);
    let w_conv = rand_t(&[2, 4, 6]);
    let w_dw = rand_t(&[2, 3, 6]);
    let w_cat = rand_t(&[2, 5]);
    let w_slice = rand_t(&[3, 2]);
    let w_bc = rand_t(&[2, 3, 4]);

    let cases: Vec<Case> = vec![
        ("add", vec![rand_t(&[3, 5]), rand_t(&[5])], {
            let w = w35.clone();
            Box::new(move |g, v| { let o = g.add(v[0], v[1])?; weighted_sum(g, o, &w) })
        }),
        ("sub", vec![rand_t(&[3, 5]), rand_t(&[3, 1])], {
            let w = w35.clone();
            Box::new(move |g, v| { let o = g.sub(v[0], v[1])?; weighted_sum(g, o, &w) })
        }),
        ("mul", vec![rand_t(&[2, 3, 4]), rand_t(&[1, 3, 1])], {
            let w = w234.clone();
            Box::new(move |g, v| { let o = g.mul(v[0], v[1])?; weighted_sum(g, o, &w) })
        }),
        ("scale", vec![rand_t(&[3, 5])], {
            let w = w35.clone();
            Box::new(move |g, v| { let o = g.scale(v[0], -1.7)?; weighted_sum(g, o, &w) })
        }),
        ("matmul", vec![rand_t(&[2, 4, 5]), rand_t(&[5, 3])], {
            let w = w4.clone();
            Box::new(move |g, v| { let o = g.matmul(v[0], v[1])?; weighted_sum(g, o, &w) })
        }),
        ("matmul_batched", vec![rand_t(&[2, 4, 5]), rand_t(&[2, 5, 3])], {
            let w = w4.clone();
            Box::new(move |g, v| { let o = g.matmul(v[0], v[1])?; weighted_sum(g, o, &w) })
        }),
        ("conv1d", vec![rand_t(&[2, 3, 6]), rand_t(&[4, 3, 3])], {
            let w = w_conv.clone();
            Box::new(move |g, v| { let o = g.conv1d(v[0], v[1], 1, 1)?; weighted_sum(g, o, &w) })
        }),
        ("conv1d_depthwise", vec![rand_t(&[2, 3, 6]), rand_t(&[3, 1, 5])], {
            let w = w_dw.clone();
            Box::new(move |g, v| { let o = g.conv1d(v[0], v[1], 2, 3)?; weighted_sum(g, o, &w) })
        }),
        ("transpose", vec![rand_t(&[5, 3])], {
            let w = rand_t(&[3, 5]);
            Box::new(move |g, v| { let o = g.transpose_last2(v[0])?; weighted_sum(g, o, &w) })
        }),
        ("reshape", vec![rand_t(&[3, 5])], {
            let w = rand_t(&[15]);
            Box::new(move |g, v| { let o = g.reshape(v[0], &[15])?; weighted_sum(g, o, &w) })
        }),
        ("layernorm", vec![rand_t(&[3, 5])], {
            let w = w35.clone();
            Box::new(move |g, v| { let o = g.layernorm(v[0], 1e-5)?; weighted_sum(g, o, &w) })
        }),
        ("gelu", vec![rand_t(&[3, 5])], {
            let w = w35.clone();
            Box::new(move |g, v| { let o = g.gelu(v[0])?; weighted_sum(g, o, &w) })
        }),
        ("silu", vec![rand_t(&[3, 5])], {
            let w = w35.clone();
            Box::new(move |g, v| { let o = g.silu(v[0])?; weighted_sum(g, o, &w) })
        }),
        ("relu", vec![relu_in], {
            let w = w35.clone();
            Box::new(move |g, v| { let o = g.relu(v[0])?; weighted_sum(g, o, &w) })
        }),
        ("tanh", vec![rand_t(&[3, 5])], {
            let w = w35.clone();
            Box::new(move |g, v| { let o = g.tanh(v[0])?; weighted_sum(g, o, &w) })
        }),
        ("exp", vec![rand_t(&[3, 5])], {
            let w = w35.clone();
            Box::new(move |g, v| { let o = g.exp(v[0])?; weighted_sum(g, o, &w) })
        }),
        ("softmax", vec![rand_t(&[3, 5])], {
            let w = w35.clone();
            Box::new(move |g, v| { let o = g.softmax(v[0])?; weighted_sum(g, o, &w) })
        }),
        ("sum", vec![rand_t(&[3, 5])], Box::new(|g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        })),
        ("mean", vec![rand_t(&[3, 5])], Box::new(|g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.mean(sq)
        })),
        ("mse", vec![rand_t(&[3, 5]), rand_t(&[3, 5])], Box::new(|g, v| g.mse(v[0], v[1]))),
        ("concat", vec![rand_t(&[2, 2]), rand_t(&[2, 3])], {
            let w = w_cat.clone();
            Box::new(move |g, v| { let o = g.concat(&[v[0], v[1]], 1)?; weighted_sum(g, o, &w) })
        }),
        ("slice", vec![rand_t(&[3, 5])], {
            let w = w_slice.clone();
            Box::new(move |g, v| { let o = g.slice(v[0], 1, 1, 3)?; weighted_sum(g, o, &w) })
        }),
        ("broadcast", vec![rand_t(&[3, 1])], {
            let w = w_bc.clone();
            Box::new(move |g, v| { let o = g.broadcast_to(v[0], &[2, 3, 4])?; weighted_sum(g, o, &w) })
        }),
        ("add_scalar", vec![rand_t(&[2, 6])], {
            let w = w6.clone();
            Box::new(move |g, v| {
                let o = g.add_scalar(v[0], 0.5)?;
                let o = g.mul(o, o)?;
                weighted_sum(g, o, &w)
            })
        }),
    ];

    let mut out = Vec::with_capacity(cases.len());
    for (name, inputs, f) in cases {
        let checks = check_gradients(&inputs, 1e-5, |g, v| f(g, v))?;
        let worst = checks.iter().map(|c| c.relative_error).fold(0.0, f64::max);
        out.push((name, worst));
    }
    Ok(out)
}
