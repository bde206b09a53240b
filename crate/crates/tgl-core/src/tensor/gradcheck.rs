//! Central finite-difference gradient checking at f64.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, ParamId, Tensor};
use crate::error::Result;

/// Compare analytic gradients of a loss against central finite differences.
///
/// `build` must construct the loss on the given graph from the parameter
/// leaves it is handed (parameter `i` is bound to `ParamId(i)`). Returns the
/// maximum over sampled coordinates of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
///
/// The numeric side only ever evaluates the forward pass, so it is
/// independent of the reverse-mode path it is checking.
pub fn grad_check<F>(
    params: &mut [Tensor<f64>],
    build: F,
    h: f64,
    max_coords_per_param: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |params: &[Tensor<f64>], tracked: bool| -> Result<(f64, Option<super::GradMap<f64>>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut t = p.clone();
                t.set_requires_grad(tracked);
                g.param_leaf(ParamId(i), t, tracked)
            })
            .collect();
        let loss = build(&mut g, &ids)?;
        let value = g.value(loss).scalar_value();
        let grads = if tracked { Some(g.backward(loss)?) } else { None };
        Ok((value, grads))
    };

    let (_, grads) = eval(params, true)?;
    let grads = grads.expect("tracked eval returns gradients");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let numel = params[i].numel();
        let mut coords: Vec<usize> = (0..numel).collect();
        if numel > max_coords_per_param {
            coords.shuffle(&mut rng);
            coords.truncate(max_coords_per_param);
        }
        for c in coords {
            let orig = params[i].data()[c];
            params[i].data_mut()[c] = orig + h;
            let (f_plus, _) = eval(params, false)?;
            params[i].data_mut()[c] = orig - h;
            let (f_minus, _) = eval(params, false)?;
            params[i].data_mut()[c] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let analytic = grads
                .get(ParamId(i))
                .map(|t| t.data()[c])
                .unwrap_or(0.0);
            let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
