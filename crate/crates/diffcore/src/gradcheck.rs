//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParameterStore;
use crate::session::Session;
use crate::tensor::Tensor;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks `d loss / d input` for every entry of every input.
///
/// `f` builds a scalar loss from leaves holding `inputs`. Returns the maximum
/// relative error over all entries.
pub fn grad_check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            worst = worst.max(relative_error(analytic[j], (up - down) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

/// Relative error at `eps`, retried at `10 eps` and `eps / 10` when it is not tiny.
///
/// A ReLU-type kink inside the step spoils large steps, and roundoff on a large
/// loss spoils small ones. A wrong analytic gradient disagrees at every step.
fn stepped_error<F>(analytic: f64, eps: f64, mut central: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut best = relative_error(analytic, central(eps)?);
    for step in [eps * 10.0, eps / 10.0] {
        if best <= 1e-6 {
            break;
        }
        best = best.min(relative_error(analytic, central(step)?));
    }
    Ok(best)
}

/// Like [`grad_check`] but also perturbs every trainable weight of `store`.
///
/// Each evaluation runs on a fresh clone of the store so running statistics
/// updated in training mode do not leak between evaluations. Entries are
/// scored with [`stepped_error`].
pub fn grad_check_session<F>(
    store: &ParameterStore<f64>,
    inputs: &[Tensor<f64>],
    training: bool,
    eps: f64,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |st: &ParameterStore<f64>, ins: &[Tensor<f64>]| -> Result<f64> {
        let mut st = st.clone();
        let mut sess = Session::new(&mut st, training);
        let vars: Vec<Var> = ins.iter().map(|t| sess.graph.leaf(t.clone())).collect();
        let loss = f(&mut sess, &vars)?;
        Ok(sess.graph.value(loss).data()[0])
    };
    let mut st = store.clone();
    st.zero_grads();
    let (input_grads, _) = {
        let mut sess = Session::new(&mut st, training);
        let vars: Vec<Var> = inputs.iter().map(|t| sess.graph.leaf(t.clone())).collect();
        let loss = f(&mut sess, &vars)?;
        let grads = sess.backward(loss)?;
        let ig: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        (ig, ())
    };
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            let e = stepped_error(input_grads[i][j], eps, |h| {
                work[i].data_mut()[j] = orig + h;
                let up = eval(store, &work)?;
                work[i].data_mut()[j] = orig - h;
                let down = eval(store, &work)?;
                work[i].data_mut()[j] = orig;
                Ok((up - down) / (2.0 * h))
            })?;
            worst = worst.max(e);
        }
    }
    let names: Vec<String> = st.iter().filter(|(_, e)| e.is_optimized()).map(|(n, _)| n.to_string()).collect();
    let mut perturbed = store.clone();
    for name in names {
        let analytic = st.get(&name)?.grad.data().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = store.value(&name)?.data()[j];
            let e = stepped_error(a, eps, |h| {
                perturbed.get_mut(&name)?.value.data_mut()[j] = orig + h;
                let up = eval(&perturbed, inputs)?;
                perturbed.get_mut(&name)?.value.data_mut()[j] = orig - h;
                let down = eval(&perturbed, inputs)?;
                perturbed.get_mut(&name)?.value.data_mut()[j] = orig;
                Ok((up - down) / (2.0 * h))
            })?;
            worst = worst.max(e);
        }
    }
    Ok(worst)
}
