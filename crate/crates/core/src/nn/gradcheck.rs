use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step, in `[1e-7, 1e-3]`.
    pub eps: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates per parameter cell (sampled);
    /// `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tolerance: 1e-4,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// `|a − f| / max(|a|, |f|, 1e-8)`
pub fn relative_error(autodiff: f64, numeric: f64) -> f64 {
    (autodiff - numeric).abs() / autodiff.abs().max(numeric.abs()).max(1e-8)
}

/// Compare autodiff gradients of `loss_fn` against central differences for
/// every trainable parameter in `store`.
///
/// `loss_fn` builds the scalar loss on the supplied graph. The store is
/// perturbed in place and restored before returning.
pub fn finite_diff_check<F>(
    store: &mut ParamStore<f64>,
    config: &GradCheckConfig,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&config.eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {} outside [1e-7, 1e-3]",
            config.eps
        )));
    }
    let mut g = Graph::new();
    let loss = loss_fn(store, &mut g)?;
    let grads = g.backward(loss)?;
    let mut autodiff = store.clone();
    autodiff.zero_grad();
    grads.accumulate_into(&mut autodiff);

    let mut eval = |store: &ParamStore<f64>, what: &dyn Fn() -> String| -> Result<f64> {
        let mut g = Graph::inference();
        let l = loss_fn(store, &mut g)?;
        let v = g.value(l).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss at {}", what())));
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tolerance: config.tolerance,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let param = autodiff.get(id);
        if !param.trainable {
            continue;
        }
        let name = param.name.clone();
        let n = param.value.numel();
        let analytic: Vec<f64> = match &param.grad {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; n],
        };
        let coords: Vec<usize> = match config.max_coords_per_param {
            Some(k) if k < n => {
                // Half the budget on coordinates with a live gradient, the
                // rest uniformly.
                let mut live: Vec<usize> = (0..n).filter(|&i| analytic[i] != 0.0).collect();
                live.shuffle(&mut rng);
                let mut picked: Vec<usize> = live.into_iter().take(k / 2).collect();
                let mut all: Vec<usize> = (0..n).collect();
                all.shuffle(&mut rng);
                for i in all {
                    if picked.len() >= k {
                        break;
                    }
                    if !picked.contains(&i) {
                        picked.push(i);
                    }
                }
                picked
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + config.eps;
            let plus = eval(store, &|| format!("{name}[{i}] + eps"));
            store.value_mut(id).data_mut()[i] = orig - config.eps;
            let minus = eval(store, &|| format!("{name}[{i}] - eps"));
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * config.eps);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
