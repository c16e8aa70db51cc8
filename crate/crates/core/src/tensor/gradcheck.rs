//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Result, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Number of sampled coordinates, spread round-robin over parameters so
    /// every tensor is visited once `samples >= store.len()`.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            samples: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub params_covered: usize,
    pub max_rel_error: f64,
    /// Worst coordinates first, at most ten.
    pub worst: Vec<GradCheckEntry>,
}

/// Compares backward-pass gradients of `loss_fn` against
/// `(f(θ+εe) − f(θ−εe)) / 2ε` on sampled coordinates.
///
/// `loss_fn` must be deterministic (dropout off) and return a scalar node.
/// The error measure is `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    mut loss_fn: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let grads = g.backward(loss)?.param_grads(store);
    drop(g);

    let mut eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, s)?;
        Ok(g.value(l).item().unwrap_or(f64::NAN))
    };

    let ids: Vec<ParamId> = store.ids().filter(|&id| !store.get(id).is_empty()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = store.clone();
    let mut entries = Vec::with_capacity(cfg.samples);
    let mut covered = std::collections::BTreeSet::new();
    for k in 0..cfg.samples {
        if ids.is_empty() {
            break;
        }
        let id = ids[k % ids.len()];
        let n = store.get(id).len();
        let index = rng.random_range(0..n);
        let orig = store.get(id).data()[index];

        work.get_mut(id).data_mut()[index] = orig + cfg.eps;
        let plus = eval(&work)?;
        work.get_mut(id).data_mut()[index] = orig - cfg.eps;
        let minus = eval(&work)?;
        work.get_mut(id).data_mut()[index] = orig;

        let numeric = (plus - minus) / (2.0 * cfg.eps);
        let analytic = grads.get(id).data()[index];
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(1.0);
        covered.insert(id);
        entries.push(GradCheckEntry {
            name: store.name(id).to_string(),
            index,
            analytic,
            numeric,
            rel_error,
        });
    }

    let checked = entries.len();
    let failed = entries.iter().filter(|e| !(e.rel_error <= cfg.tol)).count();
    entries.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    entries.truncate(10);
    let max_rel_error = entries.first().map_or(0.0, |e| e.rel_error);
    if failed > 0 {
        let w = &entries[0];
        return Err(TensorError::ToleranceExceeded {
            checked,
            failed,
            tol: cfg.tol,
            worst_name: w.name.clone(),
            worst_index: w.index,
            worst_error: w.rel_error,
        });
    }
    Ok(GradCheckReport {
        checked,
        params_covered: covered.len(),
        max_rel_error,
        worst: entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_passes_tightly() {
        let mut store = ParamStore::<f64>::new();
        store
            .add("theta", Tensor::from_f64(&[4], &[0.5, -1.5, 2.0, 3.25]).unwrap())
            .unwrap();
        let cfg = GradCheckConfig {
            eps: 1e-5,
            tol: 1e-8,
            samples: 16,
            seed: 1,
        };
        let report = grad_check(
            &store,
            |g, s| {
                let th = g.param(s, s.id("theta").unwrap())?;
                let sq = g.mul(th, th)?;
                g.sum_all(sq)
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(report.checked, 16);
        assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        // |x| at a kink: the analytic subgradient is 1 but the symmetric
        // difference straddling 0 gives 0.
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::from_f64(&[1], &[0.0]).unwrap()).unwrap();
        let cfg = GradCheckConfig {
            samples: 1,
            ..Default::default()
        };
        let out = grad_check(
            &store,
            |g, s| {
                let x = g.param(s, s.id("x").unwrap())?;
                g.relu(x).and_then(|r| g.sum_all(r))
            },
            &cfg,
        );
        // relu at exactly 0 has analytic slope 0 and numeric slope 0.5
        assert!(matches!(out, Err(TensorError::ToleranceExceeded { .. })));
    }
}
