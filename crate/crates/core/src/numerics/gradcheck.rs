//! Finite-difference verification of reverse-mode gradients.

use crate::error::Result;

use super::{Graph, NodeId, ParameterStore, SeededRng};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Coordinates whose analytic and numeric values differ by at most this
    /// much count as exact; covers gradients at the round-off level of the
    /// central difference.
    pub atol: f64,
    /// Coordinates sampled per parameter; parameters with fewer values are
    /// checked exhaustively.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-3,
            atol: 1e-9,
            coords_per_param: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// (analytic, numeric) at the worst coordinate.
    pub worst: (f64, f64),
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tol)
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the tape gradient of `loss_fn` against central differences
/// `(L(p + eps) - L(p - eps)) / (2 eps)` on sampled coordinates of every
/// parameter. `loss_fn` must be deterministic.
pub fn grad_check<F>(store: &mut ParameterStore, loss_fn: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?
    };

    let mut rng = SeededRng::new(cfg.seed);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut params = Vec::with_capacity(ids.len());
    for (id, grad) in ids.into_iter().zip(&analytic) {
        let n = store.value(id).len();
        let coords: Vec<usize> = if n <= cfg.coords_per_param {
            (0..n).collect()
        } else {
            let mut all = rng.permutation(n);
            all.truncate(cfg.coords_per_param);
            all
        };

        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_error: 0.0,
            coords_checked: coords.len(),
            worst: (0.0, 0.0),
        };
        for k in coords {
            let original = store.value(id).data()[k];
            let mut eval = |value: f64| -> Result<f64> {
                store.get_mut(id).value.data_mut()[k] = value;
                let mut g = Graph::new(store);
                let loss = loss_fn(&mut g)?;
                Ok(g.scalar(loss))
            };
            let plus = eval(original + cfg.eps)?;
            let minus = eval(original - cfg.eps)?;
            store.get_mut(id).value.data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = grad.data()[k];
            let err = if (a - numeric).abs() <= cfg.atol { 0.0 } else { relative_error(a, numeric) };
            if err > check.max_rel_error || check.worst == (0.0, 0.0) {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst = (a, numeric);
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { params, tol: cfg.tol })
}
