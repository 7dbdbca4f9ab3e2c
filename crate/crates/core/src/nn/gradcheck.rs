//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Mode, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Upper bound on coordinates probed per parameter tensor.
    pub max_entries_per_param: usize,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            tol: 1e-4,
            floor: 1e-3,
            max_entries_per_param: 24,
            mode: Mode::Train,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// Parameter name and coordinate of the largest relative error.
    pub worst: Option<(String, usize)>,
    pub passed: bool,
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// central differences for the trainable parameters in `store`.
pub fn grad_check<F>(store: &mut ParamStore<f64>, cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<'g, f64>) -> Result<Var<'g, f64>>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::new(store, cfg.mode, false);
        let v = f(&g)?.item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        Ok(v)
    };

    let analytic: Vec<(usize, Vec<f64>)> = {
        let g = Graph::new(&*store, cfg.mode, true);
        let loss = f(&g)?;
        let grads = g.backward(loss)?;
        store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| {
                let gr = grads
                    .param(id)
                    .map(|t| t.to_f64_vec())
                    .unwrap_or_else(|| vec![0.0; p.value.numel()]);
                (id.index(), gr)
            })
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        worst: None,
        passed: true,
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (pi, grad) in analytic {
        let id = ids[pi];
        let n = grad.len();
        let coords: Vec<usize> = if n <= cfg.max_entries_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.max_entries_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + cfg.eps;
            let fp = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - cfg.eps;
            let fm = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let a = grad[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    report.passed = report.max_rel_err <= cfg.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut ps = ParamStore::<f64>::new();
        let x = ps.add("x", Tensor::scalar(3.0));
        let g = Graph::train(&ps);
        let loss = g.param(x).unwrap().square().sum();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(x).unwrap().item(), 6.0);
        let rep = grad_check(
            &mut ps,
            &GradCheckConfig {
                tol: 1e-8,
                floor: 1.0,
                ..Default::default()
            },
            |g| Ok(g.param(x)?.square().sum()),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!(rep.max_abs_err < 1e-8);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut ps = ParamStore::<f64>::new();
        let x = ps.add("x", Tensor::scalar(-1.0));
        let r = grad_check(&mut ps, &GradCheckConfig::default(), |g| {
            Ok(g.param(x)?.sqrt().sum())
        });
        assert!(r.is_err());
    }
}
