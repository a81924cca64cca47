//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, ParameterStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Perturbation step.
    pub h: f32,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Coordinates sampled per tensor (all of them when the tensor is smaller).
    pub samples: usize,
    /// Lower bound on the denominator of the relative error, so coordinates
    /// whose true gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-3, tol: 1e-3, samples: 24, floor: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub h: f32,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "{:<40} rel_err={:.3e} (idx {}, analytic {:.6e}, numeric {:.6e}, {} coords)",
                t.name, t.max_rel_err, t.worst_index, t.analytic, t.numeric, t.checked
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn pick(len: usize, samples: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= samples {
        (0..len).collect()
    } else {
        let mut idx = sample(rng, len, samples).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Compares `analytic` against central differences of `f` for every tensor
/// in `store`. The store is restored before returning.
pub fn grad_check<F>(
    store: &mut ParameterStore,
    analytic: &Gradients,
    mut f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterStore) -> f64,
{
    let base = f(store);
    let again = f(store);
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!("two evaluations differ: {base} vs {again}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tensors = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        let len = store.get(id).len();
        let mut check = TensorCheck {
            name: store.name(id).to_string(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        };
        for i in pick(len, cfg.samples, &mut rng) {
            let orig = store.get(id).data()[i];
            let plus = orig + cfg.h;
            let minus = orig - cfg.h;
            store.get_mut(id).data_mut()[i] = plus;
            let fp = f(store);
            store.get_mut(id).data_mut()[i] = minus;
            let fm = f(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (plus as f64 - minus as f64);
            let a = analytic.get(id).data()[i] as f64;
            let err = relative_error(a, numeric, cfg.floor);
            if err >= check.max_rel_err {
                check.max_rel_err = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
            check.checked += 1;
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { tensors, h: cfg.h, tol: cfg.tol })
}

/// Same as [`grad_check`] for a free input tensor rather than parameters.
pub fn grad_check_input<F>(
    name: &str,
    x: &Tensor,
    analytic: &Tensor,
    mut f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> f64,
{
    let mut store = ParameterStore::new();
    store.add(name, x.clone())?;
    let mut grads = Gradients::zeros_like(&store);
    grads.get_mut(super::ParamId(0)).data_mut().copy_from_slice(analytic.data());
    grad_check(&mut store, &grads, |s| f(s.get(super::ParamId(0))), cfg)
}
