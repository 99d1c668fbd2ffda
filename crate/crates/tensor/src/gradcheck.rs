//! Central finite-difference probes against analytic gradients.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::rng::{rng_from_seed, SeededRng};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare analytic gradients to central differences on randomly sampled
/// parameter coordinates.
///
/// * `loss_fn` must be a pure function of the store.
/// * `count` coordinates are drawn across all listed tensors, proportional
///   to nothing in particular: tensor then index, both uniform.
/// * Relative error uses a small absolute floor so exactly-zero gradients
///   do not divide by zero.
pub fn check_gradients(
    store: &mut ParamStore,
    names: &[String],
    analytic: &BTreeMap<String, Tensor>,
    count: usize,
    h: f64,
    seed: u64,
    loss_fn: &mut dyn FnMut(&ParamStore) -> f64,
) -> GradCheckReport {
    assert!(!names.is_empty(), "no parameters to check");
    let mut rng: SeededRng = rng_from_seed(seed);
    let mut max_rel = 0.0f64;
    let mut worst = None;
    for _ in 0..count {
        let name = &names[rng.gen_range(0..names.len())];
        let numel = store.get(name).numel();
        let idx = rng.gen_range(0..numel);
        let orig = store.get(name).data()[idx];
        store.get_mut(name).data_mut()[idx] = orig + h;
        let up = loss_fn(store);
        store.get_mut(name).data_mut()[idx] = orig - h;
        let down = loss_fn(store);
        store.get_mut(name).data_mut()[idx] = orig;
        let fd = (up - down) / (2.0 * h);
        let an = analytic
            .get(name)
            .map(|t| t.data()[idx])
            .unwrap_or(0.0);
        let denom = fd.abs().max(an.abs()).max(1e-6);
        let rel = (fd - an).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
            worst = Some((name.clone(), idx));
        }
    }
    GradCheckReport {
        checked: count,
        max_rel_err: max_rel,
        worst,
    }
}
