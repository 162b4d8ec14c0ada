//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::NumArray;

/// Anything that owns an ordered list of named parameter arrays.
///
/// The three methods must agree on order and length.
pub trait Parameterized {
    fn param_names(&self) -> Vec<String>;
    fn params(&self) -> Vec<&NumArray>;
    fn params_mut(&mut self) -> Vec<&mut NumArray>;
}

impl Parameterized for Vec<NumArray> {
    fn param_names(&self) -> Vec<String> {
        (0..self.len()).map(|i| format!("p{i}")).collect()
    }

    fn params(&self) -> Vec<&NumArray> {
        self.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut NumArray> {
        self.iter_mut().collect()
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator. Keeps round-off in the
    /// difference quotient (about `eps·|f|/h`) from dominating tiny gradients.
    pub denom_floor: f64,
    /// Check at most this many seeded entries per array; `None` checks all.
    pub max_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-5,
            denom_floor: 1e-3,
            max_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn scalars_checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    /// The `k` parameters with the largest error, worst first.
    pub fn worst(&self, k: usize) -> Vec<&ParamCheck> {
        let mut all: Vec<&ParamCheck> = self.params.iter().collect();
        all.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
        all.truncate(k);
        all
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` gradients against `(f(p+h) − f(p−h)) / 2h` for each
/// checked scalar of each parameter of `model`. The model is restored to its
/// original values before returning.
pub fn grad_check<M, F>(
    model: &mut M,
    analytic: &[NumArray],
    mut loss: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: FnMut(&M) -> Result<f64>,
{
    if cfg.step <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {}", cfg.step)));
    }
    let names = model.param_names();
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
    if analytic.len() != shapes.len() {
        return Err(Error::shape("grad_check", &[shapes.len()], &[analytic.len()]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = Vec::with_capacity(names.len());

    for (k, name) in names.into_iter().enumerate() {
        if analytic[k].shape() != shapes[k].as_slice() {
            return Err(Error::shape("grad_check", &shapes[k], analytic[k].shape()));
        }
        let len = analytic[k].len();
        let indices: Vec<usize> = match cfg.max_per_param {
            Some(m) if m < len => {
                let mut idx = sample(&mut rng, len, m).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..len).collect(),
        };
        let mut check = ParamCheck {
            name,
            checked: indices.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (pos, j) in indices.into_iter().enumerate() {
            let original = model.params()[k].data()[j];
            model.params_mut()[k].data_mut()[j] = original + cfg.step;
            let plus = loss(model);
            model.params_mut()[k].data_mut()[j] = original - cfg.step;
            let minus = loss(model);
            model.params_mut()[k].data_mut()[j] = original;
            let numeric = (plus? - minus?) / (2.0 * cfg.step);
            let a = analytic[k].data()[j];
            let err = relative_error(a, numeric, cfg.denom_floor);
            if pos == 0 || err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = j;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        tolerance: cfg.tolerance,
    })
}
