//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is zero are compared absolutely.
    pub floor: f64,
    /// Coordinates checked per tensor; `None` checks all of them.
    pub probes_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            probes_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(tensor, coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.tolerance
    }

    fn record(&mut self, tensor: usize, index: usize, err: f64) {
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((tensor, index));
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn probe_indices(len: usize, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match cfg.probes_per_tensor {
        Some(k) if k < len => {
            let mut idx = sample(rng, len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

fn validate(cfg: &GradCheckConfig) -> Result<()> {
    if !(cfg.step > 0.0 && cfg.step.is_finite()) {
        return Err(invalid("step", "must be positive"));
    }
    if !(cfg.tolerance > 0.0) {
        return Err(invalid("tolerance", "must be positive"));
    }
    Ok(())
}

/// Compares `grad` against central differences of a plain function at `x`.
pub fn check_gradient(
    f: impl Fn(&[f64]) -> f64,
    grad: &[f64],
    x: &[f64],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    validate(cfg)?;
    if grad.len() != x.len() {
        return Err(invalid("grad", format!("length {} vs {}", grad.len(), x.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        tolerance: cfg.tolerance,
    };
    let mut probe = x.to_vec();
    for i in probe_indices(x.len(), cfg, &mut rng) {
        probe[i] = x[i] + cfg.step;
        let up = f(&probe);
        probe[i] = x[i] - cfg.step;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * cfg.step);
        report.record(0, i, relative_error(grad[i], numeric, cfg.floor));
    }
    Ok(report)
}

/// Builds the graph `build(graph, params)` over `inputs` (all treated as
/// parameters), back-propagates from its scalar output and compares every
/// probed coordinate against central differences.
pub fn gradient_check<F>(inputs: &[Tensor], build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    validate(cfg)?;
    let eval = |values: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (graph, vars, out) = eval(inputs)?;
    let grads = graph.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        tolerance: cfg.tolerance,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (t, var) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[t].shape());
        let analytic = grads.get(*var).unwrap_or(&zero);
        for i in probe_indices(inputs[t].len(), cfg, &mut rng) {
            let x0 = inputs[t].data()[i];
            probe[t].data_mut()[i] = x0 + cfg.step;
            let (g, _, o) = eval(&probe)?;
            let up = g.value(o).data()[0];
            probe[t].data_mut()[i] = x0 - cfg.step;
            let (g, _, o) = eval(&probe)?;
            let down = g.value(o).data()[0];
            probe[t].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * cfg.step);
            report.record(t, i, relative_error(analytic.data()[i], numeric, cfg.floor));
        }
    }
    Ok(report)
}
