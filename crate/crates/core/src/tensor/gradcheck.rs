//! Central finite-difference checks of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, OpKind, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Number of randomly chosen coordinates to probe.
    pub probes: usize,
    pub seed: u64,
    /// Denominator floor for the relative error, so that coordinates with
    /// (near-)zero gradient are judged on absolute error.
    pub floor: f64,
    /// Backward rule to corrupt; used to prove the check can fail.
    pub fault: Option<OpKind>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            probes: 100,
            seed: 0,
            floor: 1e-4,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_error: f64,
    /// `(tensor, coordinate, analytic, numeric)` at the worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn probe_loop(
    values: &mut [Tensor],
    analytic: &[Tensor],
    cfg: &GradCheckConfig,
    mut eval: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<GradCheckReport> {
    let sizes: Vec<usize> = values.iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        probes: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    if total == 0 {
        return Ok(report);
    }
    for _ in 0..cfg.probes {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let orig = values[which].data()[flat];
        values[which].data_mut()[flat] = orig + cfg.step;
        let plus = eval(values)?;
        values[which].data_mut()[flat] = orig - cfg.step;
        let minus = eval(values)?;
        values[which].data_mut()[flat] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic[which].data()[flat];
        let err = relative_error(a, numeric, cfg.floor);
        report.probes += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((which, flat, a, numeric));
        }
    }
    Ok(report)
}

fn new_graph(cfg: &GradCheckConfig) -> Graph {
    let mut g = Graph::new();
    if let Some(k) = cfg.fault {
        g.inject_fault(k);
    }
    g
}

/// Checks the gradient of a scalar function of input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = new_graph(cfg);
    let vars = inputs
        .iter()
        .map(|t| g.input(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let mut values = inputs.to_vec();
    probe_loop(&mut values, &analytic, cfg, |vals| {
        let mut g = Graph::inference();
        let vars = vals
            .iter()
            .map(|t| g.input(t.clone(), false))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    })
}

/// Checks the gradient of a scalar function w.r.t. the trainable
/// parameters in `store` (restricted to `only` when given).
pub fn check_params<F>(
    store: &ParamStore,
    only: Option<&[ParamId]>,
    cfg: &GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().filter(|&id| store.trainable(id)).collect(),
    };
    let mut g = new_graph(cfg);
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|&id| {
            grads
                .param(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
        })
        .collect();
    let mut values: Vec<Tensor> = ids.iter().map(|&id| store.get(id).clone()).collect();
    let mut scratch = store.clone();
    probe_loop(&mut values, &analytic, cfg, |vals| {
        for (&id, v) in ids.iter().zip(vals) {
            scratch.get_mut(id).data_mut().copy_from_slice(v.data());
        }
        let mut g = Graph::inference();
        let loss = f(&mut g, &scratch)?;
        Ok(g.value(loss).item())
    })
}

/// `sum(x * proj)`: a scalar probe loss with generic, nonzero gradients.
pub fn projection_loss(g: &mut Graph, x: Var, proj: &Tensor) -> Result<Var> {
    let p = g.constant(proj.clone())?;
    let m = g.mul(x, p)?;
    g.sum(m)
}
