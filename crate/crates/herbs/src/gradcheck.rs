//! Finite-difference audit of the full network's analytic gradients.

use herbs_tensor::gradcheck::{central_difference_terms, relative_error, sample_coords, Coord};
use herbs_tensor::ChaCha8Rng;
use rand::SeedableRng;
use serde::Serialize;

use crate::backbone::ImageBatch;
use crate::error::Result;
use crate::net::{ForwardOptions, HerbsNet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    /// Minimum number of sampled weights; every submodule gets at least one.
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    pub epoch: u64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { samples: 20, step: 1e-5, tolerance: 1e-4, epoch: 0, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckedWeight {
    pub module: String,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModuleSummary {
    pub module: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub loss: f64,
    pub weights: Vec<CheckedWeight>,
    pub modules: Vec<ModuleSummary>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("loss {:.10}\n{:<24} {:>7} {:>12}\n", self.loss, "module", "checked", "max_rel_err");
        for m in &self.modules {
            s.push_str(&format!("{:<24} {:>7} {:>12.3e}\n", m.module, m.checked, m.max_rel_error));
        }
        s.push_str(&format!(
            "overall max relative error {:.3e} (tolerance {:.0e}): {}\n",
            self.max_rel_error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        ));
        s
    }
}

/// Compares the analytic gradient of the total loss with central differences
/// on weights sampled from every submodule.
///
/// The top-K selection and the detached refinement teachers of the
/// unperturbed pass are replayed for the perturbed evaluations, so both sides
/// differentiate the same function.
pub fn gradcheck_net(net: &HerbsNet, batch: &ImageBatch, cfg: GradcheckConfig) -> Result<GradcheckReport> {
    let (base, grads) = net.loss_and_grads(batch, ForwardOptions { epoch: cfg.epoch, ..Default::default() })?;
    let loss = base.losses.expect("losses requested").loss_herbs;
    let frozen = base.replay;

    let modules = net.module_params();
    let per_module = cfg.samples.div_ceil(modules.len().max(1)).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut coords: Vec<(usize, Coord)> = Vec::new();
    for (m, (_, params)) in modules.iter().enumerate() {
        coords.extend(sample_coords(&net.store, params, per_module, &mut rng).into_iter().map(|c| (m, c)));
    }

    let mut store = net.store.clone();
    let opts = ForwardOptions { epoch: cfg.epoch, frozen: Some(&frozen), ..Default::default() };
    let w = net.cfg.weights;
    let terms = |s: &herbs_tensor::ParamStore| match net.losses_with(s, batch, opts) {
        Ok(l) => l.weighted_terms(&w).to_vec(),
        Err(_) => vec![f64::NAN],
    };
    let weights: Vec<CheckedWeight> = coords
        .iter()
        .map(|&(m, c)| {
            let numeric = central_difference_terms(&mut store, c, cfg.step, terms);
            let analytic = grads[c.param.0].data()[c.index];
            let rel = relative_error(analytic, numeric);
            CheckedWeight {
                module: modules[m].0.clone(),
                param: net.store.name(c.param).to_string(),
                index: c.index,
                analytic,
                numeric,
                rel_error: if rel.is_nan() { f64::INFINITY } else { rel },
            }
        })
        .collect();
    let modules: Vec<ModuleSummary> = modules
        .iter()
        .map(|(name, _)| {
            let mine: Vec<&CheckedWeight> = weights.iter().filter(|w| &w.module == name).collect();
            ModuleSummary {
                module: name.clone(),
                checked: mine.len(),
                max_rel_error: mine.iter().map(|w| w.rel_error).fold(0.0, f64::max),
            }
        })
        .collect();
    let max_rel_error = weights.iter().map(|w| w.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        loss,
        weights,
        modules,
        max_rel_error,
        tolerance: cfg.tolerance,
        passed: max_rel_error < cfg.tolerance,
    })
}
