//! Supervised maximum conditional likelihood from fully labeled sequences.
//!
//! Objective: `Σ_r [w·f(cfg_r, o_r) − log Z(o_r)] − (l2/2)‖w‖²`. Expected
//! counts come from the exact collapsed-slice chain. Optimization is batch
//! gradient ascent with a fixed step from zero weights.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{labeled_sequences, LabeledSequence, Record};
use crate::error::{Error, Result};
use crate::exact::CollapsedSliceChain;
use crate::model::{feature_counts, Model, ModelParams, ParamLayout};
use crate::topology::Topology;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2: f64,
    pub max_epochs: usize,
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
    /// Recorded for reproducibility; the optimizer itself is deterministic.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            l2: 1e-3,
            max_epochs: 200,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn check(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidSettings(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidSettings(format!(
                "l2 strength {} must be finite and non-negative",
                self.l2
            )));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::InvalidSettings(format!(
                "tolerance {} must be positive",
                self.tolerance
            )));
        }
        Ok(())
    }
}

/// Objective value and gradient at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub log_likelihood: f64,
    pub gradient: Vec<f64>,
}

fn model_for(params: &ModelParams, topo: &Topology) -> Result<Model> {
    Model::new(topo.clone(), params.clone())
}

fn evaluate_sequences(
    params: &ModelParams,
    topo: &Topology,
    seqs: &[LabeledSequence],
    l2: f64,
) -> Result<Evaluation> {
    let model = model_for(params, topo)?;
    let chain = CollapsedSliceChain::new(&model)?;
    let layout = params.layout();
    let w = params.weights();
    let mut ll = 0.0;
    let mut grad = vec![0.0; layout.len()];
    for s in seqs {
        let counts = feature_counts(&s.config, &s.observations, topo, layout)?;
        let (z, expected) = chain.expected_counts(&model, &s.observations)?;
        ll += counts.dot(params) - z;
        for ((g, &c), e) in grad.iter_mut().zip(&counts.counts).zip(&expected) {
            *g += c as f64 - e;
        }
    }
    ll -= 0.5 * l2 * w.iter().map(|x| x * x).sum::<f64>();
    for (g, x) in grad.iter_mut().zip(w) {
        *g -= l2 * x;
    }
    Ok(Evaluation {
        log_likelihood: ll,
        gradient: grad,
    })
}

/// Objective and gradient over a labeled dataset.
pub fn evaluate(
    params: &ModelParams,
    topo: &Topology,
    data: &[Record],
    l2: f64,
) -> Result<Evaluation> {
    let alphabet = params.layout().alphabet_size();
    params.check_shape(topo, alphabet)?;
    let seqs = labeled_sequences(data, topo, alphabet)?;
    evaluate_sequences(params, topo, &seqs, l2)
}

pub fn log_likelihood(
    params: &ModelParams,
    topo: &Topology,
    data: &[Record],
    l2: f64,
) -> Result<f64> {
    let alphabet = params.layout().alphabet_size();
    params.check_shape(topo, alphabet)?;
    let seqs = labeled_sequences(data, topo, alphabet)?;
    let model = model_for(params, topo)?;
    let chain = CollapsedSliceChain::new(&model)?;
    let mut ll = 0.0;
    for s in &seqs {
        let counts = feature_counts(&s.config, &s.observations, topo, params.layout())?;
        ll += counts.dot(params) - chain.log_partition(&model, &s.observations)?;
    }
    Ok(ll - 0.5 * l2 * params.weights().iter().map(|x| x * x).sum::<f64>())
}

pub fn gradient(
    params: &ModelParams,
    topo: &Topology,
    data: &[Record],
    l2: f64,
) -> Result<Vec<f64>> {
    Ok(evaluate(params, topo, data, l2)?.gradient)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub log_likelihood: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub params: ModelParams,
    /// Objective at the start of each epoch, before its update.
    pub trace: Vec<EpochStats>,
    pub converged: bool,
}

impl TrainReport {
    /// CSV with columns `epoch,log_likelihood,grad_norm,seconds`.
    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.trace {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Trains from zero weights.
pub fn fit(
    topo: &Topology,
    data: &[Record],
    alphabet_size: usize,
    tc: &TrainConfig,
) -> Result<TrainReport> {
    let params = ModelParams::zeros(ParamLayout::for_topology(topo, alphabet_size));
    fit_from(topo, data, params, tc, |_| {})
}

/// Trains from `params`, calling `on_epoch` after each epoch is logged.
pub fn fit_from(
    topo: &Topology,
    data: &[Record],
    mut params: ModelParams,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    tc.check()?;
    let alphabet = params.layout().alphabet_size();
    params.check_shape(topo, alphabet)?;
    let seqs = labeled_sequences(data, topo, alphabet)?;
    let mut trace = Vec::new();
    let mut converged = false;
    for epoch in 1..=tc.max_epochs {
        let start = Instant::now();
        let ev = evaluate_sequences(&params, topo, &seqs, tc.l2)?;
        let grad_norm = ev.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !ev.log_likelihood.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let done = grad_norm < tc.tolerance;
        if !done {
            for (w, g) in params.weights_mut().iter_mut().zip(&ev.gradient) {
                *w += tc.learning_rate * g;
            }
            if params.weights().iter().any(|w| !w.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
        }
        let stats = EpochStats {
            epoch,
            log_likelihood: ev.log_likelihood,
            grad_norm,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::debug!(
            "epoch {epoch}: log-likelihood {:.6} gradient norm {grad_norm:.3e}",
            ev.log_likelihood
        );
        on_epoch(&stats);
        trace.push(stats);
        if done {
            converged = true;
            break;
        }
    }
    Ok(TrainReport {
        params,
        trace,
        converged,
    })
}
