//! Central finite-difference check of [`link_step`] gradients.

use serde::Serialize;

use crate::corpus::CveRecord;
use crate::error::Result;
use crate::hierarchy::CweHierarchy;
use crate::model::V2wModel;
use crate::params::ParamId;
use crate::trainer::{link_step, PreparedInputs, TrainConfig, TrainingCweSet};

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    /// `‖analytic − fd‖₂ / max(‖analytic‖₂, ‖fd‖₂, floor)`; the floor keeps
    /// identically-zero gradients (e.g. attention key biases) from turning
    /// rounding noise into a unit error.
    pub rel_error: f64,
    /// Largest entrywise `|a − fd| / max(|a|, |fd|, floor)`.
    pub worst_entry: f64,
    pub norm: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheck {
    pub tensors: Vec<TensorCheck>,
    /// Trainable tensors the loss depends on but that got no gradient.
    pub missing: Vec<String>,
    /// Frozen tensors that nevertheless received a gradient.
    pub frozen_with_grad: Vec<String>,
}

impl GradCheck {
    pub fn worst_tensor(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn entries(&self) -> usize {
        self.tensors.iter().map(|t| t.entries).sum()
    }
}

/// Compares every gradient entry of one [`link_step`] with
/// `(L(θ + h) − L(θ − h)) / 2h`. Dropout and corruption draws are keyed by
/// `(cfg.seed, step)`, so every evaluation sees the same masks.
#[allow(clippy::too_many_arguments)]
pub fn check_link_step(
    model: &mut V2wModel,
    batch: &[CveRecord],
    h: &CweHierarchy,
    u: &TrainingCweSet,
    cfg: &TrainConfig,
    step: u64,
    fd_step: f64,
    floor: f64,
) -> Result<GradCheck> {
    let inputs = PreparedInputs::new(&*model, batch, h);
    let grads = link_step(&*model, batch, &inputs, h, u, cfg, step, true)?
        .grads
        .expect("requested");
    let params: Vec<(ParamId, String, bool)> = model
        .store()
        .iter()
        .map(|(id, p)| (id, p.name.clone(), p.trainable))
        .collect();
    let mut out = GradCheck::default();
    for (id, name, trainable) in params {
        let Some(g) = grads.get(id).cloned() else {
            if trainable && !(name.starts_with("decoder.") && !cfg.rd_enabled) {
                out.missing.push(name);
            }
            continue;
        };
        if !trainable {
            out.frozen_with_grad.push(name.clone());
        }
        let mut fd = vec![0.0; g.data.len()];
        for (j, slot) in fd.iter_mut().enumerate() {
            let orig = model.store().value(id).data[j];
            let mut loss_at = |v: f64| -> Result<f64> {
                model.store_mut().get_mut(id).value.data[j] = v;
                Ok(link_step(&*model, batch, &inputs, h, u, cfg, step, false)?.loss())
            };
            let plus = loss_at(orig + fd_step)?;
            let minus = loss_at(orig - fd_step)?;
            model.store_mut().get_mut(id).value.data[j] = orig;
            *slot = (plus - minus) / (2.0 * fd_step);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = g.data.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let denom = norm(&g.data).max(norm(&fd)).max(floor);
        let worst_entry = g
            .data
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
            .fold(0.0, f64::max);
        out.tensors.push(TensorCheck {
            name,
            entries: fd.len(),
            rel_error: norm(&diff) / denom,
            worst_entry,
            norm: norm(&g.data),
        });
    }
    Ok(out)
}
