//! SGD with momentum and cosine decay over a temperature-scaled cosine
//! head. Used to finetune adapters on the first task and to pre-train a
//! stand-in backbone.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterState;
use crate::data::Dataset;
use crate::encoder::{self, EncoderState};
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};
use crate::protoclf::Prototypes;
use crate::seed::{self, tags};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRecipe {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Divides cosine scores before the softmax.
    pub temperature: f64,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.01,
            weight_decay: 5e-4,
            batch_size: 64,
            momentum: 0.9,
            temperature: 0.07,
        }
    }
}

impl TrainRecipe {
    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be positive, got {v}")))
            }
        };
        positive("recipe.lr", self.lr)?;
        positive("recipe.temperature", self.temperature)?;
        if self.epochs == 0 {
            return Err(Error::config("recipe.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("recipe.batch_size", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("recipe.weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("recipe.momentum", "must be in [0, 1)"));
        }
        Ok(())
    }
}

/// `lr(s) = lr0 * (1 + cos(pi * s / S)) / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub lr0: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        let s = step.min(self.total_steps) as f64;
        self.lr0 * (1.0 + (PI * s / self.total_steps.max(1) as f64).cos()) / 2.0
    }
}

/// Temporary trainable head: row `k` scores class `classes[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineHead {
    pub classes: Vec<usize>,
    pub weights: Tensor<f32>,
}

impl CosineHead {
    pub fn from_prototypes(protos: &Prototypes) -> Result<Self> {
        let rows: Vec<Vec<f32>> = protos.values().cloned().collect();
        let weights = Tensor::from_rows(&rows)?.with_requires_grad(true);
        Ok(Self {
            classes: protos.keys().copied().collect(),
            weights,
        })
    }

    pub fn random(classes: &[usize], dim: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let weights = seed::truncated_normal_tensor(&mut rng, &[classes.len(), dim], 1.0)
            .with_requires_grad(true);
        Self {
            classes: classes.to_vec(),
            weights,
        }
    }

    fn targets(&self, labels: &[usize]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| {
                self.classes
                    .iter()
                    .position(|c| c == l)
                    .ok_or_else(|| Error::contract(format!("head has no class {l}")))
            })
            .collect()
    }
}

/// Loss trace of one training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss on a fixed probe batch before training and after each epoch.
    pub probe_losses: Vec<f64>,
    pub steps: usize,
}

struct Slot {
    decay: bool,
    velocity: Vec<f32>,
}

fn batch_loss(
    tape: &mut Tape<f32>,
    enc: &EncoderState,
    adapters: Option<&AdapterState>,
    head: &CosineHead,
    images: &[&Tensor<f32>],
    targets: &[usize],
    temperature: f64,
) -> Result<(Vec<Var>, Vec<Var>, Var, Var)> {
    let evars = enc.bind(tape);
    let avars = adapters.map(|a| a.bind(tape));
    let w = tape.leaf(&head.weights);
    let rows = images
        .iter()
        .map(|img| encoder::encode_image(tape, enc.config(), &evars, avars.as_ref(), img))
        .collect::<Result<Vec<_>>>()?;
    let feats = tape.concat_rows(&rows)?;
    let feats = tape.normalize_rows(feats)?;
    let wn = tape.normalize_rows(w)?;
    let wt = tape.transpose(wn)?;
    let logits = tape.matmul(feats, wt)?;
    let logits = tape.scale(logits, 1.0 / temperature);
    let loss = tape.cross_entropy(logits, targets)?;
    let avars = avars.map(|a| a.ordered()).unwrap_or_default();
    Ok((evars.ordered(), avars, w, loss))
}

fn probe_loss(
    enc: &EncoderState,
    adapters: Option<&AdapterState>,
    head: &CosineHead,
    data: &Dataset,
    probe: &[usize],
    temperature: f64,
) -> Result<f64> {
    let images: Vec<&Tensor<f32>> = probe.iter().map(|&i| &data.images[i]).collect();
    let labels: Vec<usize> = probe.iter().map(|&i| data.labels[i]).collect();
    let mut tape = Tape::new();
    let (_, _, _, loss) = batch_loss(
        &mut tape,
        enc,
        adapters,
        head,
        &images,
        &head.targets(&labels)?,
        temperature,
    )?;
    Ok(f64::from(tape.value(loss).item()))
}

fn sgd_step(t: &mut Tensor<f32>, grad: &[f32], slot: &mut Slot, lr: f64, recipe: &TrainRecipe) {
    let (mu, wd) = (recipe.momentum as f32, recipe.weight_decay as f32);
    let lr = lr as f32;
    for ((w, &g), v) in t.data_mut().iter_mut().zip(grad).zip(&mut slot.velocity) {
        let g = if slot.decay { g + wd * *w } else { g };
        *v = mu * *v + g;
        *w -= lr * *v;
    }
}

/// Shared loop: every parameter with `requires_grad` set is updated.
fn fit(
    enc: &mut EncoderState,
    mut adapters: Option<&mut AdapterState>,
    head: &mut CosineHead,
    data: &Dataset,
    recipe: &TrainRecipe,
    seed: u64,
    decay_encoder: bool,
) -> Result<FitReport> {
    recipe.validate()?;
    if data.is_empty() {
        return Err(Error::contract("cannot train on an empty task"));
    }
    let targets_all = head.targets(&data.labels)?;
    let n = data.len();
    let per_epoch = n.div_ceil(recipe.batch_size);
    let schedule = CosineSchedule {
        lr0: recipe.lr,
        total_steps: per_epoch * recipe.epochs,
    };
    let probe: Vec<usize> = (0..n.min(64)).collect();

    let mut enc_slots: Vec<Slot> = enc
        .tensors()
        .iter()
        .map(|t| Slot {
            decay: decay_encoder && t.rank() == 2,
            velocity: vec![0.0; t.len()],
        })
        .collect();
    let mut ad_slots: Vec<Slot> = adapters
        .as_deref()
        .map(|a| {
            a.params()
                .iter()
                .map(|(name, t)| Slot {
                    decay: name.ends_with("w_down") || name.ends_with("w_up"),
                    velocity: vec![0.0; t.len()],
                })
                .collect()
        })
        .unwrap_or_default();
    let mut head_slot = Slot {
        decay: false,
        velocity: vec![0.0; head.weights.len()],
    };

    let mut report = FitReport {
        probe_losses: vec![probe_loss(enc, adapters.as_deref(), head, data, &probe, recipe.temperature)?],
        ..FitReport::default()
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..recipe.epochs {
        order.shuffle(&mut seed::rng(seed::derive(seed, &[tags::SHUFFLE, epoch as u64])));
        let mut total = 0.0;
        for batch in order.chunks(recipe.batch_size) {
            let images: Vec<&Tensor<f32>> = batch.iter().map(|&i| &data.images[i]).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| targets_all[i]).collect();
            let mut tape = Tape::new();
            let (evars, avars, w, loss) = batch_loss(
                &mut tape,
                enc,
                adapters.as_deref(),
                head,
                &images,
                &targets,
                recipe.temperature,
            )?;
            let value = f64::from(tape.value(loss).item());
            if !value.is_finite() {
                return Err(Error::contract(format!("loss diverged at step {step}")));
            }
            total += value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let lr = schedule.lr(step);
            for ((t, v), slot) in enc.params_mut().into_iter().zip(&evars).zip(&mut enc_slots) {
                if let Some(g) = grads.get(*v) {
                    sgd_step(t, g, slot, lr, recipe);
                }
            }
            if let Some(a) = adapters.as_deref_mut() {
                for ((t, v), slot) in a.params_mut().into_iter().zip(&avars).zip(&mut ad_slots) {
                    if let Some(g) = grads.get(*v) {
                        sgd_step(t, g, slot, lr, recipe);
                    }
                }
            }
            if let Some(g) = grads.get(w) {
                sgd_step(&mut head.weights, g, &mut head_slot, lr, recipe);
            }
            step += 1;
        }
        report.epoch_losses.push(total / n as f64);
        report.probe_losses.push(probe_loss(
            enc,
            adapters.as_deref(),
            head,
            data,
            &probe,
            recipe.temperature,
        )?);
        log::debug!("epoch {} loss {:.4}", epoch + 1, total / n as f64);
    }
    report.steps = step;
    Ok(report)
}

/// Trains `adapters` and the temporary `head` on the first task. The
/// encoder must be frozen and is never written.
pub fn finetune_task1(
    encoder: &EncoderState,
    adapters: &mut AdapterState,
    head: &mut CosineHead,
    data: &Dataset,
    recipe: &TrainRecipe,
    seed: u64,
) -> Result<FitReport> {
    if !encoder.is_frozen() {
        return Err(Error::contract("finetuning requires a frozen encoder"));
    }
    if !adapters.config().is_empty() && adapters.is_frozen() {
        return Err(Error::contract("adapters are frozen"));
    }
    adapters.check_compatible(encoder.config())?;
    let mut enc = encoder.clone();
    fit(&mut enc, Some(adapters), head, data, recipe, seed, false)
}

/// Trains every encoder parameter plus `head` on `data`, then freezes the
/// encoder. Stands in for a pre-trained backbone.
pub fn pretrain_encoder(
    encoder: &mut EncoderState,
    head: &mut CosineHead,
    data: &Dataset,
    recipe: &TrainRecipe,
    seed: u64,
) -> Result<FitReport> {
    encoder.unfreeze();
    let out = fit(encoder, None, head, data, recipe, seed, true);
    encoder.freeze();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = CosineSchedule {
            lr0: 0.01,
            total_steps: 10,
        };
        assert_eq!(s.lr(0), 0.01);
        assert!(s.lr(10).abs() < 1e-15);
        assert!((s.lr(5) - 0.005).abs() < 1e-15);
        assert!(s.lr(9) <= 0.01 * 0.5 * (1.0 + (PI * 9.0 / 10.0).cos()) + 1e-18);
    }

    #[test]
    fn recipe_validation_names_key() {
        let r = TrainRecipe {
            lr: 0.0,
            ..TrainRecipe::default()
        };
        assert!(r.validate().unwrap_err().to_string().contains("recipe.lr"));
    }
}
