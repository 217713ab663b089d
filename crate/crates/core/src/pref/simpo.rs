//! Length-normalized preference loss with a target margin, evaluated on the frozen
//! model with or without steering.

use serde::{Deserialize, Serialize};

use super::data::PreferenceTriplet;
use crate::autodiff::{sigmoid, CustomBackward, Tape, Var};
use crate::error::{Error, Result};
use crate::lm::{sequence_avg_logprob, BoundLm, FrozenLm, TokenSequence};
use crate::sae::{SaeVars, SparseAutoencoder};
use crate::scalar::Scalar;
use crate::steering::{steer_var, ste_l0_loss, top_k_by_magnitude, AdapterVars, SteeringAdapter, SteeringMode, Variant};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimpoConfig {
    pub beta: f64,
    /// Target margin as a multiple of `beta`.
    pub gamma_ratio: f64,
    /// Weight of the per-token steering penalty (ℓ1, or STE ℓ0 for `jump_relu`).
    pub alpha_steer: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub grad_accum: usize,
    pub warmup_ratio: f64,
    pub validation_fraction: f64,
    /// Threshold learning-rate multiplier for `jump_relu`.
    pub theta_lr_mult: f64,
    pub ste_eps: f64,
    pub variant: Variant,
    pub steering_mode: SteeringMode,
}

impl Default for SimpoConfig {
    fn default() -> Self {
        Self {
            beta: 10.0,
            gamma_ratio: 0.5,
            alpha_steer: 0.1,
            lr: 1e-2,
            epochs: 2,
            batch: 16,
            grad_accum: 1,
            warmup_ratio: 0.1,
            validation_fraction: 0.1,
            theta_lr_mult: 1000.0,
            ste_eps: 1e-3,
            variant: Variant::SoftThreshold,
            steering_mode: SteeringMode::Reconstruction,
        }
    }
}

impl SimpoConfig {
    pub fn gamma(&self) -> f64 {
        self.gamma_ratio * self.beta
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.beta > 0.0) {
            return bad("simpo.beta must be positive");
        }
        if !(self.gamma_ratio >= 0.0) || !(self.alpha_steer >= 0.0) {
            return bad("simpo.gamma_ratio and simpo.alpha_steer must be non-negative");
        }
        if !(self.lr > 0.0) || !(self.theta_lr_mult > 0.0) || !(self.ste_eps > 0.0) {
            return bad("simpo.lr, simpo.theta_lr_mult and simpo.ste_eps must be positive");
        }
        if self.epochs == 0 {
            return bad("simpo.epochs must be at least 1");
        }
        if self.batch == 0 || self.grad_accum == 0 {
            return bad("simpo.batch and simpo.grad_accum must be at least 1");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("simpo.warmup_ratio must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) || self.validation_fraction == 0.0 {
            return bad("simpo.validation_fraction must be in (0, 1)");
        }
        Ok(())
    }
}

/// `−log σ(β·lp_w − β·lp_l − γ)` on plain numbers, `lp` being length-normalized.
pub fn simpo_loss_value(beta: f64, gamma: f64, lp_chosen: f64, lp_rejected: f64) -> f64 {
    softplus(-(beta * lp_chosen - beta * lp_rejected - gamma))
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

struct NegLogSigmoid;

impl<T: Scalar> CustomBackward<T> for NegLogSigmoid {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_output: &[T]) -> Vec<Option<Vec<T>>> {
        let g = inputs[0]
            .data()
            .iter()
            .zip(grad_output)
            .map(|(&m, &go)| -sigmoid(-m) * go)
            .collect();
        vec![Some(g)]
    }
}

/// Elementwise `−log σ(m)`, stable for large `|m|`.
pub fn neg_log_sigmoid<'t, T: Scalar>(m: Var<'t, T>) -> Result<Var<'t, T>> {
    let value = m.value().map(|x| T::of(softplus(-x.as_f64())));
    m.tape().custom(&[m], value, Box::new(NegLogSigmoid))
}

/// Evaluation-time edit of the steering vector before it is applied.
#[derive(Clone, Debug, PartialEq)]
pub enum VectorEdit {
    /// Zero the listed features (`true` = zeroed).
    Zero(Vec<bool>),
    /// Keep only the `k` largest-magnitude entries at each position.
    TopK(usize),
}

impl VectorEdit {
    pub fn apply<'t, T: Scalar>(&self, v: Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = v.tape();
        let vv = v.value();
        let d_sae = vv.cols();
        let mask = match self {
            VectorEdit::Zero(zeroed) => {
                if zeroed.len() != d_sae {
                    return Err(Error::Shape {
                        op: "ablation mask",
                        lhs: vec![d_sae],
                        rhs: vec![zeroed.len()],
                    });
                }
                Tensor::vector(zeroed.iter().map(|&z| if z { T::zero() } else { T::one() }).collect())
            }
            VectorEdit::TopK(k) => {
                let mut m = Tensor::zeros(vv.shape());
                for r in 0..vv.rows() {
                    let keep = top_k_by_magnitude(vv.row(r), *k);
                    let row = m.row_mut(r);
                    for i in keep {
                        row[i] = T::one();
                    }
                }
                m
            }
        };
        v.mul(tape.constant(mask))
    }
}

/// A triplet with its two token sequences and their cached hook activations.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub chosen: TokenSequence,
    pub rejected: TokenSequence,
    pub hook_chosen: Tensor<T>,
    pub hook_rejected: Tensor<T>,
}

/// Tokenizes every triplet and caches the frozen prefix's output once.
pub fn prepare<T: Scalar>(model: &FrozenLm<T>, triplets: &[PreferenceTriplet]) -> Result<Vec<Prepared<T>>> {
    triplets
        .iter()
        .map(|t| {
            let chosen = t.chosen_sequence()?;
            let rejected = t.rejected_sequence()?;
            chosen.validate(model.config().vocab_size)?;
            rejected.validate(model.config().vocab_size)?;
            Ok(Prepared {
                hook_chosen: model.hook_activations(&chosen.tokens)?,
                hook_rejected: model.hook_activations(&rejected.tokens)?,
                chosen,
                rejected,
            })
        })
        .collect()
}

/// Adapter and SAE on a tape, plus how to apply the steering.
#[derive(Clone, Copy)]
pub struct SteeringVars<'t, T: Scalar> {
    pub sae: SaeVars<'t, T>,
    pub adapter: AdapterVars<'t, T>,
    pub mode: SteeringMode,
}

/// Length-normalized log-probability of one sequence and the steering used for it.
pub struct SequenceScore<'t, T: Scalar> {
    pub avg_logprob: Var<'t, T>,
    /// `(z, v)` when steered.
    pub steering: Option<(Var<'t, T>, Var<'t, T>)>,
}

pub fn score_sequence<'t, T: Scalar>(
    lm: &BoundLm<'_, 't, T>,
    steer: Option<&SteeringVars<'t, T>>,
    hook: &Tensor<T>,
    seq: &TokenSequence,
    edit: Option<&VectorEdit>,
) -> Result<SequenceScore<'t, T>> {
    let tape = lm.w.tok_emb.tape();
    let h = tape.constant(hook.clone());
    let (x, steering) = match steer {
        Some(s) => {
            let (z, v) = s.adapter.forward(h)?;
            let v = match edit {
                Some(e) => e.apply(v)?,
                None => v,
            };
            (steer_var(s.mode, &s.sae, h, v)?, Some((z, v)))
        }
        None => (h, None),
    };
    let logits = lm.forward_from_hook(x, None)?;
    Ok(SequenceScore {
        avg_logprob: sequence_avg_logprob(logits, seq)?,
        steering,
    })
}

/// Sum of a list of scalars, in order.
pub(crate) fn sum_vars<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let (first, rest) = parts
        .split_first()
        .ok_or_else(|| Error::Empty("nothing to sum".into()))?;
    rest.iter().try_fold(*first, |acc, p| acc.add(*p))
}

/// Batch objective and the quantities logged alongside it.
pub struct Objective<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub simpo: Var<'t, T>,
    pub penalty: Option<Var<'t, T>>,
    pub l0_sum: usize,
    pub l1_sum: f64,
    pub tokens: usize,
}

/// Mean SimPO loss over `items`, plus `alpha_steer` times the per-token steering
/// penalty when steering is present.
pub fn objective<'t, T: Scalar>(
    lm: &BoundLm<'_, 't, T>,
    steer: Option<&SteeringVars<'t, T>>,
    items: &[&Prepared<T>],
    cfg: &SimpoConfig,
    edit: Option<&VectorEdit>,
) -> Result<Objective<'t, T>> {
    if items.is_empty() {
        return Err(Error::Empty("SimPO batch".into()));
    }
    let beta = T::of(cfg.beta);
    let gamma = T::of(cfg.gamma());
    let mut losses = Vec::with_capacity(items.len());
    let mut penalties = Vec::new();
    let (mut l0_sum, mut l1_sum, mut tokens) = (0usize, 0.0, 0usize);
    for it in items {
        let w = score_sequence(lm, steer, &it.hook_chosen, &it.chosen, edit)?;
        let l = score_sequence(lm, steer, &it.hook_rejected, &it.rejected, edit)?;
        let margin = w.avg_logprob.sub(l.avg_logprob)?.scale(beta).shift(-gamma);
        losses.push(neg_log_sigmoid(margin)?);
        for (z, v) in [w.steering, l.steering].into_iter().flatten() {
            let vv = v.value();
            tokens += vv.rows();
            l0_sum += vv.data().iter().filter(|x| **x != T::zero()).count();
            l1_sum += vv.data().iter().map(|x| x.abs().as_f64()).sum::<f64>();
            if let Some(s) = steer {
                penalties.push(match s.adapter.variant {
                    Variant::JumpRelu => ste_l0_loss(z, s.adapter.theta, cfg.ste_eps)?,
                    _ => v.abs().sum(),
                });
            }
        }
    }
    let simpo = sum_vars(&losses)?.scale(T::one() / T::of_usize(items.len()));
    let penalty = if penalties.is_empty() {
        None
    } else {
        Some(sum_vars(&penalties)?.scale(T::one() / T::of_usize(tokens)))
    };
    let total = match penalty {
        Some(p) if cfg.alpha_steer > 0.0 => simpo.add(p.scale(T::of(cfg.alpha_steer)))?,
        _ => simpo,
    };
    let value = total.item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "SimPO objective".into(),
        });
    }
    Ok(Objective {
        total,
        simpo,
        penalty,
        l0_sum,
        l1_sum,
        tokens,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    /// Mean SimPO loss (no penalty).
    pub loss: f64,
    /// Mean count of nonzero steering entries per token (0 when unsteered).
    pub mean_l0: f64,
    pub mean_l1: f64,
    pub tokens: usize,
}

/// Validation SimPO loss of the frozen model, steered by `adapter` if given.
pub fn evaluate<T: Scalar>(
    model: &FrozenLm<T>,
    steering: Option<(&SparseAutoencoder<T>, &SteeringAdapter<T>)>,
    items: &[Prepared<T>],
    cfg: &SimpoConfig,
    edit: Option<&VectorEdit>,
) -> Result<Evaluation> {
    if items.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    if let Some((sae, adapter)) = steering {
        adapter.check_compatible(sae)?;
    }
    let mut loss = 0.0;
    let (mut l0, mut l1, mut tokens) = (0usize, 0.0, 0usize);
    for it in items {
        let tape = Tape::new();
        let lm = model.bind(&tape);
        let steer = match steering {
            Some((sae, adapter)) => Some(SteeringVars {
                sae: sae.bind(&tape, false)?,
                adapter: adapter.bind(&tape, false)?,
                mode: cfg.steering_mode,
            }),
            None => None,
        };
        let obj = objective(&lm, steer.as_ref(), &[it], cfg, edit)?;
        loss += obj.simpo.item().as_f64();
        l0 += obj.l0_sum;
        l1 += obj.l1_sum;
        tokens += obj.tokens;
    }
    let denom = tokens.max(1) as f64;
    Ok(Evaluation {
        loss: loss / items.len() as f64,
        mean_l0: l0 as f64 / denom,
        mean_l1: l1 / denom,
        tokens,
    })
}
