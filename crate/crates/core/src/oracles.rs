//! Finite-difference checks of every trainable objective on random kink-safe
//! instances: the SAE loss, the adapter-steered SimPO loss with its ℓ1 penalty
//! (soft-threshold and ReLU adapters), and SimPO through the full model for the
//! fine-tuning baseline.
//!
//! The JumpReLU threshold gradient is a straight-through surrogate and has no
//! finite-difference counterpart, so it is not checked here.

use serde::Serialize;

use crate::autodiff::{kink_safe_sample, FiniteDiff};
use crate::error::Result;
use crate::lm::{sequence_avg_logprob, BoundLm, FrozenLm, LmConfig, LmWeights};
use crate::pref::{gen_preference_data, neg_log_sigmoid, objective, prepare, DataSpec, SimpoConfig, SteeringVars};
use crate::rng::{normal_tensor, stream, uniform_tensor, StreamRng};
use crate::sae::{SaeVars, SparseAutoencoder};
use crate::steering::{AdapterVars, SteeringAdapter, SteeringMode, Variant};
use crate::tensor::Tensor;

pub const ORACLE_STEP: f64 = 1e-6;
pub const ORACLE_TOL: f64 = 1e-4;
const MAX_DRAWS: usize = 1000;
/// Coordinates checked per model tensor in the full fine-tuning check.
const LM_COORDS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleOutcome {
    pub path: String,
    pub instance: usize,
    pub coords: usize,
    pub max_rel_error: f64,
    pub rejected_draws: usize,
    pub passed: bool,
}

fn tiny_lm_config() -> LmConfig {
    LmConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_mlp: 16,
        hook_layer: 1,
        ..LmConfig::default()
    }
}

fn random_sae(rng: &mut StreamRng, d: usize, d_sae: usize) -> Result<SparseAutoencoder<f64>> {
    SparseAutoencoder::new(
        uniform_tensor(rng, &[d_sae, d], -1.0, 1.0),
        uniform_tensor(rng, &[d_sae], -0.5, 0.5),
        uniform_tensor(rng, &[d, d_sae], -1.0, 1.0),
        uniform_tensor(rng, &[d], -0.5, 0.5),
    )
}

fn random_adapter(rng: &mut StreamRng, d: usize, d_sae: usize, variant: Variant) -> Result<SteeringAdapter<f64>> {
    SteeringAdapter::new(
        normal_tensor(rng, &[d_sae, d], 0.5),
        uniform_tensor(rng, &[d_sae], -0.5, 0.5),
        uniform_tensor(rng, &[d_sae], 0.05, 0.5),
        variant,
    )
}

fn outcome(path: &str, instance: usize, rejected: usize, rep: crate::autodiff::GradCheckReport<f64>) -> OracleOutcome {
    OracleOutcome {
        path: path.to_owned(),
        instance,
        coords: rep.coords_checked,
        max_rel_error: rep.max_rel_error,
        rejected_draws: rejected,
        passed: rep.passed,
    }
}

/// Mean reconstruction-plus-ℓ1 loss over a small batch, all four SAE tensors.
pub fn sae_loss_instance(seed: u64, instance: usize) -> Result<OracleOutcome> {
    let (d, d_sae) = (6, 12);
    let mut rng = stream(seed, &format!("oracle-sae-loss-{instance}"));
    let ((sae, x), rejected) = kink_safe_sample(ORACLE_STEP, MAX_DRAWS, || {
        let sae = random_sae(&mut rng, d, d_sae)?;
        let x = uniform_tensor::<f64>(&mut rng, &[4, d], -1.0, 1.0);
        let mut margin = f64::INFINITY;
        for r in 0..4 {
            let scale = x.row(r).iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for z in sae.pre_activations(x.row(r))? {
                margin = margin.min(z.abs() / scale);
            }
        }
        Ok(((sae, x), margin))
    })?;
    let params: Vec<Tensor<f64>> = sae.tensors().into_iter().cloned().collect();
    let rep = FiniteDiff::new(ORACLE_STEP, ORACLE_TOL).check(
        |tape, p| SaeVars::from_vars([p[0], p[1], p[2], p[3]])?.loss(tape.constant(x.clone()), 0.1),
        &params,
    )?;
    Ok(outcome("sae_loss", instance, rejected, rep))
}

/// SimPO plus the ℓ1 steering penalty on one triplet through a random model, with
/// respect to the adapter's parameters.
pub fn steered_simpo_instance(seed: u64, instance: usize, variant: Variant) -> Result<OracleOutcome> {
    let model = FrozenLm::<f64>::random(tiny_lm_config(), seed.wrapping_add(instance as u64))?;
    let d = model.config().d_model;
    let d_sae = 16;
    let sae = random_sae(&mut stream(seed, &format!("oracle-steered-sae-{instance}")), d, d_sae)?;
    let spec = DataSpec {
        n: 1,
        ..DataSpec::default()
    };
    let triplets = gen_preference_data(seed.wrapping_add(instance as u64), &spec)?;
    let items = prepare(&model, &triplets)?;
    let cfg = SimpoConfig {
        variant,
        alpha_steer: 0.1,
        ..SimpoConfig::default()
    };
    let mut rng = stream(seed, &format!("oracle-adapter-{}-{instance}", variant.as_str()));
    let (adapter, rejected) = kink_safe_sample(ORACLE_STEP, MAX_DRAWS, || {
        let ad = random_adapter(&mut rng, d, d_sae, variant)?;
        let mut margin = f64::INFINITY;
        for hook in [&items[0].hook_chosen, &items[0].hook_rejected] {
            for r in 0..hook.rows() {
                let x = hook.row(r);
                let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                for (i, z) in ad.pre_activations(x)?.into_iter().enumerate() {
                    let gap = match variant {
                        Variant::Relu => z.abs(),
                        _ => (z.abs() - ad.theta.data()[i]).abs(),
                    };
                    margin = margin.min(gap / scale);
                }
            }
        }
        Ok((ad, margin))
    })?;
    let params: Vec<Tensor<f64>> = adapter.tensors().into_iter().cloned().collect();
    let item_refs = [&items[0]];
    let rep = FiniteDiff::new(ORACLE_STEP, ORACLE_TOL).check(
        |tape, p| {
            let lm = model.bind(tape);
            let sv = SteeringVars {
                sae: sae.bind(tape, false)?,
                adapter: AdapterVars::from_vars([p[0], p[1], p[2]], variant)?,
                mode: SteeringMode::Reconstruction,
            };
            Ok(objective(&lm, Some(&sv), &item_refs, &cfg, None)?.total)
        },
        &params,
    )?;
    Ok(outcome(&format!("steered_simpo_{}", variant.as_str()), instance, rejected, rep))
}

/// SimPO on one triplet with respect to every model tensor, a few coordinates each.
pub fn full_simpo_instance(seed: u64, instance: usize) -> Result<OracleOutcome> {
    let cfg = tiny_lm_config();
    let model = FrozenLm::<f64>::random(cfg.clone(), seed.wrapping_add(500 + instance as u64))?;
    let spec = DataSpec {
        n: 1,
        ..DataSpec::default()
    };
    let t = &gen_preference_data(seed.wrapping_add(500 + instance as u64), &spec)?[0];
    let (w, l) = (t.chosen_sequence()?, t.rejected_sequence()?);
    let simpo = SimpoConfig::default();
    let params: Vec<Tensor<f64>> = model.params().iter().into_iter().cloned().collect();
    let rep = FiniteDiff::new(ORACLE_STEP, ORACLE_TOL).with_max_coords(LM_COORDS).check(
        |_, p| {
            let weights = LmWeights::from_vec(cfg.n_layers, p.to_vec()).expect("parameter count");
            let lm = BoundLm::from_weights(&cfg, weights);
            let lw = sequence_avg_logprob(lm.forward_with_hook(&w.tokens, None)?.logits, &w)?;
            let ll = sequence_avg_logprob(lm.forward_with_hook(&l.tokens, None)?.logits, &l)?;
            neg_log_sigmoid(lw.sub(ll)?.scale(simpo.beta).shift(-simpo.gamma()))
        },
        &params,
    )?;
    Ok(outcome("full_simpo", instance, 0, rep))
}

/// `instances` checks of each path.
pub fn run_grad_oracles(seed: u64, instances: usize) -> Result<Vec<OracleOutcome>> {
    let mut out = Vec::with_capacity(instances * 4);
    for i in 0..instances {
        out.push(sae_loss_instance(seed, i)?);
    }
    for variant in [Variant::SoftThreshold, Variant::Relu] {
        for i in 0..instances {
            out.push(steered_simpo_instance(seed, i, variant)?);
        }
    }
    for i in 0..instances {
        out.push(full_simpo_instance(seed, i)?);
    }
    Ok(out)
}
