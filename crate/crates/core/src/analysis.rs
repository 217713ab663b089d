//! Measurements on a trained adapter: which feature categories it steers, what
//! ablating them costs, how a static top-k truncation compares, how feature usage
//! is distributed, and parameter sweeps.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{encode, FrozenLm};
use crate::pref::{
    evaluate, fit_adapter, PreferenceTriplet, Prepared, SimpoConfig, TokenClass, VectorEdit,
};
use crate::rng::stream;
use crate::sae::{train_sae, SaeTrainConfig, SparseAutoencoder};
use crate::scalar::Scalar;
use crate::steering::{SteeringAdapter, Variant};

/// A named set of SAE feature indices, kept sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureCategoryMask {
    pub name: String,
    members: Vec<usize>,
}

impl FeatureCategoryMask {
    pub fn new(name: impl Into<String>, mut members: Vec<usize>, d_sae: usize) -> Result<Self> {
        let name = name.into();
        members.sort_unstable();
        if members.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig(format!("mask {name:?} lists a feature twice")));
        }
        if let Some(&m) = members.last() {
            if m >= d_sae {
                return Err(Error::InvalidConfig(format!(
                    "mask {name:?} has feature {m} outside 0..{d_sae}"
                )));
            }
        }
        Ok(Self { name, members })
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.members.binary_search(&i).is_ok()
    }

    pub fn to_flags(&self, d_sae: usize) -> Vec<bool> {
        let mut f = vec![false; d_sae];
        for &i in &self.members {
            f[i] = true;
        }
        f
    }

    /// `name: i j k` on one line.
    pub fn to_line(&self) -> String {
        let idx: Vec<String> = self.members.iter().map(usize::to_string).collect();
        format!("{}: {}", self.name, idx.join(" "))
    }

    pub fn parse_line(line: &str, d_sae: usize) -> Result<Self> {
        let (name, rest) = line
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("mask line without ':' in {line:?}")))?;
        let members = rest
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::Parse(format!("bad feature index {s:?}"))))
            .collect::<Result<_>>()?;
        Self::new(name.trim(), members, d_sae)
    }
}

/// Categories assigned from per-token SAE activations.
pub const CATEGORIES: [TokenClass; 2] = [TokenClass::Style, TokenClass::Content];

/// Feature `i` joins category `C` when its mean activation on `C` tokens exceeds
/// `ratio` times its mean activation on all other tokens (and is positive).
pub fn masks_from_activations<'a>(
    tokens: impl IntoIterator<Item = (TokenClass, &'a [f64])>,
    d_sae: usize,
    ratio: f64,
) -> Result<Vec<FeatureCategoryMask>> {
    let mut sums: BTreeMap<TokenClass, (Vec<f64>, usize)> = BTreeMap::new();
    let mut total = (vec![0.0; d_sae], 0usize);
    for (class, f) in tokens {
        if f.len() != d_sae {
            return Err(Error::Shape {
                op: "category masks",
                lhs: vec![d_sae],
                rhs: vec![f.len()],
            });
        }
        let e = sums.entry(class).or_insert_with(|| (vec![0.0; d_sae], 0));
        for (i, &v) in f.iter().enumerate() {
            e.0[i] += v;
            total.0[i] += v;
        }
        e.1 += 1;
        total.1 += 1;
    }
    CATEGORIES
        .iter()
        .map(|&c| {
            let (s, n) = sums
                .get(&c)
                .ok_or_else(|| Error::Empty(format!("no tokens of class {}", c.as_str())))?;
            let n_else = total.1 - n;
            if n_else == 0 {
                return Err(Error::Empty(format!("no tokens outside class {}", c.as_str())));
            }
            let members = (0..d_sae)
                .filter(|&i| {
                    let mean_c = s[i] / *n as f64;
                    let mean_else = (total.0[i] - s[i]) / n_else as f64;
                    mean_c > 0.0 && mean_c > ratio * mean_else
                })
                .collect();
            FeatureCategoryMask::new(c.as_str(), members, d_sae)
        })
        .collect()
}

/// Hook activations with their class labels, for the prompt + chosen sequence and
/// the rejected response of every triplet.
fn labelled_positions<T: Scalar>(
    model: &FrozenLm<T>,
    triplets: &[PreferenceTriplet],
) -> Result<Vec<(TokenClass, Vec<T>)>> {
    let mut out = Vec::new();
    for t in triplets {
        let chosen = t.chosen_sequence()?;
        let acts = model.hook_activations(&chosen.tokens)?;
        for (r, &c) in t.chosen_classes().iter().enumerate() {
            out.push((c, acts.row(r).to_vec()));
        }
        let rejected = t.rejected_sequence()?;
        let acts = model.hook_activations(&rejected.tokens)?;
        let start = t.labels.prompt.len();
        for (k, &c) in t.labels.rejected.iter().enumerate() {
            out.push((c, acts.row(start + k).to_vec()));
        }
    }
    Ok(out)
}

pub fn derive_category_masks<T: Scalar>(
    model: &FrozenLm<T>,
    sae: &SparseAutoencoder<T>,
    triplets: &[PreferenceTriplet],
    ratio: f64,
) -> Result<Vec<FeatureCategoryMask>> {
    let feats: Vec<(TokenClass, Vec<f64>)> = labelled_positions(model, triplets)?
        .into_iter()
        .map(|(c, x)| Ok((c, sae.encode(&x)?.iter().map(|v| v.as_f64()).collect())))
        .collect::<Result<_>>()?;
    masks_from_activations(feats.iter().map(|(c, f)| (*c, f.as_slice())), sae.d_sae(), ratio)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositionStats {
    pub mean: f64,
    /// Per-token proportions for the tokens that had any active feature.
    pub per_token: Vec<f64>,
    pub skipped: usize,
}

/// Mean over tokens of `|active ∩ mask| / |active|`, skipping empty sets.
pub fn composition_metric(active_sets: &[Vec<usize>], mask: &FeatureCategoryMask) -> Result<CompositionStats> {
    let mut per_token = Vec::with_capacity(active_sets.len());
    let mut skipped = 0;
    for set in active_sets {
        if set.is_empty() {
            skipped += 1;
            continue;
        }
        let hits = set.iter().filter(|&&i| mask.contains(i)).count();
        per_token.push(hits as f64 / set.len() as f64);
    }
    if per_token.is_empty() {
        return Err(Error::Empty("every active set is empty".into()));
    }
    let mean = per_token.iter().sum::<f64>() / per_token.len() as f64;
    Ok(CompositionStats {
        mean,
        per_token,
        skipped,
    })
}

/// Standard deviation of the mean over `resamples` seeded bootstrap resamples.
pub fn bootstrap_stderr(values: &[f64], resamples: usize, seed: u64) -> f64 {
    if values.len() < 2 || resamples < 2 {
        return 0.0;
    }
    let mut rng = stream(seed, "bootstrap");
    let n = values.len();
    let means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    let mu = means.iter().sum::<f64>() / resamples as f64;
    (means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (resamples - 1) as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Context {
    PromptOnly,
    PromptChosen,
    PromptRejected,
}

impl Context {
    pub const ALL: [Context; 3] = [Context::PromptOnly, Context::PromptChosen, Context::PromptRejected];

    pub fn as_str(self) -> &'static str {
        match self {
            Context::PromptOnly => "prompt_only",
            Context::PromptChosen => "prompt_chosen",
            Context::PromptRejected => "prompt_rejected",
        }
    }

    fn tokens(self, t: &PreferenceTriplet) -> Result<Vec<usize>> {
        match self {
            Context::PromptOnly => encode(&t.prompt),
            Context::PromptChosen => Ok(t.chosen_sequence()?.tokens),
            Context::PromptRejected => Ok(t.rejected_sequence()?.tokens),
        }
    }
}

/// SAE features (`f > 0`) and steering features (`v ≠ 0`) active at every token
/// of one context.
pub struct ContextActivity {
    pub context: Context,
    pub sae_active: Vec<Vec<usize>>,
    pub steer_active: Vec<Vec<usize>>,
    pub steer_values: Vec<Vec<f64>>,
}

pub fn context_activity<T: Scalar>(
    model: &FrozenLm<T>,
    sae: &SparseAutoencoder<T>,
    adapter: &SteeringAdapter<T>,
    triplets: &[PreferenceTriplet],
    context: Context,
) -> Result<ContextActivity> {
    adapter.check_compatible(sae)?;
    let mut act = ContextActivity {
        context,
        sae_active: Vec::new(),
        steer_active: Vec::new(),
        steer_values: Vec::new(),
    };
    for t in triplets {
        let acts = model.hook_activations(&context.tokens(t)?)?;
        for r in 0..acts.rows() {
            let x = acts.row(r);
            let f = sae.encode(x)?;
            act.sae_active.push((0..f.len()).filter(|&i| f[i] > T::zero()).collect());
            let v = adapter.forward(x)?.into_vec();
            act.steer_active.push((0..v.len()).filter(|&i| v[i] != T::zero()).collect());
            act.steer_values.push(v.iter().map(|x| x.as_f64()).collect());
        }
    }
    if act.sae_active.is_empty() {
        return Err(Error::Empty(format!("context {} has no tokens", context.as_str())));
    }
    Ok(act)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompositionReport {
    pub context: Context,
    pub mask: String,
    pub tokens: usize,
    pub sae_baseline_pct: f64,
    pub sae_baseline_stderr: f64,
    pub steered_pct: Option<f64>,
    pub steered_stderr: Option<f64>,
    pub relative_change_pct: Option<f64>,
    /// Why the relative change is missing, when it is.
    pub note: Option<String>,
    pub sae_mean_l0: f64,
    pub steered_mean_l0: f64,
}

pub fn composition_report<T: Scalar>(
    model: &FrozenLm<T>,
    sae: &SparseAutoencoder<T>,
    adapter: &SteeringAdapter<T>,
    triplets: &[PreferenceTriplet],
    masks: &[FeatureCategoryMask],
    resamples: usize,
    seed: u64,
) -> Result<Vec<CompositionReport>> {
    let mut out = Vec::new();
    for context in Context::ALL {
        let act = context_activity(model, sae, adapter, triplets, context)?;
        let n = act.sae_active.len();
        let sae_l0 = act.sae_active.iter().map(Vec::len).sum::<usize>() as f64 / n as f64;
        let steer_l0 = act.steer_active.iter().map(Vec::len).sum::<usize>() as f64 / n as f64;
        for mask in masks {
            let base = composition_metric(&act.sae_active, mask)?;
            let steered = composition_metric(&act.steer_active, mask).ok();
            let (relative, note) = match &steered {
                None => (None, Some("adapter produced no active features".to_owned())),
                Some(_) if base.mean == 0.0 => (None, Some("baseline proportion is zero".to_owned())),
                Some(s) => (Some((s.mean - base.mean) / base.mean * 100.0), None),
            };
            out.push(CompositionReport {
                context,
                mask: mask.name.clone(),
                tokens: n,
                sae_baseline_pct: base.mean * 100.0,
                sae_baseline_stderr: bootstrap_stderr(&base.per_token, resamples, seed) * 100.0,
                steered_pct: steered.as_ref().map(|s| s.mean * 100.0),
                steered_stderr: steered
                    .as_ref()
                    .map(|s| bootstrap_stderr(&s.per_token, resamples, seed) * 100.0),
                relative_change_pct: relative,
                note,
                sae_mean_l0: sae_l0,
                steered_mean_l0: steer_l0,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationResult {
    pub ablated: String,
    pub features_ablated: usize,
    pub loss: f64,
    pub full_loss: f64,
    /// `(loss − full_loss) / features_ablated`; absent when nothing is ablated.
    pub loss_per_feature: Option<f64>,
}

/// Validation loss with the steering entries of every feature in `masks` zeroed.
pub fn ablate_categories<T: Scalar>(
    model: &FrozenLm<T>,
    sae: &SparseAutoencoder<T>,
    adapter: &SteeringAdapter<T>,
    val: &[Prepared<T>],
    masks: &[&FeatureCategoryMask],
    cfg: &SimpoConfig,
    full_loss: f64,
) -> Result<AblationResult> {
    let mut zeroed = vec![false; sae.d_sae()];
    for m in masks {
        for &i in m.members() {
            zeroed[i] = true;
        }
    }
    let count = zeroed.iter().filter(|&&z| z).count();
    let loss = evaluate(model, Some((sae, adapter)), val, cfg, Some(&VectorEdit::Zero(zeroed)))?.loss;
    let names: Vec<&str> = masks.iter().map(|m| m.name.as_str()).collect();
    Ok(AblationResult {
        ablated: if names.is_empty() { "none".into() } else { names.join("+") },
        features_ablated: count,
        loss,
        full_loss,
        loss_per_feature: (count > 0).then(|| (loss - full_loss) / count as f64),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationStudy {
    pub full_loss: f64,
    pub unsteered_loss: f64,
    pub rows: Vec<AblationResult>,
    /// `L(A∪B) − L(A) − L(B) + L(full)` for the first two masks.
    pub interaction: Option<f64>,
}

/// Ablates nothing, each mask, the first two masks together, and every feature.
pub fn ablation_study<T: Scalar>(
    model: &FrozenLm<T>,
    sae: &SparseAutoencoder<T>,
    adapter: &SteeringAdapter<T>,
    val: &[Prepared<T>],
    masks: &[FeatureCategoryMask],
    cfg: &SimpoConfig,
) -> Result<AblationStudy> {
    let full_loss = evaluate(model, Some((sae, adapter)), val, cfg, None)?.loss;
    let unsteered_loss = evaluate(model, None, val, cfg, None)?.loss;
    let all = FeatureCategoryMask::new("all", (0..sae.d_sae()).collect(), sae.d_sae())?;
    let mut rows = vec![ablate_categories(model, sae, adapter, val, &[], cfg, full_loss)?];
    for m in masks {
        rows.push(ablate_categories(model, sae, adapter, val, &[m], cfg, full_loss)?);
    }
    let mut interaction = None;
    if masks.len() >= 2 {
        let both = ablate_categories(model, sae, adapter, val, &[&masks[0], &masks[1]], cfg, full_loss)?;
        interaction = Some(both.loss - rows[1].loss - rows[2].loss + full_loss);
        rows.push(both);
    }
    rows.push(ablate_categories(model, sae, adapter, val, &[&all], cfg, full_loss)?);
    Ok(AblationStudy {
        full_loss,
        unsteered_loss,
        rows,
        interaction,
    })
}

/// Percentages of `d_sae` kept by the static top-k baseline.
pub const TOPK_PCTS: [f64; 8] = [0.1, 0.2, 0.4, 0.8, 1.6, 3.2, 6.4, 12.8];

/// `⌈k%·d_sae⌉`
pub fn topk_count(k_pct: f64, d_sae: usize) -> Result<usize> {
    if !(k_pct > 0.0 && k_pct <= 100.0) {
        return Err(Error::InvalidConfig(format!("top-k percentage {k_pct} outside (0, 100]")));
    }
    Ok(((k_pct * d_sae as f64 / 100.0).ceil() as usize).clamp(1, d_sae))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TopKPoint {
    pub label: String,
    pub k_pct: Option<f64>,
    pub k: Option<usize>,
    pub mean_l0: f64,
    pub mean_l0_frac: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TopKCurve {
    pub points: Vec<TopKPoint>,
    pub dynamic: TopKPoint,
    pub unsteered_loss: f64,
}

pub fn static_topk_baseline<T: Scalar>(
    model: &FrozenLm<T>,
    sae: &SparseAutoencoder<T>,
    adapter: &SteeringAdapter<T>,
    val: &[Prepared<T>],
    k_pcts: &[f64],
    cfg: &SimpoConfig,
) -> Result<TopKCurve> {
    let d_sae = sae.d_sae() as f64;
    let counts = k_pcts
        .iter()
        .map(|&k| topk_count(k, sae.d_sae()))
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::with_capacity(k_pcts.len());
    for (&k_pct, &k) in k_pcts.iter().zip(&counts) {
        let e = evaluate(model, Some((sae, adapter)), val, cfg, Some(&VectorEdit::TopK(k)))?;
        points.push(TopKPoint {
            label: format!("top{k_pct}%"),
            k_pct: Some(k_pct),
            k: Some(k),
            mean_l0: e.mean_l0,
            mean_l0_frac: e.mean_l0 / d_sae,
            loss: e.loss,
        });
    }
    let e = evaluate(model, Some((sae, adapter)), val, cfg, None)?;
    let unsteered_loss = evaluate(model, None, val, cfg, None)?.loss;
    Ok(TopKCurve {
        points,
        dynamic: TopKPoint {
            label: "dynamic".into(),
            k_pct: None,
            k: None,
            mean_l0: e.mean_l0,
            mean_l0_frac: e.mean_l0 / d_sae,
            loss: e.loss,
        },
        unsteered_loss,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExpFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares fit of `ln(freq)` against rank `0, 1, …`. All frequencies must
/// be positive. `r2` is 1 when the fit is exact, including the constant case.
pub fn fit_log_linear(freqs: &[f64]) -> Result<ExpFit> {
    if freqs.len() < 2 {
        return Err(Error::Degenerate("need at least two positive frequencies to fit".into()));
    }
    if freqs.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::Degenerate("log-linear fit needs positive frequencies".into()));
    }
    let n = freqs.len() as f64;
    let ys: Vec<f64> = freqs.iter().map(|f| f.ln()).collect();
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        ss_res += (y - (intercept + slope * i as f64)).powi(2);
        ss_tot += (y - my).powi(2);
    }
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res <= f64::EPSILON {
        1.0
    } else {
        0.0
    };
    Ok(ExpFit { slope, intercept, r2 })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UsageDistribution {
    /// `(feature, frequency)` sorted by descending frequency, ties by index.
    pub ranked: Vec<(usize, f64)>,
    pub fit: ExpFit,
    pub tokens: usize,
}

/// Fraction of tokens where each feature in `features` is steered, ranked, with an
/// exponential fit over the features that were used at all.
pub fn usage_distribution(active_sets: &[Vec<usize>], features: &[usize]) -> Result<UsageDistribution> {
    if active_sets.is_empty() {
        return Err(Error::Empty("no tokens for usage distribution".into()));
    }
    let max = features.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; max];
    for set in active_sets {
        for &i in set {
            if i < max {
                counts[i] += 1;
            }
        }
    }
    let n = active_sets.len() as f64;
    let mut ranked: Vec<(usize, f64)> = features.iter().map(|&i| (i, counts[i] as f64 / n)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let used: Vec<f64> = ranked.iter().map(|r| r.1).filter(|&f| f > 0.0).collect();
    if used.is_empty() {
        return Err(Error::Degenerate("no feature was ever steered".into()));
    }
    let fit = fit_log_linear(&used)?;
    Ok(UsageDistribution {
        ranked,
        fit,
        tokens: active_sets.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UsageReport {
    pub context: Context,
    pub subset: String,
    pub result: std::result::Result<UsageDistribution, String>,
}

/// Usage distributions per context, over all features and within each mask.
pub fn usage_report<T: Scalar>(
    model: &FrozenLm<T>,
    sae: &SparseAutoencoder<T>,
    adapter: &SteeringAdapter<T>,
    triplets: &[PreferenceTriplet],
    masks: &[FeatureCategoryMask],
) -> Result<Vec<UsageReport>> {
    let all: Vec<usize> = (0..sae.d_sae()).collect();
    let mut out = Vec::new();
    for context in Context::ALL {
        let act = context_activity(model, sae, adapter, triplets, context)?;
        let subsets = std::iter::once(("all", all.as_slice())).chain(masks.iter().map(|m| (m.name.as_str(), m.members())));
        for (name, feats) in subsets {
            out.push(UsageReport {
                context,
                subset: name.to_owned(),
                result: usage_distribution(&act.steer_active, feats).map_err(|e| e.to_string()),
            });
        }
    }
    Ok(out)
}

/// One sweep configuration; unset fields take the base configuration's values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    pub layer: Option<usize>,
    pub alpha_steer: Option<f64>,
    pub variant: Option<Variant>,
}

impl SweepPoint {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(l) = self.layer {
            parts.push(format!("layer={l}"));
        }
        if let Some(a) = self.alpha_steer {
            parts.push(format!("alpha={a}"));
        }
        if let Some(v) = self.variant {
            parts.push(format!("variant={v}"));
        }
        if parts.is_empty() {
            "base".into()
        } else {
            parts.join(";")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub label: String,
    pub layer: usize,
    pub alpha_steer: f64,
    pub variant: Variant,
    pub ok: bool,
    pub unsteered_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub improved: Option<bool>,
    pub mean_l0: Option<f64>,
    pub mean_l1: Option<f64>,
    pub sae_mean_l0: Option<f64>,
    pub error: Option<String>,
}

pub struct SweepInputs<'a, T> {
    pub model: &'a FrozenLm<T>,
    /// SAE for the model's own hook layer.
    pub sae: &'a SparseAutoencoder<T>,
    /// Pretraining documents, for SAEs at other layers.
    pub corpus: &'a [Vec<usize>],
    pub sae_cfg: &'a SaeTrainConfig,
    pub train: &'a [PreferenceTriplet],
    pub val: &'a [PreferenceTriplet],
    pub base: &'a SimpoConfig,
    /// Epochs per configuration.
    pub epochs: usize,
    pub seed: u64,
}

/// Trains one adapter per point. A failing point is recorded and the sweep goes on.
pub fn sweep<T: Scalar>(inputs: &SweepInputs<'_, T>, points: &[SweepPoint]) -> Result<Vec<SweepRow>> {
    if points.is_empty() {
        return Err(Error::Empty("sweep needs at least one configuration".into()));
    }
    let own_layer = inputs.model.config().hook_layer;
    let mut saes: BTreeMap<usize, std::result::Result<(SparseAutoencoder<T>, f64), String>> = BTreeMap::new();
    let mut rows = Vec::with_capacity(points.len());
    for p in points {
        let layer = p.layer.unwrap_or(own_layer);
        let cfg = SimpoConfig {
            alpha_steer: p.alpha_steer.unwrap_or(inputs.base.alpha_steer),
            variant: p.variant.unwrap_or(inputs.base.variant),
            epochs: inputs.epochs,
            ..inputs.base.clone()
        };
        let mut row = SweepRow {
            label: p.label(),
            layer,
            alpha_steer: cfg.alpha_steer,
            variant: cfg.variant,
            ok: false,
            unsteered_loss: None,
            val_loss: None,
            improved: None,
            mean_l0: None,
            mean_l1: None,
            sae_mean_l0: None,
            error: None,
        };
        let outcome = (|| -> Result<()> {
            let model = inputs.model.with_hook_layer(layer)?;
            let entry = saes.entry(layer).or_insert_with(|| {
                if layer == own_layer {
                    let acts = crate::sae::collect_activations(&model, inputs.corpus).map_err(|e| e.to_string())?;
                    let held = &acts[acts.len() - acts.len().div_ceil(10)..];
                    let l0 = crate::sae::evaluate(inputs.sae, held).map_err(|e| e.to_string())?.1;
                    Ok((inputs.sae.clone(), l0))
                } else {
                    train_sae(&model, inputs.corpus, inputs.sae_cfg, inputs.seed)
                        .map(|(s, r)| (s, r.heldout_mean_l0))
                        .map_err(|e| e.to_string())
                }
            });
            let (sae, sae_l0) = entry.as_ref().map_err(|e| Error::Training(format!("SAE for layer {layer}: {e}")))?;
            row.sae_mean_l0 = Some(*sae_l0);
            let adapter = SteeringAdapter::init(sae.d(), sae.d_sae(), cfg.variant, inputs.seed)?;
            let fit = fit_adapter(&model, sae, adapter, inputs.train, inputs.val, &cfg, inputs.seed)?;
            row.unsteered_loss = Some(fit.unsteered.loss);
            row.val_loss = Some(fit.steered.loss);
            row.improved = Some(fit.improved());
            row.mean_l0 = Some(fit.steered.mean_l0);
            row.mean_l1 = Some(fit.steered.mean_l1);
            Ok(())
        })();
        match outcome {
            Ok(()) => row.ok = true,
            Err(e) => row.error = Some(e.to_string()),
        }
        rows.push(row);
    }
    Ok(rows)
}

/// The default grid: three penalty strengths, every hook layer after the first,
/// and the two alternative activations.
pub fn default_sweep_points(n_layers: usize, alphas: &[f64]) -> Vec<SweepPoint> {
    let mut pts: Vec<SweepPoint> = alphas
        .iter()
        .map(|&a| SweepPoint {
            alpha_steer: Some(a),
            ..SweepPoint::default()
        })
        .collect();
    pts.extend((1..n_layers).map(|l| SweepPoint {
        layer: Some(l),
        ..SweepPoint::default()
    }));
    pts.extend([Variant::Relu, Variant::JumpRelu].map(|v| SweepPoint {
        variant: Some(v),
        ..SweepPoint::default()
    }));
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(m: &[usize]) -> FeatureCategoryMask {
        FeatureCategoryMask::new("m", m.to_vec(), 16).unwrap()
    }

    #[test]
    fn composition_examples() {
        let sets = vec![vec![1, 3, 5]];
        assert!((composition_metric(&sets, &mask(&[3, 5, 7])).unwrap().mean - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(composition_metric(&sets, &mask(&[0, 2])).unwrap().mean, 0.0);
        assert_eq!(composition_metric(&sets, &mask(&[1, 3, 5, 9])).unwrap().mean, 1.0);
        let with_empty = vec![vec![], vec![1]];
        let s = composition_metric(&with_empty, &mask(&[1])).unwrap();
        assert_eq!((s.mean, s.skipped), (1.0, 1));
        assert!(composition_metric(&[vec![], vec![]], &mask(&[1])).is_err());
    }

    #[test]
    fn mask_validation_and_text_format() {
        assert!(FeatureCategoryMask::new("x", vec![1, 1], 4).is_err());
        assert!(FeatureCategoryMask::new("x", vec![4], 4).is_err());
        let m = FeatureCategoryMask::new("style", vec![9, 2, 5], 16).unwrap();
        assert_eq!(m.members(), &[2, 5, 9]);
        assert_eq!(m.to_line(), "style: 2 5 9");
        assert_eq!(FeatureCategoryMask::parse_line(&m.to_line(), 16).unwrap(), m);
    }

    fn synthetic_tokens() -> Vec<(TokenClass, Vec<f64>)> {
        let classes = [TokenClass::Style, TokenClass::Content, TokenClass::Other];
        (0..60)
            .map(|k| {
                let c = classes[k % 3];
                let mut f = vec![0.0; 4];
                if c == TokenClass::Style {
                    f[0] = 1.0 + (k as f64) * 0.01;
                }
                f[1] = 0.5;
                f[2] = if c == TokenClass::Content { 3.0 } else { 0.2 };
                (c, f)
            })
            .collect()
    }

    #[test]
    fn masks_from_synthetic_activations() {
        let toks = synthetic_tokens();
        let m = masks_from_activations(toks.iter().map(|(c, f)| (*c, f.as_slice())), 4, 2.0).unwrap();
        assert_eq!(m[0].name, "style");
        assert_eq!(m[0].members(), &[0]);
        assert_eq!(m[1].members(), &[2]);
        assert!(!m.iter().any(|mk| mk.contains(1)));
    }

    #[test]
    fn masks_invariant_to_token_order() {
        let mut toks = synthetic_tokens();
        let a = masks_from_activations(toks.iter().map(|(c, f)| (*c, f.as_slice())), 4, 2.0).unwrap();
        let order = crate::rng::permutation(&mut stream(3, "p"), toks.len());
        toks = order.iter().map(|&i| toks[i].clone()).collect();
        let b = masks_from_activations(toks.iter().map(|(c, f)| (*c, f.as_slice())), 4, 2.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masks_need_every_class() {
        let toks = [(TokenClass::Style, vec![1.0, 0.0])];
        assert!(masks_from_activations(toks.iter().map(|(c, f)| (*c, f.as_slice())), 2, 2.0).is_err());
    }

    #[test]
    fn topk_counts() {
        assert_eq!(topk_count(100.0, 256).unwrap(), 256);
        assert_eq!(topk_count(0.1, 256).unwrap(), 1);
        assert_eq!(topk_count(12.8, 256).unwrap(), 33);
        assert_eq!(topk_count(50.0, 4).unwrap(), 2);
        assert!(topk_count(0.0, 4).is_err());
        assert!(topk_count(100.5, 4).is_err());
    }

    #[test]
    fn topk_ties_go_to_lower_index() {
        use crate::steering::top_k_by_magnitude;
        assert_eq!(top_k_by_magnitude(&[0.5, -2.0, 0.1, 1.0], 2), vec![1, 3]);
        assert_eq!(top_k_by_magnitude(&[1.0, -1.0, 1.0], 1), vec![0]);
        assert_eq!(top_k_by_magnitude(&[0.0, 2.0, -2.0, 2.0], 2), vec![1, 2]);
        let rev = [2.0, -2.0, 0.0];
        assert_eq!(top_k_by_magnitude(&rev, 1), vec![0]);
    }

    #[test]
    fn exact_exponential_fit() {
        let f: Vec<f64> = (0..3).map(|i| (-(i as f64)).exp()).collect();
        let fit = fit_log_linear(&f).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        let flat = fit_log_linear(&[0.3; 5]).unwrap();
        assert_eq!(flat.slope, 0.0);
        assert!(fit_log_linear(&[0.5]).is_err());
        assert!(fit_log_linear(&[0.5, 0.0]).is_err());
    }

    #[test]
    fn noisy_exponential_fit() {
        let mut rng = stream(4, "noise");
        let f: Vec<f64> = (0..50)
            .map(|i| {
                let noise: f64 = rng.random_range(-1e-6..1e-6);
                (-0.07 * i as f64 + noise).exp()
            })
            .collect();
        let fit = fit_log_linear(&f).unwrap();
        assert!((fit.slope + 0.07).abs() < 1e-3);
    }

    #[test]
    fn usage_is_ranked() {
        let sets = vec![vec![0, 1, 2], vec![0, 1], vec![0], vec![0, 3]];
        let u = usage_distribution(&sets, &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(u.ranked[0], (0, 1.0));
        assert_eq!(u.ranked[1], (1, 0.5));
        assert_eq!(u.ranked[2].0, 2);
        assert_eq!(u.ranked[4], (4, 0.0));
        assert!(u.ranked.windows(2).all(|w| w[0].1 >= w[1].1));
        assert!(usage_distribution(&[vec![], vec![]], &[0, 1]).is_err());
    }

    #[test]
    fn bootstrap_is_seeded() {
        let v: Vec<f64> = (0..100).map(|i| (i % 7) as f64).collect();
        let a = bootstrap_stderr(&v, 1000, 1);
        assert_eq!(a, bootstrap_stderr(&v, 1000, 1));
        let sd = {
            let m = v.iter().sum::<f64>() / 100.0;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 99.0).sqrt()
        };
        assert!((a - sd / 10.0).abs() < 0.2 * sd / 10.0);
    }

    #[test]
    fn sweep_point_labels() {
        assert_eq!(SweepPoint::default().label(), "base");
        let p = SweepPoint {
            layer: Some(1),
            alpha_steer: Some(0.1),
            variant: Some(Variant::Relu),
        };
        assert_eq!(p.label(), "layer=1;alpha=0.1;variant=relu");
        assert_eq!(default_sweep_points(4, &[0.01, 0.1, 1.0]).len(), 8);
    }
}
