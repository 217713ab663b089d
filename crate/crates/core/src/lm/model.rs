use rand::Rng;

use super::config::LmConfig;
use super::tokenizer::{Role, TokenSequence};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, stream};
use crate::scalar::Scalar;
use crate::tensor::{fingerprint, Tensor};

const LN_EPS: f64 = 1e-5;

/// Per-block weights. `P` is a stored tensor or a tape handle.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<P> {
    pub ln1_gain: P,
    pub ln1_bias: P,
    pub w_qkv: P,
    pub b_qkv: P,
    pub w_o: P,
    pub b_o: P,
    pub ln2_gain: P,
    pub ln2_bias: P,
    pub w_in: P,
    pub b_in: P,
    pub w_out: P,
    pub b_out: P,
}

impl<P> LayerWeights<P> {
    pub const NAMES: [&'static str; 12] = [
        "ln1_gain", "ln1_bias", "w_qkv", "b_qkv", "w_o", "b_o", "ln2_gain", "ln2_bias", "w_in",
        "b_in", "w_out", "b_out",
    ];

    pub fn as_array(&self) -> [&P; 12] {
        [
            &self.ln1_gain, &self.ln1_bias, &self.w_qkv, &self.b_qkv, &self.w_o, &self.b_o,
            &self.ln2_gain, &self.ln2_bias, &self.w_in, &self.b_in, &self.w_out, &self.b_out,
        ]
    }

    pub fn as_array_mut(&mut self) -> [&mut P; 12] {
        [
            &mut self.ln1_gain, &mut self.ln1_bias, &mut self.w_qkv, &mut self.b_qkv,
            &mut self.w_o, &mut self.b_o, &mut self.ln2_gain, &mut self.ln2_bias,
            &mut self.w_in, &mut self.b_in, &mut self.w_out, &mut self.b_out,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = P>) -> Option<Self> {
        Some(Self {
            ln1_gain: it.next()?,
            ln1_bias: it.next()?,
            w_qkv: it.next()?,
            b_qkv: it.next()?,
            w_o: it.next()?,
            b_o: it.next()?,
            ln2_gain: it.next()?,
            ln2_bias: it.next()?,
            w_in: it.next()?,
            b_in: it.next()?,
            w_out: it.next()?,
            b_out: it.next()?,
        })
    }
}

/// All model weights in a fixed canonical order (see [`LmWeights::names`]).
#[derive(Clone, Debug, PartialEq)]
pub struct LmWeights<P> {
    pub tok_emb: P,
    pub pos_emb: P,
    pub layers: Vec<LayerWeights<P>>,
    pub lnf_gain: P,
    pub lnf_bias: P,
    pub w_unembed: P,
    pub b_unembed: P,
}

pub type LmParams<T> = LmWeights<Tensor<T>>;

impl<P> LmWeights<P> {
    pub fn names(n_layers: usize) -> Vec<String> {
        let mut out = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..n_layers {
            out.extend(LayerWeights::<P>::NAMES.iter().map(|f| format!("layers.{l}.{f}")));
        }
        out.extend(["lnf_gain", "lnf_bias", "w_unembed", "b_unembed"].map(String::from));
        out
    }

    pub fn iter(&self) -> Vec<&P> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend(l.as_array());
        }
        out.extend([&self.lnf_gain, &self.lnf_bias, &self.w_unembed, &self.b_unembed]);
        out
    }

    pub fn iter_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.as_array_mut());
        }
        out.extend([
            &mut self.lnf_gain,
            &mut self.lnf_bias,
            &mut self.w_unembed,
            &mut self.b_unembed,
        ]);
        out
    }

    /// Rebuilds from values in canonical order.
    pub fn from_vec(n_layers: usize, values: Vec<P>) -> Option<Self> {
        let expected = 6 + 12 * n_layers;
        if values.len() != expected {
            return None;
        }
        let mut it = values.into_iter();
        let tok_emb = it.next()?;
        let pos_emb = it.next()?;
        let layers = (0..n_layers)
            .map(|_| LayerWeights::from_iter(&mut it))
            .collect::<Option<Vec<_>>>()?;
        Some(Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: it.next()?,
            lnf_bias: it.next()?,
            w_unembed: it.next()?,
            b_unembed: it.next()?,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> LmWeights<Q> {
        let values = self.iter().into_iter().map(&mut f).collect();
        LmWeights::from_vec(self.layers.len(), values).expect("same layout")
    }
}

/// Parameter shapes in canonical order.
pub fn param_shapes(cfg: &LmConfig) -> Vec<Vec<usize>> {
    let (v, d, m) = (cfg.vocab_size, cfg.d_model, cfg.d_mlp);
    let mut out = vec![vec![v, d], vec![cfg.context_len, d]];
    for _ in 0..cfg.n_layers {
        out.extend([
            vec![d],
            vec![d],
            vec![d, 3 * d],
            vec![3 * d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, m],
            vec![m],
            vec![m, d],
            vec![d],
        ]);
    }
    out.extend([vec![d], vec![d], vec![d, v], vec![v]]);
    out
}

impl<T: Scalar> LmParams<T> {
    /// Random initialization: normal weights scaled by fan-in, residual output
    /// projections further scaled by `1/√(2·n_layers)`, unit gains, zero biases.
    pub fn init(cfg: &LmConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, m) = (cfg.d_model as f64, cfg.d_mlp as f64);
        let resid = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let names = Self::names(cfg.n_layers);
        let shapes = param_shapes(cfg);
        let values = names
            .iter()
            .zip(&shapes)
            .map(|(name, shape)| {
                let field = name.rsplit('.').next().unwrap_or(name);
                match field {
                    "tok_emb" | "pos_emb" => normal_tensor(rng, shape, 0.3),
                    "ln1_gain" | "ln2_gain" | "lnf_gain" => Tensor::full(shape, T::one()),
                    "w_qkv" | "w_in" | "w_unembed" => normal_tensor(rng, shape, 1.0 / d.sqrt()),
                    "w_o" => normal_tensor(rng, shape, resid / d.sqrt()),
                    "w_out" => normal_tensor(rng, shape, resid / m.sqrt()),
                    _ => Tensor::zeros(shape),
                }
            })
            .collect();
        Ok(Self::from_vec(cfg.n_layers, values).expect("canonical layout"))
    }

    pub fn check_shapes(&self, cfg: &LmConfig) -> Result<()> {
        if self.layers.len() != cfg.n_layers {
            return Err(Error::InvalidConfig(format!(
                "{} layers in weights, {} in config",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        for ((name, t), shape) in Self::names(cfg.n_layers)
            .iter()
            .zip(self.iter())
            .zip(param_shapes(cfg))
        {
            if t.shape() != shape.as_slice() {
                return Err(Error::InvalidShape(
                    t.shape().to_vec(),
                    format!("{name} expected {shape:?}"),
                ));
            }
        }
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> LmWeights<Var<'t, T>> {
        self.map(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// SHA-256 over the exact bit patterns of every parameter.
    pub fn fingerprint(&self) -> String {
        fingerprint(self.iter())
    }

    pub fn num_params(&self) -> usize {
        self.iter().iter().map(|t| t.numel()).sum()
    }
}

/// Replaces the hook activation with a transformed tensor of identical shape.
pub type Intervention<'a, 't, T> = dyn Fn(Var<'t, T>) -> Result<Var<'t, T>> + 'a;

/// Boxes a closure as an [`Intervention`] on `tape`'s lifetime.
pub fn intervention<'a, 't, T: Scalar>(
    _tape: &'t Tape<T>,
    f: impl Fn(Var<'t, T>) -> Result<Var<'t, T>> + 'a,
) -> Box<Intervention<'a, 't, T>> {
    Box::new(f)
}

/// Transformer weights bound to a tape, ready for forward passes.
pub struct BoundLm<'c, 't, T: Scalar> {
    pub cfg: &'c LmConfig,
    pub w: LmWeights<Var<'t, T>>,
    tape: &'t Tape<T>,
}

pub struct HookedForward<'t, T: Scalar> {
    pub logits: Var<'t, T>,
    pub hook_acts: Var<'t, T>,
}

impl<'c, 't, T: Scalar> BoundLm<'c, 't, T> {
    pub fn new(cfg: &'c LmConfig, params: &LmParams<T>, tape: &'t Tape<T>, trainable: bool) -> Self {
        Self {
            cfg,
            w: params.bind(tape, trainable),
            tape,
        }
    }

    /// Wraps weights that are already on a tape.
    pub fn from_weights(cfg: &'c LmConfig, w: LmWeights<Var<'t, T>>) -> Self {
        let tape = w.tok_emb.tape();
        Self { cfg, w, tape }
    }

    pub fn vars(&self) -> Vec<Var<'t, T>> {
        self.w.iter().into_iter().copied().collect()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        if tokens.len() > self.cfg.context_len {
            return Err(Error::InvalidConfig(format!(
                "sequence of {} tokens exceeds context length {}",
                tokens.len(),
                self.cfg.context_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::InvalidConfig(format!("token id {t} out of vocabulary")));
        }
        Ok(())
    }

    pub fn embed(&self, tokens: &[usize]) -> Result<Var<'t, T>> {
        self.check_tokens(tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        self.w
            .tok_emb
            .gather_rows(tokens)?
            .add(self.w.pos_emb.gather_rows(&positions)?)
    }

    fn norm(&self, x: Var<'t, T>, gain: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(T::of(LN_EPS)).mul(gain)?.add(bias)
    }

    fn causal_mask(&self, n: usize) -> Var<'t, T> {
        let mask = Tensor::from_fn(&[n, n], |k| {
            if k % n > k / n {
                T::neg_infinity()
            } else {
                T::zero()
            }
        });
        self.tape.constant(mask)
    }

    /// One pre-norm block: attention then MLP, each added to the residual.
    pub fn block(&self, layer: usize, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let lw = &self.w.layers[layer];
        let n = x.shape()[0];
        let d = self.cfg.d_model;
        let hd = self.cfg.head_dim();
        let h = self.norm(x, lw.ln1_gain, lw.ln1_bias)?;
        let qkv = h.matmul(lw.w_qkv)?.add(lw.b_qkv)?;
        let mask = self.causal_mask(n);
        let scale = T::one() / T::of_usize(hd).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for head in 0..self.cfg.n_heads {
            let q = qkv.slice_cols(head * hd, hd)?;
            let k = qkv.slice_cols(d + head * hd, hd)?;
            let v = qkv.slice_cols(2 * d + head * hd, hd)?;
            let att = q.matmul(k.transpose()?)?.scale(scale).add(mask)?.softmax();
            heads.push(att.matmul(v)?);
        }
        let att_out = self.tape.concat_cols(&heads)?.matmul(lw.w_o)?.add(lw.b_o)?;
        let x = x.add(att_out)?;
        let h2 = self.norm(x, lw.ln2_gain, lw.ln2_bias)?;
        let mlp = h2
            .matmul(lw.w_in)?
            .add(lw.b_in)?
            .gelu()
            .matmul(lw.w_out)?
            .add(lw.b_out)?;
        x.add(mlp)
    }

    /// Residual stream entering `hook_layer`, shape `[seq_len, d_model]`.
    pub fn hook_input(&self, tokens: &[usize]) -> Result<Var<'t, T>> {
        let mut x = self.embed(tokens)?;
        for l in 0..self.cfg.hook_layer {
            x = self.block(l, x)?;
        }
        Ok(x)
    }

    /// Runs layers `hook_layer..` on a hook activation, applying `intervention` first.
    pub fn forward_from_hook(
        &self,
        hook_acts: Var<'t, T>,
        intervention: Option<&Intervention<'_, 't, T>>,
    ) -> Result<Var<'t, T>> {
        let mut x = match intervention {
            Some(f) => {
                let y = f(hook_acts)?;
                if y.shape() != hook_acts.shape() {
                    return Err(Error::Shape {
                        op: "intervention",
                        lhs: hook_acts.shape(),
                        rhs: y.shape(),
                    });
                }
                y
            }
            None => hook_acts,
        };
        for l in self.cfg.hook_layer..self.cfg.n_layers {
            x = self.block(l, x)?;
        }
        self.norm(x, self.w.lnf_gain, self.w.lnf_bias)?
            .matmul(self.w.w_unembed)?
            .add(self.w.b_unembed)
    }

    pub fn forward_with_hook(
        &self,
        tokens: &[usize],
        intervention: Option<&Intervention<'_, 't, T>>,
    ) -> Result<HookedForward<'t, T>> {
        let hook_acts = self.hook_input(tokens)?;
        let logits = self.forward_from_hook(hook_acts, intervention)?;
        Ok(HookedForward { logits, hook_acts })
    }

    /// Mean next-token cross-entropy over all positions.
    pub fn lm_loss(&self, tokens: &[usize]) -> Result<Var<'t, T>> {
        if tokens.len() < 2 {
            return Err(Error::Empty("language-model loss needs at least two tokens".into()));
        }
        let logits = self.forward_with_hook(tokens, None)?.logits;
        let picks: Vec<(usize, usize)> = (0..tokens.len() - 1).map(|t| (t, tokens[t + 1])).collect();
        Ok(logits.log_softmax().gather_elements(&picks)?.mean().neg())
    }
}

/// Length-normalized response log-probability: `(1/|y|)·Σ log p(y_t | y_<t)` over
/// response positions, natural log.
pub fn sequence_avg_logprob<'t, T: Scalar>(logits: Var<'t, T>, seq: &TokenSequence) -> Result<Var<'t, T>> {
    let picks: Vec<(usize, usize)> = seq
        .roles
        .iter()
        .enumerate()
        .filter(|(_, &r)| r == Role::Response)
        .map(|(t, _)| {
            if t == 0 {
                Err(Error::InvalidConfig("response token at position 0 has no context".into()))
            } else {
                Ok((t - 1, seq.tokens[t]))
            }
        })
        .collect::<Result<_>>()?;
    if picks.is_empty() {
        return Err(Error::Empty("sequence has no response tokens".into()));
    }
    let n = T::of_usize(picks.len());
    Ok(logits
        .log_softmax()
        .gather_elements(&picks)?
        .sum()
        .scale(T::one() / n))
}

/// A trained base model. Parameters are only reachable immutably; training code
/// that needs a trainable copy calls [`FrozenLm::thaw`].
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenLm<T> {
    config: LmConfig,
    params: LmParams<T>,
}

impl<T: Scalar> FrozenLm<T> {
    pub fn new(config: LmConfig, params: LmParams<T>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    /// Untrained model with seeded random weights.
    pub fn random(config: LmConfig, seed: u64) -> Result<Self> {
        let params = LmParams::init(&config, &mut stream(seed, "lm-init"))?;
        Self::new(config, params)
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &LmParams<T> {
        &self.params
    }

    pub fn thaw(&self) -> LmParams<T> {
        self.params.clone()
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    /// Same model with the hook moved to another layer.
    pub fn with_hook_layer(&self, hook_layer: usize) -> Result<Self> {
        let config = LmConfig {
            hook_layer,
            ..self.config.clone()
        };
        Self::new(config, self.params.clone())
    }

    /// Binds the weights as constants: gradients never reach them.
    pub fn bind<'s, 't>(&'s self, tape: &'t Tape<T>) -> BoundLm<'s, 't, T> {
        BoundLm::new(&self.config, &self.params, tape, false)
    }

    pub fn forward_with_hook<'t>(
        &self,
        tape: &'t Tape<T>,
        seq: &TokenSequence,
        intervention: Option<&Intervention<'_, 't, T>>,
    ) -> Result<HookedForward<'t, T>> {
        seq.validate(self.config.vocab_size)?;
        self.bind(tape).forward_with_hook(&seq.tokens, intervention)
    }

    /// Hook activations without recording gradients.
    pub fn hook_activations(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        Ok(self.bind(&tape).hook_input(tokens)?.value())
    }

    pub fn avg_logprob<'t>(
        &self,
        tape: &'t Tape<T>,
        seq: &TokenSequence,
        intervention: Option<&Intervention<'_, 't, T>>,
    ) -> Result<Var<'t, T>> {
        let out = self.forward_with_hook(tape, seq, intervention)?;
        sequence_avg_logprob(out.logits, seq)
    }
}
