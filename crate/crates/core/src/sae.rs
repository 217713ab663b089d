//! Sparse autoencoder over hook activations.
//!
//! `f = ReLU(W_enc·x + b_enc)`, `x̂ = W_dec·f + b_dec`, trained on
//! `‖x − x̂‖² + α‖f‖₁` with decoder columns renormalized to unit length after
//! every optimizer step.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lm::FrozenLm;
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::rng::{normal_tensor, permutation, stream};
use crate::scalar::Scalar;
use crate::tensor::{dot, fingerprint, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SparseAutoencoder<T> {
    /// `[d_sae, d]`
    pub w_enc: Tensor<T>,
    /// `[d_sae]`
    pub b_enc: Tensor<T>,
    /// `[d, d_sae]`; column `i` is feature `i`'s direction.
    pub w_dec: Tensor<T>,
    /// `[d]`
    pub b_dec: Tensor<T>,
}

fn dim_err(op: &'static str, want: usize, got: usize) -> Error {
    Error::Shape {
        op,
        lhs: vec![want],
        rhs: vec![got],
    }
}

impl<T: Scalar> SparseAutoencoder<T> {
    pub fn new(w_enc: Tensor<T>, b_enc: Tensor<T>, w_dec: Tensor<T>, b_dec: Tensor<T>) -> Result<Self> {
        let (d_sae, d) = match w_enc.shape() {
            &[a, b] => (a, b),
            s => return Err(Error::InvalidShape(s.to_vec(), "w_enc must be [d_sae, d]".into())),
        };
        if d_sae <= d {
            return Err(Error::InvalidConfig(format!(
                "d_sae ({d_sae}) must exceed d ({d})"
            )));
        }
        let checks: [(&Tensor<T>, Vec<usize>, &str); 3] = [
            (&b_enc, vec![d_sae], "b_enc"),
            (&w_dec, vec![d, d_sae], "w_dec"),
            (&b_dec, vec![d], "b_dec"),
        ];
        for (t, want, name) in checks {
            if t.shape() != want.as_slice() {
                return Err(Error::InvalidShape(t.shape().to_vec(), format!("{name} expected {want:?}")));
            }
        }
        Ok(Self {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
        })
    }

    /// Random unit-norm decoder columns, encoder tied to the decoder transpose,
    /// zero biases.
    pub fn init(d: usize, d_sae: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, "sae-init");
        let mut w_dec = normal_tensor::<T>(&mut rng, &[d, d_sae], 1.0);
        normalize_columns(&mut w_dec);
        let w_enc = w_dec.transpose()?;
        Self::new(w_enc, Tensor::zeros(&[d_sae]), w_dec, Tensor::zeros(&[d]))
    }

    pub fn d(&self) -> usize {
        self.w_enc.shape()[1]
    }

    pub fn d_sae(&self) -> usize {
        self.w_enc.shape()[0]
    }

    pub fn pre_activations(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.d() {
            return Err(dim_err("encode", self.d(), x.len()));
        }
        let mut z = self.w_enc.matvec(x)?;
        for (zi, &b) in z.iter_mut().zip(self.b_enc.data()) {
            *zi += b;
        }
        Ok(z)
    }

    pub fn encode(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self
            .pre_activations(x)?
            .into_iter()
            .map(|z| z.max(T::zero()))
            .collect())
    }

    /// `W_dec·f + b_dec`
    pub fn decode(&self, f: &[T]) -> Result<Vec<T>> {
        let mut x = self.decode_linear(f)?;
        for (xi, &b) in x.iter_mut().zip(self.b_dec.data()) {
            *xi += b;
        }
        Ok(x)
    }

    /// `W_dec·f` (no decoder bias).
    pub fn decode_linear(&self, f: &[T]) -> Result<Vec<T>> {
        if f.len() != self.d_sae() {
            return Err(dim_err("decode", self.d_sae(), f.len()));
        }
        self.w_dec.matvec(f)
    }

    /// Feature `i`'s decoder direction.
    pub fn feature_direction(&self, i: usize) -> Vec<T> {
        (0..self.d()).map(|r| self.w_dec.get(r, i)).collect()
    }

    /// `‖x − decode(encode(x))‖² + α‖encode(x)‖₁`
    pub fn loss(&self, x: &[T], alpha: T) -> Result<T> {
        let f = self.encode(x)?;
        let xh = self.decode(&f)?;
        Ok(reconstruction_plus_l1(x, &xh, &f, alpha))
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(self.tensors())
    }

    pub fn normalize_decoder(&mut self) {
        normalize_columns(&mut self.w_dec);
    }

    pub fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.w_enc, &self.b_enc, &self.w_dec, &self.b_dec]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.w_enc, &mut self.b_enc, &mut self.w_dec, &mut self.b_dec]
    }

    pub const TENSOR_NAMES: [&'static str; 4] = ["w_enc", "b_enc", "w_dec", "b_dec"];

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Result<SaeVars<'t, T>> {
        let put = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        SaeVars::from_vars([put(&self.w_enc), put(&self.b_enc), put(&self.w_dec), put(&self.b_dec)])
    }
}

/// `‖x − x̂‖² + α‖f‖₁` from already-computed pieces.
pub fn reconstruction_plus_l1<T: Scalar>(x: &[T], x_hat: &[T], f: &[T], alpha: T) -> T {
    let err: T = x.iter().zip(x_hat).map(|(&a, &b)| (a - b) * (a - b)).sum();
    let l1: T = f.iter().map(|v| v.abs()).sum();
    err + alpha * l1
}

fn normalize_columns<T: Scalar>(w: &mut Tensor<T>) {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    for c in 0..cols {
        let norm = (0..rows).map(|r| w.get(r, c).powi(2)).sum::<T>().sqrt();
        if norm > T::zero() {
            let data = w.data_mut();
            for r in 0..rows {
                data[r * cols + c] /= norm;
            }
        }
    }
}

/// SAE parameters on a tape, with the transposes the batched forms need.
#[derive(Clone, Copy, Debug)]
pub struct SaeVars<'t, T: Scalar> {
    pub w_enc: Var<'t, T>,
    pub b_enc: Var<'t, T>,
    pub w_dec: Var<'t, T>,
    pub b_dec: Var<'t, T>,
    w_enc_t: Var<'t, T>,
    w_dec_t: Var<'t, T>,
}

impl<'t, T: Scalar> SaeVars<'t, T> {
    pub fn from_vars([w_enc, b_enc, w_dec, b_dec]: [Var<'t, T>; 4]) -> Result<Self> {
        Ok(Self {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            w_enc_t: w_enc.transpose()?,
            w_dec_t: w_dec.transpose()?,
        })
    }

    pub fn vars(&self) -> [Var<'t, T>; 4] {
        [self.w_enc, self.b_enc, self.w_dec, self.b_dec]
    }

    /// Rows of `x` `[n, d]` to features `[n, d_sae]`.
    pub fn encode(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.matmul(self.w_enc_t)?.add(self.b_enc)?.relu())
    }

    pub fn decode(&self, f: Var<'t, T>) -> Result<Var<'t, T>> {
        self.decode_linear(f)?.add(self.b_dec)
    }

    pub fn decode_linear(&self, f: Var<'t, T>) -> Result<Var<'t, T>> {
        f.matmul(self.w_dec_t)
    }

    /// Mean over rows of `‖x − x̂‖² + α‖f‖₁`.
    pub fn loss(&self, x: Var<'t, T>, alpha: T) -> Result<Var<'t, T>> {
        let n = T::of_usize(x.shape()[0]);
        let f = self.encode(x)?;
        let err = x.sub(self.decode(f)?)?;
        let recon = err.mul(err)?.sum();
        let sparsity = f.abs().sum().scale(alpha);
        Ok(recon.add(sparsity)?.scale(T::one() / n))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeTrainConfig {
    /// Dictionary width; must exceed the model width.
    pub d_sae: usize,
    pub alpha_sae: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub heldout_fraction: f64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            d_sae: 256,
            alpha_sae: 0.1,
            lr: 1e-3,
            steps: 1500,
            batch: 64,
            heldout_fraction: 0.1,
        }
    }
}

impl SaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("sae.steps must be at least 1".into()));
        }
        if self.batch == 0 || !(self.lr > 0.0) || self.d_sae == 0 {
            return Err(Error::InvalidConfig("sae.batch, sae.lr and sae.d_sae must be positive".into()));
        }
        if !(self.alpha_sae >= 0.0) {
            return Err(Error::InvalidConfig("sae.alpha_sae must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::InvalidConfig("sae.heldout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaeTrainReport {
    pub step_mse: Vec<f64>,
    pub step_l0: Vec<f64>,
    pub initial_heldout_mse: f64,
    pub final_heldout_mse: f64,
    pub heldout_mean_l0: f64,
}

/// Mean squared reconstruction error and mean ℓ0 (count of `f_i > 0`) over rows.
pub fn evaluate<T: Scalar>(sae: &SparseAutoencoder<T>, acts: &[Vec<T>]) -> Result<(f64, f64)> {
    let mut mse = 0.0;
    let mut l0 = 0.0;
    for x in acts {
        let f = sae.encode(x)?;
        let xh = sae.decode(&f)?;
        mse += x.iter().zip(&xh).map(|(&a, &b)| (a - b).powi(2)).sum::<T>().as_f64();
        l0 += f.iter().filter(|&&v| v > T::zero()).count() as f64;
    }
    let n = acts.len() as f64;
    Ok((mse / n, l0 / n))
}

/// Hook activations of every token position of `docs`, one row per position.
pub fn collect_activations<T: Scalar>(model: &FrozenLm<T>, docs: &[Vec<usize>]) -> Result<Vec<Vec<T>>> {
    let ctx = model.config().context_len;
    let mut rows = Vec::new();
    for doc in docs.iter().filter(|d| !d.is_empty()) {
        let acts = model.hook_activations(&doc[..doc.len().min(ctx)])?;
        rows.extend((0..acts.rows()).map(|r| acts.row(r).to_vec()));
    }
    Ok(rows)
}

/// Trains an SAE on shuffled hook activations of `docs`.
///
/// Fails unless the held-out reconstruction MSE ends below half its initial value.
pub fn train_sae<T: Scalar>(
    model: &FrozenLm<T>,
    docs: &[Vec<usize>],
    cfg: &SaeTrainConfig,
    seed: u64,
) -> Result<(SparseAutoencoder<T>, SaeTrainReport)> {
    cfg.validate()?;
    let all = collect_activations(model, docs)?;
    train_sae_on_activations(all, model.config().d_model, cfg, seed)
}

pub fn train_sae_on_activations<T: Scalar>(
    mut acts: Vec<Vec<T>>,
    d: usize,
    cfg: &SaeTrainConfig,
    seed: u64,
) -> Result<(SparseAutoencoder<T>, SaeTrainReport)> {
    cfg.validate()?;
    let order = permutation(&mut stream(seed, "sae-shuffle"), acts.len());
    let mut shuffled: Vec<Vec<T>> = order.iter().map(|&i| std::mem::take(&mut acts[i])).collect();
    let n_held = ((shuffled.len() as f64 * cfg.heldout_fraction).ceil() as usize).min(shuffled.len());
    let held = shuffled.split_off(shuffled.len() - n_held);
    let train = shuffled;
    if train.len() < cfg.batch {
        return Err(Error::Empty(format!(
            "{} training activations for batch size {}",
            train.len(),
            cfg.batch
        )));
    }
    let held = if held.is_empty() { train.clone() } else { held };

    let mut sae = SparseAutoencoder::<T>::init(d, cfg.d_sae, seed)?;
    let mean: Vec<T> = (0..d)
        .map(|j| train.iter().map(|x| x[j]).sum::<T>() / T::of_usize(train.len()))
        .collect();
    sae.b_dec = Tensor::vector(mean);
    let (initial_heldout_mse, _) = evaluate(&sae, &held)?;

    let sizes: Vec<usize> = sae.tensors().iter().map(|t| t.numel()).collect();
    let mut opt = Adam::new(&sizes, AdamConfig::default());
    let alpha = T::of(cfg.alpha_sae);
    let lr = T::of(cfg.lr);
    let mut step_mse = Vec::with_capacity(cfg.steps);
    let mut step_l0 = Vec::with_capacity(cfg.steps);
    let mut cursor = 0;
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch * d);
        for _ in 0..cfg.batch {
            batch.extend_from_slice(&train[cursor]);
            cursor = (cursor + 1) % train.len();
        }
        let grads = {
            let tape = Tape::new();
            let vars = sae.bind(&tape, true)?;
            let x = tape.constant(Tensor::new(vec![cfg.batch, d], batch)?);
            let f = vars.encode(x)?;
            let err = x.sub(vars.decode(f)?)?;
            let mse = err.mul(err)?.sum().item().as_f64() / cfg.batch as f64;
            let l0 = f.value().data().iter().filter(|&&v| v > T::zero()).count() as f64 / cfg.batch as f64;
            let loss = vars.loss(x, alpha)?;
            let value = loss.item().as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            step_mse.push(mse);
            step_l0.push(l0);
            tape.backward(loss)?;
            vars.vars().map(|v| v.grad().expect("grad"))
        };
        let lrs = [lr * T::of(LrSchedule::Constant.factor(step, cfg.steps)); 4];
        opt.step(&mut sae.tensors_mut(), &grads, &lrs);
        sae.normalize_decoder();
    }

    let (final_heldout_mse, heldout_mean_l0) = evaluate(&sae, &held)?;
    if !(final_heldout_mse < 0.5 * initial_heldout_mse) {
        return Err(Error::Training(format!(
            "SAE held-out MSE {final_heldout_mse} not below half of initial {initial_heldout_mse}"
        )));
    }
    Ok((
        sae,
        SaeTrainReport {
            step_mse,
            step_l0,
            initial_heldout_mse,
            final_heldout_mse,
            heldout_mean_l0,
        },
    ))
}

/// Column norms of the decoder.
pub fn decoder_column_norms<T: Scalar>(sae: &SparseAutoencoder<T>) -> Vec<T> {
    (0..sae.d_sae())
        .map(|i| {
            let c = sae.feature_direction(i);
            dot(&c, &c).sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, kink_safe_sample};
    use crate::rng::uniform_tensor;

    fn random_sae(seed: u64, d: usize, d_sae: usize) -> SparseAutoencoder<f64> {
        let mut rng = stream(seed, "test-sae");
        SparseAutoencoder::new(
            uniform_tensor(&mut rng, &[d_sae, d], -1.0, 1.0),
            uniform_tensor(&mut rng, &[d_sae], -0.5, 0.5),
            uniform_tensor(&mut rng, &[d, d_sae], -1.0, 1.0),
            uniform_tensor(&mut rng, &[d], -0.5, 0.5),
        )
        .unwrap()
    }

    #[test]
    fn encode_hand_example() {
        let sae = SparseAutoencoder::new(
            Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap(),
            Tensor::zeros(&[3]),
            Tensor::zeros(&[2, 3]),
            Tensor::zeros(&[2]),
        )
        .unwrap();
        assert_eq!(sae.encode(&[3.0, -1.0]).unwrap(), vec![3.0, 0.0, 0.0]);
        assert_eq!(sae.encode(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0, 0.0]);
        assert!(sae.encode(&[1.0]).is_err());
    }

    #[test]
    fn width_must_exceed_model_dimension() {
        let r = SparseAutoencoder::<f64>::new(
            Tensor::zeros(&[2, 2]),
            Tensor::zeros(&[2]),
            Tensor::zeros(&[2, 2]),
            Tensor::zeros(&[2]),
        );
        assert!(r.is_err());
    }

    #[test]
    fn encode_decode_match_explicit_arithmetic() {
        let sae = random_sae(1, 4, 9);
        let mut rng = stream(2, "x");
        for _ in 0..50 {
            let x = uniform_tensor::<f64>(&mut rng, &[4], -2.0, 2.0).into_data();
            let f = sae.encode(&x).unwrap();
            for i in 0..9 {
                let mut z = sae.b_enc.data()[i];
                for j in 0..4 {
                    z += sae.w_enc.get(i, j) * x[j];
                }
                assert!((f[i] - z.max(0.0)).abs() < 1e-12);
                assert!(f[i] >= 0.0);
            }
            let xh = sae.decode(&f).unwrap();
            for r in 0..4 {
                let mut v = sae.b_dec.data()[r];
                for i in 0..9 {
                    v += sae.w_dec.get(r, i) * f[i];
                }
                assert!((xh[r] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decode_is_affine() {
        let sae = random_sae(3, 4, 9);
        assert_eq!(sae.decode(&[0.0; 9]).unwrap(), sae.b_dec.data().to_vec());
        let f1: Vec<f64> = (0..9).map(|i| i as f64 * 0.1).collect();
        let f2: Vec<f64> = (0..9).map(|i| 1.0 - i as f64 * 0.05).collect();
        let sum: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| a + b).collect();
        let (d12, d1, d2) = (sae.decode(&sum).unwrap(), sae.decode(&f1).unwrap(), sae.decode(&f2).unwrap());
        for r in 0..4 {
            assert!((d12[r] - d1[r] - d2[r] + sae.b_dec.data()[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_hand_example() {
        assert!((reconstruction_plus_l1::<f64>(&[1.0, 0.0], &[0.0, 0.0], &[2.0, 0.0, 0.0], 0.1) - 1.2).abs() < 1e-15);
        assert_eq!(reconstruction_plus_l1(&[1.0, 2.0], &[1.0, 2.0], &[0.0; 3], 0.5), 0.0);
    }

    #[test]
    fn batched_loss_agrees_with_vector_loss() {
        let sae = random_sae(4, 4, 9);
        let xs = uniform_tensor::<f64>(&mut stream(5, "x"), &[3, 4], -1.0, 1.0);
        let tape = Tape::new();
        let vars = sae.bind(&tape, false).unwrap();
        let batched = vars.loss(tape.constant(xs.clone()), 0.3).unwrap().item();
        let each: f64 = (0..3).map(|r| sae.loss(xs.row(r), 0.3).unwrap()).sum::<f64>() / 3.0;
        assert!((batched - each).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let h = 1e-6;
        let mut rng = stream(6, "gc");
        for trial in 0..20 {
            let ((sae, x), _) = kink_safe_sample(h, 200, || {
                let sae = random_sae(100 + trial, 3, 7);
                let x = uniform_tensor::<f64>(&mut rng, &[2, 3], -1.0, 1.0);
                let margin = (0..2)
                    .flat_map(|r| sae.pre_activations(x.row(r)).unwrap())
                    .fold(f64::INFINITY, |m, z| m.min(z.abs()));
                Ok(((sae, x), margin))
            })
            .unwrap();
            let params: Vec<Tensor<f64>> = sae.tensors().into_iter().cloned().collect();
            let report = finite_diff_check(
                |tape, p| {
                    let v = SaeVars::from_vars([p[0], p[1], p[2], p[3]])?;
                    v.loss(tape.constant(x.clone()), 0.1)
                },
                &params,
                h,
                1e-5,
            )
            .unwrap();
            assert!(report.passed, "trial {trial}: {:?}", report.per_param);
        }
    }

    fn blob_activations(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = stream(seed, "blobs");
        let centers = uniform_tensor::<f64>(&mut rng, &[6, d], -2.0, 2.0);
        (0..n)
            .map(|i| {
                let noise = uniform_tensor::<f64>(&mut rng, &[d], -0.1, 0.1);
                centers.row(i % 6).iter().zip(noise.data()).map(|(a, b)| a + b).collect()
            })
            .collect()
    }

    fn small_cfg(alpha: f64) -> SaeTrainConfig {
        SaeTrainConfig {
            d_sae: 32,
            alpha_sae: alpha,
            lr: 5e-3,
            steps: 300,
            batch: 32,
            heldout_fraction: 0.1,
        }
    }

    #[test]
    fn training_reduces_error_keeps_unit_columns_and_is_deterministic() {
        let acts = blob_activations(600, 8, 1);
        let (sae, rep) = train_sae_on_activations(acts.clone(), 8, &small_cfg(0.05), 3).unwrap();
        assert!(rep.final_heldout_mse < 0.5 * rep.initial_heldout_mse);
        for n in decoder_column_norms(&sae) {
            assert!((n - 1.0).abs() <= 1e-9);
        }
        let (again, _) = train_sae_on_activations(acts, 8, &small_cfg(0.05), 3).unwrap();
        assert_eq!(sae, again);
    }

    #[test]
    fn stronger_penalty_gives_sparser_codes() {
        let acts = blob_activations(600, 8, 2);
        let l0: Vec<f64> = [0.0, 0.1, 1.0]
            .iter()
            .map(|&a| train_sae_on_activations(acts.clone(), 8, &small_cfg(a), 4).unwrap().1.heldout_mean_l0)
            .collect();
        assert!(l0[0] >= l0[1] && l0[1] >= l0[2], "{l0:?}");
    }

    #[test]
    fn zero_steps_and_short_data_are_errors() {
        let acts = blob_activations(10, 8, 2);
        let zero = SaeTrainConfig {
            steps: 0,
            ..small_cfg(0.1)
        };
        assert!(train_sae_on_activations(acts.clone(), 8, &zero, 0).is_err());
        assert!(train_sae_on_activations(acts, 8, &small_cfg(0.1), 0).is_err());
    }
}
