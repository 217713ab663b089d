//! The trainable steering adapter and the two ways of applying its output.
//!
//! The adapter maps a residual activation `x` to `z = W_a·x + b_a` and then to a
//! sparse vector `v` over SAE features through one of three activations. The
//! decoded direction `W_dec·v` is added to the residual stream, either directly or
//! through the autoencoder's reconstruction with the error term carried along.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomBackward, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{stream, uniform_tensor};
use crate::sae::{SaeVars, SparseAutoencoder};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_WEIGHT_RANGE: f64 = 1e-6;
pub const INIT_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `sign(z)·max(|z| − θ, 0)`
    SoftThreshold,
    /// `max(z, 0)`, threshold unused.
    Relu,
    /// `z·H(|z| − θ)` with `H(0) = 0`.
    JumpRelu,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::SoftThreshold, Variant::Relu, Variant::JumpRelu];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SoftThreshold => "soft_threshold",
            Variant::Relu => "relu",
            Variant::JumpRelu => "jump_relu",
        }
    }

    /// Scalar activation.
    pub fn activate<T: Scalar>(self, z: T, theta: T) -> T {
        match self {
            Variant::SoftThreshold => {
                let mag = z.abs() - theta;
                if mag > T::zero() {
                    z.signum() * mag
                } else {
                    T::zero()
                }
            }
            Variant::Relu => z.max(T::zero()),
            Variant::JumpRelu => {
                if z.abs() - theta > T::zero() {
                    z
                } else {
                    T::zero()
                }
            }
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown adapter variant {s:?}")))
    }
}

/// How a steering vector is written back into the residual stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteeringMode {
    /// `x + W_dec·v`
    Direct,
    /// `x + (decode(f + v) − decode(f))` with `f = encode(x)`.
    #[default]
    Reconstruction,
}

/// A steering vector with its nonzero count.
#[derive(Clone, Debug, PartialEq)]
pub struct SteeringVector<T> {
    v: Vec<T>,
    l0: usize,
}

impl<T: Scalar> SteeringVector<T> {
    pub fn new(v: Vec<T>) -> Self {
        let l0 = v.iter().filter(|x| **x != T::zero()).count();
        Self { v, l0 }
    }

    pub fn values(&self) -> &[T] {
        &self.v
    }

    pub fn l0(&self) -> usize {
        self.l0
    }

    pub fn l1(&self) -> T {
        steering_l1(&self.v)
    }

    pub fn into_vec(self) -> Vec<T> {
        self.v
    }
}

pub fn steering_l1<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|x| x.abs()).sum()
}

/// Indices of the `k` largest-magnitude entries, ties going to the lower index.
pub fn top_k_by_magnitude<T: Scalar>(v: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].abs().partial_cmp(&v[a].abs()).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct SteeringAdapter<T> {
    /// `[d_sae, d]`
    pub w_a: Tensor<T>,
    /// `[d_sae]`
    pub b_a: Tensor<T>,
    /// `[d_sae]`, non-negative.
    pub theta: Tensor<T>,
    pub variant: Variant,
}

impl<T: Scalar> SteeringAdapter<T> {
    pub fn new(w_a: Tensor<T>, b_a: Tensor<T>, theta: Tensor<T>, variant: Variant) -> Result<Self> {
        let d_sae = match w_a.shape() {
            &[r, _] => r,
            s => return Err(Error::InvalidShape(s.to_vec(), "w_a must be [d_sae, d]".into())),
        };
        for (t, name) in [(&b_a, "b_a"), (&theta, "theta")] {
            if t.shape() != [d_sae] {
                return Err(Error::InvalidShape(t.shape().to_vec(), format!("{name} expected [{d_sae}]")));
            }
        }
        if theta.data().iter().any(|&t| !(t >= T::zero())) {
            return Err(Error::InvalidConfig("adapter thresholds must be non-negative".into()));
        }
        Ok(Self {
            w_a,
            b_a,
            theta,
            variant,
        })
    }

    /// `W_a ~ U(−1e-6, 1e-6)`, `b_a = 0`, `θ = 1e-6`.
    pub fn init(d: usize, d_sae: usize, variant: Variant, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, "adapter-init");
        Self::new(
            uniform_tensor(&mut rng, &[d_sae, d], -INIT_WEIGHT_RANGE, INIT_WEIGHT_RANGE),
            Tensor::zeros(&[d_sae]),
            Tensor::full(&[d_sae], T::of(INIT_THRESHOLD)),
            variant,
        )
    }

    pub fn d(&self) -> usize {
        self.w_a.shape()[1]
    }

    pub fn d_sae(&self) -> usize {
        self.w_a.shape()[0]
    }

    pub fn check_compatible(&self, sae: &SparseAutoencoder<T>) -> Result<()> {
        if self.d() != sae.d() || self.d_sae() != sae.d_sae() {
            return Err(Error::Shape {
                op: "adapter/sae",
                lhs: vec![self.d_sae(), self.d()],
                rhs: vec![sae.d_sae(), sae.d()],
            });
        }
        Ok(())
    }

    /// `z = W_a·x + b_a`
    pub fn pre_activations(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.d() {
            return Err(Error::Shape {
                op: "adapter",
                lhs: vec![self.d()],
                rhs: vec![x.len()],
            });
        }
        let mut z = self.w_a.matvec(x)?;
        for (zi, &b) in z.iter_mut().zip(self.b_a.data()) {
            *zi += b;
        }
        Ok(z)
    }

    pub fn activate(&self, z: &[T]) -> Vec<T> {
        z.iter()
            .zip(self.theta.data())
            .map(|(&zi, &ti)| self.variant.activate(zi, ti))
            .collect()
    }

    pub fn forward(&self, x: &[T]) -> Result<SteeringVector<T>> {
        Ok(SteeringVector::new(self.activate(&self.pre_activations(x)?)))
    }

    /// Steering vectors for every row of `x`.
    pub fn forward_rows(&self, x: &Tensor<T>) -> Result<Vec<SteeringVector<T>>> {
        (0..x.rows()).map(|r| self.forward(x.row(r))).collect()
    }

    pub fn clamp_theta(&mut self) {
        for t in self.theta.data_mut() {
            if *t < T::zero() {
                *t = T::zero();
            }
        }
    }

    pub const TENSOR_NAMES: [&'static str; 3] = ["w_a", "b_a", "theta"];

    pub fn tensors(&self) -> [&Tensor<T>; 3] {
        [&self.w_a, &self.b_a, &self.theta]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 3] {
        [&mut self.w_a, &mut self.b_a, &mut self.theta]
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Result<AdapterVars<'t, T>> {
        let put = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        AdapterVars::from_vars([put(&self.w_a), put(&self.b_a), put(&self.theta)], self.variant)
    }
}

/// `x + W_dec·v`
pub fn apply_steering_direct<T: Scalar>(
    sae: &SparseAutoencoder<T>,
    x: &[T],
    v: &SteeringVector<T>,
) -> Result<Vec<T>> {
    let delta = sae.decode_linear(v.values())?;
    check_len(x, sae.d())?;
    Ok(x.iter().zip(delta).map(|(&a, b)| a + b).collect())
}

/// `x + (decode(f + v) − decode(f))` with `f = encode(x)`; exactly `x` when `v = 0`.
pub fn apply_steering_reconstruction<T: Scalar>(
    sae: &SparseAutoencoder<T>,
    x: &[T],
    v: &SteeringVector<T>,
) -> Result<Vec<T>> {
    let f = sae.encode(x)?;
    if v.values().len() != f.len() {
        return Err(Error::Shape {
            op: "steer",
            lhs: vec![f.len()],
            rhs: vec![v.values().len()],
        });
    }
    let fv: Vec<T> = f.iter().zip(v.values()).map(|(&a, &b)| a + b).collect();
    let steered = sae.decode(&fv)?;
    let base = sae.decode(&f)?;
    Ok(x.iter()
        .zip(steered.iter().zip(&base))
        .map(|(&xi, (&s, &b))| xi + (s - b))
        .collect())
}

pub fn apply_steering<T: Scalar>(
    mode: SteeringMode,
    sae: &SparseAutoencoder<T>,
    x: &[T],
    v: &SteeringVector<T>,
) -> Result<Vec<T>> {
    match mode {
        SteeringMode::Direct => apply_steering_direct(sae, x, v),
        SteeringMode::Reconstruction => apply_steering_reconstruction(sae, x, v),
    }
}

fn check_len<T>(x: &[T], d: usize) -> Result<()> {
    if x.len() != d {
        return Err(Error::Shape {
            op: "steer",
            lhs: vec![d],
            rhs: vec![x.len()],
        });
    }
    Ok(())
}

/// Adapter parameters on a tape. All batched forms take rows `[n, d]`.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars<'t, T: Scalar> {
    pub w_a: Var<'t, T>,
    pub b_a: Var<'t, T>,
    pub theta: Var<'t, T>,
    pub variant: Variant,
    w_a_t: Var<'t, T>,
}

impl<'t, T: Scalar> AdapterVars<'t, T> {
    pub fn from_vars([w_a, b_a, theta]: [Var<'t, T>; 3], variant: Variant) -> Result<Self> {
        Ok(Self {
            w_a,
            b_a,
            theta,
            variant,
            w_a_t: w_a.transpose()?,
        })
    }

    pub fn vars(&self) -> [Var<'t, T>; 3] {
        [self.w_a, self.b_a, self.theta]
    }

    pub fn pre_activations(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(self.w_a_t)?.add(self.b_a)
    }

    pub fn activate(&self, z: Var<'t, T>) -> Result<Var<'t, T>> {
        match self.variant {
            Variant::SoftThreshold => z.abs().sub(self.theta)?.relu().mul(z.sign()),
            Variant::Relu => Ok(z.relu()),
            Variant::JumpRelu => z.mul(z.abs().sub(self.theta)?.heaviside()),
        }
    }

    /// `(z, v)` for each row of `x`.
    pub fn forward(&self, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let z = self.pre_activations(x)?;
        Ok((z, self.activate(z)?))
    }
}

/// Batched steering on a tape. `x` and the result are `[n, d]`, `v` is `[n, d_sae]`.
pub fn steer_var<'t, T: Scalar>(
    mode: SteeringMode,
    sae: &SaeVars<'t, T>,
    x: Var<'t, T>,
    v: Var<'t, T>,
) -> Result<Var<'t, T>> {
    match mode {
        SteeringMode::Direct => x.add(sae.decode_linear(v)?),
        SteeringMode::Reconstruction => {
            let f = sae.encode(x)?;
            let delta = sae.decode(f.add(v)?)?.sub(sae.decode(f)?)?;
            x.add(delta)
        }
    }
}

struct SteL0 {
    eps: f64,
}

impl<T: Scalar> CustomBackward<T> for SteL0 {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_output: &[T]) -> Vec<Option<Vec<T>>> {
        let (z, theta) = (inputs[0], inputs[1]);
        let half = T::of(self.eps / 2.0);
        let slope = -T::one() / T::of(self.eps) * grad_output[0];
        let d_sae = theta.numel();
        let mut g = vec![T::zero(); d_sae];
        for (k, &zk) in z.data().iter().enumerate() {
            let i = k % d_sae;
            if (zk.abs() - theta.data()[i]).abs() < half {
                g[i] += slope;
            }
        }
        vec![None, Some(g)]
    }
}

/// Total count `Σ H(|z_i| − θ_i)` over every row of `z` `[n, d_sae]`, with a
/// rectangle-kernel straight-through gradient of width `eps` for `θ` and none for `z`.
pub fn ste_l0_loss<'t, T: Scalar>(z: Var<'t, T>, theta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig("STE kernel width must be positive".into()));
    }
    let zv = z.value();
    let tv = theta.value();
    let d_sae = tv.numel();
    if zv.numel() % d_sae != 0 || zv.shape().last() != Some(&d_sae) {
        return Err(Error::Shape {
            op: "ste_l0",
            lhs: zv.shape().to_vec(),
            rhs: tv.shape().to_vec(),
        });
    }
    let count = zv
        .data()
        .iter()
        .enumerate()
        .filter(|(k, &zk)| zk.abs() - tv.data()[k % d_sae] > T::zero())
        .count();
    z.tape()
        .custom(&[z, theta], Tensor::scalar(T::of_usize(count)), Box::new(SteL0 { eps }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, kink_safe_sample};
    use crate::rng::normal_tensor;
    use proptest::prelude::*;

    fn random_sae(seed: u64, d: usize, d_sae: usize) -> SparseAutoencoder<f64> {
        let mut rng = stream(seed, "sae");
        SparseAutoencoder::new(
            uniform_tensor(&mut rng, &[d_sae, d], -1.0, 1.0),
            uniform_tensor(&mut rng, &[d_sae], -0.5, 0.5),
            uniform_tensor(&mut rng, &[d, d_sae], -1.0, 1.0),
            uniform_tensor(&mut rng, &[d], -0.5, 0.5),
        )
        .unwrap()
    }

    fn random_adapter(seed: u64, d: usize, d_sae: usize, variant: Variant) -> SteeringAdapter<f64> {
        let mut rng = stream(seed, "adapter");
        SteeringAdapter::new(
            uniform_tensor(&mut rng, &[d_sae, d], -1.0, 1.0),
            uniform_tensor(&mut rng, &[d_sae], -0.5, 0.5),
            uniform_tensor(&mut rng, &[d_sae], 0.0, 0.8),
            variant,
        )
        .unwrap()
    }

    #[test]
    fn activation_examples() {
        let st = Variant::SoftThreshold;
        assert_eq!(st.activate(2.5, 1.0), 1.5);
        assert_eq!(st.activate(0.5, 1.0), 0.0);
        assert_eq!(st.activate(-2.0, 0.5), -1.5);
        assert_eq!(Variant::Relu.activate(-1.0, 0.0), 0.0);
        assert_eq!(Variant::Relu.activate(2.0, 0.0), 2.0);
        assert_eq!(Variant::JumpRelu.activate(0.8, 1.0), 0.0);
        assert_eq!(Variant::JumpRelu.activate(-1.5, 1.0), -1.5);
        assert_eq!(Variant::JumpRelu.activate(1.0, 1.0), 0.0);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("topk".parse::<Variant>().is_err());
    }

    #[test]
    fn negative_threshold_rejected() {
        let r = SteeringAdapter::<f64>::new(
            Tensor::zeros(&[3, 2]),
            Tensor::zeros(&[3]),
            Tensor::vector(vec![0.0, -1.0, 0.0]),
            Variant::SoftThreshold,
        );
        assert!(r.is_err());
    }

    #[test]
    fn init_matches_defaults() {
        let a = SteeringAdapter::<f64>::init(4, 16, Variant::JumpRelu, 0).unwrap();
        assert!(a.w_a.data().iter().all(|w| w.abs() <= INIT_WEIGHT_RANGE));
        assert!(a.theta.data().iter().all(|&t| t == INIT_THRESHOLD));
        assert!(a.b_a.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn steering_vector_counts_nonzeros() {
        let v = SteeringVector::new(vec![1.0, -2.0, 0.0]);
        assert_eq!(v.l0(), 2);
        assert_eq!(v.l1(), 3.0);
        assert_eq!(steering_l1::<f64>(&[0.0; 4]), 0.0);
    }

    #[test]
    fn l1_matches_summation() {
        let mut rng = stream(1, "l1");
        for _ in 0..100 {
            let v = uniform_tensor::<f64>(&mut rng, &[17], -3.0, 3.0).into_data();
            let mut acc = 0.0;
            for x in &v {
                acc += x.abs();
            }
            assert_eq!(steering_l1(&v), acc);
        }
    }

    #[test]
    fn direct_feature_steering() {
        let sae = random_sae(2, 4, 9);
        let x = vec![0.3, -0.2, 1.0, 0.5];
        let mut e = vec![0.0; 9];
        e[4] = 2.5;
        let out = apply_steering_direct(&sae, &x, &SteeringVector::new(e)).unwrap();
        let col = sae.feature_direction(4);
        for r in 0..4 {
            assert!((out[r] - (x[r] + 2.5 * col[r])).abs() < 1e-12);
        }
        let zero = apply_steering_direct(&sae, &x, &SteeringVector::new(vec![0.0; 9])).unwrap();
        assert_eq!(zero, x);
    }

    #[test]
    fn direct_matches_matmul() {
        let sae = random_sae(3, 4, 9);
        let mut rng = stream(4, "v");
        for _ in 0..50 {
            let x = uniform_tensor::<f64>(&mut rng, &[4], -1.0, 1.0).into_data();
            let v = uniform_tensor::<f64>(&mut rng, &[9], -1.0, 1.0).into_data();
            let out = apply_steering_direct(&sae, &x, &SteeringVector::new(v.clone())).unwrap();
            for r in 0..4 {
                let mut acc = x[r];
                for i in 0..9 {
                    acc += sae.w_dec.get(r, i) * v[i];
                }
                assert!((out[r] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reconstruction_form_matches_direct() {
        let mut rng = stream(5, "eq");
        for trial in 0..1000 {
            let sae = random_sae(1000 + trial, 6, 24);
            let x = normal_tensor::<f64>(&mut rng, &[6], 1.0).into_data();
            let v = SteeringVector::new(normal_tensor::<f64>(&mut rng, &[24], 1.0).into_data());
            let a = apply_steering_direct(&sae, &x, &v).unwrap();
            let b = apply_steering_reconstruction(&sae, &x, &v).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() <= 1e-10, "trial {trial}");
            }
        }
    }

    #[test]
    fn reconstruction_form_matches_direct_f32() {
        let mut rng = stream(6, "eq32");
        for trial in 0..1000 {
            let mut sae = SparseAutoencoder::<f32>::init(6, 24, 2000 + trial).unwrap();
            sae.b_enc = uniform_tensor(&mut rng, &[24], -0.5, 0.5);
            sae.b_dec = uniform_tensor(&mut rng, &[6], -0.5, 0.5);
            let x = uniform_tensor::<f32>(&mut rng, &[6], -1.0, 1.0).into_data();
            let v = SteeringVector::new(uniform_tensor::<f32>(&mut rng, &[24], -0.1, 0.1).into_data());
            let a = apply_steering_direct(&sae, &x, &v).unwrap();
            let b = apply_steering_reconstruction(&sae, &x, &v).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() <= 1e-6, "trial {trial}: {p} vs {q}");
            }
        }
    }

    #[test]
    fn zero_vector_is_exact_noop_in_both_forms() {
        let mut rng = stream(7, "noop");
        for trial in 0..200 {
            let sae = random_sae(trial, 5, 11);
            let x = normal_tensor::<f64>(&mut rng, &[5], 3.0).into_data();
            let v = SteeringVector::new(vec![0.0; 11]);
            assert_eq!(apply_steering_reconstruction(&sae, &x, &v).unwrap(), x);
            assert_eq!(apply_steering_direct(&sae, &x, &v).unwrap(), x);
        }
    }

    #[test]
    fn reconstruction_with_dead_encoder() {
        let mut sae = random_sae(8, 3, 7);
        sae.b_enc = Tensor::full(&[7], -100.0);
        let x = vec![0.1, 0.2, -0.3];
        assert!(sae.encode(&x).unwrap().iter().all(|&f| f == 0.0));
        let v = vec![0.5, 0.0, -1.0, 0.0, 0.0, 2.0, 0.0];
        let out = apply_steering_reconstruction(&sae, &x, &SteeringVector::new(v.clone())).unwrap();
        let dv = sae.decode(&v).unwrap();
        let d0 = sae.decode(&[0.0; 7]).unwrap();
        for r in 0..3 {
            assert!((out[r] - (dv[r] - d0[r] + x[r])).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_forms_match_vector_forms() {
        let sae = random_sae(9, 4, 12);
        let mut rng = stream(10, "batch");
        let x = normal_tensor::<f64>(&mut rng, &[5, 4], 1.0);
        for variant in Variant::ALL {
            let ad = random_adapter(11, 4, 12, variant);
            for mode in [SteeringMode::Direct, SteeringMode::Reconstruction] {
                let tape = Tape::new();
                let av = ad.bind(&tape, false).unwrap();
                let sv = sae.bind(&tape, false).unwrap();
                let xv = tape.constant(x.clone());
                let (_, v) = av.forward(xv).unwrap();
                let out = steer_var(mode, &sv, xv, v).unwrap().value();
                for r in 0..5 {
                    let sv1 = ad.forward(x.row(r)).unwrap();
                    assert_eq!(v.value().row(r), sv1.values());
                    let want = apply_steering(mode, &sae, x.row(r), &sv1).unwrap();
                    for c in 0..4 {
                        assert!((out.get(r, c) - want[c]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn ste_forward_and_kernel() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::matrix(1, 2, vec![2.0, 0.1]).unwrap());
        let theta = tape.param(Tensor::vector(vec![1.0, 1.0]));
        let l0 = ste_l0_loss(z, theta, 1e-3).unwrap();
        assert_eq!(l0.item(), 1.0);
        tape.backward(l0).unwrap();
        assert_eq!(theta.grad().unwrap().data(), &[0.0, 0.0]);

        let tape = Tape::new();
        let z = tape.param(Tensor::matrix(1, 2, vec![1.0002, -0.5]).unwrap());
        let theta = tape.param(Tensor::vector(vec![1.0, 0.5]));
        let l0 = ste_l0_loss(z, theta, 1e-3).unwrap();
        assert_eq!(l0.item(), 1.0);
        tape.backward(l0).unwrap();
        assert_eq!(theta.grad().unwrap().data(), &[-1000.0, -1000.0]);
        assert_eq!(z.grad().unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn ste_kernel_integrates_to_minus_one() {
        let eps = 1e-3;
        let z = 0.7;
        let step = eps / 200.0;
        let mut integral = 0.0;
        let mut theta = z - 4.0 * eps;
        while theta < z + 4.0 * eps {
            let tape = Tape::new();
            let zv = tape.constant(Tensor::matrix(1, 1, vec![z]).unwrap());
            let tv = tape.param(Tensor::vector(vec![theta]));
            let l0 = ste_l0_loss(zv, tv, eps).unwrap();
            tape.backward(l0).unwrap();
            integral += tv.grad().unwrap().data()[0] * step;
            theta += step;
        }
        assert!((integral + 1.0).abs() < 0.02, "{integral}");
    }

    #[test]
    fn ste_rejects_bad_width() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let t = tape.param(Tensor::vector(vec![0.5]));
        assert!(ste_l0_loss(z, t, 0.0).is_err());
    }

    #[test]
    fn steered_gradient_matches_finite_differences() {
        let h = 1e-6;
        let sae = random_sae(12, 3, 8);
        let mut rng = stream(13, "gc");
        for trial in 0..20 {
            let ((ad, x), _) = kink_safe_sample(h, 500, || {
                let ad = random_adapter(500 + trial, 3, 8, Variant::SoftThreshold);
                let x = normal_tensor::<f64>(&mut rng, &[2, 3], 1.0);
                let mut margin = f64::INFINITY;
                for r in 0..2 {
                    for (i, z) in ad.pre_activations(x.row(r)).unwrap().into_iter().enumerate() {
                        margin = margin.min((z.abs() - ad.theta.data()[i]).abs()).min(z.abs());
                    }
                    for z in sae.pre_activations(x.row(r)).unwrap() {
                        margin = margin.min(z.abs());
                    }
                }
                Ok(((ad, x), margin))
            })
            .unwrap();
            let params: Vec<Tensor<f64>> = ad.tensors().into_iter().cloned().collect();
            let report = finite_diff_check(
                |tape, p| {
                    let av = AdapterVars::from_vars([p[0], p[1], p[2]], Variant::SoftThreshold)?;
                    let sv = sae.bind(tape, false)?;
                    let xv = tape.constant(x.clone());
                    let (_, v) = av.forward(xv)?;
                    let y = steer_var(SteeringMode::Reconstruction, &sv, xv, v)?;
                    y.mul(y)?.sum().add(v.abs().mean())
                },
                &params,
                h,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "trial {trial}: {:?}", report.per_param);
        }
    }

    proptest! {
        #[test]
        fn dead_zone(z in -5.0f64..5.0, theta in 0.0f64..5.0) {
            if z.abs() <= theta {
                prop_assert_eq!(Variant::SoftThreshold.activate(z, theta), 0.0);
                prop_assert_eq!(Variant::JumpRelu.activate(z, theta), 0.0);
            }
            prop_assert_eq!(Variant::JumpRelu.activate(theta, theta), 0.0);
            prop_assert_eq!(Variant::JumpRelu.activate(-theta, theta), 0.0);
        }

        #[test]
        fn shrinkage(z in -5.0f64..5.0, theta in 0.0f64..5.0) {
            let v = Variant::SoftThreshold.activate(z, theta);
            prop_assert_eq!(v.abs(), (z.abs() - theta).max(0.0));
            if v != 0.0 {
                prop_assert_eq!(v.signum(), z.signum());
            }
        }

        #[test]
        fn relu_never_negative(z in -5.0f64..5.0, theta in 0.0f64..5.0) {
            prop_assert!(Variant::Relu.activate(z, theta) >= 0.0);
        }

        #[test]
        fn l0_is_exact_nonzero_count(v in proptest::collection::vec(prop_oneof![Just(0.0f64), -3.0f64..3.0], 1..40)) {
            let sv = SteeringVector::new(v.clone());
            prop_assert_eq!(sv.l0(), v.iter().filter(|x| **x != 0.0).count());
        }
    }
}
