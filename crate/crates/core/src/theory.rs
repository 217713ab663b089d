//! Local linear structure of soft-threshold steering.
//!
//! Around a reference point `x0` where no feature sits exactly on its threshold,
//! the steering delta `Δ(x) = W_dec·v(x)` is affine: `Δ(x) = A·x + c` with
//! `A = W_dec·diag(m)·W_a` and `m` the features outside their dead zone. Hence
//! `rank(A) ≤ min(k, d)`, and any downstream weight `W` sees the steered input as
//! the update `W → W + W·A`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{normal_tensor, stream, uniform_tensor};
use crate::sae::SparseAutoencoder;
use crate::scalar::Scalar;
use crate::steering::{SteeringAdapter, Variant};
use crate::tensor::{dot, Tensor};

pub const RANK_RTOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActiveMask {
    pub m: Vec<bool>,
    pub k: usize,
}

impl ActiveMask {
    pub fn new(m: Vec<bool>) -> Self {
        let k = m.iter().filter(|&&b| b).count();
        Self { m, k }
    }
}

#[derive(Clone, Debug)]
pub struct AffineLocalForm<T> {
    /// `[d, d]`
    pub a: Tensor<T>,
    pub c: Vec<T>,
    pub x0: Vec<T>,
    pub mask: ActiveMask,
    /// Perturbations with ℓ2 norm below this cannot move any feature across a kink.
    pub safe_radius: T,
}

/// The steering delta `W_dec·v(x)` (decoder bias excluded).
pub fn steering_delta<T: Scalar>(sae: &SparseAutoencoder<T>, adapter: &SteeringAdapter<T>, x: &[T]) -> Result<Vec<T>> {
    sae.decode_linear(adapter.forward(x)?.values())
}

pub fn local_affine_form<T: Scalar>(
    sae: &SparseAutoencoder<T>,
    adapter: &SteeringAdapter<T>,
    x0: &[T],
) -> Result<AffineLocalForm<T>> {
    if adapter.variant != Variant::SoftThreshold {
        return Err(Error::InvalidConfig(format!(
            "local affine form needs a soft_threshold adapter, got {}",
            adapter.variant
        )));
    }
    adapter.check_compatible(sae)?;
    let (d, d_sae) = (sae.d(), sae.d_sae());
    let z0 = adapter.pre_activations(x0)?;
    let theta = adapter.theta.data();
    let mut radius = T::infinity();
    let mut m = Vec::with_capacity(d_sae);
    for i in 0..d_sae {
        let gap = z0[i].abs() - theta[i];
        if gap == T::zero() {
            return Err(Error::Degenerate(format!(
                "degenerate reference point: feature {i} lies exactly on its threshold"
            )));
        }
        m.push(gap > T::zero());
        let row = adapter.w_a.row(i);
        let norm = dot(row, row).sqrt();
        if norm > T::zero() {
            let mut dist = gap.abs();
            if theta[i] == T::zero() {
                dist = dist.min(z0[i].abs());
            }
            radius = radius.min(dist / norm);
        }
    }
    let mask = ActiveMask::new(m);

    // diag(m)·W_a, then W_dec·(that).
    let mut mw = adapter.w_a.clone();
    for i in 0..d_sae {
        if !mask.m[i] {
            mw.row_mut(i).iter_mut().for_each(|w| *w = T::zero());
        }
    }
    let a = sae.w_dec.matmul(&mw)?;
    let v0 = adapter.activate(&z0);
    let mwx = mw.matvec(x0)?;
    let inner: Vec<T> = v0.iter().zip(&mwx).map(|(&v, &w)| v - w).collect();
    let c = sae.decode_linear(&inner)?;
    debug_assert_eq!(a.shape(), &[d, d]);
    Ok(AffineLocalForm {
        a,
        c,
        x0: x0.to_vec(),
        mask,
        safe_radius: radius,
    })
}

fn to_dmatrix<T: Scalar>(t: &Tensor<T>) -> Result<DMatrix<f64>> {
    if t.shape().len() != 2 {
        return Err(Error::InvalidShape(t.shape().to_vec(), "rank needs a matrix".into()));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite {
            context: "singular value decomposition".into(),
        });
    }
    Ok(DMatrix::from_row_iterator(
        t.rows(),
        t.cols(),
        t.data().iter().map(|v| v.as_f64()),
    ))
}

/// Singular values in descending order.
pub fn singular_values<T: Scalar>(t: &Tensor<T>) -> Result<Vec<f64>> {
    let mut s: Vec<f64> = to_dmatrix(t)?.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Count of singular values above `tol_dim · σ_max · 1e-12`.
pub fn numerical_rank_with<T: Scalar>(t: &Tensor<T>, tol_dim: usize) -> Result<usize> {
    let s = singular_values(t)?;
    let smax = s.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return Ok(0);
    }
    let tol = tol_dim as f64 * smax * RANK_RTOL;
    Ok(s.iter().filter(|&&x| x > tol).count())
}

/// Numerical rank with the tolerance scaled by the larger dimension.
pub fn numerical_rank<T: Scalar>(t: &Tensor<T>) -> Result<usize> {
    numerical_rank_with(t, t.rows().max(t.cols()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RankReport {
    pub k: usize,
    pub numerical_rank: usize,
    pub bound: usize,
    pub holds: bool,
}

pub fn rank_bound_check<T: Scalar>(
    sae: &SparseAutoencoder<T>,
    adapter: &SteeringAdapter<T>,
    x0: &[T],
) -> Result<RankReport> {
    let form = local_affine_form(sae, adapter, x0)?;
    rank_report(&form, sae.d(), sae.d_sae())
}

fn rank_report<T: Scalar>(form: &AffineLocalForm<T>, d: usize, d_sae: usize) -> Result<RankReport> {
    let numerical_rank = numerical_rank_with(&form.a, d.max(d_sae))?;
    let bound = form.mask.k.min(d);
    Ok(RankReport {
        k: form.mask.k,
        numerical_rank,
        bound,
        holds: numerical_rank <= bound,
    })
}

/// `ΔW = W·A` for a downstream weight `W` of shape `[d', d]`.
pub fn induced_weight_update<T: Scalar>(w: &Tensor<T>, form: &AffineLocalForm<T>) -> Result<Tensor<T>> {
    w.matmul(&form.a)
}

/// Largest deviation between `W·x_steered(x0)` and `(W + ΔW)·x0 + W·c`.
pub fn induced_update_residual<T: Scalar>(
    sae: &SparseAutoencoder<T>,
    adapter: &SteeringAdapter<T>,
    w: &Tensor<T>,
    form: &AffineLocalForm<T>,
) -> Result<T> {
    let dw = induced_weight_update(w, form)?;
    let delta = steering_delta(sae, adapter, &form.x0)?;
    let steered: Vec<T> = form.x0.iter().zip(&delta).map(|(&x, &d)| x + d).collect();
    let lhs = w.matvec(&steered)?;
    let wx = w.matvec(&form.x0)?;
    let dwx = dw.matvec(&form.x0)?;
    let wc = w.matvec(&form.c)?;
    Ok(lhs
        .iter()
        .zip(wx.iter().zip(dwx.iter().zip(&wc)))
        .map(|(&l, (&a, (&b, &c)))| (l - (a + b + c)).abs())
        .fold(T::zero(), T::max))
}

/// Largest `|Δ(x0+δ) − Δ(x0) − A·δ|` entry.
pub fn affine_residual<T: Scalar>(
    sae: &SparseAutoencoder<T>,
    adapter: &SteeringAdapter<T>,
    form: &AffineLocalForm<T>,
    delta: &[T],
) -> Result<T> {
    let x1: Vec<T> = form.x0.iter().zip(delta).map(|(&a, &b)| a + b).collect();
    let d1 = steering_delta(sae, adapter, &x1)?;
    let d0 = steering_delta(sae, adapter, &form.x0)?;
    let ad = form.a.matvec(delta)?;
    Ok(d1
        .iter()
        .zip(d0.iter().zip(&ad))
        .map(|(&p, (&q, &r))| (p - q - r).abs())
        .fold(T::zero(), T::max))
}

/// Dimension of the span of `ΔW(x) = W·A[x]` over the sample points, from the
/// numerical rank of the stacked row-vectorisations.
pub fn effective_rank<T: Scalar>(
    sae: &SparseAutoencoder<T>,
    adapter: &SteeringAdapter<T>,
    w: &Tensor<T>,
    points: &[Vec<T>],
) -> Result<usize> {
    if points.is_empty() {
        return Err(Error::Empty("effective rank needs sample points".into()));
    }
    let mut rows = Vec::new();
    for x in points {
        let form = local_affine_form(sae, adapter, x)?;
        rows.extend_from_slice(induced_weight_update(w, &form)?.data());
    }
    let stacked = Tensor::new(vec![points.len(), w.rows() * sae.d()], rows)?;
    numerical_rank(&stacked)
}

/// Random soft-threshold instance whose thresholds leave a spread of features active.
pub fn random_instance(seed: u64, d: usize, d_sae: usize) -> Result<(SparseAutoencoder<f64>, SteeringAdapter<f64>, Vec<f64>)> {
    let mut rng = stream(seed, "theory-instance");
    let mut sae = SparseAutoencoder::<f64>::init(d, d_sae, seed)?;
    sae.b_enc = uniform_tensor(&mut rng, &[d_sae], -0.1, 0.1);
    sae.b_dec = uniform_tensor(&mut rng, &[d], -0.1, 0.1);
    let scale = 1.0 / (d as f64).sqrt();
    let adapter = SteeringAdapter::new(
        uniform_tensor(&mut rng, &[d_sae, d], -scale, scale),
        uniform_tensor(&mut rng, &[d_sae], -0.2, 0.2),
        uniform_tensor(&mut rng, &[d_sae], 0.0, 1.5),
        Variant::SoftThreshold,
    )?;
    let x0 = normal_tensor::<f64>(&mut rng, &[d], 1.0).into_data();
    Ok((sae, adapter, x0))
}

/// Outcome of the randomized checks over many instances.
#[derive(Clone, Debug, Serialize)]
pub struct TheorySuiteReport {
    pub trials: usize,
    pub d: usize,
    pub d_sae: usize,
    pub affine_holds: usize,
    pub max_affine_residual: f64,
    pub rank_holds: usize,
    pub product_rank_holds: usize,
    pub induced_holds: usize,
    pub max_induced_residual: f64,
    pub k_values: Vec<usize>,
    pub ranks: Vec<usize>,
}

impl TheorySuiteReport {
    pub fn all_hold(&self) -> bool {
        self.affine_holds == self.trials
            && self.rank_holds == self.trials
            && self.product_rank_holds == self.trials
            && self.induced_holds == self.trials
    }
}

pub const AFFINE_TOL: f64 = 1e-10;

pub struct TrialOutcome {
    pub affine_residual: f64,
    pub rank: RankReport,
    pub product_rank: usize,
    pub product_bound: usize,
    pub induced_residual: f64,
}

/// Runs the affine-identity, rank-bound and induced-update checks on one instance.
pub fn run_trial(
    sae: &SparseAutoencoder<f64>,
    adapter: &SteeringAdapter<f64>,
    x0: &[f64],
    d_out: usize,
    seed: u64,
    perturbations: usize,
) -> Result<TrialOutcome> {
    let form = local_affine_form(sae, adapter, x0)?;
    let rank = rank_report(&form, sae.d(), sae.d_sae())?;
    let mut rng = stream(seed, "theory-trial");
    let mut worst: f64 = 0.0;
    for _ in 0..perturbations {
        let dir = normal_tensor::<f64>(&mut rng, &[sae.d()], 1.0).into_data();
        let norm = dot(&dir, &dir).sqrt();
        let frac: f64 = uniform_tensor::<f64>(&mut rng, &[1], 0.0, 0.99).item();
        let r = if form.safe_radius.is_finite() { form.safe_radius } else { 1.0 };
        let delta: Vec<f64> = dir.iter().map(|v| v / norm * frac * r).collect();
        worst = worst.max(affine_residual(sae, adapter, &form, &delta)?);
    }
    let w = normal_tensor::<f64>(&mut rng, &[d_out, sae.d()], 1.0);
    let dw = induced_weight_update(&w, &form)?;
    let product_rank = numerical_rank_with(&dw, sae.d().max(sae.d_sae()))?;
    let w_rank = numerical_rank(&w)?;
    let product_bound = w_rank.min(rank.numerical_rank).min(d_out).min(form.mask.k);
    let induced_residual = induced_update_residual(sae, adapter, &w, &form)?;
    Ok(TrialOutcome {
        affine_residual: worst,
        rank,
        product_rank,
        product_bound,
        induced_residual,
    })
}

/// `trials` random instances at the given sizes, `perturbations` random `δ` each.
pub fn run_suite(seed: u64, trials: usize, d: usize, d_sae: usize, perturbations: usize) -> Result<TheorySuiteReport> {
    let mut rep = TheorySuiteReport {
        trials,
        d,
        d_sae,
        affine_holds: 0,
        max_affine_residual: 0.0,
        rank_holds: 0,
        product_rank_holds: 0,
        induced_holds: 0,
        max_induced_residual: 0.0,
        k_values: Vec::with_capacity(trials),
        ranks: Vec::with_capacity(trials),
    };
    let d_out = d.div_ceil(2);
    for t in 0..trials {
        let inst_seed = seed.wrapping_add(t as u64);
        let (sae, adapter, x0) = random_instance(inst_seed, d, d_sae)?;
        let out = run_trial(&sae, &adapter, &x0, d_out, inst_seed, perturbations)?;
        rep.max_affine_residual = rep.max_affine_residual.max(out.affine_residual);
        rep.affine_holds += usize::from(out.affine_residual <= AFFINE_TOL);
        rep.rank_holds += usize::from(out.rank.holds);
        rep.product_rank_holds += usize::from(out.product_rank <= out.product_bound);
        rep.max_induced_residual = rep.max_induced_residual.max(out.induced_residual);
        rep.induced_holds += usize::from(out.induced_residual <= AFFINE_TOL);
        rep.k_values.push(out.rank.k);
        rep.ranks.push(out.rank.numerical_rank);
    }
    Ok(rep)
}
