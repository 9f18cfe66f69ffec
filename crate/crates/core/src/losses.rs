//! Supervised log-Dice loss, NT-Xent and SimSiam contrastive losses, and the
//! joint objective, each with its analytic gradient.

use ndarray::{Array1, Array2, Array4, ArrayView1, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Predictor;
use crate::nn::{c, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveKind {
    /// NT-Xent with in-batch negatives.
    Clr,
    /// Negative-free cosine prediction with stop-gradient.
    Siam,
}

/// Which terms the NT-Xent denominator sums over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    /// Negatives only (`k != i`).
    AsWritten,
    /// Negatives plus the positive pair.
    IncludePositive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub eps: f64,
    pub contrastive_kind: ContrastiveKind,
    pub denominator_mode: DenominatorMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            lambda: 20.0,
            eps: 1e-6,
            contrastive_kind: ContrastiveKind::Clr,
            denominator_mode: DenominatorMode::AsWritten,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau", self.tau), ("lambda", self.lambda), ("eps", self.eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

fn norm<T: Real>(u: ArrayView1<T>) -> T {
    u.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// `u.v / (|u| |v|)`. A zero-norm argument yields 0 (and a warning) instead
/// of NaN.
pub fn cosine_similarity<T: Real>(u: ArrayView1<T>, v: ArrayView1<T>) -> T {
    let (nu, nv) = (norm(u), norm(v));
    if nu == T::zero() || nv == T::zero() {
        log::warn!("cosine similarity of a zero-norm vector; treating as 0");
        return T::zero();
    }
    u.dot(&v) / (nu * nv)
}

/// Cosine similarity and its gradient with respect to `u`.
fn cosine_and_grad_u<T: Real>(u: ArrayView1<T>, v: ArrayView1<T>) -> (T, Array1<T>) {
    let (nu, nv) = (norm(u), norm(v));
    if nu == T::zero() || nv == T::zero() {
        log::warn!("cosine similarity of a zero-norm vector; treating as 0");
        return (T::zero(), Array1::zeros(u.len()));
    }
    let d = u.dot(&v) / (nu * nv);
    let g = v.mapv(|x| x / (nu * nv)) - u.mapv(|x| x * d / (nu * nu));
    (d, g)
}

fn check_binary<T: Real>(y: &Array4<T>) -> Result<()> {
    if let Some(v) = y.iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::Invalid(format!("mask value {v} is not 0 or 1")));
    }
    Ok(())
}

/// Mean over images and classes of
/// `-log((2 sum(y p) + eps) / (eps + sum(y) + sum(p)))`.
pub fn log_dice_loss<T: Real>(p: &Array4<T>, y: &Array4<T>, eps: f64) -> Result<T> {
    Ok(log_dice_loss_grad(p, y, eps)?.0)
}

/// Loss value and `dL/dp`.
pub fn log_dice_loss_grad<T: Real>(p: &Array4<T>, y: &Array4<T>, eps: f64) -> Result<(T, Array4<T>)> {
    if p.dim() != y.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs mask {:?}", p.dim(), y.dim())));
    }
    check_binary(y)?;
    let (n, cls, h, w) = p.dim();
    let eps: T = c(eps);
    let two: T = c(2.0);
    let count: T = c((n * cls) as f64);
    let hw = h * w;
    let ps = p.as_standard_layout();
    let ys = y.as_standard_layout();
    let ps = ps.as_slice().unwrap();
    let ys = ys.as_slice().unwrap();
    let mut grad = Array4::<T>::zeros(p.dim());
    let gs = grad.as_slice_mut().unwrap();
    let mut total = T::zero();
    for plane in 0..n * cls {
        let r = plane * hw..(plane + 1) * hw;
        let (pp, yy) = (&ps[r.clone()], &ys[r.clone()]);
        let inter: T = pp.iter().zip(yy).map(|(&a, &b)| a * b).sum();
        let sum_y: T = yy.iter().copied().sum();
        let sum_p: T = pp.iter().copied().sum();
        let num = two * inter + eps;
        let den = eps + sum_y + sum_p;
        total += den.ln() - num.ln();
        for (g, &yv) in gs[r].iter_mut().zip(yy) {
            *g = (T::one() / den - two * yv / num) / count;
        }
    }
    Ok((total / count, grad))
}

fn check_pairs<T: Real>(a: &Array2<T>, b: &Array2<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "projection batches {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.nrows() == 0 {
        return Err(Error::Invalid("empty projection batch".into()));
    }
    Ok(())
}

/// Row-normalized copy and the row norms.
fn normalize_rows<T: Real>(z: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let norms: Array1<T> = z.map_axis(Axis(1), norm);
    let mut out = z.clone();
    for (mut row, &n) in out.outer_iter_mut().zip(norms.iter()) {
        if n == T::zero() {
            log::warn!("zero-norm projection in contrastive batch; similarities set to 0");
            row.fill(T::zero());
        } else {
            row.mapv_inplace(|v| v / n);
        }
    }
    (out, norms)
}

/// Backpropagate through `u / |u|` row-wise.
fn unnormalize_grad<T: Real>(g: &Array2<T>, unit: &Array2<T>, norms: &Array1<T>) -> Array2<T> {
    let mut out = g.clone();
    for ((mut row, u), &n) in out.outer_iter_mut().zip(unit.outer_iter()).zip(norms.iter()) {
        if n == T::zero() {
            row.fill(T::zero());
            continue;
        }
        let proj = row.dot(&u);
        Zip::from(&mut row).and(&u).for_each(|r, &uu| *r = (*r - uu * proj) / n);
    }
    out
}

/// NT-Xent summed over both orderings of every pair.
pub fn ntxent_loss<T: Real>(zp: &Array2<T>, zpp: &Array2<T>, tau: f64, mode: DenominatorMode) -> Result<T> {
    Ok(ntxent_loss_grad(zp, zpp, tau, mode)?.0)
}

/// Loss value and gradients with respect to both projection batches.
pub fn ntxent_loss_grad<T: Real>(
    zp: &Array2<T>,
    zpp: &Array2<T>,
    tau: f64,
    mode: DenominatorMode,
) -> Result<(T, Array2<T>, Array2<T>)> {
    check_pairs(zp, zpp)?;
    let n = zp.nrows();
    if mode == DenominatorMode::AsWritten && n < 2 {
        return Err(Error::Invalid(
            "NT-Xent with negatives-only denominator needs at least 2 pairs".into(),
        ));
    }
    let inv_tau: T = c(1.0 / tau);
    let (up, np) = normalize_rows(zp);
    let (upp, npp) = normalize_rows(zpp);
    // sim[i][k] = d(z'_i, z''_k)
    let sim = up.dot(&upp.t());
    let in_denominator = |i: usize, k: usize| mode == DenominatorMode::IncludePositive || i != k;
    let mut total = T::zero();
    let mut gsim = Array2::<T>::zeros((n, n));
    // Row direction: l(z'_i, z''_i) uses sim[i][*]; column direction:
    // l(z''_i, z'_i) uses sim[*][i].
    for transposed in [false, true] {
        for i in 0..n {
            let at = |k: usize| if transposed { sim[[k, i]] } else { sim[[i, k]] };
            let logits: Vec<(usize, T)> = (0..n)
                .filter(|&k| in_denominator(i, k))
                .map(|k| (k, at(k) * inv_tau))
                .collect();
            let m = logits.iter().map(|&(_, v)| v).fold(T::neg_infinity(), T::max);
            let denom: T = logits.iter().map(|&(_, v)| (v - m).exp()).sum();
            let lse = m + denom.ln();
            total += lse - at(i) * inv_tau;
            let mut add = |k: usize, g: T| {
                if transposed {
                    gsim[[k, i]] += g;
                } else {
                    gsim[[i, k]] += g;
                }
            };
            add(i, -inv_tau);
            for &(k, v) in &logits {
                add(k, (v - m).exp() / denom * inv_tau);
            }
        }
    }
    let g_up = gsim.dot(&upp);
    let g_upp = gsim.t().dot(&up);
    Ok((
        total,
        unnormalize_grad(&g_up, &up, &np),
        unnormalize_grad(&g_upp, &upp, &npp),
    ))
}

/// `-sum_i d(q'_i, z''_i) + d(q''_i, z'_i)` from precomputed predictions.
pub fn simsiam_from_predictions<T: Real>(
    qp: &Array2<T>,
    qpp: &Array2<T>,
    zp: &Array2<T>,
    zpp: &Array2<T>,
) -> Result<T> {
    check_pairs(qp, zpp)?;
    check_pairs(qpp, zp)?;
    let mut total = T::zero();
    for i in 0..zp.nrows() {
        total -= cosine_similarity(qp.row(i), zpp.row(i));
        total -= cosine_similarity(qpp.row(i), zp.row(i));
    }
    Ok(total)
}

/// SimSiam loss value.
pub fn simsiam_loss<T: Real>(zp: &Array2<T>, zpp: &Array2<T>, q: &Predictor<T>) -> Result<T> {
    let (qp, _) = q.forward(zp);
    let (qpp, _) = q.forward(zpp);
    simsiam_from_predictions(&qp, &qpp, zp, zpp)
}

/// Gradients of the SimSiam loss. `d_zp`/`d_zpp` flow only through the
/// predictor inputs; the stop-gradient targets receive `d_target_*`, which
/// are zero by construction.
pub struct SimsiamGrad<T> {
    pub value: T,
    pub d_zp: Array2<T>,
    pub d_zpp: Array2<T>,
    pub d_target_zp: Array2<T>,
    pub d_target_zpp: Array2<T>,
}

pub fn simsiam_loss_grad<T: Real>(
    zp: &Array2<T>,
    zpp: &Array2<T>,
    q: &Predictor<T>,
    q_grad: &mut Predictor<T>,
) -> Result<SimsiamGrad<T>> {
    check_pairs(zp, zpp)?;
    let (qp, cp) = q.forward(zp);
    let (qpp, cpp) = q.forward(zpp);
    let mut value = T::zero();
    let mut dqp = Array2::<T>::zeros(qp.dim());
    let mut dqpp = Array2::<T>::zeros(qpp.dim());
    for i in 0..zp.nrows() {
        let (d1, g1) = cosine_and_grad_u(qp.row(i), zpp.row(i));
        let (d2, g2) = cosine_and_grad_u(qpp.row(i), zp.row(i));
        value -= d1 + d2;
        dqp.row_mut(i).assign(&g1.mapv(|v| -v));
        dqpp.row_mut(i).assign(&g2.mapv(|v| -v));
    }
    let d_zp = q.backward(&cp, &dqp, q_grad);
    let d_zpp = q.backward(&cpp, &dqpp, q_grad);
    Ok(SimsiamGrad {
        value,
        d_zp,
        d_zpp,
        d_target_zp: Array2::zeros(zp.dim()),
        d_target_zpp: Array2::zeros(zpp.dim()),
    })
}

/// `1/2 (L_con(source) + L_con(target)) + lambda L_sup`.
pub fn total_loss<T: Real>(con_source: T, con_target: T, sup: T, lambda: f64) -> Result<T> {
    for (name, v) in [
        ("source contrastive loss", con_source),
        ("target contrastive loss", con_target),
        ("supervised loss", sup),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    if !lambda.is_finite() {
        return Err(Error::NonFinite("lambda".into()));
    }
    Ok(c::<T>(0.5) * (con_source + con_target) + c::<T>(lambda) * sup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::Rng;

    fn random(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
        let mut r = crate::rng::stream(seed, "losses", 0);
        Array::from_shape_simple_fn((rows, cols), || r.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn cosine_basics() {
        let u = array![1.0f64, 2.0, -3.0];
        assert!((cosine_similarity(u.view(), u.view()) - 1.0).abs() < 1e-15);
        let neg = -&u;
        assert!((cosine_similarity(u.view(), neg.view()) + 1.0).abs() < 1e-15);
        let (a, b) = (array![1.0f64, 0.0], array![0.0f64, 1.0]);
        assert_eq!(cosine_similarity(a.view(), b.view()), 0.0);
        let z = array![0.0, 0.0];
        assert_eq!(cosine_similarity(a.view(), z.view()), 0.0);
    }

    #[test]
    fn dice_loss_cases() {
        let mut y = Array4::<f64>::zeros((1, 1, 3, 3));
        for j in 0..4 {
            y.as_slice_mut().unwrap()[j] = 1.0;
        }
        assert!(log_dice_loss(&y, &y, 1e-6).unwrap() <= 1e-6);

        let mut p = Array4::<f64>::zeros((1, 1, 3, 3));
        for j in 2..6 {
            p.as_slice_mut().unwrap()[j] = 1.0;
        }
        let l = log_dice_loss(&p, &y, 1e-6).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-6);

        let z = Array4::<f64>::zeros((1, 1, 3, 3));
        assert_eq!(log_dice_loss(&z, &z, 1e-6).unwrap(), 0.0);
    }

    #[test]
    fn dice_loss_rejects_bad_inputs() {
        let p = Array4::<f64>::zeros((1, 1, 2, 2));
        let mut y = Array4::<f64>::zeros((1, 1, 2, 2));
        y[[0, 0, 0, 0]] = 2.0;
        assert!(matches!(log_dice_loss(&p, &y, 1e-6), Err(Error::Invalid(_))));
        let y = Array4::<f64>::zeros((1, 2, 2, 2));
        assert!(matches!(log_dice_loss(&p, &y, 1e-6), Err(Error::Shape(_))));
    }

    #[test]
    fn ntxent_orthogonal_pairs() {
        let z = array![[1.0f64, 0.0], [0.0, 1.0]];
        let l = ntxent_loss(&z, &z, 1.0, DenominatorMode::AsWritten).unwrap();
        assert!((l + 4.0).abs() < 1e-12);
    }

    #[test]
    fn ntxent_needs_two_pairs_as_written() {
        let z = array![[1.0, 0.0]];
        assert!(ntxent_loss(&z, &z, 0.5, DenominatorMode::AsWritten).is_err());
        assert!(ntxent_loss(&z, &z, 0.5, DenominatorMode::IncludePositive).is_ok());
    }

    #[test]
    fn ntxent_gradient_matches_finite_differences() {
        for mode in [DenominatorMode::AsWritten, DenominatorMode::IncludePositive] {
            let zp = random(1, 4, 5);
            let zpp = random(2, 4, 5);
            let (_, gp, gpp) = ntxent_loss_grad(&zp, &zpp, 0.3, mode).unwrap();
            let h = 1e-6;
            for idx in 0..zp.len() {
                let mut a = zp.clone();
                let mut b = zp.clone();
                a.as_slice_mut().unwrap()[idx] += h;
                b.as_slice_mut().unwrap()[idx] -= h;
                let fd =
                    (ntxent_loss(&a, &zpp, 0.3, mode).unwrap() - ntxent_loss(&b, &zpp, 0.3, mode).unwrap()) / (2.0 * h);
                assert!((fd - gp.as_slice().unwrap()[idx]).abs() < 1e-6);
                let mut a = zpp.clone();
                let mut b = zpp.clone();
                a.as_slice_mut().unwrap()[idx] += h;
                b.as_slice_mut().unwrap()[idx] -= h;
                let fd =
                    (ntxent_loss(&zp, &a, 0.3, mode).unwrap() - ntxent_loss(&zp, &b, 0.3, mode).unwrap()) / (2.0 * h);
                assert!((fd - gpp.as_slice().unwrap()[idx]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let mut r = crate::rng::stream(3, "dice", 0);
        let p = Array4::from_shape_simple_fn((2, 2, 3, 3), || 0.05 + 0.9 * r.random::<f64>());
        let y = Array4::from_shape_simple_fn((2, 2, 3, 3), || f64::from(r.random::<bool>()));
        let (_, g) = log_dice_loss_grad(&p, &y, 1e-6).unwrap();
        let h = 1e-7;
        for idx in 0..p.len() {
            let mut a = p.clone();
            let mut b = p.clone();
            a.as_slice_mut().unwrap()[idx] += h;
            b.as_slice_mut().unwrap()[idx] -= h;
            let fd = (log_dice_loss(&a, &y, 1e-6).unwrap() - log_dice_loss(&b, &y, 1e-6).unwrap()) / (2.0 * h);
            assert!((fd - g.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn total_loss_arithmetic_and_guard() {
        assert_eq!(total_loss(0.0, 0.0, 0.0, 20.0).unwrap(), 0.0);
        assert!((total_loss(2.0f64, 4.0, 0.1, 20.0).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(total_loss(2.0, 4.0, 0.1, 0.0).unwrap(), 3.0);
        assert!(matches!(total_loss(f64::NAN, 0.0, 0.0, 20.0), Err(Error::NonFinite(_))));
    }
}
