//! Logit probabilities and the MNL / panel mixed logit log-likelihoods with
//! analytic gradients.
//!
//! Both likelihoods accumulate per user first and then over users in panel
//! order, so that the mixed logit with all standard deviations at zero
//! reproduces the MNL value bit for bit.

use rayon::prelude::*;

use super::data::{dot, DesignPanel, ObsDesign, UserDesign};
use super::draws::DrawMatrix;
use super::params::{ParameterSet, K};
use super::ChoiceError;

/// Softmax with max-subtraction.
pub fn mnl_probabilities(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    softmax_into(v, &mut out);
    out
}

fn softmax_into(v: &[f64], out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Reusable buffers for one observation's utilities and probabilities.
#[derive(Default)]
struct Scratch {
    v: Vec<f64>,
    p: Vec<f64>,
}

/// Adds `ln P_chosen` of one observation to `ll` and its score to `grad`.
#[inline]
fn obs_contribution(o: &ObsDesign, beta: &[f64; K], scratch: &mut Scratch, ll: &mut f64, grad: &mut [f64; K]) {
    let m = o.rows.len();
    if m == 1 {
        return;
    }
    scratch.v.clear();
    scratch.v.extend(o.rows.iter().map(|z| dot(z, beta)));
    let max = scratch.v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    scratch.p.clear();
    let mut sum = 0.0;
    for &x in &scratch.v {
        let e = (x - max).exp();
        scratch.p.push(e);
        sum += e;
    }
    *ll += (scratch.v[o.chosen] - max) - sum.ln();
    let inv = 1.0 / sum;
    let zc = &o.rows[o.chosen];
    for k in 0..K {
        grad[k] += zc[k];
    }
    for (z, &e) in o.rows.iter().zip(&scratch.p) {
        let p = e * inv;
        for k in 0..K {
            grad[k] -= p * z[k];
        }
    }
}

fn user_mnl(user: &UserDesign, beta: &[f64; K], scratch: &mut Scratch) -> (f64, [f64; K]) {
    let mut ll = 0.0;
    let mut grad = [0.0; K];
    for o in &user.obs {
        obs_contribution(o, beta, scratch, &mut ll, &mut grad);
    }
    (ll, grad)
}

/// MNL log-likelihood and its gradient with respect to the 13 means.
pub fn mnl_loglik(data: &DesignPanel, beta: &[f64; K]) -> (f64, [f64; K]) {
    let parts: Vec<(f64, [f64; K])> = data
        .users
        .par_iter()
        .map_init(Scratch::default, |s, u| user_mnl(u, beta, s))
        .collect();
    let mut ll = 0.0;
    let mut grad = [0.0; K];
    for (l, g) in parts {
        ll += l;
        for k in 0..K {
            grad[k] += g[k];
        }
    }
    (ll, grad)
}

/// Log-likelihood with all coefficients at zero: `sum ln(1/m)`.
pub fn null_loglik(data: &DesignPanel) -> f64 {
    data.users
        .iter()
        .map(|u| u.obs.iter().map(|o| -(o.rows.len() as f64).ln()).sum::<f64>())
        .sum()
}

fn user_mxl(user: &UserDesign, mu: &[f64; K], sigma: &[f64; K], block: &[f64], r_count: usize, scratch: &mut Scratch) -> (f64, [f64; 2 * K]) {
    let mut lp = Vec::with_capacity(r_count);
    let mut scores = Vec::with_capacity(r_count);
    let mut beta = [0.0; K];
    for r in 0..r_count {
        let eta = &block[r * K..(r + 1) * K];
        for k in 0..K {
            beta[k] = mu[k] + sigma[k] * eta[k];
        }
        let (l, s) = user_mnl(user, &beta, scratch);
        lp.push(l);
        scores.push(s);
    }
    let max = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = lp.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let ll = max + (total / r_count as f64).ln();
    let mut grad = [0.0; 2 * K];
    for (r, (w, s)) in weights.iter().zip(&scores).enumerate() {
        let w = w / total;
        let eta = &block[r * K..(r + 1) * K];
        for k in 0..K {
            grad[k] += w * s[k];
            grad[K + k] += w * s[k] * eta[k];
        }
    }
    (ll, grad)
}

/// Simulated panel mixed-logit log-likelihood `sum_i ln((1/R) sum_r prod_t P_it(beta_ir))`
/// with `beta_ir = mu + sigma * eta_ir`, and its gradient `[d/dmu, d/dsigma]`.
pub fn mxl_simulated_loglik_raw(
    data: &DesignPanel,
    mu: &[f64; K],
    sigma: &[f64; K],
    draws: &DrawMatrix,
) -> Result<(f64, Vec<f64>), ChoiceError> {
    if draws.draws == 0 {
        return Err(ChoiceError::NoDraws);
    }
    if draws.dims != K || draws.n_users() < data.users.len() {
        return Err(ChoiceError::DrawShape { users: data.users.len(), have: draws.n_users(), dims: draws.dims });
    }
    let parts: Vec<(f64, [f64; 2 * K])> = data
        .users
        .par_iter()
        .enumerate()
        .map_init(Scratch::default, |s, (i, u)| user_mxl(u, mu, sigma, draws.user_block(i), draws.draws, s))
        .collect();
    let mut ll = 0.0;
    let mut grad = vec![0.0; 2 * K];
    for (l, g) in parts {
        ll += l;
        for (acc, x) in grad.iter_mut().zip(g) {
            *acc += x;
        }
    }
    Ok((ll, grad))
}

pub fn mxl_simulated_loglik(
    data: &DesignPanel,
    theta: &ParameterSet,
    draws: &DrawMatrix,
) -> Result<(f64, Vec<f64>), ChoiceError> {
    mxl_simulated_loglik_raw(data, &theta.mu, &theta.sigma, draws)
}

/// Unconditional mixed-logit probabilities of one choice set, averaged over
/// `draws` (a flat `R x K` block).
pub fn mixed_probabilities(rows: &[[f64; K]], mu: &[f64; K], sigma: &[f64; K], block: &[f64]) -> Vec<f64> {
    let r_count = block.len() / K;
    let mut acc = vec![0.0; rows.len()];
    let mut v = vec![0.0; rows.len()];
    let mut p = vec![0.0; rows.len()];
    let mut beta = [0.0; K];
    for r in 0..r_count {
        let eta = &block[r * K..(r + 1) * K];
        for k in 0..K {
            beta[k] = mu[k] + sigma[k] * eta[k];
        }
        for (vj, z) in v.iter_mut().zip(rows) {
            *vj = dot(z, &beta);
        }
        softmax_into(&v, &mut p);
        for (a, q) in acc.iter_mut().zip(&p) {
            *a += q;
        }
    }
    acc.iter_mut().for_each(|a| *a /= r_count as f64);
    acc
}
