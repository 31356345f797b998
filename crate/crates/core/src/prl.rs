//! Part Relation Learning: the multi-view non-local network (MV-NLN).
//!
//! Unlike a vanilla non-local block, the query and key projections are
//! per-part ("multi-view"): K distinct theta matrices and K distinct phi
//! matrices. phi_i is indexed by the key part only and reused by every query
//! row. All parameters are shared between the visual and textual modality.

use crate::autodiff::{softmax_vec, Tape, Var};
use crate::error::{Error, Result};
use crate::global_branch::linear;

/// Parameter handles for MV-NLN.
#[derive(Clone)]
pub struct MvNlnVars {
    /// Query projections W_theta^k, `(M', M)`, no bias.
    pub theta: Vec<Var>,
    /// Key projections W_phi^i, `(M', M)`, no bias.
    pub phi: Vec<Var>,
    /// Aggregation maps W_gamma^k, `(M, M')`, with bias.
    pub gamma_w: Vec<Var>,
    pub gamma_b: Vec<Var>,
    /// Output maps W_n^k, `(N, M)`, with bias.
    pub out_w: Vec<Var>,
    pub out_b: Vec<Var>,
}

/// Softmax attention of query part `k` over the other K-1 parts.
///
/// `theta_query` is theta_k(v^k); `phi_keys` holds phi_i(v^i) for all i.
/// Returns the key indices in order together with the `(K-1, 1)` weights.
pub fn relation_weights(
    tape: &mut Tape,
    theta_query: Var,
    phi_keys: &[Var],
    k: usize,
) -> Result<(Vec<usize>, Var)> {
    if phi_keys.len() < 2 {
        return Err(Error::config("relation learning requires K >= 2"));
    }
    let mut others = Vec::with_capacity(phi_keys.len() - 1);
    let mut scores = Vec::with_capacity(phi_keys.len() - 1);
    for (i, &phi) in phi_keys.iter().enumerate() {
        if i == k {
            continue;
        }
        others.push(i);
        scores.push(tape.cosine(theta_query, phi)?);
    }
    let score_vec = tape.concat_rows(&scores);
    Ok((others, softmax_vec(tape, score_vec)))
}

/// Weighted sum of the key-projected parts, mapped back to R^M by W_gamma^k.
pub fn aggregate(
    tape: &mut Tape,
    gamma_w: Var,
    gamma_b: Var,
    phi_keys: &[Var],
    others: &[usize],
    alphas: Var,
) -> Var {
    let mut acc: Option<Var> = None;
    for (row, &i) in others.iter().enumerate() {
        let a = tape.slice_rows(alphas, row, row + 1);
        let term = tape.mul_scalar(phi_keys[i], a);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term),
            None => term,
        });
    }
    linear(tape, gamma_w, Some(gamma_b), acc.expect("K >= 2"))
}

/// Residual sum then projection to R^N: v_n^k = W_n^k (v_l^k + v_l_in^k).
pub fn relation_feature(tape: &mut Tape, out_w: Var, out_b: Var, part: Var, aggregated: Var) -> Var {
    let residual = tape.add(part, aggregated);
    linear(tape, out_w, Some(out_b), residual)
}

/// Full MV-NLN over K part features of one modality.
pub fn mv_nln(tape: &mut Tape, vars: &MvNlnVars, parts: &[Var]) -> Result<Vec<Var>> {
    let k_parts = parts.len();
    if k_parts < 2 {
        return Err(Error::config("relation learning requires K >= 2"));
    }
    let phi_keys: Vec<Var> = parts
        .iter()
        .enumerate()
        .map(|(i, &v)| tape.matmul(vars.phi[i], v))
        .collect();
    let mut out = Vec::with_capacity(k_parts);
    for (k, &part) in parts.iter().enumerate() {
        let theta_query = tape.matmul(vars.theta[k], part);
        let (others, alphas) = relation_weights(tape, theta_query, &phi_keys, k)?;
        let aggregated = aggregate(tape, vars.gamma_w[k], vars.gamma_b[k], &phi_keys, &others, alphas);
        out.push(relation_feature(tape, vars.out_w[k], vars.out_b[k], part, aggregated));
    }
    Ok(out)
}

/// Cosine of the two K-part relation concatenations (S_n).
pub fn relation_similarity(tape: &mut Tape, visual: &[Var], text: &[Var]) -> Result<Var> {
    let v = tape.concat_rows(visual);
    let t = tape.concat_rows(text);
    tape.cosine(v, t)
}
