//! Training objectives: ranking loss, Compound Ranking loss with adaptive
//! margins, identity cross-entropy, and their weighted composition.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::config::LossConfig;
use crate::error::{Error, Result};

/// Cosine scores of one anchor's pair set. Negatives are the hardest within
/// the mini-batch; the weak positive D'_p is a caption of a different image
/// of the same identity.
#[derive(Debug, Clone, Copy)]
pub struct PairScores {
    /// S(I_p, D_p): matching pair.
    pub pos: Var,
    /// S(I_p, D_n): hardest negative text for the anchor image.
    pub neg_text: Var,
    /// S(I_n, D_p): hardest negative image for the anchor text.
    pub neg_image: Var,
    /// S(I_p, D'_p): weak positive.
    pub weak_pos: Var,
    /// S(I_n, D'_p): hardest negative image against the weak positive.
    pub weak_neg_image: Var,
}

fn hinge(tape: &mut Tape, margin: f64, pos: Var, neg: Var) -> Var {
    let diff = tape.sub(neg, pos);
    let shifted = tape.add_const(diff, margin);
    tape.relu(shifted)
}

/// Two-sided hinge ranking loss with margin `alpha`:
/// max(a - S_pp + S_pn, 0) + max(a - S_pp + S_np, 0).
pub fn ranking_loss(tape: &mut Tape, pos: Var, neg_text: Var, neg_image: Var, alpha: f64) -> Var {
    let a = hinge(tape, alpha, pos, neg_text);
    let b = hinge(tape, alpha, pos, neg_image);
    tape.add(a, b)
}

/// Adaptive margin for the weak supervision terms:
/// alpha2 = (lambda + 1) * alpha1 / 2 with lambda = min(S_pp' / S_pp, 1).
///
/// The raw ratio is undefined or unbounded when S_pp is near zero or
/// negative, which happens early in training; the default clamps lambda to
/// [0, 1] (falling back to lambda = 1 when |S_pp| < 1e-6) so that alpha2
/// always lies in [alpha1/2, alpha1]. `strict` disables the clamp and applies
/// the raw formula.
pub fn adaptive_margin(s_pos: f64, s_weak_pos: f64, alpha1: f64, strict: bool) -> f64 {
    let lambda = if strict {
        (s_weak_pos / s_pos).min(1.0)
    } else if s_pos.abs() < 1e-6 {
        1.0
    } else {
        (s_weak_pos / s_pos).clamp(0.0, 1.0)
    };
    (lambda + 1.0) * alpha1 / 2.0
}

/// Compound Ranking loss: the strong ranking terms with margin alpha1 plus
/// beta-weighted weak terms with the adaptive margin alpha2. The margin is
/// treated as a constant during differentiation.
pub fn compound_ranking_loss(tape: &mut Tape, scores: &PairScores, cfg: &LossConfig) -> Var {
    let strong = ranking_loss(tape, scores.pos, scores.neg_text, scores.neg_image, cfg.alpha1);
    if cfg.beta == 0.0 {
        return strong;
    }
    let alpha2 = adaptive_margin(
        tape.scalar(scores.pos),
        tape.scalar(scores.weak_pos),
        cfg.alpha1,
        cfg.strict_lambda,
    );
    let w1 = hinge(tape, alpha2, scores.weak_pos, scores.neg_text);
    let w2 = hinge(tape, alpha2, scores.weak_pos, scores.weak_neg_image);
    let weak = tape.add(w1, w2);
    let weak = tape.scale(weak, cfg.beta);
    tape.add(strong, weak)
}

/// Identity cross-entropy through a linear classifier shared across
/// modalities: -log softmax(W f + b)[label].
pub fn id_loss(tape: &mut Tape, weight: Var, bias: Var, feature: Var, label: usize) -> Result<Var> {
    let classes = tape.value(weight).shape()[0];
    if label >= classes {
        return Err(Error::data(format!(
            "identity label {label} out of range for {classes} classes"
        )));
    }
    let scores = tape.matmul(weight, feature);
    let logits = tape.add(scores, bias);
    let exps = tape.exp(logits);
    let total = tape.sum(exps);
    let lse = tape.ln(total);
    let target = tape.slice_rows(logits, label, label + 1);
    Ok(tape.sub(lse, target))
}

/// Per-batch loss breakdown, serialized as one JSON line per step.
#[derive(Debug, Clone, Default, Serialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub cr_global: f64,
    pub cr_pfl: f64,
    pub cr_prl: f64,
    pub id_global: f64,
    pub id_pfl: f64,
    pub id_prl: f64,
    pub total: f64,
}

/// Hardest in-batch negatives for every anchor on one similarity matrix.
///
/// `sims[i][j]` is the similarity between image i and caption j. For anchor
/// i, the hardest negative text is the argmax over columns with a different
/// identity, and the hardest negative image the argmax over rows. Ties break
/// toward the lowest index.
pub fn mine_hard_negatives(
    sims: &[Vec<f64>],
    identities: &[u32],
) -> Result<Vec<(usize, usize)>> {
    let n = identities.len();
    assert!(sims.len() == n && sims.iter().all(|r| r.len() == n));
    let mut out = Vec::with_capacity(n);
    for anchor in 0..n {
        let mut best_text: Option<(usize, f64)> = None;
        let mut best_image: Option<(usize, f64)> = None;
        for j in 0..n {
            if identities[j] == identities[anchor] {
                continue;
            }
            let st = sims[anchor][j];
            if best_text.map_or(true, |(_, b)| st > b) {
                best_text = Some((j, st));
            }
            let si = sims[j][anchor];
            if best_image.map_or(true, |(_, b)| si > b) {
                best_image = Some((j, si));
            }
        }
        match (best_text, best_image) {
            (Some((t, _)), Some((i, _))) => out.push((t, i)),
            _ => {
                return Err(Error::data(
                    "no negatives available: mini-batch contains a single identity",
                ))
            }
        }
    }
    Ok(out)
}

/// One mini-batch's tape-side inputs for [`total_loss`].
pub struct BatchInputs<'a> {
    pub visual: &'a [crate::model::BundleVars],
    pub text: &'a [crate::model::BundleVars],
    /// Class label per sample.
    pub labels: &'a [usize],
    /// Raw identity per sample, for the hard-negative identity mask.
    pub identities: &'a [u32],
    /// Index of the weak-positive caption D'_p per anchor (a caption of a
    /// different image of the same identity; falls back to the anchor itself
    /// when the identity has a single image in batch).
    pub companions: &'a [usize],
}

fn values(tape: &Tape, var: Var) -> Vec<f64> {
    tape.value(var).iter().copied().collect()
}

fn stream_sim_matrix(
    tape: &Tape,
    visual: &[crate::model::BundleVars],
    text: &[crate::model::BundleVars],
    pick: impl Fn(&crate::model::BundleVars) -> Var,
) -> Result<Vec<Vec<f64>>> {
    let v_feats: Vec<Vec<f64>> = visual.iter().map(|b| values(tape, pick(b))).collect();
    let t_feats: Vec<Vec<f64>> = text.iter().map(|b| values(tape, pick(b))).collect();
    v_feats
        .iter()
        .map(|v| t_feats.iter().map(|t| crate::global_branch::cosine(v, t)).collect())
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn stream_loss(
    tape: &mut Tape,
    batch: &BatchInputs,
    pick: impl Fn(&crate::model::BundleVars) -> Var,
    id_features: impl Fn(&crate::model::BundleVars) -> Vec<Var>,
    classifiers: &[(Var, Var)],
    cfg: &LossConfig,
) -> Result<(Var, f64, f64)> {
    let n = batch.labels.len();
    let sims = stream_sim_matrix(tape, batch.visual, batch.text, &pick)?;
    let mined = mine_hard_negatives(&sims, batch.identities)?;
    let mut total: Option<Var> = None;
    let mut cr_sum = 0.0;
    let mut id_sum = 0.0;
    for anchor in 0..n {
        let (neg_text_idx, neg_image_idx) = mined[anchor];
        let comp = batch.companions[anchor];
        let v_a = pick(&batch.visual[anchor]);
        let t_a = pick(&batch.text[anchor]);
        let t_neg = pick(&batch.text[neg_text_idx]);
        let v_neg = pick(&batch.visual[neg_image_idx]);
        let t_comp = pick(&batch.text[comp]);
        let scores = PairScores {
            pos: tape.cosine(v_a, t_a)?,
            neg_text: tape.cosine(v_a, t_neg)?,
            neg_image: tape.cosine(v_neg, t_a)?,
            weak_pos: tape.cosine(v_a, t_comp)?,
            weak_neg_image: tape.cosine(v_neg, t_comp)?,
        };
        let cr = compound_ranking_loss(tape, &scores, cfg);
        cr_sum += tape.scalar(cr);
        total = Some(match total {
            Some(acc) => tape.add(acc, cr),
            None => cr,
        });
        for bundle in [&batch.visual[anchor], &batch.text[anchor]] {
            for (feat, &(w, b)) in id_features(bundle).into_iter().zip(classifiers) {
                let l = id_loss(tape, w, b, feat, batch.labels[anchor])?;
                id_sum += tape.scalar(l);
                total = Some(match total {
                    Some(acc) => tape.add(acc, l),
                    None => l,
                });
            }
        }
    }
    Ok((total.expect("non-empty batch"), cr_sum, id_sum))
}

/// Weighted composition over the three feature streams. The CR loss acts on
/// each stream's (concatenated) similarity; the ID loss acts per part for the
/// part streams and on the global feature for the global stream. Reduction is
/// the mean over anchors.
pub fn total_loss(
    tape: &mut Tape,
    batch: &BatchInputs,
    vars: &crate::model::ModelVars,
    cfg: &LossConfig,
    step: usize,
) -> Result<(Var, LossBreakdown)> {
    let n = batch.labels.len() as f64;
    let (w_global, w_pfl, w_prl) = cfg.stream_weights;
    let mut breakdown = LossBreakdown {
        step,
        ..Default::default()
    };
    let mut total: Option<Var> = None;
    let add_stream = |tape: &mut Tape, total: &mut Option<Var>, term: Var, weight: f64| {
        let scaled = tape.scale(term, weight / n);
        *total = Some(match *total {
            Some(acc) => tape.add(acc, scaled),
            None => scaled,
        });
    };
    if w_global > 0.0 {
        let (term, cr, id) = stream_loss(
            tape,
            batch,
            |b| b.global,
            |b| vec![b.global],
            std::slice::from_ref(&vars.id_global),
            cfg,
        )?;
        breakdown.cr_global = w_global * cr / n;
        breakdown.id_global = w_global * id / n;
        add_stream(tape, &mut total, term, w_global);
    }
    if w_pfl > 0.0 {
        let (term, cr, id) = stream_loss(
            tape,
            batch,
            |b| b.parts_concat,
            |b| b.parts.clone(),
            &vars.id_pfl,
            cfg,
        )?;
        breakdown.cr_pfl = w_pfl * cr / n;
        breakdown.id_pfl = w_pfl * id / n;
        add_stream(tape, &mut total, term, w_pfl);
    }
    if w_prl > 0.0 {
        let (term, cr, id) = stream_loss(
            tape,
            batch,
            |b| b.relations_concat,
            |b| b.relations.clone(),
            &vars.id_prl,
            cfg,
        )?;
        breakdown.cr_prl = w_prl * cr / n;
        breakdown.id_prl = w_prl * id / n;
        add_stream(tape, &mut total, term, w_prl);
    }
    let total = total.unwrap_or_else(|| tape.constant(0.0));
    breakdown.total = tape.scalar(total);
    Ok((total, breakdown))
}
