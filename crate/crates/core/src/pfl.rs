//! Part-specific Feature Learning: the Word Attention Module and the shared
//! per-part projections that align part-level visual and textual features.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::global_branch::linear;

/// Word-part membership scores: s[k][i] = sigmoid(W_p^k e_i + b_k), as a
/// `(K, n)` matrix. Scores are independent across parts; a word may belong to
/// several parts, so rows are not normalized.
pub fn word_attention(tape: &mut Tape, wam_weight: Var, wam_bias: Var, word_bank: Var) -> Var {
    let logits = tape.matmul(wam_weight, word_bank);
    let logits = tape.add_col_bias(logits, wam_bias);
    tape.sigmoid(logits)
}

/// Part-k view of the word bank: column i scaled by s_i^k.
pub fn weight_text(tape: &mut Tape, word_bank: Var, scores: Var, k: usize) -> Var {
    let row = tape.slice_rows(scores, k, k + 1);
    tape.mul_row_broadcast(word_bank, row)
}

/// Pool then project one part, with the same W_l^k serving both modalities.
/// Visual side: GMP over the part slice. Text side: RMP over the weighted
/// bank's valid columns.
pub fn part_feature_visual(tape: &mut Tape, proj_w: Var, proj_b: Var, part_slice: Var) -> Var {
    let pooled = tape.spatial_max(part_slice);
    linear(tape, proj_w, Some(proj_b), pooled)
}

pub fn part_feature_text(
    tape: &mut Tape,
    proj_w: Var,
    proj_b: Var,
    weighted_bank: Var,
    valid_len: usize,
) -> Result<Var> {
    let pooled = tape.masked_row_max(weighted_bank, valid_len)?;
    Ok(linear(tape, proj_w, Some(proj_b), pooled))
}

/// Cosine of the two K-part concatenations (S_l). Part order is fixed top to
/// bottom and identical for both modalities.
pub fn part_similarity(tape: &mut Tape, visual_parts: &[Var], text_parts: &[Var]) -> Result<Var> {
    let v = tape.concat_rows(visual_parts);
    let t = tape.concat_rows(text_parts);
    tape.cosine(v, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::global_branch::cosine;
    use ndarray::{array, Array2};

    #[test]
    fn zero_wam_parameters_score_half() {
        let mut tape = Tape::new();
        let w = tape.leaf(Array2::<f64>::zeros((3, 4)).into_dyn());
        let b = tape.leaf(Array2::<f64>::zeros((3, 1)).into_dyn());
        let e = tape.leaf(Array2::from_elem((4, 5), 0.7).into_dyn());
        let s = word_attention(&mut tape, w, b, e);
        assert!(tape.value(s).iter().all(|&x| x == 0.5));
    }

    #[test]
    fn wam_scores_strictly_inside_unit_interval() {
        let mut tape = Tape::new();
        let w = tape.leaf(Array2::from_shape_fn((2, 3), |(i, j)| (i + j) as f64 * 3.0 - 2.0).into_dyn());
        let b = tape.leaf(array![[10.0], [-10.0]].into_dyn());
        let e = tape.leaf(Array2::from_shape_fn((3, 4), |(i, j)| i as f64 - j as f64).into_dyn());
        let s = word_attention(&mut tape, w, b, e);
        assert!(tape.value(s).iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn weight_text_identity_and_uniform_scaling() {
        let mut tape = Tape::new();
        let e_val = array![[1.0, 2.0], [3.0, 4.0]];
        let e = tape.leaf(e_val.clone().into_dyn());
        let ones = tape.leaf(Array2::from_elem((1, 2), 1.0).into_dyn());
        let halves = tape.leaf(Array2::from_elem((1, 2), 0.5).into_dyn());
        let scores_one = tape.concat_rows(&[ones]);
        let scores_half = tape.concat_rows(&[halves]);
        let ek1 = weight_text(&mut tape, e, scores_one, 0);
        assert_eq!(
            tape.value(ek1).view().into_dimensionality::<ndarray::Ix2>().unwrap(),
            e_val
        );
        let ek2 = weight_text(&mut tape, e, scores_half, 0);
        assert_eq!(
            tape.value(ek2).view().into_dimensionality::<ndarray::Ix2>().unwrap(),
            e_val.mapv(|x| x / 2.0)
        );
    }

    #[test]
    fn weight_text_matches_per_column_loop_oracle() {
        let mut tape = Tape::new();
        let e_val = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.3 - 1.0);
        let s_val = Array2::from_shape_fn((2, 4), |(k, j)| 0.1 + 0.2 * (k + j) as f64);
        let e = tape.leaf(e_val.clone().into_dyn());
        let s = tape.leaf(s_val.clone().into_dyn());
        let ek = weight_text(&mut tape, e, s, 1);
        for i in 0..3 {
            for j in 0..4 {
                assert!((tape.value(ek)[[i, j]] - e_val[[i, j]] * s_val[[1, j]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_column_text_feature_composition() {
        // identity projection, single word: t_l^k = s_1^k * e_1
        let mut tape = Tape::new();
        let e = tape.leaf(array![[2.0], [-1.0]].into_dyn());
        let s = tape.leaf(array![[0.25]].into_dyn());
        let ek = weight_text(&mut tape, e, s, 0);
        let w = tape.leaf(array![[1.0, 0.0], [0.0, 1.0]].into_dyn());
        let b = tape.leaf(Array2::<f64>::zeros((2, 1)).into_dyn());
        let t = part_feature_text(&mut tape, w, b, ek, 1).unwrap();
        assert_eq!(tape.value(t).as_slice().unwrap(), &[0.5, -0.25]);
    }

    #[test]
    fn rmp_over_scaled_columns_matches_loop_oracle() {
        let mut tape = Tape::new();
        let e_val = Array2::from_shape_fn((3, 5), |(i, j)| ((i * 5 + j) % 7) as f64 - 3.0);
        let s_val = Array2::from_shape_fn((1, 5), |(_, j)| 0.1 + 0.15 * j as f64);
        let e = tape.leaf(e_val.clone().into_dyn());
        let s = tape.leaf(s_val.clone().into_dyn());
        let ek = weight_text(&mut tape, e, s, 0);
        let valid = 4usize; // last column is padding
        let pooled = tape.masked_row_max(ek, valid).unwrap();
        for i in 0..3 {
            let mut best = f64::NEG_INFINITY;
            for j in 0..valid {
                best = best.max(e_val[[i, j]] * s_val[[0, j]]);
            }
            assert_eq!(tape.value(pooled)[[i, 0]], best);
        }
    }

    #[test]
    fn part_similarity_reduces_to_cosine_of_flattened_vectors() {
        let mut tape = Tape::new();
        let v1 = tape.leaf(array![[1.0], [2.0]].into_dyn());
        let v2 = tape.leaf(array![[0.5], [-1.0]].into_dyn());
        let t1 = tape.leaf(array![[1.5], [0.0]].into_dyn());
        let t2 = tape.leaf(array![[2.0], [1.0]].into_dyn());
        let s = part_similarity(&mut tape, &[v1, v2], &[t1, t2]).unwrap();
        let oracle = cosine(&[1.0, 2.0, 0.5, -1.0], &[1.5, 0.0, 2.0, 1.0]).unwrap();
        assert!((tape.scalar(s) - oracle).abs() < 1e-12);
    }

    #[test]
    fn part_similarity_k1_is_plain_cosine() {
        let mut tape = Tape::new();
        let v = tape.leaf(array![[1.0], [2.0]].into_dyn());
        let t = tape.leaf(array![[2.0], [1.0]].into_dyn());
        let s = part_similarity(&mut tape, &[v], &[t]).unwrap();
        let oracle = cosine(&[1.0, 2.0], &[2.0, 1.0]).unwrap();
        assert!((tape.scalar(s) - oracle).abs() < 1e-12);
    }

    #[test]
    fn identical_part_bundles_have_unit_similarity() {
        let mut tape = Tape::new();
        let v1 = tape.leaf(array![[1.0], [2.0]].into_dyn());
        let v2 = tape.leaf(array![[-0.5], [0.25]].into_dyn());
        let s = part_similarity(&mut tape, &[v1, v2], &[v1, v2]).unwrap();
        assert!((tape.scalar(s) - 1.0).abs() < 1e-12);
    }
}
