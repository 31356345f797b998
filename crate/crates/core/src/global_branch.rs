//! Global branch: max pooling on both modalities, the shared projection W_g,
//! and the global cosine similarity S_g.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Global max pooling over all spatial positions of F, per channel.
pub fn pool_visual_global(tape: &mut Tape, feature_map: Var) -> Var {
    tape.spatial_max(feature_map)
}

/// Row-wise max pooling over the valid columns of E. Masked (padded) columns
/// never participate.
pub fn pool_text_global(tape: &mut Tape, word_bank: Var, valid_len: usize) -> Result<Var> {
    tape.masked_row_max(word_bank, valid_len)
}

/// Linear map `w @ x (+ b)`. The 1x1 conv of the original formulation acts on
/// a pooled vector, so it reduces to exactly this.
pub fn linear(tape: &mut Tape, weight: Var, bias: Option<Var>, x: Var) -> Var {
    let y = tape.matmul(weight, x);
    match bias {
        Some(b) => tape.add(y, b),
        None => y,
    }
}

/// Project a pooled feature through the shared W_g.
pub fn project_global(tape: &mut Tape, weight: Var, bias: Var, pooled: Var) -> Var {
    linear(tape, weight, Some(bias), pooled)
}

/// Plain cosine similarity on raw vectors, used outside the training tape
/// (retrieval scoring, mining). Errors on zero-norm inputs.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    assert_eq!(a.len(), b.len(), "cosine requires equal dimensions");
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateFeature);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2, Array3};

    #[test]
    fn gmp_of_constant_map() {
        let mut tape = Tape::new();
        let f = tape.leaf(Array3::from_elem((4, 3, 2), 1.5).into_dyn());
        let g = pool_visual_global(&mut tape, f);
        assert!(tape.value(g).iter().all(|&x| x == 1.5));
    }

    #[test]
    fn gmp_matches_triple_loop_oracle() {
        let mut tape = Tape::new();
        let f_val = Array3::from_shape_fn((3, 4, 2), |(c, h, w)| {
            ((c * 17 + h * 5 + w * 3) % 11) as f64 - 5.0
        });
        let f = tape.leaf(f_val.clone().into_dyn());
        let g = pool_visual_global(&mut tape, f);
        for c in 0..3 {
            let mut best = f64::NEG_INFINITY;
            for h in 0..4 {
                for w in 0..2 {
                    best = best.max(f_val[[c, h, w]]);
                }
            }
            assert_eq!(tape.value(g)[[c, 0]], best);
        }
    }

    #[test]
    fn rmp_single_column_returns_it() {
        let mut tape = Tape::new();
        let e = tape.leaf(array![[1.0], [-2.0], [0.5]].into_dyn());
        let p = pool_text_global(&mut tape, e, 1).unwrap();
        assert_eq!(tape.value(p).as_slice().unwrap(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn rmp_ignores_appended_padding() {
        let mut tape = Tape::new();
        let e = tape.leaf(array![[1.0, 2.0], [3.0, 1.0]].into_dyn());
        let p2 = pool_text_global(&mut tape, e, 2).unwrap();
        let padded = tape.leaf(array![[1.0, 2.0, 99.0], [3.0, 1.0, 99.0]].into_dyn());
        let p3 = pool_text_global(&mut tape, padded, 2).unwrap();
        assert_eq!(tape.value(p2), tape.value(p3));
    }

    #[test]
    fn rmp_errors_when_all_columns_masked() {
        let mut tape = Tape::new();
        let e = tape.leaf(array![[1.0, 2.0]].into_dyn());
        assert!(pool_text_global(&mut tape, e, 0).is_err());
    }

    #[test]
    fn identity_projection_is_noop() {
        let mut tape = Tape::new();
        let w = tape.leaf(Array2::from_shape_fn((3, 3), |(i, j)| if i == j { 1.0 } else { 0.0 }).into_dyn());
        let b = tape.leaf(Array2::<f64>::zeros((3, 1)).into_dyn());
        let x = tape.leaf(array![[0.3], [-1.2], [2.0]].into_dyn());
        let y = project_global(&mut tape, w, b, x);
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn shared_projection_moves_both_modalities_together() {
        // one W_g object serves both paths: perturbing it changes both outputs
        // by the same linear response
        let mut tape = Tape::new();
        let x_vis = tape.leaf(array![[1.0], [2.0]].into_dyn());
        let x_txt = tape.leaf(array![[1.0], [2.0]].into_dyn());
        let w = tape.leaf(array![[0.5, 0.5], [1.0, -1.0]].into_dyn());
        let b = tape.leaf(Array2::<f64>::zeros((2, 1)).into_dyn());
        let v = project_global(&mut tape, w, b, x_vis);
        let t = project_global(&mut tape, w, b, x_txt);
        assert_eq!(tape.value(v), tape.value(t));

        let w2 = tape.leaf(array![[0.6, 0.5], [1.0, -1.0]].into_dyn());
        let v2 = project_global(&mut tape, w2, b, x_vis);
        let t2 = project_global(&mut tape, w2, b, x_txt);
        assert_eq!(tape.value(v2), tape.value(t2));
        assert_ne!(tape.value(v), tape.value(v2));
    }

    #[test]
    fn cosine_basics() {
        let x = [0.3, -1.0, 2.0];
        assert!((cosine(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((cosine(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        let c = cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!(matches!(cosine(&[0.0, 0.0], &x[..2]), Err(Error::DegenerateFeature)));
    }
}
