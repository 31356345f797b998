//! Backbone encoders: the visual feature map F and the textual word bank E.
//!
//! The visual encoder is a pluggable contract (output channels + total
//! stride); the text encoder is a bidirectional LSTM whose per-word output is
//! the mean of the forward and backward hidden states.

use ndarray::{Array2, Array3, IxDyn};

use crate::autodiff::{Tape, Var};
use crate::config::VisualEncoderConfig;
use crate::data::{TokenizedCaption, PAD_ID};
use crate::error::{Error, Result};

/// Parameter handles for one conv layer.
#[derive(Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Parameter handles for one LSTM direction.
#[derive(Clone, Copy)]
pub struct LstmVars {
    /// `(4H, V)` input weights, gate order `[i, f, g, o]`.
    pub w_ih: Var,
    /// `(4H, H)` recurrent weights.
    pub w_hh: Var,
    /// `(4H, 1)` bias.
    pub bias: Var,
}

/// Parameter handles for the full text encoder.
#[derive(Clone)]
pub struct TextEncoderVars {
    /// `(V, U + 2)` word embedding table; columns are token ids.
    pub embed: Var,
    pub forward: LstmVars,
    pub backward: LstmVars,
}

/// Run the conv stack on a `(3, h0, w0)` image, producing F as `(C, H, W)`.
pub fn encode_image(
    tape: &mut Tape,
    layers: &[ConvVars],
    cfg: &VisualEncoderConfig,
    image: &Array3<f64>,
) -> Result<Var> {
    let (c, h, w) = image.dim();
    if c != 3 || (h, w) != cfg.input_size {
        return Err(Error::Shape {
            expected: format!("3x{}x{}", cfg.input_size.0, cfg.input_size.1),
            actual: format!("{c}x{h}x{w}"),
        });
    }
    let mut x = tape.leaf(image.clone().into_dyn());
    for layer in layers {
        let conv = tape.conv2d(
            x,
            layer.weight,
            layer.bias,
            (layer.kernel, layer.kernel),
            layer.stride,
            layer.pad,
        );
        x = tape.relu(conv);
    }
    Ok(x)
}

/// Uniformly partition F into K non-overlapping row bands.
/// H must be divisible by K; config validation guarantees this before any
/// forward pass runs.
pub fn partition(tape: &mut Tape, feature_map: Var, k: usize) -> Vec<Var> {
    let h = tape.value(feature_map).shape()[1];
    debug_assert_eq!(h % k, 0, "partition requires H divisible by K");
    let band = h / k;
    (0..k)
        .map(|i| tape.slice_band(feature_map, i * band, (i + 1) * band))
        .collect()
}

/// Look up word embeddings for a caption. Padding ids map to the zero vector
/// and receive no gradient.
pub fn embed_words(tape: &mut Tape, table: Var, caption: &TokenizedCaption) -> Result<Vec<Var>> {
    let shape = tape.value(table).shape().to_vec();
    let (dim, cols) = (shape[0], shape[1]);
    caption
        .ids
        .iter()
        .map(|&id| {
            if id >= cols {
                return Err(Error::data(format!(
                    "token id {id} out of range for embedding table with {cols} columns"
                )));
            }
            if id == PAD_ID {
                Ok(tape.leaf(ndarray::ArrayD::zeros(IxDyn(&[dim, 1]))))
            } else {
                Ok(tape.select_col(table, id))
            }
        })
        .collect()
}

fn lstm_step(tape: &mut Tape, p: LstmVars, x: Var, h_prev: Var, c_prev: Var, hidden: usize) -> (Var, Var) {
    let ih = tape.matmul(p.w_ih, x);
    let hh = tape.matmul(p.w_hh, h_prev);
    let pre = tape.add(ih, hh);
    let gates = tape.add(pre, p.bias);
    let i_g = tape.slice_rows(gates, 0, hidden);
    let i_g = tape.sigmoid(i_g);
    let f_g = tape.slice_rows(gates, hidden, 2 * hidden);
    let f_g = tape.sigmoid(f_g);
    let g_g = tape.slice_rows(gates, 2 * hidden, 3 * hidden);
    let g_g = tape.tanh(g_g);
    let o_g = tape.slice_rows(gates, 3 * hidden, 4 * hidden);
    let o_g = tape.sigmoid(o_g);
    let fc = tape.mul(f_g, c_prev);
    let ig = tape.mul(i_g, g_g);
    let c = tape.add(fc, ig);
    let tc = tape.tanh(c);
    let h = tape.mul(o_g, tc);
    (h, c)
}

/// Bidirectional recurrence over the valid words, averaging the two hidden
/// states per position: e_i = (h_fwd_i + h_bwd_i) / 2. Returns E as `(C, n)`.
pub fn encode_text(tape: &mut Tape, vars: &TextEncoderVars, xs: &[Var], hidden: usize) -> Var {
    assert!(!xs.is_empty(), "encode_text requires n >= 1");
    let n = xs.len();
    let zero = tape.leaf(Array2::<f64>::zeros((hidden, 1)).into_dyn());
    let mut fwd = Vec::with_capacity(n);
    let (mut h, mut c) = (zero, zero);
    for &x in xs {
        let (nh, nc) = lstm_step(tape, vars.forward, x, h, c, hidden);
        fwd.push(nh);
        h = nh;
        c = nc;
    }
    let mut bwd = vec![zero; n];
    let (mut h, mut c) = (zero, zero);
    for (i, &x) in xs.iter().enumerate().rev() {
        let (nh, nc) = lstm_step(tape, vars.backward, x, h, c, hidden);
        bwd[i] = nh;
        h = nh;
        c = nc;
    }
    let cols: Vec<Var> = fwd
        .into_iter()
        .zip(bwd)
        .map(|(f, b)| {
            let s = tape.add(f, b);
            tape.scale(s, 0.5)
        })
        .collect();
    tape.concat_cols(&cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TokenizedCaption;
    use ndarray::{array, Array2, ArrayD};

    fn caption(ids: &[usize]) -> TokenizedCaption {
        TokenizedCaption {
            ids: ids.to_vec(),
            tokens: ids.iter().map(|i| format!("w{i}")).collect(),
        }
    }

    fn zero_lstm(tape: &mut Tape, hidden: usize, input: usize) -> LstmVars {
        LstmVars {
            w_ih: tape.leaf(ArrayD::zeros(ndarray::IxDyn(&[4 * hidden, input]))),
            w_hh: tape.leaf(ArrayD::zeros(ndarray::IxDyn(&[4 * hidden, hidden]))),
            bias: tape.leaf(ArrayD::zeros(ndarray::IxDyn(&[4 * hidden, 1]))),
        }
    }

    #[test]
    fn stride_arithmetic() {
        // output spatial size is input / stride; checked against the configs
        let cfg = VisualEncoderConfig::resnet50_like();
        assert_eq!(cfg.feature_size(), (12, 4));
        let tiny = VisualEncoderConfig::tiny_cnn();
        assert_eq!(tiny.feature_size(), (12, 4));
    }

    #[test]
    fn tiny_cnn_output_shape_and_input_check() {
        let mut cfg = VisualEncoderConfig::tiny_cnn();
        cfg.input_size = (96, 32);
        let mut tape = Tape::new();
        let mut layers = Vec::new();
        let mut c_in = 3usize;
        for (c_out, k, s, p) in cfg.blocks() {
            layers.push(ConvVars {
                weight: tape.leaf(ArrayD::zeros(ndarray::IxDyn(&[c_out, c_in * k * k]))),
                bias: tape.leaf(ArrayD::zeros(ndarray::IxDyn(&[c_out, 1]))),
                kernel: k,
                stride: s,
                pad: p,
            });
            c_in = c_out;
        }
        let img = Array3::<f64>::zeros((3, 96, 32));
        let f = encode_image(&mut tape, &layers, &cfg, &img).unwrap();
        assert_eq!(tape.value(f).shape(), &[32, 6, 2]);

        let wrong = Array3::<f64>::zeros((3, 64, 32));
        assert!(matches!(
            encode_image(&mut tape, &layers, &cfg, &wrong),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_image_through_zero_bias_net_gives_equal_channel_maps() {
        let mut cfg = VisualEncoderConfig::tiny_cnn();
        cfg.input_size = (96, 32);
        let mut tape = Tape::new();
        let mut rng_val = 0.01f64;
        let mut layers = Vec::new();
        let mut c_in = 3usize;
        for (c_out, k, s, p) in cfg.blocks() {
            rng_val += 0.01;
            layers.push(ConvVars {
                weight: tape.leaf(ArrayD::from_elem(ndarray::IxDyn(&[c_out, c_in * k * k]), rng_val)),
                bias: tape.leaf(ArrayD::zeros(ndarray::IxDyn(&[c_out, 1]))),
                kernel: k,
                stride: s,
                pad: p,
            });
            c_in = c_out;
        }
        let img = Array3::<f64>::zeros((3, 96, 32));
        let f = encode_image(&mut tape, &layers, &cfg, &img).unwrap();
        assert!(tape.value(f).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn partition_identity() {
        let mut tape = Tape::new();
        let f_val = Array3::from_shape_vec((2, 6, 2), (0..24).map(|x| x as f64).collect()).unwrap();
        let f = tape.leaf(f_val.clone().into_dyn());
        let parts = partition(&mut tape, f, 3);
        assert_eq!(parts.len(), 3);
        for p in &parts {
            assert_eq!(tape.value(*p).shape(), &[2, 2, 2]);
        }
        // row-concatenation of the bands reproduces F bit-exactly
        let views: Vec<_> = parts
            .iter()
            .map(|p| tape.value(*p).view().into_dimensionality::<ndarray::Ix3>().unwrap())
            .collect();
        let rebuilt = ndarray::concatenate(ndarray::Axis(1), &views).unwrap();
        assert_eq!(rebuilt, f_val);
    }

    #[test]
    fn embedding_lookup_and_padding() {
        let mut tape = Tape::new();
        // identity-like table: column j is e_j
        let table = tape.leaf(Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 1.0 } else { 0.0 }).into_dyn());
        let xs = embed_words(&mut tape, table, &caption(&[2, PAD_ID, 3])).unwrap();
        assert_eq!(tape.value(xs[0]).as_slice().unwrap(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(tape.value(xs[1]).iter().all(|&x| x == 0.0));
        assert_eq!(tape.value(xs[2]).as_slice().unwrap(), &[0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            embed_words(&mut tape, table, &caption(&[9])),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn single_word_caption_averages_both_directions() {
        let hidden = 3;
        let mut tape = Tape::new();
        let fwd = zero_lstm(&mut tape, hidden, 2);
        let bwd = zero_lstm(&mut tape, hidden, 2);
        let vars = TextEncoderVars {
            embed: tape.leaf(ArrayD::zeros(ndarray::IxDyn(&[2, 4]))),
            forward: fwd,
            backward: bwd,
        };
        let x = tape.leaf(array![[1.0], [2.0]].into_dyn());
        let e = encode_text(&mut tape, &vars, &[x], hidden);
        assert_eq!(tape.value(e).shape(), &[3, 1]);
        // zero parameters: i = f = o = 0.5, g = 0, so c = 0 and h = 0
        assert!(tape.value(e).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_match_scalar_cell_oracle() {
        // One cell, bias-only gating: with b_i = b_f = b_o = 1 and b_g = 0.5
        // on zero input, each step is exactly computable by hand.
        let hidden = 1;
        let mut tape = Tape::new();
        let mut bias = Array2::<f64>::zeros((4, 1));
        bias[[0, 0]] = 1.0;
        bias[[1, 0]] = 1.0;
        bias[[2, 0]] = 0.5;
        bias[[3, 0]] = 1.0;
        let mk = |tape: &mut Tape| LstmVars {
            w_ih: tape.leaf(ArrayD::zeros(ndarray::IxDyn(&[4, 1]))),
            w_hh: tape.leaf(ArrayD::zeros(ndarray::IxDyn(&[4, 1]))),
            bias: tape.leaf(bias.clone().into_dyn()),
        };
        let fwd = mk(&mut tape);
        let bwd = mk(&mut tape);
        let vars = TextEncoderVars {
            embed: tape.leaf(ArrayD::zeros(ndarray::IxDyn(&[1, 4]))),
            forward: fwd,
            backward: bwd,
        };
        let xs: Vec<Var> = (0..3)
            .map(|_| tape.leaf(Array2::<f64>::zeros((1, 1)).into_dyn()))
            .collect();
        let e = encode_text(&mut tape, &vars, &xs, hidden);

        // scalar oracle for the same recurrence
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let step = |c_prev: f64| -> (f64, f64) {
            let i = sig(1.0);
            let f = sig(1.0);
            let g = (0.5f64).tanh();
            let o = sig(1.0);
            let c = f * c_prev + i * g;
            (o * c.tanh(), c)
        };
        let mut hs = Vec::new();
        let mut c = 0.0;
        for _ in 0..3 {
            let (h, nc) = step(c);
            hs.push(h);
            c = nc;
        }
        // forward h at t equals hs[t]; backward h at t equals hs[n-1-t]
        for t in 0..3 {
            let expected = (hs[t] + hs[2 - t]) / 2.0;
            assert!((tape.value(e)[[0, t]] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn reversed_caption_with_swapped_directions_reverses_columns() {
        let hidden = 2;
        let mut rng_state = 1u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let mut tape = Tape::new();
        let rand_arr = |tape: &mut Tape, next: &mut dyn FnMut() -> f64, shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| next() * 0.5).collect();
            tape.leaf(ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).unwrap())
        };
        let fwd = LstmVars {
            w_ih: rand_arr(&mut tape, &mut next, &[8, 2]),
            w_hh: rand_arr(&mut tape, &mut next, &[8, 2]),
            bias: rand_arr(&mut tape, &mut next, &[8, 1]),
        };
        let bwd = LstmVars {
            w_ih: rand_arr(&mut tape, &mut next, &[8, 2]),
            w_hh: rand_arr(&mut tape, &mut next, &[8, 2]),
            bias: rand_arr(&mut tape, &mut next, &[8, 1]),
        };
        let xs: Vec<Var> = (0..4).map(|_| rand_arr(&mut tape, &mut next, &[2, 1])).collect();

        let embed = tape.leaf(ArrayD::zeros(ndarray::IxDyn(&[2, 4])));
        let vars = TextEncoderVars { embed, forward: fwd, backward: bwd };
        let e = encode_text(&mut tape, &vars, &xs, hidden);

        let mut xs_rev = xs.clone();
        xs_rev.reverse();
        let vars_swapped = TextEncoderVars { embed, forward: bwd, backward: fwd };
        let e_rev = encode_text(&mut tape, &vars_swapped, &xs_rev, hidden);

        let ev = tape.value(e).view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        let rv = tape.value(e_rev).view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        for t in 0..4 {
            for r in 0..hidden {
                assert!((ev[[r, t]] - rv[[r, 3 - t]]).abs() < 1e-12);
            }
        }
    }
}
