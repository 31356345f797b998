//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every tensor lives on a [`Tape`] as an eagerly evaluated node; [`Var`] is a
//! cheap index into it. Shapes follow a small set of conventions:
//! scalars are `(1, 1)`, vectors are `(d, 1)`, matrices are `(rows, cols)`,
//! and image feature maps are 3-d `(channels, height, width)`.
//!
//! A forward pass builds the graph, [`Tape::backward`] walks it once in
//! reverse and accumulates gradients for every reachable node.

use ndarray::{Array2, ArrayD, Axis, Ix2, Ix3, IxDyn};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    /// `(r, c) + (r, 1)` broadcast over columns.
    AddColBias(Var, Var),
    /// `(r, c) * (1, c)` broadcast over rows.
    MulRowBroadcast(Var, Var),
    /// `(d, 1) * (1, 1)` scalar broadcast.
    MulScalar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    /// Sum of all elements, producing a `(1, 1)` scalar.
    Sum(Var),
    /// Rows `[start, end)` of a 2-d array.
    SliceRows {
        input: Var,
        start: usize,
    },
    /// Height band `[start, end)` of a `(c, h, w)` array.
    SliceBand {
        input: Var,
        start: usize,
    },
    /// Column `col` of a 2-d array, producing `(r, 1)`.
    SelectCol {
        input: Var,
        col: usize,
    },
    /// Vertical concatenation of 2-d arrays.
    ConcatRows(Vec<Var>),
    /// Horizontal concatenation of 2-d arrays.
    ConcatCols(Vec<Var>),
    /// Max over all spatial positions of a `(c, h, w)` array, per channel.
    SpatialMax {
        input: Var,
        argmax: Vec<usize>,
    },
    /// Per-row max over the first `valid` columns of a `(r, n)` array.
    MaskedRowMax {
        input: Var,
        argmax: Vec<usize>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        kernel: (usize, usize),
        cols: Array2<f64>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// The recording tape. Cleared and rebuilt for every forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the objective with respect to `v`, zero if unreached.
    pub fn get(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        match &self.grads[v.0] {
            Some(g) => g.as_standard_layout().to_owned(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }

    pub fn get_opt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }
}

fn scalar_array(x: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[1, 1]), x)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `(1, 1)` scalar node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, x: f64) -> Var {
        self.push(scalar_array(x), Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddConst(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be 2-d");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be 2-d");
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::MatMul(a, b))
    }

    /// `(r, c) + (r, 1)`, broadcasting the bias over columns.
    pub fn add_col_bias(&mut self, m: Var, bias: Var) -> Var {
        let mv = self.nodes[m.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[bias.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = mv.to_owned();
        for mut col in out.columns_mut() {
            for (o, b) in col.iter_mut().zip(bv.column(0).iter()) {
                *o += *b;
            }
        }
        self.push(out.into_dyn(), Op::AddColBias(m, bias))
    }

    /// `(r, c) * (1, c)`, scaling each column by the matching row entry.
    pub fn mul_row_broadcast(&mut self, m: Var, row: Var) -> Var {
        let mv = self.nodes[m.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let rv = self.nodes[row.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = mv.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let s = rv[[0, j]];
            col.mapv_inplace(|x| x * s);
        }
        self.push(out.into_dyn(), Op::MulRowBroadcast(m, row))
    }

    /// `(d, 1) * (1, 1)`: scale a vector by a scalar node.
    pub fn mul_scalar(&mut self, vec: Var, s: Var) -> Var {
        let sv = self.nodes[s.0].value[[0, 0]];
        let v = self.nodes[vec.0].value.mapv(|x| x * sv);
        self.push(v, Op::MulScalar(vec, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(scalar_array(s), Op::Sum(a))
    }

    /// Rows `[start, end)` of a 2-d node.
    pub fn slice_rows(&mut self, input: Var, start: usize, end: usize) -> Var {
        let iv = self.nodes[input.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let v = iv.slice(ndarray::s![start..end, ..]).to_owned().into_dyn();
        self.push(v, Op::SliceRows { input, start })
    }

    /// Height band `[start, end)` of a `(c, h, w)` node.
    pub fn slice_band(&mut self, input: Var, start: usize, end: usize) -> Var {
        let iv = self.nodes[input.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let v = iv.slice(ndarray::s![.., start..end, ..]).to_owned().into_dyn();
        self.push(v, Op::SliceBand { input, start })
    }

    /// Column `col` of a 2-d node, as `(r, 1)`.
    pub fn select_col(&mut self, input: Var, col: usize) -> Var {
        let iv = self.nodes[input.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let v = iv
            .column(col)
            .to_owned()
            .insert_axis(Axis(1))
            .into_dyn();
        self.push(v, Op::SelectCol { input, col })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts
            .iter()
            .map(|p| self.nodes[p.0].value.view().into_dimensionality::<Ix2>().unwrap())
            .collect();
        let v = ndarray::concatenate(Axis(0), &views).unwrap().into_dyn();
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts
            .iter()
            .map(|p| self.nodes[p.0].value.view().into_dimensionality::<Ix2>().unwrap())
            .collect();
        let v = ndarray::concatenate(Axis(1), &views).unwrap().into_dyn();
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Global max pooling over `(c, h, w)` spatial positions, as `(c, 1)`.
    /// Ties resolve to the lowest flat index.
    pub fn spatial_max(&mut self, input: Var) -> Var {
        let iv = self.nodes[input.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = iv.dim();
        let mut out = Array2::<f64>::zeros((c, 1));
        let mut argmax = vec![0usize; c];
        for ch in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = 0usize;
            for y in 0..h {
                for x in 0..w {
                    let val = iv[[ch, y, x]];
                    if val > best {
                        best = val;
                        best_idx = y * w + x;
                    }
                }
            }
            out[[ch, 0]] = best;
            argmax[ch] = best_idx;
        }
        self.push(out.into_dyn(), Op::SpatialMax { input, argmax })
    }

    /// Row-wise max over the first `valid` columns of a `(r, n)` node.
    /// Ties resolve to the lowest column index.
    pub fn masked_row_max(&mut self, input: Var, valid: usize) -> Result<Var> {
        let iv = self.nodes[input.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let (r, n) = iv.dim();
        if valid == 0 || valid > n {
            return Err(Error::data(format!(
                "masked row max: valid column count {valid} out of range for {n} columns"
            )));
        }
        let mut out = Array2::<f64>::zeros((r, 1));
        let mut argmax = vec![0usize; r];
        for row in 0..r {
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = 0usize;
            for col in 0..valid {
                let val = iv[[row, col]];
                if val > best {
                    best = val;
                    best_idx = col;
                }
            }
            out[[row, 0]] = best;
            argmax[row] = best_idx;
        }
        Ok(self.push(out.into_dyn(), Op::MaskedRowMax { input, argmax }))
    }

    /// 2-d convolution via im2col. `input` is `(c_in, h, w)`, `weight` is
    /// `(c_out, c_in * kh * kw)`, `bias` is `(c_out, 1)`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        kernel: (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Var {
        let iv = self.nodes[input.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let wv = self.nodes[weight.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[bias.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let (c_in, h, w) = iv.dim();
        let (kh, kw) = kernel;
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (w + 2 * pad - kw) / stride + 1;
        let mut cols = Array2::<f64>::zeros((c_in * kh * kw, h_out * w_out));
        for oy in 0..h_out {
            for ox in 0..w_out {
                let col = oy * w_out + ox;
                let mut row = 0usize;
                for ch in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                cols[[row, col]] = iv[[ch, iy as usize, ix as usize]];
                            }
                            row += 1;
                        }
                    }
                }
            }
        }
        let mut flat = wv.dot(&cols);
        for mut c in flat.columns_mut() {
            for (o, b) in c.iter_mut().zip(bv.column(0).iter()) {
                *o += *b;
            }
        }
        let c_out = wv.nrows();
        let out = flat
            .into_shape((c_out, h_out, w_out))
            .unwrap()
            .into_dyn();
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                kernel,
                cols,
            },
        )
    }

    /// Cosine similarity between two `(d, 1)` vectors, as a `(1, 1)` scalar.
    /// Errors on zero-norm inputs.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.nodes[a.0].value.iter().map(|x| x * x).sum::<f64>();
        let nb = self.nodes[b.0].value.iter().map(|x| x * x).sum::<f64>();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::DegenerateFeature);
        }
        let aa = self.mul(a, a);
        let saa = self.sum(aa);
        let norm_a = self.sqrt(saa);
        let bb = self.mul(b, b);
        let sbb = self.sum(bb);
        let norm_b = self.sqrt(sbb);
        let ab = self.mul(a, b);
        let dot = self.sum(ab);
        let denom = self.mul(norm_a, norm_b);
        Ok(self.div(dot, denom))
    }

    /// Backpropagate from a `(1, 1)` scalar objective.
    pub fn backward(&self, objective: Var) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[objective.0] = Some(scalar_array(1.0));
        for idx in (0..=objective.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, idx: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let add_to = |grads: &mut [Option<ArrayD<f64>>], v: Var, delta: ArrayD<f64>| {
            match &mut grads[v.0] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                add_to(grads, *a, g * &self.nodes[b.0].value);
                add_to(grads, *b, g * &self.nodes[a.0].value);
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                add_to(grads, *a, g / bv);
                let av = &self.nodes[a.0].value;
                add_to(grads, *b, -(g * av) / (bv * bv));
            }
            Op::Neg(a) => add_to(grads, *a, g.mapv(|x| -x)),
            Op::Scale(a, c) => add_to(grads, *a, g.mapv(|x| x * c)),
            Op::AddConst(a) => add_to(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
                add_to(grads, *a, gm.dot(&bv.t()).into_dyn());
                add_to(grads, *b, av.t().dot(&gm).into_dyn());
            }
            Op::AddColBias(m, bias) => {
                add_to(grads, *m, g.clone());
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let db = gm.sum_axis(Axis(1)).insert_axis(Axis(1)).into_dyn();
                add_to(grads, *bias, db);
            }
            Op::MulRowBroadcast(m, row) => {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let mv = self.nodes[m.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let rv = self.nodes[row.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let mut dm = gm.to_owned();
                for (j, mut col) in dm.columns_mut().into_iter().enumerate() {
                    let s = rv[[0, j]];
                    col.mapv_inplace(|x| x * s);
                }
                add_to(grads, *m, dm.into_dyn());
                let mut dr = Array2::<f64>::zeros((1, mv.ncols()));
                for j in 0..mv.ncols() {
                    dr[[0, j]] = gm.column(j).iter().zip(mv.column(j).iter()).map(|(a, b)| a * b).sum();
                }
                add_to(grads, *row, dr.into_dyn());
            }
            Op::MulScalar(vec, s) => {
                let sv = self.nodes[s.0].value[[0, 0]];
                add_to(grads, *vec, g.mapv(|x| x * sv));
                let dot: f64 = g.iter().zip(self.nodes[vec.0].value.iter()).map(|(a, b)| a * b).sum();
                add_to(grads, *s, scalar_array(dot));
            }
            Op::Relu(a) => {
                let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                add_to(grads, *a, g * &mask);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                add_to(grads, *a, g * &(y * &y.mapv(|v| 1.0 - v)));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                add_to(grads, *a, g * &y.mapv(|v| 1.0 - v * v));
            }
            Op::Exp(a) => {
                add_to(grads, *a, g * &self.nodes[idx].value);
            }
            Op::Ln(a) => {
                add_to(grads, *a, g / &self.nodes[a.0].value);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[idx].value;
                add_to(grads, *a, g / &y.mapv(|v| 2.0 * v));
            }
            Op::Sum(a) => {
                let gs = g[[0, 0]];
                add_to(grads, *a, self.nodes[a.0].value.mapv(|_| gs));
            }
            Op::SliceRows { input, start } => {
                let shape = self.nodes[input.0].value.shape().to_vec();
                let mut di = ArrayD::<f64>::zeros(IxDyn(&shape));
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dim = di.view_mut().into_dimensionality::<Ix2>().unwrap();
                dim.slice_mut(ndarray::s![*start..*start + gm.nrows(), ..])
                    .assign(&gm);
                add_to(grads, *input, di);
            }
            Op::SliceBand { input, start } => {
                let shape = self.nodes[input.0].value.shape().to_vec();
                let mut di = ArrayD::<f64>::zeros(IxDyn(&shape));
                let gm = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dim = di.view_mut().into_dimensionality::<Ix3>().unwrap();
                dim.slice_mut(ndarray::s![.., *start..*start + gm.dim().1, ..])
                    .assign(&gm);
                add_to(grads, *input, di);
            }
            Op::SelectCol { input, col } => {
                let shape = self.nodes[input.0].value.shape().to_vec();
                let mut di = ArrayD::<f64>::zeros(IxDyn(&shape));
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dim = di.view_mut().into_dimensionality::<Ix2>().unwrap();
                dim.column_mut(*col).assign(&gm.column(0));
                add_to(grads, *input, di);
            }
            Op::ConcatRows(parts) => {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut offset = 0usize;
                for p in parts {
                    let rows = self.nodes[p.0].value.shape()[0];
                    let dp = gm.slice(ndarray::s![offset..offset + rows, ..]).to_owned();
                    add_to(grads, *p, dp.into_dyn());
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut offset = 0usize;
                for p in parts {
                    let cols = self.nodes[p.0].value.shape()[1];
                    let dp = gm.slice(ndarray::s![.., offset..offset + cols]).to_owned();
                    add_to(grads, *p, dp.into_dyn());
                    offset += cols;
                }
            }
            Op::SpatialMax { input, argmax } => {
                let shape = self.nodes[input.0].value.shape().to_vec();
                let (h, w) = (shape[1], shape[2]);
                let mut di = ArrayD::<f64>::zeros(IxDyn(&shape));
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dim = di.view_mut().into_dimensionality::<Ix3>().unwrap();
                for (ch, &flat) in argmax.iter().enumerate() {
                    dim[[ch, flat / w, flat % w]] += gm[[ch, 0]];
                }
                let _ = h;
                add_to(grads, *input, di);
            }
            Op::MaskedRowMax { input, argmax } => {
                let shape = self.nodes[input.0].value.shape().to_vec();
                let mut di = ArrayD::<f64>::zeros(IxDyn(&shape));
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dim = di.view_mut().into_dimensionality::<Ix2>().unwrap();
                for (row, &col) in argmax.iter().enumerate() {
                    dim[[row, col]] += gm[[row, 0]];
                }
                add_to(grads, *input, di);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                kernel,
                cols,
            } => {
                let (kh, kw) = *kernel;
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let (c_out, h_out, w_out) = g3.dim();
                let g2 = g3
                    .to_owned()
                    .into_shape((c_out, h_out * w_out))
                    .unwrap();
                let wv = self.nodes[weight.0].value.view().into_dimensionality::<Ix2>().unwrap();
                add_to(grads, *weight, g2.dot(&cols.t()).into_dyn());
                add_to(
                    grads,
                    *bias,
                    g2.sum_axis(Axis(1)).insert_axis(Axis(1)).into_dyn(),
                );
                let dcols = wv.t().dot(&g2);
                let in_shape = self.nodes[input.0].value.shape().to_vec();
                let (c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let mut di = ArrayD::<f64>::zeros(IxDyn(&in_shape));
                let mut dim = di.view_mut().into_dimensionality::<Ix3>().unwrap();
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let col = oy * w_out + ox;
                        let mut row = 0usize;
                        for ch in 0..c_in {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - *pad as isize;
                                    let ix = (ox * stride + kx) as isize - *pad as isize;
                                    if iy >= 0
                                        && ix >= 0
                                        && (iy as usize) < h
                                        && (ix as usize) < w
                                    {
                                        dim[[ch, iy as usize, ix as usize]] += dcols[[row, col]];
                                    }
                                    row += 1;
                                }
                            }
                        }
                    }
                }
                add_to(grads, *input, di);
            }
        }
    }
}

/// Softmax over the rows of a `(k, 1)` vector of scores.
pub fn softmax_vec(tape: &mut Tape, scores: Var) -> Var {
    let exps = tape.exp(scores);
    let total = tape.sum(exps);
    let k = tape.value(exps).shape()[0];
    let cols: Vec<Var> = (0..k)
        .map(|i| {
            let e = tape.slice_rows(exps, i, i + 1);
            tape.div(e, total)
        })
        .collect();
    tape.concat_rows(&cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn vec_leaf(tape: &mut Tape, data: &[f64]) -> Var {
        let arr = Array2::from_shape_vec((data.len(), 1), data.to_vec()).unwrap();
        tape.leaf(arr.into_dyn())
    }

    #[test]
    fn matmul_forward_and_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]].into_dyn());
        let b = vec_leaf(&mut tape, &[1.0, 1.0]);
        let y = tape.matmul(a, b);
        assert_eq!(tape.value(y).as_slice().unwrap(), &[3.0, 7.0]);
        let s = tape.sum(y);
        let grads = tape.backward(s);
        let da = grads.get(a, &[2, 2]);
        assert_eq!(da.as_slice().unwrap(), &[1.0, 1.0, 1.0, 1.0]);
        let db = grads.get(b, &[2, 1]);
        assert_eq!(db.as_slice().unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn cosine_matches_hand_computation() {
        let mut tape = Tape::new();
        let a = vec_leaf(&mut tape, &[1.0, 0.0]);
        let b = vec_leaf(&mut tape, &[1.0, 1.0]);
        let c = tape.cosine(a, b).unwrap();
        assert!((tape.scalar(c) - 1.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        let mut tape = Tape::new();
        let a = vec_leaf(&mut tape, &[0.0, 0.0]);
        let b = vec_leaf(&mut tape, &[1.0, 1.0]);
        assert!(matches!(tape.cosine(a, b), Err(Error::DegenerateFeature)));
    }

    #[test]
    fn spatial_max_picks_spike() {
        let mut tape = Tape::new();
        let mut f = ndarray::Array3::<f64>::zeros((2, 3, 2));
        f[[0, 2, 1]] = 5.0;
        f[[1, 0, 0]] = -1.0;
        f[[1, 1, 1]] = 2.0;
        let v = tape.leaf(f.into_dyn());
        let m = tape.spatial_max(v);
        assert_eq!(tape.value(m).as_slice().unwrap(), &[5.0, 2.0]);
        let s = tape.sum(m);
        let grads = tape.backward(s);
        let dv = grads.get(v, &[2, 3, 2]);
        assert_eq!(dv[[0, 2, 1]], 1.0);
        assert_eq!(dv[[1, 1, 1]], 1.0);
        assert_eq!(dv.sum(), 2.0);
    }

    #[test]
    fn masked_row_max_ignores_padding() {
        let mut tape = Tape::new();
        let e = tape.leaf(array![[1.0, 2.0, 99.0], [5.0, 1.0, 99.0]].into_dyn());
        let m = tape.masked_row_max(e, 2).unwrap();
        assert_eq!(tape.value(m).as_slice().unwrap(), &[2.0, 5.0]);
    }

    #[test]
    fn conv2d_matches_direct_computation() {
        // 1 input channel, 1 output channel, 2x2 kernel, stride 1, no pad.
        let mut tape = Tape::new();
        let input = tape.leaf(
            ndarray::Array3::from_shape_vec((1, 3, 3), (1..=9).map(|x| x as f64).collect())
                .unwrap()
                .into_dyn(),
        );
        let weight = tape.leaf(array![[1.0, 0.0, 0.0, 1.0]].into_dyn());
        let bias = vec_leaf(&mut tape, &[0.5]);
        let out = tape.conv2d(input, weight, bias, (2, 2), 1, 0);
        // out[y][x] = in[y][x] + in[y+1][x+1] + 0.5
        let ov = tape.value(out);
        assert_eq!(ov[[0, 0, 0]], 1.0 + 5.0 + 0.5);
        assert_eq!(ov[[0, 1, 1]], 5.0 + 9.0 + 0.5);
        let s = tape.sum(out);
        let grads = tape.backward(s);
        let db = grads.get(bias, &[1, 1]);
        assert_eq!(db[[0, 0]], 4.0);
        let dw = grads.get(weight, &[1, 4]);
        // sum over the four 2x2 windows, top-left taps: 1+2+4+5
        assert_eq!(dw[[0, 0]], 12.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let s = vec_leaf(&mut tape, &[0.5, -0.5, 0.25]);
        let p = softmax_vec(&mut tape, s);
        let total: f64 = tape.value(p).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
