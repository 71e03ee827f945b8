//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order. Because inputs always precede outputs on the tape, a single reverse
//! sweep from the loss visits each node after all of its consumers, so
//! gradients are complete by the time a node propagates them.
//!
//! Operations are coarse (a whole convolution or LSTM step is one node) and
//! each carries a hand-written backward rule. Nodes whose inputs are all
//! constants are marked as not requiring gradients and are skipped during the
//! sweep.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Hidden and cell state of an LSTM, as graph variables.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

/// Kind of a recorded operation. Used to target fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv1d,
    MaxPool1d,
    Relu,
    Linear,
    Reshape,
    SelectRow,
    Slice,
    Concat,
    LstmCell,
    Mse,
    Add,
    Mul,
    Sum,
    Scale,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv1d => "conv1d",
            OpKind::MaxPool1d => "max_pool1d",
            OpKind::Relu => "relu",
            OpKind::Linear => "linear",
            OpKind::Reshape => "reshape",
            OpKind::SelectRow => "select_row",
            OpKind::Slice => "slice",
            OpKind::Concat => "concat",
            OpKind::LstmCell => "lstm_cell",
            OpKind::Mse => "mse_loss",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Sum => "sum",
            OpKind::Scale => "scale",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        const ALL: [OpKind; 15] = [
            OpKind::Leaf,
            OpKind::Conv1d,
            OpKind::MaxPool1d,
            OpKind::Relu,
            OpKind::Linear,
            OpKind::Reshape,
            OpKind::SelectRow,
            OpKind::Slice,
            OpKind::Concat,
            OpKind::LstmCell,
            OpKind::Mse,
            OpKind::Add,
            OpKind::Mul,
            OpKind::Sum,
            OpKind::Scale,
        ];
        ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Deliberate corruption of one backward rule, for mutation-testing the
/// gradient checker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradFault {
    pub op: OpKind,
    pub scale: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    MaxPool1d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Reshape {
        input: Var,
    },
    SelectRow {
        input: Var,
        row: usize,
    },
    Slice {
        input: Var,
        offset: usize,
    },
    Concat {
        inputs: Vec<Var>,
    },
    LstmCell {
        gates_x: Var,
        hidden: Var,
        cell: Var,
        w_hh: Var,
        // activated i, f, g, o gates followed by tanh(c')
        cache: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::MaxPool1d { .. } => OpKind::MaxPool1d,
            Op::Relu { .. } => OpKind::Relu,
            Op::Linear { .. } => OpKind::Linear,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::SelectRow { .. } => OpKind::SelectRow,
            Op::Slice { .. } => OpKind::Slice,
            Op::Concat { .. } => OpKind::Concat,
            Op::LstmCell { .. } => OpKind::LstmCell,
            Op::Mse { .. } => OpKind::Mse,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Sum { .. } => OpKind::Sum,
            Op::Scale { .. } => OpKind::Scale,
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Computation tape. Single-writer: build, run backward, read gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<GradFault>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Option<GradFault>) -> Self {
        Self {
            fault,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf copying `tensor`; it takes part in backward iff the
    /// tensor has `requires_grad` set.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.values().to_vec(),
            tensor.requires_grad(),
            Op::Leaf,
        )
    }

    /// Records a leaf that always takes part in backward.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.values().to_vec(),
            true,
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::shape("constant", format!("{shape:?} vs {}", values.len())));
        }
        Ok(self.push(shape, values, false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone())
            .expect("node shape is consistent")
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    // ---- operations ----

    /// 1D cross-correlation. `input` is `[C_in, L]` or batched `[N, C_in, L]`;
    /// `weight` is `[C_out, C_in, K]`, `bias` is `[C_out]`.
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let (n, c_in, len, batched) = match xs.as_slice() {
            [c, l] => (1, *c, *l, false),
            [n, c, l] => (*n, *c, *l, true),
            _ => return Err(Error::shape("conv1d", format!("input rank {}", xs.len()))),
        };
        let [c_out, wc_in, k] = ws.as_slice() else {
            return Err(Error::shape("conv1d", format!("weight shape {ws:?}")));
        };
        let (c_out, k) = (*c_out, *k);
        if *wc_in != c_in {
            return Err(Error::shape(
                "conv1d",
                format!("input has {c_in} channels, weight expects {wc_in}"),
            ));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::shape("conv1d", format!("bias shape {:?}", self.shape(bias))));
        }
        if stride == 0 || len + 2 * padding < k {
            return Err(Error::shape(
                "conv1d",
                format!("length {len} + 2*{padding} shorter than kernel {k}"),
            ));
        }
        let l_out = (len + 2 * padding - k) / stride + 1;
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        let geom = ConvGeom { c_in, len, k, stride, padding, l_out };
        let ck = c_in * k;
        let mut out = vec![0.0; n * c_out * l_out];
        let mut col = vec![0.0; l_out * ck];
        for bi in 0..n {
            geom.im2col(&x[bi * c_in * len..(bi + 1) * c_in * len], &mut col);
            for co in 0..c_out {
                let wr = &w[co * ck..(co + 1) * ck];
                let row = &mut out[(bi * c_out + co) * l_out..(bi * c_out + co + 1) * l_out];
                for (p, o) in row.iter_mut().enumerate() {
                    *o = b[co] + dot(wr, &col[p * ck..(p + 1) * ck]);
                }
            }
        }
        let shape = if batched {
            vec![n, c_out, l_out]
        } else {
            vec![c_out, l_out]
        };
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Max-pooling over the last axis; ties resolve to the first maximum.
    pub fn max_pool1d(&mut self, input: Var, width: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let Some(&len) = shape.last() else {
            return Err(Error::shape("max_pool1d", "scalar input"));
        };
        if width == 0 || stride == 0 || len < width {
            return Err(Error::shape(
                "max_pool1d",
                format!("length {len}, width {width}, stride {stride}"),
            ));
        }
        let l_out = (len - width) / stride + 1;
        let rows = self.nodes[input.0].value.len() / len;
        let x = &self.nodes[input.0].value;
        let mut out = Vec::with_capacity(rows * l_out);
        let mut argmax = Vec::with_capacity(rows * l_out);
        for r in 0..rows {
            let base = r * len;
            for p in 0..l_out {
                let start = base + p * stride;
                let mut best = start;
                for i in start + 1..start + width {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = l_out;
        let rg = self.rg(input);
        Ok(self.push(out_shape, out, rg, Op::MaxPool1d { input, argmax }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.nodes[input.0].value.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(input);
        self.push(shape, out, rg, Op::Relu { input })
    }

    /// `y = x Wᵀ + b` for `x` of shape `[F]` or `[N, F]`, `W` of `[O, F]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let (n, f, batched) = match xs.as_slice() {
            [f] => (1, *f, false),
            [n, f] => (*n, *f, true),
            _ => return Err(Error::shape("linear", format!("input rank {}", xs.len()))),
        };
        let [o, wf] = ws.as_slice() else {
            return Err(Error::shape("linear", format!("weight shape {ws:?}")));
        };
        let o = *o;
        if *wf != f {
            return Err(Error::shape("linear", format!("input width {f}, weight expects {wf}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::shape("linear", format!("bias shape {:?}", self.shape(b))));
            }
        }
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            let xr = &x[r * f..(r + 1) * f];
            for j in 0..o {
                out[r * o + j] = dot(xr, &w[j * f..(j + 1) * f]);
            }
        }
        if let Some(b) = bias {
            let bv = &self.nodes[b.0].value;
            for r in 0..n {
                for j in 0..o {
                    out[r * o + j] += bv[j];
                }
            }
        }
        let shape = if batched { vec![n, o] } else { vec![o] };
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.nodes[input.0].value.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} to {shape:?}", self.shape(input)),
            ));
        }
        let value = self.nodes[input.0].value.clone();
        let rg = self.rg(input);
        Ok(self.push(shape, value, rg, Op::Reshape { input }))
    }

    /// Row `row` of a rank-2 tensor, as a vector.
    pub fn select_row(&mut self, input: Var, row: usize) -> Result<Var> {
        let [n, m] = *self.shape(input) else {
            return Err(Error::shape("select_row", format!("input {:?}", self.shape(input))));
        };
        if row >= n {
            return Err(Error::shape("select_row", format!("row {row} of {n}")));
        }
        let value = self.nodes[input.0].value[row * m..(row + 1) * m].to_vec();
        let rg = self.rg(input);
        Ok(self.push(vec![m], value, rg, Op::SelectRow { input, row }))
    }

    /// Contiguous slice `[offset, offset + len)` of the flattened input.
    pub fn slice(&mut self, input: Var, offset: usize, len: usize) -> Result<Var> {
        let total = self.nodes[input.0].value.len();
        if offset + len > total {
            return Err(Error::shape("slice", format!("{offset}+{len} of {total}")));
        }
        let value = self.nodes[input.0].value[offset..offset + len].to_vec();
        let rg = self.rg(input);
        Ok(self.push(vec![len], value, rg, Op::Slice { input, offset }))
    }

    pub fn concat(&mut self, inputs: &[Var]) -> Var {
        let mut value = Vec::new();
        for v in inputs {
            value.extend_from_slice(&self.nodes[v.0].value);
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let n = value.len();
        self.push(
            vec![n],
            value,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        )
    }

    /// LSTM step from precomputed input pre-activations `gates_x = W_ih x + b`
    /// (length 4H, gate order i, f, g, o). Returns the new state.
    pub fn lstm_recurrent(&mut self, gates_x: Var, state: LstmState, w_hh: Var) -> Result<LstmState> {
        let h_len = self.nodes[state.hidden.0].value.len();
        if self.nodes[state.cell.0].value.len() != h_len {
            return Err(Error::shape("lstm_cell", "hidden and cell lengths differ"));
        }
        if self.nodes[gates_x.0].value.len() != 4 * h_len {
            return Err(Error::shape(
                "lstm_cell",
                format!(
                    "gate pre-activations have {} entries, expected {}",
                    self.nodes[gates_x.0].value.len(),
                    4 * h_len
                ),
            ));
        }
        if self.shape(w_hh) != [4 * h_len, h_len] {
            return Err(Error::shape("lstm_cell", format!("W_hh shape {:?}", self.shape(w_hh))));
        }
        let gx = &self.nodes[gates_x.0].value;
        let h = &self.nodes[state.hidden.0].value;
        let c = &self.nodes[state.cell.0].value;
        let w = &self.nodes[w_hh.0].value;
        let mut cache = vec![0.0; 5 * h_len];
        for j in 0..4 * h_len {
            let pre = gx[j] + dot(&w[j * h_len..(j + 1) * h_len], h);
            cache[j] = if (2 * h_len..3 * h_len).contains(&j) {
                pre.tanh()
            } else {
                sigmoid(pre)
            };
        }
        let mut out = vec![0.0; 2 * h_len];
        for j in 0..h_len {
            let (i, f, g, o) = (
                cache[j],
                cache[h_len + j],
                cache[2 * h_len + j],
                cache[3 * h_len + j],
            );
            let c_new = f * c[j] + i * g;
            let tc = c_new.tanh();
            cache[4 * h_len + j] = tc;
            out[j] = o * tc;
            out[h_len + j] = c_new;
        }
        let rg = self.rg(gates_x) || self.rg(state.hidden) || self.rg(state.cell) || self.rg(w_hh);
        let joint = self.push(
            vec![2 * h_len],
            out,
            rg,
            Op::LstmCell {
                gates_x,
                hidden: state.hidden,
                cell: state.cell,
                w_hh,
                cache,
            },
        );
        Ok(LstmState {
            hidden: self.slice(joint, 0, h_len)?,
            cell: self.slice(joint, h_len, h_len)?,
        })
    }

    /// Full LSTM cell: `gates = W_ih x + W_hh h + b`, `c' = f⊙c + i⊙g`,
    /// `h' = o⊙tanh(c')`.
    pub fn lstm_cell(
        &mut self,
        x: Var,
        state: LstmState,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
    ) -> Result<LstmState> {
        let gates_x = self.linear(x, w_ih, Some(bias))?;
        self.lstm_recurrent(gates_x, state, w_hh)
    }

    /// Mean squared error between equal-length `pred` and `target`.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = &self.nodes[pred.0].value;
        let t = &self.nodes[target.0].value;
        if p.len() != t.len() || p.is_empty() {
            return Err(Error::shape("mse_loss", format!("{} vs {}", p.len(), t.len())));
        }
        let loss = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(vec![1], vec![loss], rg, Op::Mse { pred, target }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(Var, Var) -> Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, rg, op(a, b)))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.nodes[input.0].value.iter().sum();
        let rg = self.rg(input);
        self.push(vec![1], vec![s], rg, Op::Sum { input })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let value = self.nodes[input.0].value.iter().map(|v| v * factor).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(input);
        self.push(shape, value, rg, Op::Scale { input, factor })
    }

    // ---- backward ----

    /// Reverse sweep from scalar `loss`. Gradients from a previous sweep are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(mut gout) = self.grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(fault) = self.fault {
                if fault.op == node.op.kind() {
                    gout.iter_mut().for_each(|g| *g *= fault.scale);
                }
            }
            backprop(&self.nodes, &mut self.grads, idx, &gout);
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }
}

/// Shape of one conv1d application, for the im2col transforms.
struct ConvGeom {
    c_in: usize,
    len: usize,
    k: usize,
    stride: usize,
    padding: usize,
    l_out: usize,
}

impl ConvGeom {
    /// `col[p, ci*K + kk] = x[ci, p*stride + kk - padding]`, zero outside.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let ck = self.c_in * self.k;
        for p in 0..self.l_out {
            let row = &mut col[p * ck..(p + 1) * ck];
            for ci in 0..self.c_in {
                let xr = &x[ci * self.len..(ci + 1) * self.len];
                for kk in 0..self.k {
                    let pos = (p * self.stride + kk) as isize - self.padding as isize;
                    row[ci * self.k + kk] = if (0..self.len as isize).contains(&pos) {
                        xr[pos as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`], accumulated into `dx`.
    fn col2im_add(&self, col: &[f64], dx: &mut [f64]) {
        let ck = self.c_in * self.k;
        for p in 0..self.l_out {
            let row = &col[p * ck..(p + 1) * ck];
            for ci in 0..self.c_in {
                for kk in 0..self.k {
                    let pos = (p * self.stride + kk) as isize - self.padding as isize;
                    if (0..self.len as isize).contains(&pos) {
                        dx[ci * self.len + pos as usize] += row[ci * self.k + kk];
                    }
                }
            }
        }
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Four independent accumulators so the loop vectorizes; the summation
/// order is fixed, so results stay deterministic.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn grad_buf<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], idx: usize, gout: &[f64]) {
    let node = &nodes[idx];
    match &node.op {
        Op::Leaf => {}
        Op::Conv1d {
            input,
            weight,
            bias,
            stride,
            padding,
        } => {
            let (stride, padding) = (*stride, *padding);
            let xs = &nodes[input.0].shape;
            let (n, c_in, len) = match xs.as_slice() {
                [c, l] => (1, *c, *l),
                [n, c, l] => (*n, *c, *l),
                _ => unreachable!(),
            };
            let ws = &nodes[weight.0].shape;
            let (c_out, k) = (ws[0], ws[2]);
            let l_out = *node.shape.last().unwrap();
            let x = &nodes[input.0].value;
            let w = &nodes[weight.0].value;
            let geom = ConvGeom { c_in, len, k, stride, padding, l_out };
            let ck = c_in * k;
            if let Some(db) = grad_buf(nodes, grads, *bias) {
                for bi in 0..n {
                    for co in 0..c_out {
                        let off = (bi * c_out + co) * l_out;
                        db[co] += gout[off..off + l_out].iter().sum::<f64>();
                    }
                }
            }
            if let Some(dw) = grad_buf(nodes, grads, *weight) {
                let mut col = vec![0.0; l_out * ck];
                for bi in 0..n {
                    geom.im2col(&x[bi * c_in * len..(bi + 1) * c_in * len], &mut col);
                    for co in 0..c_out {
                        let g = &gout[(bi * c_out + co) * l_out..(bi * c_out + co + 1) * l_out];
                        let dwr = &mut dw[co * ck..(co + 1) * ck];
                        for (p, &gv) in g.iter().enumerate() {
                            axpy(dwr, gv, &col[p * ck..(p + 1) * ck]);
                        }
                    }
                }
            }
            if let Some(dx) = grad_buf(nodes, grads, *input) {
                let mut dcol = vec![0.0; l_out * ck];
                for bi in 0..n {
                    dcol.fill(0.0);
                    for co in 0..c_out {
                        let g = &gout[(bi * c_out + co) * l_out..(bi * c_out + co + 1) * l_out];
                        let wr = &w[co * ck..(co + 1) * ck];
                        for (p, &gv) in g.iter().enumerate() {
                            axpy(&mut dcol[p * ck..(p + 1) * ck], gv, wr);
                        }
                    }
                    geom.col2im_add(&dcol, &mut dx[bi * c_in * len..(bi + 1) * c_in * len]);
                }
            }
        }
        Op::MaxPool1d { input, argmax } => {
            if let Some(dx) = grad_buf(nodes, grads, *input) {
                for (&src, g) in argmax.iter().zip(gout) {
                    dx[src] += g;
                }
            }
        }
        Op::Relu { input } => {
            let x = &nodes[input.0].value;
            if let Some(dx) = grad_buf(nodes, grads, *input) {
                for ((d, &xv), g) in dx.iter_mut().zip(x).zip(gout) {
                    if xv > 0.0 {
                        *d += g;
                    }
                }
            }
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let ws = &nodes[weight.0].shape;
            let (o, f) = (ws[0], ws[1]);
            let n = nodes[input.0].value.len() / f;
            let x = &nodes[input.0].value;
            let w = &nodes[weight.0].value;
            if let Some(b) = bias {
                if let Some(db) = grad_buf(nodes, grads, *b) {
                    for r in 0..n {
                        for j in 0..o {
                            db[j] += gout[r * o + j];
                        }
                    }
                }
            }
            if let Some(dw) = grad_buf(nodes, grads, *weight) {
                for j in 0..o {
                    let row = &mut dw[j * f..(j + 1) * f];
                    for r in 0..n {
                        let g = gout[r * o + j];
                        if g != 0.0 {
                            for (d, xv) in row.iter_mut().zip(&x[r * f..(r + 1) * f]) {
                                *d += g * xv;
                            }
                        }
                    }
                }
            }
            if let Some(dx) = grad_buf(nodes, grads, *input) {
                for r in 0..n {
                    let row = &mut dx[r * f..(r + 1) * f];
                    for j in 0..o {
                        let g = gout[r * o + j];
                        if g != 0.0 {
                            for (d, wv) in row.iter_mut().zip(&w[j * f..(j + 1) * f]) {
                                *d += g * wv;
                            }
                        }
                    }
                }
            }
        }
        Op::Reshape { input } => {
            if let Some(dx) = grad_buf(nodes, grads, *input) {
                dx.iter_mut().zip(gout).for_each(|(d, g)| *d += g);
            }
        }
        Op::SelectRow { input, row } => {
            let m = gout.len();
            if let Some(dx) = grad_buf(nodes, grads, *input) {
                dx[row * m..(row + 1) * m]
                    .iter_mut()
                    .zip(gout)
                    .for_each(|(d, g)| *d += g);
            }
        }
        Op::Slice { input, offset } => {
            if let Some(dx) = grad_buf(nodes, grads, *input) {
                dx[*offset..*offset + gout.len()]
                    .iter_mut()
                    .zip(gout)
                    .for_each(|(d, g)| *d += g);
            }
        }
        Op::Concat { inputs } => {
            let mut off = 0;
            for v in inputs {
                let n = nodes[v.0].value.len();
                if let Some(dx) = grad_buf(nodes, grads, *v) {
                    dx.iter_mut().zip(&gout[off..off + n]).for_each(|(d, g)| *d += g);
                }
                off += n;
            }
        }
        Op::LstmCell {
            gates_x,
            hidden,
            cell,
            w_hh,
            cache,
        } => {
            let h_len = nodes[hidden.0].value.len();
            let c = &nodes[cell.0].value;
            let h = &nodes[hidden.0].value;
            let w = &nodes[w_hh.0].value;
            let (dh_out, dc_out) = gout.split_at(h_len);
            let mut dpre = vec![0.0; 4 * h_len];
            let mut dc_prev = vec![0.0; h_len];
            for j in 0..h_len {
                let (i, f, g, o, tc) = (
                    cache[j],
                    cache[h_len + j],
                    cache[2 * h_len + j],
                    cache[3 * h_len + j],
                    cache[4 * h_len + j],
                );
                let dc = dc_out[j] + dh_out[j] * o * (1.0 - tc * tc);
                dpre[j] = dc * g * i * (1.0 - i);
                dpre[h_len + j] = dc * c[j] * f * (1.0 - f);
                dpre[2 * h_len + j] = dc * i * (1.0 - g * g);
                dpre[3 * h_len + j] = dh_out[j] * tc * o * (1.0 - o);
                dc_prev[j] = dc * f;
            }
            if let Some(dgx) = grad_buf(nodes, grads, *gates_x) {
                dgx.iter_mut().zip(&dpre).for_each(|(d, g)| *d += g);
            }
            if let Some(dcell) = grad_buf(nodes, grads, *cell) {
                dcell.iter_mut().zip(&dc_prev).for_each(|(d, g)| *d += g);
            }
            if let Some(dw) = grad_buf(nodes, grads, *w_hh) {
                for (j, &g) in dpre.iter().enumerate() {
                    for (d, hv) in dw[j * h_len..(j + 1) * h_len].iter_mut().zip(h) {
                        *d += g * hv;
                    }
                }
            }
            if let Some(dh) = grad_buf(nodes, grads, *hidden) {
                for (j, &g) in dpre.iter().enumerate() {
                    for (d, wv) in dh.iter_mut().zip(&w[j * h_len..(j + 1) * h_len]) {
                        *d += g * wv;
                    }
                }
            }
        }
        Op::Mse { pred, target } => {
            let p = &nodes[pred.0].value;
            let t = &nodes[target.0].value;
            let scale = 2.0 * gout[0] / p.len() as f64;
            if let Some(dp) = grad_buf(nodes, grads, *pred) {
                for ((d, a), b) in dp.iter_mut().zip(p).zip(t) {
                    *d += scale * (a - b);
                }
            }
            if let Some(dt) = grad_buf(nodes, grads, *target) {
                for ((d, a), b) in dt.iter_mut().zip(p).zip(t) {
                    *d -= scale * (a - b);
                }
            }
        }
        Op::Add { a, b } => {
            for v in [a, b] {
                if let Some(d) = grad_buf(nodes, grads, *v) {
                    d.iter_mut().zip(gout).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Mul { a, b } => {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            if let Some(da) = grad_buf(nodes, grads, *a) {
                for ((d, g), y) in da.iter_mut().zip(gout).zip(bv) {
                    *d += g * y;
                }
            }
            if let Some(db) = grad_buf(nodes, grads, *b) {
                for ((d, g), x) in db.iter_mut().zip(gout).zip(av) {
                    *d += g * x;
                }
            }
        }
        Op::Sum { input } => {
            if let Some(dx) = grad_buf(nodes, grads, *input) {
                dx.iter_mut().for_each(|d| *d += gout[0]);
            }
        }
        Op::Scale { input, factor } => {
            if let Some(dx) = grad_buf(nodes, grads, *input) {
                dx.iter_mut().zip(gout).for_each(|(d, g)| *d += g * factor);
            }
        }
    }
}
