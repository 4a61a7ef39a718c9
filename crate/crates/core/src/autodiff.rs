//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node whose parents already exist, so the tape is
//! in topological order by construction and [`Tape::backward`] is a single
//! reverse sweep. The tape is consumed by the sweep.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    Relu(Var),
    Sigmoid(Var),
    /// `[C,H,W]` planes -> `[S*H*W, C]` instance rows.
    ChannelsLast {
        parts: Vec<Var>,
        channels: usize,
        plane: usize,
    },
    /// `[N,C] x [C] -> [N]`
    MatVec {
        matrix: Var,
        vector: Var,
        cols: usize,
    },
    /// `sum_n w[n] * m[n,:] -> [C]`
    WeightedRowSum {
        weights: Var,
        matrix: Var,
        cols: usize,
    },
    MeanRows {
        matrix: Var,
        rows: Vec<usize>,
        cols: usize,
    },
    Dot(Var, Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Max {
        input: Var,
        argmax: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Ln(Var),
    Bce {
        probs: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for one backward sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf that was registered with `requires_grad`.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn data(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    pub fn scalar(&self, var: Var) -> Result<f64> {
        self.value(var).item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Same-padded cross-correlation of `[Cin,H,W]` with `[Cout,Cin,k,k]`
    /// kernels plus a `[Cout]` bias.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (is, ks, bs) = (self.shape(input), self.shape(kernels), self.shape(bias));
        if is.len() != 3 || ks.len() != 4 || bs.len() != 1 {
            return Err(Error::shape(
                "conv2d",
                format!("expected input [Cin,H,W], kernels [Cout,Cin,k,k], bias [Cout]; got {is:?}, {ks:?}, {bs:?}"),
            ));
        }
        if ks[1] != is[0] || ks[2] != ks[3] || ks[2] % 2 == 0 || bs[0] != ks[0] {
            return Err(Error::shape(
                "conv2d",
                format!("inconsistent shapes input {is:?}, kernels {ks:?}, bias {bs:?} (kernels must be square and odd)"),
            ));
        }
        let geometry = ConvGeometry {
            in_channels: is[0],
            out_channels: ks[0],
            height: is[1],
            width: is[2],
            kernel: ks[2],
        };
        let out = kernels::conv2d_forward(geometry, self.data(input), self.data(kernels), self.data(bias));
        let value = Tensor::new(vec![geometry.out_channels, geometry.height, geometry.width], out)?;
        let rg = self.needs(&[input, kernels, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernels,
                bias,
                geometry,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Sign of every relu input on the tape, in recording order. Two
    /// evaluations of the same graph with equal patterns lie on the same
    /// linear piece of every relu.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.data(x).iter().map(|&a| a > 0.0))
            .collect()
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| kernels::sigmoid(a)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Concatenates `[C,H,W]` planes along depth and lays them out as
    /// `[S*H*W, C]`, one row per spatial location.
    pub fn channels_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("channels_last", "no input planes"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 3 {
            return Err(Error::shape("channels_last", format!("expected [C,H,W], got {s0:?}")));
        }
        for p in parts {
            if self.shape(*p) != s0.as_slice() {
                return Err(Error::shape(
                    "channels_last",
                    format!("plane shape {:?} differs from {s0:?}", self.shape(*p)),
                ));
            }
        }
        let (channels, plane) = (s0[0], s0[1] * s0[2]);
        let mut out = vec![0.0; parts.len() * plane * channels];
        for (s, p) in parts.iter().enumerate() {
            let src = self.data(*p);
            for c in 0..channels {
                for i in 0..plane {
                    out[(s * plane + i) * channels + c] = src[c * plane + i];
                }
            }
        }
        let value = Tensor::new(vec![parts.len() * plane, channels], out)?;
        let rg = self.needs(parts);
        Ok(self.push(
            value,
            Op::ChannelsLast {
                parts: parts.to_vec(),
                channels,
                plane,
            },
            rg,
        ))
    }

    fn matrix_dims(&self, op: &'static str, m: Var) -> Result<(usize, usize)> {
        match self.shape(m) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix [N,C], got {s:?}"))),
        }
    }

    /// Row-wise dot products: `out[n] = m[n,:] . v`.
    pub fn matvec(&mut self, matrix: Var, vector: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("matvec", matrix)?;
        if self.value(vector).len() != cols {
            return Err(Error::shape(
                "matvec",
                format!("matrix has {cols} columns, vector has {} entries", self.value(vector).len()),
            ));
        }
        let (m, v) = (self.data(matrix), self.data(vector));
        let out = (0..rows)
            .map(|r| {
                let row = &m[r * cols..(r + 1) * cols];
                row.iter().zip(v).fold(0.0, |acc, (a, b)| acc + a * b)
            })
            .collect();
        let rg = self.needs(&[matrix, vector]);
        Ok(self.push(Tensor::vector(out), Op::MatVec { matrix, vector, cols }, rg))
    }

    /// `sum_n weights[n] * m[n,:]`.
    pub fn weighted_row_sum(&mut self, weights: Var, matrix: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("weighted_row_sum", matrix)?;
        if self.value(weights).len() != rows {
            return Err(Error::shape(
                "weighted_row_sum",
                format!("{} weights for {rows} rows", self.value(weights).len()),
            ));
        }
        let (w, m) = (self.data(weights), self.data(matrix));
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            let row = &m[r * cols..(r + 1) * cols];
            for (o, &x) in out.iter_mut().zip(row) {
                *o += w[r] * x;
            }
        }
        let rg = self.needs(&[weights, matrix]);
        Ok(self.push(Tensor::vector(out), Op::WeightedRowSum { weights, matrix, cols }, rg))
    }

    /// Mean of the selected rows. Membership carries no gradient.
    pub fn mean_rows(&mut self, matrix: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.matrix_dims("mean_rows", matrix)?;
        if rows.is_empty() {
            return Err(Error::invalid("mean_rows: empty row set"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("mean_rows", format!("row {bad} out of range for {n} rows")));
        }
        let m = self.data(matrix);
        let mut out = vec![0.0; cols];
        for &r in rows {
            for (o, &x) in out.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
                *o += x;
            }
        }
        let count = rows.len() as f64;
        for o in &mut out {
            *o /= count;
        }
        let rg = self.needs(&[matrix]);
        Ok(self.push(
            Tensor::vector(out),
            Op::MeanRows {
                matrix,
                rows: rows.to_vec(),
                cols,
            },
            rg,
        ))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.data(a), self.data(b));
        if va.len() != vb.len() {
            return Err(Error::shape("dot", format!("lengths {} and {}", va.len(), vb.len())));
        }
        let s = va.iter().zip(vb).fold(0.0, |acc, (x, y)| acc + x * y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), rg))
    }

    /// Max-shifted softmax over all elements.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), kernels::softmax(v.data())).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Hard max; the gradient goes to the first maximal element.
    pub fn max(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let argmax = kernels::argmax(d);
        let s = d[argmax];
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Max { input: x, argmax }, rg)
    }

    fn broadcast_binary(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || tb.is_scalar() {
            Ok(ta.shape().to_vec())
        } else if ta.is_scalar() {
            Ok(tb.shape().to_vec())
        } else {
            Err(Error::shape(
                op,
                format!("shapes {:?} and {:?} (only scalar broadcasting)", ta.shape(), tb.shape()),
            ))
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let shape = self.broadcast_binary(op, a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let n = da.len().max(db.len());
        let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let data = (0..n).map(|i| f(pick(da, i), pick(db, i))).collect();
        Ok((Tensor::new(shape, data)?, self.needs(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * factor).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// Natural log with the argument clamped to at least `1e-12`.
    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| kernels::clamped_ln(a)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, Op::Ln(x), rg)
    }

    /// Summed binary cross-entropy of `probs` against fixed targets.
    pub fn bce_sum(&mut self, probs: Var, targets: &[f64]) -> Result<Var> {
        let p = self.data(probs);
        if p.len() != targets.len() {
            return Err(Error::shape(
                "bce_sum",
                format!("{} probabilities, {} targets", p.len(), targets.len()),
            ));
        }
        let s = p.iter().zip(targets).fold(0.0, |acc, (&p, &y)| acc + kernels::bce(p, y));
        let rg = self.needs(&[probs]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Bce {
                probs,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`, returning gradients of every
    /// trainable leaf it reaches.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = node.value.data();
            let mut acc = |v: Var, contribution: Vec<f64>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(contribution) {
                            *e += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            };
            let val = |v: Var| nodes[v.0].value.data();
            let wants = |v: Var| nodes[v.0].requires_grad;

            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    kernels: k,
                    bias,
                    geometry,
                } => {
                    let (gi, gk, gb) = kernels::conv2d_backward(*geometry, val(*input), val(*k), &g, wants(*input));
                    if let Some(gi) = gi {
                        acc(*input, gi);
                    }
                    acc(*k, gk);
                    acc(*bias, gb);
                }
                Op::Relu(x) => {
                    let c = val(*x).iter().zip(&g).map(|(&a, &gv)| if a > 0.0 { gv } else { 0.0 }).collect();
                    acc(*x, c);
                }
                Op::Sigmoid(x) => {
                    let c = out.iter().zip(&g).map(|(&y, &gv)| gv * y * (1.0 - y)).collect();
                    acc(*x, c);
                }
                Op::ChannelsLast { parts, channels, plane } => {
                    for (s, p) in parts.iter().enumerate() {
                        if !wants(*p) {
                            continue;
                        }
                        let mut c = vec![0.0; channels * plane];
                        for ch in 0..*channels {
                            for j in 0..*plane {
                                c[ch * plane + j] = g[(s * plane + j) * channels + ch];
                            }
                        }
                        acc(*p, c);
                    }
                }
                Op::MatVec { matrix, vector, cols } => {
                    let (m, v) = (val(*matrix), val(*vector));
                    if wants(*matrix) {
                        let mut c = vec![0.0; m.len()];
                        for (r, &gr) in g.iter().enumerate() {
                            for j in 0..*cols {
                                c[r * cols + j] = gr * v[j];
                            }
                        }
                        acc(*matrix, c);
                    }
                    if wants(*vector) {
                        let mut c = vec![0.0; *cols];
                        for (r, &gr) in g.iter().enumerate() {
                            for j in 0..*cols {
                                c[j] += gr * m[r * cols + j];
                            }
                        }
                        acc(*vector, c);
                    }
                }
                Op::WeightedRowSum { weights, matrix, cols } => {
                    let (w, m) = (val(*weights), val(*matrix));
                    if wants(*weights) {
                        let c = (0..w.len())
                            .map(|r| {
                                m[r * cols..(r + 1) * cols]
                                    .iter()
                                    .zip(&g)
                                    .fold(0.0, |a, (x, gv)| a + x * gv)
                            })
                            .collect();
                        acc(*weights, c);
                    }
                    if wants(*matrix) {
                        let mut c = vec![0.0; m.len()];
                        for (r, &wr) in w.iter().enumerate() {
                            for j in 0..*cols {
                                c[r * cols + j] = wr * g[j];
                            }
                        }
                        acc(*matrix, c);
                    }
                }
                Op::MeanRows { matrix, rows, cols } => {
                    let mut c = vec![0.0; val(*matrix).len()];
                    let inv = 1.0 / rows.len() as f64;
                    for &r in rows {
                        for j in 0..*cols {
                            c[r * cols + j] += g[j] * inv;
                        }
                    }
                    acc(*matrix, c);
                }
                Op::Dot(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if wants(*a) {
                        acc(*a, vb.iter().map(|&x| x * g[0]).collect());
                    }
                    if wants(*b) {
                        acc(*b, va.iter().map(|&x| x * g[0]).collect());
                    }
                }
                Op::Softmax(x) => {
                    let inner = out.iter().zip(&g).fold(0.0, |a, (y, gv)| a + y * gv);
                    let c = out.iter().zip(&g).map(|(&y, &gv)| y * (gv - inner)).collect();
                    acc(*x, c);
                }
                Op::Sum(x) => {
                    acc(*x, vec![g[0]; val(*x).len()]);
                }
                Op::Mean(x) => {
                    let n = val(*x).len();
                    acc(*x, vec![g[0] / n as f64; n]);
                }
                Op::Max { input, argmax } => {
                    let mut c = vec![0.0; val(*input).len()];
                    c[*argmax] = g[0];
                    acc(*input, c);
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if wants(v) {
                            acc(v, reduce_broadcast(&g, val(v).len()));
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                    if wants(*a) {
                        let full: Vec<f64> = g.iter().enumerate().map(|(i, gv)| gv * pick(vb, i)).collect();
                        acc(*a, reduce_broadcast(&full, va.len()));
                    }
                    if wants(*b) {
                        let full: Vec<f64> = g.iter().enumerate().map(|(i, gv)| gv * pick(va, i)).collect();
                        acc(*b, reduce_broadcast(&full, vb.len()));
                    }
                }
                Op::Scale(x, f) => {
                    acc(*x, g.iter().map(|gv| gv * f).collect());
                }
                Op::Ln(x) => {
                    let c = val(*x)
                        .iter()
                        .zip(&g)
                        .map(|(&a, &gv)| gv * kernels::clamped_ln_grad(a))
                        .collect();
                    acc(*x, c);
                }
                Op::Bce { probs, targets } => {
                    let c = val(*probs)
                        .iter()
                        .zip(targets)
                        .map(|(&p, &y)| g[0] * kernels::bce_grad(p, y))
                        .collect();
                    acc(*probs, c);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Sums a full-size gradient down to a broadcast scalar operand.
fn reduce_broadcast(g: &[f64], target_len: usize) -> Vec<f64> {
    if target_len == g.len() {
        g.to_vec()
    } else {
        vec![g.iter().sum()]
    }
}
