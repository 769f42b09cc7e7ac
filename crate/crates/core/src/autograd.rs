//! Minimal reverse-mode automatic differentiation over dense `f64`
//! matrices.
//!
//! A [`Tape`] records every operation as it is evaluated; [`Tape::backward`]
//! then walks the tape in reverse and accumulates gradients. Fused kernels
//! whose backward pass is written by hand (attention, likelihoods, losses)
//! plug in through [`CustomOp`].

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Hand-written backward pass of a fused operation.
pub trait CustomOp {
    /// Gradients with respect to each input, in input order.
    fn backward(&self, inputs: &[&Mat], output: &Mat, grad_out: &Mat) -> Vec<Mat>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var, f64),
    Ln(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    MeanRows(Var),
    SumAll(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads(Vec<Option<Mat>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when none flowed.
    pub fn get_or_zeros(&self, v: Var, like: &Mat) -> Mat {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(like.raw_dim()))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable input.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Adds the `1 × d` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    /// `β·log(1 + exp(x/β))`.
    pub fn softplus(&mut self, a: Var, beta: f64) -> Var {
        let v = self.value(a).mapv(|x| softplus(x, beta));
        let ng = self.ng(a);
        self.push(v, Op::Softplus(a, beta), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        let ng = self.ng(a);
        self.push(v, Op::Ln(a), ng)
    }

    /// Row-wise layer normalisation with gain `gamma` and bias `beta` (`1 × d`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Mat::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, x) in row.iter().enumerate() {
                xhat[[i, j]] = (x - mean) * is;
            }
        }
        let v = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::StackRows(parts.to_vec()), ng)
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start, end), ng)
    }

    /// Column means as a `1 × d` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let v = av
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(v, Op::MeanRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll(a), ng)
    }

    /// Records a fused operation whose forward value was computed by the
    /// caller.
    pub fn custom(&mut self, inputs: &[Var], value: Mat, op: Box<dyn CustomOp>) -> Var {
        let ng = inputs.iter().any(|&p| self.ng(p));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            ng,
        )
    }

    /// Back-propagates from the `1 × 1` value `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones(self.nodes[loss.0].value.raw_dim()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let mut acc = |v: Var, d: Mat| {
                if self.nodes[v.0].needs_grad {
                    match &mut grads[v.0] {
                        Some(existing) => *existing += &d,
                        slot @ None => *slot = Some(d),
                    }
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, g.dot(&val(*b).t()));
                    }
                    if self.ng(*b) {
                        acc(*b, val(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.ng(*a) {
                        acc(*a, g.dot(val(*b)));
                    }
                    if self.ng(*b) {
                        acc(*b, g.t().dot(val(*a)));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -g);
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, &g * val(*b));
                    }
                    if self.ng(*b) {
                        acc(*b, &g * val(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(*a, g);
                }
                Op::Scale(a, k) => acc(*a, g * *k),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let mut d = g;
                    Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y));
                    acc(*a, d);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let mut d = g;
                    Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(*a, d);
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    let mut d = g;
                    Zip::from(&mut d).and(x).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(*a, d);
                }
                Op::Softplus(a, beta) => {
                    let x = val(*a);
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(x)
                        .for_each(|d, &x| *d *= sigmoid(x / beta));
                    acc(*a, d);
                }
                Op::Ln(a) => {
                    let x = val(*a);
                    acc(*a, g / x);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.ng(*gamma) {
                        acc(*gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*beta) {
                        acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*x) {
                        let dxhat = &g * val(*gamma);
                        let d = xhat.ncols() as f64;
                        let mut dx = Mat::zeros(xhat.raw_dim());
                        for i in 0..xhat.nrows() {
                            let dh = dxhat.row(i);
                            let xh = xhat.row(i);
                            let m1 = dh.sum() / d;
                            let m2 = dh.dot(&xh) / d;
                            for j in 0..xhat.ncols() {
                                dx[[i, j]] = inv_std[i] * (dh[j] - m1 - xh[j] * m2);
                            }
                        }
                        acc(*x, dx);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        acc(p, g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::StackRows(parts) => {
                    let mut row = 0;
                    for &p in parts {
                        let h = val(p).nrows();
                        acc(p, g.slice(s![row..row + h, ..]).to_owned());
                        row += h;
                    }
                }
                Op::SliceRows(a, start, end) => {
                    let mut d = Mat::zeros(val(*a).raw_dim());
                    d.slice_mut(s![*start..*end, ..]).assign(&g);
                    acc(*a, d);
                }
                Op::MeanRows(a) => {
                    let n = val(*a).nrows();
                    let row = g.row(0).mapv(|x| x / n as f64);
                    let d = row
                        .broadcast(val(*a).raw_dim())
                        .expect("broadcast row")
                        .to_owned();
                    acc(*a, d);
                }
                Op::SumAll(a) => {
                    let d = Mat::from_elem(val(*a).raw_dim(), g[[0, 0]]);
                    acc(*a, d);
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Mat> = inputs.iter().map(|&v| val(v)).collect();
                    let ds = op.backward(&ins, &node.value, &g);
                    for (&v, d) in inputs.iter().zip(ds) {
                        acc(v, d);
                    }
                }
            }
        }
        Grads(grads)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `β·log(1 + exp(x/β))`.
pub fn softplus(x: f64, beta: f64) -> f64 {
    let z = x / beta;
    beta * (z.max(0.0) + (-z.abs()).exp().ln_1p())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` around every entry of `inputs[k]`.
    fn check(inputs: &[Mat], build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out);
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], m);
            for idx in 0..m.len() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, x)| {
                            let mut x = x.clone();
                            if j == k {
                                x.as_slice_mut().unwrap()[idx] += delta;
                            }
                            t.param(x)
                        })
                        .collect();
                    let o = build(&mut t, &vs);
                    t.scalar(o)
                };
                let h = 1e-6;
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                assert!(
                    (a - num).abs() <= 1e-6 * (1.0 + num.abs()),
                    "input {k} entry {idx}: analytic {a} numeric {num}"
                );
            }
        }
    }

    #[test]
    fn elementwise_and_matrix_ops() {
        let a = array![[0.3, -1.2, 0.5], [0.9, 0.1, -0.4]];
        let b = array![[0.2, 0.7], [-0.5, 0.3], [1.1, -0.8]];
        let r = array![[0.05, -0.3, 0.2]];
        check(&[a, b, r], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let s = t.sigmoid(m);
            let u = t.matmul_t(s, s);
            let th = t.tanh(u);
            let x = t.add_row(v[0], v[2]);
            let sp = t.softplus(x, 0.7);
            let l = t.ln(sp);
            let q = t.mul(l, x);
            let rl = t.relu(q);
            let rs = t.sum_all(rl);
            let ts = t.sum_all(th);
            let z = t.sub(rs, ts);
            t.scale(z, 1.5)
        });
    }

    #[test]
    fn layer_norm_and_reshaping_ops() {
        let x = array![[0.3, -1.2, 0.5, 2.0], [0.9, 0.1, -0.4, 0.0], [1.0, 2.0, 3.0, 5.0]];
        let g = array![[1.1, 0.9, -0.3, 0.5]];
        let b = array![[0.1, 0.0, -0.2, 0.4]];
        let w = array![[0.4], [-0.7], [0.2], [1.3]];
        check(&[x, g, b, w], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            let top = t.slice_rows(y, 0, 2);
            let bottom = t.slice_rows(y, 1, 3);
            let st = t.stack_rows(&[top, bottom]);
            let cat = t.concat_cols(&[st, st]);
            let m = t.mean_rows(cat);
            let half = t.slice_rows(st, 0, 4);
            let p = t.matmul(half, v[3]);
            let ps = t.sum_all(p);
            let sq = t.mul(m, m);
            let ms = t.sum_all(sq);
            t.add(ps, ms)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(array![[2.0]]);
        let p = t.param(array![[3.0]]);
        let y = t.mul(c, p);
        let g = t.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0, 1.0), 1000.0);
        assert!(softplus(-1000.0, 1.0) >= 0.0);
        assert!((softplus(0.0, 2.0) - 2.0 * 2f64.ln()).abs() < 1e-15);
    }
}
