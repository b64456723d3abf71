//! Define-by-run reverse-mode differentiation over dense row-major matrices.
//!
//! Every value in a [`Graph`] is a 2-D matrix whose rows are batch entries.
//! A graph is built fresh for each evaluation and dropped afterwards; there
//! is no persistent tape. Parameters are registered with [`Graph::param`] in
//! a fixed order, which defines their offsets in the flat gradient returned
//! by [`Graph::backward`].

use std::borrow::Cow;

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param {
        offset: usize,
    },
    /// `x · wᵀ` with `x: B×in`, `w: out×in`.
    MatMulT(Var, Var),
    /// Adds a `1×m` row to every row of a `B×m` matrix.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    SumCols(Var),
    SumAll(Var),
    Select(Var, Vec<usize>),
    Concat(Vec<Var>),
    Merge(Vec<(Var, Vec<usize>)>),
    /// Repeats a `B×1` column `m` times.
    Broadcast(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param { .. } => "param",
            Op::MatMulT(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::SumCols(_) => "sum_cols",
            Op::SumAll(_) => "sum_all",
            Op::Select(..) => "select",
            Op::Concat(_) => "concat",
            Op::Merge(_) => "merge",
            Op::Broadcast(..) => "broadcast",
        }
    }

    fn operands(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param { .. } => vec![],
            Op::MatMulT(a, b) | Op::AddRow(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Tanh(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::SumCols(a)
            | Op::SumAll(a)
            | Op::Select(a, _)
            | Op::Broadcast(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::Merge(parts) => parts.iter().map(|(v, _)| *v).collect(),
        }
    }
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<f64>,
    nodes: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Flat parameter gradient, ordered by registration.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    /// Gradient with respect to an arbitrary node, `None` if unreachable.
    pub fn wrt(&self, var: Var) -> Option<&Matrix> {
        self.nodes.get(var.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default)]
pub struct Graph<'a> {
    values: Vec<Cow<'a, Matrix>>,
    ops: Vec<Op>,
    n_params: usize,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            n_params: 0,
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.values.push(Cow::Owned(value));
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of registered scalar parameters.
    pub fn param_count(&self) -> usize {
        self.n_params
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.values[v.0]
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0][[0, 0]]
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    /// Registers a parameter tensor; its gradient occupies the next
    /// `value.len()` slots of the flat gradient (row-major).
    pub fn param(&mut self, value: &'a Matrix) -> Var {
        let offset = self.n_params;
        self.n_params += value.len();
        self.values.push(Cow::Borrowed(value));
        self.ops.push(Op::Param { offset });
        Var(self.values.len() - 1)
    }

    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let out = self.value(x).dot(&self.value(w).t());
        self.push(out, Op::MatMulT(x, w))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a single row");
        let out = self.value(x) + &r.row(0);
        self.push(out, Op::AddRow(x, row))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "shape mismatch in {op}");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let out = self.value(a) / self.value(b);
        self.push(out, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push(out, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) + k;
        self.push(out, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(out, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::sqrt);
        self.push(out, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push(out, Op::Square(a))
    }

    /// Row sums: `B×m → B×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(a))
    }

    /// Sum of all entries: `→ 1×1`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn select(&mut self, a: Var, cols: &[usize]) -> Var {
        let out = self.value(a).select(Axis(1), cols);
        self.push(out, Op::Select(a, cols.to_vec()))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat row counts must agree");
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Assembles a `B×width` matrix by scattering each part's columns to the
    /// given indices. Every output column must be written exactly once.
    pub fn merge(&mut self, parts: &[(Var, Vec<usize>)], width: usize) -> Var {
        let rows = self.value(parts[0].0).nrows();
        let mut out = Matrix::zeros((rows, width));
        let mut seen = vec![false; width];
        for (var, cols) in parts {
            let src = self.value(*var);
            assert_eq!(src.ncols(), cols.len(), "merge part width mismatch");
            for (j, &c) in cols.iter().enumerate() {
                assert!(!seen[c], "merge writes column {c} twice");
                seen[c] = true;
                out.column_mut(c).assign(&src.column(j));
            }
        }
        assert!(seen.iter().all(|&s| s), "merge leaves a column unset");
        self.push(out, Op::Merge(parts.to_vec()))
    }

    pub fn broadcast(&mut self, a: Var, width: usize) -> Var {
        let col = self.value(a);
        assert_eq!(col.ncols(), 1, "broadcast expects a column");
        let mut out = Matrix::zeros((col.nrows(), width));
        for mut c in out.columns_mut() {
            c.assign(&col.column(0));
        }
        self.push(out, Op::Broadcast(a))
    }

    /// Reverse sweep from a `1×1` loss node.
    ///
    /// Fails with [`Error::NonFinite`] naming the first offending node if any
    /// value or gradient on the path to the loss is NaN or infinite.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::InvalidInput(format!(
                "backward requires a 1x1 loss, got {:?}",
                self.value(loss).dim()
            )));
        }
        let n = loss.0 + 1;
        let mut reachable = vec![false; n];
        reachable[loss.0] = true;
        for i in (0..n).rev() {
            if reachable[i] {
                for v in self.ops[i].operands() {
                    reachable[v.0] = true;
                }
            }
        }
        for i in 0..n {
            if reachable[i] && !self.values[i].iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite {
                    node: i,
                    op: self.ops[i].name(),
                });
            }
        }

        let mut grads: Vec<Option<Matrix>> = vec![None; n];
        grads[loss.0] = Some(Matrix::from_elem((1, 1), 1.0));
        let mut params = vec![0.0; self.n_params];

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite {
                    node: i,
                    op: self.ops[i].name(),
                });
            }
            match &self.ops[i] {
                Op::Input => {}
                Op::Param { offset } => {
                    for (slot, gv) in params[*offset..*offset + g.len()].iter_mut().zip(g.iter()) {
                        *slot += gv;
                    }
                }
                Op::MatMulT(x, w) => {
                    let gx = g.dot(self.value(*w));
                    let gw = g.t().dot(self.value(*x));
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                }
                Op::AddRow(x, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *x, g.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let ga = &g / bv;
                    let mut gb = -&g * self.value(*a);
                    Zip::from(&mut gb).and(bv).for_each(|x, &b| *x /= b * b);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, &g * *k),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g.clone()),
                Op::Tanh(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(&*self.values[i])
                        .for_each(|x, &y| *x *= 1.0 - y * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|x, &v| *x *= sigmoid(v));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, &g * &*self.values[i]),
                Op::Ln(a) => accumulate(&mut grads, *a, &g / self.value(*a)),
                Op::Sqrt(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(&*self.values[i]).for_each(|x, &y| *x /= 2.0 * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|x, &v| *x *= 2.0 * v);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let width = self.value(*a).ncols();
                    let mut ga = Matrix::zeros((g.nrows(), width));
                    for mut c in ga.columns_mut() {
                        c.assign(&g.column(0));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let ga = Matrix::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Select(a, cols) => {
                    let mut ga = Matrix::zeros(self.value(*a).dim());
                    for (j, &c) in cols.iter().enumerate() {
                        let mut dst = ga.column_mut(c);
                        dst += &g.column(j);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let ga = g.slice(ndarray::s![.., start..start + w]).to_owned();
                        start += w;
                        accumulate(&mut grads, *p, ga);
                    }
                }
                Op::Merge(parts) => {
                    for (p, cols) in parts {
                        let ga = g.select(Axis(1), cols);
                        accumulate(&mut grads, *p, ga);
                    }
                }
                Op::Broadcast(a) => {
                    let ga = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *a, ga);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { params, nodes: grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn square_gradient() {
        let theta = array![[3.0]];
        let mut g = Graph::new();
        let p = g.param(&theta);
        let sq = g.square(p);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.params(), &[6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let theta = array![[1.0, 2.0]];
        let mut g = Graph::new();
        let _p = g.param(&theta);
        let c = g.input(array![[5.0]]);
        let loss = g.sum_all(c);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.params(), &[0.0, 0.0]);
    }

    #[test]
    fn reused_parameter_accumulates() {
        let theta = array![[2.0]];
        let mut g = Graph::new();
        let p = g.param(&theta);
        let prod = g.mul(p, p);
        let sum = g.add(prod, p);
        let loss = g.sum_all(sum);
        // d/dθ (θ² + θ) = 2θ + 1
        assert_eq!(g.backward(loss).unwrap().params(), &[5.0]);
    }

    #[test]
    fn non_finite_names_node() {
        let mut g = Graph::new();
        let x = g.input(array![[-1.0]]);
        let l = g.ln(x);
        let loss = g.sum_all(l);
        match g.backward(loss) {
            Err(Error::NonFinite { node, op }) => {
                assert_eq!(node, l.index());
                assert_eq!(op, "ln");
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        // f(x) = Σ [ tanh(x)·softplus(x) / (1 + x²) + sqrt(exp(x)) ]
        fn build<'a>(g: &mut Graph<'a>, x: Var) -> Var {
            let t = g.tanh(x);
            let s = g.softplus(x);
            let ts = g.mul(t, s);
            let sq = g.square(x);
            let den = g.add_scalar(sq, 1.0);
            let q = g.div(ts, den);
            let e = g.exp(x);
            let r = g.sqrt(e);
            let sum = g.add(q, r);
            let sel = g.select(sum, &[1, 0]);
            let cat = g.concat(&[sel, sum]);
            let rs = g.sum_cols(cat);
            let b = g.broadcast(rs, 2);
            let m = g.merge(&[(b, vec![1, 0])], 2);
            g.sum_all(m)
        }
        let x0 = array![[0.3, -1.2], [2.0, 0.1]];
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.wrt(x).unwrap().clone();
        let h = 1e-6;
        for idx in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let mut xp = x0.clone();
            xp[idx] += h;
            let mut xm = x0.clone();
            xm[idx] -= h;
            let f = |m: Matrix| {
                let mut g = Graph::new();
                let v = g.input(m);
                let l = build(&mut g, v);
                g.scalar(l)
            };
            let fd = (f(xp) - f(xm)) / (2.0 * h);
            assert!((fd - analytic[idx]).abs() < 1e-7, "{idx:?}: {fd} vs {}", analytic[idx]);
        }
    }
}
