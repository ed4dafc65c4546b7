//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! Every operation is evaluated eagerly when it is recorded; [`Tape::backward`]
//! then walks the records in reverse and accumulates gradients. Nodes whose
//! inputs carry no gradient (constants, [`Tape::stop_grad`] outputs) are
//! skipped entirely, so a gradient that only reaches a parameter through a
//! stop-grad node is exactly zero rather than numerically small.

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data does not match shape");
        Tensor { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Tensor::from_vec(1, cols, data)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(1, 1, vec![value])
    }

    pub fn uniform<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a · b`
fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(
        a.cols,
        b.rows,
        "matmul shape mismatch {:?} x {:?}",
        a.shape(),
        b.shape()
    );
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let av = a.data[i * a.cols + k];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ`
fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(
        a.cols,
        b.cols,
        "matmul_t shape mismatch {:?} x {:?}ᵀ",
        a.shape(),
        b.shape()
    );
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b`
fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows);
    let mut out = Tensor::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let brow = b.row(r);
        for i in 0..a.cols {
            let av = a.data[r * a.cols + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGrad(Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    Row(Var, usize),
    Softmax(Var),
    Constrain {
        input: Var,
        allowed: Vec<usize>,
        mass: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Sum(Vec<Var>),
    SumAll(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Identity in the forward pass; blocks every gradient to `x`.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGrad(x), false)
    }

    /// The node `v` was detached from, if `v` is a stop-grad output.
    pub fn detached_source(&self, v: Var) -> Option<Var> {
        match self.nodes[v.0].op {
            Op::StopGrad(src) => Some(src),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(self.value(a), self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b), g)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = matmul_bt(self.value(a), self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::MatMulBt(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut value = va.clone();
        value.add_assign(vb);
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), g)
    }

    /// Adds the row vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(vb.rows, 1);
        assert_eq!(va.cols, vb.cols, "add_row shape mismatch");
        let mut value = va.clone();
        for r in 0..value.rows {
            for c in 0..value.cols {
                value.data[r * value.cols + c] += vb.data[c];
            }
        }
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::AddRow(a, b), g)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(va.rows, va.cols, data);
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|x| *x *= factor);
        let g = self.needs_grad(a);
        self.push(value, Op::Scale(a, factor), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|x| *x = x.tanh());
        let g = self.needs_grad(a);
        self.push(value, Op::Tanh(a), g)
    }

    /// Rows `ids` of `table`, stacked.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_vec(ids.len(), t.cols, data);
        let g = self.needs_grad(table);
        self.push(value, Op::Gather(table, ids.to_vec()), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        let g = self.any_grad(parts);
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            g,
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows, vb.rows, "concat_cols row mismatch");
        let cols = va.cols + vb.cols;
        let mut data = Vec::with_capacity(va.rows * cols);
        for r in 0..va.rows {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let value = Tensor::from_vec(va.rows, cols, data);
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::ConcatCols(a, b), g)
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        let value = Tensor::row_vector(self.value(a).row(r).to_vec());
        let g = self.needs_grad(a);
        self.push(value, Op::Row(a, r), g)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = Tensor::zeros(va.rows, va.cols);
        for r in 0..va.rows {
            let p = crate::distribution::softmax(va.row(r));
            value.data[r * va.cols..(r + 1) * va.cols].copy_from_slice(&p);
        }
        let g = self.needs_grad(a);
        self.push(value, Op::Softmax(a), g)
    }

    /// Renormalizes a single-row distribution over `allowed`, zero elsewhere.
    pub fn constrain(
        &mut self,
        probs: Var,
        allowed: &crate::trie::AllowedSet,
    ) -> crate::Result<Var> {
        let v = self.value(probs);
        assert_eq!(v.rows, 1, "constrain expects one row");
        let out = crate::trie::constrain_probs(v.row(0), allowed)?;
        let allowed: Vec<usize> = allowed.ids().iter().map(|&i| i as usize).collect();
        let mass = allowed.iter().map(|&i| v.data[i]).sum();
        let g = self.needs_grad(probs);
        Ok(self.push(
            Tensor::row_vector(out),
            Op::Constrain {
                input: probs,
                allowed,
                mass,
            },
            g,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let v = self.value(logits);
        assert_eq!(v.rows, targets.len(), "one target per logit row");
        let mut probs = Tensor::zeros(v.rows, v.cols);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = v.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&l| (l - max).exp()).sum();
            let log_z = max + z.ln();
            total += log_z - row[t];
            for (c, &l) in row.iter().enumerate() {
                probs.data[r * v.cols + c] = (l - log_z).exp();
            }
        }
        let value = Tensor::scalar(if targets.is_empty() {
            0.0
        } else {
            total / targets.len() as f64
        });
        let g = self.needs_grad(logits);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            g,
        )
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, scalars: &[Var]) -> Var {
        let total = scalars.iter().map(|&s| self.value(s).item()).sum();
        let g = self.any_grad(scalars);
        self.push(Tensor::scalar(total), Op::Sum(scalars.to_vec()), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).data.iter().sum();
        let g = self.needs_grad(a);
        self.push(Tensor::scalar(total), Op::SumAll(a), g)
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).shape(),
            (1, 1),
            "backward from a non-scalar"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    acc(*a, matmul_bt(g, vb));
                }
                if self.needs_grad(*b) {
                    acc(*b, matmul_at(va, g));
                }
            }
            Op::MatMulBt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    acc(*a, matmul(g, vb));
                }
                if self.needs_grad(*b) {
                    acc(*b, matmul_at(g, va));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if self.needs_grad(*b) {
                    let mut col = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            col.data[c] += g.data[r * g.cols + c];
                        }
                    }
                    acc(*b, col);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let prod = |x: &Tensor| {
                    let data = g.data.iter().zip(&x.data).map(|(p, q)| p * q).collect();
                    Tensor::from_vec(g.rows, g.cols, data)
                };
                if self.needs_grad(*a) {
                    acc(*a, prod(vb));
                }
                if self.needs_grad(*b) {
                    acc(*b, prod(va));
                }
            }
            Op::Scale(a, f) => {
                let data = g.data.iter().map(|x| x * f).collect();
                acc(*a, Tensor::from_vec(g.rows, g.cols, data));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let data = g
                    .data
                    .iter()
                    .zip(&y.data)
                    .map(|(gi, yi)| gi * (1.0 - yi * yi))
                    .collect();
                acc(*a, Tensor::from_vec(g.rows, g.cols, data));
            }
            Op::Gather(table, ids) => {
                let t = self.value(*table);
                let mut d = Tensor::zeros(t.rows, t.cols);
                for (r, &i) in ids.iter().enumerate() {
                    for c in 0..t.cols {
                        d.data[i * t.cols + c] += g.data[r * t.cols + c];
                    }
                }
                acc(*table, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    if self.needs_grad(p) {
                        let data = g.data[offset * g.cols..(offset + rows) * g.cols].to_vec();
                        acc(p, Tensor::from_vec(rows, g.cols, data));
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols;
                let cb = self.value(*b).cols;
                let mut ga = Vec::with_capacity(g.rows * ca);
                let mut gb = Vec::with_capacity(g.rows * cb);
                for r in 0..g.rows {
                    let row = g.row(r);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                acc(*a, Tensor::from_vec(g.rows, ca, ga));
                acc(*b, Tensor::from_vec(g.rows, cb, gb));
            }
            Op::Row(a, r) => {
                let va = self.value(*a);
                let mut d = Tensor::zeros(va.rows, va.cols);
                d.data[r * va.cols..(r + 1) * va.cols].copy_from_slice(&g.data);
                acc(*a, d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..y.cols {
                        d.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*a, d);
            }
            Op::Constrain {
                input,
                allowed,
                mass,
            } => {
                let y = &node.value;
                let dot: f64 = allowed.iter().map(|&i| g.data[i] * y.data[i]).sum();
                let mut d = Tensor::zeros(1, y.cols);
                for &i in allowed {
                    d.data[i] = (g.data[i] - dot) / mass;
                }
                acc(*input, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.item() / targets.len().max(1) as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d.data[r * d.cols + t] -= 1.0;
                }
                d.data.iter_mut().for_each(|x| *x *= scale);
                acc(*logits, d);
            }
            Op::Sum(parts) => {
                for &p in parts {
                    acc(p, g.clone());
                }
            }
            Op::SumAll(a) => {
                let va = self.value(*a);
                acc(
                    *a,
                    Tensor::from_vec(va.rows, va.cols, vec![g.item(); va.rows * va.cols]),
                );
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the given shape if none reached it.
    pub fn wrt(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}
