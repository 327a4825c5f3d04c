use super::{argmax, dims2, softmax_in_place, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    SqHinge(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    MaxRows(Var, Vec<usize>),
    Softmax(Var),
    LogSumExp(Var),
    L1Rows(Var, Var),
    MaskCols(Var, Vec<bool>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so every
/// node's parents precede it.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, or zeros when the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn broadcast_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Vec<usize>, (usize, usize)), TensorError> {
    if a.shape == b.shape {
        let d = dims2(op, &a.shape)?;
        return Ok((a.shape.clone(), d));
    }
    let (ra, ca) = dims2(op, &a.shape)?;
    let (rb, cb) = dims2(op, &b.shape)?;
    let fit = |x: usize, y: usize| x == y || x == 1 || y == 1;
    if !fit(ra, rb) || !fit(ca, cb) {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (r, c) = (ra.max(rb), ca.max(cb));
    Ok((vec![r, c], (r, c)))
}

/// Value of `t` at broadcast position `(i, j)`.
#[inline]
fn bget(t: &Tensor, (tr, tc): (usize, usize), i: usize, j: usize) -> f64 {
    let ii = if tr == 1 { 0 } else { i };
    let jj = if tc == 1 { 0 } else { j };
    t.data[ii * tc + jj]
}

/// Sums a broadcast gradient back down to `target`'s shape.
fn reduce_to(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape == target {
        return g.clone();
    }
    let (r, c) = dims2("reduce", &g.shape).expect("broadcast output is rank ≤ 2");
    let (tr, tc) = dims2("reduce", target).expect("operand is rank ≤ 2");
    let mut out = vec![0.0; tr * tc];
    for i in 0..r {
        for j in 0..c {
            let ii = if tr == 1 { 0 } else { i };
            let jj = if tc == 1 { 0 } else { j };
            out[ii * tc + jj] += g.data[i * c + j];
        }
    }
    Tensor {
        shape: target.to_vec(),
        data: out,
    }
}

fn add_into(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.data.iter_mut().zip(contribution.data) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(Op::Leaf, value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor, parents: &[Var]) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(op, value, requires_grad))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (shape, (r, c)) = broadcast_dims(name, ta, tb)?;
        let value = if ta.shape == tb.shape {
            let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
            Tensor { shape, data }
        } else {
            let da = dims2(name, &ta.shape)?;
            let db = dims2(name, &tb.shape)?;
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    data.push(f(bget(ta, da, i, j), bget(tb, db, i, j)));
                }
            }
            Tensor { shape, data }
        };
        self.push(name, op, value, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, TensorError> {
        let value = self.value(a).map(f);
        self.push(name, op, value, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TensorError> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", Op::MatMul(a, b), value, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).transpose()?;
        self.push("transpose", Op::Transpose(a), value, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    /// Elementwise `max(0, x)²`.
    pub fn sq_hinge(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("sq_hinge", a, |x| x.max(0.0).powi(2), Op::SqHinge(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = Tensor::scalar(self.value(a).data.iter().sum());
        self.push("sum", Op::Sum(a), value, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let value = Tensor::scalar(t.data.iter().sum::<f64>() / t.len() as f64);
        self.push("mean", Op::Mean(a), value, &[a])
    }

    /// Per-row sums as an `r×1` column.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (r, c) = dims2("sum_rows", &t.shape)?;
        let data = (0..r).map(|i| t.data[i * c..(i + 1) * c].iter().sum()).collect();
        self.push("sum_rows", Op::SumRows(a), Tensor::matrix(r, 1, data)?, &[a])
    }

    /// Per-column sums as a `1×c` row.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (r, c) = dims2("sum_cols", &t.shape)?;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (d, v) in data.iter_mut().zip(&t.data[i * c..(i + 1) * c]) {
                *d += v;
            }
        }
        self.push("sum_cols", Op::SumCols(a), Tensor::matrix(1, c, data)?, &[a])
    }

    /// Per-row maxima as an `r×1` column.
    pub fn max_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (r, c) = dims2("max_rows", &t.shape)?;
        let idx: Vec<usize> = (0..r).map(|i| argmax(&t.data[i * c..(i + 1) * c])).collect();
        let data = idx.iter().enumerate().map(|(i, &j)| t.data[i * c + j]).collect();
        self.push("max_rows", Op::MaxRows(a, idx), Tensor::matrix(r, 1, data)?, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).softmax_rows()?;
        self.push("softmax", Op::Softmax(a), value, &[a])
    }

    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).logsumexp_rows()?;
        self.push("logsumexp", Op::LogSumExp(a), value, &[a])
    }

    /// Row-wise L1 distance `Σ_j |a_ij − b_ij|` as an `r×1` column.
    pub fn l1_rows(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(TensorError::ShapeMismatch {
                op: "l1_rows",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (r, c) = dims2("l1_rows", &ta.shape)?;
        let data = (0..r)
            .map(|i| {
                let s = i * c..(i + 1) * c;
                ta.data[s.clone()]
                    .iter()
                    .zip(&tb.data[s])
                    .map(|(x, y)| (x - y).abs())
                    .sum()
            })
            .collect();
        self.push("l1_rows", Op::L1Rows(a, b), Tensor::matrix(r, 1, data)?, &[a, b])
    }

    /// Overwrites columns with `keep[j] == false` by `fill`; those entries
    /// receive no gradient.
    pub fn mask_cols(&mut self, a: Var, keep: &[bool], fill: f64) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (r, c) = dims2("mask_cols", &t.shape)?;
        if keep.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "mask_cols",
                lhs: t.shape.clone(),
                rhs: vec![keep.len()],
            });
        }
        let mut value = t.clone();
        for i in 0..r {
            for (j, &k) in keep.iter().enumerate() {
                if !k {
                    value.data[i * c + j] = fill;
                }
            }
        }
        self.push("mask_cols", Op::MaskCols(a, keep.to_vec()), value, &[a])
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: root_value.shape.clone(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::filled(&root_value.shape, 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(node, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        adj.resize(self.nodes.len(), None);
        Ok(Gradients { adjoints: adj, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<(), TensorError> {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let send = |v: Var, t: Tensor, adj: &mut [Option<Tensor>]| {
            if wants(v) {
                add_into(&mut adj[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, reduce_to(g, &val(*a).shape), adj);
                send(*b, reduce_to(g, &val(*b).shape), adj);
            }
            Op::Sub(a, b) => {
                send(*a, reduce_to(g, &val(*a).shape), adj);
                send(*b, reduce_to(g, &val(*b).shape).map(|x| -x), adj);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (r, c) = dims2("mul", &g.shape)?;
                let (da, db) = (dims2("mul", &ta.shape)?, dims2("mul", &tb.shape)?);
                if wants(*a) {
                    let mut ga = g.clone();
                    for i in 0..r {
                        for j in 0..c {
                            ga.data[i * c + j] *= bget(tb, db, i, j);
                        }
                    }
                    send(*a, reduce_to(&ga, &ta.shape), adj);
                }
                if wants(*b) {
                    let mut gb = g.clone();
                    for i in 0..r {
                        for j in 0..c {
                            gb.data[i * c + j] *= bget(ta, da, i, j);
                        }
                    }
                    send(*b, reduce_to(&gb, &tb.shape), adj);
                }
            }
            Op::Scale(a, c) => send(*a, g.map(|x| c * x), adj),
            Op::AddScalar(a) => send(*a, g.clone(), adj),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    let ga = g.matmul(&tb.transpose()?)?.reshape(ta.shape.clone())?;
                    send(*a, ga, adj);
                }
                if wants(*b) {
                    let gb = ta.transpose()?.matmul(g)?.reshape(tb.shape.clone())?;
                    send(*b, gb, adj);
                }
            }
            Op::Transpose(a) => {
                let ga = g.transpose()?.reshape(val(*a).shape.clone())?;
                send(*a, ga, adj);
            }
            Op::Relu(a) => send(*a, zip_map(g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 }), adj),
            Op::Exp(a) => send(*a, zip_map(g, &node.value, |g, y| g * y), adj),
            Op::Log(a) => send(*a, zip_map(g, val(*a), |g, x| g / x), adj),
            Op::Abs(a) => send(*a, zip_map(g, val(*a), |g, x| g * sign(x)), adj),
            Op::SqHinge(a) => send(*a, zip_map(g, val(*a), |g, x| g * 2.0 * x.max(0.0)), adj),
            Op::Sum(a) => {
                let s = g.data[0];
                send(*a, val(*a).map(|_| s), adj);
            }
            Op::Mean(a) => {
                let t = val(*a);
                let s = g.data[0] / t.len() as f64;
                send(*a, t.map(|_| s), adj);
            }
            Op::SumRows(a) => {
                let t = val(*a);
                let (r, c) = dims2("sum_rows", &t.shape)?;
                let mut ga = t.clone();
                for i in 0..r {
                    ga.data[i * c..(i + 1) * c].fill(g.data[i]);
                }
                send(*a, ga, adj);
            }
            Op::SumCols(a) => {
                let t = val(*a);
                let (r, c) = dims2("sum_cols", &t.shape)?;
                let mut ga = t.clone();
                for i in 0..r {
                    ga.data[i * c..(i + 1) * c].copy_from_slice(&g.data[..c]);
                }
                send(*a, ga, adj);
            }
            Op::MaxRows(a, idx) => {
                let t = val(*a);
                let c = dims2("max_rows", &t.shape)?.1;
                let mut ga = Tensor::zeros(&t.shape);
                for (i, &j) in idx.iter().enumerate() {
                    ga.data[i * c + j] = g.data[i];
                }
                send(*a, ga, adj);
            }
            Op::Softmax(a) => {
                let s = &node.value;
                let (r, c) = dims2("softmax", &s.shape)?;
                let mut ga = s.clone();
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let dot: f64 = g.data[row.clone()]
                        .iter()
                        .zip(&s.data[row.clone()])
                        .map(|(x, y)| x * y)
                        .sum();
                    for j in row {
                        ga.data[j] = s.data[j] * (g.data[j] - dot);
                    }
                }
                send(*a, ga, adj);
            }
            Op::LogSumExp(a) => {
                let t = val(*a);
                let (r, c) = dims2("logsumexp", &t.shape)?;
                let mut ga = t.clone();
                for i in 0..r {
                    let row = &mut ga.data[i * c..(i + 1) * c];
                    softmax_in_place(row);
                    for v in row.iter_mut() {
                        *v *= g.data[i];
                    }
                }
                send(*a, ga, adj);
            }
            Op::L1Rows(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (r, c) = dims2("l1_rows", &ta.shape)?;
                let mut ga = ta.clone();
                for i in 0..r {
                    for j in 0..c {
                        let k = i * c + j;
                        ga.data[k] = g.data[i] * sign(ta.data[k] - tb.data[k]);
                    }
                }
                if wants(*b) {
                    send(*b, ga.map(|x| -x), adj);
                }
                send(*a, ga, adj);
            }
            Op::MaskCols(a, keep) => {
                let (r, c) = dims2("mask_cols", &g.shape)?;
                let mut ga = g.clone();
                for i in 0..r {
                    for (j, &k) in keep.iter().enumerate() {
                        if !k {
                            ga.data[i * c + j] = 0.0;
                        }
                    }
                }
                send(*a, ga, adj);
            }
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: g.data.iter().zip(&x.data).map(|(&a, &b)| f(a, b)).collect(),
    }
}
