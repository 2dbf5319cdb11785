//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! A [`Tape`] records every operation as it is evaluated. Calling
//! [`Tape::backward`] on a scalar node replays the tape in reverse and
//! accumulates vector-Jacobian products into every node that depends on a
//! leaf created with [`Tape::leaf`]. Nodes built only from constants carry no
//! gradient and are skipped during the reverse sweep.

use crate::error::{Error, Result};

use super::tensor::{gemm, GemmOperand, Tensor};

/// Below this argument the derivative of `sqrt` is taken to be zero.
pub const SQRT_GRAD_FLOOR: f64 = 1e-24;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { a: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    SubCol { a: Var, col: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Softmax(Var),
    LogClamped { x: Var, floor: f64 },
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    SumRows(Var),
    Mean(Var),
    Gather { a: Var, index: Vec<usize> },
    MaxExcluding { a: Var, argmax: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-use recording of a differentiable computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the node's shape if nothing flowed into it.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
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

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        value.check_finite("leaf")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input treated as a constant; no gradient flows through it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        value.check_finite("constant")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.check_finite(op_name(&op))?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a · b` for matrices.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for matrices, without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.value(a).as_matrix_dims()?;
        let (br, bc) = self.value(b).as_matrix_dims()?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        let bop = if trans_b {
            GemmOperand::transposed(self.value(b).data(), bc)
        } else {
            GemmOperand::plain(self.value(b).data(), bc)
        };
        gemm(
            GemmOperand::plain(self.value(a).data(), k),
            bop,
            (m, k, n),
            &mut out,
            false,
        );
        self.push(
            Tensor::matrix(m, n, out)?,
            Op::MatMul { a, b, trans_b },
            &[a, b],
        )
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).as_matrix_dims()?;
        let b = self.value(bias);
        if b.shape() != [n] {
            return Err(Error::Dimension(format!(
                "bias {:?} for {m}x{n} matrix",
                b.shape()
            )));
        }
        let mut out = self.value(a).clone();
        for i in 0..m {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias { a, bias }, &[a, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// `out[i, k] = a[i, k] − col[i]`.
    pub fn sub_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, _) = self.value(a).as_matrix_dims()?;
        let c = self.value(col);
        if c.shape() != [m] {
            return Err(Error::Dimension(format!(
                "column {:?} for matrix with {m} rows",
                c.shape()
            )));
        }
        let c = c.data().to_vec();
        let mut out = self.value(a).clone();
        for (i, ci) in c.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v -= ci);
        }
        self.push(out, Op::SubCol { a, col }, &[a, col])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + offset);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a), &[a])
    }

    /// Max-shifted softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.ndim() == 0 || src.ndim() > 2 {
            return Err(Error::Dimension(format!(
                "softmax over shape {:?}",
                src.shape()
            )));
        }
        let mut out = src.clone();
        for i in 0..out.rows() {
            super::softmax_in_place(out.row_mut(i));
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    /// `ln(max(x, floor))`; the derivative is zero where `x < floor`.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.push(out, Op::LogClamped { x, floor }, &[x])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v < 0.0) {
            return Err(Error::Numeric("sqrt of a negative value".into()));
        }
        let out = self.value(a).map(f64::sqrt);
        self.push(out, Op::Sqrt(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Row sums of a matrix: `m×n → m`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, _) = t.as_matrix_dims()?;
        let out = (0..m).map(|i| t.row(i).iter().sum()).collect();
        self.push(Tensor::vector(out), Op::SumRows(a), &[a])
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Domain("mean of an empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// `out[i] = a[i, index[i]]`.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.as_matrix_dims()?;
        check_index(m, n, index)?;
        let out = index
            .iter()
            .enumerate()
            .map(|(i, &k)| t.row(i)[k])
            .collect();
        self.push(
            Tensor::vector(out),
            Op::Gather {
                a,
                index: index.to_vec(),
            },
            &[a],
        )
    }

    /// `out[i] = max_{k ≠ exclude[i]} a[i, k]`, ties resolved to the lowest index.
    pub fn max_excluding(&mut self, a: Var, exclude: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.as_matrix_dims()?;
        if n < 2 {
            return Err(Error::Domain(
                "max over other entries needs at least two columns".into(),
            ));
        }
        check_index(m, n, exclude)?;
        let argmax: Vec<usize> = exclude
            .iter()
            .enumerate()
            .map(|(i, &y)| argmax_excluding(t.row(i), y))
            .collect();
        let out = argmax
            .iter()
            .enumerate()
            .map(|(i, &k)| t.row(i)[k])
            .collect();
        self.push(Tensor::vector(out), Op::MaxExcluding { a, argmax }, &[a])
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::Capability(format!(
                "gradients need a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.value.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let av = self.value(a);
                let bv = self.value(b);
                let (m, k) = av.as_matrix_dims()?;
                let (br, bc) = bv.as_matrix_dims()?;
                let n = if trans_b { br } else { bc };
                if self.wants(a) {
                    // dA = dC · op(B)ᵀ
                    let bop = if trans_b {
                        GemmOperand::plain(bv.data(), bc)
                    } else {
                        GemmOperand::transposed(bv.data(), bc)
                    };
                    let mut da = vec![0.0; m * k];
                    gemm(
                        GemmOperand::plain(g.data(), n),
                        bop,
                        (m, n, k),
                        &mut da,
                        false,
                    );
                    accumulate(grads, a, Tensor::matrix(m, k, da)?)?;
                }
                if self.wants(b) {
                    let db = if trans_b {
                        // d(B) for B stored n×k: dCᵀ · A
                        let mut db = vec![0.0; n * k];
                        gemm(
                            GemmOperand::transposed(g.data(), n),
                            GemmOperand::plain(av.data(), k),
                            (n, m, k),
                            &mut db,
                            false,
                        );
                        Tensor::matrix(n, k, db)?
                    } else {
                        let mut db = vec![0.0; k * n];
                        gemm(
                            GemmOperand::transposed(av.data(), k),
                            GemmOperand::plain(g.data(), n),
                            (k, m, n),
                            &mut db,
                            false,
                        );
                        Tensor::matrix(k, n, db)?
                    };
                    accumulate(grads, b, db)?;
                }
            }
            &Op::AddBias { a, bias } => {
                if self.wants(a) {
                    accumulate(grads, a, g.clone())?;
                }
                if self.wants(bias) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for i in 0..g.rows() {
                        db.iter_mut().zip(g.row(i)).for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, bias, Tensor::vector(db))?;
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.clone())?;
                }
                if self.wants(b) {
                    accumulate(grads, b, g.clone())?;
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.clone())?;
                }
                if self.wants(b) {
                    accumulate(grads, b, g.map(|v| -v))?;
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.zip_map(self.value(b), |gv, bv| gv * bv)?)?;
                }
                if self.wants(b) {
                    accumulate(grads, b, g.zip_map(self.value(a), |gv, av| gv * av)?)?;
                }
            }
            &Op::SubCol { a, col } => {
                if self.wants(a) {
                    accumulate(grads, a, g.clone())?;
                }
                if self.wants(col) {
                    let dc = (0..g.rows())
                        .map(|i| -g.row(i).iter().sum::<f64>())
                        .collect();
                    accumulate(grads, col, Tensor::vector(dc))?;
                }
            }
            &Op::Scale(a, factor) => accumulate(grads, a, g.map(|v| v * factor))?,
            &Op::AddScalar(a) => accumulate(grads, a, g.clone())?,
            &Op::Relu(a) => {
                let d = g.zip_map(self.value(a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                accumulate(grads, a, d)?;
            }
            &Op::Softmax(a) => {
                let p = &node.value;
                let mut d = g.clone();
                for i in 0..p.rows() {
                    let pr = p.row(i);
                    let dot: f64 = g.row(i).iter().zip(pr).map(|(x, y)| x * y).sum();
                    d.row_mut(i)
                        .iter_mut()
                        .zip(pr)
                        .for_each(|(dv, &pv)| *dv = pv * (*dv - dot));
                }
                accumulate(grads, a, d)?;
            }
            &Op::LogClamped { x, floor } => {
                let d = g.zip_map(
                    self.value(x),
                    |gv, xv| if xv >= floor { gv / xv } else { 0.0 },
                )?;
                accumulate(grads, x, d)?;
            }
            &Op::Sqrt(a) => {
                let d = g.zip_map(self.value(a), |gv, xv| {
                    if xv < SQRT_GRAD_FLOOR {
                        0.0
                    } else {
                        gv * 0.5 / xv.sqrt()
                    }
                })?;
                accumulate(grads, a, d)?;
            }
            &Op::Square(a) => {
                let d = g.zip_map(self.value(a), |gv, xv| 2.0 * xv * gv)?;
                accumulate(grads, a, d)?;
            }
            &Op::Sum(a) => {
                let s = g.data()[0];
                accumulate(grads, a, Tensor::full(self.value(a).shape(), s))?;
            }
            &Op::Mean(a) => {
                let t = self.value(a);
                let s = g.data()[0] / t.len() as f64;
                accumulate(grads, a, Tensor::full(t.shape(), s))?;
            }
            &Op::SumRows(a) => {
                let t = self.value(a);
                let mut d = Tensor::zeros(t.shape());
                for i in 0..t.rows() {
                    let gi = g.data()[i];
                    d.row_mut(i).iter_mut().for_each(|v| *v = gi);
                }
                accumulate(grads, a, d)?;
            }
            Op::Gather { a, index } => scatter_rows(grads, *a, self.value(*a).shape(), index, g)?,
            Op::MaxExcluding { a, argmax } => {
                scatter_rows(grads, *a, self.value(*a).shape(), argmax, g)?
            }
        }
        Ok(())
    }
}

/// Index of the largest entry other than `exclude`, lowest index on ties.
pub fn argmax_excluding(row: &[f64], exclude: usize) -> usize {
    let mut best: Option<usize> = None;
    for (k, &v) in row.iter().enumerate() {
        if k == exclude {
            continue;
        }
        match best {
            Some(b) if row[b] >= v => {}
            _ => best = Some(k),
        }
    }
    best.expect("row needs an entry besides the excluded one")
}

fn check_index(m: usize, n: usize, index: &[usize]) -> Result<()> {
    if index.len() != m {
        return Err(Error::Dimension(format!(
            "{} indices for {m} rows",
            index.len()
        )));
    }
    if let Some(&bad) = index.iter().find(|&&k| k >= n) {
        return Err(Error::Domain(format!(
            "index {bad} out of range for {n} columns"
        )));
    }
    Ok(())
}

fn scatter_rows(
    grads: &mut [Option<Tensor>],
    a: Var,
    shape: &[usize],
    index: &[usize],
    g: &Tensor,
) -> Result<()> {
    let mut d = Tensor::zeros(shape);
    for (i, &k) in index.iter().enumerate() {
        d.row_mut(i)[k] = g.data()[i];
    }
    accumulate(grads, a, d)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => {
            existing.check_same_shape(&delta)?;
            existing
                .data_mut()
                .iter_mut()
                .zip(delta.data())
                .for_each(|(e, d)| *e += d);
        }
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::AddBias { .. } => "add_bias",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::SubCol { .. } => "sub_col",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Relu(..) => "relu",
        Op::Softmax(..) => "softmax",
        Op::LogClamped { .. } => "log",
        Op::Sqrt(..) => "sqrt",
        Op::Square(..) => "square",
        Op::Sum(..) => "sum",
        Op::SumRows(..) => "sum_rows",
        Op::Mean(..) => "mean",
        Op::Gather { .. } => "gather",
        Op::MaxExcluding { .. } => "max_excluding",
    }
}
