//! Wengert-list reverse-mode differentiation.
//!
//! Every op evaluates eagerly, stores its output on the tape and remembers
//! its inputs. `gradient` walks the list backwards once, accumulating
//! adjoints into each input.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels as k;
use super::{BitMatrix, PairRotation, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MulRow(usize, usize),
    LayerNorm { x: usize, rstd: Vec<f64> },
    Silu(usize),
    MaskedSoftmax { x: usize },
    Rotate { x: usize, rot: Arc<PairRotation> },
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    Mse(usize, usize),
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitive operations for a single forward pass.
///
/// A tape is single-threaded and owned by one training step or one
/// generation session.
#[derive(Debug)]
pub struct GradTape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints indexed by tape position.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` if `v` is not an
    /// ancestor of the loss or belongs to another tape.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.index]),
        }
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape(format!("variable {v:?} is not on tape {}", self.id)));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v).expect("var from this tape")].value
    }

    /// Records an input (parameter or data) tensor.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = k::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(out, Op::MatMul(ia, ib)))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = k::matmul_bt(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(out, Op::MatMulBt(ia, ib)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = k::add(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(out, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = k::sub(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(out, Op::Sub(ia, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = k::mul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(out, Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = k::scale(&self.nodes[ia].value, s);
        Ok(self.push(out, Op::Scale(ia, s)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ir) = (self.idx(a)?, self.idx(row)?);
        let out = k::add_row(&self.nodes[ia].value, &self.nodes[ir].value)?;
        Ok(self.push(out, Op::AddRow(ia, ir)))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ir) = (self.idx(a)?, self.idx(row)?);
        let out = k::mul_row(&self.nodes[ia].value, &self.nodes[ir].value)?;
        Ok(self.push(out, Op::MulRow(ia, ir)))
    }

    /// `x @ w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (out, rstd) = k::layer_norm_with_stats(&self.nodes[ix].value);
        Ok(self.push(out, Op::LayerNorm { x: ix, rstd }))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = k::silu(&self.nodes[ix].value);
        Ok(self.push(out, Op::Silu(ix)))
    }

    pub fn masked_softmax_rows(&mut self, x: Var, allow: &BitMatrix) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = k::masked_softmax_rows(&self.nodes[ix].value, allow)?;
        Ok(self.push(out, Op::MaskedSoftmax { x: ix }))
    }

    pub fn rotate_pairs(&mut self, x: Var, rot: Arc<PairRotation>) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = k::rotate_pairs(&self.nodes[ix].value, &rot, false)?;
        Ok(self.push(out, Op::Rotate { x: ix, rot }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = ids.iter().map(|&i| &self.nodes[i].value).collect();
        let out = k::concat_rows(&refs)?;
        Ok(self.push(out, Op::ConcatRows(ids)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = k::slice_rows(&self.nodes[ix].value, start, len)?;
        Ok(self.push(out, Op::SliceRows { x: ix, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = ids.iter().map(|&i| &self.nodes[i].value).collect();
        let out = k::concat_cols(&refs)?;
        Ok(self.push(out, Op::ConcatCols(ids)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = k::slice_cols(&self.nodes[ix].value, start, len)?;
        Ok(self.push(out, Op::SliceCols { x: ix, start }))
    }

    /// Scalar mean-squared error.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = k::mse(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(Tensor::scalar(out), Op::Mse(ia, ib)))
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = k::sum(&self.nodes[ix].value);
        Ok(self.push(Tensor::scalar(out), Op::Sum(ix)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn gradient(&self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; il + 1];
        grads[il] = Some(Tensor::full(self.nodes[il].value.shape(), 1.0));

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backward(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backward(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, k::matmul_bt(g, val(*b))?)?;
                accumulate(grads, *b, k::matmul_at(val(*a), g)?)?;
            }
            Op::MatMulBt(a, b) => {
                accumulate(grads, *a, k::matmul(g, val(*b))?)?;
                accumulate(grads, *b, k::matmul_at(g, val(*a))?)?;
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, k::scale(g, -1.0))?;
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, k::mul(g, val(*b))?)?;
                accumulate(grads, *b, k::mul(g, val(*a))?)?;
            }
            Op::Scale(a, s) => accumulate(grads, *a, k::scale(g, *s))?,
            Op::AddRow(a, r) => {
                accumulate(grads, *a, g.clone())?;
                let gr = k::sum_rows(g).reshape(val(*r).shape())?;
                accumulate(grads, *r, gr)?;
            }
            Op::MulRow(a, r) => {
                accumulate(grads, *a, k::mul_row(g, val(*r))?)?;
                let gr = k::sum_rows(&k::mul(g, val(*a))?).reshape(val(*r).shape())?;
                accumulate(grads, *r, gr)?;
            }
            Op::LayerNorm { x, rstd } => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = Vec::with_capacity(y.numel());
                for (row, &r) in rstd.iter().enumerate() {
                    let gy = g.row(row);
                    let yy = y.row(row);
                    let mean_g = gy.iter().sum::<f64>() / c as f64;
                    let mean_gy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    dx.extend(gy.iter().zip(yy).map(|(gi, yi)| r * (gi - mean_g - yi * mean_gy)));
                }
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?)?;
            }
            Op::Silu(x) => {
                let xv = val(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| {
                        let s = k::sigmoid(xi);
                        gi * s * (1.0 + xi * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?)?;
            }
            Op::MaskedSoftmax { x } => {
                let p = &node.value;
                let c = p.cols();
                let mut dx = vec![0.0; p.numel()];
                for row in 0..p.rows() {
                    let pr = p.row(row);
                    let gr = g.row(row);
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        // Disallowed entries have p == 0 and receive exactly 0.
                        dx[row * c + j] = pr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, Tensor::new(p.shape().to_vec(), dx)?)?;
            }
            Op::Rotate { x, rot } => {
                accumulate(grads, *x, k::rotate_pairs(g, rot, true)?)?;
            }
            Op::ConcatRows(ids) => {
                let mut start = 0;
                for &id in ids {
                    let rows = val(id).rows();
                    accumulate(grads, id, k::slice_rows(g, start, rows)?.reshape(val(id).shape())?)?;
                    start += rows;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut full = vec![0.0; xv.numel()];
                full[start * c..start * c + g.numel()].copy_from_slice(g.data());
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), full)?)?;
            }
            Op::ConcatCols(ids) => {
                let mut start = 0;
                for &id in ids {
                    let cols = val(id).cols();
                    accumulate(grads, id, k::slice_cols(g, start, cols)?.reshape(val(id).shape())?)?;
                    start += cols;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (c, len) = (xv.cols(), g.cols());
                let mut full = vec![0.0; xv.numel()];
                for r in 0..xv.rows() {
                    full[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), full)?)?;
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let s = 2.0 * g.item() / av.numel().max(1) as f64;
                let da = k::scale(&k::sub(av, bv)?, s);
                accumulate(grads, *b, k::scale(&da, -1.0))?;
                accumulate(grads, *a, da)?;
            }
            Op::Sum(x) => {
                accumulate(grads, *x, Tensor::full(val(*x).shape(), g.item()))?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: Tensor) -> Result<()> {
    match &mut grads[i] {
        Some(existing) => {
            if existing.shape() != g.shape() {
                return Err(Error::dim("accumulate", existing.shape(), g.shape()));
            }
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot => *slot = Some(g),
    }
    Ok(())
}
