use super::tensor::{softmax_slice, Tensor};
use super::AutodiffError;
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
///
/// A handle is only valid for the tape generation it was created in;
/// [`Tape::reset`] invalidates every outstanding handle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    generation: u64,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

/// Elementwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log1p,
    Square,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log1p,
    Square,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Binary {
        kind: Binary,
        a: usize,
        b: usize,
        broadcast: bool,
    },
    RowNorm(usize),
    ScaleRows(usize, usize),
    Unary(Unary, usize),
    Scale(usize, T),
    AddScalar(usize),
    Softmax(usize),
    LayerNorm {
        input: usize,
        inv_std: Vec<T>,
    },
    Sum(usize),
    Mean(usize),
    StopGradient,
    GatherRows(usize, Vec<usize>),
    SliceRows(usize, usize),
    ConcatRows(Vec<usize>),
    ScatterRows(Vec<(usize, usize)>),
    PlaceRows(usize, Vec<usize>),
    SelectCol(usize, usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<(usize, usize)>,
        probs: Tensor<T>,
    },
    Reshape(usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a define-by-run computation.
///
/// Nodes are stored in creation order, which is a valid topological order;
/// [`Tape::backward`] walks it once in reverse.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    generation: u64,
    backward_done: bool,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    generation: u64,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `var`; zeros when `var` does not reach the loss.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        assert_eq!(
            var.generation, self.generation,
            "stale Var passed to Gradients::wrt"
        );
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[var.id].clone()),
        }
    }

    /// Moves the gradient out, avoiding a copy for large parameters.
    pub fn take(&mut self, var: Var) -> Tensor<T> {
        assert_eq!(
            var.generation, self.generation,
            "stale Var passed to Gradients::take"
        );
        match self.grads[var.id].take() {
            Some(g) => g,
            None => Tensor::zeros(self.shapes[var.id].clone()),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            generation: 0,
            backward_done: false,
        }
    }

    /// Drops all nodes. Every previously issued [`Var`] becomes invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.generation += 1;
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize, AutodiffError> {
        if v.generation != self.generation || v.id >= self.nodes.len() {
            return Err(AutodiffError::StaleVar);
        }
        Ok(v.id)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let id = self.check(v).expect("stale Var passed to Tape::value");
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.check(v).expect("stale Var")].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(value, Op::MatMul(ia, ib), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ia].value.matmul_nt(&self.nodes[ib].value)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(value, Op::MatMulNt(ia, ib), rg))
    }

    /// Dispatches an elementwise kind. Binary kinds need `b`; unary kinds ignore it.
    pub fn elementwise(
        &mut self,
        kind: Elementwise,
        a: Var,
        b: Option<Var>,
    ) -> Result<Var, AutodiffError> {
        let binary = |k| (k, b.ok_or(AutodiffError::MissingOperand));
        match kind {
            Elementwise::Add => {
                let (k, b) = binary(Binary::Add);
                self.binary(k, a, b?)
            }
            Elementwise::Sub => {
                let (k, b) = binary(Binary::Sub);
                self.binary(k, a, b?)
            }
            Elementwise::Mul => {
                let (k, b) = binary(Binary::Mul);
                self.binary(k, a, b?)
            }
            Elementwise::Tanh => self.unary(Unary::Tanh, a),
            Elementwise::Sigmoid => self.unary(Unary::Sigmoid, a),
            Elementwise::Relu => self.unary(Unary::Relu, a),
            Elementwise::Exp => self.unary(Unary::Exp, a),
            Elementwise::Log1p => self.unary(Unary::Log1p, a),
            Elementwise::Square => self.unary(Unary::Square, a),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Exp, a)
    }

    pub fn log1p(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Log1p, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Square, a)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let broadcast = if va.shape() == vb.shape() {
            false
        } else if vb.len() == va.cols() && vb.cols() == va.cols() {
            true
        } else {
            return Err(AutodiffError::Shape {
                op: "elementwise",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        };
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let value = if broadcast {
            let c = va.cols();
            let bd = vb.data();
            va.map_indexed(|i, x| f(x, bd[i % c]))
        } else {
            va.zip_map(vb, f)
        };
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a: ia,
                b: ib,
                broadcast,
            },
            rg,
        ))
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let value = match kind {
            Unary::Tanh => v.map(T::tanh),
            Unary::Sigmoid => v.map(sigmoid),
            Unary::Relu => v.map(|x| x.max(T::zero())),
            Unary::Exp => v.map(T::exp),
            Unary::Log1p => v.map(T::ln_1p),
            Unary::Square => v.map(|x| x * x),
        };
        let rg = self.rg(&[ia]);
        Ok(self.push(value, Op::Unary(kind, ia), rg))
    }

    /// Multiplies row `i` of `a` (`r×c`) by `s[i]`, where `s` is `r×1`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var, AutodiffError> {
        let (ia, is) = (self.check(a)?, self.check(s)?);
        let (va, vs) = (&self.nodes[ia].value, &self.nodes[is].value);
        if vs.len() != va.rows() {
            return Err(AutodiffError::Shape {
                op: "scale_rows",
                lhs: va.shape().to_vec(),
                rhs: vs.shape().to_vec(),
            });
        }
        let c = va.cols();
        let sd = vs.data();
        let value = va.map_indexed(|i, x| x * sd[i / c]);
        let rg = self.rg(&[ia, is]);
        Ok(self.push(value, Op::ScaleRows(ia, is), rg))
    }

    /// Euclidean norm of each row: `r×c → r×1`. The gradient at a zero row is zero.
    pub fn row_norm(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let c = va.cols();
        let norms: Vec<T> = va
            .data()
            .chunks(c)
            .map(|r| r.iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        let value = Tensor::new(vec![norms.len(), 1], norms)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(value, Op::RowNorm(ia), rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var, AutodiffError> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|x| x * factor);
        let rg = self.rg(&[ia]);
        Ok(self.push(value, Op::Scale(ia, factor), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var, AutodiffError> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|x| x + c);
        let rg = self.rg(&[ia]);
        Ok(self.push(value, Op::AddScalar(ia), rg))
    }

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let c = v.cols();
        let data: Vec<T> = v.data().chunks(c).flat_map(softmax_slice).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(value, Op::Softmax(ia), rg))
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Result<Var, AutodiffError> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let c = v.cols();
        let n = T::of(c as f64);
        let mut inv_std = Vec::with_capacity(v.rows());
        let mut out = Vec::with_capacity(v.len());
        for row in v.data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|&x| (x - mean) * is));
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(value, Op::LayerNorm { input: ia, inv_std }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.check(a)?;
        let value = Tensor::scalar(self.nodes[ia].value.sum());
        let rg = self.rg(&[ia]);
        Ok(self.push(value, Op::Sum(ia), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let value = Tensor::scalar(v.sum() / T::of(v.len() as f64));
        let rg = self.rg(&[ia]);
        Ok(self.push(value, Op::Mean(ia), rg))
    }

    /// Forward identity; contributes no gradient to its operand.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.clone();
        Ok(self.push(value, Op::StopGradient, false))
    }

    /// Rows of `a` at `indices` (repeats allowed), as an `indices.len()×c` matrix.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let (r, c) = (v.rows(), v.cols());
        if indices.is_empty() {
            return Err(AutodiffError::InvalidShape(vec![0, c]));
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(AutodiffError::Index { index: i, len: r });
            }
            out.extend_from_slice(v.row_slice(i));
        }
        let value = Tensor::new(vec![indices.len(), c], out)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(value, Op::GatherRows(ia, indices.to_vec()), rg))
    }

    /// Contiguous rows `start..start+len` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let (r, c) = (v.rows(), v.cols());
        if len == 0 || start + len > r {
            return Err(AutodiffError::Index {
                index: start + len,
                len: r,
            });
        }
        let value = Tensor::new(
            vec![len, c],
            v.data()[start * c..(start + len) * c].to_vec(),
        )?;
        let rg = self.rg(&[ia]);
        Ok(self.push(value, Op::SliceRows(ia, start), rg))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let ids = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>, _>>()?;
        let first = ids.first().ok_or(AutodiffError::MissingOperand)?;
        let c = self.nodes[*first].value.cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &i in &ids {
            let v = &self.nodes[i].value;
            if v.cols() != c {
                return Err(AutodiffError::Shape {
                    op: "concat_rows",
                    lhs: self.nodes[*first].value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows, c], out)?;
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::ConcatRows(ids), rg))
    }

    /// Zero `rows×cols` matrix with single-row operands written at the given rows.
    pub fn scatter_rows(
        &mut self,
        rows: usize,
        cols: usize,
        parts: &[(usize, Var)],
    ) -> Result<Var, AutodiffError> {
        let mut data = vec![T::zero(); rows * cols];
        let mut ids = Vec::with_capacity(parts.len());
        for &(row, var) in parts {
            let i = self.check(var)?;
            let v = &self.nodes[i].value;
            if v.len() != cols {
                return Err(AutodiffError::Shape {
                    op: "scatter_rows",
                    lhs: vec![rows, cols],
                    rhs: v.shape().to_vec(),
                });
            }
            if row >= rows {
                return Err(AutodiffError::Index {
                    index: row,
                    len: rows,
                });
            }
            data[row * cols..(row + 1) * cols].copy_from_slice(v.data());
            ids.push((row, i));
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = ids.iter().any(|&(_, i)| self.nodes[i].requires_grad);
        Ok(self.push(value, Op::ScatterRows(ids), rg))
    }

    /// Zero `rows×c` matrix whose row `indices[i]` is row `i` of `block`. Indices must be distinct.
    pub fn place_rows(
        &mut self,
        rows: usize,
        indices: &[usize],
        block: Var,
    ) -> Result<Var, AutodiffError> {
        let ib = self.check(block)?;
        let v = &self.nodes[ib].value;
        let c = v.cols();
        if v.rows() != indices.len() {
            return Err(AutodiffError::Shape {
                op: "place_rows",
                lhs: vec![indices.len(), c],
                rhs: v.shape().to_vec(),
            });
        }
        let mut data = vec![T::zero(); rows * c];
        let mut seen = vec![false; rows];
        for (k, &r) in indices.iter().enumerate() {
            if r >= rows || seen[r] {
                return Err(AutodiffError::Index {
                    index: r,
                    len: rows,
                });
            }
            seen[r] = true;
            data[r * c..(r + 1) * c].copy_from_slice(v.row_slice(k));
        }
        let value = Tensor::new(vec![rows, c], data)?;
        let rg = self.rg(&[ib]);
        Ok(self.push(value, Op::PlaceRows(ib, indices.to_vec()), rg))
    }

    /// Column `j` of a matrix, as `r×1`.
    pub fn select_col(&mut self, a: Var, j: usize) -> Result<Var, AutodiffError> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let (r, c) = (v.rows(), v.cols());
        if j >= c {
            return Err(AutodiffError::Index { index: j, len: c });
        }
        let value = Tensor::new(vec![r, 1], (0..r).map(|i| v.at(i, j)).collect())?;
        let rg = self.rg(&[ia]);
        Ok(self.push(value, Op::SelectCol(ia, j), rg))
    }

    /// Summed negative log-likelihood of `class` at each `(row, class)` target.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[(usize, usize)],
    ) -> Result<Var, AutodiffError> {
        let il = self.check(logits)?;
        let v = &self.nodes[il].value;
        let (r, c) = (v.rows(), v.cols());
        let mut probs = Tensor::zeros(vec![r, c]);
        let mut total = T::zero();
        let mut seen = vec![false; r];
        for &(row, class) in targets {
            if row >= r || class >= c {
                return Err(AutodiffError::Index {
                    index: row.max(class),
                    len: r.min(c),
                });
            }
            let p = softmax_slice(v.row_slice(row));
            total = total - p[class].max(T::min_positive_value()).ln();
            if !seen[row] {
                probs.data_mut()[row * c..(row + 1) * c].copy_from_slice(&p);
                seen[row] = true;
            }
        }
        let rg = self.rg(&[il]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.reshape(shape)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(value, Op::Reshape(ia), rg))
    }

    /// Reverse pass from a scalar loss.
    ///
    /// May run once per tape generation; call [`Tape::reset`] before the next step.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        let il = self.check(loss)?;
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        if !self.nodes[il].value.is_scalar() {
            return Err(AutodiffError::NotScalar(
                self.nodes[il].value.shape().to_vec(),
            ));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[il] = Some(Tensor::full(
            self.nodes[il].value.shape().to_vec(),
            T::one(),
        ));

        for id in (0..=il).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            generation: self.generation,
        })
    }

    fn propagate(
        &self,
        id: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<(), AutodiffError> {
        let node = &self.nodes[id];
        let y = &node.value;
        let val = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].requires_grad;
        let mut acc = |i: usize, t: Tensor<T>| accumulate(grads, i, t);
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    acc(*a, g.matmul_nt(val(*b))?);
                }
                if wants(*b) {
                    acc(*b, val(*a).matmul_tn(g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a·bᵀ: da = g·b, db = gᵀ·a
                if wants(*a) {
                    acc(*a, g.matmul(val(*b))?);
                }
                if wants(*b) {
                    acc(*b, g.matmul_tn(val(*a))?);
                }
            }
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            } => {
                let (va, vb) = (val(*a), val(*b));
                let c = va.cols();
                if wants(*a) {
                    let ga = match kind {
                        Binary::Add | Binary::Sub => g.clone(),
                        Binary::Mul => {
                            let bd = vb.data();
                            g.map_indexed(|i, x| x * bd[if *broadcast { i % c } else { i }])
                        }
                    };
                    acc(*a, ga);
                }
                if wants(*b) {
                    let full = match kind {
                        Binary::Add => g.clone(),
                        Binary::Sub => g.map(|x| -x),
                        Binary::Mul => g.zip_map(va, |x, y| x * y),
                    };
                    let gb = if *broadcast {
                        let mut s = vec![T::zero(); c];
                        for row in full.data().chunks(c) {
                            for (acc, &x) in s.iter_mut().zip(row) {
                                *acc = *acc + x;
                            }
                        }
                        Tensor::new(vb.shape().to_vec(), s)?
                    } else {
                        full
                    };
                    acc(*b, gb);
                }
            }
            Op::ScaleRows(a, s) => {
                let (va, vs) = (val(*a), val(*s));
                let c = va.cols();
                if wants(*a) {
                    let sd = vs.data();
                    acc(*a, g.map_indexed(|i, x| x * sd[i / c]));
                }
                if wants(*s) {
                    let gs: Vec<T> = g
                        .data()
                        .chunks(c)
                        .zip(va.data().chunks(c))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(&x, &y)| x * y).sum())
                        .collect();
                    acc(*s, Tensor::new(vs.shape().to_vec(), gs)?);
                }
            }
            Op::Unary(kind, a) => {
                let x = val(*a);
                let ga = match kind {
                    Unary::Tanh => g.zip_map(y, |g, y| g * (T::one() - y * y)),
                    Unary::Sigmoid => g.zip_map(y, |g, y| g * y * (T::one() - y)),
                    Unary::Relu => g.zip_map(x, |g, x| if x > T::zero() { g } else { T::zero() }),
                    Unary::Exp => g.zip_map(y, |g, y| g * y),
                    Unary::Log1p => g.zip_map(x, |g, x| g / (T::one() + x)),
                    Unary::Square => g.zip_map(x, |g, x| g * (x + x)),
                };
                acc(*a, ga);
            }
            Op::RowNorm(a) => {
                let x = val(*a);
                let c = x.cols();
                let (gd, yd) = (g.data(), y.data());
                acc(
                    *a,
                    x.map_indexed(|i, v| {
                        let r = i / c;
                        if yd[r] > T::zero() {
                            gd[r] * v / yd[r]
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::Scale(a, f) => acc(*a, g.map(|x| x * *f)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(
                *a,
                Tensor::new(val(*a).shape().to_vec(), g.data().to_vec())?,
            ),
            Op::Softmax(a) => {
                let c = y.cols();
                let mut out = Vec::with_capacity(y.len());
                for (gr, yr) in g.data().chunks(c).zip(y.data().chunks(c)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    out.extend(gr.iter().zip(yr).map(|(&gi, &yi)| yi * (gi - dot)));
                }
                acc(*a, Tensor::new(y.shape().to_vec(), out)?);
            }
            Op::LayerNorm { input, inv_std } => {
                let c = y.cols();
                let n = T::of(c as f64);
                let mut out = Vec::with_capacity(y.len());
                for ((gr, yr), &is) in g.data().chunks(c).zip(y.data().chunks(c)).zip(inv_std) {
                    let gm = gr.iter().copied().sum::<T>() / n;
                    let gym = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    out.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(&gi, &yi)| is * (gi - gm - yi * gym)),
                    );
                }
                acc(*input, Tensor::new(y.shape().to_vec(), out)?);
            }
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape().to_vec(), g.item())),
            Op::Mean(a) => {
                let v = val(*a);
                acc(
                    *a,
                    Tensor::full(v.shape().to_vec(), g.item() / T::of(v.len() as f64)),
                );
            }
            Op::GatherRows(a, indices) => {
                let v = val(*a);
                let c = v.cols();
                let mut out = Tensor::zeros(v.shape().to_vec());
                let od = out.data_mut();
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        od[i * c + j] = od[i * c + j] + g.data()[k * c + j];
                    }
                }
                acc(*a, out);
            }
            Op::SliceRows(a, start) => {
                let v = val(*a);
                let c = v.cols();
                let mut out = Tensor::zeros(v.shape().to_vec());
                out.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*a, out);
            }
            Op::ConcatRows(ids) => {
                let mut offset = 0;
                for &i in ids {
                    let v = val(i);
                    if wants(i) {
                        acc(
                            i,
                            Tensor::new(
                                v.shape().to_vec(),
                                g.data()[offset..offset + v.len()].to_vec(),
                            )?,
                        );
                    }
                    offset += v.len();
                }
            }
            Op::ScatterRows(parts) => {
                let c = y.cols();
                for &(row, i) in parts {
                    if wants(i) {
                        acc(
                            i,
                            Tensor::new(
                                val(i).shape().to_vec(),
                                g.data()[row * c..(row + 1) * c].to_vec(),
                            )?,
                        );
                    }
                }
            }
            Op::PlaceRows(b, indices) => {
                let c = y.cols();
                let mut out = Vec::with_capacity(indices.len() * c);
                for &r in indices {
                    out.extend_from_slice(g.row_slice(r));
                }
                acc(*b, Tensor::new(val(*b).shape().to_vec(), out)?);
            }
            Op::SelectCol(a, j) => {
                let v = val(*a);
                let c = v.cols();
                let mut out = Tensor::zeros(v.shape().to_vec());
                for (i, &gi) in g.data().iter().enumerate() {
                    out.data_mut()[i * c + j] = gi;
                }
                acc(*a, out);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = probs.cols();
                let scale = g.item();
                let mut out = Tensor::zeros(probs.shape().to_vec());
                let od = out.data_mut();
                for &(row, class) in targets {
                    for j in 0..c {
                        let p = probs.data()[row * c + j];
                        let t = if j == class { T::one() } else { T::zero() };
                        od[row * c + j] = od[row * c + j] + scale * (p - t);
                    }
                }
                acc(*logits, out);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::super::max_gradient_error;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        // keep clear of the relu kink
        Tensor::from_fn(shape, |_| {
            let x: f64 = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                x
            } else {
                -x
            }
        })
    }

    fn check(
        shapes: &[Vec<usize>],
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let xs: Vec<_> = shapes
                .iter()
                .map(|s| rand_tensor(&mut rng, s.clone()))
                .collect();
            let err = max_gradient_error(&xs, 1e-5, 1e-6, &f).unwrap();
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn matmul_gradients() {
        check(&[vec![3, 4], vec![4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.square(y)?;
            t.sum(y)
        });
        check(&[vec![3, 4], vec![5, 4]], |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            let y = t.tanh(y)?;
            t.sum(y)
        });
    }

    #[test]
    fn elementwise_gradients_with_broadcast() {
        for kind in [Elementwise::Add, Elementwise::Sub, Elementwise::Mul] {
            check(&[vec![3, 4], vec![4]], |t, v| {
                let y = t.elementwise(kind, v[0], Some(v[1]))?;
                let y = t.square(y)?;
                t.sum(y)
            });
            check(&[vec![2, 3], vec![2, 3]], |t, v| {
                let y = t.elementwise(kind, v[0], Some(v[1]))?;
                let y = t.sigmoid(y)?;
                t.sum(y)
            });
        }
        for kind in [
            Elementwise::Tanh,
            Elementwise::Sigmoid,
            Elementwise::Relu,
            Elementwise::Exp,
            Elementwise::Square,
        ] {
            check(&[vec![2, 5]], |t, v| {
                let y = t.elementwise(kind, v[0], None)?;
                let w = t.constant(Tensor::from_fn(vec![2, 5], |i| i as f64 - 3.5));
                let y = t.mul(y, w)?;
                t.sum(y)
            });
        }
        check(&[vec![2, 5]], |t, v| {
            let s = t.square(v[0])?;
            let y = t.log1p(s)?;
            t.mean(y)
        });
    }

    #[test]
    fn structural_gradients() {
        check(&[vec![3, 4], vec![3, 1]], |t, v| {
            let y = t.scale_rows(v[0], v[1])?;
            let y = t.softmax(y)?;
            let w = t.constant(Tensor::from_fn(vec![3, 4], |i| (i as f64).sin()));
            let y = t.mul(y, w)?;
            t.sum(y)
        });
        check(&[vec![4, 6]], |t, v| {
            let y = t.layer_norm(v[0], 1e-5)?;
            let w = t.constant(Tensor::from_fn(vec![4, 6], |i| (i as f64 * 0.3).cos()));
            let y = t.mul(y, w)?;
            t.sum(y)
        });
        check(&[vec![5, 3]], |t, v| {
            let a = t.gather_rows(v[0], &[4, 0, 4])?;
            let b = t.slice_rows(v[0], 1, 2)?;
            let c = t.select_col(v[0], 2)?;
            let c = t.reshape(c, vec![1, 5])?;
            let r0 = t.slice_rows(a, 0, 1)?;
            let s = t.scatter_rows(4, 3, &[(1, r0)])?;
            let s = t.place_rows(5, &[3, 0, 1, 4], s)?;
            let cat = t.concat_rows(&[a, b, s])?;
            let cat = t.tanh(cat)?;
            let cat = t.scale(cat, 1.7)?;
            let c = t.exp(c)?;
            let c = t.add_scalar(c, 0.5)?;
            let l1 = t.sum(cat)?;
            let l2 = t.sum(c)?;
            let l = t.mul(l1, l2)?;
            t.square(l)
        });
        check(&[vec![3, 5]], |t, v| {
            t.cross_entropy(v[0], &[(0, 1), (2, 4), (0, 3)])
        });
        check(&[vec![3, 4]], |t, v| {
            let n = t.row_norm(v[0])?;
            let w = t.constant(Tensor::from_fn(vec![3, 1], |i| i as f64 - 0.5));
            let y = t.mul(n, w)?;
            t.sum(y)
        });
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::row(vec![1.0, 2.0]));
        let y = t.sum(x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.backward(y).unwrap_err(), AutodiffError::BackwardTwice);
        t.reset();
        assert_eq!(t.sum(x).unwrap_err(), AutodiffError::StaleVar);
    }

    #[test]
    fn unreachable_and_stopped_leaves_get_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::row(vec![1.0, 2.0]));
        let unused = t.param(Tensor::row(vec![3.0]));
        let s = t.stop_gradient(x).unwrap();
        let y = t.mul(x, s).unwrap();
        let y = t.sum(y).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0]);
        // d/dx Σ x·sg(x) = sg(x)
        assert_eq!(g.wrt(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(AutodiffError::NotScalar(_))));
    }

    #[test]
    fn broadcast_only_over_last_axis() {
        let mut t = Tape::<f64>::new();
        let a = t.param(Tensor::zeros(vec![2, 3]));
        let b = t.param(Tensor::zeros(vec![2]));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }
}
