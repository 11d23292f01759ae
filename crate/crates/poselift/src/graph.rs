//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] is an eager tape: each primitive computes its output tensor
//! immediately and records how it was produced. Nodes are appended in
//! execution order, so the record is topologically sorted by construction
//! and one reverse sweep in [`Graph::backward`] yields gradients for every
//! leaf. A graph and its tape belong to one thread; parallelism happens
//! across independent graphs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value slot in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

/// Batch statistics computed by a train-mode batchnorm node, returned to the
/// caller so running buffers can be updated outside the tape.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

enum Op {
    Leaf,
    Matmul {
        x: Value,
        w: Value,
    },
    Add {
        a: Value,
        b: Value,
        broadcast: bool,
    },
    Hadamard {
        a: Value,
        b: Value,
    },
    Scale {
        x: Value,
        factor: f64,
    },
    Relu {
        x: Value,
    },
    Sigmoid {
        x: Value,
    },
    Tanh {
        x: Value,
    },
    /// Normalizes by the cached batch statistics; `norm` is the pre-affine x̂.
    BatchNormTrain {
        x: Value,
        gamma: Value,
        beta: Value,
        inv_std: Tensor,
        norm: Tensor,
    },
    /// Pure affine map using frozen running statistics.
    BatchNormEval {
        x: Value,
        gamma: Value,
        beta: Value,
        inv_std: Tensor,
        norm: Tensor,
    },
    Mse {
        a: Value,
        b: Value,
    },
    ConcatRows {
        parts: Vec<Value>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by [`Value`].
#[derive(Debug)]
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
}

impl GradMap {
    pub fn get(&self, v: Value) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, zeros if the leaf never received one.
    pub fn get_or_zeros(&self, v: Value, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Value {
        self.nodes.push(Node { value, op });
        Value(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Insert a leaf (input or parameter) into the tape.
    pub fn leaf(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Leaf)
    }

    /// `y = x · Wᵀ` with `x: [B, I]` (or `[I]`) and `w: [O, I]`.
    pub fn matmul(&mut self, x: Value, w: Value) -> Result<Value> {
        let (xt, wt) = (self.value(x), self.value(w));
        if wt.shape().len() != 2 || xt.cols() != wt.cols() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: xt.shape().to_vec(),
                rhs: wt.shape().to_vec(),
            });
        }
        let (rows, inner, out) = (xt.rows(), xt.cols(), wt.rows());
        let mut data = vec![0.0; rows * out];
        for b in 0..rows {
            let xrow = xt.row(b);
            for o in 0..out {
                let wrow = wt.row(o);
                let mut acc = 0.0;
                for i in 0..inner {
                    acc += xrow[i] * wrow[i];
                }
                data[b * out + o] = acc;
            }
        }
        let shape = if xt.shape().len() == 1 {
            vec![out]
        } else {
            vec![rows, out]
        };
        let y = Tensor::new(shape, data)?;
        Ok(self.push(y, Op::Matmul { x, w }))
    }

    /// Elementwise add; also broadcasts a 1-D bias over the rows of a matrix.
    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() == bt.shape() {
            let y = at.zip(bt, "add", |x, y| x + y)?;
            return Ok(self.push(y, Op::Add { a, b, broadcast: false }));
        }
        if bt.shape().len() == 1 && at.cols() == bt.len() && at.shape().len() == 2 {
            let cols = at.cols();
            let data = at
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + bt.data()[i % cols])
                .collect();
            let y = Tensor::new(at.shape().to_vec(), data)?;
            return Ok(self.push(y, Op::Add { a, b, broadcast: true }));
        }
        Err(Error::ShapeMismatch {
            op: "add",
            lhs: at.shape().to_vec(),
            rhs: bt.shape().to_vec(),
        })
    }

    pub fn hadamard(&mut self, a: Value, b: Value) -> Result<Value> {
        let y = self.value(a).zip(self.value(b), "hadamard", |x, y| x * y)?;
        Ok(self.push(y, Op::Hadamard { a, b }))
    }

    pub fn scale(&mut self, x: Value, factor: f64) -> Value {
        let y = self.value(x).map(|v| v * factor);
        self.push(y, Op::Scale { x, factor })
    }

    pub fn relu(&mut self, x: Value) -> Value {
        let y = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(y, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Value) -> Value {
        let y = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(y, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Value) -> Value {
        let y = self.value(x).map(f64::tanh);
        self.push(y, Op::Tanh { x })
    }

    /// Train-mode batch normalization over the row (batch) dimension.
    ///
    /// Requires at least 2 rows; a single sample has no batch variance.
    /// Returns the output plus the batch statistics so the caller can update
    /// its running buffers.
    pub fn batchnorm_train(
        &mut self,
        x: Value,
        gamma: Value,
        beta: Value,
        eps: f64,
    ) -> Result<(Value, BatchStats)> {
        let xt = self.value(x);
        let (rows, cols) = (xt.rows(), xt.cols());
        if rows < 2 {
            return Err(Error::DegenerateBatch { size: rows });
        }
        self.check_feature_dim(x, gamma, beta)?;
        let xt = self.value(x);
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(xt.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                let d = xt.at(r, c) - mean[c];
                var[c] += d * d;
            }
        }
        for v in &mut var {
            *v /= rows as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut norm = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                norm[r * cols + c] = (xt.at(r, c) - mean[c]) * inv_std[c];
            }
        }
        let gt = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let data: Vec<f64> = norm
            .iter()
            .enumerate()
            .map(|(i, &n)| gt[i % cols] * n + bt[i % cols])
            .collect();
        let shape = self.value(x).shape().to_vec();
        let stats = BatchStats {
            mean: Tensor::vector(mean),
            var: Tensor::vector(var),
        };
        let norm = Tensor::new(shape.clone(), norm)?;
        let y = Tensor::new(shape, data)?;
        let inv_std = Tensor::vector(inv_std);
        let v = self.push(
            y,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                inv_std,
                norm,
            },
        );
        Ok((v, stats))
    }

    /// Eval-mode batch normalization: a fixed affine map from frozen running
    /// statistics. No state is read from or written to the tape beyond the
    /// recorded node.
    pub fn batchnorm_eval(
        &mut self,
        x: Value,
        gamma: Value,
        beta: Value,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Value> {
        self.check_feature_dim(x, gamma, beta)?;
        let xt = self.value(x);
        let cols = xt.cols();
        if running_mean.len() != cols || running_var.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "batchnorm_eval",
                lhs: xt.shape().to_vec(),
                rhs: running_mean.shape().to_vec(),
            });
        }
        let inv_std: Vec<f64> = running_var
            .data()
            .iter()
            .map(|&v| 1.0 / (v + eps).sqrt())
            .collect();
        let norm: Vec<f64> = xt
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - running_mean.data()[i % cols]) * inv_std[i % cols])
            .collect();
        let gt = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let data: Vec<f64> = norm
            .iter()
            .enumerate()
            .map(|(i, &n)| gt[i % cols] * n + bt[i % cols])
            .collect();
        let shape = self.value(x).shape().to_vec();
        let norm = Tensor::new(shape.clone(), norm)?;
        let y = Tensor::new(shape, data)?;
        let inv_std = Tensor::vector(inv_std);
        Ok(self.push(
            y,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                inv_std,
                norm,
            },
        ))
    }

    fn check_feature_dim(&self, x: Value, gamma: Value, beta: Value) -> Result<()> {
        let cols = self.value(x).cols();
        for v in [gamma, beta] {
            let t = self.value(v);
            if t.shape().len() != 1 || t.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "batchnorm",
                    lhs: self.value(x).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Sum of squared differences, reduced to a scalar. No averaging: this is
    /// the ‖·‖₂² convention all losses in the crate share.
    pub fn mse(&mut self, a: Value, b: Value) -> Result<Value> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: at.shape().to_vec(),
                rhs: bt.shape().to_vec(),
            });
        }
        let sum: f64 = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(sum), Op::Mse { a, b }))
    }

    /// Stack values along the row dimension; 1-D inputs count as one row.
    pub fn concat_rows(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_rows on empty slice".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let y = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(y, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Smallest |x| among all ReLU inputs on the tape (infinity when the
    /// tape has none). Finite-difference checks use this to reject
    /// configurations sitting on the kink, where the derivative does not
    /// exist and central differences are meaningless.
    pub fn relu_kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                for &v in self.value(x).data() {
                    margin = margin.min(v.abs());
                }
            }
        }
        margin
    }

    /// Smallest per-feature batch variance among train-mode batchnorm nodes
    /// (infinity when there are none). Near-zero batch variance makes the
    /// normalization extremely curved and breaks finite differences.
    pub fn min_train_bn_variance(&self) -> f64 {
        let mut min_var = f64::INFINITY;
        for node in &self.nodes {
            if let Op::BatchNormTrain { inv_std, .. } = &node.op {
                for &s in inv_std.data() {
                    min_var = min_var.min(1.0 / (s * s));
                }
            }
        }
        min_var
    }

    /// Reverse-mode sweep from a scalar loss. Returns a gradient for every
    /// value slot that influences the loss; leaves the tape unchanged.
    pub fn backward(&self, loss: Value) -> Result<GradMap> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::Matmul { x, w } => {
                    let (xt, wt) = (self.value(*x), self.value(*w));
                    let (rows, inner, out) = (xt.rows(), xt.cols(), wt.rows());
                    let mut dx = vec![0.0; rows * inner];
                    let mut dw = vec![0.0; out * inner];
                    for b in 0..rows {
                        for o in 0..out {
                            let g = gy.data()[b * out + o];
                            if g == 0.0 {
                                continue;
                            }
                            let wrow = wt.row(o);
                            let xrow = xt.row(b);
                            for i in 0..inner {
                                dx[b * inner + i] += g * wrow[i];
                                dw[o * inner + i] += g * xrow[i];
                            }
                        }
                    }
                    let dx = Tensor::new(xt.shape().to_vec(), dx)?;
                    let dw = Tensor::new(wt.shape().to_vec(), dw)?;
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::Add { a, b, broadcast } => {
                    if *broadcast {
                        let cols = self.value(*b).len();
                        let mut db = vec![0.0; cols];
                        for (i, &g) in gy.data().iter().enumerate() {
                            db[i % cols] += g;
                        }
                        accumulate(&mut grads, *b, Tensor::vector(db));
                        accumulate(&mut grads, *a, gy);
                    } else {
                        accumulate(&mut grads, *a, gy.clone());
                        accumulate(&mut grads, *b, gy);
                    }
                }
                Op::Hadamard { a, b } => {
                    let da = gy.zip(self.value(*b), "hadamard_bwd", |g, v| g * v)?;
                    let db = gy.zip(self.value(*a), "hadamard_bwd", |g, v| g * v)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale { x, factor } => {
                    accumulate(&mut grads, *x, gy.map(|g| g * factor));
                }
                Op::Relu { x } => {
                    let dx = gy.zip(self.value(*x), "relu_bwd", |g, v| if v > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let dx = gy.zip(&self.nodes[idx].value, "sigmoid_bwd", |g, s| g * s * (1.0 - s))?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Tanh { x } => {
                    let dx = gy.zip(&self.nodes[idx].value, "tanh_bwd", |g, t| g * (1.0 - t * t))?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    inv_std,
                    norm,
                } => {
                    let (rows, cols) = (norm.rows(), norm.cols());
                    let gt = self.value(*gamma).data();
                    // d gamma / d beta reduce over the batch.
                    let mut dgamma = vec![0.0; cols];
                    let mut dbeta = vec![0.0; cols];
                    // dxhat and its per-feature reductions.
                    let mut dxhat = vec![0.0; rows * cols];
                    let mut sum_dxhat = vec![0.0; cols];
                    let mut sum_dxhat_xhat = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            let g = gy.data()[i];
                            dgamma[c] += g * norm.data()[i];
                            dbeta[c] += g;
                            let dh = g * gt[c];
                            dxhat[i] = dh;
                            sum_dxhat[c] += dh;
                            sum_dxhat_xhat[c] += dh * norm.data()[i];
                        }
                    }
                    let n = rows as f64;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            dx[i] = inv_std.data()[c] / n
                                * (n * dxhat[i]
                                    - sum_dxhat[c]
                                    - norm.data()[i] * sum_dxhat_xhat[c]);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
                    accumulate(&mut grads, *gamma, Tensor::vector(dgamma));
                    accumulate(&mut grads, *beta, Tensor::vector(dbeta));
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    inv_std,
                    norm,
                } => {
                    let cols = norm.cols();
                    let gt = self.value(*gamma).data();
                    let mut dgamma = vec![0.0; cols];
                    let mut dbeta = vec![0.0; cols];
                    let mut dx = vec![0.0; gy.len()];
                    for (i, &g) in gy.data().iter().enumerate() {
                        let c = i % cols;
                        dgamma[c] += g * norm.data()[i];
                        dbeta[c] += g;
                        dx[i] = g * gt[c] * inv_std.data()[c];
                    }
                    accumulate(&mut grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
                    accumulate(&mut grads, *gamma, Tensor::vector(dgamma));
                    accumulate(&mut grads, *beta, Tensor::vector(dbeta));
                }
                Op::Mse { a, b } => {
                    let g = gy.item();
                    let diff = self.value(*a).zip(self.value(*b), "mse_bwd", |x, y| x - y)?;
                    accumulate(&mut grads, *a, diff.map(|d| 2.0 * d * g));
                    accumulate(&mut grads, *b, diff.map(|d| -2.0 * d * g));
                }
                Op::ConcatRows { parts } => {
                    let cols = gy.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pt = self.value(p);
                        let n = pt.rows() * cols;
                        let slice = gy.data()[offset..offset + n].to_vec();
                        offset += n;
                        accumulate(&mut grads, p, Tensor::new(pt.shape().to_vec(), slice)?);
                    }
                }
            }
        }
        Ok(GradMap { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Value, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}
