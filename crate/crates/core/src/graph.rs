//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records nodes in creation order, which is already a
//! topological order: every op's inputs exist before the op does.
//! [`Graph::backward`] walks the nodes once in reverse, skipping any node
//! that neither requires a gradient nor lies on a path to the output.
//!
//! Image-shaped tensors are channel-first: `C×H×W`, or `N×C×H×W` batched.

use std::fmt;

use crate::error::{dim_err, Error, Result};
use crate::linalg;
use crate::mospool::{self, PoolConfig};
use crate::tensor::{DType, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for a custom op: given the inputs, the op output and the
/// upstream gradient, returns one gradient per input.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>> + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: 1,
        }
    }
}

enum Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Sum,
    Relu,
    Reshape,
    AddChannelBias,
    Conv2d {
        spec: Conv2dSpec,
    },
    MaxPool2 {
        argmax: Vec<usize>,
    },
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        fixed_stats: bool,
    },
    Pool {
        order: u8,
        cfg: PoolConfig,
    },
    SoftmaxRows,
    SoftmaxCrossEntropy {
        probs: Vec<f64>,
        labels: Vec<usize>,
        scale: f64,
    },
    L2NormalizeRows {
        norms: Vec<f64>,
        eps: f64,
    },
    SupCon {
        grad_sim: Vec<f64>,
        tau: f64,
    },
    Custom(CustomBackward),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Sum => "sum",
            Op::Relu => "relu",
            Op::Reshape => "reshape",
            Op::AddChannelBias => "add_channel_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Pool { .. } => "pool",
            Op::SoftmaxRows => "softmax_rows",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::SupCon { .. } => "supcon",
            Op::Custom(_) => "custom",
        };
        f.write_str(name)
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    parents: Vec<usize>,
    requires_grad: bool,
}

/// Result of a batch-normalization op in training mode.
pub struct BatchNormOutput {
    pub out: Var,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, vec![], true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, vec![], false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::with_dtype(node.value.shape(), g.clone(), DType::F64).expect("finite grad"))
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: Vec<usize>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, parents.iter().map(|p| p.0).collect(), rg)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ---- elementary ops --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul(self.val(b))?;
        Ok(self.push_op(out, Op::MatMul, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).zip_with(self.val(b), |x, y| x + y)?;
        Ok(self.push_op(out, Op::Add, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).zip_with(self.val(b), |x, y| x - y)?;
        Ok(self.push_op(out, Op::Sub, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).zip_with(self.val(b), |x, y| x * y)?;
        Ok(self.push_op(out, Op::Mul, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.val(a).map(|x| x * factor)?;
        Ok(self.push_op(out, Op::Scale(factor), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        let out = Tensor::from_op(&[1], vec![t.sum()], t.dtype(), "sum")?;
        Ok(self.push_op(out, Op::Sum, &[a]))
    }

    /// `Σ a∘b`, a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).map(|x| x.max(0.0))?;
        Ok(self.push_op(out, Op::Relu, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(a).reshape(shape)?;
        Ok(self.push_op(out, Op::Reshape, &[a]))
    }

    /// Adds `bias[c]` to every element of channel `c` of a `C×H×W` or
    /// `N×C×H×W` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xt = self.val(x);
        let (n, c, hw) = image_dims(xt.shape(), "add_channel_bias")?;
        let b = self.val(bias);
        if b.numel() != c {
            return dim_err(format!("channel bias needs {c} entries, got {}", b.numel()));
        }
        let mut data = xt.data().to_vec();
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                let bv = b.data()[ch];
                data[off..off + hw].iter_mut().for_each(|v| *v += bv);
            }
        }
        let out = Tensor::from_op(xt.shape(), data, xt.dtype(), "add_channel_bias")?;
        Ok(self.push_op(out, Op::AddChannelBias, &[x, bias]))
    }

    // ---- convolutional ops ----------------------------------------------

    /// Cross-correlation (no kernel flip) of `C_in×H×W` or `N×C_in×H×W`
    /// input with `C_out×C_in×kh×kw` kernels.
    pub fn conv2d(&mut self, input: Var, kernels: Var, spec: Conv2dSpec) -> Result<Var> {
        let geo = ConvGeometry::new(self.val(input).shape(), self.val(kernels).shape(), spec)?;
        let x = self.val(input).data();
        let k = self.val(kernels).data();
        let mut out = vec![0.0; geo.n * geo.c_out * geo.out_hw()];
        let mut cols = vec![0.0; geo.col_rows() * geo.out_hw()];
        for s in 0..geo.n {
            geo.im2col(&x[s * geo.in_sample()..(s + 1) * geo.in_sample()], &mut cols);
            let o = &mut out[s * geo.c_out * geo.out_hw()..(s + 1) * geo.c_out * geo.out_hw()];
            linalg::gemm(geo.c_out, geo.col_rows(), geo.out_hw(), 1.0, k, false, &cols, false, 0.0, o);
        }
        let dtype = self.val(input).dtype().promote(self.val(kernels).dtype());
        let out = Tensor::from_op(&geo.out_shape(), out, dtype, "conv2d")?;
        Ok(self.push_op(out, Op::Conv2d { spec }, &[input, kernels]))
    }

    /// 2×2 max pooling with stride 2. Ties go to the first element in
    /// row-major window order.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let xt = self.val(input);
        let (n, c, h, w) = image_dims4(xt.shape(), "maxpool2")?;
        if h < 2 || w < 2 {
            return dim_err(format!("maxpool2 needs H, W >= 2, got {h}×{w}"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = xt.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = xt.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        let out = Tensor::from_op(&shape, out, xt.dtype(), "maxpool2")?;
        Ok(self.push_op(out, Op::MaxPool2 { argmax }, &[input]))
    }

    /// Per-channel normalization over batch and spatial positions followed
    /// by `gamma * x̂ + beta`. With `stats = Some((mean, var))` the stored
    /// statistics are used instead of batch statistics (inference mode).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: Option<(&[f64], &[f64])>,
    ) -> Result<BatchNormOutput> {
        let xt = self.val(x);
        let (n, c, hw) = image_dims(xt.shape(), "batch_norm")?;
        if self.val(gamma).numel() != c || self.val(beta).numel() != c {
            return dim_err(format!("batch_norm affine parameters need {c} entries"));
        }
        let m = (n * hw) as f64;
        let data = xt.data();
        let (mean, var) = match stats {
            Some((mu, v)) => {
                if mu.len() != c || v.len() != c {
                    return dim_err("batch_norm statistics length mismatch");
                }
                (mu.to_vec(), v.to_vec())
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        mean[ch] += data[off..off + hw].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        var[ch] += data[off..off + hw]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.val(gamma).data();
        let b = self.val(beta).data();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (data[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let out = Tensor::from_op(xt.shape(), out, xt.dtype(), "batch_norm")?;
        let v = self.push_op(
            out,
            Op::BatchNorm {
                xhat,
                inv_std,
                fixed_stats: stats.is_some(),
            },
            &[x, gamma, beta],
        );
        Ok(BatchNormOutput {
            out: v,
            batch_mean: mean,
            batch_var: var,
        })
    }

    // ---- pooling ---------------------------------------------------------

    /// Order-`order` statistics pooling. Accepts an `n×d` observation matrix
    /// (output `d` or `d×d`) or a batched `N×d×H×W` feature map (output
    /// `N×d` or `N×d²`, one flattened row per sample).
    pub fn pool(&mut self, input: Var, order: u8, cfg: PoolConfig) -> Result<Var> {
        if !(1..=3).contains(&order) {
            return Err(Error::Contract(format!("pooling order must be 1..=3, got {order}")));
        }
        cfg.validate()?;
        let xt = self.val(input);
        let width = |d: usize| if order == 1 { d } else { d * d };
        let out = match xt.shape()[..] {
            [rows, d] => {
                if rows < 2 {
                    return dim_err("pooling needs at least 2 observations");
                }
                let v = pool_forward(order, rows, d, xt.data(), &cfg);
                let shape: Vec<usize> = if order == 1 { vec![d] } else { vec![d, d] };
                Tensor::from_op(&shape, v, xt.dtype(), "pool")?
            }
            [n, d, h, w] => {
                let hw = h * w;
                if hw < 2 {
                    return dim_err("pooling needs at least 2 spatial positions");
                }
                let mut out = Vec::with_capacity(n * width(d));
                for s in 0..n {
                    let obs = linalg::transpose(d, hw, &xt.data()[s * d * hw..(s + 1) * d * hw]);
                    out.extend(pool_forward(order, hw, d, &obs, &cfg));
                }
                Tensor::from_op(&[n, width(d)], out, xt.dtype(), "pool")?
            }
            _ => return dim_err(format!("pool expects n×d or N×d×H×W, got {:?}", xt.shape())),
        };
        Ok(self.push_op(out, Op::Pool { order, cfg }, &[input]))
    }

    // ---- heads and losses -----------------------------------------------

    /// Row-wise softmax of a `B×K` matrix.
    pub fn softmax_rows(&mut self, logits: Var) -> Result<Var> {
        let t = self.val(logits);
        let (b, k) = t.as_matrix("softmax_rows")?;
        let probs = softmax_rows(b, k, t.data());
        let out = Tensor::from_op(&[b, k], probs, t.dtype(), "softmax_rows")?;
        Ok(self.push_op(out, Op::SoftmaxRows, &[logits]))
    }

    /// `scale · Σ_i −log softmax(logits_i)[label_i]`, computed with the
    /// log-sum-exp shift.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], scale: f64) -> Result<Var> {
        let t = self.val(logits);
        let (b, k) = t.as_matrix("softmax_cross_entropy")?;
        if labels.len() != b {
            return dim_err(format!("{} labels for {b} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
        }
        let x = t.data();
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &x[i * k..(i + 1) * k];
            loss += log_sum_exp(row) - row[y];
        }
        let probs = softmax_rows(b, k, x);
        let out = Tensor::from_op(&[1], vec![scale * loss], t.dtype(), "softmax_cross_entropy")?;
        Ok(self.push_op(
            out,
            Op::SoftmaxCrossEntropy {
                probs,
                labels: labels.to_vec(),
                scale,
            },
            &[logits],
        ))
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.val(x);
        let (b, p) = t.as_matrix("l2_normalize_rows")?;
        let mut norms = Vec::with_capacity(b);
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(p) {
            let nrm = linalg::dot(row, row).sqrt();
            let denom = nrm.max(eps);
            row.iter_mut().for_each(|v| *v /= denom);
            norms.push(nrm);
        }
        let out = Tensor::from_op(&[b, p], out, t.dtype(), "l2_normalize_rows")?;
        Ok(self.push_op(out, Op::L2NormalizeRows { norms, eps }, &[x]))
    }

    /// Supervised contrastive loss over unit rows `u` (see
    /// [`crate::losses::sb_loss`] for the formula and validation).
    pub(crate) fn supcon(&mut self, u: Var, value: f64, grad_sim: Vec<f64>, tau: f64) -> Result<Var> {
        let dtype = self.val(u).dtype();
        let out = Tensor::from_op(&[1], vec![value], dtype, "supcon")?;
        Ok(self.push_op(out, Op::SupCon { grad_sim, tau }, &[u]))
    }

    /// An op with a caller-supplied value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        self.push_op(value, Op::Custom(backward), inputs)
    }

    // ---- backward ----------------------------------------------------------

    /// Populates gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.val(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        self.backward_seeded(loss, vec![1.0])
    }

    /// Backward pass from `out` with an explicit upstream gradient.
    pub fn backward_seeded(&mut self, out: Var, seed: Vec<f64>) -> Result<()> {
        if seed.len() != self.val(out).numel() {
            return dim_err("backward seed does not match output size");
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        // Mark the ancestors of `out`.
        let mut live = vec![false; out.0 + 1];
        live[out.0] = true;
        for i in (0..=out.0).rev() {
            if live[i] {
                for &p in &self.nodes[i].parents {
                    live[p] = true;
                }
            }
        }
        self.grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !live[i] || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let parent_grads = self.node_backward(i, &g)?;
            // Leaves keep their gradient; interior nodes release theirs.
            if self.nodes[i].parents.is_empty() {
                self.grads[i] = Some(g);
            }
            for (p, pg) in self.nodes[i].parents.clone().into_iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                match &mut self.grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient at node {i} ({:?})",
                        self.nodes[i].op
                    )));
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let node = &self.nodes[i];
        let pv = |k: usize| &self.nodes[node.parents[k]].value;
        let need = |k: usize| self.nodes[node.parents[k]].requires_grad;
        let grads = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul => {
                let (m, k) = pv(0).as_matrix("matmul")?;
                let n = pv(1).shape()[1];
                let ga = need(0).then(|| {
                    let mut ga = vec![0.0; m * k];
                    linalg::gemm(m, n, k, 1.0, g, false, pv(1).data(), true, 0.0, &mut ga);
                    ga
                });
                let gb = need(1).then(|| {
                    let mut gb = vec![0.0; k * n];
                    linalg::gemm(k, m, n, 1.0, pv(0).data(), true, g, false, 0.0, &mut gb);
                    gb
                });
                vec![ga, gb]
            }
            Op::Add => vec![need(0).then(|| g.to_vec()), need(1).then(|| g.to_vec())],
            Op::Sub => vec![
                need(0).then(|| g.to_vec()),
                need(1).then(|| g.iter().map(|v| -v).collect()),
            ],
            Op::Mul => vec![
                need(0).then(|| g.iter().zip(pv(1).data()).map(|(a, b)| a * b).collect()),
                need(1).then(|| g.iter().zip(pv(0).data()).map(|(a, b)| a * b).collect()),
            ],
            Op::Scale(f) => vec![Some(g.iter().map(|v| v * f).collect())],
            Op::Sum => vec![Some(vec![g[0]; pv(0).numel()])],
            Op::Relu => vec![Some(
                g.iter()
                    .zip(pv(0).data())
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect(),
            )],
            Op::Reshape => vec![Some(g.to_vec())],
            Op::AddChannelBias => {
                let (n, c, hw) = image_dims(pv(0).shape(), "add_channel_bias")?;
                let gb = need(1).then(|| {
                    let mut gb = vec![0.0; c];
                    for s in 0..n {
                        for (ch, acc) in gb.iter_mut().enumerate() {
                            let off = (s * c + ch) * hw;
                            *acc += g[off..off + hw].iter().sum::<f64>();
                        }
                    }
                    gb
                });
                vec![need(0).then(|| g.to_vec()), gb]
            }
            Op::Conv2d { spec } => {
                let geo = ConvGeometry::new(pv(0).shape(), pv(1).shape(), *spec)?;
                let x = pv(0).data();
                let k = pv(1).data();
                let mut gk = need(1).then(|| vec![0.0; k.len()]);
                let mut gx = need(0).then(|| vec![0.0; x.len()]);
                let mut cols = vec![0.0; geo.col_rows() * geo.out_hw()];
                let mut dcols = vec![0.0; cols.len()];
                let og = geo.c_out * geo.out_hw();
                for s in 0..geo.n {
                    let gs = &g[s * og..(s + 1) * og];
                    if let Some(gk) = gk.as_mut() {
                        geo.im2col(&x[s * geo.in_sample()..(s + 1) * geo.in_sample()], &mut cols);
                        linalg::gemm(geo.c_out, geo.out_hw(), geo.col_rows(), 1.0, gs, false, &cols, true, 1.0, gk);
                    }
                    if let Some(gx) = gx.as_mut() {
                        linalg::gemm(geo.col_rows(), geo.c_out, geo.out_hw(), 1.0, k, true, gs, false, 0.0, &mut dcols);
                        geo.col2im(&dcols, &mut gx[s * geo.in_sample()..(s + 1) * geo.in_sample()]);
                    }
                }
                vec![gx, gk]
            }
            Op::MaxPool2 { argmax } => {
                let mut gx = vec![0.0; pv(0).numel()];
                for (gv, &idx) in g.iter().zip(argmax) {
                    gx[idx] += gv;
                }
                vec![Some(gx)]
            }
            Op::BatchNorm {
                xhat,
                inv_std,
                fixed_stats,
            } => {
                let (n, c, hw) = image_dims(pv(0).shape(), "batch_norm")?;
                let gamma = pv(1).data();
                let m = (n * hw) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for i in off..off + hw {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                let gx = need(0).then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            let k = gamma[ch] * inv_std[ch];
                            for i in off..off + hw {
                                gx[i] = if *fixed_stats {
                                    k * g[i]
                                } else {
                                    k * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                                };
                            }
                        }
                    }
                    gx
                });
                vec![gx, need(1).then(|| sum_gx.clone()), need(2).then(|| sum_g.clone())]
            }
            Op::Pool { order, cfg } => {
                let xt = pv(0);
                let gx = match xt.shape()[..] {
                    [rows, d] => pool_backward(*order, rows, d, xt.data(), cfg, g),
                    [n, d, h, w] => {
                        let hw = h * w;
                        let width = if *order == 1 { d } else { d * d };
                        let mut gx = vec![0.0; xt.numel()];
                        for s in 0..n {
                            let slab = &xt.data()[s * d * hw..(s + 1) * d * hw];
                            let obs = linalg::transpose(d, hw, slab);
                            let go = pool_backward(*order, hw, d, &obs, cfg, &g[s * width..(s + 1) * width]);
                            let back = linalg::transpose(hw, d, &go);
                            gx[s * d * hw..(s + 1) * d * hw].copy_from_slice(&back);
                        }
                        gx
                    }
                    _ => unreachable!("shape validated in forward"),
                };
                vec![Some(gx)]
            }
            Op::SoftmaxRows => {
                let y = node.value.data();
                let k = node.value.shape()[1];
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks_exact(k).zip(y.chunks_exact(k)).zip(gx.chunks_exact_mut(k)) {
                    let s = linalg::dot(gr, yr);
                    for j in 0..k {
                        out[j] = yr[j] * (gr[j] - s);
                    }
                }
                vec![Some(gx)]
            }
            Op::SoftmaxCrossEntropy {
                probs,
                labels,
                scale,
            } => {
                let k = pv(0).shape()[1];
                let mut gx = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    gx[i * k + y] -= 1.0;
                }
                let f = g[0] * scale;
                gx.iter_mut().for_each(|v| *v *= f);
                vec![Some(gx)]
            }
            Op::L2NormalizeRows { norms, eps } => {
                let u = node.value.data();
                let p = node.value.shape()[1];
                let mut gx = vec![0.0; u.len()];
                for (i, &nrm) in norms.iter().enumerate() {
                    let ur = &u[i * p..(i + 1) * p];
                    let gr = &g[i * p..(i + 1) * p];
                    let out = &mut gx[i * p..(i + 1) * p];
                    if nrm > *eps {
                        let ug = linalg::dot(ur, gr);
                        for j in 0..p {
                            out[j] = (gr[j] - ur[j] * ug) / nrm;
                        }
                    } else {
                        for j in 0..p {
                            out[j] = gr[j] / eps;
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::SupCon { grad_sim, tau } => {
                // sim = U Uᵀ / τ  =>  dU = (G + Gᵀ) U / τ
                let (b, p) = pv(0).as_matrix("supcon")?;
                let mut sym = vec![0.0; b * b];
                for i in 0..b {
                    for j in 0..b {
                        sym[i * b + j] = g[0] * (grad_sim[i * b + j] + grad_sim[j * b + i]) / tau;
                    }
                }
                vec![Some(linalg::matmul(b, b, p, &sym, pv(0).data()))]
            }
            Op::Custom(rule) => {
                let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                rule(&inputs, &node.value, g).into_iter().map(Some).collect()
            }
        };
        Ok(grads)
    }
}

fn pool_forward(order: u8, n: usize, d: usize, x: &[f64], cfg: &PoolConfig) -> Vec<f64> {
    match order {
        1 => mospool::order1_forward(n, d, x),
        2 => mospool::order2_forward(n, d, x),
        _ => mospool::order3_forward(n, d, x, cfg),
    }
}

fn pool_backward(order: u8, n: usize, d: usize, x: &[f64], cfg: &PoolConfig, g: &[f64]) -> Vec<f64> {
    match order {
        1 => mospool::order1_backward(n, d, g),
        2 => mospool::order2_backward(n, d, x, g),
        _ => mospool::order3_backward(n, d, x, cfg, g),
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_rows(b: usize, k: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; b * k];
    for (row, o) in x.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = (v - m).exp();
            z += *ov;
        }
        o.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// `(N, C, H·W)` of a `C×H×W` or `N×C×H×W` shape.
fn image_dims(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = image_dims4(shape, what)?;
    Ok((n, c, h * w))
}

fn image_dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match shape[..] {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => dim_err(format!("{what}: expected C×H×W or N×C×H×W, got {shape:?}")),
    }
}

struct ConvGeometry {
    batched: bool,
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl ConvGeometry {
    fn new(input: &[usize], kernels: &[usize], spec: Conv2dSpec) -> Result<Self> {
        let (n, c_in, h, w) = image_dims4(input, "conv2d input")?;
        let [c_out, kc, kh, kw] = kernels[..] else {
            return dim_err(format!("conv2d kernels must be C_out×C_in×kh×kw, got {kernels:?}"));
        };
        if kc != c_in {
            return dim_err(format!("conv2d kernel expects {kc} input channels, input has {c_in}"));
        }
        if spec.stride == 0 {
            return dim_err("conv2d stride must be positive");
        }
        let (ph, pw) = (h + 2 * spec.padding, w + 2 * spec.padding);
        if kh > ph || kw > pw {
            return dim_err(format!(
                "conv2d kernel {kh}×{kw} larger than padded input {ph}×{pw}"
            ));
        }
        Ok(ConvGeometry {
            batched: input.len() == 4,
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            ho: (ph - kh) / spec.stride + 1,
            wo: (pw - kw) / spec.stride + 1,
            spec,
        })
    }

    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn in_sample(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.batched {
            vec![self.n, self.c_out, self.ho, self.wo]
        } else {
            vec![self.c_out, self.ho, self.wo]
        }
    }

    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.spec.stride + ky).checked_sub(self.spec.padding)?;
        let x = (ox * self.spec.stride + kx).checked_sub(self.spec.padding)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let ohw = self.out_hw();
        for ci in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * ohw..(row + 1) * ohw];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            dst[oy * self.wo + ox] = match self.source(oy, ox, ky, kx) {
                                Some((y, xx)) => x[(ci * self.h + y) * self.w + xx],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let ohw = self.out_hw();
        for ci in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * ohw..(row + 1) * ohw];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                                gx[(ci * self.h + y) * self.w + xx] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
