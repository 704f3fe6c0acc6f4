//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node; a node's inputs always precede it, so
//! the append order is a topological order and `backward` walks it in
//! reverse.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics a normalization layer saw on one batch, used to update
/// running averages. `var` is the unbiased estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NormGroup {
    /// Statistics per channel over batch and spatial positions.
    Channel,
    /// Statistics per sample over channels and spatial positions.
    Sample,
    /// Externally supplied per-channel statistics (no dependence on the batch).
    Fixed,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        bias: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        out_channels: usize,
        cols: Vec<f64>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool2 {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Relu(Var),
    Gelu(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        group: NormGroup,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        temperature: f64,
    },
    CrossEntropy {
        target: Tensor,
        pred: Var,
        eps: f64,
    },
    LabelCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    NormalizeColumns {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of primitive operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when the loss does not depend on it
    /// (or it does not require a gradient).
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, materializing zeros when absent.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
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

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("shape checked");
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, c), ng)
    }

    /// `x[..., m] + bias[m]`, broadcasting over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let m = self.value(x).last_dim();
        if self.value(bias).len() != m {
            return Err(Error::shape(format!(
                "bias of {} for last axis {m}",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_exact_mut(m) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(t, Op::AddBias { x, bias }, ng))
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMul { a, b, m, k, n }, ng))
    }

    /// 2-D convolution of NCHW input with `[O, C, k, k]` weights.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::shape(format!("conv2d input {xs:?} weight {ws:?}")));
        }
        if xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[3] {
            return Err(Error::shape(format!("conv2d kernel larger than input {xs:?}")));
        }
        if let Some(b) = bias {
            if self.value(b).len() != ws[0] {
                return Err(Error::shape("conv2d bias length"));
            }
        }
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            padding,
        };
        let (batch, oc) = (xs[0], ws[0]);
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let img_len = xs[1] * xs[2] * xs[3];
        let ld = batch * cols_n;
        let mut cols = vec![0.0; rows * ld];
        let mut out = vec![0.0; batch * oc * cols_n];
        {
            let xd = self.value(x).data();
            let wd = self.value(weight).data();
            for b in 0..batch {
                kernels::im2col(&geom, &xd[b * img_len..(b + 1) * img_len], &mut cols, ld, b * cols_n);
            }
            let mut out_t = vec![0.0; oc * ld];
            kernels::gemm_nn(oc, rows, ld, wd, &cols, &mut out_t);
            let bd = bias.map(|bv| self.value(bv).data());
            for b in 0..batch {
                for c in 0..oc {
                    let src = &out_t[c * ld + b * cols_n..c * ld + (b + 1) * cols_n];
                    let dst = &mut out[(b * oc + c) * cols_n..(b * oc + c + 1) * cols_n];
                    let shift = bd.map_or(0.0, |v| v[c]);
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d = s + shift);
                }
            }
        }
        let t = Tensor::new(vec![batch, oc, geom.out_height(), geom.out_width()], out)?;
        let ng = self.ng(x) || self.ng(weight) || bias.is_some_and(|b| self.ng(b));
        if !ng {
            cols = Vec::new();
        }
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
                batch,
                out_channels: oc,
                cols,
            },
            ng,
        ))
    }

    fn pool_dims(&self, x: Var) -> Result<(usize, usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape(format!("2x2 pooling needs NCHW with H,W >= 2, got {s:?}")));
        }
        Ok((s[0] * s[1], s[2], s[3], 0))
    }

    /// 2×2 max pooling with stride 2 (trailing odd row/column dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (planes, h, w, _) = self.pool_dims(x)?;
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let s = self.shape(x);
        let t = Tensor::new(vec![s[0], s[1], ho, wo], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, ng))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (planes, h, w, _) = self.pool_dims(x)?;
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let i = base + 2 * oy * w + 2 * ox;
                    out.push(0.25 * (xd[i] + xd[i + 1] + xd[i + w] + xd[i + w + 1]));
                }
            }
        }
        let s = self.shape(x);
        let t = Tensor::new(vec![s[0], s[1], ho, wo], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::AvgPool2 { x }, ng))
    }

    /// Mean over spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("global pooling needs NCHW, got {s:?}")));
        }
        let hw = s[2] * s[3];
        let out = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor::new(vec![s[0], s[1]], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::GlobalAvgPool { x }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * kernels::normal_cdf(v));
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng)
    }

    /// Normalization view `(batch, channels, spatial)` for 2-D or 4-D input.
    fn norm_view(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        let (b, c, sp) = match s.len() {
            2 => (s[0], s[1], 1),
            4 => (s[0], s[1], s[2] * s[3]),
            _ => return Err(Error::shape(format!("normalization input {s:?}"))),
        };
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("normalization affine parameters"));
        }
        Ok((b, c, sp))
    }

    #[allow(clippy::too_many_arguments)]
    fn push_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        group: NormGroup,
        dims: (usize, usize, usize),
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    ) -> Result<Var> {
        let (_, c, sp) = dims;
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let ch = (i / sp) % c;
                g[ch] * h + bt[ch]
            })
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            t,
            Op::Norm {
                x,
                gamma,
                beta,
                group,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Batch normalization using the statistics of the current batch.
    /// Returns the output and the batch statistics for running averages.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let dims @ (b, c, sp) = self.norm_view(x, gamma, beta)?;
        let n = (b * sp) as f64;
        if b * sp < 2 {
            return Err(Error::domain("batch statistics need at least two values per channel"));
        }
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ch in 0..c {
                let s = &xd[(bi * c + ch) * sp..(bi * c + ch + 1) * sp];
                mean[ch] += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for bi in 0..b {
            for ch in 0..c {
                let s = &xd[(bi * c + ch) * sp..(bi * c + ch + 1) * sp];
                var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / sp) % c;
                (v - mean[ch]) * inv_std[ch]
            })
            .collect();
        let stats = BatchStats {
            mean,
            var: var.iter().map(|v| v * n / (n - 1.0)).collect(),
        };
        let out = self.push_norm(x, gamma, beta, NormGroup::Channel, dims, xhat, inv_std)?;
        Ok((out, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let dims @ (_, c, sp) = self.norm_view(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("running statistics length"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / sp) % c;
                (v - mean[ch]) * inv_std[ch]
            })
            .collect();
        self.push_norm(x, gamma, beta, NormGroup::Fixed, dims, xhat, inv_std)
    }

    /// Per-sample normalization over all non-batch axes with a per-channel
    /// affine transform.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let dims @ (b, c, sp) = self.norm_view(x, gamma, beta)?;
        let per = c * sp;
        let xd = self.value(x).data();
        let mut inv_std = Vec::with_capacity(b);
        let mut xhat = Vec::with_capacity(xd.len());
        for s in xd.chunks_exact(per) {
            let mean = s.iter().sum::<f64>() / per as f64;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(s.iter().map(|v| (v - mean) * is));
        }
        self.push_norm(x, gamma, beta, NormGroup::Sample, dims, xhat, inv_std)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Flattens all axes after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let rest = s[1..].iter().product::<usize>();
        let b = s[0];
        self.reshape(x, vec![b, rest])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).data().iter().sum());
        let ng = self.ng(x);
        self.push(t, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64);
        let ng = self.ng(x);
        self.push(t, Op::Mean(x), ng)
    }

    /// Row-wise softmax of `x / temperature` over the last axis.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let t = crate::ops::softmax(self.value(x), temperature)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Softmax { x, temperature }, ng))
    }

    /// Batch sum of `-Σ target · ln(max(pred, eps))`. The target is a constant.
    pub fn cross_entropy(&mut self, target: &Tensor, pred: Var, eps: f64) -> Result<Var> {
        let t = Tensor::scalar(crate::ops::cross_entropy_eps(target, self.value(pred), eps)?);
        let ng = self.ng(pred);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                target: target.clone(),
                pred,
                eps,
            },
            ng,
        ))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against integer labels.
    pub fn label_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(format!("logits {s:?} for {} labels", labels.len())));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::domain(format!("label {bad} for {k} classes")));
        }
        let probs = crate::ops::softmax(self.value(logits), 1.0)?;
        let loss = probs
            .rows()
            .zip(labels)
            .map(|(row, &l)| -row[l].max(1e-300).ln())
            .sum::<f64>()
            / labels.len() as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::LabelCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: probs.into_data(),
            },
            ng,
        ))
    }

    /// `x / max(‖x‖₂, eps)` along the last axis.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x);
        let k = v.last_dim();
        let norms: Vec<f64> = v.rows().map(kernels::norm2).collect();
        let mut t = v.clone();
        for (row, &n) in t.data_mut().chunks_exact_mut(k).zip(&norms) {
            let d = n.max(eps);
            row.iter_mut().for_each(|e| *e /= d);
        }
        let ng = self.ng(x);
        self.push(t, Op::L2Normalize { x, eps, norms }, ng)
    }

    /// Rescales each column of a `[k, m]` matrix to unit L2 norm.
    pub fn normalize_columns(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape(format!("column normalization needs a matrix, got {s:?}")));
        }
        let (k, m) = (s[0], s[1]);
        let v = self.value(x).data();
        let mut norms = vec![0.0; m];
        for row in v.chunks_exact(m) {
            for (n, e) in norms.iter_mut().zip(row) {
                *n += e * e;
            }
        }
        norms.iter_mut().for_each(|n| *n = n.sqrt());
        let mut out = v.to_vec();
        for row in out.chunks_exact_mut(m) {
            for (e, n) in row.iter_mut().zip(&norms) {
                *e /= n.max(eps);
            }
        }
        let t = Tensor::new(vec![k, m], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::NormalizeColumns { x, eps, norms }, ng))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Accumulates into the gradient buffer of `v` when it needs one.
    fn acc<F: FnOnce(&mut [f64])>(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: F) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }

    fn backprop_node(
        &self,
        node: &Node,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let add_into = |buf: &mut [f64], src: &[f64]| {
            buf.iter_mut().zip(src).for_each(|(b, s)| *b += s);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| add_into(g, gout));
                self.acc(grads, *b, |g| add_into(g, gout));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| add_into(g, gout));
                self.acc(grads, *b, |g| g.iter_mut().zip(gout).for_each(|(b, s)| *b -= s));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |g| {
                    for ((g, go), y) in g.iter_mut().zip(gout).zip(vb) {
                        *g += go * y;
                    }
                });
                self.acc(grads, *b, |g| {
                    for ((g, go), x) in g.iter_mut().zip(gout).zip(va) {
                        *g += go * x;
                    }
                });
            }
            Op::Scale(x, c) => {
                self.acc(grads, *x, |g| g.iter_mut().zip(gout).for_each(|(g, s)| *g += c * s));
            }
            Op::AddBias { x, bias } => {
                self.acc(grads, *x, |g| add_into(g, gout));
                self.acc(grads, *bias, |g| {
                    let m = g.len();
                    for row in gout.chunks_exact(m) {
                        add_into(g, row);
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                self.acc(grads, *a, |g| kernels::gemm_nt(m, n, k, gout, vb, g));
                self.acc(grads, *b, |g| kernels::gemm_tn(k, m, n, va, gout, g));
            }
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
                batch,
                out_channels,
                cols,
            } => {
                let (rows, cn) = (geom.col_rows(), geom.col_cols());
                let oc = *out_channels;
                let img_len = geom.channels * geom.height * geom.width;
                let wd = self.value(*weight).data();
                let ld = batch * cn;
                let mut go_t = vec![0.0; oc * ld];
                for b in 0..*batch {
                    for c in 0..oc {
                        go_t[c * ld + b * cn..c * ld + (b + 1) * cn]
                            .copy_from_slice(&gout[(b * oc + c) * cn..(b * oc + c + 1) * cn]);
                    }
                }
                self.acc(grads, *weight, |g| kernels::gemm_nt(oc, ld, rows, &go_t, cols, g));
                if let Some(bv) = bias {
                    self.acc(grads, *bv, |g| {
                        for (c, gc) in g.iter_mut().enumerate() {
                            *gc += go_t[c * ld..(c + 1) * ld].iter().sum::<f64>();
                        }
                    });
                }
                self.acc(grads, *x, |g| {
                    let mut dcol = vec![0.0; rows * ld];
                    kernels::gemm_tn(rows, oc, ld, wd, &go_t, &mut dcol);
                    for b in 0..*batch {
                        kernels::col2im(geom, &dcol, ld, b * cn, &mut g[b * img_len..(b + 1) * img_len]);
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                self.acc(grads, *x, |g| {
                    for (&idx, go) in argmax.iter().zip(gout) {
                        g[idx] += go;
                    }
                });
            }
            Op::AvgPool2 { x } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let planes = s[0] * s[1];
                self.acc(grads, *x, |g| {
                    for p in 0..planes {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let go = 0.25 * gout[(p * ho + oy) * wo + ox];
                                let i = p * h * w + 2 * oy * w + 2 * ox;
                                g[i] += go;
                                g[i + 1] += go;
                                g[i + w] += go;
                                g[i + w + 1] += go;
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                self.acc(grads, *x, |g| {
                    for (chunk, go) in g.chunks_exact_mut(hw).zip(gout) {
                        let v = go / hw as f64;
                        chunk.iter_mut().for_each(|e| *e += v);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |g| {
                    for ((g, go), v) in g.iter_mut().zip(gout).zip(xv) {
                        if *v > 0.0 {
                            *g += go;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |g| {
                    for ((g, go), &v) in g.iter_mut().zip(gout).zip(xv) {
                        *g += go * (kernels::normal_cdf(v) + v * kernels::normal_pdf(v));
                    }
                });
            }
            Op::Norm {
                x,
                gamma,
                beta,
                group,
                xhat,
                inv_std,
            } => self.backprop_norm(*x, *gamma, *beta, *group, xhat, inv_std, gout, grads),
            Op::Reshape(x) => self.acc(grads, *x, |g| add_into(g, gout)),
            Op::Sum(x) => self.acc(grads, *x, |g| g.iter_mut().for_each(|e| *e += gout[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.acc(grads, *x, |g| g.iter_mut().for_each(|e| *e += gout[0] / n));
            }
            Op::Softmax { x, temperature } => {
                let y = &node.value;
                let m = y.last_dim();
                self.acc(grads, *x, |g| {
                    for ((gr, yr), gor) in g
                        .chunks_exact_mut(m)
                        .zip(y.data().chunks_exact(m))
                        .zip(gout.chunks_exact(m))
                    {
                        let s = kernels::dot(yr, gor);
                        for ((gi, yi), goi) in gr.iter_mut().zip(yr).zip(gor) {
                            *gi += yi * (goi - s) / temperature;
                        }
                    }
                });
            }
            Op::CrossEntropy { target, pred, eps } => {
                let p = self.value(*pred).data();
                self.acc(grads, *pred, |g| {
                    for ((gi, &ti), &pi) in g.iter_mut().zip(target.data()).zip(p) {
                        if pi > *eps {
                            *gi -= gout[0] * ti / pi;
                        }
                    }
                });
            }
            Op::LabelCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.value(*logits).last_dim();
                let scale = gout[0] / labels.len() as f64;
                self.acc(grads, *logits, |g| {
                    for (i, (gr, pr)) in g.chunks_exact_mut(k).zip(probs.chunks_exact(k)).enumerate() {
                        for (j, (gi, pi)) in gr.iter_mut().zip(pr).enumerate() {
                            let y = if j == labels[i] { 1.0 } else { 0.0 };
                            *gi += scale * (pi - y);
                        }
                    }
                });
            }
            Op::L2Normalize { x, eps, norms } => {
                let y = &node.value;
                let k = y.last_dim();
                self.acc(grads, *x, |g| {
                    for (((gr, yr), gor), &n) in g
                        .chunks_exact_mut(k)
                        .zip(y.data().chunks_exact(k))
                        .zip(gout.chunks_exact(k))
                        .zip(norms)
                    {
                        if n >= *eps {
                            let s = kernels::dot(yr, gor);
                            for ((gi, yi), goi) in gr.iter_mut().zip(yr).zip(gor) {
                                *gi += (goi - yi * s) / n;
                            }
                        } else {
                            for (gi, goi) in gr.iter_mut().zip(gor) {
                                *gi += goi / eps;
                            }
                        }
                    }
                });
            }
            Op::NormalizeColumns { x, eps, norms } => {
                let y = node.value.data();
                let m = norms.len();
                // column-wise dot of y and gout
                let mut s = vec![0.0; m];
                for (yr, gr) in y.chunks_exact(m).zip(gout.chunks_exact(m)) {
                    for j in 0..m {
                        s[j] += yr[j] * gr[j];
                    }
                }
                self.acc(grads, *x, |g| {
                    for ((gr, yr), gor) in g
                        .chunks_exact_mut(m)
                        .zip(y.chunks_exact(m))
                        .zip(gout.chunks_exact(m))
                    {
                        for j in 0..m {
                            if norms[j] >= *eps {
                                gr[j] += (gor[j] - yr[j] * s[j]) / norms[j];
                            } else {
                                gr[j] += gor[j] / eps;
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        group: NormGroup,
        xhat: &[f64],
        inv_std: &[f64],
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let s = self.shape(x);
        let (b, c, sp) = match s.len() {
            2 => (s[0], s[1], 1),
            _ => (s[0], s[1], s[2] * s[3]),
        };
        let gm = self.value(gamma).data();
        let ch_of = |i: usize| (i / sp) % c;
        self.acc(grads, gamma, |g| {
            for (i, (go, h)) in gout.iter().zip(xhat).enumerate() {
                g[ch_of(i)] += go * h;
            }
        });
        self.acc(grads, beta, |g| {
            for (i, go) in gout.iter().enumerate() {
                g[ch_of(i)] += go;
            }
        });
        if !self.nodes[x.0].needs_grad {
            return;
        }
        let dxhat: Vec<f64> = gout.iter().enumerate().map(|(i, go)| go * gm[ch_of(i)]).collect();
        self.acc(grads, x, |g| match group {
            NormGroup::Fixed => {
                for (i, (gi, d)) in g.iter_mut().zip(&dxhat).enumerate() {
                    *gi += d * inv_std[ch_of(i)];
                }
            }
            NormGroup::Channel => {
                let n = (b * sp) as f64;
                let mut sum_d = vec![0.0; c];
                let mut sum_dh = vec![0.0; c];
                for (i, (d, h)) in dxhat.iter().zip(xhat).enumerate() {
                    sum_d[ch_of(i)] += d;
                    sum_dh[ch_of(i)] += d * h;
                }
                for (i, gi) in g.iter_mut().enumerate() {
                    let ch = ch_of(i);
                    *gi += inv_std[ch] / n * (n * dxhat[i] - sum_d[ch] - xhat[i] * sum_dh[ch]);
                }
            }
            NormGroup::Sample => {
                let per = c * sp;
                let n = per as f64;
                for (bi, (gr, (dr, hr))) in g
                    .chunks_exact_mut(per)
                    .zip(dxhat.chunks_exact(per).zip(xhat.chunks_exact(per)))
                    .enumerate()
                {
                    let sum_d: f64 = dr.iter().sum();
                    let sum_dh: f64 = dr.iter().zip(hr).map(|(d, h)| d * h).sum();
                    for ((gi, d), h) in gr.iter_mut().zip(dr).zip(hr) {
                        *gi += inv_std[bi] / n * (n * d - sum_d - h * sum_dh);
                    }
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let c = g.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let loss = g.sum(c);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get_or_zeros(x, 2), vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn inputs_precede_outputs() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(vec![2, 2]));
        let b = g.relu(a);
        let c = g.matmul(b, a).unwrap();
        assert!(a < b && b < c);
    }

    #[test]
    fn l2_normalize_near_zero_has_finite_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![1, 3], vec![1e-12, -1e-13, 0.0]).unwrap());
        let y = g.l2_normalize(x, 1e-8);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|v| v.is_finite()));
    }
}
