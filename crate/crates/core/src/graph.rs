//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built per forward pass: every operation appends a node, so
//! creation order is already a topological order and `backward` visits each
//! node exactly once in reverse. Nodes share their values through `Arc`, which
//! lets long-lived parameters participate without copies.
//!
//! The op set is exactly what the networks in this crate need. Attention is a
//! fused multi-head op with masking done by exclusion: masked logits are never
//! read, so masked positions receive exactly zero weight and outputs are
//! bit-stable under arbitrary changes (even NaN) to masked-out inputs.

use std::sync::Arc;

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

/// Attention visibility pattern.
#[derive(Clone, Debug)]
pub enum AttnMask {
    /// Every query sees every key.
    Full,
    /// Query `i` sees key `j` iff `j <= i + offset`.
    CausalOffset(isize),
    /// Arbitrary keep/drop per `(query, key)`, row-major `[tq * tk]`.
    Explicit(Vec<bool>),
}

impl AttnMask {
    fn visible(&self, i: usize, j: usize, tk: usize) -> bool {
        match self {
            AttnMask::Full => true,
            AttnMask::CausalOffset(off) => (j as isize) <= i as isize + off,
            AttnMask::Explicit(m) => m[i * tk + j],
        }
    }
}

/// What to do when a query row has no visible key.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EmptyRowPolicy {
    /// Panic: callers of the plain attention op must guarantee a visible key.
    Error,
    /// Emit zeros for that row (used by residual blocks where an empty
    /// context degrades to the identity).
    ZeroOutput,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    MatMul(NodeId, NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Clamp(NodeId, f32, f32),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        saved: Vec<(f32, f32)>, // (mean, rstd) per row
    },
    Softmax {
        x: NodeId,
        probs: Vec<f32>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<f32>, // [heads][tq][tk], zeros at masked positions
    },
    SelectRows(NodeId, Vec<u32>),
    ConcatRows(Vec<NodeId>),
    Transpose2(NodeId),
    Reshape(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        cols: Vec<f32>, // im2col matrix [cin*kh*kw, oh*ow]
    },
    PixelShuffle {
        x: NodeId,
        r: usize,
    },
    MeanAll(NodeId),
    SumAll(NodeId),
    WeightedSum(NodeId, Tensor),
    CeLoss {
        logits: NodeId,
        targets: Vec<u32>,
        weights: Vec<f32>,
        probs: Vec<f32>,
        weight_sum: f64,
    },
    L1Loss {
        pred: NodeId,
        target: Arc<Tensor>,
    },
    CosineDistLoss {
        pred: NodeId,
        target: Arc<Tensor>,
    },
    MseLoss {
        pred: NodeId,
        target: Arc<Tensor>,
        weight: Option<Arc<Tensor>>,
    },
    GaussianNllSum {
        mu: NodeId,
        logvar: NodeId,
        target: Arc<Tensor>,
    },
    KlStdNormalSum {
        mu: NodeId,
        logvar: NodeId,
    },
}

struct Node {
    value: Arc<Tensor>,
    grad: Option<Vec<f32>>,
    op: Op,
    track: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    /// Scan every op output for NaN/Inf. On by default in debug builds.
    pub check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, track: bool) -> NodeId {
        if self.check_finite {
            if let Some(i) = value.find_non_finite() {
                panic!(
                    "non-finite value at flat index {i} in op output (shape {:?})",
                    value.shape()
                );
            }
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            grad: None,
            op,
            track,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn arc(&self, id: NodeId) -> Arc<Tensor> {
        Arc::clone(&self.nodes[id.0].value)
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].track
    }

    /// Gradient of a leaf after `backward`. `None` if untracked or unreached.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn scalar_value(&self, id: NodeId) -> f32 {
        let t = self.value(id);
        assert_eq!(t.numel(), 1, "expected scalar node");
        t.data()[0]
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Shared, non-trainable input (e.g. frozen parameters, data).
    pub fn input(&mut self, t: Arc<Tensor>) -> NodeId {
        self.nodes.push(Node {
            value: t,
            grad: None,
            op: Op::Leaf,
            track: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Shared trainable parameter; receives a gradient on `backward`.
    pub fn param(&mut self, t: Arc<Tensor>) -> NodeId {
        self.nodes.push(Node {
            value: t,
            grad: None,
            op: Op::Leaf,
            track: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    // ── elementwise and linear ──────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data);
        let track = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Add(a, b), track)
    }

    /// `x + bias`, bias broadcast over the last dimension.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = *tx.shape().last().expect("add_bias on empty shape");
        assert_eq!(tb.shape(), [d], "bias must match last dim {d}");
        let bd = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % d])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data);
        let track = self.tracked(x) || self.tracked(bias);
        self.push(out, Op::AddBias(x, bias), track)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data);
        let track = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Mul(a, b), track)
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(ta.shape().to_vec(), data);
        let track = self.tracked(a);
        self.push(out, Op::Scale(a, c), track)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = crate::tensor::matmul(self.value(a), self.value(b));
        let track = self.tracked(a) || self.tracked(b);
        self.push(out, Op::MatMul(a, b), track)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu_f(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data);
        let track = self.tracked(x);
        self.push(out, Op::Gelu(x), track)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| sigmoid_f(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data);
        let track = self.tracked(x);
        self.push(out, Op::Sigmoid(x), track)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v.exp()).collect();
        let out = Tensor::new(tx.shape().to_vec(), data);
        let track = self.tracked(x);
        self.push(out, Op::Exp(x), track)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f32, hi: f32) -> NodeId {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data);
        let track = self.tracked(x);
        self.push(out, Op::Clamp(x, lo, hi), track)
    }

    /// Layer normalization over the last dimension with `eps = 1e-5`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        const EPS: f32 = 1e-5;
        let tx = self.value(x);
        let d = *tx.shape().last().expect("layer_norm on empty shape");
        assert!(d >= 2, "layer_norm needs last dim >= 2, got {d}");
        assert_eq!(self.value(gain).shape(), [d]);
        assert_eq!(self.value(bias).shape(), [d]);
        let rows = tx.numel() / d;
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut data = vec![0.0f32; tx.numel()];
        let mut saved = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = &tx.data()[r * d..(r + 1) * d];
            let mean = (xr.iter().map(|&v| v as f64).sum::<f64>() / d as f64) as f32;
            let var = (xr
                .iter()
                .map(|&v| {
                    let c = (v - mean) as f64;
                    c * c
                })
                .sum::<f64>()
                / d as f64) as f32;
            let rstd = 1.0 / (var + EPS).sqrt();
            saved.push((mean, rstd));
            for j in 0..d {
                data[r * d + j] = (xr[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data);
        let track = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, saved }, track)
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let d = *tx.shape().last().expect("softmax on empty shape");
        let rows = tx.numel() / d;
        let mut probs = vec![0.0f32; tx.numel()];
        for r in 0..rows {
            let xr = &tx.data()[r * d..(r + 1) * d];
            softmax_row(xr, &mut probs[r * d..(r + 1) * d]);
        }
        let out = Tensor::new(tx.shape().to_vec(), probs.clone());
        let track = self.tracked(x);
        self.push(out, Op::Softmax { x, probs }, track)
    }

    /// Fused multi-head scaled-dot-product attention.
    ///
    /// `q: [tq, d]`, `k, v: [tk, d]` with `d = heads * head_dim`. Masked
    /// positions are excluded from the softmax entirely.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: &AttnMask,
        policy: EmptyRowPolicy,
    ) -> NodeId {
        let (tq, d) = self.value(q).dims2();
        let (tk, dk) = self.value(k).dims2();
        let (tv, dv) = self.value(v).dims2();
        assert_eq!(d, dk, "attention q/k dim mismatch");
        assert_eq!(d, dv, "attention k/v dim mismatch");
        assert_eq!(tk, tv, "attention k/v length mismatch");
        assert_eq!(d % heads, 0, "model dim {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();

        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![0.0f32; heads * tq * tk];
        let mut out = vec![0.0f32; tq * d];
        let mut scores = vec![0.0f32; tq * tk];
        for h in 0..heads {
            // scores = scale * q_h @ k_h^T, full dense; masking happens below.
            unsafe {
                matrixmultiply::sgemm(
                    tq,
                    dh,
                    tk,
                    scale,
                    qd.as_ptr().add(h * dh),
                    d as isize,
                    1,
                    kd.as_ptr().add(h * dh),
                    1,
                    d as isize,
                    0.0,
                    scores.as_mut_ptr(),
                    tk as isize,
                    1,
                );
            }
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            for i in 0..tq {
                let row = &scores[i * tk..(i + 1) * tk];
                let prow = &mut p[i * tk..(i + 1) * tk];
                let mut max = f32::NEG_INFINITY;
                for (j, &s) in row.iter().enumerate() {
                    if mask.visible(i, j, tk) && s > max {
                        max = s;
                    }
                }
                if max == f32::NEG_INFINITY {
                    match policy {
                        EmptyRowPolicy::Error => {
                            panic!("attention query row {i} has no visible key")
                        }
                        EmptyRowPolicy::ZeroOutput => continue,
                    }
                }
                let mut sum = 0.0f64;
                for (j, &s) in row.iter().enumerate() {
                    if mask.visible(i, j, tk) {
                        let e = (s - max).exp();
                        prow[j] = e;
                        sum += e as f64;
                    }
                }
                let inv = (1.0 / sum) as f32;
                for pj in prow.iter_mut() {
                    *pj *= inv;
                }
            }
            // out_h = p @ v_h
            unsafe {
                matrixmultiply::sgemm(
                    tq,
                    tk,
                    dh,
                    1.0,
                    p.as_ptr(),
                    tk as isize,
                    1,
                    vd.as_ptr().add(h * dh),
                    d as isize,
                    1,
                    0.0,
                    out.as_mut_ptr().add(h * dh),
                    d as isize,
                    1,
                );
            }
        }
        let out = Tensor::new(vec![tq, d], out);
        let track = self.tracked(q) || self.tracked(k) || self.tracked(v);
        self.push(out, Op::Attention { q, k, v, heads, probs }, track)
    }

    // ── shape ───────────────────────────────────────────────────────────

    /// Gather rows of a 2-D tensor by index (embedding lookup / row select).
    pub fn select_rows(&mut self, x: NodeId, idx: &[u32]) -> NodeId {
        let (rows, cols) = self.value(x).dims2();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!((i as usize) < rows, "row index {i} out of {rows}");
            data.extend_from_slice(self.value(x).row(i as usize));
        }
        let out = Tensor::new(vec![idx.len(), cols], data);
        let track = self.tracked(x);
        self.push(out, Op::SelectRows(x, idx.to_vec()), track)
    }

    /// Stack 2-D tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            assert_eq!(c, cols, "concat_rows column mismatch");
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, cols], data);
        let track = parts.iter().any(|&p| self.tracked(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), track)
    }

    pub fn transpose2(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).transposed2();
        let track = self.tracked(x);
        self.push(out, Op::Transpose2(x), track)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let out = self.value(x).clone().reshaped(shape);
        let track = self.tracked(x);
        self.push(out, Op::Reshape(x), track)
    }

    // ── convolution ─────────────────────────────────────────────────────

    /// 2-D convolution: `x [cin, h, w]`, `w [cout, cin, kh, kw]`, square
    /// stride/padding. Implemented as im2col + sgemm.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [cin, h, w]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [cout, cin, kh, kw]");
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let cols = im2col(self.value(x).data(), cin, h, wd, kh, kw, stride, pad, oh, ow);
        // out[cout, oh*ow] = w_flat[cout, cin*kh*kw] @ cols
        let kdim = cin * kh * kw;
        let mut out = vec![0.0f32; cout * oh * ow];
        gemm(
            1.0,
            self.value(w).data(),
            cout,
            kdim,
            false,
            &cols,
            kdim,
            oh * ow,
            false,
            0.0,
            &mut out,
        );
        if let Some(bid) = b {
            let bt = self.value(bid);
            assert_eq!(bt.shape(), [cout], "conv2d bias shape");
            for c in 0..cout {
                let bias = bt.data()[c];
                for v in &mut out[c * oh * ow..(c + 1) * oh * ow] {
                    *v += bias;
                }
            }
        }
        let out = Tensor::new(vec![cout, oh, ow], out);
        let track = self.tracked(x)
            || self.tracked(w)
            || b.map(|bid| self.tracked(bid)).unwrap_or(false);
        self.push(out, Op::Conv2d { x, w, b, stride, pad, cols }, track)
    }

    /// Rearrange `[c*r*r, h, w]` into `[c, h*r, w*r]` (sub-pixel upsample).
    pub fn pixel_shuffle(&mut self, x: NodeId, r: usize) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3, "pixel_shuffle input must be [c*r*r, h, w]");
        let (cr2, h, w) = (xs[0], xs[1], xs[2]);
        assert_eq!(cr2 % (r * r), 0, "channels {cr2} not divisible by r^2");
        let c = cr2 / (r * r);
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; c * h * r * w * r];
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let src_c = ch * r * r + dy * r + dx;
                    for y in 0..h {
                        for xcol in 0..w {
                            out[ch * (h * r * w * r) + (y * r + dy) * (w * r) + (xcol * r + dx)] =
                                xd[src_c * h * w + y * w + xcol];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![c, h * r, w * r], out);
        let track = self.tracked(x);
        self.push(out, Op::PixelShuffle { x, r }, track)
    }

    // ── reductions and losses ───────────────────────────────────────────

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let m = (tx.data().iter().map(|&v| v as f64).sum::<f64>() / tx.numel() as f64) as f32;
        let track = self.tracked(x);
        self.push(Tensor::scalar(m), Op::MeanAll(x), track)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let s = tx.data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let track = self.tracked(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), track)
    }

    /// `sum(w ⊙ x)` with a constant weight tensor.
    pub fn weighted_sum(&mut self, x: NodeId, w: Tensor) -> NodeId {
        let tx = self.value(x);
        assert_eq!(tx.shape(), w.shape(), "weighted_sum shape mismatch");
        let s = tx
            .data()
            .iter()
            .zip(w.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum::<f64>() as f32;
        let track = self.tracked(x);
        self.push(Tensor::scalar(s), Op::WeightedSum(x, w), track)
    }

    /// Weighted token cross-entropy: `sum_i w_i * nll_i / sum_i w_i`.
    ///
    /// A zero weight sum yields loss 0 with zero gradients.
    pub fn ce_loss(&mut self, logits: NodeId, targets: &[u32], weights: &[f32]) -> NodeId {
        let (t, v) = self.value(logits).dims2();
        assert_eq!(targets.len(), t, "ce_loss target count");
        assert_eq!(weights.len(), t, "ce_loss weight count");
        let ld = self.value(logits).data();
        let mut probs = vec![0.0f32; t * v];
        let mut loss = 0.0f64;
        let mut wsum = 0.0f64;
        for i in 0..t {
            let row = &ld[i * v..(i + 1) * v];
            let prow = &mut probs[i * v..(i + 1) * v];
            softmax_row(row, prow);
            let w = weights[i] as f64;
            if w != 0.0 {
                assert!((targets[i] as usize) < v, "target id out of vocab");
                let p = prow[targets[i] as usize].max(1e-12);
                loss -= w * (p as f64).ln();
                wsum += w;
            }
        }
        let value = if wsum > 0.0 { (loss / wsum) as f32 } else { 0.0 };
        let track = self.tracked(logits);
        self.push(
            Tensor::scalar(value),
            Op::CeLoss {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                weight_sum: wsum,
            },
            track,
        )
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: NodeId, target: Arc<Tensor>) -> NodeId {
        let tp = self.value(pred);
        assert_eq!(tp.shape(), target.shape(), "l1_loss shape mismatch");
        let n = tp.numel() as f64;
        let s = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>();
        let track = self.tracked(pred);
        self.push(
            Tensor::scalar((s / n) as f32),
            Op::L1Loss { pred, target },
            track,
        )
    }

    /// Mean over rows of `1 - cos(pred_row, target_row)`.
    ///
    /// A zero-norm row contributes exactly 1 and no gradient.
    pub fn cosine_dist_loss(&mut self, pred: NodeId, target: Arc<Tensor>) -> NodeId {
        let (rows, _d) = self.value(pred).dims2();
        assert_eq!(self.value(pred).shape(), target.shape());
        let mut total = 0.0f64;
        for r in 0..rows {
            let p = self.value(pred).row(r);
            let t = target.row(r);
            let (dot, np, nt) = row_dot_norms(p, t);
            if np < 1e-12 || nt < 1e-12 {
                total += 1.0;
            } else {
                total += 1.0 - dot / (np * nt);
            }
        }
        let track = self.tracked(pred);
        self.push(
            Tensor::scalar((total / rows as f64) as f32),
            Op::CosineDistLoss { pred, target },
            track,
        )
    }

    /// Mean of `w ⊙ (pred - target)^2` (plain MSE when `weight` is `None`).
    pub fn mse_loss(
        &mut self,
        pred: NodeId,
        target: Arc<Tensor>,
        weight: Option<Arc<Tensor>>,
    ) -> NodeId {
        let tp = self.value(pred);
        assert_eq!(tp.shape(), target.shape(), "mse_loss shape mismatch");
        if let Some(w) = &weight {
            assert_eq!(tp.shape(), w.shape(), "mse_loss weight shape mismatch");
        }
        let n = tp.numel() as f64;
        let mut s = 0.0f64;
        for i in 0..tp.numel() {
            let d = (tp.data()[i] - target.data()[i]) as f64;
            let w = weight.as_ref().map(|w| w.data()[i] as f64).unwrap_or(1.0);
            s += w * d * d;
        }
        let track = self.tracked(pred);
        self.push(
            Tensor::scalar((s / n) as f32),
            Op::MseLoss { pred, target, weight },
            track,
        )
    }

    /// Diagonal-Gaussian negative log-likelihood of `target`, summed over all
    /// dimensions: `sum_i 0.5*ln(2*pi*sigma_i^2) + (t_i - mu_i)^2 / (2*sigma_i^2)`.
    pub fn gaussian_nll_sum(&mut self, mu: NodeId, logvar: NodeId, target: Arc<Tensor>) -> NodeId {
        let tm = self.value(mu);
        assert_eq!(tm.shape(), self.value(logvar).shape());
        assert_eq!(tm.shape(), target.shape());
        const LN_2PI: f64 = 1.8378770664093453;
        let lv = self.value(logvar).data();
        let mut s = 0.0f64;
        for i in 0..tm.numel() {
            let d = (target.data()[i] - tm.data()[i]) as f64;
            let lvi = lv[i] as f64;
            s += 0.5 * (LN_2PI + lvi) + d * d * (-lvi).exp() * 0.5;
        }
        let track = self.tracked(mu) || self.tracked(logvar);
        self.push(
            Tensor::scalar(s as f32),
            Op::GaussianNllSum { mu, logvar, target },
            track,
        )
    }

    /// `KL(N(mu, sigma^2) || N(0, 1))` summed over dimensions.
    pub fn kl_std_normal_sum(&mut self, mu: NodeId, logvar: NodeId) -> NodeId {
        let tm = self.value(mu);
        assert_eq!(tm.shape(), self.value(logvar).shape());
        let lv = self.value(logvar).data();
        let mut s = 0.0f64;
        for i in 0..tm.numel() {
            let m = tm.data()[i] as f64;
            let l = lv[i] as f64;
            s += -0.5 * (1.0 + l - m * m - l.exp());
        }
        let track = self.tracked(mu) || self.tracked(logvar);
        self.push(Tensor::scalar(s as f32), Op::KlStdNormalSum { mu, logvar }, track)
    }

    // ── backward ────────────────────────────────────────────────────────

    fn add_grad(&mut self, id: NodeId, delta: &[f32]) {
        if !self.nodes[id.0].track {
            return;
        }
        let n = self.nodes[id.0].value.numel();
        assert_eq!(delta.len(), n, "gradient size mismatch");
        let g = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; n]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    fn grad_buf(&mut self, id: NodeId) -> Option<&mut Vec<f32>> {
        if !self.nodes[id.0].track {
            return None;
        }
        let n = self.nodes[id.0].value.numel();
        Some(self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; n]))
    }

    /// Reverse pass from a scalar loss. Each node is visited exactly once;
    /// gradients accumulate additively into tracked leaves.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        assert!(
            self.nodes[loss.0].track,
            "loss does not depend on any trainable parameter"
        );
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].track {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let is_leaf = matches!(op, Op::Leaf);
            if !is_leaf {
                self.backward_op(op, NodeId(i), &gout);
            }
            if is_leaf {
                self.nodes[i].grad = Some(gout);
            }
        }
    }

    fn backward_op(&mut self, op: Op, out: NodeId, gout: &[f32]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(a, gout);
                self.add_grad(b, gout);
            }
            Op::AddBias(x, bias) => {
                self.add_grad(x, gout);
                if self.tracked(bias) {
                    let d = self.value(bias).numel();
                    let mut gb = vec![0.0f32; d];
                    for (i, g) in gout.iter().enumerate() {
                        gb[i % d] += g;
                    }
                    self.add_grad(bias, &gb);
                }
            }
            Op::Mul(a, b) => {
                let ta = self.arc(a);
                let tb = self.arc(b);
                if self.tracked(a) {
                    let d: Vec<f32> = gout.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    self.add_grad(a, &d);
                }
                if self.tracked(b) {
                    let d: Vec<f32> = gout.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    self.add_grad(b, &d);
                }
            }
            Op::Scale(a, c) => {
                if self.tracked(a) {
                    let d: Vec<f32> = gout.iter().map(|g| g * c).collect();
                    self.add_grad(a, &d);
                }
            }
            Op::MatMul(a, b) => {
                let ta = self.arc(a);
                let tb = self.arc(b);
                let (m, k) = ta.dims2();
                let (_, n) = tb.dims2();
                if self.tracked(a) {
                    // dA = dC @ B^T
                    let mut da = vec![0.0f32; m * k];
                    gemm(1.0, gout, m, n, false, tb.data(), k, n, true, 0.0, &mut da);
                    self.add_grad(a, &da);
                }
                if self.tracked(b) {
                    // dB = A^T @ dC
                    let mut db = vec![0.0f32; k * n];
                    gemm(1.0, ta.data(), m, k, true, gout, m, n, false, 0.0, &mut db);
                    self.add_grad(b, &db);
                }
            }
            Op::Gelu(x) => {
                let tx = self.arc(x);
                let d: Vec<f32> = tx
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&v, g)| g * gelu_df(v))
                    .collect();
                self.add_grad(x, &d);
            }
            Op::Sigmoid(x) => {
                let ty = self.arc(out);
                let d: Vec<f32> = ty
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&s, g)| g * s * (1.0 - s))
                    .collect();
                self.add_grad(x, &d);
            }
            Op::Exp(x) => {
                let ty = self.arc(out);
                let d: Vec<f32> = ty.data().iter().zip(gout).map(|(&e, g)| g * e).collect();
                self.add_grad(x, &d);
            }
            Op::Clamp(x, lo, hi) => {
                let tx = self.arc(x);
                let d: Vec<f32> = tx
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&v, g)| if v >= lo && v <= hi { *g } else { 0.0 })
                    .collect();
                self.add_grad(x, &d);
            }
            Op::LayerNorm { x, gain, bias, saved } => {
                let tx = self.arc(x);
                let tg = self.arc(gain);
                let d = *tx.shape().last().unwrap();
                let rows = tx.numel() / d;
                let mut dx = vec![0.0f32; tx.numel()];
                let mut dgain = vec![0.0f32; d];
                let mut dbias = vec![0.0f32; d];
                for r in 0..rows {
                    let (mean, rstd) = saved[r];
                    let xr = &tx.data()[r * d..(r + 1) * d];
                    let gr = &gout[r * d..(r + 1) * d];
                    let mut m1 = 0.0f64; // mean of dxhat
                    let mut m2 = 0.0f64; // mean of dxhat * xhat
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = gr[j] * tg.data()[j];
                        m1 += dxhat as f64;
                        m2 += (dxhat * xhat) as f64;
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = gr[j] * tg.data()[j];
                        dx[r * d + j] = rstd * (dxhat - m1 as f32 - xhat * m2 as f32);
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gain, &dgain);
                self.add_grad(bias, &dbias);
            }
            Op::Softmax { x, probs } => {
                let d = *self.value(out).shape().last().unwrap();
                let rows = probs.len() / d;
                let mut dx = vec![0.0f32; probs.len()];
                for r in 0..rows {
                    let p = &probs[r * d..(r + 1) * d];
                    let g = &gout[r * d..(r + 1) * d];
                    let dot: f64 = p.iter().zip(g).map(|(&a, &b)| a as f64 * b as f64).sum();
                    for j in 0..d {
                        dx[r * d + j] = p[j] * (g[j] - dot as f32);
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let tq_t = self.arc(q);
                let tk_t = self.arc(k);
                let tv_t = self.arc(v);
                let (tq, d) = tq_t.dims2();
                let (tk, _) = tk_t.dims2();
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let mut dq = vec![0.0f32; tq * d];
                let mut dk = vec![0.0f32; tk * d];
                let mut dv = vec![0.0f32; tk * d];
                let mut dp = vec![0.0f32; tq * tk];
                let mut ds = vec![0.0f32; tq * tk];
                for h in 0..heads {
                    let p = &probs[h * tq * tk..(h + 1) * tq * tk];
                    unsafe {
                        // dV_h += P^T @ dOut_h
                        matrixmultiply::sgemm(
                            tk, tq, dh, 1.0,
                            p.as_ptr(), 1, tk as isize,
                            gout.as_ptr().add(h * dh), d as isize, 1,
                            1.0,
                            dv.as_mut_ptr().add(h * dh), d as isize, 1,
                        );
                        // dP = dOut_h @ V_h^T
                        matrixmultiply::sgemm(
                            tq, dh, tk, 1.0,
                            gout.as_ptr().add(h * dh), d as isize, 1,
                            tv_t.data().as_ptr().add(h * dh), 1, d as isize,
                            0.0,
                            dp.as_mut_ptr(), tk as isize, 1,
                        );
                    }
                    // dS = P ⊙ (dP - rowsum(P ⊙ dP)); zeros stay zero at
                    // masked positions because P is zero there.
                    for i in 0..tq {
                        let pr = &p[i * tk..(i + 1) * tk];
                        let dpr = &dp[i * tk..(i + 1) * tk];
                        let dot: f64 = pr.iter().zip(dpr).map(|(&a, &b)| a as f64 * b as f64).sum();
                        for j in 0..tk {
                            ds[i * tk + j] = pr[j] * (dpr[j] - dot as f32);
                        }
                    }
                    unsafe {
                        // dQ_h += scale * dS @ K_h
                        matrixmultiply::sgemm(
                            tq, tk, dh, scale,
                            ds.as_ptr(), tk as isize, 1,
                            tk_t.data().as_ptr().add(h * dh), d as isize, 1,
                            1.0,
                            dq.as_mut_ptr().add(h * dh), d as isize, 1,
                        );
                        // dK_h += scale * dS^T @ Q_h
                        matrixmultiply::sgemm(
                            tk, tq, dh, scale,
                            ds.as_ptr(), 1, tk as isize,
                            tq_t.data().as_ptr().add(h * dh), d as isize, 1,
                            1.0,
                            dk.as_mut_ptr().add(h * dh), d as isize, 1,
                        );
                    }
                }
                self.add_grad(q, &dq);
                self.add_grad(k, &dk);
                self.add_grad(v, &dv);
            }
            Op::SelectRows(x, idx) => {
                if self.tracked(x) {
                    let (_, cols) = self.value(x).dims2();
                    let n = self.value(x).numel();
                    // Scatter-add directly into the input's gradient buffer.
                    let buf = self.grad_buf(x).unwrap();
                    assert_eq!(buf.len(), n);
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut buf[i as usize * cols..(i as usize + 1) * cols];
                        let src = &gout[r * cols..(r + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(p).numel();
                    if self.tracked(p) {
                        self.add_grad(p, &gout[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Transpose2(x) => {
                let (r, c) = self.value(out).dims2();
                let mut dx = vec![0.0f32; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = gout[i * c + j];
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::Reshape(x) => {
                self.add_grad(x, gout);
            }
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                let tx = self.arc(x);
                let tw = self.arc(w);
                let xs = tx.shape().to_vec();
                let ws = tw.shape().to_vec();
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (wd + 2 * pad - kw) / stride + 1;
                let kdim = cin * kh * kw;
                if self.tracked(w) {
                    // dW = dOut_flat @ cols^T
                    let mut dw = vec![0.0f32; cout * kdim];
                    gemm(1.0, gout, cout, oh * ow, false, &cols, kdim, oh * ow, true, 0.0, &mut dw);
                    self.add_grad(w, &dw);
                }
                if let Some(bid) = b {
                    if self.tracked(bid) {
                        let mut db = vec![0.0f32; cout];
                        for c in 0..cout {
                            db[c] = gout[c * oh * ow..(c + 1) * oh * ow].iter().sum();
                        }
                        self.add_grad(bid, &db);
                    }
                }
                if self.tracked(x) {
                    // dcols = W^T @ dOut_flat, then fold back with col2im.
                    let mut dcols = vec![0.0f32; kdim * oh * ow];
                    gemm(1.0, tw.data(), cout, kdim, true, gout, cout, oh * ow, false, 0.0, &mut dcols);
                    let dx = col2im(&dcols, cin, h, wd, kh, kw, stride, pad, oh, ow);
                    self.add_grad(x, &dx);
                }
            }
            Op::PixelShuffle { x, r } => {
                let os = self.value(out).shape().to_vec();
                let (c, hr, wr) = (os[0], os[1], os[2]);
                let (h, w) = (hr / r, wr / r);
                let mut dx = vec![0.0f32; c * r * r * h * w];
                for ch in 0..c {
                    for dy in 0..r {
                        for dx_ in 0..r {
                            let src_c = ch * r * r + dy * r + dx_;
                            for y in 0..h {
                                for xcol in 0..w {
                                    dx[src_c * h * w + y * w + xcol] +=
                                        gout[ch * (hr * wr) + (y * r + dy) * wr + (xcol * r + dx_)];
                                }
                            }
                        }
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::MeanAll(x) => {
                let n = self.value(x).numel();
                let g = gout[0] / n as f32;
                let d = vec![g; n];
                self.add_grad(x, &d);
            }
            Op::SumAll(x) => {
                let n = self.value(x).numel();
                let d = vec![gout[0]; n];
                self.add_grad(x, &d);
            }
            Op::WeightedSum(x, wt) => {
                let d: Vec<f32> = wt.data().iter().map(|w| w * gout[0]).collect();
                self.add_grad(x, &d);
            }
            Op::CeLoss { logits, targets, weights, probs, weight_sum } => {
                if weight_sum > 0.0 {
                    let (t, v) = self.value(logits).dims2();
                    let gscale = gout[0] / weight_sum as f32;
                    let mut dl = probs;
                    for i in 0..t {
                        let w = weights[i];
                        let row = &mut dl[i * v..(i + 1) * v];
                        if w == 0.0 {
                            row.iter_mut().for_each(|p| *p = 0.0);
                            continue;
                        }
                        row[targets[i] as usize] -= 1.0;
                        for p in row.iter_mut() {
                            *p *= w * gscale;
                        }
                    }
                    self.add_grad(logits, &dl);
                }
            }
            Op::L1Loss { pred, target } => {
                let tp = self.arc(pred);
                let n = tp.numel() as f32;
                let g = gout[0] / n;
                let d: Vec<f32> = tp
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| {
                        if a > b {
                            g
                        } else if a < b {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.add_grad(pred, &d);
            }
            Op::CosineDistLoss { pred, target } => {
                let tp = self.arc(pred);
                let (rows, dcols) = tp.dims2();
                let g = gout[0] / rows as f32;
                let mut d = vec![0.0f32; tp.numel()];
                for r in 0..rows {
                    let p = tp.row(r);
                    let t = target.row(r);
                    let (dot, np, nt) = row_dot_norms(p, t);
                    if np < 1e-12 || nt < 1e-12 {
                        continue;
                    }
                    let c = dot / (np * nt);
                    for j in 0..dcols {
                        // d(1-cos)/dp_j = -(t_j/(|p||t|) - cos * p_j/|p|^2)
                        d[r * dcols + j] =
                            -g * ((t[j] as f64 / (np * nt) - c * p[j] as f64 / (np * np)) as f32);
                    }
                }
                self.add_grad(pred, &d);
            }
            Op::MseLoss { pred, target, weight } => {
                let tp = self.arc(pred);
                let n = tp.numel() as f32;
                let g = 2.0 * gout[0] / n;
                let d: Vec<f32> = (0..tp.numel())
                    .map(|i| {
                        let w = weight.as_ref().map(|w| w.data()[i]).unwrap_or(1.0);
                        g * w * (tp.data()[i] - target.data()[i])
                    })
                    .collect();
                self.add_grad(pred, &d);
            }
            Op::GaussianNllSum { mu, logvar, target } => {
                let tm = self.arc(mu);
                let tl = self.arc(logvar);
                let g = gout[0];
                if self.tracked(mu) {
                    let d: Vec<f32> = (0..tm.numel())
                        .map(|i| {
                            let inv_var = (-tl.data()[i]).exp();
                            g * (tm.data()[i] - target.data()[i]) * inv_var
                        })
                        .collect();
                    self.add_grad(mu, &d);
                }
                if self.tracked(logvar) {
                    let d: Vec<f32> = (0..tm.numel())
                        .map(|i| {
                            let diff = target.data()[i] - tm.data()[i];
                            let inv_var = (-tl.data()[i]).exp();
                            g * (0.5 - 0.5 * diff * diff * inv_var)
                        })
                        .collect();
                    self.add_grad(logvar, &d);
                }
            }
            Op::KlStdNormalSum { mu, logvar } => {
                let tm = self.arc(mu);
                let tl = self.arc(logvar);
                let g = gout[0];
                if self.tracked(mu) {
                    let d: Vec<f32> = tm.data().iter().map(|&m| g * m).collect();
                    self.add_grad(mu, &d);
                }
                if self.tracked(logvar) {
                    let d: Vec<f32> = tl
                        .data()
                        .iter()
                        .map(|&l| g * 0.5 * (l.exp() - 1.0))
                        .collect();
                    self.add_grad(logvar, &d);
                }
            }
        }
    }
}

// ── scalar helpers ──────────────────────────────────────────────────────

fn softmax_row(x: &[f32], out: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum += e as f64;
    }
    let inv = (1.0 / sum) as f32;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

fn row_dot_norms(p: &[f32], t: &[f32]) -> (f64, f64, f64) {
    let mut dot = 0.0f64;
    let mut np = 0.0f64;
    let mut nt = 0.0f64;
    for (&a, &b) in p.iter().zip(t) {
        dot += a as f64 * b as f64;
        np += a as f64 * a as f64;
        nt += b as f64 * b as f64;
    }
    (dot, np.sqrt(), nt.sqrt())
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu_f(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_df(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid_f(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let mut cols = vec![0.0f32; cin * kh * kw * oh * ow];
    let ostride = oh * ow;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row * ostride + oy * ow + ox] =
                            x[c * h * w + iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let mut dx = vec![0.0f32; cin * h * w];
    let ostride = oh * ow;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[c * h * w + iy as usize * w + ix as usize] +=
                            dcols[row * ostride + oy * ow + ox];
                    }
                }
            }
        }
    }
    dx
}
