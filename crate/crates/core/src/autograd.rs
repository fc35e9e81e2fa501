//! A small define-by-run reverse-mode autodiff tape over [`Tensor`].
//!
//! Every forward op appends a node that owns its output value plus whatever
//! it needs for the backward pass. Gradients are only propagated into nodes
//! whose inputs transitively include a leaf created with `requires_grad`.

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which statistics a batch-norm node normalizes with.
#[derive(Clone, Debug)]
pub enum NormStats<'a> {
    /// Statistics of the current batch.
    Batch,
    /// Externally supplied per-channel mean and (biased) variance.
    Fixed { mean: &'a [f32], var: &'a [f32] },
}

/// Per-channel statistics observed by a batch-statistics normalization.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f32>,
    /// Unbiased variance, the convention used for running estimates.
    pub var_unbiased: Vec<f32>,
}

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        cols: Vec<f32>,
    },
    BatchNorm {
        x: Var,
        weight: Var,
        bias: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        weight: Var,
        bias: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Relu(Var),
    Gelu(Var),
    AvgPool2(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat1(Vec<Var>),
    Narrow1 {
        x: Var,
        start: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f32>,
    },
    Add(Var, Var),
    AddBroadcast {
        x: Var,
        y: Var,
    },
    MulBroadcast {
        x: Var,
        y: Var,
    },
    SumLast(Var),
    AddConst(Var),
    MulConst {
        x: Var,
        mask: Vec<f32>,
    },
    Scale(Var, f32),
    External {
        inputs: Vec<Var>,
        grads: Vec<Tensor>,
    },
    WeightedSum(Vec<(Var, f32)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar root with respect to every leaf that required them.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn rows_of(t: &Tensor) -> (usize, usize) {
    let last = *t.shape().last().expect("rank >= 1");
    (if last == 0 { 0 } else { t.len() / last }, last)
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `x[.., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xs, ws) = (self.value(x), self.value(w));
        let (rows, fan_in) = rows_of(xs);
        assert_eq!(ws.ndim(), 2);
        assert_eq!(ws.dim(0), fan_in, "linear: input width {fan_in} vs weight {:?}", ws.shape());
        let fan_out = ws.dim(1);
        let mut out = vec![0.0; rows * fan_out];
        gemm(rows, fan_in, fan_out, xs.data(), fan_in, 1, ws.data(), fan_out, 1, &mut out, 0.0);
        if let Some(b) = b {
            let bs = self.value(b).data();
            assert_eq!(bs.len(), fan_out);
            for r in out.chunks_exact_mut(fan_out) {
                for (o, bv) in r.iter_mut().zip(bs) {
                    *o += *bv;
                }
            }
        }
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = fan_out;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::from_vec(&shape, out), Op::Linear { x, w, b }, &inputs)
    }

    /// Batched `a[g] · b[g]` (or `a[g] · b[g]ᵀ` when `trans_b`), with 3-D operands.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(at.ndim(), 3);
        assert_eq!(bt.ndim(), 3);
        let (g, m, k) = (at.dim(0), at.dim(1), at.dim(2));
        assert_eq!(bt.dim(0), g);
        let n = if trans_b { bt.dim(1) } else { bt.dim(2) };
        assert_eq!(if trans_b { bt.dim(2) } else { bt.dim(1) }, k, "bmm inner extent");
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            let ag = &at.data()[i * m * k..(i + 1) * m * k];
            let bg = &bt.data()[i * k * n..(i + 1) * k * n];
            let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
            gemm(m, k, n, ag, k, 1, bg, rsb, csb, &mut out[i * m * n..(i + 1) * m * n], 0.0);
        }
        self.push(
            Tensor::from_vec(&[g, m, n], out),
            Op::Bmm { a, b, trans_b },
            &[a, b],
        )
    }

    /// 3×3 convolution, stride 1, zero padding 1, no bias. `w` is `[c_out, c_in·9]`.
    pub fn conv3x3(&mut self, x: Var, w: Var) -> Var {
        let (xt, wt) = (self.value(x), self.value(w));
        let (b, c_in, h, wd) = (xt.dim(0), xt.dim(1), xt.dim(2), xt.dim(3));
        let c_out = wt.dim(0);
        let kk = c_in * 9;
        assert_eq!(wt.dim(1), kk, "conv weight {:?} for {c_in} input channels", wt.shape());
        let hw = h * wd;
        let mut cols = vec![0.0; b * kk * hw];
        for bi in 0..b {
            let img = &xt.data()[bi * c_in * hw..(bi + 1) * c_in * hw];
            im2col(img, c_in, h, wd, &mut cols[bi * kk * hw..(bi + 1) * kk * hw]);
        }
        let mut out = vec![0.0; b * c_out * hw];
        for bi in 0..b {
            gemm(
                c_out,
                kk,
                hw,
                wt.data(),
                kk,
                1,
                &cols[bi * kk * hw..],
                hw,
                1,
                &mut out[bi * c_out * hw..(bi + 1) * c_out * hw],
                0.0,
            );
        }
        self.push(
            Tensor::from_vec(&[b, c_out, h, wd], out),
            Op::Conv3x3 { x, w, cols },
            &[x, w],
        )
    }

    /// Per-channel normalization of `[B, C, H, W]` followed by the affine map.
    ///
    /// Returns the batch moments when `stats` is [`NormStats::Batch`], so the
    /// caller can maintain running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        stats: NormStats<'_>,
        eps: f32,
    ) -> (Var, Option<BatchMoments>) {
        let xt = self.value(x);
        let (b, c) = (xt.dim(0), xt.dim(1));
        let hw: usize = xt.shape()[2..].iter().product();
        let n = b * hw;
        let (mean, var, moments) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0f64; c];
                let mut sq = vec![0.0f64; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let s = &xt.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                        for &v in s {
                            mean[ci] += v as f64;
                        }
                    }
                }
                for m in &mut mean {
                    *m /= n as f64;
                }
                for bi in 0..b {
                    for ci in 0..c {
                        let s = &xt.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                        for &v in s {
                            let d = v as f64 - mean[ci];
                            sq[ci] += d * d;
                        }
                    }
                }
                let var: Vec<f32> = sq.iter().map(|s| (s / n as f64) as f32).collect();
                let unbiased = sq
                    .iter()
                    .map(|s| (s / (n.max(2) - 1) as f64) as f32)
                    .collect();
                let mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, var, Some(moments))
            }
            NormStats::Fixed { mean, var } => (mean.to_vec(), var.to_vec(), None),
        };
        assert_eq!(mean.len(), c);
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (wv, bv) = (self.value(weight).data(), self.value(bias).data());
        let mut xhat = vec![0.0; xt.len()];
        let mut out = vec![0.0; xt.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                for j in off..off + hw {
                    let h = (xt.data()[j] - mean[ci]) * inv_std[ci];
                    xhat[j] = h;
                    out[j] = wv[ci] * h + bv[ci];
                }
            }
        }
        let batch_stats = moments.is_some();
        let shape = xt.shape().to_vec();
        let v = self.push(
            Tensor::from_vec(&shape, out),
            Op::BatchNorm {
                x,
                weight,
                bias,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, weight, bias],
        );
        (v, moments)
    }

    /// Normalization over the last axis followed by the affine map.
    pub fn layer_norm(&mut self, x: Var, weight: Var, bias: Var, eps: f32) -> Var {
        let xt = self.value(x);
        let (rows, d) = rows_of(xt);
        let (wv, bv) = (self.value(weight).data(), self.value(bias).data());
        let mut xhat = vec![0.0; xt.len()];
        let mut out = vec![0.0; xt.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xt.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = wv[j] * h + bv[j];
            }
        }
        let shape = xt.shape().to_vec();
        self.push(
            Tensor::from_vec(&shape, out),
            Op::LayerNorm {
                x,
                weight,
                bias,
                xhat,
                inv_std,
            },
            &[x, weight, bias],
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    /// 2×2 average pooling with stride 2 on `[B, C, H, W]`.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (b, c, h, w) = (xt.dim(0), xt.dim(1), xt.dim(2), xt.dim(3));
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even extents, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            let src = &xt.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        self.push(Tensor::from_vec(&[b, c, oh, ow], out), Op::AvgPool2(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let out = permute(self.value(x), perm);
        self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (rows, d) = rows_of(xt);
        let mut out = xt.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = xt.shape().to_vec();
        self.push(Tensor::from_vec(&shape, out), Op::Softmax(x), &[x])
    }

    /// Row lookup into `table[V, D]`; the result has shape `index_shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], index_shape: &[usize]) -> Var {
        let tt = self.value(table);
        let d = tt.dim(1);
        assert_eq!(ids.len(), index_shape.iter().product::<usize>());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        self.push(
            Tensor::from_vec(&shape, out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Concatenation of `[B, L_i, D]` tensors along axis 1.
    pub fn concat1(&mut self, parts: &[Var]) -> Var {
        let b = self.value(parts[0]).dim(0);
        let d = self.value(parts[0]).dim(2);
        let total: usize = parts.iter().map(|p| self.value(*p).dim(1)).sum();
        let mut out = Vec::with_capacity(b * total * d);
        for bi in 0..b {
            for p in parts {
                let t = self.value(*p);
                assert_eq!((t.dim(0), t.dim(2)), (b, d), "concat1 extents");
                let l = t.dim(1);
                out.extend_from_slice(&t.data()[bi * l * d..(bi + 1) * l * d]);
            }
        }
        self.push(
            Tensor::from_vec(&[b, total, d], out),
            Op::Concat1(parts.to_vec()),
            parts,
        )
    }

    /// `x[:, start..start + len, :]` of a 3-D tensor.
    pub fn narrow1(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let (b, l, d) = (t.dim(0), t.dim(1), t.dim(2));
        assert!(start + len <= l);
        let mut out = Vec::with_capacity(b * len * d);
        for bi in 0..b {
            out.extend_from_slice(&t.data()[(bi * l + start) * d..(bi * l + start + len) * d]);
        }
        self.push(Tensor::from_vec(&[b, len, d], out), Op::Narrow1 { x, start }, &[x])
    }

    /// Scales each row (last axis) to unit L2 norm; zero rows are rejected.
    pub fn l2_normalize(&mut self, x: Var) -> crate::Result<Var> {
        let t = self.value(x);
        let (rows, d) = rows_of(t);
        let mut out = t.data().to_vec();
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let n = row.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt() as f32;
            if n == 0.0 || !n.is_finite() {
                return Err(crate::Error::Normalization { row: r });
            }
            norms[r] = n;
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_vec(&shape, out), Op::L2Normalize { x, norms }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add extents");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// `x + y` where `y`'s shape equals the trailing axes of `x`.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Var {
        let yt = self.value(y);
        let mut out = self.value(x).clone();
        assert!(out.shape().ends_with(yt.shape()), "add_broadcast {:?} + {:?}", out.shape(), yt.shape());
        let n = yt.len();
        for chunk in out.data_mut().chunks_exact_mut(n) {
            for (o, v) in chunk.iter_mut().zip(yt.data()) {
                *o += *v;
            }
        }
        self.push(out, Op::AddBroadcast { x, y }, &[x, y])
    }

    /// `x * y` where `y`'s shape equals the trailing axes of `x`.
    pub fn mul_broadcast(&mut self, x: Var, y: Var) -> Var {
        let yt = self.value(y);
        let mut out = self.value(x).clone();
        assert!(out.shape().ends_with(yt.shape()), "mul_broadcast {:?} * {:?}", out.shape(), yt.shape());
        let n = yt.len();
        for chunk in out.data_mut().chunks_exact_mut(n) {
            for (o, v) in chunk.iter_mut().zip(yt.data()) {
                *o *= *v;
            }
        }
        self.push(out, Op::MulBroadcast { x, y }, &[x, y])
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, d) = rows_of(t);
        let out: Vec<f32> = (0..rows).map(|r| t.data()[r * d..(r + 1) * d].iter().sum()).collect();
        let shape = t.shape()[..t.ndim() - 1].to_vec();
        self.push(Tensor::from_vec(&shape, out), Op::SumLast(x), &[x])
    }

    /// Adds a constant of identical shape (attention masks, for instance).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Var {
        let mut out = self.value(x).clone();
        out.add_assign(c);
        self.push(out, Op::AddConst(x), &[x])
    }

    /// Elementwise product with a constant of identical shape.
    pub fn mul_const(&mut self, x: Var, mask: Vec<f32>) -> Var {
        let t = self.value(x);
        assert_eq!(t.len(), mask.len());
        let out: Vec<f32> = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_vec(&shape, out), Op::MulConst { x, mask }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// A scalar computed outside the tape whose gradients with respect to
    /// `inputs` are already known.
    pub fn external(&mut self, inputs: &[Var], value: f32, grads: Vec<Tensor>) -> Var {
        assert_eq!(inputs.len(), grads.len());
        for (v, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.shape(*v), g.shape(), "external gradient extent");
        }
        self.push(
            Tensor::scalar(value),
            Op::External {
                inputs: inputs.to_vec(),
                grads,
            },
            inputs,
        )
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, parts: &[(Var, f32)]) -> Var {
        let total = parts.iter().map(|(v, w)| w * self.value(*v).item()).sum();
        let inputs: Vec<Var> = parts.iter().map(|p| p.0).collect();
        self.push(Tensor::scalar(total), Op::WeightedSum(parts.to_vec()), &inputs)
    }

    /// Reverse pass from the scalar `root`. Only leaf gradients are retained.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (rows, fan_in) = rows_of(xt);
                let fan_out = wt.dim(1);
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * fan_in];
                    gemm(rows, fan_out, fan_in, gd, fan_out, 1, wt.data(), 1, fan_out, &mut dx, 0.0);
                    self.accumulate(grads, *x, Tensor::from_vec(xt.shape(), dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; fan_in * fan_out];
                    gemm(fan_in, rows, fan_out, xt.data(), 1, fan_in, gd, fan_out, 1, &mut dw, 0.0);
                    self.accumulate(grads, *w, Tensor::from_vec(wt.shape(), dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; fan_out];
                        for r in gd.chunks_exact(fan_out) {
                            for (d, v) in db.iter_mut().zip(r) {
                                *d += *v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[fan_out], db));
                    }
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (gn, m, k) = (at.dim(0), at.dim(1), at.dim(2));
                let n = if *trans_b { bt.dim(1) } else { bt.dim(2) };
                if self.wants(*a) {
                    let mut da = vec![0.0; gn * m * k];
                    for i in 0..gn {
                        let dc = &gd[i * m * n..(i + 1) * m * n];
                        let bg = &bt.data()[i * k * n..(i + 1) * k * n];
                        // dA = dC · Bᵀ (or dC · B when B is stored transposed)
                        let (rsb, csb) = if *trans_b { (k, 1) } else { (1, n) };
                        gemm(m, n, k, dc, n, 1, bg, rsb, csb, &mut da[i * m * k..(i + 1) * m * k], 0.0);
                    }
                    self.accumulate(grads, *a, Tensor::from_vec(at.shape(), da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; gn * k * n];
                    for i in 0..gn {
                        let dc = &gd[i * m * n..(i + 1) * m * n];
                        let ag = &at.data()[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, dc, 1, n, ag, k, 1, out, 0.0);
                        } else {
                            gemm(k, m, n, ag, 1, k, dc, n, 1, out, 0.0);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(bt.shape(), db));
                }
            }
            Op::Conv3x3 { x, w, cols } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (b, c_in, h, wd) = (xt.dim(0), xt.dim(1), xt.dim(2), xt.dim(3));
                let c_out = wt.dim(0);
                let kk = c_in * 9;
                let hw = h * wd;
                if self.wants(*w) {
                    let mut dw = vec![0.0; c_out * kk];
                    for bi in 0..b {
                        let dy = &gd[bi * c_out * hw..(bi + 1) * c_out * hw];
                        gemm(c_out, hw, kk, dy, hw, 1, &cols[bi * kk * hw..], 1, hw, &mut dw, 1.0);
                    }
                    self.accumulate(grads, *w, Tensor::from_vec(wt.shape(), dw));
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; xt.len()];
                    let mut dcols = vec![0.0; kk * hw];
                    for bi in 0..b {
                        let dy = &gd[bi * c_out * hw..(bi + 1) * c_out * hw];
                        gemm(kk, c_out, hw, wt.data(), 1, kk, dy, hw, 1, &mut dcols, 0.0);
                        col2im(&dcols, c_in, h, wd, &mut dx[bi * c_in * hw..(bi + 1) * c_in * hw]);
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(xt.shape(), dx));
                }
            }
            Op::BatchNorm {
                x,
                weight,
                bias,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xt = self.value(*x);
                let (b, c) = (xt.dim(0), xt.dim(1));
                let hw: usize = xt.shape()[2..].iter().product();
                let n = (b * hw) as f32;
                let wv = self.value(*weight).data();
                let mut sum_dy = vec![0.0f32; c];
                let mut sum_dy_xhat = vec![0.0f32; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        let (mut s, mut sx) = (0.0, 0.0);
                        for j in off..off + hw {
                            s += gd[j];
                            sx += gd[j] * xhat[j];
                        }
                        sum_dy[ci] += s;
                        sum_dy_xhat[ci] += sx;
                    }
                }
                if self.wants(*weight) {
                    self.accumulate(grads, *weight, Tensor::from_vec(&[c], sum_dy_xhat.clone()));
                }
                if self.wants(*bias) {
                    self.accumulate(grads, *bias, Tensor::from_vec(&[c], sum_dy.clone()));
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; xt.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * hw;
                            let k = wv[ci] * inv_std[ci];
                            for j in off..off + hw {
                                dx[j] = if *batch_stats {
                                    k * (gd[j] - sum_dy[ci] / n - xhat[j] * sum_dy_xhat[ci] / n)
                                } else {
                                    k * gd[j]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(xt.shape(), dx));
                }
            }
            Op::LayerNorm {
                x,
                weight,
                bias,
                xhat,
                inv_std,
            } => {
                let xt = self.value(*x);
                let (rows, d) = rows_of(xt);
                let wv = self.value(*weight).data();
                let mut dw = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut dx = vec![0.0; xt.len()];
                for r in 0..rows {
                    let (mut s, mut sx) = (0.0, 0.0);
                    for j in 0..d {
                        let i = r * d + j;
                        dw[j] += gd[i] * xhat[i];
                        db[j] += gd[i];
                        let gh = gd[i] * wv[j];
                        s += gh;
                        sx += gh * xhat[i];
                    }
                    for j in 0..d {
                        let i = r * d + j;
                        let gh = gd[i] * wv[j];
                        dx[i] = inv_std[r] * (gh - s / d as f32 - xhat[i] * sx / d as f32);
                    }
                }
                self.accumulate(grads, *weight, Tensor::from_vec(&[d], dw));
                self.accumulate(grads, *bias, Tensor::from_vec(&[d], db));
                self.accumulate(grads, *x, Tensor::from_vec(xt.shape(), dx));
            }
            Op::Relu(x) => {
                let xt = self.value(*x);
                let dx: Vec<f32> =
                    xt.data().iter().zip(gd).map(|(v, g)| if *v > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *x, Tensor::from_vec(xt.shape(), dx));
            }
            Op::Gelu(x) => {
                let xt = self.value(*x);
                let dx: Vec<f32> = xt.data().iter().zip(gd).map(|(v, g)| g * gelu_grad(*v)).collect();
                self.accumulate(grads, *x, Tensor::from_vec(xt.shape(), dx));
            }
            Op::AvgPool2(x) => {
                let xt = self.value(*x);
                let (b, c, h, w) = (xt.dim(0), xt.dim(1), xt.dim(2), xt.dim(3));
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; xt.len()];
                for p in 0..b * c {
                    let src = &gd[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            let v = 0.25 * src[y * ow + xx];
                            let i = 2 * y * w + 2 * xx;
                            dst[i] = v;
                            dst[i + 1] = v;
                            dst[i + w] = v;
                            dst[i + w + 1] = v;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xt.shape(), dx));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape));
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                self.accumulate(grads, *x, permute(g, &inverse));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (rows, d) = rows_of(y);
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(y.shape(), dx));
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let d = tt.dim(1);
                let mut dt = vec![0.0; tt.len()];
                for (k, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += gd[k * d + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::from_vec(tt.shape(), dt));
            }
            Op::Concat1(parts) => {
                let (b, total, d) = (g.dim(0), g.dim(1), g.dim(2));
                let mut offset = 0;
                for p in parts {
                    let l = self.value(*p).dim(1);
                    if self.wants(*p) {
                        let mut dp = Vec::with_capacity(b * l * d);
                        for bi in 0..b {
                            let start = (bi * total + offset) * d;
                            dp.extend_from_slice(&gd[start..start + l * d]);
                        }
                        self.accumulate(grads, *p, Tensor::from_vec(&[b, l, d], dp));
                    }
                    offset += l;
                }
            }
            Op::Narrow1 { x, start } => {
                let xt = self.value(*x);
                let (b, l, d) = (xt.dim(0), xt.dim(1), xt.dim(2));
                let len = g.dim(1);
                let mut dx = vec![0.0; xt.len()];
                for bi in 0..b {
                    let dst = (bi * l + start) * d;
                    dx[dst..dst + len * d].copy_from_slice(&gd[bi * len * d..(bi + 1) * len * d]);
                }
                self.accumulate(grads, *x, Tensor::from_vec(xt.shape(), dx));
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let (rows, d) = rows_of(y);
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(y.shape(), dx));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBroadcast { x, y } => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*y) {
                    let yt = self.value(*y);
                    let mut dy = vec![0.0; yt.len()];
                    for chunk in gd.chunks_exact(yt.len()) {
                        for (d, v) in dy.iter_mut().zip(chunk) {
                            *d += *v;
                        }
                    }
                    self.accumulate(grads, *y, Tensor::from_vec(yt.shape(), dy));
                }
            }
            Op::MulBroadcast { x, y } => {
                let (xt, yt) = (self.value(*x), self.value(*y));
                let n = yt.len();
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for chunk in dx.data_mut().chunks_exact_mut(n) {
                        for (d, v) in chunk.iter_mut().zip(yt.data()) {
                            *d *= *v;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*y) {
                    let mut dy = vec![0.0; n];
                    for (gc, xc) in gd.chunks_exact(n).zip(xt.data().chunks_exact(n)) {
                        for j in 0..n {
                            dy[j] += gc[j] * xc[j];
                        }
                    }
                    self.accumulate(grads, *y, Tensor::from_vec(yt.shape(), dy));
                }
            }
            Op::SumLast(x) => {
                let xt = self.value(*x);
                let (_, d) = rows_of(xt);
                let mut dx = Vec::with_capacity(xt.len());
                for &v in gd {
                    dx.extend(std::iter::repeat_n(v, d));
                }
                self.accumulate(grads, *x, Tensor::from_vec(xt.shape(), dx));
            }
            Op::AddConst(x) => self.accumulate(grads, *x, g.clone()),
            Op::MulConst { x, mask } => {
                let dx: Vec<f32> = gd.iter().zip(mask).map(|(a, m)| a * m).collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), dx));
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::External { inputs, grads: local } => {
                let up = g.item();
                for (v, lg) in inputs.iter().zip(local) {
                    self.accumulate(grads, *v, lg.map(|d| d * up));
                }
            }
            Op::WeightedSum(parts) => {
                let up = g.item();
                for (v, w) in parts {
                    self.accumulate(grads, *v, Tensor::scalar(up * w));
                }
            }
        }
    }
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn im2col(img: &[f32], c_in: usize, h: usize, w: usize, cols: &mut [f32]) {
    let hw = h * w;
    for c in 0..c_in {
        let plane = &img[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * hw..(c * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], c_in: usize, h: usize, w: usize, img: &mut [f32]) {
    let hw = h * w;
    for c in 0..c_in {
        let plane = &mut img[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(c * 9 + ky * 3 + kx) * hw..(c * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for x in 1..w {
                                dst[x - 1] += src[x];
                            }
                        }
                        1 => {
                            for x in 0..w {
                                dst[x] += src[x];
                            }
                        }
                        _ => {
                            for x in 0..w - 1 {
                                dst[x + 1] += src[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Materialized axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute(t: &Tensor, perm: &[usize]) -> Tensor {
    let nd = t.ndim();
    assert_eq!(perm.len(), nd);
    let in_shape = t.shape();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(t.len());
    let mut idx = vec![0usize; nd];
    let src = t.data();
    if t.is_empty() {
        return Tensor::from_vec(&out_shape, out);
    }
    // Innermost axis copied in a tight loop.
    let last = nd - 1;
    let (inner_n, inner_s) = (out_shape[last], strides[last]);
    loop {
        let base: usize = idx[..last].iter().zip(&strides[..last]).map(|(i, s)| i * s).sum();
        for j in 0..inner_n {
            out.push(src[base + j * inner_s]);
        }
        let mut axis = last;
        loop {
            if axis == 0 {
                return Tensor::from_vec(&out_shape, out);
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(Σ r ⊙ f(x)) / dx for a scalarized graph builder.
    fn check_grad(shapes: &[&[usize]], build: impl Fn(&mut Graph, &[Var]) -> Var, tol: f32) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
        let eval = |inputs: &[Tensor]| -> (f32, Vec<Tensor>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let out = build(&mut g, &vars);
            let grads = g.backward(out);
            let value = g.value(out).item();
            (value, vars.iter().map(|v| grads.get(*v).cloned().unwrap()).collect())
        };
        let (_, analytic) = eval(&inputs);
        let h = 1e-2f32;
        for (k, t) in inputs.iter().enumerate() {
            for i in 0..t.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let an = analytic[k].data()[i];
                assert!(
                    (fd - an).abs() <= tol * (1.0 + fd.abs().max(an.abs())),
                    "input {k} element {i}: analytic {an} vs numeric {fd}"
                );
            }
        }
    }

    /// Reduce any tensor to a scalar with fixed pseudo-random weights.
    fn scalarize(g: &mut Graph, v: Var) -> Var {
        let n = g.value(v).len();
        let w: Vec<f32> = (0..n).map(|i| ((i * 7 + 3) % 11) as f32 / 11.0 - 0.4).collect();
        let shape = g.shape(v).to_vec();
        let flat = g.reshape(v, &[n]);
        let wv = g.constant(Tensor::from_vec(&[n], w));
        let prod = g.mul_broadcast(flat, wv);
        let _ = shape;
        g.sum_last(prod)
    }

    #[test]
    fn linear_and_gelu_gradients() {
        check_grad(&[&[3, 4], &[4, 5], &[5]], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]));
            let y = g.gelu(y);
            scalarize(g, y)
        }, 2e-2);
    }

    #[test]
    fn bmm_gradients_both_layouts() {
        check_grad(&[&[2, 3, 4], &[2, 4, 5]], |g, v| {
            let y = g.bmm(v[0], v[1], false);
            scalarize(g, y)
        }, 2e-2);
        check_grad(&[&[2, 3, 4], &[2, 5, 4]], |g, v| {
            let y = g.bmm(v[0], v[1], true);
            scalarize(g, y)
        }, 2e-2);
    }

    #[test]
    fn conv_pool_and_batchnorm_gradients() {
        check_grad(&[&[2, 2, 4, 4], &[3, 18], &[3], &[3]], |g, v| {
            let y = g.conv3x3(v[0], v[1]);
            let (y, _) = g.batch_norm(y, v[2], v[3], NormStats::Batch, 1e-5);
            let y = g.avg_pool2(y);
            scalarize(g, y)
        }, 3e-2);
        let mean = [0.1, -0.2];
        let var = [0.5, 2.0];
        check_grad(&[&[2, 2, 2, 2], &[2], &[2]], |g, v| {
            let (y, m) = g.batch_norm(v[0], v[1], v[2], NormStats::Fixed { mean: &mean, var: &var }, 1e-5);
            assert!(m.is_none());
            scalarize(g, y)
        }, 2e-2);
    }

    #[test]
    fn attention_style_chain_gradients() {
        check_grad(&[&[2, 3, 4], &[4], &[4], &[2, 3, 4]], |g, v| {
            let n = g.layer_norm(v[0], v[1], v[2], 1e-5);
            let s = g.bmm(n, v[3], true);
            let p = g.softmax(s);
            let p = g.permute(p, &[0, 2, 1]);
            let o = g.bmm(p, n, false);
            let c = g.concat1(&[o, v[3]]);
            let c = g.narrow1(c, 1, 3);
            scalarize(g, c)
        }, 2e-2);
    }

    #[test]
    fn normalize_broadcast_and_embedding_gradients() {
        check_grad(&[&[3, 4], &[4], &[5, 4]], |g, v| {
            let e = g.embedding(v[2], &[1, 4, 1], &[3]);
            let x = g.add(v[0], e);
            let x = g.add_broadcast(x, v[1]);
            let x = g.mul_broadcast(x, v[1]);
            let x = g.l2_normalize(x).unwrap();
            let x = g.relu(x);
            scalarize(g, x)
        }, 2e-2);
    }

    #[test]
    fn permute_round_trips() {
        let t = Tensor::from_vec(&[2, 3, 4], (0..24).map(|i| i as f32).collect());
        let p = permute(&t, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.data()[1], 4.0);
        assert_eq!(permute(&p, &[1, 2, 0]), t);
    }

    #[test]
    fn zero_row_normalization_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2, 2], vec![3., 4., 0., 0.]), false);
        assert!(matches!(g.l2_normalize(x), Err(crate::Error::Normalization { row: 1 })));
    }
}
