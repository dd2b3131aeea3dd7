//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward rule. Recording order is a topological order, so
//! `backward` simply walks the list in reverse.

use rand::Rng;

use super::kernels::{self, axis_split, gemm, gemm_general, interp_coords, Activation, Layout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

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
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batched: bool,
    },
    Transpose(Var),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulBatchScalar(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Derivative is cached when the input needs a gradient.
    Act {
        x: Var,
        slope: Vec<f64>,
    },
    Sigmoid(Var),
    Ln(Var),
    Concat(Vec<Var>),
    SliceLast {
        x: Var,
        start: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    AvgPool {
        x: Var,
        factor: usize,
    },
    Upsample {
        x: Var,
    },
    Reshape(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Bce {
        scores: Var,
        labels: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf handle.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

pub const CLAMP_EPS: f64 = 1e-7;

/// Mean binary cross-entropy with scores clamped to `[ε, 1 − ε]`.
pub fn binary_cross_entropy(scores: &[f64], labels: &[f64]) -> f64 {
    scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let s = s.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
            -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
        })
        .sum::<f64>()
        / labels.len() as f64
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
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

    /// Registers an input tensor. Gradients are tracked when the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that is never differentiated, whatever the tensor's flag says.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `a · b` where `a: [.., m, k]` and either `b: [k, n]` (shared across
    /// the leading axes) or `b: [B, k, n]` matching `a: [B, m, k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`; same batching rules as [`Tape::matmul`] with `b: [.., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let op_name = if trans_b { "matmul_nt" } else { "matmul" };
        if sa.len() < 2 || !(sb.len() == 2 || sb.len() == sa.len()) {
            return Err(Error::shape(op_name, &sa, &sb));
        }
        let batched = sb.len() > 2;
        if batched && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape(op_name, &sa, &sb));
        }
        let (batch, m, k) = Tensor::matrix_dims(&sa);
        let (_, rb, cb) = Tensor::matrix_dims(&sb);
        let (kb, n) = if trans_b { (cb, rb) } else { (rb, cb) };
        if k != kb {
            return Err(Error::shape(op_name, &sa, &sb));
        }
        let lb = if trans_b {
            Layout::transposed(k)
        } else {
            Layout::plain(n)
        };
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.vals(a), self.vals(b));
        if batched {
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    Layout::plain(k),
                    &bv[i * k * n..],
                    lb,
                    &mut out[i * m * n..],
                    0.0,
                );
            }
        } else {
            gemm(batch * m, k, n, av, Layout::plain(k), bv, lb, &mut out, 0.0);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::MatMul {
                a,
                b,
                trans_b,
                batched,
            },
            &[a, b],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", &shape, &[]));
        }
        let (batch, r, c) = Tensor::matrix_dims(&shape);
        let out = transpose_raw(self.vals(x), batch, r, c);
        let mut new_shape = shape;
        let n = new_shape.len();
        new_shape.swap(n - 1, n - 2);
        Ok(self.push(Tensor::from_raw(new_shape, out), Op::Transpose(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_raw(shape, out), Op::Add(a, b), &[a, b]))
    }

    /// `x + y` where `y`'s shape equals the trailing axes of `x`.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x).to_vec(), self.shape(y).to_vec());
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != sy[..] {
            return Err(Error::shape("add_broadcast", &sx, &sy));
        }
        let yv = self.vals(y);
        let mut out = self.vals(x).to_vec();
        for row in out.chunks_mut(yv.len()) {
            add_into(row, yv);
        }
        Ok(self.push(Tensor::from_raw(sx, out), Op::AddBroadcast(x, y), &[x, y]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let out = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_raw(shape, out), Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.vals(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_raw(shape, out), Op::Scale(x, factor), &[x])
    }

    /// Multiplies each leading-axis slice `x[b, ..]` by the scalar `s[b]`.
    pub fn mul_batch_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x).to_vec(), self.shape(s).to_vec());
        let batch = sx[0];
        if self.vals(s).len() != batch {
            return Err(Error::shape("mul_batch_scalar", &sx, &ss));
        }
        let per = self.vals(x).len() / batch;
        let sv = self.vals(s);
        let mut out = self.vals(x).to_vec();
        for (row, &w) in out.chunks_mut(per).zip(sv) {
            row.iter_mut().for_each(|v| *v *= w);
        }
        Ok(self.push(Tensor::from_raw(sx, out), Op::MulBatchScalar(x, s), &[x, s]))
    }

    /// Multi-head scaled dot-product attention without masking.
    ///
    /// `q`, `k`, `v` are `[B, T, d]`; head `h` owns columns
    /// `h·d/heads .. (h+1)·d/heads`. The result holds the heads' outputs side
    /// by side in the same column blocks.
    pub fn multi_head_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 3 || self.shape(k) != sq.as_slice() || self.shape(v) != sq.as_slice() {
            return Err(Error::shape("attention", &sq, self.shape(k)));
        }
        let (b, t, d) = (sq[0], sq[1], sq[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "{d} features cannot be split into {heads} heads"
            )));
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qv, kv, vv) = (self.vals(q), self.vals(k), self.vals(v));
        let mut probs = vec![0.0; b * heads * t * t];
        let mut out = vec![0.0; b * t * d];
        let rows = Layout::plain(d);
        for bi in 0..b {
            for h in 0..heads {
                let off = bi * t * d + h * dk;
                let p = &mut probs[(bi * heads + h) * t * t..][..t * t];
                gemm_general(
                    t,
                    dk,
                    t,
                    scale,
                    &qv[off..],
                    rows,
                    &kv[off..],
                    Layout::transposed(d),
                    p,
                    Layout::plain(t),
                    0.0,
                );
                for row in p.chunks_mut(t) {
                    softmax_in_place(row);
                }
                gemm_general(
                    t,
                    t,
                    dk,
                    1.0,
                    p,
                    Layout::plain(t),
                    &vv[off..],
                    rows,
                    &mut out[off..],
                    rows,
                    0.0,
                );
            }
        }
        Ok(self.push(
            Tensor::from_raw(sq, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention probabilities `[B, heads, T, T]` of a node built by
    /// [`Tape::multi_head_attention`].
    pub fn attention_probs(&self, out: Var) -> Option<Tensor> {
        match &self.nodes[out.0].op {
            Op::Attention { heads, probs, .. } => {
                let s = self.shape(out);
                Some(Tensor::from_raw(
                    vec![s[0], *heads, s[1], s[1]],
                    probs.clone(),
                ))
            }
            _ => None,
        }
    }

    /// Numerically stable softmax along `axis` (per-slice max subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xv = self.vals(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| xv[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (xv[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        Ok(self.push(Tensor::from_raw(shape, out), Op::Softmax { x, axis }, &[x]))
    }

    /// Layer normalization over the last axis with learnable `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let (xv, gv, bv) = (self.vals(x), self.vals(gain), self.vals(bias));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let shape = self.shape(x).to_vec();
        let (out, slope) = if self.nodes[x.0].needs_grad {
            self.vals(x)
                .iter()
                .map(|&v| kind.apply_with_derivative(v))
                .unzip()
        } else {
            (
                self.vals(x).iter().map(|&v| kind.apply(v)).collect(),
                Vec::new(),
            )
        };
        self.push(Tensor::from_raw(shape, out), Op::Act { x, slope }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.vals(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_raw(shape, out), Op::Sigmoid(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.vals(x).iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_raw(shape, out), Op::Ln(x), &[x])
    }

    /// Concatenates along the last axis; all other extents must agree.
    pub fn concat_last_axis(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat_last_axis", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.vals(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::Concat(parts.to_vec()),
            parts,
        ))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last_axis(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().unwrap();
        if len == 0 || start + len > w {
            return Err(Error::Contract(format!(
                "slice {start}..{} out of range for width {w}",
                start + len
            )));
        }
        let out = self
            .vals(x)
            .chunks(w)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut new_shape = shape;
        *new_shape.last_mut().unwrap() = len;
        Ok(self.push(
            Tensor::from_raw(new_shape, out),
            Op::SliceLast { x, start },
            &[x],
        ))
    }

    /// Mean along `axis`, removing that axis (a rank-1 input yields shape `[1]`).
    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "mean axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xv = self.vals(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xv[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut new_shape = shape;
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        Ok(self.push(Tensor::from_raw(new_shape, out), Op::Mean { x, axis }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.vals(x).iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Average-pools the time axis (second to last) by `factor`; a trailing
    /// partial window is averaged over its actual length.
    pub fn avg_pool_time(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::Config("pooling factor must be >= 1".into()));
        }
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("avg_pool_time", &shape, &[]));
        }
        let (batch, t, d) = Tensor::matrix_dims(&shape);
        let t_out = t.div_ceil(factor);
        let xv = self.vals(x);
        let mut out = vec![0.0; batch * t_out * d];
        for b in 0..batch {
            for j in 0..t_out {
                let lo = j * factor;
                let hi = (lo + factor).min(t);
                let dst = &mut out[(b * t_out + j) * d..(b * t_out + j + 1) * d];
                for r in lo..hi {
                    let src = &xv[(b * t + r) * d..(b * t + r + 1) * d];
                    dst.iter_mut().zip(src).for_each(|(o, s)| *o += s);
                }
                let inv = 1.0 / (hi - lo) as f64;
                dst.iter_mut().for_each(|o| *o *= inv);
            }
        }
        let mut new_shape = shape;
        let n = new_shape.len();
        new_shape[n - 2] = t_out;
        Ok(self.push(
            Tensor::from_raw(new_shape, out),
            Op::AvgPool { x, factor },
            &[x],
        ))
    }

    /// Linear interpolation of the time axis onto `target` rows, with output
    /// positions mapped affinely onto `[0, T_s - 1]`.
    pub fn upsample_time(&mut self, x: Var, target: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || target == 0 {
            return Err(Error::shape("upsample_time", &shape, &[target]));
        }
        let (batch, t, d) = Tensor::matrix_dims(&shape);
        let xv = self.vals(x);
        let out = if t == target {
            xv.to_vec()
        } else {
            let coords = interp_coords(t, target);
            let mut out = vec![0.0; batch * target * d];
            for b in 0..batch {
                for (i, &(lo, hi, w)) in coords.iter().enumerate() {
                    let dst = &mut out[(b * target + i) * d..(b * target + i + 1) * d];
                    let a = &xv[(b * t + lo) * d..(b * t + lo + 1) * d];
                    let c = &xv[(b * t + hi) * d..(b * t + hi + 1) * d];
                    for j in 0..d {
                        dst[j] = (1.0 - w) * a[j] + w * c[j];
                    }
                }
            }
            out
        };
        let mut new_shape = shape;
        let n = new_shape.len();
        new_shape[n - 2] = target;
        Ok(self.push(Tensor::from_raw(new_shape, out), Op::Upsample { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and
    /// rescales survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.vals(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.vals(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_raw(shape, out), Op::Dropout { x, mask }, &[x]))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels, with
    /// scores clamped to `[1e-7, 1 - 1e-7]` before the logarithm.
    pub fn bce_loss(&mut self, scores: Var, labels: &[f64]) -> Result<Var> {
        let sv = self.vals(scores);
        if sv.len() != labels.len() {
            return Err(Error::shape(
                "bce_loss",
                self.shape(scores),
                &[labels.len()],
            ));
        }
        let loss = binary_cross_entropy(sv, labels);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                scores,
                labels: labels.to_vec(),
            },
            &[scores],
        ))
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every leaf
    /// that requires them; intermediate gradients are dropped.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.values();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                trans_b,
                batched,
            } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k) = Tensor::matrix_dims(sa);
                let (_, rb, cb) = Tensor::matrix_dims(sb);
                let n = if *trans_b { rb } else { cb };
                let (av, bv) = (self.vals(*a), self.vals(*b));
                // dA = dC · op(B)ᵀ
                let lbt = if *trans_b {
                    Layout::plain(k)
                } else {
                    Layout::transposed(n)
                };
                self.acc(*a, grads, |da| {
                    if *batched {
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..],
                                Layout::plain(n),
                                &bv[i * k * n..],
                                lbt,
                                &mut da[i * m * k..],
                                1.0,
                            );
                        }
                    } else {
                        gemm(batch * m, n, k, g, Layout::plain(n), bv, lbt, da, 1.0);
                    }
                });
                self.acc(*b, grads, |db| {
                    let rows = if *batched { m } else { batch * m };
                    let reps = if *batched { batch } else { 1 };
                    for i in 0..reps {
                        let (ai, gi, bi) = (&av[i * rows * k..], &g[i * rows * n..], i * k * n);
                        if *trans_b {
                            // dB[n×k] = dCᵀ · A
                            gemm(
                                n,
                                rows,
                                k,
                                gi,
                                Layout::transposed(n),
                                ai,
                                Layout::plain(k),
                                &mut db[bi..],
                                1.0,
                            );
                        } else {
                            // dB[k×n] = Aᵀ · dC
                            gemm(
                                k,
                                rows,
                                n,
                                ai,
                                Layout::transposed(k),
                                gi,
                                Layout::plain(n),
                                &mut db[bi..],
                                1.0,
                            );
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (batch, r, c) = Tensor::matrix_dims(self.shape(*x));
                // g has shape [.., c, r]
                let gt = transpose_raw(g, batch, c, r);
                self.acc(*x, grads, |dx| add_into(dx, &gt));
            }
            Op::Add(a, b) => {
                self.acc(*a, grads, |da| add_into(da, g));
                self.acc(*b, grads, |db| add_into(db, g));
            }
            Op::AddBroadcast(x, yv) => {
                self.acc(*x, grads, |dx| add_into(dx, g));
                self.acc(*yv, grads, |dy| {
                    let tile = dy.len();
                    for chunk in g.chunks(tile) {
                        add_into(dy, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.vals(*a), self.vals(*b));
                self.acc(*a, grads, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                self.acc(*b, grads, |db| {
                    for i in 0..db.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(x, c) => {
                self.acc(*x, grads, |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * c);
                });
            }
            Op::MulBatchScalar(x, s) => {
                let (xv, sv) = (self.vals(*x), self.vals(*s));
                let per = xv.len() / sv.len();
                self.acc(*x, grads, |dx| {
                    for (b, &w) in sv.iter().enumerate() {
                        for i in b * per..(b + 1) * per {
                            dx[i] += g[i] * w;
                        }
                    }
                });
                self.acc(*s, grads, |ds| {
                    for b in 0..sv.len() {
                        let r = b * per..(b + 1) * per;
                        ds[b] += g[r.clone()]
                            .iter()
                            .zip(&xv[r])
                            .map(|(a, c)| a * c)
                            .sum::<f64>();
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let s = node.value.shape();
                let (b, t, d) = (s[0], s[1], s[2]);
                let dk = d / heads;
                let scale = 1.0 / (dk as f64).sqrt();
                let (qv, kv, vv) = (self.vals(*q), self.vals(*k), self.vals(*v));
                let rows = Layout::plain(d);
                let sq = Layout::plain(t);
                self.acc(*v, grads, |dv| {
                    for bi in 0..b {
                        for h in 0..*heads {
                            let off = bi * t * d + h * dk;
                            let p = &probs[(bi * heads + h) * t * t..];
                            // dV = Pᵀ · dO
                            gemm_general(
                                t,
                                t,
                                dk,
                                1.0,
                                p,
                                Layout::transposed(t),
                                &g[off..],
                                rows,
                                &mut dv[off..],
                                rows,
                                1.0,
                            );
                        }
                    }
                });
                let need_scores = self.nodes[q.0].needs_grad || self.nodes[k.0].needs_grad;
                if need_scores {
                    // gradient w.r.t. the scaled logits, per (batch, head)
                    let mut ds = vec![0.0; probs.len()];
                    for bi in 0..b {
                        for h in 0..*heads {
                            let off = bi * t * d + h * dk;
                            let base = (bi * heads + h) * t * t;
                            let dp = &mut ds[base..base + t * t];
                            gemm_general(
                                t,
                                dk,
                                t,
                                1.0,
                                &g[off..],
                                rows,
                                &vv[off..],
                                Layout::transposed(d),
                                dp,
                                sq,
                                0.0,
                            );
                            for (dr, pr) in
                                dp.chunks_mut(t).zip(probs[base..base + t * t].chunks(t))
                            {
                                let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                                for (x, &p) in dr.iter_mut().zip(pr) {
                                    *x = p * (*x - dot) * scale;
                                }
                            }
                        }
                    }
                    self.acc(*q, grads, |dq| {
                        for bi in 0..b {
                            for h in 0..*heads {
                                let off = bi * t * d + h * dk;
                                let ds = &ds[(bi * heads + h) * t * t..];
                                gemm_general(
                                    t,
                                    t,
                                    dk,
                                    1.0,
                                    ds,
                                    sq,
                                    &kv[off..],
                                    rows,
                                    &mut dq[off..],
                                    rows,
                                    1.0,
                                );
                            }
                        }
                    });
                    self.acc(*k, grads, |dkk| {
                        for bi in 0..b {
                            for h in 0..*heads {
                                let off = bi * t * d + h * dk;
                                let ds = &ds[(bi * heads + h) * t * t..];
                                gemm_general(
                                    t,
                                    t,
                                    dk,
                                    1.0,
                                    ds,
                                    Layout::transposed(t),
                                    &qv[off..],
                                    rows,
                                    &mut dkk[off..],
                                    rows,
                                    1.0,
                                );
                            }
                        }
                    });
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                self.acc(*x, grads, |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                dx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.vals(*gain);
                let d = gv.len();
                self.acc(*x, grads, |dx| {
                    let mut dh = vec![0.0; d];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                        }
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] +=
                                is / d as f64 * (d as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                });
                self.acc(*gain, grads, |dg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.acc(*bias, grads, |db| {
                    for gr in g.chunks(d) {
                        add_into(db, gr);
                    }
                });
            }
            Op::Act { x, slope } => {
                self.acc(*x, grads, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * slope[i];
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.acc(*x, grads, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Ln(x) => {
                let xv = self.vals(*x);
                self.acc(*x, grads, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[i] / xv[i];
                    }
                });
            }
            Op::Concat(parts) => {
                let total = *node.value.shape().last().unwrap();
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    self.acc(p, grads, |dp| {
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceLast { x, start } => {
                let w = *self.shape(*x).last().unwrap();
                let len = *node.value.shape().last().unwrap();
                self.acc(*x, grads, |dx| {
                    for (r, gr) in g.chunks(len).enumerate() {
                        add_into(&mut dx[r * w + start..r * w + start + len], gr);
                    }
                });
            }
            Op::Mean { x, axis } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let inv = 1.0 / n as f64;
                self.acc(*x, grads, |dx| {
                    for o in 0..outer {
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            for i in 0..inner {
                                dx[base + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.acc(*x, grads, |dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::AvgPool { x, factor } => {
                let (batch, t, d) = Tensor::matrix_dims(self.shape(*x));
                let t_out = t.div_ceil(*factor);
                self.acc(*x, grads, |dx| {
                    for b in 0..batch {
                        for j in 0..t_out {
                            let lo = j * factor;
                            let hi = (lo + factor).min(t);
                            let inv = 1.0 / (hi - lo) as f64;
                            let gr = &g[(b * t_out + j) * d..(b * t_out + j + 1) * d];
                            for r in lo..hi {
                                let dst = &mut dx[(b * t + r) * d..(b * t + r + 1) * d];
                                dst.iter_mut().zip(gr).for_each(|(o, gi)| *o += gi * inv);
                            }
                        }
                    }
                });
            }
            Op::Upsample { x } => {
                let (batch, t, d) = Tensor::matrix_dims(self.shape(*x));
                let target = node.value.shape()[node.value.rank() - 2];
                self.acc(*x, grads, |dx| {
                    if t == target {
                        add_into(dx, g);
                        return;
                    }
                    let coords = interp_coords(t, target);
                    for b in 0..batch {
                        for (i, &(lo, hi, w)) in coords.iter().enumerate() {
                            let gr = &g[(b * target + i) * d..(b * target + i + 1) * d];
                            for j in 0..d {
                                dx[(b * t + lo) * d + j] += (1.0 - w) * gr[j];
                                dx[(b * t + hi) * d + j] += w * gr[j];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc(*x, grads, |dx| add_into(dx, g)),
            Op::Dropout { x, mask } => {
                self.acc(*x, grads, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * mask[i];
                    }
                });
            }
            Op::Bce { scores, labels } => {
                let sv = self.vals(*scores);
                let inv_n = 1.0 / labels.len() as f64;
                self.acc(*scores, grads, |ds| {
                    for i in 0..ds.len() {
                        let s = sv[i];
                        if (CLAMP_EPS..=1.0 - CLAMP_EPS).contains(&s) {
                            let yv = labels[i];
                            ds[i] += g[0] * inv_n * (-yv / s + (1.0 - yv) / (1.0 - s));
                        }
                    }
                });
            }
        }
    }

    /// Runs `f` on the gradient buffer of `v`, allocating it when needed.
    fn acc(&self, v: Var, grads: &mut [Option<Vec<f64>>], f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(buf);
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn transpose_raw(x: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let off = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[off + j * r + i] = x[off + i * c + j];
            }
        }
    }
    out
}
