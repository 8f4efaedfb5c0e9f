//! Differentiable primitives: forward on [`Tape`], backward in [`backward_rule`].

use super::tape::{Node, Op, Tape, Var};
use super::tensor::{axis_split, matmul_nn, matmul_nt, matmul_tn, Tensor};
use crate::error::{contract, Error, Result};

pub const LN_EPS: f64 = 1e-5;

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn check_conv_kernel(k: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(contract(format!("conv kernel width {k} must be odd")));
    }
    Ok(())
}

fn transpose2(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
}

/// Rows of a rank-1 or rank-2 tensor viewed as a matrix.
fn as_rows(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [k] => Some((1, *k)),
        [m, k] => Some((*m, *k)),
        _ => None,
    }
}

impl Tape {
    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(x).map(f);
        self.push(out, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, &sa, &sb));
        }
        Ok(())
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            let (m, k) = av.dims2("matmul")?;
            let (k2, n) = bv.dims2("matmul")?;
            if k != k2 {
                return Err(shape_err("matmul", av.shape(), bv.shape()));
            }
            Tensor::from_parts(vec![m, n], matmul_nn(av.data(), bv.data(), m, k, n))
        };
        self.push(out, Op::MatMul(a, b))
    }

    /// `x @ w + b` with `w` laid out `[in, out]`. A rank-1 `x` is one row.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = {
            let (xv, wv) = (self.value(x), self.value(w));
            let (m, k) = as_rows(&xv).ok_or_else(|| shape_err("linear", xv.shape(), wv.shape()))?;
            let (k2, n) = wv.dims2("linear")?;
            if k != k2 {
                return Err(shape_err("linear", xv.shape(), wv.shape()));
            }
            let mut data = matmul_nn(xv.data(), wv.data(), m, k, n);
            if let Some(b) = b {
                let bv = self.value(b);
                if bv.shape() != [n] {
                    return Err(shape_err("linear", bv.shape(), &[n]));
                }
                for row in data.chunks_mut(n) {
                    for (o, bb) in row.iter_mut().zip(bv.data()) {
                        *o += bb;
                    }
                }
            }
            let shape = if xv.rank() == 1 { vec![n] } else { vec![m, n] };
            Tensor::from_parts(shape, data)
        };
        self.push(out, Op::Linear { x, w, b })
    }

    /// Kernel-size-1 convolution over a `[L, C]` sequence; identical to `linear`.
    pub fn pointwise_conv1d(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.linear(x, w, b)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
            Tensor::from_parts(av.shape().to_vec(), data)
        };
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
            Tensor::from_parts(av.shape().to_vec(), data)
        };
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
            Tensor::from_parts(av.shape().to_vec(), data)
        };
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn softplus(&self, x: Var) -> Result<Var> {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn silu(&self, x: Var) -> Result<Var> {
        self.unary(x, silu, Op::Silu(x))
    }

    /// Per-row normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (out, xhat, rstd) = {
            let xv = self.value(x);
            let (gv, bv) = (self.value(gamma), self.value(beta));
            let (m, d) = as_rows(&xv).ok_or_else(|| shape_err("layer_norm", xv.shape(), &[]))?;
            if gv.shape() != [d] || bv.shape() != [d] {
                return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
            }
            let mut out = vec![0.0; m * d];
            let mut xhat = vec![0.0; m * d];
            let mut rstd = vec![0.0; m];
            for i in 0..m {
                let row = &xv.data()[i * d..(i + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let r = 1.0 / (var + LN_EPS).sqrt();
                rstd[i] = r;
                for j in 0..d {
                    let h = (row[j] - mean) * r;
                    xhat[i * d + j] = h;
                    out[i * d + j] = h * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::from_parts(xv.shape().to_vec(), out), xhat, rstd)
        };
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Per-channel 1D convolution of `x[L, C]` with `kernel[C, k]`, zero
    /// padded to keep length `L`. `k` must be odd.
    pub fn depthwise_conv1d(&self, x: Var, kernel: Var) -> Result<Var> {
        let out = {
            let (xv, kv) = (self.value(x), self.value(kernel));
            let (l, c) = xv.dims2("depthwise_conv1d")?;
            let (c2, k) = kv.dims2("depthwise_conv1d")?;
            if c != c2 {
                return Err(shape_err("depthwise_conv1d", xv.shape(), kv.shape()));
            }
            check_conv_kernel(k)?;
            let pad = k / 2;
            let (xd, kd) = (xv.data(), kv.data());
            let mut out = vec![0.0; l * c];
            for t in 0..l {
                for j in 0..k {
                    let Some(s) = (t + j).checked_sub(pad).filter(|&s| s < l) else {
                        continue;
                    };
                    let orow = &mut out[t * c..(t + 1) * c];
                    let xrow = &xd[s * c..(s + 1) * c];
                    for ch in 0..c {
                        orow[ch] += kd[ch * k + j] * xrow[ch];
                    }
                }
            }
            Tensor::from_parts(vec![l, c], out)
        };
        self.push(out, Op::DepthwiseConv { x, kernel })
    }

    /// Dense 1D convolution of `x[L, Cin]` with `kernel[Cout, Cin, k]`,
    /// zero padded to keep length `L`.
    pub fn conv1d(&self, x: Var, kernel: Var) -> Result<Var> {
        let out = {
            let (xv, kv) = (self.value(x), self.value(kernel));
            let (l, cin) = xv.dims2("conv1d")?;
            let &[cout, cin2, k] = kv.shape() else {
                return Err(shape_err("conv1d", xv.shape(), kv.shape()));
            };
            if cin != cin2 {
                return Err(shape_err("conv1d", xv.shape(), kv.shape()));
            }
            check_conv_kernel(k)?;
            let pad = k / 2;
            let (xd, kd) = (xv.data(), kv.data());
            let mut out = vec![0.0; l * cout];
            for t in 0..l {
                for j in 0..k {
                    let Some(s) = (t + j).checked_sub(pad).filter(|&s| s < l) else {
                        continue;
                    };
                    let xrow = &xd[s * cin..(s + 1) * cin];
                    for o in 0..cout {
                        let mut acc = 0.0;
                        for i in 0..cin {
                            acc += kd[(o * cin + i) * k + j] * xrow[i];
                        }
                        out[t * cout + o] += acc;
                    }
                }
            }
            Tensor::from_parts(vec![l, cout], out)
        };
        self.push(out, Op::Conv { x, kernel })
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        self.push(out, Op::Reshape(x))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let (r, c) = xv.dims2("transpose")?;
            Tensor::from_parts(vec![c, r], transpose2(xv.data(), r, c))
        };
        self.push(out, Op::Transpose(x))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| contract("concat of zero tensors"))?;
        let base = self.shape(*first);
        if axis >= base.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, &s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        {
            let nodes = self.nodes.borrow();
            for o in 0..outer {
                for &p in parts {
                    let v = &nodes[p.0].value;
                    let len = v.shape()[axis] * inner;
                    out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
                }
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// `len` entries of `x` starting at `start` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            if axis >= xv.rank() {
                return Err(Error::Axis {
                    op: "slice",
                    axis,
                    rank: xv.rank(),
                });
            }
            let (outer, n, inner) = axis_split(xv.shape(), axis);
            if len == 0 || start + len > n {
                return Err(contract(format!(
                    "slice {start}..{} out of bounds for axis of length {n}",
                    start + len
                )));
            }
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                data.extend_from_slice(&xv.data()[base..base + len * inner]);
            }
            let mut shape = xv.shape().to_vec();
            shape[axis] = len;
            Tensor::from_parts(shape, data)
        };
        self.push(out, Op::Slice { x, axis, start })
    }

    pub fn split(&self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "split",
                axis,
                rank: shape.len(),
            });
        }
        if sizes.iter().sum::<usize>() != shape[axis] {
            return Err(shape_err("split", &shape, sizes));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let v = self.slice(x, axis, start, len);
                start += len;
                v
            })
            .collect()
    }

    /// Rows `x[idx[0]], x[idx[1]], ...`; indices may repeat.
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let n = xv.shape()[0];
            if idx.is_empty() {
                return Err(contract("gather_rows with no indices"));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(contract(format!("row index {bad} out of range for {n} rows")));
            }
            let w = xv.len() / n;
            let mut data = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                data.extend_from_slice(&xv.data()[i * w..(i + 1) * w]);
            }
            let mut shape = xv.shape().to_vec();
            shape[0] = idx.len();
            Tensor::from_parts(shape, data)
        };
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() })
    }

    /// Reverse the row order.
    pub fn reverse_rows(&self, x: Var) -> Result<Var> {
        let n = self.shape(x)[0];
        let idx: Vec<usize> = (0..n).rev().collect();
        self.gather_rows(x, &idx)
    }

    /// `out[i] = sum_j weights[i*k + j] * src[idx[i*k + j]]` for `src[m, C]`.
    pub fn weighted_gather(&self, src: Var, idx: &[usize], weights: &[f64], k: usize) -> Result<Var> {
        let out = {
            let sv = self.value(src);
            let (m, c) = sv.dims2("weighted_gather")?;
            if k == 0 || idx.len() != weights.len() || !idx.len().is_multiple_of(k) || idx.is_empty() {
                return Err(contract("weighted_gather: inconsistent index/weight lengths"));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
                return Err(contract(format!("source index {bad} out of range for {m} rows")));
            }
            let n = idx.len() / k;
            let mut data = vec![0.0; n * c];
            for i in 0..n {
                let orow = &mut data[i * c..(i + 1) * c];
                for j in 0..k {
                    let (s, w) = (idx[i * k + j], weights[i * k + j]);
                    for (o, v) in orow.iter_mut().zip(sv.row(s)) {
                        *o += w * v;
                    }
                }
            }
            Tensor::from_parts(vec![n, c], data)
        };
        self.push(
            out,
            Op::WeightedGather {
                src,
                idx: idx.to_vec(),
                weights: weights.to_vec(),
                k,
            },
        )
    }

    /// Mean of the rows of `x[n, C]` sharing a segment id; `seg[i] < num`.
    pub fn segment_mean(&self, x: Var, seg: &[usize], num: usize) -> Result<Var> {
        let (out, counts) = {
            let xv = self.value(x);
            let (n, c) = xv.dims2("segment_mean")?;
            if seg.len() != n {
                return Err(shape_err("segment_mean", xv.shape(), &[seg.len()]));
            }
            let mut counts = vec![0usize; num];
            let mut data = vec![0.0; num * c];
            for (i, &s) in seg.iter().enumerate() {
                if s >= num {
                    return Err(contract(format!("segment id {s} out of range for {num}")));
                }
                counts[s] += 1;
                for (o, v) in data[s * c..(s + 1) * c].iter_mut().zip(xv.row(i)) {
                    *o += v;
                }
            }
            if counts.contains(&0) {
                return Err(contract("segment_mean: empty segment"));
            }
            for (s, &cnt) in counts.iter().enumerate() {
                data[s * c..(s + 1) * c].iter_mut().for_each(|v| *v /= cnt as f64);
            }
            (Tensor::from_parts(vec![num, c], data), counts)
        };
        self.push(
            out,
            Op::SegmentMean {
                x,
                seg: seg.to_vec(),
                counts,
            },
        )
    }

    /// Average over `axis`, dropping it.
    pub fn mean_pool(&self, x: Var, axis: usize) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            if axis >= xv.rank() {
                return Err(Error::Axis {
                    op: "mean_pool",
                    axis,
                    rank: xv.rank(),
                });
            }
            let (outer, n, inner) = axis_split(xv.shape(), axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for a in 0..n {
                    let src = &xv.data()[(o * n + a) * inner..(o * n + a + 1) * inner];
                    for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            data.iter_mut().for_each(|v| *v /= n as f64);
            let mut shape: Vec<usize> = xv.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::from_parts(shape, data)
        };
        self.push(out, Op::MeanPool { x, axis })
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let c = *xv.shape().last().expect("non-empty shape");
            let mut data = xv.data().to_vec();
            for row in data.chunks_mut(c) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
            Tensor::from_parts(xv.shape().to_vec(), data)
        };
        self.push(out, Op::Softmax(x))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits` (`[C]` with one label, or `[n, C]` with `n` labels).
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let lv = self.value(logits);
            let (n, c) = as_rows(&lv).ok_or_else(|| shape_err("cross_entropy", lv.shape(), &[]))?;
            if labels.len() != n {
                return Err(shape_err("cross_entropy", lv.shape(), &[labels.len()]));
            }
            let mut probs = vec![0.0; n * c];
            let mut loss = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                if y >= c {
                    return Err(contract(format!("label {y} out of range for {c} classes")));
                }
                let row = &lv.data()[i * c..(i + 1) * c];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                let lse = m + z.ln();
                loss += lse - row[y];
                for j in 0..c {
                    probs[i * c + j] = (row[j] - lse).exp();
                }
            }
            (loss / n as f64, probs)
        };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }
}

/// Cotangents for the inputs of `node`, given the cotangent `g` of its output.
pub(crate) fn backward_rule(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
    let val = |v: &Var| &nodes[v.0].value;
    let needs = |v: &Var| nodes[v.0].requires_grad;
    let gd = g.data();
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k) = av.dims2("matmul").expect("checked in forward");
            let n = bv.shape()[1];
            let mut out = Vec::new();
            if needs(a) {
                out.push((*a, Tensor::from_parts(vec![m, k], matmul_nt(gd, bv.data(), m, n, k))));
            }
            if needs(b) {
                out.push((*b, Tensor::from_parts(vec![k, n], matmul_tn(av.data(), gd, m, k, n))));
            }
            out
        }
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(x), val(w));
            let (m, k) = as_rows(xv).expect("checked in forward");
            let n = wv.shape()[1];
            let mut out = Vec::new();
            if needs(x) {
                let gx = matmul_nt(gd, wv.data(), m, n, k);
                out.push((*x, Tensor::from_parts(xv.shape().to_vec(), gx)));
            }
            if needs(w) {
                out.push((*w, Tensor::from_parts(vec![k, n], matmul_tn(xv.data(), gd, m, k, n))));
            }
            if let Some(b) = b.filter(|b| needs(b)) {
                let mut gb = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out.push((b, Tensor::vector(gb)));
            }
            out
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let ga = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
            let gb = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
            vec![
                (*a, Tensor::from_parts(g.shape().to_vec(), ga)),
                (*b, Tensor::from_parts(g.shape().to_vec(), gb)),
            ]
        }
        Op::Scale(x, c) => vec![(*x, g.map(|v| v * c))],
        Op::Exp(x) => {
            let data = gd.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
            vec![(*x, Tensor::from_parts(g.shape().to_vec(), data))]
        }
        Op::Softplus(x) => {
            let data = gd.iter().zip(val(x).data()).map(|(g, &v)| g * sigmoid(v)).collect();
            vec![(*x, Tensor::from_parts(g.shape().to_vec(), data))]
        }
        Op::Silu(x) => {
            let data = gd
                .iter()
                .zip(val(x).data())
                .map(|(g, &v)| {
                    let s = sigmoid(v);
                    g * s * (1.0 + v * (1.0 - s))
                })
                .collect();
            vec![(*x, Tensor::from_parts(g.shape().to_vec(), data))]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = val(gamma).data();
            let d = gv.len();
            let m = rstd.len();
            let mut gx = vec![0.0; m * d];
            let mut ggamma = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            for i in 0..m {
                let grow = &gd[i * d..(i + 1) * d];
                let hrow = &xhat[i * d..(i + 1) * d];
                let mut mean_gh = 0.0;
                let mut mean_ghx = 0.0;
                for j in 0..d {
                    let gh = grow[j] * gv[j];
                    mean_gh += gh;
                    mean_ghx += gh * hrow[j];
                    ggamma[j] += grow[j] * hrow[j];
                    gbeta[j] += grow[j];
                }
                mean_gh /= d as f64;
                mean_ghx /= d as f64;
                for j in 0..d {
                    let gh = grow[j] * gv[j];
                    gx[i * d + j] = rstd[i] * (gh - mean_gh - hrow[j] * mean_ghx);
                }
            }
            vec![
                (*x, Tensor::from_parts(g.shape().to_vec(), gx)),
                (*gamma, Tensor::vector(ggamma)),
                (*beta, Tensor::vector(gbeta)),
            ]
        }
        Op::DepthwiseConv { x, kernel } => {
            let (xv, kv) = (val(x), val(kernel));
            let (l, c) = (xv.shape()[0], xv.shape()[1]);
            let k = kv.shape()[1];
            let pad = k / 2;
            let mut gx = vec![0.0; l * c];
            let mut gk = vec![0.0; c * k];
            for t in 0..l {
                for j in 0..k {
                    let Some(s) = (t + j).checked_sub(pad).filter(|&s| s < l) else {
                        continue;
                    };
                    for ch in 0..c {
                        let gt = gd[t * c + ch];
                        gx[s * c + ch] += kv.data()[ch * k + j] * gt;
                        gk[ch * k + j] += gt * xv.data()[s * c + ch];
                    }
                }
            }
            vec![
                (*x, Tensor::from_parts(vec![l, c], gx)),
                (*kernel, Tensor::from_parts(vec![c, k], gk)),
            ]
        }
        Op::Conv { x, kernel } => {
            let (xv, kv) = (val(x), val(kernel));
            let (l, cin) = (xv.shape()[0], xv.shape()[1]);
            let (cout, k) = (kv.shape()[0], kv.shape()[2]);
            let pad = k / 2;
            let (xd, kd) = (xv.data(), kv.data());
            let mut gx = vec![0.0; l * cin];
            let mut gk = vec![0.0; cout * cin * k];
            for t in 0..l {
                for j in 0..k {
                    let Some(s) = (t + j).checked_sub(pad).filter(|&s| s < l) else {
                        continue;
                    };
                    for o in 0..cout {
                        let gt = gd[t * cout + o];
                        if gt == 0.0 {
                            continue;
                        }
                        for i in 0..cin {
                            let ki = (o * cin + i) * k + j;
                            gx[s * cin + i] += kd[ki] * gt;
                            gk[ki] += gt * xd[s * cin + i];
                        }
                    }
                }
            }
            vec![
                (*x, Tensor::from_parts(vec![l, cin], gx)),
                (*kernel, Tensor::from_parts(kv.shape().to_vec(), gk)),
            ]
        }
        Op::Reshape(x) => vec![(*x, Tensor::from_parts(val(x).shape().to_vec(), gd.to_vec()))],
        Op::Transpose(x) => {
            let (r, c) = (val(x).shape()[0], val(x).shape()[1]);
            vec![(*x, Tensor::from_parts(vec![r, c], transpose2(gd, c, r)))]
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = axis_split(g.shape(), *axis);
            let mut offset = 0;
            parts
                .iter()
                .map(|p| {
                    let shape = val(p).shape().to_vec();
                    let len = shape[*axis];
                    let mut data = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        data.extend_from_slice(&gd[base..base + len * inner]);
                    }
                    offset += len;
                    (*p, Tensor::from_parts(shape, data))
                })
                .collect()
        }
        Op::Slice { x, axis, start } => {
            let shape = val(x).shape().to_vec();
            let (outer, n, inner) = axis_split(&shape, *axis);
            let len = g.shape()[*axis];
            let mut data = vec![0.0; shape.iter().product()];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                data[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*x, Tensor::from_parts(shape, data))]
        }
        Op::GatherRows { x, idx } => {
            let shape = val(x).shape().to_vec();
            let w = val(x).len() / shape[0];
            let mut data = vec![0.0; val(x).len()];
            for (r, &i) in idx.iter().enumerate() {
                for (d, s) in data[i * w..(i + 1) * w].iter_mut().zip(&gd[r * w..(r + 1) * w]) {
                    *d += s;
                }
            }
            vec![(*x, Tensor::from_parts(shape, data))]
        }
        Op::WeightedGather { src, idx, weights, k } => {
            let shape = val(src).shape().to_vec();
            let c = shape[1];
            let mut data = vec![0.0; shape[0] * c];
            for (e, (&s, &w)) in idx.iter().zip(weights).enumerate() {
                let i = e / k;
                for (d, gv) in data[s * c..(s + 1) * c].iter_mut().zip(&gd[i * c..(i + 1) * c]) {
                    *d += w * gv;
                }
            }
            vec![(*src, Tensor::from_parts(shape, data))]
        }
        Op::SegmentMean { x, seg, counts } => {
            let shape = val(x).shape().to_vec();
            let c = shape[1];
            let mut data = vec![0.0; shape[0] * c];
            for (i, &s) in seg.iter().enumerate() {
                let inv = 1.0 / counts[s] as f64;
                for (d, gv) in data[i * c..(i + 1) * c].iter_mut().zip(&gd[s * c..(s + 1) * c]) {
                    *d = gv * inv;
                }
            }
            vec![(*x, Tensor::from_parts(shape, data))]
        }
        Op::MeanPool { x, axis } => {
            let shape = val(x).shape().to_vec();
            let (outer, n, inner) = axis_split(&shape, *axis);
            let inv = 1.0 / n as f64;
            let mut data = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for a in 0..n {
                    let dst = &mut data[(o * n + a) * inner..(o * n + a + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                        *d = s * inv;
                    }
                }
            }
            vec![(*x, Tensor::from_parts(shape, data))]
        }
        Op::Sum(x) => vec![(*x, Tensor::full(val(x).shape(), gd[0]))],
        Op::Softmax(x) => {
            let y = node.value.data();
            let c = *g.shape().last().expect("non-empty shape");
            let mut data = vec![0.0; y.len()];
            for ((dst, yr), gr) in data.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    dst[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![(*x, Tensor::from_parts(g.shape().to_vec(), data))]
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let shape = val(logits).shape().to_vec();
            let c = *shape.last().expect("non-empty shape");
            let scale = gd[0] / labels.len() as f64;
            let mut data = probs.clone();
            for (i, &y) in labels.iter().enumerate() {
                data[i * c + y] -= 1.0;
            }
            data.iter_mut().for_each(|v| *v *= scale);
            vec![(*logits, Tensor::from_parts(shape, data))]
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor> = inputs.iter().map(val).collect();
            op.backward(&ins, &node.value, g)
                .into_iter()
                .zip(inputs)
                .filter_map(|(gi, &v)| gi.map(|t| (v, t)))
                .collect()
        }
    }
}
