//! Forward operations. Each op computes its result eagerly and records a
//! graph node when any input requires gradients.

use super::backward::{ConvSpec, Node, Op};
use super::{Tensor, TensorError};

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tensor {
    /// Matrix product `[m×k]·[k×p] -> [m×p]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape()[1] != rhs.shape()[0] {
            return Err(shape_err("matmul", self, rhs));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let p = rhs.shape()[1];
        let a = self.data();
        let b = rhs.data();
        let mut c = vec![0.0; m * p];
        // i-k-j order keeps the inner loop contiguous in both b and c.
        for i in 0..m {
            for kk in 0..k {
                let aik = a[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let brow = &b[kk * p..(kk + 1) * p];
                let crow = &mut c[i * p..(i + 1) * p];
                for j in 0..p {
                    crow[j] += aik * brow[j];
                }
            }
        }
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            c,
            vec![m, p],
            Node::new(vec![self.clone(), rhs.clone()], Op::MatMul),
        ))
    }

    /// `[m×n] -> [n×m]`.
    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "transpose",
                expected: 2,
                shape: self.shape().to_vec(),
            });
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                y[j * m + i] = x[i * n + j];
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            y,
            vec![n, m],
            Node::new(vec![self.clone()], Op::Transpose),
        ))
    }

    /// Same data, new shape (row-major).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::BadShape {
                shape: shape.to_vec(),
                len: self.numel(),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            Node::new(vec![self.clone()], Op::Reshape),
        ))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape() != rhs.shape() {
            return Err(shape_err("add", self, rhs));
        }
        let y = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            Node::new(vec![self.clone(), rhs.clone()], Op::Add),
        ))
    }

    /// Row-wise bias: `[r×d] + [d]`, broadcast over rows.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor, TensorError> {
        if self.rank() != 2 || bias.rank() != 1 || self.shape()[1] != bias.shape()[0] {
            return Err(shape_err("add_bias", self, bias));
        }
        let (r, d) = (self.shape()[0], self.shape()[1]);
        let y = {
            let x = self.data();
            let b = bias.data();
            let mut y = x.clone();
            for i in 0..r {
                for j in 0..d {
                    y[i * d + j] += b[j];
                }
            }
            y
        };
        Ok(Tensor::from_op(
            y,
            vec![r, d],
            Node::new(vec![self.clone(), bias.clone()], Op::AddBias),
        ))
    }

    /// Multiply every entry by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let y = self.data().iter().map(|x| c * x).collect();
        Tensor::from_op(
            y,
            self.shape().to_vec(),
            Node::new(vec![self.clone()], Op::Scale { c }),
        )
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![s], vec![1], Node::new(vec![self.clone()], Op::Sum))
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&self) -> Tensor {
        let x = self.data();
        let mask: Vec<bool> = x.iter().map(|&v| v > 0.0).collect();
        let y = x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        drop(x);
        Tensor::from_op(
            y,
            self.shape().to_vec(),
            Node::new(vec![self.clone()], Op::Relu { mask }),
        )
    }

    /// Softmax along `axis` with max-subtraction; every slice sums to 1.
    ///
    /// Supported on rank-1 (`axis = 0`) and rank-2 tensors (`axis = 1` rows,
    /// `axis = 0` columns).
    pub fn softmax(&self, axis: usize) -> Result<Tensor, TensorError> {
        if axis >= self.rank() || self.rank() > 2 {
            return Err(TensorError::AxisOutOfRange {
                axis,
                shape: self.shape().to_vec(),
            });
        }
        let x = self.data();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let (slices, len, stride, base_stride) = match (self.rank(), axis) {
            (1, 0) => (1, self.shape()[0], 1, 0),
            (2, 1) => (self.shape()[0], self.shape()[1], 1, self.shape()[1]),
            (2, 0) => (self.shape()[1], self.shape()[0], self.shape()[1], 1),
            _ => unreachable!(),
        };
        let mut y = vec![0.0; x.len()];
        for s in 0..slices {
            let idx = |i: usize| s * base_stride + i * stride;
            let mut mx = f64::NEG_INFINITY;
            for i in 0..len {
                mx = mx.max(x[idx(i)]);
            }
            let mut z = 0.0;
            for i in 0..len {
                let e = (x[idx(i)] - mx).exp();
                y[idx(i)] = e;
                z += e;
            }
            for i in 0..len {
                y[idx(i)] /= z;
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            y.clone(),
            self.shape().to_vec(),
            Node::new(vec![self.clone()], Op::Softmax { axis, y }),
        ))
    }

    /// Per-row normalization to zero mean / unit variance, then `gamma·x̂ + beta`.
    pub fn layer_norm(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "layer_norm",
                expected: 2,
                shape: self.shape().to_vec(),
            });
        }
        let (r, d) = (self.shape()[0], self.shape()[1]);
        if gamma.shape() != [d] {
            return Err(shape_err("layer_norm", self, gamma));
        }
        if beta.shape() != [d] {
            return Err(shape_err("layer_norm", self, beta));
        }
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let x = self.data();
        let g = gamma.data();
        let b = beta.data();
        let mut y = vec![0.0; r * d];
        let mut xhat = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &x[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                xhat[i * d + j] = xh;
                y[i * d + j] = g[j] * xh + b[j];
            }
        }
        drop(x);
        drop(g);
        drop(b);
        Ok(Tensor::from_op(
            y,
            vec![r, d],
            Node::new(
                vec![self.clone(), gamma.clone(), beta.clone()],
                Op::LayerNorm { xhat, inv_std },
            ),
        ))
    }

    /// Coordinate-wise maximum over rows: `[J×d] -> [d]`.
    pub fn max_rows(&self) -> Result<Tensor, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "max_rows",
                expected: 2,
                shape: self.shape().to_vec(),
            });
        }
        let (rows, d) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut y = vec![f64::NEG_INFINITY; d];
        let mut argmax = vec![0usize; d];
        for i in 0..rows {
            for j in 0..d {
                let v = x[i * d + j];
                if v > y[j] {
                    y[j] = v;
                    argmax[j] = i;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            y,
            vec![d],
            Node::new(vec![self.clone()], Op::MaxRows { argmax }),
        ))
    }

    /// Cosine similarity of each row of `self` (`[J×d]`) against `v` (`[d]`),
    /// with `eps` guarding zero norms: `α_j = r_j·v / (max(‖r_j‖,eps)·max(‖v‖,eps))`.
    pub fn cosine_rows(&self, v: &Tensor, eps: f64) -> Result<Tensor, TensorError> {
        if self.rank() != 2 || v.rank() != 1 || self.shape()[1] != v.shape()[0] {
            return Err(shape_err("cosine_rows", self, v));
        }
        let (rows, d) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let vv = v.data();
        let norm_v = vv.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mut dots = vec![0.0; rows];
        let mut norms = vec![0.0; rows];
        let mut alpha = vec![0.0; rows];
        let nv = norm_v.max(eps);
        for j in 0..rows {
            let row = &x[j * d..(j + 1) * d];
            let dot: f64 = row.iter().zip(vv.iter()).map(|(a, b)| a * b).sum();
            let nr = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            dots[j] = dot;
            norms[j] = nr;
            alpha[j] = dot / (nr.max(eps) * nv);
        }
        drop(x);
        drop(vv);
        Ok(Tensor::from_op(
            alpha,
            vec![rows],
            Node::new(
                vec![self.clone(), v.clone()],
                Op::CosineRows {
                    eps,
                    dots,
                    row_norms: norms,
                    v_norm: norm_v,
                },
            ),
        ))
    }

    /// Weight rows of `self` (`[J×d]`) by `alpha` (`[J]`) and divide by the
    /// weight sum: `R = Σ_j α_j·x_j / Σ_j α_j`, denominator guarded by `eps`.
    pub fn weighted_row_mean(&self, alpha: &Tensor, eps: f64) -> Result<Tensor, TensorError> {
        if self.rank() != 2 || alpha.rank() != 1 || self.shape()[0] != alpha.shape()[0] {
            return Err(shape_err("weighted_row_mean", self, alpha));
        }
        let (rows, d) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let a = alpha.data();
        let raw: f64 = a.iter().sum();
        let clamped = raw.abs() < eps;
        let denom = if clamped {
            if raw < 0.0 {
                -eps
            } else {
                eps
            }
        } else {
            raw
        };
        let mut num = vec![0.0; d];
        for j in 0..rows {
            let aj = a[j];
            for c in 0..d {
                num[c] += aj * x[j * d + c];
            }
        }
        let y: Vec<f64> = num.iter().map(|v| v / denom).collect();
        drop(x);
        drop(a);
        Ok(Tensor::from_op(
            y,
            vec![d],
            Node::new(
                vec![self.clone(), alpha.clone()],
                Op::WeightedRowMean {
                    denom,
                    clamped,
                    numer: num,
                },
            ),
        ))
    }

    /// Columns `[start, start+width)` of a `[r×W]` tensor.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor, TensorError> {
        if self.rank() != 2 || start + width > self.shape()[1] {
            return Err(TensorError::RankMismatch {
                op: "slice_cols",
                expected: 2,
                shape: self.shape().to_vec(),
            });
        }
        let (r, w_full) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut y = vec![0.0; r * width];
        for i in 0..r {
            y[i * width..(i + 1) * width]
                .copy_from_slice(&x[i * w_full + start..i * w_full + start + width]);
        }
        drop(x);
        Ok(Tensor::from_op(
            y,
            vec![r, width],
            Node::new(vec![self.clone()], Op::SliceCols { start }),
        ))
    }

    /// 2D convolution, valid padding. Input `[H×W×C]`, filters
    /// `[C_out×k×k×C_in]`, bias `[C_out]`, output `[H'×W'×C_out]`.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor, TensorError> {
        if self.rank() != 3 || weight.rank() != 4 {
            return Err(shape_err("conv2d", self, weight));
        }
        let (h, w, c_in) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (c_out, k) = (weight.shape()[0], weight.shape()[1]);
        if weight.shape()[2] != k || weight.shape()[3] != c_in || bias.shape() != [c_out] {
            return Err(shape_err("conv2d", self, weight));
        }
        if k > h || k > w || stride == 0 {
            return Err(shape_err("conv2d", self, weight));
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let spec = ConvSpec {
            h,
            w,
            c_in,
            c_out,
            k,
            stride,
            oh,
            ow,
        };
        let x = self.data();
        let wt = weight.data();
        let b = bias.data();
        let mut y = vec![0.0; oh * ow * c_out];
        for oy in 0..oh {
            for ox in 0..ow {
                for oc in 0..c_out {
                    let mut acc = b[oc];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            for ic in 0..c_in {
                                acc += x[(iy * w + ix) * c_in + ic]
                                    * wt[((oc * k + ky) * k + kx) * c_in + ic];
                            }
                        }
                    }
                    y[(oy * ow + ox) * c_out + oc] = acc;
                }
            }
        }
        drop(x);
        drop(wt);
        drop(b);
        Ok(Tensor::from_op(
            y,
            vec![oh, ow, c_out],
            Node::new(
                vec![self.clone(), weight.clone(), bias.clone()],
                Op::Conv2d { spec },
            ),
        ))
    }

    /// Average pooling over `k×k` windows with stride `k`, valid padding.
    pub fn avg_pool2d(&self, k: usize) -> Result<Tensor, TensorError> {
        if self.rank() != 3 || k == 0 || self.shape()[0] < k || self.shape()[1] < k {
            return Err(TensorError::RankMismatch {
                op: "avg_pool2d",
                expected: 3,
                shape: self.shape().to_vec(),
            });
        }
        let (h, w, c) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (oh, ow) = (h / k, w / k);
        let x = self.data();
        let mut y = vec![0.0; oh * ow * c];
        let inv = 1.0 / (k * k) as f64;
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += x[((oy * k + ky) * w + (ox * k + kx)) * c + ch];
                        }
                    }
                    y[(oy * ow + ox) * c + ch] = acc * inv;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            y,
            vec![oh, ow, c],
            Node::new(
                vec![self.clone()],
                Op::AvgPool2d { k, in_h: h, in_w: w, channels: c },
            ),
        ))
    }
}

/// `X·W + b` with the bias broadcast over rows.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    x.matmul(w)?.add_bias(b)
}

/// Output and attention weights of scaled dot-product attention.
pub struct AttentionResult {
    pub output: Tensor,
    /// Softmax weights, `[rows_q × rows_k]`; row `i` sums to 1.
    pub weights: Tensor,
}

/// `softmax(Q·Kᵀ/√d)·V` with `d` the shared feature width of Q, K, V.
///
/// The attention weights are returned alongside the output so callers can
/// inspect where attention concentrates.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
) -> Result<AttentionResult, TensorError> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(shape_err("scaled_dot_attention", q, k));
    }
    let d = q.shape()[1];
    if k.shape()[1] != d {
        return Err(shape_err("scaled_dot_attention", q, k));
    }
    if v.shape() != k.shape() {
        return Err(shape_err("scaled_dot_attention", k, v));
    }
    let scores = q.matmul(&k.transpose()?)?.scale(1.0 / (d as f64).sqrt());
    let weights = scores.softmax(1)?;
    let output = weights.matmul(v)?;
    Ok(AttentionResult { output, weights })
}

/// Stack `n` rank-1 tensors of equal length into an `[n×d]` matrix.
pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor, TensorError> {
    assert!(!rows.is_empty(), "stack_rows needs at least one row");
    let d = rows[0].shape()[0];
    for r in rows {
        if r.rank() != 1 || r.shape()[0] != d {
            return Err(shape_err("stack_rows", &rows[0], r));
        }
    }
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        data.extend_from_slice(&r.data());
    }
    Ok(Tensor::from_op(
        data,
        vec![rows.len(), d],
        Node::new(rows.to_vec(), Op::StackRows),
    ))
}

/// Concatenate rank-2 tensors with equal row counts along columns.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor, TensorError> {
    assert!(!parts.is_empty(), "concat_cols needs at least one part");
    let r = parts[0].shape()[0];
    for p in parts {
        if p.rank() != 2 || p.shape()[0] != r {
            return Err(shape_err("concat_cols", &parts[0], p));
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
    let total: usize = widths.iter().sum();
    let mut data = vec![0.0; r * total];
    let mut offset = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let src = p.data();
        for i in 0..r {
            data[i * total + offset..i * total + offset + w]
                .copy_from_slice(&src[i * w..(i + 1) * w]);
        }
        offset += w;
    }
    Ok(Tensor::from_op(
        data,
        vec![r, total],
        Node::new(parts.to_vec(), Op::ConcatCols { widths }),
    ))
}

/// Summed binary cross-entropy of a probability vector against a one-hot
/// target: `−Σ_c [Y_c·log Ŷ_c + (1−Y_c)·log(1−Ŷ_c)]`.
///
/// Log arguments are clamped below at `clamp_eps` so the loss stays finite,
/// and the loss is exactly zero when `pred` equals the target.
pub fn bce_sum_loss(
    pred: &Tensor,
    target: &[f64],
    clamp_eps: f64,
) -> Result<Tensor, TensorError> {
    if pred.rank() != 1 || pred.shape()[0] != target.len() {
        return Err(TensorError::ShapeMismatch {
            op: "bce_sum_loss",
            lhs: pred.shape().to_vec(),
            rhs: vec![target.len()],
        });
    }
    let ones = target.iter().filter(|&&t| t == 1.0).count();
    if ones != 1 || target.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(TensorError::TargetNotOneHot {
            reason: format!("expected a single 1 and zeros, got {target:?}"),
        });
    }
    let p = pred.data();
    let mut loss = 0.0;
    let mut inside_pos = vec![false; target.len()];
    let mut inside_neg = vec![false; target.len()];
    for (i, (&pi, &ti)) in p.iter().zip(target.iter()).enumerate() {
        // Clamp inside the logs: perfect predictions contribute exactly 0.
        let pos = pi.clamp(clamp_eps, 1.0);
        let neg = (1.0 - pi).clamp(clamp_eps, 1.0);
        inside_pos[i] = pi > clamp_eps && pi < 1.0;
        inside_neg[i] = (1.0 - pi) > clamp_eps && (1.0 - pi) < 1.0;
        loss -= ti * pos.ln() + (1.0 - ti) * neg.ln();
    }
    drop(p);
    Ok(Tensor::from_op(
        vec![loss],
        vec![1],
        Node::new(
            vec![pred.clone()],
            Op::BceSum {
                target: target.to_vec(),
                clamp_eps,
                inside_pos,
                inside_neg,
            },
        ),
    ))
}

/// Plain (non-graph) cosine similarity with `eps` guarding zero vectors.
pub fn cosine_similarity(u: &[f64], v: &[f64], eps: f64) -> f64 {
    assert_eq!(u.len(), v.len(), "cosine_similarity length mismatch");
    assert!(!u.is_empty());
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt().max(eps);
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(eps);
    dot / (nu * nv)
}
