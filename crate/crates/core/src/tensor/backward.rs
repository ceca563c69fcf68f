//! Reverse-mode gradient accumulation over the recorded graph.

use super::{GradientMap, ParamStore, Tensor, TensorError};
use std::collections::HashMap;

pub(crate) struct Node {
    pub(crate) parents: Vec<Tensor>,
    pub(crate) op: Op,
}

impl Node {
    pub(crate) fn new(parents: Vec<Tensor>, op: Op) -> Node {
        Node { parents, op }
    }
}

#[derive(Clone, Copy)]
pub(crate) struct ConvSpec {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) enum Op {
    MatMul,
    Transpose,
    Reshape,
    Add,
    AddBias,
    Scale { c: f64 },
    Sum,
    Relu { mask: Vec<bool> },
    Softmax { axis: usize, y: Vec<f64> },
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    MaxRows { argmax: Vec<usize> },
    CosineRows { eps: f64, dots: Vec<f64>, row_norms: Vec<f64>, v_norm: f64 },
    WeightedRowMean { denom: f64, clamped: bool, numer: Vec<f64> },
    SliceCols { start: usize },
    StackRows,
    ConcatCols { widths: Vec<usize> },
    BceSum { target: Vec<f64>, clamp_eps: f64, inside_pos: Vec<bool>, inside_neg: Vec<bool> },
    Conv2d { spec: ConvSpec },
    AvgPool2d { k: usize, in_h: usize, in_w: usize, channels: usize },
}

/// Propagate gradients from a scalar `loss` back to every reachable leaf and
/// collect them for the parameters registered in `store`.
///
/// Each graph may be consumed once; a second call without a fresh forward
/// pass returns [`TensorError::GraphConsumed`]. If the loss is not connected
/// to any registered parameter the map is returned empty with a warning.
pub fn backward(loss: &Tensor, store: &ParamStore) -> Result<GradientMap, TensorError> {
    if loss.numel() != 1 {
        return Err(TensorError::NotScalar {
            shape: loss.shape().to_vec(),
        });
    }

    // Post-order DFS over the grad-requiring subgraph.
    let topo = topological_order(loss)?;
    for t in &topo {
        if t.node().is_some() {
            t.inner.consumed.set(true);
        }
    }

    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    grads.insert(loss.id(), vec![1.0]);

    for t in topo.iter().rev() {
        let node = match t.node() {
            Some(n) => n,
            None => continue,
        };
        let gy = match grads.remove(&t.id()) {
            Some(g) => g,
            None => continue, // no downstream contribution
        };
        let mut sink = |parent: &Tensor, contribution: Vec<f64>| {
            if !parent.requires_grad() {
                return;
            }
            let slot = grads
                .entry(parent.id())
                .or_insert_with(|| vec![0.0; parent.numel()]);
            for (a, b) in slot.iter_mut().zip(&contribution) {
                *a += b;
            }
        };
        apply_backward(t, node, &gy, &mut sink);
    }

    // Deposit leaf gradients on the tensors themselves, then assemble the map.
    let mut reached = false;
    for t in &topo {
        if t.node().is_none() && t.requires_grad() {
            if let Some(g) = grads.get(&t.id()) {
                t.accumulate_leaf_grad(g);
                reached = true;
            }
        }
    }

    let mut map = GradientMap::default();
    if !reached {
        log::warn!("backward: loss is detached from every registered parameter");
        return Ok(map);
    }
    for (name, param) in store.iter() {
        let g = grads
            .get(&param.id())
            .cloned()
            .unwrap_or_else(|| vec![0.0; param.numel()]);
        map.insert(name.to_string(), g);
    }
    Ok(map)
}

fn topological_order(root: &Tensor) -> Result<Vec<Tensor>, TensorError> {
    let mut order = Vec::new();
    let mut visited: HashMap<u64, ()> = HashMap::new();
    // Iterative post-order: (tensor, children_expanded)
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if visited.contains_key(&t.id()) {
            continue;
        }
        visited.insert(t.id(), ());
        if let Some(node) = t.node() {
            if t.inner.consumed.get() {
                return Err(TensorError::GraphConsumed);
            }
            stack.push((t.clone(), true));
            for p in &node.parents {
                if p.requires_grad() && !visited.contains_key(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        } else {
            order.push(t);
        }
    }
    Ok(order)
}

fn apply_backward(out: &Tensor, node: &Node, gy: &[f64], sink: &mut dyn FnMut(&Tensor, Vec<f64>)) {
    match &node.op {
        Op::MatMul => {
            let a = &node.parents[0];
            let b = &node.parents[1];
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let p = b.shape()[1];
            if a.requires_grad() {
                // dA = dC · Bᵀ
                let bd = b.data();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..p {
                        let g = gy[i * p + j];
                        if g == 0.0 {
                            continue;
                        }
                        for kk in 0..k {
                            da[i * k + kk] += g * bd[kk * p + j];
                        }
                    }
                }
                drop(bd);
                sink(a, da);
            }
            if b.requires_grad() {
                // dB = Aᵀ · dC
                let ad = a.data();
                let mut db = vec![0.0; k * p];
                for i in 0..m {
                    for kk in 0..k {
                        let v = ad[i * k + kk];
                        if v == 0.0 {
                            continue;
                        }
                        for j in 0..p {
                            db[kk * p + j] += v * gy[i * p + j];
                        }
                    }
                }
                drop(ad);
                sink(b, db);
            }
        }
        Op::Transpose => {
            let x = &node.parents[0];
            let (m, n) = (x.shape()[0], x.shape()[1]);
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    dx[i * n + j] = gy[j * m + i];
                }
            }
            sink(x, dx);
        }
        Op::Reshape => sink(&node.parents[0], gy.to_vec()),
        Op::Add => {
            sink(&node.parents[0], gy.to_vec());
            sink(&node.parents[1], gy.to_vec());
        }
        Op::AddBias => {
            let x = &node.parents[0];
            let b = &node.parents[1];
            let (r, d) = (x.shape()[0], x.shape()[1]);
            sink(x, gy.to_vec());
            if b.requires_grad() {
                let mut db = vec![0.0; d];
                for i in 0..r {
                    for j in 0..d {
                        db[j] += gy[i * d + j];
                    }
                }
                sink(b, db);
            }
        }
        Op::Scale { c } => {
            sink(&node.parents[0], gy.iter().map(|g| c * g).collect());
        }
        Op::Sum => {
            let x = &node.parents[0];
            sink(x, vec![gy[0]; x.numel()]);
        }
        Op::Relu { mask } => {
            let dx = gy
                .iter()
                .zip(mask)
                .map(|(g, &m)| if m { *g } else { 0.0 })
                .collect();
            sink(&node.parents[0], dx);
        }
        Op::Softmax { axis, y } => {
            let x = &node.parents[0];
            let (slices, len, stride, base_stride) = match (x.rank(), *axis) {
                (1, 0) => (1, x.shape()[0], 1, 0),
                (2, 1) => (x.shape()[0], x.shape()[1], 1, x.shape()[1]),
                (2, 0) => (x.shape()[1], x.shape()[0], x.shape()[1], 1),
                _ => unreachable!(),
            };
            let mut dx = vec![0.0; y.len()];
            for s in 0..slices {
                let idx = |i: usize| s * base_stride + i * stride;
                let mut dot = 0.0;
                for i in 0..len {
                    dot += gy[idx(i)] * y[idx(i)];
                }
                for i in 0..len {
                    dx[idx(i)] = y[idx(i)] * (gy[idx(i)] - dot);
                }
            }
            sink(x, dx);
        }
        Op::LayerNorm { xhat, inv_std } => {
            let x = &node.parents[0];
            let gamma = &node.parents[1];
            let beta = &node.parents[2];
            let (r, d) = (x.shape()[0], x.shape()[1]);
            let g = gamma.data();
            if x.requires_grad() {
                let mut dx = vec![0.0; r * d];
                for i in 0..r {
                    let mut m1 = 0.0; // mean of gamma∘dy
                    let mut m2 = 0.0; // mean of gamma∘dy∘xhat
                    for j in 0..d {
                        let t = g[j] * gy[i * d + j];
                        m1 += t;
                        m2 += t * xhat[i * d + j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let t = g[j] * gy[i * d + j];
                        dx[i * d + j] = inv_std[i] * (t - m1 - xhat[i * d + j] * m2);
                    }
                }
                sink(x, dx);
            }
            drop(g);
            if gamma.requires_grad() {
                let mut dg = vec![0.0; d];
                for i in 0..r {
                    for j in 0..d {
                        dg[j] += gy[i * d + j] * xhat[i * d + j];
                    }
                }
                sink(gamma, dg);
            }
            if beta.requires_grad() {
                let mut db = vec![0.0; d];
                for i in 0..r {
                    for j in 0..d {
                        db[j] += gy[i * d + j];
                    }
                }
                sink(beta, db);
            }
        }
        Op::MaxRows { argmax } => {
            let x = &node.parents[0];
            let d = x.shape()[1];
            let mut dx = vec![0.0; x.numel()];
            for (j, &row) in argmax.iter().enumerate() {
                dx[row * d + j] += gy[j];
            }
            sink(x, dx);
        }
        Op::CosineRows { eps, dots, row_norms, v_norm } => {
            let x = &node.parents[0];
            let v = &node.parents[1];
            let (rows, d) = (x.shape()[0], x.shape()[1]);
            let xd = x.data();
            let vd = v.data();
            let nv = v_norm.max(*eps);
            if x.requires_grad() {
                let mut dx = vec![0.0; rows * d];
                for j in 0..rows {
                    let ga = gy[j];
                    if ga == 0.0 {
                        continue;
                    }
                    let nr = row_norms[j].max(*eps);
                    let row = &xd[j * d..(j + 1) * d];
                    // α = s/(nr·nv);  dα/dr = v/(nr·nv) − s·r/(‖r‖·nr²·nv)
                    for c in 0..d {
                        let mut t = vd[c] / (nr * nv);
                        if row_norms[j] > *eps {
                            t -= dots[j] * row[c] / (row_norms[j] * nr * nr * nv);
                        }
                        dx[j * d + c] += ga * t;
                    }
                }
                sink(x, dx);
            }
            if v.requires_grad() {
                let mut dv = vec![0.0; d];
                for j in 0..rows {
                    let ga = gy[j];
                    if ga == 0.0 {
                        continue;
                    }
                    let nr = row_norms[j].max(*eps);
                    let row = &xd[j * d..(j + 1) * d];
                    for c in 0..d {
                        let mut t = row[c] / (nr * nv);
                        if *v_norm > *eps {
                            t -= dots[j] * vd[c] / (v_norm * nv * nv * nr);
                        }
                        dv[c] += ga * t;
                    }
                }
                sink(v, dv);
            }
        }
        Op::WeightedRowMean { denom, clamped, numer } => {
            let x = &node.parents[0];
            let alpha = &node.parents[1];
            let (rows, d) = (x.shape()[0], x.shape()[1]);
            if x.requires_grad() {
                let a = alpha.data();
                let mut dx = vec![0.0; rows * d];
                for j in 0..rows {
                    let w = a[j] / denom;
                    for c in 0..d {
                        dx[j * d + c] = gy[c] * w;
                    }
                }
                drop(a);
                sink(x, dx);
            }
            if alpha.requires_grad() {
                let xd = x.data();
                // Σ_c gy_c·num_c / D², shared across all weights
                let correction: f64 = if *clamped {
                    0.0
                } else {
                    gy.iter()
                        .zip(numer)
                        .map(|(g, n)| g * n)
                        .sum::<f64>()
                        / (denom * denom)
                };
                let mut da = vec![0.0; rows];
                for j in 0..rows {
                    let mut t = 0.0;
                    for c in 0..d {
                        t += gy[c] * xd[j * d + c];
                    }
                    da[j] = t / denom - correction;
                }
                drop(xd);
                sink(alpha, da);
            }
        }
        Op::SliceCols { start } => {
            let x = &node.parents[0];
            let (r, w_full) = (x.shape()[0], x.shape()[1]);
            let width = out.shape()[1];
            let mut dx = vec![0.0; r * w_full];
            for i in 0..r {
                dx[i * w_full + start..i * w_full + start + width]
                    .copy_from_slice(&gy[i * width..(i + 1) * width]);
            }
            sink(x, dx);
        }
        Op::StackRows => {
            let d = out.shape()[1];
            for (i, p) in node.parents.iter().enumerate() {
                sink(p, gy[i * d..(i + 1) * d].to_vec());
            }
        }
        Op::ConcatCols { widths } => {
            let r = out.shape()[0];
            let total = out.shape()[1];
            let mut offset = 0;
            for (p, &w) in node.parents.iter().zip(widths) {
                if p.requires_grad() {
                    let mut dp = vec![0.0; r * w];
                    for i in 0..r {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&gy[i * total + offset..i * total + offset + w]);
                    }
                    sink(p, dp);
                }
                offset += w;
            }
        }
        Op::BceSum { target, clamp_eps, inside_pos, inside_neg } => {
            let pred = &node.parents[0];
            let p = pred.data();
            let g = gy[0];
            let mut dp = vec![0.0; p.len()];
            for i in 0..p.len() {
                let mut t = 0.0;
                if target[i] == 1.0 && inside_pos[i] {
                    t -= 1.0 / p[i].clamp(*clamp_eps, 1.0);
                }
                if target[i] == 0.0 && inside_neg[i] {
                    t += 1.0 / (1.0 - p[i]).clamp(*clamp_eps, 1.0);
                }
                dp[i] = g * t;
            }
            drop(p);
            sink(pred, dp);
        }
        Op::Conv2d { spec } => {
            let x = &node.parents[0];
            let wt = &node.parents[1];
            let b = &node.parents[2];
            let s = spec;
            if x.requires_grad() {
                let wd = wt.data();
                let mut dx = vec![0.0; s.h * s.w * s.c_in];
                for oy in 0..s.oh {
                    for ox in 0..s.ow {
                        for oc in 0..s.c_out {
                            let g = gy[(oy * s.ow + ox) * s.c_out + oc];
                            if g == 0.0 {
                                continue;
                            }
                            for ky in 0..s.k {
                                for kx in 0..s.k {
                                    let iy = oy * s.stride + ky;
                                    let ix = ox * s.stride + kx;
                                    for ic in 0..s.c_in {
                                        dx[(iy * s.w + ix) * s.c_in + ic] +=
                                            g * wd[((oc * s.k + ky) * s.k + kx) * s.c_in + ic];
                                    }
                                }
                            }
                        }
                    }
                }
                drop(wd);
                sink(x, dx);
            }
            if wt.requires_grad() {
                let xd = x.data();
                let mut dw = vec![0.0; s.c_out * s.k * s.k * s.c_in];
                for oy in 0..s.oh {
                    for ox in 0..s.ow {
                        for oc in 0..s.c_out {
                            let g = gy[(oy * s.ow + ox) * s.c_out + oc];
                            if g == 0.0 {
                                continue;
                            }
                            for ky in 0..s.k {
                                for kx in 0..s.k {
                                    let iy = oy * s.stride + ky;
                                    let ix = ox * s.stride + kx;
                                    for ic in 0..s.c_in {
                                        dw[((oc * s.k + ky) * s.k + kx) * s.c_in + ic] +=
                                            g * xd[(iy * s.w + ix) * s.c_in + ic];
                                    }
                                }
                            }
                        }
                    }
                }
                drop(xd);
                sink(wt, dw);
            }
            if b.requires_grad() {
                let mut db = vec![0.0; s.c_out];
                for oy in 0..s.oh {
                    for ox in 0..s.ow {
                        for oc in 0..s.c_out {
                            db[oc] += gy[(oy * s.ow + ox) * s.c_out + oc];
                        }
                    }
                }
                sink(b, db);
            }
        }
        Op::AvgPool2d { k, in_h: _, in_w, channels } => {
            let x = &node.parents[0];
            let (oh, ow) = (out.shape()[0], out.shape()[1]);
            let inv = 1.0 / ((k * k) as f64);
            let mut dx = vec![0.0; x.numel()];
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..*channels {
                        let g = gy[(oy * ow + ox) * channels + ch] * inv;
                        for ky in 0..*k {
                            for kx in 0..*k {
                                dx[((oy * k + ky) * in_w + (ox * k + kx)) * channels + ch] += g;
                            }
                        }
                    }
                }
            }
            sink(x, dx);
        }
    }
}
