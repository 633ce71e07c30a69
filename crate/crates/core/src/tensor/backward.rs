use super::graph::{attention_extents, Graph, Op, Var};
use super::kernels::{gemm, permute};
use super::{axis_extents, Result, Tensor, TensorError};

/// Gradients of one scalar with respect to every value on a tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not require gradients.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let shape = self.shapes.get(v.0)?.clone();
        let data = self.grads[v.0].clone()?;
        Some(Tensor::new(shape, data).expect("gradient shape matches forward value"))
    }

    /// Gradient for `v`; values the loss never reached get zeros.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Moves out the gradients of distinct `vars`, as [`Gradients::wrt`]
    /// would return them.
    pub fn take_all(mut self, vars: &[Var]) -> Vec<Tensor> {
        vars.iter()
            .map(|&v| {
                let shape = self.shapes[v.0].clone();
                match self.grads[v.0].take() {
                    Some(data) => {
                        Tensor::new(shape, data).expect("gradient shape matches forward value")
                    }
                    None => Tensor::zeros(&shape),
                }
            })
            .collect()
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Graph {
    /// Reverse pass from a single-element `loss`.
    ///
    /// A tape can be differentiated once; recording any new value re-arms it.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(TensorError::NotScalar(loss_value.shape().to_vec()));
        }
        if !loss_value.is_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for id in (0..=loss.0).rev() {
            let Some(mut upstream) = grads[id].take() else {
                continue;
            };
            self.precision.round(&mut upstream);
            if upstream.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            let (before, rest) = grads.split_at_mut(id);
            self.propagate(id, &upstream, before)?;
            rest[0] = Some(upstream);
        }

        // drop gradients of values that do not require them
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            } else if slot.is_none() && matches!(node.op, Op::Leaf) {
                *slot = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Pushes `dy` (the gradient of node `id`) into the gradient slots of its
    /// inputs, all of which precede `id`.
    fn propagate(&self, id: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (c_in, c_out) = (ws[0], ws[1]);
                let rows = dy.len() / c_out.max(1);
                if self.wants(*x) {
                    let wd = self.value(*w).data();
                    accumulate(&mut grads[x.0], rows * c_in, |gx| {
                        gemm(rows, c_out, c_in, dy, false, wd, true, gx, true)
                    });
                }
                if self.wants(*w) {
                    let xd = self.value(*x).data();
                    accumulate(&mut grads[w.0], c_in * c_out, |gw| {
                        gemm(c_in, rows, c_out, xd, true, dy, false, gw, true)
                    });
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], c_out, |gb| {
                        for row in dy.chunks_exact(c_out) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            } => {
                let c = self.shape(*gain)[0];
                let g = self.value(*gain).data();
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], dy.len(), |gx| {
                        for (r, &inv) in rstd.iter().enumerate() {
                            let span = r * c..(r + 1) * c;
                            let dyr = &dy[span.clone()];
                            let hr = &xhat[span.clone()];
                            let mut sum_d = 0.0;
                            let mut sum_dh = 0.0;
                            for t in 0..c {
                                let d = dyr[t] * g[t];
                                sum_d += d;
                                sum_dh += d * hr[t];
                            }
                            let scale = inv / c as f64;
                            for t in 0..c {
                                let d = dyr[t] * g[t];
                                gx[r * c + t] += scale * (c as f64 * d - sum_d - hr[t] * sum_dh);
                            }
                        }
                    });
                }
                if self.wants(*gain) {
                    accumulate(&mut grads[gain.0], c, |gg| {
                        for (d, h) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for t in 0..c {
                                gg[t] += d[t] * h[t];
                            }
                        }
                    });
                }
                if self.wants(*offset) {
                    accumulate(&mut grads[offset.0], c, |go| {
                        for d in dy.chunks_exact(c) {
                            for t in 0..c {
                                go[t] += d[t];
                            }
                        }
                    });
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                    accumulate(&mut grads[x.0], dy.len(), |gx| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |t: usize| (o * len + t) * inner + i;
                                let dot: f64 = (0..len).map(|t| out[at(t)] * dy[at(t)]).sum();
                                for t in 0..len {
                                    gx[at(t)] += out[at(t)] * (dy[at(t)] - dot);
                                }
                            }
                        }
                    });
                }
            }
            Op::Dropout { x, multiplier } => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], dy.len(), |gx| {
                        for ((g, d), m) in gx.iter_mut().zip(dy).zip(multiplier) {
                            *g += d * m;
                        }
                    });
                }
            }
            Op::MeanPool { x, axis, weights } => {
                if self.wants(*x) {
                    let (outer, len, inner) = axis_extents(self.shape(*x), *axis);
                    accumulate(&mut grads[x.0], outer * len * inner, |gx| {
                        for o in 0..outer {
                            let d = &dy[o * inner..(o + 1) * inner];
                            for (t, &w) in weights.iter().enumerate() {
                                if w == 0.0 {
                                    continue;
                                }
                                let dst = &mut gx[(o * len + t) * inner..(o * len + t + 1) * inner];
                                for (acc, v) in dst.iter_mut().zip(d) {
                                    *acc += w * v;
                                }
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(&mut grads[v.0], dy.len(), |g| {
                            g.iter_mut().zip(dy).for_each(|(acc, d)| *acc += d)
                        });
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.wants(*v) {
                        let od = self.value(*other).data();
                        accumulate(&mut grads[v.0], dy.len(), |g| {
                            for ((acc, d), o) in g.iter_mut().zip(dy).zip(od) {
                                *acc += d * o;
                            }
                        });
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], dy.len(), |g| {
                        g.iter_mut().zip(dy).for_each(|(acc, d)| *acc += d * factor)
                    });
                }
            }
            Op::Activation { x, kind } => {
                if self.wants(*x) {
                    let xd = self.value(*x).data();
                    accumulate(&mut grads[x.0], dy.len(), |g| {
                        for ((acc, d), &v) in g.iter_mut().zip(dy).zip(xd) {
                            *acc += d * kind.derivative(v);
                        }
                    });
                }
            }
            Op::Permute { x, perm } => {
                if self.wants(*x) {
                    let inv = Graph::inverse_permute(perm);
                    let back = permute(dy, node.value.shape(), &inv);
                    accumulate(&mut grads[x.0], dy.len(), |g| {
                        g.iter_mut().zip(&back).for_each(|(acc, d)| *acc += d)
                    });
                }
            }
            Op::Reshape { x } => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], dy.len(), |g| {
                        g.iter_mut().zip(dy).for_each(|(acc, d)| *acc += d)
                    });
                }
            }
            Op::ExpandAxis { x, axis } => {
                if self.wants(*x) {
                    let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                    accumulate(&mut grads[x.0], outer * inner, |g| {
                        for o in 0..outer {
                            let dst = &mut g[o * inner..(o + 1) * inner];
                            for t in 0..len {
                                let src = &dy[(o * len + t) * inner..(o * len + t + 1) * inner];
                                dst.iter_mut().zip(src).for_each(|(acc, d)| *acc += d);
                            }
                        }
                    });
                }
            }
            Op::PairExpand { base, pair } => {
                if let Some(p) = pair {
                    if self.wants(*p) {
                        accumulate(&mut grads[p.0], dy.len(), |g| {
                            g.iter_mut().zip(dy).for_each(|(acc, d)| *acc += d)
                        });
                    }
                }
                if self.wants(*base) {
                    let shape = node.value.shape();
                    let r = shape.len();
                    let ni = shape[r - 3];
                    let row = shape[r - 2] * shape[r - 1];
                    let batch: usize = shape[..r - 3].iter().product();
                    accumulate(&mut grads[base.0], batch * row, |g| {
                        for b in 0..batch {
                            let dst = &mut g[b * row..(b + 1) * row];
                            for i in 0..ni {
                                let src = &dy[(b * ni + i) * row..(b * ni + i + 1) * row];
                                dst.iter_mut().zip(src).for_each(|(acc, d)| *acc += d);
                            }
                        }
                    });
                }
            }
            Op::AttnScores {
                q,
                keys,
                heads,
                scale,
            } => {
                let (batch, ni, nj, c) =
                    attention_extents("attn_scores", self.shape(*q), self.shape(*keys))?;
                let h = *heads;
                let d = c / h;
                let qd = self.value(*q).data();
                let kd = self.value(*keys).data();
                if self.wants(*q) {
                    accumulate(&mut grads[q.0], batch * ni * c, |gq| {
                        for bi in 0..batch * ni {
                            let dst = &mut gq[bi * c..(bi + 1) * c];
                            for j in 0..nj {
                                let k = &kd[(bi * nj + j) * c..(bi * nj + j + 1) * c];
                                let g = &dy[(bi * nj + j) * h..(bi * nj + j + 1) * h];
                                for t in 0..c {
                                    dst[t] += scale * g[t / d] * k[t];
                                }
                            }
                        }
                    });
                }
                if self.wants(*keys) {
                    accumulate(&mut grads[keys.0], batch * ni * nj * c, |gk| {
                        for bi in 0..batch * ni {
                            let qrow = &qd[bi * c..(bi + 1) * c];
                            for j in 0..nj {
                                let dst = &mut gk[(bi * nj + j) * c..(bi * nj + j + 1) * c];
                                let g = &dy[(bi * nj + j) * h..(bi * nj + j + 1) * h];
                                for t in 0..c {
                                    dst[t] += scale * g[t / d] * qrow[t];
                                }
                            }
                        }
                    });
                }
            }
            Op::AttnMix {
                weights,
                values,
                heads,
            } => {
                let vs = self.shape(*values);
                let r = vs.len();
                let c = vs[r - 1];
                let nj = vs[r - 2];
                let rows: usize = vs[..r - 2].iter().product();
                let h = *heads;
                let d = c / h;
                let wd = self.value(*weights).data();
                let vd = self.value(*values).data();
                if self.wants(*weights) {
                    accumulate(&mut grads[weights.0], rows * nj * h, |gw| {
                        for bi in 0..rows {
                            let g = &dy[bi * c..(bi + 1) * c];
                            for j in 0..nj {
                                let v = &vd[(bi * nj + j) * c..(bi * nj + j + 1) * c];
                                let dst = &mut gw[(bi * nj + j) * h..(bi * nj + j + 1) * h];
                                for t in 0..c {
                                    dst[t / d] += g[t] * v[t];
                                }
                            }
                        }
                    });
                }
                if self.wants(*values) {
                    accumulate(&mut grads[values.0], rows * nj * c, |gv| {
                        for bi in 0..rows {
                            let g = &dy[bi * c..(bi + 1) * c];
                            for j in 0..nj {
                                let w = &wd[(bi * nj + j) * h..(bi * nj + j + 1) * h];
                                let dst = &mut gv[(bi * nj + j) * c..(bi * nj + j + 1) * c];
                                for t in 0..c {
                                    dst[t] += w[t / d] * g[t];
                                }
                            }
                        }
                    });
                }
            }
            Op::Outer { a, b } => {
                let (n, p) = (self.shape(*a)[0], self.shape(*a)[1]);
                let (m, q) = (self.shape(*b)[0], self.shape(*b)[1]);
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], n * p, |ga| {
                        for i in 0..n {
                            for j in 0..m {
                                let brow = &bd[j * q..(j + 1) * q];
                                let block = &dy[(i * m + j) * p * q..(i * m + j + 1) * p * q];
                                for s in 0..p {
                                    let g = &block[s * q..(s + 1) * q];
                                    ga[i * p + s] +=
                                        g.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                                }
                            }
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], m * q, |gb| {
                        for i in 0..n {
                            let arow = &ad[i * p..(i + 1) * p];
                            for j in 0..m {
                                let block = &dy[(i * m + j) * p * q..(i * m + j + 1) * p * q];
                                let dst = &mut gb[j * q..(j + 1) * q];
                                for (s, &av) in arow.iter().enumerate() {
                                    for (acc, g) in dst.iter_mut().zip(&block[s * q..(s + 1) * q]) {
                                        *acc += av * g;
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    let len = self.value(*x).len();
                    accumulate(&mut grads[x.0], len, |g| {
                        g.iter_mut().for_each(|acc| *acc += dy[0])
                    });
                }
            }
            Op::L1 { pred, target } => {
                if self.wants(*pred) {
                    let diff = self.value(*pred).item() - target;
                    let sign = if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    accumulate(&mut grads[pred.0], 1, |g| g[0] += dy[0] * sign);
                }
            }
            Op::BceLogits { pred, target } => {
                if self.wants(*pred) {
                    let x = self.value(*pred).item();
                    let sigmoid = 1.0 / (1.0 + (-x).exp());
                    accumulate(&mut grads[pred.0], 1, |g| {
                        g[0] += dy[0] * (sigmoid - target)
                    });
                }
            }
        }
        Ok(())
    }
}
