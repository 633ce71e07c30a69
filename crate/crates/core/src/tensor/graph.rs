use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{self, gemm};
use super::{axis_extents, check_permutation, Mask, Precision, Result, Tensor, TensorError};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Smooth pointwise nonlinearities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// tanh approximation of GELU
    #[default]
    Gelu,
    Silu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

pub(crate) enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Dropout {
        x: Var,
        multiplier: Vec<f64>,
    },
    MeanPool {
        x: Var,
        axis: usize,
        weights: Vec<f64>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    ExpandAxis {
        x: Var,
        axis: usize,
    },
    PairExpand {
        base: Var,
        pair: Option<Var>,
    },
    AttnScores {
        q: Var,
        keys: Var,
        heads: usize,
        scale: f64,
    },
    AttnMix {
        weights: Var,
        values: Var,
        heads: usize,
    },
    Outer {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    L1 {
        pred: Var,
        target: f64,
    },
    BceLogits {
        pred: Var,
        target: f64,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// A single-use record of primitive applications.
///
/// Every primitive checks its inputs, computes its output eagerly, rejects
/// non-finite results, and records what the reverse pass needs.
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) precision: Precision,
    pub(crate) consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_precision(Precision::Double)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            consumed: false,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
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
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        self.precision.round(value.data_mut());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.consumed = false;
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.leaf(value.clone(), true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        mut value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        self.precision.round(value.data_mut());
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.consumed = false;
        Ok(Var(self.nodes.len() - 1))
    }

    /// `y[..., j] = Σ_i x[..., i]·w[i, j] + b[j]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        let mismatch = |lhs: &[usize], rhs: &[usize]| TensorError::Shape {
            op: "linear",
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        };
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(mismatch(&xs, &ws));
        }
        if bs != [ws[1]] {
            return Err(mismatch(&ws, &bs));
        }
        let (c_in, c_out) = (ws[0], ws[1]);
        let rows = self.value(x).len() / c_in.max(1);
        let mut out = vec![0.0; rows * c_out];
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(c_out) {
            row.copy_from_slice(bias);
        }
        gemm(
            rows,
            c_in,
            c_out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            true,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = c_out;
        self.push(
            "linear",
            Tensor::new(shape, out)?,
            Op::Linear { x, w, b },
            &[x, w, b],
        )
    }

    /// Normalizes every last-axis slice to zero mean and unit variance, then
    /// applies `gain` and `offset`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or(TensorError::Shape {
            op: "layer_norm",
            lhs: xs.clone(),
            rhs: vec![],
        })?;
        for p in [gain, offset] {
            if self.shape(p) != [c] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: xs,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if c == 0 {
            return Err(TensorError::Config(
                "layer_norm needs at least one channel".into(),
            ));
        }
        let input = self.value(x).data();
        let g = self.value(gain).data();
        let o = self.value(offset).data();
        let rows = input.len() / c;
        let mut xhat = vec![0.0; input.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; input.len()];
        for r in 0..rows {
            let slice = &input[r * c..(r + 1) * c];
            let mean = slice.iter().sum::<f64>() / c as f64;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = inv;
            for t in 0..c {
                let h = (slice[t] - mean) * inv;
                xhat[r * c + t] = h;
                out[r * c + t] = h * g[t] + o[t];
            }
        }
        self.push(
            "layer_norm",
            Tensor::new(xs, out)?,
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            },
            &[x, gain, offset],
        )
    }

    /// Softmax along `axis`. Masked entries (`false`) are excluded and come
    /// out exactly zero; the mask broadcasts against `x`.
    pub fn softmax_axis(&mut self, x: Var, axis: usize, mask: Option<&Mask>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(TensorError::Axis {
                op: "softmax_axis",
                axis,
                rank: xs.len(),
            });
        }
        let allowed = mask.map(|m| m.broadcast_to(&xs)).transpose()?;
        let input = self.value(x).data();
        let (outer, len, inner) = axis_extents(&xs, axis);
        let mut out = vec![0.0; input.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| (o * len + t) * inner + i;
                let keep = |t: usize| allowed.as_ref().is_none_or(|m| m[at(t)]);
                let mut max = f64::NEG_INFINITY;
                for t in 0..len {
                    if keep(t) {
                        max = max.max(input[at(t)]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(TensorError::DegenerateSlice { op: "softmax_axis" });
                }
                let mut total = 0.0;
                for t in 0..len {
                    if keep(t) {
                        let e = (input[at(t)] - max).exp();
                        out[at(t)] = e;
                        total += e;
                    }
                }
                for t in 0..len {
                    out[at(t)] /= total;
                }
            }
        }
        self.push(
            "softmax_axis",
            Tensor::new(xs, out)?,
            Op::Softmax { x, axis },
            &[x],
        )
    }

    /// Inverted dropout. Outside training, or with `p == 0`, returns `x`
    /// unchanged.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng_seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Config(format!(
                "dropout probability {p} must lie in [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let scale = 1.0 / (1.0 - p);
        let value = self.value(x);
        let multiplier: Vec<f64> = (0..value.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect();
        let out: Vec<f64> = value
            .data()
            .iter()
            .zip(&multiplier)
            .map(|(v, m)| v * m)
            .collect();
        let shape = value.shape().to_vec();
        self.push(
            "dropout",
            Tensor::new(shape, out)?,
            Op::Dropout { x, multiplier },
            &[x],
        )
    }

    /// Mean over `axis`, counting only positions whose mask entry is `true`.
    /// The mask, when given, has one entry per position along `axis`.
    pub fn mean_pool_axis(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(TensorError::Axis {
                op: "mean_pool_axis",
                axis,
                rank: xs.len(),
            });
        }
        let (outer, len, inner) = axis_extents(&xs, axis);
        if let Some(m) = mask {
            if m.len() != len {
                return Err(TensorError::Shape {
                    op: "mean_pool_axis",
                    lhs: xs,
                    rhs: vec![m.len()],
                });
            }
        }
        let count = mask.map_or(len, |m| m.iter().filter(|&&k| k).count());
        if count == 0 {
            return Err(TensorError::DegenerateSlice {
                op: "mean_pool_axis",
            });
        }
        let weights: Vec<f64> = (0..len)
            .map(|t| {
                if mask.is_none_or(|m| m[t]) {
                    1.0 / count as f64
                } else {
                    0.0
                }
            })
            .collect();
        let input = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for (t, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let src = &input[(o * len + t) * inner..(o * len + t + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = xs;
        shape.remove(axis);
        self.push(
            "mean_pool_axis",
            Tensor::new(shape, out)?,
            Op::MeanPool { x, axis, weights },
            &[x],
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("add", Tensor::new(shape, out)?, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", Tensor::new(shape, out)?, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.value(x);
        let out: Vec<f64> = value.data().iter().map(|v| v * factor).collect();
        let shape = value.shape().to_vec();
        self.push(
            "scale",
            Tensor::new(shape, out)?,
            Op::Scale { x, factor },
            &[x],
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let value = self.value(x);
        let out: Vec<f64> = value.data().iter().map(|&v| kind.apply(v)).collect();
        let shape = value.shape().to_vec();
        self.push(
            "activation",
            Tensor::new(shape, out)?,
            Op::Activation { x, kind },
            &[x],
        )
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        check_permutation("permute", perm, self.shape(x).len())?;
        if perm.iter().enumerate().all(|(a, &p)| a == p) {
            return Ok(x);
        }
        let out = self.value(x).permute(perm)?;
        self.push(
            "permute",
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x);
        if shape.iter().product::<usize>() != value.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: value.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::new(shape.to_vec(), value.data().to_vec())?;
        self.push("reshape", out, Op::Reshape { x }, &[x])
    }

    /// Inserts a new axis of length `len` at position `axis`, repeating `x`
    /// along it.
    pub fn expand_axis(&mut self, x: Var, axis: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis > xs.len() {
            return Err(TensorError::Axis {
                op: "expand_axis",
                axis,
                rank: xs.len(),
            });
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis..].iter().product();
        let input = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = &input[o * inner..(o + 1) * inner];
            for _ in 0..len {
                out.extend_from_slice(src);
            }
        }
        let mut shape = xs;
        shape.insert(axis, len);
        self.push(
            "expand_axis",
            Tensor::new(shape, out)?,
            Op::ExpandAxis { x, axis },
            &[x],
        )
    }

    /// `out[b.., i, j, c] = base[b.., j, c] + pair[b.., i, j, c]`.
    ///
    /// `base` has shape `[B.., Nj, C]`; `pair`, when present, `[B.., Ni, Nj, C]`.
    /// Without `pair` the result simply repeats `base` `ni` times.
    pub fn pair_expand(&mut self, base: Var, pair: Option<Var>, ni: usize) -> Result<Var> {
        let bs = self.shape(base).to_vec();
        if bs.len() < 2 {
            return Err(TensorError::Shape {
                op: "pair_expand",
                lhs: bs,
                rhs: vec![],
            });
        }
        let r = bs.len();
        let mut out_shape = bs.clone();
        out_shape.insert(r - 2, ni);
        if let Some(p) = pair {
            if self.shape(p) != out_shape.as_slice() {
                return Err(TensorError::Shape {
                    op: "pair_expand",
                    lhs: bs,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let batch: usize = bs[..r - 2].iter().product();
        let row = bs[r - 2] * bs[r - 1];
        let base_data = self.value(base).data();
        let mut out = Vec::with_capacity(batch * ni * row);
        for b in 0..batch {
            let src = &base_data[b * row..(b + 1) * row];
            for _ in 0..ni {
                out.extend_from_slice(src);
            }
        }
        let mut inputs = vec![base];
        if let Some(p) = pair {
            for (o, v) in out.iter_mut().zip(self.value(p).data()) {
                *o += v;
            }
            inputs.push(p);
        }
        self.push(
            "pair_expand",
            Tensor::new(out_shape, out)?,
            Op::PairExpand { base, pair },
            &inputs,
        )
    }

    /// Per-head attention logits.
    ///
    /// `q: [B.., Ni, C]`, `keys: [B.., Ni, Nj, C]` (keys may differ per query),
    /// result `[B.., Ni, Nj, H]` with
    /// `out[b, i, j, h] = scale · Σ_d q[b, i, hD + d] · keys[b, i, j, hD + d]`.
    pub fn attn_scores(&mut self, q: Var, keys: Var, heads: usize, scale: f64) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(keys).to_vec();
        let (batch, ni, nj, c) = attention_extents("attn_scores", &qs, &ks)?;
        let d = head_width("attn_scores", c, heads)?;
        let qd = self.value(q).data();
        let kd = self.value(keys).data();
        let mut out = vec![0.0; batch * ni * nj * heads];
        for bi in 0..batch * ni {
            let qrow = &qd[bi * c..(bi + 1) * c];
            for j in 0..nj {
                let krow = &kd[(bi * nj + j) * c..(bi * nj + j + 1) * c];
                let dst = &mut out[(bi * nj + j) * heads..(bi * nj + j + 1) * heads];
                for (h, slot) in dst.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for t in h * d..(h + 1) * d {
                        acc += qrow[t] * krow[t];
                    }
                    *slot = acc * scale;
                }
            }
        }
        let mut shape = ks;
        *shape.last_mut().unwrap() = heads;
        self.push(
            "attn_scores",
            Tensor::new(shape, out)?,
            Op::AttnScores {
                q,
                keys,
                heads,
                scale,
            },
            &[q, keys],
        )
    }

    /// Weighted value sum: `weights: [B.., Ni, Nj, H]`, `values: [B.., Ni, Nj, C]`,
    /// result `[B.., Ni, C]` with `out[b, i, hD + d] = Σ_j w[b, i, j, h] · v[b, i, j, hD + d]`.
    pub fn attn_mix(&mut self, weights: Var, values: Var, heads: usize) -> Result<Var> {
        let ws = self.shape(weights).to_vec();
        let vs = self.shape(values).to_vec();
        if ws.len() != vs.len()
            || ws[..ws.len() - 1] != vs[..vs.len() - 1]
            || ws[ws.len() - 1] != heads
        {
            return Err(TensorError::Shape {
                op: "attn_mix",
                lhs: ws,
                rhs: vs,
            });
        }
        let r = vs.len();
        let c = vs[r - 1];
        let nj = vs[r - 2];
        let rows: usize = vs[..r - 2].iter().product();
        let d = head_width("attn_mix", c, heads)?;
        let wd = self.value(weights).data();
        let vd = self.value(values).data();
        let mut out = vec![0.0; rows * c];
        for bi in 0..rows {
            let dst = &mut out[bi * c..(bi + 1) * c];
            for j in 0..nj {
                let w = &wd[(bi * nj + j) * heads..(bi * nj + j + 1) * heads];
                let v = &vd[(bi * nj + j) * c..(bi * nj + j + 1) * c];
                for (t, slot) in dst.iter_mut().enumerate() {
                    *slot += w[t / d] * v[t];
                }
            }
        }
        let mut shape = vs;
        shape.remove(r - 2);
        self.push(
            "attn_mix",
            Tensor::new(shape, out)?,
            Op::AttnMix {
                weights,
                values,
                heads,
            },
            &[weights, values],
        )
    }

    /// Flattened pairwise outer product: `a: [N, P]`, `b: [M, Q]` give
    /// `[N, M, P·Q]` with `out[i, j, p·Q + q] = a[i, p] · b[j, q]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 2 || bs.len() != 2 {
            return Err(TensorError::Shape {
                op: "outer",
                lhs: as_,
                rhs: bs,
            });
        }
        let (n, p, m, q) = (as_[0], as_[1], bs[0], bs[1]);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(n * m * p * q);
        for i in 0..n {
            for j in 0..m {
                let brow = &bd[j * q..(j + 1) * q];
                for &av in &ad[i * p..(i + 1) * p] {
                    out.extend(brow.iter().map(|bv| av * bv));
                }
            }
        }
        self.push(
            "outer",
            Tensor::new(vec![n, m, p * q], out)?,
            Op::Outer { a, b },
            &[a, b],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    fn scalar_of(&self, op: &'static str, v: Var) -> Result<f64> {
        let value = self.value(v);
        if value.len() != 1 {
            return Err(TensorError::Shape {
                op,
                lhs: value.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok(value.item())
    }

    /// `|pred − target|` for a single-element prediction.
    pub fn l1_loss(&mut self, pred: Var, target: f64) -> Result<Var> {
        let p = self.scalar_of("l1_loss", pred)?;
        self.push(
            "l1_loss",
            Tensor::scalar((p - target).abs()),
            Op::L1 { pred, target },
            &[pred],
        )
    }

    /// Binary cross-entropy of `target ∈ [0, 1]` against the logit `pred`.
    pub fn bce_with_logits(&mut self, pred: Var, target: f64) -> Result<Var> {
        let x = self.scalar_of("bce_with_logits", pred)?;
        let loss = x.max(0.0) - x * target + (-x.abs()).exp().ln_1p();
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceLogits { pred, target },
            &[pred],
        )
    }

    pub(crate) fn inverse_permute(perm: &[usize]) -> Vec<usize> {
        kernels::inverse_permutation(perm)
    }
}

pub(crate) fn attention_extents(
    op: &'static str,
    qs: &[usize],
    ks: &[usize],
) -> Result<(usize, usize, usize, usize)> {
    let err = || TensorError::Shape {
        op,
        lhs: qs.to_vec(),
        rhs: ks.to_vec(),
    };
    if qs.len() < 2 || ks.len() != qs.len() + 1 {
        return Err(err());
    }
    let r = qs.len();
    if qs[..r - 1] != ks[..r - 1] || qs[r - 1] != ks[r] {
        return Err(err());
    }
    let batch = qs[..r - 2].iter().product();
    Ok((batch, qs[r - 2], ks[r - 1], qs[r - 1]))
}

pub(crate) fn head_width(op: &'static str, c: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(TensorError::Config(format!(
            "{op}: width {c} is not divisible by {heads} heads"
        )));
    }
    Ok(c / heads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn linear_identity_and_summation() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let w = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let x = g.constant(Tensor::from_vec(vec![1.0, 1.0]));
        let w = g.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[2.0]);
    }

    #[test]
    fn linear_reports_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4, 3]));
        let w = g.constant(Tensor::zeros(&[2, 5]));
        let b = g.constant(Tensor::zeros(&[5]));
        match g.linear(x, w, b) {
            Err(TensorError::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![4, 3]);
                assert_eq!(rhs, vec![2, 5]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::full(&[3], 1.0));
        let off = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(Tensor::from_vec(vec![5.0, 5.0, 5.0]));
        let y = g.layer_norm(x, gain, off).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let gain = g.constant(Tensor::full(&[2], 1.0));
        let off = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::from_vec(vec![-1.0, 1.0]));
        let y = g.layer_norm(x, gain, off).unwrap();
        assert!(close(g.value(y).data(), &[-1.0, 1.0], 1e-5));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.softmax_axis(x, 0, None).unwrap();
        assert!(close(g.value(y).data(), &[1.0 / 3.0; 3], 1e-15));

        let x = g.constant(Tensor::from_vec(vec![1e300, -1e300]));
        let y = g.softmax_axis(x, 0, None).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);

        let x = g.constant(Tensor::from_vec(vec![1.0, 9.0, 1.0]));
        let mask = Mask::new(vec![3], vec![true, false, true]).unwrap();
        let y = g.softmax_axis(x, 0, Some(&mask)).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.0, 0.5]);

        let none = Mask::new(vec![3], vec![false; 3]).unwrap();
        assert_eq!(
            g.softmax_axis(x, 0, Some(&none)).unwrap_err(),
            TensorError::DegenerateSlice { op: "softmax_axis" }
        );
        assert!(matches!(
            g.softmax_axis(x, 1, None),
            Err(TensorError::Axis { .. })
        ));
    }

    #[test]
    fn dropout_identity_cases_and_rate() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[100_000], 1.0));
        assert_eq!(g.dropout(x, 0.0, true, 1).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, false, 1).unwrap(), x);
        assert!(matches!(
            g.dropout(x, 1.0, true, 1),
            Err(TensorError::Config(_))
        ));

        let y = g.dropout(x, 0.2, true, 7).unwrap();
        let zeros = g.value(y).data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / 100_000.0;
        assert!((frac - 0.2).abs() < 0.01, "zero fraction {frac}");
        let survivor = g.value(y).data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((survivor - 1.25).abs() < 1e-15);

        let again = g.dropout(x, 0.2, true, 7).unwrap();
        assert_eq!(g.value(again).data(), g.value(y).data());
    }

    #[test]
    fn mean_pool_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.mean_pool_axis(x, 0, None).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 3.0]);
        let y = g.mean_pool_axis(x, 0, Some(&[true, false])).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
        assert!(matches!(
            g.mean_pool_axis(x, 0, Some(&[false, false])),
            Err(TensorError::DegenerateSlice { .. })
        ));
    }

    #[test]
    fn non_finite_outputs_are_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![f64::MAX, f64::MAX]));
        assert_eq!(
            g.add(x, x).unwrap_err(),
            TensorError::NonFinite { op: "add" }
        );
    }

    #[test]
    fn pair_expand_and_attention_shapes() {
        let mut g = Graph::new();
        let base = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i[1] as f64));
        let pair = g.constant(Tensor::from_fn(&[2, 5, 3, 4], |i| 10.0 * i[1] as f64));
        let kf = g.pair_expand(base, Some(pair), 5).unwrap();
        assert_eq!(g.shape(kf), &[2, 5, 3, 4]);
        assert_eq!(g.value(kf).get(&[1, 4, 2, 0]), 42.0);
        let q = g.constant(Tensor::full(&[2, 5, 4], 1.0));
        let s = g.attn_scores(q, kf, 2, 0.5).unwrap();
        assert_eq!(g.shape(s), &[2, 5, 3, 2]);
        // two channels per head, each equal to 42
        assert_eq!(g.value(s).get(&[1, 4, 2, 1]), 42.0);
        let w = g.softmax_axis(s, 2, None).unwrap();
        let o = g.attn_mix(w, kf, 2).unwrap();
        assert_eq!(g.shape(o), &[2, 5, 4]);
    }
}
