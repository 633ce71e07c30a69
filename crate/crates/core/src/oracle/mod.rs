//! Brute-force references used to validate the model: the receptive-field
//! recursion, loop-based attention, finite-difference dependence probes and
//! operation counts.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{axial_attention, AxialSpec, AxialWeights, LogitScale};
use crate::tensor::graph::LAYER_NORM_EPS;
use crate::tensor::{Graph, Mask, Tensor, TensorError};

/// Largest token count the full-attention reference accepts.
pub const FULL_ATTENTION_GUARD: usize = 125;

/// Perturbation step of the dependence probe.
pub const PROBE_STEP: f64 = 1e-4;
/// Output change above which a dependence is recorded.
pub const PROBE_THRESHOLD: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("order {order} exceeds the {len} indices of the target")]
    Order { order: usize, len: usize },
    #[error("index {index} out of range for {n} atoms")]
    Index { index: usize, n: usize },
    #[error("{tokens} tokens exceed the reference size guard of {guard}")]
    SizeGuard { tokens: usize, guard: usize },
    #[error("bad input: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A set of m-body index tuples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MessageSet {
    pub order: usize,
    pub tuples: BTreeSet<Vec<usize>>,
}

impl MessageSet {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn contains(&self, t: &[usize]) -> bool {
        self.tuples.contains(t)
    }
}

/// The m-bodies whose messages reach `target` after axial attention on axes
/// `1..=k`, computed by the literal recursion: the level-k set is the union
/// over every value of index k of the level-(k−1) sets.
pub fn aggred_message(k: usize, target: &[usize], n: usize) -> Result<MessageSet, OracleError> {
    if k > target.len() {
        return Err(OracleError::Order {
            order: k,
            len: target.len(),
        });
    }
    if let Some(&index) = target.iter().find(|&&i| i >= n) {
        return Err(OracleError::Index { index, n });
    }
    let mut tuples = BTreeSet::new();
    if k == 0 {
        tuples.insert(target.to_vec());
    } else {
        let mut t = target.to_vec();
        for i in 0..n {
            t[k - 1] = i;
            tuples.extend(aggred_message(k - 1, &t, n)?.tuples);
        }
    }
    Ok(MessageSet {
        order: target.len(),
        tuples,
    })
}

/// Every tuple in `[0, n)^m`, in row-major order.
pub fn all_tuples(n: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..m {
        out = out
            .into_iter()
            .flat_map(|t| {
                (0..n).map(move |i| {
                    let mut u = t.clone();
                    u.push(i);
                    u
                })
            })
            .collect();
    }
    out
}

fn row_offset(n: usize, tuple: &[usize], c: usize) -> usize {
    tuple.iter().fold(0, |acc, &i| acc * n + i) * c
}

fn naive_layer_norm(x: &[f64], gain: &[f64], offset: &[f64]) -> Vec<f64> {
    let c = x.len() as f64;
    let mut mean = 0.0;
    for v in x {
        mean += v;
    }
    mean /= c;
    let mut var = 0.0;
    for v in x {
        var += (v - mean) * (v - mean);
    }
    var /= c;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    (0..x.len())
        .map(|t| (x[t] - mean) * inv * gain[t] + offset[t])
        .collect()
}

fn scale_factor(scale: LogitScale, d: usize) -> f64 {
    match scale {
        LogitScale::None => 1.0,
        LogitScale::InverseSqrtHeadDim => 1.0 / (d as f64).sqrt(),
    }
}

fn atom_extent(t: &Tensor, order: usize, what: &str) -> Result<(usize, usize), OracleError> {
    let s = t.shape();
    if s.len() != order + 1 || s[..order].iter().any(|&d| d != s[0]) {
        return Err(OracleError::Shape(format!("{what} has shape {s:?}")));
    }
    Ok((s[0], s[order]))
}

/// Loop-by-loop many-body axial attention along `axis` (1-based).
///
/// For every query m-body and every key atom j the key and value vectors are
/// assembled from scratch; `mask`, if given, is read as `[N_i, N_j]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_axial_attention(
    z: &Tensor,
    hi: Option<&Tensor>,
    axis: usize,
    weights: &AxialWeights,
    heads: usize,
    logit_scale: LogitScale,
    mask: Option<&Mask>,
) -> Result<Tensor, OracleError> {
    let m = z.ndim().saturating_sub(1);
    if m == 0 {
        return Err(OracleError::Shape("order-0 input".into()));
    }
    let (n, c) = atom_extent(z, m, "z")?;
    if axis == 0 || axis > m {
        return Err(OracleError::Order {
            order: axis,
            len: m,
        });
    }
    if heads == 0 || c % heads != 0 {
        return Err(OracleError::Shape(format!(
            "{c} channels over {heads} heads"
        )));
    }
    let d = c / heads;
    let allowed: Vec<bool> = match mask {
        Some(mk) => mk.broadcast_to(&[n, n, 1])?,
        None => vec![true; n * n],
    };
    let a = axis - 1;
    let zn = |t: &[usize]| {
        let o = row_offset(n, t, c);
        naive_layer_norm(
            &z.data()[o..o + c],
            weights.norm.gain.data(),
            weights.norm.offset.data(),
        )
    };
    let hn = |t: &[usize]| -> Option<Vec<f64>> {
        let h = hi?;
        let nh = weights.norm_hi.as_ref().expect("higher-order norm");
        let ch = *h.shape().last().unwrap();
        let o = row_offset(n, t, ch);
        Some(naive_layer_norm(
            &h.data()[o..o + ch],
            nh.gain.data(),
            nh.offset.data(),
        ))
    };
    if let Some(h) = hi {
        atom_extent(h, m + 1, "hi")?;
    }
    let scale = scale_factor(logit_scale, d);
    let mut out = Tensor::zeros(z.shape());
    for target in all_tuples(n, m) {
        let i = target[a];
        let q = weights.query.apply_row(&zn(&target));
        let mut keys = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n);
        for j in 0..n {
            let mut tj = target.clone();
            tj[a] = j;
            let base = zn(&tj);
            let mut k = weights.key.apply_row(&base);
            let mut v = weights.value.apply_row(&base);
            let mut tij = target[..a].to_vec();
            tij.extend([i, j]);
            tij.extend_from_slice(&target[a + 1..]);
            if let Some(h) = hn(&tij) {
                let kh = weights.key_hi.as_ref().expect("key_hi").apply_row(&h);
                let vh = weights.value_hi.as_ref().expect("value_hi").apply_row(&h);
                for t in 0..c {
                    k[t] += kh[t];
                    v[t] += vh[t];
                }
            }
            keys.push(k);
            values.push(v);
        }
        let mut row = vec![0.0; c];
        for h in 0..heads {
            let mut logits = vec![f64::NEG_INFINITY; n];
            for j in 0..n {
                if allowed[i * n + j] {
                    let mut acc = 0.0;
                    for t in h * d..(h + 1) * d {
                        acc += q[t] * keys[j][t];
                    }
                    logits[j] = acc * scale;
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(OracleError::Shape(format!(
                    "query atom {i} has no admissible key"
                )));
            }
            let exps: Vec<f64> = logits
                .iter()
                .map(|&l| {
                    if l == f64::NEG_INFINITY {
                        0.0
                    } else {
                        (l - max).exp()
                    }
                })
                .collect();
            let total: f64 = exps.iter().sum();
            for j in 0..n {
                let alpha = exps[j] / total;
                for t in h * d..(h + 1) * d {
                    row[t] += alpha * values[j][t];
                }
            }
        }
        let projected = weights.out.apply_row(&row);
        let o = row_offset(n, &target, c);
        out.data_mut()[o..o + c].copy_from_slice(&projected);
    }
    Ok(out)
}

/// Ordinary attention over all `N^m` m-bodies as one token sequence, using
/// the same layer-norm and query/key/value/output projections (the
/// higher-order projections are not used).
pub fn full_attention_reference(
    z: &Tensor,
    weights: &AxialWeights,
    heads: usize,
    logit_scale: LogitScale,
) -> Result<Tensor, OracleError> {
    let m = z.ndim().saturating_sub(1);
    if m == 0 {
        return Err(OracleError::Shape("order-0 input".into()));
    }
    let (n, c) = atom_extent(z, m, "z")?;
    let tokens = n.pow(m as u32);
    if tokens > FULL_ATTENTION_GUARD {
        return Err(OracleError::SizeGuard {
            tokens,
            guard: FULL_ATTENTION_GUARD,
        });
    }
    if heads == 0 || c % heads != 0 {
        return Err(OracleError::Shape(format!(
            "{c} channels over {heads} heads"
        )));
    }
    let d = c / heads;
    let scale = scale_factor(logit_scale, d);
    let normed: Vec<Vec<f64>> = (0..tokens)
        .map(|t| {
            naive_layer_norm(
                &z.data()[t * c..(t + 1) * c],
                weights.norm.gain.data(),
                weights.norm.offset.data(),
            )
        })
        .collect();
    let q: Vec<Vec<f64>> = normed.iter().map(|x| weights.query.apply_row(x)).collect();
    let k: Vec<Vec<f64>> = normed.iter().map(|x| weights.key.apply_row(x)).collect();
    let v: Vec<Vec<f64>> = normed.iter().map(|x| weights.value.apply_row(x)).collect();
    let mut out = Tensor::zeros(z.shape());
    for s in 0..tokens {
        let mut row = vec![0.0; c];
        for h in 0..heads {
            let logits: Vec<f64> = (0..tokens)
                .map(|t| (h * d..(h + 1) * d).map(|u| q[s][u] * k[t][u]).sum::<f64>() * scale)
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for t in 0..tokens {
                for u in h * d..(h + 1) * d {
                    row[u] += exps[t] / total * v[t][u];
                }
            }
        }
        out.data_mut()[s * c..(s + 1) * c].copy_from_slice(&weights.out.apply_row(&row));
    }
    Ok(out)
}

/// Structural dependence of every output element on every input element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dependence {
    pub out_len: usize,
    pub in_len: usize,
    /// Row-major `[out_len, in_len]`.
    pub data: Vec<bool>,
}

impl Dependence {
    pub fn get(&self, out: usize, input: usize) -> bool {
        self.data[out * self.in_len + input]
    }

    /// Groups elements into rows of `out_width` / `in_width` channels; a row
    /// pair depends if any of their elements do.
    pub fn collapse(&self, out_width: usize, in_width: usize) -> Dependence {
        let (ro, ri) = (self.out_len / out_width, self.in_len / in_width);
        let mut data = vec![false; ro * ri];
        for o in 0..self.out_len {
            for i in 0..self.in_len {
                if self.get(o, i) {
                    data[(o / out_width) * ri + i / in_width] = true;
                }
            }
        }
        Dependence {
            out_len: ro,
            in_len: ri,
            data,
        }
    }

    /// Element-wise OR; used to merge probes taken at different random points.
    pub fn union(&self, other: &Dependence) -> Dependence {
        assert_eq!((self.out_len, self.in_len), (other.out_len, other.in_len));
        Dependence {
            out_len: self.out_len,
            in_len: self.in_len,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| *a || *b)
                .collect(),
        }
    }
}

/// Central-difference probe: output element `o` depends on input element
/// `i` when `|f(x + h·e_i)[o] − f(x − h·e_i)[o]|` exceeds `threshold`.
pub fn jacobian_sparsity<F>(f: F, input: &Tensor, threshold: f64) -> Result<Dependence, OracleError>
where
    F: Fn(&Tensor) -> Result<Tensor, OracleError>,
{
    let in_len = input.len();
    let mut probe = input.clone();
    let mut data = Vec::new();
    let mut out_len = 0;
    let mut columns = Vec::with_capacity(in_len);
    for i in 0..in_len {
        let x0 = probe.data()[i];
        probe.data_mut()[i] = x0 + PROBE_STEP;
        let plus = f(&probe)?;
        probe.data_mut()[i] = x0 - PROBE_STEP;
        let minus = f(&probe)?;
        probe.data_mut()[i] = x0;
        out_len = plus.len();
        columns.push(
            plus.data()
                .iter()
                .zip(minus.data())
                .map(|(p, q)| (p - q).abs() > threshold)
                .collect::<Vec<bool>>(),
        );
    }
    data.resize(out_len * in_len, false);
    for (i, col) in columns.iter().enumerate() {
        for (o, &dep) in col.iter().enumerate() {
            data[o * in_len + i] = dep;
        }
    }
    Ok(Dependence {
        out_len,
        in_len,
        data,
    })
}

/// Residual stack of axial attentions on axes `1..=k` of an order-m tensor,
/// each fusing the fixed higher-order tensor `hi`.
pub fn stacked_axial(
    z: &Tensor,
    hi: &Tensor,
    layers: &[AxialWeights],
    heads: usize,
) -> Result<Tensor, OracleError> {
    let mut g = Graph::new();
    let mut x = g.constant(z.clone());
    let h = g.constant(hi.clone());
    for (a, w) in layers.iter().enumerate() {
        let vars = w.bind(&mut g, false);
        let spec = AxialSpec {
            axis: a + 1,
            heads,
            logit_scale: LogitScale::InverseSqrtHeadDim,
        };
        let res = axial_attention(&mut g, &vars, x, Some(h), spec, None)?;
        x = g.add(x, res.out)?;
    }
    Ok(g.value(x).clone())
}

fn random_tensor(rng: &mut impl rand::Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Channels and heads used by [`receptive_field`].
pub const PROBE_CHANNELS: usize = 4;
const PROBE_HEADS: usize = 2;

/// m-body-level dependence of `k` stacked axial attentions on an order-m
/// tensor of `n` atoms, as the union over two unit-scale random points
/// derived from `seed`. Entry `(out, in)` is indexed by row-major tuple position.
pub fn receptive_field(n: usize, m: usize, k: usize, seed: u64) -> Result<Dependence, OracleError> {
    // a second draw re-tests entries that cancelled by accident
    let first = probe_once(n, m, k, seed)?;
    let second = probe_once(n, m, k, crate::model::splitmix64(seed ^ 0x2EC0))?;
    Ok(first.union(&second))
}

fn probe_once(n: usize, m: usize, k: usize, seed: u64) -> Result<Dependence, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = PROBE_CHANNELS;
    let mut zshape = vec![n; m];
    zshape.push(c);
    let mut hshape = vec![n; m + 1];
    hshape.push(c);
    let z = random_tensor(&mut rng, &zshape);
    let hi = random_tensor(&mut rng, &hshape);
    let layers: Vec<AxialWeights> = (0..k)
        .map(|_| AxialWeights::random(&mut rng, c, Some(c)))
        .collect();
    let dep = jacobian_sparsity(
        |x| stacked_axial(x, &hi, &layers, PROBE_HEADS),
        &z,
        PROBE_THRESHOLD,
    )?;
    Ok(dep.collapse(c, c))
}

/// Which attention kernel an operation count refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Stacked axial attention over all m axes.
    Axial,
    /// One attention over all `N^m` m-bodies.
    Full,
}

/// Query–key multiply-accumulates of the attention logits: `N^{2m}·c` for
/// full attention, `m·N^{m+1}·c` for the axial stack.
pub fn count_ops(kind: AttentionKind, n: u64, m: u32, c: u64) -> u64 {
    match kind {
        AttentionKind::Full => n.pow(2 * m) * c,
        AttentionKind::Axial => m as u64 * n.pow(m + 1) * c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_zero_is_the_target() {
        let s = aggred_message(0, &[1, 2], 3).unwrap();
        assert_eq!(s.len(), 1);
        assert!(s.contains(&[1, 2]));
    }

    #[test]
    fn one_step_union() {
        let s = aggred_message(1, &[0, 1], 3).unwrap();
        let expect: BTreeSet<Vec<usize>> =
            [vec![0, 1], vec![1, 1], vec![2, 1]].into_iter().collect();
        assert_eq!(s.tuples, expect);
    }

    #[test]
    fn full_level_is_everything() {
        assert_eq!(aggred_message(2, &[2, 0], 3).unwrap().len(), 9);
        for n in 1..=5 {
            for m in 1..=3 {
                for t in all_tuples(n, m) {
                    assert_eq!(aggred_message(m, &t, n).unwrap().len(), n.pow(m as u32));
                }
            }
        }
    }

    #[test]
    fn closed_form_of_partial_levels() {
        let n = 3;
        for t in all_tuples(n, 3) {
            for k in 0..=3 {
                let s = aggred_message(k, &t, n).unwrap();
                for u in all_tuples(n, 3) {
                    assert_eq!(s.contains(&u), u[k..] == t[k..]);
                }
            }
        }
    }

    #[test]
    fn aggred_message_rejects_bad_input() {
        assert!(matches!(
            aggred_message(3, &[0, 1], 3),
            Err(OracleError::Order { .. })
        ));
        assert!(matches!(
            aggred_message(1, &[0, 3], 3),
            Err(OracleError::Index { .. })
        ));
    }

    #[test]
    fn op_counts() {
        assert_eq!(count_ops(AttentionKind::Full, 4, 2, 1), 256);
        assert_eq!(count_ops(AttentionKind::Axial, 4, 2, 1), 128);
        for m in 1..=3 {
            let a = count_ops(AttentionKind::Axial, 8, m, 5);
            let b = count_ops(AttentionKind::Axial, 16, m, 5);
            assert_eq!(b, a * 2u64.pow(m + 1));
        }
        let ratio =
            count_ops(AttentionKind::Full, 16, 2, 7) / count_ops(AttentionKind::Axial, 16, 2, 7);
        assert_eq!(ratio, 8);
    }

    #[test]
    fn identity_has_diagonal_dependence() {
        let x = Tensor::from_vec(vec![0.1, 0.2, 0.3]);
        let d = jacobian_sparsity(|t| Ok(t.clone()), &x, PROBE_THRESHOLD).unwrap();
        for o in 0..3 {
            for i in 0..3 {
                assert_eq!(d.get(o, i), o == i);
            }
        }
    }

    #[test]
    fn linear_layer_is_dense_over_channels_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = crate::model::LinearWeights::random(&mut rng, 3, 2, 1.0);
        let x = random_tensor(&mut rng, &[4, 3]);
        let f = |t: &Tensor| -> Result<Tensor, OracleError> {
            let mut data = Vec::new();
            for r in 0..4 {
                data.extend(w.apply_row(&t.data()[r * 3..(r + 1) * 3]));
            }
            Ok(Tensor::new(vec![4, 2], data)?)
        };
        let d = jacobian_sparsity(f, &x, PROBE_THRESHOLD).unwrap();
        for o in 0..8 {
            for i in 0..12 {
                assert_eq!(d.get(o, i), o / 2 == i / 3);
            }
        }
    }

    #[test]
    fn naive_matches_model_on_small_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for m in 1..=3 {
            for axis in 1..=m {
                let n = 3;
                let c = 4;
                let w = AxialWeights::random(&mut rng, c, Some(2));
                let mut zs = vec![n; m];
                zs.push(c);
                let mut hs = vec![n; m + 1];
                hs.push(2);
                let z = random_tensor(&mut rng, &zs);
                let hi = random_tensor(&mut rng, &hs);
                let naive =
                    naive_axial_attention(&z, Some(&hi), axis, &w, 2, LogitScale::None, None)
                        .unwrap();
                let mut g = Graph::new();
                let vars = w.bind(&mut g, false);
                let zv = g.constant(z.clone());
                let hv = g.constant(hi.clone());
                let spec = AxialSpec {
                    axis,
                    heads: 2,
                    logit_scale: LogitScale::None,
                };
                let out = axial_attention(&mut g, &vars, zv, Some(hv), spec, None).unwrap();
                assert!(g.value(out.out).max_abs_diff(&naive) <= 1e-12);
            }
        }
    }

    #[test]
    fn single_atom_returns_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = AxialWeights::random(&mut rng, 4, None);
        let z = random_tensor(&mut rng, &[1, 4]);
        let out = naive_axial_attention(&z, None, 1, &w, 2, LogitScale::InverseSqrtHeadDim, None)
            .unwrap();
        let normed = naive_layer_norm(z.data(), w.norm.gain.data(), w.norm.offset.data());
        let expect = w.out.apply_row(&w.value.apply_row(&normed));
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_reference_guard_and_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = AxialWeights::random(&mut rng, 4, None);
        let big = Tensor::zeros(&[6, 6, 6, 4]);
        assert!(matches!(
            full_attention_reference(&big, &w, 2, LogitScale::None),
            Err(OracleError::SizeGuard { tokens: 216, .. })
        ));
        let z = random_tensor(&mut rng, &[3, 3, 4]);
        let full = full_attention_reference(&z, &w, 2, LogitScale::InverseSqrtHeadDim).unwrap();
        let layers = [w.clone(), AxialWeights::random(&mut rng, 4, None)];
        let mut g = Graph::new();
        let mut x = g.constant(z.clone());
        for (a, lw) in layers.iter().enumerate() {
            let vars = lw.bind(&mut g, false);
            let spec = AxialSpec {
                axis: a + 1,
                heads: 2,
                logit_scale: LogitScale::InverseSqrtHeadDim,
            };
            x = axial_attention(&mut g, &vars, x, None, spec, None)
                .unwrap()
                .out;
        }
        assert!(g.value(x).max_abs_diff(&full) > 1e-6);
    }

    #[test]
    fn full_reference_is_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = AxialWeights::random(&mut rng, 4, None);
        let z = random_tensor(&mut rng, &[3, 3, 4]);
        let d = jacobian_sparsity(
            |t| full_attention_reference(t, &w, 2, LogitScale::None),
            &z,
            PROBE_THRESHOLD,
        )
        .unwrap()
        .collapse(4, 4);
        assert!(d.data.iter().all(|&b| b));
    }

    #[test]
    fn partial_stack_matches_recursion() {
        let (n, m) = (3, 2);
        let tuples = all_tuples(n, m);
        for k in 1..=m {
            let dep = receptive_field(n, m, k, 1).unwrap();
            for (o, t) in tuples.iter().enumerate() {
                let s = aggred_message(k, t, n).unwrap();
                for (i, u) in tuples.iter().enumerate() {
                    assert_eq!(dep.get(o, i), s.contains(u), "k={k} out={t:?} in={u:?}");
                }
            }
        }
    }
}
