//! Building blocks of the network, expressed as tape operations.

use rand::Rng;

use super::params::{LinearVars, LinearWeights, NormVars, NormWeights};
use super::LogitScale;
use crate::tensor::{Activation, Graph, Mask, Result, TensorError, Var};

/// Projections of one many-body axial attention.
///
/// `key_hi`/`value_hi` (and `norm_hi`) are present when the layer fuses the
/// next-higher order; without them it is plain axial self-attention.
#[derive(Clone, Copy, Debug)]
pub struct AxialVars {
    pub norm: NormVars,
    pub norm_hi: Option<NormVars>,
    pub query: LinearVars,
    pub key: LinearVars,
    pub value: LinearVars,
    pub key_hi: Option<LinearVars>,
    pub value_hi: Option<LinearVars>,
    pub out: LinearVars,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AxialSpec {
    /// 1-based atom axis the attention runs along.
    pub axis: usize,
    pub heads: usize,
    pub logit_scale: LogitScale,
}

#[derive(Clone, Copy, Debug)]
pub struct AxialOutput {
    /// Same shape as the input order-m tensor.
    pub out: Var,
    /// Attention weights `[B.., Ni, Nj, H]` where `B..` are the remaining atom
    /// axes in their original order.
    pub weights: Var,
}

pub(crate) fn logit_factor(scale: LogitScale, head_width: usize) -> f64 {
    match scale {
        LogitScale::None => 1.0,
        LogitScale::InverseSqrtHeadDim => 1.0 / (head_width as f64).sqrt(),
    }
}

fn is_identity(perm: &[usize]) -> bool {
    perm.iter().enumerate().all(|(i, &p)| i == p)
}

fn permute_if_needed(g: &mut Graph, x: Var, perm: &[usize]) -> Result<Var> {
    if is_identity(perm) {
        Ok(x)
    } else {
        g.permute(x, perm)
    }
}

/// Axis orders that move the attended axis (and, for the higher-order
/// tensor, the inserted key axis right after it) to the end of the atom axes.
pub(crate) fn axial_permutations(m: usize, a: usize) -> (Vec<usize>, Vec<usize>) {
    let mut pz: Vec<usize> = (0..m).filter(|&p| p != a).collect();
    pz.extend([a, m]);
    let mut ph: Vec<usize> = (0..=m).filter(|&p| p != a && p != a + 1).collect();
    ph.extend([a, a + 1, m + 1]);
    (pz, ph)
}

/// Many-body axial attention of the order-m tensor `z` (`[N; m] × c`) along
/// `spec.axis`, with keys and values augmented by projections of the
/// order-(m+1) tensor `hi` at `(.., i, j, ..)`.
///
/// `mask`, when given, broadcasts against `[N_i, N_j, 1]`.
pub fn axial_attention(
    g: &mut Graph,
    vars: &AxialVars,
    z: Var,
    hi: Option<Var>,
    spec: AxialSpec,
    mask: Option<&Mask>,
) -> Result<AxialOutput> {
    let zs = g.shape(z).to_vec();
    if zs.len() < 2 {
        return Err(TensorError::Shape {
            op: "axial_attention",
            lhs: zs,
            rhs: vec![],
        });
    }
    let m = zs.len() - 1;
    if spec.axis == 0 || spec.axis > m {
        return Err(TensorError::Axis {
            op: "axial_attention",
            axis: spec.axis,
            rank: m,
        });
    }
    let n = zs[0];
    if let Some(h) = hi {
        let hs = g.shape(h);
        if hs.len() != m + 2 || hs[..m + 1].iter().any(|&d| d != n) {
            return Err(TensorError::Shape {
                op: "axial_attention",
                lhs: zs,
                rhs: hs.to_vec(),
            });
        }
    }
    let fused = (vars.key_hi, vars.value_hi, vars.norm_hi);
    let hi_parts =
        match (hi, fused) {
            (Some(h), (Some(kh), Some(vh), Some(nh))) => Some((h, kh, vh, nh)),
            (None, (None, None, None)) => None,
            _ => return Err(TensorError::Config(
                "axial_attention: higher-order input and its projections must be given together"
                    .into(),
            )),
        };
    let c = zs[m];
    let d = crate::tensor::graph::head_width("axial_attention", c, spec.heads)?;
    let a = spec.axis - 1;
    let (pz, ph) = axial_permutations(m, a);

    let zn = g.layer_norm(z, vars.norm.gain, vars.norm.offset)?;
    let zp = permute_if_needed(g, zn, &pz)?;
    let q = g.linear(zp, vars.query.w, vars.query.b)?;
    let k = g.linear(zp, vars.key.w, vars.key.b)?;
    let v = g.linear(zp, vars.value.w, vars.value.b)?;
    let (kh, vh) = match hi_parts {
        Some((h, kw, vw, nh)) => {
            let hn = g.layer_norm(h, nh.gain, nh.offset)?;
            let hp = permute_if_needed(g, hn, &ph)?;
            (
                Some(g.linear(hp, kw.w, kw.b)?),
                Some(g.linear(hp, vw.w, vw.b)?),
            )
        }
        None => (None, None),
    };
    let keys = g.pair_expand(k, kh, n)?;
    let values = g.pair_expand(v, vh, n)?;
    let scores = g.attn_scores(q, keys, spec.heads, logit_factor(spec.logit_scale, d))?;
    let weights = g.softmax_axis(scores, m, mask)?;
    let mixed = g.attn_mix(weights, values, spec.heads)?;
    let projected = g.linear(mixed, vars.out.w, vars.out.b)?;
    let out = permute_if_needed(g, projected, &Graph::inverse_permute(&pz))?;
    Ok(AxialOutput { out, weights })
}

/// Owned axial-attention weights, for standalone use and reference checks.
#[derive(Clone, Debug, PartialEq)]
pub struct AxialWeights {
    pub norm: NormWeights,
    pub norm_hi: Option<NormWeights>,
    pub query: LinearWeights,
    pub key: LinearWeights,
    pub value: LinearWeights,
    pub key_hi: Option<LinearWeights>,
    pub value_hi: Option<LinearWeights>,
    pub out: LinearWeights,
}

impl AxialWeights {
    /// Unit-scale random weights, layer-norm parameters included.
    /// `c_hi` is the width of the higher-order input, if fused.
    pub fn random(rng: &mut impl Rng, c: usize, c_hi: Option<usize>) -> Self {
        Self {
            norm: NormWeights::random(rng, c),
            norm_hi: c_hi.map(|h| NormWeights::random(rng, h)),
            query: LinearWeights::random(rng, c, c, 1.0),
            key: LinearWeights::random(rng, c, c, 1.0),
            value: LinearWeights::random(rng, c, c, 1.0),
            key_hi: c_hi.map(|h| LinearWeights::random(rng, h, c, 1.0)),
            value_hi: c_hi.map(|h| LinearWeights::random(rng, h, c, 1.0)),
            out: LinearWeights::random(rng, c, c, 1.0),
        }
    }

    /// Zeroes the higher-order projections and biases.
    pub fn zero_hi(&mut self) {
        for lw in [&mut self.key_hi, &mut self.value_hi].into_iter().flatten() {
            *lw = LinearWeights::zeros(lw.c_in(), lw.c_out());
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> AxialVars {
        AxialVars {
            norm: self.norm.bind(g, trainable),
            norm_hi: self.norm_hi.as_ref().map(|w| w.bind(g, trainable)),
            query: self.query.bind(g, trainable),
            key: self.key.bind(g, trainable),
            value: self.value.bind(g, trainable),
            key_hi: self.key_hi.as_ref().map(|w| w.bind(g, trainable)),
            value_hi: self.value_hi.as_ref().map(|w| w.bind(g, trainable)),
            out: self.out.bind(g, trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OuterVars {
    pub norm: NormVars,
    pub left: LinearVars,
    pub right: LinearVars,
    pub out: LinearVars,
}

/// Order-1 to order-2 transfer: `[N, c1] → [N, N, c2]` through the flattened
/// outer product of two projections.
pub fn low2high_outer(g: &mut Graph, vars: &OuterVars, z1: Var) -> Result<Var> {
    let zn = g.layer_norm(z1, vars.norm.gain, vars.norm.offset)?;
    let left = g.linear(zn, vars.left.w, vars.left.b)?;
    let right = g.linear(zn, vars.right.w, vars.right.b)?;
    let outer = g.outer(left, right)?;
    g.linear(outer, vars.out.w, vars.out.b)
}

#[derive(Clone, Debug)]
pub struct AddVars {
    pub norm: NormVars,
    /// One projection per dropped index position.
    pub drops: Vec<LinearVars>,
    pub out: LinearVars,
}

/// Order-(m−1) to order-m transfer by summing per-position projections of
/// the lower-order tensor with one index dropped.
pub fn low2high_add(
    g: &mut Graph,
    vars: &AddVars,
    z_prev: Var,
    activation: Activation,
) -> Result<Var> {
    let zs = g.shape(z_prev).to_vec();
    let m = zs.len();
    if vars.drops.len() != m {
        return Err(TensorError::Config(format!(
            "low2high_add: {} projections for an order-{m} output",
            vars.drops.len()
        )));
    }
    let n = zs[0];
    let zn = g.layer_norm(z_prev, vars.norm.gain, vars.norm.offset)?;
    let mut total: Option<Var> = None;
    for (k, p) in vars.drops.iter().enumerate() {
        let proj = g.linear(zn, p.w, p.b)?;
        let spread = g.expand_axis(proj, k, n)?;
        total = Some(match total {
            None => spread,
            Some(t) => g.add(t, spread)?,
        });
    }
    let act = g.activation(total.expect("order ≥ 2"), activation)?;
    g.linear(act, vars.out.w, vars.out.b)
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardVars {
    pub norm: NormVars,
    pub expand: LinearVars,
    pub contract: LinearVars,
}

/// Pre-norm two-layer feed-forward.
pub fn feed_forward(
    g: &mut Graph,
    vars: &FeedForwardVars,
    x: Var,
    activation: Activation,
) -> Result<Var> {
    let xn = g.layer_norm(x, vars.norm.gain, vars.norm.offset)?;
    let h = g.linear(xn, vars.expand.w, vars.expand.b)?;
    let h = g.activation(h, activation)?;
    g.linear(h, vars.contract.w, vars.contract.b)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(axis: usize, heads: usize) -> AxialSpec {
        AxialSpec {
            axis,
            heads,
            logit_scale: LogitScale::InverseSqrtHeadDim,
        }
    }

    #[test]
    fn uniform_keys_return_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, c) = (3, 4);
        let mut w = AxialWeights::random(&mut rng, c, Some(2));
        w.zero_hi();
        let mut g = Graph::new();
        let vars = w.bind(&mut g, false);
        let row = [0.3, -1.0, 2.0, 0.5];
        let z = g.constant(Tensor::from_fn(&[n, n, c], |i| row[i[2]]));
        let hi = g.constant(Tensor::from_fn(&[n, n, n, 2], |_| rng.gen_range(-1.0..1.0)));
        let out = axial_attention(&mut g, &vars, z, Some(hi), spec(2, 2), None).unwrap();
        let weights = g.value(out.weights);
        for &wv in weights.data() {
            assert!((wv - 1.0 / n as f64).abs() < 1e-12);
        }
        // LN of the constant row, then value and output projections
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
        let normed: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(t, x)| {
                (x - mean) / (var + 1e-5).sqrt() * w.norm.gain.data()[t] + w.norm.offset.data()[t]
            })
            .collect();
        let expect = w.out.apply_row(&w.value.apply_row(&normed));
        let got = g.value(out.out);
        for idx in 0..n * n {
            for t in 0..c {
                assert!((got.data()[idx * c + t] - expect[t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_axis_and_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = AxialWeights::random(&mut rng, 4, None);
        let mut g = Graph::new();
        let vars = w.bind(&mut g, false);
        let z = g.constant(Tensor::zeros(&[2, 2, 4]));
        assert!(matches!(
            axial_attention(&mut g, &vars, z, None, spec(3, 2), None),
            Err(TensorError::Axis { .. })
        ));
        assert!(matches!(
            axial_attention(&mut g, &vars, z, None, spec(1, 3), None),
            Err(TensorError::Config(_))
        ));
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = AxialWeights::random(&mut rng, 4, None);
        let mut g = Graph::new();
        let vars = w.bind(&mut g, false);
        let z = g.constant(Tensor::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0)));
        let mask = Mask::from_fn(&[3, 3, 1], |i| i[1] != 2);
        let out = axial_attention(&mut g, &vars, z, None, spec(1, 2), Some(&mask)).unwrap();
        let weights = g.value(out.weights);
        for i in 0..3 {
            for h in 0..2 {
                assert_eq!(weights.get(&[i, 2, h]), 0.0);
                let total: f64 = (0..3).map(|j| weights.get(&[i, j, h])).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    fn outer_vars(
        g: &mut Graph,
        c1: usize,
        co: usize,
        c2: usize,
        rng: &mut ChaCha8Rng,
    ) -> OuterVars {
        OuterVars {
            norm: NormWeights::identity(c1).bind(g, false),
            left: LinearWeights::random(rng, c1, co, 1.0).bind(g, false),
            right: LinearWeights::random(rng, c1, co, 1.0).bind(g, false),
            out: LinearWeights::random(rng, co * co, c2, 1.0).bind(g, false),
        }
    }

    #[test]
    fn outer_product_of_zero_input_is_zero_without_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let mut vars = outer_vars(&mut g, 3, 2, 5, &mut rng);
        vars.left.b = g.constant(Tensor::zeros(&[2]));
        vars.right.b = g.constant(Tensor::zeros(&[2]));
        vars.out.b = g.constant(Tensor::zeros(&[5]));
        let z = g.constant(Tensor::zeros(&[4, 3]));
        let out = low2high_outer(&mut g, &vars, z).unwrap();
        assert_eq!(g.shape(out), &[4, 4, 5]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn add_of_constant_input_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let vars = AddVars {
            norm: NormWeights::random(&mut rng, 3).bind(&mut g, false),
            drops: (0..3)
                .map(|_| LinearWeights::random(&mut rng, 3, 4, 1.0).bind(&mut g, false))
                .collect(),
            out: LinearWeights::random(&mut rng, 4, 4, 1.0).bind(&mut g, false),
        };
        let z = g.constant(Tensor::from_fn(&[3, 3, 3], |i| [0.2, -0.7, 1.1][i[2]]));
        let out = low2high_add(&mut g, &vars, z, Activation::Gelu).unwrap();
        let v = g.value(out);
        assert_eq!(v.shape(), &[3, 3, 3, 4]);
        for idx in 0..27 {
            for t in 0..4 {
                assert!((v.data()[idx * 4 + t] - v.data()[t]).abs() < 1e-12);
            }
        }
    }
}
