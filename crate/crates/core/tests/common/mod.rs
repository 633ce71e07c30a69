#![allow(dead_code)]

use gem2::featurizer::{featurize, FeatureSet, FeaturizerConfig, RbfRange};
use gem2::model::{Gem2Model, ModelConfig};
use gem2::synth::random_molecule;
use gem2::tensor::{Graph, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Gradients whose norm stays below this are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

/// `‖a − b‖ / max(‖a‖, ‖b‖, ABS_FLOOR)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(ABS_FLOOR)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Per-input relative error between reverse-mode gradients of the scalar
/// `f` and central finite differences.
pub fn gradient_errors<F>(inputs: &[Tensor], f: F) -> Vec<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x)).collect();
    let out = f(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    let mut errors = Vec::new();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        assert_eq!(analytic.shape(), inputs[k].shape());
        let mut xs = inputs.to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..inputs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&xs);
            xs[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        errors.push(rel_error(analytic.data(), &numeric));
    }
    errors
}

/// Random-weighted sum of `y`, so every output entry reaches the loss.
pub fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Narrow RBF ranges keep feature widths small for fast tests.
pub fn small_features() -> FeaturizerConfig {
    FeaturizerConfig {
        gamma: 10.0,
        hop: RbfRange { min: 0.0, max: 0.6 },
        distance: RbfRange { min: 0.0, max: 0.6 },
        angle: RbfRange { min: 0.0, max: 0.4 },
    }
}

pub fn small_config(
    num_blocks: usize,
    max_order: usize,
    hidden: usize,
    heads: usize,
) -> ModelConfig {
    let mut c = ModelConfig::uniform(num_blocks, max_order, hidden, heads, 0.0);
    c.outer_width = 4;
    c.ff_expansion = 2;
    c.features = small_features();
    c
}

/// Featurized random molecule with `n` atoms.
pub fn random_features(seed: u64, n: usize, config: &FeaturizerConfig) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rec = random_molecule(&mut rng, n, "probe");
    featurize(&rec, config).unwrap()
}

/// Relative error of every parameter tensor's prediction gradient against
/// central finite differences.
pub fn model_gradient_errors(model: &Gem2Model, features: &FeatureSet) -> Vec<(String, f64)> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let out = model
        .forward(&mut g, &vars, features, gem2::model::RunMode::eval(), None)
        .unwrap();
    let grads = g.backward(out.prediction).unwrap();
    let mut probe = model.clone();
    let mut errors = Vec::new();
    for (k, name) in model.params().names().iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = probe.params().tensors()[k].data()[i];
            probe.params_mut().tensors_mut()[k].data_mut()[i] = orig + FD_STEP;
            let up = probe.predict(features).unwrap();
            probe.params_mut().tensors_mut()[k].data_mut()[i] = orig - FD_STEP;
            let down = probe.predict(features).unwrap();
            probe.params_mut().tensors_mut()[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        errors.push((name.clone(), rel_error(analytic.data(), &numeric)));
    }
    errors
}

/// One randomized axial-attention comparison case.
pub struct AxialCase {
    pub z: Tensor,
    pub hi: Option<Tensor>,
    pub axis: usize,
    pub weights: gem2::model::AxialWeights,
    pub heads: usize,
    pub scale: gem2::model::LogitScale,
    pub mask: Option<gem2::tensor::Mask>,
}

impl AxialCase {
    /// `N ≤ max_n` atoms, order `m ≤ 3`, optional fused higher order and mask.
    pub fn random(seed: u64, max_n: usize) -> Self {
        use gem2::model::{AxialWeights, LogitScale};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.gen_range(1..=3usize);
        let n = rng.gen_range(1..=max_n);
        let heads = [1usize, 2, 4][rng.gen_range(0..3)];
        let c = heads * rng.gen_range(1..=2usize);
        let mut zs = vec![n; m];
        zs.push(c);
        let z = random_tensor(&mut rng, &zs);
        let hi = rng.gen_bool(0.75).then(|| {
            let mut hs = vec![n; m + 1];
            hs.push(c);
            random_tensor(&mut rng, &hs)
        });
        let weights = AxialWeights::random(&mut rng, c, hi.as_ref().map(|_| c));
        let scale = if rng.gen_bool(0.5) {
            LogitScale::None
        } else {
            LogitScale::InverseSqrtHeadDim
        };
        let mask = rng.gen_bool(0.5).then(|| {
            gem2::tensor::Mask::from_fn(&[n, n, 1], |idx| idx[0] == idx[1] || rng.gen_bool(0.6))
        });
        Self {
            z,
            hi,
            axis: rng.gen_range(1..=m),
            weights,
            heads,
            scale,
            mask,
        }
    }

    pub fn model_output(&self) -> Tensor {
        use gem2::model::{axial_attention, AxialSpec};
        let mut g = Graph::new();
        let vars = self.weights.bind(&mut g, false);
        let z = g.constant(self.z.clone());
        let hi = self.hi.as_ref().map(|h| g.constant(h.clone()));
        let spec = AxialSpec {
            axis: self.axis,
            heads: self.heads,
            logit_scale: self.scale,
        };
        let out = axial_attention(&mut g, &vars, z, hi, spec, self.mask.as_ref()).unwrap();
        g.value(out.out).clone()
    }

    pub fn oracle_output(&self) -> Tensor {
        gem2::oracle::naive_axial_attention(
            &self.z,
            self.hi.as_ref(),
            self.axis,
            &self.weights,
            self.heads,
            self.scale,
            self.mask.as_ref(),
        )
        .unwrap()
    }
}

/// Model whose every parameter, biases and norms included, is moved off its
/// initial value by up to `±spread`.
pub fn jittered_model(config: ModelConfig, seed: u64, spread: f64) -> Gem2Model {
    let mut model = Gem2Model::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-spread..spread);
        }
    }
    model
}

/// Number of (output, input) m-body pairs where the measured dependence of
/// `k` stacked axial attentions disagrees with `aggred_message(k)`.
pub fn receptive_field_mismatches(n: usize, m: usize, k: usize, seed: u64) -> usize {
    use gem2::oracle::{aggred_message, all_tuples, receptive_field};
    let dep = receptive_field(n, m, k, seed).unwrap();
    let tuples = all_tuples(n, m);
    let mut bad = 0;
    for (o, target) in tuples.iter().enumerate() {
        let expected = aggred_message(k, target, n).unwrap();
        for (i, source) in tuples.iter().enumerate() {
            if dep.get(o, i) != expected.contains(source) {
                bad += 1;
            }
        }
    }
    bad
}
