//! The GEM-2 network: feature embedding, stacked Optimus blocks of
//! per-order tracks, and the pooled prediction head.

mod checkpoint;
mod config;
mod layers;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{
    config_diff, decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expecting,
    save_checkpoint, FieldDiff, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{LogitScale, ModelConfig};
pub use layers::{
    axial_attention, feed_forward, low2high_add, low2high_outer, AddVars, AxialOutput, AxialSpec,
    AxialVars, AxialWeights, FeedForwardVars, OuterVars,
};
pub use params::{LinearVars, LinearWeights, NormVars, NormWeights, ParamStore};

use params::{LinearIdx, NormIdx, ParamBuilder};

use crate::binio::FormatError;
use crate::featurizer::{FeatureError, FeatureSet};
use crate::tensor::{Graph, Mask, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("checkpoint configuration differs from the requested one:\n{}", render_diffs(.0))]
    ConfigMismatch(Vec<FieldDiff>),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn render_diffs(diffs: &[FieldDiff]) -> String {
    diffs
        .iter()
        .map(|d| format!("  {d}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Clone, Copy, Debug)]
struct AxialIdx {
    norm: NormIdx,
    norm_hi: Option<NormIdx>,
    query: LinearIdx,
    key: LinearIdx,
    value: LinearIdx,
    key_hi: Option<LinearIdx>,
    value_hi: Option<LinearIdx>,
    out: LinearIdx,
}

impl AxialIdx {
    fn bind(&self, vars: &[Var]) -> AxialVars {
        AxialVars {
            norm: self.norm.bind(vars),
            norm_hi: self.norm_hi.map(|n| n.bind(vars)),
            query: self.query.bind(vars),
            key: self.key.bind(vars),
            value: self.value.bind(vars),
            key_hi: self.key_hi.map(|l| l.bind(vars)),
            value_hi: self.value_hi.map(|l| l.bind(vars)),
            out: self.out.bind(vars),
        }
    }
}

#[derive(Clone, Debug)]
enum Low2HighIdx {
    Outer {
        norm: NormIdx,
        left: LinearIdx,
        right: LinearIdx,
        out: LinearIdx,
    },
    Add {
        norm: NormIdx,
        drops: Vec<LinearIdx>,
        out: LinearIdx,
    },
}

#[derive(Clone, Copy, Debug)]
struct FeedForwardIdx {
    norm: NormIdx,
    expand: LinearIdx,
    contract: LinearIdx,
}

#[derive(Clone, Debug)]
struct TrackIdx {
    low2high: Option<Low2HighIdx>,
    axial: Vec<AxialIdx>,
    feed_forward: FeedForwardIdx,
}

#[derive(Clone, Debug)]
struct ModelIndex {
    embed: Vec<(LinearIdx, NormIdx)>,
    blocks: Vec<Vec<TrackIdx>>,
    head: [LinearIdx; 3],
}

/// Execution switches for one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunMode {
    pub training: bool,
    /// Seeds the dropout masks; ignored outside training.
    pub seed: u64,
}

impl RunMode {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(seed: u64) -> Self {
        Self {
            training: true,
            seed,
        }
    }
}

/// Which axial attention to record during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceRequest {
    /// 0-based block index.
    pub block: usize,
    pub order: usize,
    /// 1-based axis.
    pub axis: usize,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Shape `[1]`.
    pub prediction: Var,
    /// Embedded orders after the last block: `Z^(1..M)` then, when present,
    /// the static context.
    pub reps: Vec<Var>,
    /// Representations after embedding (index 0) and after each block.
    pub history: Vec<Vec<Var>>,
    pub trace: Option<Var>,
}

/// Value snapshot of the per-order representations of one molecule.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationSet {
    /// `Z^(m)` for `m = 1..=M`.
    pub orders: Vec<Tensor>,
    /// Embedded order-(M+1) features, when `M < 3`.
    pub context: Option<Tensor>,
    pub atom_mask: Vec<bool>,
}

/// Attention row of one query m-body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    /// `per_head[h][j]`.
    pub per_head: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// Splits one seed into independent dropout streams.
struct SeedStream {
    base: u64,
    counter: u64,
}

impl SeedStream {
    fn new(base: u64) -> Self {
        Self { base, counter: 0 }
    }

    fn next(&mut self) -> u64 {
        self.counter += 1;
        splitmix64(self.base ^ splitmix64(self.counter))
    }
}

pub(crate) fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Attention mask `[N, N, 1]` over (query atom, key atom) on one axis, or
/// `None` when every pair may interact.
///
/// Keys must be real atoms within `level` bonds of the query atom; rows left
/// empty (padding queries) fall back to attending to themselves.
pub fn attention_mask(features: &FeatureSet, level: Option<u32>) -> Option<Mask> {
    let n = features.num_atoms();
    if level.is_none() && features.atom_mask.iter().all(|&m| m) {
        return None;
    }
    let allowed = |i: usize, j: usize| {
        features.atom_mask[j] && level.is_none_or(|k| features.topo.get(i, j) <= k)
    };
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        let any = (0..n).any(|j| allowed(i, j));
        data.extend((0..n).map(|j| if any { allowed(i, j) } else { i == j }));
    }
    Some(Mask::new(vec![n, n, 1], data).expect("mask extents"))
}

#[derive(Clone, Debug)]
pub struct Gem2Model {
    config: ModelConfig,
    params: ParamStore,
    index: ModelIndex,
}

impl PartialEq for Gem2Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl Gem2Model {
    /// Fresh model with Glorot-uniform weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut rng);
        let index = build_index(&config, &mut b)?;
        Ok(Self {
            config,
            params: b.store,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Same architecture with replacement parameters; names and shapes must
    /// match exactly.
    pub fn with_params(&self, params: ParamStore) -> Result<Self, ModelError> {
        if params.names() != self.params.names() {
            return Err(ModelError::Config(
                "parameter names do not match the architecture".into(),
            ));
        }
        for ((name, a), b) in self.params.iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(Self {
            config: self.config.clone(),
            params,
            index: self.index.clone(),
        })
    }

    /// Same parameters with a different attention range restriction.
    pub fn with_long_range_level(&self, level: Option<u32>) -> Result<Self, ModelError> {
        let mut out = self.clone();
        out.config.long_range_level = level;
        out.config.validate()?;
        Ok(out)
    }

    /// Records all parameters on the tape, in [`ParamStore`] order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable)
    }

    pub fn check_features(&self, features: &FeatureSet) -> Result<(), ModelError> {
        let widths = features.widths();
        for (m, (lin, _)) in self.index.embed.iter().enumerate() {
            let expected = self.params.tensors()[lin.w].shape()[0];
            if widths[m] != expected {
                return Err(ModelError::Config(format!(
                    "order-{} features have width {}, the embedding expects {expected}",
                    m + 1,
                    widths[m]
                )));
            }
        }
        if features.num_atoms() == 0 || !features.atom_mask.iter().any(|&m| m) {
            return Err(ModelError::Config("molecule has no atoms".into()));
        }
        Ok(())
    }

    /// Per order: linear projection, dropout, layer norm.
    pub fn embed(
        &self,
        g: &mut Graph,
        vars: &[Var],
        features: &FeatureSet,
        mode: RunMode,
    ) -> Result<Vec<Var>, ModelError> {
        self.check_features(features)?;
        let mut seeds = SeedStream::new(splitmix64(mode.seed ^ 0xE3B));
        self.embed_with(g, vars, features, mode, &mut seeds)
    }

    fn embed_with(
        &self,
        g: &mut Graph,
        vars: &[Var],
        features: &FeatureSet,
        mode: RunMode,
        seeds: &mut SeedStream,
    ) -> Result<Vec<Var>, ModelError> {
        let mut reps = Vec::with_capacity(self.index.embed.len());
        for (m, (lin, norm)) in self.index.embed.iter().enumerate() {
            let order = m + 1;
            let x = g.constant(features.order(order).clone());
            let lin = lin.bind(vars);
            let norm = norm.bind(vars);
            let h = g.linear(x, lin.w, lin.b)?;
            let h = g.dropout(
                h,
                self.config.dropout_of(order),
                mode.training,
                seeds.next(),
            )?;
            reps.push(g.layer_norm(h, norm.gain, norm.offset)?);
        }
        Ok(reps)
    }

    /// One Optimus block: tracks `1..=M` in ascending order, each consuming
    /// the already-updated lower track and the pre-block higher order.
    #[allow(clippy::too_many_arguments)]
    fn optimus_block(
        &self,
        g: &mut Graph,
        vars: &[Var],
        block: usize,
        reps: &[Var],
        mask: Option<&Mask>,
        mode: RunMode,
        seeds: &mut SeedStream,
        trace: Option<TraceRequest>,
        traced: &mut Option<Var>,
    ) -> Result<Vec<Var>, ModelError> {
        let cfg = &self.config;
        let mut out = reps.to_vec();
        for (t, track) in self.index.blocks[block].iter().enumerate() {
            let m = t + 1;
            let p = cfg.dropout_of(m);
            let mut z = reps[t];
            if let Some(l2h) = &track.low2high {
                let lower = out[t - 1];
                let lifted = match l2h {
                    Low2HighIdx::Outer {
                        norm,
                        left,
                        right,
                        out: o,
                    } => {
                        let v = OuterVars {
                            norm: norm.bind(vars),
                            left: left.bind(vars),
                            right: right.bind(vars),
                            out: o.bind(vars),
                        };
                        low2high_outer(g, &v, lower)?
                    }
                    Low2HighIdx::Add {
                        norm,
                        drops,
                        out: o,
                    } => {
                        let v = AddVars {
                            norm: norm.bind(vars),
                            drops: drops.iter().map(|d| d.bind(vars)).collect(),
                            out: o.bind(vars),
                        };
                        low2high_add(g, &v, lower, cfg.activation)?
                    }
                };
                let lifted = g.dropout(lifted, p, mode.training, seeds.next())?;
                z = g.add(z, lifted)?;
            }
            let hi = reps.get(t + 1).copied();
            for (a, ax) in track.axial.iter().enumerate() {
                let spec = AxialSpec {
                    axis: a + 1,
                    heads: cfg.heads_of(m),
                    logit_scale: cfg.logit_scale,
                };
                let res = axial_attention(g, &ax.bind(vars), z, ax.key_hi.and(hi), spec, mask)?;
                if trace
                    == Some(TraceRequest {
                        block,
                        order: m,
                        axis: a + 1,
                    })
                {
                    *traced = Some(res.weights);
                }
                let upd = g.dropout(res.out, p, mode.training, seeds.next())?;
                z = g.add(z, upd)?;
            }
            let ff = &track.feed_forward;
            let ffv = FeedForwardVars {
                norm: ff.norm.bind(vars),
                expand: ff.expand.bind(vars),
                contract: ff.contract.bind(vars),
            };
            let upd = feed_forward(g, &ffv, z, cfg.activation)?;
            let upd = g.dropout(upd, p, mode.training, seeds.next())?;
            out[t] = g.add(z, upd)?;
        }
        Ok(out)
    }

    /// Embedding, all blocks, masked mean pool of the atom track, MLP head.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        features: &FeatureSet,
        mode: RunMode,
        trace: Option<TraceRequest>,
    ) -> Result<ForwardOutput, ModelError> {
        self.check_features(features)?;
        let mask = attention_mask(features, self.config.long_range_level);
        let mut seeds = SeedStream::new(splitmix64(mode.seed ^ 0xE3B));
        let mut reps = self.embed_with(g, vars, features, mode, &mut seeds)?;
        let mut history = vec![reps.clone()];
        let mut traced = None;
        for block in 0..self.config.num_blocks {
            reps = self.optimus_block(
                g,
                vars,
                block,
                &reps,
                mask.as_ref(),
                mode,
                &mut seeds,
                trace,
                &mut traced,
            )?;
            history.push(reps.clone());
        }
        let pooled = g.mean_pool_axis(reps[0], 0, Some(&features.atom_mask))?;
        let [h1, h2, h3] = self.index.head.map(|l| l.bind(vars));
        let x = g.linear(pooled, h1.w, h1.b)?;
        let x = g.activation(x, self.config.activation)?;
        let x = g.linear(x, h2.w, h2.b)?;
        let x = g.activation(x, self.config.activation)?;
        let prediction = g.linear(x, h3.w, h3.b)?;
        Ok(ForwardOutput {
            prediction,
            reps,
            history,
            trace: traced,
        })
    }

    /// Evaluation-mode scalar prediction.
    pub fn predict(&self, features: &FeatureSet) -> Result<f64, ModelError> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.forward(&mut g, &vars, features, RunMode::eval(), None)?;
        Ok(g.value(out.prediction).item())
    }

    /// Evaluation-mode representations after embedding and after each block.
    pub fn representations(
        &self,
        features: &FeatureSet,
    ) -> Result<Vec<RepresentationSet>, ModelError> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.forward(&mut g, &vars, features, RunMode::eval(), None)?;
        let updated = self.config.max_order;
        Ok(out
            .history
            .iter()
            .map(|reps| RepresentationSet {
                orders: reps[..updated]
                    .iter()
                    .map(|&v| g.value(v).clone())
                    .collect(),
                context: reps.get(updated).map(|&v| g.value(v).clone()),
                atom_mask: features.atom_mask.clone(),
            })
            .collect())
    }

    /// Attention weights of the axial attention on `axis` (1-based) in
    /// `block` (0-based) for the query m-body `query`, where m is its length.
    pub fn attention_weights(
        &self,
        features: &FeatureSet,
        query: &[usize],
        block: usize,
        axis: usize,
    ) -> Result<AttentionRow, ModelError> {
        let order = query.len();
        let n = features.num_atoms();
        if block >= self.config.num_blocks {
            return Err(ModelError::Index(format!(
                "block {block} (model has {} blocks)",
                self.config.num_blocks
            )));
        }
        if order == 0 || order > self.config.max_order {
            return Err(ModelError::Index(format!(
                "query of order {order} (model updates orders 1..={})",
                self.config.max_order
            )));
        }
        if axis == 0 || axis > order {
            return Err(ModelError::Index(format!(
                "axis {axis} for an order-{order} query"
            )));
        }
        if let Some(&bad) = query.iter().find(|&&i| i >= n) {
            return Err(ModelError::Index(format!(
                "atom {bad} (molecule has {n} atoms)"
            )));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let req = TraceRequest { block, order, axis };
        let out = self.forward(&mut g, &vars, features, RunMode::eval(), Some(req))?;
        let w = g.value(out.trace.expect("traced attention"));
        let heads = *w.shape().last().unwrap();
        let mut idx: Vec<usize> = query
            .iter()
            .enumerate()
            .filter(|&(p, _)| p != axis - 1)
            .map(|(_, &i)| i)
            .collect();
        idx.push(query[axis - 1]);
        idx.extend([0, 0]);
        let r = idx.len();
        let per_head: Vec<Vec<f64>> = (0..heads)
            .map(|h| {
                (0..n)
                    .map(|j| {
                        idx[r - 2] = j;
                        idx[r - 1] = h;
                        w.get(&idx)
                    })
                    .collect()
            })
            .collect();
        let mean = (0..n)
            .map(|j| per_head.iter().map(|row| row[j]).sum::<f64>() / heads as f64)
            .collect();
        Ok(AttentionRow { per_head, mean })
    }
}

fn build_index<R: rand::Rng>(
    config: &ModelConfig,
    b: &mut ParamBuilder<'_, R>,
) -> Result<ModelIndex, ModelError> {
    let widths = config
        .features
        .widths()
        .map_err(|e| ModelError::Config(e.to_string()))?;
    let orders = config.embedded_orders();
    let embed = (1..=orders)
        .map(|m| {
            let c = config.hidden_of(m);
            (
                b.linear(&format!("embed.order{m}.linear"), widths[m - 1], c),
                b.norm(&format!("embed.order{m}.norm"), c),
            )
        })
        .collect();
    let mut blocks = Vec::with_capacity(config.num_blocks);
    for l in 0..config.num_blocks {
        let mut tracks = Vec::with_capacity(config.max_order);
        for m in 1..=config.max_order {
            let c = config.hidden_of(m);
            let prefix = format!("block{l}.track{m}");
            let low2high = match m {
                1 => None,
                2 => {
                    let c1 = config.hidden_of(1);
                    let co = config.outer_width;
                    let p = format!("{prefix}.low2high");
                    Some(Low2HighIdx::Outer {
                        norm: b.norm(&format!("{p}.norm"), c1),
                        left: b.linear(&format!("{p}.left"), c1, co),
                        right: b.linear(&format!("{p}.right"), c1, co),
                        out: b.linear(&format!("{p}.out"), co * co, c),
                    })
                }
                _ => {
                    let cp = config.hidden_of(m - 1);
                    let p = format!("{prefix}.low2high");
                    Some(Low2HighIdx::Add {
                        norm: b.norm(&format!("{p}.norm"), cp),
                        drops: (1..=m)
                            .map(|k| b.linear(&format!("{p}.drop{k}"), cp, c))
                            .collect(),
                        out: b.linear(&format!("{p}.out"), c, c),
                    })
                }
            };
            let c_hi = (m < orders).then(|| config.hidden_of(m + 1));
            let axial = (1..=m)
                .map(|a| {
                    let p = format!("{prefix}.axial{a}");
                    AxialIdx {
                        norm: b.norm(&format!("{p}.norm"), c),
                        norm_hi: c_hi.map(|h| b.norm(&format!("{p}.norm_hi"), h)),
                        query: b.linear(&format!("{p}.query"), c, c),
                        key: b.linear(&format!("{p}.key"), c, c),
                        value: b.linear(&format!("{p}.value"), c, c),
                        key_hi: c_hi.map(|h| b.linear(&format!("{p}.key_hi"), h, c)),
                        value_hi: c_hi.map(|h| b.linear(&format!("{p}.value_hi"), h, c)),
                        out: b.linear(&format!("{p}.out"), c, c),
                    }
                })
                .collect();
            let inner = c * config.ff_expansion;
            let p = format!("{prefix}.feed_forward");
            let feed_forward = FeedForwardIdx {
                norm: b.norm(&format!("{p}.norm"), c),
                expand: b.linear(&format!("{p}.expand"), c, inner),
                contract: b.linear(&format!("{p}.contract"), inner, c),
            };
            tracks.push(TrackIdx {
                low2high,
                axial,
                feed_forward,
            });
        }
        blocks.push(tracks);
    }
    let c1 = config.hidden_of(1);
    let head = [
        b.linear("head.hidden1", c1, c1),
        b.linear("head.hidden2", c1, c1 / 2),
        b.linear("head.out", c1 / 2, 1),
    ];
    Ok(ModelIndex {
        embed,
        blocks,
        head,
    })
}
