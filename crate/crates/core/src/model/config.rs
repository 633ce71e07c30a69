use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::featurizer::FeaturizerConfig;
use crate::tensor::Activation;

/// Scaling applied to `qᵀk` before the softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitScale {
    /// Raw dot products.
    None,
    /// Divide by `sqrt(per-head width)`.
    #[default]
    InverseSqrtHeadDim,
}

/// Architecture hyper-parameters. Per-order lists are indexed by order − 1
/// and cover every embedded order: `min(M + 1, 3)` entries, the last of which
/// sizes the static higher-order context when `M < 3`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of stacked blocks (L).
    pub num_blocks: usize,
    /// Highest order whose representations are updated (M).
    pub max_order: usize,
    pub hidden: Vec<usize>,
    pub heads: Vec<usize>,
    pub dropout: Vec<f64>,
    pub ff_expansion: usize,
    /// Inner width of the outer-product Low2High operands.
    pub outer_width: usize,
    pub activation: Activation,
    pub logit_scale: LogitScale,
    /// Restrict attention to atom pairs at most this many bonds apart.
    pub long_range_level: Option<u32>,
    pub features: FeaturizerConfig,
}

impl ModelConfig {
    /// Uniform widths and rates across orders.
    pub fn uniform(
        num_blocks: usize,
        max_order: usize,
        hidden: usize,
        heads: usize,
        dropout: f64,
    ) -> Self {
        let orders = embedded_orders(max_order);
        Self {
            num_blocks,
            max_order,
            hidden: vec![hidden; orders],
            heads: vec![heads; orders],
            dropout: vec![dropout; orders],
            ff_expansion: 4,
            outer_width: 32,
            activation: Activation::Gelu,
            logit_scale: LogitScale::InverseSqrtHeadDim,
            long_range_level: None,
            features: FeaturizerConfig::default(),
        }
    }

    /// Quantum-chemistry preset: 12 blocks, width 256, dropout 0.05.
    pub fn quantum() -> Self {
        Self::uniform(12, 2, 256, 8, 0.05)
    }

    /// Drug-discovery preset: 12 blocks, width 128, dropout 0.2.
    pub fn drug() -> Self {
        Self::uniform(12, 2, 128, 8, 0.2)
    }

    pub fn embedded_orders(&self) -> usize {
        embedded_orders(self.max_order)
    }

    pub fn has_context(&self) -> bool {
        self.max_order < 3
    }

    pub fn hidden_of(&self, order: usize) -> usize {
        self.hidden[order - 1]
    }

    pub fn heads_of(&self, order: usize) -> usize {
        self.heads[order - 1]
    }

    pub fn dropout_of(&self, order: usize) -> f64 {
        self.dropout[order - 1]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if !(1..=3).contains(&self.max_order) {
            return bad(format!("max_order {} must be 1, 2 or 3", self.max_order));
        }
        let orders = self.embedded_orders();
        for (name, len) in [
            ("hidden", self.hidden.len()),
            ("heads", self.heads.len()),
            ("dropout", self.dropout.len()),
        ] {
            if len != orders {
                return bad(format!("{name} lists {len} orders, expected {orders}"));
            }
        }
        for m in 1..=orders {
            let (c, h) = (self.hidden_of(m), self.heads_of(m));
            if c == 0 || h == 0 || c % h != 0 {
                return bad(format!(
                    "order {m}: width {c} is not divisible by {h} heads"
                ));
            }
            let p = self.dropout_of(m);
            if !(0.0..1.0).contains(&p) {
                return bad(format!("order {m}: dropout {p} must lie in [0, 1)"));
            }
        }
        if self.hidden_of(1) < 2 {
            return bad("order 1 width must be at least 2".into());
        }
        if self.ff_expansion == 0 || self.outer_width == 0 {
            return bad("ff_expansion and outer_width must be positive".into());
        }
        if self.long_range_level == Some(0) {
            return bad("long_range_level must be at least 1".into());
        }
        self.features
            .widths()
            .map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(())
    }
}

pub(crate) fn embedded_orders(max_order: usize) -> usize {
    (max_order + 1).min(3)
}
