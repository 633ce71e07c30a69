//! Versioned checkpoint container: magic, version, the configuration as
//! canonical JSON, then every named parameter tensor.

use std::fmt;
use std::path::Path;

use serde_json::Value;

use super::{Gem2Model, ModelConfig, ModelError, ParamStore};
use crate::binio::{FormatError, Reader, Writer};

pub const CHECKPOINT_MAGIC: &[u8] = b"GEM2CK\0";
pub const CHECKPOINT_VERSION: u16 = 1;

/// One configuration field that differs between two configs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldDiff {
    /// Dotted path, e.g. `hidden[1]` or `features.hop.max`.
    pub field: String,
    pub expected: String,
    pub found: String,
}

impl fmt::Display for FieldDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: expected {}, found {}",
            self.field, self.expected, self.found
        )
    }
}

fn canonical_json(config: &ModelConfig) -> String {
    // serde_json maps are ordered by key, so this is canonical
    serde_json::to_value(config)
        .and_then(|v| serde_json::to_string(&v))
        .expect("model config serializes")
}

fn diff_values(path: &str, a: &Value, b: &Value, out: &mut Vec<FieldDiff>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let sub = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                diff_values(
                    &sub,
                    x.get(k).unwrap_or(&Value::Null),
                    y.get(k).unwrap_or(&Value::Null),
                    out,
                );
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (p, q)) in x.iter().zip(y).enumerate() {
                diff_values(&format!("{path}[{i}]"), p, q, out);
            }
        }
        _ if a != b => out.push(FieldDiff {
            field: path.to_string(),
            expected: a.to_string(),
            found: b.to_string(),
        }),
        _ => {}
    }
}

/// Field-by-field differences, `expected` taken from `a`.
pub fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<FieldDiff> {
    let mut out = Vec::new();
    let va = serde_json::to_value(a).expect("model config serializes");
    let vb = serde_json::to_value(b).expect("model config serializes");
    diff_values("", &va, &vb, &mut out);
    out
}

pub fn encode_checkpoint(model: &Gem2Model) -> Vec<u8> {
    let mut w = Writer::header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
    w.bytes(canonical_json(model.config()).as_bytes());
    w.u64(model.params().len() as u64);
    for (name, t) in model.params().iter() {
        w.bytes(name.as_bytes());
        w.tensor(t);
    }
    w.buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Gem2Model, ModelError> {
    let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let config: ModelConfig = serde_json::from_slice(r.bytes("config")?)
        .map_err(|e| FormatError::Malformed(format!("config: {e}")))?;
    let skeleton = Gem2Model::new(config, 0)?;
    let count = r.u64("parameter count")? as usize;
    if count != skeleton.params().len() {
        return Err(FormatError::Malformed(format!(
            "{count} parameters stored, the configuration defines {}",
            skeleton.params().len()
        ))
        .into());
    }
    let mut params = ParamStore::default();
    for _ in 0..count {
        let name = std::str::from_utf8(r.bytes("parameter name")?)
            .map_err(|_| FormatError::Malformed("parameter name is not UTF-8".into()))?
            .to_string();
        let t = r.tensor("parameter")?;
        if params.index_of(&name).is_some() {
            return Err(FormatError::Malformed(format!("duplicate parameter {name}")).into());
        }
        params.push(name, t);
    }
    r.finish()?;
    if params.names() != skeleton.params().names() {
        return Err(FormatError::Malformed(
            "parameter names do not match the configuration".into(),
        )
        .into());
    }
    skeleton.with_params(params)
}

pub fn save_checkpoint(model: &Gem2Model, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Gem2Model, ModelError> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

/// Loads and requires the stored configuration to equal `expected`.
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: &ModelConfig,
) -> Result<Gem2Model, ModelError> {
    let model = load_checkpoint(path)?;
    let diffs = config_diff(expected, model.config());
    if !diffs.is_empty() {
        return Err(ModelError::ConfigMismatch(diffs));
    }
    Ok(model)
}
