use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use gem2::featurizer::{encode_feature_set, featurize, FeaturizerConfig, MoleculeRecord, Split};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
const CACHE_EXT: &str = "gfs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub line: usize,
    pub file: String,
    pub sha256: String,
    pub label: f64,
    pub split: Option<Split>,
    pub num_atoms: usize,
    pub max_topo_dist: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedLine {
    pub line: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub featurizer: FeaturizerConfig,
    pub entries: Vec<ManifestEntry>,
    pub skipped: Vec<SkippedLine>,
    /// Entries whose cache file already existed.
    #[serde(skip)]
    pub reused: usize,
}

fn hex(bytes: &[u8]) -> String {
    bytes
        .iter()
        .fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

fn content_hash(record: &MoleculeRecord, config: &FeaturizerConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update(b"\n");
    h.update(serde_json::to_vec(record).expect("record serializes"));
    hex(&h.finalize())
}

fn parse_line(
    line: &str,
    config: &FeaturizerConfig,
) -> Result<(MoleculeRecord, Vec<u8>, u32), String> {
    let rec: MoleculeRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    rec.validate().map_err(|e| e.to_string())?;
    let fs = featurize(&rec, config).map_err(|e| e.to_string())?;
    let max_topo = fs.topo.max_finite();
    Ok((rec, encode_feature_set(&fs), max_topo))
}

/// Writes one cache file per molecule plus `manifest.json`. Files are named
/// by the hash of record and featurizer settings, so unchanged inputs are
/// not rewritten on a re-run.
pub fn featurize_to_dir(
    text: &str,
    out_dir: &Path,
    config: &FeaturizerConfig,
    skip_bad: bool,
) -> Result<Manifest, CliError> {
    config.widths()?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let mut manifest = Manifest {
        featurizer: config.clone(),
        entries: Vec::new(),
        skipped: Vec::new(),
        reused: 0,
    };
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (rec, bytes, max_topo) = match parse_line(line, config) {
            Ok(v) => v,
            Err(error) if skip_bad => {
                manifest.skipped.push(SkippedLine {
                    line: line_no,
                    error,
                });
                continue;
            }
            Err(error) => return Err(CliError::Input(format!("line {line_no}: {error}"))),
        };
        if let Some(first) = seen.insert(rec.id.clone(), line_no) {
            return Err(CliError::Input(format!(
                "duplicate molecule id {:?} on lines {first} and {line_no}",
                rec.id
            )));
        }
        let sha256 = content_hash(&rec, config);
        let file = format!("{sha256}.{CACHE_EXT}");
        let path = out_dir.join(&file);
        if path.exists() {
            manifest.reused += 1;
        } else {
            std::fs::write(&path, &bytes).map_err(|e| CliError::io(&path, e))?;
        }
        manifest.entries.push(ManifestEntry {
            id: rec.id.clone(),
            line: line_no,
            file,
            sha256,
            label: rec.label,
            split: rec.split,
            num_atoms: rec.num_atoms(),
            max_topo_dist: max_topo,
        });
    }
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))?;
    Ok(manifest)
}
