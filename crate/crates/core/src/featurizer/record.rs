//! Raw molecule records as read from JSON lines.

use serde::{Deserialize, Serialize};

use super::FeatureError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChiralityTag {
    Cw,
    Ccw,
    Unspecified,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hybridization {
    Sp,
    Sp2,
    Sp3,
    Sp3d,
    Sp3d2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BondType {
    Single,
    Double,
    Triple,
    Aromatic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BondDir {
    #[default]
    None,
    BeginWedge,
    BeginDash,
    EndDownRight,
    EndUpRight,
    EitherDouble,
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atom {
    pub atomic_number: u32,
    #[serde(default)]
    pub formal_charge: i32,
    #[serde(default = "unspecified")]
    pub chirality_tag: ChiralityTag,
    #[serde(default)]
    pub aromatic: bool,
    pub degree: u32,
    #[serde(default)]
    pub num_hydrogens: u32,
    pub hybridization: Hybridization,
}

fn unspecified() -> ChiralityTag {
    ChiralityTag::Unspecified
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub bond_type: BondType,
    #[serde(default)]
    pub bond_dir: BondDir,
    #[serde(default)]
    pub in_ring: bool,
}

/// Dataset partition a record may declare for itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoleculeRecord {
    pub id: String,
    pub atoms: Vec<Atom>,
    #[serde(default)]
    pub bonds: Vec<Bond>,
    /// Per-atom positions in ångström.
    #[serde(default)]
    pub coords: Vec<[f64; 3]>,
    #[serde(default)]
    pub label: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl MoleculeRecord {
    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    /// Checks index validity and structural consistency. Chemistry is not
    /// checked.
    pub fn validate(&self) -> Result<(), FeatureError> {
        let n = self.atoms.len();
        if n == 0 {
            return Err(FeatureError::InvalidRecord(format!(
                "molecule {:?} has no atoms",
                self.id
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for (b, bond) in self.bonds.iter().enumerate() {
            if bond.i >= n || bond.j >= n {
                return Err(FeatureError::InvalidRecord(format!(
                    "bond {b} references atom {} but the molecule has {n} atoms",
                    bond.i.max(bond.j)
                )));
            }
            if bond.i == bond.j {
                return Err(FeatureError::InvalidRecord(format!(
                    "bond {b} is a self-loop on atom {}",
                    bond.i
                )));
            }
            if !seen.insert((bond.i.min(bond.j), bond.i.max(bond.j))) {
                return Err(FeatureError::InvalidRecord(format!(
                    "duplicate bond between atoms {} and {}",
                    bond.i, bond.j
                )));
            }
        }
        if !self.coords.is_empty() && self.coords.len() != n {
            return Err(FeatureError::InvalidRecord(format!(
                "{} coordinates for {n} atoms",
                self.coords.len()
            )));
        }
        if self.coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(FeatureError::InvalidRecord("non-finite coordinate".into()));
        }
        Ok(())
    }

    pub(crate) fn require_coords(&self) -> Result<&[[f64; 3]], FeatureError> {
        if self.coords.len() != self.atoms.len() {
            return Err(FeatureError::MissingCoords(self.id.clone()));
        }
        Ok(&self.coords)
    }

    /// Relabels atoms so that new atom `a` is old atom `perm[a]`.
    pub fn permuted(&self, perm: &[usize]) -> MoleculeRecord {
        let n = self.atoms.len();
        assert_eq!(perm.len(), n, "permutation length");
        let mut new_of_old = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            new_of_old[old] = new;
        }
        MoleculeRecord {
            id: self.id.clone(),
            atoms: perm.iter().map(|&o| self.atoms[o].clone()).collect(),
            bonds: self
                .bonds
                .iter()
                .map(|b| Bond {
                    i: new_of_old[b.i],
                    j: new_of_old[b.j],
                    ..b.clone()
                })
                .collect(),
            coords: if self.coords.is_empty() {
                Vec::new()
            } else {
                perm.iter().map(|&o| self.coords[o]).collect()
            },
            label: self.label,
            split: self.split,
        }
    }
}

/// Parses JSON lines, skipping blank lines. Errors carry the 1-based line.
pub fn parse_jsonl(text: &str) -> Vec<Result<MoleculeRecord, FeatureError>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<MoleculeRecord>(l)
                .map_err(|e| FeatureError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
                .and_then(|r| {
                    r.validate().map_err(|e| FeatureError::Parse {
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                    Ok(r)
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"id":"ethane","atoms":[{"atomic_number":6,"formal_charge":0,"chirality_tag":"unspecified","aromatic":false,"degree":1,"num_hydrogens":3,"hybridization":"sp3"},{"atomic_number":6,"formal_charge":0,"chirality_tag":"unspecified","aromatic":false,"degree":1,"num_hydrogens":3,"hybridization":"sp3"}],"bonds":[{"i":0,"j":1,"bond_type":"single","bond_dir":"none","in_ring":false}],"coords":[[0,0,0],[1.5,0,0]],"label":0.25}"#;

    #[test]
    fn parses_documented_field_names() {
        let parsed = parse_jsonl(LINE);
        let rec = parsed[0].as_ref().unwrap();
        assert_eq!(rec.num_atoms(), 2);
        assert_eq!(rec.bonds[0].bond_type, BondType::Single);
        assert_eq!(rec.label, 0.25);
    }

    #[test]
    fn reports_line_numbers() {
        let text = format!("{LINE}\n\n{{\"id\": 3}}\n");
        let parsed = parse_jsonl(&text);
        assert!(parsed[0].is_ok());
        match &parsed[1] {
            Err(FeatureError::Parse { line, .. }) => assert_eq!(*line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_bonds() {
        let mut rec = parse_jsonl(LINE).remove(0).unwrap();
        rec.bonds.push(rec.bonds[0].clone());
        assert!(rec.validate().is_err());
        rec.bonds.pop();
        rec.bonds[0].j = 5;
        assert!(rec.validate().is_err());
        rec.bonds[0].j = 0;
        assert!(rec.validate().is_err());
    }
}
