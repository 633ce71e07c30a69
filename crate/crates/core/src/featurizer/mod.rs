//! Molecule records to dense 1-, 2- and 3-body input tensors.
//!
//! Discrete attributes are one-hot encoded; continuous ones (hop counts,
//! distances, angles) are expanded on a grid of Gaussian radial basis
//! functions. Pair blocks are dense over all `N²` ordered pairs, so every
//! bond one-hot block carries an extra trailing "no bond" category.

mod cache;
mod geometry;
mod record;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub use cache::{
    decode_feature_set, encode_feature_set, FEATURE_CACHE_MAGIC, FEATURE_CACHE_VERSION,
};
pub use geometry::{pair_distance, topo_distance, triangle_angles, triplet_angles, TopoDistance};
pub use record::{
    parse_jsonl, Atom, Bond, BondDir, BondType, ChiralityTag, Hybridization, MoleculeRecord, Split,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("invalid molecule record: {0}")]
    InvalidRecord(String),
    #[error("atom {atom}: {field} value {value} is outside the encoded range")]
    Category {
        atom: usize,
        field: &'static str,
        value: i64,
    },
    #[error("molecule {0:?} has no coordinates for every atom")]
    MissingCoords(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid featurizer configuration: {0}")]
    Config(String),
}

/// Spacing of RBF centers.
pub const RBF_STRIDE: f64 = 0.1;
/// Default RBF shape parameter.
pub const RBF_GAMMA: f64 = 10.0;

/// Gaussian radial basis expansion `e_m(x) = exp(−γ (x − μ_m)²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RbfSpec {
    gamma: f64,
    centers: Vec<f64>,
}

impl RbfSpec {
    /// Centers from `min` to `max` inclusive, 0.1 apart.
    pub fn range(min: f64, max: f64, gamma: f64) -> Result<Self, FeatureError> {
        if !(min.is_finite() && max.is_finite() && max >= min) {
            return Err(FeatureError::Config(format!(
                "RBF range [{min}, {max}] is empty"
            )));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(FeatureError::Config(format!(
                "RBF gamma {gamma} must be positive"
            )));
        }
        let steps = ((max - min) / RBF_STRIDE + 1e-9).floor() as usize;
        let centers = (0..=steps).map(|i| min + i as f64 * RBF_STRIDE).collect();
        Ok(Self { gamma, centers })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Appends the expansion of `x` to `out`.
    pub fn expand_into(&self, x: f64, out: &mut Vec<f64>) {
        out.extend(
            self.centers
                .iter()
                .map(|mu| (-self.gamma * (x - mu) * (x - mu)).exp()),
        );
    }

    pub fn expand(&self, x: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        self.expand_into(x, &mut out);
        out
    }
}

/// Expands every entry of `x`, giving shape `[x.shape.., centers]`.
pub fn rbf_expand(x: &Tensor, spec: &RbfSpec) -> Tensor {
    let mut data = Vec::with_capacity(x.len() * spec.len());
    for &v in x.data() {
        spec.expand_into(v, &mut data);
    }
    let mut shape = x.shape().to_vec();
    shape.push(spec.len());
    Tensor::new(shape, data).expect("rbf extents")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RbfRange {
    pub min: f64,
    pub max: f64,
}

/// Which ranges the continuous features are expanded over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturizerConfig {
    pub gamma: f64,
    pub hop: RbfRange,
    pub distance: RbfRange,
    pub angle: RbfRange,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self {
            gamma: RBF_GAMMA,
            hop: RbfRange {
                min: 0.0,
                max: 20.0,
            },
            distance: RbfRange {
                min: 0.0,
                max: 10.0,
            },
            angle: RbfRange {
                min: 0.0,
                max: std::f64::consts::PI,
            },
        }
    }
}

impl FeaturizerConfig {
    pub fn hop_spec(&self) -> Result<RbfSpec, FeatureError> {
        RbfSpec::range(self.hop.min, self.hop.max, self.gamma)
    }

    pub fn distance_spec(&self) -> Result<RbfSpec, FeatureError> {
        RbfSpec::range(self.distance.min, self.distance.max, self.gamma)
    }

    pub fn angle_spec(&self) -> Result<RbfSpec, FeatureError> {
        RbfSpec::range(self.angle.min, self.angle.max, self.gamma)
    }

    /// Channel widths of X1, X2, X3.
    pub fn widths(&self) -> Result<[usize; 3], FeatureError> {
        let hop = self.hop_spec()?.len();
        let dist = self.distance_spec()?.len();
        let angle = self.angle_spec()?.len();
        Ok([
            ATOM_BLOCK_WIDTHS.iter().sum(),
            PAIR_BLOCK_WIDTHS.iter().sum::<usize>() + hop + dist,
            3 * angle + 3 * hop,
        ])
    }
}

/// atom type, aromaticity, formal charge, chirality, degree, hydrogens, hybridization
pub const ATOM_BLOCK_WIDTHS: [usize; 7] = [119, 2, 16, 4, 11, 9, 5];
/// bond direction, bond type, in-ring; each with a trailing "no bond" slot
pub const PAIR_BLOCK_WIDTHS: [usize; 3] = [8, 5, 3];

const MIN_FORMAL_CHARGE: i32 = -5;

#[derive(Clone, Debug, PartialEq)]
pub struct OneHotBlocks {
    /// Seven `[N, w]` atom blocks in [`ATOM_BLOCK_WIDTHS`] order.
    pub atom: Vec<Tensor>,
    /// Three `[N, N, w]` pair blocks in [`PAIR_BLOCK_WIDTHS`] order.
    pub pair: Vec<Tensor>,
}

fn category(
    atom: usize,
    field: &'static str,
    value: i64,
    width: usize,
) -> Result<usize, FeatureError> {
    usize::try_from(value)
        .ok()
        .filter(|&v| v < width)
        .ok_or(FeatureError::Category { atom, field, value })
}

fn atom_categories(index: usize, atom: &Atom) -> Result<[usize; 7], FeatureError> {
    if atom.atomic_number == 0 {
        return Err(FeatureError::Category {
            atom: index,
            field: "atomic_number",
            value: 0,
        });
    }
    let w = ATOM_BLOCK_WIDTHS;
    Ok([
        category(index, "atomic_number", atom.atomic_number as i64, w[0])?,
        atom.aromatic as usize,
        category(
            index,
            "formal_charge",
            atom.formal_charge as i64 - MIN_FORMAL_CHARGE as i64,
            w[2],
        )
        .map_err(|_| FeatureError::Category {
            atom: index,
            field: "formal_charge",
            value: atom.formal_charge as i64,
        })?,
        match atom.chirality_tag {
            ChiralityTag::Cw => 0,
            ChiralityTag::Ccw => 1,
            ChiralityTag::Unspecified => 2,
            ChiralityTag::Other => 3,
        },
        category(index, "degree", atom.degree as i64, w[4])?,
        category(index, "num_hydrogens", atom.num_hydrogens as i64, w[5])?,
        match atom.hybridization {
            Hybridization::Sp => 0,
            Hybridization::Sp2 => 1,
            Hybridization::Sp3 => 2,
            Hybridization::Sp3d => 3,
            Hybridization::Sp3d2 => 4,
        },
    ])
}

/// Per-pair categories; `None` for non-bonded pairs.
fn bond_table(record: &MoleculeRecord) -> Vec<Option<[usize; 3]>> {
    let n = record.num_atoms();
    let mut table = vec![None; n * n];
    for b in &record.bonds {
        let cats = [
            b.bond_dir as usize,
            match b.bond_type {
                BondType::Single => 0,
                BondType::Double => 1,
                BondType::Triple => 2,
                BondType::Aromatic => 3,
            },
            b.in_ring as usize,
        ];
        table[b.i * n + b.j] = Some(cats);
        table[b.j * n + b.i] = Some(cats);
    }
    table
}

pub fn one_hot_features(record: &MoleculeRecord) -> Result<OneHotBlocks, FeatureError> {
    let n = record.num_atoms();
    let mut atom: Vec<Tensor> = ATOM_BLOCK_WIDTHS
        .iter()
        .map(|&w| Tensor::zeros(&[n, w]))
        .collect();
    for (i, a) in record.atoms.iter().enumerate() {
        for (block, c) in atom.iter_mut().zip(atom_categories(i, a)?) {
            block.set(&[i, c], 1.0);
        }
    }
    let table = bond_table(record);
    let mut pair: Vec<Tensor> = PAIR_BLOCK_WIDTHS
        .iter()
        .map(|&w| Tensor::zeros(&[n, n, w]))
        .collect();
    for i in 0..n {
        for j in 0..n {
            for (b, block) in pair.iter_mut().enumerate() {
                let slot = match table[i * n + j] {
                    Some(cats) => cats[b],
                    None => PAIR_BLOCK_WIDTHS[b] - 1,
                };
                block.set(&[i, j, slot], 1.0);
            }
        }
    }
    Ok(OneHotBlocks { atom, pair })
}

/// Model-ready inputs for one molecule.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub x1: Tensor,
    pub x2: Tensor,
    pub x3: Tensor,
    /// `true` for real atoms, `false` for padding.
    pub atom_mask: Vec<bool>,
    pub topo: TopoDistance,
}

impl FeatureSet {
    pub fn num_atoms(&self) -> usize {
        self.atom_mask.len()
    }

    /// Channel widths of the three input orders.
    pub fn widths(&self) -> [usize; 3] {
        [
            *self.x1.shape().last().unwrap(),
            *self.x2.shape().last().unwrap(),
            *self.x3.shape().last().unwrap(),
        ]
    }

    /// Order-`m` input tensor (1-based).
    pub fn order(&self, m: usize) -> &Tensor {
        match m {
            1 => &self.x1,
            2 => &self.x2,
            3 => &self.x3,
            _ => panic!("no input features of order {m}"),
        }
    }

    /// Relabels atoms: new atom `a` is old atom `perm[a]`.
    pub fn permuted(&self, perm: &[usize]) -> FeatureSet {
        let permute_atoms = |t: &Tensor, order: usize| {
            Tensor::from_fn(t.shape(), |idx| {
                let mut src: Vec<usize> = idx[..order].iter().map(|&a| perm[a]).collect();
                src.push(idx[order]);
                t.get(&src)
            })
        };
        FeatureSet {
            x1: permute_atoms(&self.x1, 1),
            x2: permute_atoms(&self.x2, 2),
            x3: permute_atoms(&self.x3, 3),
            atom_mask: perm.iter().map(|&p| self.atom_mask[p]).collect(),
            topo: self.topo.permuted(perm),
        }
    }

    /// Appends zero-feature padding atoms up to `n` total.
    pub fn padded(&self, n: usize) -> FeatureSet {
        let real = self.num_atoms();
        assert!(n >= real, "cannot pad {real} atoms down to {n}");
        let pad = |t: &Tensor, order: usize| {
            let mut shape = vec![n; order];
            shape.push(*t.shape().last().unwrap());
            Tensor::from_fn(&shape, |idx| {
                if idx[..order].iter().all(|&a| a < real) {
                    t.get(idx)
                } else {
                    0.0
                }
            })
        };
        let mut hops = vec![n as u32; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    hops[i * n + j] = 0;
                } else if i < real && j < real && self.topo.is_connected(i, j) {
                    hops[i * n + j] = self.topo.get(i, j);
                }
            }
        }
        let mut atom_mask = self.atom_mask.clone();
        atom_mask.resize(n, false);
        FeatureSet {
            x1: pad(&self.x1, 1),
            x2: pad(&self.x2, 2),
            x3: pad(&self.x3, 3),
            atom_mask,
            topo: TopoDistance::from_hops(n, hops),
        }
    }
}

pub fn featurize(
    record: &MoleculeRecord,
    config: &FeaturizerConfig,
) -> Result<FeatureSet, FeatureError> {
    record.validate()?;
    let hop_spec = config.hop_spec()?;
    let dist_spec = config.distance_spec()?;
    let angle_spec = config.angle_spec()?;
    let [w1, w2, w3] = config.widths()?;
    let n = record.num_atoms();

    let onehot = one_hot_features(record)?;
    let topo = topo_distance(record);
    let dist = pair_distance(record)?;
    let angles = triplet_angles(record)?;

    let mut x1 = Vec::with_capacity(n * w1);
    for i in 0..n {
        for block in &onehot.atom {
            let w = block.shape()[1];
            x1.extend_from_slice(&block.data()[i * w..(i + 1) * w]);
        }
    }

    let mut x2 = Vec::with_capacity(n * n * w2);
    for i in 0..n {
        for j in 0..n {
            for block in &onehot.pair {
                let w = block.shape()[2];
                let at = (i * n + j) * w;
                x2.extend_from_slice(&block.data()[at..at + w]);
            }
            hop_spec.expand_into(topo.get(i, j) as f64, &mut x2);
            dist_spec.expand_into(dist.get(&[i, j]), &mut x2);
        }
    }

    let mut x3 = Vec::with_capacity(n * n * n * w3);
    let angle_data = angles.data();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let at = ((i * n + j) * n + k) * 3;
                for &a in &angle_data[at..at + 3] {
                    angle_spec.expand_into(a, &mut x3);
                }
                for h in [topo.get(i, j), topo.get(i, k), topo.get(j, k)] {
                    hop_spec.expand_into(h as f64, &mut x3);
                }
            }
        }
    }

    Ok(FeatureSet {
        x1: Tensor::new(vec![n, w1], x1).expect("x1 extents"),
        x2: Tensor::new(vec![n, n, w2], x2).expect("x2 extents"),
        x3: Tensor::new(vec![n, n, n, w3], x3).expect("x3 extents"),
        atom_mask: vec![true; n],
        topo,
    })
}
