//! Versioned binary container for a [`FeatureSet`].
//!
//! Layout: magic `GEM2FS\0`, version (u16), then five shape-prefixed arrays
//! in order X1, X2, X3, atom mask (0/1), hop distances. Each array is a u32
//! rank, u64 extents, and little-endian f64 values.

use super::{FeatureSet, TopoDistance};
use crate::binio::{FormatError, Reader, Writer};
use crate::tensor::Tensor;

pub const FEATURE_CACHE_MAGIC: &[u8; 7] = b"GEM2FS\0";
pub const FEATURE_CACHE_VERSION: u16 = 1;

pub fn encode_feature_set(fs: &FeatureSet) -> Vec<u8> {
    let n = fs.num_atoms();
    let mut w = Writer::header(FEATURE_CACHE_MAGIC, FEATURE_CACHE_VERSION);
    w.tensor(&fs.x1);
    w.tensor(&fs.x2);
    w.tensor(&fs.x3);
    let mask: Vec<f64> = fs
        .atom_mask
        .iter()
        .map(|&m| if m { 1.0 } else { 0.0 })
        .collect();
    w.array(&[n], &mask);
    let hops: Vec<f64> = fs.topo.as_slice().iter().map(|&h| h as f64).collect();
    w.array(&[n, n], &hops);
    w.buf
}

pub fn decode_feature_set(bytes: &[u8]) -> Result<FeatureSet, FormatError> {
    let mut r = Reader::open(bytes, FEATURE_CACHE_MAGIC, FEATURE_CACHE_VERSION)?;
    let x1 = r.tensor("x1")?;
    let x2 = r.tensor("x2")?;
    let x3 = r.tensor("x3")?;
    let mask = r.tensor("atom_mask")?;
    let hops = r.tensor("topo_dist")?;
    r.finish()?;
    let n = mask.len();
    let atom_shape = |t: &Tensor, order: usize| {
        t.ndim() == order + 1 && t.shape()[..order].iter().all(|&d| d == n)
    };
    if !(atom_shape(&x1, 1) && atom_shape(&x2, 2) && atom_shape(&x3, 3) && hops.shape() == [n, n]) {
        return Err(FormatError::Malformed(
            "feature arrays disagree on atom count".into(),
        ));
    }
    let hops = hops
        .data()
        .iter()
        .map(|&h| {
            if h >= 0.0 && h.fract() == 0.0 && h <= u32::MAX as f64 {
                Ok(h as u32)
            } else {
                Err(FormatError::Malformed(format!("hop distance {h}")))
            }
        })
        .collect::<Result<Vec<u32>, _>>()?;
    Ok(FeatureSet {
        x1,
        x2,
        x3,
        atom_mask: mask.data().iter().map(|&m| m != 0.0).collect(),
        topo: TopoDistance::from_hops(n, hops),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurizer::{featurize, FeaturizerConfig};
    use crate::synth::ring;

    #[test]
    fn round_trip_and_header() {
        let config = FeaturizerConfig {
            hop: crate::featurizer::RbfRange { min: 0.0, max: 4.0 },
            ..FeaturizerConfig::default()
        };
        let fs = featurize(&ring(5), &config).unwrap().padded(6);
        let bytes = encode_feature_set(&fs);
        assert_eq!(&bytes[..7], b"GEM2FS\0");
        assert_eq!(
            u16::from_le_bytes([bytes[7], bytes[8]]),
            FEATURE_CACHE_VERSION
        );
        assert_eq!(decode_feature_set(&bytes).unwrap(), fs);
    }

    #[test]
    fn rejects_corruption() {
        let fs = featurize(&ring(3), &FeaturizerConfig::default()).unwrap();
        let mut bytes = encode_feature_set(&fs);
        assert!(matches!(
            decode_feature_set(&bytes[..bytes.len() - 3]),
            Err(FormatError::Truncated { .. })
        ));
        bytes[7] = 9;
        assert!(matches!(
            decode_feature_set(&bytes),
            Err(FormatError::UnsupportedVersion { .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            decode_feature_set(&bytes),
            Err(FormatError::BadMagic { .. })
        ));
    }
}
