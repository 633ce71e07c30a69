//! Graph and geometric descriptors of a molecule.

use std::collections::VecDeque;

use super::{FeatureError, MoleculeRecord};
use crate::tensor::Tensor;

/// All-pairs hop counts over the bond graph, row-major `N×N`.
///
/// Pairs in different connected components carry the sentinel `N`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopoDistance {
    n: usize,
    hops: Vec<u32>,
}

impl TopoDistance {
    pub fn from_hops(n: usize, hops: Vec<u32>) -> Self {
        assert_eq!(hops.len(), n * n);
        Self { n, hops }
    }

    pub fn num_atoms(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.hops[i * self.n + j]
    }

    pub fn sentinel(&self) -> u32 {
        self.n as u32
    }

    pub fn is_connected(&self, i: usize, j: usize) -> bool {
        i == j || self.get(i, j) != self.sentinel()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.hops
    }

    /// Largest finite hop count (the bond-graph diameter over connected pairs).
    pub fn max_finite(&self) -> u32 {
        let mut best = 0;
        for i in 0..self.n {
            for j in 0..self.n {
                if self.is_connected(i, j) {
                    best = best.max(self.get(i, j));
                }
            }
        }
        best
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut hops = vec![0; n * n];
        for a in 0..n {
            for b in 0..n {
                hops[a * n + b] = self.get(perm[a], perm[b]);
            }
        }
        Self { n, hops }
    }
}

/// Breadth-first search from every atom.
pub fn topo_distance(record: &MoleculeRecord) -> TopoDistance {
    let n = record.num_atoms();
    let mut adjacency = vec![Vec::new(); n];
    for b in &record.bonds {
        adjacency[b.i].push(b.j);
        adjacency[b.j].push(b.i);
    }
    let sentinel = n as u32;
    let mut hops = vec![sentinel; n * n];
    let mut queue = VecDeque::new();
    for source in 0..n {
        let row = &mut hops[source * n..(source + 1) * n];
        row[source] = 0;
        queue.clear();
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            let next = row[u] + 1;
            for &v in &adjacency[u] {
                if row[v] == sentinel && v != source {
                    row[v] = next;
                    queue.push_back(v);
                }
            }
        }
    }
    TopoDistance { n, hops }
}

/// Euclidean distance matrix in ångström, `[N, N]`.
pub fn pair_distance(record: &MoleculeRecord) -> Result<Tensor, FeatureError> {
    let coords = record.require_coords()?;
    let n = coords.len();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            let d = distance(&coords[i], &coords[j]);
            out.set(&[i, j], d);
            out.set(&[j, i], d);
        }
    }
    Ok(out)
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = sub(a, b);
    dot(&d, &d).sqrt()
}

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

// relative |u×v| below which a triangle counts as collinear
const COLLINEAR_TOL: f64 = 1e-9;

/// Interior angle at `apex` of the triangle (apex, p, q), radians.
fn angle_at(apex: &[f64; 3], p: &[f64; 3], q: &[f64; 3]) -> f64 {
    let u = sub(p, apex);
    let v = sub(q, apex);
    // atan2 of |u×v| and u·v stays accurate near 0 and π
    let c = cross(&u, &v);
    dot(&c, &c).sqrt().atan2(dot(&u, &v))
}

/// Interior angles (at i, at j, at k) of the triangle formed by three atoms,
/// or zeros when the triplet is degenerate.
pub fn triangle_angles(pi: &[f64; 3], pj: &[f64; 3], pk: &[f64; 3]) -> [f64; 3] {
    let u = sub(pj, pi);
    let v = sub(pk, pi);
    let c = cross(&u, &v);
    let area2 = dot(&c, &c).sqrt();
    let scale = dot(&u, &u).sqrt() * dot(&v, &v).sqrt();
    if scale == 0.0 || area2 <= COLLINEAR_TOL * scale {
        return [0.0; 3];
    }
    [
        angle_at(pi, pj, pk),
        angle_at(pj, pk, pi),
        angle_at(pk, pi, pj),
    ]
}

/// `[N, N, N, 3]` interior angles of every ordered triplet.
pub fn triplet_angles(record: &MoleculeRecord) -> Result<Tensor, FeatureError> {
    let coords = record.require_coords()?;
    let n = coords.len();
    let mut data = Vec::with_capacity(n * n * n * 3);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                if i == j || j == k || i == k {
                    data.extend_from_slice(&[0.0; 3]);
                } else {
                    data.extend_from_slice(&triangle_angles(&coords[i], &coords[j], &coords[k]));
                }
            }
        }
    }
    Ok(Tensor::new(vec![n, n, n, 3], data).expect("triplet angle extents"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{chain, ring};
    use std::f64::consts::PI;

    #[test]
    fn path_graph_hops() {
        let d = topo_distance(&chain(3));
        assert_eq!(d.get(0, 2), 2);
        for i in 0..3 {
            assert_eq!(d.get(i, i), 0);
        }
    }

    #[test]
    fn benzene_opposite_atoms_are_three_hops() {
        let d = topo_distance(&ring(6));
        for i in 0..6 {
            assert_eq!(d.get(i, (i + 3) % 6), 3);
        }
        assert_eq!(d.max_finite(), 3);
    }

    #[test]
    fn disconnected_pairs_get_sentinel() {
        let mut rec = chain(4);
        rec.bonds.remove(1);
        let d = topo_distance(&rec);
        assert_eq!(d.get(0, 3), 4);
        assert!(!d.is_connected(0, 3));
        assert_eq!(d.max_finite(), 1);
    }

    #[test]
    fn three_four_five() {
        let mut rec = chain(2);
        rec.coords = vec![[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]];
        let d = pair_distance(&rec).unwrap();
        assert_eq!(d.get(&[0, 1]), 5.0);
        assert_eq!(d.get(&[1, 1]), 0.0);
    }

    #[test]
    fn missing_coords_is_an_error() {
        let mut rec = chain(2);
        rec.coords.clear();
        assert!(matches!(
            pair_distance(&rec),
            Err(FeatureError::MissingCoords(_))
        ));
        assert!(matches!(
            triplet_angles(&rec),
            Err(FeatureError::MissingCoords(_))
        ));
    }

    #[test]
    fn triangle_cases() {
        let eq = triangle_angles(
            &[0.0, 0.0, 0.0],
            &[1.0, 0.0, 0.0],
            &[0.5, 3f64.sqrt() / 2.0, 0.0],
        );
        for a in eq {
            assert!((a - PI / 3.0).abs() < 1e-12);
        }
        let right = triangle_angles(&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]);
        assert!((right[0] - PI / 2.0).abs() < 1e-12);
        assert!((right[1] - PI / 4.0).abs() < 1e-12);
        assert!((right[2] - PI / 4.0).abs() < 1e-12);
        let line = triangle_angles(&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[2.0, 0.0, 0.0]);
        assert_eq!(line, [0.0; 3]);
    }

    #[test]
    fn repeated_index_triplets_are_zero() {
        let t = triplet_angles(&ring(4)).unwrap();
        for i in 0..4 {
            for k in 0..4 {
                for c in 0..3 {
                    assert_eq!(t.get(&[i, i, k, c]), 0.0);
                }
            }
        }
    }
}
