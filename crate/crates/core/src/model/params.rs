//! Named parameter storage and the index handles layers use to find their
//! tensors in it.

use rand::Rng;

use crate::tensor::{Graph, Tensor, Var};

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub(crate) fn push(&mut self, name: String, t: Tensor) -> usize {
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Records every parameter as a leaf; `trainable` controls whether the
    /// tape tracks gradients for them.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormIdx {
    pub gain: usize,
    pub offset: usize,
}

/// Weight and bias handles on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gain: Var,
    pub offset: Var,
}

impl LinearIdx {
    pub fn bind(self, vars: &[Var]) -> LinearVars {
        LinearVars {
            w: vars[self.w],
            b: vars[self.b],
        }
    }
}

impl NormIdx {
    pub fn bind(self, vars: &[Var]) -> NormVars {
        NormVars {
            gain: vars[self.gain],
            offset: vars[self.offset],
        }
    }
}

/// Glorot-uniform bound for a `c_in × c_out` matrix.
pub(crate) fn glorot_limit(c_in: usize, c_out: usize) -> f64 {
    (6.0 / (c_in + c_out) as f64).sqrt()
}

pub(crate) struct ParamBuilder<'r, R: Rng> {
    pub store: ParamStore,
    rng: &'r mut R,
}

impl<'r, R: Rng> ParamBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self {
            store: ParamStore::default(),
            rng,
        }
    }

    /// Glorot-uniform weight, zero bias.
    pub fn linear(&mut self, name: &str, c_in: usize, c_out: usize) -> LinearIdx {
        let limit = glorot_limit(c_in, c_out);
        let data = (0..c_in * c_out)
            .map(|_| self.rng.gen_range(-limit..=limit))
            .collect();
        let w = self.store.push(
            format!("{name}.weight"),
            Tensor::new(vec![c_in, c_out], data).unwrap(),
        );
        let b = self
            .store
            .push(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        LinearIdx { w, b }
    }

    /// Unit gain, zero offset.
    pub fn norm(&mut self, name: &str, c: usize) -> NormIdx {
        let gain = self
            .store
            .push(format!("{name}.gain"), Tensor::full(&[c], 1.0));
        let offset = self
            .store
            .push(format!("{name}.offset"), Tensor::zeros(&[c]));
        NormIdx { gain, offset }
    }
}

/// Owned weights of one linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearWeights {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearWeights {
    /// Entries uniform in `±scale`, biases included.
    pub fn random(rng: &mut impl Rng, c_in: usize, c_out: usize, scale: f64) -> Self {
        Self {
            w: Tensor::from_fn(&[c_in, c_out], |_| rng.gen_range(-scale..=scale)),
            b: Tensor::from_fn(&[c_out], |_| rng.gen_range(-scale..=scale)),
        }
    }

    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            w: Tensor::zeros(&[c_in, c_out]),
            b: Tensor::zeros(&[c_out]),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LinearVars {
        LinearVars {
            w: g.leaf(self.w.clone(), trainable),
            b: g.leaf(self.b.clone(), trainable),
        }
    }

    pub fn c_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.w.shape()[1]
    }

    /// `x · W + b` for one row.
    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        let (c_in, c_out) = (self.c_in(), self.c_out());
        assert_eq!(x.len(), c_in);
        let mut out = self.b.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += xi * self.w.data()[i * c_out + j];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormWeights {
    pub gain: Tensor,
    pub offset: Tensor,
}

impl NormWeights {
    pub fn identity(c: usize) -> Self {
        Self {
            gain: Tensor::full(&[c], 1.0),
            offset: Tensor::zeros(&[c]),
        }
    }

    pub fn random(rng: &mut impl Rng, c: usize) -> Self {
        Self {
            gain: Tensor::from_fn(&[c], |_| rng.gen_range(0.5..1.5)),
            offset: Tensor::from_fn(&[c], |_| rng.gen_range(-0.5..0.5)),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> NormVars {
        NormVars {
            gain: g.leaf(self.gain.clone(), trainable),
            offset: g.leaf(self.offset.clone(), trainable),
        }
    }
}
