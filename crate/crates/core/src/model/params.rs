use std::ops::{Index, IndexMut};

use ndarray::Array2;
use rand::Rng;

use super::Scalar;

/// Handle to one tensor inside a [`Params`] set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub value: Array2<T>,
}

/// Named parameter tensors in a fixed order. Biases and vectors are `1 x n`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params { tensors: Vec::new() }
    }

    pub(crate) fn push(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        self.tensors.push(Tensor { name: name.into(), value });
        ParamId(self.tensors.len() - 1)
    }

    pub(crate) fn uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let value = Array2::from_shape_simple_fn(shape, || T::c(rng.random_range(-bound..=bound)));
        self.push(name, value)
    }

    pub(crate) fn normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        // Box-Muller keeps us on the plain `Rng` trait.
        let value = Array2::from_shape_simple_fn(shape, || {
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            T::c(std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
        });
        self.push(name, value)
    }

    pub(crate) fn constant(&mut self, name: impl Into<String>, shape: (usize, usize), v: f64) -> ParamId {
        self.push(name, Array2::from_elem(shape, T::c(v)))
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor { name: t.name.clone(), value: Array2::zeros(t.value.raw_dim()) })
                .collect(),
        }
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.value.fill(T::zero());
        }
    }

    /// Flat coordinate accessor spanning all tensors in order.
    pub fn coord(&self, mut i: usize) -> T {
        for t in &self.tensors {
            if i < t.value.len() {
                return t.value.as_slice().expect("standard layout")[i];
            }
            i -= t.value.len();
        }
        panic!("coordinate out of range")
    }

    pub fn set_coord(&mut self, mut i: usize, v: T) {
        for t in &mut self.tensors {
            if i < t.value.len() {
                t.value.as_slice_mut().expect("standard layout")[i] = v;
                return;
            }
            i -= t.value.len();
        }
        panic!("coordinate out of range")
    }

    /// Two distinct tensors borrowed mutably at once.
    pub(crate) fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut Array2<T>, &mut Array2<T>) {
        assert_ne!(a.0, b.0, "pair_mut needs distinct tensors");
        if a.0 < b.0 {
            let (lo, hi) = self.tensors.split_at_mut(b.0);
            (&mut lo[a.0].value, &mut hi[0].value)
        } else {
            let (lo, hi) = self.tensors.split_at_mut(a.0);
            (&mut hi[0].value, &mut lo[b.0].value)
        }
    }

    pub fn sum_squares(&self) -> T {
        self.tensors.iter().map(|t| t.value.iter().map(|&v| v * v).sum::<T>()).sum()
    }
}

impl<T> Index<ParamId> for Params<T> {
    type Output = Array2<T>;

    fn index(&self, id: ParamId) -> &Array2<T> {
        &self.tensors[id.0].value
    }
}

impl<T> IndexMut<ParamId> for Params<T> {
    fn index_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.tensors[id.0].value
    }
}
