//! Named views over dense parameter tensors.
//!
//! Model components expose their trainable tensors in a fixed order through
//! [`ParamSet`]. A gradient holder is simply another value of the same type,
//! so optimizer state, checkpoints and finite-difference checks can all walk
//! parameters and gradients in lockstep.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2};

pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

pub fn matrix_ref<'a>(name: impl Into<String>, a: &'a Array2<f64>) -> TensorRef<'a> {
    TensorRef {
        name: name.into(),
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("parameters are stored in standard layout"),
    }
}

pub fn vector_ref<'a>(name: impl Into<String>, a: &'a Array1<f64>) -> TensorRef<'a> {
    TensorRef {
        name: name.into(),
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("parameters are stored in standard layout"),
    }
}

pub fn matrix_mut<'a>(name: impl Into<String>, a: &'a mut Array2<f64>) -> TensorMut<'a> {
    TensorMut {
        name: name.into(),
        shape: a.shape().to_vec(),
        data: a
            .as_slice_mut()
            .expect("parameters are stored in standard layout"),
    }
}

pub fn vector_mut<'a>(name: impl Into<String>, a: &'a mut Array1<f64>) -> TensorMut<'a> {
    TensorMut {
        name: name.into(),
        shape: a.shape().to_vec(),
        data: a
            .as_slice_mut()
            .expect("parameters are stored in standard layout"),
    }
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

/// A fresh, process-unique modification stamp.
pub fn next_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<TensorRef<'_>>;

    /// Mutable access. Implementations must refresh any modification stamp
    /// they carry.
    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            debug_assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter_mut().zip(b.data) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for x in t.data.iter_mut() {
                *x *= factor;
            }
        }
    }

    fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    fn names(&self) -> Vec<String> {
        self.tensors().into_iter().map(|t| t.name).collect()
    }
}
