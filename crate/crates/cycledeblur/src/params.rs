use indexmap::IndexMap;
use ndarray::{Array1, Array4, ArrayD, ArrayViewD, Ix1, Ix4};
use sha2::{Digest, Sha256};

use crate::scalar::Real;

/// Ordered collection of named arrays: network parameters or their gradients.
///
/// Names follow `<stage>.<index>.<weight|bias|scale|shift>`; checkpoints
/// prefix them with the owning network (`g_b2s.`, `g_s2b.`, `d_a.`, `d_b.`).
/// Insertion order is the documented construction order, which also fixes the
/// parameter initialization draw order and the checkpoint payload layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<S> {
    arrays: IndexMap<String, ArrayD<S>>,
}

/// Gradients share the name space and shapes of the parameters they belong to.
pub type Grads<S> = Params<S>;

impl<S: Real> Params<S> {
    pub fn new() -> Self {
        Params {
            arrays: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, array: ArrayD<S>) {
        let name = name.into();
        let prev = self.arrays.insert(name.clone(), array);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<S>)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<S>)> {
        self.arrays.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> &ArrayD<S> {
        self.arrays
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<S> {
        self.arrays
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&ArrayD<S>> {
        self.arrays.get(name)
    }

    /// 4-d view (convolution weights).
    pub fn get4(&self, name: &str) -> ndarray::ArrayView4<'_, S> {
        self.get(name)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap_or_else(|_| panic!("parameter {name} is not 4-d"))
    }

    /// 1-d view (biases, normalization scale/shift).
    pub fn get1(&self, name: &str) -> ndarray::ArrayView1<'_, S> {
        self.get(name)
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap_or_else(|_| panic!("parameter {name} is not 1-d"))
    }

    pub fn insert4(&mut self, name: impl Into<String>, array: Array4<S>) {
        self.insert(name, array.into_dyn());
    }

    pub fn insert1(&mut self, name: impl Into<String>, array: Array1<S>) {
        self.insert(name, array.into_dyn());
    }

    /// Accumulate `other` into `self`, inserting zero-initialized entries for
    /// new names. Shapes of shared names must match.
    pub fn accumulate(&mut self, other: &Params<S>) {
        for (name, arr) in other.iter() {
            match self.arrays.get_mut(name) {
                Some(dst) => {
                    assert_eq!(dst.shape(), arr.shape(), "gradient shape mismatch for {name}");
                    dst.zip_mut_with(arr, |d, &s| *d += s);
                }
                None => self.insert(name, arr.clone()),
            }
        }
    }

    pub fn scale(&mut self, factor: S) {
        for (_, arr) in self.iter_mut() {
            arr.mapv_inplace(|v| v * factor);
        }
    }

    /// Total element count across all arrays.
    pub fn num_elements(&self) -> usize {
        self.arrays.values().map(|a| a.len()).sum()
    }

    /// Digest over names, shapes, and exact element bytes; used to assert
    /// that frozen parameter sets stay untouched across training.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(S::DTYPE.as_bytes());
        for (name, arr) in self.iter() {
            hasher.update(name.as_bytes());
            for &d in arr.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in arr.iter() {
                hasher.update(v.as_f64().to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    pub fn view_entries(&self) -> Vec<(String, ArrayViewD<'_, S>)> {
        self.iter().map(|(n, a)| (n.to_string(), a.view())).collect()
    }
}

impl<S: Real> Default for Params<S> {
    fn default() -> Self {
        Self::new()
    }
}
