//! Flat parameter storage.
//!
//! Every tensor of a model lives in one contiguous buffer; a [`Layout`]
//! records names, shapes and offsets. Gradients and optimizer moments are
//! stores with the same layout, so accumulation and updates are plain
//! slice arithmetic.

use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use super::Real;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the buffer.
    pub offset: usize,
    /// Whether decoupled weight decay applies.
    #[serde(default)]
    pub decay: bool,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Layout {
    tensors: Vec<TensorSpec>,
    len: usize,
}

impl Layout {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], decay: bool) -> TensorId {
        let spec = TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.len,
            decay,
        };
        self.len += spec.len();
        self.tensors.push(spec);
        TensorId(self.tensors.len() - 1)
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn spec(&self, id: TensorId) -> &TensorSpec {
        &self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<TensorId> {
        self.tensors.iter().position(|t| t.name == name).map(TensorId)
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    layout: Arc<Layout>,
    data: Vec<T>,
}

impl<T: Real> ParamStore<T> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = vec![T::zero(); layout.len()];
        ParamStore { layout, data }
    }

    pub fn from_data(layout: Arc<Layout>, data: Vec<T>) -> crate::Result<Self> {
        if data.len() != layout.len() {
            return Err(crate::Error::Format(format!(
                "parameter buffer has {} values, layout expects {}",
                data.len(),
                layout.len()
            )));
        }
        Ok(ParamStore { layout, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    fn range(&self, id: TensorId) -> std::ops::Range<usize> {
        let spec = self.layout.spec(id);
        spec.offset..spec.offset + spec.len()
    }

    pub fn slice(&self, id: TensorId) -> &[T] {
        &self.data[self.range(id)]
    }

    pub fn slice_mut(&mut self, id: TensorId) -> &mut [T] {
        let r = self.range(id);
        &mut self.data[r]
    }

    pub fn mat(&self, id: TensorId) -> ArrayView2<'_, T> {
        let spec = self.layout.spec(id);
        ArrayView2::from_shape((spec.shape[0], spec.shape[1]), self.slice(id)).expect("2-d tensor")
    }

    pub fn mat_mut(&mut self, id: TensorId) -> ArrayViewMut2<'_, T> {
        let (r, c) = {
            let spec = self.layout.spec(id);
            (spec.shape[0], spec.shape[1])
        };
        ArrayViewMut2::from_shape((r, c), self.slice_mut(id)).expect("2-d tensor")
    }

    pub fn vec(&self, id: TensorId) -> ArrayView1<'_, T> {
        ArrayView1::from(self.slice(id))
    }

    pub fn vec_mut(&mut self, id: TensorId) -> ArrayViewMut1<'_, T> {
        ArrayViewMut1::from(self.slice_mut(id))
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            layout: self.layout.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    /// Sums stores in slice order.
    pub fn sum_ordered(parts: Vec<Self>) -> Option<Self> {
        let mut iter = parts.into_iter();
        let mut acc = iter.next()?;
        for p in iter {
            acc.add_assign(&p);
        }
        Some(acc)
    }
}
