use std::collections::BTreeMap;

use super::tensor::Tensor4;

/// A learnable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub id: String,
    pub value: Tensor4,
    pub grad: Tensor4,
}

impl ParamTensor {
    pub fn new(id: impl Into<String>, value: Tensor4) -> Self {
        let grad = Tensor4::zeros(value.shape());
        ParamTensor {
            id: id.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// Named parameters kept in id-sorted order, so iteration order is stable
/// across instances built from the same architecture.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<ParamTensor>,
    index: BTreeMap<String, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamIdx(pub(crate) usize);

impl ParamSet {
    pub fn from_params(mut params: Vec<ParamTensor>) -> Result<Self, String> {
        params.sort_by(|a, b| a.id.cmp(&b.id));
        let mut index = BTreeMap::new();
        for (i, p) in params.iter().enumerate() {
            if index.insert(p.id.clone(), i).is_some() {
                return Err(format!("duplicate parameter id `{}`", p.id));
            }
        }
        Ok(ParamSet { params, index })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn idx(&self, id: &str) -> Option<ParamIdx> {
        self.index.get(id).copied().map(ParamIdx)
    }

    pub fn get(&self, idx: ParamIdx) -> &ParamTensor {
        &self.params[idx.0]
    }

    pub fn get_mut(&mut self, idx: ParamIdx) -> &mut ParamTensor {
        &mut self.params[idx.0]
    }

    pub fn by_id(&self, id: &str) -> Option<&ParamTensor> {
        self.idx(id).map(|i| self.get(i))
    }

    pub fn by_id_mut(&mut self, id: &str) -> Option<&mut ParamTensor> {
        self.idx(id).map(move |i| &mut self.params[i.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.id.as_str())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// True when both sets hold the same ids with the same shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.id == b.id && a.value.shape() == b.value.shape())
    }
}
