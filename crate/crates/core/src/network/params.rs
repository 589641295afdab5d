use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Conv or dense weight: trained and L2-penalized.
    Weight,
    /// Bias, batch-norm scale or shift: trained, not penalized.
    Affine,
    /// Batch-norm running statistic: updated by averaging, not by gradients.
    RunningStat,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::RunningStat
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: Vec<T>,
}

/// Flat, ordered store of every network tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T> {
    pub tensors: Vec<ParamTensor<T>>,
}

impl<T: Real> ModelParameters<T> {
    pub(crate) fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind, data: Vec<T>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(ParamTensor { name, shape, kind, data });
        self.tensors.len() - 1
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        ModelParameters {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    kind: t.kind,
                    data: t.data.iter().map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan())).collect(),
                })
                .collect(),
        }
    }
}
