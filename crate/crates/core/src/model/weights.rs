//! Named N-D weight tensors and their shape-free flat form.

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Name and shape of one weight tensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorSpec {
    pub node_name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn new(node_name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self {
            node_name: node_name.into(),
            shape,
        }
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.shape.is_empty() || self.shape.iter().any(|&d| d == 0) {
            return Err(ModelError::InvalidShape {
                node: self.node_name.clone(),
                shape: self.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Total element count of a manifest.
pub fn manifest_len(manifest: &[TensorSpec]) -> usize {
    manifest.iter().map(TensorSpec::element_count).sum()
}

fn validate_manifest(manifest: &[TensorSpec]) -> Result<(), ModelError> {
    let mut seen = std::collections::HashSet::new();
    for spec in manifest {
        spec.validate()?;
        if !seen.insert(spec.node_name.as_str()) {
            return Err(ModelError::DuplicateNode(spec.node_name.clone()));
        }
    }
    Ok(())
}

/// Flattened weights with no shape information attached.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FlatWeights(pub Vec<f32>);

impl FlatWeights {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    /// Bitwise equality, so that NaN payloads and signed zeros compare exactly.
    pub fn bit_eq(&self, other: &FlatWeights) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl From<Vec<f32>> for FlatWeights {
    fn from(values: Vec<f32>) -> Self {
        Self(values)
    }
}

/// Ordered collection of named row-major tensors.
///
/// The manifest order is the canonical flattening order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights {
    manifest: Vec<TensorSpec>,
    tensors: Vec<Vec<f32>>,
}

impl ModelWeights {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds weights from `(spec, row-major values)` pairs in manifest order.
    pub fn new(entries: Vec<(TensorSpec, Vec<f32>)>) -> Result<Self, ModelError> {
        let (manifest, tensors): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        validate_manifest(&manifest)?;
        for (spec, values) in manifest.iter().zip(&tensors) {
            if values.len() != spec.element_count() {
                return Err(ModelError::TensorMismatch {
                    node: spec.node_name.clone(),
                    expected: spec.element_count(),
                    actual: values.len(),
                });
            }
        }
        Ok(Self { manifest, tensors })
    }

    /// Appends a tensor at the end of the manifest.
    pub fn push(&mut self, spec: TensorSpec, values: Vec<f32>) -> Result<(), ModelError> {
        spec.validate()?;
        if self.manifest.iter().any(|s| s.node_name == spec.node_name) {
            return Err(ModelError::DuplicateNode(spec.node_name));
        }
        if values.len() != spec.element_count() {
            return Err(ModelError::TensorMismatch {
                expected: spec.element_count(),
                node: spec.node_name,
                actual: values.len(),
            });
        }
        self.manifest.push(spec);
        self.tensors.push(values);
        Ok(())
    }

    pub fn manifest(&self) -> &[TensorSpec] {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.manifest
            .iter()
            .position(|s| s.node_name == name)
            .map(|i| self.tensors[i].as_slice())
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        self.manifest
            .iter()
            .position(|s| s.node_name == name)
            .map(move |i| self.tensors[i].as_mut_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TensorSpec, &[f32])> {
        self.manifest
            .iter()
            .zip(self.tensors.iter().map(Vec::as_slice))
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        manifest_len(&self.manifest)
    }

    /// Bitwise equality of manifests and every element.
    pub fn bit_eq(&self, other: &ModelWeights) -> bool {
        self.manifest == other.manifest
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Concatenates every tensor's row-major values in manifest order.
pub fn flatten_weights(w: &ModelWeights) -> Result<FlatWeights, ModelError> {
    let mut out = Vec::with_capacity(w.parameter_count());
    for (spec, values) in w.iter() {
        if values.len() != spec.element_count() {
            return Err(ModelError::TensorMismatch {
                node: spec.node_name.clone(),
                expected: spec.element_count(),
                actual: values.len(),
            });
        }
        out.extend_from_slice(values);
    }
    Ok(FlatWeights(out))
}

/// Node names and shapes in canonical order.
pub fn describe_weights(w: &ModelWeights) -> Vec<TensorSpec> {
    w.manifest.clone()
}

/// Reshapes a flat vector back into named tensors following `manifest`.
pub fn load_flat_weights(
    flat: &FlatWeights,
    manifest: &[TensorSpec],
) -> Result<ModelWeights, ModelError> {
    validate_manifest(manifest)?;
    let expected = manifest_len(manifest);
    if flat.len() != expected {
        return Err(ModelError::LengthMismatch {
            expected,
            actual: flat.len(),
        });
    }
    let mut tensors = Vec::with_capacity(manifest.len());
    let mut offset = 0;
    for spec in manifest {
        let n = spec.element_count();
        tensors.push(flat.0[offset..offset + n].to_vec());
        offset += n;
    }
    Ok(ModelWeights {
        manifest: manifest.to_vec(),
        tensors,
    })
}
