use std::collections::BTreeMap;

use super::{NnError, Real, Result, Tensor};

/// One named tensor and whether optimizers may touch it.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<R = f32> {
    pub tensor: Tensor<R>,
    pub trainable: bool,
}

/// Named parameter tensors of one network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet<R = f32> {
    entries: BTreeMap<String, Param<R>>,
}

impl<R: Real> ParameterSet<R> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<R>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(NnError::DuplicateParameter(name));
        }
        self.entries.insert(name, Param { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<R>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<R>> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<R>> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| NnError::MissingParameter(name.to_string()))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<R>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Mark every tensor frozen (`false`) or trainable (`true`), except
    /// buffers that were created non-trainable, which stay frozen.
    pub fn set_trainable(&mut self, trainable: bool) {
        for (name, p) in self.entries.iter_mut() {
            p.trainable = trainable && !is_buffer(name);
        }
    }

    pub fn element_count(&self) -> usize {
        self.entries.values().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<S: Real>(&self) -> ParameterSet<S> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// FNV-1a digest over names, shapes and the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv64::new();
        for (name, p) in &self.entries {
            h.write(name.as_bytes());
            for &d in &p.tensor.shape {
                h.write(&(d as u64).to_le_bytes());
            }
            for v in &p.tensor.data {
                h.write(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

/// Running statistics are state, not parameters.
pub(crate) fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients<R = f32> {
    pub params: BTreeMap<String, Tensor<R>>,
    /// Gradient with respect to the network input, when requested.
    pub input: Option<Tensor<R>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.params.get(name)
    }

    pub fn all_zero(&self) -> bool {
        self.params.values().all(|t| t.data.iter().all(|v| *v == R::zero()))
    }
}

/// `p <- p - lr * g` for trainable tensors. Non-finite gradients abort the
/// step before anything is modified. Gradients for frozen tensors are ignored.
pub fn sgd_step<R: Real>(params: &mut ParameterSet<R>, grads: &Gradients<R>, learning_rate: R) -> Result<()> {
    for (name, g) in &grads.params {
        if !g.all_finite() {
            return Err(NnError::NonFiniteGradient(name.clone()));
        }
        let p = params
            .get(name)
            .ok_or_else(|| NnError::MissingParameter(name.clone()))?;
        if p.tensor.shape != g.shape {
            return Err(NnError::ShapeMismatch {
                layer: name.clone(),
                expected: p.tensor.shape.clone(),
                actual: g.shape.clone(),
            });
        }
    }
    for (name, g) in &grads.params {
        let p = params.get_mut(name).expect("checked above");
        if !p.trainable {
            continue;
        }
        for (w, &d) in p.tensor.data.iter_mut().zip(&g.data) {
            *w -= learning_rate * d;
        }
    }
    Ok(())
}

/// Minimal FNV-1a hasher, stable across platforms and releases.
#[derive(Debug, Clone)]
pub struct Fnv64(u64);

impl Fnv64 {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}
