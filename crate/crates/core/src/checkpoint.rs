use std::collections::BTreeMap;

use crate::arch::ToyArchSpec;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named tensors for one model of a given architecture.
///
/// Construction validates that exactly the tensors `arch` requires are
/// present with the shapes it dictates, so every transform downstream can
/// index by name without re-checking.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    tensors: BTreeMap<String, Tensor<T>>,
    arch: ToyArchSpec,
    pub provenance: String,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(
        arch: ToyArchSpec,
        tensors: BTreeMap<String, Tensor<T>>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        arch.validate()?;
        let expected = arch.tensor_shapes();
        for (name, shape) in &expected {
            match tensors.get(name) {
                None => return Err(Error::ArchMismatch(format!("missing tensor {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::ArchMismatch(format!(
                        "{name}: shape {:?}, architecture requires {:?}",
                        t.shape(),
                        shape
                    )))
                }
                Some(t) => t.ensure_finite(name)?,
            }
        }
        if tensors.len() != expected.len() {
            let extra: Vec<_> = tensors
                .keys()
                .filter(|k| !expected.iter().any(|(n, _)| n == *k))
                .collect();
            return Err(Error::ArchMismatch(format!("unexpected tensors {extra:?}")));
        }
        Ok(Self {
            tensors,
            arch,
            provenance: provenance.into(),
        })
    }

    /// All-zero checkpoint.
    pub fn zeros(arch: ToyArchSpec) -> Result<Self> {
        arch.validate()?;
        let tensors = arch
            .tensor_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .collect();
        Self::new(arch, tensors, "zeros")
    }

    pub fn arch(&self) -> &ToyArchSpec {
        &self.arch
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }

    /// Panics on an unknown name; names come from [`ToyArchSpec`].
    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("checkpoint has no tensor {name}"))
    }

    /// Replace one tensor, keeping the shape contract.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::ArchMismatch(format!("no tensor {name}")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "{name}: {:?} vs {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        t.ensure_finite(name)?;
        *slot = t;
        Ok(())
    }

    /// Append a processing step to the provenance trail.
    pub fn note(&mut self, step: impl AsRef<str>) {
        if self.provenance.is_empty() {
            self.provenance = step.as_ref().to_string();
        } else {
            self.provenance = format!("{} | {}", self.provenance, step.as_ref());
        }
    }

    /// Mutable view into a tensor's data. Callers keep values finite.
    pub(crate) fn data_mut(&mut self, name: &str) -> &mut [T] {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("checkpoint has no tensor {name}"))
            .data_mut()
    }

    pub fn require_same_arch(&self, other: &Self) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::ArchMismatch(format!(
                "{:?} vs {:?}",
                self.arch, other.arch
            )));
        }
        Ok(())
    }

    /// Largest absolute elementwise difference over all tensors.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.require_same_arch(other)?;
        let mut m = T::zero();
        for (name, t) in &self.tensors {
            m = m.max(t.max_abs_diff(other.get(name))?);
        }
        Ok(m)
    }

    /// Apply `f` to every tensor, producing a checkpoint of the same arch.
    pub fn try_map(
        &self,
        mut f: impl FnMut(&str, &Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        let tensors = self
            .tensors
            .iter()
            .map(|(n, t)| Ok((n.clone(), f(n, t)?)))
            .collect::<Result<_>>()?;
        Self::new(self.arch, tensors, self.provenance.clone())
    }

    pub fn cast<U: Scalar>(&self) -> Result<Checkpoint<U>> {
        let tensors = self
            .tensors
            .iter()
            .map(|(n, t)| Ok((n.clone(), t.cast::<U>()?)))
            .collect::<Result<_>>()?;
        Checkpoint::new(self.arch, tensors, self.provenance.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_missing_and_extra() {
        let arch = ToyArchSpec::TINY;
        let mut t = Checkpoint::<f64>::zeros(arch).unwrap().into_tensors();
        t.insert("extra".into(), Tensor::zeros(&[1]));
        assert!(matches!(
            Checkpoint::new(arch, t.clone(), ""),
            Err(Error::ArchMismatch(_))
        ));
        t.remove("extra");
        t.remove("head.b");
        assert!(Checkpoint::new(arch, t, "").is_err());
    }

    #[test]
    fn rejects_wrong_shape() {
        let arch = ToyArchSpec::TINY;
        let mut c = Checkpoint::<f64>::zeros(arch).unwrap();
        assert!(c.set("head.b", Tensor::zeros(&[3])).is_err());
        let mut t = c.clone().into_tensors();
        t.insert("head.b".into(), Tensor::zeros(&[5]));
        assert!(Checkpoint::new(arch, t, "").is_err());
        c.set("head.b", Tensor::vector(vec![1.0; 4]).unwrap()).unwrap();
    }
}
