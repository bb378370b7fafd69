//! Named access to the trainable tensors of a model.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct Param<'a, T> {
    pub name: String,
    pub tensor: &'a Tensor<T>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

pub struct ParamMut<'a, T> {
    pub name: String,
    pub tensor: &'a mut Tensor<T>,
    pub decay: bool,
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything holding trainable tensors. Gradients are stored in a value of
/// the same type, so parameter and gradient lists line up by position.
pub trait Parameterized<T: Scalar> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Param<'a, T>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>);

    fn params(&self) -> Vec<Param<'_, T>> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    /// Number of trainable scalars actually allocated.
    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }

    fn zeroed(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.tensor.fill(T::zero());
        }
        z
    }

    /// Elementwise `self += other`; both must share one structure.
    fn accumulate(&mut self, other: &Self) -> Result<()> {
        let src = other.params();
        for (dst, src) in self.params_mut().into_iter().zip(src) {
            dst.tensor.add_assign(src.tensor)?;
        }
        Ok(())
    }

    /// Copies every tensor from `other` (any element type) by position.
    fn load_from<U: Scalar, P: Parameterized<U>>(&mut self, other: &P) -> Result<()> {
        let src = other.params();
        let mut dst = self.params_mut();
        if src.len() != dst.len() {
            return Err(crate::Error::Dimension(format!(
                "parameter lists differ in length: {} vs {}",
                dst.len(),
                src.len()
            )));
        }
        for (d, s) in dst.iter_mut().zip(&src) {
            if d.tensor.shape() != s.tensor.shape() {
                return Err(crate::Error::Dimension(format!(
                    "parameter {} has shape {:?}, source {} has {:?}",
                    d.name,
                    d.tensor.shape(),
                    s.name,
                    s.tensor.shape()
                )));
            }
            *d.tensor = s.tensor.cast();
        }
        Ok(())
    }
}

/// Helper used by the `collect` implementations.
macro_rules! push_param {
    ($out:expr, $prefix:expr, $name:expr, $t:expr, $decay:expr) => {
        $out.push($crate::params::Param {
            name: $crate::params::join($prefix, $name),
            tensor: $t,
            decay: $decay,
        })
    };
}

macro_rules! push_param_mut {
    ($out:expr, $prefix:expr, $name:expr, $t:expr, $decay:expr) => {
        $out.push($crate::params::ParamMut {
            name: $crate::params::join($prefix, $name),
            tensor: $t,
            decay: $decay,
        })
    };
}

pub(crate) use push_param;
pub(crate) use push_param_mut;
