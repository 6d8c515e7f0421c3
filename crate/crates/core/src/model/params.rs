use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Uniform traversal over every trainable buffer of a parameter tree.
///
/// Implementors must yield slices in the same fixed order from both methods;
/// an optimizer relies on this to pair parameters, gradients and velocities.
pub trait Parameters {
    fn param_slices(&self) -> Vec<&[f64]>;

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for s in self.param_slices() {
            out.extend_from_slice(s);
        }
        out
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.num_params();
        if flat.len() != total {
            return Err(Error::shape("set_flat", total, flat.len()));
        }
        let mut offset = 0;
        for s in self.param_slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }

    fn fill_zero(&mut self) {
        for s in self.param_slices_mut() {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn scale_all(&mut self, factor: f64) {
        for s in self.param_slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Checks that `other` has the same slice layout.
    fn check_congruent<P: Parameters + ?Sized>(&self, other: &P) -> Result<()> {
        let a: Vec<usize> = self.param_slices().iter().map(|s| s.len()).collect();
        let b: Vec<usize> = other.param_slices().iter().map(|s| s.len()).collect();
        if a == b {
            Ok(())
        } else {
            Err(Error::shape(
                "parameter layout",
                format!("{a:?}"),
                format!("{b:?}"),
            ))
        }
    }
}
