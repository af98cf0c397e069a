//! Data-compensation strategies: substitute inputs that let a tracker
//! without prompters run on modality-missing frames.
//!
//! Strategies are pluggable through [`Compensator`]; the two shipped ones
//! fill with zeros or duplicate the available stream.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A rule producing a stand-in for the missing modality's input from the
/// available one. The output shape always equals the available input's.
pub trait Compensator {
    fn name(&self) -> &'static str;
    fn substitute(&self, available: &Tensor) -> Tensor;
}

/// Zero-valued stand-in.
pub struct ZeroFill;

impl Compensator for ZeroFill {
    fn name(&self) -> &'static str {
        "zero"
    }

    fn substitute(&self, available: &Tensor) -> Tensor {
        Tensor::zeros(available.shape().to_vec())
    }
}

/// Duplicates the available stream.
pub struct CopyAvailable;

impl Compensator for CopyAvailable {
    fn name(&self) -> &'static str {
        "copy"
    }

    fn substitute(&self, available: &Tensor) -> Tensor {
        available.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompensationKind {
    Zero,
    Copy,
}

impl CompensationKind {
    pub fn as_compensator(self) -> &'static dyn Compensator {
        match self {
            CompensationKind::Zero => &ZeroFill,
            CompensationKind::Copy => &CopyAvailable,
        }
    }

    pub fn label(self) -> &'static str {
        self.as_compensator().name()
    }
}

impl std::str::FromStr for CompensationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zero" => Ok(CompensationKind::Zero),
            "copy" => Ok(CompensationKind::Copy),
            other => Err(Error::Config(format!(
                "unknown compensation strategy `{other}` (expected `zero` or `copy`)"
            ))),
        }
    }
}

/// Applies the named strategy to the available input.
pub fn compensate(available: &Tensor, kind: CompensationKind) -> Tensor {
    kind.as_compensator().substitute(available)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn copy_is_bitwise_and_idempotent() {
        let mut rng = rng_from_seed(4);
        let x = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let once = compensate(&x, CompensationKind::Copy);
        assert!(once.bits_eq(&x));
        let twice = compensate(&once, CompensationKind::Copy);
        assert!(twice.bits_eq(&x));
    }

    #[test]
    fn zero_sums_to_zero_with_same_shape() {
        let mut rng = rng_from_seed(5);
        let x = Tensor::randn(vec![4, 2, 3], 1.0, &mut rng);
        let z = compensate(&x, CompensationKind::Zero);
        assert_eq!(z.shape(), x.shape());
        assert_eq!(z.data().iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn unknown_strategy_name_is_a_config_error() {
        let err = "gan".parse::<CompensationKind>().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
