//! Scalar abstraction: every numeric kernel in this crate is generic over
//! [`Scalar`], instantiated as `f32` for training/checkpoints and `f64`
//! where tests want tighter tolerances.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable by the model, objectives, and optimizer.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + std::fmt::Debug + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, for constants and accumulator results.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any float scalar")
    }

    /// Widen to `f64` for reductions that should not lose precision.
    fn widen(self) -> f64 {
        self.to_f64().expect("float scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
