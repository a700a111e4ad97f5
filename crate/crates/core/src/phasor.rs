use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::scalar::{wrap_angle, Scalar};

/// Sinusoid at the network frequency, stored as RMS magnitude and phase.
///
/// The angle is always normalized into `(-π, π]` and the magnitude is never
/// negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phasor<T> {
    pub magnitude: T,
    pub angle: T,
}

impl<T: Scalar> Phasor<T> {
    pub fn new(magnitude: T, angle: T) -> Self {
        if magnitude < T::zero() {
            Self { magnitude: -magnitude, angle: wrap_angle(angle + T::PI()) }
        } else {
            Self { magnitude, angle: wrap_angle(angle) }
        }
    }

    pub fn from_complex(z: Complex<T>) -> Self {
        Self::new(z.norm(), z.arg())
    }

    pub fn to_complex(self) -> Complex<T> {
        Complex::from_polar(self.magnitude, self.angle)
    }

    /// Peak value of the time-domain sinusoid, `√2·|X|`.
    pub fn peak(self) -> T {
        self.magnitude * T::SQRT_2()
    }
}

impl<T: Scalar> From<Complex<T>> for Phasor<T> {
    fn from(z: Complex<T>) -> Self {
        Self::from_complex(z)
    }
}
