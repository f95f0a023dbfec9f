//! Scalar traits shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::Neg;

use num_rational::Rational64;
use num_traits::{Float, FromPrimitive, Num, ToPrimitive};

/// Floating point type used for curve jets, simulation state and sigmoid
/// losses: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + Sum + Debug + Display + Default + Send + Sync + rustfft::FftNum + 'static
{
    /// Lossy conversion from `f64`, used for literals.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Coefficient ring for symbolic expressions. Rationals keep the algebra
/// exact; floats are accepted where coefficients come out of a numeric fit.
pub trait Coefficient:
    Clone + PartialEq + PartialOrd + Num + Neg<Output = Self> + FromPrimitive + ToPrimitive + Debug + Display
{
}

impl<C> Coefficient for C where
    C: Clone + PartialEq + PartialOrd + Num + Neg<Output = C> + FromPrimitive + ToPrimitive + Debug + Display
{
}

/// Exact rational coefficient.
pub type Rational = Rational64;

/// Neumaier-compensated running sum. Accumulates in call order, so the
/// result is identical on every run for the same input order.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum<T> {
    sum: T,
    carry: T,
}

impl<T: Float> CompensatedSum<T> {
    pub fn new() -> Self {
        Self { sum: T::zero(), carry: T::zero() }
    }

    pub fn add(&mut self, v: T) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry = self.carry + ((self.sum - t) + v);
        } else {
            self.carry = self.carry + ((v - t) + self.sum);
        }
        self.sum = t;
    }

    pub fn value(&self) -> T {
        self.sum + self.carry
    }
}
