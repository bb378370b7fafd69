//! Numeric element types.
//!
//! Training runs on `f32`; gradient checks and oracles run on `f64`.
//! [`Counted`] is an `f64` wrapper that tallies arithmetic on a thread-local
//! counter so analytic cost formulas can be compared against what a forward
//! pass actually executes.

use std::cell::Cell;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Send
    + Sync
    + Default
    + PartialOrd
    + Debug
    + Display
    + Sum
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;

    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn min(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }

    /// Runs `f` with op counting suspended. Used for parameter-only
    /// preprocessing that does not scale with the number of tokens.
    fn uncounted<R>(f: impl FnOnce() -> R) -> R {
        f()
    }
}

macro_rules! impl_float_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn zero() -> Self {
                0.0
            }
            #[inline]
            fn one() -> Self {
                1.0
            }
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_float_scalar!(f32);
impl_float_scalar!(f64);

thread_local! {
    static OPS: Cell<u64> = const { Cell::new(0) };
    static PAUSED: Cell<u32> = const { Cell::new(0) };
}

#[inline]
fn tick() {
    if PAUSED.with(|p| p.get()) == 0 {
        OPS.with(|c| c.set(c.get() + 1));
    }
}

/// `f64` that counts one unit per multiplication, division, and
/// transcendental call. Additions, subtractions, negations and comparisons
/// are free: they are absorbed into multiply-add units.
#[derive(Clone, Copy, Default, PartialEq, PartialOrd)]
pub struct Counted(pub f64);

impl Counted {
    /// Resets the thread-local counter and returns its previous value.
    pub fn take_count() -> u64 {
        OPS.with(|c| c.replace(0))
    }

    pub fn count() -> u64 {
        OPS.with(|c| c.get())
    }
}

impl Debug for Counted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        Debug::fmt(&self.0, f)
    }
}

impl Display for Counted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        Display::fmt(&self.0, f)
    }
}

impl Add for Counted {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        Counted(self.0 + rhs.0)
    }
}

impl Sub for Counted {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        Counted(self.0 - rhs.0)
    }
}

impl Mul for Counted {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        tick();
        Counted(self.0 * rhs.0)
    }
}

impl Div for Counted {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        tick();
        Counted(self.0 / rhs.0)
    }
}

impl Neg for Counted {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Counted(-self.0)
    }
}

impl AddAssign for Counted {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        self.0 += rhs.0;
    }
}

impl SubAssign for Counted {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        self.0 -= rhs.0;
    }
}

impl MulAssign for Counted {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        tick();
        self.0 *= rhs.0;
    }
}

impl Sum for Counted {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        Counted(iter.map(|c| c.0).sum())
    }
}

impl Scalar for Counted {
    fn zero() -> Self {
        Counted(0.0)
    }
    fn one() -> Self {
        Counted(1.0)
    }
    fn from_f64(v: f64) -> Self {
        Counted(v)
    }
    fn to_f64(self) -> f64 {
        self.0
    }
    fn exp(self) -> Self {
        tick();
        Counted(self.0.exp())
    }
    fn ln(self) -> Self {
        tick();
        Counted(self.0.ln())
    }
    fn sqrt(self) -> Self {
        tick();
        Counted(self.0.sqrt())
    }
    fn tanh(self) -> Self {
        tick();
        Counted(self.0.tanh())
    }
    fn abs(self) -> Self {
        Counted(self.0.abs())
    }
    fn is_finite(self) -> bool {
        self.0.is_finite()
    }
    fn uncounted<R>(f: impl FnOnce() -> R) -> R {
        PAUSED.with(|p| p.set(p.get() + 1));
        let out = f();
        PAUSED.with(|p| p.set(p.get() - 1));
        out
    }
}
