//! Derivative-carrying scalars.
//!
//! The KL objective is written once against the [`Real`] trait and evaluated
//! with plain `f64` for values, [`Dual`] for exact first derivatives, and
//! `Dual<Dual<f64>>` for exact second derivatives. Special functions are
//! built from elementary operations only, so every scalar type that
//! implements the trait differentiates them for free.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar arithmetic shared by `f64` and dual numbers.
pub trait Real:
    Copy
    + Clone
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;

    /// Primal value, with all derivative parts stripped.
    fn value(&self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;

    /// Multiply by a constant (no derivative attached to `c`).
    fn scale(self, c: f64) -> Self;

    /// Add a constant.
    fn shift(self, c: f64) -> Self;

    fn recip(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn value(&self) -> f64 {
        *self
    }
    #[inline(always)]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline(always)]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline(always)]
    fn scale(self, c: f64) -> Self {
        self * c
    }
    #[inline(always)]
    fn shift(self, c: f64) -> Self {
        self + c
    }
    #[inline(always)]
    fn recip(self) -> Self {
        1.0 / self
    }
}

/// Forward-mode dual number with a single tangent slot.
///
/// Nesting (`Dual<Dual<f64>>`) yields exact mixed second derivatives: seed
/// the outer tangent with direction `i` and the inner with direction `j`,
/// then read `∂²f/∂x_i∂x_j` from `dx.dx`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<T> {
    pub re: T,
    pub dx: T,
}

impl<T: Real> Dual<T> {
    #[inline(always)]
    pub fn new(re: T, dx: T) -> Self {
        Dual { re, dx }
    }

    /// Constant (zero tangent).
    #[inline(always)]
    pub fn constant(x: f64) -> Self {
        Dual {
            re: T::from_f64(x),
            dx: T::zero(),
        }
    }

    /// Variable seeded with unit tangent.
    #[inline(always)]
    pub fn seeded(x: f64) -> Self {
        Dual {
            re: T::from_f64(x),
            dx: T::from_f64(1.0),
        }
    }
}

impl<T: Real> Add for Dual<T> {
    type Output = Self;
    #[inline(always)]
    fn add(self, rhs: Self) -> Self {
        Dual::new(self.re + rhs.re, self.dx + rhs.dx)
    }
}

impl<T: Real> Sub for Dual<T> {
    type Output = Self;
    #[inline(always)]
    fn sub(self, rhs: Self) -> Self {
        Dual::new(self.re - rhs.re, self.dx - rhs.dx)
    }
}

impl<T: Real> Mul for Dual<T> {
    type Output = Self;
    #[inline(always)]
    fn mul(self, rhs: Self) -> Self {
        Dual::new(self.re * rhs.re, self.re * rhs.dx + self.dx * rhs.re)
    }
}

impl<T: Real> Div for Dual<T> {
    type Output = Self;
    #[inline(always)]
    fn div(self, rhs: Self) -> Self {
        let inv = rhs.re.recip();
        let re = self.re * inv;
        Dual::new(re, (self.dx - re * rhs.dx) * inv)
    }
}

impl<T: Real> Neg for Dual<T> {
    type Output = Self;
    #[inline(always)]
    fn neg(self) -> Self {
        Dual::new(-self.re, -self.dx)
    }
}

impl<T: Real> Real for Dual<T> {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        Dual::constant(x)
    }
    #[inline(always)]
    fn value(&self) -> f64 {
        self.re.value()
    }
    #[inline(always)]
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.dx * e)
    }
    #[inline(always)]
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.dx / self.re)
    }
    #[inline(always)]
    fn scale(self, c: f64) -> Self {
        Dual::new(self.re.scale(c), self.dx.scale(c))
    }
    #[inline(always)]
    fn shift(self, c: f64) -> Self {
        Dual::new(self.re.shift(c), self.dx)
    }
    #[inline(always)]
    fn recip(self) -> Self {
        let inv = self.re.recip();
        Dual::new(inv, -(inv * inv) * self.dx)
    }
}

/// Second-order dual used for Hessian entries.
pub type Dual2 = Dual<Dual<f64>>;

impl Dual2 {
    /// Seed one `Dual2` input for the mixed derivative `∂²/∂x_i∂x_j`:
    /// `outer` is 1.0 when this variable is direction `i`, `inner` when it
    /// is direction `j`.
    #[inline(always)]
    pub fn seeded2(x: f64, outer: f64, inner: f64) -> Self {
        Dual::new(Dual::new(x, inner), Dual::new(outer, 0.0))
    }

    /// The mixed second derivative carried by this value.
    #[inline(always)]
    pub fn second(&self) -> f64 {
        self.dx.dx
    }

    /// First derivative in the outer direction.
    #[inline(always)]
    pub fn first_outer(&self) -> f64 {
        self.dx.re
    }
}

// Asymptotic tail of psi(x), valid for x >= 8 after argument shifting.
#[inline]
fn digamma_tail<T: Real>(x: T) -> T {
    let inv = x.recip();
    let inv2 = inv * inv;
    // ln x - 1/(2x) - 1/(12x^2) + 1/(120x^4) - 1/(252x^6) + 1/(240x^8)
    //   - 1/(132x^10) + 691/(32760x^12)
    let series = inv2.scale(-1.0 / 12.0)
        + (inv2 * inv2).scale(1.0 / 120.0)
        + (inv2 * inv2 * inv2).scale(-1.0 / 252.0)
        + (inv2 * inv2 * inv2 * inv2).scale(1.0 / 240.0)
        + (inv2 * inv2 * inv2 * inv2 * inv2).scale(-1.0 / 132.0)
        + (inv2 * inv2 * inv2 * inv2 * inv2 * inv2).scale(691.0 / 32760.0);
    x.ln() - inv.scale(0.5) + series
}

/// Digamma function for positive arguments, generic over scalar type.
pub fn digamma<T: Real>(x: T) -> T {
    debug_assert!(x.value() > 0.0, "digamma requires positive argument");
    let mut shift = T::zero();
    let mut x = x;
    while x.value() < 8.0 {
        shift = shift - x.recip();
        x = x.shift(1.0);
    }
    shift + digamma_tail(x)
}

/// Trigamma function (`psi'`) for positive `f64` arguments.
pub fn trigamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "trigamma requires positive argument");
    let mut acc = 0.0;
    let mut x = x;
    while x < 8.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // 1/x + 1/(2x^2) + 1/(6x^3) - 1/(30x^5) + 1/(42x^7) - 1/(30x^9)
    acc + inv
        + 0.5 * inv2
        + inv * inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 / 30.0)))
}

// Lanczos approximation, g = 7, nine coefficients.
const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Log-gamma for positive arguments, generic over scalar type.
pub fn ln_gamma<T: Real>(x: T) -> T {
    debug_assert!(x.value() > 0.0, "ln_gamma requires positive argument");
    let mut acc = T::from_f64(LANCZOS_COEF[0]);
    for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc = acc + (x.shift(i as f64 - 1.0)).recip().scale(c);
    }
    let t = x.shift(LANCZOS_G - 0.5);
    T::from_f64(0.5 * (2.0 * std::f64::consts::PI).ln()) + x.shift(-0.5) * t.ln() - t + acc.ln()
}

/// Numerically stable `ln(sum_k exp(s_k))`.
pub fn log_sum_exp<T: Real>(scores: &[T]) -> T {
    debug_assert!(!scores.is_empty());
    let mut max_idx = 0;
    for (i, s) in scores.iter().enumerate() {
        if s.value() > scores[max_idx].value() {
            max_idx = i;
        }
    }
    let m = scores[max_idx];
    let mut sum = T::zero();
    for s in scores {
        sum = sum + (*s - m).exp();
    }
    m + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn digamma_matches_reference() {
        // statrs carries an independent digamma implementation.
        for &x in &[0.1, 0.5, 1.0, 1.5, 2.0, 5.0, 10.0, 31.7, 123.4] {
            assert_relative_eq!(
                digamma::<f64>(x),
                statrs::function::gamma::digamma(x),
                max_relative = 1e-12,
                epsilon = 1e-13
            );
        }
    }

    #[test]
    fn ln_gamma_matches_reference() {
        for &x in &[0.1, 0.5, 1.0, 2.5, 7.0, 11.0, 100.3] {
            assert_relative_eq!(
                ln_gamma::<f64>(x),
                statrs::function::gamma::ln_gamma(x),
                max_relative = 1e-12,
                epsilon = 1e-13
            );
        }
    }

    #[test]
    fn trigamma_matches_finite_differences_of_digamma() {
        let h = 1e-6;
        for &x in &[0.2, 1.0, 3.3, 9.1, 40.0] {
            let fd = (digamma::<f64>(x + h) - digamma::<f64>(x - h)) / (2.0 * h);
            assert_relative_eq!(trigamma(x), fd, max_relative = 1e-7);
        }
    }

    #[test]
    fn dual_differentiates_composites() {
        // d/dx [ x*ln(x) + exp(-x)/x ] at x = 1.7, against central differences.
        let f = |x: Dual<f64>| x * x.ln() + (-x).exp() / x;
        let x0 = 1.7;
        let d = f(Dual::seeded(x0)).dx;
        let h = 1e-7;
        let fd = (f(Dual::constant(x0 + h)).re - f(Dual::constant(x0 - h)).re) / (2.0 * h);
        assert_relative_eq!(d, fd, max_relative = 1e-8);
    }

    #[test]
    fn nested_dual_gives_second_derivative() {
        // f(x) = exp(x) * ln(x); f''(x) checked against the closed form.
        let f = |x: Dual2| x.exp() * x.ln();
        let x0 = 2.3;
        let got = f(Dual2::seeded2(x0, 1.0, 1.0)).second();
        let expect = x0.exp() * (x0.ln() + 2.0 / x0 - 1.0 / (x0 * x0));
        assert_relative_eq!(got, expect, max_relative = 1e-12);
    }

    #[test]
    fn dual_digamma_derivative_is_trigamma() {
        for &x in &[0.4, 1.3, 6.0, 20.0] {
            let d = digamma(Dual::<f64>::seeded(x)).dx;
            assert_relative_eq!(d, trigamma(x), max_relative = 1e-10);
        }
    }

    #[test]
    fn log_sum_exp_stable_and_correct() {
        let xs = [1000.0f64, 1000.5, 999.0];
        let lse = log_sum_exp(&xs);
        let expect = 1000.5 + ((-0.5f64).exp() + 1.0 + (-1.5f64).exp()).ln();
        assert_relative_eq!(lse, expect, max_relative = 1e-14);
    }
}
