//! Scalar field abstraction shared by every numerical module.
//!
//! Both the real field (`f64`) and the complex field (`Complex<f64>`) are
//! supported. Everything rides on nalgebra's [`ComplexField`], with a few
//! extras for sampling and component access.

use nalgebra::{Complex, ComplexField};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::FRAC_1_SQRT_2;

pub type C64 = Complex<f64>;

pub trait Scalar: ComplexField<RealField = f64> + Copy + Default {
    /// Number of real components (1 for real, 2 for complex).
    const COMPONENTS: usize;
    const NAME: &'static str;

    fn from_parts(re: f64, im: f64) -> Self;

    /// Unit-variance standard normal. Complex draws use independent
    /// `N(0, 1/2)` real and imaginary parts.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Real components in order (real part first).
    fn components(self) -> [f64; 2] {
        [self.real(), self.imaginary()]
    }

    fn from_f64(v: f64) -> Self {
        Self::from_parts(v, 0.0)
    }

    /// Standard deviation of a single real component of [`Scalar::standard_normal`].
    fn component_std() -> f64;
}

impl Scalar for f64 {
    const COMPONENTS: usize = 1;
    const NAME: &'static str = "real";

    fn from_parts(re: f64, _im: f64) -> Self {
        re
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn component_std() -> f64 {
        1.0
    }
}

impl Scalar for C64 {
    const COMPONENTS: usize = 2;
    const NAME: &'static str = "complex";

    fn from_parts(re: f64, im: f64) -> Self {
        Complex::new(re, im)
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        Complex::new(re * FRAC_1_SQRT_2, im * FRAC_1_SQRT_2)
    }

    fn component_std() -> f64 {
        FRAC_1_SQRT_2
    }
}

/// `⟨a, b⟩ = Σ conj(a_i) b_i`.
pub fn inner<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (x, y)| acc + x.conjugate() * *y)
}

pub fn norm<T: Scalar>(a: &[T]) -> f64 {
    a.iter().map(|x| x.modulus_squared()).sum::<f64>().sqrt()
}
