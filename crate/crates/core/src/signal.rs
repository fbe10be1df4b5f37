//! Signal primitives: cyclic shifts, circular convolution, truncated
//! circulant embedding, rank-one factor extraction and the sparse-support
//! rate.
//!
//! Signals are plain [`DVector`]s over a [`Scalar`] field. Indices are
//! 0-based throughout, so `cyclic_shift(v, k)[i] = v[(i - k) mod n]`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Signal<T> = DVector<T>;

/// Relative magnitude window inside which entries count as tied for the
/// anchor of [`rank_one_factor`]. Factors of recovered matrices carry
/// solver round-off, so exact equality would make the anchor arbitrary.
pub const ANCHOR_TIE_RTOL: f64 = 1e-6;

#[inline]
fn wrap(i: i64, n: usize) -> usize {
    i.rem_euclid(n as i64) as usize
}

pub fn cyclic_shift<T: Scalar>(v: &Signal<T>, k: i64) -> Signal<T> {
    let n = v.len();
    if n == 0 {
        return v.clone();
    }
    let k = wrap(k, n);
    Signal::from_fn(n, |i, _| v[(i + n - k) % n])
}

/// `(f ⊛ g)_j = Σ_i f_i g_{(j - i) mod n}`, evaluated directly.
pub fn circular_convolve<T: Scalar>(f: &Signal<T>, g: &Signal<T>) -> Result<Signal<T>> {
    let n = f.len();
    if g.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: g.len(),
        });
    }
    let mut out = Signal::zeros(n);
    for (i, &fi) in f.iter().enumerate() {
        if fi == T::zero() {
            continue;
        }
        for (j, o) in out.iter_mut().enumerate() {
            *o += fi * g[(j + n - i) % n];
        }
    }
    Ok(out)
}

/// Zero-pad `h` to length `n`.
pub fn pad<T: Scalar>(h: &Signal<T>, n: usize) -> Result<Signal<T>> {
    if h.len() > n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: h.len(),
        });
    }
    Ok(Signal::from_fn(n, |i, _| if i < h.len() { h[i] } else { T::zero() }))
}

/// The first `width` columns of the circulant matrix of a generator:
/// column `d` is the generator cyclically shifted down by `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedCirculant<T: Scalar> {
    generator: Signal<T>,
    width: usize,
}

impl<T: Scalar> TruncatedCirculant<T> {
    pub fn new(generator: Signal<T>, width: usize) -> Result<Self> {
        let len = generator.len();
        if width == 0 || width > len {
            return Err(Error::WidthOutOfRange { width, len });
        }
        Ok(Self { generator, width })
    }

    pub fn rows(&self) -> usize {
        self.generator.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn generator(&self) -> &Signal<T> {
        &self.generator
    }

    pub fn column(&self, d: usize) -> Signal<T> {
        cyclic_shift(&self.generator, d as i64)
    }

    pub fn to_matrix(&self) -> DMatrix<T> {
        let n = self.rows();
        DMatrix::from_fn(n, self.width, |i, d| self.generator[(i + n - d) % n])
    }

    /// `circ(v)·h` for `h` of length `width`, in `O(n·width)`.
    pub fn mul(&self, h: &Signal<T>) -> Result<Signal<T>> {
        if h.len() != self.width {
            return Err(Error::LengthMismatch {
                expected: self.width,
                actual: h.len(),
            });
        }
        let n = self.rows();
        let mut out = Signal::zeros(n);
        for (d, &hd) in h.iter().enumerate() {
            if hd == T::zero() {
                continue;
            }
            for (i, o) in out.iter_mut().enumerate() {
                *o += self.generator[(i + n - d) % n] * hd;
            }
        }
        Ok(out)
    }
}

pub fn truncated_circulant<T: Scalar>(v: &Signal<T>, width: usize) -> Result<TruncatedCirculant<T>> {
    TruncatedCirculant::new(v.clone(), width)
}

/// Index of the largest-magnitude entry, taking the first entry within
/// [`ANCHOR_TIE_RTOL`] of the maximum.
pub fn anchor_index<T: Scalar>(v: &Signal<T>) -> Option<usize> {
    let max = v.iter().map(|x| x.modulus()).fold(0.0_f64, f64::max);
    if max == 0.0 {
        return None;
    }
    v.iter()
        .position(|x| x.modulus() >= max * (1.0 - ANCHOR_TIE_RTOL))
}

/// Leading singular pair of `x`, returned as `(b, h)` with `x ≈ b·hᵀ`.
///
/// `b` is scaled so that its anchor entry (see [`anchor_index`]) is exactly
/// `+1`; `h` absorbs the scale.
pub fn rank_one_factor<T: Scalar>(x: &DMatrix<T>) -> Result<(Signal<T>, Signal<T>)> {
    if x.is_empty() || x.iter().all(|v| *v == T::zero()) {
        return Err(Error::NoFactor);
    }
    // Leading eigenvector of the Gram matrix; nalgebra's SVD can return a
    // decomposition that does not recompose for exactly rank-deficient input.
    let eig = (x.adjoint() * x).symmetric_eigen();
    let (lead, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .ok_or(Error::NoFactor)?;
    let v = eig.eigenvectors.column(lead).into_owned();

    // x ≈ (x v) v^H = b h^T with b = x v, h = conj(v).
    let mut b = x * &v;
    let mut h = v.map(|c| c.conjugate());
    let anchor = anchor_index(&b).ok_or(Error::NoFactor)?;
    let scale = b[anchor];
    b /= scale;
    h *= scale;
    b[anchor] = T::one();
    Ok((b, h))
}

/// `log2(C(n, s)) / n`: bits per dimension carried by the choice of an
/// `s`-subset of `n` positions.
pub fn rate(n: usize, s: usize) -> Result<f64> {
    if s > n {
        return Err(Error::SparsityTooLarge { sparsity: s, len: n });
    }
    if n == 0 {
        return Ok(0.0);
    }
    Ok(log2_binomial(n, s) / n as f64)
}

pub(crate) fn log2_binomial(n: usize, s: usize) -> f64 {
    let k = s.min(n - s);
    (1..=k)
        .map(|i| ((n - k + i) as f64 / i as f64).log2())
        .sum()
}
