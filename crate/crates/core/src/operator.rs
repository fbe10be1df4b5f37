//! The lifted measurement operator `M` of the multi-user model.
//!
//! A lifted vector stacks one `E × N_d` block per user, vectorized by
//! columns, so the flat index of `(user, tap, entry)` is
//! `(user · N_d + tap) · E + entry`. Column `(p, d, e)` of `M` is column `e`
//! of the coding matrix `Q_p` cyclically shifted down by `d`, hence
//!
//! ```text
//! M z      = Σ_p Σ_d shift(Q_p z[p, d, ·], d)
//! (Mᴴ y)[p, d, ·] = Q_pᴴ shift(y, -d)
//! ```
//!
//! [`MeasurementOperator`] evaluates both products without materializing
//! `M`; [`DenseOperator`] holds the full matrix and serves as a test oracle
//! and for tiny instances.

use std::io::{Read, Write};
use std::mem::size_of;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hier::HierSupport;
use crate::scalar::Scalar;
use crate::seed;
use crate::signal::Signal;

/// Largest dense operator [`MeasurementOperator::build_dense`] will
/// allocate unless told otherwise.
pub const DEFAULT_DENSE_BUDGET: usize = 512 << 20;

/// Problem dimensions `(N, N_d, E, N_r)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    /// Block length `N`.
    #[serde(rename = "N")]
    pub n: usize,
    /// Channel delay spread `N_d`.
    #[serde(rename = "N_d")]
    pub taps: usize,
    /// Sparse message length `E`.
    #[serde(rename = "E")]
    pub code_len: usize,
    /// Number of users `N_r`.
    #[serde(rename = "N_r")]
    pub users: usize,
}

impl Dims {
    pub fn new(n: usize, taps: usize, code_len: usize, users: usize) -> Result<Self> {
        let dims = Self {
            n,
            taps,
            code_len,
            users,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.taps == 0 || self.code_len == 0 || self.users == 0 {
            return Err(Error::InvalidDims(format!("all dimensions must be positive: {self:?}")));
        }
        if self.taps > self.n {
            return Err(Error::InvalidDims(format!(
                "delay spread {} exceeds block length {}",
                self.taps, self.n
            )));
        }
        Ok(())
    }

    pub fn block_len(&self) -> usize {
        self.taps * self.code_len
    }

    pub fn lifted_len(&self) -> usize {
        self.block_len() * self.users
    }

    #[inline]
    pub fn index(&self, user: usize, tap: usize, entry: usize) -> usize {
        (user * self.taps + tap) * self.code_len + entry
    }

    #[inline]
    pub fn locate(&self, flat: usize) -> (usize, usize, usize) {
        let entry = flat % self.code_len;
        let rest = flat / self.code_len;
        (rest / self.taps, rest % self.taps, entry)
    }

    fn same_lifted_shape(&self, other: &Dims) -> bool {
        self.taps == other.taps && self.code_len == other.code_len && self.users == other.users
    }
}

/// A vector in the domain of `M` together with its addressing.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftedVector<T: Scalar> {
    dims: Dims,
    data: DVector<T>,
}

impl<T: Scalar> LiftedVector<T> {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: DVector::zeros(dims.lifted_len()),
        }
    }

    pub fn from_vec(dims: Dims, data: DVector<T>) -> Result<Self> {
        if data.len() != dims.lifted_len() {
            return Err(Error::LengthMismatch {
                expected: dims.lifted_len(),
                actual: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    /// Lift per-user rank-one factors: block `p` becomes `vec(b_p h_pᵀ)`.
    pub fn from_factors<'a, I>(dims: Dims, factors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, &'a Signal<T>, &'a Signal<T>)>,
    {
        let mut z = Self::zeros(dims);
        for (user, b, h) in factors {
            if user >= dims.users {
                return Err(Error::InvalidSupport(format!("user {user} out of range")));
            }
            if b.len() != dims.code_len || h.len() != dims.taps {
                return Err(Error::LengthMismatch {
                    expected: dims.code_len,
                    actual: b.len(),
                });
            }
            for (d, &hd) in h.iter().enumerate() {
                for (e, &be) in b.iter().enumerate() {
                    z.data[dims.index(user, d, e)] = be * hd;
                }
            }
        }
        Ok(z)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, user: usize, tap: usize, entry: usize) -> T {
        self.data[self.dims.index(user, tap, entry)]
    }

    pub fn set(&mut self, user: usize, tap: usize, entry: usize, value: T) {
        let i = self.dims.index(user, tap, entry);
        self.data[i] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        self.data.as_slice()
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        self.data.as_mut_slice()
    }

    pub fn data(&self) -> &DVector<T> {
        &self.data
    }

    pub fn into_inner(self) -> DVector<T> {
        self.data
    }

    pub fn user_block(&self, user: usize) -> &[T] {
        let len = self.dims.block_len();
        &self.data.as_slice()[user * len..(user + 1) * len]
    }

    pub fn tap_block(&self, user: usize, tap: usize) -> &[T] {
        let start = self.dims.index(user, tap, 0);
        &self.data.as_slice()[start..start + self.dims.code_len]
    }

    /// The `E × N_d` matrix `X_p` whose column-major vectorization is the
    /// block of `user`.
    pub fn user_matrix(&self, user: usize) -> DMatrix<T> {
        DMatrix::from_column_slice(self.dims.code_len, self.dims.taps, self.user_block(user))
    }

    pub fn norm(&self) -> f64 {
        self.data.norm()
    }

    pub fn nonzeros(&self) -> impl Iterator<Item = (usize, T)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != T::zero())
            .map(|(i, v)| (i, *v))
    }
}

/// Per-user coding matrix `Q_p ∈ F^{N×E}`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodingMatrix<T: Scalar> {
    pub user: usize,
    pub q: DMatrix<T>,
}

impl<T: Scalar> CodingMatrix<T> {
    /// I.i.d. standard normal entries from the user's codebook stream of
    /// `seed`, filled row-major.
    pub fn gaussian(n: usize, code_len: usize, user: usize, seed: u64) -> Self {
        let mut rng = seed::codebook_rng(seed, user);
        let q = DMatrix::from_row_iterator(
            n,
            code_len,
            (0..n * code_len).map(|_| T::standard_normal(&mut rng)),
        );
        Self { user, q }
    }

    /// `x_p = Q_p b_p`.
    pub fn encode(&self, b: &Signal<T>) -> Signal<T> {
        &self.q * b
    }
}

/// Common interface of the matrix-free and dense representations of `M`.
pub trait LinearMeasurement<T: Scalar>: Send + Sync {
    fn backend(&self) -> &'static str;

    fn dims(&self) -> Dims;

    fn apply(&self, z: &LiftedVector<T>) -> Result<Signal<T>>;

    fn adjoint(&self, y: &Signal<T>) -> Result<LiftedVector<T>>;

    /// Column `(user, tap, entry)` of `M`.
    fn column(&self, user: usize, tap: usize, entry: usize) -> Signal<T>;

    /// Mean squared Euclidean norm of the columns of `M`.
    fn mean_column_norm_sq(&self) -> f64;

    /// The columns of `M` on `support`, in canonical support order.
    fn extract_columns(&self, support: &HierSupport) -> Result<DMatrix<T>> {
        let dims = self.dims();
        support.check_dims(&dims)?;
        let mut out = DMatrix::zeros(dims.n, support.len());
        for (k, idx) in support.iter().enumerate() {
            out.set_column(k, &self.column(idx.user, idx.tap, idx.entry));
        }
        Ok(out)
    }
}

fn check_lifted<T: Scalar>(dims: &Dims, z: &LiftedVector<T>) -> Result<()> {
    if !dims.same_lifted_shape(&z.dims) || z.len() != dims.lifted_len() {
        return Err(Error::LengthMismatch {
            expected: dims.lifted_len(),
            actual: z.len(),
        });
    }
    Ok(())
}

fn check_signal<T: Scalar>(dims: &Dims, y: &Signal<T>) -> Result<()> {
    if y.len() != dims.n {
        return Err(Error::LengthMismatch {
            expected: dims.n,
            actual: y.len(),
        });
    }
    Ok(())
}

/// Matrix-free `M`, built from the per-user coding matrices.
#[derive(Clone, Debug)]
pub struct MeasurementOperator<T: Scalar> {
    dims: Dims,
    codebooks: Vec<CodingMatrix<T>>,
    // Q_pᴴ, kept so the adjoint is one matrix product per user.
    adjoints: Vec<DMatrix<T>>,
}

impl<T: Scalar> MeasurementOperator<T> {
    pub fn new(taps: usize, codebooks: Vec<DMatrix<T>>) -> Result<Self> {
        let first = codebooks
            .first()
            .ok_or_else(|| Error::InvalidDims("at least one user is required".into()))?;
        let dims = Dims::new(first.nrows(), taps, first.ncols(), codebooks.len())?;
        if let Some(bad) = codebooks
            .iter()
            .position(|q| q.nrows() != dims.n || q.ncols() != dims.code_len)
        {
            return Err(Error::InvalidDims(format!(
                "codebook {bad} is {}x{}, expected {}x{}",
                codebooks[bad].nrows(),
                codebooks[bad].ncols(),
                dims.n,
                dims.code_len
            )));
        }
        let adjoints = codebooks.iter().map(|q| q.adjoint()).collect();
        let codebooks = codebooks
            .into_iter()
            .enumerate()
            .map(|(user, q)| CodingMatrix { user, q })
            .collect();
        Ok(Self {
            dims,
            codebooks,
            adjoints,
        })
    }

    /// Gaussian codebooks reproducible from `seed` (see [`CodingMatrix::gaussian`]).
    pub fn gaussian(dims: Dims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let qs = (0..dims.users)
            .map(|p| CodingMatrix::gaussian(dims.n, dims.code_len, p, seed).q)
            .collect();
        Self::new(dims.taps, qs)
    }

    pub fn codebook(&self, user: usize) -> &CodingMatrix<T> {
        &self.codebooks[user]
    }

    pub fn codebooks(&self) -> &[CodingMatrix<T>] {
        &self.codebooks
    }

    pub fn dense_bytes(&self) -> usize {
        self.dims.n * self.dims.lifted_len() * size_of::<T>()
    }

    /// Materialize `M`, refusing when it would exceed `budget` bytes.
    pub fn build_dense(&self, budget: usize) -> Result<DMatrix<T>> {
        let required = self.dense_bytes();
        if required > budget {
            return Err(Error::DenseBudgetExceeded { required, budget });
        }
        let dims = self.dims;
        let mut m = DMatrix::zeros(dims.n, dims.lifted_len());
        for p in 0..dims.users {
            for d in 0..dims.taps {
                for e in 0..dims.code_len {
                    m.set_column(dims.index(p, d, e), &self.column(p, d, e));
                }
            }
        }
        Ok(m)
    }

    /// Dump the coding matrices: an 8-byte magic (`HIHTPQR\0` for real,
    /// `HIHTPQC\0` for complex), then `N`, `E`, `N_r` as little-endian
    /// `u64`, then each `Q_p` row-major as little-endian `f64` (real and
    /// imaginary parts interleaved for complex).
    pub fn write_codebooks<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(codebook_magic::<T>())?;
        for v in [self.dims.n, self.dims.code_len, self.dims.users] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for cb in &self.codebooks {
            for i in 0..self.dims.n {
                for e in 0..self.dims.code_len {
                    let parts = cb.q[(i, e)].components();
                    for part in &parts[..T::COMPONENTS] {
                        w.write_all(&part.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_codebooks<R: Read>(mut r: R, taps: usize) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != codebook_magic::<T>() {
            return Err(Error::Codebook(format!(
                "bad magic {:?} for {} scalars",
                String::from_utf8_lossy(&magic),
                T::NAME
            )));
        }
        let mut header = [0usize; 3];
        for h in &mut header {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            *h = usize::try_from(u64::from_le_bytes(buf))
                .map_err(|_| Error::Codebook("dimension overflows usize".into()))?;
        }
        let [n, code_len, users] = header;
        let mut qs = Vec::with_capacity(users);
        let mut buf = [0u8; 8];
        for _ in 0..users {
            let mut entries = Vec::with_capacity(n * code_len);
            for _ in 0..n * code_len {
                let mut parts = [0.0; 2];
                for part in &mut parts[..T::COMPONENTS] {
                    r.read_exact(&mut buf)?;
                    *part = f64::from_le_bytes(buf);
                }
                entries.push(T::from_parts(parts[0], parts[1]));
            }
            qs.push(DMatrix::from_row_slice(n, code_len, &entries));
        }
        Self::new(taps, qs)
    }
}

fn codebook_magic<T: Scalar>() -> &'static [u8; 8] {
    if T::COMPONENTS == 1 {
        b"HIHTPQR\0"
    } else {
        b"HIHTPQC\0"
    }
}

impl<T: Scalar> LinearMeasurement<T> for MeasurementOperator<T> {
    fn backend(&self) -> &'static str {
        "matrix-free"
    }

    fn dims(&self) -> Dims {
        self.dims
    }

    fn apply(&self, z: &LiftedVector<T>) -> Result<Signal<T>> {
        check_lifted(&self.dims, z)?;
        let Dims {
            n, taps, code_len, ..
        } = self.dims;
        let mut y = Signal::zeros(n);
        let mut w = Signal::zeros(n);
        for (p, cb) in self.codebooks.iter().enumerate() {
            for d in 0..taps {
                let block = z.tap_block(p, d);
                if block.iter().all(|v| *v == T::zero()) {
                    continue;
                }
                w.fill(T::zero());
                for (e, &ze) in block.iter().enumerate().take(code_len) {
                    if ze != T::zero() {
                        w.axpy(ze, &cb.q.column(e), T::one());
                    }
                }
                for (i, &wi) in w.iter().enumerate() {
                    y[(i + d) % n] += wi;
                }
            }
        }
        Ok(y)
    }

    fn adjoint(&self, y: &Signal<T>) -> Result<LiftedVector<T>> {
        check_signal(&self.dims, y)?;
        let Dims { n, taps, .. } = self.dims;
        // Column d holds shift(y, -d).
        let shifted = DMatrix::from_fn(n, taps, |i, d| y[(i + d) % n]);
        let mut out = LiftedVector::zeros(self.dims);
        let block = self.dims.block_len();
        for (p, qh) in self.adjoints.iter().enumerate() {
            let corr = qh * &shifted;
            out.as_mut_slice()[p * block..(p + 1) * block].copy_from_slice(corr.as_slice());
        }
        Ok(out)
    }

    fn mean_column_norm_sq(&self) -> f64 {
        // Shifts preserve norms, so every tap repeats the codebook columns.
        let total: f64 = self.codebooks.iter().map(|c| c.q.norm_squared()).sum();
        total / (self.dims.code_len * self.dims.users) as f64
    }

    fn column(&self, user: usize, tap: usize, entry: usize) -> Signal<T> {
        let n = self.dims.n;
        let q = &self.codebooks[user].q;
        Signal::from_fn(n, |i, _| q[((i + n - tap % n) % n, entry)])
    }
}

/// `M` held as an explicit `N × (N_d·E·N_r)` matrix.
#[derive(Clone, Debug)]
pub struct DenseOperator<T: Scalar> {
    dims: Dims,
    matrix: DMatrix<T>,
}

impl<T: Scalar> DenseOperator<T> {
    pub fn from_operator(op: &MeasurementOperator<T>, budget: usize) -> Result<Self> {
        Ok(Self {
            dims: op.dims,
            matrix: op.build_dense(budget)?,
        })
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }
}

impl<T: Scalar> LinearMeasurement<T> for DenseOperator<T> {
    fn backend(&self) -> &'static str {
        "dense"
    }

    fn dims(&self) -> Dims {
        self.dims
    }

    fn apply(&self, z: &LiftedVector<T>) -> Result<Signal<T>> {
        check_lifted(&self.dims, z)?;
        Ok(&self.matrix * z.data())
    }

    fn adjoint(&self, y: &Signal<T>) -> Result<LiftedVector<T>> {
        check_signal(&self.dims, y)?;
        LiftedVector::from_vec(self.dims, self.matrix.ad_mul(y))
    }

    fn mean_column_norm_sq(&self) -> f64 {
        self.matrix.norm_squared() / self.matrix.ncols() as f64
    }

    fn column(&self, user: usize, tap: usize, entry: usize) -> Signal<T> {
        self.matrix
            .column(self.dims.index(user, tap, entry))
            .into_owned()
    }
}

/// Names accepted by [`operator_backend`].
pub const OPERATOR_BACKENDS: &[&str] = &["matrix-free", "dense"];

/// Wrap `op` in the representation registered under `name`.
pub fn operator_backend<T: Scalar>(
    name: &str,
    op: MeasurementOperator<T>,
    dense_budget: usize,
) -> Result<Box<dyn LinearMeasurement<T>>> {
    match name {
        "matrix-free" => Ok(Box::new(op)),
        "dense" => Ok(Box::new(DenseOperator::from_operator(&op, dense_budget)?)),
        other => Err(Error::UnknownStrategy {
            kind: "operator backend",
            name: other.to_string(),
            available: OPERATOR_BACKENDS.join(", "),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hier::SupportIndex;
    use crate::scalar::{inner, C64};
    use crate::signal::{circular_convolve, cyclic_shift, pad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_lifted<T: Scalar>(dims: Dims, rng: &mut ChaCha8Rng) -> LiftedVector<T> {
        LiftedVector::from_vec(
            dims,
            DVector::from_fn(dims.lifted_len(), |_, _| T::standard_normal(rng)),
        )
        .unwrap()
    }

    fn rel(a: &DVector<impl Scalar>, b: &DVector<impl Scalar>) -> f64 {
        let diff: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x.components()[0] - y.components()[0]).powi(2) + (x.components()[1] - y.components()[1]).powi(2))
            .sum::<f64>()
            .sqrt();
        diff / b.norm().max(1e-300)
    }

    #[test]
    fn index_layout_is_user_tap_entry() {
        let dims = Dims::new(16, 3, 4, 2).unwrap();
        assert_eq!(dims.index(0, 0, 1), 1);
        assert_eq!(dims.index(0, 1, 0), 4);
        assert_eq!(dims.index(1, 0, 0), 12);
        for flat in 0..dims.lifted_len() {
            let (p, d, e) = dims.locate(flat);
            assert_eq!(dims.index(p, d, e), flat);
        }
        assert!(Dims::new(4, 5, 1, 1).is_err());
        assert!(Dims::new(4, 0, 1, 1).is_err());
    }

    #[test]
    fn zero_in_zero_out() {
        let op = MeasurementOperator::<f64>::gaussian(Dims::new(16, 4, 3, 2).unwrap(), 1).unwrap();
        assert_eq!(op.apply(&LiftedVector::zeros(op.dims())).unwrap(), Signal::zeros(16));
        assert!(op.adjoint(&Signal::zeros(16)).unwrap().nonzeros().next().is_none());
    }

    #[test]
    fn single_user_rank_one_is_convolution() {
        let dims = Dims::new(32, 5, 6, 1).unwrap();
        let op = MeasurementOperator::<f64>::gaussian(dims, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = DVector::from_fn(6, |_, _| f64::standard_normal(&mut rng));
        let h = DVector::from_fn(5, |_, _| f64::standard_normal(&mut rng));
        let z = LiftedVector::from_factors(dims, [(0, &b, &h)]).unwrap();
        let x = op.codebook(0).encode(&b);
        let expected = circular_convolve(&x, &pad(&h, 32).unwrap()).unwrap();
        assert!(rel(&op.apply(&z).unwrap(), &expected) <= 1e-12);
    }

    #[test]
    fn dense_matches_matrix_free_complex() {
        let dims = Dims::new(24, 4, 5, 3).unwrap();
        let op = MeasurementOperator::<C64>::gaussian(dims, 4).unwrap();
        let dense = DenseOperator::from_operator(&op, DEFAULT_DENSE_BUDGET).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let z = random_lifted::<C64>(dims, &mut rng);
            let y = DVector::from_fn(24, |_, _| C64::standard_normal(&mut rng));
            assert!(rel(&op.apply(&z).unwrap(), &dense.apply(&z).unwrap()) <= 1e-12);
            assert!(rel(op.adjoint(&y).unwrap().data(), dense.adjoint(&y).unwrap().data()) <= 1e-12);
            let lhs = inner(op.apply(&z).unwrap().as_slice(), y.as_slice());
            let rhs = inner(z.as_slice(), op.adjoint(&y).unwrap().as_slice());
            assert!((lhs - rhs).norm() <= 1e-10 * lhs.norm().max(1.0));
        }
    }

    #[test]
    fn dense_degenerate_dims_reduce_to_codebook() {
        let op = MeasurementOperator::<f64>::gaussian(Dims::new(10, 1, 4, 1).unwrap(), 3).unwrap();
        let m = op.build_dense(DEFAULT_DENSE_BUDGET).unwrap();
        assert_eq!(m, op.codebook(0).q);
    }

    #[test]
    fn dense_columns_are_shifted_codebook_columns() {
        let dims = Dims::new(12, 3, 4, 2).unwrap();
        let op = MeasurementOperator::<f64>::gaussian(dims, 8).unwrap();
        let m = op.build_dense(DEFAULT_DENSE_BUDGET).unwrap();
        for p in 0..2 {
            for d in 0..3 {
                for e in 0..4 {
                    let q_col = op.codebook(p).q.column(e).into_owned();
                    assert_eq!(m.column(dims.index(p, d, e)).into_owned(), cyclic_shift(&q_col, d as i64));
                }
            }
        }
    }

    #[test]
    fn dense_budget_is_enforced() {
        let dims = Dims::new(1024, 128, 128, 10).unwrap();
        // Only the dimensions matter for the refusal; codebooks stay small.
        let small = MeasurementOperator::<f64>::gaussian(Dims::new(16, 2, 2, 1).unwrap(), 0).unwrap();
        assert!(matches!(small.build_dense(10), Err(Error::DenseBudgetExceeded { .. })));
        assert_eq!(dims.n * dims.lifted_len() * 8, 1_342_177_280);
        assert!(dims.n * dims.lifted_len() * 8 > DEFAULT_DENSE_BUDGET);
    }

    #[test]
    fn extract_columns_cases() {
        let dims = Dims::new(12, 3, 4, 2).unwrap();
        let op = MeasurementOperator::<f64>::gaussian(dims, 8).unwrap();
        let m = op.build_dense(DEFAULT_DENSE_BUDGET).unwrap();

        let empty = op.extract_columns(&HierSupport::default()).unwrap();
        assert_eq!(empty.shape(), (12, 0));

        let one = HierSupport::from_indices([SupportIndex::new(1, 2, 3)]);
        let col = op.extract_columns(&one).unwrap();
        let shifted = cyclic_shift(&op.codebook(1).q.column(3).into_owned(), 2);
        assert_eq!(col.column(0).into_owned(), shifted);

        let s = HierSupport::from_indices([
            SupportIndex::new(1, 0, 2),
            SupportIndex::new(0, 2, 1),
            SupportIndex::new(0, 0, 0),
        ]);
        let sub = op.extract_columns(&s).unwrap();
        for (k, idx) in s.iter().enumerate() {
            assert_eq!(sub.column(k), m.column(dims.index(idx.user, idx.tap, idx.entry)));
        }

        let bad = HierSupport::from_indices([SupportIndex::new(2, 0, 0)]);
        assert!(matches!(op.extract_columns(&bad), Err(Error::InvalidSupport(_))));
    }

    #[test]
    fn shift_equivariance() {
        let dims = Dims::new(20, 5, 3, 2).unwrap();
        let op = MeasurementOperator::<f64>::gaussian(dims, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vals: Vec<f64> = (0..3).map(|_| f64::standard_normal(&mut rng)).collect();
        let mut at0 = LiftedVector::zeros(dims);
        for (e, v) in vals.iter().enumerate() {
            at0.set(1, 0, e, *v);
        }
        let base = op.apply(&at0).unwrap();
        for d in 1..5 {
            let mut at_d = LiftedVector::zeros(dims);
            for (e, v) in vals.iter().enumerate() {
                at_d.set(1, d, e, *v);
            }
            assert!(rel(&op.apply(&at_d).unwrap(), &cyclic_shift(&base, d as i64)) <= 1e-14);
        }
    }

    #[test]
    fn linearity() {
        let dims = Dims::new(32, 4, 6, 3).unwrap();
        let op = MeasurementOperator::<C64>::gaussian(dims, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z1 = random_lifted::<C64>(dims, &mut rng);
        let z2 = random_lifted::<C64>(dims, &mut rng);
        let (a, b) = (C64::new(0.3, -1.2), C64::new(-2.0, 0.5));
        let combo = LiftedVector::from_vec(dims, z1.data() * a + z2.data() * b).unwrap();
        let lhs = op.apply(&combo).unwrap();
        let rhs = op.apply(&z1).unwrap() * a + op.apply(&z2).unwrap() * b;
        assert!(rel(&lhs, &rhs) <= 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let op = MeasurementOperator::<f64>::gaussian(Dims::new(16, 2, 3, 2).unwrap(), 0).unwrap();
        assert!(op.adjoint(&Signal::zeros(15)).is_err());
        let other = LiftedVector::<f64>::zeros(Dims::new(16, 3, 3, 2).unwrap());
        assert!(op.apply(&other).is_err());
        assert!(MeasurementOperator::new(2, vec![DMatrix::<f64>::zeros(8, 3), DMatrix::zeros(8, 4)]).is_err());
    }

    #[test]
    fn codebook_dump_round_trip() {
        let dims = Dims::new(9, 2, 3, 2).unwrap();
        let op = MeasurementOperator::<C64>::gaussian(dims, 77).unwrap();
        let mut buf = Vec::new();
        op.write_codebooks(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"HIHTPQC\0");
        assert_eq!(buf.len(), 8 + 24 + 2 * 9 * 3 * 16);
        let back = MeasurementOperator::<C64>::read_codebooks(buf.as_slice(), 2).unwrap();
        assert_eq!(back.codebooks(), op.codebooks());
        assert!(MeasurementOperator::<f64>::read_codebooks(buf.as_slice(), 2).is_err());

        let real = MeasurementOperator::<f64>::gaussian(dims, 77).unwrap();
        let mut buf = Vec::new();
        real.write_codebooks(&mut buf).unwrap();
        // Row-major: the second stored value is Q_0[0, 1].
        let second = f64::from_le_bytes(buf[40..48].try_into().unwrap());
        assert_eq!(second, real.codebook(0).q[(0, 1)]);
    }

    #[test]
    fn codebooks_reproducible_from_seed() {
        let dims = Dims::new(8, 2, 3, 3).unwrap();
        let a = MeasurementOperator::<f64>::gaussian(dims, 5).unwrap();
        let b = MeasurementOperator::<f64>::gaussian(dims, 5).unwrap();
        assert_eq!(a.codebooks(), b.codebooks());
        assert_ne!(a.codebook(0).q, a.codebook(1).q);
    }

    #[test]
    fn backend_registry() {
        let dims = Dims::new(8, 2, 2, 2).unwrap();
        let op = MeasurementOperator::<f64>::gaussian(dims, 5).unwrap();
        assert_eq!(operator_backend("dense", op.clone(), DEFAULT_DENSE_BUDGET).unwrap().backend(), "dense");
        assert_eq!(operator_backend("matrix-free", op.clone(), 0).unwrap().backend(), "matrix-free");
        assert!(matches!(
            operator_backend("sparse", op, 0),
            Err(Error::UnknownStrategy { .. })
        ));
    }
}
