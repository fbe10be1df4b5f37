//! Hierarchical `(s, σ, μ)` sparsity: level-wise hard thresholding,
//! projection and support bookkeeping.
//!
//! The three levels follow the lifted layout of [`crate::operator`]: a user
//! block holds `N_d` tap blocks of `E` entries. An admissible support has at
//! most `μ` active users, at most `σ` active taps per user and at most `s`
//! entries per active tap.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::{Dims, LiftedVector};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SupportIndex {
    pub user: usize,
    pub tap: usize,
    pub entry: usize,
}

impl SupportIndex {
    pub fn new(user: usize, tap: usize, entry: usize) -> Self {
        Self { user, tap, entry }
    }
}

/// A set of `(user, tap, entry)` triples, kept in canonical ascending order
/// so that equality does not depend on insertion order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct HierSupport {
    set: BTreeSet<SupportIndex>,
}

impl HierSupport {
    pub fn from_indices<I: IntoIterator<Item = SupportIndex>>(indices: I) -> Self {
        Self {
            set: indices.into_iter().collect(),
        }
    }

    /// Every index of the lifted domain.
    pub fn full(dims: &Dims) -> Self {
        Self::from_indices((0..dims.lifted_len()).map(|i| {
            let (user, tap, entry) = dims.locate(i);
            SupportIndex::new(user, tap, entry)
        }))
    }

    /// Indices of the nonzero entries of `z`.
    pub fn of_nonzeros<T: Scalar>(z: &LiftedVector<T>) -> Self {
        let dims = z.dims();
        Self::from_indices(z.nonzeros().map(|(i, _)| {
            let (user, tap, entry) = dims.locate(i);
            SupportIndex::new(user, tap, entry)
        }))
    }

    pub fn insert(&mut self, idx: SupportIndex) -> bool {
        self.set.insert(idx)
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn contains(&self, idx: &SupportIndex) -> bool {
        self.set.contains(idx)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SupportIndex> + '_ {
        self.set.iter()
    }

    /// The active user set `K`.
    pub fn active_users(&self) -> Vec<usize> {
        let mut users: Vec<usize> = self.set.iter().map(|i| i.user).collect();
        users.dedup();
        users
    }

    /// The tap set `J_k` of `user`.
    pub fn taps(&self, user: usize) -> Vec<usize> {
        let mut taps: Vec<usize> = self.user_range(user).map(|i| i.tap).collect();
        taps.dedup();
        taps
    }

    /// The entry set `I_j^k` of `(user, tap)`.
    pub fn entries(&self, user: usize, tap: usize) -> Vec<usize> {
        self.set
            .range(SupportIndex::new(user, tap, 0)..=SupportIndex::new(user, tap, usize::MAX))
            .map(|i| i.entry)
            .collect()
    }

    /// Restriction to one user.
    pub fn user_support(&self, user: usize) -> HierSupport {
        Self::from_indices(self.user_range(user).copied())
    }

    /// Flat lifted indices in canonical order.
    pub fn flat_indices(&self, dims: &Dims) -> Vec<usize> {
        self.set
            .iter()
            .map(|i| dims.index(i.user, i.tap, i.entry))
            .collect()
    }

    pub fn check_dims(&self, dims: &Dims) -> Result<()> {
        match self
            .set
            .iter()
            .find(|i| i.user >= dims.users || i.tap >= dims.taps || i.entry >= dims.code_len)
        {
            Some(bad) => Err(Error::InvalidSupport(format!(
                "{bad:?} outside (N_r, N_d, E) = ({}, {}, {})",
                dims.users, dims.taps, dims.code_len
            ))),
            None => Ok(()),
        }
    }

    pub fn is_admissible(&self, profile: &SparsityProfile) -> bool {
        if self.check_dims(&profile.dims).is_err() {
            return false;
        }
        let users = self.active_users();
        users.len() <= profile.mu
            && users.iter().all(|&u| {
                let taps = self.taps(u);
                taps.len() <= profile.sigma
                    && taps.iter().all(|&t| self.entries(u, t).len() <= profile.s)
            })
    }

    /// `(user, tap)` activity pattern, ignoring entries.
    pub fn tap_pattern(&self) -> BTreeSet<(usize, usize)> {
        self.set.iter().map(|i| (i.user, i.tap)).collect()
    }

    fn user_range(&self, user: usize) -> impl Iterator<Item = &SupportIndex> + '_ {
        self.set
            .range(SupportIndex::new(user, 0, 0)..=SupportIndex::new(user, usize::MAX, usize::MAX))
    }
}

impl fmt::Display for HierSupport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, i) in self.set.iter().enumerate() {
            if k > 0 {
                write!(f, ", ")?;
            }
            write!(f, "({},{},{})", i.user, i.tap, i.entry)?;
        }
        write!(f, "}}")
    }
}

/// Sparsity levels `(s, σ, μ)` for a lifted domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityProfile {
    /// Entries per active tap block.
    pub s: usize,
    /// Active taps per active user.
    pub sigma: usize,
    /// Active users.
    pub mu: usize,
    pub dims: Dims,
}

impl SparsityProfile {
    pub fn new(s: usize, sigma: usize, mu: usize, dims: Dims) -> Result<Self> {
        let check = |name: &str, v: usize, max: usize| {
            if v == 0 || v > max {
                Err(Error::InvalidProfile(format!("{name} = {v} outside 1..={max}")))
            } else {
                Ok(())
            }
        };
        check("s", s, dims.code_len)?;
        check("sigma", sigma, dims.taps)?;
        check("mu", mu, dims.users)?;
        Ok(Self { s, sigma, mu, dims })
    }

    /// Size of a saturated support, `μ·σ·s`.
    pub fn support_size(&self) -> usize {
        self.mu * self.sigma * self.s
    }
}

/// How a selected tap block (and, summed, a user) is scored when ranking
/// blocks against each other.
pub trait BlockScore: Send + Sync {
    fn name(&self) -> &'static str;

    /// Contribution of one selected entry of magnitude `magnitude`.
    fn weight(&self, magnitude: f64) -> f64;
}

/// Sum of magnitudes of the selected entries.
#[derive(Clone, Copy, Debug, Default)]
pub struct AbsSum;

impl BlockScore for AbsSum {
    fn name(&self) -> &'static str {
        "abs-sum"
    }

    fn weight(&self, magnitude: f64) -> f64 {
        magnitude
    }
}

/// Captured squared mass. With this score the nested selection is the exact
/// Euclidean projection onto hierarchically sparse vectors.
#[derive(Clone, Copy, Debug, Default)]
pub struct Energy;

impl BlockScore for Energy {
    fn name(&self) -> &'static str {
        "energy"
    }

    fn weight(&self, magnitude: f64) -> f64 {
        magnitude * magnitude
    }
}

static BLOCK_SCORES: &[&dyn BlockScore] = &[&Energy, &AbsSum];

/// Look up a registered block score by name.
pub fn block_score(name: &str) -> Result<&'static dyn BlockScore> {
    BLOCK_SCORES
        .iter()
        .copied()
        .find(|s| s.name() == name)
        .ok_or_else(|| Error::UnknownStrategy {
            kind: "block score",
            name: name.to_string(),
            available: block_score_names().join(", "),
        })
}

pub fn block_score_names() -> Vec<&'static str> {
    BLOCK_SCORES.iter().map(|s| s.name()).collect()
}

pub fn default_block_score() -> &'static dyn BlockScore {
    &Energy
}

/// Positions of the `k` largest scores, ties to the smaller index, returned
/// in ascending order.
fn top_by_score(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Hard thresholding: indices of the `s` largest magnitudes of `g`
/// (ascending), ties broken toward the smallest index.
pub fn top_s<T: Scalar>(g: &[T], s: usize) -> Result<Vec<usize>> {
    if s > g.len() {
        return Err(Error::SparsityTooLarge {
            sparsity: s,
            len: g.len(),
        });
    }
    let mags: Vec<f64> = g.iter().map(|v| v.modulus()).collect();
    Ok(top_by_score(&mags, s))
}

/// Nested thresholding: best `s` entries per tap, best `σ` taps per user,
/// best `μ` users, with blocks ranked by `score`.
pub fn hier_threshold_with<T: Scalar>(
    g: &LiftedVector<T>,
    profile: &SparsityProfile,
    score: &dyn BlockScore,
) -> Result<HierSupport> {
    let dims = g.dims();
    let p = profile.dims;
    if dims.taps != p.taps || dims.code_len != p.code_len || dims.users != p.users {
        return Err(Error::LengthMismatch {
            expected: p.lifted_len(),
            actual: g.len(),
        });
    }

    let mut mags = vec![0.0; dims.code_len];
    let mut tap_scores = vec![0.0; dims.taps];
    let mut user_scores = vec![0.0; dims.users];
    let mut chosen: Vec<Vec<(usize, Vec<usize>)>> = Vec::with_capacity(dims.users);

    for (user, user_score) in user_scores.iter_mut().enumerate() {
        let mut entries = Vec::with_capacity(dims.taps);
        for (tap, tap_score) in tap_scores.iter_mut().enumerate() {
            for (m, v) in mags.iter_mut().zip(g.tap_block(user, tap)) {
                *m = v.modulus();
            }
            let picked = top_by_score(&mags, profile.s);
            *tap_score = picked.iter().map(|&i| score.weight(mags[i])).sum();
            entries.push(picked);
        }
        let taps = top_by_score(&tap_scores, profile.sigma);
        *user_score = taps.iter().map(|&t| tap_scores[t]).sum();
        chosen.push(
            taps.into_iter()
                .map(|t| (t, std::mem::take(&mut entries[t])))
                .collect(),
        );
    }

    let users = top_by_score(&user_scores, profile.mu);
    let mut support = HierSupport::default();
    for user in users {
        for (tap, entries) in &chosen[user] {
            for &entry in entries {
                support.insert(SupportIndex::new(user, *tap, entry));
            }
        }
    }
    Ok(support)
}

/// [`hier_threshold_with`] using the default ([`Energy`]) block score.
pub fn hier_threshold<T: Scalar>(g: &LiftedVector<T>, profile: &SparsityProfile) -> Result<HierSupport> {
    hier_threshold_with(g, profile, default_block_score())
}

/// Zero every entry of `g` outside `support`.
pub fn project<T: Scalar>(g: &LiftedVector<T>, support: &HierSupport) -> LiftedVector<T> {
    let dims = g.dims();
    let mut out = LiftedVector::zeros(dims);
    for i in support.flat_indices(&dims) {
        if i < g.len() {
            out.as_mut_slice()[i] = g.as_slice()[i];
        }
    }
    out
}

pub fn support_equal(a: &HierSupport, b: &HierSupport) -> bool {
    a == b
}

/// Squared mass of `g` captured by `support`.
pub fn captured_mass<T: Scalar>(g: &LiftedVector<T>, support: &HierSupport) -> f64 {
    let dims = g.dims();
    support
        .flat_indices(&dims)
        .into_iter()
        .map(|i| g.as_slice()[i].modulus_squared())
        .sum()
}
