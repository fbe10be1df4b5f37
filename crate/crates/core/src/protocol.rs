//! Instance generation and the two-phase secure access simulation.
//!
//! Phase 1: every active user ("Bob") measures its downlink channel, which
//! by reciprocity is the conjugate of the uplink channel up to a small
//! perturbation, quantizes it into a key and encrypts its message.
//! Phase 2: all active users transmit their encoded ciphertexts without
//! coordination; the base station ("Alice") runs HiHTP on the superposition,
//! recovers every user's channel and ciphertext, derives the same keys from
//! the recovered channels and decrypts.

use std::time::Instant;

use log::debug;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hier::{block_score, HierSupport, SparsityProfile};
use crate::operator::{operator_backend, Dims, LiftedVector, MeasurementOperator, DEFAULT_DENSE_BUDGET};
use crate::scalar::{Scalar, C64};
use crate::seed::{self, SimRng};
use crate::signal::{Signal, TruncatedCirculant};
use crate::solver::{evaluate_success, recover_factors, Hihtp, SolverConfig, StopReason};

pub type Bits = Vec<bool>;

/// Seed tag for protocol trials.
pub const PROTOCOL_TAG: u64 = 0x5EC0_A11C;

/// A `σ`-sparse channel with uniformly placed standard normal taps.
pub fn draw_channel<T: Scalar, R: Rng + ?Sized>(taps: usize, sigma: usize, rng: &mut R) -> Result<Signal<T>> {
    if sigma == 0 || sigma > taps {
        return Err(Error::InvalidProfile(format!("sigma = {sigma} outside 1..={taps}")));
    }
    let mut h = Signal::zeros(taps);
    let mut positions = sample(rng, taps, sigma).into_vec();
    positions.sort_unstable();
    for d in positions {
        h[d] = T::standard_normal(rng);
    }
    Ok(h)
}

fn binomial(n: usize, k: usize) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is divisible by (i + 1) after the multiplication.
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// Bijection between message indices and `s`-sparse `±1` vectors of length
/// `E` whose first nonzero entry is `+1`.
///
/// `index = rank · 2^{s-1} + signs`, where `rank` is the colexicographic
/// rank of the support `{c_1 < … < c_s}` (`rank = Σ_i C(c_i, i)`) and bit
/// `j` of `signs` (least significant first) makes entry `c_{j+2}` negative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MessageCodec {
    code_len: usize,
    sparsity: usize,
    subsets: u128,
    space: u128,
}

impl MessageCodec {
    pub fn new(code_len: usize, sparsity: usize) -> Result<Self> {
        if sparsity == 0 || sparsity > code_len {
            return Err(Error::SparsityTooLarge {
                sparsity,
                len: code_len,
            });
        }
        let too_large = Error::MessageSpaceTooLarge {
            len: code_len,
            sparsity,
        };
        let subsets = binomial(code_len, sparsity).ok_or(Error::MessageSpaceTooLarge {
            len: code_len,
            sparsity,
        })?;
        if sparsity > 127 {
            return Err(too_large);
        }
        let space = subsets
            .checked_mul(1u128 << (sparsity - 1))
            .filter(|s| *s <= 1u128 << 127)
            .ok_or(too_large)?;
        Ok(Self {
            code_len,
            sparsity,
            subsets,
            space,
        })
    }

    pub fn code_len(&self) -> usize {
        self.code_len
    }

    pub fn sparsity(&self) -> usize {
        self.sparsity
    }

    /// `C(E, s) · 2^{s-1}`.
    pub fn space_size(&self) -> u128 {
        self.space
    }

    /// Largest `L` with `2^L ≤ space_size`: any `L`-bit string is a valid index.
    pub fn payload_bits(&self) -> usize {
        127 - self.space.leading_zeros() as usize
    }

    /// Bits needed to write any index.
    pub fn index_width(&self) -> usize {
        (128 - (self.space - 1).leading_zeros() as usize).max(1)
    }

    /// The signal carrying `index`.
    pub fn signal<T: Scalar>(&self, index: u128) -> Result<Signal<T>> {
        if index >= self.space {
            return Err(Error::MessageOutOfRange(index));
        }
        let sign_bits = self.sparsity - 1;
        let mut rank = index >> sign_bits;
        let signs = index & ((1u128 << sign_bits) - 1);

        let mut support = vec![0usize; self.sparsity];
        let mut upper = self.code_len;
        for i in (1..=self.sparsity).rev() {
            // Largest c < upper with C(c, i) <= rank.
            let mut c = upper - 1;
            loop {
                let bc = binomial(c, i).expect("bounded by C(E, s)");
                if bc <= rank {
                    rank -= bc;
                    break;
                }
                c -= 1;
            }
            support[i - 1] = c;
            upper = c;
        }

        let mut b = Signal::zeros(self.code_len);
        for (j, &c) in support.iter().enumerate() {
            let negative = j > 0 && (signs >> (j - 1)) & 1 == 1;
            b[c] = if negative { -T::one() } else { T::one() };
        }
        Ok(b)
    }

    /// Inverse of [`MessageCodec::signal`]; `None` if `b` is not a codeword.
    pub fn index<T: Scalar>(&self, b: &Signal<T>) -> Option<u128> {
        if b.len() != self.code_len {
            return None;
        }
        let mut rank = 0u128;
        let mut signs = 0u128;
        let mut count = 0usize;
        for (c, v) in b.iter().enumerate() {
            if *v == T::zero() {
                continue;
            }
            let sign = if *v == T::one() {
                false
            } else if *v == -T::one() {
                true
            } else {
                return None;
            };
            count += 1;
            if count > self.sparsity {
                return None;
            }
            if count == 1 && sign {
                return None;
            }
            if count > 1 && sign {
                signs |= 1 << (count - 2);
            }
            rank += binomial(c, count)?;
        }
        (count == self.sparsity).then(|| (rank << (self.sparsity - 1)) | signs)
    }
}

/// A uniformly random message index and the signal carrying it.
pub fn draw_message_and_signal<T: Scalar, R: Rng + ?Sized>(
    code_len: usize,
    sparsity: usize,
    rng: &mut R,
) -> Result<(u128, Signal<T>)> {
    let codec = MessageCodec::new(code_len, sparsity)?;
    let index = rng.random_range(0..codec.space_size());
    Ok((index, codec.signal(index)?))
}

/// Most significant bit first.
pub fn index_to_bits(index: u128, width: usize) -> Bits {
    (0..width).rev().map(|k| (index >> k) & 1 == 1).collect()
}

pub fn bits_to_index(bits: &[bool]) -> u128 {
    bits.iter().fold(0u128, |acc, &b| (acc << 1) | b as u128)
}

pub fn random_bits<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Bits {
    (0..len).map(|_| rng.random()).collect()
}

/// Uniform scalar quantizer over `[-clip, clip]` with `2^bits` cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyQuantizer {
    pub bits: u32,
    pub clip: f64,
}

impl KeyQuantizer {
    pub fn new(bits: u32, clip: f64) -> Result<Self> {
        if bits == 0 || bits > 16 {
            return Err(Error::InvalidConfig(format!("quantizer bits {bits} outside 1..=16")));
        }
        if !(clip > 0.0 && clip.is_finite()) {
            return Err(Error::InvalidConfig(format!("quantizer clip {clip} must be positive")));
        }
        Ok(Self { bits, clip })
    }

    /// Clip at `clip_std` standard deviations of one channel component.
    pub fn for_field<T: Scalar>(bits: u32, clip_std: f64) -> Result<Self> {
        Self::new(bits, clip_std * T::component_std())
    }

    pub fn levels(&self) -> u32 {
        1 << self.bits
    }

    pub fn cell_width(&self) -> f64 {
        2.0 * self.clip / self.levels() as f64
    }

    pub fn cell(&self, value: f64) -> u32 {
        let k = ((value + self.clip) / self.cell_width()).floor();
        k.clamp(0.0, (self.levels() - 1) as f64) as u32
    }

    pub fn cell_center(&self, cell: u32) -> f64 {
        -self.clip + (cell as f64 + 0.5) * self.cell_width()
    }

    /// `σ · bits · components`.
    pub fn key_len<T: Scalar>(&self, sigma: usize) -> usize {
        sigma * self.bits as usize * T::COMPONENTS
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// The base station, holding an uplink estimate.
    Alice,
    /// A user, holding a downlink measurement.
    Bob,
}

/// Quantize the nonzero taps of a channel estimate into key bits.
///
/// Alice conjugates her uplink estimate first, so both sides quantize the
/// same numbers when `h_down = conj(h_up)`. Taps are visited in ascending
/// order; each real component contributes `bits` bits, most significant
/// first.
pub fn derive_key<T: Scalar>(h: &Signal<T>, quantizer: &KeyQuantizer, side: Side) -> Bits {
    let mut key = Vec::new();
    for v in h.iter().filter(|v| **v != T::zero()) {
        let v = match side {
            Side::Alice => v.conjugate(),
            Side::Bob => *v,
        };
        for &c in &v.components()[..T::COMPONENTS] {
            let cell = quantizer.cell(c);
            key.extend((0..quantizer.bits).rev().map(|k| (cell >> k) & 1 == 1));
        }
    }
    key
}

/// One-time-pad XOR. A key shorter than the message is repeated, block `c`
/// XOR-ed with the bits of the counter `c` (least significant bit at the
/// block start).
pub fn encrypt(message: &[bool], key: &[bool]) -> Result<Bits> {
    if key.is_empty() {
        return Err(Error::EmptyKey);
    }
    Ok(message
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let (block, pos) = (i / key.len(), i % key.len());
            let counter_bit = pos < 64 && (block as u64 >> pos) & 1 == 1;
            m ^ key[pos] ^ counter_bit
        })
        .collect())
}

pub fn decrypt(ciphertext: &[bool], key: &[bool]) -> Result<Bits> {
    encrypt(ciphertext, key)
}

/// How the downlink measurement deviates from the conjugate uplink channel.
/// Applied to the nonzero taps only, per real component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    #[default]
    None,
    /// Additive `N(0, level²)` noise on every real component.
    Gaussian { level: f64 },
    /// Additive uniform noise in `(-max_abs, max_abs)` on every real component.
    Bounded { max_abs: f64 },
}

impl Perturbation {
    pub fn level(&self) -> f64 {
        match *self {
            Perturbation::None => 0.0,
            Perturbation::Gaussian { level } => level,
            Perturbation::Bounded { max_abs } => max_abs,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReciprocalChannelPair<T: Scalar> {
    /// Bob → Alice.
    pub h_up: Signal<T>,
    /// Alice → Bob, as measured by Bob.
    pub h_down: Signal<T>,
    pub perturbation_level: f64,
}

impl<T: Scalar> ReciprocalChannelPair<T> {
    pub fn observe<R: Rng + ?Sized>(h_up: Signal<T>, perturbation: Perturbation, rng: &mut R) -> Self {
        let mut h_down = h_up.map(|v| v.conjugate());
        for v in h_down.iter_mut().filter(|v| **v != T::zero()) {
            let mut parts = v.components();
            for part in &mut parts[..T::COMPONENTS] {
                *part += match perturbation {
                    Perturbation::None => 0.0,
                    Perturbation::Gaussian { level } => level * f64::standard_normal(rng),
                    Perturbation::Bounded { max_abs } => {
                        Uniform::new(-max_abs, max_abs).map_or(0.0, |u| u.sample(rng))
                    }
                };
            }
            *v = T::from_parts(parts[0], parts[1]);
        }
        Self {
            h_up,
            h_down,
            perturbation_level: perturbation.level(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserInstance<T: Scalar> {
    pub user: usize,
    pub active: bool,
    /// Uplink channel.
    pub h: Signal<T>,
    /// Transmitted sparse signal; zero for inactive users.
    pub b: Signal<T>,
    /// Index carried by `b`.
    pub payload_index: u128,
    pub message_bits: Bits,
    pub key_bits: Bits,
    pub ciphertext_bits: Bits,
}

/// A generated recovery problem with known ground truth.
#[derive(Clone, Debug)]
pub struct PlantedInstance<T: Scalar> {
    pub profile: SparsityProfile,
    pub codec: MessageCodec,
    pub users: Vec<UserInstance<T>>,
    pub lifted: LiftedVector<T>,
    pub y: Signal<T>,
}

impl<T: Scalar> PlantedInstance<T> {
    pub fn active_users(&self) -> impl Iterator<Item = &UserInstance<T>> + '_ {
        self.users.iter().filter(|u| u.active)
    }

    pub fn support(&self) -> HierSupport {
        HierSupport::of_nonzeros(&self.lifted)
    }

    /// Draw `μ` active users with fresh channels and uniform messages sent
    /// in the clear, then synthesize the uplink.
    pub fn plant(
        op: &MeasurementOperator<T>,
        profile: &SparsityProfile,
        rng: &mut SimRng,
        snr_db: Option<f64>,
        noise_rng: &mut SimRng,
    ) -> Result<Self> {
        let dims = op.dims_checked(profile)?;
        let codec = MessageCodec::new(dims.code_len, profile.s)?;
        let active = active_set(dims.users, profile.mu, rng);
        let mut users = Vec::with_capacity(dims.users);
        for user in 0..dims.users {
            let h = draw_channel::<T, _>(dims.taps, profile.sigma, rng)?;
            let is_active = active.contains(&user);
            let (payload_index, b) = if is_active {
                draw_message_and_signal::<T, _>(dims.code_len, profile.s, rng)?
            } else {
                (0, Signal::zeros(dims.code_len))
            };
            users.push(UserInstance {
                user,
                active: is_active,
                h,
                b,
                payload_index,
                message_bits: if is_active {
                    index_to_bits(payload_index, codec.index_width())
                } else {
                    Vec::new()
                },
                key_bits: Vec::new(),
                ciphertext_bits: Vec::new(),
            });
        }
        Self::assemble(op, *profile, codec, users, snr_db, noise_rng)
    }

    fn assemble(
        op: &MeasurementOperator<T>,
        profile: SparsityProfile,
        codec: MessageCodec,
        users: Vec<UserInstance<T>>,
        snr_db: Option<f64>,
        noise_rng: &mut SimRng,
    ) -> Result<Self> {
        let dims = profile.dims;
        let lifted = LiftedVector::from_factors(
            dims,
            users.iter().filter(|u| u.active).map(|u| (u.user, &u.b, &u.h)),
        )?;
        let y = synthesize_uplink(&users, op, snr_db, noise_rng)?;
        Ok(Self {
            profile,
            codec,
            users,
            lifted,
            y,
        })
    }
}

impl<T: Scalar> MeasurementOperator<T> {
    fn dims_checked(&self, profile: &SparsityProfile) -> Result<Dims> {
        use crate::operator::LinearMeasurement;
        let dims = self.dims();
        if profile.dims != dims {
            return Err(Error::InvalidProfile(format!(
                "profile dims {:?} do not match operator dims {dims:?}",
                profile.dims
            )));
        }
        Ok(dims)
    }
}

fn active_set(users: usize, mu: usize, rng: &mut SimRng) -> Vec<usize> {
    let mut active = sample(rng, users, mu.min(users)).into_vec();
    active.sort_unstable();
    active
}

/// `y = Σ_{active p} h_p ⊛ Q_p b_p + noise`.
///
/// With `snr_db = Some(r)` the noise is i.i.d. with per-entry variance
/// `‖signal‖² / (N · 10^{r/10})`; an all-zero signal uses unit variance.
pub fn synthesize_uplink<T: Scalar, R: Rng + ?Sized>(
    users: &[UserInstance<T>],
    op: &MeasurementOperator<T>,
    snr_db: Option<f64>,
    rng: &mut R,
) -> Result<Signal<T>> {
    use crate::operator::LinearMeasurement;
    let dims = op.dims();
    let mut y = Signal::zeros(dims.n);
    for u in users.iter().filter(|u| u.active) {
        if u.user >= dims.users || u.b.len() != dims.code_len || u.h.len() != dims.taps {
            return Err(Error::LengthMismatch {
                expected: dims.code_len,
                actual: u.b.len(),
            });
        }
        let x = op.codebook(u.user).encode(&u.b);
        y += TruncatedCirculant::new(x, dims.taps)?.mul(&u.h)?;
    }
    if let Some(snr) = snr_db {
        let power = y.norm_squared();
        let variance = if power > 0.0 {
            power / (dims.n as f64 * 10f64.powf(snr / 10.0))
        } else {
            1.0
        };
        let scale = T::from_real(variance.sqrt());
        for v in y.iter_mut() {
            *v += scale * T::standard_normal(rng);
        }
    }
    Ok(y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    #[default]
    Real,
    Complex,
}

/// Quantizer parameters as written in configuration files: `clip` is in
/// standard deviations of one channel component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerConfig {
    pub bits: u32,
    pub clip: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self { bits: 2, clip: 3.0 }
    }
}

impl QuantizerConfig {
    pub fn build<T: Scalar>(&self) -> Result<KeyQuantizer> {
        KeyQuantizer::for_field::<T>(self.bits, self.clip)
    }

    pub fn key_bits(&self, field: Field, sigma: usize) -> usize {
        let comps = match field {
            Field::Real => 1,
            Field::Complex => 2,
        };
        sigma * self.bits as usize * comps
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub dims: Dims,
    pub s: usize,
    pub sigma: usize,
    /// Number of transmitting users; zero is allowed and succeeds vacuously.
    pub mu: usize,
    pub trials: usize,
    pub seed: u64,
    pub snr_db: Option<f64>,
    pub quantizer: QuantizerConfig,
    pub perturbation: Perturbation,
    pub field: Field,
    pub solver: SolverConfig,
    pub score: String,
    pub backend: String,
}

impl ProtocolConfig {
    pub fn new(dims: Dims, s: usize, sigma: usize, mu: usize) -> Self {
        Self {
            dims,
            s,
            sigma,
            mu,
            trials: 1,
            seed: 0,
            snr_db: None,
            quantizer: QuantizerConfig::default(),
            perturbation: Perturbation::None,
            field: Field::Real,
            solver: SolverConfig::default(),
            score: crate::hier::default_block_score().name().to_string(),
            backend: "matrix-free".to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserVerdict {
    pub user: usize,
    /// The user's support was recovered exactly with an acceptable residual.
    pub recovered: bool,
    pub key_agreement: bool,
    /// Recovered, keys agreed and the decrypted message equals the original.
    pub decrypted: bool,
    pub message_bit_errors: usize,
    pub channel_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    pub recovery_success: bool,
    pub support_exact: bool,
    pub residual_norm: f64,
    pub iterations: usize,
    pub stop_reason: Option<StopReason>,
    pub solve_ms: f64,
    /// Users reported active by the solver that did not transmit.
    pub false_alarms: Vec<usize>,
    pub users: Vec<UserVerdict>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeTotals {
    pub trials: usize,
    pub recovery_successes: usize,
    pub active_users: usize,
    pub users_recovered: usize,
    pub key_agreements: usize,
    pub decryptions: usize,
}

/// Serialized as the JSON outcome document; `schema` versions the layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOutcome {
    pub schema: String,
    pub field: Field,
    pub dims: Dims,
    pub s: usize,
    pub sigma: usize,
    pub mu: usize,
    pub key_bits_per_user: usize,
    pub payload_bits: usize,
    pub trials: Vec<TrialOutcome>,
    pub totals: OutcomeTotals,
}

pub const OUTCOME_SCHEMA: &str = "hihtp.protocol-outcome/1";

impl ProtocolOutcome {
    /// Every transmitting user in every trial decrypted correctly.
    pub fn all_decrypted(&self) -> bool {
        self.totals.decryptions == self.totals.active_users
    }
}

pub fn run_protocol(config: &ProtocolConfig) -> Result<ProtocolOutcome> {
    match config.field {
        Field::Real => run_protocol_in::<f64>(config),
        Field::Complex => run_protocol_in::<C64>(config),
    }
}

pub fn run_protocol_in<T: Scalar>(config: &ProtocolConfig) -> Result<ProtocolOutcome> {
    let dims = config.dims;
    dims.validate()?;
    config.solver.validate()?;
    if config.mu > dims.users {
        return Err(Error::InvalidProfile(format!("mu = {} exceeds N_r = {}", config.mu, dims.users)));
    }
    let quantizer = config.quantizer.build::<T>()?;
    let codec = MessageCodec::new(dims.code_len, config.s)?;
    let solver = Hihtp::new(config.solver).with_score(block_score(&config.score)?);

    let mut trials = Vec::with_capacity(config.trials);
    for trial in 0..config.trials {
        let trial_seed = seed::split(config.seed, &[PROTOCOL_TAG, trial as u64]);
        trials.push(run_trial::<T>(config, &solver, &quantizer, &codec, trial, trial_seed)?);
    }

    let mut totals = OutcomeTotals {
        trials: trials.len(),
        ..Default::default()
    };
    for t in &trials {
        totals.recovery_successes += t.recovery_success as usize;
        totals.active_users += t.users.len();
        for u in &t.users {
            totals.users_recovered += u.recovered as usize;
            totals.key_agreements += u.key_agreement as usize;
            totals.decryptions += u.decrypted as usize;
        }
    }
    Ok(ProtocolOutcome {
        schema: OUTCOME_SCHEMA.to_string(),
        field: config.field,
        dims,
        s: config.s,
        sigma: config.sigma,
        mu: config.mu,
        key_bits_per_user: quantizer.key_len::<T>(config.sigma),
        payload_bits: codec.payload_bits(),
        trials,
        totals,
    })
}

fn run_trial<T: Scalar>(
    config: &ProtocolConfig,
    solver: &Hihtp,
    quantizer: &KeyQuantizer,
    codec: &MessageCodec,
    trial: usize,
    trial_seed: u64,
) -> Result<TrialOutcome> {
    let dims = config.dims;
    let mut rng = seed::rng(seed::split(trial_seed, &[seed::INSTANCE_TAG]));
    let mut noise_rng = seed::rng(seed::split(trial_seed, &[seed::NOISE_TAG]));
    let op = MeasurementOperator::<T>::gaussian(dims, seed::split(trial_seed, &[seed::CODEBOOK_TAG]))?;

    if config.mu == 0 {
        return Ok(TrialOutcome {
            trial,
            seed: trial_seed,
            recovery_success: true,
            support_exact: true,
            residual_norm: 0.0,
            iterations: 0,
            stop_reason: None,
            solve_ms: 0.0,
            false_alarms: Vec::new(),
            users: Vec::new(),
        });
    }
    let profile = SparsityProfile::new(config.s, config.sigma, config.mu, dims)?;

    // Phase 1: each active Bob measures the downlink, derives a key and
    // encrypts a fresh message into its sparse signal.
    let active = active_set(dims.users, config.mu, &mut rng);
    let payload = codec.payload_bits();
    let mut users = Vec::with_capacity(dims.users);
    for user in 0..dims.users {
        let h_up = draw_channel::<T, _>(dims.taps, config.sigma, &mut rng)?;
        if !active.contains(&user) {
            users.push(UserInstance {
                user,
                active: false,
                h: h_up,
                b: Signal::zeros(dims.code_len),
                payload_index: 0,
                message_bits: Vec::new(),
                key_bits: Vec::new(),
                ciphertext_bits: Vec::new(),
            });
            continue;
        }
        let pair = ReciprocalChannelPair::observe(h_up, config.perturbation, &mut noise_rng);
        let key_bits = derive_key(&pair.h_down, quantizer, Side::Bob);
        let message_bits = random_bits(payload, &mut rng);
        let ciphertext_bits = encrypt(&message_bits, &key_bits)?;
        let payload_index = bits_to_index(&ciphertext_bits);
        users.push(UserInstance {
            user,
            active: true,
            h: pair.h_up,
            b: codec.signal(payload_index)?,
            payload_index,
            message_bits,
            key_bits,
            ciphertext_bits,
        });
    }
    let instance = PlantedInstance::assemble(&op, profile, *codec, users, config.snr_db, &mut noise_rng)?;

    // Phase 2: Alice separates the superposition and decrypts.
    let backend = operator_backend(&config.backend, op, DEFAULT_DENSE_BUDGET)?;
    let started = Instant::now();
    let result = solver.solve(backend.as_ref(), &instance.y, &profile)?;
    let solve_ms = started.elapsed().as_secs_f64() * 1e3;
    let report = evaluate_success(&result, &instance)?;
    let detected = result.support.active_users();
    let factors = recover_factors(&result.z_hat, &detected)?;
    debug!(
        "trial {trial}: success={} residual={:.3e} iterations={}",
        report.success, report.residual_norm, report.iterations
    );

    let verdicts = instance
        .active_users()
        .map(|u| {
            let rec = report.users.iter().find(|r| r.user == u.user);
            let recovered = report.residual_ok && rec.is_some_and(|r| r.support_exact);
            let est = factors.iter().find(|f| f.user == u.user);
            let alice_key = est.map(|f| derive_key(&f.h, quantizer, Side::Alice));
            let key_agreement = alice_key.as_deref() == Some(u.key_bits.as_slice());
            let decoded = match (est, &alice_key) {
                (Some(f), Some(key)) if !key.is_empty() => codec
                    .index(&f.b)
                    .filter(|idx| *idx < 1u128 << payload)
                    .map(|idx| decrypt(&index_to_bits(idx, payload), key))
                    .transpose()?,
                _ => None,
            };
            let message_bit_errors = decoded.as_ref().map_or(payload, |m| {
                m.iter().zip(&u.message_bits).filter(|(a, b)| a != b).count()
            });
            Ok(UserVerdict {
                user: u.user,
                recovered,
                key_agreement,
                decrypted: recovered && key_agreement && message_bit_errors == 0 && decoded.is_some(),
                message_bit_errors,
                channel_rel_error: rec.map_or(1.0, |r| r.channel_rel_error),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(TrialOutcome {
        trial,
        seed: trial_seed,
        recovery_success: report.success,
        support_exact: report.support_exact,
        residual_norm: report.residual_norm,
        iterations: report.iterations,
        stop_reason: Some(report.converged_by),
        solve_ms,
        false_alarms: detected.into_iter().filter(|u| !active.contains(u)).collect(),
        users: verdicts,
    })
}
