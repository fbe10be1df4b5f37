//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line per criterion and exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use hihtp::experiment::{run_trial, sweep, SweepGrid, SweepRecord};
use hihtp::hier::hier_threshold;
use hihtp::protocol::{
    derive_key, run_protocol, KeyQuantizer, Perturbation, ProtocolConfig, QuantizerConfig, ReciprocalChannelPair, Side,
};
use hihtp::seed;
use hihtp::{Dims, HierSupport, LiftedVector, LinearMeasurement, MeasurementOperator, Scalar, SparsityProfile, SupportIndex, C64};
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;

type Outcome = Result<String, String>;

const SEED: u64 = 20_240_601;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_vec<T: Scalar, R: Rng>(len: usize, rng: &mut R) -> DVector<T> {
    DVector::from_fn(len, |_, _| T::standard_normal(rng))
}

/// `M` built entry by entry: column `(p, d, e)` is `Q_p[:, e]` cyclically
/// shifted down by `d`.
fn dense_oracle<T: Scalar>(op: &MeasurementOperator<T>) -> DMatrix<T> {
    let dims = op.dims();
    let mut m = DMatrix::zeros(dims.n, dims.lifted_len());
    for p in 0..dims.users {
        let q = &op.codebook(p).q;
        for d in 0..dims.taps {
            for e in 0..dims.code_len {
                let col = dims.index(p, d, e);
                for i in 0..dims.n {
                    m[(i, col)] = q[((i + dims.n - d % dims.n) % dims.n, e)];
                }
            }
        }
    }
    m
}

fn operator_errors<T: Scalar>(instances: u64) -> (f64, f64) {
    let dims = Dims::new(64, 8, 8, 3).unwrap();
    let (mut worst_map, mut worst_identity) = (0.0f64, 0.0f64);
    for k in 0..instances {
        let op = MeasurementOperator::<T>::gaussian(dims, seed::split(SEED, &[1, k])).unwrap();
        let m = dense_oracle(&op);
        let mut rng = seed::rng(seed::split(SEED, &[2, k]));
        let z = LiftedVector::from_vec(dims, random_vec::<T, _>(dims.lifted_len(), &mut rng)).unwrap();
        let y = random_vec::<T, _>(dims.n, &mut rng);

        let mz = op.apply(&z).unwrap();
        let dense_mz = &m * z.data();
        let mhy = op.adjoint(&y).unwrap();
        let dense_mhy = m.ad_mul(&y);
        worst_map = worst_map
            .max((&mz - &dense_mz).norm() / dense_mz.norm())
            .max((mhy.data() - &dense_mhy).norm() / dense_mhy.norm());

        let lhs = y.dotc(&mz);
        let rhs = mhy.data().dotc(z.data());
        worst_identity = worst_identity.max((lhs - rhs).modulus() / (mz.norm() * y.norm()));
    }
    (worst_map, worst_identity)
}

fn criterion_1() -> Outcome {
    let (real_map, real_id) = operator_errors::<f64>(100);
    let (cplx_map, cplx_id) = operator_errors::<C64>(100);
    let map = real_map.max(cplx_map);
    let identity = real_id.max(cplx_id);
    check(
        map <= 1e-10 && identity <= 1e-10,
        format!("100 real + 100 complex instances: max apply/adjoint rel err {map:.2e}, max adjoint identity err {identity:.2e}"),
    )
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Argmax of captured squared mass over every support with exactly `μ`
/// users, `σ` taps per user and `s` entries per tap.
fn exhaustive_projection<T: Scalar>(g: &LiftedVector<T>, profile: &SparsityProfile) -> (HierSupport, bool) {
    let dims = g.dims();
    let per_user = |user: usize| -> Vec<Vec<SupportIndex>> {
        let mut options = Vec::new();
        for taps in combinations(dims.taps, profile.sigma) {
            let per_tap: Vec<Vec<Vec<usize>>> = taps.iter().map(|_| combinations(dims.code_len, profile.s)).collect();
            let mut choice = vec![0usize; taps.len()];
            loop {
                let mut set = Vec::new();
                for (k, &tap) in taps.iter().enumerate() {
                    for &e in &per_tap[k][choice[k]] {
                        set.push(SupportIndex::new(user, tap, e));
                    }
                }
                options.push(set);
                let mut k = 0;
                while k < choice.len() {
                    choice[k] += 1;
                    if choice[k] < per_tap[k].len() {
                        break;
                    }
                    choice[k] = 0;
                    k += 1;
                }
                if k == choice.len() {
                    break;
                }
            }
        }
        options
    };
    let mass = |set: &[SupportIndex]| -> f64 {
        set.iter()
            .map(|i| g.get(i.user, i.tap, i.entry).modulus().powi(2))
            .sum()
    };

    let options: Vec<Vec<(f64, Vec<SupportIndex>)>> = (0..dims.users)
        .map(|u| per_user(u).into_iter().map(|s| (mass(&s), s)).collect())
        .collect();
    let mut best: Option<(f64, Vec<SupportIndex>)> = None;
    let mut tied = false;
    for users in combinations(dims.users, profile.mu) {
        let mut choice = vec![0usize; users.len()];
        loop {
            let total: f64 = users.iter().zip(&choice).map(|(&u, &c)| options[u][c].0).sum();
            match &best {
                Some((b, _)) if total < *b => {}
                Some((b, _)) if total == *b => tied = true,
                _ => {
                    let set = users.iter().zip(&choice).flat_map(|(&u, &c)| options[u][c].1.clone()).collect();
                    best = Some((total, set));
                    tied = false;
                }
            }
            let mut k = 0;
            while k < choice.len() {
                choice[k] += 1;
                if choice[k] < options[users[k]].len() {
                    break;
                }
                choice[k] = 0;
                k += 1;
            }
            if k == choice.len() {
                break;
            }
        }
    }
    let (_, set) = best.expect("at least one admissible support");
    (HierSupport::from_indices(set), tied)
}

fn projection_mismatches<T: Scalar>(dims: Dims, vectors: u64, tag: u64) -> (usize, usize, usize) {
    let (mut checked, mut mismatches, mut ties) = (0, 0, 0);
    for s in 1..=2 {
        for sigma in 1..=2 {
            for mu in 1..=2 {
                let profile = SparsityProfile::new(s, sigma, mu, dims).unwrap();
                for k in 0..vectors {
                    let mut rng = seed::rng(seed::split(SEED, &[tag, s as u64, sigma as u64, mu as u64, k]));
                    let g = LiftedVector::from_vec(dims, random_vec::<T, _>(dims.lifted_len(), &mut rng)).unwrap();
                    let (oracle, tied) = exhaustive_projection(&g, &profile);
                    if tied {
                        ties += 1;
                        continue;
                    }
                    checked += 1;
                    mismatches += (hier_threshold(&g, &profile).unwrap() != oracle) as usize;
                }
            }
        }
    }
    (checked, mismatches, ties)
}

fn criterion_2() -> Outcome {
    let dims = Dims::new(12, 3, 4, 3).unwrap();
    let (real_checked, real_bad, real_ties) = projection_mismatches::<f64>(dims, 200, 3);
    let (cplx_checked, cplx_bad, cplx_ties) = projection_mismatches::<C64>(dims, 200, 4);
    let bad = real_bad + cplx_bad;
    check(
        bad == 0 && real_ties + cplx_ties == 0,
        format!(
            "8 profiles x 200 vectors, real and complex: {} projections checked, {bad} mismatches, {} exact ties",
            real_checked + cplx_checked,
            real_ties + cplx_ties
        ),
    )
}

fn single_cell(mut grid: SweepGrid, mu: usize, sigma: usize, s: usize) -> SweepGrid {
    grid.mu = vec![mu];
    grid.sigma = vec![sigma];
    grid.s = vec![s];
    grid
}

fn desk_dims() -> Dims {
    Dims::new(256, 32, 32, 6).unwrap()
}

fn criterion_3() -> Outcome {
    let mut grid = single_cell(SweepGrid::desk(50, SEED), 2, 2, 2);
    grid.timing = true;
    let mut successes = 0;
    let mut slowest = 0.0f64;
    for trial in 0..grid.trials {
        let stats = run_trial(&grid, 2, 2, 2, trial).map_err(|e| e.to_string())?;
        successes += stats.success as usize;
        slowest = slowest.max(stats.runtime_ms);
    }
    check(
        successes * 10 >= grid.trials * 9 && slowest <= 2000.0,
        format!("{successes}/{} successes, slowest solve {slowest:.1} ms", grid.trials),
    )
}

fn binomial_std(successes: usize, trials: usize) -> f64 {
    let p = successes as f64 / trials as f64;
    (p * (1.0 - p) / trials as f64).sqrt()
}

fn find(records: &[SweepRecord], mu: usize, sigma: usize, s: usize) -> &SweepRecord {
    records
        .iter()
        .find(|r| (r.mu, r.sigma, r.s) == (mu, sigma, s))
        .expect("cell present")
}

fn criterion_4(desk: &[SweepRecord]) -> Outcome {
    let mut violations = Vec::new();
    for sigma in [2, 4, 6] {
        for s in [2, 4, 6] {
            let two = find(desk, 2, sigma, s);
            let three = find(desk, 3, sigma, s);
            let std = binomial_std(two.successes + three.successes, two.trials + three.trials);
            if three.success_rate > two.success_rate + std {
                violations.push(format!(
                    "(sigma={sigma}, s={s}): {} > {} + {std:.3}",
                    three.success_rate, two.success_rate
                ));
            }
        }
    }
    let total = |mu| desk.iter().filter(|r| r.mu == mu).map(|r| r.successes).sum::<usize>();
    check(
        violations.is_empty(),
        format!(
            "9 cells x 20 trials: total successes mu=2 {}, mu=3 {}; violations {violations:?}",
            total(2),
            total(3)
        ),
    )
}

fn cell_center_keys_agree<T: Scalar>(quantizer: &KeyQuantizer, draws: u64) -> usize {
    let half = quantizer.cell_width() / 2.0;
    let mut agreements = 0;
    for k in 0..draws {
        let mut rng = seed::rng(seed::split(SEED, &[5, T::COMPONENTS as u64, k]));
        let mut h = DVector::<T>::zeros(32);
        for d in sample(&mut rng, 32, 4) {
            let re = quantizer.cell_center(rng.random_range(0..quantizer.levels()));
            let im = quantizer.cell_center(rng.random_range(0..quantizer.levels()));
            h[d] = T::from_parts(re, im);
        }
        let pair = ReciprocalChannelPair::observe(h, Perturbation::Bounded { max_abs: 0.999 * half }, &mut rng);
        agreements += (derive_key(&pair.h_down, quantizer, Side::Bob)
            == derive_key(&pair.h_up, quantizer, Side::Alice)) as usize;
    }
    agreements
}

fn criterion_5() -> Outcome {
    let mut cfg = ProtocolConfig::new(desk_dims(), 2, 2, 2);
    cfg.trials = 50;
    cfg.seed = SEED;
    let out = run_protocol(&cfg).map_err(|e| e.to_string())?;
    let recovered: Vec<_> = out.trials.iter().filter(|t| t.recovery_success).collect();
    let failures = recovered
        .iter()
        .flat_map(|t| &t.users)
        .filter(|u| !(u.key_agreement && u.decrypted && u.message_bit_errors == 0))
        .count();
    let users: usize = recovered.iter().map(|t| t.users.len()).sum();

    let q = QuantizerConfig::default();
    let real = cell_center_keys_agree::<f64>(&q.build::<f64>().unwrap(), 100);
    let complex = cell_center_keys_agree::<C64>(&q.build::<C64>().unwrap(), 100);
    check(
        !recovered.is_empty() && failures == 0 && real == 100 && complex == 100,
        format!(
            "{} of 50 trials recovered, {users} users, {failures} key/decryption failures; \
             sub-half-cell perturbation key agreement real {real}/100, complex {complex}/100",
            recovered.len()
        ),
    )
}

fn criterion_6(desk: &[SweepRecord]) -> Outcome {
    let q = QuantizerConfig::default();
    let mut problems = Vec::new();
    for r in desk {
        if r.key_bits != r.sigma * q.bits as usize {
            problems.push(format!("key_bits {} at sigma={}", r.key_bits, r.sigma));
        }
    }
    for mu in [2, 3] {
        for s in [2, 4, 6] {
            let column: Vec<&SweepRecord> = [2, 4, 6].iter().map(|&sigma| find(desk, mu, sigma, s)).collect();
            for w in column.windows(2) {
                if w[1].key_bits <= w[0].key_bits {
                    problems.push(format!("key_bits not increasing at mu={mu}, s={s}"));
                }
                if w[1].success_rate > w[0].success_rate {
                    problems.push(format!(
                        "success rises from {} to {} between sigma={} and sigma={} (mu={mu}, s={s})",
                        w[0].success_rate, w[1].success_rate, w[0].sigma, w[1].sigma
                    ));
                }
            }
        }
    }
    let key_bits: Vec<usize> = [2, 4, 6].iter().map(|&sigma| find(desk, 2, sigma, 2).key_bits).collect();
    check(problems.is_empty(), format!("key_bits over sigma {key_bits:?}; problems {problems:?}"))
}

/// Peak resident set size of this process, from `/proc/self/status`.
fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kib: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kib * 1024)
}

fn criterion_7() -> Outcome {
    let mut grid = single_cell(SweepGrid::published(20, SEED), 2, 2, 2);
    grid.backend = "matrix-free".into();
    let dense_bytes = MeasurementOperator::<f64>::gaussian(grid.dims, 0).unwrap().dense_bytes();
    let started = Instant::now();
    let records = sweep(&grid).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed().as_secs_f64();
    let r = &records[0];
    let peak = peak_rss_bytes().ok_or("peak RSS unavailable (no /proc/self/status)")?;
    check(
        r.successes * 10 >= r.trials * 9 && peak < 1_000_000_000,
        format!(
            "{}/{} successes in {elapsed:.1} s; peak RSS {:.0} MB (a dense M would need {:.0} MB)",
            r.successes,
            r.trials,
            peak as f64 / 1e6,
            dense_bytes as f64 / 1e6
        ),
    )
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = started.elapsed().as_secs_f64();
    match &outcome {
        Ok(detail) => println!("{name}: PASS ({secs:.1} s) {detail}"),
        Err(detail) => println!("{name}: FAIL ({secs:.1} s) {detail}"),
    }
    outcome.is_ok()
}

fn main() -> ExitCode {
    let desk = sweep(&SweepGrid::desk(20, SEED)).expect("desk sweep");
    let results = [
        run("criterion 1 operator correctness", criterion_1),
        run("criterion 2 exact projection", criterion_2),
        run("criterion 3 planted noiseless recovery", criterion_3),
        run("criterion 4 phase-diagram ordering in mu", || criterion_4(&desk)),
        run("criterion 5 end-to-end secrecy loop", criterion_5),
        run("criterion 6 key bits versus success trade-off", || criterion_6(&desk)),
        run("criterion 7 published-scale smoke test", criterion_7),
    ];
    let passed = results.iter().filter(|ok| **ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
