//! Monte Carlo estimate of how likely a single training example is to contain
//! a token pair at each relative distance.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::position_plan::{build_plan, covered_distances, ExtensionConfig, PlanKind};
use crate::util::write_atomic;

/// Number of sampled plans whose distance set contains each `d in 0..L_t`.
pub fn coverage_counts<R: Rng + ?Sized>(
    config: &ExtensionConfig,
    kind: PlanKind,
    trials: usize,
    rng: &mut R,
) -> Result<Vec<u64>> {
    config.validate()?;
    let lt = config.target_len;
    // difference array over [0, L_t]
    let mut diff = vec![0i64; lt + 1];
    for _ in 0..trials {
        let plan = build_plan(kind, config, config.target_len, rng)?;
        for &(lo, hi) in covered_distances(&plan).ranges() {
            diff[lo] += 1;
            diff[hi.min(lt - 1) + 1] -= 1;
        }
    }
    let mut acc = 0i64;
    Ok(diff[..lt]
        .iter()
        .map(|&d| {
            acc += d;
            acc as u64
        })
        .collect())
}

/// Full-window coverage: every distance below the window, none beyond.
fn analytic_single_chunk(config: &ExtensionConfig) -> Vec<f64> {
    (0..config.target_len)
        .map(|d| if d < config.original_len { 1.0 } else { 0.0 })
        .collect()
}

/// Coverage probability per relative distance `0..L_t`.
///
/// A single-chunk skip-wise plan and the full-length plan are answered
/// analytically without sampling.
pub fn coverage_probability<R: Rng + ?Sized>(
    config: &ExtensionConfig,
    kind: PlanKind,
    trials: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    config.validate()?;
    if kind == PlanKind::Full || (kind == PlanKind::Pose && config.chunk_count == 1) {
        return Ok(analytic_single_chunk(config));
    }
    if trials < 1 {
        return Err(Error::config("trials must be at least 1"));
    }
    let counts = coverage_counts(config, kind, trials, rng)?;
    Ok(counts.into_iter().map(|c| c as f64 / trials as f64).collect())
}

/// Splits trials over `threads` workers. Worker `w` draws from stream `w` of
/// the master seed and handles a fixed share of the trials, so the merged
/// counts depend on `(seed, threads)` only.
pub fn coverage_probability_parallel(
    config: &ExtensionConfig,
    kind: PlanKind,
    trials: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<f64>> {
    config.validate()?;
    if kind == PlanKind::Full || (kind == PlanKind::Pose && config.chunk_count == 1) {
        return Ok(analytic_single_chunk(config));
    }
    if trials < 1 {
        return Err(Error::config("trials must be at least 1"));
    }
    let threads = threads.clamp(1, trials);
    let share = |w: usize| trials / threads + usize::from(w < trials % threads);
    let worker = |w: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(w as u64);
        coverage_counts(config, kind, share(w), &mut rng)
    };
    let parts: Vec<Result<Vec<u64>>> = if threads == 1 {
        vec![worker(0)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads).map(|w| scope.spawn(move || worker(w))).collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        })
    };
    let mut total = vec![0u64; config.target_len];
    for part in parts {
        for (t, c) in total.iter_mut().zip(part?) {
            *t += c;
        }
    }
    Ok(total.into_iter().map(|c| c as f64 / trials as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub relative_distance: usize,
    pub probability: f64,
}

pub fn coverage_csv(probs: &[f64]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (d, &p) in probs.iter().enumerate() {
        w.serialize(CoverageRow {
            relative_distance: d,
            probability: p,
        })?;
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

/// Estimates coverage and writes `relative_distance,probability` rows.
pub fn coverage_report(
    config: &ExtensionConfig,
    kind: PlanKind,
    trials: usize,
    seed: u64,
    threads: usize,
    out_path: &Path,
) -> Result<Vec<f64>> {
    let probs = coverage_probability_parallel(config, kind, trials, seed, threads)?;
    write_atomic(out_path, &coverage_csv(&probs)?)?;
    Ok(probs)
}

pub fn read_coverage_csv(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<CoverageRow>().enumerate() {
        let row = row?;
        if row.relative_distance != i {
            return Err(Error::Data(format!("row {i} has distance {}", row.relative_distance)));
        }
        out.push(row.probability);
    }
    Ok(out)
}
