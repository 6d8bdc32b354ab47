//! The walk itself: one-step dynamics, induced (site-to-site) steps,
//! hitting times, trajectories, and deterministic parallel ensembles.
//!
//! Gate membership is evaluated at the pre-map state: at site `z` the walker
//! with state `x` moves left exactly when `x` lies in the gate of site `z`,
//! and its state becomes `T_z(x)` either way. Both orders appear in the
//! literature; everything in this crate uses this one.
//!
//! When the exit/return conditions hold, a walker entering a gate at site
//! `n` takes exactly three steps to arrive at site `n+1`, so the induced
//! step has return time r in {1, 3} and composes the same maps in the same
//! order as the direct dynamics; the two paths agree bit for bit.

use crate::circle_map::ValidationMode;
use crate::environment::Environment;
use crate::error::Error;
use crate::rng::RandomSource;
use crate::Result;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Fixed work-chunk size; parallel reductions fold chunk results in index
/// order, so results do not depend on the worker count.
pub const CHUNK: usize = 4096;

const X0_STREAM: u64 = 0x5830_5354;

/// Walker state: circle coordinate, lattice site, elapsed steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkerState {
    pub x: f64,
    pub z: i64,
    pub t: u64,
}

impl WalkerState {
    pub fn start(x: f64) -> Self {
        Self { x, z: 0, t: 0 }
    }
}

/// Environment plus cached verification status for the induced fast path.
#[derive(Debug, Clone)]
pub struct WalkContext<'a> {
    pub env: &'a Environment,
    pub verified: bool,
}

impl<'a> WalkContext<'a> {
    /// Verify the exit/return conditions over the window and cache the
    /// outcome. Fails closed: inconclusive counts as unverified.
    pub fn verified(env: &'a Environment, mode: ValidationMode) -> Self {
        let report = env.condition_report(0, mode);
        Self {
            env,
            verified: report.passed(),
        }
    }

    /// Trust the environment without checking (or after an external check).
    pub fn assume_verified(env: &'a Environment) -> Self {
        Self {
            env,
            verified: true,
        }
    }

    pub fn unverified(env: &'a Environment) -> Self {
        Self {
            env,
            verified: false,
        }
    }
}

/// One application of the walk map.
#[inline]
pub fn step(state: WalkerState, env: &Environment) -> Result<WalkerState> {
    let pair = env.site(state.z)?;
    let left = pair.gate.contains(state.x);
    Ok(WalkerState {
        x: pair.map.apply(state.x),
        z: state.z + if left { -1 } else { 1 },
        t: state.t + 1,
    })
}

/// One induced step from site `n`: the state after first arrival at site
/// `n+1`, together with the number of walk steps consumed.
///
/// With the context verified this is the closed-form branch (1 step off the
/// gate, 3 steps through it). Unverified contexts fall back to iterating the
/// direct dynamics until the walker first reaches `n+1`, with a step cap.
#[inline]
pub fn induced_step(ctx: &WalkContext, x: f64, n: i64) -> Result<(f64, u64)> {
    if ctx.verified {
        let pair = ctx.env.site_unchecked(n);
        if pair.gate.contains(x) {
            let prev = ctx.env.site_unchecked(n - 1);
            Ok((pair.map.apply(prev.map.apply(pair.map.apply(x))), 3))
        } else {
            Ok((pair.map.apply(x), 1))
        }
    } else {
        let cap = 1_000_000;
        let mut st = WalkerState { x, z: n, t: 0 };
        while st.z != n + 1 {
            st = step(st, ctx.env)?;
            if st.t >= cap {
                return Err(Error::HorizonExceeded {
                    target: n + 1,
                    horizon: cap,
                    x0: x,
                });
            }
        }
        Ok((st.x, st.t))
    }
}

/// First-passage record for one initial condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HittingRecord {
    pub target: i64,
    pub tau: u64,
    /// Per-site return times when computed through induced steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub returns: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HittingMode {
    Direct,
    Induced,
}

/// Hitting time of site `n` from `(x, 0)`.
pub fn hitting_time(
    ctx: &WalkContext,
    x: f64,
    n: i64,
    mode: HittingMode,
    keep_returns: bool,
) -> Result<HittingRecord> {
    if n < 1 {
        return Err(Error::Precondition("target site must be >= 1".into()));
    }
    match mode {
        HittingMode::Direct => {
            let horizon = 3 * n as u64 + 10;
            let mut st = WalkerState::start(x);
            while st.z != n {
                st = step(st, ctx.env)?;
                if st.t > horizon {
                    return Err(Error::HorizonExceeded {
                        target: n,
                        horizon,
                        x0: x,
                    });
                }
            }
            Ok(HittingRecord {
                target: n,
                tau: st.t,
                returns: None,
            })
        }
        HittingMode::Induced => {
            let mut cur = x;
            let mut tau = 0u64;
            let mut returns = keep_returns.then(|| Vec::with_capacity(n as usize));
            for k in 0..n {
                let (nx, r) = induced_step(ctx, cur, k)?;
                cur = nx;
                tau += r;
                if let Some(rs) = returns.as_mut() {
                    rs.push(r.min(255) as u8);
                }
            }
            Ok(HittingRecord {
                target: n,
                tau,
                returns,
            })
        }
    }
}

/// Walk the induced chain from site 0 to `z_max`, reporting the cumulative
/// hitting time at every site along the way.
#[inline]
pub fn induced_scan(
    ctx: &WalkContext,
    x: f64,
    z_max: i64,
    mut visit: impl FnMut(i64, u64),
) -> Result<()> {
    let mut cur = x;
    let mut tau = 0u64;
    for k in 0..z_max {
        let (nx, r) = induced_step(ctx, cur, k)?;
        cur = nx;
        tau += r;
        visit(k + 1, tau);
    }
    Ok(())
}

/// Full path of one walker.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub x0: f64,
    pub xs: Vec<f64>,
    pub zs: Vec<i64>,
    pub zstars: Vec<i64>,
    pub summary: PathSummary,
}

/// End-of-path summary, including the running-max sandwich diagnostics.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct PathSummary {
    pub z_final: i64,
    pub zstar_final: i64,
    /// Count of times z_t < z*_{t-10} (expected never on verified environments).
    pub sandwich10_violations: u64,
    /// Count of times z_t < z*_{t-3} (sharper variant, reported not assumed).
    pub sandwich3_violations: u64,
    /// Count of times z_t < floor(t/3) - 1 (sharp ballistic floor).
    pub ballistic_floor_violations: u64,
    /// Count of times z_t < ceil(t/3) - 1 (looser floor variant, reported).
    pub ballistic_ceil_violations: u64,
    /// Count of times z_t < z*_t - 1 (single-step backtracking bound).
    pub backtrack_violations: u64,
}

fn track(summary: &mut PathSummary, ring: &mut [i64; 10], t: u64, z: i64, zstar: &mut i64) {
    let idx = (t % 10) as usize;
    // ring[idx] currently holds z* at time t-10.
    if t >= 10 && z < ring[idx] {
        summary.sandwich10_violations += 1;
    }
    if t >= 3 && z < ring[((t + 10 - 3) % 10) as usize] {
        summary.sandwich3_violations += 1;
    }
    if z < *zstar - 1 {
        summary.backtrack_violations += 1;
    }
    *zstar = (*zstar).max(z);
    ring[idx] = *zstar;
    let t3 = (t / 3) as i64;
    if z < t3 - 1 {
        summary.ballistic_floor_violations += 1;
    }
    let ceil3 = (t as i64 + 2) / 3;
    if z < ceil3 - 1 {
        summary.ballistic_ceil_violations += 1;
    }
}

/// Run the direct dynamics for `t` steps, keeping the full path.
pub fn run_to_time(ctx: &WalkContext, x0: f64, t: u64) -> Result<Trajectory> {
    let mut st = WalkerState::start(x0);
    let mut xs = Vec::with_capacity(t as usize + 1);
    let mut zs = Vec::with_capacity(t as usize + 1);
    let mut zstars = Vec::with_capacity(t as usize + 1);
    let mut summary = PathSummary::default();
    let mut ring = [0i64; 10];
    let mut zstar = 0i64;
    xs.push(st.x);
    zs.push(st.z);
    zstars.push(0);
    for _ in 0..t {
        st = step(st, ctx.env)?;
        track(&mut summary, &mut ring, st.t, st.z, &mut zstar);
        xs.push(st.x);
        zs.push(st.z);
        zstars.push(zstar);
    }
    summary.z_final = st.z;
    summary.zstar_final = zstar;
    Ok(Trajectory {
        x0,
        xs,
        zs,
        zstars,
        summary,
    })
}

/// Direct dynamics for `t` steps, summary only.
pub fn run_summary(ctx: &WalkContext, x0: f64, t: u64) -> Result<PathSummary> {
    let mut st = WalkerState::start(x0);
    let mut summary = PathSummary::default();
    let mut ring = [0i64; 10];
    let mut zstar = 0i64;
    for _ in 0..t {
        st = step(st, ctx.env)?;
        track(&mut summary, &mut ring, st.t, st.z, &mut zstar);
    }
    summary.z_final = st.z;
    summary.zstar_final = zstar;
    Ok(summary)
}

/// Initial-condition samplers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "sampler")]
pub enum Sampler {
    /// Seeded uniform draws; sample i is independent of all others.
    UniformRandom { seed: u64 },
    /// Midpoint grid x_i = (i + 1/2) / N.
    StratifiedGrid,
}

impl Sampler {
    #[inline]
    pub fn x0(&self, i: usize, n: usize) -> f64 {
        match self {
            Sampler::UniformRandom { seed } => {
                RandomSource::new(*seed, X0_STREAM).f64_at(i as u64)
            }
            Sampler::StratifiedGrid => (i as f64 + 0.5) / n as f64,
        }
    }
}

/// What an ensemble evaluates per initial condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "observable")]
pub enum Observable {
    HittingTime { site: i64 },
    Position { time: u64 },
    MaxPosition { time: u64 },
}

/// Ensemble of one observable over initial conditions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub observable: Observable,
    pub n_samples: usize,
    pub mean: f64,
    pub variance: f64,
    pub samples: Vec<f64>,
    pub summary: PathSummary,
}

/// Evaluate `value(i, x0_i)` for every sample index, in parallel, with
/// order-stable output.
pub fn map_samples<T: Send>(
    n_samples: usize,
    sampler: &Sampler,
    value: impl Fn(usize, f64) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    (0..n_samples)
        .into_par_iter()
        .map(|i| value(i, sampler.x0(i, n_samples)))
        .collect()
}

/// Evaluate one observable over `n_samples` initial conditions.
pub fn ensemble(
    ctx: &WalkContext,
    observable: Observable,
    n_samples: usize,
    sampler: Sampler,
) -> Result<EnsembleResult> {
    if n_samples < 2 {
        return Err(Error::Precondition("need at least 2 samples".into()));
    }
    let pairs: Vec<(f64, PathSummary)> = match observable {
        Observable::HittingTime { site } => map_samples(n_samples, &sampler, |_, x0| {
            let mode = if ctx.verified {
                HittingMode::Induced
            } else {
                HittingMode::Direct
            };
            let rec = hitting_time(ctx, x0, site, mode, false)?;
            Ok((rec.tau as f64, PathSummary::default()))
        })?,
        Observable::Position { time } => map_samples(n_samples, &sampler, |_, x0| {
            let s = run_summary(ctx, x0, time)?;
            Ok((s.z_final as f64, s))
        })?,
        Observable::MaxPosition { time } => map_samples(n_samples, &sampler, |_, x0| {
            let s = run_summary(ctx, x0, time)?;
            Ok((s.zstar_final as f64, s))
        })?,
    };
    let samples: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut agg = PathSummary::default();
    for (_, s) in &pairs {
        agg.sandwich10_violations += s.sandwich10_violations;
        agg.sandwich3_violations += s.sandwich3_violations;
        agg.ballistic_floor_violations += s.ballistic_floor_violations;
        agg.ballistic_ceil_violations += s.ballistic_ceil_violations;
        agg.backtrack_violations += s.backtrack_violations;
    }
    let mean = crate::util::mean(&samples);
    let variance = crate::util::sample_variance(&samples);
    Ok(EnsembleResult {
        observable,
        n_samples,
        mean,
        variance,
        samples,
        summary: agg,
    })
}
