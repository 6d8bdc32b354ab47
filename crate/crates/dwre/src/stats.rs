//! Statistical pipelines: normality tests for hitting times and positions,
//! variance-growth fits, the scale function and its inverse, drift and
//! variance decompositions over random environments, and the
//! block-alternating contrast where the position statistics stay visibly
//! non-normal.
//!
//! Limit theorems come with no rates, so normality verdicts are calibrated:
//! the comparison point for a statistic built from `n` return times with
//! hit rate `p` is the same statistic computed from `n` independent
//! returns (a Bernoulli walk), at the same sample count. That null carries
//! the same lattice granularity and the same Monte Carlo noise, and at
//! `p = 1/2` it is exactly the simple-random-walk reduction. A statistic
//! passes when its distance to the normal is within 1.5 times the null's.

use crate::circle_map::SitePair;
use crate::environment::{EnvKind, Environment, EnvironmentSpec, SCHEMA_VERSION};
use crate::error::Error;
use crate::rng::RandomSource;
use crate::transfer::{build_induced_chain, gate_mass};
use crate::util::{linear_fit, mean, sample_variance};
use crate::walk::{
    ensemble, induced_scan, map_samples, Observable, Sampler, WalkContext, CHUNK,
};
use crate::Result;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Absolute ceiling on the KS distance beyond which no statistic counts as
/// normal, whatever the calibration says (guards degenerate small-n cases).
pub const KS_ABSOLUTE_CAP: f64 = 0.1;

const NULL_SALT: u64 = 0x6e75_6c6c;
const ENV_STREAM: u64 = 0x656e_7673;
const BOOT_STREAM: u64 = 0x626f_6f74;

/// Center and rescale to mean 0, population variance 1.
pub fn studentize(samples: &[f64]) -> Result<Vec<f64>> {
    let m = mean(samples);
    let var = samples.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / samples.len() as f64;
    if var <= 0.0 {
        return Err(Error::Degenerate(
            "zero sample variance; cannot studentize".into(),
        ));
    }
    let sd = var.sqrt();
    Ok(samples.iter().map(|x| (x - m) / sd).collect())
}

/// Kolmogorov-Smirnov sup-distance of the studentized samples from the
/// standard normal.
pub fn ks_normal(samples: &[f64]) -> Result<f64> {
    if samples.len() < 100 {
        return Err(Error::Precondition(format!(
            "need at least 100 samples, got {}",
            samples.len()
        )));
    }
    let mut s = studentize(samples)?;
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n = s.len() as f64;
    let mut d = 0.0f64;
    for (i, x) in s.iter().enumerate() {
        let cdf = normal.cdf(*x);
        d = d.max((cdf - i as f64 / n).abs());
        d = d.max(((i as f64 + 1.0) / n - cdf).abs());
    }
    Ok(d)
}

/// KS distance of the calibration null: the sum of `n_steps` independent
/// returns (1 with probability 1-p, 3 with probability p), studentized, at
/// the same sample count. This is the lattice-matched Bernoulli-walk
/// reference; at p = 1/2 it is the simple-random-walk law.
pub fn null_return_sum_ks(n_steps: u64, hit_rate: f64, n_samples: usize, seed: u64) -> Result<f64> {
    let p = hit_rate.clamp(1e-12, 0.5);
    let src = RandomSource::new(seed ^ NULL_SALT, 0x6273);
    let samples: Vec<f64> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let sub = src.substream(i as u64);
            let mut hits = 0u64;
            for t in 0..n_steps {
                if sub.f64_at(t) < p {
                    hits += 1;
                }
            }
            (n_steps + 2 * hits) as f64
        })
        .collect();
    ks_normal(&samples)
}

/// Verdict of one normality test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CltReport {
    pub observable: String,
    pub n: i64,
    pub n_samples: usize,
    pub mean: f64,
    pub variance: f64,
    pub ks: f64,
    pub null_ks: f64,
    /// 1.5 x null_ks, the calibrated acceptance line.
    pub threshold: f64,
    pub pass: bool,
}

impl CltReport {
    fn build(observable: &str, n: i64, samples: &[f64], null_ks: f64) -> Result<Self> {
        let ks = ks_normal(samples)?;
        let threshold = 1.5 * null_ks;
        Ok(CltReport {
            observable: observable.into(),
            n,
            n_samples: samples.len(),
            mean: mean(samples),
            variance: sample_variance(samples),
            ks,
            null_ks,
            threshold,
            pass: ks <= threshold && ks <= KS_ABSOLUTE_CAP,
        })
    }
}

/// Normality of the hitting time of site `n` over uniform initial points.
pub fn hitting_clt(ctx: &WalkContext, n: i64, n_samples: usize, seed: u64) -> Result<CltReport> {
    let res = ensemble(
        ctx,
        Observable::HittingTime { site: n },
        n_samples,
        Sampler::UniformRandom { seed },
    )?;
    if res.variance <= 0.0 {
        return Err(Error::Degenerate("hitting time has zero variance".into()));
    }
    let p_hat = ((res.mean / n as f64 - 1.0) / 2.0).clamp(1e-12, 0.5);
    let null = null_return_sum_ks(n as u64, p_hat, n_samples, seed)?;
    CltReport::build("hitting_time", n, &res.samples, null)
}

/// Variance of the hitting time along a site grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceGrowth {
    pub grid: Vec<i64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// Least-squares slope of variance against n over the tail half.
    pub slope: f64,
    /// min over grid points n >= tail_floor of variance/n.
    pub c_hat: f64,
    /// Bootstrap percentile interval (2.5%, 97.5%) for c_hat.
    pub ci: (f64, f64),
    pub tail_floor: i64,
    pub pass: bool,
}

/// Estimate the variance of tau_n on a grid of sites from one simulation
/// sweep, and bootstrap a confidence interval for the linear-growth
/// constant.
pub fn variance_growth(
    ctx: &WalkContext,
    grid: &[i64],
    n_samples: usize,
    sampler: Sampler,
    tail_floor: i64,
    seed: u64,
) -> Result<VarianceGrowth> {
    if grid.is_empty() {
        return Err(Error::Precondition("empty site grid".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_unstable();
    let z_max = *grid.last().unwrap();
    let g = grid.len();
    // Per-sample tau at the grid sites.
    let tau_matrix: Vec<Vec<f64>> = map_samples(n_samples, &sampler, |_, x0| {
        let mut row = Vec::with_capacity(g);
        let mut next = 0usize;
        induced_scan(ctx, x0, z_max, |site, tau| {
            while next < g && grid[next] == site {
                row.push(tau as f64);
                next += 1;
            }
        })?;
        Ok(row)
    })?;
    let mut means = vec![0.0; g];
    let mut variances = vec![0.0; g];
    for j in 0..g {
        let col: Vec<f64> = tau_matrix.iter().map(|r| r[j]).collect();
        means[j] = mean(&col);
        variances[j] = sample_variance(&col);
    }
    let tail_start = (g / 2).min(g - 1);
    let xs: Vec<f64> = grid[tail_start..].iter().map(|&n| n as f64).collect();
    let ys: Vec<f64> = variances[tail_start..].to_vec();
    let (slope, _) = linear_fit(&xs, &ys);
    let c_of = |vars: &[f64]| -> f64 {
        grid.iter()
            .zip(vars)
            .filter(|(n, _)| **n >= tail_floor)
            .map(|(n, v)| v / *n as f64)
            .fold(f64::INFINITY, f64::min)
    };
    let c_hat = c_of(&variances);
    // Percentile bootstrap over samples.
    let boots = 200usize;
    let src = RandomSource::new(seed, BOOT_STREAM);
    let mut c_boot: Vec<f64> = (0..boots)
        .into_par_iter()
        .map(|b| {
            let sub = src.substream(b as u64);
            let mut sums = vec![0.0; g];
            let mut sqs = vec![0.0; g];
            for i in 0..n_samples {
                let idx = (sub.u64_at(i as u64) % n_samples as u64) as usize;
                for j in 0..g {
                    let v = tau_matrix[idx][j];
                    sums[j] += v;
                    sqs[j] += v * v;
                }
            }
            let vars: Vec<f64> = (0..g)
                .map(|j| {
                    let m = sums[j] / n_samples as f64;
                    (sqs[j] - n_samples as f64 * m * m) / (n_samples as f64 - 1.0)
                })
                .collect();
            c_of(&vars)
        })
        .collect();
    c_boot.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ci = (
        c_boot[(boots as f64 * 0.025) as usize],
        c_boot[((boots as f64 * 0.975) as usize).min(boots - 1)],
    );
    let pass = c_hat > 0.0 && ci.0 > 0.0;
    Ok(VarianceGrowth {
        grid,
        means,
        variances,
        slope,
        c_hat,
        ci,
        tail_floor,
        pass,
    })
}

/// Range of the centered return time on the gates: with gate mass p_k under
/// the pushed density, the centered value on the gate is 2 - 2 p_k, which
/// must lie in [1, 2].
pub fn centered_return_range(
    env: &Environment,
    m: usize,
    refinement: usize,
    k_max: usize,
) -> Result<(f64, f64)> {
    let ops = build_induced_chain(env, k_max, m, refinement)?;
    let mut density = vec![1.0; m];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (k, op) in ops.iter().enumerate() {
        let gate = env.site_unchecked(k as i64 + 1).gate;
        let p = gate_mass(&density, gate.lo(), gate.width);
        let centered = 2.0 - 2.0 * p;
        lo = lo.min(centered);
        hi = hi.max(centered);
        density = op.apply(&density);
    }
    Ok((lo, hi))
}

/// Design constants: the forward-check depth from the mixing rate, and the
/// largest admissible gate scale.
pub fn design_constants(
    c: f64,
    theta: f64,
    d_prime: f64,
    c_bar: f64,
    m_bound: f64,
) -> Result<(u32, f64)> {
    if !(0.0 < theta && theta < 1.0) {
        return Err(Error::Precondition(format!("theta {theta} outside (0,1)")));
    }
    if c <= 0.0 || d_prime <= 0.0 || c_bar <= 0.0 || m_bound <= 0.0 {
        return Err(Error::Precondition("constants must be positive".into()));
    }
    let rhs = c * (1.0 - theta) / (2.0 * d_prime);
    let mut n = 1u32;
    while theta.powi(n as i32) >= rhs {
        n += 1;
        if n > 1_000_000 {
            return Err(Error::Degenerate("depth bound did not converge".into()));
        }
    }
    let delta_bar = c / (3.0 * (4.0 * c_bar * m_bound + c_bar * c_bar));
    Ok((n, delta_bar))
}

/// Monte Carlo table of the expected hitting time S(z), its inverse, and
/// the hitting-time standard deviation at the inverted scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleFunction {
    /// s[z] = estimated E tau_z for z = 0..=z_max (s[0] = 0).
    pub s: Vec<f64>,
    /// var[z] = estimated var tau_z.
    pub var: Vec<f64>,
    /// Standard error of s[z].
    pub se: Vec<f64>,
    pub n_samples: usize,
}

impl ScaleFunction {
    pub fn z_max(&self) -> i64 {
        self.s.len() as i64 - 1
    }

    /// Largest z with S(z) <= s (0 if S(1) already exceeds s).
    pub fn z_of(&self, target: f64) -> i64 {
        let mut lo = 0usize;
        let mut hi = self.s.len() - 1;
        if self.s[hi] <= target {
            return hi as i64;
        }
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.s[mid] <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo as i64
    }

    /// sqrt(var tau_{Z(n)}).
    pub fn sigma_hat(&self, n: f64) -> f64 {
        self.var[self.z_of(n) as usize].sqrt()
    }

    /// Average return time over the table.
    pub fn mean_return(&self) -> f64 {
        let z = self.z_max();
        if z > 0 {
            self.s[z as usize] / z as f64
        } else {
            1.0
        }
    }

    /// Implied gate-hit rate (mean return = 1 + 2p).
    pub fn hit_rate(&self) -> f64 {
        ((self.mean_return() - 1.0) / 2.0).clamp(1e-12, 0.5)
    }
}

/// Simulate hitting times to every site up to `z_max` and tabulate the
/// scale function.
pub fn scale_function(
    ctx: &WalkContext,
    z_max: i64,
    n_samples: usize,
    sampler: Sampler,
) -> Result<ScaleFunction> {
    let (_, hi) = ctx.env.window();
    if z_max > hi {
        return Err(Error::Window {
            site: z_max,
            lo: ctx.env.window().0,
            hi,
        });
    }
    let zm = z_max as usize;
    let n_chunks = n_samples.div_ceil(CHUNK);
    let partials: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n_samples);
            let mut sums = vec![0.0; zm];
            let mut sqs = vec![0.0; zm];
            for i in lo..hi {
                let x0 = sampler.x0(i, n_samples);
                induced_scan(ctx, x0, z_max, |site, tau| {
                    let t = tau as f64;
                    sums[site as usize - 1] += t;
                    sqs[site as usize - 1] += t * t;
                })?;
            }
            Ok((sums, sqs))
        })
        .collect();
    let mut sums = vec![0.0; zm];
    let mut sqs = vec![0.0; zm];
    for p in partials {
        let (s, q) = p?;
        for j in 0..zm {
            sums[j] += s[j];
            sqs[j] += q[j];
        }
    }
    let nf = n_samples as f64;
    let mut s = Vec::with_capacity(zm + 1);
    let mut var = Vec::with_capacity(zm + 1);
    let mut se = Vec::with_capacity(zm + 1);
    s.push(0.0);
    var.push(0.0);
    se.push(0.0);
    for j in 0..zm {
        let m = sums[j] / nf;
        let v = ((sqs[j] - nf * m * m) / (nf - 1.0)).max(0.0);
        s.push(m);
        var.push(v);
        se.push((v / nf).sqrt());
    }
    Ok(ScaleFunction {
        s,
        var,
        se,
        n_samples,
    })
}

/// Scale-function normality report, with the pathwise duality check between
/// running-maximum positions and hitting times.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleCltReport {
    pub clt: CltReport,
    /// max over probes of |P(z*_n > x) - P(tau_{ceil x} <= n)|.
    pub duality_max_diff: f64,
    pub duality_tolerance: f64,
    pub duality_pass: bool,
    pub sandwich10_violations: u64,
}

struct PositionRun {
    z: i64,
    zstar: i64,
    probe_hit: Vec<bool>,
    sandwich10: u64,
}

fn run_position_with_probes(
    ctx: &WalkContext,
    x0: f64,
    t: u64,
    probes: &[i64],
) -> Result<PositionRun> {
    let mut st = crate::walk::WalkerState::start(x0);
    let mut zstar = 0i64;
    let mut ring = [0i64; 10];
    let mut sandwich10 = 0u64;
    let mut probe_hit = vec![false; probes.len()];
    for _ in 0..t {
        st = crate::walk::step(st, ctx.env)?;
        let idx = (st.t % 10) as usize;
        if st.t >= 10 && st.z < ring[idx] {
            sandwich10 += 1;
        }
        if st.z > zstar {
            zstar = st.z;
            // First passage: any probe equal to the new maximum is hit now.
            for (pi, &p) in probes.iter().enumerate() {
                if p == st.z {
                    probe_hit[pi] = true;
                }
            }
        }
        ring[idx] = zstar;
    }
    Ok(PositionRun {
        z: st.z,
        zstar,
        probe_hit,
        sandwich10,
    })
}

/// Normality of (S(z_n) - n) / sigma_hat_n at time `n`, with the duality
/// spot-check on 20 probe sites.
pub fn scale_clt(
    ctx: &WalkContext,
    n: u64,
    n_samples: usize,
    seed: u64,
    scale: &ScaleFunction,
) -> Result<ScaleCltReport> {
    let center = scale.z_of(n as f64);
    let sigma_hat = scale.sigma_hat(n as f64);
    if sigma_hat <= 0.0 {
        return Err(Error::Degenerate("sigma_hat is zero".into()));
    }
    let a_hat = scale.mean_return();
    let spread = (sigma_hat / a_hat).max(1.0);
    let n_probes = 20usize;
    let mut probes: Vec<i64> = (0..n_probes)
        .map(|i| {
            let u = -2.5 + 5.0 * i as f64 / (n_probes as f64 - 1.0);
            (center as f64 + u * spread).round() as i64
        })
        .map(|p| p.clamp(1, scale.z_max()))
        .collect();
    probes.dedup();
    let sampler = Sampler::UniformRandom { seed };
    let runs: Vec<PositionRun> = map_samples(n_samples, &sampler, |_, x0| {
        run_position_with_probes(ctx, x0, n, &probes)
    })?;
    let mut stats = Vec::with_capacity(n_samples);
    for r in &runs {
        if r.z < 1 || r.z > scale.z_max() {
            return Err(Error::Precondition(format!(
                "position {} outside the tabulated scale range (z_max {})",
                r.z,
                scale.z_max()
            )));
        }
        stats.push((scale.s[r.z as usize] - n as f64) / sigma_hat);
    }
    let p_hat = scale.hit_rate();
    let null = null_return_sum_ks(center.max(1) as u64, p_hat, n_samples, seed)?;
    let clt = CltReport::build("scale_position", n as i64, &stats, null)?;
    // Duality: z*_n > s - 1/2  <=>  tau_s <= n, counted from the same runs.
    let nf = n_samples as f64;
    let mut max_diff = 0.0f64;
    for (pi, &p) in probes.iter().enumerate() {
        let lhs = runs.iter().filter(|r| r.zstar as f64 > p as f64 - 0.5).count() as f64 / nf;
        let rhs = runs.iter().filter(|r| r.probe_hit[pi]).count() as f64 / nf;
        max_diff = max_diff.max((lhs - rhs).abs());
    }
    let p_mid = 0.5f64;
    let duality_tolerance = 2.0 * (p_mid * (1.0 - p_mid) / nf).sqrt();
    let sandwich10: u64 = runs.iter().map(|r| r.sandwich10).sum();
    Ok(ScaleCltReport {
        clt,
        duality_max_diff: max_diff,
        duality_tolerance,
        duality_pass: max_diff <= duality_tolerance,
        sandwich10_violations: sandwich10,
    })
}

/// Quenched position normality for one environment realization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuenchedCltReport {
    pub clt: CltReport,
    /// Environment-dependent centering b_n = Z(n).
    pub b_n: i64,
    /// Mean and variance of (z_n - b_n)/(sigma sqrt n) when sigma is given.
    pub scaled_mean: Option<f64>,
    pub scaled_var: Option<f64>,
    /// max_{|k| <= n^0.6} |S(b_n + k) - n - k a|.
    pub local_linearity_dev: f64,
    /// log of the deviation over log n (the observed exponent).
    pub local_linearity_exponent: f64,
}

pub fn quenched_clt(
    ctx: &WalkContext,
    n: u64,
    n_samples: usize,
    seed: u64,
    scale: &ScaleFunction,
    sigma_q: Option<f64>,
) -> Result<QuenchedCltReport> {
    let b_n = scale.z_of(n as f64);
    let res = ensemble(
        ctx,
        Observable::Position { time: n },
        n_samples,
        Sampler::UniformRandom { seed },
    )?;
    if res.variance <= 0.0 {
        return Err(Error::Degenerate("position variance is zero".into()));
    }
    let p_hat = scale.hit_rate();
    let null = null_return_sum_ks(b_n.max(1) as u64, p_hat, n_samples, seed)?;
    let clt = CltReport::build("quenched_position", n as i64, &res.samples, null)?;
    let (scaled_mean, scaled_var) = match sigma_q {
        Some(s) if s > 0.0 => {
            let scaled: Vec<f64> = res
                .samples
                .iter()
                .map(|z| (z - b_n as f64) / (s * (n as f64).sqrt()))
                .collect();
            (Some(mean(&scaled)), Some(sample_variance(&scaled)))
        }
        _ => (None, None),
    };
    // Local linearity of S around b_n.
    let a_hat = scale.mean_return();
    let k_max = (n as f64).powf(0.6) as i64;
    let mut dev = 0.0f64;
    for k in -k_max..=k_max {
        let z = b_n + k;
        if z < 1 || z > scale.z_max() {
            continue;
        }
        dev = dev.max((scale.s[z as usize] - n as f64 - k as f64 * a_hat).abs());
    }
    let exponent = if dev > 0.0 {
        dev.ln() / (n as f64).ln()
    } else {
        f64::NEG_INFINITY
    };
    Ok(QuenchedCltReport {
        clt,
        b_n,
        scaled_mean,
        scaled_var,
        local_linearity_dev: dev,
        local_linearity_exponent: exponent,
    })
}

/// Pooled position normality over independent environment draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnealedCltReport {
    pub clt: CltReport,
    pub n_env: usize,
    /// Drift estimate v = mean(z_n)/n over the pooled ensemble.
    pub v_hat: f64,
    /// Pooled variance of z_n over sqrt(n): the annealed sigma^2.
    pub sigma2: f64,
    pub sigma2_se: f64,
    /// Within-environment variance per unit n (quenched component).
    pub sigma2_within: f64,
    /// Between-environment variance of the centering per unit n.
    pub d2_between: f64,
}

pub fn annealed_clt(
    spec: &EnvironmentSpec,
    n: u64,
    n_env: usize,
    n_samples_per_env: usize,
    base_seed: u64,
) -> Result<AnnealedCltReport> {
    if n_env < 2 {
        return Err(Error::Precondition("need at least 2 environment draws".into()));
    }
    let env_seeds = RandomSource::new(base_seed, ENV_STREAM);
    let mut pooled: Vec<f64> = Vec::with_capacity(n_env * n_samples_per_env);
    let mut env_means = Vec::with_capacity(n_env);
    let mut env_vars = Vec::with_capacity(n_env);
    for e in 0..n_env {
        let env = Environment::realize(spec.clone(), env_seeds.u64_at(e as u64))?;
        let ctx = WalkContext::assume_verified(&env);
        let res = ensemble(
            &ctx,
            Observable::Position { time: n },
            n_samples_per_env,
            Sampler::UniformRandom {
                seed: env_seeds.u64_at(1_000_000 + e as u64),
            },
        )?;
        env_means.push(res.mean);
        env_vars.push(res.variance);
        pooled.extend_from_slice(&res.samples);
    }
    let nf = n as f64;
    let v_hat = mean(&pooled) / nf;
    let pooled_var = sample_variance(&pooled);
    let sigma2 = pooled_var / nf;
    let sigma2_se = pooled_var * (2.0 / (pooled.len() as f64 - 1.0)).sqrt() / nf;
    let sigma2_within = mean(&env_vars) / nf;
    let between_raw = sample_variance(&env_means);
    let correction = mean(&env_vars) / n_samples_per_env as f64;
    let d2_between = ((between_raw - correction) / nf).max(0.0);
    let a_hat = 1.0 / v_hat.max(1e-12);
    let p_hat = ((a_hat - 1.0) / 2.0).clamp(1e-12, 0.5);
    let m_eff = (mean(&pooled).round() as u64).max(1);
    let null = null_return_sum_ks(m_eff, p_hat, pooled.len(), base_seed)?;
    let clt = CltReport::build("annealed_position", n as i64, &pooled, null)?;
    Ok(AnnealedCltReport {
        clt,
        n_env,
        v_hat,
        sigma2,
        sigma2_se,
        sigma2_within,
        d2_between,
    })
}

/// Configuration for drift and environment-variance estimation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftConfig {
    /// Sites per environment draw.
    pub m_sites: usize,
    /// Ulam grid for the quadrature route.
    pub grid: usize,
    pub refinement: usize,
    /// Independent environment draws for covariance and between-variance.
    pub env_draws: usize,
    /// Monte Carlo samples for the within-environment variance tail.
    pub sigma_samples: usize,
    /// History-truncation depths to probe.
    pub trunc_depths: Vec<usize>,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            m_sites: 192,
            grid: 1 << 10,
            refinement: 32,
            env_draws: 32,
            sigma_samples: 1 << 14,
            trunc_depths: vec![2, 4, 8, 16, 32],
        }
    }
}

/// Drift diagnostics: the per-site expected return times a_m (by grid
/// quadrature against the pushed density, no Monte Carlo), their limit,
/// the environment covariance decay, and the variance decomposition pieces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftEstimate {
    /// a_m series of the base realization.
    pub a_series: Vec<f64>,
    /// Tail-averaged limit over draws.
    pub a_hat: f64,
    /// Last deviation |E a_m - a_hat| and the fitted geometric rate.
    pub a_err: f64,
    pub a_rate: f64,
    /// Covariance of a at lag ell, averaged over positions, over draws.
    pub cov_curve: Vec<f64>,
    pub cov_decayed: bool,
    /// Between-environment variance of hitting-time sums per site.
    pub d2: f64,
    pub d2_se: f64,
    /// Within-environment hitting-time variance per site (tail average).
    pub sigma_q2: f64,
    pub sigma_q2_se: f64,
    /// |a_{m,k} - a_m| at the probed truncation depths.
    pub trunc_decay: Vec<(usize, f64)>,
}

fn a_series_for_env(env: &Environment, m_sites: usize, grid: usize, refinement: usize) -> Result<Vec<f64>> {
    let ops = build_induced_chain(env, m_sites, grid, refinement)?;
    let mut density = vec![1.0; grid];
    let mut series = Vec::with_capacity(m_sites);
    for (k, op) in ops.iter().enumerate() {
        let gate = env.site_unchecked(k as i64 + 1).gate;
        let p = gate_mass(&density, gate.lo(), gate.width);
        series.push(1.0 + 2.0 * p);
        density = op.apply(&density);
    }
    Ok(series)
}

pub fn drift_estimates(
    spec: &EnvironmentSpec,
    base_seed: u64,
    cfg: &DriftConfig,
) -> Result<DriftEstimate> {
    let env_seeds = RandomSource::new(base_seed, ENV_STREAM);
    let draws = cfg.env_draws.max(2);
    let series: Vec<Vec<f64>> = (0..draws)
        .into_par_iter()
        .map(|e| -> Result<Vec<f64>> {
            let env = Environment::realize(spec.clone(), env_seeds.u64_at(e as u64))?;
            a_series_for_env(&env, cfg.m_sites, cfg.grid, cfg.refinement)
        })
        .collect::<Result<Vec<_>>>()?;
    let m_sites = cfg.m_sites;
    // E a_m over draws, then the limit from the tail.
    let e_a: Vec<f64> = (0..m_sites)
        .map(|j| series.iter().map(|s| s[j]).sum::<f64>() / draws as f64)
        .collect();
    let tail = &e_a[m_sites / 2..];
    let a_hat = mean(tail);
    let a_err = (e_a[m_sites - 1] - a_hat).abs();
    let devs: Vec<f64> = e_a.iter().map(|a| (a - a_hat).abs()).collect();
    let a_rate = {
        let pts: Vec<(f64, f64)> = devs
            .iter()
            .enumerate()
            .take(m_sites / 2)
            .filter(|(_, &d)| d > 1e-14)
            .map(|(i, &d)| (i as f64, d.ln()))
            .collect();
        if pts.len() >= 4 {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            linear_fit(&xs, &ys).0.exp().min(1.0)
        } else {
            0.0
        }
    };
    // Covariance over the environment at increasing lags.
    let max_lag = 24.min(m_sites / 4);
    let burn = m_sites / 4;
    let mut cov_curve = Vec::with_capacity(max_lag + 1);
    for lag in 0..=max_lag {
        let mut acc = 0.0;
        let mut cnt = 0usize;
        for j in burn..(m_sites - lag) {
            let xs: Vec<f64> = series.iter().map(|s| s[j]).collect();
            let ys: Vec<f64> = series.iter().map(|s| s[j + lag]).collect();
            let mx = mean(&xs);
            let my = mean(&ys);
            let cov = xs
                .iter()
                .zip(&ys)
                .map(|(x, y)| (x - mx) * (y - my))
                .sum::<f64>()
                / (draws as f64 - 1.0);
            acc += cov;
            cnt += 1;
        }
        cov_curve.push(acc / cnt as f64);
    }
    let floor = cov_curve[0].abs() * 0.05 + 1e-18;
    let cov_decayed = cov_curve[max_lag.min(cov_curve.len() - 1)].abs() <= floor
        || cov_curve[0].abs() < 1e-16;
    // Between-environment variance of the expected hitting-time sum.
    let sums: Vec<f64> = series.iter().map(|s| s.iter().sum::<f64>()).collect();
    let d2 = sample_variance(&sums) / m_sites as f64;
    let d2_se = d2 * (2.0 / (draws as f64 - 1.0)).sqrt();
    // Within-environment variance: Monte Carlo tail per draw.
    let sigma_list: Vec<f64> = (0..draws)
        .into_par_iter()
        .map(|e| -> Result<f64> {
            let env = Environment::realize(spec.clone(), env_seeds.u64_at(e as u64))?;
            let ctx = WalkContext::assume_verified(&env);
            let res = ensemble(
                &ctx,
                Observable::HittingTime {
                    site: m_sites as i64,
                },
                cfg.sigma_samples,
                Sampler::UniformRandom {
                    seed: env_seeds.u64_at(2_000_000 + e as u64),
                },
            )?;
            Ok(res.variance / m_sites as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    let sigma_q2 = mean(&sigma_list);
    let sigma_q2_se = (sample_variance(&sigma_list) / draws as f64).sqrt();
    // Truncated-history drift at the last site of the base realization.
    let base_env = Environment::realize(spec.clone(), env_seeds.u64_at(0))?;
    let base = &series[0];
    let site = m_sites as i64;
    let gate = base_env.site_unchecked(site).gate;
    let mut trunc_decay = Vec::new();
    for &k in &cfg.trunc_depths {
        let k = k.min(m_sites - 1);
        // Push Lebesgue through only the last k operators before `site`.
        let mut density = vec![1.0; cfg.grid];
        for j in (1..=k).rev() {
            let s = site - j as i64;
            let op = crate::transfer::UlamOperator::build(
                crate::transfer::induced_map_fn(&base_env, s),
                cfg.grid,
                cfg.refinement,
                &format!("trunc@{s}"),
            );
            density = op.apply(&density);
        }
        let a_mk = 1.0 + 2.0 * gate_mass(&density, gate.lo(), gate.width);
        trunc_decay.push((k, (a_mk - base[m_sites - 1]).abs()));
    }
    Ok(DriftEstimate {
        a_series: base.clone(),
        a_hat,
        a_err,
        a_rate,
        cov_curve,
        cov_decayed,
        d2,
        d2_se,
        sigma_q2,
        sigma_q2_se,
        trunc_decay,
    })
}

/// One probed block boundary in the alternating-block test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockProbe {
    pub k: i64,
    /// Observation time: the tabulated expected crossing time of site k^2.
    pub t_k: u64,
    /// KS at times t_k-2, t_k, t_k+2 (all three reported; the S table's
    /// standard error moves t_k by at most a couple of steps).
    pub ks: [f64; 3],
    pub control_ks: [f64; 3],
    /// ks[1] / control_ks[1].
    pub contrast: f64,
}

/// Result of the alternating-block vs iid-control comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CounterexampleReport {
    pub drift_even: f64,
    pub drift_odd: f64,
    pub drift_se: f64,
    pub probes: Vec<BlockProbe>,
    /// All probes exceed 3x the control.
    pub pass_contrast: bool,
    /// All probes exceed the absolute floor 0.05.
    pub pass_absolute: bool,
}

fn constant_env_drift(pair: &SitePair, sites: usize, grid: usize, refinement: usize) -> Result<(f64, f64)> {
    let env = Environment::realize(
        EnvironmentSpec {
            schema_version: SCHEMA_VERSION,
            kind: EnvKind::Constant { pair: *pair },
            window: (-1, sites as i64 + 1),
            constants: None,
        },
        0,
    )?;
    let series = a_series_for_env(&env, sites, grid, refinement)?;
    let tail = &series[sites / 2..];
    let a = mean(tail);
    let se = tail
        .iter()
        .map(|x| (x - a).abs())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    Ok((a, se))
}

/// Position statistics at block-boundary crossing times: the alternating
/// environment against the iid mixture of the same two pairs.
///
/// For each probed k the observation time is the tabulated expected
/// crossing time of the boundary site k^2; the statistic (z - k^2)/k is
/// compared against the best-fitting normal by studentizing with the
/// sample moments. The verdict is the contrast with the matched iid
/// control at the same k and sample count.
pub fn counterexample_check(
    even: &SitePair,
    odd: &SitePair,
    k_list: &[i64],
    n_samples: usize,
    seed: u64,
) -> Result<CounterexampleReport> {
    let (a_even, se_even) = constant_env_drift(even, 160, 1 << 10, 32)?;
    let (a_odd, se_odd) = constant_env_drift(odd, 160, 1 << 10, 32)?;
    let combined_se = se_even + se_odd;
    if (a_even - a_odd).abs() <= 5.0 * combined_se {
        return Err(Error::Precondition(format!(
            "drifts indistinguishable: {a_even} vs {a_odd} (combined se {combined_se:.2e})"
        )));
    }
    let k_max = *k_list.iter().max().unwrap();
    let z_cap = k_max * k_max + 6 * k_max;
    let a_sup = a_even.max(a_odd);
    let window_hi = ((z_cap as f64) * a_sup) as i64 + 16;

    let block_spec = EnvironmentSpec {
        schema_version: SCHEMA_VERSION,
        kind: EnvKind::Counterexample {
            even: *even,
            odd: *odd,
        },
        window: (-2, window_hi),
        constants: None,
    };
    let iid_spec = EnvironmentSpec {
        schema_version: SCHEMA_VERSION,
        kind: EnvKind::Iid {
            alphabet: vec![*even, *odd],
            weights: vec![0.5, 0.5],
        },
        window: (-2, window_hi),
        constants: None,
    };
    let block_env = Environment::realize(block_spec, 0)?;
    let iid_env = Environment::realize(iid_spec, seed)?;
    let block_ctx = WalkContext::assume_verified(&block_env);
    let iid_ctx = WalkContext::assume_verified(&iid_env);

    let scale_samples = (n_samples / 2).max(10_000);
    let block_scale = scale_function(&block_ctx, z_cap, scale_samples, Sampler::StratifiedGrid)?;
    let iid_scale = scale_function(&iid_ctx, z_cap, scale_samples, Sampler::StratifiedGrid)?;

    let ks_at_times = |ctx: &WalkContext, times: [u64; 3], seed: u64| -> Result<[f64; 3]> {
        let t_max = times[2];
        let sampler = Sampler::UniformRandom { seed };
        let zs: Vec<[f64; 3]> = map_samples(n_samples, &sampler, |_, x0| {
            let mut st = crate::walk::WalkerState::start(x0);
            let mut out = [0.0; 3];
            for step_t in 1..=t_max {
                st = crate::walk::step(st, ctx.env)?;
                for (j, &tt) in times.iter().enumerate() {
                    if step_t == tt {
                        out[j] = st.z as f64;
                    }
                }
            }
            Ok(out)
        })?;
        let mut out = [0.0; 3];
        for j in 0..3 {
            let col: Vec<f64> = zs.iter().map(|r| r[j]).collect();
            out[j] = ks_normal(&col)?;
        }
        Ok(out)
    };

    let mut probes = Vec::with_capacity(k_list.len());
    for (ki, &k) in k_list.iter().enumerate() {
        let boundary = k * k;
        let t_block = block_scale.s[boundary as usize].round() as u64;
        let t_iid = iid_scale.s[boundary as usize].round() as u64;
        let ks = ks_at_times(
            &block_ctx,
            [t_block - 2, t_block, t_block + 2],
            seed ^ (0xb10c << 8) ^ ki as u64,
        )?;
        let control_ks = ks_at_times(
            &iid_ctx,
            [t_iid - 2, t_iid, t_iid + 2],
            seed ^ (0x11d << 8) ^ ki as u64,
        )?;
        probes.push(BlockProbe {
            k,
            t_k: t_block,
            ks,
            control_ks,
            contrast: ks[1] / control_ks[1].max(1e-12),
        });
    }
    let pass_contrast = probes.iter().all(|p| p.contrast > 3.0);
    let pass_absolute = probes.iter().all(|p| p.ks[1] > 0.05);
    Ok(CounterexampleReport {
        drift_even: a_even,
        drift_odd: a_odd,
        drift_se: combined_se,
        probes,
        pass_contrast,
        pass_absolute,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    #[test]
    fn studentized_moments_are_exact() {
        let src = RandomSource::new(1, 1);
        let samples: Vec<f64> = (0..5000).map(|i| 3.0 + 2.0 * src.normal_at(i)).collect();
        let s = studentize(&samples).unwrap();
        let m = mean(&s);
        let v = s.iter().map(|x| x * x).sum::<f64>() / s.len() as f64;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ks_of_seeded_normals_is_small() {
        let src = RandomSource::new(7, 2);
        let samples: Vec<f64> = (0..1_000_000).map(|i| src.normal_at(i)).collect();
        let ks = ks_normal(&samples).unwrap();
        assert!(ks < 0.002, "ks {ks}");
    }

    #[test]
    fn ks_rejects_constant_and_small_samples() {
        assert!(ks_normal(&vec![1.0; 1000]).is_err());
        assert!(ks_normal(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn ks_of_two_atoms_matches_explicit_cdf() {
        // Symmetric +-1 atoms: studentized CDF jumps 0 -> 1/2 at -1; the
        // normal has Phi(-1) = 0.1587 there, so the distance is 0.3413.
        let mut samples = vec![-1.0; 5000];
        samples.extend(vec![1.0; 5000]);
        let ks = ks_normal(&samples).unwrap();
        assert!((ks - 0.3413).abs() < 0.01, "ks {ks}");
    }

    #[test]
    fn null_ks_matches_srw_at_half() {
        // At p = 1/2 the null is the simple-random-walk sum; its KS at
        // n = 400 should be near the lattice scale 0.4/sigma = 0.4/10.
        let ks = null_return_sum_ks(400, 0.5, 50_000, 3).unwrap();
        assert!(ks > 0.01 && ks < 0.04, "ks {ks}");
    }

    #[test]
    fn hitting_clt_passes_on_wide_gate_env() {
        let env = presets::wide_gate_environment(0.055, 500).unwrap();
        let ctx = WalkContext::verified(&env, crate::circle_map::ValidationMode::Strict);
        assert!(ctx.verified);
        let report = hitting_clt(&ctx, 400, 20_000, 11).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn hitting_clt_fails_at_n_one() {
        let env = presets::wide_gate_environment(0.055, 10).unwrap();
        let ctx = WalkContext::assume_verified(&env);
        let report = hitting_clt(&ctx, 1, 5_000, 1).unwrap();
        assert!(!report.pass, "{report:?}");
    }

    #[test]
    fn hitting_clt_errors_on_empty_gates() {
        let pair = SitePair::new(
            crate::circle_map::ExpandingMap::linear(4).unwrap(),
            crate::circle_map::Gate::new(0.5, 0.0).unwrap(),
        );
        let env = Environment::realize(
            EnvironmentSpec {
                schema_version: SCHEMA_VERSION,
                kind: EnvKind::Constant { pair },
                window: (-1, 30),
                constants: None,
            },
            0,
        )
        .unwrap();
        let ctx = WalkContext::assume_verified(&env);
        assert!(hitting_clt(&ctx, 20, 1000, 0).is_err());
    }

    #[test]
    fn variance_growth_positive_on_wide_gate_env() {
        let env = presets::wide_gate_environment(0.055, 900).unwrap();
        let ctx = WalkContext::assume_verified(&env);
        let grid = vec![100, 200, 400, 800];
        let vg = variance_growth(&ctx, &grid, 20_000, Sampler::StratifiedGrid, 200, 5).unwrap();
        assert!(vg.pass, "{vg:?}");
        assert!(vg.slope > 0.0);
        // Rough scale: var/n near 4 p (1-p).
        let p = 0.055;
        let expect = 4.0 * p * (1.0 - p);
        assert!(
            (vg.c_hat - expect).abs() < 0.5 * expect,
            "c_hat {} expect {expect}",
            vg.c_hat
        );
    }

    #[test]
    fn variance_growth_degenerate_on_empty_gates() {
        let pair = SitePair::new(
            crate::circle_map::ExpandingMap::linear(4).unwrap(),
            crate::circle_map::Gate::new(0.5, 0.0).unwrap(),
        );
        let env = Environment::realize(
            EnvironmentSpec {
                schema_version: SCHEMA_VERSION,
                kind: EnvKind::Constant { pair },
                window: (-1, 300),
                constants: None,
            },
            0,
        )
        .unwrap();
        let ctx = WalkContext::assume_verified(&env);
        let vg = variance_growth(&ctx, &[50, 100, 250], 2_000, Sampler::StratifiedGrid, 50, 1).unwrap();
        assert!(!vg.pass);
        assert_eq!(vg.c_hat, 0.0);
    }

    #[test]
    fn centered_return_range_within_bounds() {
        let env = presets::wide_gate_environment(0.055, 40).unwrap();
        let (lo, hi) = centered_return_range(&env, 1 << 10, 32, 30).unwrap();
        assert!(lo >= 1.0 && hi <= 2.0, "range [{lo}, {hi}]");
    }

    #[test]
    fn design_constants_examples() {
        // theta = 0.5, c = 1, D' = 1: rhs 0.25; smallest N with 0.5^N < 0.25 is 3.
        let (n, _) = design_constants(1.0, 0.5, 1.0, 2.0, 1.0).unwrap();
        assert_eq!(n, 3);
        // c = 1, C-bar = 2, M = 1: delta = 1/(3 (8 + 4)) = 1/36.
        let (_, d) = design_constants(1.0, 0.5, 1.0, 2.0, 1.0).unwrap();
        assert!((d - 1.0 / 36.0).abs() < 1e-15);
        let (n, _) = design_constants(1.0, 1e-9, 1.0, 2.0, 1.0).unwrap();
        assert_eq!(n, 1);
        assert!(design_constants(1.0, 1.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn scale_function_empty_gates_is_identity() {
        let pair = SitePair::new(
            crate::circle_map::ExpandingMap::linear(4).unwrap(),
            crate::circle_map::Gate::new(0.5, 0.0).unwrap(),
        );
        let env = Environment::realize(
            EnvironmentSpec {
                schema_version: SCHEMA_VERSION,
                kind: EnvKind::Constant { pair },
                window: (-1, 60),
                constants: None,
            },
            0,
        )
        .unwrap();
        let ctx = WalkContext::assume_verified(&env);
        let sf = scale_function(&ctx, 50, 500, Sampler::StratifiedGrid).unwrap();
        for z in 0..=50usize {
            assert_eq!(sf.s[z], z as f64);
        }
        assert_eq!(sf.z_of(7.9), 7);
        assert_eq!(sf.sigma_hat(30.0), 0.0);
    }

    #[test]
    fn scale_function_slope_matches_stationary_gate_mass() {
        let env = presets::wide_gate_environment(0.055, 600).unwrap();
        let ctx = WalkContext::assume_verified(&env);
        let sf = scale_function(&ctx, 500, 40_000, Sampler::StratifiedGrid).unwrap();
        // Slope of S equals the mean return 1 + 2p under the stationary density.
        let (h, _) = crate::transfer::stationary_density(&env, 200, 1 << 10, 32, 300).unwrap();
        let gate = env.site(200).unwrap().gate;
        let p = gate_mass(&h.0, gate.lo(), gate.width);
        let slope = (sf.s[500] - sf.s[100]) / 400.0;
        assert!(
            (slope - (1.0 + 2.0 * p)).abs() < 0.01,
            "slope {slope} vs 1+2p {}",
            1.0 + 2.0 * p
        );
        // Monotone with unit gaps at least.
        for z in 1..500usize {
            assert!(sf.s[z + 1] >= sf.s[z] + 1.0 - 1e-9);
        }
        // Galois inequalities.
        for &s in &[50.0, 123.4, 400.0] {
            let z = sf.z_of(s);
            assert!(sf.s[z as usize] <= s);
            assert!(sf.z_of(sf.s[z as usize]) >= z);
        }
    }

    #[test]
    fn scale_clt_duality_is_pathwise_exact() {
        let env = presets::wide_gate_environment(0.055, 800).unwrap();
        let ctx = WalkContext::assume_verified(&env);
        let sf = scale_function(&ctx, 700, 20_000, Sampler::StratifiedGrid).unwrap();
        let report = scale_clt(&ctx, 600, 10_000, 3, &sf).unwrap();
        assert!(report.duality_max_diff <= report.duality_tolerance, "{report:?}");
        assert_eq!(report.sandwich10_violations, 0);
        assert!(report.clt.ks < 0.15);
    }

    #[test]
    fn annealed_constant_env_reduces_to_quenched() {
        let pair = presets::wide_gate_pair(4, 0.055).unwrap();
        let spec = EnvironmentSpec {
            schema_version: SCHEMA_VERSION,
            kind: EnvKind::Constant { pair },
            window: (-2, 700),
            constants: None,
        };
        let report = annealed_clt(&spec, 500, 4, 5_000, 77).unwrap();
        // Identical draws: the between-environment component vanishes.
        assert!(report.d2_between <= 1e-4, "{report:?}");
        assert!((report.sigma2 - report.sigma2_within).abs() <= 3.0 * report.sigma2_se + 1e-4);
        // v * a = 1 with a the mean return of the pair's constant env.
        let env = Environment::realize(spec, 0).unwrap();
        let ctx = WalkContext::assume_verified(&env);
        let sf = scale_function(&ctx, 500, 20_000, Sampler::StratifiedGrid).unwrap();
        let prod = report.v_hat * sf.mean_return();
        assert!((prod - 1.0).abs() < 0.01, "v*a {prod}");
    }

    #[test]
    fn drift_estimates_empty_gates() {
        let pair = SitePair::new(
            crate::circle_map::ExpandingMap::linear(4).unwrap(),
            crate::circle_map::Gate::new(0.5, 0.0).unwrap(),
        );
        let spec = EnvironmentSpec {
            schema_version: SCHEMA_VERSION,
            kind: EnvKind::Constant { pair },
            window: (-1, 200),
            constants: None,
        };
        let cfg = DriftConfig {
            m_sites: 64,
            env_draws: 4,
            sigma_samples: 1 << 10,
            ..DriftConfig::default()
        };
        let d = drift_estimates(&spec, 5, &cfg).unwrap();
        assert!(d.a_series.iter().all(|&a| (a - 1.0).abs() < 1e-12));
        assert!((d.a_hat - 1.0).abs() < 1e-12);
        assert!(d.d2 < 1e-12);
        assert!(d.sigma_q2 < 1e-12);
    }

    #[test]
    fn drift_estimates_constant_env_converges_geometrically() {
        let pair = presets::wide_gate_pair(4, 0.055).unwrap();
        let spec = EnvironmentSpec {
            schema_version: SCHEMA_VERSION,
            kind: EnvKind::Constant { pair },
            window: (-1, 300),
            constants: None,
        };
        let cfg = DriftConfig {
            m_sites: 96,
            env_draws: 3,
            sigma_samples: 1 << 12,
            ..DriftConfig::default()
        };
        let d = drift_estimates(&spec, 2, &cfg).unwrap();
        assert!(d.a_hat > 1.05 && d.a_hat < 1.25, "a_hat {}", d.a_hat);
        assert!(d.a_series.iter().all(|&a| (1.0..=3.0).contains(&a)));
        assert!(d.a_err < 1e-6, "a_err {}", d.a_err);
        assert!(d.d2 < 1e-10);
        // Cross-check against the Monte Carlo scale slope.
        let env = Environment::realize(spec, 0).unwrap();
        let ctx = WalkContext::assume_verified(&env);
        let sf = scale_function(&ctx, 250, 30_000, Sampler::StratifiedGrid).unwrap();
        assert!((sf.mean_return() - d.a_hat).abs() < 0.01);
    }

    #[test]
    fn drift_truncation_decays_in_iid_env() {
        let (a, b) = presets::distinct_drift_pairs(0.055, 0.02).unwrap();
        let spec = EnvironmentSpec {
            schema_version: SCHEMA_VERSION,
            kind: EnvKind::Iid {
                alphabet: vec![a, b],
                weights: vec![0.5, 0.5],
            },
            window: (-2, 300),
            constants: None,
        };
        let cfg = DriftConfig {
            m_sites: 96,
            env_draws: 8,
            sigma_samples: 1 << 10,
            trunc_depths: vec![1, 2, 4, 8, 16],
            ..DriftConfig::default()
        };
        let d = drift_estimates(&spec, 9, &cfg).unwrap();
        // |a_{m,k} - a_m| decreases with history depth k.
        let first = d.trunc_decay.first().unwrap().1;
        let last = d.trunc_decay.last().unwrap().1;
        assert!(last < first || first < 1e-9, "{:?}", d.trunc_decay);
        assert!(last < 1e-6, "{:?}", d.trunc_decay);
        assert!(d.cov_decayed);
        assert!(d.d2 > 0.0);
    }

    #[test]
    fn counterexample_rejects_identical_pairs() {
        let pair = presets::wide_gate_pair(4, 0.055).unwrap();
        let err = counterexample_check(&pair, &pair, &[10], 1000, 0).unwrap_err();
        assert!(err.to_string().contains("indistinguishable"), "{err}");
    }
}
