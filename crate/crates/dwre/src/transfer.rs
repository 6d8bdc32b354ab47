//! Ulam discretization of transfer operators and the analyses built on it:
//! density iteration, minoration, decay-rate fits, variation inequalities,
//! distortion and covering bounds, operator distances, stationary densities
//! and the martingale-coboundary decomposition.
//!
//! The grid is uniform with `m` cells; a grid vector holds cell averages of
//! a density, so the mean of the vector is the total mass and the
//! column-stochastic Ulam matrix preserves it exactly. Grid variation (sum
//! of wrap-around consecutive differences) is exact on piecewise-constant
//! functions, which is what the test dictionary consists of.

use crate::circle_map::{CircleArc, ExpandingMap, MapConstants};
use crate::environment::Environment;
use crate::error::Error;
use crate::rng::RandomSource;
use crate::util::{fnv1a64, linear_fit, mean, wrap_unit};
use crate::walk::{induced_step, WalkContext};
use crate::Result;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Norm floor below which decay curves are considered numerically dead.
pub const DECAY_FLOOR: f64 = 1e-12;

/// Sparse column-stochastic Ulam matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UlamOperator {
    pub m: usize,
    /// cols[j] lists (row, weight): the fraction of cell j landing in each row.
    pub cols: Vec<Vec<(u32, f64)>>,
    /// Descriptor of the discretized map, embedded in exports.
    pub label: String,
    pub map_hash: u64,
}

impl UlamOperator {
    /// Discretize `map` on `m` cells with `refinement` stratified subsamples
    /// per cell.
    pub fn build(map: impl Fn(f64) -> f64 + Sync, m: usize, refinement: usize, label: &str) -> Self {
        assert!(m.is_power_of_two(), "grid size must be a power of two");
        assert!(refinement >= 16, "refinement must be at least 16");
        let cols: Vec<Vec<(u32, f64)>> = (0..m)
            .into_par_iter()
            .map(|j| {
                let mut entries: Vec<(u32, f64)> = Vec::with_capacity(8);
                for s in 0..refinement {
                    let x = (j as f64 + (s as f64 + 0.5) / refinement as f64) / m as f64;
                    let y = wrap_unit(map(x));
                    let i = ((y * m as f64) as usize).min(m - 1) as u32;
                    match entries.iter_mut().find(|e| e.0 == i) {
                        Some(e) => e.1 += 1.0,
                        None => entries.push((i, 1.0)),
                    }
                }
                let total: f64 = entries.iter().map(|e| e.1).sum();
                for e in &mut entries {
                    e.1 /= total;
                }
                entries.sort_unstable_by_key(|e| e.0);
                entries
            })
            .collect();
        let map_hash = fnv1a64(label.as_bytes());
        Self {
            m,
            cols,
            label: label.to_string(),
            map_hash,
        }
    }

    /// Test-only constructor from explicit columns.
    pub fn from_columns(cols: Vec<Vec<(u32, f64)>>, label: &str) -> Self {
        let m = cols.len();
        let map_hash = fnv1a64(label.as_bytes());
        Self {
            m,
            cols,
            label: label.to_string(),
            map_hash,
        }
    }

    /// Push a density forward: out = A f (column-stochastic action).
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        assert_eq!(f.len(), self.m);
        let mut out = vec![0.0; self.m];
        for (j, col) in self.cols.iter().enumerate() {
            let fj = f[j];
            if fj != 0.0 {
                for &(i, w) in col {
                    out[i as usize] += w * fj;
                }
            }
        }
        out
    }

    /// Pull an observable back: out = A^T g, the cell average of g after the map.
    pub fn apply_koopman(&self, g: &[f64]) -> Vec<f64> {
        assert_eq!(g.len(), self.m);
        self.cols
            .iter()
            .map(|col| col.iter().map(|&(i, w)| w * g[i as usize]).sum())
            .collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        self.cols
            .iter()
            .map(|col| col.iter().map(|e| e.1).sum())
            .collect()
    }

    /// Dense CSV export with a `# m, site, map_hash` header line.
    pub fn to_csv(&self, site: i64) -> String {
        let mut s = format!("# m={}, site={}, map_hash={:016x}\n", self.m, site, self.map_hash);
        let mut row = vec![0.0f64; self.m];
        for i in 0..self.m {
            row.iter_mut().for_each(|v| *v = 0.0);
            for (j, col) in self.cols.iter().enumerate() {
                for &(r, w) in col {
                    if r as usize == i {
                        row[j] = w;
                    }
                }
            }
            s.push_str(
                &row.iter()
                    .map(|v| format!("{v}"))
                    .collect::<Vec<_>>()
                    .join(","),
            );
            s.push('\n');
        }
        s
    }
}

/// Mean-one density on the grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityVector(pub Vec<f64>);

impl DensityVector {
    pub fn uniform(m: usize) -> Self {
        Self(vec![1.0; m])
    }

    pub fn mean(&self) -> f64 {
        mean(&self.0)
    }
}

/// Grid variation: sum of absolute consecutive differences with wrap.
pub fn variation(f: &[f64]) -> f64 {
    let m = f.len();
    (0..m).map(|i| (f[(i + 1) % m] - f[i]).abs()).sum()
}

/// L1 norm against Lebesgue: mean of |f|.
pub fn l1_norm(f: &[f64]) -> f64 {
    f.iter().map(|x| x.abs()).sum::<f64>() / f.len() as f64
}

/// L2 norm against Lebesgue.
pub fn l2_norm(f: &[f64]) -> f64 {
    (f.iter().map(|x| x * x).sum::<f64>() / f.len() as f64).sqrt()
}

/// The bounded-variation norm used throughout: V(f) + ||f||_1.
pub fn bv_norm(f: &[f64]) -> f64 {
    variation(f) + l1_norm(f)
}

/// The induced map at site `n` of an environment, as a plain function.
pub fn induced_map_fn(env: &Environment, n: i64) -> impl Fn(f64) -> f64 + Sync + '_ {
    move |x| {
        let pair = env.site_unchecked(n);
        if pair.gate.contains(x) {
            let prev = env.site_unchecked(n - 1);
            pair.map.apply(prev.map.apply(pair.map.apply(x)))
        } else {
            pair.map.apply(x)
        }
    }
}

/// Build the chain of induced-map operators for sites `1..=n_max`.
pub fn build_induced_chain(
    env: &Environment,
    n_max: usize,
    m: usize,
    refinement: usize,
) -> Result<Vec<UlamOperator>> {
    let (_, hi) = env.window();
    if (n_max as i64) > hi {
        return Err(Error::Window {
            site: n_max as i64,
            lo: env.window().0,
            hi,
        });
    }
    Ok((1..=n_max as i64)
        .map(|n| {
            let pair = env.site_unchecked(n);
            let prev = env.site_unchecked(n - 1);
            let label = format!(
                "induced@{n}:d{}a{}p{}|d{}a{}p{}|gate{}w{}",
                pair.map.degree(),
                pair.map.amplitude(),
                pair.map.phase(),
                prev.map.degree(),
                prev.map.amplitude(),
                prev.map.phase(),
                pair.gate.center,
                pair.gate.width
            );
            UlamOperator::build(induced_map_fn(env, n), m, refinement, &label)
        })
        .collect())
}

/// Build base-map operators for sites `1..=n_max` (gates ignored).
pub fn build_base_chain(
    env: &Environment,
    n_max: usize,
    m: usize,
    refinement: usize,
) -> Result<Vec<UlamOperator>> {
    let (_, hi) = env.window();
    if (n_max as i64) > hi {
        return Err(Error::Window {
            site: n_max as i64,
            lo: env.window().0,
            hi,
        });
    }
    Ok((1..=n_max as i64)
        .map(|n| {
            let map = env.site_unchecked(n).map;
            let label = format!(
                "base@{n}:d{}a{}p{}",
                map.degree(),
                map.amplitude(),
                map.phase()
            );
            UlamOperator::build(move |x| map.apply(x), m, refinement, &label)
        })
        .collect())
}

/// Push a density through a chain of operators in sequence order.
pub fn push_density(ops: &[UlamOperator], f: &DensityVector) -> Result<DensityVector> {
    let mut cur = f.0.clone();
    for op in ops {
        if op.m != cur.len() {
            return Err(Error::Precondition(format!(
                "grid mismatch: vector {} vs operator {}",
                cur.len(),
                op.m
            )));
        }
        cur = op.apply(&cur);
    }
    Ok(DensityVector(cur))
}

/// Outcome of iterating Lebesgue density through the chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MinDensityReport {
    pub sigma: f64,
    pub argmin_step: usize,
    pub argmin_cell: usize,
    /// Minimum cell value after each step.
    pub series: Vec<f64>,
    /// Relative drift of the running minimum over the last 20 steps.
    pub last20_drift: f64,
    pub stable: bool,
}

/// Minimum of the pushed-forward Lebesgue density over steps and cells.
pub fn min_density(ops: &[UlamOperator]) -> MinDensityReport {
    let m = ops[0].m;
    let mut f = vec![1.0; m];
    let mut series = Vec::with_capacity(ops.len());
    let mut sigma = f64::INFINITY;
    let mut argmin = (0usize, 0usize);
    for (step, op) in ops.iter().enumerate() {
        f = op.apply(&f);
        let (cell, &v) = f
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        series.push(v);
        if v < sigma {
            sigma = v;
            argmin = (step + 1, cell);
        }
    }
    let n = series.len();
    let last20_drift = if n >= 21 {
        let prev: f64 = series[n - 21..n - 1].iter().cloned().fold(f64::INFINITY, f64::min);
        let cur = series[n - 1];
        ((prev - cur) / prev.max(1e-300)).max(0.0)
    } else {
        1.0
    };
    MinDensityReport {
        sigma,
        argmin_step: argmin.0,
        argmin_cell: argmin.1,
        series,
        last20_drift,
        stable: last20_drift < 0.01,
    }
}

/// Centered, BV-normalized test functions for decay measurements.
///
/// The trigonometric entries are single harmonics; note that a degree-d
/// linear map sends the k-th harmonic to the (k/d)-th, so a lone harmonic
/// dies as soon as d does not divide its frequency. The sawtooth carries a
/// geometric ladder of harmonics and decays at rate 1/d per step, which is
/// the quantity reported as the trigonometric-mode decay.
pub fn standard_dictionary(m: usize) -> Vec<(String, Vec<f64>)> {
    use std::f64::consts::TAU;
    let mut dict: Vec<(String, Vec<f64>)> = Vec::new();
    let grid = |f: &dyn Fn(f64) -> f64| -> Vec<f64> {
        (0..m).map(|i| f((i as f64 + 0.5) / m as f64)).collect()
    };
    dict.push(("cos".into(), grid(&|x| (TAU * x).cos())));
    dict.push(("sin".into(), grid(&|x| (TAU * x).sin())));
    dict.push(("sawtooth".into(), grid(&|x| x - 0.5)));
    for k in [2usize, 4, 6] {
        let w = 0.5f64.powi(k as i32);
        dict.push((
            format!("dyadic_{}", 1usize << k),
            grid(&|x| if x < w { 1.0 } else { 0.0 }),
        ));
    }
    for (_, f) in dict.iter_mut() {
        let mu = mean(f);
        f.iter_mut().for_each(|v| *v -= mu);
        let nv = bv_norm(f);
        if nv > 0.0 {
            f.iter_mut().for_each(|v| *v /= nv);
        }
    }
    dict
}

/// Decay fit of one test function.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionDecay {
    pub name: String,
    pub l1_curve: Vec<f64>,
    pub v_curve: Vec<f64>,
    /// Fitted geometric rate of the L1 curve, when at least 5 points sit
    /// above the numerical floor.
    pub l1_rate: Option<f64>,
    pub v_rate: Option<f64>,
    pub points_used: usize,
}

/// Aggregated mixing verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixingReport {
    pub m: usize,
    pub n_max: usize,
    /// The larger of the fitted L1 and BV rates, maximized over the dictionary.
    pub theta: f64,
    /// Intercept constant: max over fits of exp(intercept)/|f|_v.
    pub d_const: f64,
    pub per_function: Vec<FunctionDecay>,
    pub accepted_fits: usize,
}

fn fit_rate(curve: &[f64]) -> (Option<f64>, Option<f64>, usize) {
    let pts: Vec<(f64, f64)> = curve
        .iter()
        .enumerate()
        .take_while(|(_, &v)| v > DECAY_FLOOR)
        .map(|(i, &v)| (i as f64, v.ln()))
        .collect();
    if pts.len() < 5 {
        return (None, None, pts.len());
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let (slope, intercept) = linear_fit(&xs, &ys);
    (Some(slope.exp()), Some(intercept.exp()), pts.len())
}

/// Measure norm decay of the dictionary under the operator chain and fit
/// the geometric rate.
pub fn decay_rate(
    ops: &[UlamOperator],
    dictionary: &[(String, Vec<f64>)],
    n_max: usize,
) -> Result<MixingReport> {
    let m = ops[0].m;
    let n_max = n_max.min(ops.len());
    let mut per_function = Vec::new();
    let mut theta = 0.0f64;
    let mut d_const = 0.0f64;
    let mut accepted = 0usize;
    for (name, f0) in dictionary {
        if f0.len() != m {
            return Err(Error::Precondition(format!(
                "dictionary entry {name} has wrong grid"
            )));
        }
        if mean(f0).abs() > 1e-8 {
            return Err(Error::Precondition(format!(
                "dictionary entry {name} is not mean-zero"
            )));
        }
        if bv_norm(f0) < 1e-14 {
            return Err(Error::Precondition(format!(
                "dictionary entry {name} is numerically zero"
            )));
        }
        let mut f = f0.clone();
        let mut l1_curve = vec![l1_norm(&f)];
        let mut v_curve = vec![variation(&f)];
        for op in ops.iter().take(n_max) {
            f = op.apply(&f);
            l1_curve.push(l1_norm(&f));
            v_curve.push(variation(&f));
        }
        let (l1_rate, l1_icpt, used) = fit_rate(&l1_curve);
        let (v_rate, v_icpt, _) = fit_rate(&v_curve);
        if let Some(r) = l1_rate {
            theta = theta.max(r);
            d_const = d_const.max(l1_icpt.unwrap_or(0.0));
            accepted += 1;
        }
        if let Some(r) = v_rate {
            theta = theta.max(r);
            d_const = d_const.max(v_icpt.unwrap_or(0.0));
        }
        per_function.push(FunctionDecay {
            name: name.clone(),
            l1_curve,
            v_curve,
            l1_rate,
            v_rate,
            points_used: used,
        });
    }
    Ok(MixingReport {
        m,
        n_max,
        theta,
        d_const,
        per_function,
        accepted_fits: accepted,
    })
}

/// Variation-inequality measurement: V(Pf) <= rho V(f) + C ||f||_1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariationInequalityReport {
    /// The contraction factor 3/gamma the bound is checked against.
    pub rho: f64,
    /// Smallest C making the bound hold over all trials.
    pub fitted_c: f64,
    /// Worst observed V(Pf)/V(f).
    pub worst_ratio: f64,
    pub trials: usize,
}

/// Random piecewise-constant test function with variation in [0.1, 10].
fn random_bv_function(m: usize, src: &RandomSource, trial: u64) -> Vec<f64> {
    let sub = src.substream(trial);
    let pieces = 4 + (sub.u64_at(0) % 29) as usize;
    let mut breaks: Vec<usize> = (0..pieces).map(|p| (sub.u64_at(10 + p as u64) % m as u64) as usize).collect();
    breaks.sort_unstable();
    breaks.dedup();
    let mut f = vec![0.0; m];
    let mut val = sub.normal_at(1000);
    let mut b_iter = breaks.iter().peekable();
    for (i, v) in f.iter_mut().enumerate() {
        if let Some(&&b) = b_iter.peek() {
            if i == b {
                b_iter.next();
                val = sub.normal_at(2000 + i as u64);
            }
        }
        *v = val;
    }
    let v = variation(&f);
    if v > 1e-12 {
        let target = 0.1 + 9.9 * sub.f64_at(3);
        let scale = target / v;
        f.iter_mut().for_each(|x| *x *= scale);
    }
    f
}

/// Check the variation inequality with contraction factor `3/gamma` on
/// random piecewise-constant test functions and fit the additive constant.
///
/// A fitted constant beyond the generous analytic cap signals an
/// implementation bug and is returned as an error.
pub fn variation_inequality(
    op: &UlamOperator,
    gamma: f64,
    k: f64,
    k1: f64,
    trials: usize,
    seed: u64,
) -> Result<VariationInequalityReport> {
    let rho = 3.0 / gamma;
    let src = RandomSource::new(seed, 0x4c59);
    let mut fitted_c = 0.0f64;
    let mut worst_ratio = 0.0f64;
    for t in 0..trials {
        let f = random_bv_function(op.m, &src, t as u64);
        let vf = variation(&f);
        if vf < 1e-9 {
            continue;
        }
        let pf = op.apply(&f);
        let vpf = variation(&pf);
        let l1 = l1_norm(&f);
        worst_ratio = worst_ratio.max(vpf / vf);
        if l1 > 1e-12 {
            fitted_c = fitted_c.max((vpf - rho * vf) / l1);
        }
    }
    let cap = k1 / (gamma * gamma) + 4.0 * (k + 2.0);
    if !fitted_c.is_finite() || fitted_c > cap {
        return Err(Error::Degenerate(format!(
            "variation inequality violated beyond slack: fitted C {fitted_c} exceeds cap {cap}"
        )));
    }
    Ok(VariationInequalityReport {
        rho,
        fitted_c: fitted_c.max(0.0),
        worst_ratio,
        trials,
    })
}

/// Distortion constant of infinite compositions:
/// K0 = prod_{n>=0} (1 + (k1/gamma) / gamma^n), truncated once factors fall
/// below 1 + 1e-16.
pub fn distortion_bound(constants: &MapConstants) -> f64 {
    assert!(constants.gamma > 1.0);
    let c = constants.k1 / constants.gamma;
    let mut k0 = 1.0f64;
    let mut term = c;
    for _ in 0..10_000 {
        if term < 1e-16 {
            break;
        }
        k0 *= 1.0 + term;
        term /= constants.gamma;
    }
    k0
}

/// Result of tracking an interval until its induced images cover the circle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoveringReport {
    pub steps: usize,
    /// Logarithmic bound derived from gamma/3 growth, when gamma > 3.
    pub bound: Option<usize>,
    pub within_bound: bool,
}

fn normalize_union(mut arcs: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    arcs.retain(|a| a.1 > 0.0);
    if arcs.iter().any(|a| a.1 >= 1.0) {
        return vec![(0.0, 1.0)];
    }
    arcs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(arcs.len());
    for (s, l) in arcs {
        if let Some(last) = merged.last_mut() {
            if s <= last.0 + last.1 + 1e-15 {
                let end = (last.0 + last.1).max(s + l);
                last.1 = end - last.0;
                continue;
            }
        }
        merged.push((s, l));
    }
    // Wrap-around merge of the last arc into the first.
    if merged.len() > 1 {
        let (s0, l0) = merged[0];
        let &(sl, ll) = merged.last().unwrap();
        if sl + ll >= 1.0 + s0 - 1e-15 {
            let end_into_first = sl + ll - 1.0;
            if end_into_first >= s0 {
                let new_len = (s0 + l0).max(end_into_first) - s0;
                merged[0] = (s0, new_len.min(1.0));
                merged.pop();
            }
        }
    }
    if merged.len() == 1 && merged[0].1 >= 1.0 {
        return vec![(0.0, 1.0)];
    }
    merged
}

fn union_length(arcs: &[(f64, f64)]) -> f64 {
    arcs.iter().map(|a| a.1).sum()
}

/// Split an arc at a set of circle points, returning subarcs.
fn split_arc(start: f64, len: f64, cuts: &[f64]) -> Vec<(f64, f64)> {
    let mut offsets: Vec<f64> = cuts
        .iter()
        .map(|&c| (c - start).rem_euclid(1.0))
        .filter(|&o| o > 1e-15 && o < len - 1e-15)
        .collect();
    offsets.sort_by(|a, b| a.partial_cmp(b).unwrap());
    offsets.dedup();
    let mut out = Vec::with_capacity(offsets.len() + 1);
    let mut prev = 0.0;
    for o in offsets {
        out.push((wrap_unit(start + prev), o - prev));
        prev = o;
    }
    out.push((wrap_unit(start + prev), len - prev));
    out
}

enum ArcImage {
    Arc(f64, f64),
    Full,
}

fn image_through(maps: &[&ExpandingMap], start: f64, len: f64) -> ArcImage {
    let mut s = start;
    let mut l = len;
    for map in maps {
        let a = map.lift(s);
        let b = map.lift(s + l);
        l = b - a;
        if l >= 1.0 {
            return ArcImage::Full;
        }
        s = wrap_unit(a);
    }
    ArcImage::Arc(s, l)
}

/// Smallest number of induced steps after which the images of `interval`
/// cover the circle. Pieces are split at gate endpoints; gate pieces travel
/// through the three-fold excursion branch.
pub fn covering_time(env: &Environment, interval: CircleArc) -> Result<CoveringReport> {
    if interval.is_empty() {
        return Err(Error::Precondition("interval must have positive length".into()));
    }
    let constants = env.constants();
    let bound = if constants.gamma > 3.0 {
        Some(((1.0 / interval.len).ln() / (constants.gamma / 3.0).ln()).ceil() as usize + 8)
    } else {
        None
    };
    let hard_cap = bound.unwrap_or(4000).max(64);
    let mut arcs = vec![(interval.start, interval.len)];
    if interval.len >= 1.0 {
        return Ok(CoveringReport {
            steps: 0,
            bound,
            within_bound: true,
        });
    }
    let (_, hi) = env.window();
    for step in 1..=hard_cap {
        let n = step as i64;
        if n > hi {
            return Err(Error::Window {
                site: n,
                lo: env.window().0,
                hi,
            });
        }
        let pair = env.site_unchecked(n);
        let prev = env.site_unchecked(n - 1);
        let gate = pair.gate;
        let cuts = if gate.width > 0.0 {
            vec![gate.lo(), wrap_unit(gate.lo() + gate.width)]
        } else {
            Vec::new()
        };
        let mut next: Vec<(f64, f64)> = Vec::new();
        let mut full = false;
        'outer: for &(s, l) in &arcs {
            for (ps, pl) in split_arc(s, l, &cuts) {
                let mid = wrap_unit(ps + pl / 2.0);
                let img = if gate.contains(mid) {
                    image_through(&[&pair.map, &prev.map, &pair.map], ps, pl)
                } else {
                    image_through(&[&pair.map], ps, pl)
                };
                match img {
                    ArcImage::Full => {
                        full = true;
                        break 'outer;
                    }
                    ArcImage::Arc(a, b) => next.push((a, b)),
                }
            }
        }
        if full {
            return Ok(CoveringReport {
                steps: step,
                bound,
                within_bound: bound.map_or(true, |b| step <= b),
            });
        }
        arcs = normalize_union(next);
        if union_length(&arcs) >= 1.0 - 1e-12 {
            return Ok(CoveringReport {
                steps: step,
                bound,
                within_bound: bound.map_or(true, |b| step <= b),
            });
        }
    }
    Err(Error::Degenerate(format!(
        "interval failed to cover the circle within {hard_cap} steps"
    )))
}

/// Dictionary distances between two operators on the same grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OperatorDistance {
    /// max over the dictionary of ||Pf - Qf||_1; a lower bound on d_1.
    pub d1: f64,
    /// Same with the L2 norm.
    pub d2: f64,
}

pub fn operator_distance(
    p: &UlamOperator,
    q: &UlamOperator,
    dictionary: &[(String, Vec<f64>)],
) -> Result<OperatorDistance> {
    if p.m != q.m {
        return Err(Error::Precondition("grid mismatch".into()));
    }
    let mut d1 = 0.0f64;
    let mut d2 = 0.0f64;
    for (_, f) in dictionary {
        let pf = p.apply(f);
        let qf = q.apply(f);
        let diff: Vec<f64> = pf.iter().zip(&qf).map(|(a, b)| a - b).collect();
        d1 = d1.max(l1_norm(&diff));
        d2 = d2.max(l2_norm(&diff));
    }
    Ok(OperatorDistance { d1, d2 })
}

/// Martingale-coboundary decomposition along an operator chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MartingaleDecomposition {
    /// ||psi_n||_2 for n = 0 .. n_max-1.
    pub psi_l2: Vec<f64>,
    /// sup over n of |H_n|_v.
    pub h_sup_v: f64,
    /// Largest number of live series terms kept at any step.
    pub max_live_terms: usize,
    /// Minimum of the pushed densities encountered (the minoration floor used).
    pub sigma_min: f64,
    /// Max over sampled orbits of the reconstruction defect, when computed.
    pub residual_max: Option<f64>,
}

/// Compute the decomposition for observables `fs[k]` (k = 0..=n_max, grid
/// functions; centered internally against the pushed density).
///
/// `sigma_floor` is the verified minoration constant; any pushed density
/// dipping below half of it is a hard error since the decomposition divides
/// by it. Setting `orbit_probes > 0` additionally evaluates the
/// reconstruction identity along that many exact orbits.
pub fn martingale_decomposition(
    env: &Environment,
    ops: &[UlamOperator],
    fs: &[Vec<f64>],
    n_max: usize,
    sigma_floor: f64,
    orbit_probes: usize,
) -> Result<MartingaleDecomposition> {
    let m = ops[0].m;
    if fs.len() < n_max + 1 || ops.len() < n_max {
        return Err(Error::Precondition(
            "need fs[0..=n_max] and ops[1..=n_max]".into(),
        ));
    }
    // Densities d_k = P_k ... P_1 1 and centered observables.
    let mut densities: Vec<Vec<f64>> = Vec::with_capacity(n_max + 1);
    densities.push(vec![1.0; m]);
    for k in 0..n_max {
        let d = ops[k].apply(&densities[k]);
        let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
        if dmin < sigma_floor / 2.0 {
            return Err(Error::Degenerate(format!(
                "pushed density dipped to {dmin} below half the verified floor {sigma_floor}"
            )));
        }
        densities.push(d);
    }
    let centered: Vec<Vec<f64>> = (0..=n_max)
        .map(|k| {
            let c = mean(
                &fs[k]
                    .iter()
                    .zip(&densities[k])
                    .map(|(f, d)| f * d)
                    .collect::<Vec<f64>>(),
            );
            fs[k].iter().map(|f| f - c).collect()
        })
        .collect();
    // H_n via live exponentially-decaying series terms.
    let mut live: Vec<Vec<f64>> = Vec::new();
    let mut h: Vec<Vec<f64>> = vec![vec![0.0; m]]; // H_0 = 0
    let mut h_sup_v = 0.0f64;
    let mut max_live = 0usize;
    for n in 1..=n_max {
        let op = &ops[n - 1];
        for t in live.iter_mut() {
            *t = op.apply(t);
        }
        let newest: Vec<f64> = centered[n - 1]
            .iter()
            .zip(&densities[n - 1])
            .map(|(f, d)| f * d)
            .collect();
        live.push(op.apply(&newest));
        live.retain(|t| bv_norm(t) > DECAY_FLOOR);
        if live.len() > 200 {
            let drop = live.len() - 200;
            live.drain(0..drop);
        }
        max_live = max_live.max(live.len());
        let mut sum = vec![0.0; m];
        for t in &live {
            for (s, v) in sum.iter_mut().zip(t) {
                *s += v;
            }
        }
        let hn: Vec<f64> = sum.iter().zip(&densities[n]).map(|(s, d)| s / d).collect();
        h_sup_v = h_sup_v.max(bv_norm(&hn));
        h.push(hn);
    }
    // psi_n = centered f_n + H_n - H_{n+1} o G_{n+1}, for n = 0..n_max-1.
    let mut psi: Vec<Vec<f64>> = Vec::with_capacity(n_max);
    for n in 0..n_max {
        let pulled = ops[n].apply_koopman(&h[n + 1]);
        psi.push(
            (0..m)
                .map(|i| centered[n][i] + h[n][i] - pulled[i])
                .collect(),
        );
    }
    let psi_l2: Vec<f64> = psi.iter().map(|p| l2_norm(p)).collect();
    let sigma_min = densities
        .iter()
        .flat_map(|d| d.iter().cloned())
        .fold(f64::INFINITY, f64::min);

    // Reconstruction defect along exact orbits:
    // sum_k f~_k(G_{1,k} x) - sum_k psi_k(G_{1,k} x) - H_n(G_{1,n} x),
    // with grid functions read off at the orbit's cell.
    let residual_max = if orbit_probes > 0 {
        let ctx = WalkContext::assume_verified(env);
        let cell = |x: f64| ((x * m as f64) as usize).min(m - 1);
        let mut worst = 0.0f64;
        for p in 0..orbit_probes {
            let x0 = (p as f64 + 0.5) / orbit_probes as f64;
            let mut y = x0;
            let mut acc = 0.0;
            for (k, (c, ps)) in centered.iter().zip(&psi).enumerate() {
                let j = cell(y);
                acc += c[j] - ps[j];
                let (ny, _) = induced_step(&ctx, y, k as i64 + 1)?;
                y = ny;
            }
            let defect = (acc - h[n_max][cell(y)]).abs();
            worst = worst.max(defect);
        }
        Some(worst)
    } else {
        None
    };
    Ok(MartingaleDecomposition {
        psi_l2,
        h_sup_v,
        max_live_terms: max_live,
        sigma_min,
        residual_max,
    })
}

/// Stationary density at a site: the limit of pushing Lebesgue density from
/// ever deeper in the past. Returns the density and the observed geometric
/// convergence rate.
pub fn stationary_density(
    env: &Environment,
    site: i64,
    m: usize,
    refinement: usize,
    k_max: usize,
) -> Result<(DensityVector, f64)> {
    let mut prev: Option<Vec<f64>> = None;
    let mut diffs: Vec<f64> = Vec::new();
    // Operators repeat below the window's lower edge, so cache by site.
    let lo = env.window().0;
    let mut cache: std::collections::HashMap<i64, UlamOperator> = std::collections::HashMap::new();
    for k in 0..=k_max {
        let mut f = vec![1.0; m];
        for j in (0..=k).rev() {
            let s = site - j as i64;
            let key = s.max(lo);
            let op = cache.entry(key).or_insert_with(|| {
                UlamOperator::build(induced_map_fn(env, key), m, refinement, &format!("induced@{key}"))
            });
            f = op.apply(&f);
        }
        if let Some(p) = prev {
            let diff: Vec<f64> = f.iter().zip(&p).map(|(a, b)| a - b).collect();
            let d = bv_norm(&diff);
            diffs.push(d);
            if d < 1e-10 {
                let rate = observed_rate(&diffs);
                return Ok((DensityVector(f), rate));
            }
        }
        prev = Some(f);
    }
    Err(Error::Degenerate(format!(
        "stationary density did not converge within {k_max} steps (last diff {:.3e})",
        diffs.last().copied().unwrap_or(f64::NAN)
    )))
}

fn observed_rate(diffs: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = diffs
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > DECAY_FLOOR)
        .map(|(i, &d)| (i as f64, d.ln()))
        .collect();
    if pts.len() < 3 {
        return 0.0;
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    linear_fit(&xs, &ys).0.exp()
}

/// Mass of a gate under a grid density, with partial cells weighted by
/// their overlap fraction.
pub fn gate_mass(density: &[f64], gate_lo: f64, width: f64) -> f64 {
    let m = density.len();
    if width <= 0.0 {
        return 0.0;
    }
    let mut mass = 0.0;
    let cell = 1.0 / m as f64;
    let first = (gate_lo * m as f64).floor() as usize % m;
    let mut covered = 0.0;
    let mut i = first;
    let mut offset = gate_lo - (first as f64) * cell;
    while covered < width {
        let avail = cell - offset;
        let take = avail.min(width - covered);
        mass += density[i % m] * take;
        covered += take;
        offset = 0.0;
        i += 1;
    }
    mass
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    fn doubling_op(m: usize) -> UlamOperator {
        let t = ExpandingMap::doubling();
        UlamOperator::build(move |x| t.apply(x), m, 64, "doubling")
    }

    #[test]
    fn doubling_matrix_is_exact_halves() {
        let m = 8usize;
        let op = doubling_op(m);
        for (j, col) in op.cols.iter().enumerate() {
            // Cell j maps onto cells (2j, 2j+1) mod 8 with weight 1/2 each.
            let mut expect = [(2 * j % m) as u32, ((2 * j + 1) % m) as u32];
            expect.sort_unstable();
            assert_eq!(col.len(), 2, "column {j}");
            assert_eq!([col[0].0, col[1].0], expect);
            assert!((col[0].1 - 0.5).abs() < 1e-15);
            assert!((col[1].1 - 0.5).abs() < 1e-15);
        }
        let f = vec![1.0; m];
        let g = op.apply(&f);
        for v in g {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_action_splits_columns() {
        // On a finer grid with even refinement each column holds two weights 1/2.
        let op = doubling_op(64);
        for col in &op.cols {
            assert_eq!(col.len(), 2);
            assert!((col[0].1 - 0.5).abs() < 1e-12);
            assert!((col[1].1 - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn column_sums_are_one() {
        let env = presets::wide_gate_environment(0.055, 20).unwrap();
        let ops = build_induced_chain(&env, 5, 1 << 10, 64).unwrap();
        for op in &ops {
            for s in op.column_sums() {
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mass_conservation_random_densities() {
        let env = presets::wide_gate_environment(0.055, 20).unwrap();
        let op = &build_induced_chain(&env, 1, 1 << 10, 64).unwrap()[0];
        let src = RandomSource::new(3, 9);
        for t in 0..100 {
            let f = random_bv_function(op.m, &src, t);
            let g = op.apply(&f);
            assert!((mean(&g) - mean(&f)).abs() <= 1e-10);
        }
    }

    #[test]
    fn duality_spot_check() {
        let t = ExpandingMap::new(4, 0.3, 0.0).unwrap();
        let m = 1 << 11;
        let op = UlamOperator::build(move |x| t.apply(x), m, 64, "d4a03");
        // <Pf, g> = <f, A^T g> exactly.
        let src = RandomSource::new(8, 1);
        let f = random_bv_function(m, &src, 0);
        let g = random_bv_function(m, &src, 1);
        let pf = op.apply(&f);
        let lhs = mean(&pf.iter().zip(&g).map(|(a, b)| a * b).collect::<Vec<f64>>());
        let back = op.apply_koopman(&g);
        let rhs = mean(&f.iter().zip(&back).map(|(a, b)| a * b).collect::<Vec<f64>>());
        assert!((lhs - rhs).abs() < 1e-12);
        // And A^T g approximates g o T with error bounded by the grid modulus.
        let got: Vec<f64> = (0..m)
            .map(|i| {
                let x = (i as f64 + 0.5) / m as f64;
                let smooth = (std::f64::consts::TAU * t.apply(x)).sin();
                smooth
            })
            .collect();
        let gsmooth: Vec<f64> = (0..m)
            .map(|i| ((i as f64 + 0.5) / m as f64 * std::f64::consts::TAU).sin())
            .collect();
        let pulled = op.apply_koopman(&gsmooth);
        let err = pulled
            .iter()
            .zip(&got)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        // Lipschitz constants: |g'| <= 2pi, map expands by <= 4.3.
        assert!(err <= 2.0 * std::f64::consts::TAU * 4.3 / m as f64 * 2.0, "err {err}");
    }

    #[test]
    fn uniform_density_invariant_for_doubling() {
        let op = doubling_op(1 << 10);
        let f = DensityVector::uniform(op.m);
        let g = push_density(&[op.clone(), op.clone(), op], &f).unwrap();
        assert!(g.0.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn doubling_annihilates_single_harmonic() {
        let m = 1 << 10;
        let op = doubling_op(m);
        let f: Vec<f64> = (0..m)
            .map(|i| (std::f64::consts::TAU * (i as f64 + 0.5) / m as f64).cos())
            .collect();
        let g = op.apply(&f);
        assert!(l1_norm(&g) <= 1e-3, "residue {}", l1_norm(&g));
    }

    #[test]
    fn doubling_halves_sawtooth_exactly() {
        let m = 1 << 10;
        let op = doubling_op(m);
        let f: Vec<f64> = (0..m).map(|i| (i as f64 + 0.5) / m as f64 - 0.5).collect();
        let g = op.apply(&f);
        let ratio = l1_norm(&g) / l1_norm(&f);
        assert!((ratio - 0.5).abs() < 1e-3, "ratio {ratio}");
    }

    #[test]
    fn min_density_doubling_is_one() {
        let op = doubling_op(1 << 10);
        let chain: Vec<UlamOperator> = (0..30).map(|_| op.clone()).collect();
        let r = min_density(&chain);
        assert!((r.sigma - 1.0).abs() < 1e-12);
        assert!(r.stable);
    }

    #[test]
    fn min_density_positive_on_wide_gate_env() {
        let env = presets::wide_gate_environment(0.055, 80).unwrap();
        let ops = build_induced_chain(&env, 60, 1 << 11, 32).unwrap();
        let r = min_density(&ops);
        assert!(r.sigma > 0.0, "sigma {}", r.sigma);
        assert!(r.stable, "drift {}", r.last20_drift);
    }

    #[test]
    fn min_density_flags_collapse() {
        // Synthetic chain funneling mass into one cell.
        let m = 16;
        let mut cols = Vec::new();
        for j in 0..m {
            // Leak weight toward cell 0.
            cols.push(vec![(0u32, 0.3), (j as u32, 0.7)]);
        }
        let op = UlamOperator::from_columns(cols, "leaky");
        let chain: Vec<UlamOperator> = (0..40).map(|_| op.clone()).collect();
        let r = min_density(&chain);
        assert!(!r.stable || r.sigma < 1e-3, "{r:?}");
    }

    #[test]
    fn decay_rates_for_doubling() {
        let m = 1 << 11;
        let op = doubling_op(m);
        let chain: Vec<UlamOperator> = (0..40).map(|_| op.clone()).collect();
        let dict = standard_dictionary(m);
        let report = decay_rate(&chain, &dict, 40).unwrap();
        let saw = report
            .per_function
            .iter()
            .find(|f| f.name == "sawtooth")
            .unwrap();
        let rate = saw.l1_rate.expect("sawtooth decays geometrically");
        assert!((rate - 0.5).abs() < 0.05, "sawtooth rate {rate}");
        // Single harmonics die immediately: no fit.
        let cos = report.per_function.iter().find(|f| f.name == "cos").unwrap();
        assert!(cos.l1_rate.is_none());
        assert!(report.theta < 0.9);
    }

    #[test]
    fn decay_rejects_non_centered_input() {
        let m = 1 << 8;
        let op = doubling_op(m);
        let dict = vec![("const".to_string(), vec![1.0; m])];
        assert!(decay_rate(&[op], &dict, 5).is_err());
    }

    #[test]
    fn variation_inequality_on_degree4() {
        let t = ExpandingMap::linear(4).unwrap();
        let m = 1 << 11;
        let op = UlamOperator::build(move |x| t.apply(x), m, 64, "lin4");
        let r = variation_inequality(&op, 4.0, 4.0, 0.0, 100, 5).unwrap();
        assert!(r.fitted_c < 10.0, "{r:?}");
        assert!(r.worst_ratio <= 3.0 / 4.0 + 0.5);
        // Constant functions map to constants: zero variation.
        let f = vec![2.5; m];
        assert!(variation(&op.apply(&f)) < 1e-12);
    }

    #[test]
    fn variation_inequality_indicator_case() {
        let m = 1 << 10;
        let op = doubling_op(m);
        let f: Vec<f64> = (0..m).map(|i| if i < m / 2 { 1.0 } else { 0.0 }).collect();
        let pf = op.apply(&f);
        let bound = (3.0 / 2.0) * variation(&f) + 10.0 * l1_norm(&f);
        assert!(variation(&pf) <= bound);
        // The pushforward is the constant 1/2.
        assert!(pf.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn distortion_bound_values() {
        let mk = |gamma: f64, k1: f64| MapConstants {
            gamma,
            k: gamma,
            k1,
            delta0: 0.01,
            c: 0.01,
        };
        assert_eq!(distortion_bound(&mk(3.5, 0.0)), 1.0);
        // Independent oracle: fixed 200-term product.
        let c = std::f64::consts::PI / 3.5;
        let mut expect = 1.0;
        for n in 0..200 {
            expect *= 1.0 + c / 3.5f64.powi(n);
        }
        let got = distortion_bound(&mk(3.5, std::f64::consts::PI));
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        assert!(distortion_bound(&mk(2.0, 1.0)).is_finite());
    }

    #[test]
    fn covering_time_doubling_dyadic() {
        let env = presets::srw_environment(50).unwrap();
        // Remove the gate to get the pure doubling map.
        let pair = crate::circle_map::SitePair::new(
            ExpandingMap::doubling(),
            crate::circle_map::Gate::new(0.5, 0.0).unwrap(),
        );
        let env = Environment::realize(
            crate::environment::EnvironmentSpec {
                schema_version: crate::environment::SCHEMA_VERSION,
                kind: crate::environment::EnvKind::Constant { pair },
                window: env.window(),
                constants: None,
            },
            0,
        )
        .unwrap();
        for k in 1..=8 {
            let arc = CircleArc::new(0.1, 0.5f64.powi(k));
            let r = covering_time(&env, arc).unwrap();
            assert_eq!(r.steps, k as usize, "2^-{k}");
        }
        let full = covering_time(&env, CircleArc::new(0.0, 1.0)).unwrap();
        assert_eq!(full.steps, 0);
    }

    #[test]
    fn covering_time_wide_gate_env_within_bound() {
        let env = presets::wide_gate_environment(0.055, 100).unwrap();
        let r = covering_time(&env, CircleArc::new(0.37, 1e-3)).unwrap();
        assert!(r.within_bound, "{r:?}");
        let bound = ((1.0f64 / 1e-3).ln() / (4.0f64 / 3.0).ln()).ceil() as usize + 8;
        assert!(r.steps <= bound);
    }

    #[test]
    fn operator_distance_zero_on_self_and_linear_in_width() {
        let m = 1 << 11;
        let dict = standard_dictionary(m);
        let t = ExpandingMap::linear(4).unwrap();
        let base = UlamOperator::build(move |x| t.apply(x), m, 64, "lin4");
        let d = operator_distance(&base, &base, &dict).unwrap();
        assert_eq!(d.d1, 0.0);
        // Induced operator vs base, sweeping the gate width.
        let mut dist = Vec::new();
        for &w in &[4e-3, 2e-3, 1e-3] {
            let pair = presets::wide_gate_pair(4, w).unwrap();
            let env = Environment::realize(
                crate::environment::EnvironmentSpec {
                    schema_version: crate::environment::SCHEMA_VERSION,
                    kind: crate::environment::EnvKind::Constant { pair },
                    window: (-1, 5),
                    constants: None,
                },
                0,
            )
            .unwrap();
            let induced = build_induced_chain(&env, 1, m, 64).unwrap().remove(0);
            let d = operator_distance(&induced, &base, &dict).unwrap();
            assert!(d.d1 <= 10.0 * w, "width {w}: d1 {}", d.d1);
            dist.push(d.d1);
        }
        // Halving the width roughly halves the distance.
        let r1 = dist[1] / dist[0];
        let r2 = dist[2] / dist[1];
        assert!(r1 > 0.3 && r1 < 0.8, "ratio {r1}");
        assert!(r2 > 0.3 && r2 < 0.8, "ratio {r2}");
    }

    #[test]
    fn stationary_density_doubling_is_uniform() {
        let env = {
            let pair = crate::circle_map::SitePair::new(
                ExpandingMap::doubling(),
                crate::circle_map::Gate::new(0.5, 0.0).unwrap(),
            );
            Environment::realize(
                crate::environment::EnvironmentSpec {
                    schema_version: crate::environment::SCHEMA_VERSION,
                    kind: crate::environment::EnvKind::Constant { pair },
                    window: (-1, 10),
                    constants: None,
                },
                0,
            )
            .unwrap()
        };
        let (h, _) = stationary_density(&env, 5, 1 << 9, 32, 50).unwrap();
        assert!(h.0.iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn stationary_density_constant_env_positive_mean_one() {
        let env = presets::wide_gate_environment(0.055, 30).unwrap();
        let (h, rate) = stationary_density(&env, 20, 1 << 10, 32, 200).unwrap();
        assert!((h.mean() - 1.0).abs() < 1e-9);
        assert!(h.0.iter().all(|&v| v > 0.0));
        assert!(rate < 1.0);
        // Cross-check against plain power iteration of the single operator.
        let op = build_induced_chain(&env, 1, 1 << 10, 32).unwrap().remove(0);
        let mut f = vec![1.0; op.m];
        for _ in 0..200 {
            f = op.apply(&f);
        }
        let diff: Vec<f64> = f.iter().zip(&h.0).map(|(a, b)| a - b).collect();
        assert!(l1_norm(&diff) < 1e-8);
    }

    #[test]
    fn martingale_decomposition_zero_observable() {
        let env = presets::wide_gate_environment(0.055, 40).unwrap();
        let m = 1 << 9;
        let ops = build_induced_chain(&env, 20, m, 32).unwrap();
        let fs: Vec<Vec<f64>> = (0..=20).map(|_| vec![0.0; m]).collect();
        let d = martingale_decomposition(&env, &ops, &fs, 20, 0.3, 0).unwrap();
        assert!(d.psi_l2.iter().all(|&v| v < 1e-14));
        assert!(d.h_sup_v < 1e-12);
    }

    #[test]
    fn martingale_decomposition_exact_coboundary_vanishes() {
        let env = presets::wide_gate_environment(0.055, 80).unwrap();
        let m = 1 << 11;
        let n_max = 40;
        let ops = build_induced_chain(&env, n_max, m, 64).unwrap();
        // f = g - g o G for a fixed smooth grid g (constant environment).
        let g: Vec<f64> = (0..m)
            .map(|i| (std::f64::consts::TAU * (i as f64 + 0.5) / m as f64).sin())
            .collect();
        let pulled = ops[0].apply_koopman(&g);
        let f: Vec<f64> = g.iter().zip(&pulled).map(|(a, b)| a - b).collect();
        let fs: Vec<Vec<f64>> = (0..=n_max).map(|_| f.clone()).collect();
        let d = martingale_decomposition(&env, &ops, &fs, n_max, 0.3, 0).unwrap();
        let theta = 0.5f64;
        let tol = bv_norm(&g) * 4.5 / (m as f64 * (1.0 - theta));
        let tail = &d.psi_l2[n_max / 2..];
        for &v in tail {
            assert!(v <= 10.0 * tol, "psi l2 {v} vs tol {tol}");
        }
    }

    #[test]
    fn martingale_decomposition_return_time_not_coboundary() {
        let env = presets::wide_gate_environment(0.055, 80).unwrap();
        let m = 1 << 10;
        let n_max = 60;
        let ops = build_induced_chain(&env, n_max, m, 32).unwrap();
        let fs: Vec<Vec<f64>> = (0..=n_max as i64)
            .map(|k| {
                let gate = env.site_unchecked(k.max(1)).gate;
                (0..m)
                    .map(|i| {
                        let x = (i as f64 + 0.5) / m as f64;
                        if gate.contains(x) {
                            3.0
                        } else {
                            1.0
                        }
                    })
                    .collect()
            })
            .collect();
        let d = martingale_decomposition(&env, &ops, &fs, n_max, 0.3, 256).unwrap();
        let tail = &d.psi_l2[20..];
        let lo = tail.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = tail.iter().cloned().fold(0.0f64, f64::max);
        assert!(lo > 0.05, "psi floor {lo}");
        assert!((hi - lo) / lo < 0.5, "psi unstable: {lo}..{hi}");
        let resid = d.residual_max.unwrap();
        assert!(resid <= 10.0 * n_max as f64 / m as f64, "residual {resid}");
    }

    #[test]
    fn gate_mass_partial_cells() {
        let density = vec![1.0; 8];
        // Gate [0.1, 0.3): mass 0.2 under uniform density.
        let mass = gate_mass(&density, 0.1, 0.2);
        assert!((mass - 0.2).abs() < 1e-12);
        let density2: Vec<f64> = (0..8).map(|i| i as f64).collect();
        // Gate covering cell 2 exactly: mass = 2 * (1/8).
        let mass2 = gate_mass(&density2, 0.25, 0.125);
        assert!((mass2 - 0.25).abs() < 1e-12);
    }
}
