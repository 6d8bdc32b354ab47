//! Expanding circle maps, gate intervals, and the structural conditions a
//! site sequence must satisfy for the walk to be ballistic with bounded
//! return times.
//!
//! The built-in family is
//!
//! ```text
//! T(x) = d·x + (a/2π)·sin(2π(x+φ)) + (ε/2π)·sin(2π(x+ψ))   (mod 1)
//! ```
//!
//! with integer covering degree `d`. Its derivative bounds are closed-form
//! (`γ = d − |a| − |ε|`, `K = d + |a| + |ε|`, Lipschitz constant of the
//! derivative `K₁ = 2π(|a| + |ε|)`) and every member with `φ = 0, ε = 0`
//! fixes the point 0, which is what the fixed-point gate construction needs.
//!
//! Condition checks work on arcs: the image of a short arc under a monotone
//! lift is again an arc, so disjointness of gate images can be decided from
//! endpoint arithmetic with a safety margin. When an image grows past a full
//! turn, arc bookkeeping no longer represents the set and the verdict is
//! reported as inconclusive rather than guessed.

use crate::error::Error;
use crate::util::wrap_unit;
use crate::Result;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

/// Default safety margin for arc-disjointness decisions.
pub const CHECK_MARGIN: f64 = 1e-9;

/// Smooth additive term `(ε/2π)·sin(2π(x+ψ))` for perturbed families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinePerturbation {
    pub amplitude: f64,
    pub phase: f64,
}

/// Degree-`d` covering map of the circle from the closed-form family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpandingMap {
    degree: u32,
    amplitude: f64,
    phase: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    perturbation: Option<SinePerturbation>,
}

/// Validation regime: `Strict` demands expansion factor greater than 3,
/// `Relaxed` only greater than 1 (at the cost of deeper forward checks).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValidationMode {
    Strict,
    Relaxed,
}

/// Analytic derivative bounds of a map: `gamma <= |T'| <= k`,
/// `|T'(x)-T'(y)| <= k1 |x-y|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeBounds {
    pub gamma: f64,
    pub k: f64,
    pub k1: f64,
}

/// Uniform envelope a whole environment is validated against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapConstants {
    pub gamma: f64,
    pub k: f64,
    pub k1: f64,
    pub delta0: f64,
    pub c: f64,
}

impl MapConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 1.0 && self.gamma <= self.k) {
            return Err(Error::Config(format!(
                "need 1 < gamma <= k, got gamma={} k={}",
                self.gamma, self.k
            )));
        }
        if self.k1 < 0.0 {
            return Err(Error::Config("k1 must be nonnegative".into()));
        }
        if !(self.c > 0.0 && self.c <= 1.0) {
            return Err(Error::Config(format!("need 0 < c <= 1, got {}", self.c)));
        }
        if !(self.delta0 > 0.0 && self.delta0 < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < delta0 < 1, got {}",
                self.delta0
            )));
        }
        Ok(())
    }
}

impl ExpandingMap {
    pub fn new(degree: u32, amplitude: f64, phase: f64) -> Result<Self> {
        Self::with_perturbation(degree, amplitude, phase, None)
    }

    pub fn with_perturbation(
        degree: u32,
        amplitude: f64,
        phase: f64,
        perturbation: Option<SinePerturbation>,
    ) -> Result<Self> {
        if degree == 0 {
            return Err(Error::Map("degree must be positive".into()));
        }
        let pert = perturbation.map(|p| p.amplitude.abs()).unwrap_or(0.0);
        if amplitude.abs() + pert >= degree as f64 {
            return Err(Error::Map(format!(
                "derivative loses monotonicity: |a|+|eps| = {} >= degree {}",
                amplitude.abs() + pert,
                degree
            )));
        }
        if !amplitude.is_finite() || !phase.is_finite() {
            return Err(Error::Map("non-finite parameter".into()));
        }
        Ok(Self {
            degree,
            amplitude,
            phase,
            perturbation,
        })
    }

    /// The doubling map `x -> 2x mod 1`.
    pub fn doubling() -> Self {
        Self::new(2, 0.0, 0.0).unwrap()
    }

    /// Pure linear map `x -> d·x mod 1`.
    pub fn linear(degree: u32) -> Result<Self> {
        Self::new(degree, 0.0, 0.0)
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn phase(&self) -> f64 {
        self.phase
    }

    pub fn perturbation(&self) -> Option<SinePerturbation> {
        self.perturbation
    }

    /// Lift to the real line; satisfies `lift(x+1) = lift(x) + degree`
    /// exactly (the periodic part is evaluated on the fractional part, so
    /// integer shifts cancel in floating point, not just on paper).
    #[inline]
    pub fn lift(&self, x: f64) -> f64 {
        let mut y = self.degree as f64 * x;
        if self.amplitude != 0.0 || self.perturbation.is_some() {
            let fr = x - x.floor();
            if self.amplitude != 0.0 {
                y += self.amplitude / TAU * (TAU * (fr + self.phase)).sin();
            }
            if let Some(p) = self.perturbation {
                y += p.amplitude / TAU * (TAU * (fr + p.phase)).sin();
            }
        }
        y
    }

    /// Evaluate the circle map; input and output in [0, 1).
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        wrap_unit(self.lift(x))
    }

    /// Derivative of the lift (equals the circle map derivative).
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        let mut d = self.degree as f64;
        if self.amplitude != 0.0 {
            d += self.amplitude * (TAU * (x + self.phase)).cos();
        }
        if let Some(p) = self.perturbation {
            d += p.amplitude * (TAU * (x + p.phase)).cos();
        }
        d
    }

    /// Tight analytic bounds for the closed-form family.
    pub fn bounds(&self) -> DerivativeBounds {
        let pert = self.perturbation.map(|p| p.amplitude.abs()).unwrap_or(0.0);
        let spread = self.amplitude.abs() + pert;
        DerivativeBounds {
            gamma: self.degree as f64 - spread,
            k: self.degree as f64 + spread,
            k1: TAU * spread,
        }
    }

    /// Bounds, rejecting maps below the expansion floor of the chosen mode.
    pub fn constants(&self, mode: ValidationMode) -> Result<DerivativeBounds> {
        let b = self.bounds();
        let floor = match mode {
            ValidationMode::Strict => 3.0,
            ValidationMode::Relaxed => 1.0,
        };
        if b.gamma <= floor {
            return Err(Error::Map(format!(
                "expansion factor {} <= {} required by {:?} mode",
                b.gamma, floor, mode
            )));
        }
        Ok(b)
    }

    /// Image of an arc under the map. The lift is monotone, so the image of
    /// a proper arc is the arc between the endpoint images; an image of
    /// length >= 1 covers the circle and is reported as wrapped.
    pub fn image_arc(&self, arc: &CircleArc) -> Result<CircleArc> {
        if arc.len == 0.0 {
            return Ok(CircleArc::empty());
        }
        let a = self.lift(arc.start);
        let b = self.lift(arc.start + arc.len);
        let len = b - a;
        if len >= 1.0 {
            return Err(Error::ArcWrapped { len });
        }
        Ok(CircleArc::new(wrap_unit(a), len))
    }
}

/// Half-open arc `[start, start+len) mod 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleArc {
    pub start: f64,
    pub len: f64,
}

impl CircleArc {
    pub fn new(start: f64, len: f64) -> Self {
        assert!((0.0..1.0).contains(&start) && (0.0..=1.0).contains(&len));
        Self { start, len }
    }

    pub fn empty() -> Self {
        Self {
            start: 0.0,
            len: 0.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0.0
    }

    pub fn contains(&self, x: f64) -> bool {
        if self.len == 0.0 {
            return false;
        }
        if self.len >= 1.0 {
            return true;
        }
        (x - self.start).rem_euclid(1.0) < self.len
    }

    /// Signed separation from another arc: the smallest gap between them if
    /// disjoint (nonnegative), negative if they overlap. Empty arcs are
    /// infinitely separated.
    pub fn separation(&self, other: &CircleArc) -> f64 {
        if self.is_empty() || other.is_empty() {
            return f64::INFINITY;
        }
        if self.len >= 1.0 || other.len >= 1.0 {
            return -1.0;
        }
        let d = (other.start - self.start).rem_euclid(1.0);
        let forward = d - self.len;
        let backward = 1.0 - d - other.len;
        forward.min(backward)
    }
}

/// Outcome of a single structural check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Verdict {
    Holds,
    Fails(Witness),
    /// The check could not be decided: either an image arc wrapped the
    /// circle, or the margin between arcs fell below the safety threshold.
    Inconclusive(String),
}

impl Verdict {
    pub fn holds(&self) -> bool {
        matches!(self, Verdict::Holds)
    }
}

/// Where and how a condition failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub site: i64,
    pub condition: String,
    pub point: f64,
    pub detail: String,
}

/// Gate interval: the subarc of the circle that sends the walker one step
/// left. Half-open `[center-width/2, center+width/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub center: f64,
    pub width: f64,
}

impl Gate {
    pub fn new(center: f64, width: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&wrap_unit(center)) || !(0.0..1.0).contains(&width) {
            return Err(Error::Config(format!(
                "gate center {center} width {width} out of range"
            )));
        }
        Ok(Self {
            center: wrap_unit(center),
            width,
        })
    }

    pub fn lo(&self) -> f64 {
        wrap_unit(self.center - self.width / 2.0)
    }

    pub fn arc(&self) -> CircleArc {
        CircleArc::new(self.lo(), self.width)
    }

    #[inline]
    pub fn contains(&self, x: f64) -> bool {
        self.width > 0.0 && (x - self.lo()).rem_euclid(1.0) < self.width
    }
}

/// Per-site datum: the local map and its gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SitePair {
    pub map: ExpandingMap,
    pub gate: Gate,
}

impl SitePair {
    pub fn new(map: ExpandingMap, gate: Gate) -> Self {
        Self { map, gate }
    }
}

fn arc_verdict(image: Result<CircleArc>, gate: &CircleArc, site: i64, cond: &str, margin: f64) -> (Verdict, Option<CircleArc>) {
    match image {
        Err(Error::ArcWrapped { len }) => (
            Verdict::Inconclusive(format!(
                "{cond} at site {site}: image arc wrapped (length {len:.4}), undecidable by arc arithmetic"
            )),
            None,
        ),
        Err(e) => (Verdict::Inconclusive(format!("{cond} at site {site}: {e}")), None),
        Ok(img) => {
            let sep = img.separation(gate);
            if sep < 0.0 {
                (
                    Verdict::Fails(Witness {
                        site,
                        condition: cond.to_string(),
                        point: img.start,
                        detail: format!(
                            "image [{:.9}, +{:.3e}) overlaps gate by {:.3e}",
                            img.start, img.len, -sep
                        ),
                    }),
                    Some(img),
                )
            } else if sep < margin {
                (
                    Verdict::Inconclusive(format!(
                        "{cond} at site {site}: gap {sep:.3e} below safety margin {margin:.1e}"
                    )),
                    Some(img),
                )
            } else {
                (Verdict::Holds, Some(img))
            }
        }
    }
}

/// Check that a gate exits cleanly: the one-step image of the gate at `site`
/// avoids the previous site's gate, and the return image avoids the gate
/// itself. When both hold the excursion through a gate takes exactly three
/// steps.
pub fn verify_no_return(site: &SitePair, prev: &SitePair, site_index: i64, margin: f64) -> Verdict {
    let w = site.gate.arc();
    if w.is_empty() {
        return Verdict::Holds;
    }
    let (v1, a1) = arc_verdict(
        site.map.image_arc(&w),
        &prev.gate.arc(),
        site_index,
        "gate-exit",
        margin,
    );
    if !v1.holds() {
        return v1;
    }
    let a1 = a1.unwrap();
    let (v2, _) = arc_verdict(
        prev.map.image_arc(&a1),
        &w,
        site_index,
        "gate-return",
        margin,
    );
    v2
}

/// Report aggregated over a window of sites.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionReport {
    /// Every map's derivative bounds fit the declared envelope.
    pub derivative_bounds_ok: bool,
    /// Every gate width lies in [c*delta0, delta0].
    pub gate_width_ok: bool,
    /// One-step exit and return images clear the neighboring gates.
    pub no_return_ok: bool,
    /// Forward images after an excursion avoid the next `forward_depth_checked` gates.
    pub forward_clearance_ok: bool,
    pub forward_depth_checked: usize,
    pub inconclusive: bool,
    pub sites_checked: (i64, i64),
    pub witnesses: Vec<Witness>,
    pub notes: Vec<String>,
}

impl ConditionReport {
    fn fresh(lo: i64, hi: i64, depth: usize) -> Self {
        Self {
            derivative_bounds_ok: true,
            gate_width_ok: true,
            no_return_ok: true,
            forward_clearance_ok: true,
            forward_depth_checked: depth,
            inconclusive: false,
            sites_checked: (lo, hi),
            witnesses: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn absorb(&mut self, verdict: Verdict, which: Which) {
        match verdict {
            Verdict::Holds => {}
            Verdict::Fails(w) => {
                self.witnesses.push(w);
                match which {
                    Which::NoReturn => self.no_return_ok = false,
                    Which::Forward => self.forward_clearance_ok = false,
                }
            }
            Verdict::Inconclusive(msg) => {
                self.inconclusive = true;
                if self.notes.len() < 32 {
                    self.notes.push(msg);
                }
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.derivative_bounds_ok
            && self.gate_width_ok
            && self.no_return_ok
            && self.forward_clearance_ok
            && !self.inconclusive
    }

    pub fn failed(&self) -> bool {
        !(self.derivative_bounds_ok
            && self.gate_width_ok
            && self.no_return_ok
            && self.forward_clearance_ok)
    }
}

enum Which {
    NoReturn,
    Forward,
}

fn check_envelope(
    report: &mut ConditionReport,
    pair: &SitePair,
    site: i64,
    constants: &MapConstants,
    mode: ValidationMode,
) {
    let floor = match mode {
        ValidationMode::Strict => 3.0,
        ValidationMode::Relaxed => 1.0,
    };
    let b = pair.map.bounds();
    if b.gamma <= floor || b.gamma < constants.gamma - 1e-12 || b.k > constants.k + 1e-12 || b.k1 > constants.k1 + 1e-12 {
        report.derivative_bounds_ok = false;
        report.witnesses.push(Witness {
            site,
            condition: "derivative-bounds".into(),
            point: 0.0,
            detail: format!(
                "map bounds gamma={} k={} k1={} vs envelope gamma={} k={} k1={} floor={}",
                b.gamma, b.k, b.k1, constants.gamma, constants.k, constants.k1, floor
            ),
        });
    }
    let w = pair.gate.width;
    if w > 0.0 && (w < constants.c * constants.delta0 - 1e-15 || w > constants.delta0 + 1e-15) {
        report.gate_width_ok = false;
        report.witnesses.push(Witness {
            site,
            condition: "gate-width".into(),
            point: pair.gate.center,
            detail: format!(
                "width {} outside [{}, {}]",
                w,
                constants.c * constants.delta0,
                constants.delta0
            ),
        });
    }
}

/// Verify the structural conditions over a concrete window of sites.
///
/// `sites[i]` is the pair at site `first_site + i`. For every interior site
/// the exit/return images are checked, and forward images are tracked
/// `depth` more steps where the window allows it.
pub fn check_window(
    sites: &[SitePair],
    first_site: i64,
    depth: usize,
    constants: &MapConstants,
    mode: ValidationMode,
    margin: f64,
) -> ConditionReport {
    let hi = first_site + sites.len() as i64 - 1;
    let mut report = ConditionReport::fresh(first_site, hi, depth);
    for (i, pair) in sites.iter().enumerate() {
        check_envelope(&mut report, pair, first_site + i as i64, constants, mode);
    }
    for n in 1..sites.len() {
        let site_index = first_site + n as i64;
        let pair = &sites[n];
        let prev = &sites[n - 1];
        let w = pair.gate.arc();
        if w.is_empty() {
            continue;
        }
        let (v1, a1) = arc_verdict(
            pair.map.image_arc(&w),
            &prev.gate.arc(),
            site_index,
            "gate-exit",
            margin,
        );
        let exit_arc = a1;
        report.absorb(v1, Which::NoReturn);
        let Some(a1) = exit_arc else { continue };
        let (v2, a2) = arc_verdict(prev.map.image_arc(&a1), &w, site_index, "gate-return", margin);
        report.absorb(v2, Which::NoReturn);
        let Some(mut arc) = a2 else { continue };
        // Forward images: reapply the site map, then march right.
        let max_k = depth.min(sites.len().saturating_sub(n + 1));
        for k in 1..=max_k {
            let applier = &sites[n + k - 1].map;
            match applier.image_arc(&arc) {
                Err(Error::ArcWrapped { len }) => {
                    report.inconclusive = true;
                    if report.notes.len() < 32 {
                        report.notes.push(format!(
                            "forward-clearance at site {site_index} depth {k}: image wrapped (length {len:.3})"
                        ));
                    }
                    break;
                }
                Err(e) => {
                    report.inconclusive = true;
                    report.notes.push(format!("forward-clearance: {e}"));
                    break;
                }
                Ok(img) => {
                    arc = img;
                    let target = sites[n + k].gate.arc();
                    let sep = arc.separation(&target);
                    if sep < 0.0 {
                        report.absorb(
                            Verdict::Fails(Witness {
                                site: site_index,
                                condition: format!("forward-clearance k={k}"),
                                point: arc.start,
                                detail: format!("overlap {:.3e} with gate at site {}", -sep, site_index + k as i64),
                            }),
                            Which::Forward,
                        );
                    } else if sep < margin {
                        report.absorb(
                            Verdict::Inconclusive(format!(
                                "forward-clearance at site {site_index} depth {k}: gap {sep:.3e} below margin"
                            )),
                            Which::Forward,
                        );
                    }
                }
            }
        }
    }
    report
}

/// Exhaustively verify an alphabet: every site sequence assembled from
/// `pairs` must satisfy the exit/return conditions and forward clearance to
/// `depth`. Feasible for small alphabets; the number of branches grows as
/// `pairs.len()^(depth+1)`.
pub fn check_alphabet(
    pairs: &[SitePair],
    depth: usize,
    constants: &MapConstants,
    mode: ValidationMode,
    margin: f64,
) -> Result<ConditionReport> {
    if pairs.is_empty() {
        return Err(Error::Config("empty alphabet".into()));
    }
    let branches = (pairs.len() as f64).powi(depth.max(1) as i32 + 1);
    if branches > 5e6 {
        return Err(Error::Config(format!(
            "alphabet of {} pairs at depth {} needs {:.1e} branch checks; too many for exhaustive verification",
            pairs.len(),
            depth,
            branches
        )));
    }
    let mut report = ConditionReport::fresh(0, pairs.len() as i64 - 1, depth);
    for (i, pair) in pairs.iter().enumerate() {
        check_envelope(&mut report, pair, i as i64, constants, mode);
    }
    for (i, site) in pairs.iter().enumerate() {
        let w = site.gate.arc();
        if w.is_empty() {
            continue;
        }
        for prev in pairs {
            let (v1, a1) = arc_verdict(site.map.image_arc(&w), &prev.gate.arc(), i as i64, "gate-exit", margin);
            report.absorb(v1, Which::NoReturn);
            let Some(a1) = a1 else { continue };
            let (v2, a2) = arc_verdict(prev.map.image_arc(&a1), &w, i as i64, "gate-return", margin);
            report.absorb(v2, Which::NoReturn);
            let Some(a2) = a2 else { continue };
            // Forward: the site map reapplies first, then any alphabet choice.
            forward_dfs(pairs, site, a2, 1, depth, i as i64, margin, &mut report);
        }
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn forward_dfs(
    pairs: &[SitePair],
    site: &SitePair,
    arc: CircleArc,
    k: usize,
    depth: usize,
    site_index: i64,
    margin: f64,
    report: &mut ConditionReport,
) {
    if k > depth {
        return;
    }
    // At depth k the map applied is the one at site n+k-1: for k = 1 that is
    // the base site's own map; afterwards any alphabet member.
    let appliers: &[SitePair] = if k == 1 {
        std::slice::from_ref(site)
    } else {
        pairs
    };
    for applier in appliers {
        match applier.map.image_arc(&arc) {
            Err(Error::ArcWrapped { len }) => {
                report.inconclusive = true;
                if report.notes.len() < 32 {
                    report.notes.push(format!(
                        "forward-clearance at alphabet site {site_index} depth {k}: image wrapped (length {len:.3})"
                    ));
                }
                return;
            }
            Err(_) => {
                report.inconclusive = true;
                return;
            }
            Ok(img) => {
                for target in pairs {
                    let sep = img.separation(&target.gate.arc());
                    if sep < 0.0 {
                        report.absorb(
                            Verdict::Fails(Witness {
                                site: site_index,
                                condition: format!("forward-clearance k={k}"),
                                point: img.start,
                                detail: format!("alphabet overlap {:.3e}", -sep),
                            }),
                            Which::Forward,
                        );
                    } else if sep < margin {
                        report.absorb(
                            Verdict::Inconclusive(format!(
                                "forward-clearance at alphabet site {site_index} depth {k}: margin {sep:.3e}"
                            )),
                            Which::Forward,
                        );
                    }
                }
                forward_dfs(pairs, site, img, k + 1, depth, site_index, margin, report);
            }
        }
    }
}

/// Closeness report against a reference pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NearReferenceReport {
    pub ok: bool,
    pub reference_gate_clear: bool,
    pub max_map_deviation: f64,
    pub max_derivative_deviation: f64,
    pub max_lipschitz_deviation: f64,
    pub max_gate_hausdorff: f64,
    pub worst_site: i64,
}

fn circ_dist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Check that every site is within `delta0` of a reference pair in the
/// sampled C^{1+Lip} sense and that the reference gate's first two images
/// avoid the gate. Distances are estimated on `grid` sample points; this is
/// an estimate, not a certified supremum.
pub fn verify_near_reference(
    sites: &[SitePair],
    first_site: i64,
    reference: &SitePair,
    delta0: f64,
    grid: usize,
    margin: f64,
) -> NearReferenceReport {
    let rw = reference.gate.arc();
    let mut clear = true;
    let mut arc = rw;
    for _ in 0..2 {
        match reference.map.image_arc(&arc) {
            Ok(img) => {
                if img.separation(&rw) < margin {
                    clear = false;
                    break;
                }
                arc = img;
            }
            Err(_) => {
                clear = false;
                break;
            }
        }
    }
    let mut worst = (0.0f64, first_site);
    let mut max_map = 0.0f64;
    let mut max_deriv = 0.0f64;
    let mut max_lip = 0.0f64;
    let mut max_gate = 0.0f64;
    let h = 1.0 / grid as f64;
    for (i, pair) in sites.iter().enumerate() {
        let mut site_map = 0.0f64;
        let mut site_deriv = 0.0f64;
        let mut site_lip = 0.0f64;
        let mut prev_dd = pair.map.derivative(0.0) - reference.map.derivative(0.0);
        for g in 0..grid {
            let x = (g as f64 + 0.5) * h;
            site_map = site_map.max(circ_dist(pair.map.apply(x), reference.map.apply(x)));
            let dd = pair.map.derivative(x) - reference.map.derivative(x);
            site_deriv = site_deriv.max(dd.abs());
            site_lip = site_lip.max((dd - prev_dd).abs() / h);
            prev_dd = dd;
        }
        let gd = circ_dist(pair.gate.lo(), reference.gate.lo()).max(circ_dist(
            wrap_unit(pair.gate.lo() + pair.gate.width),
            wrap_unit(reference.gate.lo() + reference.gate.width),
        ));
        let site_worst = site_map.max(site_deriv).max(site_lip).max(gd);
        if site_worst > worst.0 {
            worst = (site_worst, first_site + i as i64);
        }
        max_map = max_map.max(site_map);
        max_deriv = max_deriv.max(site_deriv);
        max_lip = max_lip.max(site_lip);
        max_gate = max_gate.max(gd);
    }
    NearReferenceReport {
        ok: clear && worst.0 <= delta0,
        reference_gate_clear: clear,
        max_map_deviation: max_map,
        max_derivative_deviation: max_deriv,
        max_lipschitz_deviation: max_lip,
        max_gate_hausdorff: max_gate,
        worst_site: worst.1,
    }
}

/// Construct an admissible alphabet from the fixed-point family: maps with
/// phase 0 all fix the point 0; gates sit on a point `x'` whose forward
/// images under every map mixture stay clear of all gates to the requested
/// depth. Returns `count` pairs with distinct amplitudes.
pub fn fixed_point_alphabet(
    constants: &MapConstants,
    degree: u32,
    depth: usize,
    count: usize,
) -> Result<Vec<SitePair>> {
    constants.validate()?;
    if count == 0 {
        return Err(Error::Config("need at least one pair".into()));
    }
    let mut maps = Vec::with_capacity(count);
    let amp_step = 0.2f64.min((degree as f64 - constants.gamma) / count.max(1) as f64);
    for j in 0..count {
        maps.push(ExpandingMap::new(degree, amp_step * j as f64, 0.0)?);
    }
    let k_sup = maps
        .iter()
        .map(|m| m.bounds().k)
        .fold(0.0f64, f64::max);
    // An excursion plus `depth` forward steps applies depth+2 maps; the gate
    // image must stay a proper arc throughout: width < K^-(depth+2).
    let wrap_cap = 0.95 * k_sup.powi(-(depth as i32 + 2));
    let width = if constants.delta0 <= wrap_cap {
        constants.delta0
    } else if constants.c * constants.delta0 <= wrap_cap {
        // The requested scale is too fat for the depth; fall back to the
        // smallest admissible width, which leaves the most room to place
        // the gate clear of its own forward images.
        constants.c * constants.delta0
    } else {
        return Err(Error::Config(format!(
            "no admissible gate width: even c*delta0 = {:.3e} exceeds the wrap cap {:.3e}; reduce delta0 (or depth)",
            constants.c * constants.delta0,
            wrap_cap
        )));
    };
    let candidates = 4096;
    for ci in 0..candidates {
        let xp = 0.03 + 0.94 * (ci as f64 + 0.5) / candidates as f64;
        let pairs: Vec<SitePair> = maps
            .iter()
            .map(|&m| SitePair::new(m, Gate::new(xp, width).unwrap()))
            .collect();
        let report = check_alphabet(&pairs, depth, constants, ValidationMode::Strict, CHECK_MARGIN)?;
        if report.passed() {
            return Ok(pairs);
        }
    }
    Err(Error::Config(format!(
        "no admissible gate placement found for delta0={} depth={}; try a smaller delta0",
        constants.delta0, depth
    )))
}
