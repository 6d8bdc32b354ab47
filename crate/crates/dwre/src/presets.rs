//! Ready-made environments used by the test suites, the CLI documentation
//! and the acceptance runs.

use crate::circle_map::{fixed_point_alphabet, ExpandingMap, Gate, MapConstants, SitePair};
use crate::environment::{EnvKind, Environment, EnvironmentSpec, SCHEMA_VERSION};
use crate::Result;
use std::f64::consts::TAU;

/// Envelope for the degree-4 fixed-point family: amplitudes up to 0.5,
/// gate widths in [c*delta0, delta0].
pub fn degree4_constants(delta0: f64) -> MapConstants {
    MapConstants {
        gamma: 3.5,
        k: 4.5,
        k1: TAU,
        delta0,
        c: 0.01,
    }
}

/// The classic reduction: doubling maps with half-circle gates. The walk is
/// the simple random walk with transition probabilities (1/2, 1/2). Not
/// ballistic; useful as an exact reference distribution.
pub fn srw_environment(radius: i64) -> Result<Environment> {
    let pair = SitePair::new(ExpandingMap::doubling(), Gate::new(0.25, 0.5).unwrap());
    Environment::realize(
        EnvironmentSpec {
            schema_version: SCHEMA_VERSION,
            kind: EnvKind::Constant { pair },
            window: (-radius, radius),
            constants: None,
        },
        0,
    )
}

/// Constant environment from the fixed-point construction: one degree-4
/// map whose gate sits on a forward-avoided orbit, checked to `depth`.
pub fn reference_environment(delta0: f64, depth: usize, hi: i64) -> Result<Environment> {
    let constants = degree4_constants(delta0);
    let pairs = fixed_point_alphabet(&constants, 4, depth, 1)?;
    Environment::realize(
        EnvironmentSpec {
            schema_version: SCHEMA_VERSION,
            kind: EnvKind::Constant { pair: pairs[0] },
            window: (-2, hi),
            constants: Some(constants),
        },
        0,
    )
}

/// Place a gate of the requested width for a single linear map so that its
/// one- and two-step images avoid it; returns the admissible pair.
pub fn wide_gate_pair(degree: u32, width: f64) -> Result<SitePair> {
    let map = ExpandingMap::linear(degree)?;
    let mut best: Option<(f64, SitePair)> = None;
    let candidates = 8192;
    for i in 0..candidates {
        let center = (i as f64 + 0.5) / candidates as f64;
        let gate = Gate::new(center, width).unwrap();
        let pair = SitePair::new(map, gate);
        let w = gate.arc();
        let Ok(a1) = map.image_arc(&w) else { continue };
        let Ok(a2) = map.image_arc(&a1) else { continue };
        let sep = a1.separation(&w).min(a2.separation(&w));
        if sep > 0.0 && best.as_ref().map_or(true, |(s, _)| sep > *s) {
            best = Some((sep, pair));
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| {
        crate::Error::Config(format!(
            "no clear gate placement of width {width} for degree {degree}"
        ))
    })
}

/// Constant environment with a wide (order 5e-2) gate: exit and return
/// images clear the gate, forward clearance holds only to shallow depth, and
/// the return-time fluctuations are large enough for limit statistics to be
/// visible at a few thousand sites.
pub fn wide_gate_environment(width: f64, hi: i64) -> Result<Environment> {
    let pair = wide_gate_pair(4, width)?;
    let mut constants = degree4_constants(width);
    constants.gamma = 4.0;
    constants.k = 4.0;
    constants.k1 = 0.0;
    Environment::realize(
        EnvironmentSpec {
            schema_version: SCHEMA_VERSION,
            kind: EnvKind::Constant { pair },
            window: (-2, hi),
            constants: Some(constants),
        },
        0,
    )
}

/// Two wide-gate pairs with clearly distinct gate masses for a common
/// degree-4 linear map, admissible in any mixture; used by the iid and
/// block-alternating environments.
pub fn distinct_drift_pairs(width_a: f64, width_b: f64) -> Result<(SitePair, SitePair)> {
    let map = ExpandingMap::linear(4)?;
    let candidates = 512;
    for i in 0..candidates {
        let ca = (i as f64 + 0.5) / candidates as f64;
        let ga = Gate::new(ca, width_a).unwrap();
        let a = SitePair::new(map, ga);
        for j in 0..candidates {
            let cb = (j as f64 + 0.5) / candidates as f64;
            let gb = Gate::new(cb, width_b).unwrap();
            let b = SitePair::new(map, gb);
            if mixture_admissible(&[a, b]) {
                return Ok((a, b));
            }
        }
    }
    Err(crate::Error::Config(format!(
        "no joint placement for widths {width_a}, {width_b}"
    )))
}

fn mixture_admissible(pairs: &[SitePair]) -> bool {
    for site in pairs {
        let w = site.gate.arc();
        if w.is_empty() {
            continue;
        }
        let Ok(a1) = site.map.image_arc(&w) else {
            return false;
        };
        // The exit image must avoid every possible previous gate, and every
        // possible return image must avoid the gate itself.
        if pairs.iter().any(|p| a1.separation(&p.gate.arc()) < 1e-6) {
            return false;
        }
        for prev in pairs {
            let Ok(a2) = prev.map.image_arc(&a1) else {
                return false;
            };
            if a2.separation(&w) < 1e-6 {
                return false;
            }
        }
    }
    true
}

/// Iid mixture of the two distinct-drift pairs with equal weights.
pub fn iid_environment(width_a: f64, width_b: f64, hi: i64, seed: u64) -> Result<Environment> {
    let (a, b) = distinct_drift_pairs(width_a, width_b)?;
    let mut constants = degree4_constants(width_a.max(width_b));
    constants.gamma = 4.0;
    constants.k = 4.0;
    constants.k1 = 0.0;
    constants.c = (width_a.min(width_b) / width_a.max(width_b)).min(1.0);
    Environment::realize(
        EnvironmentSpec {
            schema_version: SCHEMA_VERSION,
            kind: EnvKind::Iid {
                alphabet: vec![a, b],
                weights: vec![0.5, 0.5],
            },
            window: (-2, hi),
            constants: Some(constants),
        },
        seed,
    )
}

/// Block-alternating environment: gate type constant on site blocks
/// [k^2, (k+1)^2), switching with the parity of k.
pub fn block_alternating_environment(width_a: f64, width_b: f64, hi: i64) -> Result<Environment> {
    let (a, b) = distinct_drift_pairs(width_a, width_b)?;
    let mut constants = degree4_constants(width_a.max(width_b));
    constants.gamma = 4.0;
    constants.k = 4.0;
    constants.k1 = 0.0;
    constants.c = (width_a.min(width_b) / width_a.max(width_b)).min(1.0);
    Environment::realize(
        EnvironmentSpec {
            schema_version: SCHEMA_VERSION,
            kind: EnvKind::Counterexample { even: a, odd: b },
            window: (-2, hi),
            constants: Some(constants),
        },
        0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circle_map::{check_window, ValidationMode, CHECK_MARGIN};

    #[test]
    fn wide_gate_pair_clears_two_images() {
        let p = wide_gate_pair(4, 0.055).unwrap();
        let w = p.gate.arc();
        let a1 = p.map.image_arc(&w).unwrap();
        let a2 = p.map.image_arc(&a1).unwrap();
        assert!(a1.separation(&w) > 0.0);
        assert!(a2.separation(&w) > 0.0);
    }

    #[test]
    fn wide_gate_environment_passes_exit_return_checks() {
        let env = wide_gate_environment(0.055, 50).unwrap();
        let report = check_window(
            env.sites(),
            env.window().0,
            0,
            &env.constants(),
            ValidationMode::Strict,
            CHECK_MARGIN,
        );
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn distinct_drift_pairs_admissible_in_mixtures() {
        let (a, b) = distinct_drift_pairs(0.055, 0.02).unwrap();
        assert!((a.gate.width - 0.055).abs() < 1e-15);
        assert!((b.gate.width - 0.02).abs() < 1e-15);
        let env = iid_environment(0.055, 0.02, 200, 7).unwrap();
        let report = check_window(
            env.sites(),
            env.window().0,
            0,
            &env.constants(),
            ValidationMode::Strict,
            CHECK_MARGIN,
        );
        assert!(report.passed(), "{report:?}");
    }
}
