//! Site sequences `(T_n, W_n)` over a window of lattice sites.
//!
//! An environment realizes a generation rule into a concrete table of site
//! pairs. Realization is deterministic in `(spec, seed)`: the iid rule draws
//! each site from a counter-based stream addressed by the site index, so the
//! table is identical no matter how or in what order sites are queried.
//!
//! Sites below the window's lower edge reuse the edge pair; the walk never
//! depends on what happens far to the left, so this keeps small windows
//! usable without changing any observable statistics.

use crate::circle_map::{
    check_window, ConditionReport, MapConstants, SitePair, ValidationMode, CHECK_MARGIN,
};
use crate::error::Error;
use crate::rng::RandomSource;
use crate::util::isqrt;
use crate::Result;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

const SITE_STREAM: u64 = 0x5149_7445;

/// Generation rule for the site sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvKind {
    /// The same pair at every site.
    Constant { pair: SitePair },
    /// Pairs repeat with period `pairs.len()`: site n gets `pairs[n mod p]`.
    Periodic { pairs: Vec<SitePair> },
    /// Independent draws from a finite alphabet with the given weights.
    Iid {
        alphabet: Vec<SitePair>,
        weights: Vec<f64>,
    },
    /// Gate type constant on blocks of sites [k^2, (k+1)^2), alternating
    /// with the parity of k; `even` is used on even-k blocks.
    Counterexample { even: SitePair, odd: SitePair },
    /// Explicit table: site `window.0 + i` gets `pairs[i]`.
    Explicit { pairs: Vec<SitePair> },
}

/// Which of the two alternating pairs a counterexample site uses.
pub fn counterexample_parity(n: i64) -> usize {
    (isqrt(n.max(0) as u64) % 2) as usize
}

/// Declarative environment description (what to build, over which window).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    #[serde(flatten)]
    pub kind: EnvKind,
    /// Inclusive site range [lo, hi]; lo <= 0 < hi.
    pub window: (i64, i64),
    /// Declared uniform envelope used by `verify`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<MapConstants>,
}

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

impl EnvironmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version > SCHEMA_VERSION {
            return Err(Error::Schema {
                path: "schema_version".into(),
                message: format!(
                    "file schema {} is newer than supported {}",
                    self.schema_version, SCHEMA_VERSION
                ),
            });
        }
        let (lo, hi) = self.window;
        if !(lo <= 0 && 0 < hi) {
            return Err(Error::Schema {
                path: "window".into(),
                message: format!("window [{lo}, {hi}] must satisfy lo <= 0 < hi"),
            });
        }
        match &self.kind {
            EnvKind::Constant { .. } => {}
            EnvKind::Periodic { pairs } | EnvKind::Explicit { pairs } => {
                if pairs.is_empty() {
                    return Err(Error::Schema {
                        path: "pairs".into(),
                        message: "empty pair list".into(),
                    });
                }
                if let EnvKind::Explicit { pairs } = &self.kind {
                    let need = (hi - lo + 1) as usize;
                    if pairs.len() != need {
                        return Err(Error::Schema {
                            path: "pairs".into(),
                            message: format!(
                                "explicit table has {} pairs but window [{lo}, {hi}] needs {need}",
                                pairs.len()
                            ),
                        });
                    }
                }
            }
            EnvKind::Iid { alphabet, weights } => {
                if alphabet.is_empty() {
                    return Err(Error::Schema {
                        path: "alphabet".into(),
                        message: "empty alphabet".into(),
                    });
                }
                if weights.len() != alphabet.len() {
                    return Err(Error::Schema {
                        path: "weights".into(),
                        message: format!(
                            "{} weights for {} alphabet entries",
                            weights.len(),
                            alphabet.len()
                        ),
                    });
                }
                if weights.iter().any(|&w| !(w > 0.0)) {
                    return Err(Error::Schema {
                        path: "weights".into(),
                        message: "weights must be strictly positive".into(),
                    });
                }
                let s: f64 = weights.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::Schema {
                        path: "weights".into(),
                        message: format!("weights sum to {s}, expected 1"),
                    });
                }
            }
            EnvKind::Counterexample { .. } => {}
        }
        Ok(())
    }
}

/// A realized environment: spec plus the memoized site table.
#[derive(Debug, Clone)]
pub struct Environment {
    spec: EnvironmentSpec,
    seed: u64,
    sites: Vec<SitePair>,
}

impl Environment {
    /// Realize the spec into a concrete site table. Deterministic in
    /// `(spec, seed)`.
    pub fn realize(spec: EnvironmentSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (lo, hi) = spec.window;
        let n_sites = (hi - lo + 1) as usize;
        let src = RandomSource::new(seed, SITE_STREAM);
        let mut sites = Vec::with_capacity(n_sites);
        for i in 0..n_sites {
            let n = lo + i as i64;
            let pair = match &spec.kind {
                EnvKind::Constant { pair } => *pair,
                EnvKind::Periodic { pairs } => {
                    pairs[(n.rem_euclid(pairs.len() as i64)) as usize]
                }
                EnvKind::Iid { alphabet, weights } => {
                    let u = src.f64_at(n as u64 ^ 0x8000_0000_0000_0000);
                    let mut acc = 0.0;
                    let mut chosen = alphabet.len() - 1;
                    for (j, w) in weights.iter().enumerate() {
                        acc += w;
                        if u < acc {
                            chosen = j;
                            break;
                        }
                    }
                    alphabet[chosen]
                }
                EnvKind::Counterexample { even, odd } => {
                    if counterexample_parity(n) == 0 {
                        *even
                    } else {
                        *odd
                    }
                }
                EnvKind::Explicit { pairs } => pairs[i],
            };
            sites.push(pair);
        }
        Ok(Self { spec, seed, sites })
    }

    pub fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn window(&self) -> (i64, i64) {
        self.spec.window
    }

    /// Site pair at `n`. Sites below the window reuse the boundary pair;
    /// sites above it are an error.
    #[inline]
    pub fn site(&self, n: i64) -> Result<&SitePair> {
        let (lo, hi) = self.spec.window;
        if n > hi {
            return Err(Error::Window { site: n, lo, hi });
        }
        let i = (n.max(lo) - lo) as usize;
        Ok(&self.sites[i])
    }

    /// Infallible variant for hot loops; clamps below, panics above.
    #[inline]
    pub fn site_unchecked(&self, n: i64) -> &SitePair {
        let (lo, _) = self.spec.window;
        &self.sites[(n.max(lo) - lo) as usize]
    }

    pub fn sites(&self) -> &[SitePair] {
        &self.sites
    }

    /// Declared envelope, or a tight one computed from the realized sites.
    pub fn constants(&self) -> MapConstants {
        if let Some(c) = self.spec.constants {
            return c;
        }
        let mut gamma = f64::INFINITY;
        let mut k = 0.0f64;
        let mut k1 = 0.0f64;
        let mut wmax = 0.0f64;
        let mut wmin = f64::INFINITY;
        for s in &self.sites {
            let b = s.map.bounds();
            gamma = gamma.min(b.gamma);
            k = k.max(b.k);
            k1 = k1.max(b.k1);
            if s.gate.width > 0.0 {
                wmax = wmax.max(s.gate.width);
                wmin = wmin.min(s.gate.width);
            }
        }
        let delta0 = if wmax > 0.0 { wmax } else { 1e-3 };
        MapConstants {
            gamma,
            k,
            k1,
            delta0,
            c: if wmax > 0.0 { (wmin / wmax).min(1.0) } else { 1.0 },
        }
    }

    /// Run the structural checks over the realized window.
    pub fn condition_report(&self, depth: usize, mode: ValidationMode) -> ConditionReport {
        let constants = self.constants();
        check_window(
            &self.sites,
            self.spec.window.0,
            depth,
            &constants,
            mode,
            CHECK_MARGIN,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct File<'a> {
            #[serde(flatten)]
            spec: &'a EnvironmentSpec,
            seed: u64,
        }
        Ok(serde_json::to_string_pretty(&File {
            spec: &self.spec,
            seed: self.seed,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct File {
            #[serde(flatten)]
            spec: EnvironmentSpec,
            #[serde(default)]
            seed: u64,
        }
        let f: File = serde_json::from_str(text).map_err(|e| Error::Schema {
            path: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        Self::realize(f.spec, f.seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}
