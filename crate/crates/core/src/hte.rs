//! Search-space sampling for sequential hyperparameter re-tuning.
//!
//! Given a prior `p(x)` and the previous optimum `θ`, draws from
//! `p_new(x) ∝ p(x) · exp(-(u(x) - u(θ))² / 2σ²)` by rejection: the kernel
//! is at most 1, so accepting a prior draw with that probability is exact.
//! `u` is the dimension's sampling coordinate (log for log-uniform priors).

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Probe draws used to detect a kernel too narrow to ever accept.
const PROBE: usize = 1 << 20;
/// Mean acceptance below this over the probe is treated as degenerate.
const MIN_ACCEPTANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum HteError {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("invalid reweighting: {0}")]
    InvalidReweight(String),
    #[error("dimension {dimension:?}: acceptance rate {rate:e} is too small (sigma too narrow for the prior)")]
    DegenerateAcceptance { dimension: String, rate: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
    IntUniform { lo: i64, hi: i64 },
    Categorical(Vec<String>),
}

impl Prior {
    fn validate(&self) -> Result<(), String> {
        match self {
            Prior::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(format!("uniform bounds [{lo}, {hi}] must be finite with lo < hi"));
                }
            }
            Prior::LogUniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && 0.0 < *lo && lo < hi) {
                    return Err(format!("log-uniform bounds [{lo}, {hi}] must satisfy 0 < lo < hi"));
                }
            }
            Prior::IntUniform { lo, hi } => {
                if lo >= hi {
                    return Err(format!("integer bounds [{lo}, {hi}] must have lo < hi"));
                }
            }
            Prior::Categorical(choices) => {
                if choices.is_empty() {
                    return Err("categorical prior needs at least one choice".into());
                }
            }
        }
        Ok(())
    }

    /// Sampling coordinate of a value, if the dimension is numeric.
    fn coordinate(&self, x: f64) -> Option<f64> {
        match self {
            Prior::Uniform { .. } | Prior::IntUniform { .. } => Some(x),
            Prior::LogUniform { .. } => Some(x.ln()),
            Prior::Categorical(_) => None,
        }
    }

    fn contains(&self, x: f64) -> bool {
        match *self {
            Prior::Uniform { lo, hi } | Prior::LogUniform { lo, hi } => lo <= x && x <= hi,
            Prior::IntUniform { lo, hi } => lo as f64 <= x && x <= hi as f64,
            Prior::Categorical(_) => true,
        }
    }

    /// One draw and its sampling coordinate (NaN for categoricals).
    fn draw(&self, rng: &mut impl Rng) -> (Value, f64) {
        match self {
            Prior::Uniform { lo, hi } => {
                let x = lo + rng.random::<f64>() * (hi - lo);
                (Value::Float(x), x)
            }
            Prior::LogUniform { lo, hi } => {
                let (a, b) = (lo.ln(), hi.ln());
                let u = a + rng.random::<f64>() * (b - a);
                (Value::Float(u.exp().clamp(*lo, *hi)), u)
            }
            Prior::IntUniform { lo, hi } => {
                let k = rng.random_range(*lo..=*hi);
                (Value::Int(k), k as f64)
            }
            Prior::Categorical(choices) => {
                let i = rng.random_range(0..choices.len());
                (Value::Choice(choices[i].clone()), f64::NAN)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dimension {
    pub name: String,
    pub prior: Prior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    dims: Vec<Dimension>,
}

impl SearchSpace {
    pub fn new(dims: Vec<Dimension>) -> Result<Self, HteError> {
        let mut seen = std::collections::BTreeSet::new();
        for d in &dims {
            if d.name.is_empty() || d.name.contains(['=', ',']) || d.name.chars().any(char::is_whitespace) {
                return Err(HteError::InvalidSpace(format!("bad dimension name {:?}", d.name)));
            }
            if !seen.insert(d.name.as_str()) {
                return Err(HteError::InvalidSpace(format!("duplicate dimension {:?}", d.name)));
            }
            d.prior
                .validate()
                .map_err(|e| HteError::InvalidSpace(format!("{}: {e}", d.name)))?;
        }
        Ok(SearchSpace { dims })
    }

    /// One dimension per line: `name uniform LO HI`, `name loguniform LO HI`,
    /// `name int LO HI` or `name categorical A B ...`. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, HteError> {
        let mut dims = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |detail: String| HteError::Malformed { line: n + 1, detail };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let (name, kind, args) = match fields.as_slice() {
                [name, kind, args @ ..] => (*name, *kind, args),
                _ => return Err(bad("expected `name kind args...`".into())),
            };
            let two = |args: &[&str]| -> Result<(f64, f64), HteError> {
                match args {
                    [a, b] => Ok((
                        a.parse().map_err(|_| bad(format!("bad number {a:?}")))?,
                        b.parse().map_err(|_| bad(format!("bad number {b:?}")))?,
                    )),
                    _ => Err(bad(format!("{kind} takes two bounds"))),
                }
            };
            let prior = match kind.to_ascii_lowercase().as_str() {
                "uniform" => {
                    let (lo, hi) = two(args)?;
                    Prior::Uniform { lo, hi }
                }
                "loguniform" => {
                    let (lo, hi) = two(args)?;
                    Prior::LogUniform { lo, hi }
                }
                "int" => match args {
                    [a, b] => Prior::IntUniform {
                        lo: a.parse().map_err(|_| bad(format!("bad integer {a:?}")))?,
                        hi: b.parse().map_err(|_| bad(format!("bad integer {b:?}")))?,
                    },
                    _ => return Err(bad("int takes two bounds".into())),
                },
                "categorical" => Prior::Categorical(args.iter().map(|s| s.to_string()).collect()),
                other => return Err(bad(format!("unknown prior kind {other:?}"))),
            };
            dims.push(Dimension {
                name: name.to_string(),
                prior,
            });
        }
        SearchSpace::new(dims)
    }

    pub fn dims(&self) -> &[Dimension] {
        &self.dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Float(f64),
    Int(i64),
    Choice(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Float(x) => Some(*x),
            Value::Int(k) => Some(*k as f64),
            Value::Choice(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Float(x) => write!(f, "{x}"),
            Value::Int(k) => write!(f, "{k}"),
            Value::Choice(c) => f.write_str(c),
        }
    }
}

/// One sampled point, dimensions in space order.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment(pub Vec<(String, Value)>);

impl Assignment {
    pub fn get(&self, name: &str) -> Option<&Value> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (name, value)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{name}={value}")?;
        }
        Ok(())
    }
}

/// Previous optimum and kernel width per numeric dimension. Widths are in
/// the sampling coordinate (log units for log-uniform priors).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReweightSpec {
    pub theta_prev: BTreeMap<String, f64>,
    pub sigma: BTreeMap<String, f64>,
}

/// Parses `a=1,b=2.5` into a map.
pub fn parse_assignments(text: &str) -> Result<BTreeMap<String, f64>, HteError> {
    let mut out = BTreeMap::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || HteError::InvalidReweight(format!("expected name=number, got {part:?}"));
        let (name, value) = part.split_once('=').ok_or_else(bad)?;
        let value: f64 = value.trim().parse().map_err(|_| bad())?;
        if out.insert(name.trim().to_string(), value).is_some() {
            return Err(HteError::InvalidReweight(format!("{name} given twice")));
        }
    }
    Ok(out)
}

/// I.i.d. draws from the prior.
pub fn sample_prior(space: &SearchSpace, n: usize, seed: u64) -> Vec<Assignment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Assignment(space.dims.iter().map(|d| (d.name.clone(), d.prior.draw(&mut rng).0)).collect()))
        .collect()
}

/// Kernel centre and width for one dimension; `None` leaves it unmodified.
type Kernel = Option<(f64, f64)>;

/// Draws from the reweighted distribution, independently per dimension.
pub fn sample_reweighted(space: &SearchSpace, spec: &ReweightSpec, n: usize, seed: u64) -> Result<Vec<Assignment>, HteError> {
    let kernels = kernels(space, spec)?;
    for (i, (d, k)) in space.dims.iter().zip(&kernels).enumerate() {
        if let Some(k) = k {
            let rate = probe_acceptance(&d.prior, *k, seed, i as u64);
            if rate < MIN_ACCEPTANCE {
                return Err(HteError::DegenerateAcceptance {
                    dimension: d.name.clone(),
                    rate,
                });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut point = Vec::with_capacity(space.dims.len());
        for (d, k) in space.dims.iter().zip(&kernels) {
            let value = loop {
                let (value, u) = d.prior.draw(&mut rng);
                let Some((centre, sigma)) = k else { break value };
                if rng.random::<f64>() < kernel(u, *centre, *sigma) {
                    break value;
                }
            };
            point.push((d.name.clone(), value));
        }
        out.push(Assignment(point));
    }
    Ok(out)
}

fn kernel(u: f64, centre: f64, sigma: f64) -> f64 {
    let z = (u - centre) / sigma;
    (-0.5 * z * z).exp()
}

fn kernels(space: &SearchSpace, spec: &ReweightSpec) -> Result<Vec<Kernel>, HteError> {
    for name in spec.theta_prev.keys().chain(spec.sigma.keys()) {
        if !space.dims.iter().any(|d| &d.name == name) {
            return Err(HteError::InvalidReweight(format!("unknown dimension {name:?}")));
        }
    }
    space
        .dims
        .iter()
        .map(|d| {
            if matches!(d.prior, Prior::Categorical(_)) {
                return Ok(None);
            }
            let missing = |what: &str| HteError::InvalidReweight(format!("{what} missing for {:?}", d.name));
            let theta = *spec.theta_prev.get(&d.name).ok_or_else(|| missing("theta_prev"))?;
            let sigma = *spec.sigma.get(&d.name).ok_or_else(|| missing("sigma"))?;
            if !(sigma.is_finite() && sigma > 0.0) {
                return Err(HteError::InvalidReweight(format!("sigma for {:?} must be positive", d.name)));
            }
            if !(theta.is_finite() && d.prior.contains(theta)) {
                return Err(HteError::InvalidReweight(format!(
                    "theta_prev {theta} for {:?} lies outside the prior",
                    d.name
                )));
            }
            Ok(Some((d.prior.coordinate(theta).expect("numeric prior"), sigma)))
        })
        .collect()
}

/// Mean kernel value over prior draws from a stream separate from sampling.
fn probe_acceptance(prior: &Prior, (centre, sigma): (f64, f64), seed: u64, dim: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(dim + 1);
    let total: f64 = (0..PROBE).map(|_| kernel(prior.draw(&mut rng).1, centre, sigma)).sum();
    total / PROBE as f64
}
