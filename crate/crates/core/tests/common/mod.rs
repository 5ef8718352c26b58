//! Test oracles: a brute-force expression interpreter over whole series,
//! random expression generation, and distribution helpers.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

/// Expression tree independent of the library's AST; rendered to text and
/// fed to the library parser.
#[derive(Debug, Clone)]
pub enum RefExpr {
    Attr(&'static str),
    Const(f64),
    Neg(Box<RefExpr>),
    Abs(Box<RefExpr>),
    Log(Box<RefExpr>),
    Bin(char, Box<RefExpr>, Box<RefExpr>),
    Cmp(&'static str, Box<RefExpr>, Box<RefExpr>),
    Roll(&'static str, Box<RefExpr>, usize),
    Shift(Box<RefExpr>, usize),
}

impl fmt::Display for RefExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RefExpr::Attr(a) => write!(f, "${a}"),
            RefExpr::Const(c) => write!(f, "{c:?}"),
            RefExpr::Neg(x) => write!(f, "(-{x})"),
            RefExpr::Abs(x) => write!(f, "Abs({x})"),
            RefExpr::Log(x) => write!(f, "log({x})"),
            RefExpr::Bin(op, a, b) => write!(f, "({a} {op} {b})"),
            RefExpr::Cmp(op, a, b) => write!(f, "({a} {op} {b})"),
            RefExpr::Roll(op, x, w) => write!(f, "{op}({x}, {w})"),
            RefExpr::Shift(x, s) => write!(f, "Ref({x}, {s})"),
        }
    }
}

impl RefExpr {
    pub fn has_rolling(&self) -> bool {
        match self {
            RefExpr::Attr(_) | RefExpr::Const(_) => false,
            RefExpr::Roll(..) => true,
            RefExpr::Neg(x) | RefExpr::Abs(x) | RefExpr::Log(x) | RefExpr::Shift(x, _) => x.has_rolling(),
            RefExpr::Bin(_, a, b) | RefExpr::Cmp(_, a, b) => a.has_rolling() || b.has_rolling(),
        }
    }

    /// Values at every index `0..n`.
    pub fn eval(&self, data: &BTreeMap<&str, Vec<f64>>, n: usize) -> Vec<f64> {
        match self {
            RefExpr::Attr(a) => data[a].clone(),
            RefExpr::Const(c) => vec![*c; n],
            RefExpr::Neg(x) => x.eval(data, n).into_iter().map(|v| -v).collect(),
            RefExpr::Abs(x) => x.eval(data, n).into_iter().map(f64::abs).collect(),
            RefExpr::Log(x) => x
                .eval(data, n)
                .into_iter()
                .map(|v| if v > 0.0 { v.ln() } else { f64::NAN })
                .collect(),
            RefExpr::Bin(op, a, b) => {
                let (a, b) = (a.eval(data, n), b.eval(data, n));
                (0..n)
                    .map(|t| match op {
                        '+' => a[t] + b[t],
                        '-' => a[t] - b[t],
                        '*' => a[t] * b[t],
                        '/' if b[t] == 0.0 => f64::NAN,
                        '/' => a[t] / b[t],
                        _ => unreachable!(),
                    })
                    .collect()
            }
            RefExpr::Cmp(op, a, b) => {
                let (a, b) = (a.eval(data, n), b.eval(data, n));
                (0..n)
                    .map(|t| {
                        let (x, y) = (a[t], b[t]);
                        if x.is_nan() || y.is_nan() {
                            return f64::NAN;
                        }
                        let r = match *op {
                            ">" => x > y,
                            "<" => x < y,
                            ">=" => x >= y,
                            "<=" => x <= y,
                            "==" => x == y,
                            _ => unreachable!(),
                        };
                        if r {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
            RefExpr::Roll(op, x, w) => {
                let x = x.eval(data, n);
                (0..n)
                    .map(|t| {
                        if t + 1 < *w {
                            return f64::NAN;
                        }
                        let win = &x[t + 1 - w..=t];
                        if win.iter().any(|v| v.is_nan()) {
                            return f64::NAN;
                        }
                        window_stat(op, win)
                    })
                    .collect()
            }
            RefExpr::Shift(x, s) => {
                let x = x.eval(data, n);
                (0..n).map(|t| if t < *s { f64::NAN } else { x[t - s] }).collect()
            }
        }
    }
}

/// Brute-force window statistics; STD is the sample estimator.
pub fn window_stat(op: &str, win: &[f64]) -> f64 {
    let n = win.len();
    let mut sum = 0.0;
    for v in win {
        sum += v;
    }
    match op {
        "SUM" => sum,
        "MEAN" => sum / n as f64,
        "STD" => {
            if n < 2 {
                return f64::NAN;
            }
            let mean = sum / n as f64;
            let mut ss = 0.0;
            for v in win {
                ss += (v - mean) * (v - mean);
            }
            (ss / (n as f64 - 1.0)).sqrt()
        }
        "MAX" => {
            let mut m = win[0];
            for &v in win {
                if v > m {
                    m = v;
                }
            }
            m
        }
        "MIN" => {
            let mut m = win[0];
            for &v in win {
                if v < m {
                    m = v;
                }
            }
            m
        }
        _ => unreachable!(),
    }
}

pub const ATTRS: [&str; 3] = ["close", "volume", "open"];

pub fn random_expr(rng: &mut impl Rng, depth: usize) -> RefExpr {
    if depth == 0 || rng.random_bool(0.25) {
        return if rng.random_bool(0.75) {
            RefExpr::Attr(ATTRS[rng.random_range(0..ATTRS.len())])
        } else {
            let c: f64 = rng.random_range(-5.0..5.0);
            RefExpr::Const((c * 4.0).round() / 4.0)
        };
    }
    let sub = |rng: &mut _| Box::new(random_expr(rng, depth - 1));
    match rng.random_range(0..10) {
        0 => RefExpr::Neg(sub(rng)),
        1 => RefExpr::Abs(sub(rng)),
        2 => RefExpr::Log(sub(rng)),
        3 | 4 => {
            let op = ['+', '-', '*', '/'][rng.random_range(0..4)];
            RefExpr::Bin(op, sub(rng), sub(rng))
        }
        5 => {
            let op = [">", "<", ">=", "<=", "=="][rng.random_range(0..5)];
            RefExpr::Cmp(op, sub(rng), sub(rng))
        }
        6..=8 => {
            let op = ["MEAN", "STD", "SUM", "MAX", "MIN"][rng.random_range(0..5)];
            RefExpr::Roll(op, sub(rng), rng.random_range(1..=10))
        }
        _ => RefExpr::Shift(sub(rng), rng.random_range(0..=5)),
    }
}

/// Random-walk-ish series with occasional gaps and exact repeats, already
/// rounded to `f32` like stored data.
pub fn random_series(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    let mut x: f64 = rng.random_range(1.0..100.0);
    (0..n)
        .map(|_| {
            if rng.random_bool(0.05) {
                return f32::NAN;
            }
            if !rng.random_bool(0.1) {
                x *= rng.random_range(-0.1..0.1f64).exp();
            }
            x as f32
        })
        .collect()
}

/// `|a - b| <= rel * max(|a|, |b|)`, NaN matching NaN.
pub fn close_rel(a: f64, b: f64, rel: f64) -> bool {
    if a.is_nan() || b.is_nan() {
        return a.is_nan() && b.is_nan();
    }
    a == b || (a - b).abs() <= rel * a.abs().max(b.abs())
}

/// Kolmogorov–Smirnov distance between a sample and a continuous CDF.
pub fn ks_one_sample(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov–Smirnov distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// 1% critical value of the two-sample KS statistic (asymptotic).
pub fn ks_critical_1pct(n: usize, m: usize) -> f64 {
    1.628 * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

/// CDF of `p(x) ∝ exp(-(x - mu)² / 2σ²)` on `(0, 1)`, by trapezoid
/// integration on `points` grid points.
pub fn truncated_gaussian_cdf(mu: f64, sigma: f64, points: usize) -> impl Fn(f64) -> f64 {
    let h = 1.0 / (points - 1) as f64;
    let dens: Vec<f64> = (0..points)
        .map(|i| {
            let x = i as f64 * h;
            (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let mut cum = vec![0.0; points];
    for i in 1..points {
        cum[i] = cum[i - 1] + 0.5 * h * (dens[i - 1] + dens[i]);
    }
    let total = cum[points - 1];
    move |x: f64| {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let i = ((x / h) as usize).min(points - 2);
        let frac = (x - i as f64 * h) / h;
        (cum[i] + frac * (cum[i + 1] - cum[i])) / total
    }
}
