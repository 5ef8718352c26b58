use std::sync::Arc;

use super::ast::{BinaryOp, Expr, RollingOp, UnaryOp};
use super::EvalError;
use crate::cache::{MemoCache, MemoKey, DEFAULT_MEMO_CAPACITY};
use crate::storage::{StorageError, Store};

/// Source of raw attribute values over calendar-index ranges.
pub trait SeriesProvider {
    /// Values for indices `lo..=hi`, NaN where nothing is stored.
    fn read(&self, instrument: &str, attribute: &str, lo: usize, hi: usize) -> Result<Vec<f32>, EvalError>;
}

/// Reads straight from the flat-file store.
pub struct StoreProvider<'a> {
    store: &'a Store,
    frequency: String,
}

impl<'a> StoreProvider<'a> {
    pub fn new(store: &'a Store, frequency: &str) -> Self {
        StoreProvider {
            store,
            frequency: frequency.to_string(),
        }
    }
}

impl SeriesProvider for StoreProvider<'_> {
    fn read(&self, instrument: &str, attribute: &str, lo: usize, hi: usize) -> Result<Vec<f32>, EvalError> {
        self.store
            .read_series(instrument, attribute, &self.frequency, lo, hi)
            .map_err(|e| attribute_error(self.store, e))
    }
}

/// A missing file for an instrument that otherwise exists means the
/// attribute itself is unknown.
pub(crate) fn attribute_error(store: &Store, e: StorageError) -> EvalError {
    match e {
        StorageError::MissingSeries {
            instrument, attribute, ..
        } if store.has_instrument(&instrument) => EvalError::UnknownAttribute { instrument, attribute },
        e => EvalError::Storage(e),
    }
}

/// Evaluates expressions for one instrument, memoizing every node result.
pub struct Evaluator<'a, P: SeriesProvider + ?Sized> {
    provider: &'a P,
    instrument: &'a str,
    memo: MemoCache,
    node_evals: u64,
}

type Values = Arc<Vec<f64>>;

impl<'a, P: SeriesProvider + ?Sized> Evaluator<'a, P> {
    pub fn new(provider: &'a P, instrument: &'a str, memo_capacity: usize) -> Self {
        Evaluator {
            provider,
            instrument,
            memo: MemoCache::new(memo_capacity),
            node_evals: 0,
        }
    }

    /// Node computations actually performed (memo misses).
    pub fn node_evals(&self) -> u64 {
        self.node_evals
    }

    pub fn memo(&self) -> &MemoCache {
        &self.memo
    }

    /// Values of `expr` at indices `lo..=hi`.
    pub fn eval(&mut self, expr: &Expr, lo: usize, hi: usize) -> Result<Vec<f64>, EvalError> {
        if lo > hi {
            return Err(EvalError::InvalidRange { lo, hi });
        }
        let v = self.node(expr, lo, hi)?;
        Ok(Arc::try_unwrap(v).unwrap_or_else(|shared| (*shared).clone()))
    }

    fn node(&mut self, expr: &Expr, lo: usize, hi: usize) -> Result<Values, EvalError> {
        let key = MemoKey {
            expr: expr.to_string(),
            instrument: self.instrument.to_string(),
            lo,
            hi,
        };
        if let Some(v) = self.memo.get(&key) {
            return Ok(v);
        }
        self.node_evals += 1;
        let v = Arc::new(self.compute(expr, lo, hi)?);
        self.memo.insert(key, v.clone());
        Ok(v)
    }

    fn compute(&mut self, expr: &Expr, lo: usize, hi: usize) -> Result<Vec<f64>, EvalError> {
        let n = hi - lo + 1;
        Ok(match expr {
            Expr::Attr(name) => self
                .provider
                .read(self.instrument, name, lo, hi)?
                .into_iter()
                .map(f64::from)
                .collect(),
            Expr::Const(c) => vec![*c; n],
            Expr::Unary(op, child) => {
                let c = self.node(child, lo, hi)?;
                c.iter().map(|&x| unary(*op, x)).collect()
            }
            Expr::Binary(op, a, b) => {
                let a = self.node(a, lo, hi)?;
                let b = self.node(b, lo, hi)?;
                a.iter().zip(b.iter()).map(|(&x, &y)| binary(*op, x, y)).collect()
            }
            Expr::Rolling(op, child, window) => {
                let w = *window;
                let clo = lo.saturating_sub(w - 1);
                let c = self.node(child, clo, hi)?;
                (lo..=hi)
                    .map(|t| {
                        if t + 1 < w {
                            f64::NAN
                        } else {
                            rolling(*op, &c[t + 1 - w - clo..=t - clo])
                        }
                    })
                    .collect()
            }
            Expr::Ref(child, shift) => {
                let s = *shift;
                if hi < s {
                    // nothing in range reaches back far enough; still touch the
                    // child so missing data errors surface consistently
                    self.node(child, 0, 0)?;
                    vec![f64::NAN; n]
                } else {
                    let clo = lo.saturating_sub(s);
                    let c = self.node(child, clo, hi - s)?;
                    (lo..=hi).map(|t| if t < s { f64::NAN } else { c[t - s - clo] }).collect()
                }
            }
        })
    }
}

/// One-shot evaluation with a fresh memo of the default capacity.
pub fn evaluate<P: SeriesProvider + ?Sized>(
    expr: &Expr,
    instrument: &str,
    lo: usize,
    hi: usize,
    provider: &P,
) -> Result<Vec<f64>, EvalError> {
    Evaluator::new(provider, instrument, DEFAULT_MEMO_CAPACITY).eval(expr, lo, hi)
}

fn unary(op: UnaryOp, x: f64) -> f64 {
    match op {
        UnaryOp::Neg => -x,
        UnaryOp::Abs => x.abs(),
        UnaryOp::Log => {
            if x > 0.0 {
                x.ln()
            } else {
                f64::NAN
            }
        }
    }
}

fn binary(op: BinaryOp, x: f64, y: f64) -> f64 {
    let cmp = |b: bool| {
        if x.is_nan() || y.is_nan() {
            f64::NAN
        } else if b {
            1.0
        } else {
            0.0
        }
    };
    match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
        BinaryOp::Div => {
            if y == 0.0 {
                f64::NAN
            } else {
                x / y
            }
        }
        BinaryOp::Gt => cmp(x > y),
        BinaryOp::Lt => cmp(x < y),
        BinaryOp::Ge => cmp(x >= y),
        BinaryOp::Le => cmp(x <= y),
        BinaryOp::Eq => cmp(x == y),
    }
}

/// Statistic of one full window; any NaN poisons the window.
fn rolling(op: RollingOp, w: &[f64]) -> f64 {
    if w.iter().any(|x| x.is_nan()) {
        return f64::NAN;
    }
    let n = w.len() as f64;
    match op {
        RollingOp::Sum => w.iter().sum(),
        RollingOp::Mean => w.iter().sum::<f64>() / n,
        RollingOp::Std => {
            if w.len() < 2 {
                return f64::NAN;
            }
            let mean = w.iter().sum::<f64>() / n;
            let ss: f64 = w.iter().map(|x| (x - mean) * (x - mean)).sum();
            (ss / (n - 1.0)).sqrt()
        }
        RollingOp::Max => w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        RollingOp::Min => w.iter().copied().fold(f64::INFINITY, f64::min),
    }
}
