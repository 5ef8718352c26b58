use std::collections::BTreeSet;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Abs,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Gt,
    Lt,
    Ge,
    Le,
    Eq,
}

impl BinaryOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Gt => ">",
            BinaryOp::Lt => "<",
            BinaryOp::Ge => ">=",
            BinaryOp::Le => "<=",
            BinaryOp::Eq => "==",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RollingOp {
    Mean,
    Std,
    Sum,
    Max,
    Min,
}

impl RollingOp {
    pub const ALL: [RollingOp; 5] = [RollingOp::Mean, RollingOp::Std, RollingOp::Sum, RollingOp::Max, RollingOp::Min];

    pub fn name(self) -> &'static str {
        match self {
            RollingOp::Mean => "MEAN",
            RollingOp::Std => "STD",
            RollingOp::Sum => "SUM",
            RollingOp::Max => "MAX",
            RollingOp::Min => "MIN",
        }
    }
}

/// Syntax tree of a factor formula.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    /// `$name`, a stored attribute series.
    Attr(String),
    Const(f64),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    /// Trailing window of `window` points ending at the current index.
    Rolling(RollingOp, Box<Expr>, usize),
    /// Value `shift` points earlier.
    Ref(Box<Expr>, usize),
}

impl Expr {
    pub fn attr(name: &str) -> Expr {
        Expr::Attr(name.to_string())
    }

    pub fn unary(op: UnaryOp, child: Expr) -> Expr {
        Expr::Unary(op, Box::new(child))
    }

    pub fn binary(op: BinaryOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    pub fn rolling(op: RollingOp, child: Expr, window: usize) -> Expr {
        Expr::Rolling(op, Box::new(child), window)
    }

    pub fn shift(child: Expr, shift: usize) -> Expr {
        Expr::Ref(Box::new(child), shift)
    }

    /// Extra leading points needed for the first output to be exact.
    pub fn lookback(&self) -> usize {
        match self {
            Expr::Attr(_) | Expr::Const(_) => 0,
            Expr::Unary(_, c) => c.lookback(),
            Expr::Binary(_, a, b) => a.lookback().max(b.lookback()),
            Expr::Rolling(_, c, n) => c.lookback() + n - 1,
            Expr::Ref(c, s) => c.lookback() + s,
        }
    }

    /// Raw attribute names referenced anywhere in the tree.
    pub fn attributes(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.collect_attributes(&mut out);
        out
    }

    fn collect_attributes<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            Expr::Attr(a) => {
                out.insert(a);
            }
            Expr::Const(_) => {}
            Expr::Unary(_, c) | Expr::Rolling(_, c, _) | Expr::Ref(c, _) => c.collect_attributes(out),
            Expr::Binary(_, a, b) => {
                a.collect_attributes(out);
                b.collect_attributes(out);
            }
        }
    }

    pub fn canonical_key(&self) -> CanonicalKey {
        CanonicalKey(self.to_string())
    }
}

/// Canonical text: fully parenthesized, upper-case function names,
/// shortest round-trip constants. `parse(e.to_string()) == e` for parsed trees.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Attr(a) => write!(f, "${a}"),
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Unary(UnaryOp::Neg, c) => write!(f, "(-{c})"),
            Expr::Unary(UnaryOp::Abs, c) => write!(f, "ABS({c})"),
            Expr::Unary(UnaryOp::Log, c) => write!(f, "LOG({c})"),
            Expr::Binary(op, a, b) => write!(f, "({a}{}{b})", op.symbol()),
            Expr::Rolling(op, c, n) => write!(f, "{}({c},{n})", op.name()),
            Expr::Ref(c, s) => write!(f, "REF({c},{s})"),
        }
    }
}

/// Normalized rendering of an expression, used as a cache key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CanonicalKey(String);

impl CanonicalKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CanonicalKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}
