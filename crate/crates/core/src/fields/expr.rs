//! Expression language for scalar components of vector fields.
//!
//! Grammar (byte offsets reported on errors):
//!
//! ```text
//! field  := "(" expr { "," expr } ")"
//! expr   := term { ("+" | "-") term }
//! term   := factor { ("*" | "/") factor }
//! factor := [ "-" ] atom
//! atom   := number | ident | ident "(" expr ")" | "(" expr ")"
//! ```
//!
//! Identifiers: coordinates `a`, `b` (aliases of `x1`, `x2`) and `x1` … `x9`;
//! functions `sin`, `cos`, `exp`, `abs`.  Unary minus binds tighter than
//! `*`/`/`, which bind tighter than `+`/`-`.

use std::fmt;

use super::FieldError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Abs,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Abs => "abs",
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Exp => v.exp(),
            Func::Abs => v.abs(),
        }
    }
}

/// Expression tree over coordinates `x1 … x9` (0-based [`Expr::Var`] index).
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Call(Func, Box<Expr>),
}

/// Denominator magnitudes below this trap as division by zero.
pub const DIV_FLOOR: f64 = 1e-300;

impl Expr {
    pub fn eval(&self, x: &[f64]) -> Result<f64, FieldError> {
        Ok(match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => {
                if *i >= x.len() {
                    return Err(FieldError::ArityMismatch { var: i + 1, dim: x.len() });
                }
                x[*i]
            }
            Expr::Add(l, r) => l.eval(x)? + r.eval(x)?,
            Expr::Sub(l, r) => l.eval(x)? - r.eval(x)?,
            Expr::Mul(l, r) => l.eval(x)? * r.eval(x)?,
            Expr::Div(l, r) => {
                let d = r.eval(x)?;
                if d.abs() < DIV_FLOOR {
                    return Err(FieldError::DivisionByZero);
                }
                l.eval(x)? / d
            }
            Expr::Neg(e) => -e.eval(x)?,
            Expr::Call(f, e) => f.apply(e.eval(x)?),
        })
    }

    /// Highest coordinate index used, plus one (0 for constants).
    pub fn max_var(&self) -> usize {
        match self {
            Expr::Const(_) => 0,
            Expr::Var(i) => i + 1,
            Expr::Add(l, r) | Expr::Sub(l, r) | Expr::Mul(l, r) | Expr::Div(l, r) => {
                l.max_var().max(r.max_var())
            }
            Expr::Neg(e) | Expr::Call(_, e) => e.max_var(),
        }
    }
}

/// Fully parenthesized rendering; feeding the output back through
/// [`parse_expr`] reconstructs the same tree for trees the parser can emit
/// (the parser never produces negative constants, it parses `-c` as a unary
/// minus).
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => {
                if c.is_sign_negative() {
                    write!(f, "-{}", -c)
                } else {
                    write!(f, "{c}")
                }
            }
            Expr::Var(0) => write!(f, "a"),
            Expr::Var(1) => write!(f, "b"),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Add(l, r) => write!(f, "({l} + {r})"),
            Expr::Sub(l, r) => write!(f, "({l} - {r})"),
            Expr::Mul(l, r) => write!(f, "({l} * {r})"),
            Expr::Div(l, r) => write!(f, "({l} / {r})"),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Call(func, e) => write!(f, "{}({e})", func.name()),
        }
    }
}

/// Render a component tuple as DSL source, e.g. `"(a, -b)"`.
pub fn print_field(components: &[Expr]) -> String {
    let inner: Vec<String> = components.iter().map(|e| e.to_string()).collect();
    format!("({})", inner.join(", "))
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Self { src: src.as_bytes(), pos: 0 }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), FieldError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.syntax(&format!("'{}'", c as char)))
        }
    }

    fn syntax(&mut self, expected: &str) -> FieldError {
        self.skip_ws();
        FieldError::Syntax { offset: self.pos, expected: expected.to_string() }
    }

    fn expr(&mut self) -> Result<Expr, FieldError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(b'-') => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, FieldError> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                Some(b'/') => {
                    self.pos += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.factor()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, FieldError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            Ok(Expr::Neg(Box::new(self.atom()?)))
        } else {
            self.atom()
        }
    }

    fn atom(&mut self) -> Result<Expr, FieldError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            _ => Err(self.syntax("a number, identifier, or '('")),
        }
    }

    fn number(&mut self) -> Result<Expr, FieldError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && (self.src[self.pos].is_ascii_digit() || self.src[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < self.src.len() && (self.src[self.pos] | 0x20) == b'e' {
            let mark = self.pos;
            self.pos += 1;
            if self.pos < self.src.len() && (self.src[self.pos] == b'+' || self.src[self.pos] == b'-') {
                self.pos += 1;
            }
            if self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                self.pos = mark; // bare 'e' belongs to the next token
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        text.parse::<f64>()
            .map(Expr::Const)
            .map_err(|_| FieldError::Syntax { offset: start, expected: "a number".into() })
    }

    fn ident(&mut self) -> Result<Expr, FieldError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap().to_string();
        match name.as_str() {
            "a" => Ok(Expr::Var(0)),
            "b" => Ok(Expr::Var(1)),
            "sin" | "cos" | "exp" | "abs" => {
                let func = match name.as_str() {
                    "sin" => Func::Sin,
                    "cos" => Func::Cos,
                    "exp" => Func::Exp,
                    _ => Func::Abs,
                };
                self.expect(b'(')?;
                let arg = self.expr()?;
                self.expect(b')')?;
                Ok(Expr::Call(func, Box::new(arg)))
            }
            _ => {
                if let Some(rest) = name.strip_prefix('x') {
                    if let Ok(k) = rest.parse::<usize>() {
                        if (1..=9).contains(&k) {
                            return Ok(Expr::Var(k - 1));
                        }
                    }
                }
                Err(FieldError::UnknownIdentifier { name, offset: start })
            }
        }
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos >= self.src.len()
    }
}

/// Parse a scalar expression (used for terminal costs and tests).
pub fn parse_expr(src: &str) -> Result<Expr, FieldError> {
    let mut p = Parser::new(src);
    let e = p.expr()?;
    if !p.at_end() {
        return Err(p.syntax("end of input"));
    }
    Ok(e)
}

/// Parse a vector field tuple `"(expr, …, expr)"`.
pub fn parse_field_exprs(src: &str) -> Result<Vec<Expr>, FieldError> {
    let mut p = Parser::new(src);
    p.expect(b'(')?;
    let mut out = vec![p.expr()?];
    while p.peek() == Some(b',') {
        p.pos += 1;
        out.push(p.expr()?);
    }
    p.expect(b')')?;
    if !p.at_end() {
        return Err(p.syntax("end of input"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eval1(src: &str, x: &[f64]) -> f64 {
        parse_expr(src).unwrap().eval(x).unwrap()
    }

    #[test]
    fn precedence_and_unary_minus() {
        assert_eq!(eval1("1 + 2 * 3", &[]), 7.0);
        assert_eq!(eval1("(1 + 2) * 3", &[]), 9.0);
        assert_eq!(eval1("-2 * 3", &[]), -6.0); // unary minus binds to the atom
        assert_eq!(eval1("2 - -3", &[]), 5.0);
        assert_eq!(eval1("6 / 2 / 3", &[]), 1.0); // left associative
        assert_eq!(eval1("1 - 2 - 3", &[]), -4.0);
    }

    #[test]
    fn coordinates_and_aliases() {
        let x = [2.0, 5.0, -1.0];
        assert_eq!(eval1("a + b", &x), 7.0);
        assert_eq!(eval1("x1 + x2 + x3", &x), 6.0);
    }

    #[test]
    fn functions_evaluate() {
        let x = [0.5];
        assert!((eval1("sin(a) + cos(a)", &x) - (0.5f64.sin() + 0.5f64.cos())).abs() < 1e-15);
        assert!((eval1("exp(a)", &x) - 0.5f64.exp()).abs() < 1e-15);
        assert_eq!(eval1("abs(0 - a)", &x), 0.5);
    }

    #[test]
    fn numbers_with_exponents() {
        assert_eq!(eval1("1.5e2", &[]), 150.0);
        assert_eq!(eval1("2.5E-1", &[]), 0.25);
        assert_eq!(eval1(".5", &[]), 0.5);
    }

    #[test]
    fn field_tuples() {
        let f = parse_field_exprs("(a + b, -a)").unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].eval(&[1.0, 2.0]).unwrap(), 3.0);
        assert_eq!(f[1].eval(&[1.0, 2.0]).unwrap(), -1.0);
        assert_eq!(parse_field_exprs("(a)").unwrap().len(), 1);
        assert_eq!(parse_field_exprs("(0, 1)").unwrap().len(), 2);
    }

    #[test]
    fn syntax_errors_carry_byte_offsets() {
        match parse_expr("1 + * 2") {
            Err(FieldError::Syntax { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected syntax error, got {other:?}"),
        }
        match parse_expr("sin 2") {
            Err(FieldError::Syntax { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected syntax error, got {other:?}"),
        }
        match parse_expr("a + qq") {
            Err(FieldError::UnknownIdentifier { name, offset }) => {
                assert_eq!(name, "qq");
                assert_eq!(offset, 4);
            }
            other => panic!("expected unknown identifier, got {other:?}"),
        }
        assert!(parse_field_exprs("(a, b").is_err());
        assert!(parse_expr("x12").is_err());
    }

    #[test]
    fn division_by_zero_traps() {
        let e = parse_expr("1 / a").unwrap();
        assert!(matches!(e.eval(&[0.0]), Err(FieldError::DivisionByZero)));
        assert!(matches!(e.eval(&[1e-301]), Err(FieldError::DivisionByZero)));
        assert_eq!(e.eval(&[0.5]).unwrap(), 2.0);
    }

    #[test]
    fn arity_checked_at_eval() {
        let e = parse_expr("x3").unwrap();
        assert!(matches!(e.eval(&[1.0, 2.0]), Err(FieldError::ArityMismatch { .. })));
        assert_eq!(e.eval(&[0.0, 0.0, 7.0]).unwrap(), 7.0);
    }

    // Random trees in the parser's image: nonnegative constants, negation
    // only as a prefix operator.
    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0f64..10.0).prop_map(|c| Expr::Const((c * 64.0).round() / 64.0)),
            (0usize..3).prop_map(Expr::Var),
        ];
        leaf.prop_recursive(4, 48, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(l, r)| Expr::Add(Box::new(l), Box::new(r))),
                (inner.clone(), inner.clone()).prop_map(|(l, r)| Expr::Sub(Box::new(l), Box::new(r))),
                (inner.clone(), inner.clone()).prop_map(|(l, r)| Expr::Mul(Box::new(l), Box::new(r))),
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (prop_oneof![Just(Func::Sin), Just(Func::Cos), Just(Func::Abs)], inner)
                    .prop_map(|(f, e)| Expr::Call(f, Box::new(e))),
            ]
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn print_parse_roundtrip_is_identity(e in arb_expr()) {
            let printed = e.to_string();
            let reparsed = parse_expr(&printed).unwrap();
            prop_assert_eq!(&reparsed, &e, "printed: {}", printed);
        }

        #[test]
        fn roundtrip_preserves_values(
            e in arb_expr(),
            x in prop::collection::vec(-3.0f64..3.0, 3),
        ) {
            let reparsed = parse_expr(&e.to_string()).unwrap();
            let v0 = e.eval(&x).unwrap();
            let v1 = reparsed.eval(&x).unwrap();
            prop_assert!((v0 - v1).abs() <= 1e-14 * (1.0 + v0.abs()));
        }
    }
}
