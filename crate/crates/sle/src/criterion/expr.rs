//! Restricted arithmetic expressions in one variable for custom
//! boundary functions: numbers, `x`, `+ - * / ^`, parentheses, and the
//! functions log, exp, sqrt, pow, min, max.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum Expr {
    Num(f64),
    Var,
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Log(Box<Expr>),
    Exp(Box<Expr>),
    Sqrt(Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn eval(&self, x: f64) -> Result<f64> {
        let v = match self {
            Expr::Num(c) => *c,
            Expr::Var => x,
            Expr::Add(a, b) => a.eval(x)? + b.eval(x)?,
            Expr::Sub(a, b) => a.eval(x)? - b.eval(x)?,
            Expr::Mul(a, b) => a.eval(x)? * b.eval(x)?,
            Expr::Div(a, b) => a.eval(x)? / b.eval(x)?,
            Expr::Pow(a, b) => a.eval(x)?.powf(b.eval(x)?),
            Expr::Neg(a) => -a.eval(x)?,
            Expr::Log(a) => a.eval(x)?.ln(),
            Expr::Exp(a) => a.eval(x)?.exp(),
            Expr::Sqrt(a) => a.eval(x)?.sqrt(),
            Expr::Min(a, b) => a.eval(x)?.min(b.eval(x)?),
            Expr::Max(a, b) => a.eval(x)?.max(b.eval(x)?),
        };
        if v.is_nan() {
            return Err(Error::Numerical(format!(
                "expression evaluated to NaN at x = {x}"
            )));
        }
        Ok(v)
    }
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

pub fn parse(src: &str) -> Result<Expr> {
    let mut p = Parser { src, bytes: src.as_bytes(), pos: 0 };
    let e = p.expression()?;
    p.skip_ws();
    if p.pos != p.bytes.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(e)
}

impl<'a> Parser<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Parameter(format!("{msg} at position {} in `{}`", self.pos, self.src))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected `{}`", c as char)))
        }
    }

    fn expression(&mut self) -> Result<Expr> {
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

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(b'/') => {
                    self.pos += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            // right-associative; exponent may carry its own sign
            let exp = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expression()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            _ => Err(self.err("expected number, `x`, function, or `(`")),
        }
    }

    fn number(&mut self) -> Result<Expr> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            if c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E' {
                self.pos += 1;
            } else if (c == b'+' || c == b'-')
                && self.pos > start
                && matches!(self.bytes[self.pos - 1], b'e' | b'E')
            {
                self.pos += 1;
            } else {
                break;
            }
        }
        self.src[start..self.pos]
            .parse::<f64>()
            .map(Expr::Num)
            .map_err(|_| {
                self.pos = start;
                self.err("malformed number")
            })
    }

    fn ident(&mut self) -> Result<Expr> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        let name = &self.src[start..self.pos];
        match name {
            "x" => Ok(Expr::Var),
            "log" | "exp" | "sqrt" => {
                self.expect(b'(')?;
                let arg = self.expression()?;
                self.expect(b')')?;
                Ok(match name {
                    "log" => Expr::Log(Box::new(arg)),
                    "exp" => Expr::Exp(Box::new(arg)),
                    _ => Expr::Sqrt(Box::new(arg)),
                })
            }
            "pow" | "min" | "max" => {
                self.expect(b'(')?;
                let a = self.expression()?;
                self.expect(b',')?;
                let b = self.expression()?;
                self.expect(b')')?;
                Ok(match name {
                    "pow" => Expr::Pow(Box::new(a), Box::new(b)),
                    "min" => Expr::Min(Box::new(a), Box::new(b)),
                    _ => Expr::Max(Box::new(a), Box::new(b)),
                })
            }
            _ => {
                self.pos = start;
                Err(self.err(&format!("unknown identifier `{name}`")))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn arithmetic_and_functions() {
        let e = parse("x/(log(x)^2) + min(1, sqrt(x)) - 0.5*exp(-x)").unwrap();
        let x = 9.0f64;
        let expected = x / x.ln().powi(2) + 1.0 - 0.5 * (-x).exp();
        assert_relative_eq!(e.eval(x).unwrap(), expected, max_relative = 1e-14);
    }

    #[test]
    fn power_right_associative_with_negation() {
        let e = parse("2^-2").unwrap();
        assert_relative_eq!(e.eval(1.0).unwrap(), 0.25);
        let e = parse("x^0.5").unwrap();
        assert_relative_eq!(e.eval(16.0).unwrap(), 4.0);
    }

    #[test]
    fn scientific_notation() {
        let e = parse("1.5e-3 * x").unwrap();
        assert_relative_eq!(e.eval(2.0).unwrap(), 3e-3);
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = parse("x + * 2").unwrap_err().to_string();
        assert!(err.contains("position 4"), "{err}");
        let err = parse("foo(x)").unwrap_err().to_string();
        assert!(err.contains("unknown identifier"), "{err}");
        let err = parse("min(x, )").unwrap_err().to_string();
        assert!(err.contains("position"), "{err}");
    }

    #[test]
    fn nan_is_rejected() {
        let e = parse("log(x)").unwrap();
        assert!(e.eval(-1.0).is_err());
    }
}
