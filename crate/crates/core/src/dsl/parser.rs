//! Recursive-descent parser for the program language.
//!
//! Statements may be separated by `;`, newlines, or nothing at all: an
//! expression always ends before a token that cannot continue it, so
//! `o_1 = i_1 o_2 = i_2` is two statements. Name resolution happens during
//! parsing, reads of names that are not inputs and have not been assigned
//! yet are rejected with their position.

use std::collections::HashSet;

use thiserror::Error;

use super::ast::{Expr, Pos, Program, Signature, Statement};
use super::lexer::{tokenize, Tok};
use super::FUNCTION_NAMES;
use crate::matrix::{Reduction, UnaryOp, MAX_DIM};

/// Deepest allowed nesting of parentheses and calls.
pub const MAX_NESTING: usize = 64;

/// Largest allowed expression, counted in AST nodes.
pub const MAX_EXPR_NODES: usize = 512;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("{pos}: syntax error: {message}")]
    Syntax { pos: Pos, message: String },
    #[error("{pos}: use-before-assign: `{name}`")]
    Scope { pos: Pos, name: String },
    #[error("{pos}: unknown function `{name}`")]
    UnknownFunction { pos: Pos, name: String },
    #[error("{pos}: `{name}` takes {expected} argument(s), found {found}")]
    Arity { pos: Pos, name: String, expected: usize, found: usize },
}

impl ParseError {
    pub fn pos(&self) -> Pos {
        match self {
            ParseError::Syntax { pos, .. }
            | ParseError::Scope { pos, .. }
            | ParseError::UnknownFunction { pos, .. }
            | ParseError::Arity { pos, .. } => *pos,
        }
    }

    /// Short machine-friendly category.
    pub fn kind(&self) -> &'static str {
        match self {
            ParseError::Syntax { .. } => "syntax",
            ParseError::Scope { .. } => "use-before-assign",
            ParseError::UnknownFunction { .. } => "unknown-function",
            ParseError::Arity { .. } => "arity",
        }
    }
}

/// Parses a complete program.
///
/// Text without an `fn` header is accepted as a bare statement list with no
/// inputs; its outputs are the assigned names in order of first assignment.
pub fn parse(src: &str) -> Result<Program, ParseError> {
    let mut p = Parser::new(src)?;
    if p.peek() == &Tok::Fn {
        p.program()
    } else {
        let mut defined = HashSet::new();
        let statements = p.statements(&mut defined, &Tok::Eof)?;
        p.expect(&Tok::Eof)?;
        let mut seen = HashSet::new();
        let outputs = statements
            .iter()
            .filter(|s| seen.insert(s.target.clone()))
            .map(|s| s.target.clone())
            .collect();
        Ok(Program::new(
            "anonymous",
            Signature { inputs: Vec::new(), outputs, anti_leak: false },
            statements,
        ))
    }
}

/// Parses a headerless statement list against a known signature. Text that
/// does start with an `fn` header is parsed as a full program instead.
pub fn parse_body(src: &str, signature: &Signature, name: &str) -> Result<Program, ParseError> {
    let mut p = Parser::new(src)?;
    if p.peek() == &Tok::Fn {
        return p.program();
    }
    let mut defined: HashSet<String> = signature.inputs.iter().cloned().collect();
    let statements = p.statements(&mut defined, &Tok::Eof)?;
    p.expect(&Tok::Eof)?;
    Ok(Program::new(name, signature.clone(), statements))
}

struct Parser {
    toks: Vec<(Tok, Pos)>,
    at: usize,
    depth: usize,
    nodes: usize,
}

impl Parser {
    fn new(src: &str) -> Result<Self, ParseError> {
        Ok(Parser { toks: tokenize(src)?, at: 0, depth: 0, nodes: 0 })
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.at + 1).min(self.toks.len() - 1)].0
    }

    fn pos(&self) -> Pos {
        self.toks[self.at].1
    }

    fn bump(&mut self) -> (Tok, Pos) {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError::Syntax { pos: self.pos(), message: message.into() })
    }

    fn expect(&mut self, tok: &Tok) -> Result<Pos, ParseError> {
        if self.peek() == tok {
            Ok(self.bump().1)
        } else {
            self.error(format!("expected {}, found {}", tok.describe(), self.peek().describe()))
        }
    }

    fn ident(&mut self) -> Result<(String, Pos), ParseError> {
        match self.peek().clone() {
            Tok::Ident(name) => {
                if FUNCTION_NAMES.contains(&name.as_str()) {
                    return self.error(format!("`{name}` is a reserved function name"));
                }
                let pos = self.bump().1;
                Ok((name, pos))
            }
            other => self.error(format!("expected a name, found {}", other.describe())),
        }
    }

    fn name_list(&mut self) -> Result<Vec<String>, ParseError> {
        self.expect(&Tok::LParen)?;
        let mut names = Vec::new();
        if self.peek() != &Tok::RParen {
            loop {
                names.push(self.ident()?.0);
                if self.peek() == &Tok::Comma {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.expect(&Tok::RParen)?;
        Ok(names)
    }

    fn program(&mut self) -> Result<Program, ParseError> {
        self.expect(&Tok::Fn)?;
        let (name, _) = self.ident()?;
        let sig_pos = self.pos();
        let inputs = self.name_list()?;
        self.expect(&Tok::Arrow)?;
        let outputs = self.name_list()?;
        let signature = Signature::new(inputs, outputs)
            .map_err(|e| ParseError::Syntax { pos: sig_pos, message: e.to_string() })?;
        self.expect(&Tok::LBrace)?;
        let mut defined: HashSet<String> = signature.inputs.iter().cloned().collect();
        let statements = self.statements(&mut defined, &Tok::RBrace)?;
        self.expect(&Tok::RBrace)?;
        self.expect(&Tok::Eof)?;
        Ok(Program::new(name, signature, statements))
    }

    fn statements(&mut self, defined: &mut HashSet<String>, end: &Tok) -> Result<Vec<Statement>, ParseError> {
        let mut out = Vec::new();
        while self.peek() != end && self.peek() != &Tok::Eof {
            if self.peek() == &Tok::Semi {
                self.bump();
                continue;
            }
            let (target, pos) = self.ident()?;
            self.expect(&Tok::Assign)?;
            self.nodes = 0;
            let expr = self.expr(defined)?;
            defined.insert(target.clone());
            out.push(Statement { target, expr, pos: Some(pos) });
        }
        Ok(out)
    }

    fn count_node(&mut self) -> Result<(), ParseError> {
        self.nodes += 1;
        if self.nodes > MAX_EXPR_NODES {
            return self.error(format!("expression larger than {MAX_EXPR_NODES} nodes"));
        }
        Ok(())
    }

    fn expr(&mut self, defined: &HashSet<String>) -> Result<Expr, ParseError> {
        let mut lhs = self.term(defined)?;
        loop {
            let op = self.peek().clone();
            if op != Tok::Plus && op != Tok::Minus {
                break;
            }
            self.bump();
            let rhs = self.term(defined)?;
            self.count_node()?;
            lhs = if op == Tok::Plus { Expr::add(lhs, rhs) } else { Expr::sub(lhs, rhs) };
        }
        Ok(lhs)
    }

    fn term(&mut self, defined: &HashSet<String>) -> Result<Expr, ParseError> {
        let mut lhs = self.factor(defined)?;
        while self.peek() == &Tok::At {
            self.bump();
            let rhs = self.factor(defined)?;
            self.count_node()?;
            lhs = Expr::matmul(lhs, rhs);
        }
        Ok(lhs)
    }

    fn factor(&mut self, defined: &HashSet<String>) -> Result<Expr, ParseError> {
        self.depth += 1;
        if self.depth > MAX_NESTING {
            self.depth -= 1;
            return self.error(format!("expression nested deeper than {MAX_NESTING}"));
        }
        let r = self.factor_inner(defined);
        self.depth -= 1;
        self.count_node()?;
        r
    }

    fn number_literal(&mut self) -> Option<f64> {
        match (self.peek().clone(), self.peek2().clone()) {
            (Tok::Number(v), _) => {
                self.bump();
                Some(v)
            }
            (Tok::Minus, Tok::Number(v)) => {
                self.bump();
                self.bump();
                Some(-v)
            }
            _ => None,
        }
    }

    fn factor_inner(&mut self, defined: &HashSet<String>) -> Result<Expr, ParseError> {
        if let Some(v) = self.number_literal() {
            if self.peek() == &Tok::Star {
                self.bump();
                let inner = self.factor(defined)?;
                return Ok(Expr::Scale(v, Box::new(inner)));
            }
            return Ok(Expr::Num(v));
        }
        match self.peek().clone() {
            Tok::LParen => {
                self.bump();
                let e = self.expr(defined)?;
                self.expect(&Tok::RParen)?;
                Ok(e)
            }
            Tok::Ident(name) => {
                let pos = self.pos();
                if self.peek2() == &Tok::LParen {
                    self.bump();
                    return self.call(&name, pos, defined);
                }
                if FUNCTION_NAMES.contains(&name.as_str()) {
                    return self.error(format!("function `{name}` used without arguments"));
                }
                self.bump();
                if !defined.contains(&name) {
                    return Err(ParseError::Scope { pos, name });
                }
                Ok(Expr::Var(name))
            }
            other => self.error(format!("expected an expression, found {}", other.describe())),
        }
    }

    fn call(&mut self, name: &str, pos: Pos, defined: &HashSet<String>) -> Result<Expr, ParseError> {
        let expected = match name {
            "maxs" => 2,
            n if FUNCTION_NAMES.contains(&n) => 1,
            _ => return Err(ParseError::UnknownFunction { pos, name: name.to_string() }),
        };
        self.expect(&Tok::LParen)?;
        let mut args = Vec::new();
        if self.peek() != &Tok::RParen {
            loop {
                args.push(self.expr(defined)?);
                if self.peek() == &Tok::Comma {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.expect(&Tok::RParen)?;
        if args.len() != expected {
            return Err(ParseError::Arity { pos, name: name.to_string(), expected, found: args.len() });
        }
        let mut args = args.into_iter();
        let first = args.next().expect("arity checked");
        let boxed = || Box::new(first.clone());
        Ok(match name {
            "inv" => Expr::Inv(boxed()),
            "tr" => Expr::Tr(boxed()),
            "rowmin" => Expr::Reduce(Reduction::RowMinColumn, boxed()),
            "mean" => Expr::Reduce(Reduction::MeanAll, boxed()),
            "norm" => Expr::Reduce(Reduction::FrobeniusNorm, boxed()),
            "eye" => match first {
                Expr::Num(v) if v.fract() == 0.0 && v >= 1.0 && v <= MAX_DIM as f64 => Expr::Eye(v as usize),
                _ => {
                    return Err(ParseError::Syntax {
                        pos,
                        message: format!("eye() takes an integer literal between 1 and {MAX_DIM}"),
                    })
                }
            },
            "maxs" => match args.next() {
                Some(Expr::Num(v)) => Expr::MaxS(boxed(), v),
                _ => {
                    return Err(ParseError::Syntax {
                        pos,
                        message: "maxs() takes a number literal as its second argument".into(),
                    })
                }
            },
            other => {
                let op = UnaryOp::from_name(other).expect("function table and unary ops agree");
                Expr::Unary(op, boxed())
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_program() {
        let p = parse("fn f(i_1) -> (o_1) { o_1 = i_1 }").unwrap();
        assert_eq!(p.statements.len(), 1);
        assert_eq!(p.statements[0].expr, Expr::var("i_1"));
        assert_eq!(p.signature.inputs, ["i_1"]);
    }

    #[test]
    fn bare_body_scope_error() {
        let err = parse("o_1 = undefined_var").unwrap_err();
        assert_eq!(err, ParseError::Scope { pos: Pos { line: 1, col: 7 }, name: "undefined_var".into() });
        assert_eq!(err.kind(), "use-before-assign");
    }

    #[test]
    fn precedence_and_scale() {
        let p = parse("fn f(a, b, c) -> (o) { o = 0.5 * a @ b + c }").unwrap();
        let expected = Expr::add(
            Expr::matmul(Expr::Scale(0.5, Box::new(Expr::var("a"))), Expr::var("b")),
            Expr::var("c"),
        );
        assert_eq!(p.statements[0].expr, expected);
    }

    #[test]
    fn left_associative_subtraction() {
        let p = parse("fn f(a, b, c) -> (o) { o = a - b - c; }").unwrap();
        assert_eq!(p.statements[0].expr, Expr::sub(Expr::sub(Expr::var("a"), Expr::var("b")), Expr::var("c")));
    }

    #[test]
    fn calls() {
        let p = parse("fn f(a) -> (o) { o = maxs(log(a), -1e-8) + eye(2) + rowmin(a) }").unwrap();
        assert_eq!(p.statements.len(), 1);
        assert!(matches!(
            parse("fn f(a) -> (o) { o = foo(a) }"),
            Err(ParseError::UnknownFunction { .. })
        ));
        assert!(matches!(
            parse("fn f(a) -> (o) { o = inv(a, a) }"),
            Err(ParseError::Arity { expected: 1, found: 2, .. })
        ));
        assert!(matches!(parse("fn f(a) -> (o) { o = eye(0) }"), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse("fn f(a) -> (o) { o = maxs(a, a) }"), Err(ParseError::Syntax { .. })));
    }

    #[test]
    fn reassignment_and_scoping() {
        let p = parse("fn f(P) -> (P) { P = P + P; P = P @ P }").unwrap();
        assert_eq!(p.statements.len(), 2);
        let err = parse("fn f(a) -> (o) {\n  o = t\n  t = a\n}").unwrap_err();
        assert_eq!(err, ParseError::Scope { pos: Pos { line: 2, col: 7 }, name: "t".into() });
    }

    #[test]
    fn syntax_errors_carry_positions() {
        let err = parse("fn f(a) -> (o) {\n o = a +\n}").unwrap_err();
        assert_eq!(err.pos(), Pos { line: 3, col: 1 });
        assert!(parse("fn f(a, a) -> (o) { o = a }").is_err());
        assert!(parse("fn f(a) -> (o) { inv = a }").is_err());
    }

    #[test]
    fn deep_nesting_is_rejected() {
        let src = format!("fn f(a) -> (o) {{ o = {}a{} }}", "(".repeat(10_000), ")".repeat(10_000));
        assert!(matches!(parse(&src), Err(ParseError::Syntax { .. })));
        let chain = format!("fn f(a) -> (o) {{ o = a{} }}", " + a".repeat(10_000));
        assert!(matches!(parse(&chain), Err(ParseError::Syntax { .. })));
    }

    #[test]
    fn body_against_signature() {
        let sig = Signature::generic(4, 2);
        let p = parse_body("o_1 = i_1; o_2 = i_3", &sig, "f").unwrap();
        assert_eq!(p.signature, sig);
        assert_eq!(p.statements.len(), 2);
    }
}
