use std::collections::HashSet;
use std::fmt;

use super::ast::{Expr, Program, Signature};
use crate::matrix::MAX_DIM;

pub const DEFAULT_MAX_STATEMENTS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    SignatureMismatch { expected: Signature, found: Signature },
    InvalidSignature(String),
    UnassignedOutput(String),
    UseBeforeAssign { statement: usize, name: String },
    SizeBudget { statements: usize, max: usize },
    NonFiniteConstant { statement: usize },
    BadIdentity { statement: usize, n: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SignatureMismatch { expected, found } => write!(
                f,
                "signature mismatch: expected ({}) -> ({}), found ({}) -> ({})",
                expected.inputs.join(", "),
                expected.outputs.join(", "),
                found.inputs.join(", "),
                found.outputs.join(", ")
            ),
            Violation::InvalidSignature(msg) => write!(f, "invalid signature: {msg}"),
            Violation::UnassignedOutput(name) => write!(f, "unassigned output `{name}`"),
            Violation::UseBeforeAssign { statement, name } => {
                write!(f, "use-before-assign: `{name}` in statement {statement}")
            }
            Violation::SizeBudget { statements, max } => {
                write!(f, "size budget: {statements} statements, at most {max} allowed")
            }
            Violation::NonFiniteConstant { statement } => {
                write!(f, "non-finite constant in statement {statement}")
            }
            Violation::BadIdentity { statement, n } => {
                write!(f, "eye({n}) out of range in statement {statement}")
            }
        }
    }
}

/// Checks `p` against the required signature and the structural rules.
/// Every problem found is reported; nothing short-circuits.
pub fn validate(p: &Program, sig: &Signature, max_statements: usize) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    if p.signature.inputs != sig.inputs || p.signature.outputs != sig.outputs {
        violations.push(Violation::SignatureMismatch { expected: sig.clone(), found: p.signature.clone() });
    }
    if let Err(e) = sig.check() {
        violations.push(Violation::InvalidSignature(e.to_string()));
    }
    if p.statements.len() > max_statements {
        violations.push(Violation::SizeBudget { statements: p.statements.len(), max: max_statements });
    }
    let mut defined: HashSet<&str> = p.signature.inputs.iter().map(String::as_str).collect();
    for (idx, s) in p.statements.iter().enumerate() {
        let mut missing = Vec::new();
        s.expr.visit_vars(&mut |name| {
            if !defined.contains(name) {
                missing.push(name.to_string());
            }
        });
        for name in missing {
            violations.push(Violation::UseBeforeAssign { statement: idx, name });
        }
        let mut finite = true;
        s.expr.visit_constants(&mut |c| finite &= c.is_finite());
        if !finite {
            violations.push(Violation::NonFiniteConstant { statement: idx });
        }
        check_eye(&s.expr, idx, &mut violations);
        defined.insert(s.target.as_str());
    }
    let assigned: HashSet<&str> = p.statements.iter().map(|s| s.target.as_str()).collect();
    for out in &p.signature.outputs {
        if !assigned.contains(out.as_str()) {
            violations.push(Violation::UnassignedOutput(out.clone()));
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

fn check_eye(e: &Expr, statement: usize, out: &mut Vec<Violation>) {
    match e {
        Expr::Eye(n) if *n == 0 || *n > MAX_DIM => out.push(Violation::BadIdentity { statement, n: *n }),
        Expr::Var(_) | Expr::Num(_) | Expr::Eye(_) => {}
        Expr::MatMul(a, b) | Expr::Add(a, b) | Expr::Sub(a, b) => {
            check_eye(a, statement, out);
            check_eye(b, statement, out);
        }
        Expr::Inv(a)
        | Expr::Tr(a)
        | Expr::Unary(_, a)
        | Expr::Scale(_, a)
        | Expr::MaxS(a, _)
        | Expr::Reduce(_, a) => check_eye(a, statement, out),
    }
}
