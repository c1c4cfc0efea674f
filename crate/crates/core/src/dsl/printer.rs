use std::fmt::Write;

use super::ast::{Expr, Program};
use crate::matrix::Reduction;

/// Canonical text of a program. `parse(&print(p))` is structurally equal to
/// `p` for every program whose constants are finite.
pub fn print(p: &Program) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "fn {}({}) -> ({}) {{",
        p.name,
        p.signature.inputs.join(", "),
        p.signature.outputs.join(", ")
    );
    out.push('\n');
    for s in &p.statements {
        let _ = writeln!(out, "    {} = {};", s.target, expr_to_string(&s.expr));
    }
    out.push_str("}\n");
    out
}

pub(crate) fn expr_to_string(e: &Expr) -> String {
    let mut s = String::new();
    write_expr(&mut s, e);
    s
}

fn number(out: &mut String, v: f64) {
    // `Display` for f64 is the shortest representation that reads back
    // to the same value.
    let _ = write!(out, "{v}");
}

fn write_expr(out: &mut String, e: &Expr) {
    match e {
        Expr::Add(a, b) | Expr::Sub(a, b) => {
            write_expr(out, a);
            out.push_str(if matches!(e, Expr::Add(..)) { " + " } else { " - " });
            write_term(out, b);
        }
        _ => write_term(out, e),
    }
}

fn write_term(out: &mut String, e: &Expr) {
    match e {
        Expr::MatMul(a, b) => {
            write_term(out, a);
            out.push_str(" @ ");
            write_factor(out, b);
        }
        _ => write_factor(out, e),
    }
}

fn write_factor(out: &mut String, e: &Expr) {
    match e {
        Expr::Add(..) | Expr::Sub(..) | Expr::MatMul(..) => {
            out.push('(');
            write_expr(out, e);
            out.push(')');
        }
        Expr::Var(n) => out.push_str(n),
        Expr::Num(v) => number(out, *v),
        Expr::Scale(c, inner) => {
            number(out, *c);
            out.push_str(" * ");
            write_factor(out, inner);
        }
        Expr::Inv(a) => call(out, "inv", a),
        Expr::Tr(a) => call(out, "tr", a),
        Expr::Unary(op, a) => call(out, op.name(), a),
        Expr::Reduce(kind, a) => {
            let name = match kind {
                Reduction::RowMinColumn => "rowmin",
                Reduction::MeanAll => "mean",
                Reduction::FrobeniusNorm => "norm",
            };
            call(out, name, a)
        }
        Expr::MaxS(a, v) => {
            out.push_str("maxs(");
            write_expr(out, a);
            out.push_str(", ");
            number(out, *v);
            out.push(')');
        }
        Expr::Eye(n) => {
            let _ = write!(out, "eye({n})");
        }
    }
}

fn call(out: &mut String, name: &str, arg: &Expr) {
    out.push_str(name);
    out.push('(');
    write_expr(out, arg);
    out.push(')');
}
