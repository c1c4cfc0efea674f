//! Sandboxed evaluation.
//!
//! Programs are first resolved into a slot-indexed form so that running the
//! same candidate over hundreds of filter steps does no name lookups. Every
//! intermediate is checked for finiteness; failures carry the index of the
//! statement that produced them.

use std::borrow::Cow;
use std::collections::HashMap;

use thiserror::Error;

use super::ast::{Expr, Program, Signature};
use crate::matrix::{Matrix, MatrixError, Reduction, ScalarOp, UnaryOp};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalErrorKind {
    Singular,
    NonFinite,
    ShapeMismatch(String),
    StepLimit,
    MissingInput(String),
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("statement {statement}: {}", describe(.kind))]
pub struct EvalError {
    pub statement: usize,
    pub kind: EvalErrorKind,
}

fn describe(kind: &EvalErrorKind) -> String {
    match kind {
        EvalErrorKind::Singular => "singular matrix".into(),
        EvalErrorKind::NonFinite => "non-finite value".into(),
        EvalErrorKind::ShapeMismatch(m) => format!("shape mismatch ({m})"),
        EvalErrorKind::StepLimit => "step limit exceeded".into(),
        EvalErrorKind::MissingInput(n) => format!("input `{n}` not bound"),
        EvalErrorKind::Invalid(m) => format!("invalid program ({m})"),
    }
}

impl EvalError {
    pub fn at(statement: usize, kind: EvalErrorKind) -> Self {
        EvalError { statement, kind }
    }

    pub fn from_matrix(statement: usize, e: MatrixError) -> Self {
        let kind = match e {
            MatrixError::Singular => EvalErrorKind::Singular,
            MatrixError::NonFinite { .. } => EvalErrorKind::NonFinite,
            other => EvalErrorKind::ShapeMismatch(other.to_string()),
        };
        EvalError { statement, kind }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GuardConfig {
    /// Upper bound on primitive operations per run.
    pub max_ops: usize,
}

impl Default for GuardConfig {
    fn default() -> Self {
        GuardConfig { max_ops: 100_000 }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Slot(usize),
    Const(Matrix),
    MatMul(Box<Node>, Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Inv(Box<Node>),
    Tr(Box<Node>),
    Unary(UnaryOp, Box<Node>),
    Scalar(ScalarOp, f64, Box<Node>),
    Reduce(Reduction, Box<Node>),
}

/// A program with names resolved to slots, ready to run many times.
#[derive(Debug, Clone)]
pub struct CompiledProgram {
    signature: Signature,
    slots: usize,
    statements: Vec<(usize, Node)>,
    outputs: Vec<usize>,
}

impl CompiledProgram {
    pub fn new(p: &Program) -> Result<Self, EvalError> {
        let mut names: HashMap<&str, usize> = HashMap::new();
        for (i, n) in p.signature.inputs.iter().enumerate() {
            names.insert(n, i);
        }
        let mut slots = p.signature.inputs.len();
        let mut statements = Vec::with_capacity(p.statements.len());
        for (idx, s) in p.statements.iter().enumerate() {
            let node = resolve(&s.expr, &names).map_err(|n| {
                EvalError::at(idx, EvalErrorKind::Invalid(format!("use-before-assign: `{n}`")))
            })?;
            let slot = *names.entry(s.target.as_str()).or_insert_with(|| {
                slots += 1;
                slots - 1
            });
            statements.push((slot, node));
        }
        let outputs = p
            .signature
            .outputs
            .iter()
            .map(|o| {
                names.get(o.as_str()).copied().ok_or_else(|| {
                    EvalError::at(p.statements.len(), EvalErrorKind::Invalid(format!("unassigned output `{o}`")))
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(CompiledProgram { signature: p.signature.clone(), slots, statements, outputs })
    }

    pub fn signature(&self) -> &Signature {
        &self.signature
    }

    pub fn statement_count(&self) -> usize {
        self.statements.len()
    }

    /// Runs on inputs given in signature order; returns outputs in
    /// signature order.
    pub fn run(&self, inputs: &[Matrix], guards: &GuardConfig) -> Result<Vec<Matrix>, EvalError> {
        if inputs.len() != self.signature.inputs.len() {
            let missing = self.signature.inputs.get(inputs.len()).cloned().unwrap_or_default();
            return Err(EvalError::at(0, EvalErrorKind::MissingInput(missing)));
        }
        let placeholder = Matrix::scalar(0.0);
        let mut slots: Vec<Matrix> = Vec::with_capacity(self.slots);
        slots.extend(inputs.iter().cloned());
        slots.resize(self.slots, placeholder);
        let mut budget = guards.max_ops;
        for (idx, (target, node)) in self.statements.iter().enumerate() {
            let value = eval(node, &slots, &mut budget).map_err(|kind| match kind {
                Fail::Matrix(e) => EvalError::from_matrix(idx, e),
                Fail::Steps => EvalError::at(idx, EvalErrorKind::StepLimit),
            })?;
            slots[*target] = value.into_owned();
        }
        Ok(self.outputs.iter().map(|&s| slots[s].clone()).collect())
    }
}

fn resolve<'a>(e: &'a Expr, names: &HashMap<&str, usize>) -> Result<Node, &'a str> {
    let b = |e: &'a Expr| resolve(e, names).map(Box::new);
    Ok(match e {
        Expr::Var(n) => Node::Slot(*names.get(n.as_str()).ok_or(n.as_str())?),
        Expr::Num(v) => Node::Const(Matrix::scalar(*v)),
        Expr::Eye(n) => Node::Const(Matrix::identity(*n)),
        Expr::MatMul(x, y) => Node::MatMul(b(x)?, b(y)?),
        Expr::Add(x, y) => Node::Add(b(x)?, b(y)?),
        Expr::Sub(x, y) => Node::Sub(b(x)?, b(y)?),
        Expr::Inv(x) => Node::Inv(b(x)?),
        Expr::Tr(x) => Node::Tr(b(x)?),
        Expr::Unary(op, x) => Node::Unary(*op, b(x)?),
        Expr::Scale(c, x) => Node::Scalar(ScalarOp::Scale, *c, b(x)?),
        Expr::MaxS(x, c) => Node::Scalar(ScalarOp::MaxWithScalar, *c, b(x)?),
        Expr::Reduce(k, x) => Node::Reduce(*k, b(x)?),
    })
}

enum Fail {
    Matrix(MatrixError),
    Steps,
}

impl From<MatrixError> for Fail {
    fn from(e: MatrixError) -> Self {
        Fail::Matrix(e)
    }
}

fn eval<'a>(node: &'a Node, slots: &'a [Matrix], budget: &mut usize) -> Result<Cow<'a, Matrix>, Fail> {
    let value = match node {
        Node::Slot(i) => return Ok(Cow::Borrowed(&slots[*i])),
        Node::Const(m) => return Ok(Cow::Borrowed(m)),
        _ => {
            if *budget == 0 {
                return Err(Fail::Steps);
            }
            *budget -= 1;
            match node {
                Node::MatMul(a, b) => eval(a, slots, budget)?.matmul(eval(b, slots, budget)?.as_ref())?,
                Node::Add(a, b) => eval(a, slots, budget)?.add(eval(b, slots, budget)?.as_ref())?,
                Node::Sub(a, b) => eval(a, slots, budget)?.sub(eval(b, slots, budget)?.as_ref())?,
                Node::Inv(a) => eval(a, slots, budget)?.invert()?,
                Node::Tr(a) => eval(a, slots, budget)?.transpose(),
                Node::Unary(op, a) => eval(a, slots, budget)?.map(*op)?,
                Node::Scalar(op, c, a) => eval(a, slots, budget)?.scalar_op(*op, *c)?,
                Node::Reduce(k, a) => eval(a, slots, budget)?.reduce(*k)?,
                Node::Slot(_) | Node::Const(_) => unreachable!(),
            }
        }
    };
    Ok(Cow::Owned(value))
}

/// Runs `p` with inputs bound by name and returns every output by name.
pub fn interpret(
    p: &Program,
    env: &HashMap<String, Matrix>,
    guards: &GuardConfig,
) -> Result<HashMap<String, Matrix>, EvalError> {
    let compiled = CompiledProgram::new(p)?;
    let inputs = p
        .signature
        .inputs
        .iter()
        .map(|n| env.get(n).cloned().ok_or_else(|| EvalError::at(0, EvalErrorKind::MissingInput(n.clone()))))
        .collect::<Result<Vec<_>, _>>()?;
    let outputs = compiled.run(&inputs, guards)?;
    Ok(p.signature.outputs.iter().cloned().zip(outputs).collect())
}
