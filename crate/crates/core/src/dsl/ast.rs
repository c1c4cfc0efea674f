use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{Reduction, UnaryOp};

/// 1-based source position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SignatureError {
    #[error("duplicate name `{0}` in signature")]
    Duplicate(String),
    #[error("a signature needs at least one output")]
    NoOutputs,
    #[error("anti-leak signature name `{0}` does not follow the i_k / o_k scheme")]
    NotGeneric(String),
}

/// Ordered inputs and outputs of a program.
///
/// Input and output lists are each duplicate-free, but a name may appear in
/// both (a program may read `P` and return an updated `P`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub anti_leak: bool,
}

impl Signature {
    pub fn new<I, O>(inputs: I, outputs: O) -> Result<Self, SignatureError>
    where
        I: IntoIterator,
        I::Item: Into<String>,
        O: IntoIterator,
        O::Item: Into<String>,
    {
        let mut sig = Signature {
            inputs: inputs.into_iter().map(Into::into).collect(),
            outputs: outputs.into_iter().map(Into::into).collect(),
            anti_leak: false,
        };
        // Names of the exact generic form mark an anti-leak signature.
        let generic = sig.to_generic();
        sig.anti_leak = sig.inputs == generic.inputs && sig.outputs == generic.outputs;
        sig.check()?;
        Ok(sig)
    }

    /// `i_1..i_n -> o_1..o_m`
    pub fn generic(n_inputs: usize, n_outputs: usize) -> Self {
        Signature {
            inputs: (1..=n_inputs).map(|k| format!("i_{k}")).collect(),
            outputs: (1..=n_outputs).map(|k| format!("o_{k}")).collect(),
            anti_leak: true,
        }
    }

    pub fn arity(&self) -> (usize, usize) {
        (self.inputs.len(), self.outputs.len())
    }

    /// The anti-leak counterpart with the same arity.
    pub fn to_generic(&self) -> Self {
        Self::generic(self.inputs.len(), self.outputs.len())
    }

    pub fn check(&self) -> Result<(), SignatureError> {
        if self.outputs.is_empty() {
            return Err(SignatureError::NoOutputs);
        }
        for list in [&self.inputs, &self.outputs] {
            let mut seen = HashSet::new();
            for name in list {
                if !seen.insert(name.as_str()) {
                    return Err(SignatureError::Duplicate(name.clone()));
                }
            }
        }
        if self.anti_leak {
            for (k, name) in self.inputs.iter().enumerate() {
                if *name != format!("i_{}", k + 1) {
                    return Err(SignatureError::NotGeneric(name.clone()));
                }
            }
            for (k, name) in self.outputs.iter().enumerate() {
                if *name != format!("o_{}", k + 1) {
                    return Err(SignatureError::NotGeneric(name.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn mentions(&self, name: &str) -> bool {
        self.inputs.iter().chain(&self.outputs).any(|n| n == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Var(String),
    /// A literal; evaluates to a 1×1 matrix.
    Num(f64),
    MatMul(Box<Expr>, Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Inv(Box<Expr>),
    Tr(Box<Expr>),
    Unary(UnaryOp, Box<Expr>),
    Scale(f64, Box<Expr>),
    MaxS(Box<Expr>, f64),
    Reduce(Reduction, Box<Expr>),
    Eye(usize),
}

impl Expr {
    pub fn var(name: impl Into<String>) -> Self {
        Expr::Var(name.into())
    }

    pub fn matmul(a: Expr, b: Expr) -> Self {
        Expr::MatMul(Box::new(a), Box::new(b))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(a: Expr, b: Expr) -> Self {
        Expr::Add(Box::new(a), Box::new(b))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(a: Expr, b: Expr) -> Self {
        Expr::Sub(Box::new(a), Box::new(b))
    }

    pub fn inv(a: Expr) -> Self {
        Expr::Inv(Box::new(a))
    }

    pub fn tr(a: Expr) -> Self {
        Expr::Tr(Box::new(a))
    }

    /// Calls `f` on every variable name read by this expression.
    pub fn visit_vars<'a>(&'a self, f: &mut impl FnMut(&'a str)) {
        match self {
            Expr::Var(n) => f(n),
            Expr::Num(_) | Expr::Eye(_) => {}
            Expr::MatMul(a, b) | Expr::Add(a, b) | Expr::Sub(a, b) => {
                a.visit_vars(f);
                b.visit_vars(f);
            }
            Expr::Inv(a)
            | Expr::Tr(a)
            | Expr::Unary(_, a)
            | Expr::Scale(_, a)
            | Expr::MaxS(a, _)
            | Expr::Reduce(_, a) => a.visit_vars(f),
        }
    }

    /// Calls `f` on every numeric constant in this expression.
    pub fn visit_constants(&self, f: &mut impl FnMut(f64)) {
        match self {
            Expr::Var(_) | Expr::Eye(_) => {}
            Expr::Num(c) => f(*c),
            Expr::MatMul(a, b) | Expr::Add(a, b) | Expr::Sub(a, b) => {
                a.visit_constants(f);
                b.visit_constants(f);
            }
            Expr::Scale(c, a) | Expr::MaxS(a, c) => {
                f(*c);
                a.visit_constants(f);
            }
            Expr::Inv(a) | Expr::Tr(a) | Expr::Unary(_, a) | Expr::Reduce(_, a) => {
                a.visit_constants(f)
            }
        }
    }

    /// Renames variables in place.
    pub fn rename_vars(&mut self, f: &impl Fn(&str) -> Option<String>) {
        match self {
            Expr::Var(n) => {
                if let Some(new) = f(n) {
                    *n = new;
                }
            }
            Expr::Num(_) | Expr::Eye(_) => {}
            Expr::MatMul(a, b) | Expr::Add(a, b) | Expr::Sub(a, b) => {
                a.rename_vars(f);
                b.rename_vars(f);
            }
            Expr::Inv(a)
            | Expr::Tr(a)
            | Expr::Unary(_, a)
            | Expr::Scale(_, a)
            | Expr::MaxS(a, _)
            | Expr::Reduce(_, a) => a.rename_vars(f),
        }
    }

    /// Number of primitive operations (leaves excluded).
    pub fn op_count(&self) -> usize {
        match self {
            Expr::Var(_) | Expr::Num(_) | Expr::Eye(_) => 0,
            Expr::MatMul(a, b) | Expr::Add(a, b) | Expr::Sub(a, b) => 1 + a.op_count() + b.op_count(),
            Expr::Inv(a)
            | Expr::Tr(a)
            | Expr::Unary(_, a)
            | Expr::Scale(_, a)
            | Expr::MaxS(a, _)
            | Expr::Reduce(_, a) => 1 + a.op_count(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Statement {
    pub target: String,
    pub expr: Expr,
    /// Where the statement started in its source text, if it was parsed.
    #[serde(skip)]
    pub pos: Option<Pos>,
}

impl Statement {
    pub fn new(target: impl Into<String>, expr: Expr) -> Self {
        Statement { target: target.into(), expr, pos: None }
    }
}

// Structural equality ignores source positions.
impl PartialEq for Statement {
    fn eq(&self, other: &Self) -> bool {
        self.target == other.target && self.expr == other.expr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub name: String,
    pub signature: Signature,
    pub statements: Vec<Statement>,
}

impl Program {
    pub fn new(name: impl Into<String>, signature: Signature, statements: Vec<Statement>) -> Self {
        Program { name: name.into(), signature, statements }
    }

    /// Names assigned by some statement, in first-assignment order.
    pub fn assigned_names(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.statements
            .iter()
            .map(|s| s.target.as_str())
            .filter(|t| seen.insert(*t))
            .collect()
    }

    pub fn op_count(&self) -> usize {
        self.statements.iter().map(|s| s.expr.op_count()).sum()
    }

    /// Rebinds the program to `sig` (same arity), renaming inputs and
    /// outputs positionally while preserving semantics.
    ///
    /// When an input is also returned as an output (`P` in, `P` out) and the
    /// new signature separates the two, assignments before the final one
    /// write the new input name and the final one writes the new output name.
    /// Outputs that were never assigned get a trailing copy statement. With
    /// `generic_locals` every local is renamed `v_1, v_2, ...`.
    ///
    /// Returns `None` when arities differ or the new signature shares a name
    /// between an input and an output that the old one kept apart.
    pub fn rebind(&self, sig: &Signature, name: &str, generic_locals: bool) -> Option<Program> {
        use std::collections::HashMap;

        let old = &self.signature;
        if old.arity() != sig.arity() {
            return None;
        }
        for (i, new_in) in sig.inputs.iter().enumerate() {
            for (o, new_out) in sig.outputs.iter().enumerate() {
                if new_in == new_out && old.inputs[i] != old.outputs[o] {
                    return None;
                }
            }
        }
        let mut last_assign: HashMap<&str, usize> = HashMap::new();
        for (idx, s) in self.statements.iter().enumerate() {
            last_assign.insert(s.target.as_str(), idx);
        }
        let out_index: HashMap<&str, usize> =
            old.outputs.iter().enumerate().map(|(k, n)| (n.as_str(), k)).collect();
        let in_index: HashMap<&str, usize> =
            old.inputs.iter().enumerate().map(|(k, n)| (n.as_str(), k)).collect();

        let mut reserved: HashSet<String> = sig.inputs.iter().chain(&sig.outputs).cloned().collect();
        reserved.extend(self.statements.iter().map(|s| s.target.clone()));
        reserved.extend(old.inputs.iter().chain(&old.outputs).cloned());
        let mut counter = 0usize;
        let mut fresh = |reserved: &mut HashSet<String>| loop {
            counter += 1;
            let candidate = format!("v_{counter}");
            if reserved.insert(candidate.clone()) {
                break candidate;
            }
        };

        let taken: HashSet<&str> = sig.inputs.iter().chain(&sig.outputs).map(String::as_str).collect();
        let mut env: HashMap<String, String> = old
            .inputs
            .iter()
            .zip(&sig.inputs)
            .map(|(o, n)| (o.clone(), n.clone()))
            .collect();
        let mut local_names: HashMap<String, String> = HashMap::new();
        let mut statements = Vec::with_capacity(self.statements.len() + old.outputs.len());
        for (idx, s) in self.statements.iter().enumerate() {
            let mut expr = s.expr.clone();
            expr.rename_vars(&|n: &str| env.get(n).cloned());
            let t = s.target.as_str();
            let target = match (out_index.get(t), in_index.get(t)) {
                (Some(&k), _) if last_assign[t] == idx => sig.outputs[k].clone(),
                (_, Some(&i)) => sig.inputs[i].clone(),
                (Some(&k), None) if sig.outputs[k] == t => t.to_string(),
                _ => {
                    if let Some(n) = local_names.get(t) {
                        n.clone()
                    } else {
                        let n = if generic_locals || taken.contains(t) {
                            fresh(&mut reserved)
                        } else {
                            t.to_string()
                        };
                        local_names.insert(t.to_string(), n.clone());
                        n
                    }
                }
            };
            env.insert(t.to_string(), target.clone());
            statements.push(Statement { target, expr, pos: s.pos });
        }
        for (k, out) in old.outputs.iter().enumerate() {
            if !last_assign.contains_key(out.as_str()) {
                let source = env.get(out).cloned().unwrap_or_else(|| out.clone());
                statements.push(Statement::new(sig.outputs[k].clone(), Expr::Var(source)));
            }
        }
        Some(Program { name: name.to_string(), signature: sig.clone(), statements })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generic_signature_passes_check() {
        let s = Signature::generic(3, 2);
        assert_eq!(s.inputs, ["i_1", "i_2", "i_3"]);
        assert!(s.check().is_ok());
    }

    #[test]
    fn signature_rules() {
        assert_eq!(Signature::new(["a", "a"], ["b"]), Err(SignatureError::Duplicate("a".into())));
        assert_eq!(Signature::new(["a"], Vec::<String>::new()), Err(SignatureError::NoOutputs));
        assert!(Signature::new(["P"], ["P"]).is_ok());
        let mut bad = Signature::generic(2, 1);
        bad.inputs[1] = "x".into();
        assert_eq!(bad.check(), Err(SignatureError::NotGeneric("x".into())));
    }

    #[test]
    fn statement_equality_ignores_position() {
        let mut a = Statement::new("o", Expr::var("i"));
        let b = a.clone();
        a.pos = Some(Pos { line: 3, col: 4 });
        assert_eq!(a, b);
    }
}
