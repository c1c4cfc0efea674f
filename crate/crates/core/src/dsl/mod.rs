//! The matrix-program language.
//!
//! Candidate estimators, whether decoded from a CGP genotype, returned by a
//! language model or loaded from a fixture file, all share this small
//! straight-line language:
//!
//! ```text
//! fn kalman(x, F, P, Q, z, R) -> (x_predict, P, y, S, K, x_update) {
//!     x_predict = F @ x;
//!     P = F @ P @ tr(F) + Q;
//!     ...
//! }
//! ```
//!
//! A program is a list of assignments; every right-hand side is an
//! expression over inputs and earlier assignments. Names may be reassigned,
//! later reads see the latest value. There is no control flow.

mod ast;
mod interp;
mod lexer;
mod parser;
mod printer;
mod validate;

pub use ast::{Expr, Pos, Program, Signature, SignatureError, Statement};
pub use interp::{interpret, CompiledProgram, EvalError, EvalErrorKind, GuardConfig};
pub use parser::{parse, parse_body, ParseError, MAX_NESTING};
pub use printer::print;
pub use validate::{validate, Violation, DEFAULT_MAX_STATEMENTS};

/// Function names understood inside expressions.
pub const FUNCTION_NAMES: [&str; 14] = [
    "inv", "tr", "tanh", "sin", "cos", "log", "exp", "abs", "square", "maxs", "rowmin", "mean",
    "norm", "eye",
];

/// One-paragraph grammar summary, embedded in prompts.
pub const GRAMMAR_SUMMARY: &str = "\
program := \"fn\" NAME \"(\" names \")\" \"->\" \"(\" names \")\" \"{\" stmt* \"}\"
stmt    := NAME \"=\" expr \";\"
expr    := expr (\"+\" | \"-\") term | term
term    := term \"@\" factor | factor
factor  := NAME | NUMBER | NUMBER \"*\" factor | \"(\" expr \")\" | FUNC \"(\" args \")\"
FUNC    := inv | tr | tanh | sin | cos | log | exp | abs | square | maxs | rowmin | mean | norm | eye
Every value is a real matrix. `@` is the matrix product, `+`/`-` are elementwise
(a 1x1 operand acts as a scalar, an n x 1 column is repeated across columns),
`NUMBER * factor` scales, inv() inverts, tr() transposes, tanh/sin/cos/log/exp/abs/square
act entrywise (log is clamped at 1e-8), maxs(e, NUMBER) clamps from below,
rowmin(e) returns the row minima as a column, mean(e) and norm(e) return 1x1
matrices, eye(n) is the n x n identity.";
