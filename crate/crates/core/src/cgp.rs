//! Cartesian Genetic Programming over matrix-valued nodes.
//!
//! Genotypes are single-row graphs: node `j` may read any input or any
//! earlier node, so every genotype is acyclic by construction. Addresses
//! `0..num_inputs` are the inputs; `num_inputs + j` is node `j`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{Expr, Program, Signature, Statement};
use crate::matrix::{Matrix, MatrixError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeOp {
    Add,
    Sub,
    Assign,
    MatMul,
    Invert,
    Transpose,
}

impl NodeOp {
    pub const ALL: [NodeOp; 6] =
        [NodeOp::Add, NodeOp::Sub, NodeOp::Assign, NodeOp::MatMul, NodeOp::Invert, NodeOp::Transpose];

    pub fn is_binary(self) -> bool {
        matches!(self, NodeOp::Add | NodeOp::Sub | NodeOp::MatMul)
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeOp::Add => "add",
            NodeOp::Sub => "sub",
            NodeOp::Assign => "assign",
            NodeOp::MatMul => "matmul",
            NodeOp::Invert => "invert",
            NodeOp::Transpose => "transpose",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        NodeOp::ALL.into_iter().find(|op| op.name() == s)
    }

    fn apply(self, a: &Matrix, b: &Matrix) -> Result<Matrix, MatrixError> {
        match self {
            NodeOp::Add => a.add(b),
            NodeOp::Sub => a.sub(b),
            NodeOp::Assign => Ok(a.clone()),
            NodeOp::MatMul => a.matmul(b),
            NodeOp::Invert => a.invert(),
            NodeOp::Transpose => Ok(a.transpose()),
        }
    }
}

impl fmt::Display for NodeOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Node {
    pub op: NodeOp,
    pub conn1: usize,
    pub conn2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Genotype {
    pub num_inputs: usize,
    pub nodes: Vec<Node>,
    pub output_genes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenotypeError {
    #[error("node {node} reads address {conn}, only {limit} addresses precede it")]
    ForwardConnection { node: usize, conn: usize, limit: usize },
    #[error("output gene {index} points at address {gene}, only {limit} exist")]
    OutputOutOfRange { index: usize, gene: usize, limit: usize },
    #[error("genotype has {found} nodes, configuration requires {expected}")]
    Length { expected: usize, found: usize },
    #[error("op `{0}` is not in the configured node set")]
    ForeignOp(NodeOp),
    #[error("genotype has {found} outputs, signature requires {expected}")]
    OutputArity { expected: usize, found: usize },
    #[error("genotype has {found} inputs, signature requires {expected}")]
    InputArity { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgpConfig {
    pub node_set: Vec<NodeOp>,
    pub max_nodes: usize,
    pub mutation_rate: f64,
}

impl CgpConfig {
    /// The four operations `{add, assign, matmul, invert}`.
    pub fn strict(max_nodes: usize) -> Self {
        CgpConfig {
            node_set: vec![NodeOp::Add, NodeOp::Assign, NodeOp::MatMul, NodeOp::Invert],
            max_nodes,
            mutation_rate: 0.1,
        }
    }

    /// Strict set plus `sub` and `transpose`.
    pub fn extended(max_nodes: usize) -> Self {
        CgpConfig { node_set: NodeOp::ALL.to_vec(), max_nodes, mutation_rate: 0.1 }
    }

    /// Extended set with room for two nodes beyond the target size.
    pub fn for_target_size(target: usize) -> Self {
        Self::extended(target + 2)
    }

    pub fn check(&self) -> Result<(), String> {
        if self.node_set.is_empty() {
            return Err("node set is empty".into());
        }
        if self.max_nodes == 0 {
            return Err("max_nodes must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(format!("mutation rate {} outside [0, 1]", self.mutation_rate));
        }
        Ok(())
    }
}

impl Genotype {
    pub fn max_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn addresses(&self) -> usize {
        self.num_inputs + self.nodes.len()
    }

    pub fn check(&self, cfg: &CgpConfig) -> Result<(), GenotypeError> {
        if self.nodes.len() != cfg.max_nodes {
            return Err(GenotypeError::Length { expected: cfg.max_nodes, found: self.nodes.len() });
        }
        for (j, n) in self.nodes.iter().enumerate() {
            if !cfg.node_set.contains(&n.op) {
                return Err(GenotypeError::ForeignOp(n.op));
            }
            let limit = self.num_inputs + j;
            for conn in [n.conn1, n.conn2] {
                if conn >= limit {
                    return Err(GenotypeError::ForwardConnection { node: j, conn, limit });
                }
            }
        }
        for (index, &gene) in self.output_genes.iter().enumerate() {
            if gene >= self.addresses() {
                return Err(GenotypeError::OutputOutOfRange { index, gene, limit: self.addresses() });
            }
        }
        Ok(())
    }

    /// Indices of the nodes that some output depends on.
    pub fn active_nodes(&self) -> BTreeSet<usize> {
        let mut active = BTreeSet::new();
        let mut stack: Vec<usize> = self.output_genes.clone();
        while let Some(addr) = stack.pop() {
            if addr < self.num_inputs {
                continue;
            }
            let j = addr - self.num_inputs;
            if active.insert(j) {
                let n = &self.nodes[j];
                stack.push(n.conn1);
                if n.op.is_binary() {
                    stack.push(n.conn2);
                }
            }
        }
        active
    }

    /// Genes that affect the phenotype: op and used connections of active
    /// nodes, and every output gene.
    pub fn active_genes(&self) -> Vec<Gene> {
        let mut genes = Vec::new();
        for j in self.active_nodes() {
            genes.push(Gene::Op(j));
            genes.push(Gene::Conn1(j));
            if self.nodes[j].op.is_binary() {
                genes.push(Gene::Conn2(j));
            }
        }
        genes.extend((0..self.output_genes.len()).map(Gene::Output));
        genes
    }

    /// Evaluates the graph directly, without going through a program.
    pub fn evaluate(&self, inputs: &[Matrix]) -> Result<Vec<Matrix>, MatrixError> {
        let mut memo: HashMap<usize, Matrix> = HashMap::new();
        self.output_genes.iter().map(|&g| self.eval_addr(g, inputs, &mut memo)).collect()
    }

    fn eval_addr(&self, addr: usize, inputs: &[Matrix], memo: &mut HashMap<usize, Matrix>) -> Result<Matrix, MatrixError> {
        if addr < self.num_inputs {
            return Ok(inputs[addr].clone());
        }
        if let Some(m) = memo.get(&addr) {
            return Ok(m.clone());
        }
        let n = self.nodes[addr - self.num_inputs];
        let a = self.eval_addr(n.conn1, inputs, memo)?;
        let value = if n.op.is_binary() {
            let b = self.eval_addr(n.conn2, inputs, memo)?;
            n.op.apply(&a, &b)?
        } else {
            n.op.apply(&a, &a)?
        };
        memo.insert(addr, value.clone());
        Ok(value)
    }
}

/// Address of one mutable gene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gene {
    Op(usize),
    Conn1(usize),
    Conn2(usize),
    Output(usize),
}

pub fn random_genotype<R: Rng + ?Sized>(cfg: &CgpConfig, arity: (usize, usize), rng: &mut R) -> Genotype {
    let (n_in, n_out) = arity;
    assert!(n_in >= 1, "at least one input is required");
    let nodes = (0..cfg.max_nodes)
        .map(|j| Node {
            op: *cfg.node_set.choose(rng).expect("non-empty node set"),
            conn1: rng.random_range(0..n_in + j),
            conn2: rng.random_range(0..n_in + j),
        })
        .collect();
    let output_genes = (0..n_out).map(|_| rng.random_range(0..n_in + cfg.max_nodes)).collect();
    Genotype { num_inputs: n_in, nodes, output_genes }
}

/// Picks a value from `0..n` other than `current`, if there is one.
fn redraw_index<R: Rng + ?Sized>(current: usize, n: usize, rng: &mut R) -> usize {
    if n <= 1 {
        return current;
    }
    let v = rng.random_range(0..n - 1);
    if v >= current {
        v + 1
    } else {
        v
    }
}

fn redraw_gene<R: Rng + ?Sized>(g: &mut Genotype, gene: Gene, cfg: &CgpConfig, rng: &mut R) -> bool {
    let n_in = g.num_inputs;
    let limit_out = g.addresses();
    match gene {
        Gene::Op(j) => {
            let cur = g.nodes[j].op;
            let others: Vec<NodeOp> = cfg.node_set.iter().copied().filter(|&o| o != cur).collect();
            match others.choose(rng) {
                Some(&op) => {
                    g.nodes[j].op = op;
                    true
                }
                None => false,
            }
        }
        Gene::Conn1(j) => {
            let cur = g.nodes[j].conn1;
            g.nodes[j].conn1 = redraw_index(cur, n_in + j, rng);
            g.nodes[j].conn1 != cur
        }
        Gene::Conn2(j) => {
            let cur = g.nodes[j].conn2;
            g.nodes[j].conn2 = redraw_index(cur, n_in + j, rng);
            g.nodes[j].conn2 != cur
        }
        Gene::Output(k) => {
            let cur = g.output_genes[k];
            g.output_genes[k] = redraw_index(cur, limit_out, rng);
            g.output_genes[k] != cur
        }
    }
}

fn can_change(g: &Genotype, gene: Gene, cfg: &CgpConfig) -> bool {
    match gene {
        Gene::Op(_) => cfg.node_set.len() > 1,
        Gene::Conn1(j) | Gene::Conn2(j) => g.num_inputs + j > 1,
        Gene::Output(_) => g.addresses() > 1,
    }
}

/// Point mutation. Every gene is redrawn to a different value with
/// probability `cfg.mutation_rate`; when no active gene changed, one
/// active gene is forced to change.
pub fn mutate<R: Rng + ?Sized>(parent: &Genotype, cfg: &CgpConfig, rng: &mut R) -> Genotype {
    let mut child = parent.clone();
    let active: BTreeSet<Gene> = parent.active_genes().into_iter().collect();
    let mut active_changed = false;
    let mut all = Vec::with_capacity(parent.nodes.len() * 3 + parent.output_genes.len());
    for j in 0..parent.nodes.len() {
        all.extend([Gene::Op(j), Gene::Conn1(j), Gene::Conn2(j)]);
    }
    all.extend((0..parent.output_genes.len()).map(Gene::Output));
    for gene in all {
        if cfg.mutation_rate > 0.0 && rng.random_bool(cfg.mutation_rate) && redraw_gene(&mut child, gene, cfg, rng) {
            active_changed |= active.contains(&gene);
        }
    }
    if !active_changed {
        let candidates: Vec<Gene> = active.into_iter().filter(|&g| can_change(parent, g, cfg)).collect();
        if let Some(&gene) = candidates.choose(rng) {
            redraw_gene(&mut child, gene, cfg, rng);
        }
    }
    child
}

impl PartialOrd for Gene {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Gene {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let key = |g: &Gene| match *g {
            Gene::Op(j) => (0, j),
            Gene::Conn1(j) => (1, j),
            Gene::Conn2(j) => (2, j),
            Gene::Output(k) => (3, k),
        };
        key(self).cmp(&key(other))
    }
}

fn operand(g: &Genotype, addr: usize, sig: &Signature, names: &HashMap<usize, String>) -> Expr {
    if addr < g.num_inputs {
        Expr::var(&sig.inputs[addr])
    } else {
        Expr::var(&names[&(addr - g.num_inputs)])
    }
}

/// Translates the active part of `g` into a program, one statement per
/// active node. A node is named after the first output it feeds when that
/// name is not also an input; otherwise it gets a local name and the output
/// is assigned by a trailing copy.
pub fn decode(g: &Genotype, sig: &Signature, name: &str) -> Result<Program, GenotypeError> {
    if g.num_inputs != sig.inputs.len() {
        return Err(GenotypeError::InputArity { expected: sig.inputs.len(), found: g.num_inputs });
    }
    if g.output_genes.len() != sig.outputs.len() {
        return Err(GenotypeError::OutputArity { expected: sig.outputs.len(), found: g.output_genes.len() });
    }
    let active = g.active_nodes();
    let mut names: HashMap<usize, String> = HashMap::new();
    let mut named_outputs = vec![false; sig.outputs.len()];
    for (k, &gene) in g.output_genes.iter().enumerate() {
        if gene < g.num_inputs {
            continue;
        }
        let j = gene - g.num_inputs;
        let out = &sig.outputs[k];
        if !names.contains_key(&j) && !sig.inputs.contains(out) {
            names.insert(j, out.clone());
            named_outputs[k] = true;
        }
    }
    let mut local = 0usize;
    for &j in &active {
        names.entry(j).or_insert_with(|| loop {
            local += 1;
            let candidate = format!("t_{local}");
            if !sig.mentions(&candidate) {
                break candidate;
            }
        });
    }
    let mut statements = Vec::with_capacity(active.len() + sig.outputs.len());
    for &j in &active {
        let n = &g.nodes[j];
        let a = operand(g, n.conn1, sig, &names);
        let expr = match n.op {
            NodeOp::Assign => a,
            NodeOp::Invert => Expr::inv(a),
            NodeOp::Transpose => Expr::tr(a),
            NodeOp::Add => Expr::add(a, operand(g, n.conn2, sig, &names)),
            NodeOp::Sub => Expr::sub(a, operand(g, n.conn2, sig, &names)),
            NodeOp::MatMul => Expr::matmul(a, operand(g, n.conn2, sig, &names)),
        };
        statements.push(Statement::new(names[&j].clone(), expr));
    }
    for (k, &gene) in g.output_genes.iter().enumerate() {
        if !named_outputs[k] {
            statements.push(Statement::new(sig.outputs[k].clone(), operand(g, gene, sig, &names)));
        }
    }
    Ok(Program::new(name, sig.clone(), statements))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("statement {0} uses an operation outside the node set")]
    Unsupported(usize),
    #[error("program needs {needed} nodes, only {max} available")]
    TooLarge { needed: usize, max: usize },
    #[error("statement {0} reads an unknown name")]
    Scope(usize),
}

/// Builds a genotype computing `p`, padding with inactive nodes up to
/// `cfg.max_nodes`. Only expressions over the configured node set are
/// supported.
pub fn encode(p: &Program, cfg: &CgpConfig) -> Result<Genotype, EncodeError> {
    let n_in = p.signature.inputs.len();
    let mut env: HashMap<&str, usize> = p.signature.inputs.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut nodes: Vec<Node> = Vec::new();

    fn lower(
        e: &Expr,
        idx: usize,
        env: &HashMap<&str, usize>,
        nodes: &mut Vec<Node>,
        n_in: usize,
        cfg: &CgpConfig,
    ) -> Result<usize, EncodeError> {
        let push = |op: NodeOp, a: usize, b: usize, nodes: &mut Vec<Node>| {
            if !cfg.node_set.contains(&op) {
                return Err(EncodeError::Unsupported(idx));
            }
            nodes.push(Node { op, conn1: a, conn2: b });
            Ok(n_in + nodes.len() - 1)
        };
        match e {
            Expr::Var(n) => env.get(n.as_str()).copied().ok_or(EncodeError::Scope(idx)),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::MatMul(a, b) => {
                let x = lower(a, idx, env, nodes, n_in, cfg)?;
                let y = lower(b, idx, env, nodes, n_in, cfg)?;
                let op = match e {
                    Expr::Add(..) => NodeOp::Add,
                    Expr::Sub(..) => NodeOp::Sub,
                    _ => NodeOp::MatMul,
                };
                push(op, x, y, nodes)
            }
            Expr::Inv(a) | Expr::Tr(a) => {
                let x = lower(a, idx, env, nodes, n_in, cfg)?;
                let op = if matches!(e, Expr::Inv(_)) { NodeOp::Invert } else { NodeOp::Transpose };
                push(op, x, x, nodes)
            }
            _ => Err(EncodeError::Unsupported(idx)),
        }
    }

    for (idx, s) in p.statements.iter().enumerate() {
        let addr = lower(&s.expr, idx, &env, &mut nodes, n_in, cfg)?;
        env.insert(s.target.as_str(), addr);
    }
    if nodes.len() > cfg.max_nodes {
        return Err(EncodeError::TooLarge { needed: nodes.len(), max: cfg.max_nodes });
    }
    let output_genes = p
        .signature
        .outputs
        .iter()
        .map(|o| env.get(o.as_str()).copied().ok_or(EncodeError::Scope(p.statements.len())))
        .collect::<Result<Vec<_>, _>>()?;
    let filler = cfg.node_set.iter().copied().find(|op| !op.is_binary()).unwrap_or(cfg.node_set[0]);
    while nodes.len() < cfg.max_nodes {
        nodes.push(Node { op: filler, conn1: 0, conn2: 0 });
    }
    Ok(Genotype { num_inputs: n_in, nodes, output_genes })
}

/// Number of nodes [`encode`] needs for `p` under `node_set`.
pub fn nodes_needed(p: &Program, node_set: &[NodeOp]) -> Result<usize, EncodeError> {
    let probe = CgpConfig { node_set: node_set.to_vec(), max_nodes: 0, mutation_rate: 0.0 };
    match encode(p, &probe) {
        Ok(_) => Ok(0),
        Err(EncodeError::TooLarge { needed, .. }) => Ok(needed),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{interpret, parse, print, GuardConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_assign_node_is_pass_through() {
        let cfg = CgpConfig { node_set: vec![NodeOp::Assign], max_nodes: 1, mutation_rate: 0.1 };
        let mut r = rng(0);
        let sig = Signature::generic(1, 1);
        // The output gene may address the input or the node; both decode
        // to a pass-through.
        for _ in 0..20 {
            let g = random_genotype(&cfg, (1, 1), &mut r);
            let p = decode(&g, &sig, "f").unwrap();
            let out = interpret(&p, &[("i_1".to_string(), Matrix::scalar(3.0))].into(), &GuardConfig::default()).unwrap();
            assert_eq!(out["o_1"], Matrix::scalar(3.0));
        }
    }

    #[test]
    fn random_genotypes_are_valid_and_reproducible() {
        let cfg = CgpConfig::extended(8);
        let mut r = rng(1);
        for _ in 0..10_000 {
            random_genotype(&cfg, (4, 2), &mut r).check(&cfg).unwrap();
        }
        assert_eq!(random_genotype(&cfg, (4, 2), &mut rng(5)), random_genotype(&cfg, (4, 2), &mut rng(5)));
    }

    #[test]
    fn zero_rate_changes_exactly_one_active_gene() {
        let mut cfg = CgpConfig::extended(6);
        cfg.mutation_rate = 0.0;
        let mut r = rng(2);
        for _ in 0..500 {
            let parent = random_genotype(&cfg, (4, 2), &mut r);
            let child = mutate(&parent, &cfg, &mut r);
            let active = parent.active_genes();
            let diffs: Vec<Gene> = all_genes(&parent).into_iter().filter(|&g| gene_value(&parent, g) != gene_value(&child, g)).collect();
            assert_eq!(diffs.len(), 1, "{diffs:?}");
            assert!(active.contains(&diffs[0]));
        }
    }

    fn all_genes(g: &Genotype) -> Vec<Gene> {
        let mut v: Vec<Gene> = (0..g.nodes.len()).flat_map(|j| [Gene::Op(j), Gene::Conn1(j), Gene::Conn2(j)]).collect();
        v.extend((0..g.output_genes.len()).map(Gene::Output));
        v
    }

    fn gene_value(g: &Genotype, gene: Gene) -> (usize, usize) {
        match gene {
            Gene::Op(j) => (0, g.nodes[j].op as usize),
            Gene::Conn1(j) => (1, g.nodes[j].conn1),
            Gene::Conn2(j) => (2, g.nodes[j].conn2),
            Gene::Output(k) => (3, g.output_genes[k]),
        }
    }

    #[test]
    fn full_rate_changes_everything_that_can_change() {
        let mut cfg = CgpConfig::extended(6);
        cfg.mutation_rate = 1.0;
        let mut r = rng(3);
        let parent = random_genotype(&cfg, (4, 2), &mut r);
        let child = mutate(&parent, &cfg, &mut r);
        child.check(&cfg).unwrap();
        for gene in all_genes(&parent) {
            if can_change(&parent, gene, &cfg) {
                assert_ne!(gene_value(&parent, gene), gene_value(&child, gene), "{gene:?}");
            }
        }
    }

    #[test]
    fn active_node_examples() {
        let g = Genotype {
            num_inputs: 1,
            nodes: vec![
                Node { op: NodeOp::Assign, conn1: 0, conn2: 0 },
                Node { op: NodeOp::Invert, conn1: 1, conn2: 0 },
                Node { op: NodeOp::Transpose, conn1: 0, conn2: 0 },
            ],
            output_genes: vec![2],
        };
        assert_eq!(g.active_nodes(), BTreeSet::from([0, 1]));
        let to_input = Genotype { output_genes: vec![0], ..g };
        assert!(to_input.active_nodes().is_empty());
    }

    #[test]
    fn decode_single_add() {
        let g = Genotype {
            num_inputs: 2,
            nodes: vec![Node { op: NodeOp::Add, conn1: 0, conn2: 1 }],
            output_genes: vec![2],
        };
        let p = decode(&g, &Signature::generic(2, 1), "f").unwrap();
        assert_eq!(p.statements.len(), 1);
        assert_eq!(print(&p), "fn f(i_1, i_2) -> (o_1) {\n    o_1 = i_1 + i_2;\n}\n");
    }

    #[test]
    fn encode_kalman_round_trips_semantics() {
        let p = crate::kalman::kalman_program();
        let cfg = CgpConfig::extended(15);
        let g = encode(&p, &cfg).unwrap();
        assert_eq!(g.active_nodes().len(), 13);
        g.check(&cfg).unwrap();
        let d = decode(&g, &p.signature, "kalman").unwrap();
        let mut r = rng(9);
        let inputs: Vec<Matrix> = [(2, 1), (2, 2), (2, 2), (2, 2), (2, 1), (2, 2)]
            .iter()
            .map(|&(a, b)| Matrix::new(a, b, (0..a * b).map(|_| r.random_range(-1.0..1.0))))
            .collect();
        let env = p.signature.inputs.iter().cloned().zip(inputs.iter().cloned()).collect();
        let a = interpret(&p, &env, &GuardConfig::default()).unwrap();
        let b = interpret(&d, &env, &GuardConfig::default()).unwrap();
        let direct = g.evaluate(&inputs).unwrap();
        for (k, o) in p.signature.outputs.iter().enumerate() {
            assert!(a[o].max_abs_diff(&b[o]) < 1e-12);
            assert!(a[o].max_abs_diff(&direct[k]) < 1e-12);
        }
        assert!(matches!(encode(&p, &CgpConfig::extended(12)), Err(EncodeError::TooLarge { .. })));
        assert!(matches!(encode(&p, &CgpConfig::strict(20)), Err(EncodeError::Unsupported(1))));
    }

    #[test]
    fn shared_input_output_names_decode_safely() {
        let p = parse("fn f(x, P) -> (P) { P = P @ P; P = P + x }").unwrap();
        let cfg = CgpConfig::extended(3);
        let g = encode(&p, &cfg).unwrap();
        let d = decode(&g, &p.signature, "f").unwrap();
        let env = [("x".to_string(), Matrix::scalar(2.0)), ("P".to_string(), Matrix::scalar(3.0))].into();
        let out = interpret(&d, &env, &GuardConfig::default()).unwrap();
        assert_eq!(out["P"], Matrix::scalar(11.0));
    }

    #[test]
    fn serialises_as_json() {
        let g = random_genotype(&CgpConfig::extended(4), (4, 2), &mut rng(4));
        let text = serde_json::to_string(&g).unwrap();
        assert!(text.contains("\"op\""));
        assert_eq!(serde_json::from_str::<Genotype>(&text).unwrap(), g);
    }
}
