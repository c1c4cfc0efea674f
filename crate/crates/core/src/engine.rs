//! Island-model evolutionary search.
//!
//! Each island keeps a bounded elite database. An iteration samples parents
//! from it with Boltzmann weights, produces children by CGP mutation, by
//! prompting a language model, or by drawing fresh random graphs, scores
//! them on the training trajectory and inserts them back. Every
//! `migration_period` iterations the weakest islands are wiped and reseeded
//! with the overall best candidate. At the end the islands' top entries are
//! re-scored on the validation split and the winner is reported on the test
//! split.

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cgp::{decode, encode, mutate, nodes_needed, random_genotype, CgpConfig, Genotype, NodeOp};
use crate::dsl::{print, Program};
use crate::dynsys::{derive_seed, make_system, Scenario};
use crate::kalman::{EvalDatasets, Evaluator, FitnessReport, SplitSizes, TaskSpec, TaskTag, WORST_FITNESS};
use crate::llm::{build_prompt, parse_completions, Backend, BackendConfig, PromptMode, PromptSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cgp,
    Llm,
    Random,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cgp" => Ok(Method::Cgp),
            "llm" => Ok(Method::Llm),
            "random" => Ok(Method::Random),
            other => Err(format!("unknown method `{other}` (expected cgp, llm or random)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Cgp,
    Llm,
    Random,
    SeedInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Hex SHA-256 of the canonical program text.
    pub id: String,
    pub program: Program,
    pub genotype: Option<Genotype>,
    /// Training-split MSE, or [`WORST_FITNESS`].
    pub fitness: f64,
    pub origin: Origin,
}

/// Canonical text of `p` with the function name left out, so that programs
/// differing only in their name share an id.
fn canonical_body(p: &Program) -> String {
    let text = print(p);
    match text.find('(') {
        Some(i) => text[i..].to_string(),
        None => text,
    }
}

fn digest(p: &Program) -> (String, u64) {
    let d = Sha256::digest(canonical_body(p).as_bytes());
    let hex: String = d.iter().map(|b| format!("{b:02x}")).collect();
    let key = u64::from_le_bytes(d[..8].try_into().expect("32-byte digest"));
    (hex, key)
}

pub fn program_id(p: &Program) -> String {
    digest(p).0
}

impl Candidate {
    pub fn new(program: Program, genotype: Option<Genotype>, fitness: f64, origin: Origin) -> Self {
        let fitness = if fitness.is_finite() { fitness } else { WORST_FITNESS };
        Candidate { id: program_id(&program), program, genotype, fitness, origin }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("cannot sample from an empty database")]
    EmptyDatabase,
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Best-N store ordered by ascending fitness, unique by id.
#[derive(Debug, Clone)]
pub struct Database {
    capacity: usize,
    entries: Vec<Candidate>,
    ids: HashSet<String>,
}

impl Database {
    pub fn new(capacity: usize) -> Self {
        Database { capacity, entries: Vec::new(), ids: HashSet::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Candidate] {
        &self.entries
    }

    pub fn best(&self) -> Option<&Candidate> {
        self.entries.first()
    }

    pub fn best_fitness(&self) -> f64 {
        self.best().map_or(f64::INFINITY, |c| c.fitness)
    }

    pub fn median_fitness(&self) -> f64 {
        match self.entries.len() {
            0 => f64::INFINITY,
            n if n % 2 == 1 => self.entries[n / 2].fitness,
            n => 0.5 * (self.entries[n / 2 - 1].fitness + self.entries[n / 2].fitness),
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.ids.clear();
    }

    /// Inserts `c` unless its id is present or it would rank below a full
    /// database. Returns whether it was kept.
    pub fn insert(&mut self, c: Candidate) -> bool {
        if self.capacity == 0 || self.ids.contains(&c.id) {
            return false;
        }
        let pos = self.entries.partition_point(|e| e.fitness <= c.fitness);
        if pos >= self.capacity {
            return false;
        }
        self.ids.insert(c.id.clone());
        self.entries.insert(pos, c);
        if self.entries.len() > self.capacity {
            let evicted = self.entries.pop().expect("over capacity");
            self.ids.remove(&evicted.id);
        }
        true
    }

    /// Softmin weights `e^{−f_i/T} / Σ_j e^{−f_j/T}`, computed relative to
    /// the best fitness.
    pub fn probabilities(&self, temperature: f64) -> Vec<f64> {
        let best = self.best_fitness();
        let w: Vec<f64> = self.entries.iter().map(|c| (-(c.fitness - best) / temperature).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }

    /// `k` independent draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, temperature: f64, rng: &mut R) -> Result<Vec<&Candidate>, EngineError> {
        if self.entries.is_empty() {
            return Err(EngineError::EmptyDatabase);
        }
        let dist = WeightedIndex::new(self.probabilities(temperature)).map_err(|_| EngineError::EmptyDatabase)?;
        Ok((0..k).map(|_| &self.entries[dist.sample(rng)]).collect())
    }
}

/// Wipes the `resets` islands with the weakest best fitness and reseeds
/// each with the overall best candidate. Ties rank by island index, lower
/// first. Returns the indices that were reset.
pub fn migrate(dbs: &mut [Database], resets: usize) -> Vec<usize> {
    if dbs.len() < 2 || resets == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..dbs.len()).collect();
    order.sort_by(|&a, &b| dbs[a].best_fitness().total_cmp(&dbs[b].best_fitness()).then(a.cmp(&b)));
    let Some(best) = dbs[order[0]].best().cloned() else {
        return Vec::new();
    };
    let mut reset: Vec<usize> = order.into_iter().rev().take(resets.min(dbs.len() - 1)).collect();
    reset.sort_unstable();
    for &i in &reset {
        dbs[i].clear();
        dbs[i].insert(best.clone());
    }
    reset
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemParams {
    pub dt: f64,
    pub sigma_a: f64,
    pub sigma_z: f64,
}

impl Default for SystemParams {
    fn default() -> Self {
        SystemParams { dt: 1.0, sigma_a: 0.5, sigma_z: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CgpSettings {
    /// Defaults to the extended set.
    pub node_set: Option<Vec<NodeOp>>,
    /// Defaults to the reference statement count plus two.
    pub max_nodes: Option<usize>,
    pub mutation_rate: f64,
    pub parents_per_iteration: usize,
    pub mutants_per_parent: usize,
}

impl Default for CgpSettings {
    fn default() -> Self {
        CgpSettings {
            node_set: None,
            max_nodes: None,
            mutation_rate: 0.1,
            parents_per_iteration: 30,
            mutants_per_parent: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmSettings {
    pub samples_per_iteration: usize,
    pub prompts_per_iteration: usize,
    pub max_tokens: usize,
    pub problem_description: Option<String>,
    pub backend: Option<BackendConfig>,
    /// Prompts dispatched concurrently.
    pub max_in_flight: usize,
}

impl Default for LlmSettings {
    fn default() -> Self {
        LlmSettings {
            samples_per_iteration: 60,
            prompts_per_iteration: 30,
            max_tokens: 3000,
            problem_description: None,
            backend: None,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub method: Method,
    pub task: TaskTag,
    /// Generic input/output names and no problem description.
    pub anti_leak: bool,
    pub scenario: Scenario,
    pub system: SystemParams,
    pub splits: SplitSizes,
    pub seed: u64,
    pub iterations: usize,
    /// Stop once this many candidates have been evaluated.
    pub max_evaluations: Option<u64>,
    /// Stop once the best training fitness reaches this value.
    pub target_fitness: Option<f64>,
    pub islands: usize,
    pub migration_period: usize,
    /// Islands reset per migration; defaults to half of them.
    pub migration_resets: Option<usize>,
    pub database_capacity: usize,
    pub temperature: f64,
    /// Random candidates per island at start-up.
    pub initial_candidates: usize,
    /// Also seed every island with the reference program.
    pub seed_with_reference: bool,
    /// Random graphs per island per iteration for the random method.
    pub random_batch: usize,
    pub cgp: CgpSettings,
    pub llm: LlmSettings,
    /// Entries per island re-scored on validation at the end.
    pub finalists_per_island: usize,
    /// Re-score every database entry instead.
    pub full_rescore: bool,
    pub single_threaded: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            method: Method::Cgp,
            task: TaskTag::Predict,
            anti_leak: true,
            scenario: Scenario::Gaussian,
            system: SystemParams::default(),
            splits: SplitSizes::default(),
            seed: 0,
            iterations: 10,
            max_evaluations: None,
            target_fitness: None,
            islands: 4,
            migration_period: 10,
            migration_resets: None,
            database_capacity: 200,
            temperature: 0.2,
            initial_candidates: 200,
            seed_with_reference: false,
            random_batch: 30_000,
            cgp: CgpSettings::default(),
            llm: LlmSettings::default(),
            finalists_per_island: 10,
            full_rescore: false,
            single_threaded: false,
        }
    }
}

impl EngineConfig {
    pub fn check(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Config(m.to_string()));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if self.islands == 0 {
            return bad("at least one island is required");
        }
        if self.migration_period == 0 {
            return bad("migration period must be at least 1");
        }
        if self.database_capacity == 0 {
            return bad("database capacity must be at least 1");
        }
        if self.splits.train.trajectories == 0 || self.splits.train.steps == 0 {
            return bad("training split must not be empty");
        }
        if self.splits.validation.trajectories == 0 || self.splits.validation.steps == 0 {
            return bad("validation split must not be empty");
        }
        if self.initial_candidates == 0 && !self.seed_with_reference {
            return bad("islands need initial candidates or the reference seed");
        }
        self.scenario.check().map_err(|e| EngineError::Config(e.to_string()))?;
        make_system(self.system.dt, self.system.sigma_a, self.system.sigma_z)
            .map_err(|e| EngineError::Config(e.to_string()))?;
        self.cgp_config().check().map_err(EngineError::Config)?;
        if self.method == Method::Llm {
            if self.llm.backend.is_none() {
                return bad("the llm method needs a backend");
            }
            if self.llm.samples_per_iteration < 2 * self.llm.prompts_per_iteration {
                return bad("llm samples per iteration must cover two parents per prompt");
            }
        }
        Ok(())
    }

    /// Reference statement count for the task (two predict statements plus
    /// the covered update statements).
    pub fn target_size(&self) -> usize {
        2 + self.task.update_statements()
    }

    pub fn cgp_config(&self) -> CgpConfig {
        let node_set = self.cgp.node_set.clone().unwrap_or_else(|| NodeOp::ALL.to_vec());
        let max_nodes = self.cgp.max_nodes.unwrap_or_else(|| {
            let default = self.target_size() + 2;
            if self.seed_with_reference {
                let reference = TaskSpec::new(self.task, self.anti_leak).reference_candidate();
                let needed = nodes_needed(&reference, &node_set).unwrap_or(0);
                default.max(needed + 2)
            } else {
                default
            }
        });
        CgpConfig { node_set, max_nodes, mutation_rate: self.cgp.mutation_rate }
    }

    pub fn resets(&self) -> usize {
        self.migration_resets.unwrap_or(self.islands / 2)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    /// Candidates produced by mutation, prompting or random draws.
    pub generated: u64,
    /// Completion blocks that failed to parse or validate.
    pub rejected: u64,
    /// Candidates scored (cache hits included).
    pub evaluated: u64,
    pub cache_hits: u64,
    /// Evaluations that ended with the failure sentinel.
    pub failures: u64,
    pub inserted: u64,
    pub prompts: u64,
    pub prompt_errors: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub island: usize,
    pub best: f64,
    pub median: f64,
    pub evaluations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScores {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finalist {
    pub id: String,
    pub train: f64,
    pub validation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: EngineConfig,
    pub iterations_run: usize,
    pub history: Vec<IterationRecord>,
    pub migrations: Vec<Vec<usize>>,
    pub counts: EvalCounts,
    pub reference: ReferenceScores,
    /// Evaluated candidates scoring below the reference on training data
    /// (tracked on the Gaussian scenario only).
    pub below_reference: u64,
    pub best_id: String,
    pub best_program: String,
    pub best_origin: Origin,
    pub best_train: f64,
    pub best_validation: f64,
    pub test: FitnessReport,
    pub finalists: Vec<Finalist>,
    pub wall_clock_seconds: f64,
}

impl Manifest {
    /// SHA-256 of the manifest with the wall-clock time zeroed.
    pub fn hash(&self) -> String {
        let mut m = self.clone();
        m.wall_clock_seconds = 0.0;
        let bytes = serde_json::to_vec(&m).expect("manifest serialises");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub best: Candidate,
    pub validation: FitnessReport,
    pub test: FitnessReport,
    /// Final database of each island.
    pub islands: Vec<Vec<Candidate>>,
    pub manifest: Manifest,
}

impl RunResult {
    pub fn manifest_hash(&self) -> String {
        self.manifest.hash()
    }

    /// Best distinct candidates across islands, by training fitness.
    pub fn top(&self, k: usize) -> Vec<&Candidate> {
        let mut all: Vec<&Candidate> = self.islands.iter().flatten().collect();
        all.sort_by(|a, b| a.fitness.total_cmp(&b.fitness));
        let mut seen = HashSet::new();
        all.into_iter().filter(|c| seen.insert(c.id.as_str())).take(k).collect()
    }
}

struct Island {
    db: Database,
    rng: ChaCha8Rng,
}

type Child = (Program, Option<Genotype>, Origin);

pub struct Engine {
    cfg: EngineConfig,
    evaluator: Evaluator,
    data: EvalDatasets,
    cgp: CgpConfig,
    backend: Option<Box<dyn Backend>>,
    cache: HashMap<u64, f64>,
    counts: EvalCounts,
    islands: Vec<Island>,
    history: Vec<IterationRecord>,
    migrations: Vec<Vec<usize>>,
    reference_train: f64,
    below_reference: u64,
    iterations_run: usize,
}

impl Engine {
    /// Builds an engine, connecting the configured backend for the llm
    /// method.
    pub fn new(cfg: EngineConfig) -> Result<Self, EngineError> {
        cfg.check()?;
        let backend = match (&cfg.method, &cfg.llm.backend) {
            (Method::Llm, Some(b)) => {
                Some(b.connect(cfg.llm.max_tokens).map_err(|e| EngineError::Config(e.to_string()))?)
            }
            _ => None,
        };
        Self::build(cfg, backend)
    }

    /// Builds an engine around an already constructed backend.
    pub fn with_backend(mut cfg: EngineConfig, backend: Box<dyn Backend>) -> Result<Self, EngineError> {
        if cfg.llm.backend.is_none() {
            cfg.llm.backend = Some(BackendConfig::Mock { script: "<in-memory>".into() });
        }
        cfg.check()?;
        Self::build(cfg, Some(backend))
    }

    fn build(cfg: EngineConfig, backend: Option<Box<dyn Backend>>) -> Result<Self, EngineError> {
        let sys = make_system(cfg.system.dt, cfg.system.sigma_a, cfg.system.sigma_z)
            .map_err(|e| EngineError::Config(e.to_string()))?;
        let task = TaskSpec::new(cfg.task, cfg.anti_leak);
        let mut evaluator = Evaluator::new(sys.clone(), task);
        evaluator.parallel = !cfg.single_threaded;
        let data = EvalDatasets::generate(&sys, cfg.scenario, &cfg.splits, cfg.seed);
        let cgp = cfg.cgp_config();
        if cfg.seed_with_reference && cfg.method != Method::Llm {
            encode(&evaluator.task.reference_candidate(), &cgp)
                .map_err(|e| EngineError::Config(format!("reference seed does not fit the graph: {e}")))?;
        }
        let reference_train = evaluator.evaluate(&evaluator.task.reference_candidate(), &data.train).mean;
        let islands = (0..cfg.islands)
            .map(|i| Island {
                db: Database::new(cfg.database_capacity),
                rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 100, i as u64)),
            })
            .collect();
        Ok(Engine {
            cfg,
            evaluator,
            data,
            cgp,
            backend,
            cache: HashMap::new(),
            counts: EvalCounts::default(),
            islands,
            history: Vec::new(),
            migrations: Vec::new(),
            reference_train,
            below_reference: 0,
            iterations_run: 0,
        })
    }

    pub fn counts(&self) -> EvalCounts {
        self.counts
    }

    pub fn task(&self) -> &TaskSpec {
        &self.evaluator.task
    }

    pub fn evaluator(&self) -> &Evaluator {
        &self.evaluator
    }

    pub fn datasets(&self) -> &EvalDatasets {
        &self.data
    }

    pub fn cgp_config(&self) -> &CgpConfig {
        &self.cgp
    }

    pub fn database(&self, island: usize) -> &Database {
        &self.islands[island].db
    }

    pub fn reference_train(&self) -> f64 {
        self.reference_train
    }

    fn budget_left(&self) -> u64 {
        self.cfg.max_evaluations.map_or(u64::MAX, |m| m.saturating_sub(self.counts.evaluated))
    }

    fn exhausted(&self) -> bool {
        self.budget_left() == 0
    }

    fn target_reached(&self) -> bool {
        self.cfg.target_fitness.is_some_and(|t| self.islands.iter().any(|i| i.db.best_fitness() <= t))
    }

    fn random_child(&self, rng: &mut ChaCha8Rng) -> Child {
        let sig = &self.evaluator.task.signature;
        let g = random_genotype(&self.cgp, sig.arity(), rng);
        let p = decode(&g, sig, "f").expect("arity matches signature");
        (p, Some(g), Origin::Random)
    }

    /// Scores children, using the cache for repeated programs.
    fn evaluate_children(&mut self, children: Vec<Child>) -> Vec<Candidate> {
        let keyed: Vec<(String, u64)> = children.iter().map(|(p, _, _)| digest(p)).collect();
        let mut todo: Vec<usize> = Vec::new();
        let mut queued: HashSet<u64> = HashSet::new();
        for (i, (_, key)) in keyed.iter().enumerate() {
            if !self.cache.contains_key(key) && queued.insert(*key) {
                todo.push(i);
            }
        }
        let evaluator = &self.evaluator;
        let train = &self.data.train;
        let score = |&i: &usize| evaluator.evaluate(&children[i].0, train).mean;
        let scores: Vec<f64> = if self.cfg.single_threaded {
            todo.iter().map(score).collect()
        } else {
            todo.par_iter().map(score).collect()
        };
        let gaussian = self.cfg.scenario == Scenario::Gaussian;
        for (&i, &s) in todo.iter().zip(&scores) {
            self.cache.insert(keyed[i].1, s);
            if gaussian && s < self.reference_train - 1e-9 {
                self.below_reference += 1;
            }
        }
        self.counts.evaluated += children.len() as u64;
        self.counts.cache_hits += (children.len() - todo.len()) as u64;
        children
            .into_iter()
            .zip(keyed)
            .map(|((program, genotype, origin), (id, key))| {
                let fitness = self.cache[&key];
                if fitness >= WORST_FITNESS {
                    self.counts.failures += 1;
                }
                Candidate { id, program, genotype, fitness, origin }
            })
            .collect()
    }

    fn insert_all(&mut self, island: usize, candidates: Vec<Candidate>) {
        for c in candidates {
            if self.islands[island].db.insert(c) {
                self.counts.inserted += 1;
            }
        }
    }

    /// Fills every island with its initial population.
    pub fn initialise(&mut self) {
        let reference = self.evaluator.task.reference_candidate();
        for i in 0..self.islands.len() {
            let mut children: Vec<Child> = Vec::new();
            if self.cfg.seed_with_reference {
                let g = match self.cfg.method {
                    Method::Llm => None,
                    _ => encode(&reference, &self.cgp).ok(),
                };
                children.push((reference.clone(), g, Origin::SeedInit));
            }
            let mut rng = self.islands[i].rng.clone();
            for _ in 0..self.cfg.initial_candidates {
                children.push(self.random_child(&mut rng));
            }
            self.islands[i].rng = rng;
            self.counts.generated += children.len() as u64;
            let scored = self.evaluate_children(children);
            self.insert_all(i, scored);
        }
    }

    /// One sample–mutate–evaluate–insert round on one island.
    pub fn run_iteration(&mut self, island: usize, iteration: usize) -> Result<(), EngineError> {
        let budget = self.budget_left();
        if budget == 0 {
            return Ok(());
        }
        let children = match self.cfg.method {
            Method::Cgp => self.cgp_children(island, budget)?,
            Method::Random => {
                let n = (self.cfg.random_batch as u64).min(budget) as usize;
                let mut rng = self.islands[island].rng.clone();
                let children = (0..n).map(|_| self.random_child(&mut rng)).collect();
                self.islands[island].rng = rng;
                children
            }
            Method::Llm => self.llm_children(island, iteration, budget)?,
        };
        self.counts.generated += children.len() as u64;
        let scored = self.evaluate_children(children);
        self.insert_all(island, scored);
        Ok(())
    }

    fn cgp_children(&mut self, island: usize, budget: u64) -> Result<Vec<Child>, EngineError> {
        let sig = self.evaluator.task.signature.clone();
        let isl = &mut self.islands[island];
        let parents: Vec<Genotype> = isl
            .db
            .sample(self.cfg.cgp.parents_per_iteration, self.cfg.temperature, &mut isl.rng)?
            .into_iter()
            .filter_map(|c| c.genotype.clone())
            .collect();
        let mut children = Vec::new();
        'outer: for parent in &parents {
            for _ in 0..self.cfg.cgp.mutants_per_parent {
                if children.len() as u64 >= budget {
                    break 'outer;
                }
                let g = mutate(parent, &self.cgp, &mut isl.rng);
                let p = decode(&g, &sig, "f").expect("arity matches signature");
                children.push((p, Some(g), Origin::Cgp));
            }
        }
        Ok(children)
    }

    fn llm_children(&mut self, island: usize, iteration: usize, budget: u64) -> Result<Vec<Child>, EngineError> {
        let llm = self.cfg.llm.clone();
        let task_sig = self.evaluator.task.signature.clone();
        let isl = &mut self.islands[island];
        let sampled: Vec<Candidate> = isl
            .db
            .sample(llm.samples_per_iteration, self.cfg.temperature, &mut isl.rng)?
            .into_iter()
            .cloned()
            .collect();
        let mode = if self.cfg.anti_leak { PromptMode::AntiLeak } else { PromptMode::Descriptive };
        let mut prompts: Vec<Option<String>> = Vec::new();
        for pair in sampled.chunks_exact(2).take(llm.prompts_per_iteration) {
            let (a, b) = if pair[1].fitness < pair[0].fitness { (&pair[1], &pair[0]) } else { (&pair[0], &pair[1]) };
            let spec = PromptSpec {
                mode,
                parents: [a.program.clone(), b.program.clone()],
                signature: task_sig.clone(),
                max_tokens: llm.max_tokens,
                problem_description: llm.problem_description.clone(),
            };
            match build_prompt(&spec) {
                Ok(text) => prompts.push(Some(text)),
                Err(e) => {
                    log::warn!("prompt skipped: {e}");
                    prompts.push(None);
                }
            }
        }
        let base = ((iteration * self.islands.len() + island) * llm.prompts_per_iteration) as u64;
        let backend = self.backend.as_deref().ok_or_else(|| EngineError::Config("no backend".into()))?;
        let ask = |(j, prompt): (usize, &Option<String>)| -> Option<String> {
            let prompt = prompt.as_ref()?;
            match backend.complete(prompt, base + j as u64) {
                Ok(text) => Some(text),
                Err(e) => {
                    log::warn!("completion failed: {e}");
                    None
                }
            }
        };
        let replies: Vec<Option<String>> = if self.cfg.single_threaded || llm.max_in_flight <= 1 {
            prompts.iter().enumerate().map(ask).collect()
        } else {
            let mut out = Vec::with_capacity(prompts.len());
            let indexed: Vec<(usize, &Option<String>)> = prompts.iter().enumerate().collect();
            for chunk in indexed.chunks(llm.max_in_flight) {
                let got: Vec<Option<String>> = std::thread::scope(|s| {
                    let handles: Vec<_> = chunk.iter().map(|&item| s.spawn(move || ask(item))).collect();
                    handles.into_iter().map(|h| h.join().unwrap_or(None)).collect()
                });
                out.extend(got);
            }
            out
        };
        self.counts.prompts += prompts.len() as u64;
        let mut children = Vec::new();
        for reply in replies {
            let Some(text) = reply else {
                self.counts.prompt_errors += 1;
                continue;
            };
            let parsed = parse_completions(&text, &task_sig);
            self.counts.generated += parsed.rejections.len() as u64;
            self.counts.rejected += parsed.rejections.len() as u64;
            children.extend(parsed.programs.into_iter().map(|p| (p, None, Origin::Llm)));
        }
        children.truncate(budget.min(usize::MAX as u64) as usize);
        Ok(children)
    }

    fn record(&mut self, iteration: usize) {
        for (i, isl) in self.islands.iter().enumerate() {
            self.history.push(IterationRecord {
                iteration,
                island: i,
                best: isl.db.best_fitness(),
                median: isl.db.median_fitness(),
                evaluations: self.counts.evaluated,
            });
        }
    }

    /// Runs the configured iterations after [`Engine::initialise`].
    pub fn evolve(&mut self) -> Result<(), EngineError> {
        for it in 0..self.cfg.iterations {
            if self.exhausted() || self.target_reached() {
                break;
            }
            for i in 0..self.islands.len() {
                self.run_iteration(i, it)?;
            }
            self.iterations_run = it + 1;
            self.record(it);
            if (it + 1) % self.cfg.migration_period == 0 {
                let mut dbs: Vec<Database> = self.islands.iter().map(|i| i.db.clone()).collect();
                let reset = migrate(&mut dbs, self.cfg.resets());
                for (isl, db) in self.islands.iter_mut().zip(dbs) {
                    isl.db = db;
                }
                self.migrations.push(reset);
            }
        }
        Ok(())
    }

    /// Re-scores the finalists on validation and reports the winner on test.
    pub fn finish(self, started: Instant) -> RunResult {
        let mut seen = HashSet::new();
        let mut finalists: Vec<&Candidate> = Vec::new();
        for isl in &self.islands {
            let take = if self.cfg.full_rescore { isl.db.len() } else { self.cfg.finalists_per_island };
            for c in isl.db.entries().iter().take(take) {
                if seen.insert(c.id.as_str()) {
                    finalists.push(c);
                }
            }
        }
        let validation = &self.data.validation;
        let evaluator = &self.evaluator;
        let reports: Vec<FitnessReport> = if self.cfg.single_threaded {
            finalists.iter().map(|c| evaluator.evaluate(&c.program, validation)).collect()
        } else {
            finalists.par_iter().map(|c| evaluator.evaluate(&c.program, validation)).collect()
        };
        let winner = reports
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.mean.total_cmp(&b.1.mean).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i)
            .expect("islands are never empty after initialisation");
        let best = finalists[winner].clone();
        let best_validation = reports[winner].clone();
        let test = evaluator.evaluate(&best.program, &self.data.test);

        let reference = evaluator.task.reference_candidate();
        let reference_scores = ReferenceScores {
            train: self.reference_train,
            validation: evaluator.evaluate(&reference, &self.data.validation).mean,
            test: evaluator.evaluate(&reference, &self.data.test).mean,
        };
        let manifest = Manifest {
            config: self.cfg.clone(),
            iterations_run: self.iterations_run,
            history: self.history.clone(),
            migrations: self.migrations.clone(),
            counts: self.counts,
            reference: reference_scores,
            below_reference: self.below_reference,
            best_id: best.id.clone(),
            best_program: print(&best.program),
            best_origin: best.origin,
            best_train: best.fitness,
            best_validation: best_validation.mean,
            test: test.clone(),
            finalists: finalists
                .iter()
                .zip(&reports)
                .map(|(c, r)| Finalist { id: c.id.clone(), train: c.fitness, validation: r.mean })
                .collect(),
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        };
        RunResult {
            best,
            validation: best_validation,
            test,
            islands: self.islands.iter().map(|i| i.db.entries().to_vec()).collect(),
            manifest,
        }
    }

    pub fn run(mut self) -> Result<RunResult, EngineError> {
        let started = Instant::now();
        let single = self.cfg.single_threaded;
        let body = move || -> Result<RunResult, EngineError> {
            self.initialise();
            self.evolve()?;
            Ok(self.finish(started))
        };
        if single {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build()
                .map_err(|e| EngineError::Config(e.to_string()))?;
            pool.install(body)
        } else {
            body()
        }
    }
}

/// Runs a complete discovery from configuration.
pub fn run_discovery(cfg: &EngineConfig) -> Result<RunResult, EngineError> {
    Engine::new(cfg.clone())?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse;

    fn cand(fitness: f64, tag: &str) -> Candidate {
        let p = parse(&format!("fn f(i_1) -> (o_1) {{ {tag} = i_1; o_1 = {tag} }}")).unwrap();
        Candidate::new(p, None, fitness, Origin::Random)
    }

    #[test]
    fn top_n_semantics() {
        let mut db = Database::new(2);
        assert!(db.insert(cand(1.0, "a")));
        assert!(db.insert(cand(0.5, "b")));
        assert!(db.insert(cand(0.7, "c")));
        let f: Vec<f64> = db.entries().iter().map(|c| c.fitness).collect();
        assert_eq!(f, [0.5, 0.7]);
        assert!(!db.insert(cand(0.1, "b")), "duplicate id");
        assert!(!db.insert(cand(WORST_FITNESS, "z")));
        assert_eq!(db.len(), 2);
    }

    #[test]
    fn probabilities() {
        let mut db = Database::new(10);
        db.insert(cand(1.0, "a"));
        db.insert(cand(1.0, "b"));
        assert_eq!(db.probabilities(0.2), [0.5, 0.5]);
        let mut db = Database::new(10);
        db.insert(cand(0.0, "a"));
        db.insert(cand(0.2, "b"));
        let p = db.probabilities(0.2);
        assert!((p[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = db.sample(10_000, 1e-6, &mut rng).unwrap();
        assert!(draws.iter().filter(|c| c.fitness == 0.0).count() > 9_990);
        assert_eq!(Database::new(3).sample(1, 0.2, &mut rng).unwrap_err(), EngineError::EmptyDatabase);
    }

    #[test]
    fn migration_rule() {
        let mut dbs: Vec<Database> = [1.0, 0.9, 2.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let mut d = Database::new(5);
                d.insert(cand(f, &format!("n{i}")));
                d.insert(cand(f + 10.0, &format!("m{i}")));
                d
            })
            .collect();
        assert_eq!(migrate(&mut dbs, 2), [2, 3]);
        for i in [2, 3] {
            assert_eq!(dbs[i].len(), 1);
            assert_eq!(dbs[i].best_fitness(), 0.9);
        }
        assert_eq!(dbs[0].len(), 2);

        let mut equal: Vec<Database> = (0..4)
            .map(|i| {
                let mut d = Database::new(5);
                d.insert(cand(1.0, &format!("e{i}")));
                d
            })
            .collect();
        assert_eq!(migrate(&mut equal, 2), [2, 3]);
        assert_eq!(equal[3].best().unwrap().id, equal[0].best().unwrap().id);

        let mut single = vec![Database::new(2)];
        assert!(migrate(&mut single, 1).is_empty());
    }

    fn tiny(method: Method) -> EngineConfig {
        EngineConfig {
            method,
            iterations: 2,
            islands: 2,
            initial_candidates: 20,
            random_batch: 50,
            cgp: CgpSettings { parents_per_iteration: 5, mutants_per_parent: 10, ..Default::default() },
            splits: SplitSizes {
                train: crate::kalman::SplitSize { trajectories: 1, steps: 50 },
                validation: crate::kalman::SplitSize { trajectories: 3, steps: 50 },
                test: crate::kalman::SplitSize { trajectories: 3, steps: 50 },
            },
            single_threaded: true,
            ..Default::default()
        }
    }

    #[test]
    fn accounting_and_replay() {
        let cfg = tiny(Method::Cgp);
        let a = run_discovery(&cfg).unwrap();
        let b = run_discovery(&cfg).unwrap();
        assert_eq!(a.manifest_hash(), b.manifest_hash());
        let c = a.manifest.counts;
        // 2 islands x 20 initial + 2 iterations x 2 islands x 5 x 10.
        assert_eq!(c.generated, 40 + 200);
        assert_eq!(c.evaluated, c.generated - c.rejected);
        let mut other = cfg.clone();
        other.seed = 1;
        assert_ne!(run_discovery(&other).unwrap().manifest_hash(), a.manifest_hash());
    }

    #[test]
    fn zero_iterations_with_reference_seed_returns_reference() {
        let mut cfg = tiny(Method::Cgp);
        cfg.iterations = 0;
        cfg.task = TaskTag::Full;
        cfg.anti_leak = false;
        cfg.seed_with_reference = true;
        cfg.initial_candidates = 5;
        let r = run_discovery(&cfg).unwrap();
        let reference = TaskSpec::new(TaskTag::Full, false).reference_candidate();
        assert_eq!(r.best.program.statements, reference.statements);
        assert_eq!(r.best.origin, Origin::SeedInit);
    }

    #[test]
    fn budget_caps_evaluations() {
        let mut cfg = tiny(Method::Random);
        cfg.max_evaluations = Some(100);
        cfg.iterations = 50;
        let r = run_discovery(&cfg).unwrap();
        assert_eq!(r.manifest.counts.evaluated, 100);
    }

    #[test]
    fn config_errors_are_caught() {
        let mut cfg = tiny(Method::Cgp);
        cfg.temperature = 0.0;
        assert!(matches!(run_discovery(&cfg), Err(EngineError::Config(_))));
        let cfg = tiny(Method::Llm);
        assert!(matches!(run_discovery(&cfg), Err(EngineError::Config(_))));
    }
}
