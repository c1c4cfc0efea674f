use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use evofilter_core::cgp::{decode, encode, nodes_needed, CgpConfig, Genotype};
use evofilter_core::dsl::{parse, print};
use evofilter_core::dynsys::{make_system, simulate as run_simulation, Scenario, SystemModel};
use evofilter_core::engine::{Engine, EngineConfig, Method};
use evofilter_core::kalman::{
    evaluate_stepper, fitness, observation_report, per_step_mse, EvalDatasets, Evaluator, FitnessReport,
    KalmanStepper, Split, SplitSize, SplitSizes, TaskSpec, TaskTag,
};
use evofilter_core::llm::BackendConfig;

use crate::{usage, DiscoverArgs, EvaluateArgs, ExportArgs, Failure, Format, NodeSetArg, SimulateArgs, SplitArg, SystemArgs};

type CmdResult = Result<(), Failure>;

fn scenario(name: &str, delay: Option<&str>) -> Result<Scenario, Failure> {
    let sc: Scenario = name.parse().map_err(usage)?;
    match (sc, delay) {
        (Scenario::Delayed { .. }, Some(range)) => {
            let (lo, hi) = range.split_once(',').ok_or_else(|| usage(anyhow!("delay must be `lo,hi`")))?;
            let lo: f64 = lo.trim().parse().map_err(|_| usage(anyhow!("bad delay bound `{lo}`")))?;
            let hi: f64 = hi.trim().parse().map_err(|_| usage(anyhow!("bad delay bound `{hi}`")))?;
            Scenario::delayed(lo, hi).map_err(usage)
        }
        (_, Some(_)) => Err(usage(anyhow!("--delay only applies to the delayed scenario"))),
        (sc, None) => Ok(sc),
    }
}

fn system(a: &SystemArgs) -> Result<SystemModel, Failure> {
    make_system(a.dt, a.sigma_a, a.sigma_z).map_err(usage)
}

fn task(name: &str) -> Result<TaskTag, Failure> {
    name.parse().map_err(|e: String| usage(anyhow!(e)))
}

fn write_out(path: Option<&Path>, bytes: &[u8]) -> CmdResult {
    match path {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(bytes).context("writing standard output")?,
    }
    Ok(())
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| anyhow!("{e}"))
}

pub fn simulate(a: SimulateArgs) -> CmdResult {
    if a.steps == 0 {
        return Err(usage(anyhow!("--steps must be at least 1")));
    }
    let sc = scenario(&a.scenario, a.delay.as_deref())?;
    let sys = system(&a.system)?;
    let traj = run_simulation(&sys, sc, a.steps, a.seed);
    let rows = traj.states.iter().zip(&traj.observations).enumerate().map(|(k, (x, z))| {
        vec![
            ((k + 1) as f64 * sys.dt).to_string(),
            x.get(0, 0).to_string(),
            x.get(1, 0).to_string(),
            z.get(0, 0).to_string(),
            z.get(1, 0).to_string(),
        ]
    });
    let bytes = csv_bytes(&["t", "x_pos", "x_vel", "z_pos", "z_vel"], rows)?;
    write_out(a.out.as_deref(), &bytes)
}

fn discover_config(a: &DiscoverArgs) -> Result<EngineConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => crate::config::load(p).map_err(usage)?,
        None => EngineConfig::default(),
    };
    if let Some(m) = &a.method {
        cfg.method = m.parse::<Method>().map_err(|e| usage(anyhow!(e)))?;
    }
    if let Some(t) = &a.task {
        cfg.task = task(t)?;
    }
    if let Some(s) = &a.scenario {
        cfg.scenario = scenario(s, a.delay.as_deref())?;
    } else if a.delay.is_some() {
        return Err(usage(anyhow!("--delay needs --scenario delayed")));
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iters {
        cfg.iterations = n;
    }
    if let Some(n) = a.islands {
        cfg.islands = n;
    }
    if let Some(n) = a.max_evals {
        cfg.max_evaluations = Some(n);
    }
    if let Some(b) = &a.backend {
        cfg.llm.backend = Some(BackendConfig::from_spec(b).map_err(|e| usage(anyhow!(e)))?);
    }
    cfg.seed_with_reference |= a.seed_with_reference;
    cfg.single_threaded |= a.single_threaded;
    if a.descriptive {
        cfg.anti_leak = false;
    }
    cfg.check().map_err(usage)?;
    Ok(cfg)
}

pub fn discover(a: DiscoverArgs) -> CmdResult {
    let cfg = discover_config(&a)?;
    let out = a.out.clone().unwrap_or_else(|| {
        let method = format!("{:?}", cfg.method).to_lowercase();
        PathBuf::from("runs").join(format!("{method}-{}-seed{}", cfg.task, cfg.seed))
    });
    let engine = Engine::new(cfg).map_err(usage)?;
    log::info!("running discovery into {}", out.display());
    let result = engine.run().map_err(|e| Failure::Runtime(e.into()))?;

    fs::create_dir_all(out.join("top")).with_context(|| format!("creating {}", out.display()))?;
    let hash = result.manifest_hash();
    let manifest = serde_json::to_vec_pretty(&result.manifest).context("serialising manifest")?;
    fs::write(out.join("manifest.json"), manifest).context("writing manifest")?;
    fs::write(out.join("manifest.sha256"), format!("{hash}\n")).context("writing manifest hash")?;
    let history = result.manifest.history.iter().map(|r| {
        vec![
            r.iteration.to_string(),
            r.island.to_string(),
            r.best.to_string(),
            r.median.to_string(),
            r.evaluations.to_string(),
        ]
    });
    let csv = csv_bytes(&["iteration", "island", "best", "median", "evaluations"], history)?;
    fs::write(out.join("fitness.csv"), csv).context("writing fitness history")?;
    for (rank, c) in result.top(a.top_k).into_iter().enumerate() {
        let text = format!("# train {} ({:?})\n{}", c.fitness, c.origin, print(&c.program));
        fs::write(out.join("top").join(format!("{:02}.mdsl", rank + 1)), text).context("writing top programs")?;
    }
    let best = format!(
        "# validation {} test {}\n{}",
        result.validation.mean,
        result.test.mean,
        print(&result.best.program)
    );
    fs::write(out.join("best.mdsl"), best).context("writing best program")?;

    log::info!("manifest hash {hash}");
    let m = &result.manifest;
    println!("run directory   {}", out.display());
    println!("manifest hash   {hash}");
    println!("evaluations     {}", m.counts.evaluated);
    println!("best validation {}", table_cell(&result.validation));
    println!("best test       {}", table_cell(&result.test));
    println!("reference test  {:.6}", m.reference.test);
    Ok(())
}

fn table_cell(r: &FitnessReport) -> String {
    match &r.failure {
        Some(f) => format!("failed ({f})"),
        None => format!("{:.4} ± {:.4}", r.mean, r.stderr),
    }
}

pub fn evaluate(a: EvaluateArgs) -> CmdResult {
    let tag = task(&a.task)?;
    let sc = scenario(&a.scenario, a.delay.as_deref())?;
    let sys = system(&a.system)?;
    if a.trajectories == 0 || a.steps == 0 {
        return Err(usage(anyhow!("--trajectories and --steps must be at least 1")));
    }
    let text = fs::read_to_string(&a.program).with_context(|| format!("reading {}", a.program.display()))?;
    let program = parse(&text).map_err(|e| anyhow!("{}: {e}", a.program.display()))?;

    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Validation => Split::Validation,
        SplitArg::Test => Split::Test,
    };
    let size = SplitSize { trajectories: a.trajectories, steps: a.steps };
    let mut sizes = SplitSizes::default();
    match split {
        Split::Train => sizes.train = size,
        Split::Validation => sizes.validation = size,
        Split::Test => sizes.test = size,
    }
    let data = EvalDatasets::generate(&sys, sc, &sizes, a.seed);
    let trajs = data.split(split);

    let spec = TaskSpec::new(tag, program.signature.anti_leak);
    let evaluator = Evaluator::new(sys.clone(), spec);
    let report = evaluator.evaluate(&program, trajs);
    let kalman = KalmanStepper::new(&sys);
    let reference = evaluate_stepper(&kalman, trajs);
    let observed = observation_report(trajs);

    println!("program      {}", table_cell(&report));
    println!("kalman       {}", table_cell(&reference));
    println!("observation  {}", table_cell(&observed));

    if let Some(path) = &a.report {
        let json = serde_json::json!({
            "program": a.program.display().to_string(),
            "task": tag.name(),
            "scenario": sc.to_string(),
            "split": format!("{split:?}").to_lowercase(),
            "seed": a.seed,
            "report": report,
            "kalman": reference,
            "observation": observed,
        });
        let bytes = serde_json::to_vec_pretty(&json).context("serialising report")?;
        fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &a.per_step {
        let program_steps = evaluator.per_step_mse(&program, trajs).ok();
        let kalman_steps = per_step_mse(trajs, &kalman).map_err(|f| anyhow!("reference filter failed: {f}"))?;
        let observed_steps: Vec<f64> = (0..a.steps)
            .map(|k| {
                let sum: f64 = trajs
                    .iter()
                    .map(|t| {
                        fitness(std::slice::from_ref(&t.observations[k]), std::slice::from_ref(&t.states[k]))
                            .expect("single step")
                    })
                    .sum();
                sum / trajs.len() as f64
            })
            .collect();
        let rows = (0..a.steps).map(|k| {
            vec![
                (k + 1).to_string(),
                program_steps.as_ref().map_or_else(String::new, |v| v[k].to_string()),
                kalman_steps[k].to_string(),
                observed_steps[k].to_string(),
            ]
        });
        let csv = csv_bytes(&["step", "program", "kalman", "observation"], rows)?;
        fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(f) = &report.failure {
        return Err(Failure::Runtime(anyhow!("program failed: {f}")));
    }
    Ok(())
}

pub fn export(a: ExportArgs) -> CmdResult {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let node_set = match a.node_set {
        NodeSetArg::Strict => CgpConfig::strict(1).node_set,
        NodeSetArg::Extended => CgpConfig::extended(1).node_set,
    };
    let bytes = match a.format {
        Format::Dsl => {
            let tag = task(&a.task)?;
            let g: Genotype = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.input.display()))?;
            let sig = TaskSpec::new(tag, !a.descriptive).signature;
            let p = decode(&g, &sig, "f").map_err(|e| anyhow!("{e}"))?;
            eprintln!("statements {} active nodes {}", p.statements.len(), g.active_nodes().len());
            print(&p).into_bytes()
        }
        Format::Genotype => {
            let p = parse(&text).map_err(|e| anyhow!("{}: {e}", a.input.display()))?;
            let needed = nodes_needed(&p, &node_set).map_err(|e| anyhow!("{e}"))?;
            let cfg = CgpConfig { node_set, max_nodes: a.max_nodes.unwrap_or(needed.max(1)), mutation_rate: 0.1 };
            let g = encode(&p, &cfg).map_err(|e| anyhow!("{e}"))?;
            let mut out = serde_json::to_vec_pretty(&g).context("serialising genotype")?;
            out.push(b'\n');
            out
        }
    };
    write_out(a.out.as_deref(), &bytes)
}
