use evofilter_core::cgp::{decode, mutate, random_genotype, CgpConfig, Genotype};
use evofilter_core::engine::{run_discovery, EngineConfig, Method};
use evofilter_core::kalman::{TaskSpec, TaskTag};
use evofilter_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn probe_inputs(seed: u64) -> Vec<Vec<Matrix>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut m = |rows, cols| Matrix::new(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)));
    (0..8)
        .map(|_| {
            let x = m(2, 1);
            let f = m(2, 2);
            let p = m(2, 2);
            let q = m(2, 2);
            vec![x, f, p.add(&p.transpose()).unwrap(), q.add(&q.transpose()).unwrap()]
        })
        .collect()
}

/// Summed output error against the targets; failures rank last.
fn distance(g: &Genotype, inputs: &[Vec<Matrix>], targets: &[Vec<Matrix>]) -> f64 {
    let mut total = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        match g.evaluate(x) {
            Ok(out) => {
                for (a, b) in out.iter().zip(t) {
                    let d = a.max_abs_diff(b);
                    if !d.is_finite() {
                        return f64::INFINITY;
                    }
                    total += d;
                }
            }
            Err(_) => return f64::INFINITY,
        }
    }
    total
}

/// Iterated mutation with neutral acceptance reaches the predict step from
/// random graphs.
#[test]
fn iterated_mutation_reaches_the_predict_step() {
    let task = TaskSpec::new(TaskTag::Predict, true);
    let reference = task.reference_candidate();
    let oracle = evofilter_core::dsl::CompiledProgram::new(&reference).unwrap();
    let inputs = probe_inputs(1);
    let targets: Vec<Vec<Matrix>> =
        inputs.iter().map(|x| oracle.run(x, &Default::default()).unwrap()).collect();
    // Five nodes are the minimum for this step under the extended set.
    let cfg = CgpConfig::extended(5);

    let mut reached = 0;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut current = random_genotype(&cfg, (4, 2), &mut rng);
        let mut score = distance(&current, &inputs, &targets);
        for _ in 0..1_000_000 {
            if score < 1e-9 {
                break;
            }
            let child = mutate(&current, &cfg, &mut rng);
            let s = distance(&child, &inputs, &targets);
            if s <= score || (s.is_finite() && !score.is_finite()) {
                current = child;
                score = s;
            }
        }
        if score < 1e-9 {
            let p = decode(&current, &task.signature, "f").unwrap();
            assert_eq!(p.signature, reference.signature);
            reached += 1;
        }
    }
    assert!(reached >= 1, "no seed reached the predict step");
}

#[test]
fn seeded_search_never_loses_the_reference() {
    let cfg = EngineConfig {
        method: Method::Cgp,
        task: TaskTag::Full,
        seed: 2,
        iterations: 3,
        islands: 2,
        initial_candidates: 10,
        seed_with_reference: true,
        single_threaded: true,
        ..Default::default()
    };
    let mut cfg = cfg;
    cfg.cgp.parents_per_iteration = 5;
    cfg.cgp.mutants_per_parent = 20;
    let r = run_discovery(&cfg).unwrap();
    assert!(r.manifest.best_train <= r.manifest.reference.train + 1e-12);
    assert!(r.validation.mean <= r.manifest.reference.validation * 1.05);
}

#[test]
fn random_search_respects_budget_and_replays() {
    let cfg = EngineConfig {
        method: Method::Random,
        task: TaskTag::Predict,
        iterations: 100,
        max_evaluations: Some(5_000),
        random_batch: 700,
        single_threaded: true,
        ..Default::default()
    };
    let a = run_discovery(&cfg).unwrap();
    assert_eq!(a.manifest.counts.evaluated, 5_000);
    assert_eq!(a.manifest_hash(), run_discovery(&cfg).unwrap().manifest_hash());
}
