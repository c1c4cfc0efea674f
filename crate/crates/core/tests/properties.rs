use evofilter_core::cgp::{decode, mutate, random_genotype, CgpConfig, NodeOp};
use evofilter_core::dsl::{parse, print, CompiledProgram, GuardConfig, Signature};
use evofilter_core::dynsys::{make_system, simulate, Scenario};
use evofilter_core::engine::{Candidate, Database, Origin};
use evofilter_core::kalman::TaskSpec;
use evofilter_core::kalman::TaskTag;
use evofilter_core::llm::{build_prompt, find_blocked, parse_completions, PromptMode, PromptSpec};
use evofilter_core::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-10.0..10.0f64, rows * cols).prop_map(move |v| Matrix::new(rows, cols, v))
}

fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
    a.max_abs_diff(b) <= tol
}

proptest! {
    #[test]
    fn addition_commutes(a in matrix(2, 3), b in matrix(2, 3)) {
        prop_assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());
    }

    #[test]
    fn matmul_associates(a in matrix(2, 3), b in matrix(3, 2), c in matrix(2, 2)) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(close(&left, &right, 1e-9));
    }

    #[test]
    fn transpose_reverses_products(a in matrix(2, 3), b in matrix(3, 2)) {
        let lhs = a.matmul(&b).unwrap().transpose();
        let rhs = b.transpose().matmul(&a.transpose()).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-12));
    }

    #[test]
    fn inverse_of_spd_is_inverse(a in matrix(2, 2)) {
        let spd = a.matmul(&a.transpose()).unwrap().add(&Matrix::identity(2)).unwrap();
        let inv = spd.invert().unwrap();
        prop_assert!(close(&inv.matmul(&spd).unwrap(), &Matrix::identity(2), 1e-9));
    }

    #[test]
    fn mutation_keeps_genotypes_valid(seed in any::<u64>(), n in 1usize..12, rate in 0.0..1.0f64) {
        let cfg = CgpConfig { node_set: NodeOp::ALL.to_vec(), max_nodes: n, mutation_rate: rate };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = random_genotype(&cfg, (4, 2), &mut rng);
        for _ in 0..20 {
            let child = mutate(&g, &cfg, &mut rng);
            prop_assert!(child.check(&cfg).is_ok());
            prop_assert_ne!(child.active_genes().len(), 0);
            g = child;
        }
    }

    #[test]
    fn inactive_genes_do_not_change_the_program(seed in any::<u64>()) {
        let cfg = CgpConfig::extended(10);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_genotype(&cfg, (3, 2), &mut rng);
        let sig = Signature::generic(3, 2);
        let active = g.active_nodes();
        let mut drifted = g.clone();
        for (j, node) in drifted.nodes.iter_mut().enumerate() {
            if !active.contains(&j) {
                node.op = cfg.node_set[rng.random_range(0..cfg.node_set.len())];
                node.conn1 = rng.random_range(0..3 + j);
                node.conn2 = rng.random_range(0..3 + j);
            }
        }
        prop_assert!(drifted.check(&cfg).is_ok());
        prop_assert_eq!(decode(&g, &sig, "f").unwrap(), decode(&drifted, &sig, "f").unwrap());
    }

    #[test]
    fn decoded_programs_print_and_parse_back(seed in any::<u64>(), n in 1usize..16, n_in in 1usize..7, n_out in 1usize..7) {
        let cfg = CgpConfig::extended(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_genotype(&cfg, (n_in, n_out), &mut rng);
        let p = decode(&g, &Signature::generic(n_in, n_out), "f").unwrap();
        let text = print(&p);
        let back = parse(&text).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(print(&back), text);
    }

    #[test]
    fn graph_and_interpreter_agree(seed in any::<u64>(), n in 1usize..12) {
        let cfg = CgpConfig::extended(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_genotype(&cfg, (3, 2), &mut rng);
        let p = decode(&g, &Signature::generic(3, 2), "f").unwrap();
        let inputs: Vec<Matrix> = (0..3)
            .map(|_| Matrix::new(2, 2, (0..4).map(|_| rng.random_range(-1.0..1.0))))
            .collect();
        let direct = g.evaluate(&inputs);
        let interpreted = CompiledProgram::new(&p).unwrap().run(&inputs, &GuardConfig::default());
        match (direct, interpreted) {
            (Ok(a), Ok(b)) => {
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!(!x.is_finite() || close(x, y, 1e-12));
                }
            }
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "one route failed: {:?} vs {:?}", a.is_ok(), b.is_ok()),
        }
    }

    #[test]
    fn completion_parsing_is_total(text in ".{0,400}") {
        let parsed = parse_completions(&text, &Signature::generic(4, 2));
        for p in parsed.programs {
            prop_assert_eq!(p.signature.arity(), (4, 2));
        }
    }

    #[test]
    fn fenced_noise_is_rejected_not_fatal(body in "[a-z_0-9 =@+();\n]{0,80}") {
        let text = format!("reply\n```\n{body}\n```\n");
        let parsed = parse_completions(&text, &Signature::generic(4, 2));
        prop_assert!(parsed.programs.len() + parsed.rejections.len() <= 1);
    }

    #[test]
    fn anti_leak_prompts_stay_clean(seed in any::<u64>()) {
        let task = TaskSpec::new(TaskTag::Full, false);
        let generic = task.signature.to_generic();
        let cfg = CgpConfig::extended(10);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parents = [
            decode(&random_genotype(&cfg, (6, 6), &mut rng), &task.reference_signature, "kalman").unwrap(),
            decode(&random_genotype(&cfg, (6, 6), &mut rng), &generic, "f").unwrap(),
        ];
        let spec = PromptSpec {
            mode: PromptMode::AntiLeak,
            parents,
            signature: generic,
            max_tokens: 3000,
            problem_description: Some("covariance of the innovation".into()),
        };
        let prompt = build_prompt(&spec).unwrap();
        prop_assert_eq!(find_blocked(&prompt), None);
    }

    #[test]
    fn database_stays_sorted_unique_and_bounded(fits in prop::collection::vec(0.0..5.0f64, 0..80), cap in 1usize..30) {
        let mut db = Database::new(cap);
        for (i, f) in fits.iter().enumerate() {
            let p = parse(&format!("fn f(i_1) -> (o_1) {{ v_{} = i_1; o_1 = v_{}; }}", i % 40, i % 40)).unwrap();
            db.insert(Candidate::new(p, None, *f, Origin::Random));
        }
        prop_assert!(db.len() <= cap);
        prop_assert!(db.entries().windows(2).all(|w| w[0].fitness <= w[1].fitness));
        let mut ids: Vec<&str> = db.entries().iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), db.len());
        let probs = db.probabilities(0.2);
        prop_assert!(probs.is_empty() || (probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(probs.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn half_gaussian_observations_lie_above_the_state(seed in any::<u64>()) {
        let sys = make_system(1.0, 0.5, 1.0).unwrap();
        let t = simulate(&sys, Scenario::HalfGaussian, 50, seed);
        for (x, z) in t.states.iter().zip(&t.observations) {
            prop_assert!(z.get(0, 0) >= x.get(0, 0) && z.get(1, 0) >= x.get(1, 0));
        }
    }
}
