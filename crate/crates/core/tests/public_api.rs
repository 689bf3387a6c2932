use delq_core::bsde::{oracle_value, OracleOutcome};
use delq_core::instances::{four_step_example, random_problem, scalar_delay_example, WeightKind};
use delq_core::lmei::{certificate_from_riccati, check_membership, construct_from_candidate};
use delq_core::riccati::{classify, optimal_value, solve_riccati, solve_riccati_bar, piece_unified_deviation};
use delq_core::simulate::exact_cost;
use delq_core::{Classification, DelqError, LmeiCandidate, Policy, ProblemData, RiccatiSolution, ScenarioTree, Tolerances, Vector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn problem_json_round_trip_preserves_solution() {
    let p = four_step_example();
    let back = ProblemData::load(&p.to_json().unwrap()).unwrap();
    assert_eq!(p, back);
    let a = solve_riccati(&p, 0).unwrap();
    let b = solve_riccati(&back, 0).unwrap();
    assert_eq!(a.family().relative_distance(b.family()).unwrap(), 0.0);
}

#[test]
fn solution_file_reproduces_values_bitwise() {
    let p = four_step_example();
    let tol = Tolerances::default();
    let sol = solve_riccati(&p, 1).unwrap();
    let class = classify(&sol, &tol).unwrap().classification;
    let (loaded, stored) = RiccatiSolution::from_json(&sol.to_json(Some(class)).unwrap()).unwrap();
    assert_eq!(stored, Some(class));
    let x = Vector::from_vec(vec![-0.4, 2.5]);
    for k in 1..p.horizon {
        assert_eq!(optimal_value(&sol, k, &x).unwrap(), optimal_value(&loaded, k, &x).unwrap());
    }
}

#[test]
fn end_to_end_on_random_nonnegative_instances() {
    let tol = Tolerances::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let p = random_problem(&mut rng, 2, 1, 4, 2, WeightKind::Nonnegative);
        let sol = solve_riccati(&p, 0).unwrap();
        let bar = solve_riccati_bar(&p, 0).unwrap();
        assert!(piece_unified_deviation(&sol, &bar).unwrap() < 1e-10);
        let class = classify(&sol, &tol).unwrap().classification;
        assert!(class.is_solvable(), "{class}");

        let x = Vector::from_vec(vec![1.0, -0.5]);
        let v = optimal_value(&sol, 0, &x).unwrap();
        let tree = ScenarioTree::for_problem(&p, 0).unwrap();
        let exact = exact_cost(&p, &x, &Policy::Feedback { gains: sol.k.clone() }, &tree).unwrap().mean;
        assert!((exact - v).abs() <= 1e-9 * v.abs().max(1.0));
        match oracle_value(&p, 0, &x, &tol).unwrap() {
            OracleOutcome::Bounded { value, .. } => assert!((value - v).abs() <= 1e-8 * v.abs().max(1.0)),
            other => panic!("{other:?}"),
        }

        let (cand, report) = certificate_from_riccati(&p, &sol, &tol).unwrap();
        assert!(report.feasible);
        let rebuilt = construct_from_candidate(&cand, &p, 0, &tol).unwrap();
        assert!(rebuilt.family().relative_distance(sol.family()).unwrap() < 1e-9);
    }
}

#[test]
fn scalar_zero_candidate_is_a_member() {
    let p = scalar_delay_example();
    let tol = Tolerances::default();
    let zero = LmeiCandidate::zeros(&p, 0).unwrap();
    assert!(check_membership(&zero, &p, 0, &tol).unwrap().feasible);
    let built = construct_from_candidate(&zero, &p, 0, &tol).unwrap();
    assert!((built.p(0, 0).unwrap()[(0, 0)] - 0.25).abs() < 1e-14);
}

#[test]
fn invalid_problem_is_rejected_with_all_violations() {
    let mut p = scalar_delay_example();
    p.delay = 7;
    p.g[(0, 0)] = f64::NAN;
    match ProblemData::load(&p.to_json().unwrap_or_default()) {
        Err(DelqError::Validation(msg)) => assert!(msg.lines().count() >= 2, "{msg}"),
        Err(DelqError::Json(_)) => {}
        other => panic!("{other:?}"),
    }
    assert!(!p.validate().is_valid());
    assert!(p.validate().to_string().lines().count() >= 2);
}

#[test]
fn unsolvable_instance_refuses_certificate() {
    let mut p = scalar_delay_example();
    for r in &mut p.r {
        r[(0, 0)] = -2.0;
    }
    let tol = Tolerances::default();
    let sol = solve_riccati(&p, 0).unwrap();
    let class = classify(&sol, &tol).unwrap().classification;
    assert_eq!(class, Classification::NotConvex);
    assert!(matches!(certificate_from_riccati(&p, &sol, &tol), Err(DelqError::Unsolvable(_))));
}
