//! Policy evaluation (exact on the tree, or Monte-Carlo), the delayed
//! predictor and the cost identities used as cross-checks.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DelqError, Result};
use crate::linalg::{pinv, Matrix, Vector};
use crate::model::{
    expand_blocks, forward_simulate, info_time, AdaptedProcess, Policy, ProblemData, ScenarioTree, Trajectory,
};
use crate::riccati::RiccatiSolution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// `w = +-1` with probability 1/2.
    Rademacher,
    /// `w ~ N(0, 1)`.
    Gaussian,
    /// Sample `s` follows the Rademacher path whose bits spell `s`; with
    /// `2^(N-t)` samples this enumerates every path once.
    RademacherEnumerated,
}

impl std::str::FromStr for NoiseModel {
    type Err = DelqError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rademacher" => Ok(NoiseModel::Rademacher),
            "gaussian" => Ok(NoiseModel::Gaussian),
            "enumerated" | "rademacher-enumerated" => Ok(NoiseModel::RademacherEnumerated),
            other => Err(DelqError::InvalidInput(format!("unknown noise model '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvaluationResult {
    pub mode: EvalMode,
    pub noise: NoiseModel,
    pub samples: u64,
    pub seed: u64,
    pub mean: f64,
    pub std_error: f64,
}

/// `sum_k E[X^T Q X + u^T R u] + E[X_N^T G X_N]` over a simulated tree.
pub fn trajectory_cost(problem: &ProblemData, traj: &Trajectory, tree: &ScenarioTree) -> f64 {
    let t = tree.start();
    let big_n = tree.end();
    let mut total = 0.0;
    for k in t..big_n {
        let x = traj.states.level(k);
        let u = traj.controls.level(k);
        let qx = &problem.q[k] * x;
        let ru = &problem.r[k] * u;
        total += tree.probability(k) * (x.dot(&qx) + u.dot(&ru));
    }
    let xn = traj.states.level(big_n);
    total + tree.probability(big_n) * xn.dot(&(&problem.g * xn))
}

/// `J(t, x; policy)` with `t = tree.start()`.
pub fn cost(problem: &ProblemData, x: &Vector, policy: &Policy, tree: &ScenarioTree) -> Result<f64> {
    let traj = forward_simulate(problem, x, policy, tree)?;
    Ok(trajectory_cost(problem, &traj, tree))
}

pub fn exact_cost(problem: &ProblemData, x: &Vector, policy: &Policy, tree: &ScenarioTree) -> Result<EvaluationResult> {
    let mean = cost(problem, x, policy, tree)?;
    Ok(EvaluationResult {
        mode: EvalMode::Exact,
        noise: NoiseModel::Rademacher,
        samples: 1u64 << tree.depth(),
        seed: 0,
        mean,
        std_error: 0.0,
    })
}

/// Running estimate of `E_{max(t,k-d)} X_k` from realized states and the
/// controls already applied.
///
/// Holds `X_j, ..., X_k` and `u_j, ..., u_{k-1}` with `j = max(t, k-d)`;
/// the estimate propagates `X_j` through `z <- A_l z + B_l u_l`, since the
/// noise terms have zero conditional mean.
#[derive(Debug, Clone)]
pub struct Predictor<'a> {
    problem: &'a ProblemData,
    t: usize,
    k: usize,
    states: VecDeque<Vector>,
    controls: VecDeque<Vector>,
}

impl<'a> Predictor<'a> {
    pub fn new(problem: &'a ProblemData, t: usize, x: Vector) -> Self {
        let mut states = VecDeque::with_capacity(problem.delay + 1);
        states.push_back(x);
        Predictor {
            problem,
            t,
            k: t,
            states,
            controls: VecDeque::with_capacity(problem.delay),
        }
    }

    pub fn time(&self) -> usize {
        self.k
    }

    /// Current state `X_k`.
    pub fn state(&self) -> &Vector {
        self.states.back().expect("predictor holds at least one state")
    }

    /// `E_{max(t,k-d)} X_k`.
    pub fn estimate(&self) -> Vector {
        let j = info_time(self.t, self.k, self.problem.delay);
        let mut z = self.states.front().expect("predictor holds at least one state").clone();
        for (offset, u) in self.controls.iter().enumerate() {
            let l = j + offset;
            z = &self.problem.a[l] * z + &self.problem.b[l] * u;
        }
        z
    }

    /// Record `u_k` and the realized `X_{k+1}`.
    pub fn advance(&mut self, u: Vector, next: Vector) {
        self.controls.push_back(u);
        self.states.push_back(next);
        self.k += 1;
        let j = info_time(self.t, self.k, self.problem.delay);
        while self.k + 1 - self.states.len() < j {
            self.states.pop_front();
            self.controls.pop_front();
        }
    }
}

/// `E_j X_k` with `j = max(t, k-d)` for the closed loop under `gains`
/// (indexed by `l - t`), given the realized noises `w_t, ..., w_{j-1}`.
pub fn predict(
    problem: &ProblemData,
    t: usize,
    x: &Vector,
    gains: &[Matrix],
    noises: &[f64],
    k: usize,
) -> Result<Vector> {
    problem.check_start(t)?;
    problem.check_state(x)?;
    if k < t || k > problem.horizon {
        return Err(DelqError::InvalidInput(format!("time {k} outside {t}..={}", problem.horizon)));
    }
    if gains.len() != problem.horizon - t {
        return Err(DelqError::dims("predictor gains", problem.horizon - t, gains.len()));
    }
    let d = problem.delay;
    let j = info_time(t, k, d);
    if noises.len() != j - t {
        return Err(DelqError::dims("realized noises", j - t, noises.len()));
    }
    // full history: states[l - t] = X_l for l <= j, controls[l - t] = u_l
    let mut states = vec![x.clone()];
    let mut controls: Vec<Vector> = Vec::new();
    let propagate = |from: usize, to: usize, states: &Vec<Vector>, controls: &Vec<Vector>| {
        let mut z = states[from - t].clone();
        for l in from..to {
            z = &problem.a[l] * z + &problem.b[l] * &controls[l - t];
        }
        z
    };
    for l in t..k {
        let i = info_time(t, l, d);
        let u = &gains[l - t] * propagate(i, l, &states, &controls);
        controls.push(u);
        if l < j {
            let xl = &states[l - t];
            let u = &controls[l - t];
            let w = noises[l - t];
            let next = &problem.a[l] * xl + &problem.b[l] * u + (&problem.c[l] * xl + &problem.d[l] * u) * w;
            states.push(next);
        }
    }
    Ok(propagate(j, k, &states, &controls))
}

fn policy_parts(policy: &Policy) -> (Option<&Vec<Matrix>>, Option<&AdaptedProcess>) {
    match policy {
        Policy::Feedback { gains } => (Some(gains), None),
        Policy::OpenLoop(u) => (None, Some(u)),
        Policy::Shifted { gains, offsets } => (Some(gains), Some(offsets)),
    }
}

fn path_cost(
    problem: &ProblemData,
    t: usize,
    x: &Vector,
    policy: &Policy,
    noise: NoiseModel,
    seed: u64,
    sample: u64,
) -> f64 {
    let (gains, offsets) = policy_parts(policy);
    let big_n = problem.horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample);
    let mut pred = Predictor::new(problem, t, x.clone());
    let mut node = 0usize;
    let mut total = 0.0;
    for k in t..big_n {
        let xk = pred.state().clone();
        let mut u = match gains {
            Some(g) => &g[k - t] * pred.estimate(),
            None => Vector::zeros(problem.m),
        };
        if let Some(v) = offsets {
            u += v.level(k).column(node);
        }
        total += xk.dot(&(&problem.q[k] * &xk)) + u.dot(&(&problem.r[k] * &u));
        let w: f64 = match noise {
            NoiseModel::Gaussian => rng.sample(StandardNormal),
            NoiseModel::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            NoiseModel::RademacherEnumerated => {
                if (sample >> (big_n - 1 - k)) & 1 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
        };
        node = 2 * node + usize::from(w < 0.0);
        let next = &problem.a[k] * &xk + &problem.b[k] * &u + (&problem.c[k] * &xk + &problem.d[k] * &u) * w;
        pred.advance(u, next);
    }
    let xn = pred.state();
    total + xn.dot(&(&problem.g * xn))
}

/// Sample mean and standard error of path costs. Sample `s` draws its noise
/// from the ChaCha8 stream `s` of `seed`, and the sum is taken in sample
/// order, so the result does not depend on the thread count.
pub fn monte_carlo_cost(
    problem: &ProblemData,
    t: usize,
    x: &Vector,
    policy: &Policy,
    noise: NoiseModel,
    samples: u64,
    seed: u64,
) -> Result<EvaluationResult> {
    problem.validate().into_result()?;
    problem.check_start(t)?;
    problem.check_state(x)?;
    if samples < 2 {
        return Err(DelqError::InvalidInput(format!("need at least 2 samples, got {samples}")));
    }
    let steps = problem.horizon - t;
    let (gains, offsets) = policy_parts(policy);
    if let Some(g) = gains {
        if g.len() != steps {
            return Err(DelqError::dims("policy gains", steps, g.len()));
        }
    }
    if let Some(v) = offsets {
        if noise == NoiseModel::Gaussian {
            return Err(DelqError::InvalidInput(
                "open-loop controls are tree-indexed; use Rademacher noise".into(),
            ));
        }
        if v.start() != t || v.last() + 1 != problem.horizon || v.dim() != problem.m {
            return Err(DelqError::InvalidInput("open-loop controls do not match the horizon".into()));
        }
        crate::model::check_delay_measurable(v, t, problem.delay, 1e-12)?;
    }
    if noise == NoiseModel::RademacherEnumerated && (steps >= 63 || samples != 1u64 << steps) {
        return Err(DelqError::InvalidInput(format!(
            "enumerated noise needs exactly 2^{steps} samples"
        )));
    }

    let costs: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|s| path_cost(problem, t, x, policy, noise, seed, s))
        .collect();
    let count = samples as f64;
    let mean = costs.iter().sum::<f64>() / count;
    let var = costs.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (count - 1.0);
    if !mean.is_finite() || !var.is_finite() {
        return Err(DelqError::NonFinite("Monte-Carlo cost".into()));
    }
    Ok(EvaluationResult {
        mode: EvalMode::MonteCarlo,
        noise,
        samples,
        seed,
        mean,
        std_error: (var / count).sqrt(),
    })
}

/// Both sides of an identity and their absolute difference.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

impl IdentityCheck {
    fn new(lhs: f64, rhs: f64) -> Self {
        IdentityCheck {
            lhs,
            rhs,
            residual: (lhs - rhs).abs(),
        }
    }

    /// Residual divided by `max(1, |lhs|)`.
    pub fn relative(&self) -> f64 {
        self.residual / self.lhs.abs().max(1.0)
    }
}

fn check_solution_matches(sol: &RiccatiSolution, tree: &ScenarioTree, problem: &ProblemData) -> Result<()> {
    if sol.t() != tree.start() || sol.horizon() != problem.horizon || sol.delay() != problem.delay {
        return Err(DelqError::InvalidInput(
            "Riccati solution does not match the problem and tree".into(),
        ));
    }
    Ok(())
}

/// `J(t, 0; u)` against
/// `sum_k E[(E X)^T H^T W^† H (E X) + 2 (H E X)^T u + u^T W u]`
/// with `E = E_{max(t,k-d)}` and `X = X^{0,u}`.
pub fn cost_decomposition_check(
    problem: &ProblemData,
    controls: &AdaptedProcess,
    tree: &ScenarioTree,
    sol: &RiccatiSolution,
) -> Result<IdentityCheck> {
    check_solution_matches(sol, tree, problem)?;
    let t = tree.start();
    let traj = forward_simulate(problem, &Vector::zeros(problem.n), &Policy::OpenLoop(controls.clone()), tree)?;
    let lhs = trajectory_cost(problem, &traj, tree);
    let mut rhs = 0.0;
    for k in t..problem.horizon {
        let w = sol.w_at(k)?;
        let h = sol.h_at(k)?;
        let w_pinv = pinv(w, crate::linalg::DEFAULT_PINV_REL_TOL)?;
        let j = info_time(t, k, problem.delay);
        let ex = expand_blocks(&traj.states.cond_expect(k, j)?, k - j);
        let hx = h * &ex;
        let u = traj.controls.level(k);
        let node_sum = hx.dot(&(&w_pinv * &hx)) + 2.0 * hx.dot(u) + u.dot(&(w * u));
        rhs += tree.probability(k) * node_sum;
    }
    Ok(IdentityCheck::new(lhs, rhs))
}

/// Cost of the shifted control `v = u + K E_{max(t,k-d)} X^{x,v}` against
/// `x^T P(0)_t x + sum_k E[u_k^T W_k u_k]`.
pub fn completion_of_squares_check(
    problem: &ProblemData,
    x: &Vector,
    controls: &AdaptedProcess,
    tree: &ScenarioTree,
    sol: &RiccatiSolution,
) -> Result<IdentityCheck> {
    check_solution_matches(sol, tree, problem)?;
    let t = tree.start();
    let policy = Policy::Shifted {
        gains: sol.k.clone(),
        offsets: controls.clone(),
    };
    let lhs = cost(problem, x, &policy, tree)?;
    let mut rhs = x.dot(&(sol.p(0, t)? * x));
    for k in t..problem.horizon {
        let u = controls.level(k);
        rhs += tree.probability(k) * u.dot(&(sol.w_at(k)? * u));
    }
    Ok(IdentityCheck::new(lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::ControlLayout;
    use crate::instances::{self, WeightKind};
    use crate::linalg::max_abs;
    use crate::riccati::{solve_riccati, optimal_value};
    use proptest::prelude::*;
    use rand::Rng;

    fn scalar() -> (ProblemData, RiccatiSolution, ScenarioTree) {
        let p = instances::scalar_delay_example();
        let sol = solve_riccati(&p, 0).unwrap();
        let tree = ScenarioTree::for_problem(&p, 0).unwrap();
        (p, sol, tree)
    }

    #[test]
    fn exact_cost_examples() {
        let (p, sol, tree) = scalar();
        let one = Vector::from_element(1, 1.0);
        let zero_policy = Policy::zero(&p, 0);
        assert_eq!(exact_cost(&p, &Vector::zeros(1), &zero_policy, &tree).unwrap().mean, 0.0);
        assert_eq!(exact_cost(&p, &one, &zero_policy, &tree).unwrap().mean, 1.0);
        let opt = exact_cost(&p, &one, &Policy::Feedback { gains: sol.k.clone() }, &tree).unwrap();
        assert!((opt.mean - 0.25).abs() < 1e-15);
        assert_eq!(opt.samples, 8);
        assert_eq!(opt.std_error, 0.0);
    }

    #[test]
    fn scalar_optimal_path() {
        let (p, sol, tree) = scalar();
        let x = Vector::from_element(1, 1.0);
        let traj = forward_simulate(&p, &x, &Policy::Feedback { gains: sol.k.clone() }, &tree).unwrap();
        for k in 0..3 {
            assert!(traj.controls.level(k).iter().all(|&u| (u + 0.25).abs() < 1e-15));
        }
        assert!(traj.states.level(3).iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let e = predict(&p, 0, &x, &sol.k, &[], 2).unwrap();
        assert!((e[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn enumerated_monte_carlo_equals_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = instances::random_problem(&mut rng, 2, 1, 5, 2, WeightKind::Mixed);
        let tree = ScenarioTree::for_problem(&p, 0).unwrap();
        let sol = solve_riccati(&p, 0).unwrap();
        let x = Vector::from_vec(vec![0.5, -1.0]);
        let policy = Policy::Feedback { gains: sol.k.clone() };
        let exact = exact_cost(&p, &x, &policy, &tree).unwrap().mean;
        let mc = monte_carlo_cost(&p, 0, &x, &policy, NoiseModel::RademacherEnumerated, 32, 0).unwrap();
        assert!((mc.mean - exact).abs() <= 1e-12 * exact.abs().max(1.0));
        assert!(monte_carlo_cost(&p, 0, &x, &policy, NoiseModel::RademacherEnumerated, 31, 0).is_err());

        let layout = ControlLayout::new(&p, 0).unwrap();
        let u = layout.random(&mut rng, 1.0);
        let open = Policy::OpenLoop(u);
        let exact = exact_cost(&p, &x, &open, &tree).unwrap().mean;
        let mc = monte_carlo_cost(&p, 0, &x, &open, NoiseModel::RademacherEnumerated, 32, 0).unwrap();
        assert!((mc.mean - exact).abs() <= 1e-12 * exact.abs().max(1.0));
    }

    #[test]
    fn deterministic_system_has_zero_spread() {
        let (p, sol, _) = scalar();
        let x = Vector::from_element(1, 1.0);
        let policy = Policy::Feedback { gains: sol.k.clone() };
        for noise in [NoiseModel::Gaussian, NoiseModel::Rademacher] {
            let r = monte_carlo_cost(&p, 0, &x, &policy, noise, 100, 9).unwrap();
            assert_eq!(r.std_error, 0.0);
            assert!((r.mean - 0.25).abs() < 1e-15);
        }
        assert!(monte_carlo_cost(&p, 0, &x, &policy, NoiseModel::Gaussian, 1, 9).is_err());
    }

    #[test]
    fn monte_carlo_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = instances::random_problem(&mut rng, 2, 2, 4, 1, WeightKind::Nonnegative);
        let sol = solve_riccati(&p, 0).unwrap();
        let x = Vector::from_vec(vec![1.0, 0.0]);
        let policy = Policy::Feedback { gains: sol.k.clone() };
        let a = monte_carlo_cost(&p, 0, &x, &policy, NoiseModel::Gaussian, 500, 77).unwrap();
        let b = monte_carlo_cost(&p, 0, &x, &policy, NoiseModel::Gaussian, 500, 77).unwrap();
        assert_eq!(a, b);
        let c = monte_carlo_cost(&p, 0, &x, &policy, NoiseModel::Gaussian, 500, 78).unwrap();
        assert_ne!(a.mean, c.mean);
    }

    #[test]
    fn predictor_matches_deterministic_closed_loop_when_c_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = instances::random_problem(&mut rng, 2, 2, 6, 2, WeightKind::Mixed);
        for k in 0..6 {
            p.c[k].fill(0.0);
        }
        let sol = solve_riccati(&p, 0).unwrap();
        let x = Vector::from_vec(vec![0.4, 1.0]);
        // closed loop with D != 0 but C = 0 and u driven only by E X
        let det = ProblemData {
            d: vec![Matrix::zeros(2, 2); 6],
            ..p.clone()
        };
        let tree = ScenarioTree::for_problem(&det, 0).unwrap();
        let traj = forward_simulate(&det, &x, &Policy::Feedback { gains: sol.k.clone() }, &tree).unwrap();
        for k in 0..=6 {
            let j = info_time(0, k, 2);
            let noises = vec![1.0; j];
            let e = predict(&det, 0, &x, &sol.k, &noises, k).unwrap();
            assert!((e - traj.states.at(k, 0)).amax() < 1e-12);
        }
    }

    #[test]
    fn scalar_identities() {
        let (p, sol, tree) = scalar();
        let layout = ControlLayout::new(&p, 0).unwrap();
        let zero = layout.unstack(&Vector::zeros(layout.dim())).unwrap();
        let check = cost_decomposition_check(&p, &zero, &tree, &sol).unwrap();
        assert_eq!((check.lhs, check.rhs), (0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let u = layout.random(&mut rng, 1.0);
            assert!(cost_decomposition_check(&p, &u, &tree, &sol).unwrap().residual <= 1e-12);
        }
    }

    fn random_case(seed: u64) -> (ProblemData, ScenarioTree, RiccatiSolution, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(0..4);
        let horizon = rng.random_range(1..6);
        let p = instances::random_problem(&mut rng, 2, 2, horizon, d.min(horizon), WeightKind::Mixed);
        let tree = ScenarioTree::for_problem(&p, 0).unwrap();
        let sol = solve_riccati(&p, 0).unwrap();
        (p, tree, sol, rng)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn predictor_agrees_with_tree_expectation(seed in any::<u64>()) {
            let (p, tree, sol, mut rng) = random_case(seed);
            let x = Vector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let traj = forward_simulate(&p, &x, &Policy::Feedback { gains: sol.k.clone() }, &tree).unwrap();
            for k in 0..=p.horizon {
                let j = info_time(0, k, p.delay);
                let means = traj.states.cond_expect(k, j).unwrap();
                for atom in 0..tree.atoms(j) {
                    let noises = if j == 0 { vec![] } else { tree.node(j, atom).path };
                    let e = predict(&p, 0, &x, &sol.k, &noises, k).unwrap();
                    let scale = max_abs(&means).max(1.0);
                    prop_assert!((e - means.column(atom)).amax() <= 1e-12 * scale);
                }
            }
        }

        #[test]
        fn gain_policy_cost_equals_value(seed in any::<u64>()) {
            let (p, tree, sol, mut rng) = random_case(seed);
            let report = crate::riccati::classify(&sol, &Default::default()).unwrap();
            prop_assume!(report.classification.is_solvable());
            let x = Vector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let value = optimal_value(&sol, 0, &x).unwrap();
            let c = cost(&p, &x, &Policy::Feedback { gains: sol.k.clone() }, &tree).unwrap();
            prop_assert!((c - value).abs() <= 1e-10 * value.abs().max(1.0));
        }

        #[test]
        fn decomposition_and_completion_hold(seed in any::<u64>()) {
            let (p, tree, sol, mut rng) = random_case(seed);
            let layout = ControlLayout::new(&p, 0).unwrap();
            let solvable = crate::riccati::classify(&sol, &Default::default()).unwrap().classification.is_solvable();
            let x = Vector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            for _ in 0..5 {
                let u = layout.random(&mut rng, 1.0);
                let dec = cost_decomposition_check(&p, &u, &tree, &sol).unwrap();
                prop_assert!(dec.relative() <= 1e-10, "{:?}", dec);
                if solvable {
                    let cs = completion_of_squares_check(&p, &x, &u, &tree, &sol).unwrap();
                    prop_assert!(cs.relative() <= 1e-10, "{:?}", cs);
                }
            }
        }
    }
}
