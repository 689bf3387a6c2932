//! Backward stochastic difference equations on the scenario tree, the
//! state/control operators and their adjoints, explicit assembly of the cost
//! as a quadratic form over admissible controls, and the brute-force oracle.
//!
//! Inner products are `<a, b> = sum_k E[a_k^T b_k]` on `t..N-1` and
//! `E[a^T b]` on terminal values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DelqError, Result};
use crate::linalg::{self, is_psd, max_abs, pinv, psd_margin, Matrix, Tolerances, Vector};
use crate::model::{
    average_blocks, check_delay_measurable, expand_blocks, forward_simulate, info_time, AdaptedProcess, Policy,
    ProblemData, ScenarioTree, Trajectory,
};
use crate::riccati::RiccatiSolution;
use crate::simulate::{cost, IdentityCheck};

/// Default bound on the number of stacked control coordinates.
pub const STACKED_DIM_CAP: usize = 4096;

/// Coordinates of admissible controls: for each `k` in `t..N`, one `m`-vector
/// per atom of `F_{max(t,k-d)}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlLayout {
    t: usize,
    horizon: usize,
    delay: usize,
    m: usize,
    offsets: Vec<usize>,
    dim: usize,
}

impl ControlLayout {
    pub fn new(problem: &ProblemData, t: usize) -> Result<Self> {
        problem.check_start(t)?;
        let mut offsets = Vec::with_capacity(problem.horizon - t);
        let mut dim = 0usize;
        for k in t..problem.horizon {
            offsets.push(dim);
            let shift = info_time(t, k, problem.delay) - t;
            if shift >= usize::BITS as usize - 8 {
                return Err(DelqError::Resource("stacked control dimension overflows".into()));
            }
            dim += problem.m << shift;
        }
        Ok(ControlLayout {
            t,
            horizon: problem.horizon,
            delay: problem.delay,
            m: problem.m,
            offsets,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn info_time(&self, k: usize) -> usize {
        info_time(self.t, k, self.delay)
    }

    pub fn atoms(&self, k: usize) -> usize {
        1 << (self.info_time(k) - self.t)
    }

    /// Offset of `(k, atom)` in the stacked vector.
    pub fn offset(&self, k: usize, atom: usize) -> usize {
        self.offsets[k - self.t] + atom * self.m
    }

    /// `(k, atom, component)` of a stacked coordinate.
    pub fn coordinate(&self, idx: usize) -> (usize, usize, usize) {
        let step = self.offsets.partition_point(|&o| o <= idx) - 1;
        let rel = idx - self.offsets[step];
        (self.t + step, rel / self.m, rel % self.m)
    }

    /// Probability of the atom carrying each coordinate.
    pub fn weights(&self) -> Vector {
        Vector::from_fn(self.dim, |idx, _| {
            let (k, _, _) = self.coordinate(idx);
            0.5_f64.powi((self.info_time(k) - self.t) as i32)
        })
    }

    pub fn stack(&self, controls: &AdaptedProcess) -> Result<Vector> {
        if controls.start() != self.t || controls.last() + 1 != self.horizon || controls.dim() != self.m {
            return Err(DelqError::InvalidInput("controls do not match the layout".into()));
        }
        check_delay_measurable(controls, self.t, self.delay, 1e-12)?;
        let mut out = Vector::zeros(self.dim);
        for k in self.t..self.horizon {
            let coarse = average_blocks(controls.level(k), k - self.info_time(k));
            let off = self.offsets[k - self.t];
            out.rows_mut(off, coarse.len()).copy_from_slice(coarse.as_slice());
        }
        Ok(out)
    }

    pub fn unstack(&self, v: &Vector) -> Result<AdaptedProcess> {
        if v.len() != self.dim {
            return Err(DelqError::dims("stacked control", self.dim, v.len()));
        }
        let levels = (self.t..self.horizon)
            .map(|k| {
                let atoms = self.atoms(k);
                let off = self.offsets[k - self.t];
                let coarse = Matrix::from_column_slice(self.m, atoms, &v.as_slice()[off..off + self.m * atoms]);
                expand_blocks(&coarse, k - self.info_time(k))
            })
            .collect();
        AdaptedProcess::from_levels(self.t, self.m, levels)
    }

    /// Admissible controls with entries uniform in `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(&self, rng: &mut R, scale: f64) -> AdaptedProcess {
        let v = Vector::from_fn(self.dim, |_, _| rng.random_range(-scale..=scale));
        self.unstack(&v).expect("dimension matches by construction")
    }

    /// Project node-wise values onto the admissible space by conditioning
    /// on `F_{max(t,k-d)}`.
    pub fn project(&self, values: &AdaptedProcess) -> Result<AdaptedProcess> {
        let levels = (self.t..self.horizon)
            .map(|k| {
                let shift = k - self.info_time(k);
                expand_blocks(&average_blocks(values.level(k), shift), shift)
            })
            .collect();
        AdaptedProcess::from_levels(self.t, values.dim(), levels)
    }
}

fn check_tree(problem: &ProblemData, tree: &ScenarioTree) -> Result<()> {
    problem.check_start(tree.start())?;
    if tree.end() != problem.horizon {
        return Err(DelqError::InvalidInput(format!(
            "tree ends at {} but horizon is {}",
            tree.end(),
            problem.horizon
        )));
    }
    Ok(())
}

/// `E_k[V]` and `E_k[V w_k]` of a level-`k+1` matrix: child mean and signed
/// half difference.
fn child_moments(next: &Matrix) -> (Matrix, Matrix) {
    let parents = next.ncols() / 2;
    let mut mean = Matrix::zeros(next.nrows(), parents);
    let mut signed = Matrix::zeros(next.nrows(), parents);
    for i in 0..parents {
        let plus = next.column(2 * i);
        let minus = next.column(2 * i + 1);
        mean.set_column(i, &((plus + minus) * 0.5));
        signed.set_column(i, &((plus - minus) * 0.5));
    }
    (mean, signed)
}

/// `V_N = eta`, `V_k = A_k^T E_k[V_{k+1}] + C_k^T E_k[V_{k+1} w_k] + xi_k`.
pub fn solve_bsde(
    problem: &ProblemData,
    tree: &ScenarioTree,
    terminal: &Matrix,
    driver: Option<&AdaptedProcess>,
) -> Result<AdaptedProcess> {
    check_tree(problem, tree)?;
    let (t, big_n, n) = (tree.start(), tree.end(), problem.n);
    if terminal.shape() != (n, tree.atoms(big_n)) {
        return Err(DelqError::dims(
            "BSDE terminal value",
            format!("{n}x{}", tree.atoms(big_n)),
            format!("{}x{}", terminal.nrows(), terminal.ncols()),
        ));
    }
    if let Some(xi) = driver {
        if xi.start() != t || xi.last() + 1 != big_n || xi.dim() != n {
            return Err(DelqError::InvalidInput("BSDE driver must cover t..N-1 with dimension n".into()));
        }
    }
    let mut v = AdaptedProcess::zeros(t, big_n, n);
    *v.level_mut(big_n) = terminal.clone();
    for k in (t..big_n).rev() {
        let (mean, signed) = child_moments(v.level(k + 1));
        let mut vk = problem.a[k].transpose() * mean + problem.c[k].transpose() * signed;
        if let Some(xi) = driver {
            vk += xi.level(k);
        }
        *v.level_mut(k) = vk;
    }
    Ok(v)
}

/// Node-wise responses through explicit transition products
/// `Phi(k, l) = (A_{k-1} + C_{k-1} w_{k-1}) ... (A_l + C_l w_l)`:
/// `X_k = Phi(k, t) x + sum_{l<k} Phi(k, l+1) (B_l + D_l w_l) u_l`.
fn transition_response(
    problem: &ProblemData,
    tree: &ScenarioTree,
    x: Option<&Vector>,
    u: Option<&AdaptedProcess>,
) -> AdaptedProcess {
    let (t, big_n, n) = (tree.start(), tree.end(), problem.n);
    let mut out = AdaptedProcess::zeros(t, big_n, n);
    for k in t..=big_n {
        let level = out.level_mut(k);
        for node in 0..tree.atoms(k) {
            let mut phi = Matrix::identity(n, n);
            let mut acc = Vector::zeros(n);
            for l in (t..k).rev() {
                let w = tree.noise(k, node, l);
                if let Some(u) = u {
                    let ul = u.level(l).column(tree.ancestor(k, node, l));
                    acc += &phi * ((&problem.b[l] + &problem.d[l] * w) * ul);
                }
                phi *= &problem.a[l] + &problem.c[l] * w;
            }
            if let Some(x) = x {
                acc += &phi * x;
            }
            level.set_column(node, &acc);
        }
    }
    out
}

fn running_part(p: &AdaptedProcess, last: usize) -> AdaptedProcess {
    let levels = (p.start()..last).map(|k| p.level(k).clone()).collect();
    AdaptedProcess::from_levels(p.start(), p.dim(), levels).expect("levels copied from a valid process")
}

fn check_controls(problem: &ProblemData, tree: &ScenarioTree, u: &AdaptedProcess) -> Result<()> {
    if u.start() != tree.start() || u.last() + 1 != problem.horizon || u.dim() != problem.m {
        return Err(DelqError::InvalidInput("controls must cover t..N-1 with dimension m".into()));
    }
    check_delay_measurable(u, tree.start(), problem.delay, 1e-12)
}

/// `(Gamma x)_k = X^{x,0}_k` for `k` in `t..N-1`.
pub fn gamma(problem: &ProblemData, tree: &ScenarioTree, x: &Vector) -> Result<AdaptedProcess> {
    check_tree(problem, tree)?;
    problem.check_state(x)?;
    Ok(running_part(&transition_response(problem, tree, Some(x), None), tree.end()))
}

/// `Gamma-hat x = X^{x,0}_N`.
pub fn gamma_hat(problem: &ProblemData, tree: &ScenarioTree, x: &Vector) -> Result<Matrix> {
    check_tree(problem, tree)?;
    problem.check_state(x)?;
    Ok(transition_response(problem, tree, Some(x), None).level(tree.end()).clone())
}

/// `(L u)_k = X^{0,u}_k` for `k` in `t..N-1`.
pub fn l_op(problem: &ProblemData, tree: &ScenarioTree, u: &AdaptedProcess) -> Result<AdaptedProcess> {
    check_tree(problem, tree)?;
    check_controls(problem, tree, u)?;
    Ok(running_part(&transition_response(problem, tree, None, Some(u)), tree.end()))
}

/// `L-hat u = X^{0,u}_N`.
pub fn l_hat_op(problem: &ProblemData, tree: &ScenarioTree, u: &AdaptedProcess) -> Result<Matrix> {
    check_tree(problem, tree)?;
    check_controls(problem, tree, u)?;
    Ok(transition_response(problem, tree, None, Some(u)).level(tree.end()).clone())
}

/// `B_k^T E_{k-d}[V_{k+1}] + D_k^T E_{k-d}[V_{k+1} w_k]` on every node.
fn control_adjoint(problem: &ProblemData, tree: &ScenarioTree, v: &AdaptedProcess) -> Result<AdaptedProcess> {
    let layout = ControlLayout::new(problem, tree.start())?;
    let (t, big_n) = (tree.start(), tree.end());
    let levels = (t..big_n)
        .map(|k| {
            let (mean, signed) = child_moments(v.level(k + 1));
            problem.b[k].transpose() * mean + problem.d[k].transpose() * signed
        })
        .collect();
    layout.project(&AdaptedProcess::from_levels(t, problem.m, levels)?)
}

fn zero_terminal(problem: &ProblemData, tree: &ScenarioTree) -> Matrix {
    Matrix::zeros(problem.n, tree.atoms(tree.end()))
}

/// `Gamma^* xi = V0_t`, with `V0` the BSDE with driver `xi` and zero terminal.
pub fn gamma_adj(problem: &ProblemData, tree: &ScenarioTree, xi: &AdaptedProcess) -> Result<Vector> {
    let v = solve_bsde(problem, tree, &zero_terminal(problem, tree), Some(xi))?;
    Ok(v.at(tree.start(), 0))
}

/// `Gamma-hat^* eta = V00_t`, with `V00` the BSDE with terminal `eta` and no driver.
pub fn gamma_hat_adj(problem: &ProblemData, tree: &ScenarioTree, eta: &Matrix) -> Result<Vector> {
    let v = solve_bsde(problem, tree, eta, None)?;
    Ok(v.at(tree.start(), 0))
}

/// `(L^* xi)_k = B_k^T E_{k-d} V0_{k+1} + D_k^T E_{k-d}(V0_{k+1} w_k)`.
pub fn l_adj(problem: &ProblemData, tree: &ScenarioTree, xi: &AdaptedProcess) -> Result<AdaptedProcess> {
    let v = solve_bsde(problem, tree, &zero_terminal(problem, tree), Some(xi))?;
    control_adjoint(problem, tree, &v)
}

/// `(L-hat^* eta)_k` from `V00`.
pub fn l_hat_adj(problem: &ProblemData, tree: &ScenarioTree, eta: &Matrix) -> Result<AdaptedProcess> {
    let v = solve_bsde(problem, tree, eta, None)?;
    control_adjoint(problem, tree, &v)
}

/// `E[a^T b]` for terminal values.
pub fn terminal_inner(tree: &ScenarioTree, a: &Matrix, b: &Matrix) -> f64 {
    a.dot(b) * tree.probability(tree.end())
}

/// Relative residuals of the four adjoint identities for one input draw.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdjointResiduals {
    pub gamma: f64,
    pub gamma_hat: f64,
    pub l: f64,
    pub l_hat: f64,
}

impl AdjointResiduals {
    pub fn max(&self) -> f64 {
        self.gamma.max(self.gamma_hat).max(self.l).max(self.l_hat)
    }
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn adjoint_residuals(
    problem: &ProblemData,
    tree: &ScenarioTree,
    x: &Vector,
    u: &AdaptedProcess,
    xi: &AdaptedProcess,
    eta: &Matrix,
) -> Result<AdjointResiduals> {
    let gx = gamma(problem, tree, x)?;
    let lu = l_op(problem, tree, u)?;
    let ghx = gamma_hat(problem, tree, x)?;
    let lhu = l_hat_op(problem, tree, u)?;
    Ok(AdjointResiduals {
        gamma: rel_gap(gx.inner(xi)?, x.dot(&gamma_adj(problem, tree, xi)?)),
        gamma_hat: rel_gap(terminal_inner(tree, &ghx, eta), x.dot(&gamma_hat_adj(problem, tree, eta)?)),
        l: rel_gap(lu.inner(xi)?, u.inner(&l_adj(problem, tree, xi)?)?),
        l_hat: rel_gap(terminal_inner(tree, &lhu, eta), u.inner(&l_hat_adj(problem, tree, eta)?)?),
    })
}

/// `J(t, x; u) = u^T M u + 2 b^T u + c` over stacked admissible controls.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    pub layout: ControlLayout,
    pub m: Matrix,
    pub b: Vector,
    pub c: f64,
}

impl QuadraticForm {
    pub fn eval(&self, u: &Vector) -> f64 {
        u.dot(&(&self.m * u)) + 2.0 * self.b.dot(u) + self.c
    }
}

/// Flattened states of all levels, `n` entries per node.
fn flatten(states: &AdaptedProcess) -> Vector {
    let len: usize = (states.start()..=states.last()).map(|k| states.level(k).len()).sum();
    let mut out = Vector::zeros(len);
    let mut off = 0;
    for k in states.start()..=states.last() {
        let level = states.level(k);
        out.rows_mut(off, level.len()).copy_from_slice(level.as_slice());
        off += level.len();
    }
    out
}

/// Applies the probability-weighted `Q_k` (and `G` at `N`) to a flattened
/// state vector.
fn weigh(problem: &ProblemData, tree: &ScenarioTree, flat: &Vector) -> Vector {
    let n = problem.n;
    let mut out = Vector::zeros(flat.len());
    let mut off = 0;
    for k in tree.start()..=tree.end() {
        let weight = if k == tree.end() { &problem.g } else { &problem.q[k] };
        let p = tree.probability(k);
        let cols = tree.atoms(k);
        let level = Matrix::from_column_slice(n, cols, &flat.as_slice()[off..off + n * cols]);
        let weighted = weight * level * p;
        out.rows_mut(off, n * cols).copy_from_slice(weighted.as_slice());
        off += n * cols;
    }
    out
}

/// Assemble `M`, `b`, `c` from the zero-state responses of every basis
/// control, then confirm the form against direct simulation on 20 random
/// controls.
pub fn assemble_quadratic(problem: &ProblemData, t: usize, x: &Vector) -> Result<QuadraticForm> {
    assemble_quadratic_capped(problem, t, x, STACKED_DIM_CAP)
}

pub fn assemble_quadratic_capped(problem: &ProblemData, t: usize, x: &Vector, cap: usize) -> Result<QuadraticForm> {
    problem.validate().into_result()?;
    problem.check_state(x)?;
    let tree = ScenarioTree::for_problem(problem, t)?;
    let layout = ControlLayout::new(problem, t)?;
    let dim = layout.dim();
    if dim > cap {
        return Err(DelqError::Resource(format!(
            "stacked control dimension {dim} exceeds cap {cap}"
        )));
    }
    let zero_u = layout.unstack(&Vector::zeros(dim))?;
    let free = forward_simulate(problem, x, &Policy::OpenLoop(zero_u), &tree)?;
    let x0 = flatten(&free.states);
    if x0.len().saturating_mul(dim) > 1 << 27 {
        return Err(DelqError::Resource(format!(
            "response matrix of {} x {dim} entries is too large",
            x0.len()
        )));
    }

    let columns: Vec<Result<Vector>> = (0..dim)
        .into_par_iter()
        .map(|i| {
            let mut e = Vector::zeros(dim);
            e[i] = 1.0;
            let u = layout.unstack(&e)?;
            let traj = forward_simulate(problem, &Vector::zeros(problem.n), &Policy::OpenLoop(u), &tree)?;
            Ok(flatten(&traj.states))
        })
        .collect();
    let mut responses = Matrix::zeros(x0.len(), dim);
    for (i, col) in columns.into_iter().enumerate() {
        responses.set_column(i, &col?);
    }
    let weighted = Matrix::from_columns(
        &(0..dim)
            .map(|i| weigh(problem, &tree, &responses.column(i).into_owned()))
            .collect::<Vec<_>>(),
    );

    let mut m = responses.transpose() * &weighted;
    let weights = layout.weights();
    for k in t..problem.horizon {
        for atom in 0..layout.atoms(k) {
            let off = layout.offset(k, atom);
            let p = weights[off];
            let mut block = m.view_mut((off, off), (problem.m, problem.m));
            block += &problem.r[k] * p;
        }
    }
    let m = linalg::symmetrize(&m);
    let wx0 = weigh(problem, &tree, &x0);
    let b = weighted.transpose() * &x0;
    let c = x0.dot(&wx0);
    let form = QuadraticForm { layout, m, b, c };

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..20 {
        let v = Vector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        let direct = cost(problem, x, &Policy::OpenLoop(form.layout.unstack(&v)?), &tree)?;
        let via_form = form.eval(&v);
        let scale = direct.abs().max(via_form.abs()).max(1.0);
        if (direct - via_form).abs() > 1e-10 * scale {
            return Err(DelqError::Inconsistent(format!(
                "quadratic form disagrees with simulation: {via_form} vs {direct}"
            )));
        }
    }
    Ok(form)
}

/// `M u` computed without `M`: forward state, BSDE adjoint, then
/// `R u + E_{k-d}[B^T Z + D^T Z w]` weighted by atom probability.
pub fn theta_apply(problem: &ProblemData, t: usize, u: &Vector) -> Result<Vector> {
    let tree = ScenarioTree::for_problem(problem, t)?;
    let layout = ControlLayout::new(problem, t)?;
    let controls = layout.unstack(u)?;
    let traj = forward_simulate(problem, &Vector::zeros(problem.n), &Policy::OpenLoop(controls), &tree)?;
    let z = adjoint_state(problem, &tree, &traj)?;
    let grad = gradient(problem, &tree, &traj, &z)?;
    let stacked = layout.stack(&layout.project(&grad)?)?;
    Ok(stacked.component_mul(&layout.weights()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum OracleOutcome {
    Bounded { value: f64, minimizer: Vec<f64> },
    Unbounded { min_eig: f64, range_residual: f64 },
}

impl OracleOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            OracleOutcome::Bounded { value, .. } => Some(*value),
            OracleOutcome::Unbounded { .. } => None,
        }
    }
}

/// Infimum of the form: bounded iff `M >= 0` and `b` lies in `Ran(M)`.
pub fn oracle_minimize(q: &QuadraticForm, tol: &Tolerances) -> Result<OracleOutcome> {
    let dim = q.m.nrows();
    if dim == 0 {
        return Ok(OracleOutcome::Bounded {
            value: q.c,
            minimizer: vec![],
        });
    }
    let eig = linalg::sym_eig(&q.m)?;
    let min_eig = eig.min_eigenvalue();
    let m_pinv = pinv(&q.m, tol.pinv_rel)?;
    let range_residual = (&q.m * &m_pinv * &q.b - &q.b).amax();
    let psd = psd_margin(&q.m, tol.psd)? >= 0.0;
    if !psd || range_residual > tol.psd * q.b.amax().max(1.0) {
        return Ok(OracleOutcome::Unbounded { min_eig, range_residual });
    }
    let minimizer = -(&m_pinv * &q.b);
    let value = q.c - q.b.dot(&(&m_pinv * &q.b));
    Ok(OracleOutcome::Bounded {
        value,
        minimizer: minimizer.iter().cloned().collect(),
    })
}

/// `Z_N = G X_N`, `Z_k = A_k^T E_k Z_{k+1} + C_k^T E_k(Z_{k+1} w_k) + Q_k X_k`.
pub fn adjoint_state(problem: &ProblemData, tree: &ScenarioTree, traj: &Trajectory) -> Result<AdaptedProcess> {
    let big_n = tree.end();
    let terminal = &problem.g * traj.states.level(big_n);
    let driver = AdaptedProcess::from_levels(
        tree.start(),
        problem.n,
        (tree.start()..big_n).map(|k| &problem.q[k] * traj.states.level(k)).collect(),
    )?;
    solve_bsde(problem, tree, &terminal, Some(&driver))
}

/// `R_k u_k + E_k[B_k^T Z_{k+1} + D_k^T Z_{k+1} w_k]` on every node.
fn gradient(problem: &ProblemData, tree: &ScenarioTree, traj: &Trajectory, z: &AdaptedProcess) -> Result<AdaptedProcess> {
    let levels = (tree.start()..tree.end())
        .map(|k| {
            let (mean, signed) = child_moments(z.level(k + 1));
            &problem.r[k] * traj.controls.level(k) + problem.b[k].transpose() * mean + problem.d[k].transpose() * signed
        })
        .collect();
    AdaptedProcess::from_levels(tree.start(), problem.m, levels)
}

/// Max Euclidean norm over `k` and atoms of `F_{max(t,k-d)}` of
/// `R_k u_k + B_k^T E_{k-d} Z_{k+1} + D_k^T E_{k-d}(Z_{k+1} w_k)`.
pub fn stationary_residual(problem: &ProblemData, x: &Vector, policy: &Policy, tree: &ScenarioTree) -> Result<f64> {
    let traj = forward_simulate(problem, x, policy, tree)?;
    let z = adjoint_state(problem, tree, &traj)?;
    let grad = gradient(problem, tree, &traj, &z)?;
    let t = tree.start();
    let mut worst = 0.0_f64;
    for k in t..tree.end() {
        let j = info_time(t, k, problem.delay);
        let g = grad.cond_expect(k, j)?;
        for col in g.column_iter() {
            worst = worst.max(col.norm());
        }
    }
    Ok(worst)
}

/// Max Euclidean norm of `Z_k - sum_i P(i)_k E_{max(t,k-i)} X_k` along the
/// trajectory of the gain policy of `sol`.
pub fn decoupling_residual(problem: &ProblemData, x: &Vector, sol: &RiccatiSolution, tree: &ScenarioTree) -> Result<f64> {
    let t = tree.start();
    if sol.t() != t {
        return Err(DelqError::InvalidInput("solution and tree start at different times".into()));
    }
    let traj = forward_simulate(problem, x, &Policy::Feedback { gains: sol.k.clone() }, tree)?;
    let z = adjoint_state(problem, tree, &traj)?;
    let mut worst = 0.0_f64;
    for k in t..=tree.end() {
        let mut rebuilt = Matrix::zeros(problem.n, tree.atoms(k));
        for i in 0..sol.family().count(k) {
            let j = k.saturating_sub(i).max(t);
            let means = expand_blocks(&traj.states.cond_expect(k, j)?, k - j);
            rebuilt += sol.p(i, k)? * means;
        }
        let diff = z.level(k) - rebuilt;
        for col in diff.column_iter() {
            worst = worst.max(col.norm());
        }
    }
    Ok(worst)
}

/// `J(u + lambda v) - J(u)` against
/// `lambda^2 J(t, 0; v) + 2 lambda sum_k E[(R u + B^T Z + D^T Z w)^T v]`.
pub fn variation_identity(
    problem: &ProblemData,
    x: &Vector,
    u: &AdaptedProcess,
    v: &AdaptedProcess,
    lambda: f64,
    tree: &ScenarioTree,
) -> Result<IdentityCheck> {
    let shifted = u.axpy(lambda, v)?;
    let ju = cost(problem, x, &Policy::OpenLoop(u.clone()), tree)?;
    let jshift = cost(problem, x, &Policy::OpenLoop(shifted), tree)?;
    let j0v = cost(problem, &Vector::zeros(problem.n), &Policy::OpenLoop(v.clone()), tree)?;
    let traj = forward_simulate(problem, x, &Policy::OpenLoop(u.clone()), tree)?;
    let z = adjoint_state(problem, tree, &traj)?;
    let grad = gradient(problem, tree, &traj, &z)?;
    let lhs = jshift - ju;
    let rhs = lambda * lambda * j0v + 2.0 * lambda * grad.inner(v)?;
    Ok(IdentityCheck {
        lhs,
        rhs,
        residual: (lhs - rhs).abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedPairStatus {
    /// No sampled control violated the range condition. Not a proof.
    NotFalsified,
    Falsified,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixedPairReport {
    /// `Ran(H_k) ⊂ Ran(W_k)` for every `k`, which implies the trajectory
    /// condition for all controls.
    pub sufficient_range_condition: bool,
    pub samples: usize,
    /// Largest `||(I - W W^†) H_k E_{k-d} X_k||` seen.
    pub worst_residual: f64,
    pub status: FixedPairStatus,
}

/// Range condition `H_k E_{k-d} X_k ∈ Ran(W_k)` along trajectories of the
/// gain policy and of `samples` random admissible controls.
pub fn fixed_pair_check(
    problem: &ProblemData,
    x: &Vector,
    sol: &RiccatiSolution,
    tree: &ScenarioTree,
    samples: usize,
    seed: u64,
    tol: &Tolerances,
) -> Result<FixedPairReport> {
    let t = tree.start();
    let layout = ControlLayout::new(problem, t)?;
    let mut projectors = Vec::new();
    let mut sufficient = true;
    for k in t..problem.horizon {
        let w = sol.w_at(k)?;
        let h = sol.h_at(k)?;
        let proj = Matrix::identity(problem.m, problem.m) - w * pinv(w, tol.pinv_rel)?;
        sufficient &= max_abs(&(&proj * h)) <= tol.psd * max_abs(h).max(1.0);
        projectors.push(proj * h);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    let mut falsified = false;
    let policies = std::iter::once(Policy::Feedback { gains: sol.k.clone() })
        .chain((0..samples).map(|_| Policy::OpenLoop(layout.random(&mut rng, 1.0))))
        .collect::<Vec<_>>();
    for policy in &policies {
        let traj = forward_simulate(problem, x, policy, tree)?;
        for k in t..problem.horizon {
            let j = info_time(t, k, problem.delay);
            let means = traj.states.cond_expect(k, j)?;
            let scale = max_abs(&means).max(1.0) * max_abs(sol.h_at(k)?).max(1.0);
            let res = &projectors[k - t] * means;
            let r = max_abs(&res);
            worst = worst.max(r);
            falsified |= r > tol.psd * scale;
        }
    }
    Ok(FixedPairReport {
        sufficient_range_condition: sufficient,
        samples: policies.len(),
        worst_residual: worst,
        status: if falsified {
            FixedPairStatus::Falsified
        } else {
            FixedPairStatus::NotFalsified
        },
    })
}

/// Convenience wrapper: oracle value of `J(t, x; .)`.
pub fn oracle_value(problem: &ProblemData, t: usize, x: &Vector, tol: &Tolerances) -> Result<OracleOutcome> {
    let form = assemble_quadratic(problem, t, x)?;
    oracle_minimize(&form, tol)
}

pub fn is_form_convex(q: &QuadraticForm, tol: &Tolerances) -> Result<bool> {
    is_psd(&q.m, tol.psd)
}
