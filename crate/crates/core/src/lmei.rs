//! Membership in the coupled linear matrix equality-inequality system and the
//! construction of a constrained Riccati solution from any member.
//!
//! With `top = min(k - t, d)` and the step terms `base_i`, `W_k`, `H_k` of
//! [`crate::riccati`] evaluated on a candidate `P`, the system reads
//!
//! ```text
//! base_0 - P0_k >= 0                                    top >= 1
//! base_i = Pi_k                                         1 <= i < top
//! [[base_top - Ptop_k, H_k^T], [H_k, W_k]] >= 0         top >= 1
//! [[base_0 - P0_t, H_t^T], [H_t, W_t]] >= 0             k = t
//! G - P0_N >= 0,  Pj_N = 0
//! ```
//!
//! The set is convex. Every constrained Riccati solution belongs to it, and
//! so does the zero family whenever `Q, R, G >= 0`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{DelqError, Result};
use crate::linalg::{self, is_psd, max_abs, pinv, schur_block_check, sym_eig, symmetrize, Matrix, SchurCheck, Tolerances, Vector};
use crate::model::{expand_blocks, forward_simulate, info_time, Policy, ProblemData, ScenarioTree, Trajectory};
use crate::riccati::{check_problem, classify, step_terms, PFamily, RecursionForm, RiccatiSolution};
use crate::simulate::trajectory_cost;

/// A family `P(i)_k` on the piecewise index ranges, offered as a member of the
/// system.
#[derive(Debug, Clone, PartialEq)]
pub struct LmeiCandidate {
    family: PFamily,
}

impl LmeiCandidate {
    /// Wraps `family`; a unified family is folded onto the piecewise ranges
    /// by summing the indices at and above `k - t`.
    pub fn new(family: PFamily) -> Self {
        let family = match family.form() {
            RecursionForm::Piecewise => family,
            RecursionForm::Unified => to_piecewise(&family),
        };
        LmeiCandidate { family }
    }

    pub fn zeros(problem: &ProblemData, t: usize) -> Result<Self> {
        check_problem(problem, t)?;
        Ok(LmeiCandidate {
            family: PFamily::zeros(t, problem.horizon, problem.delay, problem.n, RecursionForm::Piecewise),
        })
    }

    pub fn family(&self) -> &PFamily {
        &self.family
    }

    pub fn t(&self) -> usize {
        self.family.t()
    }

    pub fn horizon(&self) -> usize {
        self.family.horizon()
    }

    pub fn delay(&self) -> usize {
        self.family.delay()
    }

    pub fn n(&self) -> usize {
        self.family.n()
    }

    pub fn get(&self, i: usize, k: usize) -> Result<&Matrix> {
        self.family.get(i, k)
    }

    pub fn get_mut(&mut self, i: usize, k: usize) -> Result<&mut Matrix> {
        self.family.get_mut(i, k)
    }

    /// `xi^T (sum_{i <= min(k-t,d)} P(i)_k) xi`.
    pub fn lower_bound(&self, k: usize, xi: &Vector) -> Result<f64> {
        if xi.len() != self.n() {
            return Err(DelqError::dims("lower_bound", self.n(), xi.len()));
        }
        let m = self.family.sum_at(k)?;
        Ok(xi.dot(&(m * xi)))
    }

    /// Convex combination `s * self + (1 - s) * other`.
    pub fn mix(&self, other: &LmeiCandidate, s: f64) -> Result<LmeiCandidate> {
        self.check_shape(other.t(), other.horizon(), other.delay(), other.n())?;
        let family = PFamily::from_fn(
            self.t(),
            self.horizon(),
            self.delay(),
            self.n(),
            RecursionForm::Piecewise,
            |i, k| self.family.get_or_zero(i, k) * s + other.family.get_or_zero(i, k) * (1.0 - s),
        );
        Ok(LmeiCandidate { family })
    }

    fn check_shape(&self, t: usize, horizon: usize, delay: usize, n: usize) -> Result<()> {
        let want = (t, horizon, delay, n);
        let got = (self.t(), self.horizon(), self.delay(), self.n());
        if want != got {
            return Err(DelqError::dims(
                "LMEI candidate (t, N, d, n)",
                format!("{want:?}"),
                format!("{got:?}"),
            ));
        }
        Ok(())
    }

    /// Same layout as the `P` map of a solution file.
    pub fn to_json(&self) -> Result<String> {
        let record = CandidateRecord {
            t: self.t(),
            d: self.delay(),
            horizon: self.horizon(),
            n: self.n(),
            form: None,
            p: self.family.to_record(),
        };
        Ok(serde_json::to_string_pretty(&record)?)
    }

    /// Reads a candidate file, or the `P` map of a solution file.
    pub fn from_json(text: &str) -> Result<Self> {
        let rec: CandidateRecord = serde_json::from_str(text)?;
        let form = rec.form.unwrap_or(RecursionForm::Piecewise);
        let family = PFamily::from_record(rec.t, rec.horizon, rec.d, rec.n, form, &rec.p)?;
        for (i, k, m) in family.iter() {
            linalg::check_symmetric(m, &format!("candidate P[{i},{k}]"))?;
        }
        Ok(LmeiCandidate::new(family))
    }
}

#[derive(Serialize, Deserialize)]
struct CandidateRecord {
    t: usize,
    d: usize,
    #[serde(rename = "N")]
    horizon: usize,
    n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    form: Option<RecursionForm>,
    #[serde(rename = "P")]
    p: BTreeMap<String, Vec<Vec<f64>>>,
}

fn to_piecewise(bar: &PFamily) -> PFamily {
    let (t, big_n, d) = (bar.t(), bar.horizon(), bar.delay());
    PFamily::from_fn(t, big_n, d, bar.n(), RecursionForm::Piecewise, |i, k| {
        let top = (k - t).min(d);
        if k == big_n || i < top {
            bar.get_or_zero(i, k)
        } else {
            (i..=d).fold(Matrix::zeros(bar.n(), bar.n()), |acc, j| acc + bar.get_or_zero(j, k))
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// `base_0 - P0_k >= 0`.
    Inequality,
    /// `base_i = Pi_k`, or `Pj_N = 0` at the horizon.
    Equality,
    /// Two-by-two block semidefinite constraint.
    Block,
    /// `G - P0_N >= 0`.
    Terminal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmeiConstraint {
    pub kind: ConstraintKind,
    pub k: usize,
    /// Index `i` of the `P(i)_k` line the constraint belongs to.
    pub index: usize,
    /// Relative residual for equalities; relative minimum eigenvalue
    /// `lambda_min / max(1, ||.||_2)` for the semidefinite constraints.
    pub value: f64,
    pub satisfied: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schur: Option<SchurCheck>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmeiReport {
    pub t: usize,
    pub tol: f64,
    pub constraints: Vec<LmeiConstraint>,
    pub feasible: bool,
}

impl LmeiReport {
    /// Smallest relative eigenvalue margin over the semidefinite constraints.
    pub fn min_margin(&self) -> f64 {
        self.constraints
            .iter()
            .filter(|c| c.kind != ConstraintKind::Equality)
            .map(|c| c.value)
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest relative equality residual.
    pub fn max_residual(&self) -> f64 {
        self.constraints
            .iter()
            .filter(|c| c.kind == ConstraintKind::Equality)
            .map(|c| c.value)
            .fold(0.0, f64::max)
    }

    pub fn violations(&self) -> impl Iterator<Item = &LmeiConstraint> {
        self.constraints.iter().filter(|c| !c.satisfied)
    }
}

impl fmt::Display for LmeiReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<11} {:>4} {:>3} {:>14}  ok", "constraint", "k", "i", "value")?;
        for c in &self.constraints {
            let kind = match c.kind {
                ConstraintKind::Inequality => "inequality",
                ConstraintKind::Equality => "equality",
                ConstraintKind::Block => "block",
                ConstraintKind::Terminal => "terminal",
            };
            writeln!(
                f,
                "{:<11} {:>4} {:>3} {:>14.6e}  {}",
                kind,
                c.k,
                c.index,
                c.value,
                if c.satisfied { "yes" } else { "NO" }
            )?;
        }
        write!(
            f,
            "feasible: {} (min margin {:.3e}, max residual {:.3e}, tol {:.1e})",
            self.feasible,
            self.min_margin(),
            self.max_residual(),
            self.tol
        )
    }
}

fn relative_min_eig(s: &Matrix) -> Result<f64> {
    if s.nrows() == 0 {
        return Ok(0.0);
    }
    let eig = sym_eig(&symmetrize(s))?;
    Ok(eig.min_eigenvalue() / eig.spectral_norm().max(1.0))
}

fn relative_gap(a: &Matrix, b: &Matrix) -> f64 {
    max_abs(&(a - b)) / max_abs(a).max(max_abs(b)).max(1.0)
}

/// Evaluates every line of the system on `cand` for the problem started at
/// `t`.
pub fn check_membership(cand: &LmeiCandidate, problem: &ProblemData, t: usize, tol: &Tolerances) -> Result<LmeiReport> {
    check_problem(problem, t)?;
    let (big_n, d) = (problem.horizon, problem.delay);
    cand.check_shape(t, big_n, d, problem.n)?;
    let fam = cand.family();
    for (i, k, m) in fam.iter() {
        linalg::check_symmetric(m, &format!("candidate P[{i},{k}]"))?;
    }
    let eps = tol.feasibility;
    let mut constraints = Vec::new();
    let mut psd_line = |kind, k, index, value: f64, schur| {
        constraints.push(LmeiConstraint {
            kind,
            k,
            index,
            value,
            satisfied: value >= -eps,
            schur,
        });
    };
    let mut equalities = Vec::new();

    for k in t..big_n {
        let top = (k - t).min(d);
        let lim = (k + 1 - t).min(d);
        let terms = step_terms(problem, fam, k, top, lim, &problem.q[k]);
        if top >= 1 {
            psd_line(ConstraintKind::Inequality, k, 0, relative_min_eig(&(&terms.base[0] - fam.get(0, k)?))?, None);
            for i in 1..top {
                equalities.push((k, i, relative_gap(&terms.base[i], fam.get(i, k)?)));
            }
        }
        let s = &terms.base[top] - fam.get(top, k)?;
        let schur = schur_block_check(&s, &terms.h, &terms.w, eps)?;
        psd_line(ConstraintKind::Block, k, top, schur.block_min_eig / schur.scale, Some(schur));
    }
    psd_line(ConstraintKind::Terminal, big_n, 0, relative_min_eig(&(&problem.g - fam.get(0, big_n)?))?, None);
    for j in 1..=d {
        equalities.push((big_n, j, relative_gap(fam.get(j, big_n)?, &Matrix::zeros(problem.n, problem.n))));
    }
    for (k, index, value) in equalities {
        constraints.push(LmeiConstraint {
            kind: ConstraintKind::Equality,
            k,
            index,
            value,
            satisfied: value <= eps,
            schur: None,
        });
    }
    constraints.sort_by_key(|c| (c.k, c.index, c.kind != ConstraintKind::Inequality));
    let feasible = constraints.iter().all(|c| c.satisfied);
    Ok(LmeiReport {
        t,
        tol: eps,
        constraints,
        feasible,
    })
}

/// Weights of the auxiliary problem built from a candidate.
struct Auxiliary {
    problem: ProblemData,
    /// `H~_k`, indexed by `k - t`.
    h: Vec<Matrix>,
    /// `base_top - Ptop_k` on the candidate, zero where `top = 0`.
    offset: Vec<Matrix>,
}

fn auxiliary(cand: &LmeiCandidate, problem: &ProblemData) -> Result<Auxiliary> {
    let (t, big_n, d, n) = (cand.t(), problem.horizon, problem.delay, problem.n);
    let fam = cand.family();
    let mut aux = problem.clone();
    let mut h = Vec::with_capacity(big_n - t);
    let mut offset = Vec::with_capacity(big_n - t);
    for k in t..big_n {
        let top = (k - t).min(d);
        let lim = (k + 1 - t).min(d);
        let terms = step_terms(problem, fam, k, top, lim, &problem.q[k]);
        aux.q[k] = symmetrize(&(&terms.base[0] - fam.get(0, k)?));
        aux.r[k] = terms.w;
        h.push(terms.h);
        offset.push(if top >= 1 {
            symmetrize(&(&terms.base[top] - fam.get(top, k)?))
        } else {
            Matrix::zeros(n, n)
        });
    }
    aux.g = symmetrize(&(&problem.g - fam.get(0, big_n)?));
    Ok(Auxiliary { problem: aux, h, offset })
}

/// Builds `P = P~ + U` from a member `P~`, where `U` solves the Riccati
/// recursion of the auxiliary problem with weights
/// `Q~ = base_0 - P~0`, `R~ = W~`, cross term `H~`, `G~ = G - P~0_N`.
///
/// The returned solution carries `W = R~ + ...` and `H = H~ + ...` of the
/// auxiliary recursion, which coincide with the constrained Riccati terms
/// of `P`.
pub fn construct_from_candidate(
    cand: &LmeiCandidate,
    problem: &ProblemData,
    t: usize,
    tol: &Tolerances,
) -> Result<RiccatiSolution> {
    let report = check_membership(cand, problem, t, tol)?;
    if let Some(bad) = report.violations().next() {
        return Err(DelqError::Infeasible(format!(
            "candidate violates the {:?} constraint at k = {}, i = {} (value {:.3e}, tol {:.1e})",
            bad.kind, bad.k, bad.index, bad.value, report.tol
        )));
    }
    let aux = auxiliary(cand, problem)?;
    let (big_n, d, n, m) = (problem.horizon, problem.delay, problem.n, problem.m);
    let mut u = PFamily::zeros(t, big_n, d, n, RecursionForm::Piecewise);
    *u.get_mut(0, big_n)? = aux.problem.g.clone();
    let steps = big_n - t;
    let mut ws = Vec::with_capacity(steps);
    let mut hs = Vec::with_capacity(steps);
    let mut ks = Vec::with_capacity(steps);

    for k in (t..big_n).rev() {
        let top = (k - t).min(d);
        let lim = (k + 1 - t).min(d);
        let terms = step_terms(&aux.problem, &u, k, top, lim, &aux.problem.q[k]);
        let w = terms.w;
        let h = terms.h + &aux.h[k - t];
        let w_pinv = pinv(&w, tol.pinv_rel)?;
        let correction = symmetrize(&(h.transpose() * &w_pinv * &h));
        for (i, base) in terms.base.into_iter().enumerate() {
            let value = if i == top {
                symmetrize(&(base + &aux.offset[k - t] - &correction))
            } else {
                base
            };
            linalg::ensure_finite(&value, "auxiliary recursion")?;
            *u.get_mut(i, k)? = value;
        }
        ks.push(-(&w_pinv * &h));
        ws.push(w);
        hs.push(h);
    }
    ws.reverse();
    hs.reverse();
    ks.reverse();

    for (idx, (w, h)) in ws.iter().zip(&hs).enumerate() {
        let residual = linalg::range_residual(h, w, tol.pinv_rel)?;
        let w_min = if m == 0 { 0.0 } else { linalg::min_eigenvalue(w)? };
        if !is_psd(w, tol.psd)? || residual > tol.psd * max_abs(h).max(1.0) {
            return Err(DelqError::Inconsistent(format!(
                "constructed solution breaks the constraints at k = {}: lambda_min(W) = {w_min:.3e}, \
                 range residual = {residual:.3e}",
                t + idx
            )));
        }
    }

    let fam = cand.family();
    let p = PFamily::from_fn(t, big_n, d, n, RecursionForm::Piecewise, |i, k| {
        fam.get_or_zero(i, k) + u.get_or_zero(i, k)
    });
    Ok(RiccatiSolution::from_parts(p, ws, hs, ks, m, tol.pinv_rel))
}

/// The solution itself as a member of the system, with its membership
/// report. Needs a classification of at least `SolvableAllPairs`.
pub fn certificate_from_riccati(
    problem: &ProblemData,
    sol: &RiccatiSolution,
    tol: &Tolerances,
) -> Result<(LmeiCandidate, LmeiReport)> {
    let class = classify(sol, tol)?.classification;
    if !class.is_solvable() {
        return Err(DelqError::Unsolvable(format!(
            "classification {class} is weaker than SolvableAllPairs"
        )));
    }
    let cand = LmeiCandidate::new(sol.family().clone());
    let report = check_membership(&cand, problem, sol.t(), tol)?;
    if !report.feasible {
        let bad = report.violations().next().expect("infeasible report has a violation");
        return Err(DelqError::Inconsistent(format!(
            "solution fails its own membership test at k = {}, i = {} ({:?}, value {:.3e})",
            bad.k, bad.index, bad.kind, bad.value
        )));
    }
    Ok((cand, report))
}

fn check_start_time(cand: &LmeiCandidate, problem: &ProblemData, tree: &ScenarioTree) -> Result<()> {
    check_problem(problem, cand.t())?;
    cand.check_shape(cand.t(), problem.horizon, problem.delay, problem.n)?;
    if tree.start() < cand.t() || tree.start() >= problem.horizon || tree.end() != problem.horizon {
        return Err(DelqError::InvalidInput(format!(
            "tree {}..{} does not fit the candidate range {}..{}",
            tree.start(),
            tree.end(),
            cand.t(),
            problem.horizon
        )));
    }
    Ok(())
}

fn auxiliary_cost_of(cand: &LmeiCandidate, problem: &ProblemData, traj: &Trajectory, tree: &ScenarioTree) -> Result<f64> {
    let aux = auxiliary(cand, problem)?;
    let (t, d) = (cand.t(), problem.delay);
    let s = tree.start();
    let mut total = trajectory_cost(&aux.problem, traj, tree);
    for k in s..problem.horizon {
        let x = traj.states.level(k);
        let u = traj.controls.level(k);
        let hx = &aux.h[k - t] * x;
        let mut node_sum = 2.0 * hx.dot(u);
        if (k - t).min(d) >= 1 {
            let j = info_time(s, k, d);
            let ex = expand_blocks(&traj.states.cond_expect(k, j)?, k - j);
            node_sum += ex.dot(&(&aux.offset[k - t] * &ex));
        }
        total += tree.probability(k) * node_sum;
    }
    Ok(total)
}

/// Auxiliary cost of `policy` from `(tree.start(), x)`, evaluated exactly on
/// the tree. Non-negative for every member of the system.
pub fn auxiliary_cost(
    cand: &LmeiCandidate,
    problem: &ProblemData,
    x: &Vector,
    policy: &Policy,
    tree: &ScenarioTree,
) -> Result<f64> {
    check_start_time(cand, problem, tree)?;
    let traj = forward_simulate(problem, x, policy, tree)?;
    auxiliary_cost_of(cand, problem, &traj, tree)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LowerBoundCheck {
    /// `J(k, x; u)`.
    pub cost: f64,
    /// `x^T (sum_{i <= min(k-t,d)} P~(i)_k) x`.
    pub bound: f64,
    /// Auxiliary cost of the same control.
    pub auxiliary: f64,
}

impl LowerBoundCheck {
    /// `cost - bound`; non-negative for members.
    pub fn gap(&self) -> f64 {
        self.cost - self.bound
    }

    /// `|cost - bound - auxiliary|`, which vanishes whenever the equality
    /// lines hold.
    pub fn identity_residual(&self) -> f64 {
        (self.gap() - self.auxiliary).abs()
    }

    pub fn scale(&self) -> f64 {
        self.cost.abs().max(self.bound.abs()).max(self.auxiliary.abs()).max(1.0)
    }
}

pub fn lower_bound_check(
    cand: &LmeiCandidate,
    problem: &ProblemData,
    x: &Vector,
    policy: &Policy,
    tree: &ScenarioTree,
) -> Result<LowerBoundCheck> {
    check_start_time(cand, problem, tree)?;
    let traj = forward_simulate(problem, x, policy, tree)?;
    Ok(LowerBoundCheck {
        cost: trajectory_cost(problem, &traj, tree),
        bound: cand.lower_bound(tree.start(), x)?,
        auxiliary: auxiliary_cost_of(cand, problem, &traj, tree)?,
    })
}
