//! Backward solution of the coupled Riccati-like recursions.
//!
//! With `top(k) = min(k - t, d)` and `lim(k) = min(k + 1 - t, d)` the
//! piecewise recursion reads
//!
//! ```text
//! base_0 = Q_k + A_k^T (P0_{k+1} + P1_{k+1}) A_k + C_k^T P0_{k+1} C_k
//! base_i = A_k^T P(i+1)_{k+1} A_k                       (P(d+1) = 0)
//! W_k    = R_k + sum_{i <= lim} B_k^T Pi_{k+1} B_k + D_k^T P0_{k+1} D_k
//! H_k    = sum_{i <= lim} B_k^T Pi_{k+1} A_k + D_k^T P0_{k+1} C_k
//! Pi_k   = base_i                  for i < top
//! Ptop_k = base_top - H_k^T W_k^† H_k
//! ```
//!
//! with `P0_N = G` and `Pj_N = 0`. When `d = 0` the `P1` term is absent and
//! the recursion is the delay-free Riccati equation. The unified (bar) form
//! uses `top = lim = d` at every step.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{DelqError, Result};
use crate::linalg::{
    self, is_pd, is_psd, max_abs, min_eigenvalue, pinv, symmetrize, Matrix, Tolerances, Vector,
};
use crate::model::ProblemData;

/// Which recursion produced a [`PFamily`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecursionForm {
    Piecewise,
    Unified,
}

impl RecursionForm {
    /// Highest index defined at `k < N`.
    pub fn top(self, t: usize, d: usize, k: usize) -> usize {
        match self {
            RecursionForm::Piecewise => (k - t).min(d),
            RecursionForm::Unified => d,
        }
    }

    /// Upper summation limit of `W_k`, `H_k`.
    pub fn lim(self, t: usize, d: usize, k: usize) -> usize {
        match self {
            RecursionForm::Piecewise => (k + 1 - t).min(d),
            RecursionForm::Unified => d,
        }
    }
}

/// Matrices `P(i)_k` for `k` in `t..=N` on their defined index ranges only.
#[derive(Debug, Clone, PartialEq)]
pub struct PFamily {
    t: usize,
    horizon: usize,
    delay: usize,
    n: usize,
    form: RecursionForm,
    p: Vec<Vec<Matrix>>,
}

impl PFamily {
    /// All defined entries set to zero.
    pub fn zeros(t: usize, horizon: usize, delay: usize, n: usize, form: RecursionForm) -> Self {
        Self::from_fn(t, horizon, delay, n, form, |_, _| Matrix::zeros(n, n))
    }

    pub fn from_fn(
        t: usize,
        horizon: usize,
        delay: usize,
        n: usize,
        form: RecursionForm,
        mut f: impl FnMut(usize, usize) -> Matrix,
    ) -> Self {
        let p = (t..=horizon)
            .map(|k| {
                let count = Self::count_for(form, t, horizon, delay, k);
                (0..count).map(|i| f(i, k)).collect()
            })
            .collect();
        PFamily {
            t,
            horizon,
            delay,
            n,
            form,
            p,
        }
    }

    fn count_for(form: RecursionForm, t: usize, horizon: usize, delay: usize, k: usize) -> usize {
        if k == horizon {
            delay + 1
        } else {
            form.top(t, delay, k) + 1
        }
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn delay(&self) -> usize {
        self.delay
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn form(&self) -> RecursionForm {
        self.form
    }

    /// Number of defined indices at time `k`.
    pub fn count(&self, k: usize) -> usize {
        Self::count_for(self.form, self.t, self.horizon, self.delay, k)
    }

    pub fn is_defined(&self, i: usize, k: usize) -> bool {
        k >= self.t && k <= self.horizon && i < self.count(k)
    }

    pub fn get(&self, i: usize, k: usize) -> Result<&Matrix> {
        if !self.is_defined(i, k) {
            return Err(DelqError::Undefined { i, k });
        }
        Ok(&self.p[k - self.t][i])
    }

    pub fn get_mut(&mut self, i: usize, k: usize) -> Result<&mut Matrix> {
        if !self.is_defined(i, k) {
            return Err(DelqError::Undefined { i, k });
        }
        Ok(&mut self.p[k - self.t][i])
    }

    /// `P(i)_k` or zero beyond the stored range; used where the recursion
    /// reads `P(d+1) = 0`.
    pub(crate) fn get_or_zero(&self, i: usize, k: usize) -> Matrix {
        match self.get(i, k) {
            Ok(m) => m.clone(),
            Err(_) => Matrix::zeros(self.n, self.n),
        }
    }

    /// `sum_i P(i)_k` over the defined indices.
    pub fn sum_at(&self, k: usize) -> Result<Matrix> {
        if k < self.t || k > self.horizon {
            return Err(DelqError::InvalidInput(format!(
                "time {k} outside {}..={}",
                self.t, self.horizon
            )));
        }
        Ok(self.p[k - self.t]
            .iter()
            .fold(Matrix::zeros(self.n, self.n), |acc, m| acc + m))
    }

    /// `(i, k, P(i)_k)` in time-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &Matrix)> {
        self.p
            .iter()
            .enumerate()
            .flat_map(move |(l, row)| row.iter().enumerate().map(move |(i, m)| (i, self.t + l, m)))
    }

    /// Max-entry distance to `other` on shared defined entries, divided by
    /// `max(1, largest entry)`.
    pub fn relative_distance(&self, other: &PFamily) -> Result<f64> {
        if self.t != other.t || self.horizon != other.horizon || self.delay != other.delay || self.n != other.n {
            return Err(DelqError::InvalidInput("P families have different shapes".into()));
        }
        let mut worst = 0.0_f64;
        let mut scale = 1.0_f64;
        for (i, k, m) in self.iter() {
            let o = other.get(i, k)?;
            worst = worst.max(max_abs(&(m - o)));
            scale = scale.max(max_abs(m)).max(max_abs(o));
        }
        Ok(worst / scale)
    }

    pub(crate) fn to_record(&self) -> BTreeMap<String, Vec<Vec<f64>>> {
        self.iter()
            .map(|(i, k, m)| (format!("{i},{k}"), linalg::to_rows(m)))
            .collect()
    }

    pub(crate) fn from_record(
        t: usize,
        horizon: usize,
        delay: usize,
        n: usize,
        form: RecursionForm,
        map: &BTreeMap<String, Vec<Vec<f64>>>,
    ) -> Result<Self> {
        if t >= horizon {
            return Err(DelqError::InvalidInput(format!("t = {t} must be below N = {horizon}")));
        }
        let mut seen = 0;
        let mut err = None;
        let family = Self::from_fn(t, horizon, delay, n, form, |i, k| {
            let key = format!("{i},{k}");
            match map.get(&key).map(|rows| linalg::from_rows(rows)) {
                Some(Ok(m)) if m.shape() == (n, n) => {
                    seen += 1;
                    m
                }
                Some(Ok(m)) => {
                    err.get_or_insert(DelqError::dims(&format!("P[{key}]"), format!("{n}x{n}"), format!("{}x{}", m.nrows(), m.ncols())));
                    Matrix::zeros(n, n)
                }
                Some(Err(e)) => {
                    err.get_or_insert(e);
                    Matrix::zeros(n, n)
                }
                None => {
                    err.get_or_insert(DelqError::InvalidInput(format!("missing P entry \"{key}\"")));
                    Matrix::zeros(n, n)
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != map.len() {
            let extra = map
                .keys()
                .find(|key| {
                    let mut parts = key.split(',').map(|s| s.trim().parse::<usize>());
                    match (parts.next(), parts.next(), parts.next()) {
                        (Some(Ok(i)), Some(Ok(k)), None) => !family.is_defined(i, k),
                        _ => true,
                    }
                })
                .cloned()
                .unwrap_or_default();
            return Err(DelqError::InvalidInput(format!(
                "P entry \"{extra}\" is outside the defined index range"
            )));
        }
        for (_, _, m) in family.iter() {
            linalg::ensure_finite(m, "P entry")?;
        }
        Ok(family)
    }
}

/// Step terms shared by the Riccati and LMEI code paths.
pub(crate) struct StepTerms {
    pub base: Vec<Matrix>,
    pub w: Matrix,
    pub h: Matrix,
}

/// `base_i` for `i <= top`, plus `W_k`, `H_k` from the family values at
/// `k + 1`.
pub(crate) fn step_terms(
    problem: &ProblemData,
    fam: &PFamily,
    k: usize,
    top: usize,
    lim: usize,
    q: &Matrix,
) -> StepTerms {
    let (a, b, c, dd) = (&problem.a[k], &problem.b[k], &problem.c[k], &problem.d[k]);
    let d = fam.delay();
    let at = a.transpose();
    let bt = b.transpose();
    let p0 = fam.get_or_zero(0, k + 1);
    let p1 = if d >= 1 { fam.get_or_zero(1, k + 1) } else { Matrix::zeros(fam.n, fam.n) };

    let mut base = Vec::with_capacity(top + 1);
    base.push(symmetrize(&(q + &at * (&p0 + &p1) * a + c.transpose() * &p0 * c)));
    for i in 1..=top {
        let next = if i < d { fam.get_or_zero(i + 1, k + 1) } else { Matrix::zeros(fam.n, fam.n) };
        base.push(symmetrize(&(&at * next * a)));
    }

    let mut sum = Matrix::zeros(fam.n, fam.n);
    for i in 0..=lim {
        sum += fam.get_or_zero(i, k + 1);
    }
    let w = symmetrize(&(&problem.r[k] + &bt * &sum * b + dd.transpose() * &p0 * dd));
    let h = &bt * &sum * a + dd.transpose() * &p0 * c;
    StepTerms { base, w, h }
}

/// Output of a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    p: PFamily,
    /// `W_k` for `k` in `t..N`, indexed by `k - t`.
    pub w: Vec<Matrix>,
    pub h: Vec<Matrix>,
    /// Gains `K_k = -W_k^† H_k`.
    pub k: Vec<Matrix>,
    pub m: usize,
    pinv_rel: f64,
}

impl RiccatiSolution {
    pub(crate) fn from_parts(p: PFamily, w: Vec<Matrix>, h: Vec<Matrix>, k: Vec<Matrix>, m: usize, pinv_rel: f64) -> Self {
        RiccatiSolution {
            p,
            w,
            h,
            k,
            m,
            pinv_rel,
        }
    }

    pub fn t(&self) -> usize {
        self.p.t
    }

    pub fn horizon(&self) -> usize {
        self.p.horizon
    }

    pub fn delay(&self) -> usize {
        self.p.delay
    }

    pub fn n(&self) -> usize {
        self.p.n
    }

    pub fn form(&self) -> RecursionForm {
        self.p.form
    }

    pub fn family(&self) -> &PFamily {
        &self.p
    }

    pub fn p(&self, i: usize, k: usize) -> Result<&Matrix> {
        self.p.get(i, k)
    }

    fn step(&self, k: usize) -> Result<usize> {
        if k < self.t() || k >= self.horizon() {
            return Err(DelqError::InvalidInput(format!(
                "time {k} outside {}..{}",
                self.t(),
                self.horizon()
            )));
        }
        Ok(k - self.t())
    }

    pub fn w_at(&self, k: usize) -> Result<&Matrix> {
        Ok(&self.w[self.step(k)?])
    }

    pub fn h_at(&self, k: usize) -> Result<&Matrix> {
        Ok(&self.h[self.step(k)?])
    }

    pub fn gain_at(&self, k: usize) -> Result<&Matrix> {
        Ok(&self.k[self.step(k)?])
    }

    /// Largest relative deviation between stored `W_k`, `H_k` and the values
    /// recomputed from the stored `P`.
    pub fn recompute_check(&self, problem: &ProblemData) -> Result<f64> {
        check_problem(problem, self.t())?;
        let (t, d) = (self.t(), self.delay());
        let mut worst = 0.0_f64;
        for k in t..self.horizon() {
            let terms = step_terms(
                problem,
                &self.p,
                k,
                0,
                self.form().lim(t, d, k),
                &problem.q[k],
            );
            let w = &self.w[k - t];
            let h = &self.h[k - t];
            let sw = max_abs(w).max(1.0);
            let sh = max_abs(h).max(1.0);
            worst = worst.max(max_abs(&(&terms.w - w)) / sw).max(max_abs(&(&terms.h - h)) / sh);
        }
        Ok(worst)
    }

    /// Largest relative asymmetry over the stored `P`.
    pub fn max_asymmetry(&self) -> f64 {
        self.p
            .iter()
            .map(|(_, _, m)| linalg::asymmetry(m) / max_abs(m).max(1.0))
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self, classification: Option<Classification>) -> Result<String> {
        let record = SolutionRecord {
            t: self.t(),
            d: self.delay(),
            horizon: self.horizon(),
            n: self.n(),
            m: self.m,
            form: self.form(),
            p: self.p.to_record(),
            w: self.w.iter().map(linalg::to_rows).collect(),
            h: self.h.iter().map(linalg::to_rows).collect(),
            k: self.k.iter().map(linalg::to_rows).collect(),
            classification,
        };
        Ok(serde_json::to_string_pretty(&record)?)
    }

    /// Inverse of [`RiccatiSolution::to_json`]; the classification field, if
    /// present, is returned alongside.
    pub fn from_json(text: &str) -> Result<(Self, Option<Classification>)> {
        let rec: SolutionRecord = serde_json::from_str(text)?;
        let p = PFamily::from_record(rec.t, rec.horizon, rec.d, rec.n, rec.form, &rec.p)?;
        let steps = rec.horizon - rec.t;
        let load = |name: &str, seq: &[Vec<Vec<f64>>], shape: (usize, usize)| -> Result<Vec<Matrix>> {
            if seq.len() != steps {
                return Err(DelqError::dims(name, steps, seq.len()));
            }
            seq.iter()
                .map(|rows| {
                    let mat = linalg::from_rows(rows)?;
                    if mat.shape() != shape {
                        return Err(DelqError::dims(
                            name,
                            format!("{}x{}", shape.0, shape.1),
                            format!("{}x{}", mat.nrows(), mat.ncols()),
                        ));
                    }
                    linalg::ensure_finite(&mat, name)?;
                    Ok(mat)
                })
                .collect()
        };
        let sol = RiccatiSolution {
            w: load("W", &rec.w, (rec.m, rec.m))?,
            h: load("H", &rec.h, (rec.m, rec.n))?,
            k: load("K", &rec.k, (rec.m, rec.n))?,
            m: rec.m,
            p,
            pinv_rel: linalg::DEFAULT_PINV_REL_TOL,
        };
        Ok((sol, rec.classification))
    }
}

#[derive(Serialize, Deserialize)]
struct SolutionRecord {
    t: usize,
    d: usize,
    #[serde(rename = "N")]
    horizon: usize,
    n: usize,
    m: usize,
    form: RecursionForm,
    #[serde(rename = "P")]
    p: BTreeMap<String, Vec<Vec<f64>>>,
    #[serde(rename = "W")]
    w: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "H")]
    h: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "K")]
    k: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classification: Option<Classification>,
}

pub(crate) fn check_problem(problem: &ProblemData, t: usize) -> Result<()> {
    problem.validate().into_result()?;
    problem.check_start(t)
}

fn backward(problem: &ProblemData, t: usize, form: RecursionForm, tol: &Tolerances) -> Result<RiccatiSolution> {
    check_problem(problem, t)?;
    let (n, m, big_n, d) = (problem.n, problem.m, problem.horizon, problem.delay);
    let mut fam = PFamily::zeros(t, big_n, d, n, form);
    *fam.get_mut(0, big_n)? = symmetrize(&problem.g);

    let steps = big_n - t;
    let mut ws = vec![Matrix::zeros(m, m); steps];
    let mut hs = vec![Matrix::zeros(m, n); steps];
    let mut ks = vec![Matrix::zeros(m, n); steps];

    for k in (t..big_n).rev() {
        let top = form.top(t, d, k);
        let lim = form.lim(t, d, k);
        let terms = step_terms(problem, &fam, k, top, lim, &problem.q[k]);
        let w_pinv = pinv(&terms.w, tol.pinv_rel)?;
        let correction = symmetrize(&(terms.h.transpose() * &w_pinv * &terms.h));
        for (i, base) in terms.base.into_iter().enumerate() {
            let value = if i == top { symmetrize(&(base - &correction)) } else { base };
            linalg::ensure_finite(&value, "Riccati recursion")?;
            *fam.get_mut(i, k)? = value;
        }
        ks[k - t] = -(&w_pinv * &terms.h);
        ws[k - t] = terms.w;
        hs[k - t] = terms.h;
    }
    Ok(RiccatiSolution {
        p: fam,
        w: ws,
        h: hs,
        k: ks,
        m,
        pinv_rel: tol.pinv_rel,
    })
}

/// Piecewise recursion for the problem started at `t`. With `d = 0` this is
/// the delay-free Riccati equation.
pub fn solve_riccati(problem: &ProblemData, t: usize) -> Result<RiccatiSolution> {
    solve_riccati_with(problem, t, &Tolerances::default())
}

pub fn solve_riccati_with(problem: &ProblemData, t: usize, tol: &Tolerances) -> Result<RiccatiSolution> {
    backward(problem, t, RecursionForm::Piecewise, tol)
}

/// Unified recursion with all `d + 1` indices at every step.
pub fn solve_riccati_bar(problem: &ProblemData, t: usize) -> Result<RiccatiSolution> {
    solve_riccati_bar_with(problem, t, &Tolerances::default())
}

pub fn solve_riccati_bar_with(problem: &ProblemData, t: usize, tol: &Tolerances) -> Result<RiccatiSolution> {
    backward(problem, t, RecursionForm::Unified, tol)
}

/// Largest relative violation of the relation between the piecewise and the
/// unified families: `P(k-t)_k = Pbar(k-t)_k + ... + Pbar(d)_k` for
/// `k < t + d`, entry-wise equality elsewhere.
pub fn piece_unified_deviation(piece: &RiccatiSolution, bar: &RiccatiSolution) -> Result<f64> {
    if piece.form() != RecursionForm::Piecewise || bar.form() != RecursionForm::Unified {
        return Err(DelqError::InvalidInput("expected a piecewise and a unified solution".into()));
    }
    let (t, d) = (piece.t(), piece.delay());
    let mut worst = 0.0_f64;
    let mut rel = |a: &Matrix, b: &Matrix| {
        let s = max_abs(a).max(max_abs(b)).max(1.0);
        worst = worst.max(max_abs(&(a - b)) / s);
    };
    for k in t..=piece.horizon() {
        for i in 0..piece.family().count(k) {
            let lhs = piece.p(i, k)?;
            if k < piece.horizon() && i == k - t && k < t + d {
                let mut tail = Matrix::zeros(piece.n(), piece.n());
                for j in i..=d {
                    tail += bar.p(j, k)?;
                }
                rel(lhs, &tail);
            } else {
                rel(lhs, bar.p(i, k)?);
            }
        }
    }
    for (a, b) in piece.w.iter().zip(&bar.w).chain(piece.h.iter().zip(&bar.h)) {
        rel(a, b);
    }
    Ok(worst)
}

/// Per-step status of the constrained delay-free equation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintStatus {
    pub k: usize,
    pub w_psd: bool,
    pub range_ok: bool,
    pub range_residual: f64,
}

#[derive(Debug, Clone)]
pub struct DelayFreeSolution {
    pub t: usize,
    /// `P_k` for `k` in `t..=N`.
    pub p: Vec<Matrix>,
    pub w: Vec<Matrix>,
    pub h: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub constraints: Vec<ConstraintStatus>,
}

impl DelayFreeSolution {
    pub fn constrained(&self) -> bool {
        self.constraints.iter().all(|c| c.w_psd && c.range_ok)
    }
}

/// Standard Riccati equation ignoring any delay in `problem`, with the
/// per-step constraints `W_k >= 0`, `W_k W_k^† H_k = H_k` reported.
pub fn solve_delay_free(problem: &ProblemData, t: usize) -> Result<DelayFreeSolution> {
    solve_delay_free_with(problem, t, &Tolerances::default())
}

pub fn solve_delay_free_with(problem: &ProblemData, t: usize, tol: &Tolerances) -> Result<DelayFreeSolution> {
    let undelayed = ProblemData {
        delay: 0,
        ..problem.clone()
    };
    let sol = solve_riccati_with(&undelayed, t, tol)?;
    let mut constraints = Vec::new();
    for k in t..problem.horizon {
        let w = sol.w_at(k)?;
        let h = sol.h_at(k)?;
        let residual = linalg::range_residual(h, w, tol.pinv_rel)?;
        constraints.push(ConstraintStatus {
            k,
            w_psd: is_psd(w, tol.psd)?,
            range_ok: residual <= tol.psd * max_abs(h).max(1.0),
            range_residual: residual,
        });
    }
    let p = (t..=problem.horizon)
        .map(|k| sol.p(0, k).cloned())
        .collect::<Result<Vec<_>>>()?;
    Ok(DelayFreeSolution {
        t,
        p,
        w: sol.w,
        h: sol.h,
        k: sol.k,
        constraints,
    })
}

/// Solvability classes, strongest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Classification {
    UniquelySolvable,
    SolvableAllPairs,
    ConvexCandidate,
    NotConvex,
}

impl Classification {
    /// The problem admits an optimal control for every initial state.
    pub fn is_solvable(self) -> bool {
        self <= Classification::SolvableAllPairs
    }

    pub fn at_least(self, other: Classification) -> bool {
        self <= other
    }
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Classification::UniquelySolvable => "UniquelySolvable",
            Classification::SolvableAllPairs => "SolvableAllPairs",
            Classification::ConvexCandidate => "ConvexCandidate",
            Classification::NotConvex => "NotConvex",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepEvidence {
    pub k: usize,
    pub w_min_eig: f64,
    /// `||(I - W_k W_k^†) H_k||`, max-entry.
    pub range_residual: f64,
    pub w_pd: bool,
    pub w_psd: bool,
    pub range_ok: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolvabilityReport {
    pub classification: Classification,
    pub steps: Vec<StepEvidence>,
    /// Set for `ConvexCandidate`: fixed-pair solvability hinges on the
    /// trajectory range condition, which needs an oracle check.
    pub requires_oracle_check: bool,
}

pub fn classify(sol: &RiccatiSolution, tol: &Tolerances) -> Result<SolvabilityReport> {
    let mut steps = Vec::with_capacity(sol.w.len());
    for (idx, (w, h)) in sol.w.iter().zip(&sol.h).enumerate() {
        let residual = linalg::range_residual(h, w, sol.pinv_rel)?;
        steps.push(StepEvidence {
            k: sol.t() + idx,
            w_min_eig: if w.nrows() == 0 { 0.0 } else { min_eigenvalue(w)? },
            range_residual: residual,
            w_pd: is_pd(w, tol.psd)?,
            w_psd: is_psd(w, tol.psd)?,
            range_ok: residual <= tol.psd * max_abs(h).max(1.0),
        });
    }
    let classification = if steps.iter().all(|s| s.w_pd) {
        Classification::UniquelySolvable
    } else if steps.iter().all(|s| s.w_psd && s.range_ok) {
        Classification::SolvableAllPairs
    } else if steps.iter().all(|s| s.w_psd) {
        Classification::ConvexCandidate
    } else {
        Classification::NotConvex
    };
    Ok(SolvabilityReport {
        classification,
        steps,
        requires_oracle_check: classification == Classification::ConvexCandidate,
    })
}

/// Matrix of the value function at time `k`, `sum_{i <= min(k-t,d)} P(i)_k`.
pub fn value_matrix(sol: &RiccatiSolution, k: usize) -> Result<Matrix> {
    if k < sol.t() || k >= sol.horizon() {
        return Err(DelqError::InvalidInput(format!(
            "value time {k} outside {}..{}",
            sol.t(),
            sol.horizon()
        )));
    }
    let top = (k - sol.t()).min(sol.delay());
    let mut acc = Matrix::zeros(sol.n(), sol.n());
    for i in 0..=top {
        acc += sol.p(i, k)?;
    }
    Ok(acc)
}

/// `xi^T (sum_{i <= min(k-t,d)} P(i)_k) xi`.
pub fn optimal_value(sol: &RiccatiSolution, k: usize, xi: &Vector) -> Result<f64> {
    if xi.len() != sol.n() {
        return Err(DelqError::dims("optimal_value", sol.n(), xi.len()));
    }
    let v = value_matrix(sol, k)?;
    Ok(xi.dot(&(v * xi)))
}

pub fn gains(sol: &RiccatiSolution) -> Vec<Matrix> {
    sol.k.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{self, WeightKind};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn s(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    fn close(a: &Matrix, b: f64) -> bool {
        (a[(0, 0)] - b).abs() < 1e-14
    }

    #[test]
    fn scalar_example_values() {
        let p = instances::scalar_delay_example();
        let sol = solve_riccati(&p, 0).unwrap();
        assert!(close(sol.p(0, 2).unwrap(), 1.0));
        assert!(close(sol.p(1, 2).unwrap(), 0.0));
        assert!(close(sol.p(2, 2).unwrap(), -0.5));
        assert!(close(sol.w_at(2).unwrap(), 2.0));
        assert!(close(sol.h_at(2).unwrap(), 1.0));
        assert!(close(sol.p(0, 1).unwrap(), 1.0));
        assert!(close(sol.p(1, 1).unwrap(), -2.0 / 3.0));
        assert!(close(sol.w_at(1).unwrap(), 1.5));
        assert!(close(sol.h_at(1).unwrap(), 0.5));
        assert!(close(sol.p(0, 0).unwrap(), 0.25));
        assert!(close(sol.w_at(0).unwrap(), 4.0 / 3.0));
        assert!(close(sol.h_at(0).unwrap(), 1.0 / 3.0));
        assert!(matches!(sol.p(2, 1), Err(DelqError::Undefined { i: 2, k: 1 })));
        assert!(sol.p(1, 0).is_err());
        assert!(sol.p(2, 3).is_ok());

        let x = Vector::from_element(1, 2.0);
        assert!((optimal_value(&sol, 0, &x).unwrap() - 1.0).abs() < 1e-14);
        assert!((optimal_value(&sol, 1, &x).unwrap() - 4.0 / 3.0).abs() < 1e-14);
        assert_eq!(optimal_value(&sol, 0, &Vector::zeros(1)).unwrap(), 0.0);
        assert!(optimal_value(&sol, 3, &x).is_err());
    }

    #[test]
    fn zero_costs_give_zero_solution() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut p = instances::random_problem(&mut rng, 2, 2, 4, 2, WeightKind::Mixed);
        for q in &mut p.q {
            q.fill(0.0);
        }
        p.g.fill(0.0);
        for sol in [solve_riccati(&p, 0).unwrap(), solve_riccati_bar(&p, 0).unwrap()] {
            assert!(sol.family().iter().all(|(_, _, m)| max_abs(m) == 0.0));
            for k in 0..4 {
                assert_eq!(sol.w_at(k).unwrap(), &p.r[k]);
                assert_eq!(max_abs(sol.h_at(k).unwrap()), 0.0);
                assert_eq!(max_abs(sol.gain_at(k).unwrap()), 0.0);
            }
        }
    }

    #[test]
    fn four_step_w3_and_k3() {
        let p = instances::four_step_example();
        let sol = solve_riccati(&p, 0).unwrap();
        let w3 = instances::printed_matrix(&instances::FOUR_STEP_PRINTED_W[3]);
        let k3 = instances::printed_matrix(&instances::FOUR_STEP_PRINTED_K[3]);
        assert!(max_abs(&(sol.w_at(3).unwrap() - w3)) <= 5e-4);
        assert!(max_abs(&(sol.gain_at(3).unwrap() - k3)) <= 1e-3);
        let report = classify(&sol, &Tolerances::default()).unwrap();
        assert_eq!(report.classification, Classification::UniquelySolvable);
    }

    #[test]
    fn unified_matches_piecewise_on_scalar_example() {
        let p = instances::scalar_delay_example();
        let piece = solve_riccati(&p, 0).unwrap();
        let bar = solve_riccati_bar(&p, 0).unwrap();
        assert!(piece_unified_deviation(&piece, &bar).unwrap() < 1e-14);
        // k = 2 = t + d lies in the region where both families coincide
        for i in 0..=2 {
            assert!(max_abs(&(piece.p(i, 2).unwrap() - bar.p(i, 2).unwrap())) < 1e-15);
        }
    }

    #[test]
    fn delay_free_scalar() {
        let one = s(1.0);
        let mut p = ProblemData::zeros(1, 1, 1, 0);
        p.a[0] = one.clone();
        p.b[0] = one.clone();
        p.r[0] = one.clone();
        p.g = one;
        let sol = solve_delay_free(&p, 0).unwrap();
        assert_eq!(sol.p[1][(0, 0)], 1.0);
        assert_eq!(sol.w[0][(0, 0)], 2.0);
        assert_eq!(sol.h[0][(0, 0)], 1.0);
        assert_eq!(sol.p[0][(0, 0)], 0.5);
        assert!(sol.constrained());
    }

    #[test]
    fn delay_free_equals_delayed_on_deterministic_systems() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for d in 0..4 {
            let mut p = instances::random_problem(&mut rng, 2, 1, 5, d, WeightKind::Nonnegative);
            for k in 0..5 {
                p.c[k].fill(0.0);
                p.d[k].fill(0.0);
            }
            let free = solve_delay_free(&p, 0).unwrap();
            let delayed = solve_riccati(&p, 0).unwrap();
            let bar = solve_riccati_bar(&p, 0).unwrap();
            for k in 0..5 {
                let v = value_matrix(&delayed, k).unwrap();
                let scale = max_abs(&free.p[k]).max(1.0);
                assert!(max_abs(&(&v - &free.p[k])) <= 1e-10 * scale, "d = {d}, k = {k}");
                let vbar = bar.family().sum_at(k).unwrap();
                assert!(max_abs(&(&vbar - &free.p[k])) <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn not_convex_when_negative_r_is_unreachable() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let p = instances::not_convex_problem(&mut rng, 2, 2, 4, 1);
        let sol = solve_riccati(&p, 0).unwrap();
        let report = classify(&sol, &Tolerances::default()).unwrap();
        assert_eq!(report.classification, Classification::NotConvex);
    }

    #[test]
    fn zero_problem_is_solvable_all_pairs() {
        let p = ProblemData::zeros(2, 2, 3, 1);
        let sol = solve_riccati(&p, 0).unwrap();
        let report = classify(&sol, &Tolerances::default()).unwrap();
        assert_eq!(report.classification, Classification::SolvableAllPairs);
    }

    #[test]
    fn json_round_trip_preserves_values() {
        let p = instances::four_step_example();
        let sol = solve_riccati(&p, 0).unwrap();
        let text = sol.to_json(Some(Classification::UniquelySolvable)).unwrap();
        let (back, class) = RiccatiSolution::from_json(&text).unwrap();
        assert_eq!(class, Some(Classification::UniquelySolvable));
        assert_eq!(back.family(), sol.family());
        assert_eq!(back.k, sol.k);
        let x = Vector::from_vec(vec![0.3, -1.1]);
        assert_eq!(optimal_value(&back, 1, &x).unwrap(), optimal_value(&sol, 1, &x).unwrap());
    }

    #[test]
    fn json_rejects_extra_entries() {
        let sol = solve_riccati(&instances::scalar_delay_example(), 0).unwrap();
        let text = sol.to_json(None).unwrap().replace("\"0,0\"", "\"1,0\"");
        assert!(RiccatiSolution::from_json(&text).is_err());
    }

    #[test]
    fn later_start_value_equals_running_sum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let p = instances::random_problem(&mut rng, 2, 2, 6, 3, WeightKind::Nonnegative);
        let from0 = solve_riccati(&p, 0).unwrap();
        for k in 1..6 {
            let fromk = solve_riccati(&p, k).unwrap();
            let a = value_matrix(&from0, k).unwrap();
            let b = fromk.p(0, k).unwrap();
            assert!(max_abs(&(&a - b)) <= 1e-10 * max_abs(b).max(1.0));
        }
    }

    proptest! {
        #[test]
        fn solutions_are_symmetric_and_consistent(seed in any::<u64>(), d in 0usize..4, horizon in 1usize..7) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = instances::random_problem(&mut rng, 2, 2, horizon, d.min(horizon), WeightKind::Mixed);
            let sol = solve_riccati(&p, 0).unwrap();
            prop_assert!(sol.max_asymmetry() <= 1e-9);
            prop_assert!(sol.recompute_check(&p).unwrap() <= 1e-12);
            prop_assert!(sol.p(0, horizon).unwrap() == &p.g);
            for j in 1..=p.delay {
                prop_assert!(max_abs(sol.p(j, horizon).unwrap()) == 0.0);
            }
            let bar = solve_riccati_bar(&p, 0).unwrap();
            prop_assert!(piece_unified_deviation(&sol, &bar).unwrap() <= 1e-10);
        }

        #[test]
        fn nonnegative_weights_are_solvable(seed in any::<u64>(), d in 0usize..4) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = instances::random_problem(&mut rng, 2, 2, 5, d, WeightKind::Nonnegative);
            let sol = solve_riccati(&p, 0).unwrap();
            let report = classify(&sol, &Tolerances::default()).unwrap();
            prop_assert!(report.classification.is_solvable(), "{:?}", report);
        }
    }
}
