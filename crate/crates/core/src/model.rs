//! Problem data, the binary Rademacher scenario tree, adapted processes and
//! delayed-feedback policies.
//!
//! The tree is implicit. At level `l = k - start` there are `2^l` atoms; atom
//! `i` has children `2i` (noise `w_k = +1`) and `2i + 1` (noise `w_k = -1`),
//! so the most significant bit of an atom index is the earliest noise. The
//! descendants of atom `i` at level `j` that live at level `l >= j` form the
//! contiguous block `i * 2^(l-j) .. (i + 1) * 2^(l-j)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{DelqError, Result};
use crate::linalg::{self, is_finite, max_abs, Matrix, Vector, SYMMETRY_TOL};

/// Default bound on `N - t` for exact enumeration.
pub const DEFAULT_DEPTH_CAP: usize = 22;
/// Environment variable overriding [`DEFAULT_DEPTH_CAP`].
pub const DEPTH_CAP_ENV: &str = "DELQ_DEPTH_CAP";

/// One finite-horizon LQ instance. Matrix sequences are indexed by `k - 0`
/// for `k` in `0..N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemData {
    pub n: usize,
    pub m: usize,
    #[serde(rename = "N")]
    pub horizon: usize,
    #[serde(rename = "d")]
    pub delay: usize,
    #[serde(rename = "A", with = "linalg::rows_seq_serde")]
    pub a: Vec<Matrix>,
    #[serde(rename = "B", with = "linalg::rows_seq_serde")]
    pub b: Vec<Matrix>,
    #[serde(rename = "C", with = "linalg::rows_seq_serde")]
    pub c: Vec<Matrix>,
    #[serde(rename = "D", with = "linalg::rows_seq_serde")]
    pub d: Vec<Matrix>,
    #[serde(rename = "Q", with = "linalg::rows_seq_serde")]
    pub q: Vec<Matrix>,
    #[serde(rename = "R", with = "linalg::rows_seq_serde")]
    pub r: Vec<Matrix>,
    #[serde(rename = "G", with = "linalg::rows_serde")]
    pub g: Matrix,
}

/// Every violated invariant of a [`ProblemData`]; empty when valid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(DelqError::Validation(self.to_string()))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "  - {v}")?;
        }
        Ok(())
    }
}

impl ProblemData {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parse and validate in one step.
    pub fn load(text: &str) -> Result<Self> {
        let problem = Self::from_json(text)?;
        problem.validate().into_result()?;
        Ok(problem)
    }

    pub fn validate(&self) -> ValidationReport {
        let mut out = Vec::new();
        let (n, m, big_n) = (self.n, self.m, self.horizon);
        if n == 0 {
            out.push("n must be at least 1".to_string());
        }
        if m == 0 {
            out.push("m must be at least 1".to_string());
        }
        if big_n == 0 {
            out.push("N must be at least 1".to_string());
        }
        if self.delay > big_n {
            out.push(format!("delay d = {} exceeds horizon N = {big_n}", self.delay));
        }

        let seqs: [(&str, &Vec<Matrix>, (usize, usize), bool); 6] = [
            ("A", &self.a, (n, n), false),
            ("B", &self.b, (n, m), false),
            ("C", &self.c, (n, n), false),
            ("D", &self.d, (n, m), false),
            ("Q", &self.q, (n, n), true),
            ("R", &self.r, (m, m), true),
        ];
        for (name, seq, shape, symmetric) in seqs {
            if seq.len() != big_n {
                out.push(format!("{name} has {} matrices, expected N = {big_n}", seq.len()));
            }
            for (k, mat) in seq.iter().enumerate() {
                check_matrix(&mut out, &format!("{name}_{k}"), mat, shape, symmetric);
            }
        }
        check_matrix(&mut out, "G", &self.g, (n, n), true);
        ValidationReport { violations: out }
    }

    /// A problem with every matrix zero.
    pub fn zeros(n: usize, m: usize, horizon: usize, delay: usize) -> Self {
        let seq = |r: usize, c: usize| vec![Matrix::zeros(r, c); horizon];
        ProblemData {
            n,
            m,
            horizon,
            delay,
            a: seq(n, n),
            b: seq(n, m),
            c: seq(n, n),
            d: seq(n, m),
            q: seq(n, n),
            r: seq(m, m),
            g: Matrix::zeros(n, n),
        }
    }

    /// Same data with the horizon cut to `horizon` steps and `G` replaced.
    pub fn truncated(&self, horizon: usize, g: Matrix) -> Result<Self> {
        if horizon == 0 || horizon > self.horizon {
            return Err(DelqError::InvalidInput(format!(
                "cannot truncate horizon {} to {horizon}",
                self.horizon
            )));
        }
        let cut = |s: &Vec<Matrix>| s[..horizon].to_vec();
        Ok(ProblemData {
            horizon,
            delay: self.delay.min(horizon),
            a: cut(&self.a),
            b: cut(&self.b),
            c: cut(&self.c),
            d: cut(&self.d),
            q: cut(&self.q),
            r: cut(&self.r),
            g,
            ..self.clone()
        })
    }

    pub(crate) fn check_start(&self, t: usize) -> Result<()> {
        if t >= self.horizon {
            return Err(DelqError::InvalidInput(format!(
                "initial time t = {t} must lie in 0..{}",
                self.horizon
            )));
        }
        Ok(())
    }

    pub(crate) fn check_state(&self, x: &Vector) -> Result<()> {
        if x.len() != self.n {
            return Err(DelqError::dims("initial state", self.n, x.len()));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(DelqError::NonFinite("initial state".into()));
        }
        Ok(())
    }
}

fn check_matrix(
    out: &mut Vec<String>,
    name: &str,
    mat: &Matrix,
    shape: (usize, usize),
    symmetric: bool,
) {
    if mat.shape() != shape {
        out.push(format!(
            "{name} is {}x{}, expected {}x{}",
            mat.nrows(),
            mat.ncols(),
            shape.0,
            shape.1
        ));
        return;
    }
    if !is_finite(mat) {
        out.push(format!("{name} has a non-finite entry"));
        return;
    }
    if symmetric {
        let asym = linalg::asymmetry(mat);
        if asym > SYMMETRY_TOL * max_abs(mat).max(1.0) {
            out.push(format!("{name} is not symmetric (max |S - S^T| = {asym:.3e})"));
        }
    }
}

/// Depth cap from [`DEPTH_CAP_ENV`], falling back to [`DEFAULT_DEPTH_CAP`].
pub fn depth_cap() -> usize {
    std::env::var(DEPTH_CAP_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(DEFAULT_DEPTH_CAP)
}

/// Rademacher scenario tree over time indices `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioTree {
    start: usize,
    end: usize,
}

/// One atom of the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub time: usize,
    pub index: usize,
    /// `w_start, ..., w_{time-1}`.
    pub path: Vec<f64>,
    pub probability: f64,
}

impl ScenarioTree {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        Self::with_cap(start, end, depth_cap())
    }

    pub fn with_cap(start: usize, end: usize, cap: usize) -> Result<Self> {
        if start > end {
            return Err(DelqError::InvalidInput(format!(
                "tree start {start} exceeds end {end}"
            )));
        }
        if end - start > cap {
            return Err(DelqError::Resource(format!(
                "tree depth {} exceeds cap {cap} (set {DEPTH_CAP_ENV} to raise it)",
                end - start
            )));
        }
        Ok(ScenarioTree { start, end })
    }

    /// Tree for a problem started at `t`.
    pub fn for_problem(problem: &ProblemData, t: usize) -> Result<Self> {
        problem.check_start(t)?;
        Self::new(t, problem.horizon)
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn depth(&self) -> usize {
        self.end - self.start
    }

    fn level(&self, k: usize) -> usize {
        assert!(
            (self.start..=self.end).contains(&k),
            "time {k} outside tree {}..={}",
            self.start,
            self.end
        );
        k - self.start
    }

    /// Number of atoms of `F_k`.
    pub fn atoms(&self, k: usize) -> usize {
        1usize << self.level(k)
    }

    pub fn probability(&self, k: usize) -> f64 {
        0.5_f64.powi(self.level(k) as i32)
    }

    /// Noise `w_j` on the path of atom `node` at time `k`, `j < k`.
    pub fn noise(&self, k: usize, node: usize, j: usize) -> f64 {
        debug_assert!(j >= self.start && j < k);
        if (node >> (k - 1 - j)) & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Ancestor at time `j <= k` of atom `node` at time `k`.
    pub fn ancestor(&self, k: usize, node: usize, j: usize) -> usize {
        node >> (k - j)
    }

    pub fn node(&self, k: usize, index: usize) -> Node {
        let path = (self.start..k).map(|j| self.noise(k, index, j)).collect();
        Node {
            time: k,
            index,
            path,
            probability: self.probability(k),
        }
    }

    pub fn nodes(&self, k: usize) -> impl Iterator<Item = Node> + '_ {
        (0..self.atoms(k)).map(move |i| self.node(k, i))
    }
}

pub fn build_tree(t: usize, horizon: usize) -> Result<ScenarioTree> {
    ScenarioTree::new(t, horizon)
}

/// A vector process on the tree. Level `k - start` is stored as a
/// `dim x 2^(k - start)` matrix whose columns are the atom values.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    start: usize,
    dim: usize,
    levels: Vec<Matrix>,
}

impl AdaptedProcess {
    /// Zero process on times `start..=last`.
    pub fn zeros(start: usize, last: usize, dim: usize) -> Self {
        let levels = (0..=last - start).map(|l| Matrix::zeros(dim, 1 << l)).collect();
        AdaptedProcess { start, dim, levels }
    }

    /// Process on `start..=last` filled by `f(k, node)`.
    pub fn from_fn(start: usize, last: usize, dim: usize, mut f: impl FnMut(usize, usize) -> Vector) -> Self {
        let mut p = Self::zeros(start, last, dim);
        for (l, level) in p.levels.iter_mut().enumerate() {
            for i in 0..level.ncols() {
                let v = f(start + l, i);
                assert_eq!(v.len(), dim, "process value has wrong dimension");
                level.set_column(i, &v);
            }
        }
        p
    }

    pub fn from_levels(start: usize, dim: usize, levels: Vec<Matrix>) -> Result<Self> {
        for (l, level) in levels.iter().enumerate() {
            if level.shape() != (dim, 1 << l) {
                return Err(DelqError::dims(
                    "adapted process level",
                    format!("{dim}x{}", 1usize << l),
                    format!("{}x{}", level.nrows(), level.ncols()),
                ));
            }
        }
        Ok(AdaptedProcess { start, dim, levels })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    /// Last time index carried.
    pub fn last(&self) -> usize {
        self.start + self.levels.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn idx(&self, k: usize) -> usize {
        assert!(
            k >= self.start && k <= self.last(),
            "time {k} outside process range {}..={}",
            self.start,
            self.last()
        );
        k - self.start
    }

    pub fn level(&self, k: usize) -> &Matrix {
        &self.levels[self.idx(k)]
    }

    pub fn level_mut(&mut self, k: usize) -> &mut Matrix {
        let i = self.idx(k);
        &mut self.levels[i]
    }

    pub fn at(&self, k: usize, node: usize) -> Vector {
        self.level(k).column(node).into_owned()
    }

    pub fn set(&mut self, k: usize, node: usize, v: &Vector) {
        self.level_mut(k).set_column(node, v);
    }

    /// `E_j[X_k]` as a `dim x 2^(j - start)` matrix of atom values.
    pub fn cond_expect(&self, k: usize, j: usize) -> Result<Matrix> {
        if j > k || j < self.start {
            return Err(DelqError::InvalidInput(format!(
                "cond_expect needs start <= j <= k, got j = {j}, k = {k}, start = {}",
                self.start
            )));
        }
        Ok(average_blocks(self.level(k), k - j))
    }

    /// Every `(k, node)` pair satisfies `f`.
    pub fn all(&self, mut f: impl FnMut(usize, usize, Vector) -> bool) -> bool {
        for k in self.start..=self.last() {
            for i in 0..self.level(k).ncols() {
                if !f(k, i, self.at(k, i)) {
                    return false;
                }
            }
        }
        true
    }

    pub fn scaled(&self, s: f64) -> Self {
        AdaptedProcess {
            start: self.start,
            dim: self.dim,
            levels: self.levels.iter().map(|l| l * s).collect(),
        }
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &AdaptedProcess) -> Result<Self> {
        if self.start != other.start || self.levels.len() != other.levels.len() || self.dim != other.dim {
            return Err(DelqError::InvalidInput("processes have different shapes".into()));
        }
        Ok(AdaptedProcess {
            start: self.start,
            dim: self.dim,
            levels: self
                .levels
                .iter()
                .zip(&other.levels)
                .map(|(a, b)| a + b * s)
                .collect(),
        })
    }

    /// `sum_k E[a_k^T b_k]` over the shared time range.
    pub fn inner(&self, other: &AdaptedProcess) -> Result<f64> {
        if self.start != other.start || self.levels.len() != other.levels.len() || self.dim != other.dim {
            return Err(DelqError::InvalidInput("processes have different shapes".into()));
        }
        Ok(self
            .levels
            .iter()
            .zip(&other.levels)
            .enumerate()
            .map(|(l, (a, b))| a.dot(b) * 0.5_f64.powi(l as i32))
            .sum())
    }
}

/// Average consecutive blocks of `2^shift` columns.
pub(crate) fn average_blocks(level: &Matrix, shift: usize) -> Matrix {
    if shift == 0 {
        return level.clone();
    }
    let block = 1usize << shift;
    let coarse = level.ncols() >> shift;
    let mut out = Matrix::zeros(level.nrows(), coarse);
    for a in 0..coarse {
        let mut col = out.column_mut(a);
        for i in a * block..(a + 1) * block {
            col += level.column(i);
        }
        col /= block as f64;
    }
    out
}

/// Repeat every column `2^shift` times, inverse to coarsening.
pub(crate) fn expand_blocks(coarse: &Matrix, shift: usize) -> Matrix {
    if shift == 0 {
        return coarse.clone();
    }
    let block = 1usize << shift;
    let mut out = Matrix::zeros(coarse.nrows(), coarse.ncols() << shift);
    for a in 0..coarse.ncols() {
        for i in a * block..(a + 1) * block {
            out.set_column(i, &coarse.column(a));
        }
    }
    out
}

/// `max(t, k - d)`, the information time of the control at `k`.
pub fn info_time(t: usize, k: usize, d: usize) -> usize {
    k.saturating_sub(d).max(t)
}

/// Control policies. Feedback gains are indexed by `k - t`.
#[derive(Debug, Clone)]
pub enum Policy {
    /// `u_k = K_k E_{max(t,k-d)} X_k`.
    Feedback { gains: Vec<Matrix> },
    /// Controls given node-wise on times `t..N-1`.
    OpenLoop(AdaptedProcess),
    /// `u_k = K_k E_{max(t,k-d)} X_k + v_k` with `v` open-loop.
    Shifted { gains: Vec<Matrix>, offsets: AdaptedProcess },
}

impl Policy {
    pub fn zero(problem: &ProblemData, t: usize) -> Policy {
        Policy::Feedback {
            gains: vec![Matrix::zeros(problem.m, problem.n); problem.horizon - t],
        }
    }
}

/// Checks that `controls` at time `k` are constant on atoms of
/// `F_{max(t,k-d)}`, up to `tol * max(1, |u|)`.
pub fn check_delay_measurable(controls: &AdaptedProcess, t: usize, delay: usize, tol: f64) -> Result<()> {
    if controls.start() != t {
        return Err(DelqError::InvalidInput(format!(
            "controls start at {} but the problem starts at {t}",
            controls.start()
        )));
    }
    for k in t..=controls.last() {
        let j = info_time(t, k, delay);
        let shift = k - j;
        let level = controls.level(k);
        let scale = max_abs(level).max(1.0);
        let rebuilt = expand_blocks(&average_blocks(level, shift), shift);
        let dev = max_abs(&(rebuilt - level));
        if dev > tol * scale {
            return Err(DelqError::Measurability(format!(
                "control at time {k} is not F_{j}-measurable (deviation {dev:.3e})"
            )));
        }
    }
    Ok(())
}

/// States on `t..=N` and applied controls on `t..N-1`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: AdaptedProcess,
    pub controls: AdaptedProcess,
}

/// Node-wise forward recursion on the full tree rooted at `tree.start()`.
pub fn forward_simulate(
    problem: &ProblemData,
    x: &Vector,
    policy: &Policy,
    tree: &ScenarioTree,
) -> Result<Trajectory> {
    let t = tree.start();
    let big_n = problem.horizon;
    problem.check_start(t)?;
    problem.check_state(x)?;
    if tree.end() != big_n {
        return Err(DelqError::InvalidInput(format!(
            "tree ends at {} but horizon is {big_n}",
            tree.end()
        )));
    }
    let (n, m, d) = (problem.n, problem.m, problem.delay);
    let steps = big_n - t;

    let (gains, offsets) = match policy {
        Policy::Feedback { gains } => (Some(gains), None),
        Policy::OpenLoop(u) => (None, Some(u)),
        Policy::Shifted { gains, offsets } => (Some(gains), Some(offsets)),
    };
    if let Some(gains) = gains {
        if gains.len() != steps {
            return Err(DelqError::dims("policy gains", steps, gains.len()));
        }
        if let Some(bad) = gains.iter().find(|g| g.shape() != (m, n)) {
            return Err(DelqError::dims(
                "policy gain",
                format!("{m}x{n}"),
                format!("{}x{}", bad.nrows(), bad.ncols()),
            ));
        }
    }
    if let Some(u) = offsets {
        if u.start() != t || u.last() + 1 != big_n || u.dim() != m {
            return Err(DelqError::InvalidInput(format!(
                "open-loop controls must cover times {t}..{} with dimension {m}",
                big_n - 1
            )));
        }
        check_delay_measurable(u, t, d, 1e-12)?;
    }

    let mut states = AdaptedProcess::zeros(t, big_n, n);
    states.level_mut(t).set_column(0, x);
    let mut controls = AdaptedProcess::zeros(t, big_n - 1, m);

    for k in t..big_n {
        let xk = states.level(k).clone();
        let mut uk = match gains {
            Some(g) => {
                let j = info_time(t, k, d);
                let means = states.cond_expect(k, j)?;
                expand_blocks(&(&g[k - t] * means), k - j)
            }
            None => Matrix::zeros(m, xk.ncols()),
        };
        if let Some(u) = offsets {
            uk += u.level(k);
        }
        let kk = k;
        let drift = &problem.a[kk] * &xk + &problem.b[kk] * &uk;
        let diffusion = &problem.c[kk] * &xk + &problem.d[kk] * &uk;
        let next = states.level_mut(k + 1);
        for i in 0..xk.ncols() {
            let plus = drift.column(i) + diffusion.column(i);
            let minus = drift.column(i) - diffusion.column(i);
            next.set_column(2 * i, &plus);
            next.set_column(2 * i + 1, &minus);
        }
        *controls.level_mut(k) = uk;
    }
    if !states.levels.iter().all(is_finite) {
        return Err(DelqError::NonFinite("forward simulation".into()));
    }
    Ok(Trajectory { states, controls })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;
    use proptest::prelude::*;

    #[test]
    fn validate_accepts_reference_data() {
        assert!(instances::four_step_example().validate().is_valid());
        assert!(instances::scalar_delay_example().validate().is_valid());
    }

    #[test]
    fn validate_reports_asymmetry_and_lengths() {
        let mut p = instances::four_step_example();
        p.q[0][(0, 1)] += 1.0;
        p.b.pop();
        let report = p.validate();
        assert_eq!(report.violations.len(), 2, "{report}");
        assert!(report.violations.iter().any(|v| v.contains("Q_0") && v.contains("symmetric")));
        assert!(report.violations.iter().any(|v| v.starts_with("B has 3")));
    }

    #[test]
    fn validate_reports_nan_and_shape() {
        let mut p = ProblemData::zeros(2, 1, 2, 1);
        p.a[1][(0, 0)] = f64::NAN;
        p.g = Matrix::zeros(3, 3);
        let report = p.validate();
        assert_eq!(report.violations.len(), 2, "{report}");
        assert!(p.validate().into_result().is_err());
    }

    #[test]
    fn json_round_trip() {
        let p = instances::four_step_example();
        let text = p.to_json().unwrap();
        assert!(text.contains("\"N\": 4"));
        assert_eq!(ProblemData::load(&text).unwrap(), p);
    }

    #[test]
    fn json_rejects_ragged_rows() {
        let text = r#"{"n":1,"m":1,"N":1,"d":0,"A":[[[1,2],[3]]],"B":[[[1]]],"C":[[[0]]],
            "D":[[[0]]],"Q":[[[0]]],"R":[[[1]]],"G":[[1]]}"#;
        assert!(ProblemData::from_json(text).is_err());
    }

    #[test]
    fn tree_shapes() {
        let tree = build_tree(0, 0).unwrap();
        assert_eq!(tree.atoms(0), 1);
        assert_eq!(tree.probability(0), 1.0);
        let tree = build_tree(0, 3).unwrap();
        assert_eq!(tree.atoms(3), 8);
        assert_eq!(tree.probability(3), 0.125);
        let total: f64 = tree.nodes(3).map(|n| n.probability).sum();
        assert_eq!(total, 1.0);
        assert!(matches!(ScenarioTree::with_cap(0, 5, 4), Err(DelqError::Resource(_))));
    }

    #[test]
    fn tree_children_have_rademacher_moments() {
        let tree = build_tree(2, 6).unwrap();
        for k in 2..6 {
            for i in 0..tree.atoms(k) {
                let w: Vec<f64> = [2 * i, 2 * i + 1].iter().map(|&c| tree.noise(k + 1, c, k)).collect();
                assert_eq!(w.iter().sum::<f64>() / 2.0, 0.0);
                assert_eq!(w.iter().map(|v| v * v).sum::<f64>() / 2.0, 1.0);
                // paths of the children extend the parent path
                let parent = tree.node(k, i).path;
                assert_eq!(&tree.node(k + 1, 2 * i).path[..k - 2], &parent[..]);
            }
        }
        assert_eq!(tree.node(6, 0).path, vec![1.0; 4]);
        assert_eq!(tree.node(3, 1).path, vec![-1.0]);
    }

    #[test]
    fn cond_expect_examples() {
        let tree = build_tree(0, 2).unwrap();
        let x = AdaptedProcess::from_fn(0, 2, 1, |k, i| {
            let s: f64 = tree.node(k, i).path.iter().sum();
            Vector::from_element(1, s)
        });
        assert_eq!(x.cond_expect(2, 2).unwrap(), x.level(2).clone());
        let e1 = x.cond_expect(2, 1).unwrap();
        for i in 0..2 {
            assert_eq!(e1[(0, i)], tree.noise(1, i, 0));
        }
        let c = AdaptedProcess::from_fn(0, 2, 2, |_, _| Vector::from_element(2, 3.5));
        assert_eq!(c.cond_expect(2, 0).unwrap(), Matrix::from_element(2, 1, 3.5));
        assert!(x.cond_expect(1, 2).is_err());
    }

    #[test]
    fn simulate_zero_and_pure_noise() {
        let p = ProblemData::zeros(2, 1, 3, 1);
        let tree = ScenarioTree::for_problem(&p, 0).unwrap();
        let traj = forward_simulate(&p, &Vector::zeros(2), &Policy::zero(&p, 0), &tree).unwrap();
        assert!(traj.states.all(|_, _, v| v.iter().all(|&e| e == 0.0)));

        let mut p = ProblemData::zeros(1, 1, 1, 0);
        p.c[0][(0, 0)] = 1.0;
        let tree = ScenarioTree::for_problem(&p, 0).unwrap();
        let traj = forward_simulate(&p, &Vector::from_element(1, 1.0), &Policy::zero(&p, 0), &tree).unwrap();
        assert_eq!(traj.states.level(1).as_slice(), &[1.0, -1.0]);
    }

    #[test]
    fn measurability_checker_rejects_lookahead() {
        let tree = build_tree(0, 3).unwrap();
        // u_2 depends on w_1, but d = 1 only reveals w_0
        let u = AdaptedProcess::from_fn(0, 2, 1, |k, i| {
            let w = if k == 2 { tree.noise(2, i, 1) } else { 0.0 };
            Vector::from_element(1, w)
        });
        assert!(matches!(check_delay_measurable(&u, 0, 1, 1e-12), Err(DelqError::Measurability(_))));
        assert!(check_delay_measurable(&u, 0, 0, 1e-12).is_ok());
    }

    fn random_process(tree: ScenarioTree, dim: usize, seed: u64) -> AdaptedProcess {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        AdaptedProcess::from_fn(tree.start(), tree.end(), dim, |_, _| {
            Vector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0))
        })
    }

    proptest! {
        #[test]
        fn tower_property(seed in any::<u64>(), depth in 1usize..7, start in 0usize..3) {
            let tree = build_tree(start, start + depth).unwrap();
            let x = random_process(tree, 2, seed);
            let k = start + depth;
            for j in start..=k {
                for i in start..=j {
                    let via_j = average_blocks(&x.cond_expect(k, j).unwrap(), j - i);
                    let direct = x.cond_expect(k, i).unwrap();
                    prop_assert!(max_abs(&(via_j - direct)) <= 1e-13);
                }
            }
        }

        #[test]
        fn open_loop_replays_feedback(seed in any::<u64>(), d in 0usize..4) {
            let mut p = instances::random_problem(
                &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed),
                2, 2, 5, d, instances::WeightKind::Mixed,
            );
            p.delay = d;
            let tree = ScenarioTree::for_problem(&p, 0).unwrap();
            let gains: Vec<Matrix> = (0..5).map(|k| Matrix::from_fn(2, 2, |i, j| ((i + 2 * j + k) as f64).sin())).collect();
            let x = Vector::from_vec(vec![1.0, -0.5]);
            let fb = forward_simulate(&p, &x, &Policy::Feedback { gains }, &tree).unwrap();
            prop_assert!(check_delay_measurable(&fb.controls, 0, d, 1e-12).is_ok());
            let ol = forward_simulate(&p, &x, &Policy::OpenLoop(fb.controls.clone()), &tree).unwrap();
            prop_assert_eq!(ol.states, fb.states);
        }
    }
}
