//! Reference problems and random instance generators used by tests, benches
//! and the CLI.

use rand::Rng;

use crate::linalg::{symmetrize, Matrix};
use crate::model::ProblemData;

fn m2(a: f64, b: f64, c: f64, d: f64) -> Matrix {
    Matrix::from_row_slice(2, 2, &[a, b, c, d])
}

/// Two-dimensional, four-step instance with delay 2 and indefinite weights.
pub fn four_step_example() -> ProblemData {
    ProblemData {
        n: 2,
        m: 2,
        horizon: 4,
        delay: 2,
        a: vec![
            m2(-1.2, 0.41, -0.3, 0.89),
            m2(2.32, -0.35, 0.31, 0.3),
            m2(2.15, -0.3, 1.2, 4.0),
            m2(-1.15, -0.23, -2.0, 1.0),
        ],
        b: vec![
            m2(2.25, 0.6, -1.2, 3.0),
            m2(2.2, -1.32, 0.5, 3.0),
            m2(5.15, 0.0, 0.0, 5.6),
            m2(1.35, 1.0, -0.2, 1.0),
        ],
        c: vec![
            m2(2.6, 1.0, -1.73, 7.8),
            m2(2.5, 0.73, -1.47, 5.2),
            m2(2.6, 1.63, -1.0, 3.7),
            m2(1.6, 0.6, 1.0, 2.1),
        ],
        d: vec![
            m2(2.4, 1.93, 1.07, 3.0),
            m2(2.8, 1.03, -1.23, 6.0),
            m2(0.5, 0.2, 1.1, 2.65),
            m2(1.5, -1.0, -0.16, 1.65),
        ],
        q: vec![
            m2(-2.0, 0.8, 0.8, -1.6),
            m2(4.0, 0.0, 0.0, 0.0),
            m2(-0.5, 0.0, 0.0, 1.0),
            m2(1.0, 0.0, 0.0, 4.0),
        ],
        r: vec![
            m2(-5.0, 0.0, 0.0, -4.0),
            m2(-2.0, 0.1, 0.1, 5.0),
            m2(4.0, -0.3, -0.3, 7.0),
            m2(2.0, -0.3, -0.3, 0.0),
        ],
        g: m2(2.0, -0.3, -0.3, 0.0),
    }
}

/// Reference values of `W_0..W_3` for [`four_step_example`], rounded to four or five digits.
/// The stored `W_0` has negative determinant; see the README.
pub const FOUR_STEP_PRINTED_W: [[[f64; 2]; 2]; 4] = [
    [[7926.0, 4307.0], [4307.0, 1403.0]],
    [[749.8, -120.6], [-120.6, 6637.0]],
    [[28.8150, 5.7102], [5.7102, 151.0654]],
    [[10.4510, -1.7355], [-1.7355, 4.3900]],
];

/// Reference gains `-W_k^{-1} H_k` for [`four_step_example`].
pub const FOUR_STEP_PRINTED_K: [[[f64; 2]; 2]; 4] = [
    [[-1.5730, 1.2102], [1.0877, -2.9347]],
    [[-0.9460, 0.0731], [0.0572, -0.8292]],
    [[-0.3940, -0.5321], [-0.1330, -0.8525]],
    [[-0.0069, 0.0791], [1.1469, 0.3861]],
];

pub fn printed_matrix(entries: &[[f64; 2]; 2]) -> Matrix {
    m2(entries[0][0], entries[0][1], entries[1][0], entries[1][1])
}

/// Scalar instance `x_{k+1} = x_k + u_k`, cost `sum u_k^2 + x_3^2`, delay 2.
/// Its value from `(0, x)` is `x^2 / 4`.
pub fn scalar_delay_example() -> ProblemData {
    let one = Matrix::from_element(1, 1, 1.0);
    let zero = Matrix::zeros(1, 1);
    ProblemData {
        n: 1,
        m: 1,
        horizon: 3,
        delay: 2,
        a: vec![one.clone(); 3],
        b: vec![one.clone(); 3],
        c: vec![zero.clone(); 3],
        d: vec![zero.clone(); 3],
        q: vec![zero; 3],
        r: vec![one.clone(); 3],
        g: one,
    }
}

/// Sign structure of random cost weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    /// Indefinite `Q`, `R`, `G` allowed.
    Mixed,
    /// `Q, R, G >= 0`, with some weights rank deficient.
    Nonnegative,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

fn sym_with_spectrum<R: Rng + ?Sized>(rng: &mut R, dim: usize, lo: f64, hi: f64) -> Matrix {
    let raw = uniform(rng, dim, dim, -1.0, 1.0);
    let q = raw.qr().q();
    let diag = Matrix::from_diagonal(&crate::Vector::from_fn(dim, |_, _| rng.random_range(lo..hi)));
    symmetrize(&(&q * diag * q.transpose()))
}

fn psd<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Matrix {
    let rank = rng.random_range(0..=dim);
    let f = uniform(rng, dim, rank, -1.0, 1.0);
    symmetrize(&(&f * f.transpose()))
}

/// Random instance with moderately scaled dynamics.
pub fn random_problem<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    m: usize,
    horizon: usize,
    delay: usize,
    kind: WeightKind,
) -> ProblemData {
    let mut p = ProblemData::zeros(n, m, horizon, delay);
    for k in 0..horizon {
        p.a[k] = Matrix::identity(n, n) * 0.7 + uniform(rng, n, n, -0.4, 0.4);
        p.b[k] = uniform(rng, n, m, -1.0, 1.0);
        p.c[k] = uniform(rng, n, n, -0.4, 0.4);
        p.d[k] = uniform(rng, n, m, -0.4, 0.4);
        match kind {
            WeightKind::Mixed => {
                p.q[k] = sym_with_spectrum(rng, n, -0.5, 1.0);
                p.r[k] = sym_with_spectrum(rng, m, -0.3, 1.5);
            }
            WeightKind::Nonnegative => {
                p.q[k] = psd(rng, n);
                p.r[k] = psd(rng, m);
            }
        }
    }
    p.g = match kind {
        WeightKind::Mixed => sym_with_spectrum(rng, n, -0.2, 2.0),
        WeightKind::Nonnegative => psd(rng, n),
    };
    p
}

/// Instance whose first control channel is unweighted in the dynamics
/// (`B`, `D` zero in column 0) and carries a negative weight in `R`.
pub fn not_convex_problem<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    m: usize,
    horizon: usize,
    delay: usize,
) -> ProblemData {
    let mut p = random_problem(rng, n, m, horizon, delay, WeightKind::Nonnegative);
    let k = rng.random_range(0..horizon);
    p.b[k].column_mut(0).fill(0.0);
    p.d[k].column_mut(0).fill(0.0);
    for j in 0..m {
        p.r[k][(0, j)] = 0.0;
        p.r[k][(j, 0)] = 0.0;
    }
    p.r[k][(0, 0)] = -rng.random_range(0.5..2.0);
    p
}
