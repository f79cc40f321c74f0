//! Transition kernels of Markov jump processes with piecewise-constant
//! intensities.
//!
//! The matrix exponential uses scaling and squaring around diagonal Padé
//! approximants of degree 3, 5, 7, 9 or 13, with the degree picked from the
//! 1-norm of the argument (Higham 2005). The Fréchet derivative is read off
//! the upper-right block of `exp([[A, E], [0, A]])`.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::PiecewiseIntensity;
use crate::scalar::Real;

const THETA: [f64; 5] = [
    1.495585217958292e-2,
    2.539398330063230e-1,
    9.504178996162932e-1,
    2.097847961257068e0,
    5.371920351148152e0,
];

const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// Row-stochastic matrix of transition probabilities over an age interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix<T> {
    pub entries: Matrix<T>,
    pub from_age: T,
    pub to_age: T,
}

impl<T: Real> TransitionMatrix<T> {
    /// Wraps `entries` after checking stochasticity. Entries that undershoot 0
    /// or overshoot 1 by rounding slack are clipped; anything beyond the slack
    /// is an error. Rows are never renormalised.
    pub fn new(mut entries: Matrix<T>, from_age: T, to_age: T) -> Result<Self> {
        let slack = T::structural_tol();
        let tol = T::stochastic_tol();
        for i in 0..entries.rows() {
            let mut sum = T::zero();
            for v in entries.row_mut(i) {
                if !v.is_finite() || *v < -slack || *v > T::one() + slack {
                    return Err(Error::Numerical(format!(
                        "transition probability {v} outside [0, 1] on row {i}"
                    )));
                }
                sum = sum + *v;
                *v = v.max(T::zero()).min(T::one());
            }
            if !((sum - T::one()).abs() <= tol) {
                return Err(Error::Numerical(format!(
                    "transition matrix row {i} sums to {sum}"
                )));
            }
        }
        Ok(Self {
            entries,
            from_age,
            to_age,
        })
    }

    pub fn identity(n: usize, age: T) -> Self {
        Self {
            entries: Matrix::identity(n),
            from_age: age,
            to_age: age,
        }
    }

    #[inline]
    pub fn prob(&self, from: usize, to: usize) -> T {
        self.entries[(from, to)]
    }

    pub fn num_states(&self) -> usize {
        self.entries.rows()
    }
}

fn check_generator<T: Real>(q: &Matrix<T>) -> Result<()> {
    if !q.is_square() {
        return Err(Error::Domain("intensity matrix must be square".into()));
    }
    let n = q.rows();
    for i in 0..n {
        let mut off = T::zero();
        let mut scale = T::one();
        for j in 0..n {
            let v = q[(i, j)];
            if !v.is_finite() {
                return Err(Error::Domain(format!(
                    "intensity q[{i}][{j}] is not finite"
                )));
            }
            if i != j {
                if v < T::zero() {
                    return Err(Error::Domain(format!(
                        "negative off-diagonal intensity q[{i}][{j}] = {v}"
                    )));
                }
                off = off + v;
                scale = scale.max(v);
            }
        }
        if !((off + q[(i, i)]).abs() <= T::structural_tol() * scale) {
            return Err(Error::Domain(format!(
                "intensity row {i} does not sum to zero"
            )));
        }
    }
    Ok(())
}

fn check_duration<T: Real>(duration: T) -> Result<()> {
    if !(duration >= T::zero()) || !duration.is_finite() {
        return Err(Error::Domain(format!(
            "duration must be finite and nonnegative, got {duration}"
        )));
    }
    Ok(())
}

/// `exp(A)` for a general square matrix.
pub fn matrix_exp<T: Real>(a: &Matrix<T>) -> Result<Matrix<T>> {
    assert!(a.is_square(), "matrix_exp needs a square matrix");
    let n = a.rows();
    let norm = a.norm1();
    if !norm.is_finite() {
        return Err(Error::Numerical(
            "matrix exponential of non-finite matrix".into(),
        ));
    }
    if norm == T::zero() {
        return Ok(Matrix::identity(n));
    }
    let ident = Matrix::identity(n);
    let a2 = a.matmul(a);
    let low: [&[f64]; 4] = [&PADE3, &PADE5, &PADE7, &PADE9];
    for (theta, b) in THETA.iter().zip(low) {
        if norm <= T::lit(*theta) {
            return pade_low(a, &a2, &ident, b);
        }
    }
    let ratio = (norm / T::lit(THETA[4])).as_f64();
    let s = if ratio > 1.0 {
        ratio.log2().ceil() as i32
    } else {
        0
    };
    let (a, a2) = if s > 0 {
        let f = T::lit(2f64.powi(-s));
        let a = a.scale(f);
        let a2 = a2.scale(f * f);
        (a, a2)
    } else {
        (a.clone(), a2)
    };
    let mut r = pade13(&a, &a2, &ident)?;
    for _ in 0..s {
        r = r.matmul(&r);
    }
    Ok(r)
}

fn pade_low<T: Real>(
    a: &Matrix<T>,
    a2: &Matrix<T>,
    ident: &Matrix<T>,
    b: &[f64],
) -> Result<Matrix<T>> {
    let m = b.len() - 1;
    let mut power = ident.clone();
    let mut u = ident.scale(T::lit(b[1]));
    let mut v = ident.scale(T::lit(b[0]));
    for j in 1..=m / 2 {
        power = power.matmul(a2);
        u.add_assign_scaled(&power, T::lit(b[2 * j + 1]));
        v.add_assign_scaled(&power, T::lit(b[2 * j]));
    }
    let u = a.matmul(&u);
    solve_pade(&u, &v)
}

fn pade13<T: Real>(a: &Matrix<T>, a2: &Matrix<T>, ident: &Matrix<T>) -> Result<Matrix<T>> {
    let b = |i: usize| T::lit(PADE13[i]);
    let a4 = a2.matmul(a2);
    let a6 = a4.matmul(a2);
    let mut inner_u = a6.scale(b(13));
    inner_u.add_assign_scaled(&a4, b(11));
    inner_u.add_assign_scaled(a2, b(9));
    let mut u = a6.matmul(&inner_u);
    u.add_assign_scaled(&a6, b(7));
    u.add_assign_scaled(&a4, b(5));
    u.add_assign_scaled(a2, b(3));
    u.add_assign_scaled(ident, b(1));
    let u = a.matmul(&u);
    let mut inner_v = a6.scale(b(12));
    inner_v.add_assign_scaled(&a4, b(10));
    inner_v.add_assign_scaled(a2, b(8));
    let mut v = a6.matmul(&inner_v);
    v.add_assign_scaled(&a6, b(6));
    v.add_assign_scaled(&a4, b(4));
    v.add_assign_scaled(a2, b(2));
    v.add_assign_scaled(ident, b(0));
    solve_pade(&u, &v)
}

fn solve_pade<T: Real>(u: &Matrix<T>, v: &Matrix<T>) -> Result<Matrix<T>> {
    let p = v.add(u);
    let q = v.sub(u);
    q.solve(&p)
        .ok_or_else(|| Error::Numerical("singular Padé denominator".into()))
}

/// `(exp(A), L(A, E))` where `L` is the Fréchet derivative of the exponential.
pub fn matrix_exp_frechet<T: Real>(a: &Matrix<T>, e: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    let n = a.rows();
    let block = Matrix::from_fn(2 * n, 2 * n, |i, j| match (i < n, j < n) {
        (true, true) => a[(i, j)],
        (true, false) => e[(i, j - n)],
        (false, true) => T::zero(),
        (false, false) => a[(i - n, j - n)],
    });
    let big = matrix_exp(&block)?;
    let exp = Matrix::from_fn(n, n, |i, j| big[(i, j)]);
    let deriv = Matrix::from_fn(n, n, |i, j| big[(i, j + n)]);
    Ok((exp, deriv))
}

/// `exp(Q · duration)` for an intensity matrix `Q`.
pub fn expm<T: Real>(rate_matrix: &Matrix<T>, duration: T) -> Result<TransitionMatrix<T>> {
    check_generator(rate_matrix)?;
    check_duration(duration)?;
    let p = matrix_exp(&rate_matrix.scale(duration))?;
    TransitionMatrix::new(p, T::zero(), duration)
}

/// `exp(Q t)` together with `d/dε exp((Q + εE) t)` at `ε = 0`.
pub fn expm_with_directional_derivative<T: Real>(
    rate_matrix: &Matrix<T>,
    duration: T,
    direction: &Matrix<T>,
) -> Result<(TransitionMatrix<T>, Matrix<T>)> {
    check_generator(rate_matrix)?;
    check_duration(duration)?;
    if direction.rows() != rate_matrix.rows() || direction.cols() != rate_matrix.cols() {
        return Err(Error::Domain(
            "direction must match the intensity shape".into(),
        ));
    }
    let (p, d) = matrix_exp_frechet(&rate_matrix.scale(duration), &direction.scale(duration))?;
    Ok((TransitionMatrix::new(p, T::zero(), duration)?, d))
}

/// Transition probabilities over `[from_age, to_age)`: the ordered product of
/// per-segment exponentials.
pub fn interval_transition<T: Real>(
    intensity: &PiecewiseIntensity<T>,
    from_age: T,
    to_age: T,
) -> Result<TransitionMatrix<T>> {
    let pieces = intensity.partition().pieces(from_age, to_age)?;
    let n = intensity.num_states();
    let mut acc: Option<Matrix<T>> = None;
    for piece in pieces {
        let q = intensity.generator(piece.segment);
        let p = matrix_exp(&q.scale(piece.duration()))?;
        acc = Some(match acc {
            None => p,
            Some(a) => a.matmul(&p),
        });
    }
    match acc {
        None => Ok(TransitionMatrix::identity(n, from_age)),
        Some(p) => TransitionMatrix::new(p, from_age, to_age),
    }
}
