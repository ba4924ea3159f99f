//! Dense square solves for `M X = B`.
//!
//! Small systems only (N up to a few hundred). LU with partial pivoting in the
//! general case; lower- or upper-triangular `M` is detected and solved by
//! substitution directly, which is the common case for `I - A^T` when `A` is a
//! DAG whose nodes are already in topological order.

use super::matrix::Tensor2;
use crate::error::DiffError;

/// Systems whose pivot-ratio condition estimate exceeds this are rejected.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Structure {
    Lower,
    Upper,
    General,
}

/// A factorized square matrix, reusable for `M X = B` and `M^T X = B`.
#[derive(Debug, Clone)]
pub struct Factorization {
    n: usize,
    structure: Structure,
    /// Packed LU factors (unit lower L below the diagonal, U on and above),
    /// or the original triangular matrix on the fast path.
    lu: Tensor2,
    perm: Vec<usize>,
    condition: f64,
}

impl Factorization {
    pub fn new(m: &Tensor2) -> Result<Self, DiffError> {
        let n = m.rows();
        if m.cols() != n {
            return Err(DiffError::Shape(format!("solve needs a square matrix, got {}x{}", n, m.cols())));
        }
        if !m.is_finite() {
            return Err(DiffError::NonFinite("solve matrix".into()));
        }
        let structure = detect_structure(m);
        let (lu, perm) = match structure {
            Structure::General => lu_decompose(m)?,
            _ => (m.clone(), (0..n).collect()),
        };
        let condition = pivot_condition(&lu);
        if !(condition <= MAX_CONDITION) {
            return Err(DiffError::Singular { condition });
        }
        Ok(Self { n, structure, lu, perm, condition })
    }

    pub fn condition_estimate(&self) -> f64 {
        self.condition
    }

    pub fn is_triangular(&self) -> bool {
        self.structure != Structure::General
    }

    /// Solves `M X = B`.
    pub fn solve(&self, b: &Tensor2) -> Tensor2 {
        assert_eq!(b.rows(), self.n, "solve rhs has {} rows, system has {}", b.rows(), self.n);
        let mut x = b.clone();
        match self.structure {
            Structure::Lower => forward_sub(&self.lu, &mut x, false),
            Structure::Upper => back_sub(&self.lu, &mut x),
            Structure::General => {
                let mut pb = Tensor2::zeros(b.rows(), b.cols());
                for (i, &p) in self.perm.iter().enumerate() {
                    pb.row_mut(i).copy_from_slice(b.row(p));
                }
                x = pb;
                forward_sub(&self.lu, &mut x, true);
                back_sub(&self.lu, &mut x);
            }
        }
        x
    }

    /// Solves `M^T X = B`.
    pub fn solve_transpose(&self, b: &Tensor2) -> Tensor2 {
        assert_eq!(b.rows(), self.n);
        match self.structure {
            Structure::Lower | Structure::Upper => {
                let t = self.lu.transpose();
                let mut x = b.clone();
                if self.structure == Structure::Lower {
                    back_sub(&t, &mut x);
                } else {
                    forward_sub(&t, &mut x, false);
                }
                x
            }
            Structure::General => {
                // P M = L U  =>  M^T = U^T L^T P, so solve U^T y = b, L^T z = y, x = P^T z.
                let t = self.lu.transpose();
                let mut y = b.clone();
                forward_sub(&t, &mut y, false);
                back_sub_unit(&t, &mut y);
                let mut x = Tensor2::zeros(b.rows(), b.cols());
                for (i, &p) in self.perm.iter().enumerate() {
                    x.row_mut(p).copy_from_slice(y.row(i));
                }
                x
            }
        }
    }
}

/// Convenience wrapper: factorize and solve once.
pub fn solve(m: &Tensor2, b: &Tensor2) -> Result<Tensor2, DiffError> {
    Ok(Factorization::new(m)?.solve(b))
}

fn detect_structure(m: &Tensor2) -> Structure {
    let n = m.rows();
    let mut lower = true;
    let mut upper = true;
    for i in 0..n {
        for j in 0..n {
            if m[(i, j)] != 0.0 {
                if j > i {
                    lower = false;
                }
                if j < i {
                    upper = false;
                }
            }
        }
    }
    match (lower, upper) {
        (true, _) => Structure::Lower,
        (_, true) => Structure::Upper,
        _ => Structure::General,
    }
}

fn lu_decompose(m: &Tensor2) -> Result<(Tensor2, Vec<usize>), DiffError> {
    let n = m.rows();
    let mut a = m.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut pivot = k;
        let mut best = a[(k, k)].abs();
        for i in k + 1..n {
            let v = a[(i, k)].abs();
            if v > best {
                best = v;
                pivot = i;
            }
        }
        if best == 0.0 {
            return Err(DiffError::Singular { condition: f64::INFINITY });
        }
        if pivot != k {
            perm.swap(k, pivot);
            for j in 0..n {
                let tmp = a[(k, j)];
                a[(k, j)] = a[(pivot, j)];
                a[(pivot, j)] = tmp;
            }
        }
        let d = a[(k, k)];
        for i in k + 1..n {
            let f = a[(i, k)] / d;
            a[(i, k)] = f;
            if f != 0.0 {
                for j in k + 1..n {
                    a[(i, j)] -= f * a[(k, j)];
                }
            }
        }
    }
    Ok((a, perm))
}

fn pivot_condition(lu: &Tensor2) -> f64 {
    let n = lu.rows();
    let mut max = 0.0f64;
    let mut min = f64::INFINITY;
    for i in 0..n {
        let d = lu[(i, i)].abs();
        max = max.max(d);
        min = min.min(d);
    }
    if n == 0 {
        1.0
    } else if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// In-place `L x = b` with L lower triangular; `unit` treats the diagonal as ones.
fn forward_sub(l: &Tensor2, x: &mut Tensor2, unit: bool) {
    let n = l.rows();
    let c = x.cols();
    for i in 0..n {
        for k in 0..i {
            let f = l[(i, k)];
            if f != 0.0 {
                for j in 0..c {
                    let v = x[(k, j)];
                    x[(i, j)] -= f * v;
                }
            }
        }
        if !unit {
            let d = l[(i, i)];
            for j in 0..c {
                x[(i, j)] /= d;
            }
        }
    }
}

/// In-place `U x = b` with U upper triangular.
fn back_sub(u: &Tensor2, x: &mut Tensor2) {
    let n = u.rows();
    let c = x.cols();
    for i in (0..n).rev() {
        for k in i + 1..n {
            let f = u[(i, k)];
            if f != 0.0 {
                for j in 0..c {
                    let v = x[(k, j)];
                    x[(i, j)] -= f * v;
                }
            }
        }
        let d = u[(i, i)];
        for j in 0..c {
            x[(i, j)] /= d;
        }
    }
}

/// In-place unit-diagonal upper solve (transposed unit-lower factor).
fn back_sub_unit(u: &Tensor2, x: &mut Tensor2) {
    let n = u.rows();
    let c = x.cols();
    for i in (0..n).rev() {
        for k in i + 1..n {
            let f = u[(i, k)];
            if f != 0.0 {
                for j in 0..c {
                    let v = x[(k, j)];
                    x[(i, j)] -= f * v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn residual(m: &Tensor2, x: &Tensor2, b: &Tensor2) -> f64 {
        m.matmul(x).sub(b).max_abs()
    }

    #[test]
    fn identity_returns_rhs() {
        let b = Tensor2::from_fn(3, 2, |i, j| (i * 2 + j) as f64 - 1.5);
        let x = solve(&Tensor2::identity(3), &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn general_system_residual() {
        let m = Tensor2::from_rows(&[vec![0.0, 2.0, 1.0], vec![1.0, -1.0, 3.0], vec![4.0, 1.0, 0.5]]);
        let b = Tensor2::from_rows(&[vec![1.0, 0.0], vec![2.0, 1.0], vec![3.0, -1.0]]);
        let f = Factorization::new(&m).unwrap();
        assert!(!f.is_triangular());
        let x = f.solve(&b);
        assert!(residual(&m, &x, &b) <= 1e-8 * b.max_abs());
        let xt = f.solve_transpose(&b);
        assert!(residual(&m.transpose(), &xt, &b) <= 1e-8 * b.max_abs());
    }

    #[test]
    fn triangular_fast_path_both_orientations() {
        let l = Tensor2::from_rows(&[vec![1.0, 0.0, 0.0], vec![-0.5, 1.0, 0.0], vec![0.25, 2.0, 1.0]]);
        let b = Tensor2::from_fn(3, 2, |i, j| 1.0 + i as f64 - j as f64);
        for m in [l.clone(), l.transpose()] {
            let f = Factorization::new(&m).unwrap();
            assert!(f.is_triangular());
            assert!(residual(&m, &f.solve(&b), &b) < 1e-12);
            assert!(residual(&m.transpose(), &f.solve_transpose(&b), &b) < 1e-12);
        }
    }

    #[test]
    fn singular_reports_condition() {
        let m = Tensor2::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        match Factorization::new(&m) {
            Err(DiffError::Singular { condition }) => assert!(condition > MAX_CONDITION),
            other => panic!("expected singular, got {other:?}"),
        }
    }
}
