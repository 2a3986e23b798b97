//! Sparse CSR matrices and the iterative solvers used throughout:
//! Jacobi-preconditioned conjugate gradients for the symmetric systems
//! (cell problems, Poisson, pure diffusion) and BiCGStab for the
//! nonsymmetric drift-diffusion systems.

use crate::error::{Error, Result};

/// Compressed sparse row matrix. Rows are assembled from (col, val) lists
/// and compressed once; duplicate column entries are merged.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_rows(mut rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in rows.iter_mut() {
            row.sort_unstable_by_key(|(c, _)| *c);
            let mut last: Option<usize> = None;
            for &(c, v) in row.iter() {
                if last == Some(c) {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(cols.len());
        }
        Self { n, row_ptr, cols, vals }
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            out[i] = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                if self.cols[k] == i {
                    d[i] = self.vals[k];
                }
            }
        }
        d
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (self.cols[k], self.vals[k]))
    }

    /// Adds `value` to the diagonal entry of `row`, which must already
    /// exist in the sparsity pattern.
    pub fn add_to_diagonal(&mut self, row: usize, value: f64) {
        for k in self.row_ptr[row]..self.row_ptr[row + 1] {
            if self.cols[k] == row {
                self.vals[k] += value;
                return;
            }
        }
        panic!("row {row} has no diagonal entry");
    }

    /// Residual norm ||b - A x||_2.
    pub fn residual_norm(&self, x: &[f64], b: &[f64]) -> f64 {
        let mut ax = vec![0.0; self.n];
        self.mul_vec(x, &mut ax);
        b.iter()
            .zip(ax.iter())
            .map(|(bi, ai)| (bi - ai) * (bi - ai))
            .sum::<f64>()
            .sqrt()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Removes the mean of `v` (uniform weights). Used to keep iterates of
/// singular pure-Neumann/periodic systems orthogonal to the constant
/// null vector.
pub fn project_zero_mean(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= mean;
    }
}

/// Jacobi-preconditioned conjugate gradients.
///
/// With `project_constants` the right-hand side, the iterates' residuals
/// and the final solution are projected onto the zero-mean subspace, which
/// handles the constant null space of periodic cell problems without a
/// saddle-point formulation.
pub fn pcg(
    a: &CsrMatrix,
    b: &[f64],
    x0: Option<&[f64]>,
    tol_rel: f64,
    max_iter: usize,
    project_constants: bool,
    context: &str,
) -> Result<(Vec<f64>, usize)> {
    let n = a.nrows();
    let mut b = b.to_vec();
    if project_constants {
        project_zero_mean(&mut b);
    }
    let b_norm = norm(&b);
    if b_norm == 0.0 {
        return Ok((vec![0.0; n], 0));
    }
    let diag = a.diagonal();
    let inv_diag: Vec<f64> = diag
        .iter()
        .map(|d| if d.abs() > 0.0 { 1.0 / d } else { 0.0 })
        .collect();

    let mut x = match x0 {
        Some(v) => v.to_vec(),
        None => vec![0.0; n],
    };
    let mut ax = vec![0.0; n];
    a.mul_vec(&x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(ax.iter()).map(|(bi, ai)| bi - ai).collect();
    if project_constants {
        project_zero_mean(&mut r);
    }
    let mut z: Vec<f64> = r.iter().zip(inv_diag.iter()).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];

    for it in 0..max_iter {
        let r_norm = norm(&r);
        if r_norm <= tol_rel * b_norm {
            if project_constants {
                project_zero_mean(&mut x);
            }
            return Ok((x, it));
        }
        a.mul_vec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::LinearSolve {
                residual: r_norm / b_norm,
                iterations: it,
                context: format!("{context}: non-positive curvature"),
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if project_constants {
            project_zero_mean(&mut r);
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::LinearSolve {
        residual: norm(&r) / b_norm,
        iterations: max_iter,
        context: context.to_string(),
    })
}

/// Jacobi-preconditioned BiCGStab for nonsymmetric systems
/// (drift-diffusion with exponential-fitted fluxes).
pub fn bicgstab(
    a: &CsrMatrix,
    b: &[f64],
    x0: Option<&[f64]>,
    tol_rel: f64,
    max_iter: usize,
    context: &str,
) -> Result<(Vec<f64>, usize)> {
    let n = a.nrows();
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok((vec![0.0; n], 0));
    }
    let diag = a.diagonal();
    let inv_diag: Vec<f64> = diag
        .iter()
        .map(|d| if d.abs() > 0.0 { 1.0 / d } else { 0.0 })
        .collect();
    let precond = |v: &[f64], out: &mut Vec<f64>| {
        out.clear();
        out.extend(v.iter().zip(inv_diag.iter()).map(|(x, d)| x * d));
    };

    let mut x = match x0 {
        Some(v) => v.to_vec(),
        None => vec![0.0; n],
    };
    let mut ax = vec![0.0; n];
    a.mul_vec(&x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(ax.iter()).map(|(bi, ai)| bi - ai).collect();
    let r0 = r.clone();
    let mut rho = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut phat = Vec::with_capacity(n);
    let mut shat = Vec::with_capacity(n);
    let mut t = vec![0.0; n];

    for it in 0..max_iter {
        if norm(&r) <= tol_rel * b_norm {
            return Ok((x, it));
        }
        let rho_new = dot(&r0, &r);
        if rho_new.abs() < f64::MIN_POSITIVE {
            // Restart with the current residual as the shadow vector.
            return match bicgstab_restart(a, b, &x, tol_rel, max_iter.saturating_sub(it), context) {
                Ok((y, its)) => Ok((y, it + its)),
                Err(e) => Err(e),
            };
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        precond(&p, &mut phat);
        a.mul_vec(&phat, &mut v);
        alpha = rho / dot(&r0, &v);
        let s: Vec<f64> = r.iter().zip(v.iter()).map(|(ri, vi)| ri - alpha * vi).collect();
        if norm(&s) <= tol_rel * b_norm {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            return Ok((x, it + 1));
        }
        precond(&s, &mut shat);
        a.mul_vec(&shat, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] = s[i] - omega * t[i];
        }
        if omega == 0.0 {
            break;
        }
    }
    let res = norm(&r) / b_norm;
    if res <= tol_rel {
        Ok((x, max_iter))
    } else {
        Err(Error::LinearSolve {
            residual: res,
            iterations: max_iter,
            context: context.to_string(),
        })
    }
}

fn bicgstab_restart(
    a: &CsrMatrix,
    b: &[f64],
    x: &[f64],
    tol_rel: f64,
    budget: usize,
    context: &str,
) -> Result<(Vec<f64>, usize)> {
    if budget == 0 {
        return Err(Error::LinearSolve {
            residual: f64::NAN,
            iterations: 0,
            context: format!("{context}: breakdown with no budget left"),
        });
    }
    bicgstab(a, b, Some(x), tol_rel, budget, context)
}
