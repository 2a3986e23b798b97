//! Piecewise-multilinear (Q1) element integrals on axis-aligned voxels.
//!
//! Shape functions are tensor products of 1D hat functions, so all element
//! integrals factor into 1D integrals and are evaluated exactly:
//!   int l_s' l_t' = +1 / -1,  int l_s l_t = 1/3 or 1/6,  int l_s' = -/+1,
//!   int l_s = 1/2 on the unit interval.

/// Number of element corners in `dim` dimensions.
pub fn corners(dim: usize) -> usize {
    1 << dim
}

/// Offset of corner `c` along axis `a` (0 or 1), from the corner bit pattern.
#[inline]
pub fn corner_offset(c: usize, a: usize) -> usize {
    (c >> a) & 1
}

/// Exact element stiffness matrix int_elem grad(phi_i) . grad(phi_j) for a
/// cube of side `h` in `dim` dimensions, indexed by corner bit patterns.
pub fn stiffness(dim: usize, h: f64) -> Vec<Vec<f64>> {
    let nc = corners(dim);
    let scale = h.powi(dim as i32 - 2);
    let mut k = vec![vec![0.0; nc]; nc];
    for i in 0..nc {
        for j in 0..nc {
            let mut acc = 0.0;
            for a in 0..dim {
                let mut term = grad_pair(corner_offset(i, a), corner_offset(j, a));
                for b in 0..dim {
                    if b != a {
                        term *= mass_pair(corner_offset(i, b), corner_offset(j, b));
                    }
                }
                acc += term;
            }
            k[i][j] = acc * scale;
        }
    }
    k
}

/// Exact integral int_elem d(phi_i)/d(x_axis) for each corner, for a cube of
/// side `h`. This is the load produced by a unit macroscopic gradient.
pub fn grad_load(dim: usize, h: f64, axis: usize) -> Vec<f64> {
    let nc = corners(dim);
    let scale = h.powi(dim as i32 - 1);
    (0..nc)
        .map(|c| {
            let mut term = grad_single(corner_offset(c, axis));
            for b in 0..dim {
                if b != axis {
                    term *= 0.5;
                }
            }
            term * scale
        })
        .collect()
}

/// Gradient of each shape function at the element midpoint; component `axis`
/// of corner `c` for a cube of side `h`.
pub fn center_gradient(dim: usize, h: f64, c: usize, axis: usize) -> f64 {
    let sign = if corner_offset(c, axis) == 1 { 1.0 } else { -1.0 };
    sign / h * 0.5f64.powi(dim as i32 - 1)
}

#[inline]
fn grad_pair(s: usize, t: usize) -> f64 {
    if s == t {
        1.0
    } else {
        -1.0
    }
}

#[inline]
fn mass_pair(s: usize, t: usize) -> f64 {
    if s == t {
        1.0 / 3.0
    } else {
        1.0 / 6.0
    }
}

#[inline]
fn grad_single(s: usize) -> f64 {
    if s == 1 {
        1.0
    } else {
        -1.0
    }
}
