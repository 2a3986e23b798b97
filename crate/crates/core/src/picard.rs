//! Damped fixed-point (Picard/Gummel) outer iteration shared by the macro,
//! thin-double-layer and micro solvers.
//!
//! One sweep produces candidate fields from the current state; the
//! controller blends old and candidate states with a damping factor, halves
//! the factor until the combined residual decreases (monotonicity is
//! enforced), and resets it after three consecutive undamped decreases.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Solver settings for the nonlinear outer iteration and its inner linear
/// solves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardControls {
    /// Relative combined residual required for convergence.
    pub tol_nl: f64,
    /// Maximum outer iterations.
    pub max_outer: usize,
    /// Initial damping factor in (0, 1].
    pub damping: f64,
    /// Relative residual for inner linear solves.
    pub tol_lin: f64,
    /// Inner iteration cap as a multiple of the unknown count.
    pub max_lin_factor: usize,
}

impl Default for PicardControls {
    fn default() -> Self {
        Self {
            tol_nl: 1e-8,
            max_outer: 200,
            damping: 1.0,
            tol_lin: 1e-10,
            max_lin_factor: 10,
        }
    }
}

/// Outcome of one outer iteration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardOutcome {
    pub converged: bool,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub final_damping: f64,
    /// Set when even the smallest damping factor could not decrease the
    /// residual; the returned state is the last accepted one.
    pub stalled: bool,
}

const MIN_DAMPING: f64 = 1e-8;

/// Runs the damped fixed-point loop on a set of nodal fields.
///
/// `sweep(fields, omega)` performs one damped Gummel pass and returns the
/// trial state (the solver blends internally so the trial stays consistent
/// at small omega); `residual` evaluates the combined nonlinear residual.
/// A trial is accepted only when it decreases the residual; otherwise
/// omega is halved and the sweep repeated.
pub fn run(
    controls: &PicardControls,
    fields: &mut Vec<Vec<f64>>,
    mut residual: impl FnMut(&[Vec<f64>]) -> f64,
    mut sweep: impl FnMut(&[Vec<f64>], f64) -> Result<Vec<Vec<f64>>>,
) -> Result<PicardOutcome> {
    if !(controls.damping > 0.0 && controls.damping <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "damping must lie in (0, 1], got {}",
            controls.damping
        )));
    }
    let mut history = Vec::new();
    let mut res = residual(fields);
    history.push(res);
    let mut omega = controls.damping;
    let mut consecutive_full = 0usize;

    if res < controls.tol_nl {
        return Ok(PicardOutcome {
            converged: true,
            iterations: 0,
            residual_history: history,
            final_damping: omega,
            stalled: false,
        });
    }

    for it in 1..=controls.max_outer {
        let mut halved = false;
        loop {
            let trial = sweep(fields, omega)?;
            let trial_res = residual(&trial);
            if trial_res < res || trial_res < controls.tol_nl {
                *fields = trial;
                res = trial_res;
                break;
            }
            if omega <= MIN_DAMPING {
                // Even heavy damping increases the residual: stop with the
                // last accepted state.
                history.push(res);
                return Ok(PicardOutcome {
                    converged: false,
                    iterations: it,
                    residual_history: history,
                    final_damping: omega,
                    stalled: true,
                });
            }
            omega *= 0.5;
            halved = true;
        }
        history.push(res);
        if halved {
            consecutive_full = 0;
        } else {
            consecutive_full += 1;
            if consecutive_full >= 3 {
                omega = controls.damping;
                consecutive_full = 0;
            }
        }
        if res < controls.tol_nl {
            return Ok(PicardOutcome {
                converged: true,
                iterations: it,
                residual_history: history,
                final_damping: omega,
                stalled: false,
            });
        }
    }
    Ok(PicardOutcome {
        converged: false,
        iterations: controls.max_outer,
        residual_history: history,
        final_damping: omega,
        stalled: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converges_on_contractive_map() {
        // x <- cos(x): contraction with fixed point ~0.739.
        let controls = PicardControls {
            tol_nl: 1e-12,
            ..Default::default()
        };
        let mut fields = vec![vec![0.0]];
        let out = run(
            &controls,
            &mut fields,
            |f| (f[0][0] - f[0][0].cos()).abs(),
            |f, w| Ok(vec![vec![(1.0 - w) * f[0][0] + w * f[0][0].cos()]]),
        )
        .unwrap();
        assert!(out.converged);
        assert!((fields[0][0] - 0.7390851332151607).abs() < 1e-10);
        // Residual history is monotone after the first entry.
        for w in out.residual_history.windows(2).skip(1) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn warm_start_converges_immediately() {
        let controls = PicardControls::default();
        let mut fields = vec![vec![0.7390851332151607]];
        let out = run(
            &controls,
            &mut fields,
            |f| (f[0][0] - f[0][0].cos()).abs(),
            |f, w| Ok(vec![vec![(1.0 - w) * f[0][0] + w * f[0][0].cos()]]),
        )
        .unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn damping_engages_on_overshooting_map() {
        // x <- -1.9 x would diverge undamped; damping makes it contract to 0.
        let controls = PicardControls {
            tol_nl: 1e-10,
            max_outer: 500,
            ..Default::default()
        };
        let mut fields = vec![vec![1.0]];
        let out = run(
            &controls,
            &mut fields,
            |f| f[0][0].abs(),
            |f, w| Ok(vec![vec![(1.0 - w) * f[0][0] + w * -1.9 * f[0][0]]]),
        )
        .unwrap();
        assert!(out.converged, "history: {:?}", out.residual_history);
        assert!(fields[0][0].abs() < 1e-9);
    }

    #[test]
    fn max_outer_reports_divergence() {
        let controls = PicardControls {
            tol_nl: 1e-10,
            max_outer: 5,
            ..Default::default()
        };
        let mut fields = vec![vec![1.0]];
        let out = run(
            &controls,
            &mut fields,
            |f| f[0][0].abs(),
            |f, w| Ok(vec![vec![(1.0 - w) * f[0][0] + w * 0.99 * f[0][0]]]),
        )
        .unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 5);
    }

    #[test]
    fn invalid_damping_rejected() {
        let controls = PicardControls {
            damping: 0.0,
            ..Default::default()
        };
        let mut fields = vec![vec![1.0]];
        assert!(run(&controls, &mut fields, |_| 1.0, |f, _| Ok(f.to_vec())).is_err());
    }
}
