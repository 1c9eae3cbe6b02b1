//! Dense BFGS with a backtracking Armijo line search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Stop once `‖∇f‖₂` falls to this value.
    pub gradient_tolerance: f64,
    /// Sufficient-decrease constant of the Armijo condition.
    pub sufficient_decrease: f64,
    /// Step shrink factor per backtracking trial.
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Rescale the identity by `sᵗy / yᵗy` after the first accepted step.
    pub scale_initial_hessian: bool,
    /// Early stop when the objective dropped by less than `stall_tolerance`
    /// (relative) over the last `stall_window` iterations. Zero disables.
    pub stall_window: usize,
    pub stall_tolerance: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            gradient_tolerance: 1e-10,
            sufficient_decrease: 1e-4,
            backtrack: 0.5,
            max_backtracks: 60,
            scale_initial_hessian: true,
            stall_window: 3,
            stall_tolerance: 1e-4,
        }
    }
}

impl BfgsOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        if self.gradient_tolerance.is_nan()
            || self.gradient_tolerance <= 0.0
            || self.stall_tolerance.is_nan()
            || self.stall_tolerance < 0.0
        {
            return Err(Error::invalid("tolerances must be positive"));
        }
        if !(self.sufficient_decrease > 0.0 && self.sufficient_decrease < 1.0) {
            return Err(Error::invalid("sufficient_decrease must lie in (0, 1)"));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::invalid("backtrack must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BfgsStatus {
    Converged,
    MaxIterations,
    Stalled,
    LineSearchFailed,
}

#[derive(Clone, Debug)]
pub struct BfgsReport {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub status: BfgsStatus,
    /// Objective at the start point and after every accepted step.
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_finite(value: f64, grad: &[f64], x: &[f64]) -> Result<()> {
    if value.is_finite() && grad.iter().all(|g| g.is_finite()) {
        return Ok(());
    }
    let head: Vec<String> = x.iter().take(6).map(|v| format!("{v:.6e}")).collect();
    Err(Error::Numerical(format!(
        "non-finite objective or gradient (f = {value}) at iterate with ‖x‖ = {:.6e}, first entries [{}]",
        norm(x),
        head.join(", ")
    )))
}

fn project(x: &mut [f64], lower: Option<&[f64]>) {
    if let Some(lb) = lower {
        x.iter_mut().zip(lb).for_each(|(v, &l)| *v = v.max(l));
    }
}

/// Minimizes `f`, which returns the objective and its gradient.
///
/// `lower` optionally clamps iterates componentwise (use `-∞` for free
/// components).
pub fn minimize<F>(mut f: F, x0: &[f64], lower: Option<&[f64]>, opts: &BfgsOptions) -> Result<BfgsReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    opts.validate()?;
    let n = x0.len();
    if let Some(lb) = lower {
        if lb.len() != n {
            return Err(Error::DimensionMismatch {
                context: "bfgs lower bounds",
                expected: n,
                actual: lb.len(),
            });
        }
    }
    let mut x = x0.to_vec();
    project(&mut x, lower);
    let (mut fx, mut g) = f(&x);
    check_finite(fx, &g, &x)?;
    let mut history = vec![fx];
    // Inverse Hessian approximation, row-major.
    let mut h = vec![0.0; n * n];
    let reset = |h: &mut [f64], scale: f64| {
        h.iter_mut().for_each(|v| *v = 0.0);
        (0..n).for_each(|i| h[i * n + i] = scale);
    };
    reset(&mut h, 1.0);
    let mut status = BfgsStatus::MaxIterations;
    let mut iterations = 0;
    let mut first_update = true;
    let mut p = vec![0.0; n];
    let mut hy = vec![0.0; n];

    while iterations < opts.max_iterations {
        if norm(&g) <= opts.gradient_tolerance {
            status = BfgsStatus::Converged;
            break;
        }
        for (i, pi) in p.iter_mut().enumerate() {
            *pi = -dot(&h[i * n..(i + 1) * n], &g);
        }
        let mut slope = dot(&p, &g);
        if slope.is_nan() || slope >= 0.0 {
            reset(&mut h, 1.0);
            p.iter_mut().zip(&g).for_each(|(pi, gi)| *pi = -gi);
            slope = -dot(&g, &g);
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let mut trial: Vec<f64> = x.iter().zip(&p).map(|(xi, pi)| xi + alpha * pi).collect();
            project(&mut trial, lower);
            let (ft, gt) = f(&trial);
            if ft.is_finite() && ft <= fx + opts.sufficient_decrease * alpha * slope {
                check_finite(ft, &gt, &trial)?;
                accepted = Some((trial, ft, gt));
                break;
            }
            alpha *= opts.backtrack;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            status = BfgsStatus::LineSearchFailed;
            break;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if first_update && opts.scale_initial_hessian {
                reset(&mut h, sy / dot(&y, &y));
            }
            first_update = false;
            for (i, v) in hy.iter_mut().enumerate() {
                *v = dot(&h[i * n..(i + 1) * n], &y);
            }
            let yhy = dot(&y, &hy);
            let rho = 1.0 / sy;
            let coef = (1.0 + rho * yhy) * rho;
            // H ← H - ρ(s (Hy)ᵗ + (Hy) sᵗ) + ρ(1 + ρ yᵗHy) s sᵗ, using symmetry of H.
            for i in 0..n {
                let row = &mut h[i * n..(i + 1) * n];
                let (si, hyi) = (s[i], hy[i]);
                for j in 0..n {
                    row[j] += coef * si * s[j] - rho * (si * hy[j] + hyi * s[j]);
                }
            }
        }

        x = x_new;
        fx = f_new;
        g = g_new;
        history.push(fx);
        iterations += 1;

        let w = opts.stall_window;
        if w > 0 && history.len() > w {
            let before = history[history.len() - 1 - w];
            if before - fx <= opts.stall_tolerance * before.abs() {
                status = BfgsStatus::Stalled;
                break;
            }
        }
    }
    if status == BfgsStatus::MaxIterations && norm(&g) <= opts.gradient_tolerance {
        status = BfgsStatus::Converged;
    }
    Ok(BfgsReport {
        gradient_norm: norm(&g),
        x,
        value: fx,
        iterations,
        status,
        history,
    })
}
