//! Limited-memory BFGS for smooth unconstrained minimization.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::{dot, sqrt};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsControl {
    pub max_iters: usize,
    /// Stop once the Euclidean gradient norm falls to this value.
    pub grad_tol: f64,
    pub memory: usize,
}

impl Default for LbfgsControl {
    fn default() -> Self {
        LbfgsControl { max_iters: 500, grad_tol: 1e-6, memory: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `f`, which writes the gradient into its second argument and
/// returns the value. Uses backtracking Armijo line search.
pub fn minimize<F: FnMut(&[f64], &mut [f64]) -> f64>(mut f: F, x0: Vec<f64>, ctrl: &LbfgsControl) -> LbfgsResult {
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut value = f(&x, &mut g);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(ctrl.memory);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut iterations = 0;
    loop {
        let gn = sqrt(dot(&g, &g));
        if gn <= ctrl.grad_tol || !value.is_finite() {
            return LbfgsResult { x, value, grad_norm: gn, iterations, converged: gn <= ctrl.grad_tol };
        }
        if iterations >= ctrl.max_iters {
            return LbfgsResult { x, value, grad_norm: gn, iterations, converged: false };
        }
        // Two-loop recursion for d = -H g.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = match history.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / gn.max(1.0),
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.into_iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            history.clear();
            dir = g.iter().map(|v| -v / gn.max(1.0)).collect();
            slope = dot(&g, &dir);
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * dir[i];
            }
            let v = f(&x_new, &mut g_new);
            if v.is_finite() && v <= value + 1e-4 * step * slope {
                value = v;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            let gn = sqrt(dot(&g, &g));
            return LbfgsResult { x, value, grad_norm: gn, iterations, converged: gn <= ctrl.grad_tol };
        }
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * sqrt(dot(&s, &s) * dot(&y, &y)) {
            if history.len() == ctrl.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        core::mem::swap(&mut x, &mut x_new);
        core::mem::swap(&mut g, &mut g_new);
    }
}
