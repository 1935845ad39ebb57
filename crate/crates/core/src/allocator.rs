//! Proportional-fair rate allocation for shaped flows sharing one link.
//!
//! Each flow `f` picks an information rate `p_f` and (if private) a dummy
//! rate `d_f`. The problem is
//!
//! ```text
//! minimise   U(p) = sum_f -log p_f
//! subject to w(p_f, d_f) <= sigma_f          for private f
//!            sum_f (p_f + d_f) / psi_f <= 1
//!            0 <= p_f, d_f <= 1,  d_f = 0 for non-private f,  d_f > 0 otherwise
//! ```
//!
//! `w` is not jointly convex in `(p, d)`, so the solver alternates between a
//! block of steps in `p` with `d` held fixed and a block in `d` with `p` held
//! fixed. Both blocks minimise an augmented Lagrangian and share one set of
//! multipliers, which are updated after every round.

use std::fmt;
use std::io::Read;

use rayon::prelude::*;
use serde::Serialize;

use crate::convexity::first_derivatives;
use crate::error::{Error, Result};

/// Lower box bound on information rates.
pub const P_MIN: f64 = 1e-6;

/// Sufficient-decrease constant of the backtracking line search.
const ARMIJO: f64 = 1e-4;
const SWEEPS: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowSpec {
    pub id: String,
    /// Mean delay deadline, in slots.
    pub sigma: f64,
    /// Physical transmit rate.
    pub psi: f64,
    pub private: bool,
}

impl FlowSpec {
    pub fn new(id: impl Into<String>, sigma: f64, psi: f64, private: bool) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::domain("sigma", sigma, "> 0"));
        }
        if !(psi > 0.0 && psi.is_finite()) {
            return Err(Error::domain("psi", psi, "> 0"));
        }
        Ok(Self {
            id: id.into(),
            sigma,
            psi,
            private,
        })
    }

    pub fn private(id: impl Into<String>, sigma: f64) -> Self {
        Self::new(id, sigma, 1.0, true).expect("sigma must be positive")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Initial step of each line search.
    pub step_size: f64,
    pub inner_iters: usize,
    pub outer_iters: usize,
    pub epsilon_d: f64,
    pub tolerance: f64,
    /// Penalty weight of the augmented Lagrangian.
    pub penalty: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            inner_iters: 5000,
            outer_iters: 50,
            epsilon_d: 1e-4,
            tolerance: 1e-6,
            penalty: 10.0,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = |name, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::domain(name, v, "> 0"))
            }
        };
        positive("step_size", self.step_size)?;
        positive("epsilon_d", self.epsilon_d)?;
        positive("tolerance", self.tolerance)?;
        positive("penalty", self.penalty)?;
        if self.inner_iters == 0 || self.outer_iters == 0 {
            return Err(Error::Degenerate("iteration counts must be positive"));
        }
        if self.epsilon_d >= 1.0 {
            return Err(Error::domain("epsilon_d", self.epsilon_d, "< 1"));
        }
        Ok(())
    }
}

/// Lagrange multipliers. `lambda1` prices the delay deadlines, `lambda2` the
/// link, `lambda3`/`lambda4` the bounds `p <= 1 - d` and `p >= 0`, and
/// `lambda5` the bound `d >= epsilon_d`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Multipliers {
    pub lambda1: Vec<f64>,
    pub lambda2: f64,
    pub lambda3: Vec<f64>,
    pub lambda4: Vec<f64>,
    pub lambda5: Vec<f64>,
}

impl Multipliers {
    pub fn zeros(n: usize) -> Self {
        Self {
            lambda1: vec![0.0; n],
            lambda2: 0.0,
            lambda3: vec![0.0; n],
            lambda4: vec![0.0; n],
            lambda5: vec![0.0; n],
        }
    }

    pub fn is_nonnegative(&self) -> bool {
        self.lambda2 >= 0.0
            && [&self.lambda1, &self.lambda3, &self.lambda4, &self.lambda5]
                .iter()
                .all(|v| v.iter().all(|&x| x >= 0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationResult {
    pub p_star: Vec<f64>,
    pub d_star: Vec<f64>,
    pub multipliers: Multipliers,
    /// Objective of the accepted allocation after each outer round.
    pub objective_trace: Vec<f64>,
    pub feasible: bool,
    pub converged: bool,
}

impl AllocationResult {
    pub fn objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// `U(p) = sum -log p_f`.
pub fn evaluate_objective(p: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for &x in p {
        if !(x > 0.0) {
            return Err(Error::domain("p", x, "> 0"));
        }
        total -= x.ln();
    }
    Ok(total)
}

/// Waiting time for rates inside the closed domain, `w = 0` at `c = 1`.
fn wait(p: f64, d: f64) -> f64 {
    let c = p + d;
    let backlog = ((p - d) * (1.0 - p) / (p * d)).max(0.0);
    (1.0 - c) / (2.0 * (1.0 - p)) * (backlog + 1.0 / c)
}

/// `(dw/dp, dw/dd)` with `d` and `p` held fixed respectively.
fn wait_gradient(p: f64, d: f64) -> (f64, f64) {
    match first_derivatives(p, (p + d).min(1.0)) {
        Ok(g) => g.in_rate_coordinates(),
        Err(_) => (0.0, 0.0),
    }
}

fn usage(p: &[f64], d: &[f64], flows: &[FlowSpec]) -> f64 {
    flows.iter().zip(p.iter().zip(d)).map(|(f, (&p, &d))| (p + d) / f.psi).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    Delay { flow: usize, wait: f64, sigma: f64 },
    Network { usage: f64 },
    Bounds { flow: usize, p: f64, d: f64 },
    DummyOnPublicFlow { flow: usize, d: f64 },
    NoDummyOnPrivateFlow { flow: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Delay { flow, wait, sigma } => {
                write!(f, "flow {flow}: mean wait {wait} exceeds deadline {sigma}")
            }
            Violation::Network { usage } => write!(f, "link usage {usage} exceeds 1"),
            Violation::Bounds { flow, p, d } => write!(f, "flow {flow}: rates p = {p}, d = {d} out of [0, 1]"),
            Violation::DummyOnPublicFlow { flow, d } => {
                write!(f, "flow {flow}: non-private flow has dummy rate {d}")
            }
            Violation::NoDummyOnPrivateFlow { flow } => write!(f, "flow {flow}: private flow has no dummy rate"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub violations: Vec<Violation>,
    pub usage: f64,
    /// `w_f` per flow; zero for non-private flows, infinite when undefined.
    pub waits: Vec<f64>,
}

pub fn check_feasible(p: &[f64], d: &[f64], flows: &[FlowSpec], tol: f64) -> FeasibilityReport {
    assert_eq!(p.len(), flows.len(), "p is not conformal with flows");
    assert_eq!(d.len(), flows.len(), "d is not conformal with flows");
    let mut violations = Vec::new();
    let mut waits = vec![0.0; flows.len()];
    for (i, f) in flows.iter().enumerate() {
        let (pi, di) = (p[i], d[i]);
        let in_box = |x: f64| x >= -tol && x <= 1.0 + tol;
        if !(in_box(pi) && in_box(di) && pi + di <= 1.0 + tol) {
            violations.push(Violation::Bounds { flow: i, p: pi, d: di });
        }
        if !f.private {
            if di.abs() > tol {
                violations.push(Violation::DummyOnPublicFlow { flow: i, d: di });
            }
            continue;
        }
        if !(di > 0.0) {
            violations.push(Violation::NoDummyOnPrivateFlow { flow: i });
            waits[i] = f64::INFINITY;
            continue;
        }
        waits[i] = if pi > 0.0 && pi < 1.0 && pi + di <= 1.0 {
            wait(pi, di)
        } else {
            f64::INFINITY
        };
        if !(waits[i] <= f.sigma + tol) {
            violations.push(Violation::Delay {
                flow: i,
                wait: waits[i],
                sigma: f.sigma,
            });
        }
    }
    let usage = usage(p, d, flows);
    if usage > 1.0 + tol {
        violations.push(Violation::Network { usage });
    }
    FeasibilityReport {
        feasible: violations.is_empty(),
        violations,
        usage,
        waits,
    }
}

fn p_upper(flow: &FlowSpec, d: f64) -> f64 {
    if flow.private {
        1.0 - d
    } else {
        1.0
    }
}

/// One projected Arrow-Hurwicz step in `p` with `d` fixed.
///
/// The gradient of the partial Lagrangian is
/// `-1/p + lambda1 dw/dp + lambda2/psi + lambda3 - lambda4`; the multipliers
/// take an ascent step on their constraint residuals at the current point.
pub fn subgradient_step_p(
    p: &[f64],
    d_fixed: &[f64],
    lambda: &Multipliers,
    flows: &[FlowSpec],
    alpha: f64,
) -> (Vec<f64>, Multipliers) {
    let mut next = lambda.clone();
    let p_next = flows
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let (pi, di) = (p[i], d_fixed[i]);
            let mut grad = -1.0 / pi + lambda.lambda2 / f.psi + lambda.lambda3[i] - lambda.lambda4[i];
            if f.private {
                grad += lambda.lambda1[i] * wait_gradient(pi, di).0;
            }
            next.lambda3[i] = (lambda.lambda3[i] + alpha * (pi + di - 1.0)).max(0.0);
            next.lambda4[i] = (lambda.lambda4[i] - alpha * pi).max(0.0);
            (pi - alpha * grad).clamp(P_MIN, p_upper(f, di))
        })
        .collect();
    ascend_shared(&mut next, lambda, p, d_fixed, flows, alpha);
    (p_next, next)
}

/// One projected Arrow-Hurwicz step in `d` with `p` fixed. Non-private flows
/// keep `d = 0`.
pub fn subgradient_step_d(
    p_fixed: &[f64],
    d: &[f64],
    lambda: &Multipliers,
    flows: &[FlowSpec],
    alpha: f64,
    epsilon_d: f64,
) -> (Vec<f64>, Multipliers) {
    let mut next = lambda.clone();
    let d_next = flows
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if !f.private {
                return 0.0;
            }
            let (pi, di) = (p_fixed[i], d[i]);
            let grad = lambda.lambda1[i] * wait_gradient(pi, di).1 + lambda.lambda2 / f.psi - lambda.lambda5[i];
            next.lambda5[i] = (lambda.lambda5[i] + alpha * (epsilon_d - di)).max(0.0);
            (di - alpha * grad).clamp(epsilon_d, (1.0 - pi).max(epsilon_d))
        })
        .collect();
    ascend_shared(&mut next, lambda, p_fixed, d, flows, alpha);
    (d_next, next)
}

fn ascend_shared(next: &mut Multipliers, lambda: &Multipliers, p: &[f64], d: &[f64], flows: &[FlowSpec], alpha: f64) {
    for (i, f) in flows.iter().enumerate() {
        next.lambda1[i] = if f.private && d[i] > 0.0 {
            (lambda.lambda1[i] + alpha * (wait(p[i], d[i]) - f.sigma)).max(0.0)
        } else {
            0.0
        };
    }
    next.lambda2 = (lambda.lambda2 + alpha * (usage(p, d, flows) - 1.0)).max(0.0);
}

/// Augmented Lagrangian with the delay constraints scaled by `1/sigma`.
struct Problem<'a> {
    flows: &'a [FlowSpec],
    rho: f64,
    epsilon_d: f64,
}

/// Multipliers as seen by one block. `ceiling` prices `p + d <= 1`, which
/// the rate block enforces by projection; handing its multiplier to the
/// dummy block lets `d` give way when `p` is pinned against that bound.
struct Prices<'a> {
    delay: &'a [f64],
    link: f64,
    ceiling: &'a [f64],
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Block {
    Rates,
    Dummies,
}

impl Problem<'_> {
    fn residuals(&self, p: &[f64], d: &[f64]) -> (Vec<f64>, f64) {
        let delay = self
            .flows
            .iter()
            .enumerate()
            .map(|(i, f)| if f.private { wait(p[i], d[i]) / f.sigma - 1.0 } else { 0.0 })
            .collect();
        (delay, usage(p, d, self.flows) - 1.0)
    }

    fn lagrangian(&self, p: &[f64], d: &[f64], prices: &Prices) -> f64 {
        let (g1, g2) = self.residuals(p, d);
        let r = self.rho;
        let term = |l: f64, g: f64| ((l + r * g).max(0.0).powi(2) - l * l) / (2.0 * r);
        let objective: f64 = p.iter().map(|x| -x.ln()).sum();
        let ceiling: f64 = prices.ceiling.iter().zip(p.iter().zip(d)).map(|(l, (p, d))| l * (p + d - 1.0)).sum();
        objective + prices.delay.iter().zip(&g1).map(|(&l, &g)| term(l, g)).sum::<f64>() + term(prices.link, g2) + ceiling
    }

    /// Gradient of the Lagrangian in `p` and `d`, with effective multipliers
    /// `[lambda + rho g]^+`.
    fn gradient(&self, p: &[f64], d: &[f64], prices: &Prices) -> (Vec<f64>, Vec<f64>) {
        let (g1, g2) = self.residuals(p, d);
        let m2 = (prices.link + self.rho * g2).max(0.0);
        let mut gp = Vec::with_capacity(p.len());
        let mut gd = Vec::with_capacity(p.len());
        for (i, f) in self.flows.iter().enumerate() {
            let mut a = -1.0 / p[i] + m2 / f.psi + prices.ceiling[i];
            let mut b = 0.0;
            if f.private {
                b = m2 / f.psi + prices.ceiling[i];
                let m1 = (prices.delay[i] + self.rho * g1[i]).max(0.0);
                if m1 > 0.0 {
                    let (wp, wd) = wait_gradient(p[i], d[i]);
                    a += m1 * wp / f.sigma;
                    b += m1 * wd / f.sigma;
                }
            }
            gp.push(a);
            gd.push(b);
        }
        (gp, gd)
    }

    fn project(&self, block: Block, p: &mut [f64], d: &mut [f64]) {
        for (i, f) in self.flows.iter().enumerate() {
            match block {
                Block::Rates => {
                    let hi = if f.private { 1.0 - d[i] - 1e-12 } else { 1.0 };
                    p[i] = p[i].clamp(P_MIN, hi.max(P_MIN));
                }
                Block::Dummies => {
                    d[i] = if f.private {
                        d[i].clamp(self.epsilon_d, (1.0 - p[i]).max(self.epsilon_d))
                    } else {
                        0.0
                    };
                }
            }
        }
    }

    /// Projected gradient descent on one block with backtracking.
    fn descend(&self, block: Block, p: &mut Vec<f64>, d: &mut Vec<f64>, prices: &Prices, opts: &SolverOptions) {
        let mut step = opts.step_size;
        for _ in 0..opts.inner_iters {
            let (gp, gd) = self.gradient(p, d, prices);
            let grad = if block == Block::Rates { gp } else { gd };
            let f0 = self.lagrangian(p, d, prices);
            let (mut pn, mut dn);
            let mut moved;
            loop {
                pn = p.clone();
                dn = d.clone();
                let x = if block == Block::Rates { &mut pn } else { &mut dn };
                for (xi, gi) in x.iter_mut().zip(&grad) {
                    *xi -= step * gi;
                }
                self.project(block, &mut pn, &mut dn);
                let (old, new) = if block == Block::Rates { (&*p, &pn) } else { (&*d, &dn) };
                let decrease: f64 = grad.iter().zip(new.iter().zip(old)).map(|(g, (n, o))| g * (n - o)).sum();
                moved = new.iter().zip(old).map(|(n, o)| (n - o).abs()).fold(0.0, f64::max);
                if self.lagrangian(&pn, &dn, prices) <= f0 + ARMIJO * decrease || step < 1e-14 {
                    break;
                }
                step *= 0.5;
            }
            if moved < 1e-13 {
                break;
            }
            *p = pn;
            *d = dn;
            step *= 2.0;
        }
    }
}

/// Smallest `d` in `[d, 1 - p]` meeting the deadline; `w` falls in `d`.
fn dummy_for_deadline(p: f64, d: f64, sigma: f64) -> f64 {
    if wait(p, d) <= sigma {
        return d;
    }
    let (mut lo, mut hi) = (d, 1.0 - p);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if wait(p, mid) <= sigma {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Pushes an iterate onto the feasible set: dummies up to meet deadlines,
/// then information rates scaled down to fit the link.
fn repair(p: &mut [f64], d: &mut [f64], flows: &[FlowSpec], epsilon_d: f64) -> bool {
    for _ in 0..100 {
        for (i, f) in flows.iter().enumerate() {
            if f.private {
                d[i] = d[i].max(epsilon_d).min(1.0 - p[i]);
                d[i] = dummy_for_deadline(p[i], d[i], f.sigma);
            } else {
                d[i] = 0.0;
            }
        }
        let dummy_load: f64 = flows.iter().zip(d.iter()).map(|(f, &d)| d / f.psi).sum();
        let rate_load: f64 = flows.iter().zip(p.iter()).map(|(f, &p)| p / f.psi).sum();
        if dummy_load + rate_load > 1.0 {
            if dummy_load >= 1.0 {
                return false;
            }
            let scale = (1.0 - dummy_load) / rate_load * (1.0 - 1e-12);
            for x in p.iter_mut() {
                *x = (*x * scale).max(P_MIN);
            }
        }
        if check_feasible(p, d, flows, 0.0).feasible {
            return true;
        }
    }
    false
}

/// A strictly feasible start: each private flow gets its minimum duty cycle
/// `1/(1 + 2 sigma)` plus an equal share of half the remaining link.
fn initial_point(flows: &[FlowSpec], epsilon_d: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = flows.len() as f64;
    let required: Vec<f64> = flows
        .iter()
        .map(|f| if f.private { 1.0 / (1.0 + 2.0 * f.sigma) } else { 0.0 })
        .collect();
    let reserved: f64 = flows.iter().zip(&required).map(|(f, r)| r / f.psi).sum();
    if reserved >= 1.0 {
        return Err(Error::Infeasible(format!(
            "deadlines need {reserved:.4} of the link before any information is sent"
        )));
    }
    let mut p = Vec::with_capacity(flows.len());
    let mut d = Vec::with_capacity(flows.len());
    for (f, &req) in flows.iter().zip(&required) {
        let c = (req + (1.0 - reserved) * f.psi / (2.0 * n)).min(1.0 - 1e-9);
        if !f.private {
            p.push(c);
            d.push(0.0);
            continue;
        }
        let target = 0.5 * (f.sigma + (1.0 - c) / (2.0 * c));
        let mut pi = 0.5 * c;
        if wait(pi, c - pi) > target {
            // w(p, c - p) rises from (1-c)/(2c) at p = 0 towards infinity at p = c.
            let (mut lo, mut hi) = (0.0, 0.5 * c);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if wait(mid, c - mid) <= target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            pi = lo;
        }
        let di = (c - pi).max(epsilon_d);
        p.push(pi.max(P_MIN));
        d.push(di);
    }
    Ok((p, d))
}

/// Box-constraint multipliers estimated from stationarity at the solution.
fn box_multipliers(problem: &Problem, p: &[f64], d: &[f64], m: &mut Multipliers) {
    let scaled: Vec<f64> = problem
        .flows
        .iter()
        .zip(&m.lambda1)
        .map(|(f, l)| l * f.sigma)
        .collect();
    let zeros = vec![0.0; p.len()];
    let prices = Prices {
        delay: &scaled,
        link: m.lambda2,
        ceiling: &zeros,
    };
    let (gp, gd) = problem.gradient(p, d, &prices);
    for (i, f) in problem.flows.iter().enumerate() {
        let hi = p_upper(f, d[i]);
        m.lambda3[i] = if p[i] >= hi - 1e-9 { (-gp[i]).max(0.0) } else { 0.0 };
        m.lambda4[i] = if p[i] <= P_MIN + 1e-12 { gp[i].max(0.0) } else { 0.0 };
        m.lambda5[i] = if f.private && d[i] <= problem.epsilon_d + 1e-12 {
            gd[i].max(0.0)
        } else {
            0.0
        };
    }
}

/// Solves the allocation problem by alternating `p` and `d` blocks.
///
/// After each round the iterate is repaired onto the feasible set and kept
/// only if it does not raise `U`, so the reported trace never increases.
pub fn solve_allocation(flows: &[FlowSpec], options: &SolverOptions) -> Result<AllocationResult> {
    if flows.is_empty() {
        return Err(Error::Degenerate("no flows to allocate"));
    }
    options.validate()?;
    let n = flows.len();
    let problem = Problem {
        flows,
        rho: options.penalty,
        epsilon_d: options.epsilon_d,
    };
    let (mut p, mut d) = initial_point(flows, options.epsilon_d)?;
    let (mut best_p, mut best_d) = (p.clone(), d.clone());
    if !repair(&mut best_p, &mut best_d, flows, options.epsilon_d) {
        return Err(Error::Infeasible("no feasible starting point".into()));
    }
    let mut best_u = evaluate_objective(&best_p)?;

    // Multipliers of the scaled delay constraints w/sigma - 1.
    let mut l1 = vec![0.0; n];
    let mut l2 = 0.0;
    let mut trace = Vec::with_capacity(options.outer_iters);
    let mut converged = false;
    let mut last_u = f64::INFINITY;
    let zeros = vec![0.0; n];
    for _ in 0..options.outer_iters {
        // Alternate the blocks until they settle so the multiplier step sees
        // a near minimiser of the augmented Lagrangian.
        for _ in 0..SWEEPS {
            let (old_p, old_d) = (p.clone(), d.clone());
            let mut prices = Prices {
                delay: &l1,
                link: l2,
                ceiling: &zeros,
            };
            problem.descend(Block::Rates, &mut p, &mut d, &prices, options);
            let (gp, _) = problem.gradient(&p, &d, &prices);
            let ceiling: Vec<f64> = flows
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    if f.private && p[i] >= 1.0 - d[i] - 1e-9 {
                        (-gp[i]).max(0.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            prices.ceiling = &ceiling;
            problem.descend(Block::Dummies, &mut p, &mut d, &prices, options);
            let moved = old_p
                .iter()
                .zip(&p)
                .chain(old_d.iter().zip(&d))
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if moved < 1e-10 {
                break;
            }
        }
        let (g1, g2) = problem.residuals(&p, &d);
        for (l, g) in l1.iter_mut().zip(&g1) {
            *l = (*l + options.penalty * g).max(0.0);
        }
        l2 = (l2 + options.penalty * g2).max(0.0);

        let (mut cand_p, mut cand_d) = (p.clone(), d.clone());
        if repair(&mut cand_p, &mut cand_d, flows, options.epsilon_d) {
            let u = evaluate_objective(&cand_p)?;
            if u <= best_u {
                best_u = u;
                best_p = cand_p;
                best_d = cand_d;
            }
        }
        trace.push(best_u);

        let u = evaluate_objective(&p)?;
        let violation = g1.iter().copied().fold(g2, f64::max);
        if (u - last_u).abs() < options.tolerance && violation <= options.tolerance {
            converged = true;
            break;
        }
        last_u = u;
    }

    let mut multipliers = Multipliers {
        lambda1: l1.iter().zip(flows).map(|(l, f)| l / f.sigma).collect(),
        lambda2: l2,
        ..Multipliers::zeros(n)
    };
    box_multipliers(&problem, &best_p, &best_d, &mut multipliers);
    let feasible = check_feasible(&best_p, &best_d, flows, 1e-9).feasible;
    Ok(AllocationResult {
        p_star: best_p,
        d_star: best_d,
        multipliers,
        objective_trace: trace,
        feasible,
        converged,
    })
}

/// Solves independent scenarios in parallel; results keep input order.
pub fn solve_many(scenarios: &[Vec<FlowSpec>], options: &SolverOptions) -> Vec<Result<AllocationResult>> {
    scenarios.par_iter().map(|flows| solve_allocation(flows, options)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridOptimum {
    pub p: Vec<f64>,
    pub d: Vec<f64>,
    pub objective: f64,
}

/// Exhaustive search over the grid `p, d in {0, 1/n, ..., 1}` for one or two
/// flows. Returns `None` when no grid point is feasible.
///
/// For a fixed `p` the cheapest dummy rate is the smallest one meeting the
/// deadline, since `w` falls in `d` while the link usage grows, so each flow
/// contributes at most `n` candidates.
pub fn brute_force_small(flows: &[FlowSpec], grid_resolution: usize) -> Result<Option<GridOptimum>> {
    if flows.is_empty() || flows.len() > 2 {
        return Err(Error::Degenerate("brute force handles one or two flows"));
    }
    if grid_resolution < 2 {
        return Err(Error::Degenerate("grid resolution must be at least 2"));
    }
    let n = grid_resolution;
    let step = 1.0 / n as f64;
    let candidates: Vec<Vec<(f64, f64, f64)>> = flows
        .iter()
        .map(|f| {
            (1..=n)
                .filter_map(|i| {
                    let p = i as f64 * step;
                    if !f.private {
                        return Some((p, 0.0, p / f.psi));
                    }
                    if i == n {
                        return None;
                    }
                    // First j in 1..=n-i with w <= sigma; w falls as j grows.
                    let ok = |j: usize| wait(p, j as f64 * step) <= f.sigma;
                    let (mut lo, mut hi) = (1, n - i);
                    if !ok(hi) {
                        return None;
                    }
                    while lo < hi {
                        let mid = (lo + hi) / 2;
                        if ok(mid) {
                            hi = mid;
                        } else {
                            lo = mid + 1;
                        }
                    }
                    let d = lo as f64 * step;
                    Some((p, d, (p + d) / f.psi))
                })
                .collect()
        })
        .collect();

    let slack = 1e-12;
    let mut best: Option<GridOptimum> = None;
    let mut consider = |p: Vec<f64>, d: Vec<f64>| {
        let objective = evaluate_objective(&p).expect("grid rates are positive");
        if best.as_ref().is_none_or(|b| objective < b.objective) {
            best = Some(GridOptimum { p, d, objective });
        }
    };
    if flows.len() == 1 {
        for &(p, d, u) in &candidates[0] {
            if u <= 1.0 + slack {
                consider(vec![p], vec![d]);
            }
        }
        return Ok(best);
    }

    // Flow 2's candidates sorted by usage, with the best rate seen so far.
    let mut second = candidates[1].clone();
    second.sort_by(|a, b| a.2.total_cmp(&b.2));
    let mut prefix_best = Vec::with_capacity(second.len());
    let mut running: Option<usize> = None;
    for (k, c) in second.iter().enumerate() {
        if running.is_none_or(|r| c.0 > second[r].0) {
            running = Some(k);
        }
        prefix_best.push(running.unwrap());
    }
    for &(p1, d1, u1) in &candidates[0] {
        let room = 1.0 - u1 + slack;
        let fits = second.partition_point(|c| c.2 <= room);
        if fits == 0 {
            continue;
        }
        let (p2, d2, _) = second[prefix_best[fits - 1]];
        consider(vec![p1, p2], vec![d1, d2]);
    }
    Ok(best)
}

/// Parses a scenario: one flow per line as `id sigma psi private`, with `#`
/// comments and blank lines ignored.
pub fn parse_scenario(text: &str) -> Result<Vec<FlowSpec>> {
    let mut flows = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: k + 1, message };
        let fields: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
        if fields.len() != 4 {
            return Err(err(format!("expected `id sigma psi private`, found {} fields", fields.len())));
        }
        let number = |s: &str, name: &str| s.parse::<f64>().map_err(|_| err(format!("{name} `{s}` is not a number")));
        let sigma = number(fields[1], "sigma")?;
        let psi = number(fields[2], "psi")?;
        let private = match fields[3].to_ascii_lowercase().as_str() {
            "1" | "true" | "yes" | "private" => true,
            "0" | "false" | "no" | "public" => false,
            other => return Err(err(format!("private flag `{other}` is not a boolean"))),
        };
        if flows.iter().any(|f: &FlowSpec| f.id == fields[0]) {
            return Err(err(format!("duplicate flow id `{}`", fields[0])));
        }
        flows.push(FlowSpec::new(fields[0], sigma, psi, private).map_err(|e| err(e.to_string()))?);
    }
    if flows.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "scenario has no flows".into(),
        });
    }
    Ok(flows)
}

pub fn read_scenario(mut reader: impl Read) -> Result<Vec<FlowSpec>> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    parse_scenario(&text)
}

/// One CSV row per flow of a solved scenario.
#[derive(Debug, Clone, Serialize)]
pub struct AllocationRow {
    pub scenario: String,
    pub flow: String,
    pub p_star: f64,
    pub d_star: f64,
    pub w_f: f64,
    #[serde(rename = "U")]
    pub objective: f64,
    pub converged: bool,
    pub feasible: bool,
}

impl AllocationRow {
    pub fn rows(scenario: &str, flows: &[FlowSpec], result: &AllocationResult) -> Vec<Self> {
        flows
            .iter()
            .enumerate()
            .map(|(i, f)| Self {
                scenario: scenario.to_string(),
                flow: f.id.clone(),
                p_star: result.p_star[i],
                d_star: result.d_star[i],
                w_f: if f.private {
                    wait(result.p_star[i], result.d_star[i])
                } else {
                    0.0
                },
                objective: result.objective(),
                converged: result.converged,
                feasible: result.feasible,
            })
            .collect()
    }
}
