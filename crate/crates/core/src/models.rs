//! Structural models `f(t, ψ)`: the one-compartment PK ODEs and small test functions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 0.01;
/// Negative outputs above this are integration noise and are clamped to zero.
pub const NEGATIVE_OUTPUT_TOL: f64 = -1e-12;

/// A regression function evaluated on a time grid for one individual.
pub trait StructuralModel: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, times: &[f64], psi: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PkKind {
    /// First-order absorption, Michaelis–Menten elimination; ψ = (log V, log k_a, log V_m).
    MichaelisMenten,
    /// First-order absorption and elimination; ψ = (log k_e, log k_a, log C_l).
    FirstOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PkScenario {
    pub kind: PkKind,
    pub dose: f64,
    /// Fixed log k_m; only read by the Michaelis–Menten model.
    #[serde(default = "default_log_km")]
    pub log_km: f64,
    pub times: Vec<f64>,
    #[serde(default = "default_step")]
    pub step: f64,
}

fn default_log_km() -> f64 {
    -2.5
}

fn default_step() -> f64 {
    DEFAULT_STEP
}

pub const FIRST_ORDER_TIMES: [f64; 9] = [0.25, 0.5, 1.0, 2.0, 3.5, 5.0, 7.0, 9.0, 12.0];

impl PkScenario {
    pub fn first_order() -> Self {
        Self {
            kind: PkKind::FirstOrder,
            dose: 6.0,
            log_km: default_log_km(),
            times: FIRST_ORDER_TIMES.to_vec(),
            step: DEFAULT_STEP,
        }
    }

    pub fn michaelis_menten(dose: f64) -> Self {
        Self {
            kind: PkKind::MichaelisMenten,
            dose,
            log_km: default_log_km(),
            times: FIRST_ORDER_TIMES.to_vec(),
            step: DEFAULT_STEP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dose >= 0.0 && self.dose.is_finite()) {
            return Err(Error::domain(format!("dose must be nonnegative, got {}", self.dose)));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::domain(format!("step must be positive, got {}", self.step)));
        }
        if self.times.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::domain("observation times must be positive"));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain("observation times must be strictly increasing"));
        }
        Ok(())
    }
}

/// Integrate `dy/dt = rhs(t, y)` from `y(0) = 0` with classical RK4, landing exactly on each
/// output time by splitting every output interval into equal sub-steps no longer than `step`.
fn rk4_from_zero(times: &[f64], step: f64, rhs: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::domain("step must be positive"));
    }
    let mut out = Vec::with_capacity(times.len());
    let mut t = 0.0;
    let mut y = 0.0;
    for &target in times {
        if target < t {
            return Err(Error::domain("times must be nondecreasing and nonnegative"));
        }
        let span = target - t;
        let n = (span / step).ceil().max(if span > 0.0 { 1.0 } else { 0.0 }) as usize;
        let start = t;
        let h = if n > 0 { span / n as f64 } else { 0.0 };
        for s in 0..n {
            let t0 = start + s as f64 * h;
            let k1 = rhs(t0, y);
            let k2 = rhs(t0 + 0.5 * h, y + 0.5 * h * k1);
            let k3 = rhs(t0 + 0.5 * h, y + 0.5 * h * k2);
            let k4 = rhs(t0 + h, y + h * k3);
            y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if !y.is_finite() {
                return Err(Error::Solver { t: t0 + h, reason: "non-finite state".into() });
            }
        }
        t = target;
        if y < 0.0 {
            if y > NEGATIVE_OUTPUT_TOL {
                y = 0.0;
            } else {
                return Err(Error::Solver { t, reason: format!("negative concentration {y:e}") });
            }
        }
        out.push(y);
    }
    Ok(out)
}

fn check_psi(psi: &[f64]) -> Result<()> {
    if psi.len() != 3 {
        return Err(Error::domain(format!("PK models take 3 parameters, got {}", psi.len())));
    }
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite individual parameter"));
    }
    Ok(())
}

pub fn solve_mm_pk(scenario: &PkScenario, psi: &[f64], step: f64) -> Result<Vec<f64>> {
    check_psi(psi)?;
    let v = psi[0].exp();
    let ka = psi[1].exp();
    let vm = psi[2].exp();
    let km = scenario.log_km.exp();
    let input = ka * scenario.dose / v;
    rk4_from_zero(&scenario.times, step, |t, f| {
        -vm * f / (km + f) + input * (-ka * t).exp()
    })
}

pub fn solve_first_order_pk(scenario: &PkScenario, psi: &[f64], step: f64) -> Result<Vec<f64>> {
    check_psi(psi)?;
    let ke = psi[0].exp();
    let ka = psi[1].exp();
    let cl = psi[2].exp();
    let input = scenario.dose * ka * ke / cl;
    rk4_from_zero(&scenario.times, step, |t, f| input * (-ka * t).exp() - ke * f)
}

/// Closed-form solution of the first-order model, including the `k_a = k_e` limit.
pub fn first_order_analytic(scenario: &PkScenario, psi: &[f64]) -> Result<Vec<f64>> {
    check_psi(psi)?;
    let ke = psi[0].exp();
    let ka = psi[1].exp();
    let cl = psi[2].exp();
    let d = scenario.dose;
    Ok(scenario
        .times
        .iter()
        .map(|&t| {
            if ((ka - ke) / ke).abs() < 1e-9 {
                d * ke * ke / cl * t * (-ke * t).exp()
            } else {
                d * ka * ke / (cl * (ka - ke)) * ((-ke * t).exp() - (-ka * t).exp())
            }
        })
        .collect())
}

pub fn eval_f(scenario: &PkScenario, psi: &[f64], step: f64) -> Result<Vec<f64>> {
    match scenario.kind {
        PkKind::MichaelisMenten => solve_mm_pk(scenario, psi, step),
        PkKind::FirstOrder => solve_first_order_pk(scenario, psi, step),
    }
}

impl StructuralModel for PkScenario {
    fn dim(&self) -> usize {
        3
    }

    fn eval(&self, times: &[f64], psi: &[f64]) -> Result<Vec<f64>> {
        if times == self.times.as_slice() {
            return eval_f(self, psi, self.step);
        }
        let mut s = self.clone();
        s.times = times.to_vec();
        eval_f(&s, psi, self.step)
    }
}

/// `f(t, ψ) = ψ_1`, independent of time.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearToy;

impl StructuralModel for LinearToy {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, times: &[f64], psi: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![psi[0]; times.len()])
    }
}

/// `f(t, ψ) = ψ_1 e^{-t}`.
#[derive(Debug, Clone, Copy, Default)]
pub struct DecayToy;

impl StructuralModel for DecayToy {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, times: &[f64], psi: &[f64]) -> Result<Vec<f64>> {
        Ok(times.iter().map(|t| psi[0] * (-t).exp()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fo_mean() -> [f64; 3] {
        [-2.52, 0.4, -3.22]
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn zero_dose_gives_zero() {
        let mut s = PkScenario::first_order();
        s.dose = 0.0;
        assert!(eval_f(&s, &fo_mean(), 0.01).unwrap().iter().all(|&v| v == 0.0));
        let mut m = PkScenario::michaelis_menten(0.0);
        m.dose = 0.0;
        assert!(eval_f(&m, &[2.5, 1.0, -0.994], 0.01).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_order_matches_analytic() {
        let s = PkScenario::first_order();
        let num = solve_first_order_pk(&s, &fo_mean(), 0.01).unwrap();
        let exact = first_order_analytic(&s, &fo_mean()).unwrap();
        for (a, b) in num.iter().zip(&exact) {
            assert!(rel(*a, *b) < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn analytic_solution_satisfies_the_ode() {
        // Central difference of the closed form against the right-hand side.
        let s = PkScenario::first_order();
        let psi = fo_mean();
        let (ke, ka, cl) = (psi[0].exp(), psi[1].exp(), psi[2].exp());
        let h = 1e-5;
        for &t in &s.times {
            let mut sc = s.clone();
            sc.times = vec![t - h, t, t + h];
            let f = first_order_analytic(&sc, &psi).unwrap();
            let deriv = (f[2] - f[0]) / (2.0 * h);
            let rhs = s.dose * ka * ke / cl * (-ka * t).exp() - ke * f[1];
            assert!((deriv - rhs).abs() < 1e-6 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn confluent_case() {
        let s = PkScenario::first_order();
        let psi = [-1.0, -1.0, -3.0];
        let num = solve_first_order_pk(&s, &psi, 0.01).unwrap();
        let limit = first_order_analytic(&s, &psi).unwrap();
        for (a, b) in num.iter().zip(&limit) {
            assert!(rel(*a, *b) < 1e-6);
        }
        // The general formula just off the diagonal approaches the limit.
        for eps in [1e-6, -1e-6] {
            let near = [-1.0, -1.0 + eps, -3.0];
            let g = first_order_analytic(&s, &near).unwrap();
            for (a, b) in g.iter().zip(&limit) {
                assert!(rel(*a, *b) < 1e-5);
            }
        }
    }

    #[test]
    fn rk4_order_is_about_four() {
        let s = PkScenario::first_order();
        let psi = [-1.0, 0.9, -3.0];
        let exact = first_order_analytic(&s, &psi).unwrap();
        let err = |h: f64| {
            let num = solve_first_order_pk(&s, &psi, h).unwrap();
            num.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let order = (err(0.25) / err(0.125)).log2();
        assert!((3.5..=4.5).contains(&order), "observed order {order}");
    }

    #[test]
    fn mm_step_halving() {
        let s = PkScenario::michaelis_menten(6.0);
        let psi = [2.5, 1.0, -0.994];
        let a = solve_mm_pk(&s, &psi, 0.01).unwrap();
        let b = solve_mm_pk(&s, &psi, 0.005).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(rel(*x, *y) < 1e-6);
            assert!(*x >= 0.0);
        }
    }

    #[test]
    fn mm_without_elimination_is_pure_absorption() {
        let s = PkScenario::michaelis_menten(6.0);
        let psi = [2.5, 1.0, 1e-8f64.ln()];
        let num = solve_mm_pk(&s, &psi, 0.01).unwrap();
        let (v, ka) = (2.5f64.exp(), 1f64.exp());
        for (&t, y) in s.times.iter().zip(&num) {
            let expect = s.dose / v * (1.0 - (-ka * t).exp());
            assert!((y - expect).abs() < 1e-4);
        }
    }

    #[test]
    fn dispatch_and_empty_grid() {
        let s = PkScenario::first_order();
        assert_eq!(eval_f(&s, &fo_mean(), 0.01).unwrap(), solve_first_order_pk(&s, &fo_mean(), 0.01).unwrap());
        let m = PkScenario::michaelis_menten(6.0);
        let p = [2.5, 1.0, -0.994];
        assert_eq!(eval_f(&m, &p, 0.01).unwrap(), solve_mm_pk(&m, &p, 0.01).unwrap());
        let mut e = s.clone();
        e.times.clear();
        assert!(eval_f(&e, &fo_mean(), 0.01).unwrap().is_empty());
        assert_eq!(s.eval(&[1.0], &fo_mean()).unwrap().len(), 1);
    }

    #[test]
    fn overflow_is_a_solver_error() {
        let s = PkScenario::first_order();
        let r = solve_first_order_pk(&s, &[800.0, 0.4, -3.0], 0.01);
        assert!(matches!(r, Err(Error::Solver { .. })), "{r:?}");
    }
}
