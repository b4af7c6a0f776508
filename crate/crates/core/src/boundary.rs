//! Feller boundary classification, expected exit times, and increasing
//! solutions of `(d/dm)(d/dS) ψ = λψ`.

use serde::{Deserialize, Serialize};

use crate::diffusion::{Diffusion, ScaleSpeed, Side};
use crate::ladder::AnchorMap;
use crate::ode::{self, OdeOptions};
use crate::quadrature::{double_verdict, improper_verdict, integrate_with, Decision, QuadOptions, Verdict, VerdictOptions};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundaryKind {
    Regular,
    Exit,
    Entrance,
    Natural,
    Inconclusive,
}

impl BoundaryKind {
    pub fn from_legs(i: Decision, j: Decision) -> BoundaryKind {
        use Decision::*;
        match (i, j) {
            (Finite, Finite) => BoundaryKind::Regular,
            (Finite, Infinite) => BoundaryKind::Exit,
            (Infinite, Finite) => BoundaryKind::Entrance,
            (Infinite, Infinite) => BoundaryKind::Natural,
            _ => BoundaryKind::Inconclusive,
        }
    }

    /// Regular and exit boundaries are reached in finite time.
    pub fn is_accessible(self) -> Option<bool> {
        match self {
            BoundaryKind::Regular | BoundaryKind::Exit => Some(true),
            BoundaryKind::Entrance | BoundaryKind::Natural => Some(false),
            BoundaryKind::Inconclusive => None,
        }
    }
}

impl std::fmt::Display for BoundaryKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryClass {
    pub endpoint: Side,
    pub kind: BoundaryKind,
    /// `∫ S(dα) ∫^α m(dβ)`.
    #[serde(rename = "I")]
    pub i: Verdict,
    /// `∫ m(dα) ∫^α S(dβ)`.
    #[serde(rename = "J")]
    pub j: Verdict,
}

fn leg<O: Fn(f64) -> f64, I: Fn(f64) -> f64>(
    outer: O,
    inner: I,
    end: f64,
    base: f64,
    opts: &VerdictOptions,
) -> Verdict {
    double_verdict(outer, inner, end, base, opts)
        .unwrap_or_else(|e| Verdict::inconclusive(format!("quadrature failed: {e}")))
}

pub fn classify_scale_speed(ss: &ScaleSpeed, end: Side, opts: &VerdictOptions) -> BoundaryClass {
    let target = end.of(ss.interval());
    let base = ss.base();
    let limit = ss.scale_limit(end);
    let scale_decision = limit.as_ref().map(|l| l.verdict.decision).unwrap_or(Decision::Inconclusive);
    let i = if scale_decision == Decision::Inconclusive {
        let why = match &limit {
            Ok(l) => l.verdict.rationale.clone(),
            Err(e) => e.to_string(),
        };
        Verdict::inconclusive(format!("S at the end is undecided: {why}"))
    } else if scale_decision == Decision::Finite {
        // m(β)|S(end) − S(β)| = 2 e^{B(β)} |S(end) − S(β)| / σ²(β)
        let first_error = std::cell::RefCell::new(None);
        let kernel = |b: f64| {
            let sigma = ss.coefficients().dispersion(b);
            ss.relative_tail(b, end).map(|t| 2.0 * t / (sigma * sigma)).unwrap_or_else(|e| {
                first_error.borrow_mut().get_or_insert(e);
                f64::NAN
            })
        };
        match improper_verdict(kernel, base, target, opts) {
            Ok(mut v) => {
                v.rationale = format!("Fubini form with the scale tail: {}", v.rationale);
                v
            }
            Err(e) => match first_error.into_inner() {
                Some(cause) => Verdict::inconclusive(format!("scale tail failed: {cause}")),
                None => Verdict::inconclusive(format!("quadrature failed: {e}")),
            },
        }
    } else {
        leg(|a| ss.s(a), |b| ss.m(b), target, base, opts)
    };
    let j = leg(|a| ss.m(a), |b| ss.s(b), target, base, opts);
    BoundaryClass {
        endpoint: end,
        kind: BoundaryKind::from_legs(i.decision, j.decision),
        i,
        j,
    }
}

pub fn classify(d: &Diffusion, end: Side) -> Result<BoundaryClass, Error> {
    Ok(classify_scale_speed(&*d.scale_speed()?, end, &VerdictOptions::default()))
}

/// `E_x[H_a ∧ H_b]` from the Green kernel of the process killed outside `(a, b)`.
pub fn expected_exit_time(d: &Diffusion, a: f64, b: f64, x: f64) -> Result<f64, Error> {
    let ss = d.scale_speed()?;
    exit_time_scale_speed(&ss, a, b, x)
}

pub fn exit_time_scale_speed(ss: &ScaleSpeed, a: f64, b: f64, x: f64) -> Result<f64, Error> {
    let (l, r) = ss.interval();
    if !(l < a && a < b && b < r) {
        return Err(Error::Precondition(format!(
            "need l < a < b < r, got a = {a}, b = {b} on ({l}, {r})"
        )));
    }
    if !(a <= x && x <= b) {
        return Err(Error::Precondition(format!("x = {x} is not in [{a}, {b}]")));
    }
    if x == a || x == b {
        return Ok(0.0);
    }
    let (sa, sb, sx) = (ss.scale(a)?, ss.scale(b)?, ss.scale(x)?);
    let span = sb - sa;
    let opts = QuadOptions::default();
    let fail = std::cell::Cell::new(None);
    let guard = |v: Result<f64, Error>| {
        v.unwrap_or_else(|e| {
            fail.set(Some(e));
            f64::NAN
        })
    };
    let lower = integrate_with(
        |z| guard(ss.scale(z).and_then(|s| Ok((s - sa) * ss.speed_density(z)?))),
        a,
        x,
        &opts,
    );
    let upper = integrate_with(
        |z| guard(ss.scale(z).and_then(|s| Ok((sb - s) * ss.speed_density(z)?))),
        x,
        b,
        &opts,
    );
    if let Some(e) = fail.take() {
        return Err(e);
    }
    let (lower, upper) = (lower?, upper?);
    Ok(((sb - sx) * lower.value + (sx - sa) * upper.value) / span)
}

/// Increasing solution of `ψ'' = λψ` in the natural-scale sense, sampled on
/// a grid and normalized to `ψ = 1` at the last grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eigenfunction {
    pub lambda: f64,
    pub x: Vec<f64>,
    pub psi: Vec<f64>,
    /// `dψ/dS`, on the same scale as `psi`.
    pub dpsi: Vec<f64>,
    /// Where the integration was started.
    pub start: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EigenOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub initial_slope: f64,
    /// Successive starting points are accepted once grid ratios agree to this.
    pub settle: f64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions {
            abs_tol: 1e-9,
            rel_tol: 1e-7,
            initial_slope: 1e-8,
            settle: 1e-7,
        }
    }
}

pub fn increasing_eigenfunction(d: &Diffusion, lambda: f64, grid: &[f64]) -> Result<Eigenfunction, Error> {
    eigenfunction_scale_speed(&*d.scale_speed()?, lambda, grid, &EigenOptions::default())
}

pub fn eigenfunction_scale_speed(
    ss: &ScaleSpeed,
    lambda: f64,
    grid: &[f64],
    opts: &EigenOptions,
) -> Result<Eigenfunction, Error> {
    let (l, r) = ss.interval();
    if !(lambda > 0.0) {
        return Err(Error::Precondition(format!("lambda must be positive, got {lambda}")));
    }
    if grid.is_empty() || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Precondition("grid must be nonempty and strictly increasing".into()));
    }
    if !(grid[0] > l && grid[grid.len() - 1] < r) {
        return Err(Error::Precondition(format!("grid must lie inside ({l}, {r})")));
    }
    let map = AnchorMap::for_interval(l, r);
    let first = map.forward(grid[0]);
    let mut previous: Option<Eigenfunction> = None;
    let mut offset = 2.0;
    for _ in 0..12 {
        let start = map.inverse(first - offset);
        offset *= 2.0;
        if !(start > l && start < grid[0]) || !ss.m(start).is_finite() || !ss.s(start).is_finite() {
            break;
        }
        let attempt = match shoot(ss, &map, lambda, start, grid, opts) {
            Ok(e) => e,
            Err(e) => {
                if previous.is_some() {
                    break;
                }
                return Err(e);
            }
        };
        if let Some(prev) = &previous {
            let change = prev
                .psi
                .iter()
                .zip(&attempt.psi)
                .map(|(a, b)| ((a - b) / b).abs())
                .fold(0.0, f64::max);
            if change <= opts.settle {
                return Ok(attempt);
            }
        }
        previous = Some(attempt);
    }
    previous.ok_or_else(|| Error::Numerical("no admissible starting point for the eigenfunction".into()))
}

fn shoot(
    ss: &ScaleSpeed,
    map: &AnchorMap,
    lambda: f64,
    start: f64,
    grid: &[f64],
    opts: &EigenOptions,
) -> Result<Eigenfunction, Error> {
    let ode_opts = OdeOptions {
        abs_tol: opts.abs_tol,
        rel_tol: opts.rel_tol,
        max_steps: 1_000_000,
    };
    let failed = std::cell::Cell::new(false);
    // in the stretched coordinate t = φ(x): u_t = J v s, v_t = J λ u m
    let mut rhs = |t: f64, y: &[f64; 2]| {
        let x = map.inverse(t);
        let jac = map.jacobian(x);
        let (s, m) = (ss.s(x), ss.m(x));
        if !s.is_finite() || !m.is_finite() {
            failed.set(true);
        }
        [jac * y[1] * s, jac * lambda * y[0] * m]
    };
    let mut y = [1.0, opts.initial_slope];
    let mut t = map.forward(start);
    let mut h = 1e-3;
    let mut log_scale = 0.0;
    let mut raw = Vec::with_capacity(grid.len());
    for &x in grid {
        let t_next = map.forward(x);
        y = ode::integrate(&mut rhs, t, y, t_next, &mut h, &ode_opts)?;
        if failed.get() {
            return Err(Error::Numerical(format!(
                "scale or speed density not finite between {start} and {x}"
            )));
        }
        t = t_next;
        let norm = y[0].abs().max(y[1].abs());
        if norm > 1e100 {
            log_scale += norm.ln();
            y = [y[0] / norm, y[1] / norm];
        }
        raw.push((y[0], y[1], log_scale));
    }
    let &(u_last, _, ls_last) = raw.last().unwrap();
    let mut psi = Vec::with_capacity(raw.len());
    let mut dpsi = Vec::with_capacity(raw.len());
    for &(u, v, ls) in &raw {
        let f = (ls - ls_last).exp() / u_last;
        psi.push(u * f);
        dpsi.push(v * f);
    }
    Ok(Eigenfunction {
        lambda,
        x: grid.to_vec(),
        psi,
        dpsi,
        start,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Bindings;

    const INF: f64 = f64::INFINITY;

    fn model(l: f64, r: f64, b: &str, sigma: &str, x0: f64) -> Diffusion {
        Diffusion::from_strs(l, r, b, sigma, x0, Bindings::new()).unwrap()
    }

    #[test]
    fn bm_with_reachable_right_end_is_regular() {
        let d = model(-INF, 1.0, "0", "1", 0.0);
        let c = classify(&d, Side::Right).unwrap();
        assert_eq!(c.kind, BoundaryKind::Regular, "{c:?}");
        assert!((c.i.value - 1.0).abs() < 1e-6, "{}", c.i.value);
        assert!((c.j.value - 1.0).abs() < 1e-6, "{}", c.j.value);
        assert_eq!(classify(&d, Side::Left).unwrap().kind, BoundaryKind::Natural);
    }

    #[test]
    fn bessel_three_ends() {
        let d = model(0.0, INF, "1/x", "1", 1.0);
        assert_eq!(classify(&d, Side::Right).unwrap().kind, BoundaryKind::Natural);
        let c = classify(&d, Side::Left).unwrap();
        assert_eq!(c.kind, BoundaryKind::Entrance, "{c:?}");
    }

    #[test]
    fn ou_is_natural_both_sides() {
        let d = model(-INF, INF, "-x", "1", 0.0);
        for side in [Side::Left, Side::Right] {
            let c = classify(&d, side).unwrap();
            assert_eq!(c.kind, BoundaryKind::Natural, "{c:?}");
        }
    }

    #[test]
    fn bm_exit_time() {
        let d = model(-INF, INF, "0", "1", 0.0);
        for x in [0.1, 0.5, 0.8] {
            let t = expected_exit_time(&d, 0.0, 1.0, x).unwrap();
            assert!((t - x * (1.0 - x)).abs() < 1e-10, "{x}: {t}");
        }
        assert_eq!(expected_exit_time(&d, 0.0, 1.0, 0.0).unwrap(), 0.0);
        assert!(expected_exit_time(&d, 0.0, 1.0, 1e-9).unwrap() < 1e-8);
        assert!(expected_exit_time(&d, 1.0, 0.0, 0.5).is_err());
    }

    #[test]
    fn bessel_exit_time_closed_form() {
        let d = model(0.0, INF, "1/x", "1", 1.0);
        let (a, b, x) = (1.0f64, 2.0f64, 1.5f64);
        let t = expected_exit_time(&d, a, b, x).unwrap();
        // u(x) solves ½u'' + u'/x = -1 with u(a) = u(b) = 0: u = -x²/3 + c1/x + c2
        let c1 = (b * b - a * a) / 3.0 / (1.0 / a - 1.0 / b) * -1.0;
        let c2 = a * a / 3.0 - c1 / a;
        let want = -x * x / 3.0 + c1 / x + c2;
        assert!((t - want).abs() < 1e-9, "{t} vs {want}");
    }

    #[test]
    fn bm_eigenfunction() {
        let d = model(-INF, INF, "0", "1", 0.0);
        let grid = [-3.0, -1.0, 0.0, 0.5, 1.0];
        let e = increasing_eigenfunction(&d, 0.5, &grid).unwrap();
        for (x, p) in grid.iter().zip(&e.psi) {
            let want = (x - 1.0f64).exp();
            assert!((p - want).abs() < 1e-5 * want, "{x}: {p} vs {want}");
        }
        assert!(e.psi.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn drifted_bm_eigenfunction() {
        // ½ψ'' + ψ' = λψ: ψ = e^{κx}, κ = -1 + √(1 + 2λ)
        let d = model(-INF, INF, "1", "1", 0.0);
        let lambda = 0.75f64;
        let kappa = -1.0 + (1.0 + 2.0 * lambda).sqrt();
        let grid = [-2.0, 0.0, 2.0];
        let e = increasing_eigenfunction(&d, lambda, &grid).unwrap();
        for (x, p) in grid.iter().zip(&e.psi) {
            let want = (kappa * (x - 2.0)).exp();
            assert!((p - want).abs() < 1e-5 * want, "{x}: {p} vs {want}");
        }
    }
}
