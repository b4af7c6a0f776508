//! Time change of a diffusion into one with unit dispersion.
//!
//! With `g' = √f/σ`, the process `Z = g(Y_a)` run on the clock
//! `a_t = inf{s : A_s > t}` is a diffusion on `(g(l), g(r))` with unit
//! dispersion and drift `G(g⁻¹(z))`, where `G = (½σ²g'' + b g')/f`.

use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::diffusion::{probe_grid, Coefficients, Diffusion, ScaleSpeed, Side, ANCHOR_STEP};
use crate::expr::{Bindings, Expression, Func};
use crate::extended;
use crate::ladder::{AnchorMap, Density, Ladder};
use crate::quadrature::{improper_verdict, integrate_to_end, Decision, QuadOptions, Verdict, VerdictOptions};
use crate::Error;

/// Check that `f` is positive and finite on the probe grid of `d`, and bind
/// its parameters.
pub fn checked_integrand(d: &Diffusion, f: &Expression) -> Result<Expression, Error> {
    let bound = f.bind(&d.params)?;
    let map = AnchorMap::for_interval(d.l, d.r);
    let grid = probe_grid(d.l, d.r, d.x0);
    let (left, right) = grid.split_at(grid.partition_point(|&x| x < d.x0));
    for side in [left.iter().rev().collect::<Vec<_>>(), right.iter().collect()] {
        let mut last = f64::INFINITY;
        for &x in side {
            let v = bound.eval_at(x).map_err(|e| {
                Error::InvalidModel(format!("integrand cannot be evaluated at x = {x}: {e}"))
            })?;
            // zeros far from x0, or after a decay to tiny values, are taken to be underflow
            let far = (map.forward(x) - map.forward(d.x0)).abs() > 5.0;
            if v.is_nan() || v < 0.0 || (v == 0.0 && !far && !(last < 1e-30)) {
                return Err(Error::InvalidModel(format!(
                    "integrand must be positive, got f({x}) = {}",
                    v + 0.0
                )));
            }
            if v > 0.0 {
                last = v;
            }
        }
    }
    Ok(bound)
}

fn g_prime_expr(d: &Diffusion, f: &Expression) -> Expression {
    Expression::div(Expression::call(Func::Sqrt, f.clone()), d.sigma_expr().clone()).simplify()
}

/// `g(x) = ∫_{x0}^x √f/σ`, tabulated, with its inverse and end limits.
pub struct GFunction {
    interval: (f64, f64),
    x0: f64,
    g_prime: Expression,
    g_second: Option<Expression>,
    table: Ladder,
    limits: [OnceLock<Result<(f64, Verdict), Error>>; 2],
}

impl fmt::Debug for GFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GFunction")
            .field("g_prime", &self.g_prime.to_string())
            .field("interval", &self.interval)
            .finish()
    }
}

impl GFunction {
    pub fn value(&self, x: f64) -> Result<f64, Error> {
        self.table.value(x)
    }

    pub fn inverse(&self, z: f64) -> Result<f64, Error> {
        self.table.inverse(z)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.g_prime.value(x)
    }

    pub fn second_derivative(&self, x: f64) -> Option<f64> {
        self.g_second.as_ref().map(|e| e.value(x))
    }

    pub fn derivative_expr(&self) -> &Expression {
        &self.g_prime
    }

    /// `lim g` at an endpoint with the verdict that decided it.
    pub fn limit(&self, end: Side) -> Result<(f64, Verdict), Error> {
        let slot = match end {
            Side::Left => &self.limits[0],
            Side::Right => &self.limits[1],
        };
        slot.get_or_init(|| {
            let target = end.of(self.interval);
            let gp = &self.g_prime;
            let verdict = improper_verdict(|x| gp.value(x), self.x0, target, &VerdictOptions::default())?;
            let sign = if end == Side::Right { 1.0 } else { -1.0 };
            let value = match verdict.decision {
                Decision::Infinite => sign * f64::INFINITY,
                Decision::Inconclusive => f64::NAN,
                Decision::Finite => {
                    let opts = QuadOptions {
                        abs_tol: 0.0,
                        rel_tol: 1e-11,
                        max_subdivisions: 4096,
                    };
                    match integrate_to_end(|x| gp.value(x), self.x0, target, &opts) {
                        Ok(e) if e.converged => sign * e.value,
                        _ => sign * verdict.value,
                    }
                }
            };
            Ok((value, verdict))
        })
        .clone()
    }
}

pub fn build_g(d: &Diffusion, f: &Expression) -> Result<GFunction, Error> {
    let f = checked_integrand(d, f)?;
    let g_prime = g_prime_expr(d, &f);
    let g_second = g_prime.differentiate().ok().map(|e| e.simplify());
    let gp = g_prime.clone();
    let density: Density = Arc::new(move |x| gp.value(x));
    let slope: Option<Density> = g_second.clone().map(|e| Arc::new(move |x: f64| e.value(x)) as Density);
    let table = Ladder::new(d.interval(), d.x0, ANCHOR_STEP, density, slope)?;
    Ok(GFunction {
        interval: d.interval(),
        x0: d.x0,
        g_prime,
        g_second,
        table,
        limits: [OnceLock::new(), OnceLock::new()],
    })
}

/// Symbolic `G = (½σ²g'' + b g')/f`, with parameters bound.
pub fn drift_g_expr(d: &Diffusion, f: &Expression) -> Result<Expression, Error> {
    let (a, b) = drift_g_terms(d, f)?;
    Ok(Expression::add(a, b).simplify())
}

/// The two terms `½σ²g''/f` and `b g'/f` of `G`.
fn drift_g_terms(d: &Diffusion, f: &Expression) -> Result<(Expression, Expression), Error> {
    let f = f.bind(&d.params)?;
    let gp = g_prime_expr(d, &f);
    let gpp = gp.differentiate()?;
    let sigma = d.sigma_expr().clone();
    let b = d.drift_expr().clone();
    let half_sigma2 = Expression::mul(
        Expression::constant(0.5),
        Expression::pow(sigma, Expression::constant(2.0)),
    );
    Ok((
        Expression::div(Expression::mul(half_sigma2, gpp), f.clone()).simplify(),
        Expression::div(Expression::mul(b, gp), f).simplify(),
    ))
}

/// `G(x)`.
pub fn drift_g(d: &Diffusion, f: &Expression, x: f64) -> Result<f64, Error> {
    Ok(drift_g_expr(d, f)?.eval_at(x)?)
}

/// The time-changed diffusion `Z`.
#[derive(Clone)]
pub struct TimeChanged {
    pub source: Diffusion,
    /// Integrand with parameters bound.
    pub f: Expression,
    pub g: Arc<GFunction>,
    /// `G` as a function of the original state `x`.
    pub drift_x: Expression,
    pub z_interval: (f64, f64),
    coeffs: Arc<ZCoefficients>,
    tables: OnceLock<Result<Arc<ScaleSpeed>, Error>>,
}

impl fmt::Debug for TimeChanged {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TimeChanged")
            .field("source", &self.source)
            .field("f", &self.f.to_string())
            .field("drift_x", &self.drift_x.to_string())
            .field("z_interval", &self.z_interval)
            .finish()
    }
}

struct ZCoefficients {
    interval: (f64, f64),
    g: Arc<GFunction>,
    drift_x: Expression,
    drift_x_prime: Option<Expression>,
    terms: (Expression, Expression),
}

impl ZCoefficients {
    /// `g⁻¹(z)` for `z` inside the Z interval; points too close to an end
    /// for the table to resolve map to the outermost tabulated point.
    fn source(&self, z: f64) -> Option<f64> {
        if !(self.interval.0 < z && z < self.interval.1) {
            return None;
        }
        self.g.table.saturating_inverse(z).ok()
    }
}

impl Coefficients for ZCoefficients {
    fn interval(&self) -> (f64, f64) {
        self.interval
    }
    fn base(&self) -> f64 {
        0.0
    }
    fn drift(&self, z: f64) -> f64 {
        self.source(z).map_or(f64::NAN, |x| self.drift_x.value(x))
    }
    fn dispersion(&self, _z: f64) -> f64 {
        1.0
    }
    fn log_scale_slope(&self, z: f64) -> f64 {
        2.0 * self.drift(z)
    }
    fn log_scale_slope_noise(&self, z: f64) -> f64 {
        let Some(x) = self.source(z) else {
            return f64::NAN;
        };
        // cancellation between the two terms, plus the resolution of z itself
        let cancellation = 2e-13 * (self.terms.0.value(x).abs() + self.terms.1.value(x).abs());
        let curvature = self.log_scale_curvature(z);
        let resolution = if curvature.is_finite() {
            8.0 * f64::EPSILON * z.abs() * curvature.abs()
        } else {
            0.0
        };
        cancellation + resolution
    }
    fn has_curvature(&self) -> bool {
        self.drift_x_prime.is_some()
    }
    fn log_scale_curvature(&self, z: f64) -> f64 {
        let Some(dg) = &self.drift_x_prime else {
            return f64::NAN;
        };
        self.source(z)
            .map_or(f64::NAN, |x| 2.0 * dg.value(x) / self.g.derivative(x))
    }
}

pub fn transform(d: &Diffusion, f: &Expression) -> Result<TimeChanged, Error> {
    let g = Arc::new(build_g(d, f)?);
    let bound = f.bind(&d.params)?;
    let terms = drift_g_terms(d, &bound)?;
    let drift_x = Expression::add(terms.0.clone(), terms.1.clone()).simplify();
    let (gl, vl) = g.limit(Side::Left)?;
    let (gr, vr) = g.limit(Side::Right)?;
    if gl.is_nan() || gr.is_nan() {
        let (side, v) = if gl.is_nan() { ("left", vl) } else { ("right", vr) };
        return Err(Error::Numerical(format!(
            "limit of g at the {side} end is undecided: {}",
            v.rationale
        )));
    }
    let drift_x_prime = drift_x.differentiate().ok().map(|e| e.simplify());
    let coeffs = Arc::new(ZCoefficients {
        interval: (gl, gr),
        g: g.clone(),
        drift_x: drift_x.clone(),
        drift_x_prime,
        terms,
    });
    Ok(TimeChanged {
        source: d.clone(),
        f: bound,
        g,
        drift_x,
        z_interval: (gl, gr),
        coeffs,
        tables: OnceLock::new(),
    })
}

impl TimeChanged {
    /// Drift of `Z` at state `z`.
    pub fn drift_z(&self, z: f64) -> f64 {
        self.coeffs.drift(z)
    }

    pub fn coefficients(&self) -> Arc<dyn Coefficients> {
        self.coeffs.clone()
    }

    /// Scale and speed of `Z`, normalized at `z = 0`.
    pub fn scale_speed(&self) -> Result<Arc<ScaleSpeed>, Error> {
        self.tables
            .get_or_init(|| ScaleSpeed::new(self.coeffs.clone()).map(Arc::new))
            .clone()
    }

    /// Tabulated `g` and sampled drift for plotting.
    pub fn export(&self, samples: usize) -> TransformExport {
        let (l, r) = self.source.interval();
        let map = AnchorMap::for_interval(l, r);
        let centre = map.forward(self.source.x0);
        let n = samples.max(2);
        let mut g_table = Vec::with_capacity(n);
        let mut drift = Vec::with_capacity(n);
        for i in 0..n {
            let phi = centre - 6.0 + 12.0 * i as f64 / (n - 1) as f64;
            let x = map.inverse(phi);
            if !(x > l && x < r) {
                continue;
            }
            if let Ok(z) = self.g.value(x) {
                g_table.push((x, z));
                drift.push((z, self.drift_x.value(x)));
            }
        }
        TransformExport {
            source: self.source.clone(),
            f: self.f.clone(),
            g_prime: self.g.derivative_expr().clone(),
            drift_x: self.drift_x.clone(),
            z_interval: self.z_interval,
            g_table,
            drift_samples: drift,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformExport {
    pub source: Diffusion,
    pub f: Expression,
    pub g_prime: Expression,
    /// `G` in the original coordinate.
    pub drift_x: Expression,
    #[serde(with = "extended_pair")]
    pub z_interval: (f64, f64),
    /// `(x, g(x))`.
    pub g_table: Vec<(f64, f64)>,
    /// `(z, G(g⁻¹(z)))`.
    #[serde(with = "extended::pairs")]
    pub drift_samples: Vec<(f64, f64)>,
}

mod extended_pair {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Ext(#[serde(with = "crate::extended")] f64);

    pub fn serialize<S: Serializer>(v: &(f64, f64), s: S) -> Result<S::Ok, S::Error> {
        (Ext(v.0), Ext(v.1)).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(f64, f64), D::Error> {
        let (a, b): (Ext, Ext) = Deserialize::deserialize(d)?;
        Ok((a.0, b.0))
    }
}

/// One side of the Lamperti pairing: a diffusion and an integrand.
#[derive(Debug, Clone)]
pub struct Problem {
    pub diffusion: Diffusion,
    pub f: Expression,
}

/// Drifted Brownian motion with integrand `h(x)`, paired with the Bessel
/// process of dimension `2(1 + μ)` from 1 with integrand `u⁻² h(log u)`.
pub fn lamperti_pair(mu: f64, h: &Expression) -> Result<(Problem, Problem), Error> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(Error::InvalidModel(format!("Lamperti pairing needs mu > 0, got {mu}")));
    }
    let params = Bindings::from([("mu".to_string(), mu)]);
    let bm = Diffusion::from_strs(f64::NEG_INFINITY, f64::INFINITY, "mu", "1", 0.0, params.clone())?;
    let bessel = Diffusion::from_strs(0.0, f64::INFINITY, "(2*mu + 1)/(2*x)", "1", 1.0, params)?;
    let u = Expression::x();
    let f_bessel = Expression::mul(
        Expression::pow(u.clone(), Expression::constant(-2.0)),
        h.substitute(&Expression::call(Func::Log, u)),
    )
    .simplify();
    Ok((
        Problem { diffusion: bm, f: h.clone() },
        Problem { diffusion: bessel, f: f_bessel },
    ))
}

/// Dimension of the Bessel process paired with drift `mu`.
pub fn lamperti_dimension(mu: f64) -> f64 {
    2.0 * (1.0 + mu)
}

#[cfg(test)]
mod tests {
    use super::*;

    const INF: f64 = f64::INFINITY;

    fn model(l: f64, r: f64, b: &str, sigma: &str, x0: f64) -> Diffusion {
        Diffusion::from_strs(l, r, b, sigma, x0, Bindings::new()).unwrap()
    }

    fn e(text: &str) -> Expression {
        Expression::parse(text).unwrap()
    }

    fn bessel3() -> Diffusion {
        model(0.0, INF, "1/x", "1", 1.0)
    }

    #[test]
    fn g_examples() {
        let g = build_g(&bessel3(), &e("x^-4")).unwrap();
        assert!((g.value(2.0).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(g.value(1.0).unwrap(), 0.0);
        assert!((g.limit(Side::Right).unwrap().0 - 1.0).abs() < 1e-9);
        assert_eq!(g.limit(Side::Left).unwrap().0, -INF);

        let bm = model(-INF, INF, "1", "1", 0.0);
        let g = build_g(&bm, &e("exp(-2*x)")).unwrap();
        for x in [-3.0, 0.5, 4.0] {
            assert!((g.value(x).unwrap() - (1.0 - (-x as f64).exp())).abs() < 1e-11);
        }
        assert!((g.limit(Side::Right).unwrap().0 - 1.0).abs() < 1e-9);

        let ou = model(-INF, INF, "-x", "2", 0.0);
        let g = build_g(&ou, &e("4")).unwrap();
        assert!((g.value(3.5).unwrap() - 3.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_nonpositive_integrand() {
        assert!(build_g(&bessel3(), &e("x - 2")).is_err());
        assert!(build_g(&bessel3(), &e("0")).is_err());
    }

    #[test]
    fn accepts_integrand_that_underflows() {
        let bm = model(f64::NEG_INFINITY, f64::INFINITY, "1", "1", 0.0);
        assert!(checked_integrand(&bm, &e("exp(-x^2)")).is_ok());
        assert!(checked_integrand(&bm, &e("min(abs(x), 1)")).is_err());
    }

    #[test]
    fn inverse_round_trip() {
        let g = build_g(&bessel3(), &e("x^-3 + 1/(1 + x)")).unwrap();
        for x in [1e-3, 0.2, 1.0, 1.7, 30.0, 1e4] {
            let z = g.value(x).unwrap();
            let back = g.inverse(z).unwrap();
            assert!((back - x).abs() < 1e-8 * x.max(1.0), "{x} -> {z} -> {back}");
        }
    }

    #[test]
    fn drift_examples() {
        for x in [1.0, 2.0, 5.0] {
            assert!(drift_g(&bessel3(), &e("x^-4"), x).unwrap().abs() < 1e-12);
        }
        let bm = model(-INF, INF, "1", "1", 0.0);
        for x in [-1.0, 0.0, 2.0] {
            let got = drift_g(&bm, &e("exp(-2*x)"), x).unwrap();
            assert!((got - 0.5 * f64::exp(x)).abs() < 1e-12 * got.abs().max(1.0));
        }
        let flat = model(-INF, INF, "0", "1", 0.0);
        assert_eq!(drift_g(&flat, &e("1"), 0.3).unwrap(), 0.0);
        assert!(matches!(drift_g(&bessel3(), &e("abs(x - 3) + 1"), 1.0), Err(Error::Diff(_))));
    }

    #[test]
    fn bessel_becomes_brownian_motion() {
        let tc = transform(&bessel3(), &e("x^-4")).unwrap();
        assert_eq!(tc.z_interval.0, -INF);
        assert!((tc.z_interval.1 - 1.0).abs() < 1e-9);
        for z in [-5.0, 0.0, 0.5, 0.99] {
            assert!(tc.drift_z(z).abs() < 1e-10);
        }
        let ss = tc.scale_speed().unwrap();
        assert!((ss.scale(0.5).unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn identity_time_change() {
        let bm = model(-INF, INF, "0", "1", 0.0);
        let tc = transform(&bm, &e("1")).unwrap();
        assert_eq!(tc.z_interval, (-INF, INF));
        assert!((tc.g.value(2.5).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn scale_identity() {
        // B^Z(g(x)) - log g'(x) - B^Y(x) is constant
        let d = model(0.0, INF, "1/x", "1", 1.0);
        let tc = transform(&d, &e("x^-3")).unwrap();
        let zss = tc.scale_speed().unwrap();
        let yss = d.scale_speed().unwrap();
        let c = |x: f64| {
            let z = tc.g.value(x).unwrap();
            zss.log_scale(z).unwrap() - tc.g.derivative(x).ln() - yss.log_scale(x).unwrap()
        };
        let base = c(1.2);
        for x in [2.0, 5.0, 0.5] {
            assert!((c(x) - base).abs() < 1e-8, "{x}: {} vs {base}", c(x));
        }
    }

    #[test]
    fn lamperti_dimension_and_integrand() {
        assert_eq!(lamperti_dimension(0.5), 3.0);
        let (bm, bes) = lamperti_pair(0.5, &e("exp(-x)")).unwrap();
        assert_eq!(bm.diffusion.drift(7.0), 0.5);
        assert!((bes.diffusion.drift(2.0) - 0.5).abs() < 1e-15);
        // u^-2 e^{-log u} = u^-3
        for u in [0.5f64, 2.0, 10.0] {
            assert!((bes.f.value(u) - u.powi(-3)).abs() < 1e-14);
        }
        assert!(lamperti_pair(0.0, &e("1")).is_err());
    }
}
