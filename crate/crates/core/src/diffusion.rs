//! Regular diffusions `dY = σ(Y) dW + b(Y) dt` on an open interval, and their
//! scale and speed.
//!
//! With `B(x) = 2∫_{x0}^x b/σ²`, the scale density is `s = e^{-B}` and the
//! speed density is `m = 2e^{B}/σ²`.

use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::expr::{Bindings, Expression};
use crate::extended;
use crate::ladder::{Density, Ladder};
use crate::quadrature::{improper_verdict, integrate_to_end, Decision, QuadOptions, Verdict, VerdictOptions};
use crate::Error;

/// Anchor spacing in the stretched coordinate.
pub(crate) const ANCHOR_STEP: f64 = 1.0 / 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn of(self, (l, r): (f64, f64)) -> f64 {
        match self {
            Side::Left => l,
            Side::Right => r,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

impl std::str::FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Side, Error> {
        match s {
            "left" | "l" => Ok(Side::Left),
            "right" | "r" => Ok(Side::Right),
            _ => Err(Error::InvalidModel(format!("unknown endpoint `{s}`"))),
        }
    }
}

/// `e^{±B}` is already 0 or ∞ in floating point beyond this `|B|`.
const LOG_SCALE_SATURATION: f64 = 1e3;

/// Pointwise coefficients of a diffusion. Evaluation failures are reported
/// as NaN.
pub trait Coefficients: Send + Sync {
    fn interval(&self) -> (f64, f64);
    fn base(&self) -> f64;
    fn drift(&self, x: f64) -> f64;
    fn dispersion(&self, x: f64) -> f64;

    /// `B'(x) = 2b(x)/σ²(x)`.
    fn log_scale_slope(&self, x: f64) -> f64 {
        let s = self.dispersion(x);
        2.0 * self.drift(x) / (s * s)
    }

    /// Absolute rounding noise of `log_scale_slope(x)`.
    fn log_scale_slope_noise(&self, x: f64) -> f64 {
        1e-13 * self.log_scale_slope(x).abs()
    }

    /// Whether [`Coefficients::log_scale_curvature`] is available.
    fn has_curvature(&self) -> bool {
        false
    }

    /// `B''(x)`.
    fn log_scale_curvature(&self, _x: f64) -> f64 {
        f64::NAN
    }
}

/// A diffusion given by expressions for drift and dispersion.
#[derive(Clone, Serialize, Deserialize)]
#[serde(try_from = "RawDiffusion", into = "RawDiffusion")]
pub struct Diffusion {
    pub l: f64,
    pub r: f64,
    pub b: Expression,
    pub sigma: Expression,
    pub x0: f64,
    pub params: Bindings,
    coeffs: Arc<ExprCoefficients>,
    tables: OnceLock<Result<Arc<ScaleSpeed>, Error>>,
}

#[derive(Serialize, Deserialize)]
struct RawDiffusion {
    #[serde(with = "extended")]
    l: f64,
    #[serde(with = "extended")]
    r: f64,
    b: Expression,
    sigma: Expression,
    x0: f64,
    #[serde(default)]
    params: Bindings,
}

impl TryFrom<RawDiffusion> for Diffusion {
    type Error = Error;
    fn try_from(raw: RawDiffusion) -> Result<Diffusion, Error> {
        Diffusion::new(raw.l, raw.r, raw.b, raw.sigma, raw.x0, raw.params)
    }
}

impl From<Diffusion> for RawDiffusion {
    fn from(d: Diffusion) -> RawDiffusion {
        RawDiffusion {
            l: d.l,
            r: d.r,
            b: d.b,
            sigma: d.sigma,
            x0: d.x0,
            params: d.params,
        }
    }
}

impl fmt::Debug for Diffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Diffusion")
            .field("l", &self.l)
            .field("r", &self.r)
            .field("b", &self.b.to_string())
            .field("sigma", &self.sigma.to_string())
            .field("x0", &self.x0)
            .field("params", &self.params)
            .finish()
    }
}

impl PartialEq for Diffusion {
    fn eq(&self, other: &Self) -> bool {
        self.l == other.l
            && self.r == other.r
            && self.b == other.b
            && self.sigma == other.sigma
            && self.x0 == other.x0
            && self.params == other.params
    }
}

/// Interior points spread logarithmically toward both ends.
pub(crate) fn probe_grid(l: f64, r: f64, x0: f64) -> Vec<f64> {
    let mut pts = vec![x0];
    for side in [l, r] {
        for k in 0..=24 {
            let e = -6.0 + 0.5 * k as f64;
            let x = if side.is_finite() {
                side + (x0 - side) * 10f64.powf(e.min(0.0))
            } else if side > 0.0 {
                x0 + 10f64.powf(e)
            } else {
                x0 - 10f64.powf(e)
            };
            if x > l && x < r {
                pts.push(x);
            }
        }
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    pts
}

impl Diffusion {
    pub fn new(
        l: f64,
        r: f64,
        b: Expression,
        sigma: Expression,
        x0: f64,
        params: Bindings,
    ) -> Result<Diffusion, Error> {
        if l.is_nan() || r.is_nan() || !(l < r) || l == f64::INFINITY || r == f64::NEG_INFINITY {
            return Err(Error::InvalidModel(format!("invalid interval ({l}, {r})")));
        }
        if !x0.is_finite() || !(l < x0 && x0 < r) {
            return Err(Error::InvalidModel(format!(
                "base point x0 = {x0} is not inside ({l}, {r})"
            )));
        }
        let bb = b.bind(&params)?;
        let ss = sigma.bind(&params)?;
        for x in probe_grid(l, r, x0) {
            let v = ss.eval_at(x).map_err(|e| {
                Error::InvalidModel(format!("dispersion cannot be evaluated at x = {x}: {e}"))
            })?;
            if !(v > 0.0) {
                return Err(Error::InvalidModel(format!(
                    "dispersion must be positive, got sigma({x}) = {v}"
                )));
            }
            bb.eval_at(x).map_err(|e| {
                Error::InvalidModel(format!("drift cannot be evaluated at x = {x}: {e}"))
            })?;
        }
        let coeffs = Arc::new(ExprCoefficients::new(l, r, x0, bb, ss));
        Ok(Diffusion {
            l,
            r,
            b,
            sigma,
            x0,
            params,
            coeffs,
            tables: OnceLock::new(),
        })
    }

    /// Parse drift and dispersion from text.
    pub fn from_strs(l: f64, r: f64, b: &str, sigma: &str, x0: f64, params: Bindings) -> Result<Diffusion, Error> {
        Diffusion::new(l, r, Expression::parse(b)?, Expression::parse(sigma)?, x0, params)
    }

    pub fn from_json(text: &str) -> Result<Diffusion, Error> {
        let raw: RawDiffusion = serde_json::from_str(text)?;
        Diffusion::try_from(raw)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("diffusion serializes")
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.l, self.r)
    }

    /// Same diffusion with a different base point.
    pub fn with_base(&self, x0: f64) -> Result<Diffusion, Error> {
        Diffusion::new(self.l, self.r, self.b.clone(), self.sigma.clone(), x0, self.params.clone())
    }

    /// Drift with parameters substituted.
    pub fn drift_expr(&self) -> &Expression {
        &self.coeffs.b
    }

    /// Dispersion with parameters substituted.
    pub fn sigma_expr(&self) -> &Expression {
        &self.coeffs.sigma
    }

    pub fn coefficients(&self) -> Arc<dyn Coefficients> {
        self.coeffs.clone()
    }

    pub fn drift(&self, x: f64) -> f64 {
        self.coeffs.drift(x)
    }

    pub fn dispersion(&self, x: f64) -> f64 {
        self.coeffs.dispersion(x)
    }

    /// Memoized scale and speed.
    pub fn scale_speed(&self) -> Result<Arc<ScaleSpeed>, Error> {
        self.tables
            .get_or_init(|| ScaleSpeed::new(self.coeffs.clone()).map(Arc::new))
            .clone()
    }
}

pub(crate) struct ExprCoefficients {
    l: f64,
    r: f64,
    x0: f64,
    b: Expression,
    sigma: Expression,
    slope: Expression,
    curvature: Option<Expression>,
}

impl ExprCoefficients {
    fn new(l: f64, r: f64, x0: f64, b: Expression, sigma: Expression) -> ExprCoefficients {
        let slope = Expression::div(
            Expression::mul(Expression::constant(2.0), b.clone()),
            Expression::pow(sigma.clone(), Expression::constant(2.0)),
        )
        .simplify();
        let curvature = slope.differentiate().ok().map(|d| d.simplify());
        ExprCoefficients { l, r, x0, b, sigma, slope, curvature }
    }
}

impl Coefficients for ExprCoefficients {
    fn interval(&self) -> (f64, f64) {
        (self.l, self.r)
    }
    fn base(&self) -> f64 {
        self.x0
    }
    fn drift(&self, x: f64) -> f64 {
        self.b.value(x)
    }
    fn dispersion(&self, x: f64) -> f64 {
        self.sigma.value(x)
    }
    fn log_scale_slope(&self, x: f64) -> f64 {
        self.slope.value(x)
    }
    fn has_curvature(&self) -> bool {
        self.curvature.is_some()
    }
    fn log_scale_curvature(&self, x: f64) -> f64 {
        self.curvature.as_ref().map_or(f64::NAN, |c| c.value(x))
    }
}

/// Value of `S` at an endpoint, with the verdict that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleLimit {
    /// `S(end)`: finite, `±inf`, or NaN when undecided.
    #[serde(with = "extended")]
    pub value: f64,
    pub verdict: Verdict,
}

impl ScaleLimit {
    pub fn is_finite(&self) -> bool {
        self.verdict.decision == Decision::Finite
    }
}

/// Scale function and speed density of a diffusion, normalized so that
/// `B(x0) = S(x0) = 0`.
pub struct ScaleSpeed {
    coeffs: Arc<dyn Coefficients>,
    log_scale: Arc<Ladder>,
    scale: Ladder,
    limits: [OnceLock<Result<ScaleLimit, Error>>; 2],
    verdict_opts: VerdictOptions,
}

impl fmt::Debug for ScaleSpeed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScaleSpeed")
            .field("interval", &self.coeffs.interval())
            .field("base", &self.coeffs.base())
            .finish()
    }
}

impl ScaleSpeed {
    pub fn new(coeffs: Arc<dyn Coefficients>) -> Result<ScaleSpeed, Error> {
        ScaleSpeed::with_options(coeffs, VerdictOptions::default())
    }

    pub fn with_options(coeffs: Arc<dyn Coefficients>, verdict_opts: VerdictOptions) -> Result<ScaleSpeed, Error> {
        let interval = coeffs.interval();
        let x0 = coeffs.base();
        let c1 = coeffs.clone();
        let slope: Density = Arc::new(move |x| c1.log_scale_slope(x));
        let curvature: Option<Density> = if coeffs.has_curvature() {
            let c2 = coeffs.clone();
            Some(Arc::new(move |x| c2.log_scale_curvature(x)))
        } else {
            None
        };
        let c4 = coeffs.clone();
        let log_scale = Arc::new(
            Ladder::new(interval, x0, ANCHOR_STEP, slope, curvature)?
                .with_noise(Arc::new(move |x| c4.log_scale_slope_noise(x)))
                .with_saturation(LOG_SCALE_SATURATION),
        );
        let (b1, b2) = (log_scale.clone(), log_scale.clone());
        let c3 = coeffs.clone();
        let s_density: Density = Arc::new(move |x| b1.value(x).map_or(f64::NAN, |b| (-b).exp()));
        let s_slope: Density = Arc::new(move |x| {
            b2.value(x).map_or(f64::NAN, |b| -c3.log_scale_slope(x) * (-b).exp())
        });
        let scale = Ladder::new(interval, x0, ANCHOR_STEP, s_density, Some(s_slope))?;
        Ok(ScaleSpeed {
            coeffs,
            log_scale,
            scale,
            limits: [OnceLock::new(), OnceLock::new()],
            verdict_opts,
        })
    }

    pub fn coefficients(&self) -> &Arc<dyn Coefficients> {
        &self.coeffs
    }

    pub fn interval(&self) -> (f64, f64) {
        self.coeffs.interval()
    }

    pub fn base(&self) -> f64 {
        self.coeffs.base()
    }

    /// `B(x)`.
    pub fn log_scale(&self, x: f64) -> Result<f64, Error> {
        self.log_scale.value(x)
    }

    /// `s(x) = e^{-B(x)}`.
    pub fn scale_density(&self, x: f64) -> Result<f64, Error> {
        Ok((-self.log_scale(x)?).exp())
    }

    /// `m(x) = 2e^{B(x)}/σ²(x)`.
    pub fn speed_density(&self, x: f64) -> Result<f64, Error> {
        let s = self.coeffs.dispersion(x);
        Ok(2.0 * self.log_scale(x)?.exp() / (s * s))
    }

    /// `S(x)`.
    pub fn scale(&self, x: f64) -> Result<f64, Error> {
        self.scale.value(x)
    }

    /// `S⁻¹(y)`.
    pub fn scale_inverse(&self, y: f64) -> Result<f64, Error> {
        self.scale.inverse(y)
    }

    /// NaN-on-error versions, for integrands.
    pub fn s(&self, x: f64) -> f64 {
        self.scale_density(x).unwrap_or(f64::NAN)
    }

    pub fn m(&self, x: f64) -> f64 {
        self.speed_density(x).unwrap_or(f64::NAN)
    }

    /// `e^{B(x)} |S(end) − S(x)| = ∫_x^{end} e^{B(x) − B(u)} du`, integrated
    /// directly. Infinite when `S(end)` is.
    pub fn relative_tail(&self, x: f64, end: Side) -> Result<f64, Error> {
        let limit = self.scale_limit(end)?;
        if limit.verdict.decision == Decision::Infinite {
            return Ok(f64::INFINITY);
        }
        let target = end.of(self.interval());
        if let Some(t) = self.laplace_tail(x, target, end) {
            return Ok(t);
        }
        let bx = self.log_scale(x)?;
        let opts = QuadOptions {
            abs_tol: 0.0,
            rel_tol: 1e-10,
            max_subdivisions: 4096,
        };
        let cut = self.negligible_beyond(x, bx, target);
        let beyond = |u: f64| cut.is_some_and(|c| (u - c) * (target - x) > 0.0);
        let est = integrate_to_end(
            |u| {
                if beyond(u) {
                    return 0.0;
                }
                self.log_scale(u).map_or(f64::NAN, |b| (bx - b).exp())
            },
            x,
            target,
            &opts,
        )?;
        self.check_tail(x, bx, est.value, limit.value)?;
        Ok(est.value)
    }

    /// The tail must agree with `S(end) − S(x)` up to cancellation. It does
    /// not when the decay of `e^{−B}` toward a finite end happens below the
    /// floating-point resolution of `x`.
    fn check_tail(&self, x: f64, bx: f64, tail: f64, s_end: f64) -> Result<(), Error> {
        let scaled = tail * (-bx).exp();
        let sx = self.scale(x)?;
        let diff = (s_end - sx).abs();
        if !scaled.is_finite() || !diff.is_finite() || scaled == 0.0 {
            return Ok(());
        }
        let slack = 1e-2 * (s_end.abs() + sx.abs());
        if (scaled - diff).abs() > (0.5 * diff).max(slack) {
            return Err(Error::Numerical(format!(
                "scale tail at {x} is not resolved: quadrature gives {scaled:e}, S(end) - S(x) = {diff:e}"
            )));
        }
        Ok(())
    }

    /// A point past which `∫ e^{B(x)−B}` is below double precision relative
    /// to `e^0`, found by doubling steps from `x`. Keeps the tail quadrature
    /// away from far regions where the coefficients may have underflowed.
    fn negligible_beyond(&self, x: f64, bx: f64, target: f64) -> Option<f64> {
        let sign = (target - x).signum();
        let mut d = x.abs().max(1.0);
        loop {
            let z = x + sign * d;
            if !z.is_finite() || (target - z) * sign <= 0.0 {
                return None;
            }
            let excess = self.log_scale(z).ok()? - bx;
            if excess.is_nan() {
                return None;
            }
            if excess - d.ln().max(0.0) > 60.0 {
                return Some(z);
            }
            d *= 2.0;
        }
    }

    /// `1/k − c/k³` with `k = ±B'(x)`, `c = ±B''(x)`, when `e^{−B}` decays over
    /// a length far below both `|x|` and the distance to the end. Quadrature
    /// cannot resolve such a tail in floating point.
    fn laplace_tail(&self, x: f64, target: f64, end: Side) -> Option<f64> {
        if !self.coeffs.has_curvature() {
            return None;
        }
        let sign = if end == Side::Right { 1.0 } else { -1.0 };
        let k = sign * self.coeffs.log_scale_slope(x);
        let c = sign * self.coeffs.log_scale_curvature(x);
        let resolved = k * x.abs().max(1.0) <= 1e7 || k * (target - x).abs() <= 1e7;
        if !(k > 0.0) || resolved || !(c.abs() <= 1e-6 * k * k) {
            return None;
        }
        Some(1.0 / k - c / (k * k * k))
    }

    /// `|S(end) − S(x)|`, integrated directly.
    pub fn scale_tail(&self, x: f64, end: Side) -> Result<f64, Error> {
        let t = self.relative_tail(x, end)?;
        if t.is_infinite() {
            return Ok(t);
        }
        Ok(t * (-self.log_scale(x)?).exp())
    }

    /// `S(end)` via the improper-integral verdict.
    pub fn scale_limit(&self, end: Side) -> Result<ScaleLimit, Error> {
        let slot = match end {
            Side::Left => &self.limits[0],
            Side::Right => &self.limits[1],
        };
        slot.get_or_init(|| self.compute_limit(end)).clone()
    }

    fn compute_limit(&self, end: Side) -> Result<ScaleLimit, Error> {
        let target = end.of(self.interval());
        let x0 = self.base();
        let verdict = improper_verdict(|u| self.s(u), x0, target, &self.verdict_opts)?;
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
                match integrate_to_end(|u| self.s(u), x0, target, &opts) {
                    Ok(e) if e.converged => sign * e.value,
                    _ => sign * verdict.value,
                }
            }
        };
        Ok(ScaleLimit { value, verdict })
    }

    /// `G₀(x, y) = S(r) − S(x ∨ y)`; requires `S(r) < ∞`.
    pub fn green_zero(&self, x: f64, y: f64) -> Result<f64, Error> {
        let limit = self.scale_limit(Side::Right)?;
        if !limit.is_finite() {
            return Err(Error::Precondition(format!(
                "mean criterion inapplicable: S(r) is {} ({})",
                limit.verdict.decision, limit.verdict.rationale
            )));
        }
        self.scale_tail(x.max(y), Side::Right)
    }
}

/// `B(x)` for `d`.
pub fn compute_b(d: &Diffusion, x: f64) -> Result<f64, Error> {
    d.scale_speed()?.log_scale(x)
}

/// `S(x)` for `d`.
pub fn scale_function(d: &Diffusion, x: f64) -> Result<f64, Error> {
    d.scale_speed()?.scale(x)
}

/// `S(end)` for `d`.
pub fn scale_limit(d: &Diffusion, end: Side) -> Result<ScaleLimit, Error> {
    d.scale_speed()?.scale_limit(end)
}

/// `S(r) − S(x ∨ y)` for `d`.
pub fn green_zero(d: &Diffusion, x: f64, y: f64) -> Result<f64, Error> {
    d.scale_speed()?.green_zero(x, y)
}
