//! Almost-sure finiteness of `A_ζ = ∫_0^ζ f(Y_s) ds` for a diffusion
//! transient toward its right end, decided two ways:
//!
//! * on `Y`: `∫^r (S(r) − S(v)) f(v) m(v) dv < ∞`;
//! * on the time-changed `Z`: `g(r)` is an exit (or regular) boundary.

use serde::{Deserialize, Serialize};

use crate::boundary::{classify_scale_speed, BoundaryClass, BoundaryKind};
use crate::diffusion::{Diffusion, ScaleLimit, ScaleSpeed, Side};
use crate::expr::Expression;
use crate::extended;
use crate::quadrature::{improper_verdict, integrate_with, Decision, QuadOptions, Verdict, VerdictOptions};
use crate::timechange::{checked_integrand, transform};
use crate::Error;

/// `S(r) < ∞`, and `Y` cannot leave through the left end.
fn transience_gate(ss: &ScaleSpeed, opts: &VerdictOptions) -> Result<ScaleLimit, Error> {
    let right = ss.scale_limit(Side::Right)?;
    match right.verdict.decision {
        Decision::Finite => {}
        Decision::Infinite => {
            return Err(Error::Precondition(
                "criterion requires S(r) < ∞; Y is not transient toward r".into(),
            ))
        }
        Decision::Inconclusive => {
            return Err(Error::Precondition(format!(
                "criterion requires S(r) < ∞, which could not be decided: {}",
                right.verdict.rationale
            )))
        }
    }
    let left = ss.scale_limit(Side::Left)?;
    if left.verdict.decision != Decision::Infinite {
        let class = classify_scale_speed(ss, Side::Left, opts);
        if class.kind.is_accessible() != Some(false) {
            return Err(Error::Precondition(format!(
                "criterion requires Y to converge to r, but S(l) = {} and the left end is {}",
                left.value, class.kind
            )));
        }
    }
    Ok(right)
}

/// `2 e^{B(v)} (S(r) − S(v)) f(v) / σ²(v)`, which equals `(S(r) − S(v)) f(v) m(v)`.
fn y_integrand<'a>(ss: &'a ScaleSpeed, f: &'a Expression) -> impl Fn(f64) -> f64 + 'a {
    move |v| {
        let fv = f.value(v);
        if fv == 0.0 {
            return 0.0;
        }
        let sigma = ss.coefficients().dispersion(v);
        match ss.relative_tail(v, Side::Right) {
            Ok(t) => 2.0 * t * fv / (sigma * sigma),
            Err(_) => f64::NAN,
        }
    }
}

pub fn finiteness_via_y(d: &Diffusion, f: &Expression) -> Result<Verdict, Error> {
    finiteness_via_y_with(d, f, &VerdictOptions::default())
}

pub fn finiteness_via_y_with(d: &Diffusion, f: &Expression, opts: &VerdictOptions) -> Result<Verdict, Error> {
    let f = checked_integrand(d, f)?;
    let ss = d.scale_speed()?;
    transience_gate(&ss, opts)?;
    Ok(improper_verdict(y_integrand(&ss, &f), d.x0, d.r, opts)?)
}

/// Verdict on `Z` with the classification of `g(r)`.
pub fn finiteness_via_z(d: &Diffusion, f: &Expression) -> Result<(Verdict, BoundaryClass), Error> {
    finiteness_via_z_with(d, f, &VerdictOptions::default())
}

pub fn finiteness_via_z_with(
    d: &Diffusion,
    f: &Expression,
    opts: &VerdictOptions,
) -> Result<(Verdict, BoundaryClass), Error> {
    let tc = transform(d, f)?;
    let zss = tc.scale_speed()?;
    let class = classify_scale_speed(&zss, Side::Right, opts);
    let mut verdict = class.i.clone();
    verdict.rationale = format!("g(r) = {}: {}; {}", tc.z_interval.1, class.kind, verdict.rationale);
    Ok((verdict, class))
}

/// `E_x[A_ζ]` split at `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanResult {
    pub decision: Decision,
    /// Finite mean, `inf`, or null when undecided.
    #[serde(with = "extended")]
    pub value: f64,
    /// `∫_x^r (S(r) − S(y)) f m dy`.
    pub right: Verdict,
    /// `(S(r) − S(x)) ∫_l^x f m dy`.
    pub left: Verdict,
    #[serde(with = "extended")]
    pub left_weight: f64,
}

pub fn mean_functional(d: &Diffusion, f: &Expression, x: f64) -> Result<MeanResult, Error> {
    mean_functional_with(d, f, x, &VerdictOptions::default())
}

pub fn mean_functional_with(d: &Diffusion, f: &Expression, x: f64, opts: &VerdictOptions) -> Result<MeanResult, Error> {
    if !(x > d.l && x < d.r) {
        return Err(Error::Precondition(format!("x = {x} is not inside ({}, {})", d.l, d.r)));
    }
    let f = checked_integrand(d, f)?;
    let ss = d.scale_speed()?;
    let limit = ss.scale_limit(Side::Right)?;
    if !limit.is_finite() {
        return Err(Error::Precondition(
            "mean criterion inapplicable: S(r) is not finite".into(),
        ));
    }
    let right = improper_verdict(y_integrand(&ss, &f), x, d.r, opts)?;
    let weight = ss.scale_tail(x, Side::Right)?;
    let left = improper_verdict(|y| f.value(y) * ss.m(y), x, d.l, opts)?;
    let (decision, value) = match (right.decision, left.decision) {
        (Decision::Infinite, _) => (Decision::Infinite, f64::INFINITY),
        (_, Decision::Infinite) if weight > 0.0 => (Decision::Infinite, f64::INFINITY),
        (Decision::Finite, Decision::Finite) => (Decision::Finite, right.value + weight * left.value),
        (Decision::Finite, Decision::Infinite) => (Decision::Finite, right.value),
        _ => (Decision::Inconclusive, f64::NAN),
    };
    Ok(MeanResult {
        decision,
        value,
        right,
        left,
        left_weight: weight,
    })
}

/// `E_x ∫_0^{H_hi} f(Y_s) 1{Y_s ≥ lo} ds = ∫_lo^hi (S(hi) − S(x ∨ y)) f(y) m(y) dy`.
/// Requires `S(l) = −∞`, so that `hi` is reached almost surely.
pub fn truncated_mean(d: &Diffusion, f: &Expression, x: f64, lo: f64, hi: f64) -> Result<f64, Error> {
    if !(d.l < lo && lo < hi && hi < d.r && x < hi && x > d.l) {
        return Err(Error::Precondition(format!(
            "need l < lo < hi < r and l < x < hi, got x = {x}, lo = {lo}, hi = {hi}"
        )));
    }
    let f = f.bind(&d.params)?;
    let ss = d.scale_speed()?;
    if ss.scale_limit(Side::Left)?.verdict.decision != Decision::Infinite {
        return Err(Error::Precondition(
            "truncated mean needs S(l) = −∞ so that the upper level is hit".into(),
        ));
    }
    let s_hi = ss.scale(hi)?;
    let s_x = ss.scale(x)?;
    let opts = QuadOptions {
        abs_tol: 1e-13,
        rel_tol: 1e-11,
        max_subdivisions: 1 << 16,
    };
    let kernel = |y: f64| {
        let top = if y <= x { s_x } else { ss.scale(y).unwrap_or(f64::NAN) };
        (s_hi - top) * f.value(y) * ss.m(y)
    };
    let mut total = 0.0;
    if lo < x {
        total += integrate_with(kernel, lo, x, &opts)?.value;
    }
    total += integrate_with(kernel, x.max(lo), hi, &opts)?.value;
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinitenessReport {
    pub model: Diffusion,
    pub f: Expression,
    pub x: f64,
    pub scale_right: ScaleLimit,
    #[serde(rename = "verdict_Y")]
    pub verdict_y: Verdict,
    #[serde(rename = "verdict_Z")]
    pub verdict_z: Verdict,
    pub agree: bool,
    pub mean: Option<MeanResult>,
    #[serde(rename = "boundary_of_Z")]
    pub boundary_of_z: Option<BoundaryClass>,
}

impl FinitenessReport {
    /// The conclusive verdict, if any.
    pub fn decision(&self) -> Decision {
        if self.verdict_y.decision.is_conclusive() {
            self.verdict_y.decision
        } else {
            self.verdict_z.decision
        }
    }
}

pub fn analyze(d: &Diffusion, f: &Expression, x: f64) -> Result<FinitenessReport, Error> {
    analyze_with(d, f, x, &VerdictOptions::default())
}

pub fn analyze_with(d: &Diffusion, f: &Expression, x: f64, opts: &VerdictOptions) -> Result<FinitenessReport, Error> {
    let bound = checked_integrand(d, f)?;
    let verdict_y = finiteness_via_y_with(d, &bound, opts)?;
    let scale_right = d.scale_speed()?.scale_limit(Side::Right)?;
    let (verdict_z, boundary_of_z) = match finiteness_via_z_with(d, &bound, opts) {
        Ok((v, c)) => (v, Some(c)),
        Err(e) => (Verdict::inconclusive(format!("time change unavailable: {e}")), None),
    };
    let (dy, dz) = (verdict_y.decision, verdict_z.decision);
    if dy.is_conclusive() && dz.is_conclusive() && dy != dz {
        return Err(Error::RouteDisagreement { y: dy, z: dz });
    }
    let mean = match mean_functional_with(d, &bound, x, opts) {
        Ok(m) => Some(m),
        Err(Error::Precondition(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(FinitenessReport {
        model: d.clone(),
        f: bound,
        x,
        scale_right,
        agree: dy.is_conclusive() && dy == dz,
        verdict_y,
        verdict_z,
        mean,
        boundary_of_z,
    })
}

/// Whether the boundary kind reached by `Z` means finiteness.
pub fn kind_means_finite(kind: BoundaryKind) -> Option<bool> {
    kind.is_accessible()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Bindings;

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
    fn y_route_examples() {
        let v = finiteness_via_y(&bessel3(), &e("x^-3")).unwrap();
        assert_eq!(v.decision, Decision::Finite, "{v:?}");
        // ∫_1^∞ 2u^-2 du = 2
        assert!((v.value - 2.0).abs() < 1e-3, "{}", v.value);
        assert_eq!(finiteness_via_y(&bessel3(), &e("x^-1.5")).unwrap().decision, Decision::Infinite);
        let bm = model(-INF, INF, "1", "1", 0.0);
        let v = finiteness_via_y(&bm, &e("exp(-x)")).unwrap();
        assert_eq!(v.decision, Decision::Finite);
        assert!((v.value - 1.0).abs() < 1e-3, "{}", v.value);
    }

    #[test]
    fn z_route_examples() {
        let (v, c) = finiteness_via_z(&bessel3(), &e("x^-4")).unwrap();
        assert_eq!(v.decision, Decision::Finite, "{c:?}");
        assert!((v.value - 1.0).abs() < 1e-6, "{}", v.value);
        assert!(matches!(c.kind, BoundaryKind::Exit | BoundaryKind::Regular));
        let (v, _) = finiteness_via_z(&bessel3(), &e("x^-1.5")).unwrap();
        assert_eq!(v.decision, Decision::Infinite, "{v:?}");
    }

    #[test]
    fn z_far_tail_is_cut_before_coefficients_underflow() {
        // Z is Brownian motion with drift 1/2 in z = ln x
        let (v, c) = finiteness_via_z(&bessel3(), &e("x^-2")).unwrap();
        assert_eq!(v.decision, Decision::Infinite, "{c:?}");
    }

    #[test]
    fn unresolved_z_tail_is_inconclusive() {
        let d = model(-INF, INF, "1", "1", 0.0);
        let r = analyze(&d, &e("exp(-x^2)"), 0.0).unwrap();
        assert_eq!(r.verdict_y.decision, Decision::Finite);
        assert_eq!(r.verdict_z.decision, Decision::Inconclusive, "{}", r.verdict_z.rationale);
        assert!(r.verdict_z.rationale.contains("not resolved"), "{}", r.verdict_z.rationale);
    }

    #[test]
    fn precondition_on_recurrent_models() {
        let bm = model(-INF, INF, "0", "1", 0.0);
        assert!(matches!(finiteness_via_y(&bm, &e("exp(-x)")), Err(Error::Precondition(_))));
        assert!(matches!(analyze(&bm, &e("exp(-x)"), 0.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn analyze_bessel() {
        let r = analyze(&bessel3(), &e("x^-3"), 1.0).unwrap();
        assert!(r.agree, "{r:?}");
        assert_eq!(r.decision(), Decision::Finite);
        let r = analyze(&bessel3(), &e("x^-1"), 1.0).unwrap();
        assert!(r.agree, "{r:?}");
        assert_eq!(r.decision(), Decision::Infinite);
    }

    #[test]
    fn non_differentiable_integrand_leaves_z_inconclusive() {
        let r = analyze(&bessel3(), &e("x^-3 * (1 + abs(sin(x)))"), 1.0).unwrap();
        assert_eq!(r.verdict_y.decision, Decision::Finite);
        assert_eq!(r.verdict_z.decision, Decision::Inconclusive);
        assert!(r.verdict_z.rationale.contains("differentiable"), "{}", r.verdict_z.rationale);
        assert!(!r.agree);
    }

    #[test]
    fn mean_pieces() {
        let m = mean_functional(&bessel3(), &e("x^-4"), 1.0).unwrap();
        assert!((m.right.value - 1.0).abs() < 1e-6, "{:?}", m.right);
        // ∫_0^1 2y^-2 dy diverges
        assert_eq!(m.left.decision, Decision::Infinite);
        assert_eq!(m.value, INF);
        let m = mean_functional(&bessel3(), &e("exp(-x)"), 1.0).unwrap();
        assert_eq!(m.decision, Decision::Finite);
        assert!(m.value.is_finite());
    }

    #[test]
    fn truncated_mean_closed_form() {
        for hi in [2.0, 5.0, 40.0] {
            let got = truncated_mean(&bessel3(), &e("x^-4"), 1.0, 1.0, hi).unwrap();
            let want = (1.0 - 1.0 / hi) * (1.0 - 1.0 / hi);
            assert!((got - want).abs() < 1e-10, "{hi}: {got} vs {want}");
        }
    }
}
