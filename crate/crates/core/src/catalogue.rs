//! Built-in diffusion families and regression answers for the criterion.

use serde::{Deserialize, Serialize};

use crate::diffusion::Diffusion;
use crate::expr::Bindings;
use crate::quadrature::Decision;
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Family {
    pub name: &'static str,
    pub summary: &'static str,
    /// Parameter names with their defaults.
    pub params: &'static [(&'static str, f64)],
    /// Closed-form scale function normalized at the base point, if known.
    pub scale: Option<&'static str>,
    /// Beyond the classical examples; included as a stress case.
    pub extension: bool,
}

pub const FAMILIES: &[Family] = &[
    Family {
        name: "bessel",
        summary: "Bessel process of dimension delta > 2 on (0, inf), started at 1",
        params: &[("delta", 3.0)],
        scale: Some("(1 - x^(2 - delta)) / (delta - 2)"),
        extension: false,
    },
    Family {
        name: "bm_drift",
        summary: "Brownian motion with drift mu > 0 on the line, started at 0",
        params: &[("mu", 1.0)],
        scale: Some("(1 - exp(-2*mu*x)) / (2*mu)"),
        extension: false,
    },
    Family {
        name: "bm",
        summary: "standard Brownian motion on the line, started at 0 (recurrent)",
        params: &[],
        scale: Some("x"),
        extension: false,
    },
    Family {
        name: "ou",
        summary: "Ornstein-Uhlenbeck process dX = -theta X dt + dW, started at 0 (recurrent)",
        params: &[("theta", 1.0)],
        scale: None,
        extension: false,
    },
    Family {
        name: "gbm",
        summary: "geometric Brownian motion dX = mu X dt + s X dW on (0, inf), started at 1",
        params: &[("mu", 1.0), ("s", 1.0)],
        scale: Some("(1 - x^(1 - 2*mu/s^2)) / (2*mu/s^2 - 1)"),
        extension: true,
    },
];

pub fn family(name: &str) -> Result<&'static Family, Error> {
    FAMILIES
        .iter()
        .find(|f| f.name == name)
        .ok_or_else(|| Error::UnknownFamily(name.to_string()))
}

fn resolved(fam: &Family, given: &Bindings) -> Result<Bindings, Error> {
    for key in given.keys() {
        if !fam.params.iter().any(|(p, _)| p == key) {
            return Err(Error::InvalidModel(format!("{} has no parameter '{key}'", fam.name)));
        }
    }
    Ok(fam
        .params
        .iter()
        .map(|&(p, default)| (p.to_string(), given.get(p).copied().unwrap_or(default)))
        .collect())
}

/// A fully specified member of a family; missing parameters take defaults.
pub fn get(name: &str, params: &Bindings) -> Result<Diffusion, Error> {
    let fam = family(name)?;
    let p = resolved(fam, params)?;
    let inf = f64::INFINITY;
    match name {
        "bessel" => {
            let delta = p["delta"];
            if !(delta > 2.0) {
                return Err(Error::InvalidModel(format!(
                    "bessel needs delta > 2, got {delta}: not transient to infinity, criterion inapplicable"
                )));
            }
            Diffusion::from_strs(0.0, inf, "(delta - 1) / (2*x)", "1", 1.0, p)
        }
        "bm_drift" => {
            let mu = p["mu"];
            if !(mu > 0.0) {
                return Err(Error::InvalidModel(format!(
                    "bm_drift needs mu > 0, got {mu}; use bm for the driftless case"
                )));
            }
            Diffusion::from_strs(-inf, inf, "mu", "1", 0.0, p)
        }
        "bm" => Diffusion::from_strs(-inf, inf, "0", "1", 0.0, p),
        "ou" => Diffusion::from_strs(-inf, inf, "-theta*x", "1", 0.0, p),
        "gbm" => {
            if !(p["s"] > 0.0) {
                return Err(Error::InvalidModel(format!("gbm needs s > 0, got {}", p["s"])));
            }
            Diffusion::from_strs(0.0, inf, "mu*x", "s*x", 1.0, p)
        }
        _ => unreachable!("family table and constructor disagree on {name}"),
    }
}

/// Closed-form `S` of a family member, when the family has one.
pub fn closed_form_scale(name: &str, params: &Bindings) -> Result<Option<crate::expr::Expression>, Error> {
    let fam = family(name)?;
    let p = resolved(fam, params)?;
    fam.scale
        .map(|s| Ok(crate::expr::Expression::parse(s)?.bind(&p)?))
        .transpose()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownAnswer {
    pub family: String,
    pub params: Bindings,
    pub f: String,
    pub expected: Decision,
    /// How the expected verdict was obtained, in one line.
    pub derivation: String,
}

fn answer(family: &str, params: &[(&str, f64)], f: &str, expected: Decision, derivation: &str) -> KnownAnswer {
    KnownAnswer {
        family: family.into(),
        params: params.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
        f: f.into(),
        expected,
        derivation: derivation.into(),
    }
}

/// Model/integrand pairs with verdicts known in closed form, all well away
/// from the borderline.
pub fn known_answers() -> Vec<KnownAnswer> {
    use Decision::{Finite, Infinite};
    vec![
        answer("bessel", &[("delta", 3.0)], "x^-3", Finite, "Bessel test: int^inf u*u^-3 du < inf"),
        answer("bessel", &[("delta", 3.0)], "x^-1.5", Infinite, "Bessel test: int^inf u^-0.5 du = inf"),
        answer("bessel", &[("delta", 4.0)], "x^-3", Finite, "Bessel test: int^inf u^-2 du < inf"),
        answer("bessel", &[("delta", 4.0)], "x^-1.5", Infinite, "Bessel test: int^inf u^-0.5 du = inf"),
        answer("bessel", &[("delta", 2.5)], "x^-4", Finite, "Bessel test: int^inf u^-3 du < inf"),
        answer("bessel", &[("delta", 3.0)], "exp(-x)", Finite, "Bessel test: int^inf u exp(-u) du < inf"),
        answer("bm_drift", &[("mu", 1.0)], "exp(-x)", Finite, "drifted BM: int^inf exp(-u) du < inf"),
        answer("bm_drift", &[("mu", 1.0)], "1/(1 + x^2)", Finite, "drifted BM: int^inf du/(1+u^2) < inf"),
        answer("bm_drift", &[("mu", 1.0)], "1/(1 + abs(x))", Infinite, "drifted BM: int^inf du/(1+u) = inf"),
        answer("bm_drift", &[("mu", 0.5)], "exp(-x)", Finite, "drifted BM: int^inf exp(-u) du < inf"),
        answer("bm_drift", &[("mu", 0.5)], "1/sqrt(1 + x^2)", Infinite, "drifted BM: int^inf du/sqrt(1+u^2) = inf"),
        answer("gbm", &[("mu", 1.0), ("s", 1.0)], "x^-1", Finite, "log X is BM with drift 1/2: int^inf exp(-u) du < inf"),
        answer("gbm", &[("mu", 1.0), ("s", 1.0)], "1", Infinite, "constant integrand: A = lifetime = inf"),
    ]
}
