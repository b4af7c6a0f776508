//! A fully resolved run: everything needed to reproduce a report.

use perpetua::boundary::{classify_scale_speed, BoundaryKind};
use perpetua::catalogue;
use perpetua::criterion::{analyze_with, mean_functional_with};
use perpetua::diffusion::{Diffusion, Side};
use perpetua::expr::{Bindings, Expression};
use perpetua::quadrature::Decision;
use perpetua::sim::{empirical_finiteness, ks_summary, run_y, run_z, GrowthFlag, SimConfig, SimReport};
use perpetua::timechange::transform;
use perpetua::Error;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::Config;
use crate::svg;
use crate::table::Table;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_INCONCLUSIVE: u8 = 2;
pub const EXIT_PRECONDITION: u8 = 3;
pub const EXIT_USAGE: u8 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInput {
    /// Catalogue family the model came from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    pub diffusion: Diffusion,
}

impl ModelInput {
    pub fn label(&self) -> String {
        let d = &self.diffusion;
        let params = d
            .params
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(", ");
        let name = match &self.family {
            Some(f) => format!("{f}({params})"),
            None if params.is_empty() => format!("dY = {} dt + {} dW", d.b, d.sigma),
            None => format!("dY = {} dt + {} dW [{params}]", d.b, d.sigma),
        };
        format!("{name} on ({}, {}), x0 = {}", d.l, d.r, d.x0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Task {
    Analyze { f: Expression, x: f64 },
    Classify { end: Side },
    Transform { f: Expression, samples: usize },
    Validate { f: Expression, x: f64, target: f64 },
    Mean { f: Expression, x: f64 },
    Catalogue,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Analyze { .. } => "analyze",
            Task::Classify { .. } => "classify",
            Task::Transform { .. } => "transform",
            Task::Validate { .. } => "validate",
            Task::Mean { .. } => "mean",
            Task::Catalogue => "catalogue",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    #[serde(flatten)]
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelInput>,
    pub config: Config,
    #[serde(default)]
    pub plot: bool,
}

pub struct Outcome {
    pub code: u8,
    pub report: Value,
    pub table: String,
    pub svg: Option<String>,
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse(_) | Error::Eval(_) | Error::InvalidModel(_) | Error::UnknownFamily(_) | Error::Json(_) => {
            EXIT_USAGE
        }
        Error::Precondition(_) | Error::Diff(_) | Error::OutOfDomain { .. } => EXIT_PRECONDITION,
        Error::Quad(_) | Error::Numerical(_) | Error::RouteDisagreement { .. } | Error::Simulation(_) => {
            EXIT_FAILURE
        }
    }
}

fn decision_code(d: Decision) -> u8 {
    if d.is_conclusive() {
        EXIT_OK
    } else {
        EXIT_INCONCLUSIVE
    }
}

impl Job {
    fn model(&self) -> &ModelInput {
        self.model.as_ref().expect("model-based command without a model")
    }

    pub fn run(&self) -> Result<Outcome, Error> {
        match &self.task {
            Task::Analyze { f, x } => self.analyze(f, *x),
            Task::Classify { end } => self.classify(*end),
            Task::Transform { f, samples } => self.transform(f, *samples),
            Task::Validate { f, x, target } => self.validate(f, *x, *target),
            Task::Mean { f, x } => self.mean(f, *x),
            Task::Catalogue => Ok(catalogue_listing()),
        }
    }

    fn envelope(&self, result: Value, code: u8) -> Value {
        json!({
            "command": self.task.name(),
            "inputs": self,
            "exit_code": code,
            "result": result,
        })
    }

    fn analyze(&self, f: &Expression, x: f64) -> Result<Outcome, Error> {
        let m = self.model();
        let r = analyze_with(&m.diffusion, f, x, &self.config.verdict)?;
        let code = if r.agree { EXIT_OK } else { EXIT_INCONCLUSIVE };
        let mut t = Table::new();
        t.row("model", m.label());
        t.row("f", &r.f);
        t.row("S(r)", format!("{} ({:?})", fmt(r.scale_right.value), r.scale_right.verdict.decision));
        t.row("via Y", format!("{:?}: {}", r.verdict_y.decision, r.verdict_y.rationale));
        t.row("via Z", format!("{:?}: {}", r.verdict_z.decision, r.verdict_z.rationale));
        t.row("A finite a.s.", format!("{:?}", r.decision()));
        if let Some(mean) = &r.mean {
            t.row(format!("E_{x}[A]"), format!("{} ({:?})", fmt(mean.value), mean.decision));
        }
        Ok(Outcome {
            code,
            report: self.envelope(serde_json::to_value(&r)?, code),
            table: t.render(),
            svg: None,
        })
    }

    fn classify(&self, end: Side) -> Result<Outcome, Error> {
        let m = self.model();
        let ss = m.diffusion.scale_speed()?;
        let class = classify_scale_speed(&ss, end, &self.config.verdict);
        let code = if class.kind == BoundaryKind::Inconclusive { EXIT_INCONCLUSIVE } else { EXIT_OK };
        let mut t = Table::new();
        t.row("model", m.label());
        t.row("endpoint", format!("{} = {}", end, end.of(m.diffusion.interval())));
        t.row("I", format!("{:?}: {}", class.i.decision, class.i.rationale));
        t.row("J", format!("{:?}: {}", class.j.decision, class.j.rationale));
        t.row("kind", class.kind);
        Ok(Outcome {
            code,
            report: self.envelope(serde_json::to_value(&class)?, code),
            table: t.render(),
            svg: None,
        })
    }

    fn transform(&self, f: &Expression, samples: usize) -> Result<Outcome, Error> {
        let m = self.model();
        let tc = transform(&m.diffusion, f)?;
        let export = tc.export(samples);
        let mut t = Table::new();
        t.row("model", m.label());
        t.row("f", &export.f);
        t.row("g'", &export.g_prime);
        t.row("Z interval", format!("({}, {})", fmt(export.z_interval.0), fmt(export.z_interval.1)));
        t.row("Z drift at g(x)", &export.drift_x);
        let svg = self.plot.then(|| {
            svg::Chart::new("g(x)", "x", "z")
                .series("g", export.g_table.clone())
                .render()
        });
        Ok(Outcome {
            code: EXIT_OK,
            report: self.envelope(serde_json::to_value(&export)?, EXIT_OK),
            table: t.render(),
            svg,
        })
    }

    fn mean(&self, f: &Expression, x: f64) -> Result<Outcome, Error> {
        let m = self.model();
        let r = mean_functional_with(&m.diffusion, f, x, &self.config.verdict)?;
        let code = decision_code(r.decision);
        let mut t = Table::new();
        t.row("model", m.label());
        t.row("f", f);
        t.row("right part", format!("{:?}: {}", r.right.decision, r.right.rationale));
        t.row("left part", format!("{:?}: {}", r.left.decision, r.left.rationale));
        t.row("left weight", fmt(r.left_weight));
        t.row(format!("E_{x}[A]"), format!("{} ({:?})", fmt(r.value), r.decision));
        Ok(Outcome {
            code,
            report: self.envelope(serde_json::to_value(&r)?, code),
            table: t.render(),
            svg: None,
        })
    }

    fn validate(&self, f: &Expression, x: f64, target: f64) -> Result<Outcome, Error> {
        let m = self.model();
        let d = &m.diffusion;
        let s = &self.config.sim;
        let v = &self.config.validate;
        let cap = v.functional_cap;
        let cfg = SimConfig {
            dt: s.dt,
            n_paths: s.paths,
            seed: s.seed,
            t_max: s.t_max,
            boundary_guard: s.boundary_guard,
            functional_cap: Some(cap),
            ..SimConfig::new(x, target)
        };
        cfg.validate(d.interval())?;
        let f = f.bind(&d.params)?;
        let y = run_y(d, &f, &cfg)?;
        let tc = transform(d, &f)?;
        let z_cfg = SimConfig {
            seed: s.seed.wrapping_add(1),
            t_max: cap,
            functional_cap: None,
            ..cfg.clone()
        };
        let z = run_z(&tc, &z_cfg)?;
        let censor = |r: &SimReport| -> Vec<f64> { r.functionals().iter().map(|a| a.min(cap)).collect() };
        let (a, b) = (censor(&y), censor(&z));
        let ks = ks_summary(&a, &b, v.alpha)?;
        let growth_cfg = SimConfig {
            dt: v.growth_dt,
            n_paths: v.growth_paths,
            seed: s.seed.wrapping_add(2),
            ..cfg.clone()
        };
        let growth = empirical_finiteness(d, &f, &growth_cfg, &v.horizons)?;
        let verdict = analyze_with(d, &f, x, &self.config.verdict)
            .map(|r| format!("{:?}", r.decision()))
            .unwrap_or_else(|e| format!("unavailable: {e}"));
        let passed = ks.statistic < ks.critical;
        let code = if passed { EXIT_OK } else { EXIT_INCONCLUSIVE };

        let mut t = Table::new();
        t.row("model", m.label());
        t.row("f", &f);
        t.row("paths", format!("{} from {x} to {target}, dt = {}", s.paths, s.dt));
        t.row("Y functional", sample_line(&y));
        t.row("Z hitting time", sample_line(&z));
        t.row(
            "KS",
            format!(
                "{:.4} vs critical {:.4} at alpha = {} (censored at {cap}): {}",
                ks.statistic,
                ks.critical,
                ks.alpha,
                if passed { "pass" } else { "reject" }
            ),
        );
        t.row(
            "A_t medians",
            growth
                .horizons
                .iter()
                .zip(&growth.medians)
                .map(|(h, q)| format!("t={h}: {q:.4}"))
                .collect::<Vec<_>>()
                .join(", "),
        );
        t.row(
            "A_t trend",
            match growth.flag {
                GrowthFlag::Plateau => "plateau between the last two horizons".to_string(),
                GrowthFlag::Growth => "median still moving at the last horizon (heuristic, heavy tails converge slowly)".to_string(),
            },
        );
        t.row("analytic verdict", &verdict);

        let svg = self.plot.then(|| {
            let cdf_chart = svg::Chart::new("Empirical CDFs (censored)", "value", "F")
                .series("Y functional", svg::ecdf(&a))
                .series("Z hitting time", svg::ecdf(&b))
                .render();
            let growth_chart = svg::Chart::new("Growth of A_t", "t", "A_t")
                .log_x()
                .series("median", growth.horizons.iter().copied().zip(growth.medians.iter().copied()).collect())
                .series("p90", growth.horizons.iter().copied().zip(growth.p90.iter().copied()).collect())
                .render();
            svg::stack(&[cdf_chart, growth_chart])
        });
        let summary = |r: &SimReport| {
            json!({
                "mean": finite_or_null(r.mean),
                "stderr": finite_or_null(r.stderr),
                "hit_fraction": r.hit_fraction,
                "steps": r.steps,
                "guard_events": r.guard_events,
                "explosions": r.explosions,
            })
        };
        let result = json!({
            "censor_at": cap,
            "ks": ks,
            "ks_pass": passed,
            "y": summary(&y),
            "z": summary(&z),
            "z_interval": [fmt(tc.z_interval.0), fmt(tc.z_interval.1)],
            "growth": growth,
            "growth_consistent_with": match growth.flag {
                GrowthFlag::Plateau => "Finite",
                GrowthFlag::Growth => "Infinite",
            },
            "analytic_verdict": verdict,
        });
        Ok(Outcome {
            code,
            report: self.envelope(result, code),
            table: t.render(),
            svg,
        })
    }
}

fn catalogue_listing() -> Outcome {
    let mut t = Table::new();
    for fam in catalogue::FAMILIES {
        let params = fam
            .params
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(", ");
        let tag = if fam.extension { " [extension]" } else { "" };
        t.row(fam.name, format!("{}{tag}; defaults: {}", fam.summary, if params.is_empty() { "none" } else { &params }));
    }
    let report = json!({
        "command": "catalogue",
        "exit_code": EXIT_OK,
        "result": {
            "families": catalogue::FAMILIES,
            "known_answers": catalogue::known_answers(),
        },
    });
    Outcome {
        code: EXIT_OK,
        report,
        table: t.render(),
        svg: None,
    }
}

fn sample_line(r: &SimReport) -> String {
    format!(
        "mean {} ± {}, {:.1}% hit, {} guard events",
        fmt(r.mean),
        fmt(r.stderr),
        100.0 * r.hit_fraction,
        r.guard_events
    )
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

/// Extended reals as text.
pub fn fmt(v: f64) -> String {
    if v.is_nan() {
        "undecided".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.10}")
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    }
}

/// Merge parameter overrides into a model.
pub fn with_params(d: &Diffusion, params: &Bindings) -> Result<Diffusion, Error> {
    if params.is_empty() {
        return Ok(d.clone());
    }
    let mut v = serde_json::to_value(d)?;
    for (k, p) in params {
        v["params"][k] = json!(p);
    }
    Ok(serde_json::from_value(v)?)
}
