//! Euler–Maruyama simulation of `Y` and of the time-changed process `Z`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::Diffusion;
use crate::expr::Expression;
use crate::extended;
use crate::timechange::TimeChanged;
use crate::Error;

/// Paths whose state leaves this bound are abandoned as exploded.
const OVERFLOW_GUARD: f64 = 1e150;
/// Share of steps allowed to trigger the boundary guard.
const MAX_GUARD_SHARE: f64 = 1e-3;
/// Grid size of the tabulated `Z` drift.
const DRIFT_TABLE_POINTS: usize = 1 << 17;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub y_start: f64,
    pub y_target: f64,
    /// Paths still running at this time are stopped unhit.
    pub t_max: f64,
    /// Width of the band above a finite left end where paths are reflected.
    pub boundary_guard: f64,
    /// Optional absorbing level below the start.
    #[serde(default)]
    pub lower: Option<f64>,
    /// Stop a path once its functional reaches this value.
    #[serde(default)]
    pub functional_cap: Option<f64>,
    /// Accumulate `f(Y)` only while `Y` is at or above this level.
    #[serde(default)]
    pub accumulate_above: Option<f64>,
}

impl SimConfig {
    pub fn new(y_start: f64, y_target: f64) -> SimConfig {
        SimConfig {
            dt: 1e-4,
            n_paths: 10_000,
            seed: 0,
            y_start,
            y_target,
            t_max: 100.0,
            boundary_guard: 1e-6,
            lower: None,
            functional_cap: None,
            accumulate_above: None,
        }
    }

    pub fn validate(&self, (l, r): (f64, f64)) -> Result<(), Error> {
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.n_paths == 0 {
            return bad("n_paths must be at least 1".into());
        }
        if !(self.t_max > 0.0) {
            return bad(format!("t_max must be positive, got {}", self.t_max));
        }
        if !(self.boundary_guard >= 0.0) {
            return bad(format!("boundary_guard must be non-negative, got {}", self.boundary_guard));
        }
        if !(l < self.y_start && self.y_start < self.y_target && self.y_target < r) {
            return bad(format!(
                "need l < y_start < y_target < r, got y_start = {}, y_target = {} on ({l}, {r})",
                self.y_start, self.y_target
            ));
        }
        if let Some(lo) = self.lower {
            if !(l <= lo && lo < self.y_start) {
                return bad(format!("lower level {lo} must lie in [l, y_start)"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathEnd {
    Target,
    Lower,
    Horizon,
    Capped,
    Exploded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Time the path stopped, whatever the reason.
    pub hit_time: f64,
    #[serde(with = "extended")]
    pub functional: f64,
    /// Stopped at the target or the lower level.
    pub hit: bool,
    pub end: PathEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsSummary {
    pub statistic: f64,
    pub n: usize,
    pub m: usize,
    pub critical: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub samples: Vec<Sample>,
    /// Mean and standard error of the functional over all paths.
    #[serde(with = "extended")]
    pub mean: f64,
    #[serde(with = "extended")]
    pub stderr: f64,
    pub hit_fraction: f64,
    pub steps: u64,
    pub guard_events: u64,
    pub explosions: usize,
    pub ks_against: Option<KsSummary>,
}

impl SimReport {
    fn from_paths(paths: Vec<PathResult>) -> SimReport {
        let steps = paths.iter().map(|p| p.steps).sum();
        let guard_events = paths.iter().map(|p| p.guard_events).sum();
        let samples: Vec<Sample> = paths.into_iter().map(|p| p.sample).collect();
        let values: Vec<f64> = samples.iter().map(|s| s.functional).collect();
        let (mean, stderr) = mean_stderr(&values);
        let hits = samples.iter().filter(|s| s.hit).count();
        SimReport {
            hit_fraction: hits as f64 / samples.len() as f64,
            explosions: samples.iter().filter(|s| s.end == PathEnd::Exploded).count(),
            samples,
            mean,
            stderr,
            steps,
            guard_events,
            ks_against: None,
        }
    }

    pub fn functionals(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.functional).collect()
    }

    pub fn hit_times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.hit_time).collect()
    }

    /// Mean and standard error of `h` over the samples.
    pub fn statistic<F: Fn(&Sample) -> f64>(&self, h: F) -> (f64, f64) {
        let v: Vec<f64> = self.samples.iter().map(h).collect();
        mean_stderr(&v)
    }

    /// CSV with one row per path.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "path_index,hit,hit_time,functional")?;
        for (i, s) in self.samples.iter().enumerate() {
            writeln!(w, "{i},{},{},{}", s.hit, s.hit_time, s.functional)?;
        }
        Ok(())
    }
}

pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

struct PathModel<'a> {
    drift: &'a (dyn Fn(f64) -> f64 + Sync),
    sigma: &'a (dyn Fn(f64) -> f64 + Sync),
    f: &'a (dyn Fn(f64) -> f64 + Sync),
    l: f64,
    start: f64,
    target: f64,
}

struct PathResult {
    sample: Sample,
    steps: u64,
    guard_events: u64,
    // functional at each requested horizon (last value if the path stopped)
    at_horizons: Vec<f64>,
}

/// `∫ f(Y) 1{Y ≥ above}` over one step, with `Y` linear in time.
fn step_area(model: &PathModel, above: Option<f64>, y0: f64, f0: f64, y1: f64, f1: f64, h: f64) -> f64 {
    let Some(lo) = above else {
        return 0.5 * h * (f0 + f1);
    };
    match (y0 >= lo, y1 >= lo) {
        (true, true) => 0.5 * h * (f0 + f1),
        (false, false) => 0.0,
        (up0, _) => {
            let theta = if up0 { (y0 - lo) / (y0 - y1) } else { (y1 - lo) / (y1 - y0) };
            let f_lo = (model.f)(lo);
            let f_end = if up0 { f0 } else { f1 };
            0.5 * theta * h * (f_lo + f_end)
        }
    }
}

fn simulate_path(model: &PathModel, cfg: &SimConfig, index: usize, horizons: &[f64]) -> PathResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let above = cfg.accumulate_above;
    let weight = |y: f64| match above {
        Some(lo) if y < lo => 0.0,
        _ => (model.f)(y),
    };
    let floor = model.l + cfg.boundary_guard;
    let reflect = model.l.is_finite();
    let (mut t, mut y, mut a) = (0.0f64, model.start, 0.0f64);
    let mut fy = weight(y);
    let mut steps = 0u64;
    let mut guard_events = 0u64;
    let mut at_horizons = Vec::with_capacity(horizons.len());
    let mut next_horizon = 0;
    let end = loop {
        while next_horizon < horizons.len() && t >= horizons[next_horizon] {
            at_horizons.push(a);
            next_horizon += 1;
        }
        if t >= cfg.t_max {
            break PathEnd::Horizon;
        }
        let h = cfg.dt.min(cfg.t_max - t);
        let s = (model.sigma)(y);
        let noise: f64 = rng.sample(StandardNormal);
        let mut y1 = y + (model.drift)(y) * h + s * h.sqrt() * noise;
        steps += 1;
        if !y1.is_finite() || y1.abs() > OVERFLOW_GUARD {
            break PathEnd::Exploded;
        }
        // crossings, observed or inside the step (Brownian bridge)
        let mut crossing = None;
        if y1 >= model.target {
            let theta = (model.target - y) / (y1 - y);
            crossing = Some((model.target, theta, PathEnd::Target));
        } else if let Some(lo) = cfg.lower.filter(|&lo| y1 <= lo) {
            let theta = (y - lo) / (y - y1);
            crossing = Some((lo, theta, PathEnd::Lower));
        } else {
            let var = s * s * h;
            let up = (-2.0 * (model.target - y) * (model.target - y1) / var).exp();
            let down = cfg.lower.map_or(0.0, |lo| (-2.0 * (y - lo) * (y1 - lo) / var).exp());
            if up > 0.0 || down > 0.0 {
                let u: f64 = rng.random();
                if u < up {
                    crossing = Some((model.target, 0.5, PathEnd::Target));
                } else if u < up + down {
                    crossing = Some((cfg.lower.unwrap(), 0.5, PathEnd::Lower));
                }
            }
        }
        if let Some((level, theta, end)) = crossing {
            let dt_hit = theta.clamp(0.0, 1.0) * h;
            a += step_area(model, above, y, fy, level, weight(level), dt_hit);
            t += dt_hit;
            break end;
        }
        if reflect && y1 < floor {
            y1 = (2.0 * floor - y1).max(floor);
            guard_events += 1;
        }
        let f1 = weight(y1);
        a += step_area(model, above, y, fy, y1, f1, h);
        t += h;
        y = y1;
        fy = f1;
        if let Some(cap) = cfg.functional_cap {
            if a >= cap {
                break PathEnd::Capped;
            }
        }
    };
    while at_horizons.len() < horizons.len() {
        at_horizons.push(a);
    }
    PathResult {
        sample: Sample {
            hit_time: t,
            functional: a,
            hit: matches!(end, PathEnd::Target | PathEnd::Lower),
            end,
        },
        steps,
        guard_events,
        at_horizons,
    }
}

fn run_paths(model: &PathModel, cfg: &SimConfig, horizons: &[f64]) -> Result<Vec<PathResult>, Error> {
    let paths: Vec<PathResult> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| simulate_path(model, cfg, i, horizons))
        .collect();
    let steps: u64 = paths.iter().map(|p| p.steps).sum();
    let guards: u64 = paths.iter().map(|p| p.guard_events).sum();
    if guards as f64 > MAX_GUARD_SHARE * steps as f64 {
        return Err(Error::Simulation(format!(
            "boundary guard triggered on {guards} of {steps} steps (limit {:.1}%); reduce dt",
            100.0 * MAX_GUARD_SHARE
        )));
    }
    Ok(paths)
}

/// Simulate `Y` from `y_start` until it first reaches `y_target`, accumulating
/// `A_t = ∫_0^t f(Y_s) ds`.
pub fn run_y(d: &Diffusion, f: &Expression, cfg: &SimConfig) -> Result<SimReport, Error> {
    cfg.validate(d.interval())?;
    let f = f.bind(&d.params)?;
    let drift = |x: f64| d.drift(x);
    let sigma = |x: f64| d.dispersion(x);
    let weight = |x: f64| f.value(x);
    let model = PathModel {
        drift: &drift,
        sigma: &sigma,
        f: &weight,
        l: d.l,
        start: cfg.y_start,
        target: cfg.y_target,
    };
    Ok(SimReport::from_paths(run_paths(&model, cfg, &[])?))
}

/// `G∘g⁻¹` on a uniform grid, with direct evaluation outside it.
struct DriftTable<'a> {
    tc: &'a TimeChanged,
    lo: f64,
    step: f64,
    values: Vec<f64>,
}

impl<'a> DriftTable<'a> {
    fn new(tc: &'a TimeChanged, lo: f64, hi: f64) -> DriftTable<'a> {
        let n = DRIFT_TABLE_POINTS;
        let step = (hi - lo) / (n - 1) as f64;
        let values = (0..n)
            .into_par_iter()
            .map(|i| tc.drift_z(lo + i as f64 * step))
            .collect();
        DriftTable { tc, lo, step, values }
    }

    fn at(&self, z: f64) -> f64 {
        let u = (z - self.lo) / self.step;
        if u >= 0.0 && u < (self.values.len() - 1) as f64 {
            let i = u as usize;
            let w = u - i as f64;
            let v = self.values[i] + w * (self.values[i + 1] - self.values[i]);
            if v.is_finite() {
                return v;
            }
        }
        self.tc.drift_z(z)
    }
}

/// Simulate `Z` from `g(y_start)` until it first reaches `g(y_target)`. The
/// functional is the elapsed time of `Z`.
pub fn run_z(tc: &TimeChanged, cfg: &SimConfig) -> Result<SimReport, Error> {
    cfg.validate(tc.source.interval())?;
    let z_start = tc.g.value(cfg.y_start)?;
    let z_target = tc.g.value(cfg.y_target)?;
    let z_lower = cfg.lower.map(|lo| tc.g.value(lo)).transpose()?;
    let (zl, _) = tc.z_interval;
    let reach = z_start - 10.0 * cfg.t_max.sqrt() - 1.0;
    let lo = if zl.is_finite() { reach.max(zl + cfg.boundary_guard) } else { reach };
    let table = DriftTable::new(tc, lo, z_target);
    let drift = |z: f64| table.at(z);
    let sigma = |_z: f64| 1.0;
    let one = |_z: f64| 1.0;
    let model = PathModel {
        drift: &drift,
        sigma: &sigma,
        f: &one,
        l: zl,
        start: z_start,
        target: z_target,
    };
    let z_cfg = SimConfig {
        y_start: z_start,
        y_target: z_target,
        lower: z_lower,
        accumulate_above: None,
        ..cfg.clone()
    };
    Ok(SimReport::from_paths(run_paths(&model, &z_cfg, &[])?))
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64, Error> {
    if a.len() < 100 || b.len() < 100 {
        return Err(Error::Precondition(format!(
            "KS needs at least 100 samples on each side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Precondition("KS samples contain NaN".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(d)
}

/// Asymptotic critical value of the two-sample statistic at level `alpha`.
pub fn ks_critical(alpha: f64, n: usize, m: usize) -> f64 {
    let c = (-0.5 * (alpha / 2.0).ln()).sqrt();
    c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

pub fn ks_summary(a: &[f64], b: &[f64], alpha: f64) -> Result<KsSummary, Error> {
    Ok(KsSummary {
        statistic: ks_two_sample(a, b)?,
        n: a.len(),
        m: b.len(),
        critical: ks_critical(alpha, a.len(), b.len()),
        alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrowthFlag {
    Plateau,
    Growth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthDiagnostic {
    pub horizons: Vec<f64>,
    pub medians: Vec<f64>,
    pub p90: Vec<f64>,
    pub flag: GrowthFlag,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = pos.ceil() as usize;
    sorted[i] + (pos - i as f64) * (sorted[j] - sorted[i])
}

/// Quantiles of `A_t` at increasing horizons. The flag is `Plateau` when the
/// median moves by less than 1% between the last two horizons.
pub fn empirical_finiteness(
    d: &Diffusion,
    f: &Expression,
    cfg: &SimConfig,
    horizons: &[f64],
) -> Result<GrowthDiagnostic, Error> {
    if horizons.len() < 2 || horizons.windows(2).any(|w| !(w[0] < w[1])) || !(horizons[0] > 0.0) {
        return Err(Error::Precondition("need at least two increasing positive horizons".into()));
    }
    let f = f.bind(&d.params)?;
    let (l, r) = d.interval();
    let cfg = SimConfig {
        t_max: *horizons.last().unwrap(),
        y_target: r,
        lower: None,
        functional_cap: None,
        ..cfg.clone()
    };
    if !(l < cfg.y_start && cfg.y_start < r) {
        return Err(Error::InvalidModel(format!("start {} is outside ({l}, {r})", cfg.y_start)));
    }
    if !(cfg.dt > 0.0) || cfg.n_paths == 0 {
        return Err(Error::InvalidModel("need dt > 0 and at least one path".into()));
    }
    let drift = |x: f64| d.drift(x);
    let sigma = |x: f64| d.dispersion(x);
    let weight = |x: f64| f.value(x);
    let model = PathModel {
        drift: &drift,
        sigma: &sigma,
        f: &weight,
        l,
        start: cfg.y_start,
        target: r,
    };
    let paths = run_paths(&model, &cfg, horizons)?;
    let mut medians = Vec::new();
    let mut p90 = Vec::new();
    for k in 0..horizons.len() {
        let mut v: Vec<f64> = paths.iter().map(|p| p.at_horizons[k]).collect();
        v.sort_by(f64::total_cmp);
        medians.push(quantile(&v, 0.5));
        p90.push(quantile(&v, 0.9));
    }
    let (prev, last) = (medians[medians.len() - 2], medians[medians.len() - 1]);
    let flag = if (last - prev).abs() <= 0.01 * last.abs() {
        GrowthFlag::Plateau
    } else {
        GrowthFlag::Growth
    };
    Ok(GrowthDiagnostic {
        horizons: horizons.to_vec(),
        medians,
        p90,
        flag,
    })
}
