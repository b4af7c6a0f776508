//! Memoized cumulative integrals `F(x) = ∫_{x0}^x ρ` on an open interval.
//!
//! Anchors sit at equal steps of a coordinate `φ` that stretches each
//! endpoint logarithmically, so every cell is small relative to the local
//! scale of the interval. Anchor values are accumulated outward from `x0`
//! by adaptive quadrature; between anchors `F` is a quintic Hermite
//! interpolant built from `F`, `ρ` and `ρ'`. Anchor `k` only ever depends on
//! anchors `0..k`, so values do not depend on the order of evaluation.

use std::sync::{Arc, RwLock};

use crate::quadrature::{integrate_with, QuadOptions};
use crate::Error;

pub(crate) type Density = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Coordinate in which anchors are equally spaced.
#[derive(Debug, Clone, Copy)]
pub(crate) enum AnchorMap {
    Logit { l: f64, r: f64 },
    LogLeft { l: f64 },
    LogRight { r: f64 },
    Asinh,
}

impl AnchorMap {
    pub(crate) fn for_interval(l: f64, r: f64) -> AnchorMap {
        match (l.is_finite(), r.is_finite()) {
            (true, true) => AnchorMap::Logit { l, r },
            (true, false) => AnchorMap::LogLeft { l },
            (false, true) => AnchorMap::LogRight { r },
            (false, false) => AnchorMap::Asinh,
        }
    }

    pub(crate) fn forward(&self, x: f64) -> f64 {
        match *self {
            AnchorMap::Logit { l, r } => ((x - l) / (r - x)).ln(),
            AnchorMap::LogLeft { l } => (x - l).ln(),
            AnchorMap::LogRight { r } => -(r - x).ln(),
            AnchorMap::Asinh => x.asinh(),
        }
    }

    pub(crate) fn inverse(&self, phi: f64) -> f64 {
        match *self {
            AnchorMap::Logit { l, r } => {
                if phi > 0.0 {
                    r - (r - l) / (1.0 + phi.exp())
                } else {
                    l + (r - l) / (1.0 + (-phi).exp())
                }
            }
            AnchorMap::LogLeft { l } => l + phi.exp(),
            AnchorMap::LogRight { r } => r - (-phi).exp(),
            AnchorMap::Asinh => phi.sinh(),
        }
    }

    /// `dx/dφ` at `x`.
    pub(crate) fn jacobian(&self, x: f64) -> f64 {
        match *self {
            AnchorMap::Logit { l, r } => (x - l) * (r - x) / (r - l),
            AnchorMap::LogLeft { l } => x - l,
            AnchorMap::LogRight { r } => r - x,
            AnchorMap::Asinh => x.hypot(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Node {
    pub x: f64,
    pub value: f64,
    pub rho: f64,
    pub drho: f64,
}

#[derive(Default)]
struct Sides {
    up: Vec<Node>,
    down: Vec<Node>,
    // the last anchor toward each end has been reached
    up_closed: bool,
    down_closed: bool,
    // closed because the integral left the range where it is needed
    up_saturated: bool,
    down_saturated: bool,
}

enum Cell {
    Interior(Node, Node),
    /// Past the last resolvable anchor toward an end.
    Edge(Node),
}

pub(crate) struct Ladder {
    l: f64,
    r: f64,
    map: AnchorMap,
    origin: f64,
    step: f64,
    density: Density,
    slope: Option<Density>,
    // absolute rounding noise of density evaluations
    noise: Option<Density>,
    // |F| beyond which an unresolvable cell ends the table at ±∞
    saturation: Option<f64>,
    nodes: RwLock<Sides>,
    quad: QuadOptions,
}

const MAX_NODES: usize = 1 << 18;

impl Ladder {
    pub(crate) fn new(
        (l, r): (f64, f64),
        x0: f64,
        step: f64,
        density: Density,
        slope: Option<Density>,
    ) -> Result<Ladder, Error> {
        let map = AnchorMap::for_interval(l, r);
        let origin = map.forward(x0);
        let first = node_at(x0, 0.0, &density, slope.as_ref())?;
        Ok(Ladder {
            l,
            r,
            map,
            origin,
            step,
            density,
            slope,
            noise: None,
            saturation: None,
            nodes: RwLock::new(Sides {
                up: vec![first],
                down: vec![first],
                ..Sides::default()
            }),
            quad: QuadOptions {
                abs_tol: 0.0,
                rel_tol: 1e-13,
                max_subdivisions: 256,
            },
        })
    }

    pub(crate) fn with_noise(mut self, noise: Density) -> Ladder {
        self.noise = Some(noise);
        self
    }

    pub(crate) fn with_saturation(mut self, level: f64) -> Ladder {
        self.saturation = Some(level);
        self
    }

    fn anchor_x(&self, index: i64) -> f64 {
        self.map.inverse(self.origin + index as f64 * self.step)
    }

    pub(crate) fn density(&self, x: f64) -> f64 {
        (self.density)(x)
    }

    fn extend(&self, sides: &mut Sides, index: i64) -> Result<(), Error> {
        let up = index >= 0;
        let target = index.unsigned_abs() as usize;
        if target >= MAX_NODES {
            return Err(Error::OutOfDomain {
                x: self.anchor_x(index),
                reason: "anchor table limit reached".into(),
            });
        }
        let (list, closed, saturated) = if up {
            (&mut sides.up, &mut sides.up_closed, &mut sides.up_saturated)
        } else {
            (&mut sides.down, &mut sides.down_closed, &mut sides.down_saturated)
        };
        while list.len() <= target && !*closed {
            let prev = *list.last().unwrap();
            let k = list.len() as i64;
            let x = self.anchor_x(if up { k } else { -k });
            if !x.is_finite() || x == prev.x || x <= self.l || x >= self.r {
                *closed = true;
                break;
            }
            let density = &self.density;
            let noise = |u: f64| self.noise.as_ref().map_or_else(|| 1e-13 * density(u).abs(), |m| m(u));
            let floor = (x - prev.x).abs() * noise(prev.x).max(noise(x));
            let opts = QuadOptions { abs_tol: floor, ..self.quad };
            let seg = integrate_with(|u| density(u), prev.x, x, &opts)?;
            if !seg.converged && seg.error > 1e-9 * (seg.value.abs() + prev.value.abs()) + 10.0 * floor {
                if self.saturation.is_some_and(|s| prev.value.abs() >= s) {
                    *closed = true;
                    *saturated = true;
                    break;
                }
                return Err(Error::Numerical(format!(
                    "anchor integral on [{}, {x}] did not converge (value {:e}, error {:e})",
                    prev.x, seg.value, seg.error
                )));
            }
            let value = prev.value + seg.value;
            if !value.is_finite() {
                *closed = true;
                break;
            }
            let node = node_at(x, value, &self.density, self.slope.as_ref())?;
            list.push(node);
        }
        Ok(())
    }

    /// Anchor `index`, or `None` past the resolvable range.
    fn node(&self, index: i64) -> Result<Option<Node>, Error> {
        let i = index.unsigned_abs() as usize;
        {
            let sides = self.nodes.read().unwrap();
            let (list, closed) = if index >= 0 {
                (&sides.up, sides.up_closed)
            } else {
                (&sides.down, sides.down_closed)
            };
            if let Some(n) = list.get(i) {
                return Ok(Some(*n));
            }
            if closed {
                return Ok(None);
            }
        }
        let mut sides = self.nodes.write().unwrap();
        self.extend(&mut sides, index)?;
        let list = if index >= 0 { &sides.up } else { &sides.down };
        Ok(list.get(i).copied())
    }

    fn last_node(&self, up: bool) -> Node {
        let sides = self.nodes.read().unwrap();
        *if up { sides.up.last() } else { sides.down.last() }.unwrap()
    }

    fn cell(&self, x: f64) -> Result<Cell, Error> {
        if !(x > self.l && x < self.r) {
            return Err(Error::OutOfDomain {
                x,
                reason: format!("outside ({}, {})", self.l, self.r),
            });
        }
        let phi = (self.map.forward(x) - self.origin) / self.step;
        let mut j = if phi.is_finite() {
            phi.floor().clamp(-(MAX_NODES as f64), MAX_NODES as f64) as i64
        } else if phi > 0.0 {
            MAX_NODES as i64
        } else {
            -(MAX_NODES as i64)
        };
        for _ in 0..4 {
            let lo = self.node(j)?;
            let hi = self.node(j + 1)?;
            match (lo, hi) {
                (Some(lo), Some(hi)) => {
                    if x < lo.x {
                        j -= 1;
                    } else if x > hi.x {
                        j += 1;
                    } else {
                        return Ok(Cell::Interior(lo, hi));
                    }
                }
                (Some(lo), None) if j >= 0 => {
                    if x >= lo.x {
                        return Ok(Cell::Edge(lo));
                    }
                    j -= 1;
                }
                (None, Some(hi)) if j < 0 => {
                    if x <= hi.x {
                        return Ok(Cell::Edge(hi));
                    }
                    j += 1;
                }
                _ => {
                    let last = self.last_node(j >= 0);
                    if (j >= 0 && x >= last.x) || (j < 0 && x <= last.x) {
                        return Ok(Cell::Edge(last));
                    }
                    j = if j >= 0 { j.min(MAX_NODES as i64) / 2 } else { j / 2 };
                }
            }
        }
        // slow path: walk from the origin
        let up = x >= self.origin_x();
        let mut k: i64 = 0;
        loop {
            let next = if up { k + 1 } else { k - 1 };
            match self.node(next)? {
                None => return Ok(Cell::Edge(self.node(k)?.unwrap())),
                Some(n) => {
                    if (up && x <= n.x) || (!up && x >= n.x) {
                        let other = self.node(k)?.unwrap();
                        return Ok(if up { Cell::Interior(other, n) } else { Cell::Interior(n, other) });
                    }
                }
            }
            k = next;
        }
    }

    fn origin_x(&self) -> f64 {
        self.nodes.read().unwrap().up[0].x
    }

    fn tail_integral(&self, from: &Node, x: f64) -> Result<f64, Error> {
        let density = &self.density;
        if (x - from.x).abs() <= 1e-12 * x.abs().max(from.x.abs()) {
            let rho = density(x);
            if rho.is_finite() {
                return Ok(from.value + 0.5 * (from.rho + rho) * (x - from.x));
            }
        }
        match integrate_with(|u| density(u), from.x, x, &self.quad) {
            Ok(seg) if !seg.value.is_nan() => Ok(from.value + seg.value),
            // past the last finite anchor the integral has left floating-point range
            _ if density(x).is_finite() && density(x) != 0.0 => {
                Ok(f64::INFINITY * density(x).signum() * (x - from.x).signum())
            }
            Err(e) => Err(e.into()),
            Ok(_) => Err(Error::Numerical(format!("integral from {} to {x} is NaN", from.x))),
        }
    }

    /// `∫_{x0}^x ρ`.
    pub(crate) fn value(&self, x: f64) -> Result<f64, Error> {
        let (lo, hi) = match self.cell(x)? {
            Cell::Interior(lo, hi) => (lo, hi),
            Cell::Edge(n) => {
                let sides = self.nodes.read().unwrap();
                let saturated = if x > n.x { sides.up_saturated } else { sides.down_saturated };
                drop(sides);
                if saturated && x != n.x {
                    return Ok(f64::INFINITY.copysign(n.value));
                }
                return self.tail_integral(&n, x);
            }
        };
        if x == lo.x {
            return Ok(lo.value);
        }
        if x == hi.x {
            return Ok(hi.value);
        }
        if self.slope.is_some() && lo.drho.is_finite() && hi.drho.is_finite() {
            let w = hi.x - lo.x;
            Ok(hermite5(&lo, &hi, w, (x - lo.x) / w))
        } else {
            self.tail_integral(&lo, x)
        }
    }

    /// Solve `F(x) = z` for increasing `F` (ρ > 0).
    pub(crate) fn inverse(&self, z: f64) -> Result<f64, Error> {
        self.invert(z, false)
    }

    /// Like `inverse`, but values beyond what the table can resolve map to
    /// the outermost resolvable point instead of failing.
    pub(crate) fn saturating_inverse(&self, z: f64) -> Result<f64, Error> {
        self.invert(z, true)
    }

    fn invert(&self, z: f64, saturate: bool) -> Result<f64, Error> {
        if z.is_nan() {
            return Err(Error::Numerical("inverse of NaN".into()));
        }
        let up = z >= 0.0;
        loop {
            let wanted = {
                let sides = self.nodes.read().unwrap();
                let (list, closed) = if up {
                    (&sides.up, sides.up_closed)
                } else {
                    (&sides.down, sides.down_closed)
                };
                let idx = if up {
                    list.partition_point(|n| n.value < z)
                } else {
                    list.partition_point(|n| n.value > z)
                };
                if idx == 0 {
                    return Ok(list[0].x);
                }
                if idx < list.len() {
                    let (a, b) = (list[idx - 1], list[idx]);
                    drop(sides);
                    return if up { self.solve_in_cell(a, b, z) } else { self.solve_in_cell(b, a, z) };
                }
                if closed {
                    let last = *list.last().unwrap();
                    let plateau = if up {
                        list[list.partition_point(|n| n.value < last.value)].x
                    } else {
                        list[list.partition_point(|n| n.value > last.value)].x
                    };
                    drop(sides);
                    return match self.solve_at_edge(last, z, up) {
                        Err(_) if saturate => Ok(plateau),
                        other => other,
                    };
                }
                let n = list.len() as i64;
                let target = (n + n / 2 + 16).min(MAX_NODES as i64 - 1);
                if n >= MAX_NODES as i64 - 1 {
                    if saturate {
                        let top = list.last().unwrap().value;
                        let i = if up {
                            list.partition_point(|n| n.value < top)
                        } else {
                            list.partition_point(|n| n.value > top)
                        };
                        return Ok(list[i].x);
                    }
                    return Err(Error::OutOfDomain {
                        x: list.last().unwrap().x,
                        reason: format!("no preimage found for {z}"),
                    });
                }
                if up { target } else { -target }
            };
            let mut sides = self.nodes.write().unwrap();
            self.extend(&mut sides, wanted)?;
        }
    }

    fn solve_at_edge(&self, last: Node, z: f64, up: bool) -> Result<f64, Error> {
        let end = if up { self.r } else { self.l };
        let fail = || Error::OutOfDomain {
            x: end,
            reason: format!("no preimage found for {z}"),
        };
        if !end.is_finite() {
            return Err(fail());
        }
        let (mut a, mut b) = if up { (last.x, end) } else { (end, last.x) };
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if mid == a || mid == b {
                break;
            }
            if self.value(mid)? < z {
                a = mid;
            } else {
                b = mid;
            }
        }
        let x = 0.5 * (a + b);
        if x <= self.l || x >= self.r {
            return Err(fail());
        }
        Ok(x)
    }

    fn solve_in_cell(&self, lo: Node, hi: Node, z: f64) -> Result<f64, Error> {
        if z == lo.value {
            return Ok(lo.x);
        }
        if z == hi.value {
            return Ok(hi.x);
        }
        let w = hi.x - lo.x;
        let eval = |t: f64| -> Result<f64, Error> {
            if self.slope.is_some() && lo.drho.is_finite() && hi.drho.is_finite() {
                Ok(hermite5(&lo, &hi, w, t))
            } else {
                self.value(lo.x + t * w)
            }
        };
        let (mut a, mut b) = (0.0f64, 1.0f64);
        let mut t = ((z - lo.value) / (hi.value - lo.value)).clamp(0.0, 1.0);
        for _ in 0..100 {
            let f = eval(t)? - z;
            if f == 0.0 {
                break;
            }
            if f < 0.0 {
                a = t;
            } else {
                b = t;
            }
            let slope = w * self.density(lo.x + t * w);
            let mut next = t - f / slope;
            if !(next > a && next < b) || !next.is_finite() {
                next = 0.5 * (a + b);
            }
            if (next - t).abs() <= 1e-16 || b - a <= 1e-16 {
                t = next;
                break;
            }
            t = next;
        }
        Ok(lo.x + t * w)
    }

}

fn node_at(x: f64, value: f64, density: &Density, slope: Option<&Density>) -> Result<Node, Error> {
    let rho = density(x);
    if !rho.is_finite() {
        return Err(Error::Numerical(format!("density not finite at anchor x = {x} (value {rho})")));
    }
    // an unusable slope sends the adjacent cells to quadrature
    let drho = slope.map(|s| s(x)).filter(|d| d.is_finite()).unwrap_or(f64::NAN);
    Ok(Node { x, value, rho, drho })
}

/// Quintic Hermite interpolant on a cell of width `w`, at `t ∈ [0, 1]`.
#[inline]
fn hermite5(lo: &Node, hi: &Node, w: f64, t: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    let t4 = t3 * t;
    let t5 = t4 * t;
    let h0 = 1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5;
    let h1 = t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5;
    let h2 = 0.5 * t2 - 1.5 * t3 + 1.5 * t4 - 0.5 * t5;
    let h3 = 0.5 * t3 - t4 + 0.5 * t5;
    let h4 = -4.0 * t3 + 7.0 * t4 - 3.0 * t5;
    let h5 = 10.0 * t3 - 15.0 * t4 + 6.0 * t5;
    h0 * lo.value
        + h1 * w * lo.rho
        + h2 * (w * lo.drho) * w
        + h3 * (w * hi.drho) * w
        + h4 * w * hi.rho
        + h5 * hi.value
}
