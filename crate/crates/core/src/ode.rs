//! Dormand–Prince 5(4) with adaptive steps, for small systems.

use crate::Error;

#[derive(Debug, Clone, Copy)]
pub(crate) struct OdeOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_steps: usize,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// fifth-order weights minus embedded fourth-order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

type State = [f64; 2];

fn axpy(y: &State, terms: &[(f64, &State)], h: f64) -> State {
    let mut out = *y;
    for (c, k) in terms {
        out[0] += h * c * k[0];
        out[1] += h * c * k[1];
    }
    out
}

/// Integrate `y' = f(t, y)` from `t0` to `t1`, starting with step `h` (updated
/// in place so consecutive segments reuse it).
pub(crate) fn integrate<F>(f: &mut F, t0: f64, y0: State, t1: f64, h: &mut f64, opts: &OdeOptions) -> Result<State, Error>
where
    F: FnMut(f64, &State) -> State,
{
    let dir = (t1 - t0).signum();
    let mut t = t0;
    let mut y = y0;
    if t0 == t1 {
        return Ok(y);
    }
    let mut step = h.abs().min((t1 - t0).abs()).max(1e-12 * (t1 - t0).abs());
    let mut k1 = f(t, &y);
    for _ in 0..opts.max_steps {
        let remaining = (t1 - t).abs();
        if remaining <= 1e-14 * t1.abs().max(1.0) {
            return Ok(y);
        }
        let hs = dir * step.min(remaining);
        let k2 = f(t + C2 * hs, &axpy(&y, &[(A21, &k1)], hs));
        let k3 = f(t + C3 * hs, &axpy(&y, &[(A31, &k1), (A32, &k2)], hs));
        let k4 = f(t + C4 * hs, &axpy(&y, &[(A41, &k1), (A42, &k2), (A43, &k3)], hs));
        let k5 = f(
            t + C5 * hs,
            &axpy(&y, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)], hs),
        );
        let k6 = f(
            t + hs,
            &axpy(&y, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)], hs),
        );
        let y_new = axpy(&y, &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)], hs);
        let k7 = f(t + hs, &y_new);
        let mut err = 0.0f64;
        for i in 0..2 {
            let e = hs * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let scale = opts.abs_tol + opts.rel_tol * y[i].abs().max(y_new[i].abs());
            err = err.max((e / scale).abs());
        }
        if !err.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
            step *= 0.2;
            if step < 1e-300 {
                return Err(Error::Numerical(format!("ODE step underflow at t = {t}")));
            }
            continue;
        }
        if err <= 1.0 {
            t += hs;
            y = y_new;
            k1 = k7;
            *h = step;
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        step *= factor;
    }
    Err(Error::Numerical(format!(
        "ODE integration exceeded {} steps before reaching t = {t1}",
        opts.max_steps
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_oscillator() {
        let opts = OdeOptions { abs_tol: 1e-12, rel_tol: 1e-10, max_steps: 100_000 };
        let mut h = 0.1;
        let mut f = |_t: f64, y: &State| [y[1], -y[0]];
        let y = integrate(&mut f, 0.0, [0.0, 1.0], 10.0, &mut h, &opts).unwrap();
        assert!((y[0] - 10f64.sin()).abs() < 1e-8);
        assert!((y[1] - 10f64.cos()).abs() < 1e-8);
    }

    #[test]
    fn backwards_exponential() {
        let opts = OdeOptions { abs_tol: 1e-12, rel_tol: 1e-10, max_steps: 100_000 };
        let mut h = 0.1;
        let mut f = |_t: f64, y: &State| [y[0], 0.0];
        let y = integrate(&mut f, 2.0, [1.0, 0.0], 0.0, &mut h, &opts).unwrap();
        assert!((y[0] - (-2f64).exp()).abs() < 1e-9);
    }
}
