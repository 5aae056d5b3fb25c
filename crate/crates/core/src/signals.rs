//! Time-domain receptor traces and separation of superposed EOD signals.
//!
//! After the jamming avoidance response the two fish emit at distinct
//! frequencies (wave type) or with disjoint pulse supports (pulse type), so
//! the stationary field `u(x,t) = u_1(x) h_1(t) + u_2(x) h_2(t)` can be
//! split into its per-fish components from samples of the superposition
//! alone. Receptors record `Re u` by default (skin potentials are real);
//! a complex recording mode is kept for diagnostics.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::geometry::{pulse_shape, EodSignal, Vec2};

/// Uniformly sampled multi-receptor trace.
#[derive(Debug, Clone)]
pub struct ReceptorTrace {
    /// Sample instants `t_k = k * dt`, `dt = duration / n_samples`.
    pub times: Vec<f64>,
    /// One row per receptor, one column per sample.
    pub values: Vec<Vec<Complex64>>,
    /// Receptor positions (may be empty for synthetic traces).
    pub points: Vec<Vec2>,
    /// True if the trace stores `Re u` only.
    pub real_mode: bool,
}

impl ReceptorTrace {
    pub fn n_receptors(&self) -> usize {
        self.values.len()
    }

    pub fn n_samples(&self) -> usize {
        self.times.len()
    }

    pub fn dt(&self) -> f64 {
        if self.times.len() > 1 {
            self.times[1] - self.times[0]
        } else {
            0.0
        }
    }

    /// Linear combination of traces (pointwise).
    pub fn axpy(&self, a: Complex64, other: &ReceptorTrace, b: Complex64) -> ReceptorTrace {
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(r1, r2)| {
                r1.iter()
                    .zip(r2)
                    .map(|(x, y)| a * x + b * y)
                    .collect::<Vec<_>>()
            })
            .collect();
        ReceptorTrace {
            times: self.times.clone(),
            values,
            points: self.points.clone(),
            real_mode: self.real_mode,
        }
    }
}

fn sample_times(duration: f64, n_samples: usize) -> Result<Vec<f64>> {
    if !(duration > 0.0) || n_samples < 2 {
        return Err(Error::InvalidParameter(
            "trace needs positive duration and at least two samples".into(),
        ));
    }
    let dt = duration / n_samples as f64;
    Ok((0..n_samples).map(|k| dt * k as f64).collect())
}

/// Sample `u_1(x) e^{i w1 t} + u_2(x) e^{i w2 t}` on the receptors.
pub fn synthesize_wave(
    u1: &[Complex64],
    u2: &[Complex64],
    omega1: f64,
    omega2: f64,
    duration: f64,
    n_samples: usize,
    real_mode: bool,
) -> Result<ReceptorTrace> {
    if !(omega1 > 0.0 && omega2 > 0.0) {
        return Err(Error::InvalidParameter("wave frequencies must be positive".into()));
    }
    if u1.len() != u2.len() {
        return Err(Error::InvalidParameter("component vectors differ in length".into()));
    }
    let times = sample_times(duration, n_samples)?;
    let values = u1
        .iter()
        .zip(u2)
        .map(|(a, b)| {
            times
                .iter()
                .map(|t| {
                    let v = a * Complex64::new(0.0, omega1 * t).exp()
                        + b * Complex64::new(0.0, omega2 * t).exp();
                    if real_mode {
                        Complex64::new(v.re, 0.0)
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    Ok(ReceptorTrace {
        times,
        values,
        points: Vec::new(),
        real_mode,
    })
}

/// Sample `u_1(x) h_1(t) + u_2(x) h_2(t)` for pulse-type EODs.
pub fn synthesize_pulse(
    u1: &[Complex64],
    u2: &[Complex64],
    sig1: &EodSignal,
    sig2: &EodSignal,
    duration: f64,
    n_samples: usize,
    real_mode: bool,
) -> Result<ReceptorTrace> {
    let (h1, h2) = match (sig1, sig2) {
        (EodSignal::Pulse { eta: e1, shift: s1 }, EodSignal::Pulse { eta: e2, shift: s2 }) => {
            ((*e1, *s1), (*e2, *s2))
        }
        _ => {
            return Err(Error::InvalidParameter(
                "pulse synthesis needs two pulse-type signals".into(),
            ))
        }
    };
    if u1.len() != u2.len() {
        return Err(Error::InvalidParameter("component vectors differ in length".into()));
    }
    let times = sample_times(duration, n_samples)?;
    let values = u1
        .iter()
        .zip(u2)
        .map(|(a, b)| {
            times
                .iter()
                .map(|t| {
                    let v = a * pulse_shape(h1.0 * t - h1.1) + b * pulse_shape(h2.0 * t - h2.1);
                    if real_mode {
                        Complex64::new(v.re, 0.0)
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    Ok(ReceptorTrace {
        times,
        values,
        points: Vec::new(),
        real_mode,
    })
}

/// Best rational approximation `p/q` of `x` with bounded denominator, via
/// continued fractions.
fn rational_approx(x: f64, max_den: u64, tol: f64) -> Option<(u64, u64)> {
    let mut a = x.floor();
    let mut frac = x - a;
    let (mut p0, mut q0, mut p1, mut q1) = (1u64, 0u64, a as u64, 1u64);
    for _ in 0..64 {
        if q1 > 0 && (x - p1 as f64 / q1 as f64).abs() < tol {
            return Some((p1, q1));
        }
        if frac.abs() < 1e-15 {
            break;
        }
        let inv = 1.0 / frac;
        a = inv.floor();
        frac = inv - a;
        let p2 = (a as u64).checked_mul(p1)?.checked_add(p0)?;
        let q2 = (a as u64).checked_mul(q1)?.checked_add(q0)?;
        if q2 > max_den {
            break;
        }
        p0 = p1;
        q0 = q1;
        p1 = p2;
        q1 = q2;
    }
    if q1 > 0 && q1 <= max_den && (x - p1 as f64 / q1 as f64).abs() < tol {
        Some((p1, q1))
    } else {
        None
    }
}

/// Integration window: the least common period of both tones when the
/// frequency ratio is rational, else the full trace (with leakage of order
/// `1/(T |w1 - w2|)`).
fn projection_window(trace: &ReceptorTrace, omega1: f64, omega2: f64) -> usize {
    let n = trace.n_samples();
    let dt = trace.dt();
    let total = n as f64 * dt;
    if let Some((_p, q)) = rational_approx(omega1 / omega2, 4096, 1e-9) {
        let t_common = 2.0 * std::f64::consts::PI * q as f64 / omega2;
        let m = (total / t_common + 1e-9).floor();
        if m >= 1.0 {
            let t_win = m * t_common;
            let k = (t_win / dt).round();
            if (k * dt - t_win).abs() < 1e-9 * t_win && k as usize <= n {
                return k as usize;
            }
        }
    }
    n
}

/// Recover the per-fish complex amplitudes from a superposed wave trace by
/// projection onto `e^{i w_k t}`.
pub fn separate_wave(
    trace: &ReceptorTrace,
    omega1: f64,
    omega2: f64,
) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    if !(omega1 > 0.0 && omega2 > 0.0) {
        return Err(Error::InvalidParameter("wave frequencies must be positive".into()));
    }
    if (omega1 - omega2).abs() < 1e-12 * omega1.max(omega2) {
        return Err(Error::Jammed(format!(
            "equal EOD frequencies ({omega1}): components cannot be separated; \
             this is what the jamming avoidance response prevents"
        )));
    }
    let n_win = projection_window(trace, omega1, omega2);
    let factor = if trace.real_mode { 2.0 } else { 1.0 };
    let project = |row: &[Complex64], omega: f64| -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for k in 0..n_win {
            acc += row[k] * Complex64::new(0.0, -omega * trace.times[k]).exp();
        }
        acc * factor / n_win as f64
    };
    let mut u1 = Vec::with_capacity(trace.n_receptors());
    let mut u2 = Vec::with_capacity(trace.n_receptors());
    for row in &trace.values {
        u1.push(project(row, omega1));
        u2.push(project(row, omega2));
    }
    Ok((u1, u2))
}

/// Recover the per-fish components of a pulse-type trace by sampling each
/// signal inside its own time window.
pub fn separate_pulse(
    trace: &ReceptorTrace,
    sig1: &EodSignal,
    sig2: &EodSignal,
) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    let s1 = sig1.pulse_support().ok_or_else(|| {
        Error::InvalidParameter("first signal is not pulse-type".into())
    })?;
    let s2 = sig2.pulse_support().ok_or_else(|| {
        Error::InvalidParameter("second signal is not pulse-type".into())
    })?;
    if s1.0 < s2.1 && s2.0 < s1.1 {
        return Err(Error::Jammed(format!(
            "pulse supports [{:.3},{:.3}] and [{:.3},{:.3}] overlap; \
             shorten the pulses (larger eta) to avoid pulse jamming",
            s1.0, s1.1, s2.0, s2.1
        )));
    }
    let slice = |sig: &EodSignal, support: (f64, f64)| -> Result<usize> {
        let mut best = None;
        let mut best_h = 0.0;
        for (k, t) in trace.times.iter().enumerate() {
            if *t < support.0 || *t > support.1 {
                continue;
            }
            let h = match sig {
                EodSignal::Pulse { eta, shift } => pulse_shape(eta * t - shift).abs(),
                EodSignal::Wave { .. } => unreachable!(),
            };
            if h > best_h {
                best_h = h;
                best = Some(k);
            }
        }
        best.filter(|_| best_h > 0.0).ok_or_else(|| {
            Error::InvalidParameter(
                "trace does not sample the pulse support with nonzero amplitude".into(),
            )
        })
    };
    let k1 = slice(sig1, s1)?;
    let k2 = slice(sig2, s2)?;
    let h1 = sig1.eval(trace.times[k1]).re;
    let h2 = sig2.eval(trace.times[k2]).re;
    let mut u1 = Vec::with_capacity(trace.n_receptors());
    let mut u2 = Vec::with_capacity(trace.n_receptors());
    for row in &trace.values {
        u1.push(row[k1] / h1);
        u2.push(row[k2] / h2);
    }
    Ok((u1, u2))
}
