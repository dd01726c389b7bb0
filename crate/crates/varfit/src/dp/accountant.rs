//! Privacy accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Per-step Rényi divergences are computed on a fixed order grid
//! (quarter-integer orders up to 63.75, then integers up to 256), composed
//! linearly over steps, and converted to `(epsilon, delta)` by minimizing
//! the standard conversion over orders. Integer orders use the exact
//! binomial summation; fractional orders use the two-sided series with
//! `erfc` terms, evaluated in log space.

use crate::error::{contract, Result};

/// The accounting order grid.
pub fn default_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (5..=255).map(|i| i as f64 * 0.25).collect(); // 1.25 ..= 63.75
    orders.extend((64..=256).map(|i| i as f64));
    orders
}

const LOG_NEG_INF: f64 = f64::NEG_INFINITY;

fn log_add(a: f64, b: f64) -> f64 {
    if a == LOG_NEG_INF {
        return b;
    }
    if b == LOG_NEG_INF {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn log_sub(a: f64, b: f64) -> f64 {
    // requires a >= b; result is log(exp(a) - exp(b))
    if b == LOG_NEG_INF {
        return a;
    }
    debug_assert!(a >= b, "log_sub({a}, {b})");
    if a == b {
        return LOG_NEG_INF;
    }
    a + (-(b - a).exp()).ln_1p()
}

fn log_erfc(x: f64) -> f64 {
    let r = libm::erfc(x);
    if r == 0.0 {
        // asymptotic expansion for the deep tail
        -std::f64::consts::PI.ln() / 2.0 - x.ln() - x * x - 0.5 * x.powi(-2)
            + 0.625 * x.powi(-4)
            - 37.0 / 24.0 * x.powi(-6)
            + 353.0 / 64.0 * x.powi(-8)
    } else {
        r.ln()
    }
}

/// ln(n!) table, exact summation.
fn log_factorials(n: usize) -> Vec<f64> {
    let mut t = Vec::with_capacity(n + 1);
    t.push(0.0);
    for i in 1..=n {
        t.push(t[i - 1] + (i as f64).ln());
    }
    t
}

/// Single-step RDP of the subsampled Gaussian at integer order `alpha`.
fn rdp_int(q: f64, sigma: f64, alpha: usize) -> f64 {
    let lf = log_factorials(alpha);
    let log_q = q.ln();
    let log_1q = (1.0 - q).ln_1p_adjusted();
    let mut log_a = LOG_NEG_INF;
    for k in 0..=alpha {
        let log_binom = lf[alpha] - lf[k] - lf[alpha - k];
        let term = log_binom
            + k as f64 * log_q
            + (alpha - k) as f64 * log_1q
            + (k * k - k) as f64 / (2.0 * sigma * sigma);
        log_a = log_add(log_a, term);
    }
    (log_a / (alpha as f64 - 1.0)).max(0.0)
}

trait Ln1pAdjusted {
    fn ln_1p_adjusted(self) -> f64;
}

impl Ln1pAdjusted for f64 {
    /// `ln(self)` written as `ln_1p(self - 1)` for accuracy near 1.
    fn ln_1p_adjusted(self) -> f64 {
        (self - 1.0).ln_1p()
    }
}

/// Single-step RDP at fractional order via the two-sided series split at
/// `z0 = sigma^2 ln(1/q - 1) + 1/2`.
fn rdp_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let sqrt2s = std::f64::consts::SQRT_2 * sigma;
    let log_q = q.ln();
    let log_1q = (1.0 - q).ln_1p_adjusted();
    let log_half = 0.5f64.ln();

    let (mut log_a0, mut log_a1) = (LOG_NEG_INF, LOG_NEG_INF);
    let mut log_coef = 0.0f64; // log |binom(alpha, i)|
    let mut sign = 1.0f64;
    let mut i = 0usize;
    loop {
        let fi = i as f64;
        let j = alpha - fi;
        let log_t0 = log_coef + fi * log_q + j * log_1q;
        let log_t1 = log_coef + j * log_q + fi * log_1q;
        let log_e0 = log_half + log_erfc((fi - z0) / sqrt2s);
        let log_e1 = log_half + log_erfc((z0 - j) / sqrt2s);
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * sigma * sigma) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1;
        if sign > 0.0 {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        i += 1;
        // tiny sigma makes the tail decline painfully slowly; by then the
        // divergence is astronomically large and truncation is harmless
        if log_s0.max(log_s1) < -30.0 || i > 2000 {
            break;
        }
        // next |binom| and sign
        let factor = alpha - (i as f64 - 1.0);
        log_coef += factor.abs().ln() - (i as f64).ln();
        if factor < 0.0 {
            sign = -sign;
        }
    }
    (log_add(log_a0, log_a1) / (alpha - 1.0)).max(0.0)
}

/// Single-step RDP of one Poisson-subsampled Gaussian application.
pub fn rdp_step(q: f64, sigma: f64, alpha: f64) -> f64 {
    debug_assert!(alpha > 1.0);
    if q == 0.0 {
        return 0.0;
    }
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    if q >= 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    if alpha.fract() == 0.0 {
        rdp_int(q, sigma, alpha as usize)
    } else {
        rdp_frac(q, sigma, alpha)
    }
}

/// Order-minimized conversion of accumulated RDP values to epsilon at the
/// given delta.
pub fn eps_from_rdp(orders: &[f64], rdp: &[f64], delta: f64) -> f64 {
    debug_assert_eq!(orders.len(), rdp.len());
    let log_delta = delta.ln();
    let mut best = f64::INFINITY;
    for (&alpha, &r) in orders.iter().zip(rdp) {
        if alpha <= 1.0 || !r.is_finite() {
            continue;
        }
        let eps = r + ((alpha - 1.0) / alpha).ln() - (log_delta + alpha.ln()) / (alpha - 1.0);
        if eps < best {
            best = eps;
        }
    }
    best.max(0.0)
}

fn validate(sigma: f64, q: f64, delta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(contract(format!("sample rate q={q} must be in [0, 1]")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(contract(format!("delta={delta} must be in (0, 1)")));
    }
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(contract(format!("sigma={sigma} must be finite and >= 0")));
    }
    Ok(())
}

/// Epsilon spent after `steps` Poisson-subsampled Gaussian steps.
///
/// `sigma == 0` with positive steps reports infinity. Monotone
/// non-decreasing in `steps` and `q`, non-increasing in `sigma`.
pub fn epsilon_of(sigma: f64, q: f64, steps: u64, delta: f64) -> Result<f64> {
    validate(sigma, q, delta)?;
    if steps == 0 || q == 0.0 {
        return Ok(0.0);
    }
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    let orders = default_orders();
    let rdp: Vec<f64> = orders
        .iter()
        .map(|&a| steps as f64 * rdp_step(q, sigma, a))
        .collect();
    Ok(eps_from_rdp(&orders, &rdp, delta))
}

/// Binary search for the noise multiplier reaching `epsilon_target` after
/// `steps` steps, to within `1e-3` in epsilon.
pub fn calibrate_sigma(epsilon_target: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    if epsilon_target <= 0.0 || !epsilon_target.is_finite() {
        return Err(contract(format!(
            "epsilon target {epsilon_target} must be finite and positive"
        )));
    }
    validate(1.0, q, delta)?;
    if steps == 0 || q == 0.0 {
        return Err(contract(
            "cannot calibrate sigma for a run that touches no data",
        ));
    }
    let (floor, ceiling) = (1e-2f64, 1e4f64);
    let eps_at = |s: f64| epsilon_of(s, q, steps, delta).expect("validated inputs");
    // bracket by doubling/halving from sigma = 1 so the expensive
    // small-sigma regime is touched at most once
    let (mut lo, mut hi);
    if eps_at(1.0) > epsilon_target {
        lo = 1.0;
        hi = 2.0;
        while eps_at(hi) > epsilon_target {
            lo = hi;
            hi *= 2.0;
            if hi > ceiling {
                return Err(crate::error::Error::Config(format!(
                    "epsilon target {epsilon_target} not reachable: sigma {ceiling} still spends {}",
                    eps_at(ceiling)
                )));
            }
        }
    } else {
        hi = 1.0;
        lo = 0.5;
        while eps_at(lo) < epsilon_target {
            hi = lo;
            lo *= 0.5;
            if lo < floor {
                return Err(crate::error::Error::Config(format!(
                    "epsilon target {epsilon_target} not reachable: sigma {floor} already spends only {}",
                    eps_at(floor)
                )));
            }
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let e = eps_at(mid);
        if (e - epsilon_target).abs() <= 1e-3 {
            return Ok(mid);
        }
        if e > epsilon_target {
            lo = mid; // too little noise
        } else {
            hi = mid;
        }
    }
    Err(crate::error::Error::Config(format!(
        "sigma calibration did not converge for epsilon {epsilon_target}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_steps_spend_nothing() {
        assert_eq!(epsilon_of(1.0, 0.1, 0, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn zero_sigma_is_infinite() {
        assert_eq!(epsilon_of(0.0, 0.1, 10, 1e-5).unwrap(), f64::INFINITY);
    }

    #[test]
    fn q_zero_spends_nothing() {
        assert_eq!(epsilon_of(1.0, 0.0, 100, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn monotone_in_steps_and_q_anti_monotone_in_sigma() {
        for &(sigma, q, steps) in &[(1.0, 0.1, 10u64), (2.0, 0.251, 100), (0.7, 0.02, 500)] {
            let base = epsilon_of(sigma, q, steps, 1e-5).unwrap();
            assert!(epsilon_of(sigma, q, 2 * steps, 1e-5).unwrap() >= base);
            assert!(epsilon_of(sigma, (q * 1.5).min(1.0), steps, 1e-5).unwrap() >= base);
            assert!(epsilon_of(sigma * 2.0, q, steps, 1e-5).unwrap() <= base);
        }
    }

    #[test]
    fn full_batch_single_step_matches_plain_gaussian_rdp() {
        // q = 1: RDP(alpha) = alpha / (2 sigma^2) exactly
        let sigma = 4.0;
        for alpha in [2.0, 8.0, 32.5, 100.0] {
            let got = rdp_step(1.0, sigma, alpha);
            assert!((got - alpha / (2.0 * sigma * sigma)).abs() < 1e-12);
        }
    }

    #[test]
    fn fractional_and_integer_paths_agree_near_integer_orders() {
        for &(q, sigma) in &[(0.01, 0.5), (0.1, 1.0), (0.251, 2.0), (0.5, 4.0)] {
            for alpha in [4usize, 16, 63] {
                let int = rdp_int(q, sigma, alpha);
                let frac = rdp_frac(q, sigma, alpha as f64 + 1e-9);
                let denom = int.abs().max(1e-12);
                assert!(
                    (int - frac).abs() / denom < 1e-4,
                    "q={q} sigma={sigma} alpha={alpha}: {int} vs {frac}"
                );
            }
        }
    }

    #[test]
    fn calibrate_round_trips_within_tolerance() {
        for target in [0.5f64, 1.0, 10.0, 100.0] {
            let sigma = calibrate_sigma(target, 1e-5, 0.05, 300).unwrap();
            let spent = epsilon_of(sigma, 0.05, 300, 1e-5).unwrap();
            assert!(
                (spent - target).abs() <= 1e-3,
                "target {target}: sigma {sigma} spends {spent}"
            );
        }
    }

    #[test]
    fn larger_epsilon_target_needs_less_noise() {
        let s1 = calibrate_sigma(1.0, 1e-5, 0.05, 300).unwrap();
        let s10 = calibrate_sigma(10.0, 1e-5, 0.05, 300).unwrap();
        let s100 = calibrate_sigma(100.0, 1e-5, 0.05, 300).unwrap();
        assert!(s1 > s10 && s10 > s100, "{s1} {s10} {s100}");
    }

    #[test]
    fn unreachable_target_is_range_error() {
        // below the epsilon floor at the sigma ceiling
        assert!(calibrate_sigma(1e-6, 1e-5, 1.0, 1).is_err());
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(epsilon_of(1.0, 1.5, 1, 1e-5).is_err());
        assert!(epsilon_of(1.0, 0.5, 1, 0.0).is_err());
        assert!(epsilon_of(-1.0, 0.5, 1, 1e-5).is_err());
    }
}
