//! Lilliefors-corrected Kolmogorov-Smirnov normality test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Groups smaller than this are accepted without testing.
pub const MIN_KS_SAMPLES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalityReport {
    pub n: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub accepted: bool,
    /// Too few samples to test; accepted by rule.
    pub insufficient: bool,
}

/// KS distance between the sample and a normal with the sample's own mean
/// and standard deviation, with the Dallal-Wilkinson p-value approximation.
/// Returns `None` for a constant sample.
pub fn lilliefors(samples: &[f64]) -> Option<(f64, f64)> {
    let n = samples.len();
    if n < 2 {
        return None;
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let nf = n as f64;
    let mean = x.iter().sum::<f64>() / nf;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    if !(sd > 1e-12 * mean.abs().max(1.0)) {
        return None;
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let mut d: f64 = 0.0;
    for (i, v) in x.iter().enumerate() {
        let f = std.cdf((v - mean) / sd);
        d = d.max((i + 1) as f64 / nf - f).max(f - i as f64 / nf);
    }
    Some((d, lilliefors_p_value(d, n)))
}

fn lilliefors_p_value(d: f64, n: usize) -> f64 {
    let nf = n as f64;
    let (kd, nd) = if n <= 100 {
        (d, nf)
    } else {
        (d * (nf / 100.0).powf(0.49), 100.0)
    };
    let mut p = (-7.01256 * kd * kd * (nd + 2.78019) + 2.99587 * kd * (nd + 2.78019).sqrt() - 0.122119
        + 0.974598 / nd.sqrt()
        + 1.67997 / nd)
        .exp();
    if p > 0.1 {
        let kk = (nf.sqrt() - 0.01 + 0.85 / nf.sqrt()) * d;
        p = if kk <= 0.302 {
            1.0
        } else if kk <= 0.5 {
            2.76773 - 19.828315 * kk + 80.709644 * kk.powi(2) - 138.55152 * kk.powi(3) + 81.218052 * kk.powi(4)
        } else if kk <= 0.9 {
            -4.901232 + 40.662806 * kk - 97.490286 * kk.powi(2) + 94.029866 * kk.powi(3) - 32.355711 * kk.powi(4)
        } else if kk <= 1.31 {
            6.198765 - 19.558097 * kk + 23.186922 * kk.powi(2) - 12.234627 * kk.powi(3) + 2.423045 * kk.powi(4)
        } else {
            0.0
        };
    }
    p.clamp(0.0, 1.0)
}

/// Tests normality at level `alpha`, auto-accepting groups below `min_n`.
pub fn ks_normality_test_min(samples: &[f64], alpha: f64, min_n: usize) -> Result<NormalityReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::domain("alpha must lie in (0, 1)"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite sample"));
    }
    let n = samples.len();
    if n < min_n.max(2) {
        return Ok(NormalityReport {
            n,
            statistic: 0.0,
            p_value: 1.0,
            accepted: true,
            insufficient: true,
        });
    }
    Ok(match lilliefors(samples) {
        Some((d, p)) => NormalityReport {
            n,
            statistic: d,
            p_value: p,
            accepted: p > alpha,
            insufficient: false,
        },
        None => NormalityReport {
            n,
            statistic: 1.0,
            p_value: 0.0,
            accepted: false,
            insufficient: false,
        },
    })
}

pub fn ks_normality_test(samples: &[f64], alpha: f64) -> Result<NormalityReport> {
    ks_normality_test_min(samples, alpha, MIN_KS_SAMPLES)
}
