//! One-dimensional Gaussian mixture fitted by weighted expectation maximization.
//!
//! Sample weights scale each sample's responsibilities in both steps, so a
//! sample of weight `w` behaves like `w` copies of itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub components: Vec<GmmComponent>,
}

impl GmmParams {
    pub fn density(&self, x: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * normal_pdf(x, c.mean, c.variance))
            .sum()
    }

    /// Mixture mean.
    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }

    /// Weighted log-likelihood of a sample set.
    pub fn log_likelihood(&self, values: &[f64], weights: &[f64]) -> f64 {
        values
            .iter()
            .zip(weights)
            .map(|(&x, &w)| w * self.log_density(x))
            .sum()
    }

    fn log_density(&self, x: f64) -> f64 {
        log_sum_exp(self.components.iter().map(|c| c.weight.ln() + normal_ln_pdf(x, c.mean, c.variance)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    pub components: usize,
    pub max_iterations: usize,
    /// Stop once the per-iteration log-likelihood gain falls below this.
    pub tolerance: f64,
    pub variance_floor: f64,
    pub seed: u64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        GmmOptions {
            components: 2,
            max_iterations: 200,
            tolerance: 1e-6,
            variance_floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmFit {
    pub params: GmmParams,
    /// Weighted log-likelihood after initialization and after every iteration.
    pub log_likelihood_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// At least one component variance hit the floor.
    pub variance_floored: bool,
}

pub fn normal_ln_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    -0.5 * (x - mean).powi(2) / variance - 0.5 * variance.ln() - LN_SQRT_2PI
}

pub fn normal_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    normal_ln_pdf(x, mean, variance).exp()
}

fn log_sum_exp(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn count_distinct(values: &[f64]) -> usize {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

/// Picks initial centres: the first with probability proportional to sample
/// weight, each next one proportional to weight times squared distance to the
/// nearest chosen centre.
fn seed_centres(values: &[f64], weights: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let pick = |scores: &[f64], rng: &mut ChaCha8Rng| -> usize {
        let total: f64 = scores.iter().sum();
        let mut target = rng.random::<f64>() * total;
        for (i, s) in scores.iter().enumerate() {
            target -= s;
            if target < 0.0 {
                return i;
            }
        }
        scores.iter().rposition(|&s| s > 0.0).unwrap_or(0)
    };
    let mut centres = vec![values[pick(weights, rng)]];
    while centres.len() < k {
        let scores: Vec<f64> = values
            .iter()
            .zip(weights)
            .map(|(&x, &w)| {
                let d = centres
                    .iter()
                    .map(|c| (x - c).powi(2))
                    .fold(f64::INFINITY, f64::min);
                w * d
            })
            .collect();
        if scores.iter().all(|&s| s == 0.0) {
            break;
        }
        centres.push(values[pick(&scores, rng)]);
    }
    centres.sort_by(f64::total_cmp);
    centres
}

/// Fits a `components`-Gaussian mixture to weighted samples.
pub fn fit_weighted_gmm(values: &[f64], weights: &[f64], opts: &GmmOptions) -> Result<GmmFit> {
    if values.len() != weights.len() {
        return Err(Error::domain("values and weights differ in length"));
    }
    if opts.components == 0 {
        return Err(Error::domain("at least one component required"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite sample"));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::domain("sample weights must be positive"));
    }
    let distinct = count_distinct(values);
    if distinct < opts.components {
        return Err(Error::InsufficientSamples {
            have: distinct,
            need: opts.components,
        });
    }
    let k = opts.components;
    let total_w: f64 = weights.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let centres = seed_centres(values, weights, k, &mut rng);

    // one hard-assignment pass turns the centres into a starting mixture
    let overall_mean = values.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / total_w;
    let overall_var = (values
        .iter()
        .zip(weights)
        .map(|(x, w)| w * (x - overall_mean).powi(2))
        .sum::<f64>()
        / total_w)
        .max(opts.variance_floor);
    let mut comps: Vec<GmmComponent> = Vec::with_capacity(k);
    {
        let mut acc = vec![(0.0, 0.0, 0.0); centres.len()];
        for (&x, &w) in values.iter().zip(weights) {
            let j = centres
                .iter()
                .enumerate()
                .min_by(|a, b| (x - a.1).abs().total_cmp(&(x - b.1).abs()))
                .map(|(j, _)| j)
                .unwrap();
            acc[j].0 += w;
            acc[j].1 += w * x;
            acc[j].2 += w * x * x;
        }
        for (j, &(sw, sx, sxx)) in acc.iter().enumerate() {
            if sw > 0.0 {
                let m = sx / sw;
                let var = (sxx / sw - m * m).max(0.0);
                let var = if var < opts.variance_floor {
                    opts.variance_floor.max(overall_var / (k * k) as f64)
                } else {
                    var
                };
                comps.push(GmmComponent {
                    weight: sw / total_w,
                    mean: m,
                    variance: var,
                });
            } else {
                comps.push(GmmComponent {
                    weight: 0.0,
                    mean: centres[j],
                    variance: overall_var,
                });
            }
        }
        while comps.len() < k {
            comps.push(GmmComponent {
                weight: 0.0,
                mean: overall_mean,
                variance: overall_var,
            });
        }
        let floor_w = 1e-6;
        for c in &mut comps {
            c.weight = c.weight.max(floor_w);
        }
        let s: f64 = comps.iter().map(|c| c.weight).sum();
        for c in &mut comps {
            c.weight /= s;
        }
    }

    fit_from(values, weights, GmmParams { components: comps }, opts, opts.max_iterations)
}

/// EM iterations starting from given parameters.
pub fn fit_from(
    values: &[f64],
    weights: &[f64],
    start: GmmParams,
    opts: &GmmOptions,
    max_iterations: usize,
) -> Result<GmmFit> {
    let k = start.components.len();
    if k == 0 {
        return Err(Error::domain("no components"));
    }
    let total_w: f64 = weights.iter().sum();
    let mut params = start;
    let mut trace = vec![params.log_likelihood(values, weights)];
    let mut floored = false;
    let mut iterations = 0;
    let mut converged = false;
    let mut row = vec![0.0; k];
    while iterations < max_iterations {
        iterations += 1;
        let mut acc = vec![(0.0, 0.0, 0.0); k];
        for (&x, &w) in values.iter().zip(weights) {
            for (j, c) in params.components.iter().enumerate() {
                row[j] = c.weight.ln() + normal_ln_pdf(x, c.mean, c.variance);
            }
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..k {
                let r = w * (row[j] - m).exp() / s;
                acc[j].0 += r;
                acc[j].1 += r * x;
            }
        }
        let means: Vec<f64> = acc.iter().map(|a| if a.0 > 0.0 { a.1 / a.0 } else { 0.0 }).collect();
        for (&x, &w) in values.iter().zip(weights) {
            for (j, c) in params.components.iter().enumerate() {
                row[j] = c.weight.ln() + normal_ln_pdf(x, c.mean, c.variance);
            }
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..k {
                acc[j].2 += w * (row[j] - m).exp() / s * (x - means[j]).powi(2);
            }
        }
        let mut next = Vec::with_capacity(k);
        for (j, a) in acc.iter().enumerate() {
            if a.0 <= f64::MIN_POSITIVE {
                continue;
            }
            let mut variance = a.2 / a.0;
            if variance < opts.variance_floor {
                variance = opts.variance_floor;
                floored = true;
            }
            next.push(GmmComponent {
                weight: a.0 / total_w,
                mean: means[j],
                variance,
            });
        }
        let s: f64 = next.iter().map(|c| c.weight).sum();
        for c in &mut next {
            c.weight /= s;
        }
        let shrunk = next.len() < k;
        params = GmmParams { components: next };
        let ll = params.log_likelihood(values, weights);
        let gain = ll - trace.last().unwrap();
        trace.push(ll);
        if gain.abs() < opts.tolerance {
            converged = true;
            break;
        }
        if shrunk {
            let mut rest = fit_from(values, weights, params, opts, max_iterations - iterations)?;
            trace.extend(rest.log_likelihood_trace.drain(1..));
            return Ok(GmmFit {
                params: rest.params,
                log_likelihood_trace: trace,
                iterations: iterations + rest.iterations,
                converged: rest.converged,
                variance_floored: floored || rest.variance_floored,
            });
        }
    }
    Ok(GmmFit {
        params,
        log_likelihood_trace: trace,
        iterations,
        converged,
        variance_floored: floored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn normal_sample(mean: f64, sd: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(mean, sd).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    #[test]
    fn single_component_recovers_moments() {
        let v = normal_sample(100.0, 5.0, 4000, 1);
        let w = vec![1.0; v.len()];
        let fit = fit_weighted_gmm(&v, &w, &GmmOptions { components: 1, ..Default::default() }).unwrap();
        let c = fit.params.components[0];
        // the one-component fit is the weighted MLE, which we recompute directly
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
        assert!((c.mean - m).abs() < 1e-9);
        assert!((c.variance - var).abs() < 1e-6);
        assert!((c.mean - 100.0).abs() < 0.5);
        assert!((c.variance.sqrt() - 5.0).abs() < 0.3);
    }

    #[test]
    fn two_clusters_separate() {
        let mut v = normal_sample(60.0, 4.0, 600, 2);
        v.extend(normal_sample(110.0, 4.0, 1400, 3));
        let w = vec![1.0; v.len()];
        let fit = fit_weighted_gmm(&v, &w, &GmmOptions { components: 2, seed: 9, ..Default::default() }).unwrap();
        let mut cs = fit.params.components.clone();
        cs.sort_by(|a, b| a.mean.total_cmp(&b.mean));
        assert!((cs[0].mean - 60.0).abs() < 1.0, "{cs:?}");
        assert!((cs[1].mean - 110.0).abs() < 1.0, "{cs:?}");
        assert!((cs[0].weight - 0.3).abs() < 0.03);
        assert!(fit.converged);
    }

    #[test]
    fn weights_act_as_replication() {
        let v = [50.0, 60.0, 70.0, 90.0];
        let w = [1.0, 2.0, 1.0, 3.0];
        let rep: Vec<f64> = v.iter().zip(&w).flat_map(|(&x, &k)| std::iter::repeat_n(x, k as usize)).collect();
        let opts = GmmOptions { components: 1, ..Default::default() };
        let a = fit_weighted_gmm(&v, &w, &opts).unwrap();
        let b = fit_weighted_gmm(&rep, &vec![1.0; rep.len()], &opts).unwrap();
        assert!((a.params.components[0].mean - b.params.components[0].mean).abs() < 1e-9);
        assert!((a.params.components[0].variance - b.params.components[0].variance).abs() < 1e-9);
    }

    #[test]
    fn identical_values_hit_floor() {
        let v = [80.0; 10];
        let w = [1.0; 10];
        let fit = fit_weighted_gmm(&v, &w, &GmmOptions { components: 1, ..Default::default() }).unwrap();
        assert!(fit.variance_floored);
        assert_eq!(fit.params.components[0].variance, 1e-4);
        assert_eq!(fit.params.components[0].mean, 80.0);
        let err = fit_weighted_gmm(&v, &w, &GmmOptions::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientSamples { have: 1, need: 2 }));
    }

    #[test]
    fn rejects_bad_input() {
        let o = GmmOptions::default();
        assert!(fit_weighted_gmm(&[1.0, 2.0], &[1.0], &o).is_err());
        assert!(fit_weighted_gmm(&[1.0, 2.0], &[1.0, 0.0], &o).is_err());
        assert!(fit_weighted_gmm(&[1.0, f64::NAN], &[1.0, 1.0], &o).is_err());
    }

    #[test]
    fn deterministic_for_seed() {
        let mut v = normal_sample(70.0, 10.0, 300, 4);
        v.extend(normal_sample(100.0, 6.0, 300, 5));
        let w: Vec<f64> = (0..v.len()).map(|i| 0.2 + (i % 5) as f64 * 0.2).collect();
        let o = GmmOptions { seed: 42, ..Default::default() };
        assert_eq!(fit_weighted_gmm(&v, &w, &o).unwrap().params, fit_weighted_gmm(&v, &w, &o).unwrap().params);
    }

    proptest! {
        #[test]
        fn log_likelihood_is_monotone(
            samples in prop::collection::vec((20.0f64..140.0, 0.05f64..1.0), 4..80),
            k in 1usize..4,
            seed in any::<u64>(),
        ) {
            let (v, w): (Vec<f64>, Vec<f64>) = samples.into_iter().unzip();
            prop_assume!(count_distinct(&v) >= k);
            let fit = fit_weighted_gmm(&v, &w, &GmmOptions { components: k, seed, ..Default::default() }).unwrap();
            for pair in fit.log_likelihood_trace.windows(2) {
                prop_assert!(pair[1] >= pair[0] - 1e-7 * pair[0].abs().max(1.0), "{:?}", fit.log_likelihood_trace);
            }
            let wsum: f64 = fit.params.components.iter().map(|c| c.weight).sum();
            prop_assert!((wsum - 1.0).abs() < 1e-9);
            prop_assert!(fit.params.components.iter().all(|c| c.variance >= 1e-4));
        }
    }
}
