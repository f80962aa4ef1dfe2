use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Five-number summary of a (weighted) speed sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LetterValues {
    pub min: f64,
    pub lower_fourth: f64,
    pub median: f64,
    pub upper_fourth: f64,
    pub max: f64,
}

impl LetterValues {
    /// All five values equal to `v`.
    pub fn constant(v: f64) -> Self {
        LetterValues {
            min: v,
            lower_fourth: v,
            median: v,
            upper_fourth: v,
            max: v,
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [
            self.min,
            self.lower_fourth,
            self.median,
            self.upper_fourth,
            self.max,
        ]
    }

    pub fn is_ordered(&self) -> bool {
        self.as_array().windows(2).all(|w| w[0] <= w[1])
    }
}

/// Weighted letter values. The q-fourth is the smallest sample whose
/// cumulative weight reaches `q` of the total.
pub fn letter_values(values: &[f64], weights: &[f64]) -> Result<LetterValues> {
    if values.is_empty() {
        return Err(Error::domain("letter values of an empty sample"));
    }
    if values.len() != weights.len() {
        return Err(Error::domain("values and weights differ in length"));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite value or negative weight"));
    }
    let mut pairs: Vec<(f64, f64)> = values.iter().copied().zip(weights.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    if total <= 0.0 {
        return Err(Error::domain("zero total weight"));
    }
    let targets = [0.25 * total, 0.5 * total, 0.75 * total];
    let slack = total * 1e-12;
    let mut found = [pairs.last().unwrap().0; 3];
    let mut next = 0;
    let mut cum = 0.0;
    for &(v, w) in &pairs {
        cum += w;
        while next < 3 && cum + slack >= targets[next] {
            found[next] = v;
            next += 1;
        }
        if next == 3 {
            break;
        }
    }
    Ok(LetterValues {
        min: pairs[0].0,
        lower_fourth: found[0],
        median: found[1],
        upper_fourth: found[2],
        max: pairs.last().unwrap().0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Independent oracle: for each candidate value, total the weight at or
    // below it and pick the smallest candidate reaching the target.
    fn brute_quantile(values: &[f64], weights: &[f64], q: f64) -> f64 {
        let total: f64 = weights.iter().sum();
        let mut candidates = values.to_vec();
        candidates.sort_by(f64::total_cmp);
        for &c in &candidates {
            let below: f64 = values
                .iter()
                .zip(weights)
                .filter(|(v, _)| **v <= c)
                .map(|(_, w)| w)
                .sum();
            if below + total * 1e-12 >= q * total {
                return c;
            }
        }
        *candidates.last().unwrap()
    }

    #[test]
    fn unweighted_examples() {
        let lv = letter_values(&[1.0, 2.0, 3.0, 4.0], &[1.0; 4]).unwrap();
        assert_eq!(lv.as_array(), [1.0, 1.0, 2.0, 3.0, 4.0]);
        let lv = letter_values(&[5.0], &[0.3]).unwrap();
        assert_eq!(lv, LetterValues::constant(5.0));
        assert!(letter_values(&[], &[]).is_err());
        assert!(letter_values(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn weights_shift_the_median() {
        let lv = letter_values(&[10.0, 20.0, 30.0], &[1.0, 1.0, 5.0]).unwrap();
        assert_eq!(lv.median, 30.0);
        assert_eq!(lv.lower_fourth, 20.0);
    }

    proptest! {
        #[test]
        fn matches_brute_force(samples in prop::collection::vec((0.0f64..200.0, 0.01f64..5.0), 1..60)) {
            let (v, w): (Vec<f64>, Vec<f64>) = samples.into_iter().unzip();
            let lv = letter_values(&v, &w).unwrap();
            prop_assert!(lv.is_ordered());
            prop_assert_eq!(lv.lower_fourth, brute_quantile(&v, &w, 0.25));
            prop_assert_eq!(lv.median, brute_quantile(&v, &w, 0.5));
            prop_assert_eq!(lv.upper_fourth, brute_quantile(&v, &w, 0.75));
        }
    }
}
