//! Two-sided CUSUM change detection.

/// Longest prefix used to estimate the in-control mean and spread.
pub const MAX_WARMUP: usize = 50;

/// Warm-up length for a series of length `n`.
pub fn warmup_len(n: usize) -> usize {
    (n / 4).clamp(2, MAX_WARMUP).min(n)
}

/// First index at which either one-sided CUSUM of the standardized series
/// exceeds `h`, with allowance `k`. The in-control mean and standard
/// deviation come from a warm-up prefix (see [`warmup_len`]); a zero spread
/// is treated as 1. Detection starts after the warm-up.
pub fn cusum_detect(series: &[f64], h: f64, k: f64) -> Option<usize> {
    if series.len() < 2 {
        return None;
    }
    let w = warmup_len(series.len());
    let head = &series[..w];
    let mean = head.iter().sum::<f64>() / w as f64;
    let var = head.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w - 1).max(1) as f64;
    let sd = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    for (t, &v) in series.iter().enumerate().skip(w) {
        let z = (v - mean) / sd;
        hi = (hi + z - k).max(0.0);
        lo = (lo - z - k).max(0.0);
        if hi > h || lo > h {
            return Some(t);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constant_series_never_fires() {
        assert_eq!(cusum_detect(&[3.0; 200], 4.0, 0.25), None);
        assert_eq!(cusum_detect(&[1.0], 4.0, 0.25), None);
    }

    #[test]
    fn unit_step_detected_promptly() {
        let s: Vec<f64> = (0..100).map(|t| if t < 50 { 0.0 } else { 1.0 }).collect();
        // Each post-change step adds 0.75; the sum first exceeds 4 on the sixth.
        assert_eq!(cusum_detect(&s, 4.0, 0.25), Some(55));
    }

    #[test]
    fn downward_shift_detected() {
        let s: Vec<f64> = (0..100).map(|t| if t < 50 { 0.0 } else { -2.0 }).collect();
        assert_eq!(cusum_detect(&s, 4.0, 0.25), Some(52));
    }

    #[test]
    fn stationary_false_alarms_are_rare() {
        let alarms = (0..200)
            .filter(|&seed| {
                let mut r = rng(seed);
                let s: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut r)).collect();
                cusum_detect(&s, 8.0, 1.0).is_some()
            })
            .count();
        assert!(alarms <= 2, "{alarms} false alarms");
    }
}
