//! Statistical kernel: two-sample and paired t-tests, correlation, least
//! squares, exponential-decay fitting, smoothing and permutation p-values.

mod decay;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::rng::SeededStream;

pub use decay::{exp_decay_fit, DecayOptions, ExpDecayFit};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased (n − 1) sample variance; 0 for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn sample_std(xs: &[f64]) -> f64 {
    sample_variance(xs).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Two-tailed p-value of a t statistic with `dof` degrees of freedom.
pub fn student_t_two_tailed(t: f64, dof: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, dof).expect("dof > 0");
    (2.0 * dist.cdf(-t.abs())).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t_stat: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub dof: f64,
    pub p_value: f64,
}

/// Welch's unequal-variance two-sample t-test.
///
/// When both samples have zero variance the test degenerates: equal means
/// give `t = 0, p = 1`; unequal means give an infinite `t` and `p = 0`.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Insufficient(format!(
            "welch test needs n >= 2 per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let (qa, qb) = (sample_variance(a) / na, sample_variance(b) / nb);
    let se2 = qa + qb;
    if se2 == 0.0 {
        let dof = na + nb - 2.0;
        return Ok(if ma == mb {
            WelchResult {
                t_stat: 0.0,
                dof,
                p_value: 1.0,
            }
        } else {
            WelchResult {
                t_stat: f64::INFINITY.copysign(ma - mb),
                dof,
                p_value: 0.0,
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    Ok(WelchResult {
        t_stat: t,
        dof,
        p_value: student_t_two_tailed(t, dof),
    })
}

/// Paired t-test on `after − before`; reported in the same shape as Welch.
pub fn paired_t(before: &[f64], after: &[f64]) -> Result<WelchResult> {
    if before.len() != after.len() {
        return Err(Error::InvalidArgument("paired samples differ in length".into()));
    }
    if before.len() < 2 {
        return Err(Error::Insufficient("paired test needs at least 2 pairs".into()));
    }
    let diffs: Vec<f64> = after.iter().zip(before).map(|(a, b)| a - b).collect();
    let n = diffs.len() as f64;
    let m = mean(&diffs);
    let se = (sample_variance(&diffs) / n).sqrt();
    let dof = n - 1.0;
    if se == 0.0 {
        return Ok(if m == 0.0 {
            WelchResult {
                t_stat: 0.0,
                dof,
                p_value: 1.0,
            }
        } else {
            WelchResult {
                t_stat: f64::INFINITY.copysign(m),
                dof,
                p_value: 0.0,
            }
        });
    }
    let t = m / se;
    Ok(WelchResult {
        t_stat: t,
        dof,
        p_value: student_t_two_tailed(t, dof),
    })
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "pearson inputs differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Insufficient("pearson needs at least 2 points".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation undefined for constant input".into()));
    }
    if x == y {
        return Ok(1.0);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Two-tailed p-value for a Pearson r over `n` points (t with n − 2 dof).
pub fn pearson_p_value(r: f64, n: usize) -> f64 {
    if n < 3 {
        return 1.0;
    }
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let dof = (n - 2) as f64;
    let t = r * (dof / (1.0 - r * r)).sqrt();
    student_t_two_tailed(t, dof)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Closed-form simple linear regression of `y` on `x`.
///
/// When `y` is constant (SS_tot = 0) the fit is exact and `r_squared` is 1.
pub fn ols(x: &[f64], y: &[f64]) -> Result<OlsFit> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument("ols inputs differ in length".into()));
    }
    if x.len() < 2 {
        return Err(Error::Insufficient("ols needs at least 2 points".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 {
        return Err(Error::Degenerate("ols design is singular (all x equal)".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (a, b) in x.iter().zip(y) {
        let r = b - (intercept + slope * a);
        ss_res += r * r;
        ss_tot += (b - my) * (b - my);
    }
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok(OlsFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Convolution with a normalized Gaussian truncated at ±4σ. Near the edges
/// the kernel is renormalized over the samples that exist.
pub fn gaussian_smooth(xs: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::Insufficient("cannot smooth an empty sequence".into()));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let radius = (4.0 * sigma).ceil() as usize;
    let kernel: Vec<f64> = (0..=radius)
        .map(|j| (-(j as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let n = xs.len();
    let out = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(n - 1);
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (j, x) in xs.iter().enumerate().take(hi + 1).skip(lo) {
                let w = kernel[i.abs_diff(j)];
                acc += w * x;
                norm += w;
            }
            acc / norm
        })
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub p_value: f64,
    /// Labels hold a single class; no permutation can change anything.
    pub degenerate: bool,
    pub n_perm: usize,
}

/// Permutation p-value `(1 + #{stat(perm) >= observed}) / (1 + n_perm)`.
///
/// Replicate `i` shuffles the labels with substream `(seed, i + 1)`, so the
/// result does not depend on how replicates are scheduled across threads.
pub fn permutation_p<F>(
    observed: f64,
    stat_fn: F,
    labels: &[bool],
    n_perm: usize,
    seed: u64,
) -> Result<PermutationResult>
where
    F: Fn(&[bool]) -> Result<f64> + Sync,
{
    if n_perm == 0 {
        return Err(Error::InvalidArgument("n_perm must be at least 1".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Ok(PermutationResult {
            p_value: 1.0,
            degenerate: true,
            n_perm,
        });
    }
    let exceed: Vec<bool> = (0..n_perm)
        .into_par_iter()
        .map(|i| {
            let mut rng = SeededStream::substream(seed, i as u64 + 1);
            let mut permuted = labels.to_vec();
            rng.shuffle(&mut permuted);
            stat_fn(&permuted).map(|s| s >= observed)
        })
        .collect::<Result<_>>()?;
    let count = exceed.iter().filter(|&&e| e).count();
    Ok(PermutationResult {
        p_value: (1 + count) as f64 / (1 + n_perm) as f64,
        degenerate: false,
        n_perm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededStream;

    #[test]
    fn welch_matches_frozen_reference() {
        // Hand evaluation of the Welch formulas:
        // means 3 and 6, variances 2.5 and 10, se² = 0.5 + 2 = 2.5,
        // t = -3 / sqrt(2.5), dof = 2.5² / (0.5²/4 + 2²/4) = 6.25 / 1.0625.
        // p from an independent Student-t implementation (scipy.stats).
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 4.0, 6.0, 8.0, 10.0];
        let r = welch_t(&a, &b).unwrap();
        assert!((r.t_stat - (-3.0 / 2.5f64.sqrt())).abs() < 1e-12);
        assert!((r.t_stat - -1.8973665961010275).abs() < 1e-12);
        assert!((r.dof - 6.25 / 1.0625).abs() < 1e-12);
        assert!((r.p_value - 0.10753119493062718).abs() < 1e-9, "{}", r.p_value);
    }

    #[test]
    fn welch_identical_and_swapped() {
        let a = [1.0, 3.0, 2.0, 5.0];
        let r = welch_t(&a, &a).unwrap();
        assert_eq!(r.t_stat, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);

        let b = [2.0, 2.5, 7.0, 4.0, 4.0];
        let ab = welch_t(&a, &b).unwrap();
        let ba = welch_t(&b, &a).unwrap();
        assert_eq!(ab.t_stat, -ba.t_stat);
        assert_eq!(ab.p_value, ba.p_value);
    }

    #[test]
    fn welch_zero_variance_cases() {
        let r = welch_t(&[2.0, 2.0], &[2.0, 2.0, 2.0]).unwrap();
        assert_eq!((r.t_stat, r.p_value), (0.0, 1.0));
        let r = welch_t(&[1.0, 1.0], &[2.0, 2.0]).unwrap();
        assert_eq!(r.p_value, 0.0);
        assert!(r.t_stat < 0.0 && r.t_stat.is_infinite());
        assert!(welch_t(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn welch_shift_and_scale_invariance() {
        let a = [0.3, 1.9, 2.2, 0.7, 1.1];
        let b = [1.5, 2.8, 3.1, 2.0];
        let base = welch_t(&a, &b).unwrap();
        let sa: Vec<f64> = a.iter().map(|x| x + 10.0).collect();
        let sb: Vec<f64> = b.iter().map(|x| x + 10.0).collect();
        let shifted = welch_t(&sa, &sb).unwrap();
        assert!((shifted.t_stat - base.t_stat).abs() < 1e-10);
        let sa: Vec<f64> = a.iter().map(|x| x * 3.5).collect();
        let sb: Vec<f64> = b.iter().map(|x| x * 3.5).collect();
        let scaled = welch_t(&sa, &sb).unwrap();
        assert!((scaled.t_stat - base.t_stat).abs() < 1e-10);
        assert!((scaled.p_value - base.p_value).abs() < 1e-12);
    }

    #[test]
    fn paired_zero_shift() {
        let x = [1.0, 2.0, 3.0];
        let r = paired_t(&x, &x).unwrap();
        assert_eq!((r.t_stat, r.p_value), (0.0, 1.0));
        let y = [1.5, 2.4, 3.6];
        assert!(paired_t(&x, &y).unwrap().t_stat > 0.0);
    }

    #[test]
    fn pearson_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let y: Vec<f64> = x.iter().map(|v| -2.0 * v + 3.0).collect();
        assert!((pearson(&x, &y).unwrap() + 1.0).abs() < 1e-15);
        // Hand arithmetic: deviations (-1,0,1) and (-1,1,0): sxy=1, sxx=syy=2.
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(pearson(&x, &[1.0; 4]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn pearson_affine_behaviour() {
        let x = [0.2, 1.7, 0.9, 3.3, 2.1];
        let y = [1.0, 2.2, 1.1, 2.9, 2.8];
        let r = pearson(&x, &y).unwrap();
        let xa: Vec<f64> = x.iter().map(|v| 4.0 * v - 7.0).collect();
        assert!((pearson(&xa, &y).unwrap() - r).abs() < 1e-12);
        let xn: Vec<f64> = x.iter().map(|v| -0.5 * v).collect();
        assert!((pearson(&xn, &y).unwrap() + r).abs() < 1e-12);
    }

    #[test]
    fn spearman_monotone() {
        let x = [1.0, 2.0, 5.0, 9.0];
        let y = [0.1, 0.2, 0.8, 10.0];
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn ols_collinear_and_constant() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let f = ols(&x, &y).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-14 && (f.intercept + 1.0).abs() < 1e-14);
        assert_eq!(f.r_squared, 1.0);

        let f = ols(&x, &[3.0; 4]).unwrap();
        assert_eq!((f.slope, f.r_squared), (0.0, 1.0));
        assert!(ols(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ols_matches_normal_equations() {
        // Oracle: solve [n Σx; Σx Σx²][b a]ᵀ = [Σy Σxy]ᵀ by Cramer's rule.
        let mut rng = SeededStream::new(5);
        for _ in 0..50 {
            let n = 3 + rng.below(20) as usize;
            let x: Vec<f64> = (0..n).map(|_| rng.normal() * 3.0).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
            let sxx: f64 = x.iter().map(|v| v * v).sum();
            let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
            let det = n as f64 * sxx - sx * sx;
            let slope = (n as f64 * sxy - sx * sy) / det;
            let intercept = (sxx * sy - sx * sxy) / det;
            let f = ols(&x, &y).unwrap();
            assert!((f.slope - slope).abs() < 1e-10);
            assert!((f.intercept - intercept).abs() < 1e-10);
        }
    }

    #[test]
    fn smoothing_constant_impulse_symmetry() {
        let c = vec![2.5; 30];
        for v in gaussian_smooth(&c, 3.0).unwrap() {
            assert!((v - 2.5).abs() < 1e-12);
        }

        let mut impulse = vec![0.0; 101];
        impulse[50] = 1.0;
        let s = gaussian_smooth(&impulse, 3.0).unwrap();
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let norm: f64 = (-12..=12).map(|j: i32| (-(j * j) as f64 / 18.0).exp()).sum();
        assert!((s[50] - 1.0 / norm).abs() < 1e-12);
        assert!((s[53] - (-0.5f64).exp() / norm).abs() < 1e-12);

        let sym = [1.0, 4.0, 2.0, 7.0, 2.0, 4.0, 1.0];
        let s = gaussian_smooth(&sym, 1.5).unwrap();
        for i in 0..sym.len() {
            assert!((s[i] - s[sym.len() - 1 - i]).abs() < 1e-12);
        }
        assert!(gaussian_smooth(&[], 3.0).is_err());
        assert!(gaussian_smooth(&[1.0], 0.0).is_err());
    }

    fn auc_stat(scores: &[f64]) -> impl Fn(&[bool]) -> Result<f64> + Sync + '_ {
        move |labels: &[bool]| {
            let mut wins = 0.0;
            let mut pairs = 0.0;
            for (i, &li) in labels.iter().enumerate() {
                for (j, &lj) in labels.iter().enumerate() {
                    if li && !lj {
                        pairs += 1.0;
                        wins += if scores[i] > scores[j] {
                            1.0
                        } else if scores[i] == scores[j] {
                            0.5
                        } else {
                            0.0
                        };
                    }
                }
            }
            Ok(wins / pairs)
        }
    }

    #[test]
    fn permutation_floor_and_degenerate() {
        let scores: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let labels: Vec<bool> = (0..20).map(|i| i >= 10).collect();
        let stat = auc_stat(&scores);
        let observed = stat(&labels).unwrap();
        assert_eq!(observed, 1.0);
        let r = permutation_p(observed, &stat, &labels, 200, 1).unwrap();
        assert_eq!(r.p_value, 1.0 / 201.0);

        let r = permutation_p(0.5, &stat, &[true; 20], 10, 1).unwrap();
        assert!(r.degenerate && r.p_value == 1.0);
        assert!(permutation_p(0.5, &stat, &labels, 0, 1).is_err());
    }

    #[test]
    fn permutation_is_reproducible() {
        let mut rng = SeededStream::new(8);
        let scores = rng.normal_vec(24);
        let labels: Vec<bool> = (0..24).map(|i| i % 3 == 0).collect();
        let stat = auc_stat(&scores);
        let obs = stat(&labels).unwrap();
        let a = permutation_p(obs, &stat, &labels, 300, 77).unwrap();
        let b = permutation_p(obs, &stat, &labels, 300, 77).unwrap();
        assert_eq!(a.p_value.to_bits(), b.p_value.to_bits());
    }

    #[test]
    fn permutation_null_calibration() {
        // Monte-Carlo oracle: under independence the rejection rate at 0.05
        // should sit near 0.05.
        let mut rejections = 0;
        let runs = 200;
        for run in 0..runs {
            let mut rng = SeededStream::substream(2024, run);
            let scores = rng.normal_vec(30);
            let mut labels: Vec<bool> = (0..30).map(|i| i < 15).collect();
            rng.shuffle(&mut labels);
            let stat = auc_stat(&scores);
            let obs = stat(&labels).unwrap();
            let r = permutation_p(obs, &stat, &labels, 199, 1000 + run).unwrap();
            if r.p_value < 0.05 {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / runs as f64;
        assert!((rate - 0.05).abs() <= 0.03, "rejection rate {rate}");
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
