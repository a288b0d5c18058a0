//! Differentiable unit sampling.
//!
//! Each hidden unit `c` of a layer with keep ratio `α` is kept with
//! probability `p_c = σ((b_c − β)/ε)`, where `b_c` is its importance, `ε` the
//! temperature, and `β` the shift that makes the expected number of kept
//! units equal `α·C`. As `ε → 0` the draw collapses to keeping the top
//! `⌈α·C⌉` units by importance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-12;
pub const EPSILON_FLOOR: f64 = 1e-4;
/// Bracket margin, in units of `ε`, beyond the importance range.
pub const BRACKET_MARGIN: f64 = 40.0;
/// Per-unit variance below which a layer counts as saturated.
const SATURATION_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub epsilon_init: f64,
    pub epsilon_decay: f64,
    pub alpha_min: f64,
    pub root_tolerance: f64,
    pub lambda: f64,
    pub rng_seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            epsilon_init: 1.0,
            epsilon_decay: 0.98,
            alpha_min: 0.05,
            root_tolerance: 1e-8,
            lambda: 0.5,
            rng_seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_init > 0.0 && self.epsilon_init.is_finite()) {
            return Err(Error::config("epsilon_init", "must be positive"));
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            return Err(Error::config("epsilon_decay", "must be in (0, 1]"));
        }
        if !(self.alpha_min > 0.0 && self.alpha_min < 1.0) {
            return Err(Error::config("alpha_min", "must be in (0, 1)"));
        }
        if !(self.root_tolerance > 0.0) {
            return Err(Error::config("root_tolerance", "must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be non-negative"));
        }
        Ok(())
    }
}

/// Per-layer keep ratios with their cached shifts and the shared temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsenessVector {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub epsilon: f64,
}

impl SparsenessVector {
    pub fn new(num_layers: usize, alpha_init: f64, epsilon: f64) -> Self {
        Self {
            alpha: vec![alpha_init; num_layers],
            beta: vec![0.0; num_layers],
            epsilon,
        }
    }

    /// Gradient step on every `α^k`, clamped to `[alpha_min, 1]`.
    pub fn descend(&mut self, grads: &[f64], step: f64, alpha_min: f64) {
        for (a, g) in self.alpha.iter_mut().zip(grads) {
            *a = (*a - step * g).clamp(alpha_min, 1.0);
        }
    }
}

/// `σ((b − β)/ε)`, clamped to `[1e-12, 1 − 1e-12]`.
#[inline]
pub fn sampling_prob(b: f64, beta: f64, epsilon: f64) -> f64 {
    let p = 1.0 / (1.0 + (-(b - beta) / epsilon).exp());
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

pub fn layer_probs(b: &[f64], beta: f64, epsilon: f64) -> Vec<f64> {
    b.iter()
        .map(|&bc| sampling_prob(bc, beta, epsilon))
        .collect()
}

/// `h(β) = Σ p_c(β) − α·C`; strictly decreasing in `β`.
pub fn shift_residual(b: &[f64], alpha: f64, beta: f64, epsilon: f64) -> f64 {
    b.iter()
        .map(|&bc| sampling_prob(bc, beta, epsilon))
        .sum::<f64>()
        - alpha * b.len() as f64
}

/// Solves `h(β) = 0` by bisection.
pub fn solve_shift(b: &[f64], alpha: f64, epsilon: f64, tol: f64) -> Result<f64> {
    if b.is_empty() {
        return Err(Error::invalid("importance vector is empty"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::OutOfDomain(format!(
            "keep ratio {alpha} must lie strictly inside (0, 1)"
        )));
    }
    if !(epsilon > 0.0) || !(tol > 0.0) {
        return Err(Error::OutOfDomain(
            "epsilon and tolerance must be positive".into(),
        ));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite importance"));
    }
    let (lo_b, hi_b) = b
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    // h(lo) > 0 > h(hi)
    let mut lo = lo_b - BRACKET_MARGIN * epsilon;
    let mut hi = hi_b + BRACKET_MARGIN * epsilon;
    let mut best = (f64::INFINITY, 0.5 * (lo + hi));
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        let h = shift_residual(b, alpha, mid, epsilon);
        if h.abs() < best.0 {
            best = (h.abs(), mid);
        }
        if h.abs() <= tol {
            return Ok(mid);
        }
        if mid <= lo || mid >= hi {
            break;
        }
        if h > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    log::debug!("shift solve stalled at |h| = {:e} (tol {tol:e})", best.0);
    Ok(best.1)
}

/// `∂β/∂α` from implicit differentiation of `h(β(α)) = 0`.
///
/// `∂p_c/∂β = −p_c(1−p_c)/ε`, so `∂β/∂α = −C·ε / Σ p_c(1−p_c)`.
pub fn shift_sensitivity(p: &[f64], epsilon: f64) -> f64 {
    let var: f64 = p.iter().map(|&q| q * (1.0 - q)).sum();
    -(p.len() as f64) * epsilon / var
}

/// Independent Bernoulli draws. An all-zero draw turns on the most probable
/// unit (lowest index on ties) so the layer never dies.
pub fn sample_mask<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> Vec<bool> {
    let mut omega: Vec<bool> = p.iter().map(|&q| rng.gen::<f64>() < q).collect();
    if !omega.is_empty() && !omega.iter().any(|&w| w) {
        let best = p
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &q)| if q > acc.1 { (i, q) } else { acc },
            )
            .0;
        omega[best] = true;
    }
    omega
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsenessGrad {
    pub value: f64,
    /// Every probability was saturated; the returned gradient is 0.
    pub saturated: bool,
}

/// `∂L/∂α = C · Σ_c g_c · p_c(1−p_c) / Σ p(1−p)` with `g_c = ∂L/∂p_c`.
pub fn sparseness_grad(unit_grads: &[f64], p: &[f64]) -> SparsenessGrad {
    let weights = variance_weights(p);
    match weights {
        None => SparsenessGrad {
            value: 0.0,
            saturated: true,
        },
        Some(w) => {
            let s: f64 = unit_grads.iter().zip(&w).map(|(g, w)| g * w).sum();
            SparsenessGrad {
                value: p.len() as f64 * s,
                saturated: false,
            }
        }
    }
}

/// Normalized Bernoulli variances `p(1−p)/Σ p(1−p)`; `None` if all saturated.
pub fn variance_weights(p: &[f64]) -> Option<Vec<f64>> {
    let var: Vec<f64> = p.iter().map(|&q| q * (1.0 - q)).collect();
    let total: f64 = var.iter().sum();
    if total <= SATURATION_EPS * p.len().max(1) as f64 {
        return None;
    }
    Some(var.into_iter().map(|v| v / total).collect())
}

/// `λ Σ_k (α^k)²` and its gradient.
pub fn regularizer(alpha: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let value = lambda * alpha.iter().map(|a| a * a).sum::<f64>();
    (value, alpha.iter().map(|a| 2.0 * lambda * a).collect())
}

/// Number of units kept by a keep ratio: `⌈α·C⌉`, at least 1.
pub fn kept_units(alpha: f64, c: usize) -> usize {
    // absorb representation error so that e.g. (2/3)·3 keeps 2
    let n = (alpha * c as f64 - 1e-9).ceil() as usize;
    n.clamp(1, c.max(1))
}

/// Deterministic top-`⌈α·C⌉` selection by importance, ties to the lower index.
pub fn harden(b: &[f64], alpha: f64) -> Vec<bool> {
    let n = kept_units(alpha, b.len());
    let mut order: Vec<usize> = (0..b.len()).collect();
    order.sort_by(|&i, &j| b[j].total_cmp(&b[i]).then(i.cmp(&j)));
    let mut keep = vec![false; b.len()];
    for &i in &order[..n] {
        keep[i] = true;
    }
    keep
}

/// `ε_init · decay^round`, floored at `1e-4`.
pub fn anneal(cfg: &SamplingConfig, round: usize) -> f64 {
    let exp = i32::try_from(round).unwrap_or(i32::MAX);
    (cfg.epsilon_init * cfg.epsilon_decay.powi(exp)).max(EPSILON_FLOOR)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn probability_examples() {
        assert_eq!(sampling_prob(0.7, 0.7, 0.3), 0.5);
        assert!(
            (sampling_prob(1.0 + 10.0 * 0.2, 1.0, 0.2) - 1.0 / (1.0 + (-10f64).exp())).abs()
                < 1e-15
        );
        assert!((sampling_prob(1.0, 0.5, 1.0) - 0.622_459_331_201_854_6).abs() < 1e-12);
        assert_eq!(sampling_prob(100.0, 0.0, 1e-3), 1.0 - PROB_FLOOR);
        assert_eq!(sampling_prob(-100.0, 0.0, 1e-3), PROB_FLOOR);
    }

    #[test]
    fn shift_symmetry_cases() {
        let beta = solve_shift(&[0.8; 7], 0.5, 0.3, 1e-10).unwrap();
        assert!((beta - 0.8).abs() < 1e-9);
        for eps in [0.05, 0.5, 3.0] {
            let beta = solve_shift(&[1.0, 2.0, 3.0, 4.0], 0.5, eps, 1e-12).unwrap();
            assert!((beta - 2.5).abs() < 1e-9, "eps {eps}: {beta}");
        }
    }

    #[test]
    fn shift_rejects_out_of_domain_ratios() {
        for a in [0.0, 1.0, 1.2, -0.1] {
            assert!(matches!(
                solve_shift(&[1.0, 2.0], a, 0.1, 1e-8),
                Err(Error::OutOfDomain(_))
            ));
        }
        assert!(solve_shift(&[], 0.5, 0.1, 1e-8).is_err());
    }

    #[test]
    fn degenerate_bernoulli() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(
                sample_mask(&[1.0, 0.0, 1.0], &mut rng),
                vec![true, false, true]
            );
        }
    }

    #[test]
    fn empty_draw_keeps_most_probable_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = [1e-12, 3e-12, 2e-12];
        assert_eq!(sample_mask(&p, &mut rng), vec![false, true, false]);
    }

    #[test]
    fn seeded_draws_repeat() {
        let p: Vec<f64> = (0..32).map(|i| 0.2 + 0.6 * i as f64 / 31.0).collect();
        let a = sample_mask(&p, &mut ChaCha8Rng::seed_from_u64(7));
        let b = sample_mask(&p, &mut ChaCha8Rng::seed_from_u64(7));
        let c = sample_mask(&p, &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn grad_of_constant_unit_grads_is_c_times_g() {
        let p = [0.1, 0.5, 0.7, 0.95];
        let g = sparseness_grad(&[0.3; 4], &p);
        assert!(!g.saturated);
        assert!((g.value - 4.0 * 0.3).abs() < 1e-12);
        assert_eq!(sparseness_grad(&[0.0; 4], &p).value, 0.0);
        let sat = sparseness_grad(&[1.0; 2], &[PROB_FLOOR, 1.0 - PROB_FLOOR]);
        assert!(sat.saturated);
        assert_eq!(sat.value, 0.0);
    }

    #[test]
    fn regularizer_examples() {
        assert_eq!(regularizer(&[1.0, 1.0], 0.5), (1.0, vec![1.0, 1.0]));
        assert_eq!(regularizer(&[0.3, 0.9], 0.0), (0.0, vec![0.0, 0.0]));
        let (lo, _) = regularizer(&[0.3, 0.5], 0.7);
        let (hi, _) = regularizer(&[0.3, 0.6], 0.7);
        assert!(hi > lo);
    }

    #[test]
    fn harden_examples() {
        assert_eq!(harden(&[3.0, 1.0, 2.0], 2.0 / 3.0), vec![true, false, true]);
        assert_eq!(
            harden(&[1.0, 1.0, 2.0], 1.0 / 3.0),
            vec![false, false, true]
        );
        assert_eq!(
            harden(&[1.0, 1.0, 1.0], 1.0 / 3.0),
            vec![true, false, false]
        );
        assert_eq!(harden(&[5.0, 4.0], 1e-6), vec![true, false]);
        assert_eq!(harden(&[5.0, 4.0], 1.0), vec![true, true]);
    }

    #[test]
    fn anneal_schedule() {
        let cfg = SamplingConfig::default();
        assert_eq!(anneal(&cfg, 0), 1.0);
        assert!((anneal(&cfg, 1) - 0.98).abs() < 1e-15);
        assert_eq!(anneal(&cfg, 10_000), 1e-4);
    }

    #[test]
    fn descend_clamps() {
        let mut s = SparsenessVector::new(2, 0.5, 1.0);
        s.descend(&[100.0, -100.0], 0.01, 0.05);
        assert_eq!(s.alpha, vec![0.05, 1.0]);
    }

    proptest! {
        #[test]
        fn residual_is_strictly_decreasing(
            b in prop::collection::vec(0.0f64..3.0, 1..40),
            alpha in 0.01f64..0.99,
            eps in 0.01f64..2.0,
            start in -3.0f64..3.0,
        ) {
            let mut prev = shift_residual(&b, alpha, start, eps);
            for i in 1..50 {
                let h = shift_residual(&b, alpha, start + 0.05 * i as f64, eps);
                // only compare where at least one unit is off its clamp
                if h != prev {
                    prop_assert!(h < prev);
                }
                prev = h;
            }
        }

        #[test]
        fn solved_shift_meets_sparseness(
            b in prop::collection::vec(0.0f64..2.0, 1..64),
            alpha in 0.02f64..0.98,
            eps in 0.01f64..2.0,
        ) {
            let beta = solve_shift(&b, alpha, eps, 1e-8).unwrap();
            prop_assert!(shift_residual(&b, alpha, beta, eps).abs() <= 1e-8);
        }

        #[test]
        fn variance_weights_form_a_simplex(p in prop::collection::vec(0.001f64..0.999, 1..50)) {
            let w = variance_weights(&p).unwrap();
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn harden_keeps_ceil_alpha_c(b in prop::collection::vec(0.0f64..1.0, 1..50), alpha in 0.001f64..1.0) {
            let keep = harden(&b, alpha);
            let n = keep.iter().filter(|&&k| k).count();
            prop_assert_eq!(n, kept_units(alpha, b.len()));
            let min_kept = b.iter().zip(&keep).filter(|(_, &k)| k).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
            let max_dropped = b.iter().zip(&keep).filter(|(_, &k)| !k).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_kept >= max_dropped);
        }
    }
}
