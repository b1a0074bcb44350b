//! Independent oracles and randomized bound checks.
//!
//! Nothing here reuses the code path it checks: the grid search enumerates
//! the simplex instead of solving for the barycenter, gradients are compared
//! with central differences, and the recursion is compared with its unrolled
//! closed form.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::anchor::{
    barycenter_objective, geometric_mean_anchor, interpolate_logit, interpolate_prob,
    logit_bound_rhs, prob_bound_rhs,
};
use crate::error::{Error, Result};
use crate::models::{LossGrad, Model};
use crate::rng;
use crate::simplex::{kl, mix, random_logits, random_simplex_point, softmax, ProbVector};
use crate::trainers::exact_projection_recursion;

/// Slack tolerance for algebraic identities and bounds.
pub const BOUND_TOLERANCE: f64 = 1e-12;
/// Relaxed tolerance for the logit bound at `α = 0.99`.
pub const TAIL_TOLERANCE: f64 = 1e-9;
pub const TAIL_ALPHA: f64 = 0.99;
/// Upper end of `α` sampling for the logit bound.
pub const GEOMETRIC_ALPHA_MAX: f64 = 0.95;
pub const DECAY_ITERS: usize = 20;
pub const DEFAULT_FD_STEP: f64 = 1e-5;

// ---------------------------------------------------------------------------
// grid oracle

/// Exhaustive minimization of `objective` over interior grid points
/// `(a, b, 1 − a − b)` of the 3-simplex, `a` and `b` multiples of `step`,
/// every coordinate at least `step`.
pub fn grid_minimize(step: f64, mut objective: impl FnMut(&ProbVector) -> Result<f64>) -> Result<(ProbVector, usize)> {
    if !(step > 0.0 && step <= 0.1) {
        return Err(Error::InvalidInput(format!("grid step {step} outside (0, 0.1]")));
    }
    let n = (1.0 / step).round() as usize;
    let mut best: Option<(f64, ProbVector)> = None;
    let mut visited = 0;
    for i in 1..n {
        for j in 1..n - i {
            let (a, b) = (i as f64 * step, j as f64 * step);
            let c = 1.0 - a - b;
            if c < step * (1.0 - 1e-9) {
                continue;
            }
            let u = ProbVector::new(vec![a, b, c])?;
            let value = objective(&u)?;
            visited += 1;
            if best.as_ref().is_none_or(|(v, _)| value < *v) {
                best = Some((value, u));
            }
        }
    }
    best.map(|(_, u)| (u, visited))
        .ok_or_else(|| Error::InvalidInput("grid has no interior points".into()))
}

/// Grid argmin of `(1 − α)·KL(u ‖ p) + α·KL(u ‖ s)`; `V = 3` only.
pub fn grid_minimize_barycenter(p: &ProbVector, s: &ProbVector, alpha: f64, step: f64) -> Result<ProbVector> {
    if p.len() != 3 || s.len() != 3 {
        return Err(Error::Unsupported("grid search is exhaustive only for V = 3"));
    }
    grid_minimize(step, |u| barycenter_objective(u, p, s, alpha)).map(|(u, _)| u)
}

/// L1 tolerance between a grid argmin and the exact minimizer.
pub fn grid_tolerance(step: f64) -> f64 {
    3.0 * step
}

// ---------------------------------------------------------------------------
// finite differences

/// Central differences `(L(θ + h·e_i) − L(θ − h·e_i)) / 2h` per coordinate.
pub fn finite_diff_gradient(mut loss: impl FnMut(&[f64]) -> Result<f64>, params: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidInput(format!("finite-difference step {h} must be positive")));
    }
    let mut theta = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        theta[i] = params[i] + h;
        let up = loss(&theta)?;
        theta[i] = params[i] - h;
        let down = loss(&theta)?;
        theta[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NumericalDivergence {
                step: i,
                detail: format!("loss evaluated to {up} / {down}"),
            });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, 1e-8)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}

/// Compares the analytic gradient of `objective` at `model` with central
/// differences of its loss; returns the relative error.
pub fn gradient_check(model: &Model, h: f64, objective: impl Fn(&Model) -> Result<LossGrad>) -> Result<f64> {
    let analytic = objective(model)?.grad;
    let mut probe = model.clone();
    let numeric = finite_diff_gradient(
        |theta| {
            probe.params_mut().copy_from_slice(theta);
            objective(&probe).map(|lg| lg.loss)
        },
        model.params(),
        h,
    )?;
    Ok(relative_error(&analytic, &numeric))
}

// ---------------------------------------------------------------------------
// recursion closed form

/// `(1 − α)^t·base + (1 − (1 − α)^t)·sft`.
pub fn unrolled_closed_form(base: &ProbVector, sft: &ProbVector, alpha: f64, t: usize) -> Vec<f64> {
    let w = (1.0 - alpha).powi(t as i32);
    base.values()
        .iter()
        .zip(sft.values())
        .map(|(b, s)| w * b + (1.0 - w) * s)
        .collect()
}

// ---------------------------------------------------------------------------
// fuzz suites

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    Lemma1,
    Lemma3,
    Prop1Decay,
    Eq8Equiv,
    JensenConvexity,
    StaticBarycenter,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Lemma1,
        Suite::Lemma3,
        Suite::Prop1Decay,
        Suite::Eq8Equiv,
        Suite::JensenConvexity,
        Suite::StaticBarycenter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Lemma1 => "lemma1",
            Suite::Lemma3 => "lemma3",
            Suite::Prop1Decay => "prop1-decay",
            Suite::Eq8Equiv => "eq8-equiv",
            Suite::JensenConvexity => "jensen-convexity",
            Suite::StaticBarycenter => "static-barycenter",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Suite::ALL.iter().map(|s| s.name()).collect();
                Error::InvalidInput(format!("unknown suite `{s}` (expected one of {}, all)", names.join(", ")))
            })
    }
}

/// Outcome of one fuzz suite. Slack is `RHS − LHS` for inequalities and the
/// negated discrepancy for identities; a trial fails when its slack is below
/// `−tolerance`.
#[derive(Debug, Clone, PartialEq)]
pub struct FuzzReport {
    pub suite: String,
    pub trials: usize,
    pub failures: usize,
    pub tolerance: f64,
    pub worst_slack: f64,
    pub worst_case: String,
}

impl FuzzReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "suite: {}", self.suite);
        let _ = writeln!(out, "trials: {}", self.trials);
        let _ = writeln!(out, "failures: {}", self.failures);
        let _ = writeln!(out, "tolerance: {:e}", self.tolerance);
        let _ = writeln!(out, "worst_slack: {:e}", self.worst_slack);
        let _ = writeln!(out, "worst_case: {}", self.worst_case);
        let _ = writeln!(out, "status: {}", if self.passed() { "pass" } else { "FAIL" });
        out
    }
}

struct Trial {
    slack: f64,
    case: String,
}

fn random_vocab<R: Rng>(r: &mut R) -> usize {
    r.gen_range(2..=64)
}

fn fmt_vec(v: &[f64]) -> String {
    format!("{v:?}")
}

fn mixture_bound_trial<R: Rng>(r: &mut R, alpha: Option<f64>) -> Result<Trial> {
    let v = random_vocab(r);
    let p = random_simplex_point(r, v)?;
    let s = random_simplex_point(r, v)?;
    let alpha = alpha.unwrap_or_else(|| r.gen_range(0.0..=1.0));
    let q = interpolate_prob(&p, &s, alpha)?;
    Ok(Trial {
        slack: prob_bound_rhs(&p, &s, alpha)? - kl(&q, &p)?,
        case: format!("alpha={alpha:?} p={} s={}", fmt_vec(p.values()), fmt_vec(s.values())),
    })
}

fn geometric_bound_trial<R: Rng>(r: &mut R, alpha: Option<f64>) -> Result<Trial> {
    let v = random_vocab(r);
    let p = random_simplex_point(r, v)?;
    let s = random_simplex_point(r, v)?;
    let alpha = alpha.unwrap_or_else(|| r.gen_range(0.0..=GEOMETRIC_ALPHA_MAX));
    let q = geometric_mean_anchor(&p, &s, alpha)?;
    Ok(Trial {
        slack: logit_bound_rhs(&p, &s, alpha)? - kl(&q, &p)?,
        case: format!("alpha={alpha:?} p={} s={}", fmt_vec(p.values()), fmt_vec(s.values())),
    })
}

fn open_alpha<R: Rng>(r: &mut R, alpha: Option<f64>) -> f64 {
    alpha.unwrap_or_else(|| rng::open_uniform(r))
}

fn decay_trial<R: Rng>(r: &mut R, alpha: Option<f64>) -> Result<Trial> {
    let v = random_vocab(r);
    let base = random_simplex_point(r, v)?;
    let sft = random_simplex_point(r, v)?;
    let alpha = open_alpha(r, alpha);
    let rec = exact_projection_recursion(std::slice::from_ref(&base), std::slice::from_ref(&sft), alpha, DECAY_ITERS)?;
    let kl0 = kl(&base, &sft)?;
    let mut slack = f64::INFINITY;
    for (t, iterate) in rec.iterates.iter().enumerate() {
        let p = &iterate[0];
        let decay = (1.0 - alpha).powi(t as i32) * kl0 - kl(p, &sft)?;
        let closed = unrolled_closed_form(&base, &sft, alpha, t);
        let mismatch = p
            .values()
            .iter()
            .zip(&closed)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        slack = slack.min(decay).min(-mismatch);
    }
    Ok(Trial {
        slack,
        case: format!("alpha={alpha:?} base={} sft={}", fmt_vec(base.values()), fmt_vec(sft.values())),
    })
}

fn logit_identity_trial<R: Rng>(r: &mut R, alpha: Option<f64>) -> Result<Trial> {
    let v = random_vocab(r);
    let scale = r.gen_range(0.1..3.0);
    let zp = random_logits(r, v, scale)?;
    let zs = random_logits(r, v, scale)?;
    let alpha = alpha.unwrap_or_else(|| r.gen_range(0.0..1.0));
    let via_logits = interpolate_logit(&zp, &zs, alpha)?;
    let via_probs = geometric_mean_anchor(&softmax(&zp), &softmax(&zs), alpha)?;
    Ok(Trial {
        slack: -via_logits.max_abs_diff(&via_probs),
        case: format!("alpha={alpha:?} z_p={} z_s={}", fmt_vec(zp.values()), fmt_vec(zs.values())),
    })
}

fn jensen_trial<R: Rng>(r: &mut R, _alpha: Option<f64>) -> Result<Trial> {
    let v = random_vocab(r);
    let u1 = random_simplex_point(r, v)?;
    let u2 = random_simplex_point(r, v)?;
    let target = random_simplex_point(r, v)?;
    let mut slack = f64::INFINITY;
    for k in 1..=9 {
        let lambda = k as f64 / 10.0;
        // λ·u1 + (1 − λ)·u2
        let blend = mix(&u2, &u1, lambda)?;
        let convex = lambda * kl(&u1, &target)? + (1.0 - lambda) * kl(&u2, &target)? - kl(&blend, &target)?;
        // (1 − λ)·a + λ·b against b
        let toward = mix(&u1, &target, lambda)?;
        let joint = (1.0 - lambda) * kl(&u1, &target)? - kl(&toward, &target)?;
        slack = slack.min(convex).min(joint);
    }
    Ok(Trial {
        slack,
        case: format!(
            "u1={} u2={} r={}",
            fmt_vec(u1.values()),
            fmt_vec(u2.values()),
            fmt_vec(target.values())
        ),
    })
}

/// Candidates per static-barycenter trial.
const STATIC_CANDIDATES: usize = 16;

fn static_trial<R: Rng>(r: &mut R, beta: Option<f64>) -> Result<Trial> {
    let v = random_vocab(r);
    let sft = random_simplex_point(r, v)?;
    let base = random_simplex_point(r, v)?;
    let beta = open_alpha(r, beta);
    let star = geometric_mean_anchor(&sft, &base, beta)?;
    let at_star = barycenter_objective(&star, &sft, &base, beta)?;
    let mut slack = f64::INFINITY;
    for k in 0..STATIC_CANDIDATES {
        let other = random_simplex_point(r, v)?;
        // half the candidates are far, half are small perturbations of p*
        let weight = if k % 2 == 0 { 1.0 } else { 10f64.powi(-(k as i32 % 5) - 1) };
        let candidate = mix(&star, &other, weight)?;
        slack = slack.min(barycenter_objective(&candidate, &sft, &base, beta)? - at_star);
    }
    Ok(Trial {
        slack,
        case: format!("beta={beta:?} sft={} base={}", fmt_vec(sft.values()), fmt_vec(base.values())),
    })
}

fn run_trials(
    suite: &str,
    trials: usize,
    seed: u64,
    tolerance: f64,
    trial: impl Fn(&mut rng::Prng) -> Result<Trial> + Sync,
) -> Result<FuzzReport> {
    if trials == 0 {
        return Err(Error::InvalidInput("fuzz suites need at least one trial".into()));
    }
    let results: Vec<Trial> = (0..trials)
        .into_par_iter()
        .map(|i| trial(&mut rng::derived(seed, i as u64)))
        .collect::<Result<_>>()?;
    let failures = results.iter().filter(|t| t.slack < -tolerance).count();
    let worst = results
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.slack.total_cmp(&b.slack))
        .map(|(i, t)| (t.slack, format!("trial={i} {}", t.case)))
        .expect("at least one trial");
    Ok(FuzzReport {
        suite: suite.to_string(),
        trials,
        failures,
        tolerance,
        worst_slack: worst.0,
        worst_case: worst.1,
    })
}

/// Runs a suite with `α` (or `β`) sampled per its stated range.
pub fn fuzz_bounds(suite: Suite, trials: usize, seed: u64) -> Result<FuzzReport> {
    fuzz_bounds_at(suite, trials, seed, None)
}

/// Runs a suite with the coefficient pinned to `alpha` when given.
pub fn fuzz_bounds_at(suite: Suite, trials: usize, seed: u64, alpha: Option<f64>) -> Result<FuzzReport> {
    let trial: fn(&mut rng::Prng, Option<f64>) -> Result<Trial> = match suite {
        Suite::Lemma1 => mixture_bound_trial,
        Suite::Lemma3 => geometric_bound_trial,
        Suite::Prop1Decay => decay_trial,
        Suite::Eq8Equiv => logit_identity_trial,
        Suite::JensenConvexity => jensen_trial,
        Suite::StaticBarycenter => static_trial,
    };
    run_trials(suite.name(), trials, seed, BOUND_TOLERANCE, |r| trial(r, alpha))
}

/// Logit bound at `α = 0.99`, where the `α/(1 − α)` factor amplifies
/// rounding; checked at the relaxed tolerance.
pub fn geometric_bound_tail(trials: usize, seed: u64) -> Result<FuzzReport> {
    run_trials("lemma3-tail", trials, seed, TAIL_TOLERANCE, |r| geometric_bound_trial(r, Some(TAIL_ALPHA)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::geometric_mean_anchor;
    use crate::models::{distill_loss_and_grad, TabularModel};
    use crate::anchor::{AnchorTable, Space};
    use crate::models::FeatureSet;
    use crate::ContextId;
    use std::time::Instant;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn grid_equal_pair_finds_common_point() {
        let p = pv(&[0.2, 0.3, 0.5]);
        let u = grid_minimize_barycenter(&p, &p, 0.4, 0.005).unwrap();
        assert!(u.l1_distance(&p) <= grid_tolerance(0.005));
    }

    #[test]
    fn grid_symmetric_pair_matches_closed_form() {
        let p = pv(&[0.8, 0.1, 0.1]);
        let s = pv(&[0.1, 0.8, 0.1]);
        let grid = grid_minimize_barycenter(&p, &s, 0.5, 0.005).unwrap();
        let exact = geometric_mean_anchor(&p, &s, 0.5).unwrap();
        assert!(grid.l1_distance(&exact) <= 0.015, "{grid:?} vs {exact:?}");
    }

    #[test]
    fn grid_size_and_runtime() {
        let p = pv(&[0.3, 0.3, 0.4]);
        let start = Instant::now();
        let (_, visited) = grid_minimize(0.005, |u| barycenter_objective(u, &p, &p, 0.5)).unwrap();
        assert_eq!(visited, 199 * 198 / 2);
        assert!(start.elapsed().as_secs_f64() < 1.0);
    }

    #[test]
    fn grid_rejects_bad_inputs() {
        let p = pv(&[0.5, 0.5]);
        assert!(matches!(
            grid_minimize_barycenter(&p, &p, 0.5, 0.01),
            Err(Error::Unsupported(_))
        ));
        let q = pv(&[0.2, 0.3, 0.5]);
        assert!(grid_minimize_barycenter(&q, &q, 0.5, 0.2).is_err());
        assert!(grid_minimize_barycenter(&q, &q, 0.5, 0.0).is_err());
    }

    #[test]
    fn finite_differences_basic() {
        let g = finite_diff_gradient(|t| Ok(t[0] * t[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_diff_gradient(|_| Ok(4.2), &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-9));
        assert!(matches!(
            finite_diff_gradient(|t| Ok(if t[0] > 0.0 { f64::NAN } else { 0.0 }), &[0.0], 1e-5),
            Err(Error::NumericalDivergence { .. })
        ));
        assert!(finite_diff_gradient(|_| Ok(0.0), &[0.0], 0.0).is_err());
    }

    #[test]
    fn finite_differences_agree_with_distill_gradient() {
        let mut r = rng::seeded(11);
        let model: Model = TabularModel::from_rows(vec![
            random_logits(&mut r, 5, 1.0).unwrap().into_vec(),
            random_logits(&mut r, 5, 1.0).unwrap().into_vec(),
        ])
        .unwrap()
        .into();
        let table = AnchorTable::from_entries(
            (0..2).map(|i| (ContextId(i), random_simplex_point(&mut r, 5).unwrap())),
            Space::Logit,
            0.5,
        );
        let ctxs = [ContextId(0), ContextId(1)];
        let feats = FeatureSet::empty();
        let err = gradient_check(&model, DEFAULT_FD_STEP, |m| distill_loss_and_grad(m, &table, &ctxs, &feats)).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn mixture_bound_tight_at_zero_alpha() {
        let report = fuzz_bounds_at(Suite::Lemma1, 200, 3, Some(0.0)).unwrap();
        assert!(report.passed());
        assert_eq!(report.worst_slack, 0.0);
    }

    #[test]
    fn suites_pass_small() {
        for suite in Suite::ALL {
            let report = fuzz_bounds(suite, 200, 99).unwrap();
            assert!(report.passed(), "{}", report.to_text());
        }
    }

    #[test]
    fn report_text_format() {
        let report = fuzz_bounds(Suite::Eq8Equiv, 5, 1).unwrap();
        let text = report.to_text();
        assert!(text.starts_with("suite: eq8-equiv\ntrials: 5\nfailures: 0\n"));
        assert!(text.lines().all(|l| l.contains(": ")));
    }

    #[test]
    fn suite_names_parse() {
        for suite in Suite::ALL {
            assert_eq!(suite.name().parse::<Suite>().unwrap(), suite);
        }
        assert!(matches!("nosuch".parse::<Suite>(), Err(Error::InvalidInput(_))));
        assert!(fuzz_bounds(Suite::Lemma1, 0, 1).is_err());
    }

    #[test]
    fn fuzz_is_deterministic() {
        let a = fuzz_bounds(Suite::Lemma3, 300, 5).unwrap();
        let b = fuzz_bounds(Suite::Lemma3, 300, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn closed_form_endpoints() {
        let b = pv(&[0.9, 0.1]);
        let s = pv(&[0.1, 0.9]);
        assert_eq!(unrolled_closed_form(&b, &s, 0.5, 0), b.values());
        let two = unrolled_closed_form(&b, &s, 0.5, 2);
        assert!((two[0] - 0.3).abs() < 1e-15 && (two[1] - 0.7).abs() < 1e-15);
    }
}
