//! Anchor construction and the divergence bounds that make each anchor step
//! a trust region.
//!
//! Two interpolation operators map the current model `p` and a frozen
//! reference `s` to an anchor `q`:
//!
//! * probability space: `q = (1 − α)·p + α·s` (arithmetic mixture), with
//!   `KL(q ‖ p) ≤ α·KL(s ‖ p)`;
//! * logit space: `q = softmax((1 − α)·z_p + α·z_s)`, which is the
//!   renormalized geometric mean `p^(1−α)·s^α / Z` and the minimizer of
//!   `(1 − α)·KL(u ‖ p) + α·KL(u ‖ s)`, with
//!   `KL(q ‖ p) ≤ α/(1 − α)·KL(p ‖ s)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{check_len, Error, Result};
use crate::models::{FeatureSet, Model};
use crate::simplex::{self, check_unit_interval, kl, LogitVector, ProbVector};
use crate::ContextId;

/// Space in which the current model and the reference are interpolated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Space {
    Logit,
    Probability,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Space::Logit => "logit",
            Space::Probability => "prob",
        })
    }
}

impl FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(Space::Logit),
            "prob" | "probability" => Ok(Space::Probability),
            other => Err(Error::InvalidInput(format!(
                "unknown interpolation space `{other}` (expected logit or prob)"
            ))),
        }
    }
}

/// Outer/inner schedule and interpolation settings for anchored training.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    pub alpha: f64,
    pub space: Space,
    /// Outer iterations `T`.
    pub outer_iters: usize,
    /// Inner distillation epochs `K` per outer iteration.
    pub inner_epochs: usize,
    pub inner_lr: f64,
    /// Stop an inner loop early once the distillation loss drops below this.
    /// Off by default.
    pub inner_tol: Option<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            space: Space::Logit,
            outer_iters: 5,
            inner_epochs: 5,
            inner_lr: 0.5,
            inner_tol: None,
        }
    }
}

impl AnchorConfig {
    /// Checks the constraints a training run needs: `0 < α < 1`, `T, K ≥ 1`,
    /// positive learning rate.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidCoefficient {
                name: "anchor.alpha",
                value: self.alpha,
                reason: "must lie in the open interval (0, 1)",
            });
        }
        if self.outer_iters == 0 || self.inner_epochs == 0 {
            return Err(Error::InvalidInput(
                "anchor.outer_iters and anchor.inner_epochs must be at least 1".into(),
            ));
        }
        if !(self.inner_lr > 0.0) || !self.inner_lr.is_finite() {
            return Err(Error::InvalidCoefficient {
                name: "anchor.inner_lr",
                value: self.inner_lr,
                reason: "must be positive and finite",
            });
        }
        Ok(())
    }
}

/// Frozen per-context target distributions for one outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTable {
    anchors: BTreeMap<ContextId, ProbVector>,
    space: Space,
    alpha: f64,
}

impl AnchorTable {
    pub fn from_entries(
        entries: impl IntoIterator<Item = (ContextId, ProbVector)>,
        space: Space,
        alpha: f64,
    ) -> Self {
        Self {
            anchors: entries.into_iter().collect(),
            space,
            alpha,
        }
    }

    pub fn get(&self, ctx: ContextId) -> Result<&ProbVector> {
        self.anchors.get(&ctx).ok_or(Error::UnknownContext(ctx))
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ContextId, &ProbVector)> {
        self.anchors.iter().map(|(c, p)| (*c, p))
    }
}

pub fn interpolate_prob(p: &ProbVector, s: &ProbVector, alpha: f64) -> Result<ProbVector> {
    simplex::mix(p, s, alpha)
}

/// `softmax((1 − α)·z_p + α·z_s)`.
pub fn interpolate_logit(z_p: &LogitVector, z_s: &LogitVector, alpha: f64) -> Result<ProbVector> {
    check_unit_interval("alpha", alpha)?;
    check_len(z_p.len(), z_s.len())?;
    let mixed = z_p
        .values()
        .iter()
        .zip(z_s.values())
        .map(|(a, b)| (1.0 - alpha) * a + alpha * b)
        .collect();
    Ok(simplex::softmax(&LogitVector::new(mixed)?))
}

/// Renormalized geometric mean `p^(1−α)·s^α / Z`, returned with `ln Z`.
pub fn geometric_mean_with_log_partition(
    p: &ProbVector,
    s: &ProbVector,
    alpha: f64,
) -> Result<(ProbVector, f64)> {
    check_unit_interval("alpha", alpha)?;
    check_len(p.len(), s.len())?;
    let log_weights: Vec<f64> = p
        .values()
        .iter()
        .zip(s.values())
        .map(|(a, b)| (1.0 - alpha) * a.ln() + alpha * b.ln())
        .collect();
    let log_z = simplex::logsumexp(&log_weights);
    if !log_z.is_finite() {
        return Err(Error::DegenerateDistribution(format!("log partition {log_z}")));
    }
    Ok((ProbVector::from_log_weights(&log_weights)?, log_z))
}

pub fn geometric_mean_anchor(p: &ProbVector, s: &ProbVector, alpha: f64) -> Result<ProbVector> {
    geometric_mean_with_log_partition(p, s, alpha).map(|(q, _)| q)
}

/// `(1 − α)·KL(u ‖ p) + α·KL(u ‖ s)`.
pub fn barycenter_objective(u: &ProbVector, p: &ProbVector, s: &ProbVector, alpha: f64) -> Result<f64> {
    check_unit_interval("alpha", alpha)?;
    Ok((1.0 - alpha) * kl(u, p)? + alpha * kl(u, s)?)
}

/// `α·KL(s ‖ p)`, the bound on `KL(q ‖ p)` for the mixture anchor.
pub fn prob_bound_rhs(p: &ProbVector, s: &ProbVector, alpha: f64) -> Result<f64> {
    check_unit_interval("alpha", alpha)?;
    Ok(alpha * kl(s, p)?)
}

/// `α/(1 − α)·KL(p ‖ s)`, the bound on `KL(q ‖ p)` for the geometric anchor.
pub fn logit_bound_rhs(p: &ProbVector, s: &ProbVector, alpha: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidCoefficient {
            name: "alpha",
            value: alpha,
            reason: "logit bound needs alpha in [0, 1)",
        });
    }
    Ok(alpha / (1.0 - alpha) * kl(p, s)?)
}

/// Bound matching the operator used for `space`.
pub fn active_bound(space: Space, p: &ProbVector, s: &ProbVector, alpha: f64) -> Result<f64> {
    match space {
        Space::Probability => prob_bound_rhs(p, s, alpha),
        Space::Logit => logit_bound_rhs(p, s, alpha),
    }
}

/// Materializes the anchor for every context as a detached snapshot of the
/// two models' current outputs. Only `cfg.alpha` and `cfg.space` are read;
/// `α` may be anywhere in `[0, 1]`.
pub fn build_anchor(
    current: &Model,
    reference: &Model,
    features: &FeatureSet,
    contexts: &[ContextId],
    cfg: &AnchorConfig,
) -> Result<AnchorTable> {
    if contexts.is_empty() {
        return Err(Error::InvalidInput("anchor needs at least one context".into()));
    }
    check_len(current.vocab(), reference.vocab())?;
    check_unit_interval("alpha", cfg.alpha)?;
    let mut anchors = BTreeMap::new();
    for &ctx in contexts {
        let q = match cfg.space {
            Space::Logit => interpolate_logit(
                &current.logits(ctx, features)?,
                &reference.logits(ctx, features)?,
                cfg.alpha,
            )?,
            Space::Probability => interpolate_prob(
                &current.distribution(ctx, features)?,
                &reference.distribution(ctx, features)?,
                cfg.alpha,
            )?,
        };
        anchors.insert(ctx, q);
    }
    Ok(AnchorTable {
        anchors,
        space: cfg.space,
        alpha: cfg.alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::TabularModel;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    fn close(a: &ProbVector, b: &[f64], tol: f64) {
        for (x, y) in a.values().iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn interpolate_prob_examples() {
        let p = pv(&[0.5, 0.5]);
        let s = pv(&[0.9, 0.1]);
        assert_eq!(interpolate_prob(&p, &s, 0.0).unwrap(), p);
        let q = interpolate_prob(&p, &s, 0.5).unwrap();
        close(&q, &[0.7, 0.3], 1e-15);
        let lhs = kl(&q, &p).unwrap();
        let rhs = prob_bound_rhs(&p, &s, 0.5).unwrap();
        assert!((lhs - 0.082283).abs() < 1e-6);
        assert!((rhs - 0.184032).abs() < 1e-6);
        assert!(lhs <= rhs);
    }

    #[test]
    fn interpolate_logit_examples() {
        let zp = lv(&[0.7, -0.2, 1.4]);
        let zs = lv(&[-1.0, 2.0, 0.0]);
        close(
            &interpolate_logit(&zp, &zs, 0.0).unwrap(),
            simplex::softmax(&zp).values(),
            1e-15,
        );
        for alpha in [0.0, 0.3, 0.99] {
            close(
                &interpolate_logit(&lv(&[1.0, 1.0]), &lv(&[3.0, 3.0]), alpha).unwrap(),
                &[0.5, 0.5],
                1e-15,
            );
        }
        // softmax(z_s) = (0.8, 0.2)
        let q = interpolate_logit(&lv(&[0.0, 0.0]), &lv(&[4f64.ln(), 0.0]), 0.5).unwrap();
        close(&q, &[2.0 / 3.0, 1.0 / 3.0], 1e-15);
        assert!(interpolate_logit(&zp, &zs, 1.5).is_err());
    }

    #[test]
    fn geometric_mean_examples() {
        close(
            &geometric_mean_anchor(&pv(&[0.8, 0.2]), &pv(&[0.2, 0.8]), 0.5).unwrap(),
            &[0.5, 0.5],
            1e-15,
        );
        let p = pv(&[0.1, 0.6, 0.3]);
        close(
            &geometric_mean_anchor(&p, &pv(&[0.3, 0.3, 0.4]), 0.0).unwrap(),
            p.values(),
            1e-15,
        );
        let (q, log_z) =
            geometric_mean_with_log_partition(&pv(&[0.5, 0.5]), &pv(&[0.8, 0.2]), 0.5).unwrap();
        close(&q, &[2.0 / 3.0, 1.0 / 3.0], 1e-15);
        // Z = √0.4 + √0.1
        assert!((log_z - (0.4f64.sqrt() + 0.1f64.sqrt()).ln()).abs() < 1e-15);
    }

    #[test]
    fn barycenter_objective_examples() {
        let p = pv(&[0.8, 0.2]);
        let s = pv(&[0.2, 0.8]);
        let at_p = barycenter_objective(&p, &p, &s, 0.5).unwrap();
        assert!((at_p - 0.5 * kl(&p, &s).unwrap()).abs() < 1e-15);
        let q = geometric_mean_anchor(&p, &s, 0.5).unwrap();
        let at_q = barycenter_objective(&q, &p, &s, 0.5).unwrap();
        assert!((at_q - 0.223144).abs() < 1e-6, "{at_q}");
        let at_other = barycenter_objective(&pv(&[0.6, 0.4]), &p, &s, 0.5).unwrap();
        assert!(at_q <= at_other);
    }

    #[test]
    fn bound_examples() {
        let p = pv(&[0.5, 0.5]);
        let s = pv(&[0.9, 0.1]);
        assert_eq!(prob_bound_rhs(&p, &s, 0.0).unwrap(), 0.0);
        assert_eq!(prob_bound_rhs(&p, &s, 1.0).unwrap(), kl(&s, &p).unwrap());

        let p = pv(&[0.8, 0.2]);
        let s = pv(&[0.2, 0.8]);
        assert_eq!(logit_bound_rhs(&p, &s, 0.0).unwrap(), 0.0);
        assert_eq!(kl(&geometric_mean_anchor(&p, &s, 0.0).unwrap(), &p).unwrap(), 0.0);
        let rhs = logit_bound_rhs(&p, &s, 0.5).unwrap();
        assert!((rhs - 0.831777).abs() < 1e-6);
        let lhs = kl(&geometric_mean_anchor(&p, &s, 0.5).unwrap(), &p).unwrap();
        assert!((lhs - 0.223144).abs() < 1e-6);
        assert!(lhs <= rhs);
        let nine = logit_bound_rhs(&p, &s, 0.9).unwrap();
        assert!((nine - 9.0 * kl(&p, &s).unwrap()).abs() < 1e-12);
        assert!(matches!(
            logit_bound_rhs(&p, &s, 1.0),
            Err(Error::InvalidCoefficient { .. })
        ));
    }

    fn tab(rows: Vec<Vec<f64>>) -> Model {
        TabularModel::from_rows(rows).unwrap().into()
    }

    #[test]
    fn build_anchor_examples() {
        let feats = FeatureSet::empty();
        let current = tab(vec![vec![0.0, 0.0], vec![1.0, -1.0]]);
        let reference = tab(vec![vec![4f64.ln(), 0.0], vec![-2.0, 0.5]]);
        let ctxs = [ContextId(0), ContextId(1)];

        let mut cfg = AnchorConfig {
            alpha: 0.0,
            space: Space::Logit,
            ..AnchorConfig::default()
        };
        let table = build_anchor(&current, &reference, &feats, &ctxs, &cfg).unwrap();
        for &c in &ctxs {
            close(
                table.get(c).unwrap(),
                current.distribution(c, &feats).unwrap().values(),
                1e-15,
            );
        }

        cfg.alpha = 1.0;
        cfg.space = Space::Probability;
        let table = build_anchor(&current, &reference, &feats, &ctxs, &cfg).unwrap();
        for &c in &ctxs {
            assert_eq!(table.get(c).unwrap(), &reference.distribution(c, &feats).unwrap());
        }

        cfg.alpha = 0.5;
        cfg.space = Space::Logit;
        let table = build_anchor(&current, &reference, &feats, &ctxs[..1], &cfg).unwrap();
        close(table.get(ContextId(0)).unwrap(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15);
        assert_eq!(table.len(), 1);
    }

    #[test]
    fn build_anchor_is_detached() {
        let feats = FeatureSet::empty();
        let mut current = tab(vec![vec![0.0, 0.0]]);
        let reference = tab(vec![vec![1.0, 0.0]]);
        let cfg = AnchorConfig::default();
        let table = build_anchor(&current, &reference, &feats, &[ContextId(0)], &cfg).unwrap();
        let snapshot = table.clone();
        current.params_mut()[0] = 50.0;
        assert_eq!(table, snapshot);
    }

    #[test]
    fn build_anchor_errors() {
        let feats = FeatureSet::empty();
        let a = tab(vec![vec![0.0, 0.0]]);
        let b = tab(vec![vec![0.0, 0.0, 0.0]]);
        let cfg = AnchorConfig::default();
        assert!(matches!(
            build_anchor(&a, &b, &feats, &[ContextId(0)], &cfg),
            Err(Error::ShapeError { .. })
        ));
        assert!(matches!(
            build_anchor(&a, &a, &feats, &[], &cfg),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(AnchorConfig::default().validate().is_ok());
        for alpha in [0.0, 1.0, 1.5, -0.2] {
            let cfg = AnchorConfig {
                alpha,
                ..AnchorConfig::default()
            };
            assert!(cfg.validate().is_err());
        }
        let cfg = AnchorConfig {
            outer_iters: 0,
            ..AnchorConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
