//! Training procedures with per-step telemetry.
//!
//! Baselines: SFT and Low-SFT (plain NLL descent at a 10:1 learning-rate
//! ratio), KL-regularized SFT, and distillation toward the static reverse-KL
//! barycenter of `p_sft` and `p_base`. The method itself is
//! [`anchored_learning`]; [`exact_projection_recursion`] is its idealized
//! form in which every inner loop lands exactly on the anchor.

use std::fmt::{self, Write as _};

use crate::anchor::{self, build_anchor, geometric_mean_anchor, AnchorConfig, AnchorTable, Space};
use crate::benchgen::{evaluate_accuracy, LabeledDataset};
use crate::error::{check_len, Error, Result};
use crate::models::{
    apply_step, distill_loss_and_grad, kl_penalty_loss_and_grad, nll_loss_and_grad,
    set_distribution_exactly, FeatureSet, LossGrad, Model, TabularModel,
};
use crate::simplex::{kl, ProbVector};
use crate::ContextId;

pub const DEFAULT_SFT_LR: f64 = 0.5;
/// Low-SFT keeps a tenth of the SFT learning rate.
pub const LOW_SFT_RATIO: f64 = 0.1;
pub const DEFAULT_LAMBDA: f64 = 0.2;
pub const DEFAULT_BETA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Sft,
    LowSft,
    KlSft { lambda: f64 },
    StaticBarycenter { beta: f64 },
    Anchored(AnchorConfig),
    ExactRecursion(AnchorConfig),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::LowSft => "low_sft",
            Method::KlSft { .. } => "kl_sft",
            Method::StaticBarycenter { .. } => "static_barycenter",
            Method::Anchored(_) => "anchored",
            Method::ExactRecursion(_) => "exact_recursion",
        }
    }

    pub fn anchor(&self) -> Option<&AnchorConfig> {
        match self {
            Method::Anchored(a) | Method::ExactRecursion(a) => Some(a),
            _ => None,
        }
    }
}

/// One training run. `lr` and `epochs` drive the epoch-based methods;
/// anchored methods use the schedule inside their [`AnchorConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        let lr = match method {
            Method::LowSft => DEFAULT_SFT_LR * LOW_SFT_RATIO,
            _ => DEFAULT_SFT_LR,
        };
        Self {
            method,
            lr,
            epochs: 100,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidCoefficient {
                name: "lr",
                value: self.lr,
                reason: "must be positive and finite",
            });
        }
        match &self.method {
            Method::KlSft { lambda } if !(*lambda >= 0.0) || !lambda.is_finite() => {
                Err(Error::InvalidCoefficient {
                    name: "lambda",
                    value: *lambda,
                    reason: "must be finite and nonnegative",
                })
            }
            Method::StaticBarycenter { beta } if !(*beta > 0.0 && *beta < 1.0) => {
                Err(Error::InvalidCoefficient {
                    name: "beta",
                    value: *beta,
                    reason: "must lie in the open interval (0, 1)",
                })
            }
            Method::Anchored(a) | Method::ExactRecursion(a) => a.validate(),
            _ => Ok(()),
        }
    }
}

/// Telemetry for one outer iteration (anchored methods) or one epoch.
///
/// Fields that do not apply to a method are `None` and written as empty CSV
/// cells. Divergences to the base and SFT models are `KL(p_θ ‖ ·)` averaged
/// over the training contexts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryRow {
    pub t: usize,
    /// Mean over contexts of `KL(q(x) ‖ p_θ(x))`, measured before the inner loop.
    pub kl_anchor_model: Option<f64>,
    /// Mean over contexts of the active bound.
    pub lemma_bound: Option<f64>,
    /// Largest per-context anchor-model divergence.
    pub kl_anchor_model_max: Option<f64>,
    /// Smallest per-context `bound − KL(q ‖ p_θ)`.
    pub worst_bound_slack: Option<f64>,
    pub kl_to_base: f64,
    pub kl_to_sft: Option<f64>,
    pub inner_final_distill_loss: Option<f64>,
    pub domain_acc: Option<f64>,
    pub general_acc: Option<f64>,
}

pub const TRAJECTORY_HEADER: &str = "method,space,alpha,t,kl_anchor_model,lemma_bound,kl_to_base,kl_to_sft,inner_final_distill_loss,domain_acc,general_acc";

pub const SUMMARY_HEADER: &str = "method,space,alpha,T,K,domain_acc,general_acc,kl_to_base,kl_to_sft,seed";

struct Cell<T>(Option<T>);

impl<T: fmt::Display> fmt::Display for Cell<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0 {
            Some(v) => v.fmt(f),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub method: &'static str,
    pub space: Option<Space>,
    pub alpha: Option<f64>,
    pub rows: Vec<TrajectoryRow>,
}

impl TrajectoryRecord {
    fn for_config(cfg: &TrainConfig) -> Self {
        let anchor = cfg.method.anchor();
        let alpha = match &cfg.method {
            Method::StaticBarycenter { beta } => Some(*beta),
            _ => anchor.map(|a| a.alpha),
        };
        Self {
            method: cfg.method.name(),
            space: anchor.map(|a| a.space),
            alpha,
            rows: Vec::new(),
        }
    }

    /// CSV body lines (no header), LF-terminated.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                self.method,
                Cell(self.space),
                Cell(self.alpha),
                r.t,
                Cell(r.kl_anchor_model),
                Cell(r.lemma_bound),
                r.kl_to_base,
                Cell(r.kl_to_sft),
                Cell(r.inner_final_distill_loss),
                Cell(r.domain_acc),
                Cell(r.general_acc),
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{TRAJECTORY_HEADER}\n{}", self.csv_rows())
    }
}

/// Final metrics of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: &'static str,
    pub space: Option<Space>,
    pub alpha: Option<f64>,
    pub outer_iters: Option<usize>,
    pub inner_epochs: Option<usize>,
    pub domain_acc: Option<f64>,
    pub general_acc: Option<f64>,
    pub kl_to_base: f64,
    pub kl_to_sft: Option<f64>,
    pub seed: u64,
}

impl SummaryRow {
    pub fn new(cfg: &TrainConfig, seed: u64, obs: &Observation) -> Self {
        let record = TrajectoryRecord::for_config(cfg);
        let anchor = cfg.method.anchor();
        Self {
            method: record.method,
            space: record.space,
            alpha: record.alpha,
            outer_iters: anchor.map(|a| a.outer_iters),
            inner_epochs: anchor.map(|a| a.inner_epochs),
            domain_acc: obs.domain_acc,
            general_acc: obs.general_acc,
            kl_to_base: obs.kl_to_base,
            kl_to_sft: obs.kl_to_sft,
            seed,
        }
    }

    /// One CSV line without the trailing newline.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.method,
            Cell(self.space),
            Cell(self.alpha),
            Cell(self.outer_iters),
            Cell(self.inner_epochs),
            Cell(self.domain_acc),
            Cell(self.general_acc),
            self.kl_to_base,
            Cell(self.kl_to_sft),
            self.seed,
        )
    }
}

/// Metrics of a model at one point of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub kl_to_base: f64,
    pub kl_to_sft: Option<f64>,
    pub domain_acc: Option<f64>,
    pub general_acc: Option<f64>,
}

/// What a run is measured against.
#[derive(Debug, Clone, Copy)]
pub struct Monitor<'a> {
    pub base: &'a Model,
    pub sft: Option<&'a Model>,
    /// Contexts over which drift divergences are averaged.
    pub drift: &'a LabeledDataset,
    pub domain_test: Option<&'a LabeledDataset>,
    pub general_test: Option<&'a LabeledDataset>,
}

fn mean_kl_between(a: &Model, b: &Model, contexts: &[ContextId], features: &FeatureSet) -> Result<f64> {
    let mut total = 0.0;
    for &ctx in contexts {
        total += kl(&a.distribution(ctx, features)?, &b.distribution(ctx, features)?)?;
    }
    Ok(total / contexts.len() as f64)
}

impl<'a> Monitor<'a> {
    /// Monitor with drift measured on `drift` and no held-out evaluation.
    pub fn drift_only(base: &'a Model, sft: Option<&'a Model>, drift: &'a LabeledDataset) -> Self {
        Self {
            base,
            sft,
            drift,
            domain_test: None,
            general_test: None,
        }
    }

    pub fn observe(&self, model: &Model) -> Result<Observation> {
        let contexts = self.drift.contexts();
        let features = &self.drift.features;
        Ok(Observation {
            kl_to_base: mean_kl_between(model, self.base, &contexts, features)?,
            kl_to_sft: self
                .sft
                .map(|s| mean_kl_between(model, s, &contexts, features))
                .transpose()?,
            domain_acc: self.domain_test.map(|d| evaluate_accuracy(model, d)).transpose()?,
            general_acc: self.general_test.map(|d| evaluate_accuracy(model, d)).transpose()?,
        })
    }

    fn row(&self, t: usize, model: &Model) -> Result<TrajectoryRow> {
        let obs = self.observe(model)?;
        Ok(TrajectoryRow {
            t,
            kl_to_base: obs.kl_to_base,
            kl_to_sft: obs.kl_to_sft,
            domain_acc: obs.domain_acc,
            general_acc: obs.general_acc,
            ..TrajectoryRow::default()
        })
    }
}

fn check_finite(step: usize, what: &str, value: f64, model: &Model) -> Result<()> {
    if !value.is_finite() || model.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::NumericalDivergence {
            step,
            detail: format!("{what} = {value}"),
        });
    }
    Ok(())
}

fn descend(
    model: &mut Model,
    step: usize,
    what: &str,
    objective: impl Fn(&Model) -> Result<LossGrad>,
    lr: f64,
) -> Result<f64> {
    let LossGrad { loss, grad } = objective(model)?;
    check_finite(step, what, loss, model)?;
    apply_step(model, &grad, lr)?;
    check_finite(step, what, loss, model)?;
    Ok(loss)
}

/// Full-batch NLL descent with no telemetry; used for the reference stages.
pub fn fit_nll(mut model: Model, data: &LabeledDataset, lr: f64, epochs: usize) -> Result<Model> {
    for epoch in 0..epochs {
        descend(&mut model, epoch, "nll", |m| nll_loss_and_grad(m, &data.rows, &data.features), lr)?;
    }
    Ok(model)
}

fn wrong_method(cfg: &TrainConfig, wanted: &str) -> Error {
    Error::InvalidInput(format!(
        "method `{}` passed to the {wanted} trainer",
        cfg.method.name()
    ))
}

/// Plain supervised fine-tuning: `cfg.epochs` full-batch NLL steps.
pub fn train_sft(
    mut model: Model,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    monitor: &Monitor<'_>,
) -> Result<(Model, TrajectoryRecord)> {
    if !matches!(cfg.method, Method::Sft | Method::LowSft) {
        return Err(wrong_method(cfg, "SFT"));
    }
    cfg.validate()?;
    let mut record = TrajectoryRecord::for_config(cfg);
    for epoch in 0..cfg.epochs {
        descend(&mut model, epoch, "nll", |m| nll_loss_and_grad(m, &data.rows, &data.features), cfg.lr)?;
        record.rows.push(monitor.row(epoch, &model)?);
    }
    Ok((model, record))
}

/// SFT with a `λ·KL(p_θ ‖ p_base)` penalty averaged over the dataset contexts.
pub fn train_kl_sft(
    mut model: Model,
    data: &LabeledDataset,
    base: &Model,
    cfg: &TrainConfig,
    monitor: &Monitor<'_>,
) -> Result<(Model, TrajectoryRecord)> {
    let Method::KlSft { lambda } = cfg.method else {
        return Err(wrong_method(cfg, "KL-SFT"));
    };
    cfg.validate()?;
    let contexts = data.contexts();
    let mut record = TrajectoryRecord::for_config(cfg);
    let objective = |m: &Model| -> Result<LossGrad> {
        let mut total = nll_loss_and_grad(m, &data.rows, &data.features)?;
        let penalty = kl_penalty_loss_and_grad(m, base, &contexts, &data.features, lambda)?;
        total.loss += penalty.loss;
        total.grad.iter_mut().zip(&penalty.grad).for_each(|(g, p)| *g += p);
        Ok(total)
    };
    for epoch in 0..cfg.epochs {
        descend(&mut model, epoch, "nll + kl penalty", objective, cfg.lr)?;
        record.rows.push(monitor.row(epoch, &model)?);
    }
    Ok((model, record))
}

/// Minimizer of `(1 − β)·KL(u ‖ p_sft) + β·KL(u ‖ p_base)` per context:
/// `p_sft^(1−β)·p_base^β / Z`.
pub fn static_barycenter_target(
    sft: &Model,
    base: &Model,
    features: &FeatureSet,
    contexts: &[ContextId],
    beta: f64,
) -> Result<AnchorTable> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidCoefficient {
            name: "beta",
            value: beta,
            reason: "must lie in the open interval (0, 1)",
        });
    }
    let mut entries = Vec::with_capacity(contexts.len());
    for &ctx in contexts {
        let target = geometric_mean_anchor(
            &sft.distribution(ctx, features)?,
            &base.distribution(ctx, features)?,
            beta,
        )?;
        entries.push((ctx, target));
    }
    Ok(AnchorTable::from_entries(entries, Space::Logit, beta))
}

fn mean_anchor_divergence(model: &Model, table: &AnchorTable, features: &FeatureSet) -> Result<f64> {
    let mut total = 0.0;
    for (ctx, q) in table.iter() {
        total += kl(q, &model.distribution(ctx, features)?)?;
    }
    Ok(total / table.len() as f64)
}

/// Distillation toward the fixed static barycenter for `cfg.epochs` steps.
pub fn train_static_barycenter(
    mut model: Model,
    sft: &Model,
    base: &Model,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    monitor: &Monitor<'_>,
) -> Result<(Model, TrajectoryRecord)> {
    let Method::StaticBarycenter { beta } = cfg.method else {
        return Err(wrong_method(cfg, "static-barycenter"));
    };
    cfg.validate()?;
    let contexts = data.contexts();
    let target = static_barycenter_target(sft, base, &data.features, &contexts, beta)?;
    let mut record = TrajectoryRecord::for_config(cfg);
    let objective = |m: &Model| distill_loss_and_grad(m, &target, &contexts, &data.features);
    for epoch in 0..cfg.epochs {
        descend(&mut model, epoch, "distill", objective, cfg.lr)?;
        let mut row = monitor.row(epoch, &model)?;
        let loss = objective(&model)?.loss;
        row.kl_anchor_model = Some(mean_anchor_divergence(&model, &target, &data.features)?);
        row.inner_final_distill_loss = Some(loss);
        record.rows.push(row);
    }
    Ok((model, record))
}

/// Per-context anchor-model divergences and their bounds for one table.
struct BoundCheck {
    mean_kl: f64,
    mean_bound: f64,
    max_kl: f64,
    worst_slack: f64,
}

fn check_bounds(
    current: &Model,
    reference: &Model,
    table: &AnchorTable,
    features: &FeatureSet,
) -> Result<BoundCheck> {
    let (mut sum_kl, mut sum_bound) = (0.0, 0.0);
    let mut max_kl = 0.0f64;
    let mut worst_slack = f64::INFINITY;
    for (ctx, q) in table.iter() {
        let p = current.distribution(ctx, features)?;
        let s = reference.distribution(ctx, features)?;
        let d = kl(q, &p)?;
        let bound = anchor::active_bound(table.space(), &p, &s, table.alpha())?;
        sum_kl += d;
        sum_bound += bound;
        max_kl = max_kl.max(d);
        worst_slack = worst_slack.min(bound - d);
    }
    let n = table.len() as f64;
    Ok(BoundCheck {
        mean_kl: sum_kl / n,
        mean_bound: sum_bound / n,
        max_kl,
        worst_slack,
    })
}

/// Anchored learning from `base` toward the frozen reference `sft`.
///
/// Each outer iteration snapshots the anchor `q(t)` from the current model
/// and `sft`, records the anchor-model divergence against the active bound,
/// then runs `K` full-batch distillation epochs toward the snapshot. Row `t`
/// carries the bound check for `q(t)` and the metrics of the model after its
/// inner loop.
pub fn anchored_learning(
    base: &Model,
    sft: &Model,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    monitor: &Monitor<'_>,
) -> Result<(Model, TrajectoryRecord)> {
    let Method::Anchored(anchor_cfg) = &cfg.method else {
        return Err(wrong_method(cfg, "anchored"));
    };
    cfg.validate()?;
    let contexts = data.contexts();
    let features = &data.features;
    let mut model = base.clone();
    let mut record = TrajectoryRecord::for_config(cfg);
    let mut step = 0;
    for t in 0..anchor_cfg.outer_iters {
        let table = build_anchor(&model, sft, features, &contexts, anchor_cfg)?;
        let bounds = check_bounds(&model, sft, &table, features)?;
        let objective = |m: &Model| distill_loss_and_grad(m, &table, &contexts, features);
        for _ in 0..anchor_cfg.inner_epochs {
            if let Some(tol) = anchor_cfg.inner_tol {
                if objective(&model)?.loss < tol {
                    break;
                }
            }
            descend(&mut model, step, "distill", objective, anchor_cfg.inner_lr)?;
            step += 1;
        }
        let final_loss = objective(&model)?.loss;
        check_finite(step, "distill", final_loss, &model)?;
        let mut row = monitor.row(t, &model)?;
        row.kl_anchor_model = Some(bounds.mean_kl);
        row.lemma_bound = Some(bounds.mean_bound);
        row.kl_anchor_model_max = Some(bounds.max_kl);
        row.worst_bound_slack = Some(bounds.worst_slack);
        row.inner_final_distill_loss = Some(final_loss);
        record.rows.push(row);
    }
    Ok((model, record))
}

/// Iterates of the exact-projection recursion, `iterates[t][c]` being
/// context `c` at outer iteration `t` (`t = 0..=T`).
#[derive(Debug, Clone, PartialEq)]
pub struct Recursion {
    pub iterates: Vec<Vec<ProbVector>>,
    pub record: TrajectoryRecord,
}

/// Probability-space anchored learning with exact inner projection.
///
/// A tabular model holds one row per context; each outer iteration builds
/// the mixture anchor and sets every row to it exactly, which realizes
/// `p(t+1) = (1 − α)·p(t) + α·p_sft`. Row `t` of the record describes
/// `p(t)`; rows `t < T` also carry the anchor bound check.
pub fn exact_projection_recursion(
    base: &[ProbVector],
    sft: &[ProbVector],
    alpha: f64,
    outer_iters: usize,
) -> Result<Recursion> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidCoefficient {
            name: "alpha",
            value: alpha,
            reason: "must lie in the open interval (0, 1)",
        });
    }
    check_len(base.len(), sft.len())?;
    if base.is_empty() {
        return Err(Error::InvalidInput("recursion needs at least one context".into()));
    }
    let vocab = base[0].len();
    let contexts: Vec<ContextId> = (0..base.len()).map(ContextId).collect();
    let features = FeatureSet::empty();
    let mut model: Model = TabularModel::zeros(base.len(), vocab).into();
    let mut reference: Model = TabularModel::zeros(base.len(), vocab).into();
    for (&ctx, (b, s)) in contexts.iter().zip(base.iter().zip(sft)) {
        check_len(vocab, b.len())?;
        check_len(vocab, s.len())?;
        set_distribution_exactly(&mut model, ctx, b)?;
        set_distribution_exactly(&mut reference, ctx, s)?;
    }
    let cfg = AnchorConfig {
        alpha,
        space: Space::Probability,
        outer_iters,
        inner_epochs: 1,
        ..AnchorConfig::default()
    };
    let mut record = TrajectoryRecord {
        method: Method::ExactRecursion(cfg.clone()).name(),
        space: Some(Space::Probability),
        alpha: Some(alpha),
        rows: Vec::with_capacity(outer_iters + 1),
    };
    let mut iterates = Vec::with_capacity(outer_iters + 1);
    let snapshot = |m: &Model| -> Result<Vec<ProbVector>> {
        contexts.iter().map(|&c| m.distribution(c, &features)).collect()
    };
    let mean_kl = |ps: &[ProbVector], qs: &[ProbVector]| -> Result<f64> {
        let mut total = 0.0;
        for (p, q) in ps.iter().zip(qs) {
            total += kl(p, q)?;
        }
        Ok(total / ps.len() as f64)
    };
    for t in 0..=outer_iters {
        let current = if t == 0 { base.to_vec() } else { snapshot(&model)? };
        let mut row = TrajectoryRow {
            t,
            kl_to_base: mean_kl(&current, base)?,
            kl_to_sft: Some(mean_kl(&current, sft)?),
            ..TrajectoryRow::default()
        };
        if t < outer_iters {
            let table = build_anchor(&model, &reference, &features, &contexts, &cfg)?;
            let bounds = check_bounds(&model, &reference, &table, &features)?;
            row.kl_anchor_model = Some(bounds.mean_kl);
            row.lemma_bound = Some(bounds.mean_bound);
            row.kl_anchor_model_max = Some(bounds.max_kl);
            row.worst_bound_slack = Some(bounds.worst_slack);
            for (ctx, q) in table.iter() {
                set_distribution_exactly(&mut model, ctx, q)?;
            }
            row.inner_final_distill_loss = Some(distill_loss_and_grad(&model, &table, &contexts, &features)?.loss);
        }
        record.rows.push(row);
        iterates.push(current);
    }
    Ok(Recursion { iterates, record })
}
