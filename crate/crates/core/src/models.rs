//! Conditional-distribution model families with analytic gradients.
//!
//! Two families share one parameter layout contract: parameters are a flat
//! `f64` buffer and gradients are buffers of the same length.
//!
//! * [`TabularModel`] keeps an independent logit row per context, so any
//!   target distribution can be matched exactly.
//! * [`LinearSoftmaxModel`] computes `z(x) = W·φ(x)` with one weight matrix
//!   shared across contexts; updating it for one context moves all others.

use std::fmt::Write as _;

use crate::anchor::AnchorTable;
use crate::error::{check_len, Error, Result};
use crate::simplex::{self, LogitVector, ProbVector};
use crate::ContextId;

/// Per-context feature vectors `φ(x)`, indexed densely by context id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureSet {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl FeatureSet {
    pub fn new(dim: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        for row in &rows {
            check_len(dim, row.len())?;
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput("non-finite feature".into()));
            }
        }
        Ok(Self { dim, rows })
    }

    /// Placeholder for tabular models, which ignore features.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, ctx: ContextId) -> Result<&[f64]> {
        self.rows
            .get(ctx.0)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownContext(ctx))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularModel {
    vocab: usize,
    logits: Vec<f64>,
}

impl TabularModel {
    pub fn zeros(contexts: usize, vocab: usize) -> Self {
        Self {
            vocab,
            logits: vec![0.0; contexts * vocab],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let vocab = rows
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidInput("tabular model needs at least one row".into()))?;
        let mut logits = Vec::with_capacity(rows.len() * vocab);
        for row in rows {
            check_len(vocab, row.len())?;
            logits.extend(LogitVector::new(row)?.into_vec());
        }
        Ok(Self { vocab, logits })
    }

    pub fn contexts(&self) -> usize {
        self.logits.len() / self.vocab
    }

    pub fn row(&self, ctx: ContextId) -> Result<&[f64]> {
        if ctx.0 >= self.contexts() {
            return Err(Error::UnknownContext(ctx));
        }
        Ok(&self.logits[ctx.0 * self.vocab..(ctx.0 + 1) * self.vocab])
    }
}

/// `z(x) = W·φ(x)`, `W` stored row-major with `vocab` rows and `dim` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmaxModel {
    vocab: usize,
    dim: usize,
    weights: Vec<f64>,
}

impl LinearSoftmaxModel {
    pub fn zeros(vocab: usize, dim: usize) -> Self {
        Self {
            vocab,
            dim,
            weights: vec![0.0; vocab * dim],
        }
    }

    pub fn from_weights(vocab: usize, dim: usize, weights: Vec<f64>) -> Result<Self> {
        check_len(vocab * dim, weights.len())?;
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidInput("non-finite weight".into()));
        }
        Ok(Self { vocab, dim, weights })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// A conditional model `x ↦ p(·|x)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Tabular(TabularModel),
    Linear(LinearSoftmaxModel),
}

impl From<TabularModel> for Model {
    fn from(m: TabularModel) -> Self {
        Model::Tabular(m)
    }
}

impl From<LinearSoftmaxModel> for Model {
    fn from(m: LinearSoftmaxModel) -> Self {
        Model::Linear(m)
    }
}

impl Model {
    pub fn vocab(&self) -> usize {
        match self {
            Model::Tabular(m) => m.vocab,
            Model::Linear(m) => m.vocab,
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Model::Tabular(_) => "tabular",
            Model::Linear(_) => "linear",
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Model::Tabular(m) => &m.logits,
            Model::Linear(m) => &m.weights,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Model::Tabular(m) => &mut m.logits,
            Model::Linear(m) => &mut m.weights,
        }
    }

    /// Logits without the finiteness check, so diverging runs surface as a
    /// non-finite loss rather than an input error.
    pub(crate) fn raw_logits(&self, ctx: ContextId, features: &FeatureSet) -> Result<Vec<f64>> {
        match self {
            Model::Tabular(m) => m.row(ctx).map(<[f64]>::to_vec),
            Model::Linear(m) => {
                let phi = features.get(ctx)?;
                check_len(m.dim, phi.len())?;
                Ok(m.weights
                    .chunks_exact(m.dim)
                    .map(|w| w.iter().zip(phi).map(|(a, b)| a * b).sum())
                    .collect())
            }
        }
    }

    pub fn logits(&self, ctx: ContextId, features: &FeatureSet) -> Result<LogitVector> {
        LogitVector::new(self.raw_logits(ctx, features)?)
    }

    pub fn distribution(&self, ctx: ContextId, features: &FeatureSet) -> Result<ProbVector> {
        Ok(simplex::softmax(&self.logits(ctx, features)?))
    }

    /// Adds `∂L/∂z(x)` at one context into a parameter-shaped gradient.
    fn backprop(
        &self,
        grad: &mut [f64],
        ctx: ContextId,
        features: &FeatureSet,
        logit_grad: &[f64],
    ) -> Result<()> {
        match self {
            Model::Tabular(m) => {
                m.row(ctx)?;
                let row = &mut grad[ctx.0 * m.vocab..(ctx.0 + 1) * m.vocab];
                row.iter_mut().zip(logit_grad).for_each(|(g, d)| *g += d);
            }
            Model::Linear(m) => {
                let phi = features.get(ctx)?;
                for (g_row, d) in grad.chunks_exact_mut(m.dim).zip(logit_grad) {
                    g_row.iter_mut().zip(phi).for_each(|(g, f)| *g += d * f);
                }
            }
        }
        Ok(())
    }
}

pub fn model_logits(model: &Model, ctx: ContextId, features: &FeatureSet) -> Result<LogitVector> {
    model.logits(ctx, features)
}

/// Loss value together with its parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn log_softmax_raw(z: &[f64]) -> Vec<f64> {
    let lse = simplex::logsumexp(z);
    z.iter().map(|x| x - lse).collect()
}

/// `(1/M) Σ_x KL(anchor(x) ‖ p(x))`; the logit gradient per context is
/// `(p(x) − anchor(x)) / M`.
pub fn distill_loss_and_grad(
    model: &Model,
    anchor: &AnchorTable,
    contexts: &[ContextId],
    features: &FeatureSet,
) -> Result<LossGrad> {
    if contexts.is_empty() {
        return Err(Error::InvalidInput("no contexts to distill on".into()));
    }
    let scale = 1.0 / contexts.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.params().len()];
    for &ctx in contexts {
        let target = anchor.get(ctx)?;
        let z = model.raw_logits(ctx, features)?;
        check_len(target.len(), z.len())?;
        let log_p = log_softmax_raw(&z);
        let mut logit_grad = Vec::with_capacity(z.len());
        for (&q, &lp) in target.values().iter().zip(&log_p) {
            loss += scale * q * (q.ln() - lp);
            logit_grad.push(scale * (lp.exp() - q));
        }
        model.backprop(&mut grad, ctx, features, &logit_grad)?;
    }
    Ok(LossGrad { loss, grad })
}

/// Mean negative log-likelihood over labelled rows; the logit gradient per
/// row is `(p(x) − onehot(y)) / N`.
pub fn nll_loss_and_grad(
    model: &Model,
    rows: &[(ContextId, usize)],
    features: &FeatureSet,
) -> Result<LossGrad> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let vocab = model.vocab();
    let scale = 1.0 / rows.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.params().len()];
    for &(ctx, label) in rows {
        if label >= vocab {
            return Err(Error::InvalidLabel { label, vocab });
        }
        let log_p = log_softmax_raw(&model.raw_logits(ctx, features)?);
        loss -= scale * log_p[label];
        let mut logit_grad: Vec<f64> = log_p.iter().map(|lp| scale * lp.exp()).collect();
        logit_grad[label] -= scale;
        model.backprop(&mut grad, ctx, features, &logit_grad)?;
    }
    Ok(LossGrad { loss, grad })
}

/// `(λ/M) Σ_x KL(p(x) ‖ r(x))` against a frozen reference.
///
/// With `p = softmax(z)` and `k = KL(p ‖ r)`, the logit gradient at one
/// context is `(λ/M)·p_j·(ln p_j − ln r_j − k)`.
pub fn kl_penalty_loss_and_grad(
    model: &Model,
    reference: &Model,
    contexts: &[ContextId],
    features: &FeatureSet,
    lambda: f64,
) -> Result<LossGrad> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidCoefficient {
            name: "lambda",
            value: lambda,
            reason: "must be finite and nonnegative",
        });
    }
    if contexts.is_empty() {
        return Err(Error::InvalidInput("no contexts for KL penalty".into()));
    }
    check_len(model.vocab(), reference.vocab())?;
    let scale = lambda / contexts.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.params().len()];
    if lambda == 0.0 {
        return Ok(LossGrad { loss, grad });
    }
    for &ctx in contexts {
        let log_p = log_softmax_raw(&model.raw_logits(ctx, features)?);
        let log_r = log_softmax_raw(&reference.raw_logits(ctx, features)?);
        let log_ratio: Vec<f64> = log_p.iter().zip(&log_r).map(|(a, b)| a - b).collect();
        let k: f64 = log_p.iter().zip(&log_ratio).map(|(lp, lr)| lp.exp() * lr).sum();
        loss += scale * k;
        let logit_grad: Vec<f64> = log_p
            .iter()
            .zip(&log_ratio)
            .map(|(lp, lr)| scale * lp.exp() * (lr - k))
            .collect();
        model.backprop(&mut grad, ctx, features, &logit_grad)?;
    }
    Ok(LossGrad { loss, grad })
}

/// `θ ← θ − lr·g`.
pub fn apply_step(model: &mut Model, grad: &[f64], lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::InvalidCoefficient {
            name: "lr",
            value: lr,
            reason: "must be finite and nonnegative",
        });
    }
    check_len(model.params().len(), grad.len())?;
    model
        .params_mut()
        .iter_mut()
        .zip(grad)
        .for_each(|(p, g)| *p -= lr * g);
    Ok(())
}

/// Sets a tabular row to `ln(target)` so the context reproduces `target`.
pub fn set_distribution_exactly(model: &mut Model, ctx: ContextId, target: &ProbVector) -> Result<()> {
    let Model::Tabular(m) = model else {
        return Err(Error::Unsupported("exact projection needs a tabular model"));
    };
    check_len(m.vocab, target.len())?;
    m.row(ctx)?;
    let vocab = m.vocab;
    m.logits[ctx.0 * vocab..(ctx.0 + 1) * vocab].copy_from_slice(&target.ln());
    Ok(())
}

const MODEL_MAGIC: &str = "anchorlab-model v1";

/// Text serialization: a header line `anchorlab-model v1 <family> <V> <d-or-M>`
/// followed by one line per parameter row, 17 significant digits, LF endings.
/// Linear models write the `V` rows of `W`; tabular models write one logit
/// row per context.
pub fn write_model(model: &Model) -> String {
    let (rows, width, extent) = match model {
        Model::Tabular(m) => (m.contexts(), m.vocab, m.contexts()),
        Model::Linear(m) => (m.vocab, m.dim, m.dim),
    };
    let mut out = format!("{MODEL_MAGIC} {} {} {}\n", model.family(), model.vocab(), extent);
    for row in model.params().chunks_exact(width).take(rows) {
        let line: Vec<String> = row.iter().map(|x| format!("{x:.16e}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn read_model(text: &str) -> Result<Model> {
    let bad = |line: usize, message: String| Error::Config { line, message };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
    let rest = header
        .strip_prefix(MODEL_MAGIC)
        .ok_or_else(|| bad(1, format!("expected header starting with `{MODEL_MAGIC}`")))?;
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let [family, vocab, extent] = fields[..] else {
        return Err(bad(1, "header needs <family> <V> <d-or-M>".into()));
    };
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| bad(1, format!("bad dimension `{s}`: {e}")))
    };
    let (vocab, extent) = (parse_dim(vocab)?, parse_dim(extent)?);
    let mut params = Vec::new();
    let mut row_count = 0;
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        row_count += 1;
        for tok in line.split_whitespace() {
            params.push(
                tok.parse::<f64>()
                    .map_err(|e| bad(i + 2, format!("bad number `{tok}`: {e}")))?,
            );
        }
    }
    match family {
        "tabular" => {
            if row_count != extent || params.len() != extent * vocab {
                return Err(bad(1, format!("expected {extent} rows of {vocab} values")));
            }
            let rows = params.chunks_exact(vocab).map(<[f64]>::to_vec).collect();
            Ok(TabularModel::from_rows(rows)?.into())
        }
        "linear" => {
            if row_count != vocab {
                return Err(bad(1, format!("expected {vocab} rows of {extent} values")));
            }
            Ok(LinearSoftmaxModel::from_weights(vocab, extent, params)?.into())
        }
        other => Err(bad(1, format!("unknown model family `{other}`"))),
    }
}
