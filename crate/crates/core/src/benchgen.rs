//! Seeded two-task forgetting benchmark.
//!
//! A general task and a domain task share one input distribution (standard
//! normal features in `d` dimensions) but are labelled by independently drawn
//! linear teachers. A single linear-softmax model therefore cannot serve both
//! perfectly: fitting the domain moves shared weights and costs general
//! accuracy. General data trains the base model and is otherwise used only
//! for evaluation.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::{FeatureSet, LinearSoftmaxModel, Model};
use crate::rng;
use crate::simplex::argmax;
use crate::trainers::{
    self, Method, Monitor, SummaryRow, TrainConfig, TrajectoryRecord, DEFAULT_SFT_LR,
};
use crate::ContextId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    GeneralTrain,
    GeneralTest,
    DomainTrain,
    DomainTest,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::GeneralTrain,
        Split::GeneralTest,
        Split::DomainTrain,
        Split::DomainTest,
    ];

    fn stream(self) -> u64 {
        match self {
            Split::GeneralTrain => 2,
            Split::GeneralTest => 3,
            Split::DomainTrain => 4,
            Split::DomainTest => 5,
        }
    }

    fn is_general(self) -> bool {
        matches!(self, Split::GeneralTrain | Split::GeneralTest)
    }
}

/// Labelled rows of one split together with their features.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub split: Split,
    pub rows: Vec<(ContextId, usize)>,
    pub features: FeatureSet,
}

impl LabeledDataset {
    pub fn new(split: Split, rows: Vec<(ContextId, usize)>, features: FeatureSet) -> Self {
        Self {
            split,
            rows,
            features,
        }
    }

    pub fn contexts(&self) -> Vec<ContextId> {
        self.rows.iter().map(|(c, _)| *c).collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Sizes and seed of a benchmark; teachers are derived from these.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskParams {
    pub seed: u64,
    pub vocab: usize,
    pub dim: usize,
    pub n_general_train: usize,
    pub n_general_test: usize,
    pub n_domain_train: usize,
    pub n_domain_test: usize,
    /// Teacher models expose logits `teacher / noise_temp`. Labels are the
    /// teacher argmax, so this only changes the teachers' soft predictions.
    pub noise_temp: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            seed: 42,
            vocab: 8,
            dim: 16,
            n_general_train: 512,
            n_general_test: 512,
            n_domain_train: 256,
            n_domain_test: 512,
            noise_temp: 1.0,
        }
    }
}

/// Benchmark definition with its seed-determined teachers.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub params: TaskParams,
    /// `V × d`, row-major.
    pub teacher_general: Vec<f64>,
    pub teacher_domain: Vec<f64>,
}

impl TaskSpec {
    pub fn new(params: TaskParams) -> Result<Self> {
        let counts = [
            params.n_general_train,
            params.n_general_test,
            params.n_domain_train,
            params.n_domain_test,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidInput("every split needs at least one row".into()));
        }
        if params.vocab < 2 || params.dim < 2 {
            return Err(Error::InvalidInput("task needs V >= 2 and d >= 2".into()));
        }
        if !(params.noise_temp > 0.0) || !params.noise_temp.is_finite() {
            return Err(Error::InvalidCoefficient {
                name: "task.noise_temp",
                value: params.noise_temp,
                reason: "must be positive and finite",
            });
        }
        let n = params.vocab * params.dim;
        let draw = |stream| {
            let mut r = rng::derived(params.seed, stream);
            (0..n).map(|_| rng::standard_normal(&mut r)).collect()
        };
        Ok(Self {
            teacher_general: draw(0),
            teacher_domain: draw(1),
            params,
        })
    }

    fn teacher(&self, split: Split) -> &[f64] {
        if split.is_general() {
            &self.teacher_general
        } else {
            &self.teacher_domain
        }
    }

    fn split_size(&self, split: Split) -> usize {
        match split {
            Split::GeneralTrain => self.params.n_general_train,
            Split::GeneralTest => self.params.n_general_test,
            Split::DomainTrain => self.params.n_domain_train,
            Split::DomainTest => self.params.n_domain_test,
        }
    }

    /// Teacher of the general (`general = true`) or domain task as a model.
    pub fn teacher_model(&self, general: bool) -> Model {
        let w = if general {
            &self.teacher_general
        } else {
            &self.teacher_domain
        };
        let scaled = w.iter().map(|x| x / self.params.noise_temp).collect();
        LinearSoftmaxModel::from_weights(self.params.vocab, self.params.dim, scaled)
            .expect("teacher weights are finite")
            .into()
    }
}

/// All four splits of a generated benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub general_train: LabeledDataset,
    pub general_test: LabeledDataset,
    pub domain_train: LabeledDataset,
    pub domain_test: LabeledDataset,
}

impl Task {
    pub fn split(&self, split: Split) -> &LabeledDataset {
        match split {
            Split::GeneralTrain => &self.general_train,
            Split::GeneralTest => &self.general_test,
            Split::DomainTrain => &self.domain_train,
            Split::DomainTest => &self.domain_test,
        }
    }
}

fn generate_split<R: Rng>(spec: &TaskSpec, split: Split, rng: &mut R) -> LabeledDataset {
    let (vocab, dim) = (spec.params.vocab, spec.params.dim);
    let teacher = spec.teacher(split);
    let n = spec.split_size(split);
    let mut feats = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let phi: Vec<f64> = (0..dim).map(|_| rng::standard_normal(rng)).collect();
        let logits: Vec<f64> = teacher
            .chunks_exact(dim)
            .map(|w| w.iter().zip(&phi).map(|(a, b)| a * b).sum())
            .collect();
        debug_assert_eq!(logits.len(), vocab);
        rows.push((ContextId(i), argmax(&logits)));
        feats.push(phi);
    }
    let features = FeatureSet::new(dim, feats).expect("normal draws are finite");
    LabeledDataset::new(split, rows, features)
}

/// Draws features (Box-Muller normals, one derived stream per split) and
/// labels them by teacher argmax, ties toward the lowest index.
pub fn generate_task(spec: &TaskSpec) -> Task {
    let gen = |split: Split| generate_split(spec, split, &mut rng::derived(spec.params.seed, split.stream()));
    Task {
        general_train: gen(Split::GeneralTrain),
        general_test: gen(Split::GeneralTest),
        domain_train: gen(Split::DomainTrain),
        domain_test: gen(Split::DomainTest),
    }
}

/// Fraction of rows whose model argmax (ties low) equals the label.
pub fn evaluate_accuracy(model: &Model, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate on an empty dataset".into()));
    }
    let mut hits = 0usize;
    for &(ctx, label) in &data.rows {
        if argmax(&model.raw_logits(ctx, &data.features)?) == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Schedules for the two reference stages of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSpec {
    pub task: TaskSpec,
    pub base_lr: f64,
    pub base_epochs: usize,
    pub sft_lr: f64,
    pub sft_epochs: usize,
}

impl PipelineSpec {
    pub fn new(task: TaskSpec) -> Self {
        Self {
            task,
            base_lr: 0.5,
            base_epochs: 300,
            sft_lr: DEFAULT_SFT_LR,
            sft_epochs: 100,
        }
    }
}

/// Generated data plus the frozen base and SFT reference models.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: PipelineSpec,
    pub task: Task,
    pub base: Model,
    pub sft: Model,
    pub base_domain_acc: f64,
    pub base_general_acc: f64,
}

impl Prepared {
    pub fn monitor(&self) -> Monitor<'_> {
        Monitor {
            base: &self.base,
            sft: Some(&self.sft),
            drift: &self.task.domain_train,
            domain_test: Some(&self.task.domain_test),
            general_test: Some(&self.task.general_test),
        }
    }
}

/// Trains the base model on general data from zero weights, then `p_sft`
/// from the base on domain data by plain SFT.
pub fn prepare(spec: &PipelineSpec) -> Result<Prepared> {
    let task = generate_task(&spec.task);
    let init: Model = LinearSoftmaxModel::zeros(spec.task.params.vocab, spec.task.params.dim).into();
    let base = trainers::fit_nll(init, &task.general_train, spec.base_lr, spec.base_epochs)?;
    let sft = trainers::fit_nll(base.clone(), &task.domain_train, spec.sft_lr, spec.sft_epochs)?;
    Ok(Prepared {
        base_domain_acc: evaluate_accuracy(&base, &task.domain_test)?,
        base_general_acc: evaluate_accuracy(&base, &task.general_test)?,
        spec: spec.clone(),
        task,
        base,
        sft,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub trajectory: TrajectoryRecord,
    pub summary: SummaryRow,
    pub model: Model,
}

/// Runs `cfg.method` from the base model on the domain training split.
pub fn run_method(prepared: &Prepared, cfg: &TrainConfig) -> Result<PipelineOutcome> {
    let monitor = prepared.monitor();
    let data = &prepared.task.domain_train;
    let (model, trajectory) = match &cfg.method {
        Method::Sft | Method::LowSft => trainers::train_sft(prepared.base.clone(), data, cfg, &monitor)?,
        Method::KlSft { .. } => {
            trainers::train_kl_sft(prepared.base.clone(), data, &prepared.base, cfg, &monitor)?
        }
        Method::StaticBarycenter { .. } => trainers::train_static_barycenter(
            prepared.base.clone(),
            &prepared.sft,
            &prepared.base,
            data,
            cfg,
            &monitor,
        )?,
        Method::Anchored(_) => trainers::anchored_learning(&prepared.base, &prepared.sft, data, cfg, &monitor)?,
        Method::ExactRecursion(_) => {
            return Err(Error::Unsupported(
                "exact recursion needs tabular distributions; use the simulate command",
            ))
        }
    };
    let obs = monitor.observe(&model)?;
    let summary = SummaryRow::new(cfg, prepared.spec.task.params.seed, &obs);
    Ok(PipelineOutcome {
        trajectory,
        summary,
        model,
    })
}

pub fn run_pipeline(spec: &PipelineSpec, cfg: &TrainConfig) -> Result<PipelineOutcome> {
    run_method(&prepare(spec)?, cfg)
}

/// Runs every config against shared references; results keep input order.
pub fn sweep(prepared: &Prepared, configs: &[TrainConfig]) -> Vec<Result<PipelineOutcome>> {
    configs.par_iter().map(|cfg| run_method(prepared, cfg)).collect()
}

/// One summary row per `α`, each run on its own derived seed stream.
pub fn sweep_alpha(prepared: &Prepared, base_cfg: &TrainConfig, alphas: &[f64]) -> Result<Vec<SummaryRow>> {
    if alphas.is_empty() {
        return Err(Error::InvalidInput("alpha sweep needs at least one value".into()));
    }
    let Method::Anchored(anchor) = &base_cfg.method else {
        return Err(Error::InvalidInput("alpha sweep needs an anchored config".into()));
    };
    let configs: Vec<TrainConfig> = alphas
        .iter()
        .enumerate()
        .map(|(i, &alpha)| TrainConfig {
            method: Method::Anchored(crate::anchor::AnchorConfig {
                alpha,
                ..anchor.clone()
            }),
            seed: rng::scramble(base_cfg.seed, i as u64),
            ..base_cfg.clone()
        })
        .collect();
    sweep(prepared, &configs)
        .into_iter()
        .map(|r| r.map(|o| o.summary))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TaskSpec {
        TaskSpec::new(TaskParams {
            n_general_train: 64,
            n_general_test: 64,
            n_domain_train: 100,
            n_domain_test: 64,
            ..TaskParams::default()
        })
        .unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small();
        assert_eq!(generate_task(&spec), generate_task(&spec));
        let again = TaskSpec::new(spec.params.clone()).unwrap();
        assert_eq!(again.teacher_general, spec.teacher_general);
        let other = TaskSpec::new(TaskParams {
            seed: 7,
            ..spec.params.clone()
        })
        .unwrap();
        assert_ne!(other.teacher_domain, spec.teacher_domain);
        assert_ne!(spec.teacher_general, spec.teacher_domain);
    }

    #[test]
    fn split_structure() {
        let spec = small();
        let task = generate_task(&spec);
        assert_eq!(task.domain_train.len(), 100);
        for split in Split::ALL {
            let d = task.split(split);
            assert_eq!(d.split, split);
            assert!(d.rows.iter().all(|&(_, y)| y < spec.params.vocab));
            assert_eq!(d.features.len(), d.len());
        }
    }

    #[test]
    fn teacher_scores_perfectly() {
        let spec = small();
        let task = generate_task(&spec);
        let general = spec.teacher_model(true);
        let domain = spec.teacher_model(false);
        assert_eq!(evaluate_accuracy(&general, &task.general_test).unwrap(), 1.0);
        assert_eq!(evaluate_accuracy(&general, &task.general_train).unwrap(), 1.0);
        assert_eq!(evaluate_accuracy(&domain, &task.domain_test).unwrap(), 1.0);
    }

    #[test]
    fn uniform_model_guesses_label_zero() {
        // All-zero logits tie everywhere, so the prediction is always label 0;
        // averaged over teacher draws that is the 1/V random-guess rate.
        let mut accs = Vec::new();
        for seed in 0..20 {
            let spec = TaskSpec::new(TaskParams {
                seed,
                vocab: 4,
                n_domain_test: 2000,
                ..TaskParams::default()
            })
            .unwrap();
            let task = generate_task(&spec);
            let uniform: Model = LinearSoftmaxModel::zeros(4, spec.params.dim).into();
            let acc = evaluate_accuracy(&uniform, &task.domain_test).unwrap();
            let freq0 = task.domain_test.rows.iter().filter(|r| r.1 == 0).count() as f64
                / task.domain_test.len() as f64;
            assert_eq!(acc, freq0);
            accs.push(acc);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.25).abs() <= 0.05, "{mean}");
    }

    #[test]
    fn empty_dataset_rejected() {
        let data = LabeledDataset::new(Split::DomainTest, vec![], FeatureSet::empty());
        let model: Model = LinearSoftmaxModel::zeros(2, 2).into();
        assert!(matches!(evaluate_accuracy(&model, &data), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = TaskParams {
            n_domain_train: 0,
            ..TaskParams::default()
        };
        assert!(TaskSpec::new(bad).is_err());
        let bad = TaskParams {
            vocab: 1,
            ..TaskParams::default()
        };
        assert!(TaskSpec::new(bad).is_err());
    }
}
