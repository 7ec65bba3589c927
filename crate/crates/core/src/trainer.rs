//! Training: one optimizer step per batch, the per-task loop with replay
//! interleaving, task sequences, and the fine-tune / EWC / ER baselines.
//!
//! All four methods run through the same code; [`MethodFlags`] decides which
//! pieces are active.

use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, Tape, Tensor};
use crate::backbone::{BackboneConfig, InputGeometry};
use crate::data::{epoch_batches, Dataset, Sample};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, div_loss, ikd_loss, total_loss, KdGranularity, LossBreakdown, LossWeights, DEFAULT_ALPHA};
use crate::metrics::{accuracy, AccuracyMatrix, ForgettingReport, TaskDifficulty};
use crate::model::{ModelConfig, TamClModel, TaskInfo, Teacher};
use crate::replay::{MemoryBuffer, ReplayConfig};
use crate::rng::{seeded, stream, Rng};

pub const RESULT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Tamcl,
    Finetune,
    Ewc,
    Er,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Tamcl, Method::Finetune, Method::Ewc, Method::Er];

    pub fn name(self) -> &'static str {
        match self {
            Method::Tamcl => "tamcl",
            Method::Finetune => "finetune",
            Method::Ewc => "ewc",
            Method::Er => "er",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config {
                field: "method".into(),
                message: format!("unknown method `{s}`; expected one of tamcl, finetune, ewc, er"),
            })
    }
}

/// Switches that remove one component of the full method.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub disable_ikd: bool,
    pub disable_tab: bool,
    pub disable_replay: bool,
    pub disable_diversity: bool,
}

/// The components a run actually uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodFlags {
    pub use_tab: bool,
    pub accumulate_heads: bool,
    pub distill: bool,
    pub diversity: bool,
    pub replay: bool,
    pub ewc: bool,
}

impl MethodFlags {
    pub fn resolve(method: Method, ablation: &Ablation) -> Self {
        let tamcl = method == Method::Tamcl;
        let use_tab = tamcl && !ablation.disable_tab;
        MethodFlags {
            use_tab,
            accumulate_heads: tamcl,
            distill: tamcl && !ablation.disable_ikd,
            diversity: use_tab && !ablation.disable_diversity,
            replay: matches!(method, Method::Tamcl | Method::Er) && !ablation.disable_replay,
            ewc: method == Method::Ewc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight on the distillation term.
    pub alpha: f64,
    /// `+1` or `−1`; the sign applied to the diversity term.
    pub div_sign: f64,
    pub kd_granularity: KdGranularity,
    pub ewc_weight: f64,
    /// Fraction of a task's training set used for the Fisher estimate.
    pub fisher_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 5,
            batch_size: 4,
            alpha: DEFAULT_ALPHA,
            div_sign: 1.0,
            kd_granularity: KdGranularity::PerPosition,
            ewc_weight: 0.1,
            fisher_fraction: 0.4,
        }
    }
}

/// Everything that determines a run apart from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub method: Method,
    pub model: BackboneConfig,
    pub optimizer: AdamWConfig,
    pub training: TrainingConfig,
    pub replay: ReplayConfig,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            method: Method::Tamcl,
            model: BackboneConfig::default(),
            optimizer: AdamWConfig::default(),
            training: TrainingConfig::default(),
            replay: ReplayConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: field.into(),
                message,
            })
        };
        self.model.validate()?;
        self.replay.validate()?;
        let t = &self.training;
        if t.epochs == 0 {
            return bad("training.epochs", "must be at least 1".into());
        }
        if t.batch_size == 0 {
            return bad("training.batch_size", "must be at least 1".into());
        }
        if t.div_sign != 1.0 && t.div_sign != -1.0 {
            return bad("training.div_sign", format!("{} is neither 1 nor -1", t.div_sign));
        }
        if !(t.alpha >= 0.0 && t.alpha.is_finite()) {
            return bad("training.alpha", format!("{} is not a finite non-negative weight", t.alpha));
        }
        if !(t.ewc_weight >= 0.0 && t.ewc_weight.is_finite()) {
            return bad("training.ewc_weight", format!("{} is not a finite non-negative weight", t.ewc_weight));
        }
        if !(t.fisher_fraction > 0.0 && t.fisher_fraction <= 1.0) {
            return bad("training.fisher_fraction", format!("{} outside (0, 1]", t.fisher_fraction));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.eps > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.weight_decay >= 0.0) {
            return bad("optimizer", format!("invalid hyperparameters {o:?}"));
        }
        Ok(())
    }

    pub fn flags(&self) -> MethodFlags {
        MethodFlags::resolve(self.method, &self.ablation)
    }
}

/// One task in a sequence.
#[derive(Clone, Debug)]
pub struct PlannedTask {
    pub name: String,
    pub train: Dataset,
    pub test: Dataset,
    /// Overrides the configured epoch count.
    pub epochs: Option<usize>,
    /// Overrides the configured distillation weight.
    pub alpha: Option<f64>,
}

impl PlannedTask {
    pub fn new(train: Dataset, test: Dataset) -> Self {
        PlannedTask {
            name: train.spec.name.clone(),
            train,
            test,
            epochs: None,
            alpha: None,
        }
    }

    pub fn info(&self) -> TaskInfo {
        TaskInfo {
            name: self.name.clone(),
            label_count: self.train.spec.label_count,
            dual_image: self.train.spec.dual_image,
        }
    }
}

/// Ordered tasks; the model is evaluated on every seen task after each one.
#[derive(Clone, Debug)]
pub struct ExperimentPlan {
    pub tasks: Vec<PlannedTask>,
}

impl ExperimentPlan {
    pub fn new(tasks: Vec<PlannedTask>) -> Result<Self> {
        let plan = ExperimentPlan { tasks };
        plan.geometry()?;
        Ok(plan)
    }

    /// The input geometry covering every task. Image shapes must agree;
    /// vocabulary and text length take the maximum.
    pub fn geometry(&self) -> Result<InputGeometry> {
        let first = self
            .tasks
            .first()
            .ok_or_else(|| Error::invalid_argument("an experiment needs at least one task"))?;
        let s = &first.train.spec;
        let mut g = InputGeometry {
            image_height: s.image_height,
            image_width: s.image_width,
            channels: s.channels,
            vocab_size: s.vocab_size,
            max_text_len: s.text_len_max,
        };
        let mut names = std::collections::HashSet::new();
        for t in &self.tasks {
            if !names.insert(t.name.as_str()) {
                return Err(Error::invalid_argument(format!("task `{}` appears twice", t.name)));
            }
            for spec in [&t.train.spec, &t.test.spec] {
                if (spec.image_height, spec.image_width, spec.channels) != (g.image_height, g.image_width, g.channels) {
                    return Err(Error::invalid_argument(format!(
                        "task `{}` has {}×{}×{} images, expected {}×{}×{}",
                        t.name, spec.image_height, spec.image_width, spec.channels, g.image_height, g.image_width, g.channels
                    )));
                }
                if spec.label_count != t.train.spec.label_count || spec.dual_image != t.train.spec.dual_image {
                    return Err(Error::invalid_argument(format!(
                        "task `{}`: train and test splits disagree on labels or image count",
                        t.name
                    )));
                }
                g.vocab_size = g.vocab_size.max(spec.vocab_size);
                g.max_text_len = g.max_text_len.max(spec.text_len_max);
            }
        }
        Ok(g)
    }
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Task currently being learned.
    pub task: usize,
    /// Task whose samples and head this step used.
    pub batch_task: usize,
    pub replay: bool,
    pub loss: LossBreakdown,
}

/// Per-step totals for one task, in training order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub task: String,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub replay_steps: usize,
    pub totals: Vec<f64>,
}

/// Diagonal Fisher estimate and anchor values for one finished task.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherState {
    pub task: usize,
    pub entries: Vec<FisherEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FisherEntry {
    pub name: String,
    pub fisher: Tensor,
    pub anchor: Tensor,
}

/// `F_k = mean (∂L_c/∂θ_k)²` over a uniform `fraction` of `dataset`, using
/// the true labels, for every currently trainable parameter.
pub fn fisher_estimate(
    model: &mut TamClModel,
    dataset: &Dataset,
    task: usize,
    fraction: f64,
    rng: &mut Rng,
) -> Result<FisherState> {
    let n = ((fraction * dataset.len() as f64).round() as usize).min(dataset.len());
    if n == 0 {
        return Err(Error::invalid_argument(format!(
            "Fisher sample of {fraction} × {} examples is empty",
            dataset.len()
        )));
    }
    let mut picked = index::sample(rng, dataset.len(), n).into_vec();
    picked.sort_unstable();
    let names = model.trainable_parameters();
    let mut sums: Vec<Vec<f64>> = names
        .iter()
        .map(|name| vec![0.0; model.store().by_name(name).expect("listed").value.len()])
        .collect();
    for i in picked {
        let sample = &dataset.samples[i];
        model.store_mut().zero_grad();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, sample, task)?;
        let target = model.heads()[task].logit_index(sample.label as usize)?;
        let loss = cross_entropy(&mut tape, &[out.logits], &[target])?;
        tape.backward_into(loss, model.store_mut())?;
        for (name, acc) in names.iter().zip(sums.iter_mut()) {
            if let Some(g) = &model.store().by_name(name).expect("listed").grad {
                for (a, x) in acc.iter_mut().zip(g.data()) {
                    *a += x * x;
                }
            }
        }
    }
    model.store_mut().zero_grad();
    let entries = names
        .into_iter()
        .zip(sums)
        .map(|(name, sum)| {
            let p = model.store().by_name(&name).expect("listed");
            FisherEntry {
                fisher: Tensor::new(p.value.shape().to_vec(), sum.into_iter().map(|s| s / n as f64).collect())
                    .expect("same shape"),
                anchor: p.value.clone(),
                name,
            }
        })
        .collect();
    Ok(FisherState { task, entries })
}

/// `Σ_states Σ_k F_k (θ_k − θ*_k)²`, unweighted.
pub fn ewc_penalty(model: &TamClModel, states: &[FisherState]) -> Result<f64> {
    let mut total = 0.0;
    for s in states {
        for e in &s.entries {
            let p = model
                .store()
                .by_name(&e.name)
                .ok_or_else(|| Error::invalid_state(format!("Fisher entry for unknown parameter `{}`", e.name)))?;
            if p.value.shape() != e.anchor.shape() || p.value.shape() != e.fisher.shape() {
                return Err(Error::invalid_state(format!("shape mismatch for `{}`", e.name)));
            }
            total += p
                .value
                .data()
                .iter()
                .zip(e.anchor.data().iter().zip(e.fisher.data()))
                .map(|(v, (a, f))| f * (v - a) * (v - a))
                .sum::<f64>();
        }
    }
    Ok(total)
}

/// Owns the model, optimizer, replay memory and EWC state of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    flags: MethodFlags,
    model: TamClModel,
    optimizer: AdamW,
    buffer: MemoryBuffer,
    fisher: Vec<FisherState>,
    teacher: Option<Teacher>,
    shuffle: Rng,
    fisher_rng: Rng,
    alpha: f64,
    log: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig, geometry: InputGeometry) -> Result<Self> {
        config.validate()?;
        let flags = config.flags();
        let model = TamClModel::new(ModelConfig {
            backbone: config.model.clone(),
            geometry,
            use_tab: flags.use_tab,
            accumulate_heads: flags.accumulate_heads,
            seed: config.seed,
        })?;
        Ok(Trainer {
            optimizer: AdamW::new(config.optimizer.clone()),
            buffer: MemoryBuffer::new(config.replay.clone(), config.seed)?,
            shuffle: seeded(config.seed, stream::SHUFFLE),
            fisher_rng: seeded(config.seed, stream::FISHER),
            alpha: config.training.alpha,
            flags,
            model,
            fisher: Vec::new(),
            teacher: None,
            log: Vec::new(),
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn flags(&self) -> MethodFlags {
        self.flags
    }

    pub fn model(&self) -> &TamClModel {
        &self.model
    }

    /// Direct model access, for experiments that perturb parameters.
    pub fn model_mut(&mut self) -> &mut TamClModel {
        &mut self.model
    }

    pub fn buffer(&self) -> &MemoryBuffer {
        &self.buffer
    }

    pub fn teacher(&self) -> Option<&Teacher> {
        self.teacher.as_ref()
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    pub fn fisher_states(&self) -> &[FisherState] {
        &self.fisher
    }

    /// Every optimizer step taken so far.
    pub fn step_log(&self) -> &[StepRecord] {
        &self.log
    }

    /// Starts a task; the teacher is kept only when distillation is on.
    pub fn begin_task(&mut self, info: TaskInfo, alpha: Option<f64>) -> Result<()> {
        let teacher = self.model.begin_task(info)?;
        self.teacher = if self.flags.distill { teacher } else { None };
        self.alpha = alpha.unwrap_or(self.config.training.alpha);
        Ok(())
    }

    /// One forward, one backward and one optimizer step on `batch`, whose
    /// samples belong to task `task`.
    pub fn train_step(&mut self, batch: &[&Sample], task: usize) -> Result<LossBreakdown> {
        let current = self
            .model
            .current_task()
            .filter(|_| self.model.is_active())
            .ok_or_else(|| Error::invalid_state("no task is training"))?;
        if batch.is_empty() {
            return Err(Error::invalid_argument("empty batch"));
        }
        let info = self
            .model
            .tasks()
            .get(task)
            .ok_or_else(|| Error::invalid_argument(format!("batch for unknown task {task}")))?;
        if let Some(s) = batch.iter().find(|s| s.label as usize >= info.label_count) {
            return Err(Error::invalid_argument(format!(
                "label {} does not belong to task `{}` with {} labels",
                s.label, info.name, info.label_count
            )));
        }

        self.model.store_mut().zero_grad();
        let mut tape = Tape::new();
        let mut logits = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut students = Vec::new();
        for s in batch {
            let out = self.model.forward(&mut tape, s, task)?;
            logits.push(out.logits);
            targets.push(self.model.heads()[task].logit_index(s.label as usize)?);
            students.extend(out.representations);
        }
        let l_ce = cross_entropy(&mut tape, &logits, &targets)?;

        let mut ewc_value = 0.0;
        let l_c = if self.flags.ewc && !self.fisher.is_empty() {
            let mut terms = Vec::new();
            for st in &self.fisher {
                for e in &st.entries {
                    let id = self
                        .model
                        .store()
                        .id(&e.name)
                        .ok_or_else(|| Error::invalid_state(format!("Fisher entry for unknown `{}`", e.name)))?;
                    let x = tape.param(self.model.store(), id);
                    terms.push(tape.weighted_sq_diff(x, &e.anchor, &e.fisher)?);
                }
            }
            let sum = tape.add_n(&terms)?;
            let weighted = tape.scale(sum, self.config.training.ewc_weight);
            ewc_value = tape.value(weighted).item();
            tape.add(l_ce, weighted)?
        } else {
            l_ce
        };

        let l_ikd = match (&self.teacher, self.flags.distill) {
            (Some(teacher), true) => {
                let mut teachers = Vec::with_capacity(students.len());
                for s in batch {
                    teachers.extend(teacher.backbone_forward(s)?);
                }
                Some(ikd_loss(&mut tape, &students, &teachers, self.config.training.kd_granularity)?)
            }
            _ => None,
        };

        let l_div = if self.flags.diversity {
            let token = tape.param(self.model.store(), self.model.tokens()[current].param);
            let previous: Vec<Tensor> = self.model.tokens()[..current]
                .iter()
                .map(|t| self.model.store().value(t.param).clone())
                .collect();
            Some(div_loss(&mut tape, token, &previous)?)
        } else {
            None
        };

        let weights = LossWeights::new(self.model.num_tasks(), self.alpha, self.flags.distill)?
            .with_div_sign(self.config.training.div_sign);
        let (total, mut breakdown) = total_loss(&mut tape, l_c, l_ikd, l_div, &weights)?;
        breakdown.ewc_penalty = ewc_value;
        if !breakdown.total.is_finite() {
            return Err(Error::invalid_state(format!(
                "non-finite loss {breakdown:?} on task {task}; try a smaller learning rate"
            )));
        }
        tape.backward_into(total, self.model.store_mut())?;
        self.optimizer.step(self.model.store_mut())?;
        self.log.push(StepRecord {
            task: current,
            batch_task: task,
            replay: task != current,
            loss: breakdown,
        });
        Ok(breakdown)
    }

    /// Runs `epochs` epochs over `train` for the current task, interleaving
    /// one replay step whenever the schedule fires.
    pub fn train_task(&mut self, train: &Dataset, epochs: usize) -> Result<LossCurve> {
        let current = self
            .model
            .current_task()
            .ok_or_else(|| Error::invalid_state("no task begun"))?;
        if epochs == 0 {
            return Err(Error::invalid_argument("epochs must be at least 1"));
        }
        let batch_size = self.config.training.batch_size;
        let mut curve = LossCurve {
            task: self.model.tasks()[current].name.clone(),
            epochs,
            ..LossCurve::default()
        };
        for epoch in 0..epochs {
            let batches = epoch_batches(train.len(), batch_size, &mut self.shuffle)?;
            curve.steps_per_epoch = batches.len();
            let mut sum = 0.0;
            for (k, idx) in batches.iter().enumerate() {
                let batch: Vec<&Sample> = idx.iter().map(|&i| &train.samples[i]).collect();
                let b = self.train_step(&batch, current)?;
                curve.totals.push(b.total);
                sum += b.total;
                if self.flags.replay && self.buffer.should_replay(k + 1) {
                    if let Some(rb) = self.buffer.get_batch(batch_size) {
                        let refs: Vec<&Sample> = rb.samples.iter().collect();
                        let b = self.train_step(&refs, rb.task)?;
                        debug!("replay step on task {} loss {:.4}", rb.task, b.total);
                        curve.totals.push(b.total);
                        curve.replay_steps += 1;
                    }
                }
            }
            info!(
                "task {} epoch {}/{}: mean loss {:.4}",
                curve.task,
                epoch + 1,
                epochs,
                sum / batches.len() as f64
            );
        }
        Ok(curve)
    }

    /// Closes the current task: Fisher estimate for EWC and sample storage
    /// for replay.
    pub fn end_task(&mut self, train: &Dataset) -> Result<()> {
        let current = self
            .model
            .current_task()
            .ok_or_else(|| Error::invalid_state("no task begun"))?;
        self.model.end_task()?;
        if self.flags.ewc {
            let state = fisher_estimate(
                &mut self.model,
                train,
                current,
                self.config.training.fisher_fraction,
                &mut self.fisher_rng,
            )?;
            self.fisher.push(state);
        }
        if self.flags.replay {
            self.buffer.store_task_samples(current, train)?;
        }
        self.teacher = None;
        Ok(())
    }

    /// Test accuracy on `dataset` as task `task`.
    pub fn evaluate(&self, dataset: &Dataset, task: usize) -> Result<f64> {
        evaluate(&self.model, dataset, task)
    }
}

/// Accuracy of `model` on `dataset` as task `task`.
pub fn evaluate(model: &TamClModel, dataset: &Dataset, task: usize) -> Result<f64> {
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut labels = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        predictions.push(model.predict(s, task)?);
        labels.push(s.label as usize);
    }
    accuracy(&predictions, &labels)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub name: String,
    pub label_count: usize,
    pub dual_image: bool,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub difficulty: TaskDifficulty,
}

/// Everything a run produced. Serializing the same run twice gives the same
/// bytes; wall-clock time is kept out of it on purpose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub schema_version: u32,
    pub software_version: String,
    pub status: RunStatus,
    pub failure: Option<String>,
    pub config: TrainConfig,
    pub flags: MethodFlags,
    pub tasks: Vec<TaskSummary>,
    pub accuracy: AccuracyMatrix,
    pub forgetting: ForgettingReport,
    pub loss_curves: Vec<LossCurve>,
}

impl ExperimentResult {
    pub fn task_names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.name.clone()).collect()
    }
}

/// A finished or interrupted run together with the trainer that produced it.
pub struct SequenceOutcome {
    pub result: ExperimentResult,
    pub trainer: Trainer,
    pub error: Option<Error>,
}

/// Trains the plan's tasks in order, evaluating every seen task after each
/// one. On failure the rows finished so far are kept and `error` is set.
pub fn run_sequence_partial(plan: &ExperimentPlan, config: &TrainConfig) -> Result<SequenceOutcome> {
    let geometry = plan.geometry()?;
    let mut trainer = Trainer::new(config.clone(), geometry)?;
    let tasks = plan
        .tasks
        .iter()
        .map(|t| {
            Ok(TaskSummary {
                name: t.name.clone(),
                label_count: t.train.spec.label_count,
                dual_image: t.train.spec.dual_image,
                train_pairs: t.train.len(),
                test_pairs: t.test.len(),
                difficulty: TaskDifficulty::new(&t.name, t.train.len() + t.test.len(), t.train.spec.label_count)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut result = ExperimentResult {
        schema_version: RESULT_SCHEMA_VERSION,
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        status: RunStatus::Complete,
        failure: None,
        config: config.clone(),
        flags: trainer.flags(),
        tasks,
        accuracy: AccuracyMatrix::default(),
        forgetting: ForgettingReport::default(),
        loss_curves: Vec::new(),
    };
    let mut error = None;
    for (i, task) in plan.tasks.iter().enumerate() {
        if let Err(e) = run_one(&mut trainer, plan, i, &mut result) {
            let e = e.for_task(&task.name);
            result.status = RunStatus::Failed;
            result.failure = Some(e.to_string());
            error = Some(e);
            break;
        }
    }
    let label_counts: Vec<usize> = result.tasks.iter().map(|t| t.label_count).collect();
    result.forgetting = ForgettingReport::from_matrix(&result.accuracy, &label_counts)?;
    Ok(SequenceOutcome { result, trainer, error })
}

fn run_one(trainer: &mut Trainer, plan: &ExperimentPlan, i: usize, result: &mut ExperimentResult) -> Result<()> {
    let task = &plan.tasks[i];
    info!("task {} ({}/{}): {}", task.name, i + 1, plan.tasks.len(), trainer.config().method);
    trainer.begin_task(task.info(), task.alpha)?;
    let epochs = task.epochs.unwrap_or(trainer.config().training.epochs);
    let curve = trainer.train_task(&task.train, epochs)?;
    result.loss_curves.push(curve);
    trainer.end_task(&task.train)?;
    let row = plan.tasks[..=i]
        .iter()
        .enumerate()
        .map(|(j, t)| trainer.evaluate(&t.test, j))
        .collect::<Result<Vec<_>>>()?;
    info!("accuracy after {}: {:?}", task.name, row);
    result.accuracy.push_row(row)
}

/// [`run_sequence_partial`] that turns an interrupted run into an error.
pub fn run_sequence(plan: &ExperimentPlan, config: &TrainConfig) -> Result<ExperimentResult> {
    let outcome = run_sequence_partial(plan, config)?;
    match outcome.error {
        Some(e) => Err(e),
        None => Ok(outcome.result),
    }
}
