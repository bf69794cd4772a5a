//! Training loop for the six method instantiations.
//!
//! | method           | λ   | B_CE source          | B_KD source        | examples/step |
//! |------------------|-----|----------------------|--------------------|---------------|
//! | iid_baseline     | 0   | uniform              | none               | b             |
//! | softmax_kd       | > 0 | uniform              | = B_CE             | b             |
//! | i_acid           | 0   | easy-ref selection   | none               | b             |
//! | h_acid           | 0   | learnability sel.    | none               | b             |
//! | aced_iidistill   | > 0 | learnability sel.    | independent uniform| 2b            |
//! | aced_acidistill  | > 0 | learnability sel.    | = B_CE             | b             |
//!
//! Every step draws a super-batch of `B` examples from a per-epoch shuffled
//! order; uniform draws and selections are both taken from it.

mod optimizer;
mod schedule;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::curation::{joint_batch_select, Scoring, SelectionConfig};
use crate::data::{evaluate_retrieval, Dataset, RetrievalMetrics};
use crate::error::{ensure, Error, Result};
use crate::model::{save_checkpoint, ModelParams, ModelShape, PairBatch};
use crate::numerics::{mean, sample_std, streams, RngStream};
use crate::objectives::{gradient, ContrastiveKind, KdConfig, KdWeights, LossBreakdown, LossSpec};

pub use optimizer::{global_norm, optimizer_step, OptimizerConfig, OptimizerState, UpdateStats};
pub use schedule::{learning_rate, ScheduleConfig, ScheduleKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    IidBaseline,
    SoftmaxKd,
    IAcid,
    HAcid,
    AcedIidistill,
    AcedAcidistill,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::IidBaseline,
        Method::SoftmaxKd,
        Method::IAcid,
        Method::HAcid,
        Method::AcedIidistill,
        Method::AcedAcidistill,
    ];

    /// Scoring rule used to select `B_CE`, or `None` for uniform sampling.
    pub fn scoring(self) -> Option<Scoring> {
        match self {
            Method::IidBaseline | Method::SoftmaxKd => None,
            Method::IAcid => Some(Scoring::EasyRef),
            Method::HAcid | Method::AcedIidistill | Method::AcedAcidistill => Some(Scoring::Learnability),
        }
    }

    pub fn uses_kd(self) -> bool {
        matches!(
            self,
            Method::SoftmaxKd | Method::AcedIidistill | Method::AcedAcidistill
        )
    }

    pub fn ce_source(self) -> BatchSource {
        match self.scoring() {
            None => BatchSource::Iid,
            Some(Scoring::EasyRef) => BatchSource::EasyRefSelection,
            Some(Scoring::Learnability) => BatchSource::LearnabilitySelection,
        }
    }

    pub fn kd_source(self) -> Option<KdSource> {
        match self {
            Method::SoftmaxKd | Method::AcedAcidistill => Some(KdSource::SameAsCe),
            Method::AcedIidistill => Some(KdSource::IndependentIid),
            _ => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::IidBaseline => "iid_baseline",
            Method::SoftmaxKd => "softmax_kd",
            Method::IAcid => "i_acid",
            Method::HAcid => "h_acid",
            Method::AcedIidistill => "aced_iidistill",
            Method::AcedAcidistill => "aced_acidistill",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSource {
    Iid,
    EasyRefSelection,
    LearnabilitySelection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdSource {
    SameAsCe,
    IndependentIid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub method: Method,
    pub lambda: f64,
    pub contrastive_kind: ContrastiveKind,
    pub total_samples: usize,
    pub batch_size: usize,
    pub selection: SelectionConfig,
    #[serde(default)]
    pub kd: KdWeights,
}

impl MethodConfig {
    /// Table defaults: `λ = 1` for distilling methods, `0` otherwise; at most 16 chunks.
    pub fn preset(
        method: Method,
        batch_size: usize,
        super_batch_size: usize,
        total_samples: usize,
        kind: ContrastiveKind,
    ) -> Self {
        let chunks = (1..=16).rev().find(|n| batch_size.is_multiple_of(*n)).unwrap_or(1);
        Self {
            method,
            lambda: if method.uses_kd() { 1.0 } else { 0.0 },
            contrastive_kind: kind,
            total_samples,
            batch_size,
            selection: SelectionConfig {
                super_batch_size,
                mini_batch_size: batch_size,
                chunks,
                temperature: 10.0,
                scoring: method.scoring().unwrap_or(Scoring::Learnability),
                loss_kind: kind,
            },
            kd: KdWeights::default(),
        }
    }

    /// Checks the method's λ rule and that the selection settings agree with the method.
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lambda.is_finite(), "lambda must be finite");
        if self.method.uses_kd() {
            ensure!(self.lambda > 0.0, "{} requires lambda > 0, got {}", self.method, self.lambda);
            self.kd.validate()?;
        } else {
            ensure!(self.lambda == 0.0, "{} requires lambda = 0, got {}", self.method, self.lambda);
        }
        ensure!(self.batch_size >= 1, "batch_size must be positive");
        ensure!(
            self.total_samples >= self.batch_size,
            "total_samples {} is below one batch of {}",
            self.total_samples,
            self.batch_size
        );
        self.selection.validate()?;
        ensure!(
            self.selection.mini_batch_size == self.batch_size,
            "selection.mini_batch_size {} differs from batch_size {}",
            self.selection.mini_batch_size,
            self.batch_size
        );
        ensure!(
            self.selection.loss_kind == self.contrastive_kind,
            "selection scores with {} loss but training uses {}",
            self.selection.loss_kind,
            self.contrastive_kind
        );
        if let Some(scoring) = self.method.scoring() {
            ensure!(
                self.selection.scoring == scoring,
                "{} selects with {scoring} scoring, config says {}",
                self.method,
                self.selection.scoring
            );
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.total_samples / self.batch_size
    }

    /// Examples entering the loss per step.
    pub fn effective_batch_size(&self) -> usize {
        match self.method.kd_source() {
            Some(KdSource::IndependentIid) => 2 * self.batch_size,
            _ => self.batch_size,
        }
    }
}

/// Frozen models a step may consult.
#[derive(Clone, Copy, Debug, Default)]
pub struct FrozenModels<'a> {
    pub reference: Option<&'a ModelParams>,
    pub teachers: &'a [ModelParams],
}

/// What one step consumed, for checking data flow against the method table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: u64,
    pub lambda: f64,
    pub ce_source: BatchSource,
    pub kd_source: Option<KdSource>,
    pub ce_indices: Vec<usize>,
    pub kd_indices: Option<Vec<usize>>,
    pub effective_batch_size: usize,
}

impl StepTrace {
    /// `|B_CE ∩ B_KD| / b`, or `None` without a distillation batch.
    pub fn overlap_fraction(&self) -> Option<f64> {
        let kd = self.kd_indices.as_ref()?;
        let shared = self.ce_indices.iter().filter(|i| kd.contains(i)).count();
        Some(shared as f64 / self.ce_indices.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    pub trace: StepTrace,
    /// Scores of the selected examples at the time of selection; empty for uniform draws.
    pub selected_scores: Vec<f64>,
    pub update: UpdateStats,
}

fn uniform_draw(population: usize, amount: usize, rng: RngStream) -> Vec<usize> {
    index::sample(&mut rng.generator(), population, amount).into_vec()
}

/// One optimizer update. `rng` must be unique to the step; sub-streams 0, 1
/// and 2 drive selection, the uniform `B_CE` draw and the independent `B_KD`
/// draw respectively.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    config: &MethodConfig,
    student: &mut ModelParams,
    frozen: &FrozenModels<'_>,
    super_batch: &PairBatch,
    rng: RngStream,
    state: &mut OptimizerState,
    lr: f64,
    optimizer: &OptimizerConfig,
) -> Result<StepOutcome> {
    let method = config.method;
    let b = config.batch_size;
    ensure!(
        b <= super_batch.len(),
        "batch of {b} cannot be drawn from a super-batch of {}",
        super_batch.len()
    );
    ensure!(
        config.lambda == 0.0 || method.uses_kd(),
        "{method} does not distill but lambda = {}",
        config.lambda
    );
    if method.scoring().is_some() && frozen.reference.is_none() {
        return Err(Error::invalid(format!("{method} requires a reference model")));
    }
    if config.lambda > 0.0 && frozen.teachers.is_empty() {
        return Err(Error::invalid(format!("{method} with lambda > 0 requires teachers")));
    }

    let (ce_indices, selected_scores) = match method.scoring() {
        Some(scoring) => {
            let selection = SelectionConfig {
                super_batch_size: super_batch.len(),
                mini_batch_size: b,
                scoring,
                loss_kind: config.contrastive_kind,
                ..config.selection.clone()
            };
            let mut g = rng.derive(0).generator();
            let picked = joint_batch_select(super_batch, &selection, Some(student), frozen.reference, &mut g)?;
            (picked.indices(), picked.scores())
        }
        None => (uniform_draw(super_batch.len(), b, rng.derive(1)), Vec::new()),
    };
    let kd_indices = match method.kd_source() {
        Some(KdSource::SameAsCe) => Some(ce_indices.clone()),
        Some(KdSource::IndependentIid) => Some(uniform_draw(super_batch.len(), b, rng.derive(2))),
        None => None,
    };

    let batch_ce = super_batch.select(&ce_indices)?;
    let batch_kd = match &kd_indices {
        Some(idx) if *idx != ce_indices => super_batch.select(idx)?,
        _ => batch_ce.clone(),
    };
    let spec = LossSpec {
        batch_ce: &batch_ce,
        batch_kd: &batch_kd,
        kd: KdConfig::new(config.kd, frozen.teachers),
        kind: config.contrastive_kind,
        lambda: config.lambda,
    };
    let (loss, grads) = gradient(student, &spec)?;
    let update = optimizer_step(student, &grads, state, lr, optimizer)?;
    let effective_batch_size = match method.kd_source() {
        Some(KdSource::IndependentIid) => 2 * b,
        _ => b,
    };
    Ok(StepOutcome {
        loss,
        trace: StepTrace {
            step: state.step,
            lambda: config.lambda,
            ce_source: method.ce_source(),
            kd_source: method.kd_source(),
            ce_indices,
            kd_indices,
            effective_batch_size,
        },
        selected_scores,
        update,
    })
}

/// Endless sequence of super-batches drawn from per-epoch shuffles of `0..n`.
pub struct SuperBatchStream {
    population: usize,
    size: usize,
    order: Vec<usize>,
    position: usize,
    epoch: u64,
    rng: RngStream,
}

impl SuperBatchStream {
    pub fn new(population: usize, size: usize, rng: RngStream) -> Result<Self> {
        ensure!(
            size >= 1 && size <= population,
            "super-batch of {size} cannot be drawn from {population} examples"
        );
        let mut stream = Self {
            population,
            size,
            order: Vec::new(),
            position: 0,
            epoch: 0,
            rng,
        };
        stream.reshuffle();
        Ok(stream)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.population).collect();
        self.order.shuffle(&mut self.rng.derive(self.epoch).generator());
        self.epoch += 1;
        self.position = 0;
    }

    /// Next `size` indices; a batch never straddles two epochs.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.position + self.size > self.population {
            self.reshuffle();
        }
        let out = self.order[self.position..self.position + self.size].to_vec();
        self.position += self.size;
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelShape,
    pub method: MethodConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Evaluate every `round(fraction · steps)` steps and after the last step.
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
}

fn default_eval_fraction() -> f64 {
    0.1
}

impl TrainConfig {
    /// Schedule with `total_steps` filled in from the method budget.
    pub fn resolved_schedule(&self) -> Result<ScheduleConfig> {
        let steps = self.method.steps();
        let mut s = self.schedule.clone();
        if s.total_steps == 0 {
            s.total_steps = steps;
        }
        ensure!(
            s.total_steps == steps,
            "schedule.total_steps {} disagrees with total_samples/batch_size = {steps}",
            s.total_steps
        );
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        self.optimizer.validate()?;
        self.resolved_schedule()?;
        ensure!(
            (0.0..=1.0).contains(&self.eval_fraction),
            "eval_fraction must lie in [0, 1]"
        );
        Ok(())
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_contrastive: f64,
    pub loss_kd: f64,
    pub score_mean: Option<f64>,
    pub score_std: Option<f64>,
    pub selected_overlap_fraction: Option<f64>,
    pub eval: Option<RetrievalMetrics>,
}

pub const METRICS_HEADER: &str = "step,lr,loss_total,loss_contrastive,loss_kd,score_mean,score_std,selected_overlap_fraction,recall_at_1_i2t,recall_at_1_t2i,zero_shot_accuracy";

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.lr,
            r.loss_total,
            r.loss_contrastive,
            r.loss_kd,
            cell(r.score_mean),
            cell(r.score_std),
            cell(r.selected_overlap_fraction),
            cell(r.eval.map(|e| e.recall_at_1_i2t)),
            cell(r.eval.map(|e| e.recall_at_1_t2i)),
            cell(r.eval.map(|e| e.zero_shot_accuracy)),
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<MetricsRow>,
    pub traces: Vec<StepTrace>,
    pub final_eval: Option<RetrievalMetrics>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Trains a freshly initialized student for `total_samples / batch_size`
/// steps. With `output`, writes `metrics.csv` and the final checkpoint there.
pub fn train_run(
    config: &TrainConfig,
    train: &Dataset,
    eval: Option<&Dataset>,
    frozen: &FrozenModels<'_>,
    output: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let method = &config.method;
    let schedule = config.resolved_schedule()?;
    let steps = schedule.total_steps;
    let mut student = ModelParams::init(
        &config.model,
        method.contrastive_kind,
        RngStream::with_stream(config.seed, streams::INIT),
    )?;
    let mut state = OptimizerState::new(&student);
    let sampling = RngStream::with_stream(config.seed, streams::SAMPLING);
    let mut batches = SuperBatchStream::new(
        train.len(),
        method.selection.super_batch_size,
        sampling.derive(0),
    )?;
    let eval_every = ((steps as f64 * config.eval_fraction).round() as usize).max(1);

    let mut history = Vec::with_capacity(steps);
    let mut traces = Vec::with_capacity(steps);
    let mut final_eval = None;
    for step in 1..=steps {
        let lr = learning_rate(&schedule, step)?;
        let super_batch = train.select(&batches.next_indices())?;
        let outcome = train_step(
            method,
            &mut student,
            frozen,
            &super_batch,
            sampling.derive(1).derive(step as u64),
            &mut state,
            lr,
            &config.optimizer,
        )?;
        let due = (config.eval_fraction > 0.0 && step % eval_every == 0) || step == steps;
        let metrics = match eval {
            Some(set) if due => Some(evaluate_retrieval(&student, set)?),
            _ => None,
        };
        if metrics.is_some() {
            final_eval = metrics;
        }
        let scores = &outcome.selected_scores;
        history.push(MetricsRow {
            step: step as u64,
            lr,
            loss_total: outcome.loss.total,
            loss_contrastive: outcome.loss.component("contrastive"),
            loss_kd: outcome.loss.component("kd"),
            score_mean: (!scores.is_empty()).then(|| mean(scores)),
            score_std: (scores.len() >= 2).then(|| sample_std(scores)),
            selected_overlap_fraction: outcome.trace.overlap_fraction(),
            eval: metrics,
        });
        traces.push(outcome.trace);
    }

    if let Some(dir) = output {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        fs::write(&path, metrics_csv(&history)).map_err(|e| Error::io(&path, e))?;
        save_checkpoint(&student, &dir.join(CHECKPOINT_DIR))?;
    }
    Ok(TrainOutcome {
        params: student,
        history,
        traces,
        final_eval,
    })
}
