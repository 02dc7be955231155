//! Adam with a plateau learning-rate schedule, the staged regularizer
//! warm-up, and the reconstruction loop.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::{EpsilonRule, RunConfig};
use crate::error::{Error, Result};
use crate::forward::{data_consistency, DataContext, Geometry, KSpaceDataset, ReconstructionModel, WeightSpec};
use crate::regularize::{total_objective, ObjectiveBatch, RegWeights};
use crate::sampler::{draw_batch, BatchSpec, SamplingGeometry};

/// RNG stream for model initialization.
pub const INIT_STREAM: u64 = 0;
/// RNG stream for batch sampling.
pub const SAMPLING_STREAM: u64 = 1;

/// Seeded generator on a given stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Adam moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Reason an update was refused.
#[derive(Clone, Debug, PartialEq)]
pub enum StepIssue {
    NonFiniteGradient { index: usize },
    LengthMismatch { params: usize, grads: usize },
}

impl AdamState {
    pub fn new(n: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// Restores moments and step count, e.g. from a checkpoint.
    pub fn set_moments(&mut self, m: Vec<f64>, v: Vec<f64>, step: u64) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.m = m;
        self.v = v;
        self.step = step;
    }

    /// One bias-corrected update with decoupled weight decay. A non-finite
    /// gradient leaves parameters and state untouched.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> std::result::Result<(), StepIssue> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(StepIssue::LengthMismatch {
                params: params.len(),
                grads: grads.len(),
            });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(StepIssue::NonFiniteGradient { index });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            if self.weight_decay > 0.0 {
                params[i] -= self.lr * self.weight_decay * params[i];
            }
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Plateau schedule settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub patience: usize,
    pub factor: f64,
    /// Relative improvement of the EMA that counts as progress.
    pub threshold: f64,
    pub ema_decay: f64,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            patience: 200,
            factor: 0.5,
            threshold: 1e-3,
            ema_decay: 0.99,
            min_lr: 1e-8,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.patience == 0 {
            return Err("scheduler patience must be at least 1".into());
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(format!("scheduler factor must lie in (0, 1), got {}", self.factor));
        }
        if !(0.0..1.0).contains(&self.ema_decay) || !(self.threshold >= 0.0) || !(self.min_lr > 0.0) {
            return Err("invalid scheduler constants".into());
        }
        Ok(())
    }
}

/// Reduce-on-plateau schedule driven by an EMA of the data loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    config: SchedulerConfig,
    ema: Option<f64>,
    best: f64,
    stagnant: usize,
    reductions: usize,
}

impl PlateauScheduler {
    pub fn new(config: SchedulerConfig) -> Self {
        Self {
            config,
            ema: None,
            best: f64::INFINITY,
            stagnant: 0,
            reductions: 0,
        }
    }

    pub fn reductions(&self) -> usize {
        self.reductions
    }

    pub fn ema(&self) -> Option<f64> {
        self.ema
    }

    /// Records a data-loss value and returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        let ema = match self.ema {
            None => {
                self.ema = Some(loss);
                self.best = loss;
                return lr;
            }
            Some(e) => self.config.ema_decay * e + (1.0 - self.config.ema_decay) * loss,
        };
        self.ema = Some(ema);
        if ema < self.best * (1.0 - self.config.threshold) {
            self.best = ema;
            self.stagnant = 0;
            return lr;
        }
        self.stagnant += 1;
        if self.stagnant >= self.config.patience {
            self.stagnant = 0;
            let next = (lr * self.config.factor).max(self.config.min_lr);
            if next < lr {
                self.reductions += 1;
            }
            return next;
        }
        lr
    }
}

/// Warm-up settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    pub enabled: bool,
    /// Total iteration budget across all stages.
    pub budget: usize,
    /// Iterations per ladder rung.
    pub segment: usize,
    pub lambda_min: f64,
    /// Ratio between consecutive rungs.
    pub ladder_factor: f64,
    pub max_rungs: usize,
    /// Relative rise of the data-loss EMA over a segment that counts as a stall.
    pub stall_threshold: f64,
    /// Multiplier applied to the last stable rung.
    pub select_factor: f64,
    pub ema_decay: f64,
    /// Regularizers to calibrate, in order; the others keep weight zero.
    pub stages: Vec<Stage>,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            budget: 500,
            segment: 10,
            lambda_min: 1e-5,
            ladder_factor: 2.0,
            max_rungs: 16,
            stall_threshold: 0.05,
            select_factor: 0.5,
            ema_decay: 0.9,
            stages: Stage::ORDER.to_vec(),
        }
    }
}

impl WarmupConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.segment == 0 || self.max_rungs == 0 {
            return Err("warm-up segment and rung count must be positive".into());
        }
        if !(self.lambda_min > 0.0 && self.ladder_factor > 1.0 && self.select_factor > 0.0) {
            return Err("warm-up ladder constants must be positive with factor > 1".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) || !(self.stall_threshold >= 0.0) {
            return Err("invalid warm-up constants".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if self.stages[..i].contains(s) {
                return Err(format!("warm-up stage {s:?} listed twice"));
            }
        }
        Ok(())
    }
}

/// The regularizers in warm-up order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TvT,
    TvX,
    Coil,
}

impl Stage {
    pub const ORDER: [Stage; 3] = [Stage::TvT, Stage::TvX, Stage::Coil];

    fn set(self, w: &mut RegWeights, value: f64) {
        match self {
            Stage::TvT => w.lambda_tv_t = value,
            Stage::TvX => w.lambda_tv_x = value,
            Stage::Coil => w.lambda_coil = value,
        }
    }
}

/// What the warm-up decided for one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub lambda: f64,
    pub rungs_tried: usize,
    pub stalled: bool,
    pub iterations: usize,
}

/// Result of the warm-up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupOutcome {
    pub weights: RegWeights,
    pub iterations: usize,
    pub stages: Vec<StageReport>,
}

/// Something that can take optimization steps and roll them back.
pub trait Trainer {
    type Snapshot;

    /// One iteration under `weights`; returns the data loss.
    fn step(&mut self, weights: RegWeights) -> Result<f64>;
    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, snapshot: Self::Snapshot);
}

/// Enables the regularizers one at a time, climbing a geometric ladder of
/// weights until the data-loss EMA rises by more than the stall threshold
/// over a segment, then keeps a fraction of the last stable weight. A
/// stalled segment is rolled back.
pub fn warmup<T: Trainer>(trainer: &mut T, config: &WarmupConfig) -> Result<WarmupOutcome> {
    config.validate().map_err(Error::Validation)?;
    let mut weights = RegWeights::default();
    let mut used = 0usize;
    let mut ema: Option<f64> = None;
    let mut stages = Vec::new();
    let mut exhausted = false;
    for &stage in &config.stages {
        if exhausted {
            stage.set(&mut weights, config.lambda_min);
            stages.push(StageReport {
                stage,
                lambda: config.lambda_min,
                rungs_tried: 0,
                stalled: false,
                iterations: 0,
            });
            continue;
        }
        let start_used = used;
        let mut stable: Option<f64> = None;
        let mut stalled = false;
        let mut rungs = 0;
        for r in 0..config.max_rungs {
            if used + config.segment > config.budget {
                exhausted = true;
                break;
            }
            let lambda = config.lambda_min * config.ladder_factor.powi(r as i32);
            let mut trial = weights;
            stage.set(&mut trial, lambda);
            let snapshot = trainer.snapshot();
            let ema_before = ema;
            let mut start = ema;
            for _ in 0..config.segment {
                let loss = trainer.step(trial)?;
                used += 1;
                let e = match ema {
                    None => loss,
                    Some(e) => config.ema_decay * e + (1.0 - config.ema_decay) * loss,
                };
                ema = Some(e);
                start.get_or_insert(loss);
            }
            rungs += 1;
            let (s, e) = (start.expect("segment ran"), ema.expect("segment ran"));
            if e > s * (1.0 + config.stall_threshold) {
                trainer.restore(snapshot);
                ema = ema_before;
                stalled = true;
                break;
            }
            stable = Some(lambda);
        }
        let lambda = match stable {
            Some(l) => l * config.select_factor,
            None => {
                if stalled {
                    log::warn!("warm-up {stage:?}: every rung stalled; using the minimum weight");
                }
                config.lambda_min
            }
        };
        stage.set(&mut weights, lambda);
        log::info!("warm-up {stage:?}: lambda = {lambda:e} after {rungs} rungs");
        stages.push(StageReport {
            stage,
            lambda,
            rungs_tried: rungs,
            stalled,
            iterations: used - start_used,
        });
    }
    Ok(WarmupOutcome {
        weights,
        iterations: used,
        stages,
    })
}

/// One row of the loss trace. Regularizer columns are empty when the term
/// was not evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub data: f64,
    pub tv_x: Option<f64>,
    pub tv_t: Option<f64>,
    pub coil: Option<f64>,
    pub lr: f64,
}

/// Per-iteration loss values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub const HEADER: &'static str = "iteration,data,tv_x,tv_t,coil,lr";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:e},{},{},{},{:e}",
                r.iteration,
                r.data,
                opt(r.tv_x),
                opt(r.tv_t),
                opt(r.coil),
                r.lr
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::HEADER) {
            return Err("missing loss-trace header".into());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 6 {
                    return Err(format!("expected 6 fields in {l:?}"));
                }
                Ok(TraceRow {
                    iteration: f[0].parse().map_err(|e| format!("{e}"))?,
                    data: num(f[1])?,
                    tv_x: opt(f[2])?,
                    tv_t: opt(f[3])?,
                    coil: opt(f[4])?,
                    lr: num(f[5])?,
                })
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { rows })
    }
}

/// Live optimization state over one dataset.
pub struct Session<'a> {
    dataset: &'a KSpaceDataset,
    ctx: DataContext,
    sampling: SamplingGeometry,
    batch: BatchSpec,
    model: ReconstructionModel,
    adam: AdamState,
    rng: ChaCha8Rng,
    trace: LossTrace,
    iteration: usize,
    monitor_all: bool,
    bad_gradients: usize,
}

/// Rollback point of a [`Session`].
#[derive(Clone)]
pub struct SessionSnapshot {
    params: Vec<f64>,
    adam: AdamState,
}

/// Consecutive non-finite gradients tolerated before giving up.
const MAX_BAD_GRADIENTS: usize = 10;

impl<'a> Session<'a> {
    /// Starts from an existing model; its geometry must match the dataset.
    pub fn new(dataset: &'a KSpaceDataset, config: &RunConfig, model: ReconstructionModel) -> Result<Self> {
        config.validate_for(dataset)?;
        if *model.geometry() != Geometry::from(dataset) {
            return Err(Error::Validation("model geometry does not match the dataset".into()));
        }
        let epsilon = config.epsilon.resolve(dataset);
        let ctx = DataContext::new(dataset, WeightSpec::new(epsilon)?)?;
        let adam = AdamState::new(model.num_params(), config.lr, config.weight_decay);
        Ok(Self {
            dataset,
            ctx,
            sampling: SamplingGeometry::from(dataset),
            batch: config.batch.clone(),
            model,
            adam,
            rng: stream_rng(config.seed, SAMPLING_STREAM),
            trace: LossTrace::default(),
            iteration: 0,
            monitor_all: config.monitor_all_terms,
            bad_gradients: 0,
        })
    }

    pub fn model(&self) -> &ReconstructionModel {
        &self.model
    }

    pub fn into_parts(self) -> (ReconstructionModel, LossTrace, AdamState) {
        (self.model, self.trace, self.adam)
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn adam_mut(&mut self) -> &mut AdamState {
        &mut self.adam
    }

    pub fn trace(&self) -> &LossTrace {
        &self.trace
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn iterate(&mut self, weights: RegWeights) -> Result<f64> {
        let it = self.iteration;
        let sample = draw_batch(&self.batch, &self.sampling, &mut self.rng)?;
        let grid = sample.grid()?;
        let tape = Tape::new();
        let bound = self.model.bind(&tape);
        let batch = ObjectiveBatch {
            data_coils: &sample.coils,
            data_frames: &sample.data_frames,
            reg_grid: &grid,
            coil_reg_coils: &sample.coils,
        };
        let terms = total_objective(&tape, &bound, &self.model, self.dataset, &self.ctx, &batch, weights, self.monitor_all)?;
        let value = |v| tape.scalar_value(v);
        let row = TraceRow {
            iteration: it,
            data: value(terms.data),
            tv_x: terms.tv_x.map(value),
            tv_t: terms.tv_t.map(value),
            coil: terms.coil.map(value),
            lr: self.adam.lr,
        };
        let total = value(terms.total);
        if !total.is_finite() {
            log::error!("non-finite objective at iteration {it}: {row:?}");
            return Err(Error::Numerical {
                iteration: it,
                message: format!(
                    "objective is {total} (data {}, tv_x {:?}, tv_t {:?}, coil {:?})",
                    row.data, row.tv_x, row.tv_t, row.coil
                ),
            });
        }
        let grads = bound.gradient(&tape, &tape.backward(terms.total)?);
        let mut params = self.model.params();
        match self.adam.update(&mut params, &grads) {
            Ok(()) => {
                self.bad_gradients = 0;
                self.model.set_params(&params)?;
            }
            Err(issue) => {
                self.bad_gradients += 1;
                log::warn!("iteration {it}: update skipped ({issue:?})");
                if self.bad_gradients >= MAX_BAD_GRADIENTS {
                    return Err(Error::Numerical {
                        iteration: it,
                        message: format!("{} consecutive non-finite gradients", self.bad_gradients),
                    });
                }
            }
        }
        self.trace.rows.push(row);
        self.iteration += 1;
        Ok(value(terms.data))
    }
}

impl Trainer for Session<'_> {
    type Snapshot = SessionSnapshot;

    fn step(&mut self, weights: RegWeights) -> Result<f64> {
        self.iterate(weights)
    }

    fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            params: self.model.params(),
            adam: self.adam.clone(),
        }
    }

    /// Rolls back parameters and optimizer state. The trace keeps the rolled
    /// back iterations, which did run.
    fn restore(&mut self, s: SessionSnapshot) {
        self.model.set_params(&s.params).expect("snapshot from this session");
        self.adam = s.adam;
    }
}

/// Everything a reconstruction produces.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub model: ReconstructionModel,
    pub trace: LossTrace,
    pub weights: RegWeights,
    pub warmup: Option<WarmupOutcome>,
    pub adam: AdamState,
    /// Learning-rate reductions by the scheduler.
    pub lr_reductions: usize,
}

/// Progress callback arguments.
pub struct Progress<'s> {
    pub iteration: usize,
    pub model: &'s ReconstructionModel,
    pub adam: &'s AdamState,
}

/// Data-consistency loss over every coil and frame.
pub fn full_data_loss(dataset: &KSpaceDataset, model: &ReconstructionModel, epsilon: EpsilonRule) -> Result<f64> {
    let ctx = DataContext::new(dataset, WeightSpec::new(epsilon.resolve(dataset))?)?;
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let coils: Vec<usize> = (0..dataset.n_coils()).collect();
    let frames: Vec<usize> = (0..dataset.n_frames()).collect();
    let loss = data_consistency(&tape, &bound, model, dataset, &ctx, &coils, &frames)?;
    Ok(tape.scalar_value(loss))
}

/// Randomly initialized model for a dataset.
pub fn initial_model(dataset: &KSpaceDataset, config: &RunConfig) -> Result<ReconstructionModel> {
    config.validate_for(dataset)?;
    let mut rng = stream_rng(config.seed, INIT_STREAM);
    Ok(ReconstructionModel::random(&config.model, Geometry::from(dataset), &mut rng)?)
}

/// Warm-up (if enabled) followed by the main loop, from a fresh model.
pub fn reconstruct(dataset: &KSpaceDataset, config: &RunConfig) -> Result<Reconstruction> {
    let model = initial_model(dataset, config)?;
    reconstruct_from(dataset, config, model, &mut |_| Ok(()))
}

/// Like [`reconstruct`], starting from `model` and calling `checkpoint`
/// every `config.checkpoint_interval()` main-loop iterations and at the end.
pub fn reconstruct_from(
    dataset: &KSpaceDataset,
    config: &RunConfig,
    model: ReconstructionModel,
    checkpoint: &mut dyn FnMut(Progress<'_>) -> Result<()>,
) -> Result<Reconstruction> {
    let mut session = Session::new(dataset, config, model)?;
    let mut weights = config.regularization;
    let mut outcome = None;
    if config.iterations > 0 && config.warmup.enabled {
        let w = warmup(&mut session, &config.warmup)?;
        weights = w.weights;
        outcome = Some(w);
    }
    let mut scheduler = PlateauScheduler::new(config.scheduler);
    let every = config.checkpoint_interval();
    for i in 0..config.iterations {
        let data = session.iterate(weights)?;
        let lr = scheduler.observe(data, session.adam.lr);
        session.adam.lr = lr;
        if (i + 1) % every == 0 || i + 1 == config.iterations {
            checkpoint(Progress {
                iteration: session.iteration,
                model: &session.model,
                adam: &session.adam,
            })?;
        }
    }
    let lr_reductions = scheduler.reductions();
    let (model, trace, adam) = session.into_parts();
    Ok(Reconstruction {
        model,
        trace,
        weights,
        warmup: outcome,
        adam,
        lr_reductions,
    })
}
