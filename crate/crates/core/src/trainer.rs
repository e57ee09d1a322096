//! Object-incremental training loop: per-step data restriction, joint
//! discriminator and reconstructor updates, basis capture, evaluation and
//! run-directory persistence.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_synth::{self, Label, ObjectData, ObjectSpec, Sample, SplitCounts, StepPlan};
use crate::error::{Error, Result};
use crate::eval::{self, Level, ScoreMatrix, StepEvaluation};
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::model::{feature_jitter, ModelConfig, ModelState};
use crate::optimizer::{self, ChannelProjector, RetainMode, SemanticBasis, UpdateConfig};
use crate::persist;
use crate::seed::{self, stream};
use crate::tape::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Oasa,
    Scl,
    Us,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Oasa, Component::Scl, Component::Us];

    pub fn name(self) -> &'static str {
        match self {
            Component::Oasa => "oasa",
            Component::Scl => "scl",
            Component::Us => "us",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "oasa" => Ok(Component::Oasa),
            "scl" => Ok(Component::Scl),
            "us" => Ok(Component::Us),
            other => Err(Error::config(
                "ablate",
                format!("unknown ablation `{other}` (expected oasa, scl or us)"),
            )),
        }
    }
}

/// Which method components are switched off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub oasa: bool,
    pub scl: bool,
    pub us: bool,
}

impl Ablation {
    pub fn is_off(&self, c: Component) -> bool {
        match c {
            Component::Oasa => self.oasa,
            Component::Scl => self.scl,
            Component::Us => self.us,
        }
    }

    pub fn names(&self) -> Vec<String> {
        Component::ALL
            .iter()
            .filter(|&&c| self.is_off(c))
            .map(|c| c.name().to_string())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic {
        /// Defaults to the number of objects the protocol covers.
        objects: Option<usize>,
        counts: SplitCounts,
    },
    Mvtec {
        root: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub protocol: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossWeights,
    pub update: UpdateConfig,
    pub ablation: Ablation,
    pub data: DataSource,
    pub model: ModelConfig,
    /// Input-feature noise during training, relative to the target RMS.
    pub jitter: f32,
    pub heatmaps: bool,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            protocol: "5-1".into(),
            seed: 0,
            epochs: 30,
            batch_size: 8,
            loss: LossWeights::default(),
            update: UpdateConfig::default(),
            ablation: Ablation::default(),
            data: DataSource::Synthetic {
                objects: None,
                counts: SplitCounts::default(),
            },
            model: ModelConfig::default(),
            jitter: 0.0,
            heatmaps: true,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("run.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("run.batch_size", "must be at least 1"));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::config(
                "train.jitter",
                "must be a non-negative number",
            ));
        }
        for (key, v) in [
            ("loss.lambda0", self.loss.lambda0),
            ("loss.lambda1", self.loss.lambda1),
            ("loss.lambda2", self.loss.lambda2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "loss weights must be non-negative"));
            }
        }
        if !(self.loss.scl_keep_ratio >= 0.0 && self.loss.scl_keep_ratio < 1.0) {
            return Err(Error::config("loss.scl_keep_ratio", "must lie in [0, 1)"));
        }
        self.update.validate()?;
        self.model.validate()?;
        data_synth::protocol_step_sizes(&self.protocol)?;
        Ok(())
    }

    fn gated(&self) -> bool {
        !self.ablation.oasa
    }
}

/// Switch one component off. Idempotent.
pub fn ablate(cfg: &RunConfig, which: Component) -> RunConfig {
    let mut out = cfg.clone();
    match which {
        Component::Oasa => out.ablation.oasa = true,
        Component::Scl => {
            out.ablation.scl = true;
            out.loss.lambda2 = 0.0;
        }
        Component::Us => {
            out.ablation.us = true;
            out.update.beta = 0.0;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub objects: Vec<usize>,
    pub final_loss: LossBreakdown,
    pub update_rule: String,
    pub checkpoint: PathBuf,
    pub basis: PathBuf,
    pub wall_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One read of a sample by the run loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Access {
    pub step: usize,
    pub object_id: usize,
    pub split: Split,
    pub label: Label,
}

/// Dataset handle that records every sample handed out.
pub struct LoggedDataset {
    objects: Vec<ObjectData>,
    log: Mutex<Vec<Access>>,
}

impl LoggedDataset {
    pub fn new(objects: Vec<ObjectData>) -> Self {
        Self {
            objects,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    fn object(&self, id: usize) -> Result<&ObjectData> {
        self.objects
            .iter()
            .find(|o| o.object_id == id)
            .ok_or_else(|| Error::Protocol(format!("object {id} is not in the dataset")))
    }

    pub fn name(&self, id: usize) -> Result<String> {
        Ok(self.object(id)?.name.clone())
    }

    /// Normal training samples of `ids`, in id then index order.
    pub fn train_samples(&self, step: usize, ids: &[usize]) -> Result<Vec<&Sample>> {
        let mut out = Vec::new();
        let mut log = self.log.lock().expect("access log poisoned");
        for &id in ids {
            for s in &self.object(id)?.train {
                if s.label != Label::Normal {
                    continue;
                }
                log.push(Access {
                    step,
                    object_id: id,
                    split: Split::Train,
                    label: s.label,
                });
                out.push(s);
            }
        }
        Ok(out)
    }

    /// Objects `ids` for evaluation; logs their test samples.
    pub fn test_objects(&self, step: usize, ids: &[usize]) -> Result<Vec<&ObjectData>> {
        let mut log = self.log.lock().expect("access log poisoned");
        ids.iter()
            .map(|&id| {
                let obj = self.object(id)?;
                for s in &obj.test {
                    log.push(Access {
                        step,
                        object_id: id,
                        split: Split::Test,
                        label: s.label,
                    });
                }
                Ok(obj)
            })
            .collect()
    }

    pub fn accesses(&self) -> Vec<Access> {
        self.log.lock().expect("access log poisoned").clone()
    }
}

/// Build the dataset a config refers to and the step plan over it.
pub fn load_data(cfg: &RunConfig) -> Result<(Vec<ObjectData>, StepPlan)> {
    let sizes = data_synth::protocol_step_sizes(&cfg.protocol)?;
    let covered: usize = sizes.iter().sum();
    let objects = match &cfg.data {
        DataSource::Synthetic { objects, counts } => {
            let n = objects.unwrap_or(covered);
            let master = seed::derive(cfg.seed, stream::DATA);
            (0..n)
                .map(|id| {
                    data_synth::generate_dataset(
                        &ObjectSpec::synthetic(id, master),
                        *counts,
                        cfg.model.image_size,
                    )
                })
                .collect::<Result<Vec<_>>>()?
        }
        DataSource::Mvtec { root } => data_synth::load_mvtec_layout(root, cfg.model.image_size)?,
    };
    let plan = data_synth::parse_protocol(&cfg.protocol, objects.len())?;
    if let Some(id) = plan
        .steps
        .iter()
        .flatten()
        .find(|&&id| id >= cfg.model.n_max)
    {
        return Err(Error::config(
            "model.n_max",
            format!(
                "object id {id} needs at least {} classifier outputs",
                id + 1
            ),
        ));
    }
    Ok((objects, plan))
}

pub fn derived_seeds(seed: u64) -> BTreeMap<String, u64> {
    [
        ("data", stream::DATA),
        ("model_init", stream::MODEL_INIT),
        ("embed", stream::EMBED),
        ("shuffle", stream::SHUFFLE),
        ("jitter", stream::JITTER),
    ]
    .into_iter()
    .map(|(k, s)| (k.to_string(), seed::derive(seed, s)))
    .collect()
}

pub fn init_model(cfg: &RunConfig) -> Result<ModelState> {
    ModelState::new(
        cfg.model.clone(),
        seed::derive(cfg.seed, stream::MODEL_INIT),
        seed::derive(cfg.seed, stream::EMBED),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateRule {
    Vanilla,
    Reinforced,
}

impl UpdateRule {
    pub fn name(self) -> &'static str {
        match self {
            UpdateRule::Vanilla => "vanilla",
            UpdateRule::Reinforced => "reinforced",
        }
    }
}

/// Row of the per-iteration training log.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationLog {
    pub step: usize,
    pub epoch: usize,
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub rule: UpdateRule,
}

pub const TRAIN_LOG_HEADER: &str = "step,epoch,iteration,total,l1,ce,scl,scl_skipped,update_rule";

impl IterationLog {
    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{:.8},{:.8},{:.8},{:.8},{},{}",
            self.step,
            self.epoch,
            self.iteration,
            l.total,
            l.l1,
            l.ce,
            l.scl,
            u8::from(l.scl_skipped),
            self.rule.name()
        )
    }
}

/// Gradients and loss components of one mini-batch.
pub struct BatchOutcome {
    pub loss: LossBreakdown,
    /// One gradient per parameter, in store order.
    pub grads: Vec<Array2<f64>>,
}

/// Forward and backward pass of the combined objective over one batch.
///
/// Per-sample tapes run in parallel; the compression term couples samples
/// through the batch aggregate, so its gradient is computed once and fed back
/// into every tape as a seed on that sample's aggregate row.
pub fn batch_gradients(
    model: &ModelState,
    batch: &[(&Sample, u64)],
    weights: &LossWeights,
    jitter: f32,
    gated: bool,
) -> Result<BatchOutcome> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let passes: Vec<_> = batch
        .par_iter()
        .map(|&(sample, noise_seed)| {
            let mut tape = Tape::<f32>::new();
            let noise = (jitter > 0.0).then(|| {
                let target = model.target_tokens(&sample.image);
                feature_jitter(&target, jitter, &mut seed::rng(noise_seed))
            });
            let fv = model.forward(&mut tape, &sample.image, noise.as_ref(), gated);
            let l1 = tape.l1_loss(fv.x_hat, fv.target.clone());
            let ce = tape.cross_entropy(fv.logits, sample.object_id);
            (tape, fv, l1, ce)
        })
        .collect();

    let mut aggregate = Array2::<f64>::zeros((b, model.latent_channels()));
    let (mut l1_sum, mut ce_sum) = (0.0f64, 0.0f64);
    for (r, (tape, fv, l1, ce)) in passes.iter().enumerate() {
        aggregate
            .row_mut(r)
            .assign(&tape.value(fv.aggregate).row(0).mapv(f64::from));
        l1_sum += f64::from(tape.scalar(*l1));
        ce_sum += f64::from(tape.scalar(*ce));
    }
    let (l1, ce) = (l1_sum / b as f64, ce_sum / b as f64);

    let (mut scl, mut skipped, mut scl_grad) = (0.0, false, None);
    if weights.lambda2 != 0.0 {
        let term = losses::scl_term(&aggregate, weights)?;
        scl = term.value;
        match term.grad {
            Some(g) => scl_grad = Some(g),
            None => skipped = true,
        }
    }
    let loss = LossBreakdown {
        total: weights.lambda0 * l1 + weights.lambda1 * ce + weights.lambda2 * scl,
        l1,
        ce,
        scl,
        scl_skipped: skipped,
    };
    if !loss.total.is_finite() {
        return Ok(BatchOutcome {
            loss,
            grads: Vec::new(),
        });
    }

    let w_l1 = (weights.lambda0 / b as f64) as f32;
    let w_ce = (weights.lambda1 / b as f64) as f32;
    let per_sample: Vec<Vec<Option<Array2<f32>>>> = passes
        .into_par_iter()
        .enumerate()
        .map(|(r, (tape, fv, l1, ce))| {
            let mut seeds = vec![
                (l1, Array2::from_elem((1, 1), w_l1)),
                (ce, Array2::from_elem((1, 1), w_ce)),
            ];
            if let Some(g) = &scl_grad {
                let row = g
                    .row(r)
                    .mapv(|v| (weights.lambda2 * v) as f32)
                    .insert_axis(Axis(0));
                seeds.push((fv.aggregate, row));
            }
            let mut grads = tape.backward(&seeds).into_params();
            (0..model.params.len()).map(|i| grads.remove(&i)).collect()
        })
        .collect();

    let mut grads: Vec<Array2<f64>> = model
        .params
        .entries
        .iter()
        .map(|e| Array2::zeros(e.value.dim()))
        .collect();
    for sample in per_sample {
        for (acc, g) in grads.iter_mut().zip(sample) {
            if let Some(g) = g {
                acc.zip_mut_with(&g, |a, &v| *a += f64::from(v));
            }
        }
    }
    Ok(BatchOutcome { loss, grads })
}

/// Apply one update to every parameter.
pub fn apply_update(
    model: &mut ModelState,
    grads: &[Array2<f64>],
    rule: UpdateRule,
    basis: Option<(&SemanticBasis, &ChannelProjector)>,
    cfg: &UpdateConfig,
) -> Result<()> {
    for (i, entry) in model.params.entries.iter_mut().enumerate() {
        let theta = entry.value.mapv(f64::from);
        let next = match (rule, basis) {
            (UpdateRule::Vanilla, _) => optimizer::vanilla_step(&theta, &grads[i], cfg.lr),
            (UpdateRule::Reinforced, Some((b, projector))) => {
                let old = b.theta_old[i].mapv(f64::from);
                let p = entry.projectable.then_some(projector);
                optimizer::reinforced_step(&theta, &grads[i], &old, p, cfg)?
            }
            (UpdateRule::Reinforced, None) => {
                return Err(Error::Contract(
                    "reinforced update requested without a basis".into(),
                ))
            }
        };
        entry.value = next.mapv(|v| v as f32);
    }
    Ok(())
}

/// Spatially averaged latent of every sample (clean inputs), `rows x C_lat`.
pub fn latent_rows(model: &ModelState, samples: &[&Sample], gated: bool) -> Result<Array2<f64>> {
    let rows: Vec<Result<Vec<f64>>> = samples
        .par_iter()
        .map(|s| {
            let rec = model.infer(&s.image, gated)?;
            Ok(rec
                .latent
                .mean_axis(Axis(0))
                .expect("non-empty latent")
                .iter()
                .map(|&v| f64::from(v))
                .collect())
        })
        .collect();
    let c = model.latent_channels();
    let mut out = Array2::zeros((samples.len(), c));
    for (r, row) in rows.into_iter().enumerate() {
        out.row_mut(r).assign(&ndarray::Array1::from(row?));
    }
    Ok(out)
}

pub struct RunOutcome {
    pub records: Vec<StepRecord>,
    pub scores: ScoreMatrix,
    pub accesses: Vec<Access>,
    pub model: ModelState,
    pub train_log: Vec<IterationLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub acc: Option<f64>,
    pub fm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pixel: LevelSummary,
    pub image: LevelSummary,
}

pub fn summarize(m: &ScoreMatrix) -> Summary {
    let level = |l: Level| LevelSummary {
        acc: m.acc(l).ok(),
        fm: m.fm(l).ok(),
    };
    Summary {
        pixel: level(Level::Pixel),
        image: level(Level::Image),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub protocol: String,
    pub seed: u64,
    pub ablated: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub scores: ScoreMatrix,
    pub summary: Summary,
}

/// Where a run writes its artefacts. `None` keeps everything in memory.
pub struct RunSink<'a> {
    pub root: &'a Path,
    pub config_hash: &'a str,
}

pub fn step_dir(root: &Path, step: usize) -> PathBuf {
    root.join(format!("step_{step}"))
}

pub fn write_heatmaps(root: &Path, eval: &StepEvaluation) -> Result<()> {
    for m in &eval.maps {
        let path = root
            .join("heatmaps")
            .join(&m.object_name)
            .join(format!("{}.png", m.image_name));
        eval::export_heatmap(&m.pixel_scores, &path)?;
    }
    Ok(())
}

/// Run every protocol step. With a sink, checkpoints, bases, metrics and the
/// training log are written as the run progresses.
pub fn run_incremental(cfg: &RunConfig, sink: Option<RunSink<'_>>) -> Result<RunOutcome> {
    cfg.validate()?;
    let (objects, plan) = load_data(cfg)?;
    let data = LoggedDataset::new(objects);
    let mut model = init_model(cfg)?;
    let gated = cfg.gated();
    let names: Vec<String> = model
        .params
        .entries
        .iter()
        .map(|e| e.name.clone())
        .collect();
    let shuffle_root = seed::derive(cfg.seed, stream::SHUFFLE);
    let jitter_root = seed::derive(cfg.seed, stream::JITTER);

    let mut basis: Option<SemanticBasis> = None;
    let mut scores = ScoreMatrix::default();
    let mut records = Vec::new();
    let mut train_log = Vec::new();
    let mut metrics_text = format!("{}\n", persist::METRICS_HEADER);
    let mut log_text = format!("{TRAIN_LOG_HEADER}\n");

    for (n, ids) in plan.steps.iter().enumerate() {
        let step = n + 1;
        let started = Instant::now();
        let samples = data.train_samples(step, ids)?;
        if samples.is_empty() {
            return Err(Error::Protocol(format!(
                "step {step} has no normal training samples"
            )));
        }
        let rule = if basis.is_some() && !cfg.ablation.us {
            UpdateRule::Reinforced
        } else {
            UpdateRule::Vanilla
        };
        let projector = basis
            .as_ref()
            .map(|b| ChannelProjector::from_basis(b, cfg.update.kappa));
        let mut last_loss = LossBreakdown::default();
        let mut iteration = 0usize;
        for epoch in 1..=cfg.epochs {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut seed::rng(seed::derive_path(
                shuffle_root,
                &[step as u64, epoch as u64],
            )));
            for chunk in order.chunks(cfg.batch_size) {
                iteration += 1;
                let batch: Vec<(&Sample, u64)> = chunk
                    .iter()
                    .map(|&i| {
                        let s =
                            seed::derive_path(jitter_root, &[step as u64, epoch as u64, i as u64]);
                        (samples[i], s)
                    })
                    .collect();
                let out = batch_gradients(&model, &batch, &cfg.loss, cfg.jitter, gated)?;
                if !out.loss.total.is_finite()
                    || out.grads.iter().any(|g| g.iter().any(|v| !v.is_finite()))
                {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at step {step}, iteration {iteration} (total = {})",
                        out.loss.total
                    )));
                }
                let pair = basis.as_ref().zip(projector.as_ref());
                apply_update(&mut model, &out.grads, rule, pair, &cfg.update)?;
                let entry = IterationLog {
                    step,
                    epoch,
                    iteration,
                    loss: out.loss.clone(),
                    rule,
                };
                log_text.push_str(&entry.csv());
                log_text.push('\n');
                train_log.push(entry);
                last_loss = out.loss;
            }
            log::info!(
                "step {step} epoch {epoch}: total {:.5} l1 {:.5} ce {:.5} scl {:.5}",
                last_loss.total,
                last_loss.l1,
                last_loss.ce,
                last_loss.scl
            );
        }

        let rows = latent_rows(&model, &samples, gated)?;
        let new_basis = optimizer::capture_basis(
            &[rows],
            model.latent_channels(),
            basis.as_ref(),
            model.params.snapshot(),
        )?;

        let seen = plan.seen_through(n);
        let test_objects = data.test_objects(step, &seen)?;
        let evaluation = eval::evaluate_step(&model, &test_objects, gated)?;
        scores.push_row(evaluation.cells.clone())?;
        for line in persist::metrics_lines(step, &evaluation.cells) {
            metrics_text.push_str(&line);
            metrics_text.push('\n');
        }

        let (mut ckpt_path, mut basis_path) = (PathBuf::new(), PathBuf::new());
        if let Some(sink) = &sink {
            let dir = step_dir(sink.root, step);
            ckpt_path = dir.join("checkpoint");
            basis_path = dir.join("basis");
            persist::save_checkpoint(&ckpt_path, &model, step, sink.config_hash)?;
            persist::save_basis(&basis_path, &new_basis, &names, step)?;
            persist::write_file(&sink.root.join("metrics.csv"), metrics_text.as_bytes())?;
            persist::write_file(&sink.root.join("train_log.csv"), log_text.as_bytes())?;
            if cfg.heatmaps {
                write_heatmaps(sink.root, &evaluation)?;
            }
        }
        basis = Some(new_basis);
        records.push(StepRecord {
            step,
            objects: ids.clone(),
            final_loss: last_loss,
            update_rule: rule.name().to_string(),
            checkpoint: ckpt_path,
            basis: basis_path,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "step {step} done in {:.1}s",
            started.elapsed().as_secs_f64()
        );
    }

    Ok(RunOutcome {
        records,
        scores,
        accesses: data.accesses(),
        model,
        train_log,
    })
}

/// Retention default that matches the configured mode.
pub fn default_beta(mode: RetainMode) -> f64 {
    match mode {
        RetainMode::Pull => 0.2,
        RetainMode::Literal => 1e-4,
    }
}
