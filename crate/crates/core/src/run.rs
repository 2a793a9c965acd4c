//! Experiment orchestration: pretraining, GRPO fine-tuning, evaluation,
//! sampling and CFG sweeps over a fixed run-directory layout.
//!
//! ```text
//! <output_dir>/manifest.json   resolved config plus per-phase facts
//! <output_dir>/metrics.jsonl   one record per training step
//! <output_dir>/checkpoints/
//! <output_dir>/samples/
//! <output_dir>/eval/
//! ```
//!
//! Every random stream derives from `(seed, stream, index)`, so a step
//! counter and the root seed are the entire RNG state.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::checkpoint::{atomic_write, parameter_digest, Checkpoint, CheckpointError, Phase};
use crate::config::{ConfigError, ExperimentConfig};
use crate::domain::{Domain, DomainError};
use crate::grpo::{clip_grad_norm, splitmix64, AdamW, AdamWSettings, GrpoError, GrpoTrainer, StepReport};
use crate::guidance::drop_condition;
use crate::metrics::{
    fit_gaussian, frechet_distance, inception_score, knn_precision_recall, rollout_entropy, FeatureSet,
    MetricsError,
};
use crate::policy::{
    mle_loss, mle_loss_tape, sample_sequence, ConditioningMode, Condition, ParamVars, PolicyConfig,
    PolicyError, PolicyParameters, SamplerSettings,
};
use crate::rewards::{RewardError, RewardModel, RewardSuite, Thresholds};
use crate::tensor::Tape;
use crate::tokenizer::{encode_png_bytes, ImageGrid, TokenSequence};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("external judge failure: {0}")]
    Judge(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, RunError>;

impl RunError {
    /// Process exit code: 2 configuration, 3 numerical abort, 4 judge
    /// failure under the abort policy, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Numerical(_) => 3,
            RunError::Judge(_) => 4,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl From<PolicyError> for RunError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Configuration(m) => RunError::Config(ConfigError::Invalid(m)),
            other => RunError::Contract(other.to_string()),
        }
    }
}

impl From<DomainError> for RunError {
    fn from(e: DomainError) -> Self {
        match e {
            DomainError::Configuration(m) => RunError::Config(ConfigError::Invalid(m)),
            other => RunError::Contract(other.to_string()),
        }
    }
}

impl From<RewardError> for RunError {
    fn from(e: RewardError) -> Self {
        match e {
            RewardError::Configuration(m) => RunError::Config(ConfigError::Invalid(m)),
            RewardError::Judge(j) => RunError::Judge(j.to_string()),
            other => RunError::Contract(other.to_string()),
        }
    }
}

impl From<GrpoError> for RunError {
    fn from(e: GrpoError) -> Self {
        match e {
            GrpoError::Configuration(m) => RunError::Config(ConfigError::Invalid(m)),
            GrpoError::Numerical(m) => RunError::Numerical(m),
            GrpoError::Reward(r) => r.into(),
            GrpoError::Policy(p) => p.into(),
            other => RunError::Contract(other.to_string()),
        }
    }
}

impl From<MetricsError> for RunError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Numerical(m) => RunError::Numerical(m),
            other => RunError::Contract(other.to_string()),
        }
    }
}

// Independent random streams.
const STREAM_INIT: u64 = 1;
const STREAM_CORPUS: u64 = 2;
const STREAM_BATCH: u64 = 3;
const STREAM_REFERENCE: u64 = 4;
const STREAM_HELD_OUT: u64 = 5;
const STREAM_CALIBRATION: u64 = 6;
const STREAM_EVAL: u64 = 7;
const STREAM_SAMPLE: u64 = 8;

pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}

fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

/// Fixed layout under the configured output directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            root: PathBuf::from(&config.output_dir),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn pretrain_final(&self) -> PathBuf {
        self.checkpoints().join("pretrain-final.ckpt")
    }

    pub fn rl_final(&self) -> PathBuf {
        self.checkpoints().join("rl-final.ckpt")
    }

    pub fn rl_step(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("rl-step-{step:06}.ckpt"))
    }
}

/// One training step. Pretraining fills `loss`; RL fills the reward fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub phase: Phase,
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_c_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_i_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_r_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition_score_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degenerate_groups: Option<usize>,
    pub judge_incidents: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<u64>,
}

impl MetricRecord {
    fn pretrain(step: u64, loss: f64, grad_norm: f64) -> Self {
        Self {
            phase: Phase::Pretrain,
            step,
            loss: Some(loss),
            reward_mean: None,
            reward_std: None,
            r_c_mean: None,
            r_i_mean: None,
            r_r_mean: None,
            condition_score_mean: None,
            objective: None,
            kl_mean: None,
            clip_fraction: None,
            entropy: None,
            grad_norm,
            degenerate_groups: None,
            judge_incidents: 0,
            wall_clock_ms: None,
        }
    }

    fn rl(r: &StepReport) -> Self {
        Self {
            phase: Phase::Rl,
            step: r.step,
            loss: None,
            reward_mean: Some(r.reward_mean),
            reward_std: Some(r.reward_std),
            r_c_mean: Some(r.r_c_mean),
            r_i_mean: Some(r.r_i_mean),
            r_r_mean: Some(r.r_r_mean),
            condition_score_mean: Some(r.condition_score_mean),
            objective: Some(r.objective),
            kl_mean: Some(r.kl_mean),
            clip_fraction: Some(r.clip_fraction),
            entropy: Some(r.entropy),
            grad_norm: r.grad_norm,
            degenerate_groups: Some(r.degenerate_groups),
            judge_incidents: r.judge_incidents,
            wall_clock_ms: None,
        }
    }
}

/// Reads every record of `metrics.jsonl`.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| RunError::Internal(format!("bad metrics line: {e}"))))
        .collect()
}

/// Keeps the records for which `keep` holds, rewriting the file atomically.
fn retain_metrics(path: &Path, keep: impl Fn(&MetricRecord) -> bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut out = Vec::new();
    for r in read_metrics(path)?.into_iter().filter(|r| keep(r)) {
        serde_json::to_writer(&mut out, &r).expect("record serializes");
        out.push(b'\n');
    }
    atomic_write(path, &out).map_err(io_err(path))
}

struct MetricsLog {
    file: fs::File,
    path: PathBuf,
    started: Instant,
    wall_clock: bool,
}

impl MetricsLog {
    fn open(path: PathBuf, wall_clock: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(Self {
            file,
            path,
            started: Instant::now(),
            wall_clock,
        })
    }

    fn write(&mut self, mut record: MetricRecord) -> Result<()> {
        if self.wall_clock {
            record.wall_clock_ms = Some(self.started.elapsed().as_millis() as u64);
        }
        let mut line = serde_json::to_vec(&record).expect("record serializes");
        line.push(b'\n');
        self.file.write_all(&line).map_err(io_err(&self.path))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    atomic_write(path, &bytes).map_err(io_err(path))
}

/// Merges `section` under `key` into the manifest, always refreshing the
/// resolved config.
fn update_manifest(config: &ExperimentConfig, key: &str, section: Value) -> Result<()> {
    let paths = RunPaths::new(config);
    let path = paths.manifest();
    let mut manifest = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_else(|_| json!({})),
        Err(_) => json!({}),
    };
    manifest["config"] = serde_json::to_value(config).expect("config serializes");
    manifest[key] = section;
    write_json(&path, &manifest)
}

/// `n` labeled images of the configured domain; deterministic in `seed`.
pub fn generate_toy_corpus(config: &ExperimentConfig, seed: u64, n: usize) -> Result<Vec<(usize, ImageGrid)>> {
    let domain = config.build_domain()?;
    Ok(domain
        .generate_corpus(seed, n)?
        .into_iter()
        .map(|x| (x.label, x.image))
        .collect())
}

fn condition_for(config: &ExperimentConfig, domain: &Domain, class: usize) -> Condition {
    domain.condition_for(class, config.model.conditioning_mode == ConditioningMode::Text)
}

fn training_corpus(config: &ExperimentConfig, domain: &Domain) -> Result<Vec<(Condition, TokenSequence)>> {
    domain
        .generate_corpus(derive_seed(config.seed, STREAM_CORPUS, 0), config.pretrain.corpus_size)?
        .into_iter()
        .map(|x| Ok((condition_for(config, domain, x.label), domain.encode(&x.image)?)))
        .collect()
}

fn reference_images(config: &ExperimentConfig, domain: &Domain, stream: u64, n: usize) -> Result<Vec<(usize, ImageGrid)>> {
    Ok(domain
        .generate_corpus(derive_seed(config.seed, stream, 0), n)?
        .into_iter()
        .map(|x| (x.label, x.image))
        .collect())
}

/// Held-out real images used by evaluation.
pub fn held_out_set(config: &ExperimentConfig) -> Result<Vec<(usize, ImageGrid)>> {
    let domain = config.build_domain()?;
    reference_images(config, &domain, STREAM_HELD_OUT, config.eval.real_set_size)
}

fn pretrain_optimizer(config: &ExperimentConfig, params: &PolicyParameters) -> AdamW {
    let settings = AdamWSettings {
        lr: config.pretrain.lr,
        weight_decay: config.pretrain.weight_decay,
        ..AdamWSettings::default()
    };
    AdamW::new(settings, &params.weights)
}

/// Initial policy for `config`, drawn from its own seed stream.
pub fn initial_policy(config: &ExperimentConfig) -> Result<PolicyParameters> {
    let domain = config.build_domain()?;
    let pc = config.policy_config(&domain)?;
    Ok(PolicyParameters::init(&pc, &mut stream_rng(config.seed, STREAM_INIT, 0))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub initial_nll: f64,
    pub final_nll: f64,
    pub steps: usize,
}

/// Maximum-likelihood pretraining with condition dropout.
pub fn run_pretrain(config: &ExperimentConfig) -> Result<PretrainOutcome> {
    config.validate()?;
    let paths = RunPaths::new(config);
    let domain = config.build_domain()?;
    let corpus = training_corpus(config, &domain)?;
    let probe: Vec<_> = corpus.iter().take(256).cloned().collect();
    let mut params = initial_policy(config)?;
    let mut optimizer = pretrain_optimizer(config, &params);
    retain_metrics(&paths.metrics(), |r| r.phase != Phase::Pretrain)?;
    let mut log = MetricsLog::open(paths.metrics(), config.record_wall_clock)?;
    let initial_nll = mle_loss(&params, &probe)?;
    let dropout = if config.guidance.enabled { config.guidance.dropout_rate } else { 0.0 };
    let ckpt = |params: &PolicyParameters, optimizer: &AdamW, step: u64| Checkpoint {
        phase: Phase::Pretrain,
        step,
        seed: config.seed,
        policy: params.clone(),
        optimizer: optimizer.clone(),
        reference: None,
        thresholds: None,
    };

    for step in 0..config.pretrain.steps as u64 {
        let mut rng = stream_rng(config.seed, STREAM_BATCH, step);
        let batch: Vec<(Condition, TokenSequence)> = (0..config.pretrain.batch_size)
            .map(|_| {
                let (c, t) = &corpus[rng.random_range(0..corpus.len())];
                let c = drop_condition(c.clone(), dropout, &mut rng).map_err(|e| RunError::Contract(e.to_string()))?;
                Ok((c, t.clone()))
            })
            .collect::<Result<_>>()?;
        let mut tape = Tape::new();
        let w = ParamVars::register(&mut tape, &params, true);
        let loss = mle_loss_tape(&mut tape, &params.config, &w, &batch)?;
        let value = tape.value(loss).data()[0];
        let backward = tape.backward(loss);
        let mut grads = w.gradients(&tape);
        let norm = clip_grad_norm(&mut grads, config.grpo.grad_clip_norm);
        let updated = match (value.is_finite() && norm.is_finite(), backward) {
            (true, Ok(())) => optimizer.step(&mut params.weights, &grads),
            _ => Err(GrpoError::Numerical(format!("non-finite loss {value} at pretrain step {step}"))),
        };
        if let Err(e) = updated {
            let last_good = paths.checkpoints().join("pretrain-last-good.ckpt");
            ckpt(&params, &optimizer, step).save(&last_good)?;
            log::error!("pretraining diverged at step {step}; last good state kept at {}", last_good.display());
            return Err(e.into());
        }
        log.write(MetricRecord::pretrain(step, value, norm))?;
        let done = step + 1;
        if config.pretrain.checkpoint_every > 0 && done % config.pretrain.checkpoint_every as u64 == 0 {
            ckpt(&params, &optimizer, done).save(&paths.checkpoints().join(format!("pretrain-step-{done:06}.ckpt")))?;
        }
        if step % 50 == 0 {
            log::info!("pretrain step {step}: loss {value:.4}");
        }
    }
    let final_nll = mle_loss(&params, &probe)?;
    let path = paths.pretrain_final();
    ckpt(&params, &optimizer, config.pretrain.steps as u64).save(&path)?;
    let outcome = PretrainOutcome {
        checkpoint: path,
        initial_nll,
        final_nll,
        steps: config.pretrain.steps,
    };
    update_manifest(config, "pretrain", serde_json::to_value(&outcome).expect("outcome serializes"))?;
    log::info!("pretraining done: nll {initial_nll:.4} -> {final_nll:.4}");
    Ok(outcome)
}

fn build_reward_suite(config: &ExperimentConfig, domain: &Domain) -> Result<RewardSuite> {
    let reference: Vec<ImageGrid> = reference_images(config, domain, STREAM_REFERENCE, config.rewards.reference_size)?
        .into_iter()
        .map(|(_, i)| i)
        .collect();
    Ok(RewardSuite::new(domain.clone(), config.rewards.clone(), &reference)?)
}

fn training_conditions(config: &ExperimentConfig, domain: &Domain, step: u64) -> Vec<Condition> {
    let b = config.grpo.batch_conditions;
    (0..b)
        .map(|i| condition_for(config, domain, (step as usize * b + i) % domain.num_classes()))
        .collect()
}

/// 33rd/67th percentile thresholds of scaled condition scores on samples
/// from `policy`.
pub fn calibrate_thresholds(
    config: &ExperimentConfig,
    domain: &Domain,
    suite: &RewardSuite,
    policy: &PolicyParameters,
) -> Result<Thresholds> {
    let mut samples = Vec::with_capacity(config.rewards.calibration_samples);
    for i in 0..config.rewards.calibration_samples {
        let cond = condition_for(config, domain, i % domain.num_classes());
        let mut rng = stream_rng(config.seed, STREAM_CALIBRATION, i as u64);
        let r = sample_sequence(policy, &cond, &config.sampler, config.guidance.train_scale(), &mut rng)?;
        samples.push((cond, r.tokens));
    }
    Ok(Thresholds::from_percentiles(&suite.scaled_condition_scores(&samples)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlOutcome {
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub stopped_early: bool,
    pub thresholds: [f64; 2],
    pub reference_digest: String,
}

/// GRPO fine-tuning from `base` (a pretraining checkpoint), or continued
/// from `resume` (an RL checkpoint of the same run).
pub fn run_rl_train(config: &ExperimentConfig, base: &Path, resume: Option<&Path>) -> Result<RlOutcome> {
    config.validate()?;
    let paths = RunPaths::new(config);
    let domain = config.build_domain()?;
    let pc = config.policy_config(&domain)?;
    let mut suite = build_reward_suite(config, &domain)?;

    let mut trainer;
    let thresholds;
    match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path, Some(&pc))?;
            if ckpt.phase != Phase::Rl {
                return Err(RunError::Contract(format!("{} is not an RL checkpoint", path.display())));
            }
            let reference = ckpt
                .reference
                .ok_or_else(|| RunError::Contract("RL checkpoint lacks its reference policy".into()))?;
            thresholds = match ckpt.thresholds {
                Some([a, b]) => Thresholds::new(a, b)?,
                None => return Err(RunError::Contract("RL checkpoint lacks quantization thresholds".into())),
            };
            trainer = GrpoTrainer::new(
                config.grpo.clone(),
                config.sampler,
                config.guidance.clone(),
                ckpt.policy,
                config.seed,
            )?;
            trainer.reference = reference;
            trainer.optimizer = ckpt.optimizer;
            trainer.step = ckpt.step;
            let from = ckpt.step;
            retain_metrics(&paths.metrics(), |r| r.phase != Phase::Rl || r.step < from)?;
            log::info!("resuming RL at step {from} from {}", path.display());
        }
        None => {
            let ckpt = Checkpoint::load(base, Some(&pc))?;
            if ckpt.phase != Phase::Pretrain {
                return Err(RunError::Contract(format!("{} is not a pretraining checkpoint", base.display())));
            }
            thresholds = match config.rewards.quantize_thresholds {
                Some([a, b]) => Thresholds::new(a, b)?,
                None => calibrate_thresholds(config, &domain, &suite, &ckpt.policy)?,
            };
            trainer = GrpoTrainer::new(
                config.grpo.clone(),
                config.sampler,
                config.guidance.clone(),
                ckpt.policy,
                config.seed,
            )?;
            retain_metrics(&paths.metrics(), |r| r.phase != Phase::Rl)?;
        }
    }
    suite.set_thresholds(thresholds);
    let reference_digest = parameter_digest(&trainer.reference);
    let section = json!({
        "base_checkpoint": base.display().to_string(),
        "thresholds": [thresholds.t1, thresholds.t2],
        "reference_digest": reference_digest,
    });
    update_manifest(config, "rl", section)?;

    let checkpoint = |t: &GrpoTrainer| Checkpoint {
        phase: Phase::Rl,
        step: t.step,
        seed: config.seed,
        policy: t.policy.clone(),
        optimizer: t.optimizer.clone(),
        reference: Some(t.reference.clone()),
        thresholds: Some([thresholds.t1, thresholds.t2]),
    };
    let held_out = held_out_set(config)?;
    let mut log = MetricsLog::open(paths.metrics(), config.record_wall_clock)?;
    let (mut best, mut since_best, mut stopped_early) = (f64::NEG_INFINITY, 0usize, false);
    while trainer.step < config.rl.steps as u64 {
        let conditions = training_conditions(config, &domain, trainer.step);
        let report = trainer.train_step(&conditions, &mut suite)?;
        log.write(MetricRecord::rl(&report))?;
        let done = trainer.step;
        if done % 10 == 0 {
            log::info!(
                "rl step {}: reward {:.4} kl {:.5} entropy {:.4}",
                report.step,
                report.reward_mean,
                report.kl_mean,
                report.entropy
            );
        }
        if config.rl.checkpoint_every > 0 && done % config.rl.checkpoint_every as u64 == 0 {
            checkpoint(&trainer).save(&paths.rl_step(done))?;
        }
        if config.rl.eval_every > 0 && done % config.rl.eval_every as u64 == 0 {
            let report = evaluate_policy(config, &domain, &trainer.policy, &held_out, Some(&mut suite))?;
            write_json(&paths.eval().join(format!("rl-step-{done:06}.json")), &report)?;
            if let (Some(patience), Some(reward)) = (config.rl.early_stop_patience, report.reward_mean) {
                if reward > best {
                    best = reward;
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= patience {
                        log::warn!("early stop at step {done}: no reward improvement in {patience} evaluations");
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
    }
    let path = paths.rl_final();
    checkpoint(&trainer).save(&path)?;
    Ok(RlOutcome {
        checkpoint: path,
        steps: trainer.step,
        stopped_early,
        thresholds: [thresholds.t1, thresholds.t2],
        reference_digest,
    })
}

/// Image-level metrics of `generated` (requested class, image) against `real`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub inception_score: f64,
    pub fid: f64,
    pub precision: f64,
    pub recall: f64,
    /// Fraction of images the oracle assigns to the requested class.
    pub condition_accuracy: f64,
}

pub fn evaluate_images(
    domain: &Domain,
    real: &[(usize, ImageGrid)],
    generated: &[(usize, ImageGrid)],
    k: usize,
) -> Result<ImageMetrics> {
    let minimum = k + 1;
    if real.len() < minimum || generated.len() < minimum {
        return Err(RunError::Contract(format!(
            "k-NN metrics with k = {k} need at least {minimum} real and {minimum} generated images, got {} and {}",
            real.len(),
            generated.len()
        )));
    }
    let patch = domain.codebook().patch_size();
    let real_images: Vec<ImageGrid> = real.iter().map(|(_, i)| i.clone()).collect();
    let gen_images: Vec<ImageGrid> = generated.iter().map(|(_, i)| i.clone()).collect();
    let fr = FeatureSet::from_images(&real_images, patch)?;
    let fg = FeatureSet::from_images(&gen_images, patch)?;
    let fid = frechet_distance(&fit_gaussian(&fr)?, &fit_gaussian(&fg)?)?;
    let (precision, recall) = knn_precision_recall(&fr, &fg, k)?;
    let mut probs = Vec::with_capacity(generated.len());
    let mut correct = 0usize;
    for (label, img) in generated {
        probs.push(domain.class_probabilities(img)?);
        if domain.classify(img)? == Some(*label) {
            correct += 1;
        }
    }
    Ok(ImageMetrics {
        inception_score: inception_score(&probs)?,
        fid,
        precision,
        recall,
        condition_accuracy: correct as f64 / generated.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub cfg_scale: Option<f64>,
    pub entropy: f64,
    pub inception_score: f64,
    pub fid: f64,
    pub precision: f64,
    pub recall: f64,
    pub condition_accuracy: f64,
    /// Mean final reward of the evaluation samples when a reward suite is available.
    pub reward_mean: Option<f64>,
}

/// Guidance scale for sampling; `s = 1` is plain conditional sampling.
fn sampling_scale(config: &ExperimentConfig, scale: Option<f64>) -> Option<f64> {
    match scale.or(config.guidance.infer_scale()) {
        Some(s) if s == 1.0 => None,
        other => other,
    }
}

fn eval_sampler(config: &ExperimentConfig) -> SamplerSettings {
    config.sampler
}

/// Samples `samples_per_class` images per class and scores them against `real`.
pub fn evaluate_policy(
    config: &ExperimentConfig,
    domain: &Domain,
    policy: &PolicyParameters,
    real: &[(usize, ImageGrid)],
    suite: Option<&mut RewardSuite>,
) -> Result<EvalReport> {
    let scale = sampling_scale(config, None);
    let per_class = config.eval.samples_per_class;
    let mut generated = Vec::new();
    let mut groups: Vec<(Condition, Vec<TokenSequence>)> = Vec::new();
    for class in 0..domain.num_classes() {
        let cond = condition_for(config, domain, class);
        let mut seqs = Vec::with_capacity(per_class);
        for i in 0..per_class {
            let mut rng = stream_rng(config.seed, STREAM_EVAL, (class * per_class + i) as u64);
            let r = sample_sequence(policy, &cond, &eval_sampler(config), scale, &mut rng)?;
            generated.push((class, domain.decode(&r.tokens)?));
            seqs.push(r.tokens);
        }
        groups.push((cond, seqs));
    }
    let images = evaluate_images(domain, real, &generated, config.eval.knn_k)?;
    let conditions: Vec<Condition> = (0..domain.num_classes()).map(|c| condition_for(config, domain, c)).collect();
    let entropy = rollout_entropy(
        policy,
        &conditions,
        config.eval.entropy_budget,
        scale,
        derive_seed(config.seed, STREAM_EVAL, u64::MAX),
    )?;
    let reward_mean = match suite {
        Some(s) => {
            let mut total = 0.0;
            for (cond, seqs) in &groups {
                total += s.score_group(cond, seqs)?.iter().map(|b| b.r_final).sum::<f64>();
            }
            Some(total / generated.len() as f64)
        }
        None => None,
    };
    Ok(EvalReport {
        samples: generated.len(),
        cfg_scale: scale,
        entropy,
        inception_score: images.inception_score,
        fid: images.fid,
        precision: images.precision,
        recall: images.recall,
        condition_accuracy: images.condition_accuracy,
        reward_mean,
    })
}

fn load_policy(config: &ExperimentConfig, checkpoint: &Path) -> Result<(Domain, PolicyParameters)> {
    config.validate()?;
    let domain = config.build_domain()?;
    let pc = config.policy_config(&domain)?;
    let ckpt = Checkpoint::load(checkpoint, Some(&pc))?;
    Ok((domain, ckpt.policy))
}

/// Evaluates a checkpoint against the held-out real set and writes
/// `eval/<checkpoint stem>.json`.
pub fn run_eval(config: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    let (domain, policy) = load_policy(config, checkpoint)?;
    let real = held_out_set(config)?;
    let report = evaluate_policy(config, &domain, &policy, &real, None)?;
    let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "eval".into());
    write_json(&RunPaths::new(config).eval().join(format!("{stem}.json")), &report)?;
    Ok(report)
}

/// Sidecar metadata written next to each sampled PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetadata {
    pub condition: Condition,
    pub description: String,
    pub seed: u64,
    pub cfg_scale: f64,
    pub logprob_sum: f64,
    pub tokens: Vec<usize>,
}

/// Samples `per_condition` images for each condition into `out_dir`.
pub fn sample_images(
    config: &ExperimentConfig,
    domain: &Domain,
    policy: &PolicyParameters,
    conditions: &[Condition],
    cfg_scale: f64,
    per_condition: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if !cfg_scale.is_finite() {
        return Err(RunError::Contract(format!("cfg scale must be finite, got {cfg_scale}")));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let scale = sampling_scale(config, Some(cfg_scale));
    let mut written = Vec::new();
    for (ci, cond) in conditions.iter().enumerate() {
        policy.config.validate_condition(cond)?;
        for i in 0..per_condition {
            let index = (ci * per_condition + i) as u64;
            let seed = derive_seed(config.seed, STREAM_SAMPLE, index);
            let r = sample_sequence(policy, cond, &eval_sampler(config), scale, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let image = domain.decode(&r.tokens)?;
            let png = out_dir.join(format!("sample-{ci:03}-{i:04}.png"));
            let bytes = encode_png_bytes(&image).map_err(|e| RunError::Internal(e.to_string()))?;
            atomic_write(&png, &bytes).map_err(io_err(&png))?;
            let meta = SampleMetadata {
                condition: cond.clone(),
                description: domain.describe(cond),
                seed,
                cfg_scale,
                logprob_sum: r.logprob_sampling.iter().sum(),
                tokens: r.tokens.tokens.clone(),
            };
            write_json(&png.with_extension("json"), &meta)?;
            written.push(png);
        }
    }
    Ok(written)
}

/// Parses a condition as the CLI writes it: a class index, `null`, or
/// `text:<words>` in text mode.
pub fn parse_condition(config: &ExperimentConfig, domain: &Domain, spec: &str) -> Result<Condition> {
    let spec = spec.trim();
    if spec == "null" {
        return Ok(Condition::Null);
    }
    let class: usize = spec
        .parse()
        .map_err(|_| RunError::Contract(format!("invalid condition '{spec}' (expected a class index or null)")))?;
    if class >= domain.num_classes() {
        return Err(RunError::Contract(format!(
            "class {class} out of range for {} classes",
            domain.num_classes()
        )));
    }
    Ok(condition_for(config, domain, class))
}

pub fn run_sample(
    config: &ExperimentConfig,
    checkpoint: &Path,
    conditions: &[String],
    cfg_scale: f64,
    per_condition: usize,
) -> Result<Vec<PathBuf>> {
    let (domain, policy) = load_policy(config, checkpoint)?;
    let conds = conditions
        .iter()
        .map(|c| parse_condition(config, &domain, c))
        .collect::<Result<Vec<_>>>()?;
    let dir = RunPaths::new(config).samples().join(format!("cfg-{cfg_scale}"));
    sample_images(config, &domain, &policy, &conds, cfg_scale, per_condition, &dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub cfg_scale: f64,
    pub directory: PathBuf,
    pub report: EvalReport,
}

/// One sample directory and one evaluation per inference scale in
/// `eval.sweep_scales`.
pub fn run_sweep_cfg(config: &ExperimentConfig, checkpoint: &Path, per_condition: usize) -> Result<Vec<SweepEntry>> {
    let (domain, policy) = load_policy(config, checkpoint)?;
    let real = held_out_set(config)?;
    let conds: Vec<Condition> = (0..domain.num_classes()).map(|c| condition_for(config, &domain, c)).collect();
    let paths = RunPaths::new(config);
    let mut entries = Vec::new();
    for &s in &config.eval.sweep_scales {
        let dir = paths.samples().join(format!("sweep-cfg-{s}"));
        sample_images(config, &domain, &policy, &conds, s, per_condition, &dir)?;
        let mut scaled = config.clone();
        scaled.guidance.scale_infer = s;
        scaled.guidance.enabled = true;
        let report = evaluate_policy(&scaled, &domain, &policy, &real, None)?;
        entries.push(SweepEntry {
            cfg_scale: s,
            directory: dir,
            report,
        });
    }
    write_json(&paths.eval().join("sweep-cfg.json"), &entries)?;
    Ok(entries)
}

/// The toy policy configuration implied by `config`.
pub fn policy_config(config: &ExperimentConfig) -> Result<PolicyConfig> {
    let domain = config.build_domain()?;
    Ok(config.policy_config(&domain)?)
}
