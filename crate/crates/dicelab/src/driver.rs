//! Training runs on disk: target loading, the step loop, loss log,
//! checkpoints and resume.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dicelab_core::clustering::SoftLabelSequence;
use dicelab_core::losses::LossReport;
use dicelab_core::model::{Encoder, LayerFeatures, ModelConfig};
use dicelab_core::train::{evaluate, prepare_batch, select_batch, train_step, Example, TrainConfig, TrainState};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::features::all_layers;
use crate::formats::{atomic_write, read_labels, read_soft_labels, sha256_hex, Checkpoint, CheckpointHeader, ProjectionLayout};
use crate::store::Corpus;

pub const LOG_FILE: &str = "train.log";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

/// A training config file: every `TrainConfig` field plus the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub model: ModelConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl TrainJob {
    pub fn from_json(text: &[u8], path: &Path) -> Result<Self> {
        let job: Self = serde_json::from_slice(text)
            .map_err(|e| Error::config(format!("{}: bad training config: {e}", path.display())))?;
        job.model.validate()?;
        job.train.validate()?;
        Ok(job)
    }

    /// sha256 of the canonical JSON; guards resume against config edits.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("job serializes"))
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Base for relative target paths.
    pub base_dir: PathBuf,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) once this many steps are done.
    pub halt_at: Option<usize>,
    pub echo: bool,
}

impl RunOptions {
    pub fn new(base_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            base_dir: base_dir.into(),
            out_dir: out_dir.into(),
            resume: None,
            halt_at: None,
            echo: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub step: usize,
    pub steps_run: usize,
    pub last: Option<LossReport>,
    /// Loss over every utterance with fixed evaluation masks; absent when halted early.
    pub eval: Option<LossReport>,
}

/// Everything a run reads besides the config.
pub struct Targets {
    pub corpus: Corpus,
    pub hard: Option<Vec<Vec<u16>>>,
    pub soft: Option<Vec<SoftLabelSequence>>,
    pub teacher: Option<Encoder>,
    pub teacher_feats: Option<Vec<LayerFeatures>>,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads and checks every target before any step runs.
pub fn load_targets(cfg: &TrainConfig, base: &Path) -> Result<Targets> {
    let t = &cfg.targets;
    if t.corpus.is_empty() {
        return Err(Error::config("targets.corpus is required"));
    }
    let corpus = Corpus::load(&resolve(base, &t.corpus))?;
    let frames = corpus.frames();
    let mut hard = None;
    let mut soft = None;
    match cfg.loss {
        dicelab_core::losses::LossMode::Soft => {
            let p = t
                .soft_labels
                .as_deref()
                .ok_or_else(|| Error::config("soft loss needs targets.soft_labels"))?;
            let path = resolve(base, p);
            let seqs = read_soft_labels(&path)?;
            let ids: Vec<(u32, usize)> = seqs.iter().map(|s| (s.utterance_id, s.frames())).collect();
            check_coverage(&ids, &frames, &path)?;
            soft = Some(seqs);
        }
        mode if mode.needs_labels() => {
            let p = t
                .labels
                .as_deref()
                .ok_or_else(|| Error::config("SSL loss needs targets.labels"))?;
            let path = resolve(base, p);
            let (_, seqs) = read_labels(&path)?;
            let ids: Vec<(u32, usize)> = seqs.iter().map(|s| (s.utterance_id, s.labels.len())).collect();
            check_coverage(&ids, &frames, &path)?;
            hard = Some(seqs.into_iter().map(|s| s.labels).collect());
        }
        _ => {}
    }
    let (mut teacher, mut teacher_feats) = (None, None);
    if cfg.loss.needs_teacher() {
        let p = t
            .teacher
            .as_deref()
            .ok_or_else(|| Error::config("feature loss needs targets.teacher"))?;
        let enc = Checkpoint::load(&resolve(base, p))?.encoder()?;
        teacher_feats = Some(all_layers(&enc, &corpus)?);
        teacher = Some(enc);
    }
    Ok(Targets {
        corpus,
        hard,
        soft,
        teacher,
        teacher_feats,
    })
}

/// Every utterance must have a target sequence of matching length, in id order.
fn check_coverage(ids: &[(u32, usize)], frames: &[usize], path: &Path) -> Result<()> {
    if ids.len() != frames.len() {
        return Err(Error::data(format!(
            "{}: targets for {} utterances, corpus has {}",
            path.display(),
            ids.len(),
            frames.len()
        )));
    }
    for (i, (&(id, t), &f)) in ids.iter().zip(frames).enumerate() {
        if id as usize != i {
            return Err(Error::data(format!("{}: missing targets for utterance {i}", path.display())));
        }
        if t != f {
            return Err(Error::data(format!(
                "{}: utterance {i} has {t} target frames, expected {f}",
                path.display()
            )));
        }
    }
    Ok(())
}

fn examples<'a>(targets: &'a Targets, idx: &[usize]) -> Vec<Example<'a>> {
    idx.iter()
        .map(|&i| Example {
            utt_id: i as u32,
            samples: &targets.corpus.utterances[i].samples,
            hard: targets.hard.as_ref().map(|h| h[i].as_slice()),
            soft: targets.soft.as_ref().map(|s| &s[i]),
            teacher: targets.teacher_feats.as_ref().map(|f| &f[i]),
        })
        .collect()
}

pub fn log_line(step: usize, r: &LossReport) -> String {
    format!(
        "step={} total={} ssl={} feat={} masked_frames={}",
        step, r.total, r.ssl, r.feat, r.masked_frames
    )
}

/// Parses a loss log line back into `(step, report)`.
pub fn parse_log_line(line: &str) -> Option<(usize, LossReport)> {
    let mut step = None;
    let mut r = LossReport::default();
    for field in line.split_whitespace() {
        let (k, v) = field.split_once('=')?;
        match k {
            "step" => step = v.parse().ok(),
            "total" => r.total = v.parse().ok()?,
            "ssl" => r.ssl = v.parse().ok()?,
            "feat" => r.feat = v.parse().ok()?,
            "masked_frames" => r.masked_frames = v.parse().ok()?,
            _ => return None,
        }
    }
    Some((step?, r))
}

pub fn periodic_name(step: usize) -> String {
    format!("step-{step:06}.ckpt")
}

fn checkpoint(job: &TrainJob, digest: &str, state: &TrainState) -> Checkpoint {
    Checkpoint {
        header: CheckpointHeader {
            model: job.model.clone(),
            step: state.step,
            config_digest: digest.to_string(),
            seed: job.train.seed,
            projection: state.proj.as_ref().map(|p| ProjectionLayout {
                student_layers: p.student_layers.clone(),
                teacher_layers: p.teacher_layers.clone(),
                alphas: p.alphas.clone(),
            }),
        },
        state: state.clone(),
    }
}

/// Loss over the whole corpus in training-sized batches, with masks drawn
/// for step index `steps` (never used by a training step).
pub fn evaluate_corpus(job: &TrainJob, targets: &Targets, state: &TrainState) -> Result<LossReport> {
    let cfg = &job.train;
    let n = targets.corpus.utterances.len();
    let all: Vec<usize> = (0..n).collect();
    let mut acc = LossReport::default();
    let (mut ssl, mut feat) = (0.0, 0.0);
    let mut batches = 0usize;
    for chunk in all.chunks(cfg.batch_size) {
        let ex = examples(targets, chunk);
        let items = prepare_batch(&ex, &job.model, cfg, cfg.steps)?;
        let r = evaluate(state, &job.model, cfg, &items)?;
        ssl += r.ssl * r.masked_frames as f64;
        feat += r.feat;
        acc.masked_frames += r.masked_frames;
        batches += 1;
    }
    acc.ssl = ssl / acc.masked_frames.max(1) as f64;
    acc.feat = feat / batches.max(1) as f64;
    let (a, b) = cfg.loss.weights();
    acc.total = a * acc.ssl + b * acc.feat;
    Ok(acc)
}

/// Runs (or resumes) training, writing the loss log and checkpoints into
/// `opts.out_dir`.
pub fn run(job: &TrainJob, opts: &RunOptions) -> Result<TrainSummary> {
    job.model.validate()?;
    let cfg = &job.train;
    cfg.validate()?;
    let digest = job.digest();
    let targets = load_targets(cfg, &opts.base_dir)?;

    let mut state = match &opts.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.header.config_digest != digest || ck.header.model != job.model {
                return Err(Error::config(format!(
                    "{}: checkpoint was written under a different training config",
                    p.display()
                )));
            }
            if ck.header.step >= cfg.steps {
                return Ok(TrainSummary {
                    checkpoint: p.clone(),
                    step: ck.header.step,
                    steps_run: 0,
                    last: None,
                    eval: None,
                });
            }
            ck.state
        }
        None => TrainState::init(&job.model, targets.teacher.as_ref().map(|t| &t.cfg), cfg)?,
    };

    fs::create_dir_all(&opts.out_dir).at(&opts.out_dir)?;
    let log_path = opts.out_dir.join(LOG_FILE);
    let mut kept = String::new();
    if state.step > 0 {
        if let Ok(old) = fs::read_to_string(&log_path) {
            for line in old.lines() {
                if parse_log_line(line).is_some_and(|(s, _)| s < state.step) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
    }
    atomic_write(&log_path, kept.as_bytes())?;
    let mut log = fs::OpenOptions::new().append(true).open(&log_path).at(&log_path)?;

    let frames = targets.corpus.frames();
    let end = opts.halt_at.map_or(cfg.steps, |h| h.min(cfg.steps));
    let start = state.step;
    let mut last = None;
    while state.step < end {
        let step = state.step;
        let idx = select_batch(step, &frames, cfg)?;
        let ex = examples(&targets, &idx);
        let items = prepare_batch(&ex, &job.model, cfg, step)?;
        let outcome = match train_step(&mut state, &job.model, cfg, &items) {
            Ok(o) => o,
            Err(e @ dicelab_core::Error::Numeric(_)) => {
                let diag = opts.out_dir.join(format!("diagnostic-step{step:06}.ckpt"));
                checkpoint(job, &digest, &state).save(&diag)?;
                return Err(Error::Core(dicelab_core::Error::Numeric(format!(
                    "{e}; diagnostic checkpoint at {}",
                    diag.display()
                ))));
            }
            Err(e) => return Err(e.into()),
        };
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let line = log_line(step, &outcome.report);
            writeln!(log, "{line}").at(&log_path)?;
            if opts.echo {
                eprintln!("{line}");
            }
        }
        last = Some(outcome.report);
        if state.step % cfg.checkpoint_every == 0 && state.step < cfg.steps {
            checkpoint(job, &digest, &state).save(&opts.out_dir.join(periodic_name(state.step)))?;
        }
    }
    log.flush().at(&log_path)?;

    let ck = checkpoint(job, &digest, &state);
    if state.step < cfg.steps {
        let path = opts.out_dir.join(periodic_name(state.step));
        ck.save(&path)?;
        return Ok(TrainSummary {
            checkpoint: path,
            step: state.step,
            steps_run: state.step - start,
            last,
            eval: None,
        });
    }
    let path = opts.out_dir.join(FINAL_CHECKPOINT);
    ck.save(&path)?;
    let eval = evaluate_corpus(job, &targets, &state)?;
    Ok(TrainSummary {
        checkpoint: path,
        step: state.step,
        steps_run: state.step - start,
        last,
        eval: Some(eval),
    })
}
