//! `dicelab` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dicelab_core::clustering::{assign_hard, kmeans_fit, soft_labels, KMeansConfig};
use dicelab_core::corpus::CorpusConfig;
use dicelab_core::plan::preset;
use dicelab_core::probes::{ProbeConfig, ProbeTask};

use crate::driver::{self, RunOptions, TrainJob};
use crate::error::{Error, ErrorClass, IoContext, Result};
use crate::features::{mfcc_features, teacher_features};
use crate::formats::{
    atomic_write, read_codebook, read_features, sha256_file, write_codebook, write_features, write_labels,
    write_soft_labels, Checkpoint,
};
use crate::pipeline::{self, manifest_root, ExperimentManifest, ExtraProbe, PipelineOptions, ProbeRecord};
use crate::probing::probe_encoder;
use crate::report;
use crate::store::Corpus;

#[derive(Debug, Parser)]
#[command(name = "dicelab", version, about = "Cluster-target distillation of masked-prediction speech encoders")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: GlobalOptions,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOptions {
    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Global seed; every stage seed derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Repeat for more progress output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Print nothing on success.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    /// Worker threads for extraction and probing (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a corpus into the output directory.
    GenCorpus {
        #[arg(long)]
        n_utts: usize,
        #[arg(long)]
        phonemes: usize,
        #[arg(long)]
        speakers: usize,
        #[arg(long)]
        min_secs: Option<f64>,
        #[arg(long)]
        max_secs: Option<f64>,
        #[arg(long)]
        snr_db: Option<f64>,
    },
    /// Dump MFCCs, or one layer of a trained encoder.
    ExtractFeatures {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, requires = "layer")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        layer: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a k-means codebook.
    Kmeans {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign hard or soft cluster labels.
    Labels {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Hard)]
        mode: Mode,
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop with a checkpoint after this many steps.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Run a preset pipeline end to end.
    Distill {
        #[arg(long)]
        preset: String,
        /// `key=value`, optionally `stageN.key=value`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Probe a frozen checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        /// Corpus directory; defaults to the manifest's corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Experiment manifest to append the result to.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Metric table over experiment manifests.
    Report {
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        /// Also write a JSON summary here (`-` for stdout).
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Hard,
    Soft,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let text = e.render().to_string();
            let first = text
                .lines()
                .find(|l| l.starts_with("error:"))
                .map(|l| l.trim_start_matches("error:").trim().to_string());
            match first {
                Some(msg) => eprintln!("ERROR(config): {msg}"),
                None => eprintln!("ERROR(config): missing subcommand"),
            }
            eprintln!("{}", text.trim_end());
            return ErrorClass::Config.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let class = e.class();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("ERROR({}): {}", class.name(), msg);
            class.exit_code()
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(Error::config("--threads must be >= 1"));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::config(format!("cannot start worker threads: {e}")))?;
    fs::create_dir_all(&g.out_dir).at(&g.out_dir)?;
    pool.install(|| dispatch(&cli.command, g))
}

fn say(g: &GlobalOptions, msg: impl AsRef<str>) {
    if !g.quiet {
        println!("{}", msg.as_ref());
    }
}

fn check_tau(tau: Option<f64>) -> Result<()> {
    match tau {
        Some(t) if !(t > 0.0 && t.is_finite()) => Err(Error::config(format!("--tau must be > 0, got {t}"))),
        _ => Ok(()),
    }
}

fn dispatch(cmd: &Command, g: &GlobalOptions) -> Result<()> {
    let seed = g.seed.unwrap_or(0);
    match cmd {
        Command::GenCorpus {
            n_utts,
            phonemes,
            speakers,
            min_secs,
            max_secs,
            snr_db,
        } => {
            let mut cfg = CorpusConfig::new(*n_utts, *phonemes, *speakers, seed);
            cfg.min_secs = min_secs.unwrap_or(cfg.min_secs);
            cfg.max_secs = max_secs.unwrap_or(cfg.max_secs);
            cfg.snr_db = snr_db.unwrap_or(cfg.snr_db);
            let corpus = Corpus::generate(&cfg)?;
            corpus.save(&g.out_dir)?;
            say(g, format!("wrote {} utterances to {}", n_utts, g.out_dir.display()));
        }
        Command::ExtractFeatures {
            corpus,
            checkpoint,
            layer,
            out,
        } => {
            let corpus = Corpus::load(corpus)?;
            let dump = match (checkpoint, layer) {
                (Some(c), Some(l)) => teacher_features(&Checkpoint::load(c)?.encoder()?, &corpus, *l)?,
                _ => mfcc_features(&corpus)?,
            };
                        write_features(out, &dump)?;
            say(g, format!("wrote {} frames of dim {} to {}", dump.total_frames(), dump.dim, out.display()));
        }
        Command::Kmeans {
            features,
            k,
            restarts,
            max_iters,
            out,
        } => {
            let dump = read_features(features)?;
            let mut cfg = KMeansConfig::new(*k, seed);
            cfg.n_init = restarts.unwrap_or(cfg.n_init);
            cfg.max_iters = max_iters.unwrap_or(cfg.max_iters);
            let cb = kmeans_fit(&dump, &cfg)?;
                        write_codebook(out, &cb)?;
            say(g, format!("K={} inertia={} iterations={}", cb.k(), cb.inertia, cb.iterations));
        }
        Command::Labels {
            codebook,
            features,
            mode,
            tau,
            out,
        } => {
            check_tau(*tau)?;
            let cb = read_codebook(codebook)?;
            let dump = read_features(features)?;
                        match mode {
                Mode::Hard => write_labels(out, cb.k(), &assign_hard(&cb, &dump)?)?,
                Mode::Soft => {
                    let tau = tau.ok_or_else(|| Error::config("soft labels need --tau"))?;
                    write_soft_labels(out, tau, cb.k(), &soft_labels(&cb, &dump, tau)?)?;
                }
            }
            say(g, format!("wrote labels for {} utterances to {}", dump.items.len(), out.display()));
        }
        Command::Train { config, resume, until } => {
            let text = fs::read(config).at(config)?;
            let mut job = TrainJob::from_json(&text, config)?;
            if let Some(s) = g.seed {
                job.train.seed = s;
            }
            let base = config.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
            let opts = RunOptions {
                resume: resume.clone(),
                halt_at: *until,
                echo: g.verbose > 0,
                ..RunOptions::new(base, &g.out_dir)
            };
            let s = driver::run(&job, &opts)?;
            say(g, format!("step {} checkpoint {}", s.step, s.checkpoint.display()));
            if let Some(e) = s.eval {
                say(g, format!("eval {}", driver::log_line(s.step, &e)));
            }
        }
        Command::Distill { preset: name, overrides } => {
            let mut plan = preset(name, seed)?;
            for o in overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
                plan.apply_override(k.trim(), v.trim())?;
            }
            plan.validate()?;
            let opts = PipelineOptions { echo: g.verbose > 0 };
            let m = pipeline::run_plan(&plan, &g.out_dir, &opts)?;
            say(g, report::table(&report::rows(&[m])));
        }
        Command::Probe {
            checkpoint,
            task,
            corpus,
            manifest,
            steps,
        } => {
            let task = ProbeTask::parse(task)?;
            let corpus_dir = match (corpus, manifest) {
                (Some(c), _) => c.clone(),
                (None, Some(m)) => {
                    let mf = ExperimentManifest::load(m)?;
                    let p = manifest_root(m).join(&mf.corpus.path);
                    p.parent().map(Path::to_path_buf).unwrap_or(p)
                }
                (None, None) => return Err(Error::config("probe needs --corpus or --manifest")),
            };
            let corpus = Corpus::load(&corpus_dir)?;
            let encoder = Checkpoint::load(checkpoint)?.encoder()?;
            let mut cfg = ProbeConfig::new(task, seed);
            cfg.steps = steps.unwrap_or(cfg.steps);
            let r = probe_encoder(&encoder, &corpus, &cfg)?;
            let record = ProbeRecord::new(&cfg, &r);
            if let Some(m) = manifest {
                let mut mf = ExperimentManifest::load(m)?;
                mf.extra_probes.push(ExtraProbe {
                    checkpoint: checkpoint.display().to_string(),
                    checkpoint_sha256: sha256_file(checkpoint)?,
                    record: record.clone(),
                });
                mf.save(m)?;
            }
            say(g, serde_json::to_string(&record).expect("record serializes"));
        }
        Command::Report { manifest, json } => {
            let ms = manifest
                .iter()
                .map(|p| ExperimentManifest::load(p))
                .collect::<Result<Vec<_>>>()?;
            let rows = report::rows(&ms);
            print!("{}", report::table(&rows));
            for m in &ms {
                for p in &m.extra_probes {
                    println!(
                        "{}  extra probe {} {}: {:.3}",
                        m.preset,
                        p.record.task.name(),
                        p.checkpoint,
                        p.record.accuracy
                    );
                }
            }
            if let Some(j) = json {
                let text = serde_json::to_vec_pretty(&rows).expect("rows serialize");
                if j.as_os_str() == "-" {
                    std::io::stdout()
                        .write_all(&text)
                        .and_then(|_| writeln!(std::io::stdout()))
                        .at(j)?;
                } else {
                    atomic_write(j, &text)?;
                }
            }
        }
    }
    Ok(())
}
