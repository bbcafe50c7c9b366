use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use dynprompt::ablate::{ablate, Axis};
use dynprompt::checkpoint::Checkpoint;
use dynprompt::config::{Head, RunConfig};
use dynprompt::data::{generate_sample, load_annotations, save_annotations, GeneratorConfig, GroundingSample, SceneSpec, Vocabulary};
use dynprompt::eval::{evaluate, Predictor};
use dynprompt::gradcheck::check_model;
use dynprompt::harness::{eval_corpus, output_dir, train_corpus, train_new, RunOutput};
use dynprompt::visualize::visualize;

#[derive(Parser)]
#[command(name = "dynprompt", version, about = "Dynamic prompting for panoptic narrative grounding at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run config; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overridden by DYNPROMPT_OUT_DIR).
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Threads for corpus generation; the samples do not depend on it.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum HeadArg {
    Diffusion,
    Adapter,
    Decoder,
}

impl From<HeadArg> for Head {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Diffusion => Head::Diffusion,
            HeadArg::Adapter => Head::Adapter,
            HeadArg::Decoder => Head::Decoder,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the training and held-out corpora, vocabulary and config.
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes checkpoints and losses.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Annotation file to train on instead of the generated corpus.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes metrics.csv and records.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Annotation file; defaults to the held-out corpus of the checkpoint's config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Head whose masks are scored (defaults to the config's eval.head).
        #[arg(long, value_enum)]
        head: Option<HeadArg>,
        /// Score the ground truth against itself instead of a model.
        #[arg(long)]
        ground_truth: bool,
    },
    /// Finite-difference check of the full model at micro scale.
    Gradcheck {
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Freeze the backbone and text encoder first.
        #[arg(long)]
        frozen: bool,
    },
    /// Train every variant of one axis and tabulate held-out AR.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// eipa, mlma or adapter_position.
        #[arg(long)]
        axis: String,
    },
    /// Render attention panels and mask overlays for one sample.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scene seed of a freshly generated sample.
        #[arg(long, default_value_t = 7)]
        sample_seed: u64,
        /// Take the sample from this annotation file instead.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum)]
        head: Option<HeadArg>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn out_dir(common: &Common) -> PathBuf {
    output_dir(&common.out)
}

fn checkpoint_path(explicit: Option<&Path>, dir: &Path) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| dir.join("checkpoint.json"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { common } => {
            let cfg = load_config(common.config.as_deref())?;
            let dir = out_dir(&common);
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            save_annotations(&train_corpus(&cfg, common.threads)?, &dir.join("train.json"))?;
            save_annotations(&eval_corpus(&cfg, common.threads)?, &dir.join("eval.json"))?;
            Vocabulary::builtin().save(&dir.join("vocab.json"))?;
            write(&dir.join("config.toml"), &cfg.to_toml())?;
        }
        Command::Train { common, data } => {
            let cfg = load_config(common.config.as_deref())?;
            let dir = out_dir(&common);
            let corpus = match data {
                Some(p) => load_annotations(&p)?,
                None => train_corpus(&cfg, common.threads)?,
            };
            let out = RunOutput::new(&dir)?;
            write(&dir.join("config.toml"), &cfg.to_toml())?;
            let (trainer, reports) = train_new(&cfg, &corpus, &Vocabulary::builtin(), Some(&out))?;
            if let (Some(first), Some(last)) = (reports.first(), reports.last()) {
                println!("trained {} steps: loss {:.4} -> {:.4}", trainer.step, first.total, last.total);
            }
            println!("checkpoint: {}", out.checkpoint_path(None).display());
        }
        Command::Eval { common, checkpoint, data, head, ground_truth } => {
            let dir = out_dir(&common);
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let restored;
            let (cfg, predictor_parts) = if ground_truth {
                (load_config(common.config.as_deref())?, None)
            } else {
                let path = checkpoint_path(checkpoint.as_deref(), &dir);
                restored = Checkpoint::load(&path)?.restore()?;
                (restored.config.clone(), Some(&restored))
            };
            let samples = match data {
                Some(p) => load_annotations(&p)?,
                None => eval_corpus(&cfg, common.threads)?,
            };
            let head = head.map(Head::from).unwrap_or(cfg.eval.head);
            let (records, ev) = match predictor_parts {
                Some(r) => evaluate(Predictor::Model { model: &r.model, store: &r.store, head }, &samples, &r.vocabulary)?,
                None => evaluate(Predictor::GroundTruth, &samples, &Vocabulary::builtin())?,
            };
            write(&dir.join("metrics.csv"), &ev.to_csv())?;
            let mut rec = String::from("sample,phrase,iou,is_thing,is_plural\n");
            for r in &records {
                rec.push_str(&format!("{},{},{},{},{}\n", r.sample, r.phrase, r.iou, r.is_thing, r.is_plural));
            }
            write(&dir.join("records.csv"), &rec)?;
            println!("{}", ev.summary());
        }
        Command::Gradcheck { eps, tol, seed, frozen } => {
            let mut cfg = dynprompt::gradcheck::micro_config();
            cfg.freeze.backbone = frozen;
            cfg.freeze.text_encoder = frozen;
            let r = check_model(&cfg, seed, eps)?;
            for p in &r.report.params {
                match p.max_rel_error {
                    Some(e) => println!(
                        "{:<40} {:>6} {:.3e} {}",
                        p.name,
                        p.numel,
                        e,
                        if e <= tol { "ok" } else { "FAIL" }
                    ),
                    None => println!("{:<40} {:>6} frozen", p.name, p.numel),
                }
            }
            let failing: usize = r.report.params.iter().map(|p| p.entry_errors.iter().filter(|&&e| e > tol).count()).sum();
            let entries: usize = r.report.params.iter().filter(|p| !p.frozen).map(|p| p.numel).sum();
            println!(
                "{} trainable / {} frozen tensors; max relative error {:.3e}; {failing} of {entries} entries above {tol:e}",
                r.trainable,
                r.frozen,
                r.report.max_rel_error()
            );
            if !r.report.passes(tol) {
                bail!("gradient check failed at tolerance {tol:e}");
            }
        }
        Command::Ablate { common, axis } => {
            let cfg = load_config(common.config.as_deref())?;
            let axis: Axis = axis.parse()?;
            let dir = out_dir(&common);
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let train = train_corpus(&cfg, common.threads)?;
            let held_out = eval_corpus(&cfg, common.threads)?;
            let table = ablate(&cfg, axis, &train, &held_out, &Vocabulary::builtin(), cfg.eval.head)?;
            let name = format!("{axis:?}").to_lowercase();
            write(&dir.join(format!("ablation_{name}.csv")), &table.to_csv())?;
            write(&dir.join(format!("ablation_{name}.json")), &serde_json::to_string_pretty(&table)?)?;
            println!("corpus digest {}", table.corpus_digest);
            print!("{}", table.to_csv());
        }
        Command::Visualize { common, checkpoint, sample_seed, data, index, head } => {
            let dir = out_dir(&common);
            let path = checkpoint_path(checkpoint.as_deref(), &dir);
            let r = Checkpoint::load(&path)?.restore()?;
            let sample: GroundingSample = match data {
                Some(p) => load_annotations(&p)?.into_iter().nth(index).with_context(|| format!("no sample {index} in {}", p.display()))?,
                None => {
                    let d = &r.config.data;
                    let spec = SceneSpec {
                        seed: sample_seed,
                        num_things: d.things[1],
                        num_stuff: d.stuff[1],
                        plural_probability: d.plural_probability,
                        distractor_phrase_probability: d.distractor_probability,
                    };
                    generate_sample(&spec, &GeneratorConfig::from(d))?
                }
            };
            let head = head.map(Head::from).unwrap_or(r.config.eval.head);
            for p in visualize(&r.model, &r.store, &sample, &r.vocabulary, head, &dir.join("figures"))? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
