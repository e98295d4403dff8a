use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use vldpo::annotate::{
    annotations_by_scene, external_annotate, load_annotations, save_annotations, Annotation, AnnotationRecord,
    DirectoryTransport, HttpTransport, Transport, ANNOTATOR_URL_ENV,
};
use vldpo::bevrender::render_composite;
use vldpo::config::RunConfig;
use vldpo::metrics::{evaluate_model, format_eval_table};
use vldpo::nnet::ForecastModel;
use vldpo::pipeline::{self, FinetuneInputs, Split};
use vldpo::rollout::{load_rollouts, model_fingerprint, save_rollouts, RolloutSet};
use vldpo::scene::{load_dataset, save_dataset, LabeledScene};
use vldpo::train::{FinetuneMode, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "vldpo", version, about = "Preference finetuning pipeline for motion-token forecasters")]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed (the data seed for `generate`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene split as JSONL.
    Generate {
        #[arg(long, value_parser = parse_split, default_value = "train")]
        split: Split,
        /// Number of scenes; defaults to the configured split size.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Imitation-pretrain a fresh model on demonstrations.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch training log (JSONL).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Sample and aggregate candidate trajectories for every scene.
    Rollout {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Condition rollouts on the HLA of these annotations.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one composite PPM per scene into a directory.
    Render {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        rollouts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Render at most this many scenes.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Select a preferred candidate per scene.
    Annotate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        rollouts: PathBuf,
        #[arg(long, value_enum, default_value_t = Annotator::Oracle)]
        annotator: Annotator,
        /// Exchange directory for `--annotator directory`.
        #[arg(long)]
        exchange_dir: Option<PathBuf>,
        /// Endpoint for `--annotator http`; falls back to the environment.
        #[arg(long)]
        url: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetune a pretrained checkpoint.
    Finetune {
        #[arg(long, value_parser = parse_mode)]
        mode: FinetuneMode,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Rollouts the annotations refer to; needed by VL-DPO modes.
        #[arg(long)]
        rollouts: Option<PathBuf>,
        /// Validation scenes evaluated after every epoch.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Validation annotations supplying HLA inputs for conditioned modes.
        #[arg(long)]
        val_annotations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Metrics log (JSONL); defaults to `<out>.metrics.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Report validation metrics of a checkpoint.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Feed the HLA of these annotations as model input.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Structured report with per-scene metrics (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare most-likely against annotator-selected candidates.
    CompareSelection {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        rollouts: PathBuf,
        /// Selections to score; the scripted oracle is used when omitted.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Annotator {
    Oracle,
    Directory,
    Http,
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split `{s}` (expected pretrain, train or val)"))
}

fn parse_mode(s: &str) -> Result<FinetuneMode, String> {
    s.parse::<FinetuneMode>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Generate { .. } => cfg.data.seed = seed,
            _ => cfg.seed = seed,
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_data(path: &Path) -> Result<Vec<LabeledScene>> {
    load_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn read_model(path: &Path) -> Result<ForecastModel> {
    ForecastModel::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn read_rollouts(path: &Path) -> Result<Vec<RolloutSet>> {
    load_rollouts(path).with_context(|| format!("reading rollouts {}", path.display()))
}

fn read_annotations(path: &Path) -> Result<BTreeMap<String, Annotation>> {
    let records = load_annotations(path).with_context(|| format!("reading annotations {}", path.display()))?;
    Ok(annotations_by_scene(&records))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: serde::Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in rows {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Generate { split, n, out } => {
            let mut cfg = cfg;
            if let Some(n) = n {
                match split {
                    Split::Pretrain => cfg.data.pretrain_scenes = n,
                    Split::Train => cfg.data.train_scenes = n,
                    Split::Val => cfg.data.val_scenes = n,
                }
            }
            let scenes = pipeline::generate_split(&cfg, split)?;
            save_dataset(&scenes, &out).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {} scenes to {}", scenes.len(), out.display());
        }
        Command::Pretrain { data, out, log } => {
            let data = read_data(&data)?;
            let (model, records) = pipeline::pretrain(&cfg, &data, |_, r| {
                eprintln!("epoch {}: loss {:.4}", r.epoch, r.loss);
                Ok(())
            })?;
            model.save(&out).with_context(|| format!("writing {}", out.display()))?;
            if let Some(log) = log {
                write_jsonl(&records, &log)?;
            }
            eprintln!("wrote checkpoint {}", out.display());
        }
        Command::Rollout {
            model,
            data,
            annotations,
            out,
        } => {
            let model = read_model(&model)?;
            let data = read_data(&data)?;
            let hla = annotations.as_deref().map(read_annotations).transpose()?.map(|a| pipeline::hla_map(&a));
            let sets = pipeline::rollout_all(&cfg, &model, &data, hla.as_ref())?;
            save_rollouts(&sets, &out).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote rollouts for {} scenes to {}", sets.len(), out.display());
        }
        Command::Render {
            data,
            rollouts,
            out,
            limit,
        } => {
            let data = read_data(&data)?;
            let sets = by_scene(read_rollouts(&rollouts)?);
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut n = 0;
            for ls in data.iter().take(limit.unwrap_or(usize::MAX)) {
                let id = &ls.scene.scene_id;
                let rs = sets.get(id).with_context(|| format!("no rollouts for scene {id}"))?;
                let path = out.join(format!("{id}.ppm"));
                render_composite(&ls.scene, rs, &cfg.render)?.save_ppm(&path)?;
                n += 1;
            }
            eprintln!("rendered {n} composites into {}", out.display());
        }
        Command::Annotate {
            data,
            rollouts,
            annotator,
            exchange_dir,
            url,
            out,
        } => {
            let timeout = Duration::from_secs_f64(cfg.annotator.timeout_secs);
            let transport: Option<(Box<dyn Transport>, &str)> = match annotator {
                Annotator::Oracle => None,
                Annotator::Directory => {
                    let dir = exchange_dir.context("--annotator directory needs --exchange-dir")?;
                    Some((Box::new(DirectoryTransport::new(dir, timeout)), "directory"))
                }
                Annotator::Http => {
                    let t = match url {
                        Some(u) => HttpTransport::new(u, timeout),
                        None => HttpTransport::from_env(timeout).with_context(|| {
                            format!("--annotator http needs --url or the {ANNOTATOR_URL_ENV} environment variable")
                        })?,
                    };
                    Some((Box::new(t), "http"))
                }
            };
            let data = read_data(&data)?;
            let sets = read_rollouts(&rollouts)?;
            let records = match transport {
                None => pipeline::oracle_annotate_all(&cfg, &data, &sets)?,
                Some((mut t, id)) => annotate_external(&cfg, &data, &sets, t.as_mut(), id)?,
            };
            save_annotations(&records, &out).with_context(|| format!("writing {}", out.display()))?;
            let done = records.iter().filter(|r| r.annotation().is_some()).count();
            eprintln!(
                "annotated {done} scenes, skipped {}; wrote {}",
                records.len() - done,
                out.display()
            );
        }
        Command::Finetune {
            mode,
            model,
            data,
            annotations,
            rollouts,
            val,
            val_annotations,
            out,
            log,
        } => {
            if mode.needs_annotations() && annotations.is_none() {
                bail!("mode {mode} needs an annotation store: pass --annotations <path>");
            }
            if mode.uses_vl_dpo() && rollouts.is_none() {
                bail!("mode {mode} needs the annotated rollouts: pass --rollouts <path>");
            }
            let init = read_model(&model)?;
            let data = read_data(&data)?;
            let annotations = annotations.as_deref().map(read_annotations).transpose()?;
            let rollouts = rollouts.as_deref().map(read_rollouts).transpose()?;
            let val = val.as_deref().map(read_data).transpose()?;
            let val_hla = val_annotations
                .as_deref()
                .map(read_annotations)
                .transpose()?
                .map(|a| pipeline::hla_map(&a));
            let tc = TrainConfig {
                mode,
                ..cfg.finetune.clone()
            };
            let inputs = FinetuneInputs {
                annotations: annotations.as_ref(),
                rollouts: rollouts.as_deref(),
                val: val.as_deref(),
                val_hla: val_hla.as_ref(),
            };
            let (model, records) = pipeline::finetune(&cfg, init, &data, tc, inputs)?;
            for r in &records {
                match &r.eval {
                    Some(e) => eprintln!(
                        "epoch {}: loss {:.4}, val RFS {:.4}, ADE {:.4}",
                        r.train.epoch, r.train.loss, e.rfs, e.ade
                    ),
                    None => eprintln!("epoch {}: loss {:.4}", r.train.epoch, r.train.loss),
                }
            }
            model.save(&out).with_context(|| format!("writing {}", out.display()))?;
            let log = log.unwrap_or_else(|| suffixed(&out, ".metrics.jsonl"));
            write_jsonl(&records, &log)?;
            eprintln!("wrote checkpoint {} and metrics {}", out.display(), log.display());
        }
        Command::Evaluate {
            model,
            data,
            annotations,
            out,
        } => {
            let name = model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let model = read_model(&model)?;
            let data = read_data(&data)?;
            let hla = annotations.as_deref().map(read_annotations).transpose()?.map(|a| pipeline::hla_map(&a));
            let id = model_fingerprint(&model);
            let (report, scenes) =
                evaluate_model(&model, &id, &data, hla.as_ref(), &cfg.rollout, cfg.seed, &cfg.trust_region)?;
            print!("{}", format_eval_table(&[(name, report.clone())]));
            if let Some(out) = out {
                let doc = serde_json::json!({ "model_id": id, "report": report, "scenes": scenes });
                write_json(&doc, &out)?;
            }
        }
        Command::CompareSelection {
            data,
            rollouts,
            annotations,
            out,
        } => {
            let data = read_data(&data)?;
            let sets = read_rollouts(&rollouts)?;
            let annotations = annotations.as_deref().map(read_annotations).transpose()?;
            let report = pipeline::compare_selection(&cfg, &data, &sets, annotations.as_ref())?;
            let selector = if annotations.is_some() { "Annotator" } else { "Oracle" };
            print!("{}", report.table(selector));
            if let Some(out) = out {
                write_json(&report, &out)?;
            }
        }
    }
    Ok(())
}

fn annotate_external(
    cfg: &RunConfig,
    data: &[LabeledScene],
    sets: &[RolloutSet],
    transport: &mut dyn Transport,
    annotator_id: &str,
) -> Result<Vec<AnnotationRecord>> {
    let sets = by_scene(sets.to_vec());
    let mut records = Vec::with_capacity(data.len());
    for ls in data {
        let id = &ls.scene.scene_id;
        let rs = sets.get(id).with_context(|| format!("no rollouts for scene {id}"))?;
        let outcome = external_annotate(
            &ls.scene,
            rs,
            transport,
            &cfg.render,
            annotator_id,
            cfg.annotator.max_retries,
        )?;
        if let AnnotationRecord::Skipped { reason, .. } = &outcome.record {
            eprintln!("skipped {id}: {reason}");
        }
        records.push(outcome.record);
    }
    Ok(records)
}

fn by_scene(sets: Vec<RolloutSet>) -> BTreeMap<String, RolloutSet> {
    sets.into_iter().map(|s| (s.scene_id.clone(), s)).collect()
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
