mod config;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use audiocolor::audio::{read_wav, AudioFrontend};
use audiocolor::checkpoint::{CheckpointBundle, EpochRecord, Stage};
use audiocolor::colorspace::grayscale;
use audiocolor::data::{generate_synthetic_dataset, load_manifest, load_samples, read_png, write_png, Split};
use audiocolor::error::Error;
use audiocolor::parallel::Execution;
use audiocolor::pipeline::{evaluate, train_stage, AblationMode, Colorizer, StageData, TrainContext};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::config::RunConfig;

const THREADS_ENV: &str = "AUDIOCOLOR_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "audiocolor",
    version,
    about = "Audio-conditioned automatic image colorization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `training.stage1.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Sets every data, model and stage seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        if let Some(c) = &self.config {
            if !c.is_file() {
                bail!("config file {} does not exist", c.display());
            }
        }
        let cfg = RunConfig::resolve(self.config.as_deref(), &self.overrides, self.seed)?;
        println!("# resolved configuration\n{}", cfg.to_toml()?);
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic iso-luminant dataset.
    PrepareData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset root; splits go to `<root>/{train,val,test}`.
        #[arg(long)]
        root: PathBuf,
    },
    /// Train one stage.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// 1, 2, 3, rnet or joint.
        #[arg(long)]
        stage: Stage,
        #[arg(long)]
        data: PathBuf,
        /// Run directory holding checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
        /// Prerequisite checkpoint; defaults to the previous stage in `--out`.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Continue this stage from its checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
        /// Override the stage's epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Colorize one grayscale image.
    Colorize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        audio: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        mode: AblationMode,
        #[arg(long)]
        output: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split under one or more modes.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Repeatable; defaults to `full`.
        #[arg(long = "mode")]
        modes: Vec<AblationMode>,
        /// JSONL report with per-image rows and one summary per mode.
        #[arg(long)]
        report: PathBuf,
    },
}

fn checkpoint_path(out: &Path, stage: Stage) -> PathBuf {
    out.join(format!("{}.ckpt.json", stage.as_str()))
}

fn load_bundle(path: &Path) -> Result<CheckpointBundle> {
    CheckpointBundle::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// The checkpoint a stage starts from when `--from` is not given.
fn default_input(stage: Stage, out: &Path) -> Result<Option<PathBuf>> {
    let candidates: &[Stage] = match stage {
        Stage::Stage1 | Stage::Joint => return Ok(None),
        Stage::Stage2 => &[Stage::Stage1],
        Stage::Rnet => &[Stage::Stage2],
        Stage::Stage3 => &[Stage::Rnet, Stage::Stage2],
    };
    for &c in candidates {
        let p = checkpoint_path(out, c);
        if p.is_file() {
            return Ok(Some(p));
        }
    }
    let need = stage.prerequisite().expect("stage has a prerequisite");
    Err(anyhow!(Error::MissingStage {
        missing: format!(
            "{need} (no {} in {})",
            checkpoint_path(out, need).display(),
            out.display()
        ),
        wanted: stage.to_string(),
    }))
}

fn prepare_data(cfg: &RunConfig, root: &Path) -> Result<()> {
    let spec = &cfg.data.synthetic;
    spec.validate()?;
    let stamp = root.join("prepare.toml");
    let want = toml::to_string_pretty(&cfg.data)?;
    if std::fs::read_to_string(&stamp).ok().as_deref() == Some(want.as_str()) {
        let intact = [Split::Train, Split::Val, Split::Test].into_iter().all(|s| {
            load_manifest(root, s)
                .map(|(m, r)| r.rejected.is_empty() && m.len() == cfg.data.count(s))
                .unwrap_or(false)
        });
        if intact {
            println!("dataset at {} is up to date; nothing to do", root.display());
            return Ok(());
        }
    }
    std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let exec = Execution::default();
    for (i, split) in [Split::Train, Split::Val, Split::Test].into_iter().enumerate() {
        let dir = root.join(split.as_str());
        if dir.exists() {
            std::fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        let n = cfg.data.count(split);
        let m = generate_synthetic_dataset(spec, root, split, n, cfg.data.seed.wrapping_add(i as u64), exec)?;
        let mut per_hue: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for p in &m.pairs {
            if let Some(l) = &p.label {
                *per_hue.entry((l.family, l.hue)).or_default() += 1;
            }
        }
        let a = per_hue
            .iter()
            .filter(|((_, h), _)| *h == 0)
            .map(|(_, c)| c)
            .sum::<usize>();
        println!(
            "{split}: {} pairs, {} families, hue balance {a}/{}",
            m.len(),
            per_hue
                .keys()
                .map(|(f, _)| f)
                .collect::<std::collections::BTreeSet<_>>()
                .len(),
            m.len() - a
        );
    }
    std::fs::write(&stamp, want).with_context(|| format!("writing {}", stamp.display()))?;
    Ok(())
}

fn train(cfg: RunConfig, args: TrainArgs) -> Result<()> {
    let TrainArgs {
        stage,
        data,
        out,
        from,
        resume,
        epochs,
    } = args;
    let mut cfg = cfg;
    if let Some(e) = epochs {
        cfg.training.for_stage_mut(stage).epochs = e;
    }
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join(format!("{}.config.toml", stage.as_str())), cfg.to_toml()?)?;
    let input = if resume {
        let p = checkpoint_path(&out, stage);
        if !p.is_file() {
            bail!("--resume: no {stage} checkpoint at {}", p.display());
        }
        Some(p)
    } else {
        match from {
            Some(p) => Some(p),
            None => default_input(stage, &out)?,
        }
    };
    let input = input.as_deref().map(load_bundle).transpose()?;
    if let Some(b) = &input {
        info!(
            "starting {stage} from a {} checkpoint ({} epochs done)",
            b.stage, b.epochs_completed
        );
    }

    let model_cfg = match &input {
        Some(b) => b.config.clone(),
        None => cfg.model.clone(),
    };
    let frontend = AudioFrontend::new(model_cfg.spectrogram.clone())?;
    let exec = Execution::default();
    let load = |split| -> Result<Vec<_>> {
        let (m, report) = load_manifest(&data, split)?;
        for (p, why) in &report.rejected {
            warn!("skipping {}: {why}", p.display());
        }
        Ok(load_samples(&data, &m, &frontend, exec)?)
    };
    let train_set = load(Split::Train)?;
    let val_set = load(Split::Val)?;
    if train_set.is_empty() {
        bail!("no training pairs under {}", data.join(Split::Train.as_str()).display());
    }

    let log_path = out.join("train_log.jsonl");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let started = Instant::now();
    let mut log_err = None;
    let mut on_epoch = |r: &EpochRecord| {
        println!("{} epoch {:>3}  loss {:.6}  {:?}", r.stage, r.epoch, r.loss, r.metrics);
        let mut v = serde_json::to_value(r).expect("record serializes");
        v["elapsed_secs"] = started.elapsed().as_secs_f64().into();
        if let Err(e) = writeln!(log, "{v}") {
            log_err.get_or_insert(e);
        }
    };
    let ckpt = checkpoint_path(&out, stage);
    let mut ctx = TrainContext {
        exec,
        on_epoch: Some(&mut on_epoch),
        checkpoint_path: Some(ckpt.clone()),
    };
    let result = train_stage(
        stage,
        model_cfg,
        StageData {
            train: &train_set,
            val: &val_set,
        },
        cfg.training.for_stage(stage),
        input.as_ref(),
        &mut ctx,
    );
    if let Some(e) = log_err {
        bail!("writing {}: {e}", log_path.display());
    }
    let bundle = match result {
        Ok(b) => b,
        Err(Error::Diverged {
            stage,
            epoch,
            reason,
            last_good,
        }) => {
            if let Some(b) = last_good {
                let p = out.join(format!("{stage}.last_good.ckpt.json"));
                b.save(&p)?;
                eprintln!("last good checkpoint written to {}", p.display());
            }
            bail!("training diverged in {stage} at epoch {epoch}: {reason}");
        }
        Err(e) => return Err(e.into()),
    };
    bundle.save(&ckpt)?;
    println!(
        "{stage}: {} epochs in {:.1}s, checkpoint {}",
        bundle.epochs_completed,
        started.elapsed().as_secs_f64(),
        ckpt.display()
    );
    Ok(())
}

struct TrainArgs {
    stage: Stage,
    data: PathBuf,
    out: PathBuf,
    from: Option<PathBuf>,
    resume: bool,
    epochs: Option<usize>,
}

fn colorize(checkpoint: &Path, image: &Path, audio: Option<&Path>, mode: AblationMode, output: &Path) -> Result<()> {
    let c = Colorizer::from_bundle(&load_bundle(checkpoint)?)?;
    let gray = grayscale(&read_png(image)?);
    let spec = match audio {
        Some(p) => Some(c.frontend()?.compute(&read_wav(p)?)),
        None => None,
    };
    let out = c.infer(&gray, spec.as_ref(), mode)?;
    write_png(output, &out.image.image)?;
    println!("mode={mode} r={:.6} output={}", out.r.value(), output.display());
    Ok(())
}

fn evaluate_cmd(checkpoint: &Path, data: &Path, split: Split, modes: &[AblationMode], report: &Path) -> Result<bool> {
    let c = Colorizer::from_bundle(&load_bundle(checkpoint)?)?;
    let exec = Execution::default();
    let (manifest, lr) = load_manifest(data, split)?;
    for (p, why) in &lr.rejected {
        warn!("skipping {}: {why}", p.display());
    }
    if manifest.is_empty() {
        bail!("manifest for {split} under {} is empty", data.display());
    }
    let samples = load_samples(data, &manifest, &c.frontend()?, exec)?;
    let modes = if modes.is_empty() {
        &[AblationMode::Full][..]
    } else {
        modes
    };
    let mut text = String::new();
    let mut ok = true;
    for &m in modes {
        match evaluate(&c, &samples, m, None, exec) {
            Ok(r) => {
                println!("[{m}]\n{}", r.summary_line());
                text.push_str(&r.to_jsonl()?);
            }
            Err(e) => {
                eprintln!("[{m}] failed: {e}");
                ok = false;
            }
        }
    }
    if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(report, text).with_context(|| format!("writing {}", report.display()))?;
    Ok(ok)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .with_context(|| format!("{THREADS_ENV}={v} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    init_threads()?;
    match cli.command {
        Command::PrepareData { cfg, root } => prepare_data(&cfg.resolve()?, &root)?,
        Command::Train {
            cfg,
            stage,
            data,
            out,
            from,
            resume,
            epochs,
        } => train(
            cfg.resolve()?,
            TrainArgs {
                stage,
                data,
                out,
                from,
                resume,
                epochs,
            },
        )?,
        Command::Colorize {
            checkpoint,
            image,
            audio,
            mode,
            output,
        } => colorize(&checkpoint, &image, audio.as_deref(), mode, &output)?,
        Command::Evaluate {
            checkpoint,
            data,
            split,
            modes,
            report,
        } => return evaluate_cmd(&checkpoint, &data, split, &modes, &report),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
