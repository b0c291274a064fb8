//! Command-line surface: `make-toy`, `train`, `generate`, `evaluate`.
//!
//! Each command is also a plain function so it can be driven from code.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint;
use crate::config::{DataConfig, RunConfig};
use crate::data::{
    augment_target_pool, load_dataset, load_pool, Domain, ImageSample, PairedDataset,
};
use crate::error::{contract, Error, Result};
use crate::eval::{
    emit_grid, evaluate, synthesize, write_report, MetricRow, ReferenceKind, SynthesisManner,
};
use crate::losses::{LossReport, Phase};
use crate::nets::ModelBundle;
use crate::toy::{write_toy, ToyLayout};
use crate::train::{
    relation_probe, train_baseline_step, train_relation_step, train_stage1_step, train_stage2_step,
    Ablation, RelationFit, TrainState,
};

#[derive(Debug, Parser)]
#[command(
    name = "fewshot-gan",
    version,
    about = "Paired few-shot cross-domain image generation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `section.key=value`, applied after the config file.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Training seed for `train`, sampling seed for `generate` and `evaluate`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root of a `make-toy` directory; fills in the `data` section.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    All,
    #[value(name = "1")]
    Stage1,
    Relation,
    #[value(name = "2")]
    Stage2,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    None,
    NoRelation,
    NoAdversarial,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::None => Ablation::FULL,
            AblationArg::NoRelation => Ablation::NO_RELATION,
            AblationArg::NoAdversarial => Ablation::NO_RELATION_NO_ADVERSARIAL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MannerArg {
    Rand,
    Syn,
}

impl From<MannerArg> for SynthesisManner {
    fn from(m: MannerArg) -> Self {
        match m {
            MannerArg::Rand => SynthesisManner::Rand,
            MannerArg::Syn => SynthesisManner::Syn,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic outline-to-texture paired dataset.
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n_src: usize,
        #[arg(long, default_value_t = 10)]
        n_tar: usize,
        /// Extra held-out target renderings for metrics (`target_eval/`).
        #[arg(long, default_value_t = 0)]
        n_eval: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Run training phases into a run directory.
    Train {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
        #[command(flatten)]
        common: Common,
    },
    /// Sample target-domain images from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        manner: Option<MannerArg>,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compute FID and KID of a checkpoint's samples.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        manner: Option<MannerArg>,
        /// Report path (tab-separated).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Some(root) = &common.data {
        cfg.data = DataConfig::toy(root);
    }
    Ok(cfg)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            e.print()?;
            return Ok(());
        }
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    match cli.command {
        Command::MakeToy {
            out,
            n_src,
            n_tar,
            n_eval,
            size,
            common,
        } => {
            let layout = cmd_make_toy(&out, n_src, n_tar, n_eval, size, common.seed.unwrap_or(0))?;
            println!("wrote {}", layout.manifest.display());
        }
        Command::Train {
            run_dir,
            stage,
            ablation,
            common,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            if let Some(a) = ablation {
                cfg.train.ablation = a.into();
            }
            cfg.validate()?;
            let summary = cmd_train(&cfg, &run_dir, stage)?;
            if let Some(fit) = summary.relation_fit {
                println!(
                    "relation fit: mean |R - D_c| = {:.4} (mean D_c = {:.4})",
                    fit.mean_abs_error, fit.mean_distance
                );
            }
            for p in &summary.checkpoints {
                println!("wrote {}", p.display());
            }
        }
        Command::Generate {
            checkpoint,
            manner,
            n,
            out,
            common,
        } => {
            let cfg = load_config(&common)?;
            let manner = manner.map(Into::into).unwrap_or(cfg.eval.manner);
            let seed = common.seed.unwrap_or(cfg.eval.seed);
            let data = (manner == SynthesisManner::Syn).then_some(&cfg.data);
            let files = cmd_generate(&checkpoint, manner, n, seed, &out, data)?;
            println!("wrote {} samples to {}", files, out.display());
        }
        Command::Evaluate {
            checkpoint,
            manner,
            out,
            common,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = manner {
                cfg.eval.manner = m.into();
            }
            if let Some(s) = common.seed {
                cfg.eval.seed = s;
            }
            for r in cmd_evaluate(&checkpoint, &cfg, &out)? {
                println!("{}\t{}\t{:.6}", r.manner, r.metric, r.value);
            }
        }
    }
    Ok(())
}

pub fn cmd_make_toy(
    out: &Path,
    n_src: usize,
    n_tar: usize,
    n_eval: usize,
    size: usize,
    seed: u64,
) -> Result<ToyLayout> {
    write_toy(out, n_src, n_tar, n_eval, size, seed)
}

/// Files inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn loss_log(&self) -> PathBuf {
        self.root.join("losses.log")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    /// Checkpoint written at the end of `phase`.
    pub fn phase_checkpoint(&self, phase: Phase) -> PathBuf {
        self.checkpoint_dir().join(format!("{phase}.safetensors"))
    }

    pub fn periodic_checkpoint(&self, phase: Phase, step: u64) -> PathBuf {
        self.checkpoint_dir()
            .join(format!("{phase}-{step:07}.safetensors"))
    }

    pub fn final_model(&self) -> PathBuf {
        self.root.join("final.safetensors")
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub checkpoints: Vec<PathBuf>,
    pub relation_fit: Option<RelationFit>,
}

fn load_paired(data: &DataConfig, image_size: usize) -> Result<PairedDataset> {
    load_dataset(
        &data.source_dir,
        &data.target_dir,
        &data.manifest,
        image_size,
    )
}

fn resume(layout: &RunLayout, phase: Phase, needed: Phase, cfg: &RunConfig) -> Result<TrainState> {
    let path = layout.phase_checkpoint(needed);
    if !path.is_file() {
        return Err(Error::PhaseOrder(format!(
            "{phase} needs the {needed} checkpoint {}, which does not exist",
            path.display()
        )));
    }
    let state = checkpoint::load(&path, Some(&cfg.arch))?;
    if !state.completed.contains(&needed) {
        return Err(Error::PhaseOrder(format!(
            "{} does not record a completed {needed} phase",
            path.display()
        )));
    }
    Ok(state)
}

struct PhaseRunner<'a> {
    cfg: &'a RunConfig,
    layout: &'a RunLayout,
    log: BufWriter<File>,
    summary: TrainSummary,
}

impl PhaseRunner<'_> {
    fn run(
        &mut self,
        state: &mut TrainState,
        phase: Phase,
        steps: u64,
        mut step: impl FnMut(&mut TrainState) -> Result<LossReport>,
    ) -> Result<()> {
        let interval = self.cfg.run.checkpoint_interval;
        let start = state.phase_step(phase);
        for _ in start..steps {
            let report = step(state)?;
            writeln!(self.log, "{}", report.to_line())?;
            if interval > 0 && report.step % interval == 0 && report.step < steps {
                self.log.flush()?;
                checkpoint::save(state, &self.layout.periodic_checkpoint(phase, report.step))?;
            }
        }
        self.log.flush()?;
        if !state.bundle.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite parameters at the end of {phase}"
            )));
        }
        state.mark_completed(phase);
        let path = self.layout.phase_checkpoint(phase);
        checkpoint::save(state, &path)?;
        self.summary.checkpoints.push(path);
        log::info!("{phase} finished after {steps} steps");
        Ok(())
    }
}

/// Runs the selected phases. `All` runs stage 1, relation fitting (unless the
/// relation loss is ablated) and stage 2; single phases resume from the
/// previous phase's checkpoint in `run_dir`.
pub fn cmd_train(cfg: &RunConfig, run_dir: &Path, stage: StageArg) -> Result<TrainSummary> {
    cfg.validate()?;
    let layout = RunLayout::new(run_dir);
    fs::create_dir_all(layout.checkpoint_dir())?;
    cfg.snapshot(&layout.config())?;
    let log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(layout.loss_log())?;
    let mut runner = PhaseRunner {
        cfg,
        layout: &layout,
        log: BufWriter::new(log),
        summary: TrainSummary::default(),
    };
    let t = &cfg.train;
    let wants = |p: StageArg| stage == StageArg::All || stage == p;
    let needs_relation = !t.ablation.no_relation;

    if stage == StageArg::Baseline {
        let d = load_paired(&cfg.data, cfg.arch.image_size)?;
        let mut state = TrainState::new(&cfg.arch, t)?;
        let targets = d.target_pool().to_vec();
        runner.run(&mut state, Phase::Baseline, cfg.run.baseline_steps, |s| {
            train_baseline_step(s, &targets, t)
        })?;
        fs::copy(
            layout.phase_checkpoint(Phase::Baseline),
            layout.final_model(),
        )?;
        return Ok(runner.summary);
    }

    let state_before = |p: Phase| -> Result<Option<TrainState>> {
        Ok(match (stage, p) {
            (StageArg::All, _) | (_, Phase::Stage1) => None,
            (_, Phase::Relation) => Some(resume(&layout, p, Phase::Stage1, cfg)?),
            (_, _) => Some(resume(
                &layout,
                p,
                if needs_relation {
                    Phase::Relation
                } else {
                    Phase::Stage1
                },
                cfg,
            )?),
        })
    };
    // Fail on missing prerequisites before touching the dataset.
    let mut state = match stage {
        StageArg::Stage1 | StageArg::All => None,
        StageArg::Relation => state_before(Phase::Relation)?,
        _ => state_before(Phase::Stage2)?,
    };
    let d = load_paired(&cfg.data, cfg.arch.image_size)?;
    let mut state = match state.take() {
        Some(s) => s,
        None => TrainState::new(&cfg.arch, t)?,
    };
    if state.seed != t.seed {
        return Err(Error::Config(format!(
            "run seed {} does not match checkpoint seed {}",
            t.seed, state.seed
        )));
    }

    if wants(StageArg::Stage1) {
        runner.run(&mut state, Phase::Stage1, t.stage1_steps, |s| {
            train_stage1_step(s, &d, t)
        })?;
    }
    if wants(StageArg::Relation) && (needs_relation || stage == StageArg::Relation) {
        runner.run(&mut state, Phase::Relation, t.relation_steps, |s| {
            train_relation_step(s, &d, t)
        })?;
        let fit = relation_probe(&mut state, &d, t)?;
        fs::write(
            layout.root.join("relation_fit.txt"),
            format!(
                "mean_abs_error\t{:.9e}\nmean_distance\t{:.9e}\n",
                fit.mean_abs_error, fit.mean_distance
            ),
        )?;
        runner.summary.relation_fit = Some(fit);
    }
    if wants(StageArg::Stage2) {
        runner.run(&mut state, Phase::Stage2, t.stage2_steps, |s| {
            train_stage2_step(s, &d, t)
        })?;
        fs::copy(layout.phase_checkpoint(Phase::Stage2), layout.final_model())?;
    }
    Ok(runner.summary)
}

/// The sampling weights of a trained target model.
fn load_trained(path: &Path) -> Result<ModelBundle> {
    let state = checkpoint::load(path, None)?;
    if !state.completed.contains(&Phase::Stage2) && !state.completed.contains(&Phase::Baseline) {
        return Err(Error::PhaseOrder(format!(
            "{} holds no trained target generator (needs a stage2 or baseline checkpoint)",
            path.display()
        )));
    }
    Ok(state.sampling_bundle())
}

/// Writes `n` samples plus `grid.png` (the largest square that fits) to
/// `out`. Returns the number of sample files.
pub fn cmd_generate(
    checkpoint: &Path,
    manner: SynthesisManner,
    n: usize,
    seed: u64,
    out: &Path,
    data: Option<&DataConfig>,
) -> Result<usize> {
    if n == 0 {
        return Err(contract("n must be positive"));
    }
    let bundle = load_trained(checkpoint)?;
    let dataset = match (manner, data) {
        (SynthesisManner::Syn, None) => {
            return Err(contract("Syn synthesis needs a dataset (--data or [data])"))
        }
        (SynthesisManner::Syn, Some(dc)) => Some(load_paired(dc, bundle.arch.image_size)?),
        (SynthesisManner::Rand, _) => None,
    };
    let images = synthesize(&bundle, manner, n, seed, dataset.as_ref())?;
    fs::create_dir_all(out)?;
    for (i, img) in images.iter().enumerate() {
        img.save(&out.join(format!("sample_{i:05}.png")))?;
    }
    let side = (n as f64).sqrt().floor() as usize;
    emit_grid(&images, side, side, &out.join("grid.png"))?;
    Ok(images.len())
}

/// Real images used as the metric reference: the held-out pool when
/// configured, else the target pool, or its augmented copy when `N_tar < 100`.
pub fn reference_pool(
    cfg: &RunConfig,
    image_size: usize,
    dataset: &PairedDataset,
) -> Result<(Vec<ImageSample>, ReferenceKind)> {
    if let Some(dir) = &cfg.data.eval_dir {
        return Ok((
            load_pool(dir, image_size, Domain::Target)?,
            ReferenceKind::Heldout,
        ));
    }
    if dataset.n_target() >= 100 {
        return Ok((dataset.target_pool().to_vec(), ReferenceKind::Target));
    }
    let aug = augment_target_pool(dataset, &cfg.train.augmentation, cfg.eval.seed)?;
    Ok((aug, ReferenceKind::Augmented))
}

/// Writes a two-row (FID, KID) report for one manner.
pub fn cmd_evaluate(checkpoint: &Path, cfg: &RunConfig, out: &Path) -> Result<Vec<MetricRow>> {
    let bundle = load_trained(checkpoint)?;
    let size = bundle.arch.image_size;
    let dataset = load_paired(&cfg.data, size)?;
    let (real, kind) = reference_pool(cfg, size, &dataset)?;
    let extractor = cfg.eval.extractor.build_metric()?;
    let generated = synthesize(
        &bundle,
        cfg.eval.manner,
        cfg.eval.n_generated,
        cfg.eval.seed,
        Some(&dataset),
    )?;
    let rows = evaluate(
        &generated,
        &real,
        extractor.as_ref(),
        cfg.eval.manner,
        cfg.eval.seed,
        kind,
    )?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_report(&rows, out)?;
    Ok(rows)
}
