//! `sscvae`: data preparation, pair synthesis, the three training stages,
//! the λ sweep and evaluation.
//!
//! Hyperparameters resolve as defaults, then `--config FILE`, then each
//! `--set key=value` in order, then the dedicated flags (`--seed`,
//! `--kl-sign`).

mod run;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use sscvae::config::TrainConfig;
use sscvae::data::layout::{self, MANIFEST_FILE};
use sscvae::data::{
    pairs_seed, split_balanced, split_seed, synthesize_pairs, CopyPasteOptions, Density, Group, Patch, Split, SplitRatios, Splits,
    SyntheticPair, ToyConfig,
};
use sscvae::eval::{evaluate_all, write_evaluation, EvalOptions};
use sscvae::training::{
    select_lambda, sweep_lambda, train_stage1, train_stage2, train_stage3, CascadeData, MetricsLog, Model, Stage, StageResult,
    DEFAULT_LAMBDA_GRID,
};
use sscvae::{Error, Result};

use run::{io_err, manifest_hash, source_revision, RunDir, RunRecord, DEFAULT_RUNS_DIR, RUNS_ENV};

#[derive(Parser, Debug)]
#[command(name = "sscvae", version, about = "Salient/background disentanglement for histology patches")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `key = value` training config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset directory (raw tiles and/or prepared patches).
    #[arg(long, global = true, default_value = "data")]
    data: PathBuf,
    #[arg(long = "run-id", global = true, default_value = "default")]
    run_id: String,
    #[arg(long = "kl-sign", global = true)]
    kl_sign: Option<KlSignArg>,
    /// Root of all run directories.
    #[arg(long = "runs-dir", env = RUNS_ENV, global = true, default_value = DEFAULT_RUNS_DIR)]
    runs_dir: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum KlSignArg {
    Plus,
    Minus,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
    Sweep,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a procedural toy dataset into `--data`.
    ToyGen {
        /// Number of tiles (overrides the toy config).
        #[arg(long)]
        tiles: Option<usize>,
        /// JSON toy config; missing fields take defaults.
        #[arg(long = "toy-config")]
        toy_config: Option<PathBuf>,
    },
    /// Label, balance and split the tiles under `--data`, writing the manifest.
    Prepare {
        /// Train, val and test fractions.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.6, 0.2, 0.2])]
        split: Vec<f64>,
        /// Output directory; defaults to `--data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Copy-paste composites in every split of a prepared dataset.
    SynthPairs {
        #[arg(long = "per-cell", default_value_t = 1)]
        per_cell: usize,
        #[arg(long)]
        feather: Option<u32>,
        #[arg(long)]
        dihedral: bool,
    },
    /// Train stage 1, 2 or 3, chain them all, or sweep λ.
    Train {
        #[arg(value_enum)]
        stage_pos: Option<StageArg>,
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
        /// λ values for the sweep, comma separated.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
    },
    /// Score the latest checkpoint of the run and render figures.
    Eval {
        /// Test pairs rendered as swap and interpolation figures.
        #[arg(long, default_value_t = 4)]
        pairs: usize,
        /// Pairs scored by each swap criterion.
        #[arg(long = "swap-pairs", default_value_t = 50)]
        swap_pairs: usize,
        /// Cap on test images per group; 0 = all.
        #[arg(long = "max-test", default_value_t = 0)]
        max_test: usize,
    },
}

impl Common {
    fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_file(p)?,
            None => TrainConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::InvalidInput(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(k) = self.kl_sign {
            cfg.set("kl_sign", if matches!(k, KlSignArg::Plus) { "plus" } else { "minus" })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn run_dir(&self) -> Result<RunDir> {
        RunDir::new(&self.runs_dir, &self.run_id)
    }

    /// Outputs are recorded relative to the run directory or the data
    /// directory so that records do not depend on where a run lives.
    fn display_output(&self, run: &RunDir, p: &Path) -> String {
        if let Ok(rel) = p.strip_prefix(&run.root) {
            rel.display().to_string()
        } else if let Ok(rel) = p.strip_prefix(&self.data) {
            format!("<data>/{}", rel.display())
        } else {
            p.display().to_string()
        }
    }

    fn record(&self, command: &str, config: std::collections::BTreeMap<String, String>, outputs: Vec<PathBuf>) -> Result<()> {
        let run = self.run_dir()?;
        let rec = RunRecord {
            run_id: run.id.clone(),
            command: command.to_string(),
            config,
            source_revision: source_revision(),
            manifest_hash: manifest_hash(&self.data)?,
            outputs: outputs.iter().map(|p| self.display_output(&run, p)).collect(),
        };
        rec.write(&run)?;
        Ok(())
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Prerequisite(_) => 3,
        Error::Diverged { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::ToyGen { tiles, toy_config } => cmd_toy_gen(c, *tiles, toy_config.as_deref()),
        Command::Prepare { split, out } => cmd_prepare(c, split, out.as_deref()),
        Command::SynthPairs { per_cell, feather, dihedral } => cmd_synth_pairs(c, *per_cell, *feather, *dihedral),
        Command::Train { stage_pos, stage, grid } => {
            let stage = match (stage_pos, stage) {
                (Some(a), Some(b)) if a != b => {
                    return Err(Error::InvalidInput("positional stage and --stage disagree".into()));
                }
                (Some(s), _) | (None, Some(s)) => *s,
                (None, None) => return Err(Error::InvalidInput("train needs a stage: 1, 2, 3, all or sweep".into())),
            };
            cmd_train(c, stage, grid)
        }
        Command::Eval { pairs, swap_pairs, max_test } => cmd_eval(c, *pairs, *swap_pairs, *max_test),
    }
}

fn toy_echo(cfg: &ToyConfig, seed: u64) -> std::collections::BTreeMap<String, String> {
    let mut m = std::collections::BTreeMap::new();
    if let Ok(serde_json::Value::Object(o)) = serde_json::to_value(cfg) {
        for (k, v) in o {
            m.insert(k, v.to_string());
        }
    }
    m.insert("seed".into(), seed.to_string());
    m
}

fn cmd_toy_gen(c: &Common, tiles: Option<usize>, toy_config: Option<&Path>) -> Result<()> {
    let mut cfg = match toy_config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Format { path: p.to_path_buf(), reason: e.to_string() })?
        }
        None => ToyConfig::default(),
    };
    if let Some(n) = tiles {
        cfg.n_tiles = n;
    }
    let seed = c.seed.unwrap_or(0);
    let rendered = sscvae::data::render_toy_tiles(&cfg, seed)?;
    let mut counts = [0usize; 4];
    for (tile, anns) in &rendered {
        layout::write_tile(&c.data, tile, anns)?;
        for p in sscvae::data::annotate_tile(tile, anns)? {
            match (p.patch.group(), p.patch.density()) {
                (Some(Group::Cells), Some(Density::High)) => counts[0] += 1,
                (Some(Group::Cells), _) => counts[1] += 1,
                (Some(Group::Background), _) => counts[2] += 1,
                _ => counts[3] += 1,
            }
        }
    }
    let toy_path = c.data.join("toy_config.json");
    let text = serde_json::to_string_pretty(&cfg).map_err(|e| Error::InvalidInput(e.to_string()))?;
    fs::write(&toy_path, text + "\n").map_err(|e| io_err(&toy_path, e))?;
    println!("seed {seed}");
    println!("tiles {}", rendered.len());
    println!("patches CELLS/HIGH {} CELLS/LOW {} BACKGROUND {} discarded {}", counts[0], counts[1], counts[2], counts[3]);
    c.record("toy-gen", toy_echo(&cfg, seed), vec![c.data.clone()])
}

fn cmd_prepare(c: &Common, split: &[f64], out: Option<&Path>) -> Result<()> {
    let ratios = SplitRatios { train: split[0], val: split[1], test: split[2] };
    ratios.validate()?;
    let out = out.unwrap_or(&c.data);
    let seed = c.seed.unwrap_or(0);
    let tiles = layout::read_dataset_dir(&c.data)?;
    let patches = layout::annotate_all(&tiles)?;
    let plain: Vec<Patch> = patches.iter().map(|p| p.patch.clone()).collect();
    let (manifest, splits) = split_balanced(&plain, ratios, split_seed(seed))?;
    layout::write_prepared(out, &patches, &manifest, &splits)?;
    println!("seed {seed}");
    for s in Split::ALL {
        println!("{s}: CELLS {} BACKGROUND {}", manifest.count(s, Group::Cells), manifest.count(s, Group::Background));
    }
    let hash = manifest_hash(out)?.unwrap_or_default();
    println!("manifest {} sha256 {hash}", out.join(MANIFEST_FILE).display());
    let echo = [("seed", seed.to_string()), ("split", format!("{},{},{}", split[0], split[1], split[2]))]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    c.record("prepare", echo, vec![out.join(MANIFEST_FILE)])
}

fn cmd_synth_pairs(c: &Common, per_cell: usize, feather: Option<u32>, dihedral: bool) -> Result<()> {
    let seed = c.seed.unwrap_or(0);
    let prep = layout::read_prepared(&c.data)?;
    let mut options = CopyPasteOptions::default();
    if let Some(f) = feather {
        options.feather_radius = f;
    }
    options.random_dihedral = dihedral;
    println!("seed {seed}");
    let mut outputs = Vec::new();
    for split in Split::ALL {
        let pool = prep.splits.get(split);
        let n_cells = pool.iter().filter(|&&i| prep.patches[i].patch.group() == Some(Group::Cells)).count();
        let pairs = synthesize_pairs(&prep.patches, pool, n_cells * per_cell, options, pairs_seed(seed, split))?;
        layout::write_pairs(&c.data, split, &pairs)?;
        println!("{split}: {} pairs", pairs.len());
        outputs.push(layout::pairs_dir(&c.data, split));
    }
    let echo = [
        ("seed", seed.to_string()),
        ("per_cell", per_cell.to_string()),
        ("feather_radius", options.feather_radius.to_string()),
        ("random_dihedral", options.random_dihedral.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    c.record("synth-pairs", echo, outputs)
}

fn load_data(dir: &Path, with_pairs: bool) -> Result<CascadeData> {
    let prep = layout::read_prepared(dir)?;
    let mut pairs = Splits::<Vec<SyntheticPair>>::default();
    if with_pairs {
        for split in Split::ALL {
            *pairs.get_mut(split) = layout::read_pairs(dir, split)?;
        }
    }
    Ok(CascadeData { patches: prep.patches, splits: prep.splits, pairs })
}

fn load_checkpoint(run: &RunDir, stage: Stage) -> Result<Model> {
    let path = run.checkpoint(stage);
    if !path.exists() {
        return Err(Error::Prerequisite(format!("missing checkpoint {}", path.display())));
    }
    Model::load(&path)
}

/// Rewrites the metrics log without records of `stage` and later, then
/// appends `log`.
fn store_metrics(run: &RunDir, stage: Stage, log: &MetricsLog) -> Result<()> {
    let path = run.metrics_log();
    let mut kept = if path.exists() {
        MetricsLog::parse(&fs::read_to_string(&path).map_err(|e| io_err(&path, e))?)?
    } else {
        MetricsLog::default()
    };
    kept.records.retain(|r| r.stage < stage);
    kept.records.extend(log.records.iter().cloned());
    fs::write(&path, kept.to_text()).map_err(|e| io_err(&path, e))
}

fn terms_json(terms: &[(String, f64)]) -> serde_json::Value {
    serde_json::Value::Object(terms.iter().map(|(k, v)| (k.clone(), json!(v))).collect())
}

fn store_result(run: &RunDir, r: &StageResult) -> Result<()> {
    let trail: Vec<serde_json::Value> = r.trail.iter().map(|e| json!({ "epoch": e.epoch, "terms": terms_json(&e.terms) })).collect();
    let v = json!({
        "stage": r.stage.to_string(),
        "checkpoint": run.checkpoint(r.stage).display().to_string(),
        "best_epoch": r.best_epoch,
        "best_metric": r.best_metric,
        "initial": terms_json(&r.initial),
        "final_terms": terms_json(&r.final_terms),
        "trail": trail,
        "wall_seconds": r.wall_seconds,
        "warnings": r.warnings,
    });
    let path = run.stage_result(r.stage);
    let text = serde_json::to_string_pretty(&v).map_err(|e| Error::InvalidInput(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
}

fn run_stage(stage: Stage, cfg: &TrainConfig, data: &CascadeData, run: &RunDir) -> Result<()> {
    let mut model = match stage {
        Stage::Stage1 => Model::init(cfg)?,
        Stage::Stage2 => load_checkpoint(run, Stage::Stage1)?,
        _ if cfg.density_stage => load_checkpoint(run, Stage::Stage2)?,
        _ => load_checkpoint(run, Stage::Stage2).or_else(|_| load_checkpoint(run, Stage::Stage1))?,
    };
    let mut log = MetricsLog::default();
    let outcome = match stage {
        Stage::Stage1 => train_stage1(cfg, data, &mut model, &mut log),
        Stage::Stage2 => train_stage2(cfg, data, &mut model, &mut log),
        _ => train_stage3(cfg, data, &mut model, &mut log),
    };
    store_metrics(run, stage, &log)?;
    let result = match outcome {
        Ok(r) => r,
        Err(e @ Error::Diverged { .. }) => {
            let path = run.checkpoints().join(format!("{stage}_diverged.ckpt"));
            model.save(&path, cfg)?;
            eprintln!("last finite weights saved to {}", path.display());
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    model.save(&run.checkpoint(stage), cfg)?;
    store_result(run, &result)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "{stage}: best epoch {} ({:.6}) in {:.1}s -> {}",
        result.best_epoch,
        result.best_metric,
        result.wall_seconds,
        run.checkpoint(stage).display()
    );
    Ok(())
}

fn cmd_train(c: &Common, stage: StageArg, grid: &[f64]) -> Result<()> {
    let cfg = c.train_config()?;
    let run = c.run_dir()?;
    let stages: Vec<Stage> = match stage {
        StageArg::One => vec![Stage::Stage1],
        StageArg::Two => vec![Stage::Stage2],
        StageArg::Three => vec![Stage::Stage3],
        StageArg::All if cfg.density_stage => vec![Stage::Stage1, Stage::Stage2, Stage::Stage3],
        StageArg::All => vec![Stage::Stage1, Stage::Stage3],
        StageArg::Sweep => Vec::new(),
    };
    // prerequisites are checked before any data is read
    match stages.first() {
        Some(Stage::Stage2) => drop(load_checkpoint(&run, Stage::Stage1)?),
        Some(Stage::Stage3) if cfg.density_stage => drop(load_checkpoint(&run, Stage::Stage2)?),
        Some(Stage::Stage3) => drop(load_checkpoint(&run, Stage::Stage2).or_else(|_| load_checkpoint(&run, Stage::Stage1))?),
        _ => {}
    }
    let needs_pairs = stage == StageArg::Sweep || stages.contains(&Stage::Stage1);
    let data = load_data(&c.data, needs_pairs)?;
    run.create()?;
    let config_path = run.config();
    fs::write(&config_path, cfg.to_text()).map_err(|e| io_err(&config_path, e))?;
    let mut outputs = vec![config_path, run.metrics_log()];

    if stage == StageArg::Sweep {
        let grid = if grid.is_empty() { DEFAULT_LAMBDA_GRID.to_vec() } else { grid.to_vec() };
        let rows = sweep_lambda(&cfg, &data, &grid)?;
        let best = select_lambda(&rows);
        let mut table = String::from("lambda,val_ss_salient,val_total,selected\n");
        for (i, r) in rows.iter().enumerate() {
            table.push_str(&format!("{},{},{},{}\n", r.lambda, r.val_ss_salient, r.val_total, Some(i) == best));
        }
        print!("{table}");
        match best {
            Some(i) => println!("selected lambda {}", rows[i].lambda),
            None => println!("no run produced a finite validation silhouette"),
        }
        let path = run.sweep_table();
        fs::write(&path, table).map_err(|e| io_err(&path, e))?;
        outputs.push(path);
    } else {
        for &s in &stages {
            run_stage(s, &cfg, &data, &run)?;
            outputs.push(run.checkpoint(s));
            outputs.push(run.stage_result(s));
        }
    }
    let name = match stage {
        StageArg::One => "train-1",
        StageArg::Two => "train-2",
        StageArg::Three => "train-3",
        StageArg::All => "train-all",
        StageArg::Sweep => "train-sweep",
    };
    c.record(name, cfg.echo(), outputs)
}

fn cmd_eval(c: &Common, pairs: usize, swap_pairs: usize, max_test: usize) -> Result<()> {
    let cfg = c.train_config()?;
    let run = c.run_dir()?;
    let model = [Stage::Stage3, Stage::Stage2, Stage::Stage1]
        .into_iter()
        .find_map(|s| load_checkpoint(&run, s).ok())
        .ok_or_else(|| Error::Prerequisite(format!("missing checkpoint: no stage checkpoint under {}", run.checkpoints().display())))?;
    let data = load_data(&c.data, false)?;
    let opts = EvalOptions { seed: cfg.seed, figure_pairs: pairs, swap_pairs, max_test_samples: max_test, ..EvalOptions::default() };
    let eval = evaluate_all(&model, &data, &opts)?;
    let figures = run.figures();
    if figures.exists() {
        fs::remove_dir_all(&figures).map_err(|e| io_err(&figures, e))?;
    }
    write_evaluation(&eval, &run.report(), &figures)?;
    print!("{}", eval.report.to_text());
    println!("report {}", run.report().display());
    println!("figures {} in {}", eval.figures.len(), figures.display());
    c.record("eval", cfg.echo(), vec![run.report(), figures])
}
