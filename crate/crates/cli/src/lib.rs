//! The `vinlab` command-line front end.
//!
//! Every subcommand is deterministic given its flags and `--master-seed`;
//! replicate `i` trains from the stream seed `derive_indexed(master, "replicate", i)`.

pub mod plot;
mod runner;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::Rng;

use vinlab_core::ddqn::{parse_history_csv, Schedule, TrainingConfig, TrainingHistory};
use vinlab_core::gridworld::{Action, GameRules, GridState, Variant, GRID};
use vinlab_core::rng::{derive_indexed, derive_seed, rng_from};
use vinlab_core::transfer::{
    base_reward, history_path, run_transfer_phases, self_transfer, shared_meanings, steps_to_threshold,
    summary_csv, LayerSet, Manifest, PairConstraints, SpeedupResult, TransferSpec, HIGH_RATE_FACTOR,
};
use vinlab_core::vinnet::VinNetwork;
use vinlab_core::{Error, Result};

use plot::Series;
use runner::run_indexed;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_INVALID: i32 = 3;

/// Reward at which training counts as successful.
pub const SUCCESS_REWARD: f64 = 2.0;
/// A retrained layer has recovered once it is within this margin of the base reward.
pub const RECOVERY_MARGIN: f64 = 0.5;
/// Episodes used to measure the reward of a base network.
const BASE_EPISODES: usize = 200;

#[derive(Parser, Debug)]
#[command(name = "vinlab", version, about = "Value-iteration DDQN transfer experiments on seeded grid worlds")]
pub struct Cli {
    /// Output root directory.
    #[arg(long, global = true, env = "VINLAB_OUT", default_value = "vinlab-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a network end to end.
    Train(TrainCmd),
    /// Reinitialize layers of a trained network and retrain them.
    SelfTransfer(SelfTransferCmd),
    /// Transfer between two auto-generated games.
    Transfer(TransferCmd),
    /// Print the rules of a game and a sample board.
    Inspect(InspectCmd),
    /// Draw training histories as an SVG line chart.
    Plot(PlotCmd),
}

#[derive(Args, Debug, Clone)]
pub struct TrainingArgs {
    /// Environment steps per run.
    #[arg(long, default_value_t = 100_000, value_parser = clap::value_parser!(u64).range(0..=10_000_000))]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub master_seed: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=64))]
    pub replicates: u64,
    /// Replicate runs executed concurrently.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=64))]
    pub jobs: u64,
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..=4096))]
    pub batch_size: u64,
    #[arg(long, default_value_t = 50_000, value_parser = clap::value_parser!(u64).range(1..=10_000_000))]
    pub buffer_capacity: u64,
    #[arg(long, default_value_t = 500)]
    pub warmup: u64,
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
    pub target_update: u64,
    #[arg(long, default_value_t = 1_000, value_parser = clap::value_parser!(u64).range(1..))]
    pub eval_interval: u64,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..=100_000))]
    pub eval_episodes: u64,
    /// Steps over which epsilon falls from 1 to 0.1.
    #[arg(long, default_value_t = 50_000)]
    pub anneal_steps: u64,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..=200))]
    pub vi_iterations: u64,
}

impl TrainingArgs {
    pub fn config(&self) -> Result<TrainingConfig> {
        let config = TrainingConfig {
            steps: self.steps,
            warmup: self.warmup,
            target_update: self.target_update,
            eval_interval: self.eval_interval,
            eval_episodes: self.eval_episodes as usize,
            gamma: self.gamma,
            batch_size: self.batch_size as usize,
            buffer_capacity: self.buffer_capacity as usize,
            learning_rate: self.learning_rate,
            schedule: Schedule {
                anneal_steps: self.anneal_steps,
                ..Schedule::default()
            },
            stop_at: None,
            master_seed: self.master_seed,
        };
        config.validate()?;
        Ok(config)
    }

    fn replicate_seed(&self, replicate: usize) -> u64 {
        derive_indexed(self.master_seed, "replicate", replicate as u64)
    }
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|_| format!("expected `simplified` or `autogen`, got `{s}`"))
}

fn parse_layer_sets(s: &str) -> std::result::Result<LayerSet, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    #[arg(long, value_parser = parse_variant)]
    pub variant: Variant,
    /// Rules seed of an auto-generated game.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Args, Debug)]
pub struct SelfTransferCmd {
    /// Parameter file of a network trained on the simplified game.
    #[arg(long)]
    pub base: PathBuf,
    /// Layer sets to retrain, comma separated.
    #[arg(
        long,
        value_delimiter = ',',
        value_parser = parse_layer_sets,
        default_value = "attention,reward,attention+reward,action_attention,vi,q_values"
    )]
    pub layers: Vec<LayerSet>,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Args, Debug)]
pub struct TransferCmd {
    #[arg(long, required_unless_present_any = ["select_pair", "manifest"])]
    pub source_seed: Option<u64>,
    #[arg(long, required_unless_present_any = ["select_pair", "manifest"])]
    pub target_seed: Option<u64>,
    /// Draw a seed pair whose target maps two channels to repulsors and
    /// shares no channel meaning with the source.
    #[arg(long, conflicts_with_all = ["source_seed", "target_seed"])]
    pub select_pair: bool,
    /// Experiment manifest; its values take precedence over other flags.
    #[arg(long, conflicts_with_all = ["source_seed", "target_seed", "select_pair"])]
    pub manifest: Option<PathBuf>,
    /// Step budget of the transfer phase; defaults to --steps.
    #[arg(long)]
    pub transfer_steps: Option<u64>,
    #[arg(long, default_value_t = SUCCESS_REWARD, allow_negative_numbers = true)]
    pub threshold: f64,
    /// Learning rate of the transfer phase.
    #[arg(long, conflicts_with = "high_rate")]
    pub transfer_learning_rate: Option<f64>,
    /// Run the transfer phase at five times the base learning rate.
    #[arg(long)]
    pub high_rate: bool,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Args, Debug)]
pub struct InspectCmd {
    #[arg(long, value_parser = parse_variant)]
    pub variant: Variant,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub episode_seed: u64,
    /// Random moves to play after the initial board.
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u64).range(0..=100))]
    pub moves: u64,
}

#[derive(Args, Debug)]
pub struct PlotCmd {
    /// History CSV files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output file; defaults to `<out>/plot.svg`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { stderr.write_all(text.as_bytes()) } else { stdout.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(&cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownLayer(_) => EXIT_USAGE,
        Error::ExperimentInvalid(_) => EXIT_INVALID,
        _ => EXIT_RUNTIME,
    }
}

pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    let mut text = String::new();
    match &cli.command {
        Command::Train(cmd) => train(cmd, &cli.out, &mut text)?,
        Command::SelfTransfer(cmd) => self_transfer_cmd(cmd, &cli.out, &mut text)?,
        Command::Transfer(cmd) => {
            let result = transfer_cmd(cmd, &cli.out, &mut text);
            stdout.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
            return result;
        }
        Command::Inspect(cmd) => inspect(cmd, &mut text)?,
        Command::Plot(cmd) => plot_cmd(cmd, &cli.out, &mut text)?,
    }
    stdout.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_history(path: &Path, history: &TrainingHistory) -> Result<()> {
    create_parent(path)?;
    history.write_csv(path)
}

fn fmt_steps(v: Option<u64>) -> String {
    v.map_or(String::new(), |s| s.to_string())
}

fn train(cmd: &TrainCmd, out: &Path, text: &mut String) -> Result<()> {
    let config = cmd.training.config()?;
    let rules = Arc::new(GameRules::generate(cmd.seed, cmd.variant));
    let n = cmd.training.replicates as usize;
    let runs = run_indexed(cmd.training.jobs as usize, n, |i| {
        let seed = cmd.training.replicate_seed(i);
        let mut net = VinNetwork::build(
            rules.num_channels(),
            cmd.training.vi_iterations as usize,
            derive_seed(seed, "init"),
        )?;
        let config = TrainingConfig {
            master_seed: seed,
            ..config.clone()
        };
        let history = vinlab_core::ddqn::run_training(&rules, &mut net, &config)?;
        let path = history_path(out, "train", cmd.variant.name(), i);
        write_history(&path, &history)?;
        net.save(&path.with_file_name("network.params"))?;
        Ok(history)
    })?;
    let mut summary = String::from("replicate,final_reward,steps_to_threshold\n");
    for (i, h) in runs.iter().enumerate() {
        let last = h.final_reward().unwrap_or(f64::NAN);
        let reached = steps_to_threshold(&h.checkpoints, SUCCESS_REWARD);
        writeln!(summary, "{i},{last:?},{}", fmt_steps(reached)).unwrap();
        writeln!(text, "replicate {i}: final average test reward {last:.3}").unwrap();
    }
    write_file(&out.join("train").join(cmd.variant.name()).join("summary.csv"), &summary)
}

fn self_transfer_cmd(cmd: &SelfTransferCmd, out: &Path, text: &mut String) -> Result<()> {
    let config = cmd.training.config()?;
    if cmd.layers.is_empty() {
        return Err(Error::Config("no layer sets given".into()));
    }
    let base = VinNetwork::load(&cmd.base)?;
    let rules = Arc::new(GameRules::simplified());
    let base_config = TrainingConfig {
        master_seed: cmd.training.master_seed,
        ..config.clone()
    };
    let reference = base_reward(&base, &rules, &base_config, BASE_EPISODES)?;
    writeln!(text, "base reward {reference:.3}").unwrap();
    let n = cmd.training.replicates as usize;
    let tasks: Vec<(LayerSet, usize)> = cmd.layers.iter().flat_map(|&l| (0..n).map(move |i| (l, i))).collect();
    let runs = run_indexed(cmd.training.jobs as usize, tasks.len(), |k| {
        let (set, i) = tasks[k];
        let config = TrainingConfig {
            master_seed: derive_indexed(cmd.training.replicate_seed(i), set.name(), 0),
            ..config.clone()
        };
        let run = self_transfer(&rules, &base, set, &config)?;
        write_history(&history_path(out, "self-transfer", &set.slug(), i), &run.history)?;
        Ok(run.history)
    })?;
    let mut summary = String::from("layers,replicate,base_reward,final_reward,steps_to_recovery\n");
    for (&(set, i), h) in tasks.iter().zip(&runs) {
        let last = h.final_reward().unwrap_or(f64::NAN);
        let recovery = steps_to_threshold(&h.checkpoints, reference - RECOVERY_MARGIN);
        writeln!(summary, "{set},{i},{reference:?},{last:?},{}", fmt_steps(recovery)).unwrap();
        writeln!(
            text,
            "{set} replicate {i}: final {last:.3}, recovered at {}",
            recovery.map_or("never".to_string(), |s| format!("step {s}"))
        )
        .unwrap();
    }
    write_file(&out.join("self-transfer").join("summary.csv"), &summary)
}

/// Settings of a transfer experiment after merging flags and manifest.
struct TransferPlan {
    source_seed: u64,
    target_seed: u64,
    transfer_steps: u64,
    threshold: f64,
    transfer_learning_rate: Option<f64>,
    training: TrainingArgs,
}

impl TransferPlan {
    fn manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        m.set("source_seed", self.source_seed)
            .set("target_seed", self.target_seed)
            .set("steps", self.training.steps)
            .set("transfer_steps", self.transfer_steps)
            .set("threshold", format!("{:?}", self.threshold))
            .set("learning_rate", format!("{:?}", self.training.learning_rate))
            .set(
                "transfer_learning_rate",
                format!("{:?}", self.transfer_learning_rate.unwrap_or(self.training.learning_rate)),
            )
            .set("replicates", self.training.replicates)
            .set("master_seed", self.training.master_seed);
        m
    }

    fn apply_manifest(&mut self, m: &Manifest) -> Result<()> {
        let need = |key: &str| Error::Config(format!("manifest lacks `{key}`"));
        self.source_seed = m.get_parsed("source_seed")?.ok_or_else(|| need("source_seed"))?;
        self.target_seed = m.get_parsed("target_seed")?.ok_or_else(|| need("target_seed"))?;
        if let Some(v) = m.get_parsed("steps")? {
            self.training.steps = v;
        }
        self.transfer_steps = m.get_parsed("transfer_steps")?.unwrap_or(self.training.steps);
        if let Some(v) = m.get_parsed("threshold")? {
            self.threshold = v;
        }
        if let Some(v) = m.get_parsed("learning_rate")? {
            self.training.learning_rate = v;
        }
        if let Some(v) = m.get_parsed("transfer_learning_rate")? {
            self.transfer_learning_rate = Some(v);
        }
        if let Some(v) = m.get_parsed::<u64>("replicates")? {
            if !(1..=64).contains(&v) {
                return Err(Error::Config("replicates must lie in 1..=64".into()));
            }
            self.training.replicates = v;
        }
        if let Some(v) = m.get_parsed("master_seed")? {
            self.training.master_seed = v;
        }
        Ok(())
    }
}

fn transfer_cmd(cmd: &TransferCmd, out: &Path, text: &mut String) -> Result<()> {
    let mut plan = TransferPlan {
        source_seed: cmd.source_seed.unwrap_or(0),
        target_seed: cmd.target_seed.unwrap_or(0),
        transfer_steps: cmd.transfer_steps.unwrap_or(cmd.training.steps),
        threshold: cmd.threshold,
        transfer_learning_rate: cmd.transfer_learning_rate,
        training: cmd.training.clone(),
    };
    if cmd.high_rate {
        plan.transfer_learning_rate = Some(HIGH_RATE_FACTOR * cmd.training.learning_rate);
    }
    if let Some(path) = &cmd.manifest {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        plan.apply_manifest(&body.parse()?)?;
    }
    if cmd.select_pair {
        let constraints = PairConstraints::default();
        let mut rng = rng_from(derive_seed(plan.training.master_seed, "seed-pair"));
        let (s, t) = vinlab_core::transfer::select_seed_pair(&mut rng, &constraints)?;
        let (source, target) = (GameRules::generate(s, Variant::Autogen), GameRules::generate(t, Variant::Autogen));
        info!(
            "selected seed pair {s} -> {t}: target repulsor channels {:?}, shared channel meanings {}",
            target.channels_of(vinlab_core::gridworld::ObjectClass::Repulsor),
            shared_meanings(&source, &target)
        );
        writeln!(text, "selected source seed {s}, target seed {t}").unwrap();
        (plan.source_seed, plan.target_seed) = (s, t);
    }
    if let Some(lr) = plan.transfer_learning_rate {
        info!("transfer phase learning rate {lr} (base {})", plan.training.learning_rate);
    }
    let config = plan.training.config()?;
    let spec = TransferSpec {
        transfer_steps: plan.transfer_steps,
        threshold: plan.threshold,
        transfer_learning_rate: plan.transfer_learning_rate,
        vi_iterations: plan.training.vi_iterations as usize,
        ..TransferSpec::new(plan.source_seed, plan.target_seed, config.clone())
    };
    spec.validate()?;
    let root = out.join("transfer");
    write_file(&root.join("manifest.txt"), &plan.manifest().to_text())?;

    let n = plan.training.replicates as usize;
    let runs = run_indexed(plan.training.jobs as usize, n, |i| {
        let spec = TransferSpec {
            config: TrainingConfig {
                master_seed: plan.training.replicate_seed(i),
                ..config.clone()
            },
            ..spec.clone()
        };
        let runs = run_transfer_phases(&spec)?;
        for (condition, run) in [("source", &runs.source), ("control", &runs.control), ("transfer", &runs.transfer)] {
            write_history(&history_path(out, "transfer", condition, i), &run.history)?;
        }
        Ok(runs)
    })?;

    let mut results: Vec<SpeedupResult> = Vec::new();
    let mut invalid = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        match r.speedup(plan.threshold) {
            Ok(s) => {
                let ratio = s.ratio.map_or("n/a".to_string(), |v| format!("{v:.2}"));
                writeln!(
                    text,
                    "replicate {i}: control {} steps, transfer {} steps, ratio {ratio}",
                    s.steps_to_threshold_control,
                    fmt_steps(s.steps_to_threshold_transfer)
                )
                .unwrap();
                results.push(s);
            }
            Err(e) => {
                writeln!(text, "replicate {i}: {e}").unwrap();
                invalid.push(i);
            }
        }
    }
    if !invalid.is_empty() {
        return Err(Error::ExperimentInvalid(format!(
            "control never reached reward {} in replicates {invalid:?}",
            plan.threshold
        )));
    }
    write_file(&root.join("summary.csv"), &summary_csv(&results))
}

fn inspect(cmd: &InspectCmd, text: &mut String) -> Result<()> {
    let rules = Arc::new(GameRules::generate(cmd.seed, cmd.variant));
    let mut state = GridState::reset(&rules, cmd.episode_seed)?;
    text.push_str(&state.render_ascii());
    let mut rng = rng_from(derive_seed(cmd.episode_seed, "inspect-moves"));
    for _ in 0..cmd.moves {
        if state.is_terminal() {
            break;
        }
        let action = Action::from_index(rng.random_range(0..4));
        let (reward, done) = state.apply(action);
        writeln!(text, "move {action:?} reward {reward} done {done}").unwrap();
        let board = state.render_ascii();
        for line in board.lines().skip(board.lines().count() - GRID) {
            writeln!(text, "{line}").unwrap();
        }
    }
    Ok(())
}

fn plot_cmd(cmd: &PlotCmd, out: &Path, text: &mut String) -> Result<()> {
    let mut series = Vec::new();
    for path in &cmd.inputs {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let checkpoints = parse_history_csv(&body)?;
        let label = series_label(path);
        series.push(Series {
            label,
            points: checkpoints.iter().map(|c| (c.step as f64, c.avg_test_reward)).collect(),
        });
    }
    let svg = plot::render_svg(&series)?;
    let target = cmd.output.clone().unwrap_or_else(|| out.join("plot.svg"));
    write_file(&target, &svg)?;
    writeln!(text, "wrote {}", target.display()).unwrap();
    Ok(())
}

/// File stem of `path`; results-layout files, which all share the stem
/// `history`, are labelled by their condition and replicate directories.
fn series_label(path: &Path) -> String {
    let stem = path.file_stem().map_or(String::new(), |s| s.to_string_lossy().into_owned());
    if stem != "history" {
        return stem;
    }
    let dirs: Vec<String> = path
        .parent()
        .into_iter()
        .flat_map(|p| p.iter().rev().take(2))
        .map(|s| s.to_string_lossy().into_owned())
        .collect();
    if dirs.len() < 2 {
        return stem;
    }
    format!("{}/{}", dirs[1], dirs[0])
}
