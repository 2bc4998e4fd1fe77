//! Transfer experiments: per-layer self-transfer on the simplified game and
//! cross-seed transfer between auto-generated games.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::ddqn::{evaluate, run_training, Checkpoint, TrainingConfig, TrainingHistory};
use crate::gridworld::{GameRules, ObjectClass, Variant};
use crate::rng::{derive_seed, rng_from};
use crate::vinnet::{LayerId, VinNetwork};
use crate::{Error, Result};

/// A group of layers that is reinitialized and retrained together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerSet {
    Attention,
    Reward,
    AttentionReward,
    ActionAttention,
    Vi,
    QValues,
}

impl LayerSet {
    pub const ALL: [LayerSet; 6] = [
        LayerSet::Attention,
        LayerSet::Reward,
        LayerSet::AttentionReward,
        LayerSet::ActionAttention,
        LayerSet::Vi,
        LayerSet::QValues,
    ];

    pub fn layers(self) -> &'static [LayerId] {
        match self {
            LayerSet::Attention => &[LayerId::Attention],
            LayerSet::Reward => &[LayerId::Reward],
            LayerSet::AttentionReward => &[LayerId::Attention, LayerId::Reward],
            LayerSet::ActionAttention => &[LayerId::ActionAttention],
            LayerSet::Vi => &[LayerId::Vi],
            LayerSet::QValues => &[LayerId::QValues],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerSet::Attention => "attention",
            LayerSet::Reward => "reward",
            LayerSet::AttentionReward => "attention+reward",
            LayerSet::ActionAttention => "action_attention",
            LayerSet::Vi => "vi",
            LayerSet::QValues => "q_values",
        }
    }

    /// Name usable as a directory component.
    pub fn slug(self) -> String {
        self.name().replace('+', "_")
    }
}

impl fmt::Display for LayerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerSet::ALL
            .into_iter()
            .find(|l| l.name() == s || l.slug() == s)
            .ok_or_else(|| Error::UnknownLayer(s.to_string()))
    }
}

/// Copies `base`, redraws `set` and freezes every other layer.
pub fn prepare_retrain(base: &VinNetwork, set: LayerSet, seed: u64) -> VinNetwork {
    let mut net = base.clone();
    let mut rng = rng_from(seed);
    for &id in set.layers() {
        net.reinitialize_layer(id, &mut rng);
    }
    net.freeze_all_except(set.layers());
    net
}

/// True when every frozen layer of `net` matches `base` bit for bit.
pub fn frozen_layers_intact(base: &VinNetwork, net: &VinNetwork) -> bool {
    net.frozen_layers().into_iter().all(|id| {
        let (a, b) = (base.layer(id), net.layer(id));
        let same = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits());
        same(a.weights(), b.weights())
            && match (a.bias(), b.bias()) {
                (Some(x), Some(y)) => same(x, y),
                (None, None) => true,
                _ => false,
            }
    })
}

#[derive(Clone, Debug)]
pub struct SelfTransferSpec {
    pub base_params: PathBuf,
    pub layer_set: LayerSet,
    pub config: TrainingConfig,
}

#[derive(Clone, Debug)]
pub struct RetrainRun {
    pub history: TrainingHistory,
    pub network: VinNetwork,
}

/// Loads the base parameters and runs [`self_transfer`] on the simplified game.
pub fn run_self_transfer(spec: &SelfTransferSpec) -> Result<RetrainRun> {
    let base = VinNetwork::load(&spec.base_params)?;
    let rules = Arc::new(GameRules::simplified());
    self_transfer(&rules, &base, spec.layer_set, &spec.config)
}

/// Reinitializes `set`, freezes the rest and retrains with a fresh replay
/// buffer and optimizer.
pub fn self_transfer(
    rules: &Arc<GameRules>,
    base: &VinNetwork,
    set: LayerSet,
    config: &TrainingConfig,
) -> Result<RetrainRun> {
    base.validate()?;
    let mut network = prepare_retrain(base, set, derive_seed(config.master_seed, "reinit"));
    let history = run_training(rules, &mut network, config)?;
    debug_assert!(frozen_layers_intact(base, &network));
    Ok(RetrainRun { history, network })
}

/// Mean return of `net` over `episodes` evaluation episodes.
pub fn base_reward(net: &VinNetwork, rules: &Arc<GameRules>, config: &TrainingConfig, episodes: usize) -> Result<f64> {
    evaluate(net, rules, episodes, config.schedule.eps_test, derive_seed(config.master_seed, "base-eval"))
}

/// First checkpoint at or above `threshold` whose successor also is.
pub fn steps_to_threshold(checkpoints: &[Checkpoint], threshold: f64) -> Option<u64> {
    checkpoints
        .windows(2)
        .find(|w| w.iter().all(|c| c.avg_test_reward >= threshold))
        .map(|w| w[0].step)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeedupResult {
    pub steps_to_threshold_control: u64,
    pub steps_to_threshold_transfer: Option<u64>,
    /// Control steps over transfer steps; a transfer that is already at the
    /// threshold at step 0 counts as one step.
    pub ratio: Option<f64>,
}

impl SpeedupResult {
    pub fn from_histories(control: &[Checkpoint], transfer: &[Checkpoint], threshold: f64) -> Result<SpeedupResult> {
        let c = steps_to_threshold(control, threshold).ok_or_else(|| {
            Error::ExperimentInvalid(format!("control never reached reward {threshold}"))
        })?;
        let t = steps_to_threshold(transfer, threshold);
        Ok(SpeedupResult {
            steps_to_threshold_control: c,
            steps_to_threshold_transfer: t,
            ratio: t.map(|t| c as f64 / t.max(1) as f64),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TransferSpec {
    pub source_seed: u64,
    pub target_seed: u64,
    /// Budget of the source run and of the control run.
    pub source_steps: u64,
    pub transfer_steps: u64,
    pub threshold: f64,
    /// Learning rate of the transfer phase; `None` keeps the base rate.
    pub transfer_learning_rate: Option<f64>,
    pub vi_iterations: usize,
    pub config: TrainingConfig,
}

/// Multiplier applied to the base learning rate by the high-rate transfer variant.
pub const HIGH_RATE_FACTOR: f64 = 5.0;

impl TransferSpec {
    pub fn new(source_seed: u64, target_seed: u64, config: TrainingConfig) -> TransferSpec {
        TransferSpec {
            source_seed,
            target_seed,
            source_steps: config.steps,
            transfer_steps: config.steps,
            threshold: 2.0,
            transfer_learning_rate: None,
            vi_iterations: crate::vinnet::DEFAULT_VI_ITERATIONS,
            config,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_seed == self.target_seed {
            return Err(Error::Config("source and target seeds must differ".into()));
        }
        // Off-grid at worst; the target plus six attractors at best.
        if !(-3.0..=9.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} is not an achievable return", self.threshold)));
        }
        if let Some(lr) = self.transfer_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config("transfer learning rate must be positive".into()));
            }
        }
        self.config.validate()
    }
}

#[derive(Clone, Debug)]
pub struct TransferRuns {
    pub source: RetrainRun,
    pub control: RetrainRun,
    pub transfer: RetrainRun,
}

impl TransferRuns {
    pub fn speedup(&self, threshold: f64) -> Result<SpeedupResult> {
        SpeedupResult::from_histories(&self.control.history.checkpoints, &self.transfer.history.checkpoints, threshold)
    }
}

#[derive(Clone, Debug)]
pub struct TransferOutcome {
    pub runs: TransferRuns,
    pub speedup: SpeedupResult,
}

/// Trains on the source game, then learns the target game twice: from
/// scratch (control) and from the source network with only attention and
/// reward relearned (transfer).
pub fn run_autogen_transfer(spec: &TransferSpec) -> Result<TransferOutcome> {
    let runs = run_transfer_phases(spec)?;
    let speedup = runs.speedup(spec.threshold)?;
    Ok(TransferOutcome { runs, speedup })
}

/// All three phases of [`run_autogen_transfer`] without the speedup
/// computation, so the histories survive a control that never reaches the
/// threshold. Control and transfer stop once the threshold rule is met.
pub fn run_transfer_phases(spec: &TransferSpec) -> Result<TransferRuns> {
    spec.validate()?;
    let source_rules = Arc::new(GameRules::generate(spec.source_seed, Variant::Autogen));
    let target_rules = Arc::new(GameRules::generate(spec.target_seed, Variant::Autogen));
    let source = train_source(spec, &source_rules)?;
    let (control, transfer) = learn_target(spec, &target_rules, &source.network)?;
    Ok(TransferRuns {
        source,
        control,
        transfer,
    })
}

/// Phase one: end-to-end training on the source game.
pub fn train_source(spec: &TransferSpec, source_rules: &Arc<GameRules>) -> Result<RetrainRun> {
    let base = &spec.config;
    let mut network = VinNetwork::build(
        source_rules.num_channels(),
        spec.vi_iterations,
        derive_seed(base.master_seed, "source-init"),
    )?;
    let config = TrainingConfig {
        steps: spec.source_steps,
        master_seed: derive_seed(base.master_seed, "source"),
        ..base.clone()
    };
    let history = run_training(source_rules, &mut network, &config)?;
    Ok(RetrainRun { history, network })
}

/// The control and transfer phases of [`run_autogen_transfer`] given a
/// trained source network.
pub fn learn_target(
    spec: &TransferSpec,
    target_rules: &Arc<GameRules>,
    source_net: &VinNetwork,
) -> Result<(RetrainRun, RetrainRun)> {
    let base = &spec.config;
    let mut control_net = VinNetwork::build(
        target_rules.num_channels(),
        source_net.iterations(),
        derive_seed(base.master_seed, "control-init"),
    )?;
    let control_config = TrainingConfig {
        steps: spec.source_steps,
        stop_at: Some(spec.threshold),
        master_seed: derive_seed(base.master_seed, "control"),
        ..base.clone()
    };
    let control_history = run_training(target_rules, &mut control_net, &control_config)?;

    let transfer_config = TrainingConfig {
        steps: spec.transfer_steps,
        stop_at: Some(spec.threshold),
        learning_rate: spec.transfer_learning_rate.unwrap_or(base.learning_rate),
        master_seed: derive_seed(base.master_seed, "transfer"),
        ..base.clone()
    };
    let transfer = self_transfer(target_rules, source_net, LayerSet::AttentionReward, &transfer_config)?;
    Ok((
        RetrainRun {
            history: control_history,
            network: control_net,
        },
        transfer,
    ))
}

/// Requirements on a (source, target) pair of auto-generated games.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairConstraints {
    /// Number of channels the target maps to the repulsor class.
    pub target_repulsor_channels: usize,
    /// Inclusive bounds on the number of channels 1..=7 that carry the
    /// same class in both games.
    pub min_shared: usize,
    pub max_shared: usize,
    pub max_attempts: usize,
}

impl Default for PairConstraints {
    fn default() -> Self {
        PairConstraints {
            target_repulsor_channels: 2,
            min_shared: 0,
            max_shared: 0,
            max_attempts: 100_000,
        }
    }
}

/// Channels (other than the always-empty channel 0) carrying the same
/// class in both games.
pub fn shared_meanings(a: &GameRules, b: &GameRules) -> usize {
    (1..a.num_channels().min(b.num_channels()))
        .filter(|&c| a.class_of(c).is_some() && a.class_of(c) == b.class_of(c))
        .count()
}

impl PairConstraints {
    pub fn check(&self, source: &GameRules, target: &GameRules) -> bool {
        let shared = shared_meanings(source, target);
        source.seed() != target.seed()
            && target.channels_of(ObjectClass::Repulsor).len() == self.target_repulsor_channels
            && (self.min_shared..=self.max_shared).contains(&shared)
    }
}

/// Rejection-samples a seed pair that satisfies `constraints`.
pub fn select_seed_pair(rng: &mut impl Rng, constraints: &PairConstraints) -> Result<(u64, u64)> {
    for _ in 0..constraints.max_attempts {
        let (s, t) = (rng.random::<u64>(), rng.random::<u64>());
        let source = GameRules::generate(s, Variant::Autogen);
        let target = GameRules::generate(t, Variant::Autogen);
        if constraints.check(&source, &target) {
            return Ok((s, t));
        }
    }
    Err(Error::NoSeedPair {
        attempts: constraints.max_attempts,
    })
}

/// Line-based `key = value` description of a transfer experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Manifest {
        Manifest { entries: Vec::new() }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("manifest key `{key}` has invalid value `{v}`")))
            })
            .transpose()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest::new()
    }
}

impl FromStr for Manifest {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut m = Manifest::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, format!("expected `key = value`, got `{line}`")))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::parse(i + 1, "empty key"));
            }
            if m.get(k).is_some() {
                return Err(Error::parse(i + 1, format!("duplicate key `{k}`")));
            }
            m.set(k, v.trim());
        }
        Ok(m)
    }
}

/// `<root>/<exp>/<condition>/<replicate>/history.csv`.
pub fn history_path(root: &Path, experiment: &str, condition: &str, replicate: usize) -> PathBuf {
    root.join(experiment)
        .join(condition)
        .join(replicate.to_string())
        .join("history.csv")
}

pub const SUMMARY_HEADER: &str = "replicate,steps_to_threshold_control,steps_to_threshold_transfer,ratio";

/// `summary.csv` rows, one per replicate; unreached values are empty.
pub fn summary_csv(results: &[SpeedupResult]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for (i, r) in results.iter().enumerate() {
        let t = r.steps_to_threshold_transfer.map_or(String::new(), |v| v.to_string());
        let ratio = r.ratio.map_or(String::new(), |v| format!("{v:?}"));
        writeln!(out, "{i},{},{t},{ratio}", r.steps_to_threshold_control).unwrap();
    }
    out
}

/// Median of a non-empty list; `None` entries (not reached) sort last.
pub fn median_steps(values: &[Option<u64>]) -> Option<u64> {
    let mut v: Vec<Option<u64>> = values.to_vec();
    v.sort_by_key(|x| x.unwrap_or(u64::MAX));
    v.get(v.len() / 2).copied().flatten()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
