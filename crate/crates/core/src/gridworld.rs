//! Seeded 8×8 grid-world games.
//!
//! A [`GameRules`] value fixes which observation channel carries which
//! [`ObjectClass`]; the simplified game uses five channels in a fixed order,
//! the auto-generated family scatters the classes over eight channels
//! according to a seed. Dynamics are identical across the family.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nnet::{Shape, Tensor};
use crate::rng::{derive_indexed, rng_from};

pub const GRID: usize = 8;
pub const CELLS: usize = GRID * GRID;
pub const MAX_TURNS: u32 = 100;
pub const OFF_GRID_REWARD: f64 = -3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectClass {
    Empty,
    Player,
    Target,
    Attractor,
    Repulsor,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 5] = [
        ObjectClass::Empty,
        ObjectClass::Player,
        ObjectClass::Target,
        ObjectClass::Attractor,
        ObjectClass::Repulsor,
    ];

    /// Reward for stepping onto a cell of this class.
    pub fn reward(self) -> f64 {
        match self {
            ObjectClass::Empty | ObjectClass::Player => 0.0,
            ObjectClass::Target => 3.0,
            ObjectClass::Attractor => 1.0,
            ObjectClass::Repulsor => -1.0,
        }
    }

    pub fn is_consumable(self) -> bool {
        matches!(self, ObjectClass::Attractor | ObjectClass::Repulsor)
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Empty => "empty",
            ObjectClass::Player => "player",
            ObjectClass::Target => "target",
            ObjectClass::Attractor => "attractor",
            ObjectClass::Repulsor => "repulsor",
        }
    }

    pub fn symbol(self) -> char {
        match self {
            ObjectClass::Empty => '.',
            ObjectClass::Player => 'P',
            ObjectClass::Target => 'T',
            ObjectClass::Attractor => '+',
            ObjectClass::Repulsor => '-',
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::parse(0, format!("unknown object class `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Simplified,
    Autogen,
}

impl Variant {
    pub fn num_channels(self) -> usize {
        match self {
            Variant::Simplified => 5,
            Variant::Autogen => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Simplified => "simplified",
            Variant::Autogen => "autogen",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simplified" => Ok(Variant::Simplified),
            "autogen" => Ok(Variant::Autogen),
            _ => Err(Error::parse(0, format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }

    /// (row, column) displacement.
    pub fn delta(self) -> (i8, i8) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }
}

/// Inclusive range of sites placed per mapped attractor/repulsor channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SiteCounts {
    pub min: usize,
    pub max: usize,
}

impl Default for SiteCounts {
    fn default() -> Self {
        SiteCounts { min: 1, max: 3 }
    }
}

/// One game of the family: the channel → object-class assignment.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GameRules {
    seed: u64,
    variant: Variant,
    channel_class: Vec<Option<ObjectClass>>,
    site_counts: SiteCounts,
}

impl GameRules {
    /// Rules for `(seed, variant)`.
    ///
    /// The simplified game always uses the order empty, player, target,
    /// attractor, repulsor. Auto-generated games draw the player, the target,
    /// one or two attractor channels and one or two repulsor channels without
    /// replacement from channels 1..=7; channel 0 is always empty.
    pub fn generate(seed: u64, variant: Variant) -> GameRules {
        let channel_class = match variant {
            Variant::Simplified => ObjectClass::ALL.iter().copied().map(Some).collect(),
            Variant::Autogen => {
                let mut rng = rng_from(seed);
                let mut pool: Vec<usize> = (1..8).collect();
                for i in 0..pool.len() {
                    let j = rng.random_range(i..pool.len());
                    pool.swap(i, j);
                }
                let attractors = rng.random_range(1..=2usize);
                let repulsors = rng.random_range(1..=2usize);
                let mut classes = vec![None; 8];
                classes[0] = Some(ObjectClass::Empty);
                let order = [ObjectClass::Player, ObjectClass::Target]
                    .into_iter()
                    .chain(std::iter::repeat_n(ObjectClass::Attractor, attractors))
                    .chain(std::iter::repeat_n(ObjectClass::Repulsor, repulsors));
                for (ch, class) in pool.into_iter().zip(order) {
                    classes[ch] = Some(class);
                }
                classes
            }
        };
        GameRules {
            seed,
            variant,
            channel_class,
            site_counts: SiteCounts::default(),
        }
    }

    pub fn simplified() -> GameRules {
        GameRules::generate(0, Variant::Simplified)
    }

    pub fn with_site_counts(mut self, counts: SiteCounts) -> GameRules {
        self.site_counts = counts;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn num_channels(&self) -> usize {
        self.channel_class.len()
    }

    pub fn site_counts(&self) -> SiteCounts {
        self.site_counts
    }

    /// Class carried by `channel`, or `None` for unused channels.
    pub fn class_of(&self, channel: usize) -> Option<ObjectClass> {
        self.channel_class.get(channel).copied().flatten()
    }

    pub fn channel_classes(&self) -> &[Option<ObjectClass>] {
        &self.channel_class
    }

    pub fn channels_of(&self, class: ObjectClass) -> Vec<usize> {
        (0..self.num_channels())
            .filter(|&c| self.class_of(c) == Some(class))
            .collect()
    }

    pub fn player_channel(&self) -> usize {
        self.channels_of(ObjectClass::Player)[0]
    }

    pub fn target_channel(&self) -> usize {
        self.channels_of(ObjectClass::Target)[0]
    }

    /// Mapped channels in legend order: empty, player, target, attractors,
    /// repulsors.
    pub fn legend(&self) -> Vec<(usize, ObjectClass)> {
        ObjectClass::ALL
            .into_iter()
            .flat_map(|class| self.channels_of(class).into_iter().map(move |c| (c, class)))
            .collect()
    }

    /// Checks the structural invariants every rule set must satisfy.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_channels() != self.variant.num_channels() {
            return fail(format!(
                "{} rules need {} channels, found {}",
                self.variant,
                self.variant.num_channels(),
                self.num_channels()
            ));
        }
        if self.class_of(0) != Some(ObjectClass::Empty) {
            return fail("channel 0 must be empty".into());
        }
        let count = |class| self.channels_of(class).len();
        if count(ObjectClass::Empty) != 1 || count(ObjectClass::Player) != 1 || count(ObjectClass::Target) != 1 {
            return fail("exactly one empty, player and target channel required".into());
        }
        let (a, r) = (count(ObjectClass::Attractor), count(ObjectClass::Repulsor));
        let allowed = match self.variant {
            Variant::Simplified => 1..=1,
            Variant::Autogen => 1..=2,
        };
        if !allowed.contains(&a) || !allowed.contains(&r) {
            return fail(format!("{a} attractor / {r} repulsor channels out of range"));
        }
        if self.variant == Variant::Simplified && self.channel_class.iter().copied().ne(ObjectClass::ALL.map(Some)) {
            return fail("simplified rules must use the fixed channel order".into());
        }
        if self.site_counts.min > self.site_counts.max {
            return fail("site count range is empty".into());
        }
        Ok(())
    }

    /// Line-based text form: `seed = <n>`, `variant = <name>`, then one
    /// `channel <i> = <class>` line per channel (`unused` when unmapped).
    pub fn to_text(&self) -> String {
        let mut out = format!("seed = {}\nvariant = {}\n", self.seed, self.variant);
        for (i, class) in self.channel_class.iter().enumerate() {
            let name = class.map_or("unused", ObjectClass::name);
            writeln!(out, "channel {i} = {name}").unwrap();
        }
        out
    }
}

impl FromStr for GameRules {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut seed = None;
        let mut variant = None;
        let mut classes = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::parse(n + 1, "expected `key = value`"))?;
            match key.split_whitespace().collect::<Vec<_>>().as_slice() {
                ["seed"] => seed = Some(value.parse().map_err(|_| Error::parse(n + 1, "bad seed"))?),
                ["variant"] => variant = Some(value.parse::<Variant>().map_err(|_| Error::parse(n + 1, "bad variant"))?),
                ["channel", idx] => {
                    let idx: usize = idx.parse().map_err(|_| Error::parse(n + 1, "bad channel index"))?;
                    if idx != classes.len() {
                        return Err(Error::parse(n + 1, "channels must be listed in order"));
                    }
                    let class = match value {
                        "unused" => None,
                        other => Some(other.parse().map_err(|_| Error::parse(n + 1, "bad class"))?),
                    };
                    classes.push(class);
                }
                _ => return Err(Error::parse(n + 1, format!("unknown key `{key}`"))),
            }
        }
        let rules = GameRules {
            seed: seed.ok_or_else(|| Error::parse(0, "missing seed"))?,
            variant: variant.ok_or_else(|| Error::parse(0, "missing variant"))?,
            channel_class: classes,
            site_counts: SiteCounts::default(),
        };
        rules.validate()?;
        Ok(rules)
    }
}

/// Compact observation: one channel index per cell, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Observation {
    cells: [u8; CELLS],
    channels: u8,
}

impl Observation {
    pub fn num_channels(&self) -> usize {
        usize::from(self.channels)
    }

    pub fn channel_at(&self, row: usize, col: usize) -> usize {
        usize::from(self.cells[row * GRID + col])
    }

    pub fn cells(&self) -> &[u8; CELLS] {
        &self.cells
    }

    /// One-hot `8×8×C` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros(Shape::new(GRID, GRID, self.num_channels()));
        for (i, &ch) in self.cells.iter().enumerate() {
            t.values_mut()[usize::from(ch) * CELLS + i] = 1.0;
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: GridState,
    pub reward: f64,
    pub done: bool,
}

/// Full environment state.
///
/// `cells` holds the terrain channel of every cell (0 for empty); the player
/// is tracked separately and never stored as terrain.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GridState {
    rules: Arc<GameRules>,
    cells: [u8; CELLS],
    player: (i8, i8),
    turn: u32,
    terminal: bool,
    episode_seed: u64,
}

impl GridState {
    /// Starts an episode: one player, one target and, per mapped
    /// attractor/repulsor channel, a uniform number of sites from the
    /// rules' [`SiteCounts`], all on distinct uniformly drawn cells.
    pub fn reset(rules: &Arc<GameRules>, episode_seed: u64) -> Result<GridState> {
        let mut rng = rng_from(derive_indexed(rules.seed(), "episode", episode_seed));
        let counts = rules.site_counts();
        let mut objects = vec![rules.target_channel()];
        for (ch, class) in rules.legend() {
            if class.is_consumable() {
                let n = rng.random_range(counts.min..=counts.max);
                objects.extend(std::iter::repeat_n(ch, n));
            }
        }
        let requested = objects.len() + 1;
        if requested > CELLS {
            return Err(Error::Overcrowded {
                requested,
                cells: CELLS,
            });
        }
        let mut order: [u8; CELLS] = std::array::from_fn(|i| i as u8);
        for i in 0..requested {
            let j = rng.random_range(i..CELLS);
            order.swap(i, j);
        }
        let player_cell = usize::from(order[0]);
        let mut cells = [0u8; CELLS];
        for (&cell, &ch) in order[1..requested].iter().zip(&objects) {
            cells[usize::from(cell)] = ch as u8;
        }
        Ok(GridState {
            rules: Arc::clone(rules),
            cells,
            player: ((player_cell / GRID) as i8, (player_cell % GRID) as i8),
            turn: 0,
            terminal: false,
            episode_seed,
        })
    }

    /// Builds a state from eight rows of text. `.` is empty, `P` the player,
    /// `T` the target, `+`/`-` the first attractor/repulsor channel and a
    /// digit an explicit channel.
    pub fn from_ascii(rules: &Arc<GameRules>, rows: &[&str]) -> Result<GridState> {
        if rows.len() != GRID || rows.iter().any(|r| r.chars().count() != GRID) {
            return Err(Error::parse(0, "board must be 8 rows of 8 characters"));
        }
        let first = |class| rules.channels_of(class).first().copied();
        let mut cells = [0u8; CELLS];
        let mut player = None;
        for (r, row) in rows.iter().enumerate() {
            for (c, ch) in row.chars().enumerate() {
                let channel = match ch {
                    '.' => Some(0),
                    'P' => {
                        player = Some((r as i8, c as i8));
                        Some(0)
                    }
                    'T' => first(ObjectClass::Target),
                    '+' => first(ObjectClass::Attractor),
                    '-' => first(ObjectClass::Repulsor),
                    d => d
                        .to_digit(10)
                        .map(|d| d as usize)
                        .filter(|&d| rules.class_of(d).is_some_and(|k| k != ObjectClass::Player)),
                };
                let channel = channel.ok_or_else(|| Error::parse(r + 1, format!("bad cell `{ch}`")))?;
                cells[r * GRID + c] = channel as u8;
            }
        }
        Ok(GridState {
            rules: Arc::clone(rules),
            cells,
            player: player.ok_or_else(|| Error::parse(0, "board has no player"))?,
            turn: 0,
            terminal: false,
            episode_seed: 0,
        })
    }

    pub fn rules(&self) -> &Arc<GameRules> {
        &self.rules
    }

    /// Player position; may be off-grid in a terminal state.
    pub fn player(&self) -> (i8, i8) {
        self.player
    }

    pub fn turn(&self) -> u32 {
        self.turn
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn episode_seed(&self) -> u64 {
        self.episode_seed
    }

    pub fn with_turn(mut self, turn: u32) -> GridState {
        assert!(turn <= MAX_TURNS);
        self.turn = turn;
        self
    }

    /// Terrain channel at a cell (0 when empty).
    pub fn terrain(&self, row: usize, col: usize) -> usize {
        usize::from(self.cells[row * GRID + col])
    }

    pub fn class_at(&self, row: usize, col: usize) -> ObjectClass {
        self.rules
            .class_of(self.terrain(row, col))
            .unwrap_or(ObjectClass::Empty)
    }

    /// Number of non-empty terrain cells (target and consumables).
    pub fn object_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c != 0).count()
    }

    /// Checks the state invariants: turn within the limit, player on the
    /// board and standing on empty terrain while the episode runs, and every
    /// terrain channel mapped to a non-player class.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.turn > MAX_TURNS {
            return fail(format!("turn {} exceeds {MAX_TURNS}", self.turn));
        }
        if self.turn == MAX_TURNS && !self.terminal {
            return fail("turn limit reached without termination".into());
        }
        for (cell, &ch) in self.cells.iter().enumerate() {
            match self.rules.class_of(usize::from(ch)) {
                Some(ObjectClass::Player) | None => {
                    return fail(format!("cell {cell} holds channel {ch}"));
                }
                _ => {}
            }
        }
        if !self.terminal {
            let (r, c) = self.player;
            let grid = 0..GRID as i8;
            if !grid.contains(&r) || !grid.contains(&c) {
                return fail(format!("live player off the board at ({r}, {c})"));
            }
            if self.terrain(r as usize, c as usize) != 0 {
                return fail(format!("player stands on an object at ({r}, {c})"));
            }
        }
        Ok(())
    }

    /// Applies `action` in place and returns `(reward, done)`.
    ///
    /// # Panics
    /// If the state is already terminal.
    pub fn apply(&mut self, action: Action) -> (f64, bool) {
        assert!(!self.terminal, "step called on a terminal state");
        let (dr, dc) = action.delta();
        let (r, c) = (self.player.0 + dr, self.player.1 + dc);
        self.player = (r, c);
        self.turn += 1;
        let grid = 0..GRID as i8;
        let (reward, mut done) = if !grid.contains(&r) || !grid.contains(&c) {
            (OFF_GRID_REWARD, true)
        } else {
            let cell = r as usize * GRID + c as usize;
            let class = self.rules.class_of(usize::from(self.cells[cell])).unwrap_or(ObjectClass::Empty);
            if class.is_consumable() {
                self.cells[cell] = 0;
            }
            (class.reward(), class == ObjectClass::Target)
        };
        if self.turn >= MAX_TURNS {
            done = true;
        }
        self.terminal = done;
        (reward, done)
    }

    pub fn step(&self, action: Action) -> StepResult {
        let mut next_state = self.clone();
        let (reward, done) = next_state.apply(action);
        StepResult {
            next_state,
            reward,
            done,
        }
    }

    /// # Panics
    /// If the state is terminal.
    pub fn observation(&self) -> Observation {
        assert!(!self.terminal, "observation of a terminal state");
        let mut cells = self.cells;
        cells[self.player.0 as usize * GRID + self.player.1 as usize] = self.rules.player_channel() as u8;
        Observation {
            cells,
            channels: self.rules.num_channels() as u8,
        }
    }

    /// One-hot `8×8×C` observation tensor.
    pub fn encode_observation(&self) -> Tensor {
        self.observation().to_tensor()
    }

    /// Legend header followed by one line per grid row.
    pub fn render_ascii(&self) -> String {
        let mut out = format!(
            "seed {} variant {} turn {}\n",
            self.rules.seed(),
            self.rules.variant(),
            self.turn
        );
        for (ch, class) in self.rules.legend() {
            writeln!(out, "legend {} {} channel {}", class.symbol(), class, ch).unwrap();
        }
        for r in 0..GRID {
            for c in 0..GRID {
                let symbol = if !self.terminal && self.player == (r as i8, c as i8) {
                    'P'
                } else {
                    self.class_at(r, c).symbol()
                };
                out.push(symbol);
            }
            out.push('\n');
        }
        out
    }
}
