//! Run configuration files.
//!
//! One `key = value` pair per line. Keys carry their section as a dotted
//! prefix (`model.d_model = 64`); a `[section]` line prefixes the keys that
//! follow it until the next header. `#` starts a comment. Lists are comma
//! separated. Every key is optional; unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mam_core::{Discretization, ModelConfig, ModelKind};
use mam_marl::{ConsensusGame, ForagingConfig, ForagingLite, MarkovGame, TrainConfig};

use crate::error::{HarnessError, Result};

/// Environment selection.
#[derive(Clone, Debug, PartialEq)]
pub enum EnvConfig {
    Consensus { agents: usize, actions: usize, horizon: usize },
    Foraging(ForagingConfig),
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::Consensus { agents: 3, actions: 4, horizon: 16 }
    }
}

impl EnvConfig {
    pub fn build(&self) -> mam_core::Result<Box<dyn MarkovGame>> {
        Ok(match self {
            Self::Consensus { agents, actions, horizon } => Box::new(ConsensusGame::new(*agents, *actions, *horizon)?),
            Self::Foraging(cfg) => Box::new(ForagingLite::new(*cfg)?),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Consensus { .. } => "consensus",
            Self::Foraging(_) => "foraging",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    /// Agent counts, ascending.
    pub agents: Vec<usize>,
    pub repetitions: usize,
    pub warmup: usize,
    pub obs_dim: usize,
    pub actions: usize,
    pub models: Vec<ModelKind>,
    /// Shortest wall time one timed repetition may take; shorter ones are
    /// repeated internally until they reach it.
    pub min_sample_secs: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            agents: vec![8, 16, 32, 64, 128, 256],
            repetitions: 20,
            warmup: 3,
            obs_dim: 16,
            actions: 5,
            models: vec![ModelKind::Mam, ModelKind::Attention],
            min_sample_secs: 0.005,
        }
    }
}

/// Deliberate defects that the verification suite must detect.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// The scan discretizes `B` by zero-order hold while the implicit-matrix
    /// oracle keeps the Euler rule.
    ZohScan,
}

impl FromStr for Fault {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "none" => Ok(Self::None),
            "zoh_scan" => Ok(Self::ZohScan),
            _ => Err(()),
        }
    }
}

impl std::fmt::Display for Fault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::ZohScan => "zoh_scan",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Agent count and observation/action sizes follow the environment.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Stop training once a greedy evaluation reaches this fraction of the
    /// environment's optimal return.
    pub stop_fraction: Option<f64>,
    pub env: EnvConfig,
    pub bench: BenchConfig,
    pub fault: Fault,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let env = EnvConfig::default();
        let mut cfg = Self {
            model: ModelConfig::new(1, 1, 1),
            train: TrainConfig::default(),
            stop_fraction: None,
            env,
            bench: BenchConfig::default(),
            fault: Fault::None,
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
        };
        cfg.sync_model_to_env().expect("default environment builds");
        cfg
    }
}

struct Entry {
    key: String,
    value: String,
    location: String,
}

fn tokenize(text: &str, origin: &str) -> Result<Vec<Entry>> {
    let mut section = String::new();
    let mut seen = BTreeMap::new();
    let mut out = vec![];
    for (i, raw) in text.lines().enumerate() {
        let location = format!("{origin}:{}", i + 1);
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| HarnessError::Syntax {
                location: location.clone(),
                message: format!("unterminated section header `{line}`"),
            })?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| HarnessError::Syntax {
            location: location.clone(),
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let k = k.trim();
        let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
        if let Some(prev) = seen.insert(key.clone(), location.clone()) {
            return Err(HarnessError::Syntax { location, message: format!("`{key}` already set at {prev}") });
        }
        out.push(Entry { key, value: v.trim().to_string(), location });
    }
    Ok(out)
}

fn typed<T: FromStr>(e: &Entry, expected: &'static str) -> Result<T> {
    e.value.parse().map_err(|_| HarnessError::TypeMismatch {
        location: e.location.clone(),
        key: e.key.clone(),
        expected,
        value: e.value.clone(),
    })
}

fn positive(e: &Entry) -> Result<usize> {
    let v: usize = typed(e, "a positive integer")?;
    if v == 0 {
        return Err(HarnessError::TypeMismatch {
            location: e.location.clone(),
            key: e.key.clone(),
            expected: "a positive integer",
            value: e.value.clone(),
        });
    }
    Ok(v)
}

fn list<T: FromStr>(e: &Entry, expected: &'static str) -> Result<Vec<T>> {
    let items: Vec<&str> = e.value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(HarnessError::TypeMismatch {
            location: e.location.clone(),
            key: e.key.clone(),
            expected,
            value: e.value.clone(),
        });
    }
    items
        .into_iter()
        .map(|s| {
            s.parse().map_err(|_| HarnessError::TypeMismatch {
                location: e.location.clone(),
                key: e.key.clone(),
                expected,
                value: s.to_string(),
            })
        })
        .collect()
}

fn unknown(e: &Entry) -> HarnessError {
    HarnessError::UnknownKey { location: e.location.clone(), key: e.key.clone() }
}

/// Applies a `model.*` key (without the prefix). `snapshot` admits the
/// environment-derived sizes stored in checkpoints.
fn apply_model(m: &mut ModelConfig, field: &str, e: &Entry, snapshot: bool) -> Result<()> {
    match field {
        "kind" => m.kind = typed(e, "`mam` or `attention`")?,
        "d_model" => m.d_model = positive(e)?,
        "state_dim" => m.state_dim = positive(e)?,
        "dt_rank" => m.dt_rank = positive(e)?,
        "conv_width" => m.conv_width = positive(e)?,
        "n_blocks" => m.n_blocks = positive(e)?,
        "n_heads" => m.n_heads = positive(e)?,
        "attn_blocks" => m.attn_blocks = positive(e)?,
        "discretization" => m.discretization = typed::<Discretization>(e, "`euler` or `zoh`")?,
        "n_agents" if snapshot => m.n_agents = positive(e)?,
        "obs_dim" if snapshot => m.obs_dim = positive(e)?,
        "n_actions" if snapshot => m.n_actions = positive(e)?,
        _ => return Err(unknown(e)),
    }
    Ok(())
}

fn apply_train(cfg: &mut RunConfig, field: &str, e: &Entry) -> Result<()> {
    let t = &mut cfg.train;
    match field {
        "gamma" => t.gamma = typed(e, "a number")?,
        "gae_lambda" => t.gae_lambda = typed(e, "a number")?,
        "clip" => t.clip = typed(e, "a number")?,
        "entropy_coef" => t.entropy_coef = typed(e, "a number")?,
        "value_coef" => t.value_coef = typed(e, "a number")?,
        "rollout_length" => t.rollout_length = positive(e)?,
        "epochs" => t.epochs = positive(e)?,
        "minibatches" => t.minibatches = positive(e)?,
        "learning_rate" => t.learning_rate = typed(e, "a number")?,
        "max_grad_norm" => t.max_grad_norm = typed(e, "a number")?,
        "permute_agents" => t.permute_agents = typed(e, "`true` or `false`")?,
        "updates" => t.updates = positive(e)?,
        "eval_interval" => t.eval_interval = positive(e)?,
        "eval_episodes" => t.eval_episodes = positive(e)?,
        "stop_fraction" => cfg.stop_fraction = Some(typed(e, "a number")?),
        _ => return Err(unknown(e)),
    }
    Ok(())
}

fn apply_bench(b: &mut BenchConfig, field: &str, e: &Entry) -> Result<()> {
    match field {
        "agents" => {
            let mut v: Vec<usize> = list(e, "a list of positive integers")?;
            if v.contains(&0) {
                return Err(HarnessError::TypeMismatch {
                    location: e.location.clone(),
                    key: e.key.clone(),
                    expected: "a list of positive integers",
                    value: e.value.clone(),
                });
            }
            v.sort_unstable();
            v.dedup();
            b.agents = v;
        }
        "repetitions" => b.repetitions = positive(e)?,
        "warmup" => b.warmup = typed(e, "a non-negative integer")?,
        "obs_dim" => b.obs_dim = positive(e)?,
        "actions" => b.actions = positive(e)?,
        "models" => b.models = list(e, "a list of `mam`/`attention`")?,
        "min_sample_secs" => b.min_sample_secs = typed(e, "a number")?,
        _ => return Err(unknown(e)),
    }
    Ok(())
}

fn build_env(entries: &[&Entry]) -> Result<EnvConfig> {
    let name = entries.iter().find(|e| e.key == "env.name");
    let name = match name {
        Some(e) => e.value.as_str(),
        None => "consensus",
    };
    let mut env = match name {
        "consensus" => EnvConfig::default(),
        "foraging" => EnvConfig::Foraging(ForagingConfig::default()),
        _ => {
            let e = entries.iter().find(|e| e.key == "env.name").expect("name came from an entry");
            return Err(HarnessError::TypeMismatch {
                location: e.location.clone(),
                key: e.key.clone(),
                expected: "`consensus` or `foraging`",
                value: e.value.clone(),
            });
        }
    };
    for e in entries.iter().filter(|e| e.key != "env.name") {
        let field = &e.key["env.".len()..];
        match (&mut env, field) {
            (EnvConfig::Consensus { agents, .. }, "agents") => *agents = positive(e)?,
            (EnvConfig::Consensus { actions, .. }, "actions") => *actions = positive(e)?,
            (EnvConfig::Consensus { horizon, .. }, "horizon") => *horizon = positive(e)?,
            (EnvConfig::Foraging(f), "agents") => f.n_agents = positive(e)?,
            (EnvConfig::Foraging(f), "horizon") => f.horizon = positive(e)?,
            (EnvConfig::Foraging(f), "grid") => f.grid = positive(e)?,
            (EnvConfig::Foraging(f), "food") => f.n_food = positive(e)?,
            (EnvConfig::Foraging(f), "max_level") => f.max_level = positive(e)?,
            _ => return Err(unknown(e)),
        }
    }
    Ok(env)
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let entries = tokenize(text, origin)?;
        let mut cfg = RunConfig::default();
        let mut env_entries = vec![];
        for e in &entries {
            let (section, field) = e.key.split_once('.').unwrap_or(("", e.key.as_str()));
            match section {
                "model" => apply_model(&mut cfg.model, field, e, false)?,
                "train" => apply_train(&mut cfg, field, e)?,
                "bench" => apply_bench(&mut cfg.bench, field, e)?,
                "env" => env_entries.push(e),
                "verify" if field == "fault" => cfg.fault = typed(e, "`none` or `zoh_scan`")?,
                "" if field == "seeds" => cfg.seeds = list(e, "a list of unsigned integers")?,
                "" if field == "out" => cfg.out_dir = PathBuf::from(&e.value),
                _ => return Err(unknown(e)),
            }
        }
        cfg.env = build_env(&env_entries)?;
        cfg.sync_model_to_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Copies the environment's agent count and sizes into the model.
    pub fn sync_model_to_env(&mut self) -> Result<()> {
        let env = self.env.build()?;
        self.model.n_agents = env.n_agents();
        self.model.obs_dim = env.obs_dim();
        self.model.n_actions = env.n_actions();
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(HarnessError::MissingField("seeds".into()));
        }
        if let Some(f) = self.stop_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(mam_core::Error::Config("train.stop_fraction must lie in (0, 1]".into()).into());
            }
        }
        if self.bench.models.is_empty() || self.bench.agents.is_empty() {
            return Err(HarnessError::MissingField("bench.agents / bench.models".into()));
        }
        Ok(())
    }

    /// Fully resolved configuration in the file format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let t = &self.train;
        let _ = writeln!(s, "seeds = {}", join(&self.seeds));
        let _ = writeln!(s, "out = {}", self.out_dir.display());
        s += &model_text(&self.model, false);
        for (k, v) in [
            ("gamma", t.gamma.to_string()),
            ("gae_lambda", t.gae_lambda.to_string()),
            ("clip", t.clip.to_string()),
            ("entropy_coef", t.entropy_coef.to_string()),
            ("value_coef", t.value_coef.to_string()),
            ("rollout_length", t.rollout_length.to_string()),
            ("epochs", t.epochs.to_string()),
            ("minibatches", t.minibatches.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("max_grad_norm", t.max_grad_norm.to_string()),
            ("permute_agents", t.permute_agents.to_string()),
            ("updates", t.updates.to_string()),
            ("eval_interval", t.eval_interval.to_string()),
            ("eval_episodes", t.eval_episodes.to_string()),
        ] {
            let _ = writeln!(s, "train.{k} = {v}");
        }
        if let Some(f) = self.stop_fraction {
            let _ = writeln!(s, "train.stop_fraction = {f}");
        }
        let _ = writeln!(s, "env.name = {}", self.env.name());
        match &self.env {
            EnvConfig::Consensus { agents, actions, horizon } => {
                let _ = writeln!(s, "env.agents = {agents}\nenv.actions = {actions}\nenv.horizon = {horizon}");
            }
            EnvConfig::Foraging(f) => {
                let _ = writeln!(
                    s,
                    "env.agents = {}\nenv.horizon = {}\nenv.grid = {}\nenv.food = {}\nenv.max_level = {}",
                    f.n_agents, f.horizon, f.grid, f.n_food, f.max_level
                );
            }
        }
        let b = &self.bench;
        let models: Vec<String> = b.models.iter().map(ToString::to_string).collect();
        let _ = writeln!(s, "bench.agents = {}", join(&b.agents));
        let _ = writeln!(s, "bench.repetitions = {}\nbench.warmup = {}", b.repetitions, b.warmup);
        let _ = writeln!(s, "bench.obs_dim = {}\nbench.actions = {}", b.obs_dim, b.actions);
        let _ = writeln!(s, "bench.models = {}\nbench.min_sample_secs = {}", models.join(","), b.min_sample_secs);
        let _ = writeln!(s, "verify.fault = {}", self.fault);
        s
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn model_text(m: &ModelConfig, snapshot: bool) -> String {
    let mut s = String::new();
    let mut fields = vec![
        ("kind", m.kind.to_string()),
        ("d_model", m.d_model.to_string()),
        ("state_dim", m.state_dim.to_string()),
        ("dt_rank", m.dt_rank.to_string()),
        ("conv_width", m.conv_width.to_string()),
        ("n_blocks", m.n_blocks.to_string()),
        ("n_heads", m.n_heads.to_string()),
        ("attn_blocks", m.attn_blocks.to_string()),
        ("discretization", m.discretization.to_string()),
    ];
    if snapshot {
        fields.push(("n_agents", m.n_agents.to_string()));
        fields.push(("obs_dim", m.obs_dim.to_string()));
        fields.push(("n_actions", m.n_actions.to_string()));
    }
    for (k, v) in fields {
        let _ = writeln!(s, "model.{k} = {v}");
    }
    s
}

/// Complete model description stored in checkpoints.
pub fn model_snapshot(m: &ModelConfig) -> String {
    model_text(m, true)
}

/// Inverse of [`model_snapshot`]; every field is required.
pub fn parse_model_snapshot(text: &str, origin: &str) -> Result<ModelConfig> {
    let entries = tokenize(text, origin)?;
    let mut m = ModelConfig::new(1, 1, 1);
    for e in &entries {
        match e.key.split_once('.') {
            Some(("model", field)) => apply_model(&mut m, field, e, true)?,
            _ => return Err(unknown(e)),
        }
    }
    for field in [
        "kind",
        "d_model",
        "state_dim",
        "dt_rank",
        "conv_width",
        "n_blocks",
        "n_heads",
        "attn_blocks",
        "discretization",
        "n_agents",
        "obs_dim",
        "n_actions",
    ] {
        let key = format!("model.{field}");
        if !entries.iter().any(|e| e.key == key) {
            return Err(HarnessError::MissingField(key));
        }
    }
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("", "t").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!((cfg.model.n_agents, cfg.model.obs_dim, cfg.model.n_actions), (3, 7, 4));
    }

    #[test]
    fn headers_and_dotted_keys_agree() {
        let a = RunConfig::parse("[model]\nd_model = 16 # narrow\n[bench]\nagents = 4,2", "t").unwrap();
        let b = RunConfig::parse("model.d_model=16\nbench.agents=4,2", "t").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.model.d_model, 16);
        assert_eq!(a.bench.agents, vec![2, 4]);
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let err = RunConfig::parse("model.d_model = 8\n[model]\nd_model = 9", "f.cfg").unwrap_err();
        assert!(err.to_string().contains("f.cfg:3"), "{err}");
    }

    #[test]
    fn env_keys_must_fit_the_environment() {
        let err = RunConfig::parse("env.grid = 4", "t").unwrap_err();
        assert!(matches!(err, HarnessError::UnknownKey { ref key, .. } if key == "env.grid"));
        let cfg = RunConfig::parse("env.name = foraging\nenv.grid = 6\nenv.agents = 3", "t").unwrap();
        assert_eq!(cfg.model.n_agents, 3);
        assert_eq!(cfg.model.obs_dim, 3 + 4 * 2 + 3 * 2 + 3);
        assert_eq!(cfg.model.n_actions, 6);
    }

    #[test]
    fn round_trips_through_text() {
        let cfg = RunConfig::parse(
            "seeds = 3,1\nmodel.kind = attention\ntrain.stop_fraction = 0.9\nenv.name = foraging\nverify.fault = zoh_scan",
            "t",
        )
        .unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text(), "again").unwrap(), cfg);
    }

    #[test]
    fn snapshot_round_trip_and_missing_field() {
        let m = RunConfig::default().model;
        assert_eq!(parse_model_snapshot(&model_snapshot(&m), "s").unwrap(), m);
        let partial: String =
            model_snapshot(&m).lines().filter(|l| !l.contains("obs_dim")).collect::<Vec<_>>().join("\n");
        assert!(
            matches!(parse_model_snapshot(&partial, "s"), Err(HarnessError::MissingField(k)) if k == "model.obs_dim")
        );
    }
}
