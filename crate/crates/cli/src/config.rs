//! Layered experiment configuration.
//!
//! Resolution order, later wins: published defaults for the chosen
//! algorithm, the TOML file, `--set section.key=value` overrides, then the
//! dedicated command-line flags. Every section rejects unknown keys.

use std::path::{Path, PathBuf};

use ffae::channel::{ChannelConfig, ChannelKind, OutputStage};
use ffae::eval::{SizeGrid, StopRule, SweepSpec};
use ffae::gradcheck::GradcheckConfig;
use ffae::layers::SgdConfig;
use ffae::models::{Architecture, CodeParams};
use ffae::training::{Algorithm, RlConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, Result};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "FFAE_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "runs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub algorithm: String,
    pub seed: u64,
    pub out_dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeSection {
    pub k: u32,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub kind: String,
    pub stage: String,
    pub train_ebn0_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub eval_stride: usize,
    pub eval_blocks: usize,
    /// Intermediate checkpoint interval in iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamSection {
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FfSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub classifier_lr: f64,
    pub classifier_weight_decay: f64,
    pub classifier_momentum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlSection {
    pub sigma: f64,
    pub rounds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub ebn0_db: f64,
    pub min_errors: u64,
    pub max_blocks: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub start_db: f64,
    pub stop_db: f64,
    pub step_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeSweepSection {
    pub encoder_layers: Vec<usize>,
    pub decoder_layers: Vec<usize>,
    pub widths: Vec<usize>,
    pub ebn0_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
}

/// A fully resolved configuration; this is what gets echoed next to the
/// results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub code: CodeSection,
    pub channel: ChannelSection,
    pub network: NetworkSection,
    pub training: TrainingSection,
    pub adam: AdamSection,
    pub ff: FfSection,
    pub rl: RlSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub size_sweep: SizeSweepSection,
    pub gradcheck: GradcheckSection,
}

impl ExperimentConfig {
    /// Published defaults for `algorithm`.
    pub fn defaults(algorithm: Algorithm, out_dir: &str) -> Self {
        let t = TrainConfig::defaults(algorithm);
        let sweep = SweepSpec::default();
        let stop = StopRule::default();
        let grid = SizeGrid::default();
        let gc = GradcheckConfig::default();
        Self {
            run: RunSection { algorithm: algorithm.as_str().into(), seed: t.seed, out_dir: out_dir.into() },
            code: CodeSection { k: t.code.k(), n: t.code.n() },
            channel: ChannelSection {
                kind: t.channel.as_str().into(),
                stage: t.stage.as_str().into(),
                train_ebn0_db: t.train_ebn0_db,
            },
            network: NetworkSection {
                encoder_layers: t.arch.encoder_layers,
                decoder_layers: t.arch.decoder_layers,
                width: t.arch.width,
            },
            training: TrainingSection {
                iterations: t.iterations,
                batch_size: t.batch_size,
                eval_stride: t.eval_stride,
                eval_blocks: t.eval_blocks,
                checkpoint_every: 0,
            },
            adam: AdamSection { lr: t.lr },
            ff: FfSection {
                lr: t.ff_net.lr,
                weight_decay: t.ff_net.weight_decay,
                momentum: t.ff_net.momentum,
                classifier_lr: t.ff_classifier.lr,
                classifier_weight_decay: t.ff_classifier.weight_decay,
                classifier_momentum: t.ff_classifier.momentum,
            },
            rl: RlSection { sigma: t.rl.sigma, rounds: t.rl.rounds },
            eval: EvalSection { ebn0_db: 7.0, min_errors: stop.min_errors, max_blocks: stop.max_blocks },
            sweep: SweepSection {
                start_db: sweep.ebn0_db[0],
                stop_db: *sweep.ebn0_db.last().expect("non-empty default grid"),
                step_db: sweep.ebn0_db[1] - sweep.ebn0_db[0],
            },
            size_sweep: SizeSweepSection {
                encoder_layers: grid.encoder_layers,
                decoder_layers: grid.decoder_layers,
                widths: grid.widths,
                ebn0_db: 7.0,
            },
            gradcheck: GradcheckSection { instances: gc.instances, step: gc.step, tolerance: gc.tolerance },
        }
    }

    pub fn algorithm(&self) -> Result<Algorithm> {
        self.run.algorithm.parse().map_err(|e| invalid_key("run.algorithm", e))
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.run.out_dir)
    }

    pub fn code_params(&self) -> Result<CodeParams> {
        CodeParams::new(self.code.k, self.code.n).map_err(|e| invalid_key("code", e))
    }

    pub fn channel_kind(&self) -> Result<ChannelKind> {
        self.channel.kind.parse().map_err(|e| invalid_key("channel.kind", e))
    }

    pub fn stage(&self) -> Result<OutputStage> {
        self.channel.stage.parse().map_err(|e| invalid_key("channel.stage", e))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            algorithm: self.algorithm()?,
            channel: self.channel_kind()?,
            stage: self.stage()?,
            train_ebn0_db: self.channel.train_ebn0_db,
            code: self.code_params()?,
            arch: Architecture {
                encoder_layers: self.network.encoder_layers,
                decoder_layers: self.network.decoder_layers,
                width: self.network.width,
            },
            iterations: self.training.iterations,
            batch_size: self.training.batch_size,
            lr: self.adam.lr,
            ff_net: SgdConfig { lr: self.ff.lr, weight_decay: self.ff.weight_decay, momentum: self.ff.momentum },
            ff_classifier: SgdConfig {
                lr: self.ff.classifier_lr,
                weight_decay: self.ff.classifier_weight_decay,
                momentum: self.ff.classifier_momentum,
            },
            rl: RlConfig { sigma: self.rl.sigma, rounds: self.rl.rounds },
            seed: self.run.seed,
            eval_stride: self.training.eval_stride,
            eval_blocks: self.training.eval_blocks,
        };
        ensure_key(cfg.arch.encoder_layers >= 1, "network.encoder_layers", "must be at least 1")?;
        ensure_key(cfg.arch.decoder_layers >= 1, "network.decoder_layers", "must be at least 1")?;
        ensure_key(cfg.arch.width >= 1, "network.width", "must be at least 1")?;
        ensure_key(!cfg.train_ebn0_db.is_nan(), "channel.train_ebn0_db", "must be a number")?;
        ensure_key(cfg.eval_stride == 0 || cfg.eval_blocks >= 1, "training.eval_blocks", "must be at least 1")?;
        cfg.validate().map_err(|e| invalid_key("training", e))?;
        Ok(cfg)
    }

    pub fn stop_rule(&self) -> Result<StopRule> {
        let stop = StopRule { min_errors: self.eval.min_errors, max_blocks: self.eval.max_blocks };
        stop.validate().map_err(|e| invalid_key("eval", e))?;
        Ok(stop)
    }

    /// Channel used for evaluation at `ebn0_db` with the configured kind.
    pub fn eval_channel(&self, ebn0_db: f64) -> Result<ChannelConfig> {
        let params = self.code_params()?;
        ChannelConfig::new(self.channel_kind()?, params.rate(), ebn0_db, params.n())
            .map_err(|e| invalid_key("eval.ebn0_db", e))
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec> {
        let grid = SweepSpec::grid(self.sweep.start_db, self.sweep.stop_db, self.sweep.step_db)
            .map_err(|e| invalid_key("sweep", e))?;
        let spec = SweepSpec { ebn0_db: grid, stop: self.stop_rule()? };
        spec.validate().map_err(|e| invalid_key("sweep", e))?;
        Ok(spec)
    }

    pub fn size_grid(&self) -> Result<SizeGrid> {
        let grid = SizeGrid {
            encoder_layers: self.size_sweep.encoder_layers.clone(),
            decoder_layers: self.size_sweep.decoder_layers.clone(),
            widths: self.size_sweep.widths.clone(),
        };
        grid.validate().map_err(|e| invalid_key("size_sweep", e))?;
        Ok(grid)
    }

    pub fn gradcheck_config(&self) -> Result<GradcheckConfig> {
        let g = &self.gradcheck;
        ensure_key(g.instances >= 1, "gradcheck.instances", "must be at least 1")?;
        ensure_key(g.step > 0.0, "gradcheck.step", "must be positive")?;
        ensure_key(g.tolerance > 0.0, "gradcheck.tolerance", "must be positive")?;
        Ok(GradcheckConfig {
            instances: g.instances,
            step: g.step,
            tolerance: g.tolerance,
            seed: self.run.seed,
            ..GradcheckConfig::default()
        })
    }

    /// Checks every section that can be checked without a model.
    pub fn validate(&self) -> Result<()> {
        self.train_config()?;
        self.sweep_spec()?;
        self.size_grid()?;
        self.gradcheck_config()?;
        ensure_key(!self.eval.ebn0_db.is_nan(), "eval.ebn0_db", "must be a number")?;
        ensure_key(!self.size_sweep.ebn0_db.is_nan(), "size_sweep.ebn0_db", "must be a number")?;
        ensure_key(!self.run.out_dir.is_empty(), "run.out_dir", "must not be empty")?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

fn invalid_key(key: &str, err: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {err}"))
}

fn ensure_key(cond: bool, key: &str, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(CliError::Config(format!("{key}: {msg}")))
    }
}

/// Parses configuration text into a table without applying defaults.
pub fn parse_table(text: &str) -> Result<Table> {
    text.parse::<Table>().map_err(|e| CliError::Config(format!("malformed TOML: {e}")))
}

/// Parses `section.key=value`; the value is read as TOML, falling back to a
/// bare string.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, Value)> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not of the form section.key=value")))?;
    let path: Vec<String> = path.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override `{spec}` has an empty key")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{p}` is not a section")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Values supplied through dedicated flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlagOverrides {
    pub algorithm: Option<String>,
    pub seed: Option<u64>,
    pub out_dir: Option<String>,
    pub channel: Option<String>,
    pub stage: Option<String>,
    pub iterations: Option<usize>,
    pub train_ebn0_db: Option<f64>,
    pub eval_ebn0_db: Option<f64>,
    pub sets: Vec<String>,
}

impl FlagOverrides {
    fn into_table(self) -> Result<Table> {
        let mut t = Table::new();
        for s in &self.sets {
            let (path, value) = parse_override(s)?;
            set_path(&mut t, &path, value)?;
        }
        let mut put = |path: &str, v: Option<Value>| -> Result<()> {
            match v {
                Some(v) => set_path(&mut t, &path.split('.').map(str::to_string).collect::<Vec<_>>(), v),
                None => Ok(()),
            }
        };
        put("run.algorithm", self.algorithm.map(Value::String))?;
        put("run.seed", self.seed.map(|s| Value::Integer(s as i64)))?;
        put("run.out_dir", self.out_dir.map(Value::String))?;
        put("channel.kind", self.channel.map(Value::String))?;
        put("channel.stage", self.stage.map(Value::String))?;
        put("training.iterations", self.iterations.map(|i| Value::Integer(i as i64)))?;
        put("channel.train_ebn0_db", self.train_ebn0_db.map(Value::Float))?;
        put("eval.ebn0_db", self.eval_ebn0_db.map(Value::Float))?;
        Ok(t)
    }
}

fn algorithm_of(table: &Table) -> Option<&str> {
    table.get("run")?.as_table()?.get("algorithm")?.as_str()
}

/// Names the `section.key` an error points at in `text`.
fn describe_error(text: &str, err: &toml::de::Error) -> String {
    let Some(span) = err.span() else {
        return err.message().to_string();
    };
    let before = &text[..span.start.min(text.len())];
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next().unwrap_or("");
    let section = before[..line_start]
        .lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix('[').and_then(|l| l.strip_suffix(']')))
        .map(str::trim);
    match (line.trim_start().starts_with('['), line.split_once('='), section) {
        (false, Some((key, _)), Some(sec)) => format!("{sec}.{}: {}", key.trim(), err.message()),
        (false, Some((key, _)), None) => format!("{}: {}", key.trim(), err.message()),
        _ => err.message().to_string(),
    }
}

/// Resolves defaults, file text and flags into a validated configuration.
/// `env_out_dir` is the value of [`OUT_DIR_ENV`], if set.
pub fn resolve(file_text: Option<&str>, flags: FlagOverrides, env_out_dir: Option<&str>) -> Result<ExperimentConfig> {
    let file = match file_text {
        Some(text) => parse_table(text)?,
        None => Table::new(),
    };
    let flags = flags.into_table()?;
    // The algorithm picks the default column, so settle it first.
    let algorithm: Algorithm = algorithm_of(&flags)
        .or_else(|| algorithm_of(&file))
        .unwrap_or("ff")
        .parse()
        .map_err(|e| invalid_key("run.algorithm", e))?;
    let defaults = ExperimentConfig::defaults(algorithm, env_out_dir.unwrap_or(DEFAULT_OUT_DIR));
    let mut table = Table::try_from(&defaults).expect("defaults serialize to a table");
    merge(&mut table, file);
    merge(&mut table, flags);
    let text = toml::to_string(&table).expect("merged table serializes");
    let cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| CliError::Config(describe_error(&text, &e)))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, flags: FlagOverrides) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?),
        None => None,
    };
    let env = std::env::var(OUT_DIR_ENV).ok();
    resolve(text.as_deref(), flags, env.as_deref())
}
