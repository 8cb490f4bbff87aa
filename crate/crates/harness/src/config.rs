//! Run configuration in a flat `key = value` text format.
//!
//! Lines are `key = value`; `#` starts a comment. Sections are dotted key
//! prefixes (`optimizer.lr = 0.01`). Layers are listed as
//! `model.stage.<i> = <kind> opt=value ...`, with input widths inferred from
//! the previous stage:
//!
//! ```text
//! model.stage.0 = conv out=16 kernel=3 stride=2
//! model.stage.1 = block out=16 mid=4 groups=4 gating=softmax
//! ```
//!
//! Missing keys take their defaults, and each default is logged.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use log::info;
use stra_core::block::{BlockConfig, BnSetting};
use stra_core::network::{ArchConfig, HeadPool, StageSpec};

use crate::dataset::DataConfig;
use crate::error::{invalid, io_at, HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd-momentum" | "sgd" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer `{other}` (expected sgd-momentum or adam)")),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::SgdMomentum => "sgd-momentum",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// SGD only.
    pub momentum: f64,
    /// Adam only.
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Step decay: the rate is multiplied by `factor` every `interval` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub factor: f64,
    pub interval: usize,
}

impl Schedule {
    /// Rate for zero-based `epoch`.
    pub fn lr(&self, base: f64, epoch: usize) -> f64 {
        base * self.factor.powi((epoch / self.interval) as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda_d: f64,
    pub data: DataConfig,
}

/// The toy network: strided stem, one attention block with four modes and a
/// 3×3 window, a strided convolution and a position-aware linear head.
pub fn default_stages() -> Vec<StageSpec> {
    vec![
        StageSpec::Conv {
            out: 16,
            kernel: 3,
            stride: 2,
            bn: BnSetting::Training,
        },
        StageSpec::Block {
            cfg: BlockConfig::new(16, 4, 16, 4),
            repeat: 1,
        },
        StageSpec::Conv {
            out: 16,
            kernel: 3,
            stride: 2,
            bn: BnSetting::Training,
        },
    ]
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        Self {
            arch: ArchConfig {
                input: (3, data.size, data.size),
                stages: default_stages(),
                pool: HeadPool::Flatten,
                classes: data.classes,
            },
            optimizer: OptimizerConfig {
                kind: OptimizerKind::SgdMomentum,
                lr: 0.05,
                momentum: 0.9,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 5e-4,
            },
            schedule: Schedule { factor: 0.2, interval: 4 },
            epochs: 10,
            batch_size: 32,
            seed: 1,
            lambda_d: 1.0,
            data,
        }
    }
}

struct Entry {
    value: String,
    line: usize,
}

/// Parsed lines, consumed key by key so leftovers can be reported.
struct Fields {
    entries: BTreeMap<String, Entry>,
}

impl Fields {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| HarnessError::ConfigLine {
                line,
                reason: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(HarnessError::ConfigLine {
                    line,
                    reason: "empty key or value".into(),
                });
            }
            let entry = Entry {
                value: value.to_string(),
                line,
            };
            if let Some(prev) = entries.insert(key.to_string(), entry) {
                return Err(HarnessError::ConfigLine {
                    line,
                    reason: format!("`{key}` already set on line {}", prev.line),
                });
            }
        }
        Ok(Self { entries })
    }

    fn get<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr + fmt::Display,
        T::Err: fmt::Display,
    {
        match self.entries.remove(key) {
            Some(e) => e.value.parse().map_err(|err| HarnessError::ConfigLine {
                line: e.line,
                reason: format!("{key}: {err}"),
            }),
            None => {
                info!("config: {key} defaulted to {default}");
                Ok(default)
            }
        }
    }

    /// `model.stage.<i>` entries in index order.
    fn take_stages(&mut self) -> Result<Vec<Entry>> {
        let keys: Vec<String> = self.entries.keys().filter(|k| k.starts_with("model.stage.")).cloned().collect();
        let mut indexed = Vec::new();
        for key in keys {
            let entry = self.entries.remove(&key).expect("key listed above");
            let index: usize = key["model.stage.".len()..].parse().map_err(|_| HarnessError::ConfigLine {
                line: entry.line,
                reason: format!("stage index in `{key}` is not a number"),
            })?;
            indexed.push((index, entry));
        }
        indexed.sort_by_key(|(i, _)| *i);
        for (pos, (index, entry)) in indexed.iter().enumerate() {
            if *index != pos {
                return Err(HarnessError::ConfigLine {
                    line: entry.line,
                    reason: format!("stage indices must run 0, 1, 2, ...; found {index} at position {pos}"),
                });
            }
        }
        Ok(indexed.into_iter().map(|(_, e)| e).collect())
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            Some((key, e)) => Err(HarnessError::ConfigLine {
                line: e.line,
                reason: format!("unknown key `{key}`"),
            }),
            None => Ok(()),
        }
    }
}

fn parse_pool(s: &str) -> std::result::Result<HeadPool, String> {
    match s {
        "avg" => Ok(HeadPool::Avg),
        "flatten" => Ok(HeadPool::Flatten),
        other => Err(format!("unknown pool `{other}` (expected avg or flatten)")),
    }
}

fn pool_tag(p: HeadPool) -> &'static str {
    match p {
        HeadPool::Avg => "avg",
        HeadPool::Flatten => "flatten",
    }
}

fn parse_opt<T>(opts: &mut BTreeMap<&str, &str>, key: &str, default: T) -> std::result::Result<T, String>
where
    T: FromStr,
    T::Err: fmt::Display,
{
    match opts.remove(key) {
        Some(v) => v.parse().map_err(|e| format!("{key}={v}: {e}")),
        None => Ok(default),
    }
}

/// One stage string; `in_channels` comes from the previous stage.
pub fn parse_stage(text: &str, in_channels: usize) -> std::result::Result<StageSpec, String> {
    let mut tokens = text.split_whitespace();
    let kind = tokens.next().ok_or("empty stage")?;
    let mut opts = BTreeMap::new();
    for tok in tokens {
        let (k, v) = tok.split_once('=').ok_or_else(|| format!("expected opt=value, got `{tok}`"))?;
        if opts.insert(k, v).is_some() {
            return Err(format!("option `{k}` given twice"));
        }
    }
    let out: usize = match opts.remove("out") {
        Some(v) => v.parse().map_err(|e| format!("out={v}: {e}"))?,
        None => return Err("missing out=<channels>".into()),
    };
    let spec = match kind {
        "conv" => StageSpec::Conv {
            out,
            kernel: parse_opt(&mut opts, "kernel", 3)?,
            stride: parse_opt(&mut opts, "stride", 1)?,
            bn: parse_opt(&mut opts, "bn", BnSetting::Training)?,
        },
        "block" => {
            let mid = match opts.remove("mid") {
                Some(v) => v.parse().map_err(|e| format!("mid={v}: {e}"))?,
                None => return Err("missing mid=<channels per mode>".into()),
            };
            let groups = parse_opt(&mut opts, "groups", 1)?;
            let d = BlockConfig::new(in_channels, mid, out, groups);
            let cfg = BlockConfig {
                kernel: parse_opt(&mut opts, "kernel", d.kernel)?,
                stride: parse_opt(&mut opts, "stride", d.stride)?,
                gating: parse_opt(&mut opts, "gating", d.gating)?,
                interaction: parse_opt(&mut opts, "interaction", d.interaction)?,
                strict_substitution: parse_opt(&mut opts, "strict_substitution", d.strict_substitution)?,
                scaled: parse_opt(&mut opts, "scaled", d.scaled)?,
                pooling: parse_opt(&mut opts, "pooling", d.pooling)?,
                mask_source: parse_opt(&mut opts, "mask_source", d.mask_source)?,
                spatial: parse_opt(&mut opts, "spatial", d.spatial)?,
                mode_attention: parse_opt(&mut opts, "mode_attention", d.mode_attention)?,
                bn: parse_opt(&mut opts, "bn", d.bn)?,
                final_conv: parse_opt(&mut opts, "final_conv", d.final_conv)?,
                ..d
            };
            cfg.validate().map_err(|e| e.to_string())?;
            StageSpec::Block {
                cfg,
                repeat: parse_opt(&mut opts, "repeat", 1)?,
            }
        }
        other => return Err(format!("unknown stage kind `{other}` (expected conv or block)")),
    };
    match opts.keys().next() {
        Some(k) => Err(format!("unknown {kind} option `{k}`")),
        None => Ok(spec),
    }
}

/// Inverse of [`parse_stage`], with every option spelled out.
pub fn stage_to_string(stage: &StageSpec) -> String {
    match stage {
        StageSpec::Conv { out, kernel, stride, bn } => format!("conv out={out} kernel={kernel} stride={stride} bn={bn}"),
        StageSpec::Block { cfg: c, repeat } => format!(
            "block out={} mid={} groups={} kernel={} stride={} repeat={repeat} spatial={} gating={} interaction={} \
             strict_substitution={} scaled={} pooling={} mask_source={} mode_attention={} bn={} final_conv={}",
            c.out_channels,
            c.mid_per_mode,
            c.groups,
            c.kernel,
            c.stride,
            c.spatial,
            c.gating,
            c.interaction,
            c.strict_substitution,
            c.scaled,
            c.pooling,
            c.mask_source,
            c.mode_attention,
            c.bn,
            c.final_conv
        ),
    }
}

fn stage_out(stage: &StageSpec) -> usize {
    match stage {
        StageSpec::Conv { out, .. } => *out,
        StageSpec::Block { cfg, .. } => cfg.out_channels,
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let d = RunConfig::default();
        let mut f = Fields::parse(text)?;
        let seed = f.get("seed", d.seed)?;
        let data = DataConfig {
            size: f.get("data.size", d.data.size)?,
            parts: f.get("data.parts", d.data.parts)?,
            classes: f.get("data.classes", d.data.classes)?,
            train: f.get("data.train", d.data.train)?,
            test: f.get("data.test", d.data.test)?,
            part_size: f.get("data.part_size", d.data.part_size)?,
            jitter: f.get("data.jitter", d.data.jitter)?,
            noise: f.get("data.noise", d.data.noise)?,
            seed: f.get("data.seed", seed)?,
        };
        let optimizer = OptimizerConfig {
            kind: f.get("optimizer.kind", d.optimizer.kind)?,
            lr: f.get("optimizer.lr", d.optimizer.lr)?,
            momentum: f.get("optimizer.momentum", d.optimizer.momentum)?,
            beta1: f.get("optimizer.beta1", d.optimizer.beta1)?,
            beta2: f.get("optimizer.beta2", d.optimizer.beta2)?,
            eps: f.get("optimizer.eps", d.optimizer.eps)?,
            weight_decay: f.get("optimizer.weight_decay", d.optimizer.weight_decay)?,
        };
        let schedule = Schedule {
            factor: f.get("schedule.factor", d.schedule.factor)?,
            interval: f.get("schedule.interval", d.schedule.interval)?,
        };
        let pool = match f.entries.remove("model.pool") {
            Some(e) => parse_pool(&e.value).map_err(|reason| HarnessError::ConfigLine { line: e.line, reason })?,
            None => {
                info!("config: model.pool defaulted to {}", pool_tag(d.arch.pool));
                d.arch.pool
            }
        };
        let stage_entries = f.take_stages()?;
        let stages = if stage_entries.is_empty() {
            info!("config: model stages defaulted to the toy network");
            d.arch.stages.clone()
        } else {
            let mut channels = 3;
            let mut stages = Vec::with_capacity(stage_entries.len());
            for e in stage_entries {
                let stage = parse_stage(&e.value, channels).map_err(|reason| HarnessError::ConfigLine { line: e.line, reason })?;
                channels = stage_out(&stage);
                stages.push(stage);
            }
            stages
        };
        let cfg = RunConfig {
            arch: ArchConfig {
                input: (3, data.size, data.size),
                stages,
                pool,
                classes: data.classes,
            },
            optimizer,
            schedule,
            epochs: f.get("epochs", d.epochs)?,
            batch_size: f.get("batch_size", d.batch_size)?,
            seed,
            lambda_d: f.get("lambda_d", d.lambda_d)?,
            data,
        };
        f.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_at(path))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !o.lr.is_finite() {
            return Err(invalid(format!("optimizer.lr must be positive, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.momentum) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(invalid("momentum and betas must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(invalid("optimizer.eps must be positive and weight_decay non-negative"));
        }
        if !(self.schedule.factor > 0.0 && self.schedule.factor <= 1.0) || self.schedule.interval == 0 {
            return Err(invalid("schedule.factor must lie in (0, 1] and schedule.interval be at least 1"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch_size must be at least 1"));
        }
        if !(self.lambda_d >= 0.0) || !self.lambda_d.is_finite() {
            return Err(invalid(format!("lambda_d must be finite and non-negative, got {}", self.lambda_d)));
        }
        if self.arch.input != (3, self.data.size, self.data.size) || self.arch.classes != self.data.classes {
            return Err(invalid("model input and classes must match the dataset"));
        }
        self.data.validate()?;
        self.arch.layers()?;
        Ok(())
    }

    /// Text form that [`RunConfig::parse`] reads back to an equal value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let o = &self.optimizer;
        let d = &self.data;
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lambda_d = {}", self.lambda_d);
        let _ = writeln!(s, "optimizer.kind = {}", o.kind);
        let _ = writeln!(s, "optimizer.lr = {}", o.lr);
        let _ = writeln!(s, "optimizer.momentum = {}", o.momentum);
        let _ = writeln!(s, "optimizer.beta1 = {}", o.beta1);
        let _ = writeln!(s, "optimizer.beta2 = {}", o.beta2);
        let _ = writeln!(s, "optimizer.eps = {}", o.eps);
        let _ = writeln!(s, "optimizer.weight_decay = {}", o.weight_decay);
        let _ = writeln!(s, "schedule.factor = {}", self.schedule.factor);
        let _ = writeln!(s, "schedule.interval = {}", self.schedule.interval);
        let _ = writeln!(s, "data.size = {}", d.size);
        let _ = writeln!(s, "data.parts = {}", d.parts);
        let _ = writeln!(s, "data.classes = {}", d.classes);
        let _ = writeln!(s, "data.train = {}", d.train);
        let _ = writeln!(s, "data.test = {}", d.test);
        let _ = writeln!(s, "data.part_size = {}", d.part_size);
        let _ = writeln!(s, "data.jitter = {}", d.jitter);
        let _ = writeln!(s, "data.noise = {}", d.noise);
        let _ = writeln!(s, "data.seed = {}", d.seed);
        let _ = writeln!(s, "model.pool = {}", pool_tag(self.arch.pool));
        for (i, stage) in self.arch.stages.iter().enumerate() {
            let _ = writeln!(s, "model.stage.{i} = {}", stage_to_string(stage));
        }
        s
    }
}
