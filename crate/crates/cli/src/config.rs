//! Run configuration: presets, the flat `key=value` dotted-key format, and
//! override handling. Flags override file entries, which override preset
//! values, which override the built-in defaults.

use deyo_core::deyo::ComponentFlags;
use deyo_core::error::{Error, Result};
use deyo_core::model::NormKind;
use deyo_core::transforms::{TransformKind, TransformSpec};
use deyo_core::{AdaptConfig, ScenarioKind};
use std::path::PathBuf;

pub const DATA_ROOT_ENV: &str = "DEYO_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    ColoredMnist,
    Synth,
}

impl Dataset {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "colored_mnist" | "colored-mnist" => Dataset::ColoredMnist,
            "synth" => Dataset::Synth,
            other => {
                return Err(Error::Config(format!(
                    "unknown dataset '{other}' (expected colored_mnist or synth)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Dataset::ColoredMnist => "colored_mnist",
            Dataset::Synth => "synth",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Frozen-model evaluation, no adaptation.
    None,
    Tent,
    Deyo,
    /// One ablation cell with explicit component toggles.
    Cell(ComponentFlags),
}

impl Method {
    fn parse(s: &str) -> Result<Self> {
        if let Some(bits) = s.strip_prefix("cell:") {
            let b: Vec<bool> = bits
                .chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    other => Err(Error::Config(format!(
                        "bad cell flag '{other}' in '{s}' (use 0/1)"
                    ))),
                })
                .collect::<Result<_>>()?;
            if b.len() != 4 {
                return Err(Error::Config(format!(
                    "method '{s}' needs exactly 4 flags: select_ent, select_plpd, \
                     weight_ent, weight_plpd"
                )));
            }
            return Ok(Method::Cell(ComponentFlags {
                select_ent: b[0],
                select_plpd: b[1],
                weight_ent: b[2],
                weight_plpd: b[3],
            }));
        }
        Ok(match s {
            "none" => Method::None,
            "tent" => Method::Tent,
            "deyo" => Method::Deyo,
            other => {
                return Err(Error::Config(format!(
                    "unknown method '{other}' (expected none, tent, deyo, or cell:XXXX)"
                )))
            }
        })
    }

    pub fn name(&self) -> String {
        match self {
            Method::None => "none".into(),
            Method::Tent => "tent".into(),
            Method::Deyo => "deyo".into(),
            Method::Cell(f) => format!(
                "cell:{}{}{}{}",
                f.select_ent as u8, f.select_plpd as u8, f.weight_ent as u8, f.weight_plpd as u8
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub norm: NormKind,
    pub hidden: usize,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// PLPD filtering threshold; `None` trains plainly.
    pub plpd_threshold: Option<f64>,
    pub warmup_frac: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    pub root: PathBuf,
    /// Synthetic split sizes; 0 means "all" for file-backed datasets.
    pub train_n: usize,
    pub test_n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSettings {
    pub kind: ScenarioKind,
    pub batch_size: usize,
    pub mix: Vec<(TransformKind, f64)>,
    pub noise_sigma: f64,
    pub patch_grid: usize,
    pub occlusion_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Dataset,
    pub method: Method,
    pub scenario: ScenarioSettings,
    pub adapt: AdaptConfig,
    pub model: ModelSettings,
    pub pretrain: PretrainSettings,
    pub data: DataSettings,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: Dataset::Synth,
            method: Method::Deyo,
            scenario: ScenarioSettings {
                kind: ScenarioKind::Mild,
                batch_size: 64,
                mix: Vec::new(),
                noise_sigma: 0.1,
                patch_grid: 4,
                occlusion_fraction: 0.25,
            },
            adapt: AdaptConfig::deyo(2),
            model: ModelSettings {
                norm: NormKind::BatchNorm,
                hidden: 128,
                checkpoint: None,
            },
            pretrain: PretrainSettings {
                epochs: 10,
                lr: 0.005,
                momentum: 0.9,
                batch_size: 64,
                plpd_threshold: None,
                warmup_frac: 0.25,
            },
            data: DataSettings {
                root: std::env::var_os(DATA_ROOT_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("data")),
                train_n: 2000,
                test_n: 3000,
            },
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

impl RunConfig {
    /// Applies one of the shipped presets on top of the defaults.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        match name {
            "mild" => {
                cfg.scenario.kind = ScenarioKind::Mild;
            }
            "label-shift" | "label_shift" => {
                cfg.scenario.kind = ScenarioKind::LabelShift;
                cfg.adapt = AdaptConfig::biased_two_class();
            }
            "bs1" => {
                cfg.scenario.kind = ScenarioKind::BatchSize1;
                cfg.model.norm = NormKind::LayerNorm;
                cfg.adapt = AdaptConfig::biased_two_class();
                // Single-sample updates: scale the step down like the
                // batch-size-1 protocol does.
                cfg.adapt.lr /= 16.0;
            }
            "biased" | "ablation" => {
                cfg.scenario.kind = ScenarioKind::Mild;
                cfg.adapt = AdaptConfig::biased_two_class();
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset '{other}' (expected mild, label-shift, bs1, biased, \
                     or ablation)"
                )))
            }
        }
        Ok(cfg)
    }

    /// Parses a flat `key=value` file (one entry per line, `#` comments).
    pub fn apply_file(&mut self, contents: &str) -> Result<()> {
        for (lineno, raw) in contents.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Sets a single dotted key. Unknown keys are an error naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_f64 = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("key '{key}': '{v}' is not a number")))
        };
        let parse_usize = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("key '{key}': '{v}' is not an integer")))
        };
        let parse_bool = |v: &str| -> Result<bool> {
            match v {
                "true" | "1" | "on" => Ok(true),
                "false" | "0" | "off" => Ok(false),
                _ => Err(Error::Config(format!("key '{key}': '{v}' is not a bool"))),
            }
        };
        match key {
            "dataset" => self.dataset = Dataset::parse(value)?,
            "method" => self.method = Method::parse(value)?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| {
                        s.trim().parse().map_err(|_| {
                            Error::Config(format!("key 'seeds': '{s}' is not an integer"))
                        })
                    })
                    .collect::<Result<_>>()?;
                if self.seeds.is_empty() {
                    return Err(Error::Config("key 'seeds': need at least one seed".into()));
                }
            }
            "scenario.kind" => self.scenario.kind = ScenarioKind::parse(value)?,
            "scenario.batch_size" => self.scenario.batch_size = parse_usize(value)?,
            "scenario.mix" => {
                self.scenario.mix = value
                    .split(',')
                    .map(|entry| {
                        let (kind, frac) = entry.trim().split_once(':').ok_or_else(|| {
                            Error::Config(format!(
                                "key 'scenario.mix': entry '{entry}' must be kind:fraction"
                            ))
                        })?;
                        Ok((TransformKind::parse(kind.trim())?, parse_f64(frac.trim())?))
                    })
                    .collect::<Result<_>>()?;
            }
            "scenario.noise_sigma" => self.scenario.noise_sigma = parse_f64(value)?,
            "scenario.patch_grid" => self.scenario.patch_grid = parse_usize(value)?,
            "scenario.occlusion_fraction" => {
                self.scenario.occlusion_fraction = parse_f64(value)?
            }
            "adapt.tau_ent" => self.adapt.tau_ent = parse_f64(value)?,
            "adapt.tau_plpd" => self.adapt.tau_plpd = parse_f64(value)?,
            "adapt.ent0" => self.adapt.ent0 = parse_f64(value)?,
            "adapt.lr" => self.adapt.lr = parse_f64(value)?,
            "adapt.momentum" => self.adapt.momentum = parse_f64(value)?,
            "adapt.transform" => self.adapt.transform.kind = TransformKind::parse(value)?,
            "adapt.patch_grid" => self.adapt.transform.patch_grid = parse_usize(value)?,
            "adapt.occlusion_fraction" => {
                self.adapt.transform.occlusion_fraction = parse_f64(value)?
            }
            "adapt.noise_sigma" => self.adapt.transform.noise_sigma = parse_f64(value)?,
            "adapt.use_ent_select" => self.adapt.use_ent_select = parse_bool(value)?,
            "adapt.use_plpd_select" => self.adapt.use_plpd_select = parse_bool(value)?,
            "adapt.use_ent_weight" => self.adapt.use_ent_weight = parse_bool(value)?,
            "adapt.use_plpd_weight" => self.adapt.use_plpd_weight = parse_bool(value)?,
            "model.norm" => self.model.norm = NormKind::parse(value)?,
            "model.hidden" => self.model.hidden = parse_usize(value)?,
            "model.checkpoint" => self.model.checkpoint = Some(PathBuf::from(value)),
            "pretrain.epochs" => self.pretrain.epochs = parse_usize(value)?,
            "pretrain.lr" => self.pretrain.lr = parse_f64(value)?,
            "pretrain.momentum" => self.pretrain.momentum = parse_f64(value)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse_usize(value)?,
            "pretrain.plpd_threshold" => {
                self.pretrain.plpd_threshold = if value == "none" {
                    None
                } else {
                    Some(parse_f64(value)?)
                }
            }
            "pretrain.warmup_frac" => self.pretrain.warmup_frac = parse_f64(value)?,
            "data.root" => self.data.root = PathBuf::from(value),
            "data.train_n" => self.data.train_n = parse_usize(value)?,
            "data.test_n" => self.data.test_n = parse_usize(value)?,
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// The transform mix of the mixed scenario with parameters filled in.
    pub fn scenario_mix(&self) -> Vec<(TransformSpec, f64)> {
        self.scenario
            .mix
            .iter()
            .map(|(kind, frac)| {
                let spec = TransformSpec {
                    kind: *kind,
                    patch_grid: self.scenario.patch_grid,
                    occlusion_fraction: self.scenario.occlusion_fraction,
                    noise_sigma: self.scenario.noise_sigma,
                };
                (spec, *frac)
            })
            .collect()
    }

    /// The adaptation config with the method's component flags applied.
    pub fn method_adapt(&self) -> AdaptConfig {
        match self.method {
            Method::None => {
                let mut cfg = self.adapt.clone().with_flags(ComponentFlags {
                    select_ent: false,
                    select_plpd: false,
                    weight_ent: false,
                    weight_plpd: false,
                });
                cfg.lr = 0.0;
                cfg
            }
            Method::Tent => self.adapt.clone().with_flags(ComponentFlags {
                select_ent: false,
                select_plpd: false,
                weight_ent: false,
                weight_plpd: false,
            }),
            Method::Deyo => self.adapt.clone(),
            Method::Cell(flags) => self.adapt.clone().with_flags(flags),
        }
    }
}
