//! Run configuration: a plain-text `key = value` file plus `key=value`
//! overrides. Unknown keys are rejected. The fully resolved configuration
//! is written into every run directory as `run.meta`, followed by `meta.*`
//! lines describing the run; reading `run.meta` back ignores those.
//!
//! | key | unit / format | default |
//! |---|---|---|
//! | `run_id` | text | `run` |
//! | `data_dir` | path to the CIFAR-10 binary files | `data/cifar-10-batches-bin` |
//! | `output_dir` | runs are created in `<output_dir>/<run_id>` | `runs` |
//! | `train_subset`, `test_subset` | first N records, 0 = all | `0` |
//! | `width` | channel multiplier | `1` |
//! | `epochs` | count | `350` |
//! | `learning_rate` | initial rate | `0.01` |
//! | `momentum` | | `0.9` |
//! | `lr_milestones` | comma-separated epochs | `200,250,300` |
//! | `lr_decay` | factor at each milestone | `0.1` |
//! | `batch_size` | images per step | `128` |
//! | `m_copies` | augmentations per seed | `4` |
//! | `alpha` | invariance budget | `0.1` |
//! | `inv_layers` | comma-separated conv indices | `1,…,9` |
//! | `inv_variant` | `verbatim` or `group_mean` | `verbatim` |
//! | `invariance_mode` | `true`/`false` | `true` |
//! | `monitor_invariance` | baseline probes | `true` |
//! | `monitor_every` | steps between probes | `4` |
//! | `base_seed` | integer | `0` |
//! | `checkpoint_every` | epochs, 0 = final only | `0` |
//! | `clip_norm` | gradient norm or `off` | `off` |
//! | `flip_prob` | probability | `0.5` |
//! | `rotation_range` | degrees (±) | `20` |
//! | `translate_range` | fraction of image size (±) | `0.15` |
//! | `scale_range` | multiplier in [1−s, 1+s] | `0.2` |
//! | `shear_range` | degrees (±) | `15` |
//! | `contrast_range` | multiplier in [1−c, 1+c] | `0.35` |
//! | `brightness_range` | additive, pixel units in [0,1] (±) | `0.25` |
//! | `eval_transforms` | T | `5` |
//! | `eval_references` | R | `200` |
//! | `eval_seed` | integer | `0` |
//! | `eval_memory_mb` | activation budget | `2048` |

use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::evaluator::EvalSettings;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub train_subset: usize,
    pub test_subset: usize,
    pub checkpoint_every: usize,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "run".into(),
            data_dir: PathBuf::from("data/cifar-10-batches-bin"),
            output_dir: PathBuf::from("runs"),
            train_subset: 0,
            test_subset: 0,
            checkpoint_every: 0,
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

fn parse_list(key: &str, value: &str) -> std::result::Result<Vec<usize>, String> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub const KEYS: [&str; 35] = [
    "run_id",
    "data_dir",
    "output_dir",
    "train_subset",
    "test_subset",
    "width",
    "epochs",
    "learning_rate",
    "momentum",
    "lr_milestones",
    "lr_decay",
    "batch_size",
    "m_copies",
    "alpha",
    "inv_layers",
    "inv_variant",
    "invariance_mode",
    "monitor_invariance",
    "monitor_every",
    "base_seed",
    "checkpoint_every",
    "clip_norm",
    "flip_prob",
    "rotation_range",
    "translate_range",
    "scale_range",
    "shear_range",
    "contrast_range",
    "brightness_range",
    "eval_transforms",
    "eval_references",
    "eval_seed",
    "eval_memory_mb",
    // Fixed values; anything else is rejected.
    "config_version",
    "architecture",
];

const CONFIG_VERSION: &str = "1";
const ARCHITECTURE: &str = "all-cnn-c";

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "run_id" => {
                if v.is_empty() || v.contains(['/', '\\']) {
                    return Err(format!("invalid run_id `{v}`"));
                }
                self.run_id = v.to_string();
            }
            "data_dir" => self.data_dir = PathBuf::from(v),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "train_subset" => self.train_subset = parse(key, v)?,
            "test_subset" => self.test_subset = parse(key, v)?,
            "width" => t.width = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "learning_rate" => t.learning_rate = parse(key, v)?,
            "momentum" => t.momentum = parse(key, v)?,
            "lr_milestones" => t.lr_milestones = parse_list(key, v)?,
            "lr_decay" => t.lr_decay = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "m_copies" => t.m_copies = parse(key, v)?,
            "alpha" => t.alpha = parse(key, v)?,
            "inv_layers" => t.inv_layers = parse_list(key, v)?,
            "inv_variant" => t.variant = v.parse().map_err(|e: Error| e.to_string())?,
            "invariance_mode" => t.invariance_mode = parse(key, v)?,
            "monitor_invariance" => t.monitor_invariance = parse(key, v)?,
            "monitor_every" => t.monitor_every = parse(key, v)?,
            "base_seed" => t.base_seed = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "clip_norm" => t.clip_norm = if v == "off" { None } else { Some(parse(key, v)?) },
            "flip_prob" => t.scheme.flip_prob = parse(key, v)?,
            "rotation_range" => t.scheme.rotation_range = parse(key, v)?,
            "translate_range" => t.scheme.translate_range = parse(key, v)?,
            "scale_range" => t.scheme.scale_range = parse(key, v)?,
            "shear_range" => t.scheme.shear_range = parse(key, v)?,
            "contrast_range" => t.scheme.contrast_range = parse(key, v)?,
            "brightness_range" => t.scheme.brightness_range = parse(key, v)?,
            "eval_transforms" => self.eval.transforms = parse(key, v)?,
            "eval_references" => self.eval.references = parse(key, v)?,
            "eval_seed" => self.eval.seed = parse(key, v)?,
            "eval_memory_mb" => {
                let mb: usize = parse(key, v)?;
                self.eval.memory_budget_bytes = mb << 20;
            }
            "config_version" if v == CONFIG_VERSION => {}
            "architecture" if v == ARCHITECTURE => {}
            "config_version" | "architecture" => return Err(format!("unsupported {key} `{v}`")),
            _ => return Err(format!("unknown key `{key}`")),
        }
        // Evaluation transforms come from the training scheme.
        self.eval.scheme = self.train.scheme;
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            self.set(key.trim(), value).map_err(|message| Error::Config { line: i + 1, message })?;
        }
        Ok(())
    }

    /// Applies `--set key=value` overrides; errors report line 0.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config { line: 0, message: format!("override `{o}` is not key=value") })?;
            self.set(key.trim(), value)
                .map_err(|message| Error::Config { line: 0, message: format!("--set {o}: {message}") })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config { line: 0, message: e.to_string() };
        self.train.validate().map_err(wrap)?;
        if self.eval.transforms == 0 {
            return Err(wrap(Error::invalid("eval_transforms must be at least 1")));
        }
        if self.eval.references < 2 {
            return Err(wrap(Error::invalid("eval_references must be at least 2")));
        }
        Ok(())
    }

    /// Resolved configuration in `key = value` form, in [`KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let s = &t.scheme;
        vec![
            ("run_id", self.run_id.clone()),
            ("data_dir", self.data_dir.display().to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("train_subset", self.train_subset.to_string()),
            ("test_subset", self.test_subset.to_string()),
            ("width", t.width.to_string()),
            ("epochs", t.epochs.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("momentum", t.momentum.to_string()),
            ("lr_milestones", join(&t.lr_milestones)),
            ("lr_decay", t.lr_decay.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("m_copies", t.m_copies.to_string()),
            ("alpha", t.alpha.to_string()),
            ("inv_layers", join(&t.inv_layers)),
            ("inv_variant", t.variant.to_string()),
            ("invariance_mode", t.invariance_mode.to_string()),
            ("monitor_invariance", t.monitor_invariance.to_string()),
            ("monitor_every", t.monitor_every.to_string()),
            ("base_seed", t.base_seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("clip_norm", t.clip_norm.map_or("off".to_string(), |c| c.to_string())),
            ("flip_prob", s.flip_prob.to_string()),
            ("rotation_range", s.rotation_range.to_string()),
            ("translate_range", s.translate_range.to_string()),
            ("scale_range", s.scale_range.to_string()),
            ("shear_range", s.shear_range.to_string()),
            ("contrast_range", s.contrast_range.to_string()),
            ("brightness_range", s.brightness_range.to_string()),
            ("eval_transforms", self.eval.transforms.to_string()),
            ("eval_references", self.eval.references.to_string()),
            ("eval_seed", self.eval.seed.to_string()),
            ("eval_memory_mb", (self.eval.memory_budget_bytes >> 20).to_string()),
            ("config_version", CONFIG_VERSION.to_string()),
            ("architecture", ARCHITECTURE.to_string()),
        ]
    }

    /// `run.meta` contents: the resolved configuration, then `meta.*` lines.
    pub fn snapshot(&self, meta: &[(String, String)]) -> String {
        let mut out = String::from("# resolved run configuration\n");
        for (k, v) in self.to_pairs() {
            out += &format!("{k} = {v}\n");
        }
        out += "# run metadata\n";
        for (k, v) in meta {
            out += &format!("meta.{k} = {v}\n");
        }
        out
    }

    /// Rebuilds the configuration from a `run.meta` snapshot.
    pub fn from_snapshot(text: &str) -> Result<Self> {
        let config_lines: String = text
            .lines()
            .map(|l| if l.trim_start().starts_with("meta.") { "" } else { l })
            .collect::<Vec<_>>()
            .join("\n");
        let mut config = RunConfig::default();
        config.apply_text(&config_lines)?;
        Ok(config)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    /// True when the run departs from the full-scale setup.
    pub fn is_reduced(&self) -> bool {
        self.train.width != 1.0 || self.train_subset != 0 || self.test_subset != 0
    }
}

/// Parses `key = value` lines (comments and blank lines skipped).
pub fn parse_key_values(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|raw| {
            let line = raw.split('#').next().unwrap_or("").trim();
            line.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}
