//! Layered run configuration: TOML file, then `CYCLEDEBLUR_*` environment
//! variables, then `--set section.key=value` overrides, then dedicated
//! flags. Unknown keys are rejected at every layer.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use cycledeblur::blur::TrajectoryParams;
use cycledeblur::data::SynthConfig;
use cycledeblur::losses::{AdvKind, CycleMode, LossConfig};
use cycledeblur::metrics::MetricKind;
use cycledeblur::networks::{DiscSpec, GeneratorKind, GeneratorSpec};
use cycledeblur::perceptual::{ExtractorMode, FeatureDist};
use cycledeblur::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_PREFIX: &str = "CYCLEDEBLUR_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config error: {0}")]
    Bad(String),
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stochastic stage derives its streams from it.
    pub seed: u64,
    pub image: ImageSection,
    pub synth: SynthSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

/// Working resolution applied when pairs are loaded. Both dims or neither.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub kernel_size: usize,
    pub noise_sigma: f64,
    pub num_steps: usize,
    pub exposure_fraction: f64,
    pub impulse_prob: f64,
    pub anxiety: f64,
    pub max_extent: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_test: Option<usize>,
}

impl Default for SynthSection {
    fn default() -> Self {
        let t = TrajectoryParams::new(0);
        Self {
            kernel_size: 31,
            noise_sigma: 0.01,
            num_steps: t.num_steps,
            exposure_fraction: t.exposure_fraction,
            impulse_prob: t.impulse_prob,
            anxiety: t.anxiety,
            max_extent: t.max_extent,
            n_train: None,
            n_test: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub generator: GeneratorKind,
    pub base: usize,
    pub depth: usize,
    pub blocks: usize,
    pub disc_base: usize,
    pub disc_n_down: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let g = GeneratorSpec::unet();
        let d = DiscSpec::default();
        Self {
            generator: g.kind,
            base: g.base,
            depth: g.depth,
            blocks: g.blocks,
            disc_base: d.base,
            disc_n_down: d.n_down,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub adv: AdvKind,
    pub cycle_dist: FeatureDist,
    pub cycle_mode: CycleMode,
    /// `reduced` runs standalone; `vgg19` needs `vgg_path` weights.
    pub extractor: ExtractorMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vgg_path: Option<PathBuf>,
    pub tap_block: usize,
    pub tap_conv: usize,
    pub extractor_seed: u64,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::default();
        Self {
            alpha: l.alpha,
            adv: l.adv_kind,
            cycle_dist: l.cycle_dist,
            cycle_mode: l.cycle_mode,
            extractor: ExtractorMode::Reduced,
            vgg_path: None,
            tap_block: 3,
            tap_conv: 3,
            extractor_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr0: f64,
    pub epochs: usize,
    pub decay_start: usize,
    pub batch_size: usize,
    pub d_steps_per_g: usize,
    pub checkpoint_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr0: t.lr0,
            epochs: t.epochs,
            decay_start: t.decay_start,
            batch_size: t.batch_size,
            d_steps_per_g: t.d_steps_per_g,
            checkpoint_every: t.checkpoint_every,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub metrics: Vec<String>,
    pub grid: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            metrics: vec!["psnr".into(), "ssim".into()],
            grid: false,
        }
    }
}

impl RunConfig {
    /// File < environment < `--set`, each layer rejecting unknown keys.
    pub fn load(config_path: Option<&Path>, sets: &[String]) -> Result<Self, ConfigError> {
        let mut doc: toml::Table = match config_path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                text.parse()
                    .map_err(|e| ConfigError::Bad(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let mut env_pairs: Vec<(String, String)> = env::vars()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        env_pairs.sort();
        for (name, value) in env_pairs {
            let path = name[ENV_PREFIX.len()..].to_lowercase();
            set_key(&mut doc, &path_to_dotted(&path), &value)?;
        }
        for entry in sets {
            let (path, value) = entry.split_once('=').ok_or_else(|| {
                ConfigError::Bad(format!("--set expects section.key=value, got {entry:?}"))
            })?;
            set_key(&mut doc, path.trim(), value)?;
        }
        RunConfig::deserialize(toml::Value::Table(doc)).map_err(|e| ConfigError::Bad(e.to_string()))
    }

    /// Rendered TOML for the startup echo.
    pub fn render(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn image_size(&self) -> Result<Option<(usize, usize)>, ConfigError> {
        match (self.image.height, self.image.width) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok(Some((h, w))),
            (None, None) => Ok(None),
            (Some(0), _) | (_, Some(0)) => {
                Err(ConfigError::Bad("image dims must be positive".into()))
            }
            _ => Err(ConfigError::Bad(
                "image.height and image.width must be set together".into(),
            )),
        }
    }

    pub fn gen_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            kind: self.model.generator,
            base: self.model.base,
            depth: self.model.depth,
            blocks: self.model.blocks,
        }
    }

    pub fn disc_spec(&self) -> DiscSpec {
        DiscSpec {
            base: self.model.disc_base,
            n_down: self.model.disc_n_down,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr0: t.lr0,
            epochs: t.epochs,
            decay_start: t.decay_start.min(t.epochs),
            batch_size: t.batch_size,
            d_steps_per_g: t.d_steps_per_g,
            loss: LossConfig {
                alpha: self.loss.alpha,
                adv_kind: self.loss.adv,
                cycle_dist: self.loss.cycle_dist,
                cycle_mode: self.loss.cycle_mode,
            },
            seed: self.seed,
            checkpoint_every: t.checkpoint_every,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
        }
    }

    pub fn synth_config(&self) -> Result<SynthConfig, ConfigError> {
        let s = &self.synth;
        Ok(SynthConfig {
            kernel_size: s.kernel_size,
            noise_sigma: s.noise_sigma,
            trajectory: TrajectoryParams {
                num_steps: s.num_steps,
                exposure_fraction: s.exposure_fraction,
                impulse_prob: s.impulse_prob,
                anxiety: s.anxiety,
                max_extent: s.max_extent,
                seed: self.seed,
            },
            seed: self.seed,
            resize: self.image_size()?,
        })
    }

    pub fn metric_kinds(&self) -> Result<Vec<MetricKind>, ConfigError> {
        if self.eval.metrics.is_empty() {
            return Err(ConfigError::Bad("eval.metrics must not be empty".into()));
        }
        self.eval
            .metrics
            .iter()
            .map(|name| {
                MetricKind::parse(name).ok_or_else(|| {
                    ConfigError::Bad(format!(
                        "unknown metric {name:?} (expected psnr, ssim, ms_ssim, or vif)"
                    ))
                })
            })
            .collect()
    }
}

/// `train_epochs` → `train.epochs`; a bare name like `seed` stays top-level.
fn path_to_dotted(path: &str) -> String {
    match path.split_once('_') {
        Some((section, key)) => format!("{section}.{key}"),
        None => path.to_string(),
    }
}

fn set_key(doc: &mut toml::Table, path: &str, raw: &str) -> Result<(), ConfigError> {
    let value = parse_scalar(raw);
    match path.split_once('.') {
        None => {
            doc.insert(path.to_string(), value);
        }
        Some((section, key)) => {
            if section.is_empty() || key.is_empty() {
                return Err(ConfigError::Bad(format!("bad override key {path:?}")));
            }
            let entry = doc
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let table = entry.as_table_mut().ok_or_else(|| {
                ConfigError::Bad(format!("{section} is not a table in the config file"))
            })?;
            table.insert(key.to_string(), value);
        }
    }
    Ok(())
}

/// TOML-typed when the literal parses (numbers, bools, arrays), else string.
fn parse_scalar(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
