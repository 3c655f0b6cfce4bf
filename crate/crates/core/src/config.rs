//! Flat `key = value` pipeline configuration. Lines starting with `#` are
//! comments; unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::{MixConfig, PromptFormat};
use crate::dpo::HyperParams;
use crate::error::{Error, Result};
use crate::selector::{FilterConfig, ThresholdTable};
use crate::toylvlm::ModelConfig;

/// Which attention layers `mine` writes to disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionDump {
    /// Only the layer R is aggregated over.
    Layer,
    All,
    None,
}

impl FromStr for AttentionDump {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(Self::Layer),
            "all" => Ok(Self::All),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!(
                "attention_dump must be layer, all or none, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub dataset: Option<PathBuf>,
    pub image_root: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub strict_ingest: bool,
    pub n_total: usize,
    pub mix: MixConfig,
    pub model: ModelConfig,
    pub filter: FilterConfig,
    pub thresholds: ThresholdTable,
    pub hyper: HyperParams,
    pub k_candidates: usize,
    pub temperature: f64,
    /// Layer R is read from; `None` means the middle layer.
    pub attention_layer: Option<usize>,
    pub attention_dump: AttentionDump,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            image_root: None,
            out_dir: PathBuf::from("out"),
            strict_ingest: false,
            n_total: 1000,
            mix: MixConfig::default(),
            model: ModelConfig::default(),
            filter: FilterConfig::default(),
            thresholds: ThresholdTable::default(),
            hyper: HyperParams::default(),
            k_candidates: 4,
            temperature: 1.0,
            attention_layer: None,
            attention_dump: AttentionDump::Layer,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[f64; N]> {
    let items: Vec<f64> = value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect::<Result<_>>()?;
    items.try_into().map_err(|v: Vec<f64>| {
        Error::Config(format!("{key}: expected {N} values, got {}", v.len()))
    })
}

impl PipelineConfig {
    /// Parses config text. Relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(key.trim(), value.trim(), base_dir)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::FileUnreadable {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let path = || base.join(value);
        match key {
            "dataset" => self.dataset = Some(path()),
            "image_root" => self.image_root = Some(path()),
            "out_dir" => self.out_dir = path(),
            "strict_ingest" => self.strict_ingest = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "n_total" => self.n_total = parse(key, value)?,
            "mix.proportions" => self.mix.proportions = parse_list(key, value)?,
            "mix.sequence_weights" => self.mix.sequence_weights = parse_list(key, value)?,
            "mix.grid_weights" => self.mix.grid_weights = parse_list(key, value)?,
            "model.d_model" => self.model.d_model = parse(key, value)?,
            "model.n_layers" => self.model.n_layers = parse(key, value)?,
            "model.n_heads" => self.model.n_heads = parse(key, value)?,
            "model.ffn_dim" => self.model.ffn_dim = parse(key, value)?,
            "model.patch_size" => self.model.patch_size = parse(key, value)?,
            "model.image_side" => self.model.image_side = parse(key, value)?,
            "model.max_seq" => self.model.max_seq = parse(key, value)?,
            "mine.k_candidates" => self.k_candidates = parse(key, value)?,
            "mine.temperature" => self.temperature = parse(key, value)?,
            "mine.attention_layer" => self.attention_layer = Some(parse(key, value)?),
            "mine.attention_dump" => self.attention_dump = value.parse()?,
            "filter.ppl_quantile" => self.filter.ppl_quantile = parse(key, value)?,
            "filter.len_diff_max" => self.filter.len_diff_max = parse(key, value)?,
            "filter.edit_min" => self.filter.edit_min = parse(key, value)?,
            "train.beta" => self.hyper.beta = parse(key, value)?,
            "train.gamma" => self.hyper.gamma = parse(key, value)?,
            "train.learning_rate" => self.hyper.learning_rate = parse(key, value)?,
            "train.epochs" => self.hyper.epochs = parse(key, value)?,
            "train.batch_size" => self.hyper.batch_size = parse(key, value)?,
            "train.nll_per_token" => self.hyper.nll_per_token = parse(key, value)?,
            _ => {
                let Some(rest) = key.strip_prefix("tau.") else {
                    return Err(Error::Config(format!("unknown key {key:?}")));
                };
                let (format, n) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Config(format!("{key}: expected tau.<format>.<n>")))?;
                let format: PromptFormat = format.parse()?;
                self.thresholds
                    .set(format, parse(key, n)?, parse(key, value)?)?;
            }
        }
        Ok(())
    }

    /// Sub-configs below carry the global seed.
    pub fn mix(&self) -> MixConfig {
        MixConfig {
            seed: self.seed,
            ..self.mix.clone()
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn hyper(&self) -> HyperParams {
        HyperParams {
            seed: self.seed,
            ..self.hyper.clone()
        }
    }

    pub fn attention_layer(&self) -> usize {
        self.attention_layer
            .unwrap_or_else(|| self.model.middle_layer())
    }

    pub fn validate(&self) -> Result<()> {
        self.mix().validate()?;
        self.model().validate()?;
        self.filter.validate()?;
        self.hyper().validate()?;
        if self.k_candidates == 0 {
            return Err(Error::Config("mine.k_candidates must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "mine.temperature {}",
                self.temperature
            )));
        }
        if self.attention_layer() >= self.model.n_layers {
            return Err(Error::Config(format!(
                "mine.attention_layer {} with {} layers",
                self.attention_layer(),
                self.model.n_layers
            )));
        }
        if self.n_total == 0 {
            return Err(Error::Config("n_total must be positive".into()));
        }
        Ok(())
    }
}
