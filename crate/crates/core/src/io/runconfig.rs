//! Plain-text key/value run configuration: `key = value` lines with `#`
//! comments. Keys are dotted paths (model.*, train.*, refine.*, family.*,
//! paths, seed); unknown keys and malformed values fail with the key
//! named. CLI `--override key=value` flags reuse the same setter, so a
//! dumped effective configuration reloads to identical behavior.

use std::path::PathBuf;

use crate::error::Error;
use crate::model::ModelConfig;
use crate::refine::RefineConfig;
use crate::training::{LossRegime, TrainConfig};
use crate::Result;

use super::synth::{BaseShape, SynthFamilyConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub refine: RefineConfig,
    pub family: SynthFamilyConfig,
    /// Directory of cloud files to train on; the synthetic family is used
    /// when absent.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            refine: RefineConfig::default(),
            family: SynthFamilyConfig::default(),
            data_dir: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("config key {key:?}: cannot parse {value:?}")))
}

fn widths(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| parse_num::<usize>(key, s))
        .collect()
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model.num_probes" => self.model.num_probes = parse_num(key, v)?,
            "model.latent_dim" => self.model.latent_dim = parse_num(key, v)?,
            "model.encoder_layers" => self.model.encoder_layers = parse_num(key, v)?,
            "model.decoder_layers" => self.model.decoder_layers = parse_num(key, v)?,
            "model.heads" => self.model.heads = parse_num(key, v)?,
            "model.embedder_widths" => self.model.embedder_widths = widths(key, v)?,
            "model.ff_hidden" => self.model.ff_hidden = parse_num(key, v)?,
            "model.final_mlp_widths" => self.model.final_mlp_widths = widths(key, v)?,
            "model.density_radius" => self.model.density_radius = parse_num(key, v)?,
            "model.layer_norm" => self.model.layer_norm = parse_num(key, v)?,
            "model.residual_output" => self.model.residual_output = parse_num(key, v)?,
            "model.surface_attention" => self.model.surface_attention = parse_num(key, v)?,
            "train.epochs" => self.train.epochs = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse_num(key, v)?,
            "train.augment" => self.train.augment = parse_num(key, v)?,
            "train.regime" => {
                self.train.regime = match v {
                    "supervised" => LossRegime::Supervised,
                    "sparse" => {
                        let (fraction, lambda) = match self.train.regime {
                            LossRegime::Sparse { fraction, lambda } => (fraction, lambda),
                            _ => (0.15, 1.0),
                        };
                        LossRegime::Sparse { fraction, lambda }
                    }
                    "unsupervised" => LossRegime::Unsupervised,
                    other => {
                        return Err(Error::Config(format!(
                            "config key {key:?}: unknown regime {other:?}"
                        )))
                    }
                }
            }
            "train.sparse_fraction" => {
                let fraction = parse_num(key, v)?;
                self.train.regime = match self.train.regime {
                    LossRegime::Sparse { lambda, .. } => LossRegime::Sparse { fraction, lambda },
                    _ => LossRegime::Sparse {
                        fraction,
                        lambda: 1.0,
                    },
                };
            }
            "train.sparse_lambda" => {
                let lambda = parse_num(key, v)?;
                self.train.regime = match self.train.regime {
                    LossRegime::Sparse { fraction, .. } => LossRegime::Sparse { fraction, lambda },
                    _ => LossRegime::Sparse {
                        fraction: 0.15,
                        lambda,
                    },
                };
            }
            "train.seed" => self.train.seed = parse_num(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse_num(key, v)?,
            "refine.steps" => self.refine.steps = parse_num(key, v)?,
            "refine.learning_rate" => self.refine.learning_rate = parse_num(key, v)?,
            "family.base" => self.family.base = BaseShape::parse(v)?,
            "family.points" => self.family.points = parse_num(key, v)?,
            "family.members" => self.family.members = parse_num(key, v)?,
            "family.amplitude" => self.family.amplitude = parse_num(key, v)?,
            "family.seed" => self.family.seed = parse_num(key, v)?,
            "data.dir" => {
                self.data_dir = if v.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(v))
                }
            }
            "out.dir" => self.out_dir = PathBuf::from(v),
            other => {
                return Err(Error::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key = value", idx + 1))
            })?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.refine.validate()?;
        self.family.validate()?;
        Ok(())
    }

    /// Canonical dump of every field; parsing it back reproduces the
    /// configuration exactly.
    pub fn dump(&self) -> String {
        let widths = |v: &[usize]| {
            v.iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::from("# effective run configuration\n");
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv("model.num_probes", self.model.num_probes.to_string());
        kv("model.latent_dim", self.model.latent_dim.to_string());
        kv("model.encoder_layers", self.model.encoder_layers.to_string());
        kv("model.decoder_layers", self.model.decoder_layers.to_string());
        kv("model.heads", self.model.heads.to_string());
        kv("model.embedder_widths", widths(&self.model.embedder_widths));
        kv("model.ff_hidden", self.model.ff_hidden.to_string());
        kv("model.final_mlp_widths", widths(&self.model.final_mlp_widths));
        kv("model.density_radius", format!("{:.17e}", self.model.density_radius));
        kv("model.layer_norm", self.model.layer_norm.to_string());
        kv("model.residual_output", self.model.residual_output.to_string());
        kv("model.surface_attention", self.model.surface_attention.to_string());
        kv("train.epochs", self.train.epochs.to_string());
        kv("train.batch_size", self.train.batch_size.to_string());
        kv("train.learning_rate", format!("{:.17e}", self.train.learning_rate));
        kv("train.augment", self.train.augment.to_string());
        match self.train.regime {
            LossRegime::Supervised => kv("train.regime", "supervised".into()),
            LossRegime::Unsupervised => kv("train.regime", "unsupervised".into()),
            LossRegime::Sparse { fraction, lambda } => {
                kv("train.regime", "sparse".into());
                kv("train.sparse_fraction", format!("{fraction:.17e}"));
                kv("train.sparse_lambda", format!("{lambda:.17e}"));
            }
        }
        kv("train.seed", self.train.seed.to_string());
        kv("train.checkpoint_every", self.train.checkpoint_every.to_string());
        kv("refine.steps", self.refine.steps.to_string());
        kv("refine.learning_rate", format!("{:.17e}", self.refine.learning_rate));
        kv("family.base", self.family.base.name().into());
        kv("family.points", self.family.points.to_string());
        kv("family.members", self.family.members.to_string());
        kv("family.amplitude", format!("{:.17e}", self.family.amplitude));
        kv("family.seed", self.family.seed.to_string());
        if let Some(dir) = &self.data_dir {
            kv("data.dir", dir.display().to_string());
        }
        kv("out.dir", self.out_dir.display().to_string());
        out
    }
}
