//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment. Unknown keys are errors.
//! Command-line `--set key=value` pairs are applied after the file, so they
//! win. [`RunConfig::echo`] renders every key in sorted order; artifacts
//! embed it and its hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::diffusion::{CondInject, MeanParam};
use crate::error::{Error, Result};
use crate::eval::{Ablation, Scenario};
use crate::nn::Activation;
use crate::pipeline::PipelineConfig;
use crate::synth::{PlantedMap, SynthConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub synth: SynthConfig,
    pub betas: Vec<f64>,
    pub ablations: Vec<Ablation>,
    pub sweep_steps: Vec<usize>,
    pub aux_ratings: Option<PathBuf>,
    pub target_ratings: Option<PathBuf>,
    /// Directory holding `user_aux`, `user_target`, `item_aux` and
    /// `item_target` tables, as `.emb` (pooled) or `.hidden` (hidden states).
    pub embeddings: Option<PathBuf>,
    pub min_interactions: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default().seeded(),
            synth: SynthConfig::default(),
            betas: vec![0.2, 0.5, 0.8],
            ablations: Ablation::TABLE.to_vec(),
            sweep_steps: vec![2, 5, 10, 20, 50],
            aux_ratings: None,
            target_ratings: None,
            embeddings: None,
            min_interactions: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true/false, got `{v}`"))),
    }
}

fn list<T>(v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let p = &mut self.pipeline;
        match key {
            "seed" => {
                p.seed = num(key, v)?;
                p.pretrain.seed = p.seed;
                p.train.seed = p.seed;
                self.synth.seed = p.seed;
            }
            "betas" => self.betas = list(v, |s| num(key, s))?,
            "scenarios" => p.scenarios = list(v, Scenario::parse)?,
            "ablations" => self.ablations = list(v, Ablation::parse)?,
            "sweep_steps" => self.sweep_steps = list(v, |s| num(key, s))?,
            "clip" => p.clip = flag(key, v)?,

            "aux_ratings" => self.aux_ratings = path(v),
            "target_ratings" => self.target_ratings = path(v),
            "embeddings" => self.embeddings = path(v),
            "min_interactions" => self.min_interactions = if v.is_empty() { None } else { Some(num(key, v)?) },

            "feature_dim" => {
                p.pretrain.feature_dim = num(key, v)?;
                p.train.denoiser.feature_dim = p.pretrain.feature_dim;
            }
            "hidden_dim" => p.pretrain.hidden_dim = num(key, v)?,
            "pretrain_epochs" => p.pretrain.epochs = num(key, v)?,
            "pretrain_lr" => p.pretrain.learning_rate = num(key, v)?,
            "pretrain_dropout" => p.pretrain.dropout = num(key, v)?,
            "activation" => p.pretrain.activation = Activation::parse(v)?,

            "learning_rate" => p.train.learning_rate = num(key, v)?,
            "stage1_epochs" => p.train.stage1_epochs = num(key, v)?,
            "stage2_epochs" => p.train.stage2_epochs = num(key, v)?,
            "epochs" => {
                p.train.stage1_epochs = num(key, v)?;
                p.train.stage2_epochs = p.train.stage1_epochs;
            }
            "batch_size" => p.train.batch_size = num(key, v)?,
            "lambda" => p.train.lambda = num(key, v)?,
            "steps" => p.train.steps = num(key, v)?,
            "beta_start" => p.train.beta_start = num(key, v)?,
            "beta_end" => p.train.beta_end = num(key, v)?,
            "dropout" => p.train.dropout = num(key, v)?,
            "no_side" => p.train.no_side = flag(key, v)?,
            "no_diffusion" => p.train.no_diffusion = flag(key, v)?,
            "co_train_items" => p.train.co_train_items = flag(key, v)?,
            "cond_inject" => p.train.denoiser.cond_inject = CondInject::parse(v)?,
            "mean_param" => p.train.mean_param = MeanParam::parse(v)?,
            "down_dim" => p.train.denoiser.down_dim = num(key, v)?,
            "mid_dim" => p.train.denoiser.mid_dim = num(key, v)?,
            "temb_dim" => p.train.denoiser.temb_dim = num(key, v)?,

            "synth_users" => self.synth.users_per_domain = num(key, v)?,
            "synth_items" => self.synth.items_per_domain = num(key, v)?,
            "synth_cold_items" => self.synth.cold_items = num(key, v)?,
            "synth_overlap" => self.synth.overlap = num(key, v)?,
            "synth_embed_dim" => self.synth.embed_dim = num(key, v)?,
            "synth_noise" => self.synth.noise = num(key, v)?,
            "synth_components" => self.synth.components = num(key, v)?,
            "synth_mean_scale" => self.synth.mean_scale = num(key, v)?,
            "synth_component_std" => self.synth.component_std = num(key, v)?,
            "synth_ratings_per_user" => self.synth.ratings_per_user = num(key, v)?,
            "synth_map" => {
                self.synth.map = match v {
                    "random_orthogonal" => PlantedMap::RandomOrthogonal,
                    "identity" => PlantedMap::Identity,
                    _ => return Err(Error::Config(format!("`{key}`: unknown map `{v}`"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, sorted by key.
    pub fn echo(&self) -> BTreeMap<&'static str, String> {
        let p = &self.pipeline;
        let t = &p.train;
        let s = &self.synth;
        BTreeMap::from([
            ("seed", p.seed.to_string()),
            ("betas", join(&self.betas)),
            (
                "scenarios",
                p.scenarios.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(","),
            ),
            (
                "ablations",
                self.ablations.iter().map(|a| a.as_str()).collect::<Vec<_>>().join(","),
            ),
            ("sweep_steps", join(&self.sweep_steps)),
            ("clip", p.clip.to_string()),
            ("aux_ratings", show_path(&self.aux_ratings)),
            ("target_ratings", show_path(&self.target_ratings)),
            ("embeddings", show_path(&self.embeddings)),
            (
                "min_interactions",
                self.min_interactions.map(|m| m.to_string()).unwrap_or_default(),
            ),
            ("feature_dim", p.pretrain.feature_dim.to_string()),
            ("hidden_dim", p.pretrain.hidden_dim.to_string()),
            ("pretrain_epochs", p.pretrain.epochs.to_string()),
            ("pretrain_lr", p.pretrain.learning_rate.to_string()),
            ("pretrain_dropout", p.pretrain.dropout.to_string()),
            ("activation", p.pretrain.activation.as_str().to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("stage1_epochs", t.stage1_epochs.to_string()),
            ("stage2_epochs", t.stage2_epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lambda", t.lambda.to_string()),
            ("steps", t.steps.to_string()),
            ("beta_start", t.beta_start.to_string()),
            ("beta_end", t.beta_end.to_string()),
            ("dropout", t.dropout.to_string()),
            ("no_side", t.no_side.to_string()),
            ("no_diffusion", t.no_diffusion.to_string()),
            ("co_train_items", t.co_train_items.to_string()),
            ("cond_inject", t.denoiser.cond_inject.as_str().to_string()),
            ("mean_param", t.mean_param.as_str().to_string()),
            ("down_dim", t.denoiser.down_dim.to_string()),
            ("mid_dim", t.denoiser.mid_dim.to_string()),
            ("temb_dim", t.denoiser.temb_dim.to_string()),
            ("synth_users", s.users_per_domain.to_string()),
            ("synth_items", s.items_per_domain.to_string()),
            ("synth_cold_items", s.cold_items.to_string()),
            ("synth_overlap", s.overlap.to_string()),
            ("synth_embed_dim", s.embed_dim.to_string()),
            ("synth_noise", s.noise.to_string()),
            ("synth_components", s.components.to_string()),
            ("synth_mean_scale", s.mean_scale.to_string()),
            ("synth_component_std", s.component_std.to_string()),
            ("synth_ratings_per_user", s.ratings_per_user.to_string()),
            (
                "synth_map",
                match s.map {
                    PlantedMap::RandomOrthogonal => "random_orthogonal",
                    PlantedMap::Identity => "identity",
                }
                .to_string(),
            ),
        ])
    }

    pub fn echo_lines(&self) -> Vec<String> {
        self.echo().into_iter().map(|(k, v)| format!("{k} = {v}")).collect()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.echo_lines().join("\n").as_bytes()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                e => e,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for pair in pairs {
            let pair = pair.as_ref();
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} must lie in (0, 1)")));
        }
        if self.pipeline.pretrain.feature_dim != self.pipeline.train.denoiser.feature_dim {
            return Err(Error::Config(
                "feature_dim disagrees between pretraining and denoiser".into(),
            ));
        }
        self.pipeline.pretrain.validate()?;
        self.pipeline.train.validate()?;
        for p in [&self.aux_ratings, &self.target_ratings, &self.embeddings]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(Error::Config(format!("path {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}
