//! Flat `key = value` run configuration with `bench.`, `train.`, `hyper.`
//! and `model.` sections. Blank lines and `#` comments are ignored; unknown
//! keys are errors.

use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use zsldg::diffcore::Activation;
use zsldg::evalharness::Protocol;
use zsldg::synthdata::{BenchConfig, TransformKind};
use zsldg::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub bench: BenchConfig,
    pub train: TrainConfig,
    pub protocol: Protocol,
    /// Source domains for the limited-sources protocol.
    pub ls_seen_domains: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            bench: BenchConfig::default(),
            train: TrainConfig::default(),
            protocol: Protocol::Rotation,
            ls_seen_domains: 2,
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("bad value '{value}' for {key}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("bad value '{value}' for {key}: expected true or false"),
    }
}

impl RunConfig {
    /// Every accepted key, in the order [`RunConfig::to_text`] writes them.
    pub const KEYS: &'static [&'static str] = &[
        "bench.n_classes",
        "bench.n_domains",
        "bench.n_seen_classes",
        "bench.n_seen_domains",
        "bench.samples_per_class_domain",
        "bench.visual_dim",
        "bench.semantic_dim",
        "bench.content_dim",
        "bench.content_noise_std",
        "bench.semantic_noise_std",
        "bench.transform_kind",
        "bench.domain_shift",
        "bench.bias_std",
        "bench.min_shift_drop",
        "bench.seed",
        "train.mode",
        "train.epochs",
        "train.batch_size",
        "train.seed",
        "train.lr",
        "train.critic_lr",
        "train.beta1",
        "train.beta2",
        "train.eps",
        "train.checkpoint_every",
        "train.log_wall_time",
        "hyper.lambda",
        "hyper.delta",
        "hyper.alpha",
        "hyper.gamma",
        "hyper.kappa",
        "hyper.critic_ratio",
        "model.latent_dim",
        "model.noise_dim",
        "model.hidden_width",
        "model.encoder_act",
        "model.critic_act",
        "protocol",
        "protocol.ls_seen_domains",
        "output_dir",
    ];

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got '{line}'", n + 1))?;
            cfg.set(key.trim(), value.trim()).with_context(|| format!("line {}", n + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let b = &mut self.bench;
        let t = &mut self.train;
        match key {
            "bench.n_classes" => b.n_classes = parse(key, v)?,
            "bench.n_domains" => b.n_domains = parse(key, v)?,
            "bench.n_seen_classes" => b.n_seen_classes = parse(key, v)?,
            "bench.n_seen_domains" => b.n_seen_domains = parse(key, v)?,
            "bench.samples_per_class_domain" => b.samples_per_class_domain = parse(key, v)?,
            "bench.visual_dim" => b.visual_dim = parse(key, v)?,
            "bench.semantic_dim" => b.semantic_dim = parse(key, v)?,
            "bench.content_dim" => b.content_dim = parse(key, v)?,
            "bench.content_noise_std" => b.content_noise_std = parse(key, v)?,
            "bench.semantic_noise_std" => b.semantic_noise_std = parse(key, v)?,
            "bench.transform_kind" => b.transform_kind = parse::<TransformKind>(key, v)?,
            "bench.domain_shift" => b.domain_shift = parse(key, v)?,
            "bench.bias_std" => b.bias_std = parse(key, v)?,
            "bench.min_shift_drop" => b.min_shift_drop = parse(key, v)?,
            "bench.seed" => b.seed = parse(key, v)?,
            "train.mode" => t.mode = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.lr" => t.gen_adam.lr = parse(key, v)?,
            "train.critic_lr" => t.critic_adam.lr = parse(key, v)?,
            "train.beta1" => {
                t.gen_adam.beta1 = parse(key, v)?;
                t.critic_adam.beta1 = t.gen_adam.beta1;
            }
            "train.beta2" => {
                t.gen_adam.beta2 = parse(key, v)?;
                t.critic_adam.beta2 = t.gen_adam.beta2;
            }
            "train.eps" => {
                t.gen_adam.eps = parse(key, v)?;
                t.critic_adam.eps = t.gen_adam.eps;
            }
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "train.log_wall_time" => t.log_wall_time = parse_bool(key, v)?,
            "hyper.lambda" => t.hyper.lambda = parse(key, v)?,
            "hyper.delta" => t.hyper.delta = parse(key, v)?,
            "hyper.alpha" => t.hyper.alpha = parse(key, v)?,
            "hyper.gamma" => t.hyper.gamma = parse(key, v)?,
            "hyper.kappa" => t.hyper.kappa = parse(key, v)?,
            "hyper.critic_ratio" => t.hyper.critic_ratio = parse(key, v)?,
            "model.latent_dim" => t.model.latent_dim = parse(key, v)?,
            "model.noise_dim" => t.model.noise_dim = parse(key, v)?,
            "model.hidden_width" => t.model.arch.hidden_width = parse(key, v)?,
            "model.encoder_act" => t.model.arch.encoder_act = parse::<Activation>(key, v)?,
            "model.critic_act" => t.model.arch.critic_act = parse::<Activation>(key, v)?,
            "protocol" => self.protocol = parse(key, v)?,
            "protocol.ls_seen_domains" => self.ls_seen_domains = parse(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            _ => bail!("unknown config key '{key}'"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.bench.validate()?;
        self.train.validate()?;
        if self.ls_seen_domains == 0 || self.ls_seen_domains >= self.bench.n_domains {
            bail!(
                "protocol.ls_seen_domains must be in 1..{}, got {}",
                self.bench.n_domains,
                self.ls_seen_domains
            );
        }
        Ok(())
    }

    /// Canonical text with every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let b = &self.bench;
        let t = &self.train;
        let values: Vec<String> = vec![
            b.n_classes.to_string(),
            b.n_domains.to_string(),
            b.n_seen_classes.to_string(),
            b.n_seen_domains.to_string(),
            b.samples_per_class_domain.to_string(),
            b.visual_dim.to_string(),
            b.semantic_dim.to_string(),
            b.content_dim.to_string(),
            b.content_noise_std.to_string(),
            b.semantic_noise_std.to_string(),
            b.transform_kind.to_string(),
            b.domain_shift.to_string(),
            b.bias_std.to_string(),
            b.min_shift_drop.to_string(),
            b.seed.to_string(),
            t.mode.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.seed.to_string(),
            t.gen_adam.lr.to_string(),
            t.critic_adam.lr.to_string(),
            t.gen_adam.beta1.to_string(),
            t.gen_adam.beta2.to_string(),
            t.gen_adam.eps.to_string(),
            t.checkpoint_every.to_string(),
            t.log_wall_time.to_string(),
            t.hyper.lambda.to_string(),
            t.hyper.delta.to_string(),
            t.hyper.alpha.to_string(),
            t.hyper.gamma.to_string(),
            t.hyper.kappa.to_string(),
            t.hyper.critic_ratio.to_string(),
            t.model.latent_dim.to_string(),
            t.model.noise_dim.to_string(),
            t.model.arch.hidden_width.to_string(),
            t.model.arch.encoder_act.to_string(),
            t.model.arch.critic_act.to_string(),
            self.protocol.to_string(),
            self.ls_seen_domains.to_string(),
            self.output_dir.display().to_string(),
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("train.lr", "0.003").unwrap();
        cfg.set("bench.transform_kind", "affine").unwrap();
        cfg.set("protocol", "ls").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("train.epochs = 3\ntrain.epocs = 4\n").unwrap_err();
        assert!(format!("{err:#}").contains("train.epocs"), "{err:#}");
    }

    #[test]
    fn comments_and_blanks() {
        let cfg = RunConfig::parse("# demo\n\nhyper.delta = 0.25  # weaker pull\n").unwrap();
        assert_eq!(cfg.train.hyper.delta, 0.25);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("bench.n_seen_classes = 40").is_err());
        assert!(RunConfig::parse("train.mode = M4").is_err());
        assert!(RunConfig::parse("hyper.critic_ratio = 0").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
    }
}
