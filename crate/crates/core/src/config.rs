//! Training configuration and its flat `key = value` file format.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::networks::NetConfig;
use crate::objectives::{KlSign, LossWeights};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub latent_dim_s: usize,
    pub latent_dim_z: usize,
    pub temperature: f64,
    pub kl_sign: KlSign,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub epochs_stage3: usize,
    pub seed: u64,
    pub salient_map_branch: bool,
    pub background_branch: bool,
    pub classifier_branch: bool,
    pub distill_weight: f64,
    pub recon_weight: f64,
    /// When off, stage 3 runs directly on the stage-1 checkpoint.
    pub density_stage: bool,
    /// HIGH and LOW samples per stage-2 batch.
    pub stage2_high: usize,
    pub stage2_low: usize,
    /// Start the generator from the trained image decoder.
    pub gan_init_from_decoder: bool,
    /// Caps on samples drawn per epoch / used for validation; 0 = no cap.
    pub max_train_samples: usize,
    pub max_val_samples: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub classifier_hidden: usize,
    pub discriminator_widths: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        Self {
            lambda1: 10.0,
            lambda2: 10.0,
            learning_rate: 0.001,
            batch_size: 64,
            latent_dim_s: net.latent_s,
            latent_dim_z: net.latent_z,
            temperature: 0.1,
            kl_sign: KlSign::Plus,
            epochs_stage1: 30,
            epochs_stage2: 15,
            epochs_stage3: 30,
            seed: 0,
            salient_map_branch: true,
            background_branch: true,
            classifier_branch: true,
            distill_weight: 0.1,
            recon_weight: 1.0,
            density_stage: true,
            stage2_high: 16,
            stage2_low: 16,
            gan_init_from_decoder: true,
            max_train_samples: 0,
            max_val_samples: 0,
            encoder_widths: net.encoder_widths,
            decoder_widths: net.decoder_widths,
            classifier_hidden: net.classifier_hidden,
            discriminator_widths: net.discriminator_widths,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::InvalidInput(format!("config key {key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::InvalidInput(format!("config key {key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Sets one field from its textual form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lambda1" => self.lambda1 = parse(key, value)?,
            "lambda2" => self.lambda2 = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "latent_dim_s" => self.latent_dim_s = parse(key, value)?,
            "latent_dim_z" => self.latent_dim_z = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "kl_sign" => self.kl_sign = value.trim().parse()?,
            "epochs_stage1" => self.epochs_stage1 = parse(key, value)?,
            "epochs_stage2" => self.epochs_stage2 = parse(key, value)?,
            "epochs_stage3" => self.epochs_stage3 = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "salient_map_branch" => self.salient_map_branch = parse_bool(key, value)?,
            "background_branch" => self.background_branch = parse_bool(key, value)?,
            "classifier_branch" => self.classifier_branch = parse_bool(key, value)?,
            "distill_weight" => self.distill_weight = parse(key, value)?,
            "recon_weight" => self.recon_weight = parse(key, value)?,
            "density_stage" => self.density_stage = parse_bool(key, value)?,
            "stage2_high" => self.stage2_high = parse(key, value)?,
            "stage2_low" => self.stage2_low = parse(key, value)?,
            "gan_init_from_decoder" => self.gan_init_from_decoder = parse_bool(key, value)?,
            "max_train_samples" => self.max_train_samples = parse(key, value)?,
            "max_val_samples" => self.max_val_samples = parse(key, value)?,
            "encoder_widths" => self.encoder_widths = parse_list(key, value)?,
            "decoder_widths" => self.decoder_widths = parse_list(key, value)?,
            "classifier_hidden" => self.classifier_hidden = parse(key, value)?,
            "discriminator_widths" => self.discriminator_widths = parse_list(key, value)?,
            other => return Err(Error::InvalidInput(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)` in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        fn s(v: impl Display) -> String {
            v.to_string()
        }
        vec![
            ("lambda1", s(self.lambda1)),
            ("lambda2", s(self.lambda2)),
            ("learning_rate", s(self.learning_rate)),
            ("batch_size", s(self.batch_size)),
            ("latent_dim_s", s(self.latent_dim_s)),
            ("latent_dim_z", s(self.latent_dim_z)),
            ("temperature", s(self.temperature)),
            ("kl_sign", s(self.kl_sign)),
            ("epochs_stage1", s(self.epochs_stage1)),
            ("epochs_stage2", s(self.epochs_stage2)),
            ("epochs_stage3", s(self.epochs_stage3)),
            ("seed", s(self.seed)),
            ("salient_map_branch", s(self.salient_map_branch)),
            ("background_branch", s(self.background_branch)),
            ("classifier_branch", s(self.classifier_branch)),
            ("distill_weight", s(self.distill_weight)),
            ("recon_weight", s(self.recon_weight)),
            ("density_stage", s(self.density_stage)),
            ("stage2_high", s(self.stage2_high)),
            ("stage2_low", s(self.stage2_low)),
            ("gan_init_from_decoder", s(self.gan_init_from_decoder)),
            ("max_train_samples", s(self.max_train_samples)),
            ("max_val_samples", s(self.max_val_samples)),
            ("encoder_widths", list(&self.encoder_widths)),
            ("decoder_widths", list(&self.decoder_widths)),
            ("classifier_hidden", s(self.classifier_hidden)),
            ("discriminator_widths", list(&self.discriminator_widths)),
        ]
    }

    pub fn echo(&self) -> BTreeMap<String, String> {
        self.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(origin, format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::format(origin, format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        for (k, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("distill_weight", self.distill_weight),
            ("recon_weight", self.recon_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{k} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.stage2_high < 2 || self.stage2_low < 1 {
            return bad("stage-2 batches need at least 2 HIGH and 1 LOW samples".into());
        }
        self.net_config().validate()
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            latent_s: self.latent_dim_s,
            latent_z: self.latent_dim_z,
            encoder_widths: self.encoder_widths.clone(),
            decoder_widths: self.decoder_widths.clone(),
            classifier_hidden: self.classifier_hidden,
            discriminator_widths: self.discriminator_widths.clone(),
            init_seed: self.seed,
            ..NetConfig::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            temperature: self.temperature,
            kl_sign: self.kl_sign,
            salient_map_branch: self.salient_map_branch,
            background_branch: self.background_branch,
            classifier_branch: self.classifier_branch,
            distill_weight: self.distill_weight,
            recon_weight: self.recon_weight,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_setting() {
        let c = TrainConfig::default();
        assert_eq!((c.lambda1, c.lambda2, c.learning_rate, c.batch_size), (10.0, 10.0, 0.001, 64));
        assert_eq!((c.latent_dim_s, c.latent_dim_z), (128, 128));
        assert_eq!(c.temperature, 0.1);
        assert!(c.salient_map_branch && c.background_branch && c.classifier_branch);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig { lambda1: 0.01, kl_sign: KlSign::Minus, ..TrainConfig::default() };
        c.encoder_widths = vec![4, 8, 8, 8];
        let mut back = TrainConfig::default();
        back.apply_text(&c.to_text(), Path::new("c")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut c = TrainConfig::default();
        assert!(c.apply_text("lamda1 = 3\n", Path::new("c")).is_err());
        assert!(c.apply_text("batch_size = -1\n", Path::new("c")).is_err());
        assert!(c.apply_text("no equals sign\n", Path::new("c")).is_err());
        c.apply_text("# comment\nseed = 5 # trailing\n\n", Path::new("c")).unwrap();
        assert_eq!(c.seed, 5);
        let c = TrainConfig { temperature: 0.0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }
}
