//! `[section]` / `key = value` run configuration.

use banglagan::damsm::DamsmConfig;
use banglagan::gan::GanConfig;
use banglagan::metrics::{ClassifierConfig, EvalConfig};

pub const SECTIONS: [&str; 5] = ["textdata", "encoders", "damsm", "gan", "metrics"];

/// Every tunable of the pipeline, resolved from defaults, then the config
/// file, then command-line flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub train_fraction: f64,
    pub split_seed: u64,
    pub max_len: usize,
    pub min_freq: usize,
    pub captions_per_image: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub damsm: DamsmConfig,
    pub damsm_seed: u64,
    pub gan: GanConfig,
    pub sample_every: usize,
    pub eval: EvalConfig,
    pub classifier_images: usize,
    pub classifier_test_images: usize,
    pub classifier_data_seed: u64,
    pub classifier: ClassifierConfig,
    pub classifier_target: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            train_fraction: 0.7,
            split_seed: 0,
            max_len: 18,
            min_freq: 1,
            captions_per_image: 10,
            embed_dim: 32,
            hidden: 32,
            dropout: 0.2,
            damsm: DamsmConfig::default(),
            damsm_seed: 0,
            gan: GanConfig::default(),
            sample_every: 10,
            eval: EvalConfig::default(),
            classifier_images: 960,
            classifier_test_images: 240,
            classifier_data_seed: 1000,
            classifier: ClassifierConfig::default(),
            classifier_target: 0.95,
        }
    }
}

macro_rules! settings_keys {
    ($($sec:literal . $key:literal => $($field:ident).+ : $ty:ty),* $(,)?) => {
        impl Settings {
            /// Assigns one key; unknown keys and unparsable values are errors.
            pub fn set(&mut self, section: &str, key: &str, raw: &str) -> Result<(), String> {
                match (section, key) {
                    $(($sec, $key) => {
                        self.$($field).+ = raw
                            .parse::<$ty>()
                            .map_err(|e| format!("{section}.{key}: cannot parse {raw:?}: {e}"))?;
                    })*
                    _ => return Err(format!("unknown key {section}.{key}")),
                }
                Ok(())
            }

            /// `section.key` and current value, in documentation order.
            pub fn entries(&self) -> Vec<(String, String)> {
                vec![$((concat!($sec, ".", $key).to_string(), self.$($field).+.to_string())),*]
            }
        }
    };
}

settings_keys! {
    "textdata"."train_fraction" => train_fraction: f64,
    "textdata"."split_seed" => split_seed: u64,
    "textdata"."max_len" => max_len: usize,
    "textdata"."min_freq" => min_freq: usize,
    "textdata"."captions_per_image" => captions_per_image: usize,
    "encoders"."embed_dim" => embed_dim: usize,
    "encoders"."hidden" => hidden: usize,
    "encoders"."dropout" => dropout: f64,
    "damsm"."gamma1" => damsm.gamma1: f64,
    "damsm"."gamma2" => damsm.gamma2: f64,
    "damsm"."gamma3" => damsm.gamma3: f64,
    "damsm"."epochs" => damsm.epochs: usize,
    "damsm"."batch_size" => damsm.batch_size: usize,
    "damsm"."learning_rate" => damsm.learning_rate: f64,
    "damsm"."seed" => damsm_seed: u64,
    "gan"."beta" => gan.beta: f64,
    "gan"."epochs" => gan.epochs: usize,
    "gan"."batch_size" => gan.batch_size: usize,
    "gan"."lr_g" => gan.lr_g: f64,
    "gan"."lr_d" => gan.lr_d: f64,
    "gan"."z_dim" => gan.z_dim: usize,
    "gan"."dc" => gan.dc: usize,
    "gan"."ngf" => gan.ngf: usize,
    "gan"."ndf" => gan.ndf: usize,
    "gan"."seed" => gan.seed: u64,
    "gan"."sample_every" => sample_every: usize,
    "metrics"."n_samples" => eval.n_samples: usize,
    "metrics"."splits" => eval.splits: usize,
    "metrics"."seed" => eval.seed: u64,
    "metrics"."classifier_images" => classifier_images: usize,
    "metrics"."classifier_test_images" => classifier_test_images: usize,
    "metrics"."classifier_data_seed" => classifier_data_seed: u64,
    "metrics"."classifier_epochs" => classifier.max_epochs: usize,
    "metrics"."classifier_batch_size" => classifier.batch_size: usize,
    "metrics"."classifier_learning_rate" => classifier.learning_rate: f64,
    "metrics"."classifier_target" => classifier_target: f64,
    "metrics"."classifier_seed" => classifier.seed: u64,
}

impl Settings {
    /// Applies a config file on top of the current values. Keys must sit
    /// under a known section and may appear once.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        let mut section: Option<&str> = None;
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = n + 1;
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(format!("line {lineno}: unknown section [{name}]"));
                }
                section = Some(SECTIONS[SECTIONS.iter().position(|s| *s == name).unwrap()]);
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {lineno}: expected `key = value`"))?;
            let sec = section.ok_or_else(|| format!("line {lineno}: key outside any [section]"))?;
            let key = key.trim();
            if !seen.insert(format!("{sec}.{key}")) {
                return Err(format!("line {lineno}: duplicate key {sec}.{key}"));
            }
            self.set(sec, key, value.trim()).map_err(|e| format!("line {lineno}: {e}"))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(format!("textdata.train_fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        if self.max_len < 2 || self.min_freq < 1 || self.captions_per_image < 1 {
            return Err("textdata.max_len ≥ 2, min_freq ≥ 1 and captions_per_image ≥ 1 are required".into());
        }
        if self.embed_dim == 0 || self.hidden == 0 || !(0.0..1.0).contains(&self.dropout) {
            return Err("encoders.embed_dim and hidden must be positive, dropout in [0, 1)".into());
        }
        if self.sample_every == 0 {
            return Err("gan.sample_every must be positive".into());
        }
        if self.classifier.batch_size == 0 || self.classifier_images < 2 || self.classifier_test_images == 0 {
            return Err("metrics classifier sizes must be positive".into());
        }
        self.damsm.validate().map_err(|e| e.to_string())?;
        self.gan.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            target_accuracy: Some(self.classifier_target),
            ..self.classifier
        }
    }

    /// Config keys and defaults, for `--help`.
    pub fn help_text() -> String {
        let mut out = String::from("Config file keys ([section] then `key = value`) and defaults:\n");
        for (k, v) in Settings::default().entries() {
            out.push_str(&format!("  {k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_overrides() {
        let mut s = Settings::default();
        s.apply_text("# run\n[gan]\nepochs = 3\nlr_g=1e-3\n\n[textdata]\nmax_len = 12 # short\n").unwrap();
        assert_eq!(s.gan.epochs, 3);
        assert_eq!(s.gan.lr_g, 1e-3);
        assert_eq!(s.max_len, 12);
        assert_eq!(s.damsm, DamsmConfig::default());
    }

    #[test]
    fn order_independent() {
        let mut a = Settings::default();
        let mut b = Settings::default();
        a.apply_text("[gan]\nbeta = 2\n[damsm]\nepochs = 4\n").unwrap();
        b.apply_text("[damsm]\nepochs = 4\n[gan]\nbeta = 2\n").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "[gan]\nepoch = 3\n",
            "[model]\nx = 1\n",
            "epochs = 3\n",
            "[gan]\nepochs 3\n",
            "[gan]\nepochs = three\n",
            "[gan]\nepochs = 3\nepochs = 4\n",
        ] {
            assert!(Settings::default().apply_text(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn every_entry_round_trips() {
        let d = Settings::default();
        let mut s = Settings::default();
        for (k, v) in d.entries() {
            let (sec, key) = k.split_once('.').unwrap();
            s.set(sec, key, &v).unwrap();
        }
        assert_eq!(s, d);
        assert!(d.validate().is_ok());
        assert!(Settings::help_text().contains("gan.sample_every = 10"));
    }
}
