//! Run configuration: flat UTF-8 `key = value` lines with dotted keys.
//!
//! Every key has a default; files and `--set` overrides may only name known
//! keys. The resolved configuration is written next to each run's outputs
//! and reproduces the run when fed back through `--config`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::loss::{Difficulty, LossConfig, Schedule, StrengthMode, Variant};
use crate::stats::CovMode;
use crate::train::TrainConfig;
use crate::verify::DcfParams;

/// `(key, default)` for every recognised key.
pub const KEYS: &[(&str, &str)] = &[
    ("run.seed", "0"),
    ("data.path", ""),
    ("data.num_classes", "10"),
    ("data.input_dim", "20"),
    ("data.samples_per_class", "50"),
    ("data.sigma", "0.2"),
    ("data.anisotropy", "1"),
    ("data.hard_pair_fraction", "0"),
    ("model.hidden", "64"),
    ("model.embed_dim", "16"),
    ("train.batch_size", "32"),
    ("train.epochs", "60"),
    ("train.sample_log", "false"),
    ("optim.lr_init", "0.05"),
    ("optim.lr_final", "0.0001"),
    ("optim.momentum", "0.9"),
    ("optim.nesterov", "true"),
    ("optim.weight_decay", "0.0001"),
    ("head.scale", "32"),
    ("head.margin", "0.2"),
    ("loss.variant", "dasa"),
    ("loss.difficulty", "da"),
    ("loss.gamma", "2"),
    ("loss.cov_mode", "full"),
    ("loss.stats_after_deferred", "false"),
    ("sched.lambda0", "0.1"),
    ("sched.strength_mode", "constant"),
    ("sched.deferred_fraction", "0.4"),
    ("eval.p_target", "0.01"),
    ("eval.c_miss", "1"),
    ("eval.c_fa", "1"),
    ("eval.max_nontarget_per_target", "all"),
    ("check.trials", "50"),
    ("check.samples", "100000"),
    ("check.lambda_max", "1"),
    ("check.mgf_samples", "1000000"),
    ("check.grad_trials", "100"),
    ("check.composition_trials", "10"),
    ("check.epsilon", "0.00001"),
    ("compare.variants", "am,daam,dasa"),
    ("compare.seeds", "0"),
];

/// Raw string values for every key, defaults filled in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::invalid(key, "unknown configuration key")),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map_or("", String::as_str)
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::invalid("--set", format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v)
    }

    /// Applies the `key = value` lines of `text`; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, i + 1, format!("expected key = value, got {line:?}")))?;
            let k = k.trim();
            if !self.values.contains_key(k) {
                return Err(Error::parse(path, i + 1, format!("unknown configuration key {k:?}")));
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_text(&text, path)
    }

    /// One `key = value` line per key, sorted by key.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::invalid(key, format!("cannot parse {v:?}")))
    }

    fn parse_bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            v => Err(Error::invalid(key, format!("expected true or false, got {v:?}"))),
        }
    }

    fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::invalid(key, format!("cannot parse {s:?}"))))
            .collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("run.seed")
    }

    pub fn data_path(&self) -> Option<PathBuf> {
        let p = self.get("data.path");
        (!p.is_empty()).then(|| PathBuf::from(p))
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let spec = SynthSpec {
            num_classes: self.parse("data.num_classes")?,
            input_dim: self.parse("data.input_dim")?,
            samples_per_class: self.parse("data.samples_per_class")?,
            sigma: self.parse("data.sigma")?,
            anisotropy: self.parse("data.anisotropy")?,
            hard_pair_fraction: self.parse("data.hard_pair_fraction")?,
            seed: self.seed()?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        let variant = Variant::parse(self.get("loss.variant")).ok_or_else(|| {
            Error::invalid(
                "loss.variant",
                format!("unknown variant {:?} (softmax, isda, am, daam, dasa)", self.get("loss.variant")),
            )
        })?;
        let difficulty = parse_difficulty(self.get("loss.difficulty"), "loss.difficulty")?;
        let strength_mode = parse_strength(self.get("sched.strength_mode"), "sched.strength_mode")?;
        Ok(LossConfig {
            variant,
            difficulty: match variant {
                Variant::Softmax | Variant::Isda | Variant::Am => Difficulty::None,
                _ => difficulty,
            },
            strength_mode: match variant {
                Variant::Isda | Variant::Softmax => StrengthMode::Constant,
                _ => strength_mode,
            },
            lambda0: self.parse("sched.lambda0")?,
            gamma: self.parse("loss.gamma")?,
            schedule: Schedule {
                total_iters: 1,
                deferred_fraction: self.parse("sched.deferred_fraction")?,
            },
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cap = match self.get("eval.max_nontarget_per_target") {
            "all" => None,
            _ => Some(self.parse("eval.max_nontarget_per_target")?),
        };
        let cov_mode = CovMode::parse(self.get("loss.cov_mode"))
            .ok_or_else(|| Error::invalid("loss.cov_mode", "expected full or diagonal"))?;
        let cfg = TrainConfig {
            hidden: self.parse_list("model.hidden")?,
            embed_dim: self.parse("model.embed_dim")?,
            batch_size: self.parse("train.batch_size")?,
            epochs: self.parse("train.epochs")?,
            lr_init: self.parse("optim.lr_init")?,
            lr_final: self.parse("optim.lr_final")?,
            momentum: self.parse("optim.momentum")?,
            nesterov: self.parse_bool("optim.nesterov")?,
            weight_decay: self.parse("optim.weight_decay")?,
            scale: self.parse("head.scale")?,
            margin: self.parse("head.margin")?,
            loss: self.loss_config()?,
            cov_mode,
            stats_after_deferred: self.parse_bool("loss.stats_after_deferred")?,
            dcf: self.dcf_params()?,
            max_nontarget_per_target: cap,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dcf_params(&self) -> Result<DcfParams> {
        let p = DcfParams {
            p_target: self.parse("eval.p_target")?,
            c_miss: self.parse("eval.c_miss")?,
            c_fa: self.parse("eval.c_fa")?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn sample_log(&self) -> Result<bool> {
        self.parse_bool("train.sample_log")
    }

    pub fn check_settings(&self) -> Result<CheckSettings> {
        Ok(CheckSettings {
            trials: self.parse("check.trials")?,
            samples: self.parse("check.samples")?,
            lambda_max: self.parse("check.lambda_max")?,
            mgf_samples: self.parse("check.mgf_samples")?,
            grad_trials: self.parse("check.grad_trials")?,
            composition_trials: self.parse("check.composition_trials")?,
            epsilon: self.parse("check.epsilon")?,
        })
    }

    /// Variant entries of `compare.variants`, deduplicated in order. The
    /// second element lists duplicates that were dropped.
    pub fn compare_variants(&self) -> Result<(Vec<LossConfig>, Vec<String>)> {
        let base = self.loss_config()?;
        let mut out: Vec<LossConfig> = Vec::new();
        let mut dropped = Vec::new();
        for token in self.get("compare.variants").split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let cfg = parse_variant_entry(token, &base)?;
            if out.contains(&cfg) {
                dropped.push(token.to_string());
            } else {
                out.push(cfg);
            }
        }
        if out.len() < 2 {
            return Err(Error::invalid("compare.variants", "need at least two distinct variants"));
        }
        Ok((out, dropped))
    }

    pub fn compare_seeds(&self) -> Result<Vec<u64>> {
        let seeds: Vec<u64> = self.parse_list("compare.seeds")?;
        if seeds.is_empty() {
            return Err(Error::invalid("compare.seeds", "need at least one seed"));
        }
        Ok(seeds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckSettings {
    pub trials: usize,
    pub samples: usize,
    pub lambda_max: f64,
    pub mgf_samples: usize,
    pub grad_trials: usize,
    pub composition_trials: usize,
    pub epsilon: f64,
}

fn parse_difficulty(s: &str, field: &str) -> Result<Difficulty> {
    Difficulty::parse(s).ok_or_else(|| Error::invalid(field, format!("unknown difficulty {s:?} (none, da, dy)")))
}

fn parse_strength(s: &str, field: &str) -> Result<StrengthMode> {
    StrengthMode::parse(s)
        .ok_or_else(|| Error::invalid(field, format!("unknown strength mode {s:?} (constant, da, dy)")))
}

/// `variant[:difficulty[:strength_mode[:lambda0]]]`; omitted fields come
/// from `base`, and variants without a difficulty or strength get
/// `none`/`constant`.
pub fn parse_variant_entry(token: &str, base: &LossConfig) -> Result<LossConfig> {
    let parts: Vec<&str> = token.split(':').map(str::trim).collect();
    if parts.len() > 4 {
        return Err(Error::invalid("compare.variants", format!("too many fields in {token:?}")));
    }
    let variant = Variant::parse(parts[0])
        .ok_or_else(|| Error::invalid("compare.variants", format!("unknown variant {:?}", parts[0])))?;
    let mut cfg = base.clone();
    cfg.variant = variant;
    cfg.difficulty = match parts.get(1) {
        Some(d) => parse_difficulty(d, "compare.variants")?,
        None if base.difficulty == Difficulty::None => Difficulty::Da,
        None => base.difficulty,
    };
    if let Some(s) = parts.get(2) {
        cfg.strength_mode = parse_strength(s, "compare.variants")?;
    }
    if let Some(l) = parts.get(3) {
        cfg.lambda0 = l
            .parse()
            .map_err(|_| Error::invalid("compare.variants", format!("cannot parse lambda0 {l:?}")))?;
    }
    if !variant.is_margin() || variant == Variant::Am {
        cfg.difficulty = Difficulty::None;
    }
    if matches!(variant, Variant::Softmax | Variant::Isda) {
        cfg.strength_mode = StrengthMode::Constant;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = Config::default();
        let t = c.train_config().unwrap();
        assert_eq!(t, TrainConfig { loss: LossConfig { schedule: Schedule { total_iters: 1, deferred_fraction: 0.4 }, ..LossConfig::default() }, ..TrainConfig::default() });
        assert_eq!(c.synth_spec().unwrap(), SynthSpec::default());
        assert!(c.check_settings().is_ok());
    }

    #[test]
    fn text_round_trip() {
        let mut c = Config::default();
        c.set("sched.lambda0", "0.15").unwrap();
        c.set("model.hidden", "32,16").unwrap();
        let mut d = Config::default();
        d.merge_text(&c.to_text(), Path::new("x.cfg")).unwrap();
        assert_eq!(c, d);
        assert_eq!(d.train_config().unwrap().hidden, vec![32, 16]);
    }

    #[test]
    fn unknown_keys_and_bad_lines_are_errors() {
        let mut c = Config::default();
        assert!(c.set("loss.nope", "1").is_err());
        assert!(matches!(
            c.merge_text("# comment\n\nloss.nope = 1\n", Path::new("a.cfg")),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(matches!(c.merge_text("data.sigma\n", Path::new("a.cfg")), Err(Error::Parse { line: 1, .. })));
        assert!(c.set_pair("data.sigma").is_err());
    }

    #[test]
    fn invalid_values_name_the_field() {
        let mut c = Config::default();
        c.set("data.num_classes", "1").unwrap();
        let msg = c.synth_spec().unwrap_err().to_string();
        assert!(msg.contains("data.num_classes"), "{msg}");
        let mut c = Config::default();
        c.set("loss.variant", "arcface").unwrap();
        assert!(c.train_config().unwrap_err().to_string().contains("loss.variant"));
    }

    #[test]
    fn variant_entries() {
        let base = LossConfig::default();
        let am = parse_variant_entry("am", &base).unwrap();
        assert_eq!((am.variant, am.difficulty), (Variant::Am, Difficulty::None));
        let d = parse_variant_entry("dasa:dy:da:0.3", &base).unwrap();
        assert_eq!(
            (d.difficulty, d.strength_mode, d.lambda0),
            (Difficulty::Dy, StrengthMode::Da, 0.3)
        );
        assert!(parse_variant_entry("dasa:xx", &base).is_err());
        let mut c = Config::default();
        c.set("compare.variants", "am, daam, am, dasa").unwrap();
        let (v, dropped) = c.compare_variants().unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(dropped, vec!["am"]);
        c.set("compare.variants", "am,am").unwrap();
        assert!(c.compare_variants().is_err());
    }
}
