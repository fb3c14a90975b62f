//! The TOML config file shared by every subcommand.
//!
//! One file carries a section per module; dotted `key=value` overrides are
//! applied on top, then the whole tree is checked against the known key set
//! (every unknown key is reported at once) and deserialized. Runs write the
//! resolved config back out as `resolved_config.toml`, and its SHA-256 is
//! embedded in checkpoints so a resume can verify it is continuing the same
//! run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AugConfig, DomainPairSpec, SceneParams};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::BackboneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Dataset root: `<root>/{source,target}/...`.
    pub root: PathBuf,
    pub n_source: usize,
    pub n_target: usize,
    pub source: SceneParams,
    pub target: SceneParams,
}

impl Default for DataSection {
    fn default() -> Self {
        let pair = DomainPairSpec::default();
        Self {
            root: PathBuf::from("data/pair"),
            n_source: 100,
            n_target: 100,
            source: pair.source,
            target: pair.target,
        }
    }
}

impl DataSection {
    pub fn pair_spec(&self) -> DomainPairSpec {
        DomainPairSpec {
            source: self.source,
            target: self.target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchingSection {
    /// Pixel-distance weight in the matching cost.
    pub dist_weight: f64,
}

impl Default for MatchingSection {
    fn default() -> Self {
        Self { dist_weight: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSection {
    pub lambda_loc: f64,
    pub lambda_cls: f64,
    pub lambda_ent: f64,
    pub lambda_adv: f64,
    /// Divide the discriminator/adversarial spatial sums by the number of
    /// output cells so their magnitude is resolution-independent.
    pub normalize_dis_loss: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_loc: w.lambda_loc,
            lambda_cls: w.lambda_cls,
            lambda_ent: w.lambda_ent,
            lambda_adv: w.lambda_adv,
            normalize_dis_loss: true,
        }
    }
}

impl LossSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_loc: self.lambda_loc,
            lambda_cls: self.lambda_cls,
            lambda_ent: self.lambda_ent,
            lambda_adv: self.lambda_adv,
        }
    }
}

/// The optional loss terms of the main objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossFlag {
    EntSrc,
    EntTgt,
    Adv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_source: usize,
    pub batch_target: usize,
    pub lr_main: f64,
    pub lr_disc: f64,
    pub seed: u64,
    pub eval_interval: u64,
    pub enabled_losses: Vec<LossFlag>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_source: 4,
            batch_target: 4,
            lr_main: 1e-4,
            lr_disc: 1e-4,
            seed: 0,
            eval_interval: 200,
            enabled_losses: vec![LossFlag::EntSrc, LossFlag::EntTgt, LossFlag::Adv],
        }
    }
}

impl TrainSection {
    pub fn enabled(&self, flag: LossFlag) -> bool {
        self.enabled_losses.contains(&flag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    pub data: DataSection,
    pub augment: AugConfig,
    pub model: BackboneConfig,
    pub matching: MatchingSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Config {
    /// Static consistency checks; `steps > 0` is checked at train entry
    /// because eval-only runs never consume it.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.loss.weights().validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.model.validate() {
            problems.push(format!("model: {e}"));
        }
        if self.augment.crop_size == 0 {
            problems.push("augment.crop_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.augment.flip_prob) {
            problems.push(format!(
                "augment.flip_prob {} outside [0, 1]",
                self.augment.flip_prob
            ));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            problems.push(format!(
                "eval.threshold {} outside (0, 1)",
                self.eval.threshold
            ));
        }
        if self.train.batch_source == 0 || self.train.batch_target == 0 {
            problems.push("train batch sizes must be positive".into());
        }
        if !(self.train.lr_main.is_finite() && self.train.lr_main > 0.0)
            || !(self.train.lr_disc.is_finite() && self.train.lr_disc > 0.0)
        {
            problems.push("learning rates must be positive".into());
        }
        if self.matching.dist_weight.is_nan() || self.matching.dist_weight < 0.0 {
            problems.push(format!(
                "matching.dist_weight {} must be non-negative",
                self.matching.dist_weight
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.resolved_toml().as_bytes());
        hasher.finalize().into()
    }

    /// Writes `resolved_config.toml` into `out_dir` for reproducibility.
    pub fn write_resolved_echo(&self, out_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join("resolved_config.toml");
        fs::write(&path, self.resolved_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// `POINTDA_SEED` overrides the training seed when set.
pub fn apply_env_seed(cfg: &mut Config) -> Result<()> {
    if let Ok(raw) = std::env::var("POINTDA_SEED") {
        let seed: u64 = raw.parse().map_err(|_| {
            Error::InvalidConfig(vec![format!("POINTDA_SEED '{raw}' is not a u64")])
        })?;
        cfg.train.seed = seed;
    }
    Ok(())
}

fn known_value() -> toml::Value {
    toml::Value::try_from(Config::default()).expect("default config converts to TOML")
}

fn collect_unknown_keys(
    user: &toml::Value,
    known: &toml::Value,
    prefix: &str,
    out: &mut Vec<String>,
) {
    if let (toml::Value::Table(u), toml::Value::Table(k)) = (user, known) {
        for (key, val) in u {
            match k.get(key) {
                None => out.push(format!("unknown key '{prefix}{key}'")),
                Some(kv) => collect_unknown_keys(val, kv, &format!("{prefix}{key}."), out),
            }
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|t| t.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        Error::InvalidConfig(vec![format!(
            "override '{spec}' is not of the form key.path=value"
        )])
    })?;
    let path = path.trim();
    let parts: Vec<&str> = path.split('.').collect();
    if path.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig(vec![format!(
            "override '{spec}' has an empty key segment"
        )]));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| {
            Error::InvalidConfig(vec![format!("override '{path}' descends into a non-table")])
        })?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node.as_table_mut().ok_or_else(|| {
        Error::InvalidConfig(vec![format!("override '{path}' descends into a non-table")])
    })?;
    table.insert(
        parts.last().unwrap().to_string(),
        parse_override_value(raw.trim()),
    );
    Ok(())
}

/// Parses a config file, applies dotted-path overrides, rejects every
/// unknown key at once and validates the result.
///
/// A bare `seed=N` override is shorthand for `train.seed=N`, the same knob
/// `POINTDA_SEED` controls.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<Config> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut value: toml::Value = toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    for spec in overrides {
        let spec = match spec.strip_prefix("seed=") {
            Some(rest) => format!("train.seed={rest}"),
            None => spec.clone(),
        };
        apply_override(&mut value, &spec)?;
    }
    let mut unknown = Vec::new();
    collect_unknown_keys(&value, &known_value(), "", &mut unknown);
    if !unknown.is_empty() {
        return Err(Error::InvalidConfig(unknown));
    }
    let cfg: Config = value
        .try_into()
        .map_err(|e| Error::InvalidConfig(vec![e.to_string()]))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(name: &str, text: &str) -> PathBuf {
        let path = std::env::temp_dir().join(format!("pointda_cfg_{}_{name}", std::process::id()));
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn empty_file_yields_defaults() {
        let path = write_temp("empty.toml", "");
        let cfg = load_config(&path, &[]).unwrap();
        assert_eq!(cfg, Config::default());
        fs::remove_file(path).ok();
    }

    #[test]
    fn sections_and_overrides_apply() {
        let path = write_temp(
            "basic.toml",
            r#"
[train]
steps = 50
seed = 3

[loss]
lambda_adv = 0.01
"#,
        );
        let cfg = load_config(
            &path,
            &[
                "train.seed=7".into(),
                "model.variant=vgg-like".into(),
                "train.enabled_losses=[\"adv\"]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.steps, 50);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.loss.lambda_adv, 0.01);
        assert_eq!(
            cfg.model.variant,
            crate::network::BackboneVariant::VggLike
        );
        assert_eq!(cfg.train.enabled_losses, vec![LossFlag::Adv]);
        fs::remove_file(path).ok();
    }

    #[test]
    fn unknown_keys_are_all_reported() {
        let path = write_temp(
            "unknown.toml",
            r#"
[train]
steps = 50
bogus = 1

[nonsense]
x = 2
"#,
        );
        match load_config(&path, &["loss.lambda_extra=3".into()]) {
            Err(Error::InvalidConfig(problems)) => {
                let text = problems.join("\n");
                assert!(text.contains("train.bogus"), "{text}");
                assert!(text.contains("nonsense"), "{text}");
                assert!(text.contains("loss.lambda_extra"), "{text}");
            }
            other => panic!("expected invalid-config, got {other:?}"),
        }
        fs::remove_file(path).ok();
    }

    #[test]
    fn bare_seed_override_is_shorthand_for_train_seed() {
        let path = write_temp("seed.toml", "");
        let cfg = load_config(&path, &["seed=7".into()]).unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert!(cfg.resolved_toml().contains("seed = 7"));
        fs::remove_file(path).ok();
    }

    #[test]
    fn semantic_validation_catches_bad_values() {
        let path = write_temp("bad.toml", "[eval]\nthreshold = 1.5\n");
        assert!(matches!(
            load_config(&path, &[]),
            Err(Error::InvalidConfig(_))
        ));
        fs::remove_file(path).ok();
    }

    #[test]
    fn parse_errors_carry_the_path() {
        let path = write_temp("syntax.toml", "[train\nsteps = 1");
        assert!(matches!(load_config(&path, &[]), Err(Error::Parse { .. })));
        fs::remove_file(path).ok();
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = Config::default();
        let mut b = Config::default();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn env_seed_overrides_config() {
        let mut cfg = Config::default();
        std::env::set_var("POINTDA_SEED", "123");
        apply_env_seed(&mut cfg).unwrap();
        std::env::remove_var("POINTDA_SEED");
        assert_eq!(cfg.train.seed, 123);
    }
}
