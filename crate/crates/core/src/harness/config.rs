use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::data::{PreprocessSpec, SyntheticConfig};
use crate::error::{Error, Result};
use crate::expert::ExpertConfig;
use crate::lpkem::DEFAULT_FUSION_HIDDEN;
use crate::udcm::{CalibrationMode, UdcmConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.0005,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Hidden width of the fusion MLP; 0 means a single linear layer.
    pub hidden: usize,
    pub zero_final: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_FUSION_HIDDEN,
            zero_final: false,
        }
    }
}

/// Either a split manifest on disk or the procedural synthetic set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    /// Relative sample paths resolve against this directory.
    pub root: Option<PathBuf>,
    pub synthetic: Option<SyntheticConfig>,
    pub preprocess: PreprocessSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_expert: bool,
    pub use_masking: bool,
    pub use_udcm: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const BASELINE: Self = Self {
        use_expert: false,
        use_masking: false,
        use_udcm: false,
    };
    pub const EXPERT_AVERAGE: Self = Self {
        use_expert: true,
        use_masking: false,
        use_udcm: false,
    };
    pub const EXPERT_UDCM: Self = Self {
        use_expert: true,
        use_masking: false,
        use_udcm: true,
    };
    pub const FULL: Self = Self {
        use_expert: true,
        use_masking: true,
        use_udcm: true,
    };

    /// The four component rows of the ablation study, in order.
    pub const ROWS: [Self; 4] = [Self::BASELINE, Self::EXPERT_AVERAGE, Self::EXPERT_UDCM, Self::FULL];

    pub fn validate(&self) -> Result<()> {
        if !self.use_expert && (self.use_masking || self.use_udcm) {
            return Err(Error::config(
                "ablation: use_masking and use_udcm require use_expert = true",
            ));
        }
        if self.use_masking && !self.use_udcm {
            return Err(Error::config(
                "ablation: use_masking without use_udcm is not one of the four component rows",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub backbone: BackboneConfig,
    pub expert: ExpertConfig,
    pub fusion: FusionConfig,
    pub udcm: UdcmConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub ablation: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 100,
            batch_size: 16,
            backbone: BackboneConfig::default(),
            expert: ExpertConfig::default(),
            fusion: FusionConfig::default(),
            udcm: UdcmConfig::default(),
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

/// Parses a `--set` value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key `{key}` is malformed")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Builds a config from TOML text plus `key=value` overrides with dotted keys.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::config(format!("config is not valid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e| Error::config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::config(format!("optimizer.lr = {} must be positive", o.lr)));
        }
        if !(0.0..1.0).contains(&o.momentum) || o.weight_decay < 0.0 {
            return Err(Error::config("optimizer.momentum must be in [0, 1) and weight_decay >= 0"));
        }
        if self.udcm.bins < 2 {
            return Err(Error::config(format!("udcm.bins = {} must be at least 2", self.udcm.bins)));
        }
        if self.udcm.mode != CalibrationMode::Learned && self.ablation.use_udcm {
            return Err(Error::config(format!(
                "udcm.mode = {} conflicts with ablation.use_udcm = true",
                self.udcm.mode
            )));
        }
        match (&self.data.manifest, &self.data.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::config("set either data.manifest or data.synthetic, not both"))
            }
            (None, None) => return Err(Error::config("no dataset: set data.manifest or data.synthetic")),
            (None, Some(s)) => s.validate()?,
            (Some(_), None) => self.data.preprocess.validate()?,
        }
        Ok(())
    }

    /// Calibration mode actually used, after applying the ablation switch.
    pub fn effective_mode(&self) -> CalibrationMode {
        if self.ablation.use_udcm {
            self.udcm.mode
        } else {
            CalibrationMode::Average
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(format!("{:x}", Sha256::digest(json)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SYNTH: &str = "[data.synthetic]\n";

    #[test]
    fn defaults_follow_the_training_recipe() {
        let c = RunConfig::default();
        assert_eq!(c.optimizer.lr, 0.0005);
        assert_eq!(c.epochs, 100);
        assert_eq!(c.udcm.bins, 8);
        assert_eq!(c.udcm.beta, 2.0);
        assert_eq!(c.udcm.range, [0.0, 2.0]);
        assert_eq!(c.ablation, Ablation::FULL);
    }

    #[test]
    fn exactly_four_ablation_rows_validate() {
        let mut ok = Vec::new();
        for bits in 0..8u8 {
            let a = Ablation {
                use_expert: bits & 1 != 0,
                use_masking: bits & 2 != 0,
                use_udcm: bits & 4 != 0,
            };
            if a.validate().is_ok() {
                ok.push(a);
            }
        }
        assert_eq!(ok.len(), 4);
        for row in Ablation::ROWS {
            assert!(ok.contains(&row));
        }
        let bad = Ablation {
            use_expert: false,
            use_masking: true,
            use_udcm: false,
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = RunConfig::from_toml_with_overrides(
            SYNTH,
            &[
                "optimizer.lr=0.01".into(),
                "backbone.name=tiny-vit".into(),
                "udcm.mode=\"learned\"".into(),
                "expert.grid=[8, 8]".into(),
                "ablation.use_masking=false".into(),
                "ablation.use_udcm=false".into(),
                "data.synthetic.seed=3".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.optimizer.lr, 0.01);
        assert_eq!(c.backbone.name, "tiny-vit");
        assert_eq!(c.expert.grid, [8, 8]);
        assert_eq!(c.ablation, Ablation::EXPERT_AVERAGE);
        assert_eq!(c.effective_mode(), CalibrationMode::Average);
        assert_eq!(c.data.synthetic.unwrap().seed, 3);
    }

    #[test]
    fn inconsistent_configs_are_config_errors() {
        for bad in [
            vec!["ablation.use_expert=false".to_string()],
            vec!["optimizer.lr=0".into()],
            vec!["udcm.bins=1".into()],
            vec!["epochs=0".into()],
            vec!["no_such_field=1".into()],
            vec!["udcm.mode=average".into()],
            vec!["data.manifest=\"m.json\"".into()],
            vec!["seed".into()],
        ] {
            let r = RunConfig::from_toml_with_overrides(SYNTH, &bad);
            assert!(matches!(r, Err(Error::Config(_))), "{bad:?} gave {r:?}");
        }
        assert!(matches!(
            RunConfig::from_toml_with_overrides("", &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let c = RunConfig::from_toml_with_overrides(SYNTH, &["seed=7".into()]).unwrap();
        let back = RunConfig::from_toml_with_overrides(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash().unwrap(), back.hash().unwrap());
        let other = RunConfig::from_toml_with_overrides(SYNTH, &["seed=8".into()]).unwrap();
        assert_ne!(c.hash().unwrap(), other.hash().unwrap());
    }
}
