//! Run configuration: one JSON document drives every subcommand. Unknown keys
//! are rejected; every run logs the resolved config plus its content hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crprune_core::amplify::MixTarget;
use crprune_core::datagen::PatternClass;
use crprune_core::error::{Error, Result};
use crprune_core::prune::{PruneScope, RatioConfig};

fn default_classes() -> Vec<String> {
    PatternClass::all_standard()
        .iter()
        .map(|c| c.id().to_string())
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub width: usize,
    pub train_h: usize,
    pub train_w: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            width: 16,
            train_h: 16,
            train_w: 16,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    #[serde(rename = "T")]
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            t: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub classes: Vec<String>,
    pub n_per_class: usize,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            classes: default_classes(),
            n_per_class: 64,
            jitter: 0.25,
            seed: 13,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch: 16,
            lr: 0.05,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub r_down: f64,
    pub r_mid: f64,
    pub r_up: f64,
    /// When set, overrides the triple with a uniform ratio.
    pub uniform: Option<f64>,
    pub scope: PruneScope,
}

impl Default for PruneSection {
    fn default() -> Self {
        // Published sdxl 512x512 block-wise row from the reference table.
        Self {
            r_down: 0.397,
            r_mid: 0.434,
            r_up: 0.387,
            uniform: None,
            scope: PruneScope::PerLayer,
        }
    }
}

impl PruneSection {
    pub fn ratio_config(&self) -> Result<RatioConfig> {
        match self.uniform {
            Some(r) => crprune_core::prune::uniform_config(r),
            None => RatioConfig::new(self.r_down, self.r_mid, self.r_up),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaSection {
    #[serde(rename = "T_init")]
    pub t_init: f64,
    pub alpha: f64,
    pub n_iter: usize,
    pub t_min: f64,
    pub r_max: usize,
    pub seeds: Vec<RatioConfig>,
    pub class_filter: Option<String>,
    pub rng_seed: u64,
    /// Energy evaluation set: image count, size, and chain seed.
    pub n_eval: usize,
    pub size: String,
    pub eval_seed: u64,
}

impl Default for SaSection {
    fn default() -> Self {
        Self {
            t_init: 1.0,
            alpha: 0.95,
            n_iter: 300,
            t_min: 1e-3,
            r_max: 2,
            seeds: crprune_core::anneal::SaParams::default_seeds(),
            class_filter: None,
            rng_seed: 23,
            n_eval: 4,
            size: "24x24".to_string(),
            eval_seed: 31,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoaSection {
    pub k: f64,
    pub target: MixTarget,
}

impl Default for PoaSection {
    fn default() -> Self {
        Self {
            k: 1.5,
            target: MixTarget::Eps,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub sizes: Vec<String>,
    pub classes: Vec<String>,
    pub n: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            sizes: vec![
                "12x12".to_string(),
                "16x16".to_string(),
                "20x20".to_string(),
                "24x24".to_string(),
            ],
            classes: default_classes(),
            n: 16,
            seed: 101,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub checkpoint: String,
    pub mask: String,
    pub reports: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            checkpoint: "runs/model.ckpt".to_string(),
            mask: "runs/mask.bin".to_string(),
            reports: "runs".to_string(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub prune: PruneSection,
    pub sa: SaSection,
    pub poa: PoaSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                let cfg: RunConfig = serde_json::from_str(&text)
                    .map_err(|e| Error::invalid(format!("config {}: {e}", p.display())))?;
                cfg.validate()?;
                Ok(cfg)
            }
            None => Ok(RunConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.width < 8 {
            return Err(Error::invalid("model.width must be >= 8"));
        }
        if self.schedule.t < 2 {
            return Err(Error::invalid("schedule.T must be >= 2"));
        }
        if self.data.n_per_class == 0 || self.train.batch == 0 {
            return Err(Error::invalid("data.n_per_class and train.batch must be positive"));
        }
        for id in self.data.classes.iter().chain(&self.eval.classes) {
            PatternClass::from_id(id)?;
        }
        parse_size(&self.sa.size)?;
        for s in &self.eval.sizes {
            parse_size(s)?;
        }
        Ok(())
    }

    /// Canonical JSON plus its content hash.
    pub fn resolved_json(&self) -> Result<(String, String)> {
        let json = serde_json::to_string_pretty(self)?;
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        let hash: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
        Ok((json, hash))
    }

    pub fn classes(&self, ids: &[String]) -> Result<Vec<PatternClass>> {
        ids.iter().map(|id| PatternClass::from_id(id)).collect()
    }

    pub fn eval_sizes(&self) -> Result<Vec<(usize, usize)>> {
        self.eval.sizes.iter().map(|s| parse_size(s)).collect()
    }
}

/// Parses "HxW" size strings.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| Error::invalid(format!("size '{s}' must look like 16x16")))?;
    let h = h
        .parse::<usize>()
        .map_err(|_| Error::invalid(format!("bad height in '{s}'")))?;
    let w = w
        .parse::<usize>()
        .map_err(|_| Error::invalid(format!("bad width in '{s}'")))?;
    Ok((h, w))
}
