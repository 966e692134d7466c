//! Block-wise unstructured magnitude pruning.
//!
//! A [`RatioConfig`] assigns one pruning ratio to each of the down/mid/up
//! stages; [`build_mask`] realizes it as binary masks over the prunable
//! tensors. Masks are applied multiplicatively at forward time, so kept
//! weights are unchanged and stored weights are never mutated.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::unet::{BlockTag, ParameterStore};

/// Hard cap on any single pruning ratio.
pub const RATIO_MAX: f64 = 0.9;

/// Per-stage pruning ratios, each in [0, 0.9].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioConfig {
    pub r_down: f64,
    pub r_mid: f64,
    pub r_up: f64,
}

impl RatioConfig {
    pub fn new(r_down: f64, r_mid: f64, r_up: f64) -> Result<Self> {
        let cfg = Self { r_down, r_mid, r_up };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("r_down", self.r_down),
            ("r_mid", self.r_mid),
            ("r_up", self.r_up),
        ] {
            if !(0.0..=RATIO_MAX).contains(&v) || !v.is_finite() {
                return Err(Error::invalid(format!(
                    "{name} = {v} outside [0, {RATIO_MAX}]"
                )));
            }
        }
        Ok(())
    }

    pub fn ratio_for(&self, tag: BlockTag) -> f64 {
        match tag {
            BlockTag::Down => self.r_down,
            BlockTag::Mid => self.r_mid,
            BlockTag::Up => self.r_up,
            BlockTag::Excluded => 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.r_down, self.r_mid, self.r_up]
    }

    /// True when every component is <= the other's, elementwise.
    pub fn dominated_by(&self, other: &RatioConfig) -> bool {
        self.r_down <= other.r_down && self.r_mid <= other.r_mid && self.r_up <= other.r_up
    }
}

/// The same ratio for all three stages.
pub fn uniform_config(ratio: f64) -> Result<RatioConfig> {
    RatioConfig::new(ratio, ratio, ratio)
}

/// How magnitudes are ranked when selecting weights to prune.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneScope {
    /// Quantile per tensor: each prunable tensor is pruned at its group ratio.
    PerLayer,
    /// Quantile pooled across each group's tensors.
    PerGroup,
}

impl Default for PruneScope {
    fn default() -> Self {
        PruneScope::PerLayer
    }
}

/// Tuned per-stage ratios published for well-known UNet backbones; shipped as
/// reference data and reused as search seeds.
pub fn reference_ratio_table() -> Vec<(&'static str, &'static str, RatioConfig)> {
    let r = |d, m, u| RatioConfig {
        r_down: d,
        r_mid: m,
        r_up: u,
    };
    vec![
        ("sdxl", "1024x1024", r(0.295, 0.194, 0.236)),
        ("sdxl", "512x512", r(0.397, 0.434, 0.387)),
        ("sdxl", "400x560", r(0.482, 0.396, 0.469)),
        ("sdxl", "480x360", r(0.434, 0.428, 0.355)),
        ("sdxl", "1536x1536", r(0.300, 0.343, 0.300)),
        ("sd15", "512x512", r(0.433, 0.345, 0.300)),
        ("sd15", "400x560", r(0.319, 0.240, 0.192)),
        ("sd15", "480x360", r(0.467, 0.363, 0.196)),
        ("sd15", "768x768", r(0.185, 0.445, 0.100)),
        ("sd21", "512x512", r(0.623, 0.259, 0.115)),
        ("sd21", "400x560", r(0.534, 0.534, 0.169)),
        ("sd21", "480x360", r(0.651, 0.138, 0.271)),
        ("sd21", "768x768", r(0.277, 0.206, 0.313)),
    ]
}

/// Binary masks per prunable parameter plus achieved-sparsity metadata.
#[derive(Clone, Debug)]
pub struct PruneMask {
    config: RatioConfig,
    scope: PruneScope,
    masks: BTreeMap<String, Tensor>,
    /// (zeroed, total) per group in down/mid/up order.
    achieved: [(usize, usize); 3],
}

impl PruneMask {
    pub fn config(&self) -> &RatioConfig {
        &self.config
    }

    pub fn scope(&self) -> PruneScope {
        self.scope
    }

    pub fn masks(&self) -> &BTreeMap<String, Tensor> {
        &self.masks
    }

    /// Achieved sparsity fraction per group, down/mid/up order.
    pub fn achieved_sparsity(&self) -> [f64; 3] {
        self.achieved
            .map(|(z, n)| if n == 0 { 0.0 } else { z as f64 / n as f64 })
    }

    pub fn zero_count(&self, name: &str) -> Option<usize> {
        self.masks
            .get(name)
            .map(|m| m.data().iter().filter(|&&v| v == 0.0).count())
    }
}

/// Zeroes exactly floor(ratio·n) entries of smallest magnitude. Ties break
/// toward lower flat indices so masks nest monotonically across ratios.
pub fn mask_tensor(w: &Tensor, ratio: f64) -> Result<Tensor> {
    if !(0.0..=RATIO_MAX).contains(&ratio) || !ratio.is_finite() {
        return Err(Error::invalid(format!(
            "prune ratio {ratio} outside [0, {RATIO_MAX}]"
        )));
    }
    let n = w.len();
    let n_zero = (ratio * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| {
        let ma = w.data()[a].abs();
        let mb = w.data()[b].abs();
        ma.partial_cmp(&mb).unwrap().then(a.cmp(&b))
    });
    let mut mask = vec![1.0f32; n];
    for &idx in &order[..n_zero] {
        mask[idx] = 0.0;
    }
    Tensor::new(w.shape().to_vec(), mask)
}

/// Builds the mask for a ratio configuration over the store's prunable tensors.
pub fn build_mask(store: &ParameterStore, config: &RatioConfig) -> Result<PruneMask> {
    build_mask_scoped(store, config, PruneScope::PerLayer)
}

pub fn build_mask_scoped(
    store: &ParameterStore,
    config: &RatioConfig,
    scope: PruneScope,
) -> Result<PruneMask> {
    config.validate()?;
    let mut masks = BTreeMap::new();
    let mut achieved = [(0usize, 0usize); 3];

    for (gi, tag) in BlockTag::prunable_groups().into_iter().enumerate() {
        let names = store.prunable_names(tag);
        if names.is_empty() {
            return Err(Error::invalid(format!(
                "store has no prunable tensors in group {tag:?}"
            )));
        }
        let ratio = config.ratio_for(tag);
        match scope {
            PruneScope::PerLayer => {
                for name in names {
                    let w = store.get(name).expect("name from store");
                    let m = mask_tensor(w, ratio)?;
                    let zeros = m.data().iter().filter(|&&v| v == 0.0).count();
                    achieved[gi].0 += zeros;
                    achieved[gi].1 += m.len();
                    masks.insert(name.to_string(), m);
                }
            }
            PruneScope::PerGroup => {
                // Pool all magnitudes in the group, rank once, cut globally.
                let mut entries: Vec<(f32, usize, usize)> = Vec::new(); // (|w|, tensor idx, flat idx)
                for (ti, name) in names.iter().enumerate() {
                    let w = store.get(name).expect("name from store");
                    for (k, &v) in w.data().iter().enumerate() {
                        entries.push((v.abs(), ti, k));
                    }
                }
                let total = entries.len();
                let n_zero = (ratio * total as f64).floor() as usize;
                entries.sort_unstable_by(|a, b| {
                    a.0.partial_cmp(&b.0)
                        .unwrap()
                        .then(a.1.cmp(&b.1))
                        .then(a.2.cmp(&b.2))
                });
                let mut per_tensor: Vec<Vec<f32>> = names
                    .iter()
                    .map(|n| vec![1.0f32; store.get(n).unwrap().len()])
                    .collect();
                for &(_, ti, k) in &entries[..n_zero] {
                    per_tensor[ti][k] = 0.0;
                }
                achieved[gi].0 += n_zero;
                achieved[gi].1 += total;
                for (ti, name) in names.iter().enumerate() {
                    let shape = store.get(name).unwrap().shape().to_vec();
                    masks.insert(
                        name.to_string(),
                        Tensor::new(shape, std::mem::take(&mut per_tensor[ti]))?,
                    );
                }
            }
        }
    }

    Ok(PruneMask {
        config: *config,
        scope,
        masks,
        achieved,
    })
}

#[derive(Serialize, Deserialize)]
struct MaskTensorMeta {
    name: String,
    shape: Vec<usize>,
    zeros: usize,
}

#[derive(Serialize, Deserialize)]
struct MaskHeader {
    config: RatioConfig,
    scope: PruneScope,
    achieved: [(usize, usize); 3],
    tensors: Vec<MaskTensorMeta>,
}

/// Mask file: JSON header line, then one packed LSB-first bitset per tensor in
/// header order, each padded to a byte boundary.
pub fn mask_to_bytes(mask: &PruneMask) -> Result<Vec<u8>> {
    let header = MaskHeader {
        config: mask.config,
        scope: mask.scope,
        achieved: mask.achieved,
        tensors: mask
            .masks
            .iter()
            .map(|(name, m)| MaskTensorMeta {
                name: name.clone(),
                shape: m.shape().to_vec(),
                zeros: m.data().iter().filter(|&&v| v == 0.0).count(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for m in mask.masks.values() {
        let mut packed = vec![0u8; m.len().div_ceil(8)];
        for (i, &v) in m.data().iter().enumerate() {
            if v != 0.0 {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&packed);
    }
    Ok(out)
}

pub fn mask_from_bytes(bytes: &[u8]) -> Result<PruneMask> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::CorruptArtifact("mask file missing header line".to_string()))?;
    let header: MaskHeader = serde_json::from_slice(&bytes[..nl])?;
    let mut offset = nl + 1;
    let mut masks = BTreeMap::new();
    for meta in header.tensors {
        let numel: usize = meta.shape.iter().product();
        let nbytes = numel.div_ceil(8);
        if offset + nbytes > bytes.len() {
            return Err(Error::CorruptArtifact(format!(
                "mask payload truncated at {}",
                meta.name
            )));
        }
        let packed = &bytes[offset..offset + nbytes];
        offset += nbytes;
        let data: Vec<f32> = (0..numel)
            .map(|i| {
                if packed[i / 8] & (1 << (i % 8)) != 0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let zeros = data.iter().filter(|&&v| v == 0.0).count();
        if zeros != meta.zeros {
            return Err(Error::CorruptArtifact(format!(
                "mask for {} declares {} zeros, payload has {zeros}",
                meta.name, meta.zeros
            )));
        }
        masks.insert(meta.name, Tensor::new(meta.shape, data)?);
    }
    if offset != bytes.len() {
        return Err(Error::CorruptArtifact("mask file has trailing bytes".to_string()));
    }
    Ok(PruneMask {
        config: header.config,
        scope: header.scope,
        masks,
        achieved: header.achieved,
    })
}

pub fn save_mask(mask: &PruneMask, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&mask_to_bytes(mask)?)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<PruneMask> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    mask_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::build;

    #[test]
    fn mask_tensor_examples() {
        // ratio 0 keeps everything.
        let w = Tensor::new(vec![4], vec![0.1, -0.2, 0.3, -0.4]).unwrap();
        let m = mask_tensor(&w, 0.0).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));

        // Derived: smallest three magnitudes of six are zeroed.
        let w = Tensor::new(vec![6], vec![0.05, -0.7, 0.3, -0.1, 0.2, 0.9]).unwrap();
        let m = mask_tensor(&w, 0.5).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);

        // All-equal magnitudes: the first floor(n/2) flat indices are zeroed.
        let w = Tensor::new(vec![5], vec![0.5, -0.5, 0.5, -0.5, 0.5]).unwrap();
        let m = mask_tensor(&w, 0.5).unwrap();
        assert_eq!(m.data(), &[0.0, 0.0, 1.0, 1.0, 1.0]);

        assert!(mask_tensor(&w, 0.95).is_err());
        assert!(mask_tensor(&w, -0.1).is_err());
    }

    #[test]
    fn zero_config_gives_identity_mask() {
        let store = build(16, 1, 16, 16).unwrap();
        let mask = build_mask(&store, &uniform_config(0.0).unwrap()).unwrap();
        for m in mask.masks().values() {
            assert!(m.data().iter().all(|&v| v == 1.0));
        }
        assert_eq!(mask.achieved_sparsity(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn reference_row_hits_targets_within_one_element_per_tensor() {
        let store = build(16, 1, 16, 16).unwrap();
        let config = RatioConfig::new(0.397, 0.434, 0.387).unwrap();
        let mask = build_mask(&store, &config).unwrap();
        for (gi, tag) in BlockTag::prunable_groups().into_iter().enumerate() {
            let ratio = config.as_array()[gi];
            for name in store.prunable_names(tag) {
                let n = store.get(name).unwrap().len();
                let zeros = mask.zero_count(name).unwrap();
                let target = ratio * n as f64;
                assert!(
                    (zeros as f64 - target).abs() <= 1.0,
                    "{name}: {zeros} zeros vs target {target}"
                );
                assert_eq!(zeros, (target.floor()) as usize);
            }
        }
    }

    #[test]
    fn masks_nest_monotonically() {
        let store = build(16, 2, 16, 16).unwrap();
        let lo = build_mask(&store, &RatioConfig::new(0.1, 0.2, 0.15).unwrap()).unwrap();
        let hi = build_mask(&store, &RatioConfig::new(0.4, 0.5, 0.3).unwrap()).unwrap();
        for (name, mlo) in lo.masks() {
            let mhi = &hi.masks()[name];
            for (a, b) in mlo.data().iter().zip(mhi.data()) {
                // Everything zeroed at the low ratio stays zeroed at the high one.
                assert!(!(*a == 0.0 && *b == 1.0), "nesting violated in {name}");
            }
        }
    }

    #[test]
    fn masked_forward_leaves_stored_bytes_unchanged() {
        let store = build(16, 3, 16, 16).unwrap();
        let before = crate::unet::checkpoint_to_bytes(&store).unwrap();
        let mask = build_mask(&store, &RatioConfig::new(0.5, 0.5, 0.5).unwrap()).unwrap();
        let x = Tensor::from_fn(&[1, 1, 16, 16], |i| ((i * 37 % 101) as f32) * 0.01 - 0.5);
        store.forward(&x, &[5], &[1], Some(&mask)).unwrap();
        let after = crate::unet::checkpoint_to_bytes(&store).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn all_ones_mask_is_forward_identity() {
        let store = build(16, 4, 16, 16).unwrap();
        let mask = build_mask(&store, &uniform_config(0.0).unwrap()).unwrap();
        let x = Tensor::from_fn(&[2, 1, 16, 16], |i| ((i * 13 % 61) as f32) * 0.02 - 0.6);
        let dense = store.forward(&x, &[9, 20], &[0, 3], None).unwrap();
        let masked = store.forward(&x, &[9, 20], &[0, 3], Some(&mask)).unwrap();
        assert_eq!(dense.data(), masked.data());
    }

    #[test]
    fn mask_application_is_idempotent() {
        let store = build(16, 5, 16, 16).unwrap();
        let mask = build_mask(&store, &RatioConfig::new(0.3, 0.2, 0.4).unwrap()).unwrap();
        for (name, m) in mask.masks() {
            let w = store.get(name).unwrap();
            let once = w.mul_elem(m).unwrap();
            let twice = once.mul_elem(m).unwrap();
            assert_eq!(once.data(), twice.data());
        }
    }

    #[test]
    fn pooled_scope_hits_group_totals() {
        let store = build(16, 6, 16, 16).unwrap();
        let config = RatioConfig::new(0.25, 0.4, 0.1).unwrap();
        let mask = build_mask_scoped(&store, &config, PruneScope::PerGroup).unwrap();
        let sp = mask.achieved_sparsity();
        for (gi, target) in config.as_array().into_iter().enumerate() {
            assert!((sp[gi] - target).abs() < 1e-3, "group {gi}: {} vs {target}", sp[gi]);
        }
    }

    #[test]
    fn uniform_config_examples() {
        assert_eq!(
            uniform_config(0.124).unwrap().as_array(),
            [0.124, 0.124, 0.124]
        );
        assert_eq!(uniform_config(0.0).unwrap().as_array(), [0.0, 0.0, 0.0]);
        assert_eq!(
            uniform_config(0.288).unwrap().as_array(),
            [0.288, 0.288, 0.288]
        );
        assert!(uniform_config(0.91).is_err());
    }

    #[test]
    fn ratio_config_json_round_trip() {
        let cfg = RatioConfig::new(0.397, 0.434, 0.387).unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(json, r#"{"r_down":0.397,"r_mid":0.434,"r_up":0.387}"#);
        let back: RatioConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn mask_file_round_trip() {
        let store = build(16, 7, 16, 16).unwrap();
        let mask = build_mask(&store, &RatioConfig::new(0.3, 0.1, 0.2).unwrap()).unwrap();
        let bytes = mask_to_bytes(&mask).unwrap();
        let back = mask_from_bytes(&bytes).unwrap();
        assert_eq!(back.config(), mask.config());
        for (name, m) in mask.masks() {
            assert_eq!(back.masks()[name].data(), m.data());
        }
        assert_eq!(mask_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn reference_table_contains_published_rows() {
        let table = reference_ratio_table();
        let sdxl512 = table
            .iter()
            .find(|(m, r, _)| *m == "sdxl" && *r == "512x512")
            .unwrap();
        assert_eq!(sdxl512.2.as_array(), [0.397, 0.434, 0.387]);
        assert_eq!(table.len(), 13);
        for (_, _, cfg) in table {
            cfg.validate().unwrap();
        }
    }
}
