//! Pipeline configuration: flat `section.key = value` text with flag overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use lcle::dataset::{DatasetConfig, PatchParams};
use lcle::fusion::DEFAULT_RECURRENT_WEIGHT;
use lcle::lissajous::LissajousConfig;
use lcle::matching::{TemplateParams, DEFAULT_NCC_THRESHOLD, DEFAULT_SEARCH_RADIUS};
use lcle::mosaic::{StitchParams, MIN_STITCH_OVERLAP};
use lcle::registration::{RegistrationSource, DEFAULT_MATCH_THRESHOLD, DEFAULT_POOL_FACTOR};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Registration {
    pub pool_factor: usize,
    pub source: RegistrationSource,
    /// Phase-correlation acceptance for LQ-to-mosaic matches.
    pub match_threshold: f64,
    /// Phase-correlation acceptance for HQ stitching.
    pub stitch_threshold: f64,
    pub min_overlap: f64,
    pub search_radius: usize,
    pub ncc_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fusion {
    pub recurrent_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub clips: usize,
    pub lq_frames: usize,
    pub hq_frames: usize,
    pub hq_overlap: f64,
    pub hq_frame_rate: f64,
    pub max_step: u32,
    pub patch_size: usize,
    pub block_size: usize,
    pub mse_threshold: f64,
    pub reject_fraction: f64,
    pub max_attempts: usize,
    pub compare_pool: usize,
    pub train_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub scanner: LissajousConfig,
    pub registration: Registration,
    pub fusion: Fusion,
    pub dataset: Dataset,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let d = DatasetConfig::default();
        PipelineConfig {
            scanner: d.scanner,
            registration: Registration {
                pool_factor: DEFAULT_POOL_FACTOR,
                source: RegistrationSource::default(),
                match_threshold: DEFAULT_MATCH_THRESHOLD,
                stitch_threshold: DEFAULT_MATCH_THRESHOLD,
                min_overlap: MIN_STITCH_OVERLAP,
                search_radius: DEFAULT_SEARCH_RADIUS,
                ncc_threshold: DEFAULT_NCC_THRESHOLD,
            },
            fusion: Fusion {
                recurrent_weight: DEFAULT_RECURRENT_WEIGHT,
            },
            dataset: Dataset {
                clips: d.clips,
                lq_frames: d.lq_frames,
                hq_frames: d.hq_frames,
                hq_overlap: d.hq_overlap,
                hq_frame_rate: d.hq_frame_rate,
                max_step: d.max_step,
                patch_size: d.patch.size,
                block_size: d.patch.block,
                mse_threshold: d.patch.mse_threshold,
                reject_fraction: d.patch.reject_fraction,
                max_attempts: d.patch.max_attempts,
                compare_pool: d.patch.compare_pool,
                train_ratio: d.train_ratio,
            },
            seed: d.seed,
        }
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn insert_dotted(root: &mut Map<String, Value>, key: &str, value: Value) {
    match key.split_once('.') {
        None => {
            root.insert(key.to_string(), value);
        }
        Some((head, rest)) => {
            let child = root
                .entry(head.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            if let Value::Object(m) = child {
                insert_dotted(m, rest, value);
            }
        }
    }
}

/// Parses `raw` into the JSON type of the value it replaces.
fn coerce(key: &str, current: &Value, raw: &str) -> Result<Value, UsageError> {
    let bad = |what: &str| UsageError(format!("{key}: expected {what}, got '{raw}'"));
    Ok(match current {
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?),
        Value::Number(_) => {
            let v: f64 = raw.parse().map_err(|_| bad("a number"))?;
            if !v.is_finite() {
                return Err(bad("a finite number"));
            }
            Value::from(v)
        }
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
        _ => Value::String(raw.to_string()),
    })
}

impl PipelineConfig {
    /// Every key with its current value, sorted.
    pub fn entries(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Applies `key = value` assignments in order. Unknown keys and values
    /// of the wrong type are usage errors.
    pub fn apply<'a>(&self, assignments: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, UsageError> {
        let mut flat = self.entries();
        for (key, raw) in assignments {
            let current = flat
                .get(key)
                .ok_or_else(|| UsageError(format!("unknown configuration key '{key}'")))?;
            let v = coerce(key, current, raw)?;
            flat.insert(key.to_string(), v);
        }
        let mut root = Map::new();
        for (k, v) in flat {
            insert_dotted(&mut root, &k, v);
        }
        let cfg: PipelineConfig = serde_json::from_value(Value::Object(root))
            .map_err(|e| UsageError(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(UsageError(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("registration.match_threshold", self.registration.match_threshold)?;
        unit("registration.stitch_threshold", self.registration.stitch_threshold)?;
        unit("registration.min_overlap", self.registration.min_overlap)?;
        unit("registration.ncc_threshold", self.registration.ncc_threshold)?;
        unit("fusion.recurrent_weight", self.fusion.recurrent_weight)?;
        if self.registration.pool_factor == 0 {
            return Err(UsageError("registration.pool_factor must be at least 1".into()));
        }
        if !self.scanner.width.is_multiple_of(self.registration.pool_factor)
            || !self.scanner.height.is_multiple_of(self.registration.pool_factor)
        {
            return Err(UsageError(
                "registration.pool_factor must divide the scanner frame size".into(),
            ));
        }
        self.scanner
            .validate()
            .and_then(|_| self.dataset_config().patch.validate())
            .map_err(|e| UsageError(format!("invalid configuration: {e}")))
    }

    /// Also checks the dataset section against the scanner frame size.
    pub fn validate_for_dataset(&self) -> Result<(), UsageError> {
        self.dataset_config()
            .validate()
            .map_err(|e| UsageError(format!("invalid dataset configuration: {e}")))
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let d = &self.dataset;
        DatasetConfig {
            scanner: self.scanner.clone(),
            hq_frame_rate: d.hq_frame_rate,
            clips: d.clips,
            lq_frames: d.lq_frames,
            hq_frames: d.hq_frames,
            hq_overlap: d.hq_overlap,
            max_step: d.max_step,
            pool_factor: self.registration.pool_factor,
            match_threshold: self.registration.match_threshold,
            registration_source: self.registration.source,
            template: self.template_params(),
            patch: PatchParams {
                size: d.patch_size,
                block: d.block_size,
                mse_threshold: d.mse_threshold,
                reject_fraction: d.reject_fraction,
                max_attempts: d.max_attempts,
                compare_pool: d.compare_pool,
            },
            train_ratio: d.train_ratio,
            seed: self.seed,
        }
    }

    pub fn template_params(&self) -> TemplateParams {
        TemplateParams {
            search_radius: self.registration.search_radius,
            ncc_threshold: self.registration.ncc_threshold,
        }
    }

    pub fn stitch_params(&self) -> StitchParams {
        StitchParams {
            pool_factor: self.registration.pool_factor,
            threshold: self.registration.stitch_threshold,
            min_overlap: self.registration.min_overlap,
        }
    }
}

/// Parses config text: one `key = value` per line, `#` starts a comment,
/// values may be double-quoted. Repeated keys are rejected.
pub fn parse_assignments(text: &str) -> Result<Vec<(String, String)>, UsageError> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| UsageError(format!("config line {}: expected 'key = value'", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        let v = v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v);
        if k.is_empty() {
            return Err(UsageError(format!("config line {}: empty key", n + 1)));
        }
        if let Some(prev) = seen.insert(k.to_string(), n + 1) {
            return Err(UsageError(format!(
                "config line {}: '{k}' already set on line {prev}",
                n + 1
            )));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<PipelineConfig, UsageError> {
    let mut assignments = match path {
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| UsageError(format!("cannot read config {}: {e}", p.display())))?;
            parse_assignments(&text)?
        }
        None => Vec::new(),
    };
    assignments.extend(overrides.iter().cloned());
    PipelineConfig::default().apply(assignments.iter().map(|(k, v)| (k.as_str(), v.as_str())))
}
