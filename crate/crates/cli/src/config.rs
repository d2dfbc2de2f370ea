//! Pipeline configuration file and `--set` overrides.

use std::fs;
use std::path::Path;

use agct_core::phantoms::CorpusConfig;
use agct_core::training::RunConfig;
use agct_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Everything one pipeline needs: how to generate the corpus and how to
/// train and evaluate on it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub data: CorpusConfig,
    pub run: RunConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.run.validate()
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("config serializes");
        v.push(b'\n');
        v
    }
}

/// Reads `path` (or the defaults) and applies `overrides` in order.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig> {
    let mut value = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::config("--config", format!("cannot read {}: {e}", p.display())))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| Error::config("--config", format!("{}: {e}", p.display())))?;
            // Reject unknown keys in the file itself before overriding.
            serde_json::from_value::<PipelineConfig>(v.clone()).map_err(|e| Error::config("--config", format!("{}: {e}", p.display())))?;
            v
        }
        None => serde_json::to_value(PipelineConfig::default()).expect("config serializes"),
    };
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::config("--set", format!("expected key=value, got {o:?}")))?;
        set_path(&mut value, key, parse_value(raw))?;
        serde_json::from_value::<PipelineConfig>(value.clone()).map_err(|e| Error::config(key, e.to_string()))?;
    }
    serde_json::from_value(value).map_err(|e| Error::config("--config", e.to_string()))
}

/// JSON when it parses, a plain string otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty path segment"));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is inside a non-object value")))?;
        cur = obj.entry(p.to_string()).or_insert(Value::Null);
    }
    if cur.is_null() {
        *cur = Value::Object(Default::default());
    }
    let obj = cur.as_object_mut().ok_or_else(|| Error::config(key, "parent is not an object"))?;
    obj.insert(parts[parts.len() - 1].to_string(), v);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(o: &[&str]) -> Result<PipelineConfig> {
        load(None, &o.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = set(&["run.gan.epochs=3", "run.loss.weights.lambda_s=0", "run.output_dir=out/x", "data.geometry.grid_n=16"]).unwrap();
        assert_eq!(c.run.gan.epochs, 3);
        assert_eq!(c.run.loss.weights.lambda_s, 0.0);
        assert_eq!(c.run.output_dir, Path::new("out/x"));
        assert_eq!(c.data.geometry.grid_n, 16);
    }

    #[test]
    fn optional_blocks_can_be_filled_field_by_field() {
        let c = set(&["run.geometry={\"sid_mm\":1,\"sdd_mm\":2,\"grid_n\":16,\"voxel_pitch_mm\":1}", "run.geometry.grid_n=32"]).unwrap();
        assert_eq!(c.run.geometry.unwrap().grid_n, 32);
    }

    #[test]
    fn unknown_keys_name_the_override() {
        match set(&["run.gan.epocs=3"]) {
            Err(Error::Config { field, reason }) => {
                assert_eq!(field, "run.gan.epocs");
                assert!(reason.contains("epocs"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
        assert!(set(&["nonsense"]).is_err());
        assert!(set(&["run.gan.epochs.x=1"]).is_err());
        assert!(set(&["run..gan=1"]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let c = set(&["run.seg.epochs=7"]).unwrap();
        fs::write(&p, c.to_json()).unwrap();
        assert_eq!(load(Some(&p), &[]).unwrap(), c);
        fs::write(&p, br#"{"run": {"bogus": 1}}"#).unwrap();
        assert!(matches!(load(Some(&p), &[]), Err(Error::Config { .. })));
    }
}
