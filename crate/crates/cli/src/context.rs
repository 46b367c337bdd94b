//! Settings resolution, input hashing and output writing shared by the
//! subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use actcache::experiment::{ExperimentSpec, ModelSource};
use actcache::numerics::ModelConfig;
use actcache::timing::TimingBundle;
use anyhow::{Context as _, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::GlobalArgs;

#[derive(Debug, Clone, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

/// Header written into every output file.
#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub tool: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub inputs: Vec<InputHash>,
}

pub struct Context {
    pub spec: ExperimentSpec,
    pub out_dir: PathBuf,
    pub jobs: usize,
    inputs: Vec<InputHash>,
}

// Objects merge key by key; anything else replaces.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl Context {
    /// Built-in defaults, then the `--config` file, then `--profile`, then flags.
    pub fn new(args: &GlobalArgs) -> Result<Self> {
        let mut ctx = Context {
            spec: ExperimentSpec::default(),
            out_dir: PathBuf::new(),
            jobs: args.jobs.unwrap_or(0),
            inputs: Vec::new(),
        };
        let mut spec = serde_json::to_value(&ctx.spec)?;
        if let Some(path) = &args.config {
            let v: Value = ctx.read_json(path)?;
            merge(&mut spec, v);
        }
        if let Some(path) = &args.profile {
            let v: Value = ctx.read_json(path)?;
            merge(&mut spec["profile"], v);
        }
        let mut spec: ExperimentSpec = serde_json::from_value(spec).context("invalid experiment config")?;
        if let Some(seed) = args.seed {
            spec.seed = seed;
        }
        if let Some(out) = &args.out {
            spec.out_dir = Some(out.clone());
        }
        spec.profile.validate()?;
        ctx.out_dir = spec.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
        ctx.spec = spec;
        Ok(ctx)
    }

    /// Reads a file and records its hash as an input.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
        self.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(bytes)
    }

    pub fn read_text(&mut self, path: &Path) -> Result<String> {
        let bytes = self.read_input(path)?;
        String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8", path.display()))
    }

    pub fn read_json<T: serde::de::DeserializeOwned>(&mut self, path: &Path) -> Result<T> {
        let text = self.read_text(path)?;
        serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
    }

    /// `--model` takes a preset name or a JSON file of dimensions.
    pub fn model(&mut self, flag: Option<&str>) -> Result<ModelConfig> {
        if let Some(m) = flag {
            let path = Path::new(m);
            self.spec.model = if path.is_file() {
                let text = self.read_text(path)?;
                ModelSource::Inline(ModelConfig::from_json(&text)?)
            } else {
                ModelSource::Preset(m.to_string())
            };
        }
        Ok(self.spec.model.resolve()?)
    }

    /// A bundle file (bare, or under a `bundle` key as written by
    /// `calibrate`), or a fresh calibration from the experiment config.
    pub fn bundle(&mut self, path: Option<&Path>) -> Result<TimingBundle> {
        let b = match path {
            Some(p) => {
                let mut v: Value = self.read_json(p)?;
                if let Some(inner) = v.get_mut("bundle") {
                    v = inner.take();
                }
                serde_json::from_value(v).with_context(|| format!("{} is not a timing bundle", p.display()))?
            }
            None => self.spec.calibrate()?,
        };
        let b: TimingBundle = b;
        b.validate()?;
        Ok(b)
    }

    pub fn meta(&self) -> Meta {
        Meta {
            tool: "actcache",
            version: env!("CARGO_PKG_VERSION"),
            seed: self.spec.seed,
            inputs: self.inputs.clone(),
        }
    }

    fn target(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir).with_context(|| format!("cannot create {}", self.out_dir.display()))?;
        Ok(self.out_dir.join(name))
    }

    /// Writes `body` with a leading `meta` field; returns the path.
    pub fn write_json(&self, name: &str, body: Value) -> Result<PathBuf> {
        let mut doc = serde_json::json!({ "meta": self.meta() });
        merge(&mut doc, body);
        let path = self.target(name)?;
        let text = serde_json::to_string_pretty(&doc)? + "\n";
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }

    /// Writes CSV text after `#` comment lines carrying the metadata.
    pub fn write_csv(&self, name: &str, csv_text: &str) -> Result<PathBuf> {
        let meta = self.meta();
        let mut text = format!("# {} {} seed={}\n", meta.tool, meta.version, meta.seed);
        for i in &meta.inputs {
            text.push_str(&format!("# input {} sha256={}\n", i.path, i.sha256));
        }
        text.push_str(csv_text);
        let path = self.target(name)?;
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_is_recursive() {
        let mut a = serde_json::json!({"x": 1, "p": {"a": 1, "b": 2}});
        merge(&mut a, serde_json::json!({"p": {"b": 3}, "y": [1]}));
        assert_eq!(a, serde_json::json!({"x": 1, "p": {"a": 1, "b": 3}, "y": [1]}));
    }
}
