//! Run manifests: which configs produced which files, with content hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use learncert::io::sha256_hex;
use serde::{Deserialize, Serialize};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: String,
    pub path: String,
    pub sha256: String,
}

impl Artifact {
    pub fn of_file(kind: &str, path: &Path, label: impl Into<String>) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Self {
            kind: kind.into(),
            path: label.into(),
            sha256: sha256_hex(&bytes),
        })
    }
}

/// One subcommand invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub command: String,
    /// Every setting the stage ran with, flags and config file merged.
    pub config: serde_json::Value,
    pub config_digest: String,
    pub inputs: Vec<Artifact>,
    pub artifacts: Vec<Artifact>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub run_id: String,
    pub config_digest: String,
    pub tool_version: String,
    pub master_seed: u64,
    pub stages: Vec<Stage>,
}

fn digest_json(v: &impl Serialize) -> String {
    sha256_hex(&serde_json::to_vec(v).expect("serializable"))
}

impl RunManifest {
    fn refresh(&mut self) {
        let digests: Vec<&str> = self.stages.iter().map(|s| s.config_digest.as_str()).collect();
        self.config_digest = digest_json(&(self.master_seed, digests));
        self.run_id = format!("run-{}", &self.config_digest[..16]);
    }

    /// Loads `dir/manifest.json` if present and records `stage` in it,
    /// replacing an earlier run of the same command.
    pub fn record(dir: &Path, master_seed: u64, stage: Stage) -> Result<PathBuf> {
        let path = dir.join(FILE_NAME);
        let mut manifest = if path.exists() {
            let m: RunManifest = serde_json::from_str(&fs::read_to_string(&path)?).with_context(|| format!("parsing {}", path.display()))?;
            if m.master_seed != master_seed {
                bail!("{} was written with master seed {}, not {master_seed}", path.display(), m.master_seed);
            }
            m
        } else {
            RunManifest {
                run_id: String::new(),
                config_digest: String::new(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                master_seed,
                stages: Vec::new(),
            }
        };
        manifest.stages.retain(|s| s.command != stage.command);
        manifest.stages.push(stage);
        manifest.refresh();
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Re-hashes every output listed in the manifest, relative to its
    /// directory. Returns the paths whose content changed.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for a in self.stages.iter().flat_map(|s| s.artifacts.iter()) {
            let now = Artifact::of_file(&a.kind, &dir.join(&a.path), a.path.clone())?;
            if now.sha256 != a.sha256 {
                bad.push(a.path.clone());
            }
        }
        Ok(bad)
    }
}

/// Builder used by the subcommands.
pub struct StageBuilder {
    command: String,
    config: BTreeMap<String, serde_json::Value>,
    inputs: Vec<Artifact>,
    artifacts: Vec<Artifact>,
    dir: PathBuf,
}

impl StageBuilder {
    pub fn new(command: &str, dir: &Path) -> Self {
        Self {
            command: command.into(),
            config: BTreeMap::new(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
            dir: dir.to_path_buf(),
        }
    }

    pub fn config(&mut self, key: &str, value: &impl Serialize) -> &mut Self {
        self.config.insert(key.into(), serde_json::to_value(value).expect("serializable"));
        self
    }

    pub fn input(&mut self, kind: &str, path: &Path) -> Result<&mut Self> {
        self.inputs.push(Artifact::of_file(kind, path, path.display().to_string())?);
        Ok(self)
    }

    /// Writes `bytes` to `dir/name` and lists it as an output.
    pub fn write(&mut self, kind: &str, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.push(Artifact {
            kind: kind.into(),
            path: name.into(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn finish(self, master_seed: u64) -> Result<PathBuf> {
        let config = serde_json::to_value(&self.config)?;
        let stage = Stage {
            command: self.command,
            config_digest: digest_json(&config),
            config,
            inputs: self.inputs,
            artifacts: self.artifacts,
        };
        RunManifest::record(&self.dir, master_seed, stage)
    }
}
