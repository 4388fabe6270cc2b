use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::io::{encode_png, save_tensor, Dtype};
use crate::pipeline::ExplainRun;

/// Run directories under one root, named by run id and written atomically.
///
/// Each run holds `run.json`, `telemetry.json`, `config.json`, the input,
/// region and output tensors, and PNG previews. A run is never rewritten.
#[derive(Clone, Debug)]
pub struct RunStore {
    root: PathBuf,
}

static STAGING: AtomicU64 = AtomicU64::new(0);

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_hexdigit())
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> Result<PathBuf> {
        if !valid_id(id) {
            return Err(Error::invalid(format!("malformed run id `{id}`")));
        }
        Ok(self.root.join(id))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.dir(id)
            .map(|d| d.join("run.json").is_file())
            .unwrap_or(false)
    }

    /// Persists `run` unless a run with the same id exists, and returns the
    /// stored run either way.
    pub fn save(&self, run: &ExplainRun) -> Result<ExplainRun> {
        let dir = self.dir(&run.id)?;
        if dir.join("run.json").is_file() {
            return self.load(&run.id);
        }
        let staging = self.root.join(format!(
            ".staging-{}-{}-{}",
            run.id,
            std::process::id(),
            STAGING.fetch_add(1, Ordering::Relaxed)
        ));
        fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        let write = |name: &str, bytes: &[u8]| {
            let p = staging.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        let output = run.output_tensor()?;
        let input = run.input_tensor()?;
        let region = run.region_mask()?;
        save_tensor(&staging.join("input.tensor"), &input, Dtype::F64)?;
        save_tensor(&staging.join("output.tensor"), &output, Dtype::F64)?;
        save_tensor(
            &staging.join("region.tensor"),
            &region.to_tensor(),
            Dtype::F32,
        )?;
        write("output.png", &encode_png(&output)?)?;
        write("input.png", &encode_png(&input)?)?;
        write("region.png", &region.to_png()?)?;
        write(
            "telemetry.json",
            &serde_json::to_vec_pretty(&run.telemetry)?,
        )?;
        let config = serde_json::json!({
            "guidance": run.config,
            "preset": run.preset,
            "models": run.models,
            "seed": run.config.seed,
        });
        write("config.json", &serde_json::to_vec_pretty(&config)?)?;
        write("run.json", &serde_json::to_vec_pretty(run)?)?;
        match fs::rename(&staging, &dir) {
            Ok(()) => {}
            Err(_) if dir.join("run.json").is_file() => {
                let _ = fs::remove_dir_all(&staging);
            }
            Err(e) => {
                let _ = fs::remove_dir_all(&staging);
                return Err(Error::io(&dir, e));
            }
        }
        self.load(&run.id)
    }

    /// The stored `run.json` bytes.
    pub fn run_bytes(&self, id: &str) -> Result<Vec<u8>> {
        let p = self.dir(id)?.join("run.json");
        fs::read(&p).map_err(|e| Error::io(&p, e))
    }

    pub fn load(&self, id: &str) -> Result<ExplainRun> {
        Ok(serde_json::from_slice(&self.run_bytes(id)?)?)
    }

    /// PNG preview of the counterfactual.
    pub fn image_png(&self, id: &str) -> Result<Vec<u8>> {
        let p = self.dir(id)?.join("output.png");
        fs::read(&p).map_err(|e| Error::io(&p, e))
    }

    pub fn ids(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))? {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if valid_id(&name) && entry.path().join("run.json").is_file() {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }
}
