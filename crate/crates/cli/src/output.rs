use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// A run directory named after the hash of the effective config, plus the
/// list of files written into it for the manifest.
pub struct RunDir {
    pub path: PathBuf,
    pub config_hash: String,
    files: Vec<String>,
}

impl RunDir {
    pub fn create<C: Serialize>(root: &Path, command: &str, config: &C) -> Result<Self> {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(b"\n");
        h.update(serde_json::to_vec(config)?);
        let config_hash = hex::encode(h.finalize());
        let path = root.join(format!("run-{}", &config_hash[..12]));
        std::fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            path,
            config_hash,
            files: Vec::new(),
        })
    }

    pub fn write_with<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let p = self.path.join(name);
        let mut w = BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?);
        f(&mut w)?;
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }

    pub fn finish<C: Serialize>(mut self, command: &str, seed: Option<u64>, config: &C) -> Result<PathBuf> {
        #[derive(Serialize)]
        struct Manifest<'a, C> {
            command: &'a str,
            version: &'a str,
            config_hash: &'a str,
            seed: Option<u64>,
            files: &'a [String],
            config: &'a C,
        }
        self.files.sort();
        let m = Manifest {
            command,
            version: rcgps_core::VERSION,
            config_hash: &self.config_hash,
            seed,
            files: &self.files,
            config,
        };
        let p = self.path.join("manifest.json");
        let mut w = BufWriter::new(File::create(&p)?);
        serde_json::to_writer_pretty(&mut w, &m)?;
        writeln!(w)?;
        w.flush()?;
        Ok(self.path)
    }
}
