//! Output directory handling: artifacts, the run manifest, and PNM images.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ndarray::Array3;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize)]
struct Artifact {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    config: &'a str,
    args: &'a [String],
    artifacts: Vec<Artifact>,
}

/// Collects the files a command writes so they can be hashed into the
/// manifest at the end of the run.
pub struct RunDir {
    root: PathBuf,
    written: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        self.register(name);
        Ok(p)
    }

    /// Records a file that was written by other means.
    pub fn register(&mut self, name: &str) {
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
    }

    pub fn finish(self, command: &str, seed: u64, config: &str, args: &[String]) -> Result<()> {
        let mut artifacts = Vec::with_capacity(self.written.len());
        for name in &self.written {
            let bytes = fs::read(self.root.join(name))?;
            artifacts.push(Artifact {
                path: name.clone(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let m = Manifest {
            command,
            seed,
            config,
            args,
            artifacts,
        };
        let text = serde_json::to_string_pretty(&m)?;
        fs::write(self.root.join(MANIFEST), text + "\n")?;
        Ok(())
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM (one channel) or PPM (three channels) encoding of a `(c, h, w)`
/// image with values in `[0, 1]`.
pub fn encode_pnm(img: &Array3<f64>) -> Result<Vec<u8>> {
    let (c, h, w) = img.dim();
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => anyhow::bail!("cannot encode a {c}-channel image as PNM"),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(to_byte(img[[ch, y, x]]));
            }
        }
    }
    Ok(out)
}
