//! Experiment directory with a per-run manifest of hashed inputs and outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use supforge::attack::PerturbationPair;
use supforge::checkpoint::Container;
use supforge::netpbm;
use supforge::scene::StereoSample;
use supforge::StereoNet;

use crate::error::{CliError, Result};

pub const DATA_DIR: &str = "data";
pub const NET_DIR: &str = "nets";
pub const SUP_DIR: &str = "sups";
pub const CSV_DIR: &str = "csv";
pub const IMAGE_DIR: &str = "images";
pub const CONFIG_DIR: &str = "config";
pub const MANIFEST_DIR: &str = "manifests";
pub const REPORT_DIR: &str = "report";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Access {
    Read,
    Write,
}

/// One subcommand run inside an experiment directory. Paths are tracked
/// relative to the root so manifests do not depend on where it lives.
pub struct Experiment {
    root: PathBuf,
    label: String,
    files: BTreeMap<(Access, String), String>,
}

impl Experiment {
    /// `label` names this run's config snapshot and manifest.
    pub fn open(root: &Path, label: &str) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Experiment {
            root: root.to_path_buf(),
            label: label.to_string(),
            files: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    }

    pub fn read(&mut self, rel: &str) -> Result<Vec<u8>> {
        let path = self.path(rel);
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        self.files.insert((Access::Read, rel.to_string()), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.files.insert((Access::Write, rel.to_string()), sha256_hex(bytes));
        Ok(())
    }

    /// Records a file written by library code.
    pub fn note_written(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        let rel = self.rel(path);
        self.files.insert((Access::Write, rel), sha256_hex(&bytes));
        Ok(())
    }

    /// Records a file read by library code.
    pub fn note_read(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        let rel = self.rel(path);
        self.files.insert((Access::Read, rel), sha256_hex(&bytes));
        Ok(())
    }

    pub fn hash_of_written(&self, rel: &str) -> Option<&str> {
        self.files.get(&(Access::Write, rel.to_string())).map(String::as_str)
    }

    pub fn load_split(&mut self, split: &str) -> Result<Vec<StereoSample>> {
        let (samples, files) = netpbm::load_split(&self.path(DATA_DIR), split)?;
        for f in files {
            self.note_read(&f)?;
        }
        Ok(samples)
    }

    pub fn net_rel(name: &str) -> String {
        format!("{NET_DIR}/{name}.supf")
    }

    pub fn sup_rel(name: &str) -> String {
        format!("{SUP_DIR}/{name}.supf")
    }

    /// Loads `nets/<name>.supf`; returns the net and its content hash.
    pub fn load_net(&mut self, name: &str) -> Result<(StereoNet, String)> {
        let rel = Self::net_rel(name);
        let bytes = self.read(&rel)?;
        let path = self.path(&rel);
        let net = StereoNet::from_container(&path, &Container::decode(&path, &bytes)?)?;
        Ok((net, sha256_hex(&bytes)))
    }

    pub fn save_net(&mut self, name: &str, net: &StereoNet) -> Result<String> {
        let bytes = net.to_container().encode();
        self.write(&Self::net_rel(name), &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load_sup(&mut self, name: &str) -> Result<(PerturbationPair, BTreeMap<String, String>)> {
        let rel = Self::sup_rel(name);
        let bytes = self.read(&rel)?;
        let path = self.path(&rel);
        let c = Container::decode(&path, &bytes)?;
        Ok((PerturbationPair::from_container(&path, &c)?, c.config))
    }

    pub fn save_sup(&mut self, name: &str, sup: &PerturbationPair, meta: &BTreeMap<String, String>) -> Result<String> {
        let bytes = sup.to_container(meta).encode();
        self.write(&Self::sup_rel(name), &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    /// Writes the config snapshot and the manifest. The manifest lists
    /// every file read or written with its SHA-256, reads first.
    pub fn finish(mut self, snapshot: &str) -> Result<PathBuf> {
        self.write(&format!("{CONFIG_DIR}/{}.cfg", self.label), snapshot.as_bytes())?;
        let mut text = String::from("# access\tpath\tsha256\n");
        for ((access, path), hash) in &self.files {
            let a = match access {
                Access::Read => "read",
                Access::Write => "write",
            };
            text += &format!("{a}\t{path}\t{hash}\n");
        }
        let rel = format!("{MANIFEST_DIR}/{}.tsv", self.label);
        let path = self.path(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
