//! Flat `key=value` run manifests and output-path bookkeeping.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};

pub const MANIFEST_NAME: &str = "manifest.txt";

pub struct Manifest {
    entries: Vec<(String, String)>,
    started: Instant,
}

impl Manifest {
    pub fn new(subcommand: &str, seed: u64, threads: usize) -> Self {
        let mut m = Self {
            entries: Vec::new(),
            started: Instant::now(),
        };
        m.set("subcommand", subcommand);
        m.set("version", env!("CARGO_PKG_VERSION"));
        m.set("seed", seed);
        m.set("threads", threads);
        m
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string().replace('\n', " ");
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn path(&mut self, key: &str, p: &Path) {
        self.set(key, p.display());
    }

    pub fn render(&self) -> String {
        let mut s: String = self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        s.push_str(&format!("duration_s={:.3}\n", self.started.elapsed().as_secs_f64()));
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).with_context(|| format!("writing manifest {}", path.display()))
    }
}

/// Manifest location for a single-file output.
pub fn sidecar(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.txt");
    file.with_file_name(name)
}

fn same_path(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y || x.starts_with(&y) || y.starts_with(&x),
        _ => false,
    }
}

/// Refuses outputs that collide with inputs, and existing outputs unless forced.
pub struct Outputs<'a> {
    pub force: bool,
    pub inputs: Vec<&'a Path>,
}

impl Outputs<'_> {
    fn check_inputs(&self, out: &Path, flag: &str) -> Result<()> {
        if let Some(i) = self.inputs.iter().find(|i| same_path(out, i)) {
            bail!("{flag} {} overlaps input {}", out.display(), i.display());
        }
        Ok(())
    }

    /// Creates an output directory; an existing non-empty one needs `--force`.
    pub fn dir(&self, out: &Path, flag: &str) -> Result<()> {
        self.check_inputs(out, flag)?;
        if out.exists() {
            if !out.is_dir() {
                bail!("{flag} {} exists and is not a directory", out.display());
            }
            let non_empty = std::fs::read_dir(out)
                .with_context(|| format!("reading {}", out.display()))?
                .next()
                .is_some();
            if non_empty && !self.force {
                bail!("{flag} {} is not empty; pass --force to overwrite", out.display());
            }
        }
        std::fs::create_dir_all(out).with_context(|| format!("creating {flag} {}", out.display()))
    }

    /// Checks a single output file; an existing one needs `--force`.
    pub fn file(&self, out: &Path, flag: &str) -> Result<()> {
        self.check_inputs(out, flag)?;
        if out.exists() && !self.force {
            bail!("{flag} {} exists; pass --force to overwrite", out.display());
        }
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(())
    }
}
