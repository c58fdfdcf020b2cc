//! Tab-separated dataset manifests.
//!
//! One line per pair:
//! `index  clean  degraded  kind  density  angle  particle_radius  intensity  seed`.
//! Paths are relative to the manifest's directory. Lines starting with `#`
//! are comments.

use std::path::{Path, PathBuf};

use famamba_core::datasynth::{DegradeSpec, Pair};
use famamba_core::Real;

use crate::image_io::load_rgb;
use crate::{CliError, CliResult};

pub const HEADER: &str = "# index\tclean\tdegraded\tkind\tdensity\tangle\tparticle_radius\tintensity\tseed";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub index: usize,
    pub clean: PathBuf,
    pub degraded: PathBuf,
    pub spec: DegradeSpec,
}

impl Entry {
    pub fn to_line(&self) -> String {
        let s = &self.spec;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.index,
            self.clean.display(),
            self.degraded.display(),
            s.kind.as_str(),
            s.density,
            s.angle,
            s.particle_radius,
            s.intensity,
            s.seed
        )
    }
}

pub fn render(entries: &[Entry]) -> String {
    let mut s = format!("{HEADER}\n");
    for e in entries {
        s.push_str(&e.to_line());
        s.push('\n');
    }
    s
}

pub fn parse(text: &str) -> CliResult<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| CliError::Usage(format!("manifest line {}: {what}", i + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(bad(&format!("expected 9 tab-separated fields, found {}", f.len())));
        }
        let num = |k: usize| f[k].trim().parse::<f64>().map_err(|_| bad(&format!("field {} is not a number", k + 1)));
        let spec = DegradeSpec {
            kind: f[3].trim().parse().map_err(|_| bad("unknown kind"))?,
            density: num(4)?,
            angle: num(5)?,
            particle_radius: num(6)?,
            intensity: num(7)?,
            seed: f[8].trim().parse().map_err(|_| bad("seed is not an integer"))?,
        };
        out.push(Entry {
            index: f[0].trim().parse().map_err(|_| bad("index is not an integer"))?,
            clean: PathBuf::from(f[1]),
            degraded: PathBuf::from(f[2]),
            spec,
        });
    }
    Ok(out)
}

pub fn read(path: &Path) -> CliResult<Vec<Entry>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse(&text)
}

/// Loads every image pair listed in the manifest at `path`.
pub fn load_pairs<T: Real>(path: &Path) -> CliResult<Vec<Pair<T>>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read(path)?
        .into_iter()
        .map(|e| {
            let clean = load_rgb(&base.join(&e.clean))?;
            let degraded = load_rgb(&base.join(&e.degraded))?;
            if clean.shape() != degraded.shape() {
                return Err(CliError::Usage(format!("pair {}: clean and degraded sizes differ", e.index)));
            }
            Ok(Pair {
                clean,
                degraded,
                spec: e.spec,
                clean_seed: 0,
            })
        })
        .collect()
}
