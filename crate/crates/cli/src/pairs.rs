//! Evaluation pair lists: one scored estimate per line.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

pub const PAIRS_HEADER: &str = "id\testimate\treference\tinput\tsnr\tnoise\tmodel";

#[derive(Debug, Clone, PartialEq)]
pub struct PairEntry {
    pub id: String,
    pub estimate: PathBuf,
    pub reference: PathBuf,
    pub input: Option<PathBuf>,
    pub snr: f64,
    pub noise: String,
    pub model: String,
}

/// Parsed rows plus `(line, reason)` for every row that was skipped.
#[derive(Debug, Default)]
pub struct PairList {
    pub entries: Vec<PairEntry>,
    pub malformed: Vec<(usize, String)>,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn parse_pairs(text: &str, base: &Path) -> PairList {
    let mut out = PairList::default();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') || line == PAIRS_HEADER {
            continue;
        }
        let c: Vec<&str> = line.split('\t').collect();
        if c.len() != 7 {
            out.malformed.push((n + 1, format!("expected 7 columns, found {}", c.len())));
            continue;
        }
        let Ok(snr) = c[4].parse::<f64>() else {
            out.malformed.push((n + 1, format!("bad snr {:?}", c[4])));
            continue;
        };
        if c[0].is_empty() || c[1].is_empty() || c[2].is_empty() {
            out.malformed.push((n + 1, "empty id or path".into()));
            continue;
        }
        out.entries.push(PairEntry {
            id: c[0].to_string(),
            estimate: resolve(base, c[1]),
            reference: resolve(base, c[2]),
            input: (c[3] != "-" && !c[3].is_empty()).then(|| resolve(base, c[3])),
            snr,
            noise: c[5].to_string(),
            model: c[6].to_string(),
        });
    }
    out
}

pub fn read_pairs(path: &Path) -> Result<PairList> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_pairs(&text, path.parent().unwrap_or(Path::new("."))))
}

pub fn write_pairs(path: &Path, entries: &[PairEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut s = format!("{PAIRS_HEADER}\n");
    for e in entries {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            e.id,
            rel(&e.estimate),
            rel(&e.reference),
            e.input.as_deref().map(rel).unwrap_or_else(|| "-".into()),
            e.snr,
            e.noise,
            e.model
        ));
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}
