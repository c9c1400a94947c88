//! Machine check of `docs/trace.json`, the map from method concepts to the
//! code that implements them and the tests that cover it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
pub struct TraceEntry {
    pub concept: String,
    /// `module::item` inside the core crate.
    pub operation: String,
    /// `path/to/file.rs::test_fn`, relative to the workspace root.
    pub tests: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct TraceMap {
    pub entries: Vec<TraceEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct TraceReport {
    pub entries: usize,
    pub dangling: Vec<String>,
}

impl TraceReport {
    pub fn ok(&self) -> bool {
        self.entries > 0 && self.dangling.is_empty()
    }
}

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn default_path() -> PathBuf {
    workspace_root().join("docs/trace.json")
}

/// True when `src` declares `fn name` directly under a `#[test]` attribute.
fn has_test(src: &str, name: &str) -> bool {
    let lines: Vec<&str> = src.lines().collect();
    lines.iter().enumerate().any(|(i, line)| {
        let decl = line.trim_start();
        (decl.starts_with(&format!("fn {name}(")) || decl.starts_with(&format!("pub fn {name}(")))
            && lines[..i]
                .iter()
                .rev()
                .map(|l| l.trim())
                .take_while(|l| l.starts_with("#[") || l.starts_with("//"))
                .any(|l| l == "#[test]")
    })
}

fn declares(src: &str, item: &str) -> bool {
    ["fn ", "struct ", "enum ", "const "].iter().any(|kw| {
        src.match_indices(&format!("pub {kw}{item}")).any(|(i, m)| {
            src[i + m.len()..].chars().next().is_some_and(|c| !c.is_alphanumeric() && c != '_')
        })
    })
}

/// Validates every entry of the map at `path` against the sources under
/// `root`.
pub fn check_map(path: &Path, root: &Path) -> anyhow::Result<TraceReport> {
    let map: TraceMap = serde_json::from_str(&fs::read_to_string(path)?)?;
    let mut cache: BTreeMap<PathBuf, Option<String>> = BTreeMap::new();
    let mut read = |p: PathBuf| cache.entry(p.clone()).or_insert_with(|| fs::read_to_string(&p).ok()).clone();
    let mut dangling = Vec::new();
    for e in &map.entries {
        if e.tests.is_empty() {
            dangling.push(format!("{}: no tests listed", e.concept));
        }
        match e.operation.split_once("::") {
            Some((module, item)) => {
                let file = root.join("crates/core/src").join(format!("{module}.rs"));
                if !read(file).is_some_and(|src| declares(&src, item.rsplit("::").last().unwrap_or(item))) {
                    dangling.push(format!("{}: operation {} not found", e.concept, e.operation));
                }
            }
            None => dangling.push(format!("{}: malformed operation {}", e.concept, e.operation)),
        }
        for t in &e.tests {
            let found = t.rsplit_once("::").is_some_and(|(file, name)| read(root.join(file)).is_some_and(|src| has_test(&src, name)));
            if !found {
                dangling.push(format!("{}: test {t} not found", e.concept));
            }
        }
    }
    Ok(TraceReport { entries: map.entries.len(), dangling })
}

pub fn check() -> anyhow::Result<TraceReport> {
    check_map(&default_path(), &workspace_root())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_detection_needs_the_attribute() {
        let src = "#[test]\nfn covered() {}\n\nfn helper() {}\n";
        assert!(has_test(src, "covered"));
        assert!(!has_test(src, "helper"));
        assert!(!has_test(src, "cover"));
    }

    #[test]
    fn declarations_match_whole_names() {
        let src = "pub fn dual_softmax_inner() {}\npub struct MixerBlock {}\n";
        assert!(declares(src, "MixerBlock"));
        assert!(!declares(src, "dual_softmax"));
    }
}
