use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub const DATASET_MANIFEST: &str = "manifest.json";
pub const ORACLE_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "gap.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const AUDIT_FILE: &str = "audit.csv";
pub const SEARCH_FILE: &str = "search.json";
pub const EVAL_FILE: &str = "eval.csv";
pub const SUMMARY_FILE: &str = "summary.md";

pub const SPLITS: [objprune::scenesim::Split; 3] = [
    objprune::scenesim::Split::Train,
    objprune::scenesim::Split::Val,
    objprune::scenesim::Split::Test,
];

pub fn split_name(split: objprune::scenesim::Split) -> &'static str {
    match split {
        objprune::scenesim::Split::Train => "train",
        objprune::scenesim::Split::Val => "val",
        objprune::scenesim::Split::Test => "test",
    }
}

fn digest(parent: &str, stage: &str, sections: &[serde_json::Value]) -> String {
    let mut h = Sha256::new();
    h.update(parent.as_bytes());
    h.update([0]);
    h.update(stage.as_bytes());
    for s in sections {
        h.update([0]);
        h.update(serde_json::to_vec(s).expect("config sections serialize"));
    }
    format!("{:x}", h.finalize())
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config sections serialize")
}

/// Per-stage hashes; each folds in its parent so a change upstream
/// invalidates every downstream artifact. Paths never enter a hash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageHashes {
    pub gen: String,
    pub extract: String,
    pub train: String,
    pub search: String,
    pub eval: String,
}

impl StageHashes {
    pub fn of(cfg: &RunConfig) -> Self {
        let gen = digest(
            "",
            "gen",
            &[json(&cfg.scene), json(&cfg.data), json(&cfg.seeds.data)],
        );
        let extract = digest(&gen, "extract", &[json(&cfg.teacher)]);
        let train = digest(&extract, "train", &[json(&cfg.gap)]);
        let search = digest(
            &train,
            "search",
            &[json(&cfg.search), json(&cfg.dims), json(&cfg.eval)],
        );
        let eval = digest(&search, "eval", &[json(&cfg.seeds.eval)]);
        Self {
            gen,
            extract,
            train,
            search,
            eval,
        }
    }
}

/// Common manifest head; stage-specific fields ride along in `details`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    #[serde(flatten)]
    pub details: serde_json::Map<String, serde_json::Value>,
}

pub fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(io_err(format!("writing {}", path.display())))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingArtifact(path.to_path_buf())
        } else {
            CliError::Io {
                context: format!("reading {}", path.display()),
                source: e,
            }
        }
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(objprune::Error::from)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| {
        objprune::Error::SchemaMismatch(format!("{}: {e}", path.display())).into()
    })
}

/// One hash-stamped JSON record per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    #[serde(flatten)]
    pub record: T,
}

pub fn write_jsonl<T: Serialize>(path: &Path, hash: &str, records: &[T]) -> Result<(), CliError> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(
            &mut out,
            &Stamped {
                config_hash: hash.to_string(),
                record: r,
            },
        )
        .map_err(objprune::Error::from)?;
        out.push(b'\n');
    }
    write_file(path, &out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, hash: &str) -> Result<Vec<T>, CliError> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| objprune::Error::SchemaMismatch(format!("{} is not UTF-8", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: Stamped<T> = serde_json::from_str(line).map_err(|e| {
            objprune::Error::SchemaMismatch(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        if rec.config_hash != hash {
            return Err(CliError::HashMismatch {
                path: path.to_path_buf(),
                found: rec.config_hash,
                expected: hash.to_string(),
            });
        }
        out.push(rec.record);
    }
    Ok(out)
}

/// CSV with a leading `# config_hash: ...` comment line.
pub fn write_csv(path: &Path, hash: &str, body: &str) -> Result<(), CliError> {
    write_file(path, format!("# config_hash: {hash}\n{body}").as_bytes())
}

/// Returns the CSV body after checking its hash comment.
pub fn read_csv(path: &Path, hash: &str) -> Result<String, CliError> {
    let text = String::from_utf8(read_file(path)?)
        .map_err(|_| objprune::Error::SchemaMismatch(format!("{} is not UTF-8", path.display())))?;
    let (head, body) = text.split_once('\n').unwrap_or((&text, ""));
    let found = head.strip_prefix("# config_hash: ").ok_or_else(|| {
        objprune::Error::SchemaMismatch(format!("{} lacks a config hash line", path.display()))
    })?;
    check_hash(path, found, hash)?;
    Ok(body.to_string())
}

pub fn check_hash(path: &Path, found: &str, expected: &str) -> Result<(), CliError> {
    if found != expected {
        return Err(CliError::HashMismatch {
            path: path.to_path_buf(),
            found: found.to_string(),
            expected: expected.to_string(),
        });
    }
    Ok(())
}

/// Loads a manifest and insists on `stage` and `expected` hash.
pub fn read_manifest(path: &Path, stage: &str, expected: &str) -> Result<Manifest, CliError> {
    let m: Manifest = read_json(path)?;
    if m.stage != stage {
        return Err(objprune::Error::SchemaMismatch(format!(
            "{} is a `{}` manifest, expected `{stage}`",
            path.display(),
            m.stage
        ))
        .into());
    }
    check_hash(path, &m.config_hash, expected)?;
    Ok(m)
}

pub fn join(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_chain() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.gap.epochs += 1;
        let (ha, hb) = (StageHashes::of(&a), StageHashes::of(&b));
        assert_eq!(ha.gen, hb.gen);
        assert_eq!(ha.extract, hb.extract);
        assert_ne!(ha.train, hb.train);
        assert_ne!(ha.search, hb.search);
        assert_ne!(ha.eval, hb.eval);
    }

    #[test]
    fn paths_do_not_enter_hashes() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths.reports = "elsewhere".into();
        assert_eq!(StageHashes::of(&a), StageHashes::of(&b));
    }

    #[test]
    fn jsonl_rejects_foreign_hash() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        write_jsonl(&p, "aaa", &[serde_json::json!({"v": 1.5})]).unwrap();
        let back: Vec<serde_json::Value> = read_jsonl(&p, "aaa").unwrap();
        assert_eq!(back[0]["v"], 1.5);
        assert!(matches!(
            read_jsonl::<serde_json::Value>(&p, "bbb"),
            Err(CliError::HashMismatch { .. })
        ));
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let e = read_file(&dir.path().join("nope")).unwrap_err();
        assert_eq!(e.exit_code(), 3);
    }
}
