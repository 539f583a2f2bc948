use std::path::{Path, PathBuf};

use objprune::gapnet::GapConfig;
use objprune::scenesim::{SceneConfig, TeacherConfig};
use objprune::search::SearchConfig;
use objprune::ModelDims;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variables that may replace output directories.
pub const PATH_ENV: [(&str, PathField); 4] = [
    ("OBJPRUNE_DATASET_DIR", PathField::Dataset),
    ("OBJPRUNE_ORACLE_DIR", PathField::Oracles),
    ("OBJPRUNE_CHECKPOINT_DIR", PathField::Checkpoints),
    ("OBJPRUNE_REPORT_DIR", PathField::Reports),
];

#[derive(Debug, Clone, Copy)]
pub enum PathField {
    Dataset,
    Oracles,
    Checkpoints,
    Reports,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub oracles: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "run/dataset".into(),
            oracles: "run/oracles".into(),
            checkpoints: "run/checkpoints".into(),
            reports: "run/reports".into(),
        }
    }
}

impl Paths {
    fn field_mut(&mut self, f: PathField) -> &mut PathBuf {
        match f {
            PathField::Dataset => &mut self.dataset,
            PathField::Oracles => &mut self.oracles,
            PathField::Checkpoints => &mut self.checkpoints,
            PathField::Reports => &mut self.reports,
        }
    }

    /// Joins relative paths onto `base`.
    pub fn resolve(&mut self, base: &Path) {
        for p in [&mut self.dataset, &mut self.oracles, &mut self.checkpoints, &mut self.reports] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Scene generation.
    pub data: u64,
    /// Random-pruning arm of the evaluation.
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { data: 7, eval: 11 }
    }
}

/// Samples per split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: 2000,
            val: 200,
            test: 200,
        }
    }
}

/// One fixed-ratio operating point; its FLOPs on the validation split set
/// the budget for the adaptive arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetPoint {
    pub drop_layer: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub points: Vec<BudgetPoint>,
    pub top_k: usize,
    pub min_retain: usize,
    pub monotone_depth: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            points: vec![
                BudgetPoint {
                    drop_layer: 16,
                    ratio: 0.70,
                },
                BudgetPoint {
                    drop_layer: 6,
                    ratio: 0.80,
                },
                BudgetPoint {
                    drop_layer: 2,
                    ratio: 0.95,
                },
            ],
            top_k: 10,
            min_retain: 1,
            monotone_depth: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub seeds: Seeds,
    pub data: DataConfig,
    pub scene: SceneConfig,
    pub teacher: TeacherConfig,
    pub gap: GapConfig,
    pub search: SearchConfig,
    pub dims: ModelDims,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            seeds: Seeds::default(),
            data: DataConfig::default(),
            scene: SceneConfig::default(),
            teacher: TeacherConfig::default(),
            gap: GapConfig {
                batch_size: 16,
                lr: 2e-3,
                lambda: 0.1,
                epochs: 30,
                rotate_augment: true,
                ..GapConfig::default()
            },
            search: SearchConfig::default(),
            dims: ModelDims::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads an optional TOML file, then applies path variables from `env`
    /// and `section.key=value` overrides, in that order.
    pub fn load(
        file: Option<&Path>,
        overrides: &[String],
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, CliError> {
        let mut doc = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for (var, field) in PATH_ENV {
            if let Some(value) = env(var) {
                let key = match field {
                    PathField::Dataset => "paths.dataset",
                    PathField::Oracles => "paths.oracles",
                    PathField::Checkpoints => "paths.checkpoints",
                    PathField::Reports => "paths.reports",
                };
                set_leaf(&mut doc, key, toml::Value::String(value))?;
            }
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{item}` is not key=value")))?;
            set_leaf(&mut doc, key.trim(), parse_value(raw.trim()))?;
        }
        let mut cfg: RunConfig = RunConfig::deserialize(toml::Value::Table(defaults_merged(doc)?))
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(dir) = file.and_then(Path::parent) {
            cfg.paths.resolve(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let core = |e: objprune::Error| CliError::Config(e.to_string());
        self.scene.validate().map_err(core)?;
        self.teacher.validate().map_err(core)?;
        self.gap.validate().map_err(core)?;
        self.search.validate().map_err(core)?;
        self.dims.validate().map_err(core)?;
        let p = &self.paths;
        let all = [&p.dataset, &p.oracles, &p.checkpoints, &p.reports];
        for (i, a) in all.iter().enumerate() {
            if all[i + 1..].contains(a) {
                return Err(CliError::Config(format!("path {} is used twice", a.display())));
            }
        }
        if self.scene.id_dim != self.gap.hidden_dim
            || self.scene.sem3d_dim != self.gap.sem3d_dim
            || self.scene.sem2d_dim != self.gap.sem2d_dim
        {
            return Err(CliError::Config(
                "scene embedding dims must match gap hidden_dim / sem3d_dim / sem2d_dim".into(),
            ));
        }
        for pt in &self.eval.points {
            if pt.drop_layer > self.dims.depth || !(0.0..=1.0).contains(&pt.ratio) {
                return Err(CliError::Config(format!(
                    "budget point drop_layer {} ratio {} outside depth {}",
                    pt.drop_layer, pt.ratio, self.dims.depth
                )));
            }
        }
        if self.eval.top_k == 0 {
            return Err(CliError::Config("eval.top_k must be positive".into()));
        }
        Ok(())
    }

    pub fn set_path(&mut self, field: PathField, value: PathBuf) {
        *self.paths.field_mut(field) = value;
    }
}

/// Overlays `doc` onto the serialized defaults so partially specified
/// sections keep the run defaults rather than per-type defaults.
fn defaults_merged(doc: toml::Table) -> Result<toml::Table, CliError> {
    let mut base = toml::Table::try_from(RunConfig::default())
        .map_err(|e| CliError::Config(e.to_string()))?;
    merge(&mut base, doc);
    Ok(base)
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            // a budget is a one-key variant table; replace it whole
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if k != "budget" => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_leaf(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let (leaf, sections) = parts.split_last().expect("non-empty key");
    let mut table = doc;
    for s in sections {
        let entry = table
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{s}` in `{key}` is not a section")))?;
    }
    if matches!(table.get(*leaf), Some(toml::Value::Table(_))) {
        return Err(CliError::Config(format!("`{key}` is a section, not a value")));
    }
    table.insert(leaf.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        assert_eq!(RunConfig::load(None, &[], no_env).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_replace_leaves() {
        let cfg = RunConfig::load(
            None,
            &["gap.epochs=3".into(), "seeds.data=42".into(), "search.budget.fraction=0.5".into()],
            no_env,
        )
        .unwrap();
        assert_eq!(cfg.gap.epochs, 3);
        assert_eq!(cfg.seeds.data, 42);
        assert_eq!(cfg.search.budget, objprune::Budget::Fraction(0.5));
        assert_eq!(cfg.gap.lr, RunConfig::default().gap.lr);
    }

    #[test]
    fn section_override_is_rejected() {
        assert!(matches!(
            RunConfig::load(None, &["gap=3".into()], no_env),
            Err(CliError::Config(_))
        ));
        assert!(RunConfig::load(None, &["nokey".into()], no_env).is_err());
        assert!(RunConfig::load(None, &["gap.unknown=1".into()], no_env).is_err());
    }

    #[test]
    fn env_sets_paths_only() {
        let env = |k: &str| (k == "OBJPRUNE_REPORT_DIR").then(|| "/tmp/r".to_string());
        let cfg = RunConfig::load(None, &[], env).unwrap();
        assert_eq!(cfg.paths.reports, PathBuf::from("/tmp/r"));
    }

    #[test]
    fn duplicate_paths_are_rejected() {
        let r = RunConfig::load(
            None,
            &["paths.dataset=\"x\"".into(), "paths.oracles=\"x\"".into()],
            no_env,
        );
        assert!(matches!(r, Err(CliError::Config(_))));
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        assert!(RunConfig::load(None, &["gap.hidden_dim=32".into()], no_env).is_err());
    }
}
