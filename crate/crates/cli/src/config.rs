//! Experiment files: one TOML document per experiment.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use cbin_core::data::{gen_gaussian_chain, gen_shhs_surrogate, gen_toy_line, load_csv, load_dermatology, CsvSpec};
use cbin_core::{Architecture, Dataset, InferenceOptions, MetricKind, ModeChoice, Task, TaskSuite, TrainConfig, VariableSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Recorded in checkpoints; `bin` and `cbin` pick the suite row.
    #[serde(default = "default_label")]
    pub label: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factorization: Option<Factorization>,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub suite: SuiteSpec,
    #[serde(default)]
    pub inference: InferenceSpec,
}

fn default_label() -> String {
    "bin".into()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Dermatology {
        path: PathBuf,
        #[serde(default)]
        seed: u64,
    },
    /// Generic comma-separated file; column indices are zero-based.
    Csv {
        path: PathBuf,
        features: Vec<usize>,
        targets: Vec<usize>,
        /// Variable names in target order; `v1..vN` when absent.
        #[serde(default)]
        names: Vec<String>,
        #[serde(default)]
        has_header: bool,
        #[serde(default = "one")]
        target_scale: f64,
        #[serde(default)]
        seed: u64,
    },
    GaussianChain {
        n_vars: usize,
        size: usize,
        #[serde(default)]
        seed: u64,
    },
    ShhsSurrogate {
        size: usize,
        #[serde(default)]
        seed: u64,
    },
    ToyLine {
        #[serde(default = "six")]
        size: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn one() -> f64 {
    1.0
}

fn six() -> usize {
    6
}

impl DatasetSpec {
    pub fn seed_mut(&mut self) -> &mut u64 {
        match self {
            DatasetSpec::Dermatology { seed, .. }
            | DatasetSpec::Csv { seed, .. }
            | DatasetSpec::GaussianChain { seed, .. }
            | DatasetSpec::ShhsSurrogate { seed, .. }
            | DatasetSpec::ToyLine { seed, .. } => seed,
        }
    }

    /// Loads or generates the data. Relative paths are taken from `base`.
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        Ok(match self {
            DatasetSpec::Dermatology { path, seed } => {
                let path = resolve(path);
                load_dermatology(&path, *seed).with_context(|| format!("loading dataset {}", path.display()))?
            }
            DatasetSpec::Csv {
                path,
                features,
                targets,
                names,
                has_header,
                target_scale,
                seed,
            } => {
                let path = resolve(path);
                ensure!(names.is_empty() || names.len() == targets.len(), "dataset.names must name every target column");
                let names: Vec<String> = if names.is_empty() {
                    (1..=targets.len()).map(|i| format!("v{i}")).collect()
                } else {
                    names.clone()
                };
                let spec = CsvSpec {
                    features: features.clone(),
                    targets: targets.clone(),
                    columns: None,
                    has_header: *has_header,
                    target_scale: *target_scale,
                };
                load_csv(&path, &spec, cbin_core::model::chain_factorization(&names), *seed)
                    .with_context(|| format!("loading dataset {}", path.display()))?
            }
            DatasetSpec::GaussianChain { n_vars, size, seed } => gen_gaussian_chain(*n_vars, *size, *seed).0,
            DatasetSpec::ShhsSurrogate { size, seed } => gen_shhs_surrogate(*size, *seed),
            DatasetSpec::ToyLine { size, seed } => gen_toy_line(*size, *seed),
        })
    }
}

/// Variable order and parent sets, by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Factorization {
    pub variables: Vec<FactorSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    pub name: String,
    #[serde(default)]
    pub parents: Vec<String>,
}

impl Factorization {
    /// Reorders the variable columns of `data` and replaces its parent sets.
    pub fn apply(&self, mut data: Dataset) -> Result<Dataset> {
        ensure!(
            self.variables.len() == data.num_vars(),
            "factorization lists {} variables but the dataset has {}",
            self.variables.len(),
            data.num_vars()
        );
        let find = |name: &str| {
            data.variables
                .iter()
                .position(|v| v.name == name)
                .with_context(|| format!("unknown variable `{name}` in factorization"))
        };
        let order = self.variables.iter().map(|f| find(&f.name)).collect::<Result<Vec<_>>>()?;
        let mut specs = Vec::with_capacity(order.len());
        for (n, f) in self.variables.iter().enumerate() {
            let parents = f
                .parents
                .iter()
                .map(|p| {
                    let i = self.variables.iter().position(|g| &g.name == p).with_context(|| format!("unknown parent `{p}` of `{}`", f.name))?;
                    ensure!(i < n, "parent `{p}` of `{}` does not precede it", f.name);
                    Ok(i)
                })
                .collect::<Result<Vec<_>>>()?;
            specs.push(VariableSpec::new(f.name.clone(), parents).with_kind(data.variables[order[n]].kind));
        }
        for row in &mut data.v {
            *row = order.iter().map(|&i| row[i]).collect();
        }
        data.variables = specs;
        Ok(data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    /// `shhs`, `dermatology` or `all_subsets`; ignored when `tasks` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
    /// Row labels: PO, RI, BIN, CBIN, Retrain.
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            preset: None,
            tasks: Vec::new(),
            methods: default_methods(),
        }
    }
}

fn default_methods() -> Vec<String> {
    ["PO", "RI", "BIN", "CBIN"].map(String::from).to_vec()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// Target variable names.
    pub targets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricKind>,
}

impl SuiteSpec {
    pub fn resolve(&self, variables: &[VariableSpec]) -> Result<TaskSuite> {
        let suite = if !self.tasks.is_empty() {
            TaskSuite {
                tasks: self.tasks.iter().map(|t| task_from_names(&t.targets, t.metric, variables)).collect::<Result<_>>()?,
            }
        } else {
            match self.preset.as_deref() {
                Some("shhs") => TaskSuite::shhs(),
                Some("dermatology") => TaskSuite::dermatology(),
                Some("all_subsets") | None => TaskSuite::all_subsets(variables.len(), MetricKind::for_variables(variables)),
                Some(other) => bail!("unknown suite preset `{other}`"),
            }
        };
        suite.validate(variables.len())?;
        Ok(suite)
    }
}

/// A task over the named targets; the metric defaults by variable kind.
pub fn task_from_names<S: AsRef<str>>(names: &[S], metric: Option<MetricKind>, variables: &[VariableSpec]) -> Result<Task> {
    let targets = names
        .iter()
        .map(|n| {
            let n = n.as_ref().trim();
            variables.iter().position(|v| v.name == n).with_context(|| {
                let known: Vec<&str> = variables.iter().map(|v| v.name.as_str()).collect();
                format!("unknown variable `{n}` (known: {})", known.join(", "))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let chosen: Vec<VariableSpec> = targets.iter().map(|&t| variables[t].clone()).collect();
    let task = Task::new(targets, metric.unwrap_or_else(|| MetricKind::for_variables(&chosen)));
    task.validate(variables.len())?;
    Ok(task)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSpec {
    #[serde(default)]
    pub mode: ModeChoice,
    /// Rows queried by `infer` and `suite`.
    #[serde(default)]
    pub split: SplitName,
    #[serde(default)]
    pub options: InferenceOptions,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing experiment config")?;
        cfg.train.validate().context("invalid [train] section")?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Dataset with the configured factorization applied.
    pub fn dataset(&self, base: &Path) -> Result<Dataset> {
        let data = self.dataset.load(base)?;
        match &self.factorization {
            Some(f) => f.apply(data),
            None => Ok(data),
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [dataset]
        kind = "gaussian_chain"
        n_vars = 3
        size = 50
    "#;

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.label, "bin");
        assert_eq!(cfg.architecture, Architecture::default());
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.inference.mode, ModeChoice::Auto);
        assert_eq!(cfg.inference.options, InferenceOptions::default());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}\n[train]\nlamda_c = 1.0\n")).is_err());
        assert!(ExperimentConfig::from_toml("label = 'x'\n[dataset]\nkind = 'mnist'\n").is_err());
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}\n[inference]\nmax_iter = 3\n")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}\n[inference.options]\nmax_iter = 3\n")).is_err());
        let cfg = ExperimentConfig::from_toml(&format!("{MINIMAL}\n[inference.options]\nmax_iters = 3\ninit = {{ random = {{ seed = 4 }} }}\n")).unwrap();
        assert_eq!(cfg.inference.options.max_iters, 3);
    }

    #[test]
    fn factorization_reorders_columns() {
        let cfg = ExperimentConfig::from_toml(&format!(
            "{MINIMAL}\n[[factorization.variables]]\nname = 'v3'\n[[factorization.variables]]\nname = 'v1'\nparents = ['v3']\n[[factorization.variables]]\nname = 'v2'\nparents = ['v1']\n"
        ))
        .unwrap();
        let raw = cfg.dataset.load(Path::new(".")).unwrap();
        let data = cfg.dataset(Path::new(".")).unwrap();
        assert_eq!(data.variables[1].parents, vec![0]);
        assert_eq!(data.v[7], vec![raw.v[7][2], raw.v[7][0], raw.v[7][1]]);
    }

    #[test]
    fn parents_must_precede() {
        let f = Factorization {
            variables: vec![
                FactorSpec {
                    name: "v1".into(),
                    parents: vec!["v2".into()],
                },
                FactorSpec {
                    name: "v2".into(),
                    parents: vec![],
                },
            ],
        };
        let data = gen_gaussian_chain(2, 10, 0).0;
        assert!(f.apply(data).is_err());
    }

    #[test]
    fn task_names_resolve() {
        let vars = cbin_core::model::chain_factorization(&["a", "b", "c"]);
        assert_eq!(task_from_names(&["c", "a"], None, &vars).unwrap().targets, vec![2, 0]);
        assert!(task_from_names(&["d"], None, &vars).is_err());
    }
}
