//! Run configuration: one TOML (or JSON) file describing the curriculum,
//! the search settings and the seeds.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rla_discovery::curriculum::{self, targets, Curriculum, CurriculumStage, FailurePolicy};
use rla_discovery::instance::InstanceSpec;
use rla_discovery::ir::{parse_program, Program};
use rla_discovery::reward::RewardWeights;
use rla_discovery::search::{Mode, SearchConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_method")]
    pub method: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub policy: FailurePolicy,
    /// Worker threads; seeds run in parallel, one per thread.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub overrides: Overrides,
    pub curriculum: CurriculumConfig,
}

fn default_method() -> Mode {
    Mode::McgsUcd
}

/// Settings applied to every stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sketch_rows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample_rows: Option<usize>,
}

/// Either a named built-in curriculum with its sizes, or explicit stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// One of `subsampled-ls-gd`, `landweber-to-gd`, `newton-sketch`, `eigen`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub newton_m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub newton_n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sizes: Option<[usize; 3]>,
    /// Per-stage playout budget of a built-in curriculum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stages: Vec<StageConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub instance: InstanceSpec,
    /// Shipped program names or paths to program files.
    #[serde(default)]
    pub targets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<String>,
    pub budget: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<RewardWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_added: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sketch_rows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample_rows: Option<usize>,
}

impl RunConfig {
    /// Reads a config file; `.json` files are read as JSON, anything else
    /// as TOML. Program paths are resolved against the file's directory and
    /// stored as absolute paths, so the snapshot written next to a run can
    /// be re-read from anywhere.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::parse(&text, path.extension().is_some_and(|e| e == "json"))
            .with_context(|| format!("invalid config {}", path.display()))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&dir);
        Ok(cfg)
    }

    pub fn parse(text: &str, json: bool) -> Result<Self> {
        let cfg: Self = if json {
            serde_json::from_str(text)?
        } else {
            toml::from_str(text)?
        };
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |r: &mut String| {
            if targets::source(r).is_none() {
                let p = dir.join(&*r);
                *r = std::path::absolute(&p).unwrap_or(p).display().to_string();
            }
        };
        for s in &mut self.curriculum.stages {
            s.targets.iter_mut().for_each(fix);
            if let Some(b) = s.base.as_mut() {
                fix(b);
            }
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![0]
        } else {
            self.seeds.clone()
        }
    }

    /// Builds and checks everything a run needs, before any compute.
    pub fn validate(&self) -> Result<Curriculum> {
        let mut search = self.search.clone();
        search.mode = self.method;
        search.validate().map_err(anyhow::Error::msg)?;
        if self.threads == Some(0) {
            bail!("threads must be at least 1");
        }
        let c = self.curriculum.build(&self.overrides)?;
        curriculum::validate_curriculum(&c).map_err(anyhow::Error::msg)?;
        Ok(c)
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            mode: self.method,
            ..self.search.clone()
        }
    }
}

/// Resolves a shipped program name or a program file path.
pub fn load_program(r: &str) -> Result<Program> {
    if let Some(p) = targets::try_get(r) {
        return Ok(p);
    }
    let text = std::fs::read_to_string(r).with_context(|| format!("`{r}` is neither a shipped program nor a readable file"))?;
    parse_program(&text, None).map_err(|e| anyhow::anyhow!("{r}:{}: {}", e.line, e.message))
}

impl CurriculumConfig {
    pub fn build(&self, o: &Overrides) -> Result<Curriculum> {
        let mut c = match (&self.builtin, self.stages.is_empty()) {
            (Some(_), false) => bail!("curriculum: give either `builtin` or `stages`, not both"),
            (None, true) => bail!("curriculum: needs `builtin` or at least one stage"),
            (Some(b), true) => self.builtin(b)?,
            (None, false) => Curriculum {
                name: self.name.clone().unwrap_or_else(|| "custom".into()),
                stages: self
                    .stages
                    .iter()
                    .enumerate()
                    .map(|(i, s)| s.build(i))
                    .collect::<Result<Vec<_>>>()?,
            },
        };
        if let Some(name) = &self.name {
            c.name = name.clone();
        }
        for s in &mut c.stages {
            if let Some(g) = &o.grid {
                s.grid = g.clone();
            }
            if o.iterations.is_some() {
                s.iterations = o.iterations;
            }
            if o.sketch_rows.is_some() {
                s.sketch_rows = o.sketch_rows;
            }
            if o.subsample_rows.is_some() {
                s.subsample_rows = o.subsample_rows;
            }
        }
        Ok(c)
    }

    fn builtin(&self, name: &str) -> Result<Curriculum> {
        let budget = self.budget.unwrap_or(2000);
        let m = self.m.unwrap_or(2000);
        let n = self.n.unwrap_or(20);
        Ok(match name {
            "subsampled-ls-gd" => curriculum::subsampled_ls_gd(m, n, budget),
            "landweber-to-gd" => Curriculum {
                name: name.into(),
                stages: vec![curriculum::landweber_to_gd(m, n, budget)],
            },
            "newton-sketch" => curriculum::newton_sketch(
                self.m.unwrap_or(500),
                self.n.unwrap_or(10),
                self.newton_m.unwrap_or(1000),
                self.newton_n.unwrap_or(20),
                budget,
            ),
            "eigen" => curriculum::eigen(self.sizes.unwrap_or([5, 50, 200]), budget),
            other => bail!("unknown builtin curriculum `{other}`"),
        })
    }
}

impl StageConfig {
    fn build(&self, index: usize) -> Result<CurriculumStage> {
        let ctx = || format!("stage `{}`", self.name);
        let targets = self
            .targets
            .iter()
            .map(|t| load_program(t))
            .collect::<Result<Vec<_>>>()
            .with_context(ctx)?;
        let mut s = CurriculumStage::new(&self.name, self.instance.clone(), targets, self.budget);
        s.weights = self.weights.unwrap_or_else(|| RewardWeights::for_stage(index));
        s.base = self.base.as_deref().map(load_program).transpose().with_context(ctx)?;
        if let Some(k) = self.max_added {
            s.max_added = k;
        }
        if let Some(g) = &self.grid {
            s.grid = g.clone();
        }
        s.iterations = self.iterations;
        s.theta = self.theta;
        s.sketch_rows = self.sketch_rows;
        s.subsample_rows = self.subsample_rows;
        Ok(s)
    }
}
