//! Run configuration: one JSON file plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cvopt_core::alloc::ZeroMeanPolicy;
use cvopt_core::dataset::{union_attrs, ColumnSchema, Schema};
use cvopt_core::query::{MissingPolicy, Query};
use cvopt_core::workload::WeightTransform;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    CvoptL2,
    CvoptLinf,
    CvoptIndividual,
    Uniform,
    Senate,
    Congress,
}

impl MethodName {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::CvoptL2 => "cvopt-l2",
            MethodName::CvoptLinf => "cvopt-linf",
            MethodName::CvoptIndividual => "cvopt-individual",
            MethodName::Uniform => "uniform",
            MethodName::Senate => "senate",
            MethodName::Congress => "congress",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub schema: Vec<ColumnSchema>,
    #[serde(default)]
    pub group_by: Vec<String>,
    pub aggregates: Vec<String>,
    /// Several group-by clauses over the same aggregates.
    #[serde(default)]
    pub grouping_sets: Vec<Vec<String>>,
    /// Use every subset of `group_by` as a grouping set.
    #[serde(default)]
    pub cube: bool,
    #[serde(default = "default_method")]
    pub method: MethodName,
    pub budget: Option<u64>,
    pub rate: Option<f64>,
    #[serde(default)]
    pub queries: Vec<Query>,
    pub workload: Option<PathBuf>,
    #[serde(default)]
    pub workload_transform: WeightTransform,
    pub weights: Option<PathBuf>,
    pub seed: Option<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub zero_mean: ZeroMeanPolicy,
    #[serde(default = "default_missing")]
    pub missing: MissingPolicy,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Methods run by `compare`.
    #[serde(default)]
    pub compare_methods: Vec<MethodName>,
    #[serde(default = "default_runs")]
    pub compare_runs: u64,
    pub stats_path: Option<PathBuf>,
    pub plan_path: Option<PathBuf>,
    pub sample_path: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_method() -> MethodName {
    MethodName::CvoptL2
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_missing() -> MissingPolicy {
    MissingPolicy::default()
}

fn default_batch() -> usize {
    1000
}

fn default_runs() -> u64 {
    20
}

/// Flag values that replace config fields when given.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct Overrides {
    /// Input CSV file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodName>,
    /// Sample size M.
    #[arg(long, conflicts_with = "rate")]
    pub budget: Option<u64>,
    /// Sample size as a fraction of the table, in (0, 1].
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Statistics catalog to read instead of `<output_dir>/stats.json`.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Plan to read instead of `<output_dir>/plan.json`.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Sample to read instead of `<output_dir>/sample.txt`.
    #[arg(long)]
    pub sample: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path, ov: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.apply(ov);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, ov: &Overrides) {
        // Paths given on the command line are relative to the working
        // directory, not the config file.
        let cwd = |p: &PathBuf| {
            std::env::current_dir()
                .map(|d| d.join(p))
                .unwrap_or(p.clone())
        };
        if let Some(d) = &ov.data {
            self.data = Some(cwd(d));
        }
        if let Some(m) = ov.method {
            self.method = m;
        }
        if let Some(b) = ov.budget {
            self.budget = Some(b);
            self.rate = None;
        }
        if let Some(r) = ov.rate {
            self.rate = Some(r);
            self.budget = None;
        }
        if let Some(s) = ov.seed {
            self.seed = Some(s);
        }
        if let Some(o) = &ov.output_dir {
            self.output_dir = cwd(o);
        }
        if let Some(b) = ov.batch_size {
            self.batch_size = b;
        }
        if let Some(p) = &ov.stats {
            self.stats_path = Some(cwd(p));
        }
        if let Some(p) = &ov.plan {
            self.plan_path = Some(cwd(p));
        }
        if let Some(p) = &ov.sample {
            self.sample_path = Some(cwd(p));
        }
    }

    pub fn validate(&self) -> Result<()> {
        Schema::new(self.schema.clone()).context("invalid schema")?;
        if self.aggregates.is_empty() {
            bail!("config needs at least one aggregate column");
        }
        match (self.budget, self.rate) {
            (Some(_), Some(_)) => bail!("give either budget or rate, not both"),
            (Some(0), None) => bail!("budget must be at least 1"),
            (None, Some(r)) if !(r > 0.0 && r <= 1.0) => bail!("rate {r} is outside (0, 1]"),
            _ => {}
        }
        if self.batch_size == 0 {
            bail!("batch_size must be at least 1");
        }
        if self.cube && self.group_by.is_empty() {
            bail!("cube needs group_by attributes");
        }
        if self.compare_runs == 0 {
            bail!("compare_runs must be at least 1");
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        Schema::new(self.schema.clone()).expect("validated")
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn out_file(&self, name: &str) -> PathBuf {
        self.out_dir().join(name)
    }

    pub fn data_path(&self) -> Result<PathBuf> {
        match &self.data {
            Some(p) => Ok(self.resolve(p)),
            None => bail!("no data file given (config `data` or --data)"),
        }
    }

    pub fn workload_path(&self) -> Option<PathBuf> {
        self.workload.as_ref().map(|p| self.resolve(p))
    }

    pub fn weights_path(&self) -> Option<PathBuf> {
        self.weights.as_ref().map(|p| self.resolve(p))
    }

    pub fn stats_file(&self) -> PathBuf {
        self.stats_path
            .as_ref()
            .map_or_else(|| self.out_file("stats.json"), |p| self.resolve(p))
    }

    pub fn plan_file(&self) -> PathBuf {
        self.plan_path
            .as_ref()
            .map_or_else(|| self.out_file("plan.json"), |p| self.resolve(p))
    }

    pub fn sample_file(&self) -> PathBuf {
        self.sample_path
            .as_ref()
            .map_or_else(|| self.out_file("sample.txt"), |p| self.resolve(p))
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .context("this command draws random numbers and needs a seed (config `seed` or --seed)")
    }

    /// Grouping sets of a multi-grouping run, if any.
    pub fn grouping_sets(&self) -> Vec<Vec<String>> {
        if self.cube {
            cvopt_core::alloc::cube_queries(&self.group_by, &self.aggregates)
                .into_iter()
                .map(|q| q.attrs)
                .collect()
        } else {
            self.grouping_sets.clone()
        }
    }

    /// Attributes of the finest stratification.
    pub fn strat_attrs(&self, workload_attrs: &[Vec<String>]) -> Vec<String> {
        let sets = self.grouping_sets();
        let mut all: Vec<&[String]> = vec![self.group_by.as_slice()];
        all.extend(sets.iter().map(Vec::as_slice));
        all.extend(workload_attrs.iter().map(Vec::as_slice));
        union_attrs(all)
    }
}

/// `M = ⌊rate · N⌋`, at least 1. Returns a warning when `M` is below the
/// number of strata.
pub fn budget_from_rate(rate: f64, population: u64, strata: usize) -> (u64, Option<String>) {
    let m = ((rate * population as f64).floor() as u64).max(1);
    let warn = (m < strata as u64).then(|| {
        format!("budget {m} from rate {rate} is below the {strata} strata; some get no rows")
    });
    (m, warn)
}
