//! Run configuration: one TOML document with sections per pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cbi::LinkPolicy;
use crate::domain::{CellQuery, Condition, SampleSet, TierLabel};
use crate::error::{Error, Result};
use crate::hb::{HbConfig, McmcConfig};
use crate::ingest::DataConfig;
use crate::report::{config_hash, InferenceOptions};
use crate::sim::{McConfig, SyntheticPopulationSpec};

/// One cell per domain or per attribute level, sharing a summed variable and
/// extra filter conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSet {
    /// Cell names are `<name>:<level>`; also the default group.
    pub name: String,
    pub variable: String,
    /// `domain` or an attribute name.
    pub by: String,
    #[serde(default)]
    pub filter: Vec<Condition>,
    #[serde(default)]
    pub group: Option<String>,
    #[serde(default)]
    pub tier: Option<TierLabel>,
    #[serde(default)]
    pub link: Option<String>,
    /// Levels to leave out.
    #[serde(default = "default_exclude")]
    pub exclude: Vec<String>,
}

fn default_exclude() -> Vec<String> {
    vec!["none".into()]
}

impl CellSet {
    pub fn expand(&self, sample: &SampleSet) -> Result<Vec<CellQuery>> {
        let (levels, make): (Vec<String>, Box<dyn Fn(&str) -> Condition>) = if self.by == "domain" {
            (
                sample.domains().iter().map(|d| d.id.clone()).collect(),
                Box::new(Condition::domain),
            )
        } else {
            let schema = sample.schema();
            let a = schema
                .attribute_index(&self.by)
                .ok_or_else(|| Error::UnknownAttribute(self.by.clone()))?;
            let by = self.by.clone();
            (
                schema.attributes[a].levels.clone(),
                Box::new(move |l: &str| Condition::attribute(&by, &[l])),
            )
        };
        Ok(levels
            .iter()
            .filter(|l| !self.exclude.contains(l))
            .map(|l| {
                let mut filter = vec![make(l)];
                filter.extend(self.filter.iter().cloned());
                CellQuery {
                    name: format!("{}:{l}", self.name),
                    summed_variable: self.variable.clone(),
                    filter,
                    group: Some(self.group.clone().unwrap_or_else(|| self.name.clone())),
                    tier_override: self.tier,
                    link_override: self.link.clone(),
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputOptions {
    /// Write one JSON document per replication under `replications/`.
    #[serde(default)]
    pub replications: bool,
    /// Write the population and the first replication's sample as CSV.
    #[serde(default)]
    pub export_sample: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Posterior draws in the interchange format; fitted in-run when absent.
    #[serde(default)]
    pub draws: Option<PathBuf>,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub hb: Option<HbConfig>,
    #[serde(default)]
    pub mcmc: McmcConfig,
    #[serde(default)]
    pub inference: InferenceOptions,
    #[serde(default)]
    pub cells: Vec<CellQuery>,
    #[serde(default)]
    pub cell_sets: Vec<CellSet>,
    #[serde(default)]
    pub population: Option<SyntheticPopulationSpec>,
    #[serde(default)]
    pub simulation: Option<McConfig>,
    #[serde(default)]
    pub output: OutputOptions,
}

/// A parsed config with paths resolved against its directory.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub sha256: String,
    pub path: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Error::Config(format!("{} is not valid UTF-8", path.display())))?;
        let mut config = Self::parse(text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        config.rebase(dir);
        Ok(LoadedConfig {
            config,
            sha256: config_hash(&bytes),
            path: path.to_path_buf(),
        })
    }

    fn rebase(&mut self, dir: &Path) {
        if let Some(d) = &mut self.data {
            d.rebase(dir);
        }
        if let Some(p) = &mut self.draws {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        if let Some(p) = &mut self.out {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }

    pub fn data(&self) -> Result<&DataConfig> {
        let d = self
            .data
            .as_ref()
            .ok_or_else(|| Error::Config("missing [data] section".into()))?;
        for p in [&d.units, &d.strata] {
            if !p.exists() {
                return Err(Error::Config(format!("data file {} does not exist", p.display())));
            }
        }
        Ok(d)
    }

    pub fn hb(&self) -> Result<&HbConfig> {
        self.hb.as_ref().ok_or_else(|| Error::Config("missing [hb] section".into()))
    }

    pub fn link_policy(&self) -> &LinkPolicy {
        &self.inference.link
    }

    /// Explicit cells followed by every expanded cell set; names must be
    /// unique.
    pub fn cells(&self, sample: &SampleSet) -> Result<Vec<CellQuery>> {
        let mut cells = self.cells.clone();
        for set in &self.cell_sets {
            cells.extend(set.expand(sample)?);
        }
        let mut names: Vec<&str> = cells.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate cell name `{}`", w[0])));
        }
        Ok(cells)
    }

    /// Monte Carlo settings with cells, models and inference options filled
    /// in.
    pub fn mc_config(&self, population: &SampleSet) -> Result<McConfig> {
        let mut mc = self.simulation.clone().unwrap_or_else(|| {
            RunConfig::parse("[simulation]\n")
                .ok()
                .and_then(|c| c.simulation)
                .expect("defaults parse")
        });
        mc.seed = self.seed;
        mc.cells = self.cells(population)?;
        mc.hb = self.hb()?.clone();
        mc.inference = self.inference;
        mc.validate()?;
        Ok(mc)
    }
}
