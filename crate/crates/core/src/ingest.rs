//! Unit-record and stratum metadata ingestion from delimited text.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{AttributeDef, DomainSpec, SampleSet, Schema, StratumSpec, UnitRecord};
use crate::error::{Error, Result};

/// A closed numeric band `[min, max]` mapped to a categorical label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub label: String,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

impl Band {
    pub fn new(label: &str, min: Option<f64>, max: Option<f64>) -> Self {
        Band {
            label: label.into(),
            min,
            max,
        }
    }

    fn contains(&self, x: f64) -> bool {
        self.min.is_none_or(|lo| x >= lo) && self.max.is_none_or(|hi| x <= hi)
    }
}

/// Attribute materialized from a calibration variable at ingestion time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedAttribute {
    pub name: String,
    pub from: String,
    pub bands: Vec<Band>,
    #[serde(default = "default_otherwise")]
    pub otherwise: String,
}

fn default_otherwise() -> String {
    "none".into()
}

impl DerivedAttribute {
    /// The attribute definition: band labels followed by the fallback level.
    pub fn definition(&self) -> AttributeDef {
        let mut levels: Vec<String> = self.bands.iter().map(|b| b.label.clone()).collect();
        if !levels.contains(&self.otherwise) {
            levels.push(self.otherwise.clone());
        }
        AttributeDef::new(self.name.clone(), levels).derived(self.from.clone())
    }

    /// Level code of `x` under [`DerivedAttribute::definition`]; first matching
    /// band wins.
    pub fn code(&self, def: &AttributeDef, x: f64) -> u32 {
        let label = self
            .bands
            .iter()
            .find(|b| b.contains(x))
            .map_or(self.otherwise.as_str(), |b| b.label.as_str());
        def.level_code(label).expect("band label in definition")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrataColumns {
    #[serde(default = "col_id")]
    pub id: String,
    #[serde(default = "col_size")]
    pub size: String,
    #[serde(default = "col_deff")]
    pub deff: String,
    #[serde(default = "col_domain")]
    pub domain: String,
    #[serde(default)]
    pub covariates: Vec<String>,
}

fn col_id() -> String {
    "id".into()
}
fn col_size() -> String {
    "N".into()
}
fn col_deff() -> String {
    "deff".into()
}
fn col_domain() -> String {
    "domain".into()
}

impl Default for StrataColumns {
    fn default() -> Self {
        StrataColumns {
            id: col_id(),
            size: col_size(),
            deff: col_deff(),
            domain: col_domain(),
            covariates: Vec::new(),
        }
    }
}

/// Column roles for the unit-record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub units: PathBuf,
    pub strata: PathBuf,
    #[serde(default)]
    pub id_column: Option<String>,
    #[serde(default = "col_stratum")]
    pub stratum_column: String,
    #[serde(default = "col_domain")]
    pub domain_column: String,
    #[serde(default = "col_weight")]
    pub weight_column: String,
    pub calibration: Vec<String>,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub outcomes: Vec<String>,
    #[serde(default)]
    pub derived: Vec<DerivedAttribute>,
    /// Domain identifiers in index order; defaults to order of first
    /// appearance in the strata file, then the unit file.
    #[serde(default)]
    pub domain_order: Option<Vec<String>>,
    #[serde(default)]
    pub strata_columns: StrataColumns,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn col_stratum() -> String {
    "stratum".into()
}
fn col_weight() -> String {
    "weight".into()
}
fn default_delimiter() -> char {
    ','
}

impl DataConfig {
    /// Rebases relative paths onto `dir` (the config file's directory).
    pub fn rebase(&mut self, dir: &Path) {
        if self.units.is_relative() {
            self.units = dir.join(&self.units);
        }
        if self.strata.is_relative() {
            self.strata = dir.join(&self.strata);
        }
    }
}

fn reader(path: &Path, delimiter: char) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .delimiter(delimiter as u8)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| {
        Error::Config(format!("column `{name}` not found in {}", path.display()))
    })
}

fn parse_f64(s: &str, what: &str, line: usize, path: &Path) -> Result<f64> {
    s.parse::<f64>().map_err(|_| {
        Error::Invalid(format!(
            "{}:{line}: cannot parse {what} value `{s}` as a number",
            path.display()
        ))
    })
}

/// Reads the stratum metadata file. Returns strata with domains given as raw
/// identifiers (resolved later against the domain order).
fn read_strata(cfg: &DataConfig) -> Result<Vec<(StratumSpec, Option<String>)>> {
    let path = &cfg.strata;
    let mut rdr = reader(path, cfg.delimiter)?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    let c = &cfg.strata_columns;
    let id = column(&headers, &c.id, path)?;
    let size = column(&headers, &c.size, path)?;
    let deff = headers.iter().position(|h| h == c.deff);
    let domain = headers.iter().position(|h| h == c.domain);
    let covs = c
        .covariates
        .iter()
        .map(|n| column(&headers, n, path))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let line = line + 2;
        let n = rec[size].parse::<u64>().map_err(|_| {
            Error::Invalid(format!(
                "{}:{line}: population size `{}` is not a positive integer",
                path.display(),
                &rec[size]
            ))
        })?;
        let mut s = StratumSpec::new(&rec[id], n);
        if let Some(j) = deff {
            if !rec[j].is_empty() {
                s.deff = parse_f64(&rec[j], "deff", line, path)?;
            }
        }
        s.covariates = covs
            .iter()
            .map(|&j| parse_f64(&rec[j], "covariate", line, path))
            .collect::<Result<_>>()?;
        let dom = domain.map(|j| rec[j].to_string()).filter(|x| !x.is_empty());
        out.push((s, dom));
    }
    Ok(out)
}

/// Loads a sample from the unit-record and stratum files described by `cfg`.
pub fn load_sample(cfg: &DataConfig) -> Result<SampleSet> {
    let strata_raw = read_strata(cfg)?;
    let path = &cfg.units;
    let mut rdr = reader(path, cfg.delimiter)?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();

    let id_col = cfg
        .id_column
        .as_ref()
        .map(|c| column(&headers, c, path))
        .transpose()?;
    let stratum_col = column(&headers, &cfg.stratum_column, path)?;
    let domain_col = column(&headers, &cfg.domain_column, path)?;
    let weight_col = column(&headers, &cfg.weight_column, path)?;
    let calib_cols = cfg
        .calibration
        .iter()
        .map(|c| column(&headers, c, path))
        .collect::<Result<Vec<_>>>()?;
    let attr_cols = cfg
        .attributes
        .iter()
        .map(|c| column(&headers, c, path))
        .collect::<Result<Vec<_>>>()?;
    let outcome_cols = cfg
        .outcomes
        .iter()
        .map(|c| column(&headers, c, path))
        .collect::<Result<Vec<_>>>()?;
    for d in &cfg.derived {
        if !cfg.calibration.contains(&d.from) {
            return Err(Error::Config(format!(
                "derived attribute `{}` refers to unknown calibration variable `{}`",
                d.name, d.from
            )));
        }
    }

    let raw: Vec<csv::StringRecord> = rdr
        .records()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::csv(path, e))?;

    // Domain order: explicit, else first appearance in strata then units.
    let domain_order: Vec<String> = match &cfg.domain_order {
        Some(o) => o.clone(),
        None => {
            let mut order: Vec<String> = Vec::new();
            let seen = strata_raw
                .iter()
                .filter_map(|(_, d)| d.clone())
                .chain(raw.iter().map(|r| r[domain_col].to_string()));
            for d in seen {
                if !order.contains(&d) {
                    order.push(d);
                }
            }
            order
        }
    };
    let domain_pos: BTreeMap<&str, usize> = domain_order
        .iter()
        .enumerate()
        .map(|(i, d)| (d.as_str(), i))
        .collect();
    let domains: Vec<DomainSpec> = domain_order
        .iter()
        .enumerate()
        .map(|(i, id)| DomainSpec {
            id: id.clone(),
            index: i + 1,
        })
        .collect();

    let mut strata = Vec::with_capacity(strata_raw.len());
    for (mut s, dom) in strata_raw {
        if let Some(d) = dom {
            s.domain = Some(
                *domain_pos
                    .get(d.as_str())
                    .ok_or_else(|| Error::UnknownDomain(d.clone()))?,
            );
        }
        strata.push(s);
    }
    let stratum_pos: BTreeMap<String, usize> = strata
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.clone(), i))
        .collect();

    let mut attributes: Vec<AttributeDef> = cfg
        .attributes
        .iter()
        .map(|a| AttributeDef::new(a.clone(), Vec::new()))
        .collect();
    let derived_defs: Vec<AttributeDef> = cfg.derived.iter().map(|d| d.definition()).collect();
    let derived_src: Vec<usize> = cfg
        .derived
        .iter()
        .map(|d| cfg.calibration.iter().position(|c| c == &d.from).unwrap())
        .collect();

    let mut records = Vec::with_capacity(raw.len());
    for (row, rec) in raw.iter().enumerate() {
        let line = row + 2;
        let id = match id_col {
            Some(j) => rec[j].parse::<u64>().map_err(|_| {
                Error::Invalid(format!(
                    "{}:{line}: record id `{}` is not a non-negative integer",
                    path.display(),
                    &rec[j]
                ))
            })?,
            None => row as u64 + 1,
        };
        let stratum = *stratum_pos
            .get(&rec[stratum_col])
            .ok_or_else(|| Error::UnknownStratum(rec[stratum_col].to_string()))?;
        let domain = *domain_pos
            .get(&rec[domain_col])
            .ok_or_else(|| Error::UnknownDomain(rec[domain_col].to_string()))?;
        let weight = parse_f64(&rec[weight_col], "weight", line, path)?;
        let calib = calib_cols
            .iter()
            .map(|&j| parse_f64(&rec[j], "calibration", line, path))
            .collect::<Result<Vec<_>>>()?;
        let mut codes = Vec::with_capacity(attr_cols.len() + derived_defs.len());
        for (a, &j) in attributes.iter_mut().zip(&attr_cols) {
            let level = &rec[j];
            let code = match a.level_code(level) {
                Some(c) => c,
                None => {
                    a.levels.push(level.to_string());
                    (a.levels.len() - 1) as u32
                }
            };
            codes.push(code);
        }
        for ((d, def), &v) in cfg.derived.iter().zip(&derived_defs).zip(&derived_src) {
            codes.push(d.code(def, calib[v]));
        }
        let outcomes = outcome_cols
            .iter()
            .map(|&j| parse_f64(&rec[j], "outcome", line, path))
            .collect::<Result<Vec<_>>>()?;
        records.push(UnitRecord {
            id,
            stratum,
            domain,
            weight,
            calib,
            attributes: codes,
            outcomes,
        });
    }
    attributes.extend(derived_defs);

    let schema = Schema {
        calibration: cfg.calibration.clone(),
        attributes,
        outcomes: cfg.outcomes.clone(),
    };
    SampleSet::new(records, strata, domains, schema)
}

/// Writes a sample back out in the layout [`load_sample`] reads, so that
/// generated samples can be fed to the CLI. Derived attributes are written as
/// ordinary columns.
pub fn write_sample(sample: &SampleSet, units: &Path, strata: &Path) -> Result<()> {
    let schema = sample.schema();
    let mut w = csv::Writer::from_path(units).map_err(|e| Error::csv(units, e))?;
    let mut header = vec!["id".to_string(), "stratum".into(), "domain".into(), "weight".into()];
    header.extend(schema.calibration.iter().cloned());
    header.extend(schema.attributes.iter().map(|a| a.name.clone()));
    header.extend(schema.outcomes.iter().cloned());
    w.write_record(&header).map_err(|e| Error::csv(units, e))?;
    for r in sample.records() {
        let mut row = vec![
            r.id.to_string(),
            sample.strata()[r.stratum].id.clone(),
            sample.domains()[r.domain].id.clone(),
            crate::report::num17(r.weight),
        ];
        row.extend(r.calib.iter().map(|&x| crate::report::num17(x)));
        row.extend(
            schema
                .attributes
                .iter()
                .zip(&r.attributes)
                .map(|(a, &c)| a.levels[c as usize].clone()),
        );
        row.extend(r.outcomes.iter().map(|&x| crate::report::num17(x)));
        w.write_record(&row).map_err(|e| Error::csv(units, e))?;
    }
    w.flush().map_err(|e| Error::io(units, e))?;

    let k = sample.strata().iter().map(|s| s.covariates.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(strata).map_err(|e| Error::csv(strata, e))?;
    let mut header = vec!["id".to_string(), "N".into(), "deff".into(), "domain".into()];
    header.extend((1..=k).map(|j| format!("z{j}")));
    w.write_record(&header).map_err(|e| Error::csv(strata, e))?;
    for s in sample.strata() {
        let mut row = vec![
            s.id.clone(),
            s.population_size.to_string(),
            crate::report::num17(s.deff),
            s.domain.map(|d| sample.domains()[d].id.clone()).unwrap_or_default(),
        ];
        row.extend(s.covariates.iter().map(|&x| crate::report::num17(x)));
        w.write_record(&row).map_err(|e| Error::csv(strata, e))?;
    }
    w.flush().map_err(|e| Error::io(strata, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_bands_first_match_wins() {
        let d = DerivedAttribute {
            name: "hours_band".into(),
            from: "hours".into(),
            bands: vec![
                Band::new("1-15", Some(1.0), Some(15.0)),
                Band::new("16+", Some(16.0), None),
            ],
            otherwise: "none".into(),
        };
        let def = d.definition();
        assert_eq!(def.levels, vec!["1-15", "16+", "none"]);
        assert_eq!(def.derived_from.as_deref(), Some("hours"));
        assert_eq!(d.code(&def, 0.0), 2);
        assert_eq!(d.code(&def, 15.0), 0);
        assert_eq!(d.code(&def, 60.0), 1);
    }
}
