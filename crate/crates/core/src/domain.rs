//! Finite-population / sample data model, calibration design vectors and
//! cell membership.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSpec {
    pub id: String,
    pub population_size: u64,
    #[serde(default = "default_deff")]
    pub deff: f64,
    /// Zero-based domain index. Inferred from the records when absent.
    #[serde(default)]
    pub domain: Option<usize>,
    /// Stratum-level auxiliary covariates for the HB linking models.
    #[serde(default)]
    pub covariates: Vec<f64>,
}

fn default_deff() -> f64 {
    1.0
}

impl StratumSpec {
    pub fn new(id: impl Into<String>, population_size: u64) -> Self {
        StratumSpec {
            id: id.into(),
            population_size,
            deff: 1.0,
            domain: None,
            covariates: Vec::new(),
        }
    }

    pub fn with_domain(mut self, domain: usize) -> Self {
        self.domain = Some(domain);
        self
    }

    pub fn with_deff(mut self, deff: f64) -> Self {
        self.deff = deff;
        self
    }

    pub fn with_covariates(mut self, z: Vec<f64>) -> Self {
        self.covariates = z;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: String,
    /// One-based domain index `d`.
    pub index: usize,
}

/// A categorical attribute and its level dictionary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    pub levels: Vec<String>,
    /// Calibration variable this attribute was derived from (e.g. an hours
    /// band derived from hours worked).
    #[serde(default)]
    pub derived_from: Option<String>,
}

impl AttributeDef {
    pub fn new(name: impl Into<String>, levels: Vec<String>) -> Self {
        AttributeDef {
            name: name.into(),
            levels,
            derived_from: None,
        }
    }

    pub fn derived(mut self, from: impl Into<String>) -> Self {
        self.derived_from = Some(from.into());
        self
    }

    pub fn level_code(&self, level: &str) -> Option<u32> {
        self.levels.iter().position(|l| l == level).map(|i| i as u32)
    }
}

/// Column layout shared by all records of a sample or population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub calibration: Vec<String>,
    pub attributes: Vec<AttributeDef>,
    pub outcomes: Vec<String>,
}

impl Schema {
    pub fn calibration_index(&self, name: &str) -> Option<usize> {
        self.calibration.iter().position(|n| n == name)
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn outcome_index(&self, name: &str) -> Option<usize> {
        self.outcomes.iter().position(|n| n == name)
    }

    pub fn resolve_variable(&self, name: &str) -> Result<VariableRef> {
        if let Some(v) = self.calibration_index(name) {
            Ok(VariableRef::Calibration(v))
        } else if let Some(u) = self.outcome_index(name) {
            Ok(VariableRef::Outcome(u))
        } else {
            Err(Error::UnknownVariable(name.to_string()))
        }
    }
}

/// A summed variable resolved against the schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariableRef {
    /// Zero-based calibration variable index.
    Calibration(usize),
    /// Zero-based outcome index.
    Outcome(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub id: u64,
    /// Zero-based index into the stratum list.
    pub stratum: usize,
    /// Zero-based index into the domain list.
    pub domain: usize,
    pub weight: f64,
    pub calib: Vec<f64>,
    /// Level codes, one per schema attribute.
    pub attributes: Vec<u32>,
    pub outcomes: Vec<f64>,
}

/// The `V × D` constraint layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSpec {
    variable_names: Vec<String>,
    domain_order: Vec<String>,
}

impl CalibrationSpec {
    pub fn new(variable_names: Vec<String>, domain_order: Vec<String>) -> Result<Self> {
        if variable_names.is_empty() || domain_order.is_empty() {
            return Err(Error::Invalid(
                "calibration spec needs at least one variable and one domain".into(),
            ));
        }
        let uniq = |v: &[String]| v.iter().collect::<BTreeSet<_>>().len() == v.len();
        if !uniq(&variable_names) {
            return Err(Error::Invalid("duplicate calibration variable name".into()));
        }
        if !uniq(&domain_order) {
            return Err(Error::Invalid("duplicate domain identifier".into()));
        }
        Ok(CalibrationSpec {
            variable_names,
            domain_order,
        })
    }

    pub fn variables(&self) -> &[String] {
        &self.variable_names
    }

    pub fn domains(&self) -> &[String] {
        &self.domain_order
    }

    pub fn n_variables(&self) -> usize {
        self.variable_names.len()
    }

    pub fn n_domains(&self) -> usize {
        self.domain_order.len()
    }

    /// `p = V · D`.
    pub fn p(&self) -> usize {
        self.n_variables() * self.n_domains()
    }

    /// Zero-based position of block `(v, d)` (both zero-based).
    #[inline]
    pub fn position(&self, v: usize, d: usize) -> usize {
        v * self.n_domains() + d
    }

    /// Inverse of [`CalibrationSpec::position`].
    pub fn block_of(&self, pos: usize) -> (usize, usize) {
        (pos / self.n_domains(), pos % self.n_domains())
    }

    pub fn domain_position(&self, id: &str) -> Result<usize> {
        self.domain_order
            .iter()
            .position(|d| d == id)
            .ok_or_else(|| Error::UnknownDomain(id.to_string()))
    }

    /// Human-readable block label, `employment@NSW`.
    pub fn block_label(&self, pos: usize) -> String {
        let (v, d) = self.block_of(pos);
        format!("{}@{}", self.variable_names[v], self.domain_order[d])
    }

    /// Column name in draw files, `v<i>_d<j>` with one-based indices.
    pub fn column_name(&self, pos: usize) -> String {
        let (v, d) = self.block_of(pos);
        format!("v{}_d{}", v + 1, d + 1)
    }
}

/// One-based block index `(v − 1)·D + d`.
pub fn block_index(v: usize, d: usize, spec: &CalibrationSpec) -> Result<usize> {
    if v == 0 || v > spec.n_variables() {
        return Err(Error::IndexOutOfRange {
            what: "variable",
            index: v,
            max: spec.n_variables(),
        });
    }
    if d == 0 || d > spec.n_domains() {
        return Err(Error::IndexOutOfRange {
            what: "domain",
            index: d,
            max: spec.n_domains(),
        });
    }
    Ok((v - 1) * spec.n_domains() + d)
}

/// Dense calibration design vector of length `p`.
pub fn build_design_vector(record: &UnitRecord, spec: &CalibrationSpec) -> Result<Vec<f64>> {
    if record.domain >= spec.n_domains() {
        return Err(Error::UnknownDomain(format!("#{}", record.domain + 1)));
    }
    if record.calib.len() != spec.n_variables() {
        return Err(Error::DimensionMismatch {
            expected: spec.n_variables(),
            found: record.calib.len(),
            context: format!("calibration values of record {}", record.id),
        });
    }
    let mut y = vec![0.0; spec.p()];
    for (pos, value) in design_entries(record, spec) {
        y[pos] = value;
    }
    Ok(y)
}

/// Sparse form of the design vector: one `(position, value)` per variable.
/// Callers must have validated the record against the spec.
#[inline]
pub fn design_entries<'a>(
    record: &'a UnitRecord,
    spec: &'a CalibrationSpec,
) -> impl Iterator<Item = (usize, f64)> + 'a {
    record
        .calib
        .iter()
        .enumerate()
        .map(move |(v, &y)| (spec.position(v, record.domain), y))
}

/// The observed sample 𝒜 (or, with unit weights, a whole population frame).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    records: Vec<UnitRecord>,
    strata: Vec<StratumSpec>,
    domains: Vec<DomainSpec>,
    schema: Schema,
    stratum_counts: Vec<usize>,
}

impl SampleSet {
    pub fn new(
        records: Vec<UnitRecord>,
        mut strata: Vec<StratumSpec>,
        domains: Vec<DomainSpec>,
        schema: Schema,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Invalid("sample has no records".into()));
        }
        for (i, d) in domains.iter().enumerate() {
            if d.index != i + 1 {
                return Err(Error::Invalid(format!(
                    "domain `{}` has index {} but is listed at position {}",
                    d.id,
                    d.index,
                    i + 1
                )));
            }
        }
        for s in &strata {
            if s.population_size < 1 {
                return Err(Error::Invalid(format!("stratum `{}` has N_h = 0", s.id)));
            }
            if !(s.deff > 0.0) || !s.deff.is_finite() {
                return Err(Error::Invalid(format!("stratum `{}` has DEFF <= 0", s.id)));
            }
            if let Some(d) = s.domain {
                if d >= domains.len() {
                    return Err(Error::UnknownDomain(format!("#{}", d + 1)));
                }
            }
        }
        let mut counts = vec![0usize; strata.len()];
        for r in &records {
            let s = strata
                .get_mut(r.stratum)
                .ok_or_else(|| Error::UnknownStratum(format!("#{}", r.stratum + 1)))?;
            if r.domain >= domains.len() {
                return Err(Error::UnknownDomain(format!("#{}", r.domain + 1)));
            }
            match s.domain {
                None => s.domain = Some(r.domain),
                Some(d) if d != r.domain => {
                    return Err(Error::Invalid(format!(
                        "stratum `{}` spans domains `{}` and `{}`",
                        s.id, domains[d].id, domains[r.domain].id
                    )))
                }
                _ => {}
            }
            if !(r.weight > 0.0) || !r.weight.is_finite() {
                return Err(Error::Invalid(format!(
                    "record {} has non-positive weight {}",
                    r.id, r.weight
                )));
            }
            if r.calib.len() != schema.calibration.len() {
                return Err(Error::DimensionMismatch {
                    expected: schema.calibration.len(),
                    found: r.calib.len(),
                    context: format!("calibration values of record {}", r.id),
                });
            }
            if r.attributes.len() != schema.attributes.len() {
                return Err(Error::DimensionMismatch {
                    expected: schema.attributes.len(),
                    found: r.attributes.len(),
                    context: format!("attributes of record {}", r.id),
                });
            }
            if r.outcomes.len() != schema.outcomes.len() {
                return Err(Error::DimensionMismatch {
                    expected: schema.outcomes.len(),
                    found: r.outcomes.len(),
                    context: format!("outcomes of record {}", r.id),
                });
            }
            if r.calib.iter().chain(&r.outcomes).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    count: 1,
                    context: format!("record {}", r.id),
                });
            }
            counts[r.stratum] += 1;
        }
        for (s, &n) in strata.iter().zip(&counts) {
            if n as u64 > s.population_size {
                return Err(Error::Invalid(format!(
                    "stratum `{}` has n_h = {} > N_h = {}",
                    s.id, n, s.population_size
                )));
            }
        }
        Ok(SampleSet {
            records,
            strata,
            domains,
            schema,
            stratum_counts: counts,
        })
    }

    pub fn records(&self) -> &[UnitRecord] {
        &self.records
    }

    pub fn strata(&self) -> &[StratumSpec] {
        &self.strata
    }

    pub fn domains(&self) -> &[DomainSpec] {
        &self.domains
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sampled count `n_h` per stratum.
    pub fn stratum_counts(&self) -> &[usize] {
        &self.stratum_counts
    }

    /// Sampling fraction `f_h = n_h / N_h`.
    pub fn sampling_fraction(&self, h: usize) -> f64 {
        self.stratum_counts[h] as f64 / self.strata[h].population_size as f64
    }

    /// The calibration layout implied by this sample: schema calibration
    /// variables × domains in index order.
    pub fn calibration_spec(&self) -> CalibrationSpec {
        CalibrationSpec {
            variable_names: self.schema.calibration.clone(),
            domain_order: self.domains.iter().map(|d| d.id.clone()).collect(),
        }
    }

    /// Checks that `spec` describes this sample's layout.
    pub fn check_spec(&self, spec: &CalibrationSpec) -> Result<()> {
        if spec.variables() != self.schema.calibration.as_slice() {
            return Err(Error::Invalid(
                "calibration spec variables do not match the sample schema".into(),
            ));
        }
        for (d, id) in spec.domains().iter().enumerate() {
            if self.domains.get(d).map(|x| &x.id) != Some(id) {
                return Err(Error::UnknownDomain(id.clone()));
            }
        }
        if spec.n_domains() != self.domains.len() {
            return Err(Error::DimensionMismatch {
                expected: self.domains.len(),
                found: spec.n_domains(),
                context: "domains in calibration spec".into(),
            });
        }
        Ok(())
    }

    /// Stratum indices grouped by domain.
    pub fn strata_by_domain(&self) -> Result<Vec<Vec<usize>>> {
        let mut out = vec![Vec::new(); self.domains.len()];
        for (h, s) in self.strata.iter().enumerate() {
            let d = s.domain.ok_or_else(|| Error::UnassignedStratum(s.id.clone()))?;
            out[d].push(h);
        }
        Ok(out)
    }
}

/// One filter condition. A cell filter is the conjunction of its conditions;
/// an empty filter selects every record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum Condition {
    /// Domain membership (one or more domain identifiers).
    Domain { domain: OneOrMany },
    /// Categorical attribute equality / set membership.
    Attribute {
        attribute: String,
        #[serde(alias = "equals", rename = "in")]
        levels: OneOrMany,
    },
    /// Closed interval on a numeric calibration value.
    Range {
        variable: String,
        #[serde(default)]
        min: Option<f64>,
        #[serde(default)]
        max: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl OneOrMany {
    pub fn as_slice(&self) -> &[String] {
        match self {
            OneOrMany::One(s) => std::slice::from_ref(s),
            OneOrMany::Many(v) => v,
        }
    }
}

impl Condition {
    pub fn domain(id: &str) -> Self {
        Condition::Domain {
            domain: OneOrMany::One(id.into()),
        }
    }

    pub fn attribute(name: &str, levels: &[&str]) -> Self {
        Condition::Attribute {
            attribute: name.into(),
            levels: OneOrMany::Many(levels.iter().map(|s| s.to_string()).collect()),
        }
    }

    pub fn range(variable: &str, min: Option<f64>, max: Option<f64>) -> Self {
        Condition::Range {
            variable: variable.into(),
            min,
            max,
        }
    }
}

/// A tier label as it may appear in configuration overrides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TierLabel {
    #[serde(rename = "1-E", alias = "Tier1E")]
    Tier1E,
    #[serde(rename = "2-CA", alias = "Tier2CA")]
    Tier2CA,
    #[serde(rename = "2-NCA", alias = "Tier2NCA")]
    Tier2NCA,
    #[serde(rename = "3-NCV", alias = "Tier3NCV")]
    Tier3NCV,
}

impl TierLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            TierLabel::Tier1E => "1-E",
            TierLabel::Tier2CA => "2-CA",
            TierLabel::Tier2NCA => "2-NCA",
            TierLabel::Tier3NCV => "3-NCV",
        }
    }
}

impl std::fmt::Display for TierLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A cross-tabulation cell: `T_c = Σ_{i∈c} value_i · w_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellQuery {
    pub name: String,
    #[serde(rename = "variable")]
    pub summed_variable: String,
    #[serde(default)]
    pub filter: Vec<Condition>,
    /// Reporting group, e.g. "Employment by occupation".
    #[serde(default)]
    pub group: Option<String>,
    #[serde(default, rename = "tier")]
    pub tier_override: Option<TierLabel>,
    /// Linking variable for non-calibration outcomes; chosen automatically
    /// when absent.
    #[serde(default, rename = "link")]
    pub link_override: Option<String>,
}

impl CellQuery {
    pub fn new(name: impl Into<String>, variable: impl Into<String>, filter: Vec<Condition>) -> Self {
        CellQuery {
            name: name.into(),
            summed_variable: variable.into(),
            filter,
            group: None,
            tier_override: None,
            link_override: None,
        }
    }

    pub fn in_group(mut self, group: impl Into<String>) -> Self {
        self.group = Some(group.into());
        self
    }

    pub fn with_tier(mut self, tier: TierLabel) -> Self {
        self.tier_override = Some(tier);
        self
    }

    pub fn with_link(mut self, link: impl Into<String>) -> Self {
        self.link_override = Some(link.into());
        self
    }
}

#[derive(Debug, Clone)]
enum CompiledCondition {
    Domain(Vec<bool>),
    Attribute { index: usize, accept: Vec<bool> },
    Range { index: usize, lo: f64, hi: f64 },
}

impl CompiledCondition {
    fn matches(&self, r: &UnitRecord) -> bool {
        match self {
            CompiledCondition::Domain(accept) => accept[r.domain],
            CompiledCondition::Attribute { index, accept } => {
                accept.get(r.attributes[*index] as usize).copied().unwrap_or(false)
            }
            CompiledCondition::Range { index, lo, hi } => {
                let y = r.calib[*index];
                y >= *lo && y <= *hi
            }
        }
    }
}

/// A filter resolved against a sample's schema and domain list.
#[derive(Debug, Clone)]
pub struct CompiledFilter {
    conditions: Vec<CompiledCondition>,
}

impl CompiledFilter {
    pub fn compile(filter: &[Condition], schema: &Schema, domains: &[DomainSpec]) -> Result<Self> {
        let mut conditions = Vec::with_capacity(filter.len());
        for c in filter {
            conditions.push(match c {
                Condition::Domain { domain } => {
                    let mut accept = vec![false; domains.len()];
                    for id in domain.as_slice() {
                        let d = domains
                            .iter()
                            .position(|x| &x.id == id)
                            .ok_or_else(|| Error::UnknownDomain(id.clone()))?;
                        accept[d] = true;
                    }
                    CompiledCondition::Domain(accept)
                }
                Condition::Attribute { attribute, levels } => {
                    let index = schema
                        .attribute_index(attribute)
                        .ok_or_else(|| Error::UnknownAttribute(attribute.clone()))?;
                    let def = &schema.attributes[index];
                    let mut accept = vec![false; def.levels.len()];
                    for l in levels.as_slice() {
                        // A level absent from the dictionary simply matches nothing.
                        if let Some(code) = def.level_code(l) {
                            accept[code as usize] = true;
                        }
                    }
                    CompiledCondition::Attribute { index, accept }
                }
                Condition::Range { variable, min, max } => {
                    let index = schema
                        .calibration_index(variable)
                        .ok_or_else(|| Error::UnknownVariable(variable.clone()))?;
                    CompiledCondition::Range {
                        index,
                        lo: min.unwrap_or(f64::NEG_INFINITY),
                        hi: max.unwrap_or(f64::INFINITY),
                    }
                }
            });
        }
        Ok(CompiledFilter { conditions })
    }

    pub fn matches(&self, r: &UnitRecord) -> bool {
        self.conditions.iter().all(|c| c.matches(r))
    }
}

/// Result of [`evaluate_cell`]: membership and summed value for every record.
#[derive(Debug, Clone, PartialEq)]
pub struct CellEvaluation {
    pub variable: VariableRef,
    pub mask: Vec<bool>,
    pub values: Vec<f64>,
}

impl CellEvaluation {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `value_i` for members, zero otherwise.
    pub fn member_value(&self, i: usize) -> f64 {
        if self.mask[i] {
            self.values[i]
        } else {
            0.0
        }
    }

    /// `Σ_{i∈c} value_i · weight_i`.
    pub fn weighted_total(&self, weights: impl IntoIterator<Item = f64>) -> f64 {
        let mut s = crate::linalg::CompensatedSum::default();
        for (i, w) in weights.into_iter().enumerate() {
            if self.mask[i] {
                s.add(self.values[i] * w);
            }
        }
        s.value()
    }
}

pub fn evaluate_cell(query: &CellQuery, sample: &SampleSet) -> Result<CellEvaluation> {
    let variable = sample.schema().resolve_variable(&query.summed_variable)?;
    let filter = CompiledFilter::compile(&query.filter, sample.schema(), sample.domains())?;
    let records = sample.records();
    let mask = records.iter().map(|r| filter.matches(r)).collect();
    let values = records
        .iter()
        .map(|r| match variable {
            VariableRef::Calibration(v) => r.calib[v],
            VariableRef::Outcome(u) => r.outcomes[u],
        })
        .collect();
    Ok(CellEvaluation {
        variable,
        mask,
        values,
    })
}
