//! Chi-square distance calibration with a closed-form solution.
//!
//! For any target `t` the calibrated weights are
//! `w′_i = w_i (1 + (t − T̂_HT)ᵀ G⁻¹ y_i)` with `G = Σ w_i y_i y_iᵀ`. `G` and
//! its factor are built once per sample and reused for every target.

use std::io::Write;
use std::path::Path;

use crate::domain::{design_entries, CalibrationSpec, CellEvaluation, SampleSet};
use crate::error::{Error, Result};
use crate::linalg::{Cholesky, CompensatedSum};
use crate::report::num17;

/// `G` together with its (possibly rank-deficient) Cholesky factor.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    g: Vec<f64>,
    p: usize,
    factor: Cholesky,
    blocks: Vec<String>,
}

impl GramMatrix {
    /// Accumulates `G` without checking rank. Each entry is a compensated
    /// sum over records in sample order.
    pub fn from_sample(sample: &SampleSet, spec: &CalibrationSpec) -> Result<Self> {
        sample.check_spec(spec)?;
        let p = spec.p();
        let mut acc = vec![CompensatedSum::default(); p * p];
        for r in sample.records() {
            for (a, ya) in design_entries(r, spec) {
                if ya == 0.0 {
                    continue;
                }
                for (b, yb) in design_entries(r, spec) {
                    if b >= a && yb != 0.0 {
                        acc[a * p + b].add(r.weight * ya * yb);
                    }
                }
            }
        }
        let mut g = vec![0.0; p * p];
        for a in 0..p {
            for b in a..p {
                let x = acc[a * p + b].value();
                g[a * p + b] = x;
                g[b * p + a] = x;
            }
        }
        let blocks = (0..p).map(|j| spec.block_label(j)).collect();
        Ok(Self::from_matrix(g, p, blocks))
    }

    /// Wraps an explicit symmetric matrix; `blocks` labels the rows.
    pub fn from_matrix(g: Vec<f64>, p: usize, blocks: Vec<String>) -> Self {
        assert_eq!(g.len(), p * p);
        let max_diag = (0..p).map(|j| g[j * p + j]).fold(0.0f64, f64::max);
        let tol = p as f64 * max_diag * 2f64.powi(-50);
        let factor = Cholesky::factor(&g, p, tol);
        GramMatrix { g, p, factor, blocks }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn matrix(&self) -> &[f64] {
        &self.g
    }

    pub fn factor(&self) -> &Cholesky {
        &self.factor
    }

    pub fn rank(&self) -> usize {
        self.factor.rank()
    }

    pub fn is_full_rank(&self) -> bool {
        self.factor.is_full_rank()
    }

    pub fn condition_estimate(&self) -> f64 {
        self.factor.condition_estimate()
    }

    /// Labels of the blocks whose pivots were rejected.
    pub fn dependent_blocks(&self) -> Vec<String> {
        self.factor.dependent().iter().map(|&j| self.blocks[j].clone()).collect()
    }

    pub fn ensure_full_rank(&self) -> Result<()> {
        if self.is_full_rank() {
            Ok(())
        } else {
            Err(Error::RankDeficient {
                rank: self.rank(),
                p: self.p,
                blocks: self.dependent_blocks(),
            })
        }
    }

    /// Solves `G x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.ensure_full_rank()?;
        if b.len() != self.p {
            return Err(Error::DimensionMismatch {
                expected: self.p,
                found: b.len(),
                context: "right-hand side of G x = b".into(),
            });
        }
        Ok(self.factor.solve(b))
    }
}

/// Builds `G` and fails when it is rank deficient, naming the empty or
/// dependent `(variable, domain)` blocks.
pub fn compute_gram(sample: &SampleSet, spec: &CalibrationSpec) -> Result<GramMatrix> {
    let g = GramMatrix::from_sample(sample, spec)?;
    g.ensure_full_rank()?;
    Ok(g)
}

/// `T̂_HT = Σ w_i y_i`.
pub fn ht_totals(sample: &SampleSet, spec: &CalibrationSpec) -> Result<Vec<f64>> {
    sample.check_spec(spec)?;
    let mut acc = vec![CompensatedSum::default(); spec.p()];
    for r in sample.records() {
        for (pos, y) in design_entries(r, spec) {
            acc[pos].add(r.weight * y);
        }
    }
    Ok(acc.iter().map(CompensatedSum::value).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedWeights {
    pub weights: Vec<f64>,
    pub g_factors: Vec<f64>,
    pub target: Vec<f64>,
    /// Records with `w′_i < 0`; such weights are kept as they are.
    pub negative_count: usize,
}

fn check_vector(x: &[f64], p: usize, what: &str) -> Result<()> {
    if x.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: x.len(),
            context: what.to_string(),
        });
    }
    let bad = x.iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        return Err(Error::NonFinite {
            count: bad,
            context: what.to_string(),
        });
    }
    Ok(())
}

/// Calibrated weights for target `t`: one solve `G u = t − T̂_HT`, then
/// `g_i = 1 + uᵀ y_i`.
pub fn calibrate(
    sample: &SampleSet,
    spec: &CalibrationSpec,
    gram: &GramMatrix,
    ht: &[f64],
    target: &[f64],
) -> Result<CalibratedWeights> {
    gram.ensure_full_rank()?;
    check_vector(ht, gram.p(), "HT totals")?;
    check_vector(target, gram.p(), "calibration target")?;
    let resid: Vec<f64> = target.iter().zip(ht).map(|(t, h)| t - h).collect();
    let u = gram.solve(&resid)?;
    let mut weights = Vec::with_capacity(sample.len());
    let mut g_factors = Vec::with_capacity(sample.len());
    for r in sample.records() {
        let g = 1.0 + design_entries(r, spec).map(|(pos, y)| u[pos] * y).sum::<f64>();
        g_factors.push(g);
        weights.push(r.weight * g);
    }
    let negative_count = weights.iter().filter(|&&w| w < 0.0).count();
    Ok(CalibratedWeights {
        weights,
        g_factors,
        target: target.to_vec(),
        negative_count,
    })
}

/// The cell's weighted calibration moment `Σ_{i∈c} value_i w_i y_i`.
pub fn cell_moment(cell: &CellEvaluation, sample: &SampleSet, spec: &CalibrationSpec) -> Vec<f64> {
    let mut acc = vec![CompensatedSum::default(); spec.p()];
    for (i, r) in sample.records().iter().enumerate() {
        if !cell.mask[i] {
            continue;
        }
        let s = cell.values[i] * r.weight;
        if s == 0.0 {
            continue;
        }
        for (pos, y) in design_entries(r, spec) {
            acc[pos].add(s * y);
        }
    }
    acc.iter().map(CompensatedSum::value).collect()
}

/// `a_c` solving `G a_c = Σ_{i∈c} value_i w_i y_i`.
pub fn replicate_direction(gram: &GramMatrix, moment: &[f64]) -> Result<Vec<f64>> {
    check_vector(moment, gram.p(), "cell moment")?;
    gram.solve(moment)
}

/// Per-sample calibration state shared by every cell and draw.
#[derive(Debug, Clone)]
pub struct CalibrationArtifacts {
    pub spec: CalibrationSpec,
    pub gram: GramMatrix,
    pub ht: Vec<f64>,
}

impl CalibrationArtifacts {
    pub fn build(sample: &SampleSet, spec: &CalibrationSpec) -> Result<Self> {
        Ok(CalibrationArtifacts {
            spec: spec.clone(),
            gram: compute_gram(sample, spec)?,
            ht: ht_totals(sample, spec)?,
        })
    }

    pub fn calibrate(&self, sample: &SampleSet, target: &[f64]) -> Result<CalibratedWeights> {
        calibrate(sample, &self.spec, &self.gram, &self.ht, target)
    }
}

/// Writes `id,w,g_factor,w_prime` per record, preceded by `# key=value`
/// metadata lines.
pub fn write_weights(
    path: &Path,
    sample: &SampleSet,
    weights: &CalibratedWeights,
    meta: &[(String, String)],
) -> Result<()> {
    let mut out = Vec::new();
    for (k, v) in meta {
        writeln!(out, "# {k}={v}").unwrap();
    }
    writeln!(out, "id,w,g_factor,w_prime").unwrap();
    for (i, r) in sample.records().iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{}",
            r.id,
            num17(r.weight),
            num17(weights.g_factors[i]),
            num17(weights.weights[i])
        )
        .unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
