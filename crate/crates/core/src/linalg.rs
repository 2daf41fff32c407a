//! Dense symmetric positive semi-definite factorization for the small systems
//! used here (p ≈ 24 calibration blocks, a handful of covariates).

/// Lower-triangular Cholesky factor of a PSD matrix. Pivots at or below the
/// tolerance are recorded as dependent and their column is zeroed, so the
/// factor exists for any PSD input and `rank` counts accepted pivots.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
    dependent: Vec<usize>,
    pivots: Vec<f64>,
}

impl Cholesky {
    /// Factors the row-major `n × n` matrix `a`, treating any pivot `<= tol`
    /// as zero.
    pub fn factor(a: &[f64], n: usize, tol: f64) -> Self {
        assert_eq!(a.len(), n * n, "matrix must be n x n");
        let mut l = vec![0.0; n * n];
        let mut dependent = Vec::new();
        let mut pivots = Vec::with_capacity(n);
        for j in 0..n {
            let mut d = a[j * n + j];
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > tol) {
                dependent.push(j);
                pivots.push(0.0);
                continue;
            }
            pivots.push(d);
            let ljj = d.sqrt();
            l[j * n + j] = ljj;
            for i in (j + 1)..n {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / ljj;
            }
        }
        Cholesky {
            n,
            l,
            dependent,
            pivots,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.n - self.dependent.len()
    }

    pub fn is_full_rank(&self) -> bool {
        self.dependent.is_empty()
    }

    /// Zero-based indices of rejected pivots.
    pub fn dependent(&self) -> &[usize] {
        &self.dependent
    }

    /// Squared-pivot ratio max/min over accepted pivots; a cheap condition
    /// number estimate.
    pub fn condition_estimate(&self) -> f64 {
        let accepted = self.pivots.iter().copied().filter(|&p| p > 0.0);
        let (lo, hi) = accepted.fold((f64::INFINITY, 0.0f64), |(lo, hi), p| (lo.min(p), hi.max(p)));
        if hi == 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }

    pub fn factor_entries(&self) -> &[f64] {
        &self.l
    }

    /// Solves `L y = b` in place.
    pub fn forward(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i * n + k] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn backward(&self, y: &mut [f64]) {
        let n = self.n;
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
    }

    /// Solves `A x = b`. Only meaningful when the factor is full rank.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        debug_assert!(self.is_full_rank());
        let mut x = b.to_vec();
        self.forward(&mut x);
        self.backward(&mut x);
        x
    }
}

/// Row-major `ZᵀZ` and `Zᵀy` for an `m × k` design given as rows.
pub fn cross_products(rows: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = rows.first().map_or(0, Vec::len);
    let mut ztz = vec![0.0; k * k];
    let mut zty = vec![0.0; k];
    for (row, &yi) in rows.iter().zip(y) {
        for a in 0..k {
            zty[a] += row[a] * yi;
            for b in 0..k {
                ztz[a * k + b] += row[a] * row[b];
            }
        }
    }
    (ztz, zty)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    c: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_spd_system() {
        let a = [4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let ch = Cholesky::factor(&a, 3, 1e-14);
        assert_eq!(ch.rank(), 3);
        let x = ch.solve(&[1.0, 2.0, 3.0]);
        for i in 0..3 {
            let r: f64 = (0..3).map(|j| a[i * 3 + j] * x[j]).sum();
            assert!((r - [1.0, 2.0, 3.0][i]).abs() < 1e-12);
        }
    }

    #[test]
    fn flags_dependent_columns() {
        // column 2 = column 0 + column 1
        let z = vec![
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 1.0],
            vec![1.0, 1.0, 2.0],
            vec![2.0, 1.0, 3.0],
        ];
        let (ztz, _) = cross_products(&z, &[0.0; 4]);
        let ch = Cholesky::factor(&ztz, 3, 1e-10);
        assert_eq!(ch.rank(), 2);
        assert_eq!(ch.dependent(), &[2]);
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let mut s = CompensatedSum::default();
        for x in [1e16, 1.0, -1e16, 1.0] {
            s.add(x);
        }
        assert_eq!(s.value(), 2.0);
    }
}
