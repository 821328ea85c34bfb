use nalgebra::{DMatrix, SymmetricEigen};

use super::ExpertError;

/// Principal axes of a sample set, used to reduce tiled semantic
/// embeddings to the expert channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection {
    mean: Vec<f64>,
    /// `input_dim × output_dim`, column `j` is the `j`-th component.
    components: Vec<f64>,
    explained_variance: Vec<f64>,
    input_dim: usize,
    output_dim: usize,
}

impl PcaProjection {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    /// Component `j` as a unit vector of length `input_dim`.
    pub fn component(&self, j: usize) -> Vec<f64> {
        (0..self.input_dim)
            .map(|i| self.components[i * self.output_dim + j])
            .collect()
    }

    /// `componentsᵀ · (v − mean)`.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>, ExpertError> {
        if v.len() != self.input_dim {
            return Err(ExpertError::Dimension {
                expected: self.input_dim,
                got: v.len(),
            });
        }
        let mut out = vec![0.0; self.output_dim];
        for (i, (&x, &m)) in v.iter().zip(&self.mean).enumerate() {
            let c = x - m;
            let row = &self.components[i * self.output_dim..(i + 1) * self.output_dim];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += c * w;
            }
        }
        Ok(out)
    }

    /// `mean + components · y`.
    pub fn unproject(&self, y: &[f64]) -> Result<Vec<f64>, ExpertError> {
        if y.len() != self.output_dim {
            return Err(ExpertError::Dimension {
                expected: self.output_dim,
                got: y.len(),
            });
        }
        Ok((0..self.input_dim)
            .map(|i| {
                let row = &self.components[i * self.output_dim..(i + 1) * self.output_dim];
                self.mean[i] + row.iter().zip(y).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect())
    }
}

/// Fits the top-`d` principal components of `samples` (sample covariance
/// with the `n − 1` denominator), sorted by explained variance.
///
/// When the data has rank below `d` the trailing components still form an
/// orthonormal set and report zero variance.
pub fn pca_fit(samples: &[Vec<f64>], d: usize) -> Result<PcaProjection, ExpertError> {
    let weighted: Vec<(&[f64], f64)> = samples.iter().map(|s| (s.as_slice(), 1.0)).collect();
    pca_fit_weighted(&weighted, d)
}

/// Same as [`pca_fit`] where each distinct sample carries a repeat count.
pub fn pca_fit_weighted(samples: &[(&[f64], f64)], d: usize) -> Result<PcaProjection, ExpertError> {
    let total: f64 = samples.iter().map(|(_, w)| w).sum();
    if samples.is_empty() || total < 2.0 {
        return Err(ExpertError::Fit("need at least two samples".into()));
    }
    let dim = samples[0].0.len();
    if samples.iter().any(|(s, _)| s.len() != dim) {
        return Err(ExpertError::Fit("samples differ in dimension".into()));
    }
    if d == 0 || d > dim {
        return Err(ExpertError::Fit(format!(
            "cannot keep {d} components of {dim}-dim data"
        )));
    }
    let mut mean = vec![0.0; dim];
    for (s, w) in samples {
        for (m, v) in mean.iter_mut().zip(s.iter()) {
            *m += w * v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= total);

    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut centered = vec![0.0; dim];
    for (s, w) in samples {
        for ((c, v), m) in centered.iter_mut().zip(s.iter()).zip(&mean) {
            *c = v - m;
        }
        for i in 0..dim {
            let ci = centered[i] * w;
            if ci == 0.0 {
                continue;
            }
            for j in i..dim {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / (total - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    // descending variance, index order breaks ties deterministically
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let mut components = vec![0.0; dim * d];
    let mut explained_variance = Vec::with_capacity(d);
    for (j, &k) in order.iter().take(d).enumerate() {
        let col = eig.eigenvectors.column(k);
        // sign convention: largest-magnitude entry positive
        let pivot = (0..dim)
            .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a)))
            .unwrap();
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        let norm = col.norm();
        for i in 0..dim {
            components[i * d + j] = sign * col[i] / norm;
        }
        explained_variance.push(eig.eigenvalues[k].max(0.0));
    }
    // clamping can only zero a tail, so the order stays non-increasing
    Ok(PcaProjection {
        mean,
        components,
        explained_variance,
        input_dim: dim,
        output_dim: d,
    })
}
