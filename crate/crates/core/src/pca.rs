//! Principal components of prototype vectors, for map visualization.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::cellgrid::CellId;
use crate::error::{invalid, Result};
use crate::train::PrototypeTable;

/// Leading principal axes of a set of vectors.
#[derive(Debug, Clone)]
pub struct Pca {
    mean: Vec<f64>,
    /// Unit axes, strongest first.
    components: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl Pca {
    /// Fits `k` components to `rows` (each of length `dim`) from the sample
    /// covariance. Each axis is signed so its largest-magnitude loading is
    /// positive, the first such index on ties.
    pub fn fit(rows: &[&[f64]], dim: usize, k: usize) -> Result<Self> {
        let n = rows.len();
        if n < 3 {
            return Err(invalid(format!("PCA needs at least 3 vectors, got {n}")));
        }
        if k == 0 || k > dim {
            return Err(invalid(format!("cannot extract {k} components from dimension {dim}")));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(invalid(format!("row of length {} in a dimension-{dim} fit", r.len())));
        }
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r.iter()) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        let mut centered = vec![0.0; dim];
        for r in rows {
            for d in 0..dim {
                centered[d] = r[d] - mean[d];
            }
            for a in 0..dim {
                let ca = centered[a];
                for b in a..dim {
                    cov[(a, b)] += ca * centered[b];
                }
            }
        }
        let scale = 1.0 / (n - 1) as f64;
        for a in 0..dim {
            for b in a..dim {
                let v = cov[(a, b)] * scale;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]).then(x.cmp(&y)));
        let mut components = Vec::with_capacity(k);
        let mut variances = Vec::with_capacity(k);
        for &c in order.iter().take(k) {
            let mut axis: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let mut lead = 0;
            for d in 1..dim {
                if axis[d].abs() > axis[lead].abs() {
                    lead = d;
                }
            }
            if axis[lead] < 0.0 {
                axis.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(axis);
            variances.push(eig.eigenvalues[c].max(0.0));
        }
        Ok(Self {
            mean,
            components,
            variances,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    /// Variance explained by each component, non-increasing.
    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x.iter().zip(&self.mean)).map(|(w, (v, m))| w * (v - m)).sum())
            .collect()
    }
}

/// One prototype cell's position and its first three principal coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaRow {
    pub cell: CellId,
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub pc: [f64; 3],
}

/// Projects every prototype onto the table's three leading components.
pub fn prototype_pca(table: &PrototypeTable) -> Result<(Pca, Vec<PcaRow>)> {
    let rows: Vec<&[f64]> = (0..table.len()).map(|k| table.row(k)).collect();
    let pca = Pca::fit(&rows, table.dim(), 3)?;
    let out = table
        .ids()
        .iter()
        .zip(&rows)
        .map(|(cell, r)| {
            let p = pca.project(r);
            let c = cell.center();
            PcaRow {
                cell: *cell,
                lat_deg: c.lat_deg(),
                lon_deg: c.lon_deg(),
                pc: [p[0], p[1], p[2]],
            }
        })
        .collect();
    Ok((pca, out))
}
