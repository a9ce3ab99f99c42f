//! Principal-component projection of representation trajectories.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{PlantsError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// `T × k` row-major projection.
    pub projection: Vec<f64>,
    /// `k` unit loading vectors of length `D`.
    pub components: Vec<Vec<f64>>,
    /// Fraction of total variance per component.
    pub explained: Vec<f64>,
    pub rows: usize,
}

impl Pca {
    pub fn k(&self) -> usize {
        self.components.len()
    }
}

/// Relative eigenvalue below which a direction counts as rank-deficient.
const RANK_TOL: f64 = 1e-12;

/// Projects a row-major `rows × dim` matrix onto its top `components`
/// principal axes. Each axis is signed so its largest-magnitude loading is
/// positive. Fewer axes are returned (with a warning) when the centred data
/// has lower rank.
pub fn trajectory_pca(data: &[f64], rows: usize, dim: usize, components: usize) -> Result<Pca> {
    if dim == 0 || data.len() != rows * dim {
        return Err(PlantsError::shape("trajectory_pca", &[data.len()], &[rows, dim]));
    }
    if rows <= components {
        return Err(PlantsError::invalid(format!("PCA needs more than {components} rows, got {rows}")));
    }
    let mut mean = vec![0.0; dim];
    for r in data.chunks(dim) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / rows as f64;
        }
    }
    let x = DMatrix::from_fn(rows, dim, |i, j| data[i * dim + j] - mean[j]);
    let cov = (x.transpose() * &x) / (rows as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let top = eig.eigenvalues[order[0]].max(0.0);

    let mut comps = Vec::new();
    let mut explained = Vec::new();
    for &j in order.iter().take(components) {
        let lam = eig.eigenvalues[j];
        if top == 0.0 || lam <= RANK_TOL * top {
            break;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        comps.push(v);
        explained.push(lam / total);
    }
    if comps.len() < components {
        log::warn!("PCA: data has rank {}, returning {} of {components} components", comps.len(), comps.len());
    }
    let k = comps.len();
    let mut projection = vec![0.0; rows * k];
    for i in 0..rows {
        for (c, v) in comps.iter().enumerate() {
            projection[i * k + c] = (0..dim).map(|j| x[(i, j)] * v[j]).sum();
        }
    }
    Ok(Pca {
        projection,
        components: comps,
        explained,
        rows,
    })
}
