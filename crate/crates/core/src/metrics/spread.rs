//! Class separability and spread of representations.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominators below this are flagged degenerate.
pub const DEGENERATE_EPS: f64 = 1e-12;

fn groups(x: &Tensor, labels: &[usize]) -> Result<BTreeMap<usize, Vec<usize>>> {
    if x.rank() != 2 || x.rows() != labels.len() {
        return Err(Error::InvalidShape {
            op: "class_groups",
            lhs: x.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        g.entry(l).or_default().push(i);
    }
    Ok(g)
}

fn centroid(x: &Tensor, idx: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; x.cols()];
    for &i in idx {
        m.iter_mut().zip(x.row(i)).for_each(|(a, v)| *a += v);
    }
    m.iter_mut().for_each(|a| *a /= idx.len() as f64);
    m
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdaPair {
    pub from: usize,
    pub to: usize,
    pub ratio: f64,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdaReport {
    pub pairs: Vec<LdaPair>,
    /// Median over non-degenerate pairs; `None` when every pair is degenerate.
    pub median: Option<f64>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// For each ordered class pair `(k, k′)`: `‖μ_k − μ_k′‖²` over the sum of
/// squared distances between unordered pairs of points in class `k`.
pub fn fisher_lda(x: &Tensor, labels: &[usize]) -> Result<LdaReport> {
    let g = groups(x, labels)?;
    if g.len() < 2 {
        return Err(Error::contract("fisher ratio needs at least two classes"));
    }
    if let Some((l, _)) = g.iter().find(|(_, idx)| idx.len() < 2) {
        return Err(Error::contract(format!("class {l} has fewer than two points")));
    }
    let stats: Vec<(usize, Vec<f64>, f64)> = g
        .iter()
        .map(|(&l, idx)| {
            let mu = centroid(x, idx);
            // Σ_{i<j} ‖f_i − f_j‖² = N Σ_i ‖f_i − μ‖²
            let within = idx.len() as f64 * idx.iter().map(|&i| sq_dist(x.row(i), &mu)).sum::<f64>();
            (l, mu, within)
        })
        .collect();
    let mut pairs = Vec::new();
    for (a, mu_a, within) in &stats {
        for (b, mu_b, _) in &stats {
            if a == b {
                continue;
            }
            let num = sq_dist(mu_a, mu_b);
            let degenerate = *within < DEGENERATE_EPS;
            pairs.push(LdaPair {
                from: *a,
                to: *b,
                ratio: if degenerate { f64::INFINITY } else { num / within },
                degenerate,
            });
        }
    }
    let m = median(pairs.iter().filter(|p| !p.degenerate).map(|p| p.ratio).collect());
    Ok(LdaReport { pairs, median: m })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    /// `(label, σ²)` per class.
    pub per_class: Vec<(usize, f64)>,
    pub mean_per_class: f64,
    /// Over every point regardless of label.
    pub all_points: f64,
}

/// `1/(2N²) Σ_i Σ_j ‖f_i − f_j‖²` evaluated as written.
pub fn pairwise_variance(x: &Tensor, idx: &[usize]) -> f64 {
    let n = idx.len() as f64;
    if idx.is_empty() {
        return 0.0;
    }
    let total: f64 = idx
        .par_iter()
        .map(|&i| idx.iter().map(|&j| sq_dist(x.row(i), x.row(j))).sum::<f64>())
        .sum();
    total / (2.0 * n * n)
}

pub fn class_variance(x: &Tensor, labels: &[usize]) -> Result<VarianceReport> {
    let g = groups(x, labels)?;
    if g.is_empty() {
        return Err(Error::contract("no points"));
    }
    let per_class: Vec<(usize, f64)> = g.iter().map(|(&l, idx)| (l, pairwise_variance(x, idx))).collect();
    let mean = per_class.iter().map(|(_, v)| v).sum::<f64>() / per_class.len() as f64;
    let all: Vec<usize> = (0..x.rows()).collect();
    Ok(VarianceReport {
        per_class,
        mean_per_class: mean,
        all_points: pairwise_variance(x, &all),
    })
}
