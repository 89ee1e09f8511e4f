//! Question-guided multi-glimpse attention over a grid of region features.
//!
//! A scorer fusion operator with `d_out = g` maps `(q, region_i)` to one
//! score per glimpse. Each glimpse normalizes its scores over regions with a
//! softmax and sum-pools the regions; the `g` pooled vectors are
//! concatenated into a `g · d_v` visual vector.

use crate::error::{check_dim, Error, Result};
use crate::format::fmt_f64;
use crate::fusion::{FusionCache, FusionOperator, FusionParams, Scheme};
use crate::tensor::{axpy, dot, softmax, Matrix};

/// `G` region feature vectors of a common dimension, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionGrid {
    regions: Matrix,
}

impl RegionGrid {
    pub fn new(regions: Matrix) -> Self {
        RegionGrid { regions }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Ok(RegionGrid {
            regions: Matrix::from_rows(rows)?,
        })
    }

    pub fn count(&self) -> usize {
        self.regions.rows()
    }

    pub fn dim(&self) -> usize {
        self.regions.cols()
    }

    pub fn region(&self, i: usize) -> &[f64] {
        self.regions.row(i)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.regions
    }
}

/// Per-glimpse distributions over regions: `g × G`, rows sum to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    weights: Matrix,
}

impl AttentionMap {
    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn glimpses(&self) -> usize {
        self.weights.rows()
    }

    pub fn regions(&self) -> usize {
        self.weights.cols()
    }

    /// `g` lines of `G` comma-separated weights at 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for j in 0..self.glimpses() {
            let line: Vec<String> = self.weights.row(j).iter().map(|&w| fmt_f64(w)).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// L1 distance between two maps of the same shape.
    pub fn l1_distance(&self, other: &AttentionMap) -> f64 {
        self.weights
            .data()
            .iter()
            .zip(other.weights.data())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

/// Per-glimpse softmax of a `g × G` score matrix.
pub fn normalize_scores(scores: &Matrix) -> AttentionMap {
    let mut weights = scores.clone();
    for j in 0..scores.rows() {
        let p = softmax(scores.row(j));
        weights.row_mut(j).copy_from_slice(&p);
    }
    AttentionMap { weights }
}

fn check_scorer(scorer: &FusionOperator, grid: &RegionGrid, q: &[f64]) -> Result<()> {
    check_dim("attention scorer d_q", scorer.config().d_q, q.len())?;
    check_dim("attention region dim", scorer.config().d_v, grid.dim())
}

/// Pre-softmax scores `g × G`. With `keep = Some(r)` only rank `r` of a
/// Mutan scorer contributes.
pub fn scores(scorer: &FusionOperator, grid: &RegionGrid, q: &[f64], keep: Option<usize>) -> Result<Matrix> {
    check_scorer(scorer, grid, q)?;
    let g = scorer.config().d_out;
    let mut s = Matrix::zeros(g, grid.count());
    for i in 0..grid.count() {
        let (y, _) = match keep {
            None => scorer.forward(q, grid.region(i))?,
            Some(r) => scorer.forward_masked(q, grid.region(i), r)?,
        };
        for (j, &yj) in y.iter().enumerate() {
            s.set(j, i, yj);
        }
    }
    Ok(s)
}

/// Concatenation over glimpses of `Σᵢ w[j, i] · regionᵢ`, summed left to right.
pub fn pool(map: &AttentionMap, grid: &RegionGrid) -> Vec<f64> {
    let d_v = grid.dim();
    let mut pooled = vec![0.0; map.glimpses() * d_v];
    for (j, chunk) in pooled.chunks_mut(d_v).enumerate() {
        for i in 0..grid.count() {
            axpy(map.weights.get(j, i), grid.region(i), chunk);
        }
    }
    pooled
}

pub fn attend(scorer: &FusionOperator, grid: &RegionGrid, q: &[f64]) -> Result<(AttentionMap, Vec<f64>)> {
    let map = normalize_scores(&scores(scorer, grid, q, None)?);
    let pooled = pool(&map, grid);
    Ok((map, pooled))
}

/// One attention map per rank of a Mutan scorer, each computed with every
/// other `z_r` switched off.
pub fn attention_ablation_maps(scorer: &FusionOperator, grid: &RegionGrid, q: &[f64]) -> Result<Vec<AttentionMap>> {
    if scorer.scheme() != Scheme::Mutan {
        return Err(Error::Unsupported(format!(
            "attention ablation needs a mutan scorer, got {}",
            scorer.scheme()
        )));
    }
    (0..scorer.config().rank)
        .map(|r| Ok(normalize_scores(&scores(scorer, grid, q, Some(r))?)))
        .collect()
}

/// Forward state kept for [`attend_backward`].
#[derive(Clone, Debug)]
pub struct AttentionCache {
    map: AttentionMap,
    region_caches: Vec<FusionCache>,
}

impl AttentionCache {
    pub fn map(&self) -> &AttentionMap {
        &self.map
    }
}

pub fn attend_with_cache(
    scorer: &FusionOperator,
    grid: &RegionGrid,
    q: &[f64],
) -> Result<(Vec<f64>, AttentionCache)> {
    check_scorer(scorer, grid, q)?;
    let g = scorer.config().d_out;
    let mut s = Matrix::zeros(g, grid.count());
    let mut region_caches = Vec::with_capacity(grid.count());
    for i in 0..grid.count() {
        let (y, cache) = scorer.forward(q, grid.region(i))?;
        for (j, &yj) in y.iter().enumerate() {
            s.set(j, i, yj);
        }
        region_caches.push(cache);
    }
    let map = normalize_scores(&s);
    let pooled = pool(&map, grid);
    Ok((pooled, AttentionCache { map, region_caches }))
}

/// Backpropagates `∂L/∂pooled` through pooling, the softmax and the scorer.
/// Scorer parameter gradients are accumulated into `grads`; returns `∂L/∂q`.
pub fn attend_backward(
    scorer: &FusionOperator,
    grid: &RegionGrid,
    cache: &AttentionCache,
    d_pooled: &[f64],
    grads: &mut FusionParams,
) -> Result<Vec<f64>> {
    let g = cache.map.glimpses();
    let d_v = grid.dim();
    check_dim("attention pooled gradient", g * d_v, d_pooled.len())?;
    let n = grid.count();
    let mut d_scores = Matrix::zeros(g, n);
    for j in 0..g {
        let dp = &d_pooled[j * d_v..(j + 1) * d_v];
        let w = cache.map.weights.row(j);
        let dw: Vec<f64> = (0..n).map(|i| dot(dp, grid.region(i))).collect();
        let mean = dot(w, &dw);
        for i in 0..n {
            d_scores.set(j, i, w[i] * (dw[i] - mean));
        }
    }
    let mut d_q = vec![0.0; scorer.config().d_q];
    let mut d_y = vec![0.0; g];
    for (i, rc) in cache.region_caches.iter().enumerate() {
        for (j, dy) in d_y.iter_mut().enumerate() {
            *dy = d_scores.get(j, i);
        }
        let (dq_i, _) = scorer.backward_into(rc, &d_y, grads)?;
        axpy(1.0, &dq_i, &mut d_q);
    }
    Ok(d_q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionConfig;

    fn concat_scorer(w: Vec<f64>, d_q: usize, d_v: usize, g: usize) -> FusionOperator {
        let cfg = FusionConfig::new(Scheme::Concat, d_q, d_v, g);
        FusionOperator::from_params(
            cfg,
            FusionParams::Concat {
                w: Matrix::from_vec(g, d_q + d_v, w).unwrap(),
            },
        )
        .unwrap()
    }

    #[test]
    fn single_region_gets_full_weight() {
        let scorer = FusionOperator::init(
            FusionConfig::new(Scheme::Mutan, 3, 2, 2)
                .with_projections(2, 2, 2)
                .with_rank(1)
                .with_seed(4),
        )
        .unwrap();
        let grid = RegionGrid::from_rows(&[vec![0.5, -1.5]]).unwrap();
        let (map, pooled) = attend(&scorer, &grid, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(map.weights().data(), &[1.0, 1.0]);
        assert_eq!(pooled, vec![0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn uniform_scores_pool_the_mean() {
        // scorer ignores the region: only q columns are nonzero
        let scorer = concat_scorer(vec![1.0, 0.0, 0.0, 2.0, 0.0, 0.0], 1, 2, 2);
        let grid = RegionGrid::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 1.0]]).unwrap();
        let (map, pooled) = attend(&scorer, &grid, &[0.7]).unwrap();
        for &w in map.weights().data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        let mean = [3.0, 3.0];
        for (p, m) in pooled.iter().zip(mean.iter().cycle()) {
            assert!((p - m).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_weights_by_hand() {
        let scores = Matrix::from_vec(1, 2, vec![3f64.ln(), 0.0]).unwrap();
        let map = normalize_scores(&scores);
        assert!((map.weights().get(0, 0) - 0.75).abs() < 1e-15);
        assert!((map.weights().get(0, 1) - 0.25).abs() < 1e-15);
        let grid = RegionGrid::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let pooled = pool(&map, &grid);
        assert!((pooled[0] - 0.75).abs() < 1e-15 && (pooled[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn ablation_rejects_non_mutan() {
        let scorer = concat_scorer(vec![1.0; 3], 1, 2, 1);
        let grid = RegionGrid::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            attention_ablation_maps(&scorer, &grid, &[1.0]),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let scorer = concat_scorer(vec![1.0; 3], 1, 2, 1);
        let grid = RegionGrid::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(attend(&scorer, &grid, &[1.0]).is_err());
    }

    #[test]
    fn csv_has_one_line_per_glimpse() {
        let map = normalize_scores(&Matrix::from_vec(2, 3, vec![0.0; 6]).unwrap());
        let csv = map.to_csv();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 3);
        let parsed: f64 = csv.lines().next().unwrap().split(',').next().unwrap().parse().unwrap();
        assert_eq!(parsed, 1.0 / 3.0);
    }
}
