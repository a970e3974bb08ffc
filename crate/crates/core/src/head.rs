//! Soft-argmax keypoint head over a grid of patch embeddings.
//!
//! Each keypoint `k` scores every patch with `w_k · z_p`, softmaxes the
//! scores over patches, and returns the attention-weighted mean of the patch
//! centres. The same attention pools patch embeddings into per-keypoint and
//! image-level summaries.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{read_matrix, write_matrix};
use crate::error::{Error, Result};
use crate::rng;

/// Huber breakpoint on [0, 1]-normalized coordinates: 8 pixels of a 224 crop.
pub const DEFAULT_HUBER_DELTA: f64 = 8.0 / 224.0;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    /// `n_kp × n_dims`, one row per keypoint.
    pub w: Array2<f64>,
    pub grid: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct HeadSidecar {
    n_kp: usize,
    grid: usize,
}

impl HeadWeights {
    pub fn new(w: Array2<f64>, grid: usize) -> Result<Self> {
        if w.nrows() == 0 || grid == 0 {
            return Err(Error::InvalidConfig("head needs n_kp ≥ 1 and grid ≥ 1".into()));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: 0 });
        }
        Ok(HeadWeights { w, grid })
    }

    pub fn zeros(n_kp: usize, n_dims: usize, grid: usize) -> Self {
        HeadWeights {
            w: Array2::zeros((n_kp, n_dims)),
            grid,
        }
    }

    /// Seeded N(0, 0.01²) initialization.
    pub fn init(n_kp: usize, n_dims: usize, grid: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let normal = Normal::new(0.0, 0.01).unwrap();
        let w = Array2::from_shape_simple_fn((n_kp, n_dims), || normal.sample(&mut rng));
        HeadWeights { w, grid }
    }

    pub fn n_kp(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_dims(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_patches(&self) -> usize {
        self.grid * self.grid
    }

    /// Writes `<path>` as an EMBZ dictionary-kind matrix and `<path>.json`
    /// holding `{"n_kp", "grid"}`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_matrix(self.w.view(), path)?;
        let sidecar = HeadSidecar {
            n_kp: self.n_kp(),
            grid: self.grid,
        };
        std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let w = read_matrix(path)?;
        let sidecar: HeadSidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
        if sidecar.n_kp != w.nrows() {
            return Err(Error::SizeMismatch(format!(
                "sidecar declares {} keypoints, matrix has {} rows",
                sidecar.n_kp,
                w.nrows()
            )));
        }
        HeadWeights::new(w, sidecar.grid)
    }

    fn check(&self, z: &ArrayView2<'_, f64>) -> Result<()> {
        if z.ncols() != self.n_dims() {
            return Err(Error::DimMismatch {
                expected: self.n_dims(),
                got: z.ncols(),
            });
        }
        if z.nrows() != self.n_patches() {
            return Err(Error::DimMismatch {
                expected: self.n_patches(),
                got: z.nrows(),
            });
        }
        Ok(())
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Row-major normalized patch centres `((col + 0.5) / grid, (row + 0.5) / grid)`.
pub fn patch_centers(grid: usize) -> Vec<[f64; 2]> {
    let g = grid as f64;
    (0..grid)
        .flat_map(|r| (0..grid).map(move |c| [(c as f64 + 0.5) / g, (r as f64 + 0.5) / g]))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointPrediction {
    /// `(u, v)` per keypoint.
    pub coords: Vec<[f64; 2]>,
    /// `n_patches × n_kp`; each column sums to one.
    pub alphas: Array2<f64>,
}

/// Column-wise softmax with max subtraction. Patches with `mask[p] == false`
/// get zero weight.
fn softmax_columns(logits: &Array2<f64>, mask: Option<&[bool]>) -> Array2<f64> {
    let mut out = Array2::zeros(logits.dim());
    for (k, col) in logits.axis_iter(Axis(1)).enumerate() {
        let keep = |p: usize| mask.is_none_or(|m| m[p]);
        let max = col
            .iter()
            .enumerate()
            .filter(|(p, _)| keep(*p))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (p, &v) in col.iter().enumerate() {
            if keep(p) {
                let e = (v - max).exp();
                out[[p, k]] = e;
                total += e;
            }
        }
        out.column_mut(k).mapv_inplace(|e| e / total);
    }
    out
}

fn attention(z: &ArrayView2<'_, f64>, weights: &HeadWeights, mask: Option<&[bool]>) -> Array2<f64> {
    let logits = z.dot(&weights.w.t());
    softmax_columns(&logits, mask)
}

fn weighted_centers(alphas: &Array2<f64>, centers: &[[f64; 2]]) -> Vec<[f64; 2]> {
    alphas
        .axis_iter(Axis(1))
        .map(|col| {
            let mut uv = [0.0, 0.0];
            for (a, c) in col.iter().zip(centers) {
                uv[0] += a * c[0];
                uv[1] += a * c[1];
            }
            uv
        })
        .collect()
}

/// Soft-argmax keypoint prediction for one image (`grid² × n_dims` patches).
pub fn predict(z: ArrayView2<'_, f64>, weights: &HeadWeights) -> Result<KeypointPrediction> {
    weights.check(&z)?;
    let alphas = attention(&z, weights, None);
    let coords = weighted_centers(&alphas, &patch_centers(weights.grid));
    Ok(KeypointPrediction { coords, alphas })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledSummary {
    /// `n_kp × n_dims` attention-pooled embedding per keypoint.
    pub per_keypoint: Array2<f64>,
    /// Mean of the per-keypoint summaries over all keypoints.
    pub summary: Array1<f64>,
}

/// Attention-pooled summaries `s_k = Σ_p α_pk z_p` and `s = mean_k s_k`.
pub fn pooled_summaries(z: ArrayView2<'_, f64>, weights: &HeadWeights) -> Result<PooledSummary> {
    weights.check(&z)?;
    Ok(pool(&z, &attention(&z, weights, None)))
}

/// Like [`pooled_summaries`], but the softmax runs over the patches with
/// `include[p] == true` only (used to leave the cue patch out of the pool).
pub fn pooled_summaries_masked(
    z: ArrayView2<'_, f64>,
    weights: &HeadWeights,
    include: &[bool],
) -> Result<PooledSummary> {
    weights.check(&z)?;
    if include.len() != z.nrows() {
        return Err(Error::DimMismatch {
            expected: z.nrows(),
            got: include.len(),
        });
    }
    if !include.iter().any(|&b| b) {
        return Err(Error::InvalidConfig("no patch left to pool".into()));
    }
    Ok(pool(&z, &attention(&z, weights, Some(include))))
}

fn pool(z: &ArrayView2<'_, f64>, alphas: &Array2<f64>) -> PooledSummary {
    let per_keypoint = alphas.t().dot(z);
    let summary = per_keypoint.mean_axis(Axis(0)).expect("n_kp ≥ 1");
    PooledSummary { per_keypoint, summary }
}

fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn huber_slope(r: f64, delta: f64) -> f64 {
    r.clamp(-delta, delta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuberLoss {
    pub value: f64,
    /// False when no keypoint was visible; `value` is then 0.
    pub any_visible: bool,
}

/// Mean Huber loss over visible keypoints and both coordinates.
pub fn huber_loss(pred: &[[f64; 2]], target: &[[f64; 2]], visible: &[bool], delta: f64) -> HuberLoss {
    let mut total = 0.0;
    let mut n = 0usize;
    for ((p, t), &vis) in pred.iter().zip(target).zip(visible) {
        if vis {
            total += huber(p[0] - t[0], delta) + huber(p[1] - t[1], delta);
            n += 2;
        }
    }
    if n == 0 {
        return HuberLoss {
            value: 0.0,
            any_visible: false,
        };
    }
    HuberLoss {
        value: total / n as f64,
        any_visible: true,
    }
}

/// One image's patches with its keypoint targets.
#[derive(Debug, Clone)]
pub struct HeadSample {
    pub patches: Array2<f64>,
    pub target: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

/// Loss and analytic gradient of the Huber loss of `predict(z, W)` with
/// respect to `W`.
pub fn loss_and_gradient(
    z: ArrayView2<'_, f64>,
    weights: &HeadWeights,
    target: &[[f64; 2]],
    visible: &[bool],
    delta: f64,
) -> Result<(HuberLoss, Array2<f64>)> {
    if target.len() != weights.n_kp() || visible.len() != weights.n_kp() {
        return Err(Error::DimMismatch {
            expected: weights.n_kp(),
            got: target.len().min(visible.len()),
        });
    }
    let pred = predict(z, weights)?;
    let loss = huber_loss(&pred.coords, target, visible, delta);
    let mut grad = Array2::zeros(weights.w.dim());
    if !loss.any_visible {
        return Ok((loss, grad));
    }
    let n_terms = 2.0 * visible.iter().filter(|&&v| v).count() as f64;
    let centers = patch_centers(weights.grid);
    for k in (0..weights.n_kp()).filter(|&k| visible[k]) {
        let uv = pred.coords[k];
        let du = huber_slope(uv[0] - target[k][0], delta) / n_terms;
        let dv = huber_slope(uv[1] - target[k][1], delta) / n_terms;
        // d coord / d logit_p = alpha_p (c_p - coord)
        let g_logit: Array1<f64> = pred
            .alphas
            .column(k)
            .iter()
            .zip(&centers)
            .map(|(a, c)| a * (du * (c[0] - uv[0]) + dv * (c[1] - uv[1])))
            .collect();
        grad.row_mut(k).assign(&g_logit.dot(&z));
    }
    Ok((loss, grad))
}

pub fn head_gradient(
    z: ArrayView2<'_, f64>,
    weights: &HeadWeights,
    target: &[[f64; 2]],
    visible: &[bool],
    delta: f64,
) -> Result<Array2<f64>> {
    loss_and_gradient(z, weights, target, visible, delta).map(|(_, g)| g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitHeadConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub delta: f64,
}

impl Default for FitHeadConfig {
    fn default() -> Self {
        FitHeadConfig {
            lr: 1.0,
            epochs: 500,
            seed: 0,
            delta: DEFAULT_HUBER_DELTA,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadFit {
    pub weights: HeadWeights,
    /// Mean training loss before each epoch's step, plus the final loss.
    pub losses: Vec<f64>,
}

/// Mean loss and gradient over images, reduced in image order.
pub fn batch_loss_and_gradient(
    samples: &[HeadSample],
    weights: &HeadWeights,
    delta: f64,
) -> Result<(f64, Array2<f64>)> {
    let per_image: Vec<(HuberLoss, Array2<f64>)> = samples
        .par_iter()
        .map(|s| loss_and_gradient(s.patches.view(), weights, &s.target, &s.visible, delta))
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    let mut grad = Array2::zeros(weights.w.dim());
    let mut loss = 0.0;
    for (l, g) in per_image {
        loss += l.value;
        grad += &g;
    }
    Ok((loss / n, grad / n))
}

/// Full-batch gradient descent on the head alone with a fixed step.
pub fn fit_head(samples: &[HeadSample], n_kp: usize, grid: usize, cfg: &FitHeadConfig) -> Result<HeadFit> {
    let first = samples.first().ok_or(Error::EmptyTrainingSet)?;
    let n_dims = first.patches.ncols();
    if let Some(bad) = samples.iter().find(|s| s.patches.dim() != (grid * grid, n_dims)) {
        return Err(Error::DimMismatch {
            expected: grid * grid,
            got: bad.patches.nrows(),
        });
    }
    let mut weights = HeadWeights::init(n_kp, n_dims, grid, cfg.seed);
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    for _ in 0..cfg.epochs {
        let (loss, grad) = batch_loss_and_gradient(samples, &weights, cfg.delta)?;
        losses.push(loss);
        weights.w.scaled_add(-cfg.lr, &grad);
    }
    losses.push(batch_loss_and_gradient(samples, &weights, cfg.delta)?.0);
    Ok(HeadFit { weights, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::StandardNormal;

    fn single_dim_head(grid: usize) -> HeadWeights {
        HeadWeights::new(array![[1.0]], grid).unwrap()
    }

    #[test]
    fn centers_closed_form() {
        assert_eq!(patch_centers(1), vec![[0.5, 0.5]]);
        assert_eq!(
            patch_centers(2),
            vec![[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]]
        );
        let c16 = patch_centers(16);
        assert_eq!(c16.len(), 256);
        assert_eq!(c16[0], [0.03125, 0.03125]);
    }

    #[test]
    fn uniform_logits_give_image_centre() {
        let mut r = rng::seeded(4);
        let z = Array2::from_shape_simple_fn((256, 6), || StandardNormal.sample(&mut r));
        let pred = predict(z.view(), &HeadWeights::zeros(4, 6, 16)).unwrap();
        for uv in pred.coords {
            assert_eq!(uv, [0.5, 0.5]);
        }
    }

    #[test]
    fn saturated_logit_snaps_to_patch_centre() {
        let mut z = Array2::zeros((16, 1));
        z[[9, 0]] = 1e4;
        let pred = predict(z.view(), &single_dim_head(4)).unwrap();
        let c = patch_centers(4)[9];
        assert!((pred.coords[0][0] - c[0]).abs() < 1e-6);
        assert!((pred.coords[0][1] - c[1]).abs() < 1e-6);
    }

    #[test]
    fn ln3_logit_hand_computed() {
        let z = array![[0.0], [3f64.ln()], [0.0], [0.0]];
        let pred = predict(z.view(), &single_dim_head(2)).unwrap();
        let expected = [1.0 / 6.0, 0.5, 1.0 / 6.0, 1.0 / 6.0];
        for (a, e) in pred.alphas.column(0).iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
        // u = (0.25 + 0.25 + 0.75) / 6 + 0.75 / 2, v = 0.25 / 6 + 0.25 / 2 + 1.5 / 6
        assert!((pred.coords[0][0] - 7.0 / 12.0).abs() < 1e-15);
        assert!((pred.coords[0][1] - 5.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn pooled_summary_of_identical_rows_is_that_row() {
        let z = Array2::from_shape_fn((4, 3), |(_, d)| d as f64 - 1.0);
        let mut r = rng::seeded(1);
        let w = Array2::from_shape_simple_fn((2, 3), || StandardNormal.sample(&mut r));
        let s = pooled_summaries(z.view(), &HeadWeights::new(w, 2).unwrap()).unwrap();
        for v in s.per_keypoint.rows() {
            assert!(v.iter().zip([-1.0, 0.0, 1.0]).all(|(a, b)| (a - b).abs() < 1e-15));
        }
        assert!(s
            .summary
            .iter()
            .zip([-1.0, 0.0, 1.0])
            .all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn pooled_summary_uniform_is_column_mean() {
        let z = array![[1.0, 2.0], [3.0, 4.0], [5.0, -6.0], [7.0, 0.0]];
        let s = pooled_summaries(z.view(), &HeadWeights::zeros(3, 2, 2)).unwrap();
        assert_eq!(s.summary.to_vec(), vec![4.0, 0.0]);
    }

    #[test]
    fn pooled_summary_ln3_weights_hand_computed() {
        // Column 0 drives the logits (ln3 on patch 1); column 1 is carried.
        let z = array![[0.0, 6.0], [3f64.ln(), 0.0], [0.0, -6.0], [0.0, 12.0]];
        let head = HeadWeights::new(array![[1.0, 0.0]], 2).unwrap();
        let s = pooled_summaries(z.view(), &head).unwrap();
        // (6 - 6 + 12) / 6 = 2
        assert!((s.summary[1] - 2.0).abs() < 1e-14);
        assert!((s.summary[0] - 3f64.ln() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn masked_pool_ignores_excluded_patch() {
        let z = array![[100.0], [1.0], [2.0], [3.0]];
        let head = HeadWeights::zeros(1, 1, 2);
        let s = pooled_summaries_masked(z.view(), &head, &[false, true, true, true]).unwrap();
        assert_eq!(s.summary[0], 2.0);
    }

    #[test]
    fn huber_values() {
        let d = DEFAULT_HUBER_DELTA;
        let zero = huber_loss(&[[0.3, 0.4]], &[[0.3, 0.4]], &[true], d);
        assert_eq!(zero.value, 0.0);
        // residual exactly delta on one coordinate: (δ²/2 + 0) / 2
        let at = huber_loss(&[[0.5 + d, 0.5]], &[[0.5, 0.5]], &[true], d);
        assert!((at.value - d * d / 4.0).abs() < 1e-15);
        assert!((huber(d, d) - d * d / 2.0).abs() < 1e-18);
        assert!((huber(0.1, d) - d * (0.1 - d / 2.0)).abs() < 1e-16);
        let none = huber_loss(&[[0.1, 0.1]], &[[0.9, 0.9]], &[false], d);
        assert!(!none.any_visible && none.value == 0.0);
    }

    #[test]
    fn gradient_zero_at_target_and_for_invisible() {
        let mut r = rng::seeded(2);
        let z = Array2::from_shape_simple_fn((4, 3), || StandardNormal.sample(&mut r));
        let w = Array2::from_shape_simple_fn((2, 3), || StandardNormal.sample(&mut r));
        let head = HeadWeights::new(w, 2).unwrap();
        let target = predict(z.view(), &head).unwrap().coords;
        let g = head_gradient(z.view(), &head, &target, &[true, true], DEFAULT_HUBER_DELTA).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
        let g = head_gradient(z.view(), &head, &[[0.0, 0.0]; 2], &[false, true], DEFAULT_HUBER_DELTA).unwrap();
        assert!(g.row(0).iter().all(|&v| v == 0.0));
        assert!(g.row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn saturated_keypoint_has_vanishing_gradient() {
        let mut z = Array2::zeros((4, 1));
        z[[2, 0]] = 1e4;
        let g = head_gradient(
            z.view(),
            &single_dim_head(2),
            &[[0.9, 0.1]],
            &[true],
            DEFAULT_HUBER_DELTA,
        )
        .unwrap();
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-6);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let z = Array2::<f64>::zeros((4, 5));
        assert!(matches!(
            predict(z.view(), &HeadWeights::zeros(1, 4, 2)),
            Err(Error::DimMismatch { expected: 4, got: 5 })
        ));
        let z = Array2::<f64>::zeros((5, 4));
        assert!(predict(z.view(), &HeadWeights::zeros(1, 4, 2)).is_err());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let sample = HeadSample {
            patches: Array2::ones((4, 3)),
            target: vec![[0.5, 0.5]],
            visible: vec![true],
        };
        let cfg = FitHeadConfig {
            epochs: 0,
            seed: 5,
            ..Default::default()
        };
        let fit = fit_head(&[sample], 1, 2, &cfg).unwrap();
        assert_eq!(fit.weights, HeadWeights::init(1, 3, 2, 5));
        assert!(fit_head(&[], 1, 2, &cfg).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.embz");
        let head = HeadWeights::new(array![[0.5, -0.25], [1.0, 2.0]], 4).unwrap();
        head.save(&path).unwrap();
        assert_eq!(HeadWeights::load(&path).unwrap(), head);
    }
}
