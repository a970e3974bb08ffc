//! Out-of-model-scope detection from the atom support of image summaries.
//!
//! `p(IMS | a) = σ(b + Σ_j β_j a_j)` with `b ≤ 0` and `β ≥ 0`, fitted by
//! minimizing mean binary cross-entropy plus `λ Σ β_j`. With `β ≥ 0` the L1
//! penalty is linear, so the problem is smooth and box-constrained; it is
//! solved by spectral projected gradient with Armijo backtracking.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atoms::AtomLabel;
use crate::data::{Dictionary, EmbeddingSet};
use crate::error::{Error, Result};
use crate::head::{pooled_summaries_masked, HeadWeights};
use crate::numeric::{compensated_sum, sigmoid, softplus};
use crate::pursuit::matching_pursuit;
use crate::rng::permutation;

pub const SELECTION_EPS: f64 = 1e-8;
pub const TRAIN_FRACTION: f64 = 0.7;

/// Atom support of the cue-free attention-pooled summary of one image.
pub fn summary_features(
    patches: ArrayView2<'_, f64>,
    is_cue: &[bool],
    weights: &HeadWeights,
    dict: &Dictionary,
    n_nnz: usize,
) -> Result<Vec<usize>> {
    let include: Vec<bool> = is_cue.iter().map(|&c| !c).collect();
    let pooled = pooled_summaries_masked(patches, weights, &include)?;
    let res = matching_pursuit(pooled.summary.view(), dict, n_nnz)?;
    Ok(res.code.atoms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFeatures {
    pub image_id: String,
    pub support: Vec<usize>,
    /// From the `label` metadata of the image's patches, when present.
    pub is_ims: Option<bool>,
}

/// Summary supports for every image in `set`, in first-appearance order.
pub fn image_features(
    set: &EmbeddingSet,
    weights: &HeadWeights,
    dict: &Dictionary,
    n_nnz: usize,
) -> Result<Vec<ImageFeatures>> {
    set.group_by_image()
        .par_iter()
        .map(|g| {
            let grid = set.patch_matrix(g, weights.grid)?;
            let support = summary_features(grid.patches.view(), &grid.is_cue, weights, dict, n_nnz)?;
            let is_ims = match set.meta()[g.items[0]].label.as_deref() {
                None => None,
                Some("ims") => Some(true),
                Some("ooms") => Some(false),
                Some(other) => {
                    return Err(Error::InvalidMeta(format!(
                        "image {}: label {other:?} is neither \"ims\" nor \"ooms\"",
                        g.image_id
                    )))
                }
            };
            Ok(ImageFeatures {
                image_id: g.image_id.clone(),
                support,
                is_ims,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OomsDataset {
    /// Sorted atom support per image (the non-zero columns of the binary feature row).
    pub supports: Vec<Vec<usize>>,
    pub labels: Vec<bool>,
    pub split: Vec<Split>,
    pub n_dicts: usize,
}

impl OomsDataset {
    /// Every image starts in the training split.
    pub fn new(supports: Vec<Vec<usize>>, labels: Vec<bool>, n_dicts: usize) -> Result<Self> {
        if supports.len() != labels.len() {
            return Err(Error::SizeMismatch(format!(
                "{} feature rows for {} labels",
                supports.len(),
                labels.len()
            )));
        }
        let mut supports = supports;
        for s in &mut supports {
            s.sort_unstable();
            s.dedup();
            if let Some(&j) = s.last() {
                if j >= n_dicts {
                    return Err(Error::UnknownAtom { atom: j, n_dicts });
                }
            }
        }
        let n = labels.len();
        Ok(OomsDataset {
            supports,
            labels,
            split: vec![Split::Train; n],
            n_dicts,
        })
    }

    pub fn from_features(features: &[ImageFeatures], n_dicts: usize) -> Result<Self> {
        let labels = features
            .iter()
            .map(|f| {
                f.is_ims
                    .ok_or_else(|| Error::InvalidMeta(format!("image {} has no ims/ooms label", f.image_id)))
            })
            .collect::<Result<_>>()?;
        Self::new(features.iter().map(|f| f.support.clone()).collect(), labels, n_dicts)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Seeded split stratified by label: `round(0.7·n_c)` of each class trains.
    pub fn with_stratified_split(mut self, seed: u64) -> Self {
        for class in [true, false] {
            let members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            let n_train = (members.len() as f64 * TRAIN_FRACTION).round() as usize;
            let order = permutation(members.len(), seed ^ u64::from(class));
            for (rank, &k) in order.iter().enumerate() {
                self.split[members[k]] = if rank < n_train { Split::Train } else { Split::Eval };
            }
        }
        self
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == which).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> OomsDataset {
        OomsDataset {
            supports: idx.iter().map(|&i| self.supports[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            split: idx.iter().map(|&i| self.split[i]).collect(),
            n_dicts: self.n_dicts,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OomsModel {
    pub bias: f64,
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct OomsModelJson {
    bias: f64,
    n_dicts: usize,
    weights: BTreeMap<usize, f64>,
    lambda: f64,
    seed: u64,
}

impl OomsModel {
    pub fn selected(&self) -> Vec<usize> {
        (0..self.weights.len())
            .filter(|&j| self.weights[j] > SELECTION_EPS)
            .collect()
    }

    pub fn logit(&self, support: &[usize]) -> f64 {
        self.bias + compensated_sum(support.iter().map(|&j| self.weights[j]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = OomsModelJson {
            bias: self.bias,
            n_dicts: self.weights.len(),
            weights: self
                .weights
                .iter()
                .enumerate()
                .filter(|(_, &w)| w != 0.0)
                .map(|(j, &w)| (j, w))
                .collect(),
            lambda: self.lambda,
            seed: self.seed,
        };
        std::fs::write(path, serde_json::to_vec_pretty(&json)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json: OomsModelJson = serde_json::from_slice(&std::fs::read(path)?)?;
        let mut weights = vec![0.0; json.n_dicts];
        for (j, w) in json.weights {
            *weights.get_mut(j).ok_or(Error::UnknownAtom {
                atom: j,
                n_dicts: json.n_dicts,
            })? = w;
        }
        if json.bias > 0.0 || weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidConfig("model violates b ≤ 0, β ≥ 0".into()));
        }
        Ok(OomsModel {
            bias: json.bias,
            weights,
            lambda: json.lambda,
            seed: json.seed,
        })
    }
}

/// IMS probability for a binary feature vector given as its support.
pub fn predict_ims(model: &OomsModel, support: &[usize]) -> Result<f64> {
    if let Some(&j) = support.iter().find(|&&j| j >= model.weights.len()) {
        return Err(Error::UnknownAtom {
            atom: j,
            n_dicts: model.weights.len(),
        });
    }
    Ok(sigmoid(model.logit(support)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OomsFitConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for OomsFitConfig {
    fn default() -> Self {
        OomsFitConfig {
            max_iter: 5000,
            tol: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub projected_gradient_inf: f64,
}

/// `mean_i BCE(y_i, σ(b + a_i·β)) + λ Σ β_j`, with `params = [b, β…]`.
pub fn objective(supports: &[Vec<usize>], labels: &[bool], lambda: f64, params: &[f64]) -> f64 {
    let n = labels.len() as f64;
    let bce = compensated_sum(supports.iter().zip(labels).map(|(s, &y)| {
        let eta = params[0] + s.iter().map(|&j| params[j + 1]).sum::<f64>();
        softplus(eta) - if y { eta } else { 0.0 }
    }));
    bce / n + lambda * compensated_sum(params[1..].iter().copied())
}

fn gradient(supports: &[Vec<usize>], labels: &[bool], lambda: f64, params: &[f64]) -> Vec<f64> {
    let n = labels.len() as f64;
    let mut g = vec![0.0; params.len()];
    for (s, &y) in supports.iter().zip(labels) {
        let eta = params[0] + s.iter().map(|&j| params[j + 1]).sum::<f64>();
        let r = sigmoid(eta) - if y { 1.0 } else { 0.0 };
        g[0] += r;
        for &j in s {
            g[j + 1] += r;
        }
    }
    g[0] /= n;
    for gj in &mut g[1..] {
        *gj = *gj / n + lambda;
    }
    g
}

fn project(params: &mut [f64]) {
    params[0] = params[0].min(0.0);
    for p in &mut params[1..] {
        *p = p.max(0.0);
    }
}

fn projected_gradient_inf(params: &[f64], g: &[f64]) -> f64 {
    let mut step: Vec<f64> = params.iter().zip(g).map(|(p, g)| p - g).collect();
    project(&mut step);
    params.iter().zip(&step).map(|(p, s)| (p - s).abs()).fold(0.0, f64::max)
}

/// Fits on the whole of `data` (callers pass the training subset).
pub fn fit_ooms(data: &OomsDataset, lambda: f64, cfg: &OomsFitConfig) -> Result<(OomsModel, FitDiagnostics)> {
    if !(lambda >= 0.0) {
        return Err(Error::NegativeLambda(lambda));
    }
    if data.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if data.labels.iter().all(|&y| y) || data.labels.iter().all(|&y| !y) {
        return Err(Error::SingleClass);
    }
    let (s, y) = (&data.supports, &data.labels);
    let f = |p: &[f64]| objective(s, y, lambda, p);

    let mut x = vec![0.0; data.n_dicts + 1];
    let mut fx = f(&x);
    let mut g = gradient(s, y, lambda, &x);
    let mut alpha = 1.0;
    let mut diag = FitDiagnostics {
        iterations: 0,
        converged: false,
        objective: fx,
        projected_gradient_inf: projected_gradient_inf(&x, &g),
    };
    for it in 0..cfg.max_iter {
        diag.iterations = it;
        diag.projected_gradient_inf = projected_gradient_inf(&x, &g);
        if diag.projected_gradient_inf <= cfg.tol {
            diag.converged = true;
            break;
        }
        let mut trial: Vec<f64> = x.iter().zip(&g).map(|(p, g)| p - alpha * g).collect();
        project(&mut trial);
        let d: Vec<f64> = trial.iter().zip(&x).map(|(t, p)| t - p).collect();
        let slope: f64 = d.iter().zip(&g).map(|(d, g)| d * g).sum();
        let mut t = 1.0;
        let mut next: Vec<f64>;
        let mut f_next;
        loop {
            next = x.iter().zip(&d).map(|(p, d)| p + t * d).collect();
            f_next = f(&next);
            if f_next <= fx + 1e-4 * t * slope || t < 1e-12 {
                break;
            }
            t *= 0.5;
        }
        if f_next > fx {
            break;
        }
        let g_next = gradient(s, y, lambda, &next);
        let step: Vec<f64> = next.iter().zip(&x).map(|(a, b)| a - b).collect();
        let dg: Vec<f64> = g_next.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = step.iter().zip(&dg).map(|(a, b)| a * b).sum();
        let ss: f64 = step.iter().map(|a| a * a).sum();
        alpha = if sy > 0.0 { (ss / sy).clamp(1e-10, 1e10) } else { 1e3 };
        x = next;
        fx = f_next;
        g = g_next;
        diag.iterations = it + 1;
    }
    if !diag.converged {
        diag.projected_gradient_inf = projected_gradient_inf(&x, &g);
        diag.converged = diag.projected_gradient_inf <= cfg.tol;
    }
    diag.objective = fx;
    Ok((
        OomsModel {
            bias: x[0],
            weights: x[1..].to_vec(),
            lambda,
            seed: cfg.seed,
        },
        diag,
    ))
}

/// Mann–Whitney AUROC with midranks for tied scores.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::SizeMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut k = i;
        while k + 1 < order.len() && scores[order[k + 1]] == scores[order[i]] {
            k += 1;
        }
        // Ranks i+1..=k+1 share their mean.
        let midrank = (i + k) as f64 / 2.0 + 1.0;
        rank_sum_pos += midrank * order[i..=k].iter().filter(|&&o| labels[o]).count() as f64;
        i = k + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub n_selected: usize,
    pub auroc: f64,
    /// Fraction of selected atoms labeled contentful; `None` when nothing is selected.
    pub content_fraction: Option<f64>,
    pub seed: u64,
}

/// Eval-split AUROC of `model` on `data`.
pub fn evaluate(model: &OomsModel, data: &OomsDataset) -> Result<f64> {
    let idx = data.indices(Split::Eval);
    if idx.is_empty() {
        return Err(Error::InvalidConfig("eval split is empty".into()));
    }
    let scores: Vec<f64> = idx.iter().map(|&i| model.logit(&data.supports[i])).collect();
    let labels: Vec<bool> = idx.iter().map(|&i| data.labels[i]).collect();
    auroc(&scores, &labels)
}

/// Fits one model per λ on the training split and scores it on the eval split.
pub fn lambda_sweep(
    data: &OomsDataset,
    lambdas: &[f64],
    labels: Option<&[AtomLabel]>,
    cfg: &OomsFitConfig,
) -> Result<Vec<SweepPoint>> {
    if let Some(l) = labels {
        if l.len() != data.n_dicts {
            return Err(Error::DimMismatch {
                expected: data.n_dicts,
                got: l.len(),
            });
        }
    }
    let train = data.subset(&data.indices(Split::Train));
    lambdas
        .par_iter()
        .map(|&lambda| {
            let (model, _) = fit_ooms(&train, lambda, cfg)?;
            let selected = model.selected();
            let content_fraction = match (labels, selected.is_empty()) {
                (Some(l), false) => Some(
                    selected.iter().filter(|&&j| l[j] == AtomLabel::Contentful).count() as f64 / selected.len() as f64,
                ),
                _ => None,
            };
            Ok(SweepPoint {
                lambda,
                n_selected: selected.len(),
                auroc: evaluate(&model, data)?,
                content_fraction,
                seed: cfg.seed,
            })
        })
        .collect()
}

pub fn write_sweep_csv(points: &[SweepPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lambda", "n_selected", "auroc", "content_fraction", "seed"])?;
    for p in points {
        w.write_record([
            p.lambda.to_string(),
            p.n_selected.to_string(),
            p.auroc.to_string(),
            p.content_fraction.map(|c| c.to_string()).unwrap_or_default(),
            p.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::Array2;
    use rand::Rng as _;

    fn toy() -> OomsDataset {
        // Atom 1 present iff IMS; atom 2 on every image.
        let mut supports = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let ims = i % 2 == 0;
            supports.push(if ims { vec![1, 2] } else { vec![2] });
            labels.push(ims);
        }
        OomsDataset::new(supports, labels, 3).unwrap()
    }

    #[test]
    fn predict_examples() {
        let m = OomsModel {
            bias: 0.0,
            weights: vec![0.0; 8],
            lambda: 0.0,
            seed: 0,
        };
        assert_eq!(predict_ims(&m, &[]).unwrap(), 0.5);
        let mut m2 = OomsModel {
            bias: -1.0,
            ..m.clone()
        };
        assert!(predict_ims(&m2, &[]).unwrap() < 0.5);
        m2.weights[7] = 2.0;
        assert!((predict_ims(&m2, &[7]).unwrap() - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!(predict_ims(&m2, &[8]).is_err());
    }

    #[test]
    fn huge_lambda_gives_empty_model_with_prior_bias() {
        let mut d = toy();
        d.labels[0] = false; // IMS rate 9/20
        let (m, diag) = fit_ooms(&d, 1e6, &OomsFitConfig::default()).unwrap();
        assert!(m.weights.iter().all(|&w| w == 0.0));
        assert!((m.bias - (0.45f64 / 0.55).ln()).abs() < 1e-6);
        assert!(diag.converged);
    }

    #[test]
    fn separable_toy_selects_the_informative_atom() {
        let d = toy();
        let (m, _) = fit_ooms(&d, 0.01, &OomsFitConfig::default()).unwrap();
        assert!(m.weights[1] > 0.0);
        assert!(m.weights[2] < 1e-6);
        assert!(m.bias <= 0.0 && m.weights.iter().all(|&w| w >= 0.0));
        let acc = d
            .supports
            .iter()
            .zip(&d.labels)
            .filter(|(s, &y)| (predict_ims(&m, s).unwrap() > 0.5) == y)
            .count();
        assert_eq!(acc, d.len());
    }

    #[test]
    fn fit_errors() {
        let d = OomsDataset::new(vec![vec![0]; 3], vec![true; 3], 2).unwrap();
        assert!(matches!(
            fit_ooms(&d, 0.1, &OomsFitConfig::default()),
            Err(Error::SingleClass)
        ));
        assert!(matches!(
            fit_ooms(&toy(), -1.0, &OomsFitConfig::default()),
            Err(Error::NegativeLambda(_))
        ));
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let d = toy();
        let mut r = rng::seeded(4);
        let p: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let g = gradient(&d.supports, &d.labels, 0.3, &p);
        for k in 0..p.len() {
            let h = 1e-6;
            let mut a = p.clone();
            let mut b = p.clone();
            a[k] += h;
            b[k] -= h;
            let fd =
                (objective(&d.supports, &d.labels, 0.3, &a) - objective(&d.supports, &d.labels, 0.3, &b)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[false, true, false, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auroc_matches_pair_counting() {
        let mut r = rng::seeded(8);
        for _ in 0..50 {
            let n = r.random_range(2..30);
            let scores: Vec<f64> = (0..n).map(|_| (r.random_range(0..6) as f64) / 5.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let mut wins = 0.0;
            let mut pairs = 0.0;
            for i in 0..n {
                for k in 0..n {
                    if labels[i] && !labels[k] {
                        pairs += 1.0;
                        wins += if scores[i] > scores[k] {
                            1.0
                        } else if scores[i] == scores[k] {
                            0.5
                        } else {
                            0.0
                        };
                    }
                }
            }
            assert!((auroc(&scores, &labels).unwrap() - wins / pairs).abs() < 1e-12);
        }
    }

    #[test]
    fn stratified_split_is_seeded_and_balanced() {
        let d = OomsDataset::new(vec![vec![]; 100], (0..100).map(|i| i < 40).collect(), 1).unwrap();
        let a = d.clone().with_stratified_split(3);
        let b = d.clone().with_stratified_split(3);
        assert_eq!(a.split, b.split);
        let train = a.indices(Split::Train);
        assert_eq!(train.len(), 70);
        assert_eq!(train.iter().filter(|&&i| a.labels[i]).count(), 28);
        assert_ne!(a.split, d.with_stratified_split(4).split);
    }

    #[test]
    fn sweep_endpoint_and_content_fraction() {
        let d = toy().with_stratified_split(1);
        use AtomLabel::*;
        let labels = [Stylistic, Contentful, Stylistic];
        let pts = lambda_sweep(&d, &[1e6, 0.01], Some(&labels), &OomsFitConfig::default()).unwrap();
        assert_eq!(pts[0].n_selected, 0);
        assert_eq!(pts[0].content_fraction, None);
        assert_eq!(pts[1].content_fraction, Some(1.0));
        assert_eq!(pts[1].auroc, 1.0);
    }

    #[test]
    fn model_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (m, _) = fit_ooms(&toy(), 0.01, &OomsFitConfig::default()).unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(OomsModel::load(&p).unwrap(), m);
    }

    #[test]
    fn summary_of_an_atom_is_one_hot() {
        let dict = Dictionary::normalized(Array2::eye(5)).unwrap();
        let head = HeadWeights::zeros(2, 5, 2);
        let mut patches = Array2::zeros((4, 5));
        for p in 0..4 {
            patches[[p, 3]] = 1.0;
        }
        patches[[0, 0]] = 50.0;
        let cue = [true, false, false, false];
        assert_eq!(
            summary_features(patches.view(), &cue, &head, &dict, 3).unwrap(),
            vec![3]
        );
        let zero = Array2::zeros((4, 5));
        assert!(summary_features(zero.view(), &cue, &head, &dict, 3).unwrap().is_empty());
    }
}
