//! Batched K-SVD dictionary learning over an embedding pool.
//!
//! Per batch: code the batch with Matching Pursuit against the current
//! dictionary, then sweep the atoms in index order, replacing each used atom
//! and its coefficients with the best rank-1 approximation of the residual
//! restricted to the items that use it. Codes live only for the duration of
//! one batch.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dictionary, EmbeddingSet};
use crate::error::{Error, Result};
use crate::head::{predict, HeadWeights};
use crate::pursuit::encode_rows;
use crate::rng::{derive_seed, permutation};

pub const HELDOUT_FRACTION: f64 = 0.1;
const POWER_ITERS: usize = 50;
const POWER_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsvdConfig {
    pub n_dicts: usize,
    pub n_nnz: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Atoms used fewer times than this in an epoch are replaced.
    pub dead_atom_threshold: usize,
    /// An atom whose |cosine| with a lower-indexed atom exceeds this is
    /// replaced like a dead atom.
    pub duplicate_coherence: f64,
    /// Relative change in training error below which the fit is reported converged.
    pub tol: f64,
    /// Permit `n_dicts < n_dims`.
    pub allow_undercomplete: bool,
}

impl Default for KsvdConfig {
    fn default() -> Self {
        KsvdConfig {
            n_dicts: 512,
            n_nnz: 8,
            epochs: 3,
            batch_size: 8192,
            seed: 0,
            dead_atom_threshold: 1,
            duplicate_coherence: 0.99,
            tol: 1e-4,
            allow_undercomplete: false,
        }
    }
}

impl KsvdConfig {
    pub fn validate(&self, n_dims: usize) -> Result<()> {
        if self.n_nnz == 0 {
            return Err(Error::InvalidConfig("n_nnz must be at least 1".into()));
        }
        if self.n_nnz > n_dims {
            return Err(Error::InvalidConfig(format!(
                "n_nnz {} exceeds n_dims {n_dims}",
                self.n_nnz
            )));
        }
        if self.batch_size < self.n_nnz {
            return Err(Error::InvalidConfig("batch_size must be at least n_nnz".into()));
        }
        if self.n_dicts == 0 {
            return Err(Error::InvalidConfig("n_dicts must be positive".into()));
        }
        if self.n_dicts < n_dims && !self.allow_undercomplete {
            return Err(Error::InvalidConfig(format!(
                "n_dicts {} < n_dims {n_dims}: dictionary would be undercomplete",
                self.n_dicts
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// `1 - ‖Z - DX‖² / ‖Z‖²` on the held-out items after the last epoch, clipped to [0, 1].
    pub variance_explained_heldout: f64,
    pub heldout_variance_explained_per_epoch: Vec<f64>,
    /// Normalized squared Frobenius reconstruction error on the training items.
    pub epoch_errors: Vec<f64>,
    pub dead_atoms_replaced: Vec<usize>,
    pub n_train: usize,
    pub n_heldout: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceExplained {
    pub value: f64,
    /// Set when the data has zero energy; `value` is then 1.
    pub all_zero: bool,
}

/// Variance of `set` explained by its `n_nnz`-sparse MP reconstruction.
pub fn variance_explained(set: &EmbeddingSet, dict: &Dictionary, n_nnz: usize) -> Result<VarianceExplained> {
    variance_explained_rows(set.to_f64().view(), dict, n_nnz)
}

fn variance_explained_rows(z: ArrayView2<'_, f64>, dict: &Dictionary, n_nnz: usize) -> Result<VarianceExplained> {
    let (codes, _) = encode_rows(z, dict, n_nnz)?;
    let mut energy = 0.0;
    let mut error = 0.0;
    for (row, code) in z.axis_iter(Axis(0)).zip(&codes.codes) {
        let rec = dict.reconstruct(code);
        energy += row.dot(&row);
        error += row.iter().zip(&rec).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    if energy == 0.0 {
        return Ok(VarianceExplained {
            value: 1.0,
            all_zero: true,
        });
    }
    Ok(VarianceExplained {
        value: 1.0 - error / energy,
        all_zero: false,
    })
}

/// Fits a dictionary to `pool`. A seeded 10% of the pool is held out from
/// the updates and used only for the variance-explained report.
pub fn ksvd_fit(pool: &EmbeddingSet, cfg: &KsvdConfig) -> Result<(Dictionary, FitReport)> {
    let n_dims = pool.n_dims();
    cfg.validate(n_dims)?;
    let n = pool.n_items();
    if n < cfg.n_dicts {
        return Err(Error::PoolTooSmall {
            items: n,
            atoms: cfg.n_dicts,
        });
    }
    let z = pool.to_f64();

    let order = permutation(n, derive_seed(cfg.seed, "ksvd/holdout"));
    let n_heldout = (n as f64 * HELDOUT_FRACTION).round() as usize;
    let (heldout_idx, train_idx) = order.split_at(n_heldout);
    let train = z.select(Axis(0), train_idx);
    let heldout = if heldout_idx.is_empty() {
        train.clone()
    } else {
        z.select(Axis(0), heldout_idx)
    };

    let init_perm = permutation(train_idx.len(), derive_seed(cfg.seed, "ksvd/init"));
    let candidates: Vec<usize> = init_perm
        .iter()
        .map(|&k| train_idx[k])
        .chain(heldout_idx.iter().copied())
        .collect();
    let mut atoms = init_atoms(&z, &candidates, cfg.n_dicts)?;
    let mut report = FitReport {
        variance_explained_heldout: 0.0,
        heldout_variance_explained_per_epoch: Vec::new(),
        epoch_errors: Vec::new(),
        dead_atoms_replaced: Vec::new(),
        n_train: train.nrows(),
        n_heldout: heldout_idx.len(),
        converged: false,
    };
    let train_energy: f64 = train.iter().map(|v| v * v).sum();

    for epoch in 0..cfg.epochs {
        let shuffle = permutation(train.nrows(), derive_seed(cfg.seed, &format!("ksvd/epoch{epoch}")));
        let mut usage = vec![0usize; cfg.n_dicts];
        for batch in shuffle.chunks(cfg.batch_size) {
            let rows = train.select(Axis(0), batch);
            update_batch(&mut atoms, rows.view(), cfg.n_nnz, &mut usage)?;
        }

        let dict = Dictionary::new(atoms.clone())?;
        let (_, residuals) = encode_rows(train.view(), &dict, cfg.n_nnz)?;
        let err: f64 = residuals.iter().map(|r| r * r).sum();
        report
            .epoch_errors
            .push(if train_energy > 0.0 { err / train_energy } else { 0.0 });

        let replaced = replace_dead_atoms(&mut atoms, &usage, &train, &residuals, cfg);
        report.dead_atoms_replaced.push(replaced);

        let dict = Dictionary::new(atoms.clone())?;
        let ve = variance_explained_rows(heldout.view(), &dict, cfg.n_nnz)?.value;
        report.heldout_variance_explained_per_epoch.push(ve.clamp(0.0, 1.0));
    }

    if let [.., prev, last] = report.epoch_errors[..] {
        report.converged = (prev - last).abs() <= cfg.tol * prev.max(f64::MIN_POSITIVE);
    }
    let dict = Dictionary::normalized(atoms)?;
    report.variance_explained_heldout = variance_explained_rows(heldout.view(), &dict, cfg.n_nnz)?
        .value
        .clamp(0.0, 1.0);
    Ok((dict, report))
}

/// The first `n_dicts` non-zero rows of `candidates`, normalized. Held-out
/// rows come last and are reached only when the training rows run out.
fn init_atoms(z: &Array2<f64>, candidates: &[usize], n_dicts: usize) -> Result<Array2<f64>> {
    let mut atoms = Array2::zeros((n_dicts, z.ncols()));
    let mut filled = 0;
    for &i in candidates {
        if filled == n_dicts {
            break;
        }
        let row = z.row(i);
        let norm = row.dot(&row).sqrt();
        if norm > 1e-12 {
            atoms.row_mut(filled).assign(&(&row / norm));
            filled += 1;
        }
    }
    if filled < n_dicts {
        return Err(Error::PoolTooSmall {
            items: filled,
            atoms: n_dicts,
        });
    }
    Ok(atoms)
}

fn update_batch(atoms: &mut Array2<f64>, rows: ArrayView2<'_, f64>, n_nnz: usize, usage: &mut [usize]) -> Result<()> {
    let dict = Dictionary::new(atoms.clone())?;
    let (codes, _) = encode_rows(rows, &dict, n_nnz)?;

    // users[j] = (batch row, coefficient) for every row coding atom j
    let mut users: Vec<Vec<(usize, f64)>> = vec![Vec::new(); atoms.nrows()];
    let mut residual = rows.to_owned();
    for (i, code) in codes.codes.iter().enumerate() {
        for (j, c) in code.iter() {
            users[j].push((i, c));
            residual.row_mut(i).scaled_add(-c, &atoms.row(j));
        }
    }

    for (j, used_by) in users.iter().enumerate() {
        if used_by.is_empty() {
            continue;
        }
        usage[j] += used_by.len();
        let old = atoms.row(j).to_owned();
        // Restricted residual with atom j's contribution added back, one row per user.
        let mut e = Array2::zeros((used_by.len(), rows.ncols()));
        for (r, &(i, c)) in used_by.iter().enumerate() {
            let mut er = e.row_mut(r);
            er.assign(&residual.row(i));
            er.scaled_add(c, &old);
        }
        let Some(u) = leading_left_singular(&e, &old) else {
            continue;
        };
        for (r, &(i, _)) in used_by.iter().enumerate() {
            let er = e.row(r);
            let coeff = er.dot(&u);
            let mut res = residual.row_mut(i);
            res.assign(&er);
            res.scaled_add(-coeff, &u);
        }
        atoms.row_mut(j).assign(&u);
    }
    Ok(())
}

/// Principal direction of the rows of `e` (the leading left singular vector
/// of `eᵀ`) by power iteration from `start`, oriented to agree with `start`.
fn leading_left_singular(e: &Array2<f64>, start: &Array1<f64>) -> Option<Array1<f64>> {
    let mut u = start.clone();
    // A start orthogonal to every row would stall; fall back to the largest row.
    if e.dot(&u).iter().all(|&v| v == 0.0) {
        let (best, _) = e
            .axis_iter(Axis(0))
            .enumerate()
            .map(|(r, row)| (r, row.dot(&row)))
            .max_by(|a, b| a.1.total_cmp(&b.1))?;
        u = e.row(best).to_owned();
    }
    let n = u.dot(&u).sqrt();
    if n == 0.0 {
        return None;
    }
    u /= n;
    for _ in 0..POWER_ITERS {
        let v = e.dot(&u);
        let mut next = e.t().dot(&v);
        let norm = next.dot(&next).sqrt();
        if norm == 0.0 {
            return None;
        }
        next /= norm;
        let change = (&next - &u).mapv(|d| d * d).sum().sqrt();
        u = next;
        if change <= POWER_REL_TOL {
            break;
        }
    }
    if u.dot(start) < 0.0 {
        u.mapv_inplace(|v| -v);
    }
    Some(u)
}

/// Replaces atoms used fewer than `dead_atom_threshold` times, and atoms
/// nearly parallel to a lower-indexed atom, with the worst reconstructed
/// training rows, normalized. Rows already reconstructed to within 1e-8 are
/// never used. Returns the number replaced.
fn replace_dead_atoms(
    atoms: &mut Array2<f64>,
    usage: &[usize],
    train: &Array2<f64>,
    residuals: &[f64],
    cfg: &KsvdConfig,
) -> usize {
    let gram = atoms.dot(&atoms.t());
    let dead: Vec<usize> = (0..atoms.nrows())
        .filter(|&j| usage[j] < cfg.dead_atom_threshold || (0..j).any(|i| gram[[i, j]].abs() > cfg.duplicate_coherence))
        .collect();
    if dead.is_empty() {
        return 0;
    }
    let mut worst: Vec<usize> = (0..train.nrows()).filter(|&i| residuals[i] > 1e-8).collect();
    worst.sort_by(|&a, &b| residuals[b].total_cmp(&residuals[a]).then(a.cmp(&b)));
    let mut replaced = 0;
    for (&j, &i) in dead.iter().zip(&worst) {
        let row = train.row(i);
        let norm = row.dot(&row).sqrt();
        atoms.row_mut(j).assign(&(&row / norm));
        replaced += 1;
    }
    replaced
}

#[derive(Debug, Clone)]
pub struct ImportancePool {
    pub pool: EmbeddingSet,
    /// Images with fewer than `top_k` non-cue patches (all of them were kept).
    pub short_images: Vec<String>,
}

/// Keeps, per image, the `top_k` non-cue patches with the largest total head
/// attention `Σ_k α_pk`; ties go to the lower row-major patch index.
pub fn importance_sample_pool(set: &EmbeddingSet, weights: &HeadWeights, top_k: usize) -> Result<ImportancePool> {
    let groups = set.group_by_image();
    let picks: Vec<(Vec<usize>, Option<String>)> = groups
        .par_iter()
        .map(|g| {
            let grid = set.patch_matrix(g, weights.grid)?;
            let pred = predict(grid.patches.view(), weights)?;
            let mut ranked: Vec<(usize, f64)> = (0..grid.items.len())
                .filter(|&p| !grid.is_cue[p])
                .map(|p| (p, pred.alphas.row(p).sum()))
                .collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let short = (ranked.len() < top_k).then(|| g.image_id.clone());
            let items = ranked.iter().take(top_k).map(|&(p, _)| grid.items[p]).collect();
            Ok((items, short))
        })
        .collect::<Result<_>>()?;
    let mut items = Vec::new();
    let mut short_images = Vec::new();
    for (i, s) in picks {
        items.extend(i);
        short_images.extend(s);
    }
    Ok(ImportancePool {
        pool: set.select(&items),
        short_images,
    })
}
