//! Seeded synthetic corpora with planted ground truth.
//!
//! Atoms `0..content_atom_count` are content atoms; subset `s` owns the
//! style atoms `content_atom_count + s·style_atoms_per_subset ..` and no other
//! subset ever uses them. Task atoms are content atoms drawn orthogonal to the
//! span of every style atom, and the planted head reads only task atoms, so
//! any reliance the head places on style atoms is an estimation artifact.
//!
//! IMS images carry task atom `t_k` around the patch of keypoint `k`; OOMS images
//! never use a task atom. Random content slots never use task atoms either.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dictionary, EmbeddingSet, ItemMeta, SparseCode};
use crate::error::{Error, Result};
use crate::head::{patch_centers, HeadWeights};
use crate::rng::{derive_seed, seeded};

pub const COHERENCE_CAP: f64 = 0.5;
pub const MAX_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_dims: usize,
    pub n_dicts_true: usize,
    pub n_subsets: usize,
    pub content_atom_count: usize,
    pub style_atoms_per_subset: usize,
    pub task_atom_ids: Vec<usize>,
    pub n_images: usize,
    /// Patches per image is `grid²`.
    pub grid: usize,
    pub n_nnz_true: usize,
    pub coeff_range: [f64; 2],
    /// Magnitude range of the (always positive) task coefficient at a keypoint.
    pub task_coeff_range: [f64; 2],
    /// Patches within this Chebyshev distance of a keypoint also carry its
    /// task atom, with a positive coefficient drawn from `coeff_range`.
    pub keypoint_radius: usize,
    /// Probability that a random slot draws a content atom rather than a style atom.
    pub content_probability: f64,
    pub noise_sigma: f64,
    /// Norm of the planted head rows.
    pub head_gain: f64,
    /// Norm of the cue-patch vectors.
    pub cue_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_dims: 64,
            n_dicts_true: 96,
            n_subsets: 4,
            content_atom_count: 48,
            style_atoms_per_subset: 12,
            task_atom_ids: vec![0, 1, 2, 3],
            n_images: 320,
            grid: 8,
            n_nnz_true: 4,
            coeff_range: [0.5, 1.5],
            task_coeff_range: [1.0, 1.5],
            keypoint_radius: 1,
            content_probability: 0.5,
            noise_sigma: 0.01,
            head_gain: 12.0,
            cue_scale: 2.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let style = self.n_subsets * self.style_atoms_per_subset;
        if self.content_atom_count + style != self.n_dicts_true {
            return bad(format!(
                "content ({}) + style ({style}) atoms must equal n_dicts_true ({})",
                self.content_atom_count, self.n_dicts_true
            ));
        }
        if self.n_dims == 0 || self.n_dicts_true == 0 {
            return bad("n_dims and n_dicts_true must be positive".into());
        }
        if let Some(&t) = self.task_atom_ids.iter().find(|&&t| t >= self.content_atom_count) {
            return bad(format!("task atom {t} is not a content atom"));
        }
        let mut tasks = self.task_atom_ids.clone();
        tasks.sort_unstable();
        tasks.dedup();
        if tasks.len() != self.task_atom_ids.len() {
            return bad("task atom ids must be distinct".into());
        }
        if !self.task_atom_ids.is_empty() && style + self.task_atom_ids.len() > self.n_dims {
            return bad("task atoms need room orthogonal to the style span".into());
        }
        if self.n_subsets == 0 || self.n_nnz_true == 0 {
            return bad("n_subsets and n_nnz_true must be positive".into());
        }
        let free_content = self.content_atom_count - self.task_atom_ids.len();
        if self.n_nnz_true < self.n_kp().min(self.grid * self.grid) && self.keypoint_radius > 0 {
            return bad("n_nnz_true must hold every task atom that can overlap on one patch".into());
        }
        if self.n_nnz_true > free_content + self.style_atoms_per_subset {
            return bad("n_nnz_true exceeds the atoms available to one patch".into());
        }
        if self.grid * self.grid < self.task_atom_ids.len() + 1 {
            return bad("grid too small to hold the cue patch and every keypoint".into());
        }
        let [lo, hi] = self.coeff_range;
        let [tlo, thi] = self.task_coeff_range;
        if !(0.0 < lo && lo <= hi && 0.0 < tlo && tlo <= thi) {
            return bad("coefficient ranges must be positive and ordered".into());
        }
        if !(0.0..=1.0).contains(&self.content_probability) || !(self.noise_sigma >= 0.0) {
            return bad("content_probability must lie in [0,1] and noise_sigma be non-negative".into());
        }
        Ok(())
    }

    pub fn n_kp(&self) -> usize {
        self.task_atom_ids.len()
    }

    pub fn style_pool(&self, subset: usize) -> std::ops::Range<usize> {
        let start = self.content_atom_count + subset * self.style_atoms_per_subset;
        start..start + self.style_atoms_per_subset
    }

    pub fn subset_name(subset: usize) -> String {
        format!("subset{subset}")
    }
}

pub fn max_coherence(atoms: &Array2<f64>) -> f64 {
    let gram = atoms.dot(&atoms.t());
    let mut worst: f64 = 0.0;
    for i in 0..gram.nrows() {
        for j in i + 1..gram.ncols() {
            worst = worst.max(gram[[i, j]].abs());
        }
    }
    worst
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

/// Seeded unit Gaussian atoms, redrawn whole until the coherence is at most
/// 0.5. Task atoms are projected onto the orthogonal complement of the style atoms.
pub fn plant_dictionary(cfg: &SynthConfig) -> Result<Dictionary> {
    let style: Vec<usize> = (cfg.content_atom_count..cfg.n_dicts_true).collect();
    for attempt in 0..MAX_RESAMPLES {
        let mut r = seeded(derive_seed(cfg.seed, &format!("synth/dictionary{attempt}")));
        let mut atoms = Array2::from_shape_simple_fn((cfg.n_dicts_true, cfg.n_dims), || StandardNormal.sample(&mut r));
        if !cfg.task_atom_ids.is_empty() && !style.is_empty() {
            let basis = orthonormal_basis(&atoms, &style);
            for &t in &cfg.task_atom_ids {
                let mut v = atoms.row(t).to_owned();
                for b in &basis {
                    let p = v.dot(b);
                    v.scaled_add(-p, b);
                }
                atoms.row_mut(t).assign(&v);
            }
        }
        for mut row in atoms.rows_mut() {
            let n = row.dot(&row).sqrt();
            row /= n;
        }
        if max_coherence(&atoms) <= COHERENCE_CAP {
            return Dictionary::new(atoms);
        }
    }
    Err(Error::Coherence {
        cap: COHERENCE_CAP,
        tries: MAX_RESAMPLES,
    })
}

/// Modified Gram-Schmidt over the listed rows.
fn orthonormal_basis(atoms: &Array2<f64>, rows: &[usize]) -> Vec<Array1<f64>> {
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for &i in rows {
        let mut v = atoms.row(i).to_owned();
        for b in &basis {
            let p = v.dot(b);
            v.scaled_add(-p, b);
        }
        if v.dot(&v).sqrt() > 1e-9 {
            basis.push(unit(v));
        }
    }
    basis
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AtomKind {
    Content,
    Style,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomTruth {
    pub atom_id: usize,
    pub kind: AtomKind,
    /// Owning subset of a style atom.
    pub subset: Option<String>,
    pub task: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTruth {
    pub image_id: String,
    pub subset: String,
    pub ims: bool,
    /// Row-major patch index of each keypoint (IMS only).
    pub keypoint_patches: Option<Vec<usize>>,
    /// Normalized `(u, v)` keypoint targets at those patch centers (IMS only).
    pub keypoints: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub atoms: Vec<AtomTruth>,
    pub images: Vec<ImageTruth>,
    /// Planted head `W*`, `n_kp × n_dims`.
    pub head: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn head_weights(&self) -> Result<HeadWeights> {
        let n_kp = self.head.len();
        let n_dims = self.head.first().map_or(0, Vec::len);
        let w = Array2::from_shape_vec((n_kp, n_dims), self.head.concat())
            .map_err(|e| Error::InvalidMeta(e.to_string()))?;
        HeadWeights::new(w, self.config.grid)
    }

    pub fn content_atoms(&self) -> Vec<usize> {
        self.atoms
            .iter()
            .filter(|a| a.kind == AtomKind::Content)
            .map(|a| a.atom_id)
            .collect()
    }

    pub fn style_atoms(&self) -> Vec<usize> {
        self.atoms
            .iter()
            .filter(|a| a.kind == AtomKind::Style)
            .map(|a| a.atom_id)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub set: EmbeddingSet,
    pub dictionary: Dictionary,
    pub truth: GroundTruth,
    /// Planted code of every item; empty for cue patches.
    pub codes: Vec<SparseCode>,
}

struct ImageDraw {
    rows: Vec<Array1<f64>>,
    meta: Vec<ItemMeta>,
    codes: Vec<SparseCode>,
    truth: ImageTruth,
}

/// Generates `n_images` images of `grid²` patches each, cue patch first.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let dict = plant_dictionary(cfg)?;
    let mut cue_rng = seeded(derive_seed(cfg.seed, "synth/cue"));
    let cues: Vec<Array1<f64>> = (0..3)
        .map(|_| {
            unit(Array1::from_shape_simple_fn(cfg.n_dims, || {
                StandardNormal.sample(&mut cue_rng)
            })) * cfg.cue_scale
        })
        .collect();

    let draws: Vec<ImageDraw> = (0..cfg.n_images)
        .into_par_iter()
        .map(|i| draw_image(cfg, &dict, &cues, i))
        .collect::<Result<_>>()?;

    let mut data = Vec::new();
    let mut meta = Vec::new();
    let mut codes = Vec::new();
    let mut images = Vec::new();
    for d in draws {
        data.extend(d.rows);
        meta.extend(d.meta);
        codes.extend(d.codes);
        images.push(d.truth);
    }
    let mut matrix = Array2::zeros((data.len(), cfg.n_dims));
    for (mut row, v) in matrix.rows_mut().into_iter().zip(&data) {
        row.assign(v);
    }
    let set = EmbeddingSet::from_f64(&matrix, meta)?;

    let atoms = (0..cfg.n_dicts_true)
        .map(|j| {
            let style_subset =
                (j >= cfg.content_atom_count).then(|| (j - cfg.content_atom_count) / cfg.style_atoms_per_subset);
            AtomTruth {
                atom_id: j,
                kind: if style_subset.is_some() {
                    AtomKind::Style
                } else {
                    AtomKind::Content
                },
                subset: style_subset.map(SynthConfig::subset_name),
                task: cfg.task_atom_ids.contains(&j),
            }
        })
        .collect();
    let head = cfg
        .task_atom_ids
        .iter()
        .map(|&t| dict.atom(t).iter().map(|v| v * cfg.head_gain).collect())
        .collect();
    Ok(Corpus {
        set,
        dictionary: dict,
        truth: GroundTruth {
            config: cfg.clone(),
            atoms,
            images,
            head,
        },
        codes,
    })
}

fn draw_image(cfg: &SynthConfig, dict: &Dictionary, cues: &[Array1<f64>], i: usize) -> Result<ImageDraw> {
    let mut r = seeded(derive_seed(cfg.seed, &format!("synth/image{i}")));
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let subset = i % cfg.n_subsets;
    // Alternate labels within each subset so IMS is balanced per subset.
    let ims = (i / cfg.n_subsets).is_multiple_of(2);
    let image_id = format!("img{i:06}");
    let subset_name = SynthConfig::subset_name(subset);
    let label = if ims { "ims" } else { "ooms" };
    let n_patches = cfg.grid * cfg.grid;

    let keypoint_patches: Option<Vec<usize>> = ims.then(|| {
        let candidates: Vec<usize> = (1..n_patches).collect();
        candidates.choose_multiple(&mut r, cfg.n_kp()).copied().collect()
    });

    let free_content: Vec<usize> = (0..cfg.content_atom_count)
        .filter(|j| !cfg.task_atom_ids.contains(j))
        .collect();
    let style: Vec<usize> = cfg.style_pool(subset).collect();

    let mut rows = Vec::with_capacity(n_patches);
    let mut meta = Vec::with_capacity(n_patches);
    let mut codes = Vec::with_capacity(n_patches);
    for p in 0..n_patches {
        let (row, col) = ((p / cfg.grid) as i32, (p % cfg.grid) as i32);
        let mut m = ItemMeta::patch(&image_id, &subset_name, row, col);
        m.label = Some(label.to_string());
        let mut z: Array1<f64>;
        if p == 0 {
            m.is_cue = true;
            z = cues[r.random_range(0..cues.len())].clone();
            codes.push(SparseCode::default());
        } else {
            let mut picks: Vec<(usize, f64)> = Vec::with_capacity(cfg.n_nnz_true);
            for (k, &q) in keypoint_patches.iter().flatten().enumerate() {
                let dist = (p / cfg.grid)
                    .abs_diff(q / cfg.grid)
                    .max((p % cfg.grid).abs_diff(q % cfg.grid));
                let [lo, hi] = if dist == 0 {
                    cfg.task_coeff_range
                } else if dist <= cfg.keypoint_radius {
                    cfg.coeff_range
                } else {
                    continue;
                };
                picks.push((cfg.task_atom_ids[k], r.random_range(lo..=hi)));
            }
            while picks.len() < cfg.n_nnz_true {
                let content_ok = picks.iter().filter(|(j, _)| free_content.contains(j)).count() < free_content.len();
                let style_ok = picks.iter().filter(|(j, _)| style.contains(j)).count() < style.len();
                let use_content = content_ok && (!style_ok || r.random_bool(cfg.content_probability));
                let pool = if use_content { &free_content } else { &style };
                let j = *pool.choose(&mut r).expect("validated non-empty pool");
                if picks.iter().any(|&(a, _)| a == j) {
                    continue;
                }
                let [lo, hi] = cfg.coeff_range;
                let mag = r.random_range(lo..=hi);
                picks.push((j, if r.random_bool(0.5) { mag } else { -mag }));
            }
            z = Array1::zeros(cfg.n_dims);
            for &(j, c) in &picks {
                z.scaled_add(c, &dict.atom(j));
            }
            codes.push(SparseCode::from_pairs(picks));
        }
        if cfg.noise_sigma > 0.0 {
            z.mapv_inplace(|v| v + noise.sample(&mut r));
        }
        rows.push(z);
        meta.push(m);
    }

    let centers = patch_centers(cfg.grid);
    let keypoints = keypoint_patches
        .as_ref()
        .map(|kp| kp.iter().map(|&p| centers[p]).collect());
    Ok(ImageDraw {
        rows,
        meta,
        codes,
        truth: ImageTruth {
            image_id,
            subset: subset_name,
            ims,
            keypoint_patches,
            keypoints,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::filter_non_cue;

    fn small() -> SynthConfig {
        SynthConfig {
            n_images: 24,
            seed: 1,
            ..Default::default()
        }
    }

    #[test]
    fn default_dictionary_is_unit_and_incoherent() {
        let d = plant_dictionary(&SynthConfig {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(d.n_dicts(), 96);
        assert!(d.max_norm_deviation() < 1e-12);
        assert!(max_coherence(&d.atoms().to_owned()) <= 0.5);
    }

    #[test]
    fn task_atoms_are_orthogonal_to_style_atoms() {
        let cfg = small();
        let d = plant_dictionary(&cfg).unwrap();
        for &t in &cfg.task_atom_ids {
            for s in cfg.content_atom_count..cfg.n_dicts_true {
                assert!(d.atom(t).dot(&d.atom(s)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_atom_and_impossible_coherence() {
        let one = SynthConfig {
            n_dicts_true: 1,
            content_atom_count: 1,
            style_atoms_per_subset: 0,
            task_atom_ids: vec![],
            ..Default::default()
        };
        let d = plant_dictionary(&one).unwrap();
        assert_eq!(d.n_dicts(), 1);
        assert!((d.atom(0).dot(&d.atom(0)) - 1.0).abs() < 1e-12);

        let circle = SynthConfig {
            n_dims: 2,
            n_dicts_true: 64,
            content_atom_count: 64,
            style_atoms_per_subset: 0,
            task_atom_ids: vec![],
            ..Default::default()
        };
        assert!(matches!(plant_dictionary(&circle), Err(Error::Coherence { .. })));
    }

    #[test]
    fn config_inconsistencies_are_rejected() {
        assert!(SynthConfig {
            content_atom_count: 40,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            task_atom_ids: vec![50],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            grid: 2,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn same_seed_gives_identical_corpus() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        assert_eq!(a.set, b.set);
        assert_eq!(a.truth, b.truth);
        let c = generate_corpus(&SynthConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(a.set, c.set);
    }

    #[test]
    fn noiseless_patches_lie_in_the_span_of_their_atoms() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            ..small()
        };
        let c = generate_corpus(&cfg).unwrap();
        let z = c.set.to_f64();
        for (i, code) in c.codes.iter().enumerate().filter(|(_, c)| !c.is_empty()) {
            let rec = c.dictionary.reconstruct(code);
            for (a, b) in z.row(i).iter().zip(&rec) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn planted_structure_holds() {
        let cfg = small();
        let c = generate_corpus(&cfg).unwrap();
        assert_eq!(c.set.n_items(), cfg.n_images * cfg.grid * cfg.grid);
        for (code, m) in c.codes.iter().zip(c.set.meta()) {
            if m.is_cue {
                assert!(code.is_empty() && m.patch_row == 0 && m.patch_col == 0);
                continue;
            }
            assert_eq!(code.len(), cfg.n_nnz_true);
            let subset: usize = m.subset.trim_start_matches("subset").parse().unwrap();
            for &j in &code.atoms {
                if j >= cfg.content_atom_count {
                    assert!(cfg.style_pool(subset).contains(&j));
                }
                if cfg.task_atom_ids.contains(&j) {
                    assert_eq!(m.label.as_deref(), Some("ims"));
                }
            }
        }
        for img in &c.truth.images {
            assert_eq!(img.ims, img.keypoints.is_some());
        }
        let n_ims = c.truth.images.iter().filter(|i| i.ims).count();
        assert_eq!(n_ims, cfg.n_images / 2);
        let head = c.truth.head_weights().unwrap();
        assert_eq!((head.n_kp(), head.n_dims()), (4, 64));
        assert_eq!(filter_non_cue(&c.set).n_items(), cfg.n_images * 63);
    }

    #[test]
    fn keypoint_patches_carry_their_task_atom() {
        let c = generate_corpus(&small()).unwrap();
        let per_image = 64;
        for (i, img) in c.truth.images.iter().enumerate() {
            if let Some(kp) = &img.keypoint_patches {
                for (k, &p) in kp.iter().enumerate() {
                    let coeff = c.codes[i * per_image + p].coeff(k).unwrap();
                    assert!(coeff >= 1.0);
                }
            }
        }
    }

    #[test]
    fn truth_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_corpus(&SynthConfig { n_images: 4, ..small() }).unwrap();
        let p = dir.path().join("truth.json");
        c.truth.save(&p).unwrap();
        assert_eq!(GroundTruth::load(&p).unwrap(), c.truth);
    }
}
