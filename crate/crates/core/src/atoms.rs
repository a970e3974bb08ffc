//! Per-atom statistics over sparse codes: subset activation rates, their
//! coefficient of variation, the median content/style split, head reliance
//! scores and the top-activating-patch manifest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dictionary, ItemMeta, SparseCodes};
use crate::error::{Error, Result};
use crate::head::HeadWeights;
use crate::numeric::compensated_sum;

pub const DEFAULT_N_VIZ: usize = 4;
pub const CONTEXT_HALFWIDTH: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AtomLabel {
    Contentful,
    Stylistic,
    Inactive,
}

impl AtomLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            AtomLabel::Contentful => "contentful",
            AtomLabel::Stylistic => "stylistic",
            AtomLabel::Inactive => "inactive",
        }
    }
}

/// `rates[j][s]` is the fraction of subset `subsets[s]` items whose code uses atom `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRates {
    /// Subsets with at least one item, sorted.
    pub subsets: Vec<String>,
    pub subset_sizes: Vec<usize>,
    pub rates: Vec<Vec<f64>>,
}

impl ActivationRates {
    pub fn n_dicts(&self) -> usize {
        self.rates.len()
    }
}

fn check_atoms(codes: &SparseCodes, n_dicts: usize) -> Result<()> {
    match codes.max_atom() {
        Some(m) if m >= n_dicts => Err(Error::UnknownAtom { atom: m, n_dicts }),
        _ => Ok(()),
    }
}

/// Counts, per subset, the items whose support contains each atom.
/// Cue items must already be removed.
pub fn activation_rates(codes: &SparseCodes, meta: &[ItemMeta], n_dicts: usize) -> Result<ActivationRates> {
    if codes.len() != meta.len() {
        return Err(Error::SizeMismatch(format!(
            "{} codes for {} metadata records",
            codes.len(),
            meta.len()
        )));
    }
    check_atoms(codes, n_dicts)?;
    if let Some(i) = meta.iter().position(|m| m.is_cue) {
        return Err(Error::InvalidMeta(format!(
            "item {i} is a cue patch; filter cue items first"
        )));
    }
    let mut counts: BTreeMap<&str, (usize, Vec<usize>)> = BTreeMap::new();
    for (code, m) in codes.codes.iter().zip(meta) {
        let entry = counts.entry(m.subset.as_str()).or_insert_with(|| (0, vec![0; n_dicts]));
        entry.0 += 1;
        for &j in &code.atoms {
            entry.1[j] += 1;
        }
    }
    let subsets = counts.keys().map(|s| s.to_string()).collect();
    let subset_sizes = counts.values().map(|c| c.0).collect();
    let rates = (0..n_dicts)
        .map(|j| counts.values().map(|(n, c)| c[j] as f64 / *n as f64).collect())
        .collect();
    Ok(ActivationRates {
        subsets,
        subset_sizes,
        rates,
    })
}

/// Population coefficient of variation of one atom's subset rates; `None` when the mean is 0.
pub fn cv_of(rates: &[f64]) -> Option<f64> {
    let n = rates.len() as f64;
    let mean = compensated_sum(rates.iter().copied()) / n;
    if mean == 0.0 {
        return None;
    }
    let var = compensated_sum(rates.iter().map(|r| (r - mean).powi(2))) / n;
    Some(var.sqrt() / mean)
}

pub fn coefficient_of_variation(rates: &ActivationRates) -> Result<Vec<Option<f64>>> {
    if rates.subsets.len() < 2 {
        return Err(Error::CvRequiresTwoSubsets(rates.subsets.len()));
    }
    Ok(rates.rates.iter().map(|r| cv_of(r)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentStyleSplit {
    pub labels: Vec<AtomLabel>,
    pub median: f64,
    /// No atom fell strictly below the median.
    pub degenerate: bool,
}

/// Median over defined CVs; strictly below is contentful, at or above is
/// stylistic, undefined is inactive.
pub fn split_content_style(cvs: &[Option<f64>]) -> Result<ContentStyleSplit> {
    let mut defined: Vec<f64> = cvs.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::NoActiveAtoms);
    }
    defined.sort_by(f64::total_cmp);
    let n = defined.len();
    let median = if n % 2 == 1 {
        defined[n / 2]
    } else {
        0.5 * (defined[n / 2 - 1] + defined[n / 2])
    };
    let labels: Vec<AtomLabel> = cvs
        .iter()
        .map(|cv| match cv {
            None => AtomLabel::Inactive,
            Some(c) if *c < median => AtomLabel::Contentful,
            Some(_) => AtomLabel::Stylistic,
        })
        .collect();
    let degenerate = !labels.contains(&AtomLabel::Contentful);
    Ok(ContentStyleSplit {
        labels,
        median,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomReliance {
    /// `‖W d_j‖`.
    pub head_alignment: f64,
    /// Mean of `|x_j|` over all items, zeros included.
    pub mean_abs_coeff: f64,
    pub active_rate: f64,
    /// Mean of `|x_j|` over the items where atom `j` is active; 0 if never active.
    pub mean_abs_active: f64,
    pub score: f64,
}

pub fn reliance_scores(dict: &Dictionary, weights: &HeadWeights, codes: &SparseCodes) -> Result<Vec<AtomReliance>> {
    if weights.n_dims() != dict.n_dims() {
        return Err(Error::DimMismatch {
            expected: dict.n_dims(),
            got: weights.n_dims(),
        });
    }
    check_atoms(codes, dict.n_dicts())?;
    if codes.is_empty() {
        return Err(Error::InvalidConfig("reliance needs at least one coded item".into()));
    }
    let n_items = codes.len() as f64;
    let mut magnitudes: Vec<Vec<f64>> = vec![Vec::new(); dict.n_dicts()];
    for code in &codes.codes {
        for (j, c) in code.iter() {
            if c != 0.0 {
                magnitudes[j].push(c.abs());
            }
        }
    }
    let projected = weights.w.dot(&dict.atoms().t());
    Ok(magnitudes
        .iter()
        .enumerate()
        .map(|(j, mags)| {
            let head_alignment = compensated_sum(projected.column(j).iter().map(|v| v * v)).sqrt();
            let total = compensated_sum(mags.iter().copied());
            let mean_abs_coeff = total / n_items;
            let active = mags.len() as f64;
            let mean_abs_active = if mags.is_empty() { 0.0 } else { total / active };
            AtomReliance {
                head_alignment,
                mean_abs_coeff,
                active_rate: active / n_items,
                mean_abs_active,
                score: head_alignment * mean_abs_coeff,
            }
        })
        .collect())
}

/// Share of the reliance mass held by contentful atoms; inactive atoms are ignored.
pub fn content_fraction(scores: &[f64], labels: &[AtomLabel]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::SizeMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pick = |want: &dyn Fn(AtomLabel) -> bool| {
        compensated_sum(scores.iter().zip(labels).filter(|(_, &l)| want(l)).map(|(&s, _)| s))
    };
    let total = pick(&|l| l != AtomLabel::Inactive);
    if total <= 0.0 {
        return Err(Error::NoRelianceMass);
    }
    let content = pick(&|l| l == AtomLabel::Contentful);
    Ok((content / total).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub atom_id: usize,
    pub rank: usize,
    pub image_id: String,
    pub patch_row: i32,
    pub patch_col: i32,
    pub coeff: f64,
    pub context_halfwidth: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Atoms with fewer than `n_viz` activating items.
    pub short_atoms: Vec<usize>,
}

/// For each requested atom, the `n_viz` items with the largest `|coeff|`,
/// descending; ties go to the smaller `(image_id, patch_row, patch_col)`.
pub fn top_activating_manifest(
    codes: &SparseCodes,
    meta: &[ItemMeta],
    atom_ids: &[usize],
    n_viz: usize,
    n_dicts: usize,
) -> Result<Manifest> {
    if codes.len() != meta.len() {
        return Err(Error::SizeMismatch(format!(
            "{} codes for {} metadata records",
            codes.len(),
            meta.len()
        )));
    }
    if let Some(&a) = atom_ids.iter().find(|&&a| a >= n_dicts) {
        return Err(Error::UnknownAtom { atom: a, n_dicts });
    }
    let mut hits: BTreeMap<usize, Vec<(usize, f64)>> = atom_ids.iter().map(|&a| (a, Vec::new())).collect();
    for (i, code) in codes.codes.iter().enumerate() {
        for (j, c) in code.iter() {
            if c != 0.0 {
                if let Some(h) = hits.get_mut(&j) {
                    h.push((i, c));
                }
            }
        }
    }
    let key = |i: usize| (&meta[i].image_id, meta[i].patch_row, meta[i].patch_col, i);
    let mut records = Vec::new();
    let mut short_atoms = Vec::new();
    for &atom in atom_ids {
        let mut h = hits[&atom].clone();
        h.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then_with(|| key(a.0).cmp(&key(b.0))));
        if h.len() < n_viz {
            short_atoms.push(atom);
        }
        records.extend(h.iter().take(n_viz).enumerate().map(|(rank, &(i, c))| ManifestRecord {
            atom_id: atom,
            rank,
            image_id: meta[i].image_id.clone(),
            patch_row: meta[i].patch_row,
            patch_col: meta[i].patch_col,
            coeff: c,
            context_halfwidth: CONTEXT_HALFWIDTH,
        }));
    }
    Ok(Manifest { records, short_atoms })
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in &manifest.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomProfile {
    pub atom_id: usize,
    pub rates: BTreeMap<String, f64>,
    pub cv: Option<f64>,
    pub label: AtomLabel,
    pub reliance_score: f64,
    pub head_alignment: f64,
    pub mean_abs_coeff: f64,
}

/// Joins rates, labels and (optionally) reliance into one profile per atom.
pub fn build_profiles(
    rates: &ActivationRates,
    cvs: &[Option<f64>],
    split: &ContentStyleSplit,
    reliance: Option<&[AtomReliance]>,
) -> Vec<AtomProfile> {
    (0..rates.n_dicts())
        .map(|j| {
            let r = reliance.map(|r| r[j]);
            AtomProfile {
                atom_id: j,
                rates: rates
                    .subsets
                    .iter()
                    .cloned()
                    .zip(rates.rates[j].iter().copied())
                    .collect(),
                cv: cvs[j],
                label: split.labels[j],
                reliance_score: r.map_or(0.0, |r| r.score),
                head_alignment: r.map_or(0.0, |r| r.head_alignment),
                mean_abs_coeff: r.map_or(0.0, |r| r.mean_abs_coeff),
            }
        })
        .collect()
}

pub fn write_profiles_json(profiles: &[AtomProfile], path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(profiles)?)?;
    Ok(())
}

pub fn read_profiles_json(path: &Path) -> Result<Vec<AtomProfile>> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// CSV with one `rate_<subset>` column per subset; an undefined CV is left empty.
pub fn write_profiles_csv(profiles: &[AtomProfile], path: &Path) -> Result<()> {
    let subsets: Vec<&String> = profiles.first().map(|p| p.rates.keys().collect()).unwrap_or_default();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["atom_id".to_string()];
    header.extend(subsets.iter().map(|s| format!("rate_{s}")));
    header.extend(["cv", "label", "alignment", "mean_abs", "score"].map(String::from));
    w.write_record(&header)?;
    for p in profiles {
        let mut row = vec![p.atom_id.to_string()];
        row.extend(subsets.iter().map(|s| p.rates[*s].to_string()));
        row.push(p.cv.map(|c| c.to_string()).unwrap_or_default());
        row.push(p.label.as_str().to_string());
        row.push(p.head_alignment.to_string());
        row.push(p.mean_abs_coeff.to_string());
        row.push(p.reliance_score.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
