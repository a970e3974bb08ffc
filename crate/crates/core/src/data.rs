//! Embedding, dictionary and sparse-code containers, plus the EMBZ-v1 and
//! JSON-lines file formats used to move them between pipeline stages.
//!
//! EMBZ-v1 layout:
//!
//! ```text
//! bytes 0..6      b"EMBZ1\n"
//! bytes 6..14     header length H, u64 little-endian
//! bytes 14..14+H  UTF-8 JSON {"n_items", "n_dims", "kind", "meta": [...]}
//! remainder       n_items * n_dims f32 little-endian, row-major
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBZ_MAGIC: &[u8; 6] = b"EMBZ1\n";
const PREFIX_LEN: usize = 14;

/// Tolerance on atom norms that `Dictionary` guarantees after normalization.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbzKind {
    Embeddings,
    Dictionary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub image_id: String,
    pub subset: String,
    /// Patch grid row, or -1 for image-level summaries.
    pub patch_row: i32,
    pub patch_col: i32,
    pub is_cue: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sam_alpha: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl ItemMeta {
    pub fn patch(image_id: &str, subset: &str, row: i32, col: i32) -> Self {
        ItemMeta {
            image_id: image_id.to_string(),
            subset: subset.to_string(),
            patch_row: row,
            patch_col: col,
            is_cue: false,
            sam_alpha: None,
            label: None,
        }
    }

    /// Metadata for an image-level summary item.
    pub fn summary(image_id: &str, subset: &str) -> Self {
        Self::patch(image_id, subset, -1, -1)
    }

    pub fn is_summary(&self) -> bool {
        self.patch_row == -1 && self.patch_col == -1
    }

    fn validate(&self, index: usize) -> Result<()> {
        let pos_ok = |v: i32| v >= -1;
        if !pos_ok(self.patch_row) || !pos_ok(self.patch_col) {
            return Err(Error::InvalidMeta(format!(
                "item {index}: patch position ({}, {}) out of range",
                self.patch_row, self.patch_col
            )));
        }
        if self.is_cue && (self.patch_row, self.patch_col) != (0, 0) {
            return Err(Error::InvalidMeta(format!(
                "item {index}: cue patch must sit at (0, 0)"
            )));
        }
        if let Some(alpha) = &self.sam_alpha {
            if alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::InvalidMeta(format!(
                    "item {index}: sam_alpha entries must lie in [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Per-item embedding rows with their metadata.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    data: Array2<f32>,
    meta: Vec<ItemMeta>,
}

impl PartialEq for EmbeddingSet {
    /// Bit-exact comparison of the payload.
    fn eq(&self, other: &Self) -> bool {
        self.data.dim() == other.data.dim()
            && self.meta == other.meta
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl EmbeddingSet {
    pub fn new(data: Array2<f32>, meta: Vec<ItemMeta>) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(Error::InvalidMeta("n_dims must be positive".into()));
        }
        if data.nrows() != meta.len() {
            return Err(Error::SizeMismatch(format!(
                "{} data rows but {} metadata records",
                data.nrows(),
                meta.len()
            )));
        }
        for (i, row) in data.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row: i });
            }
        }
        for (i, m) in meta.iter().enumerate() {
            m.validate(i)?;
        }
        Ok(EmbeddingSet { data, meta })
    }

    /// Builds a set from f64 rows, rounding to the f32 storage precision.
    pub fn from_f64(data: &Array2<f64>, meta: Vec<ItemMeta>) -> Result<Self> {
        Self::new(data.mapv(|v| v as f32), meta)
    }

    pub fn empty(n_dims: usize) -> Self {
        EmbeddingSet {
            data: Array2::zeros((0, n_dims)),
            meta: Vec::new(),
        }
    }

    pub fn n_items(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_dims(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.n_items() == 0
    }

    pub fn data(&self) -> ArrayView2<'_, f32> {
        self.data.view()
    }

    pub fn meta(&self) -> &[ItemMeta] {
        &self.meta
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.data.row(i)
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.data.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(|v| v as f64)
    }

    /// Items at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> EmbeddingSet {
        EmbeddingSet {
            data: self.data.select(Axis(0), indices),
            meta: indices.iter().map(|&i| self.meta[i].clone()).collect(),
        }
    }

    /// Concatenates sets with equal `n_dims`.
    pub fn concat(sets: &[EmbeddingSet]) -> Result<EmbeddingSet> {
        let Some(first) = sets.first() else {
            return Err(Error::InvalidConfig("nothing to concatenate".into()));
        };
        let n_dims = first.n_dims();
        if let Some(bad) = sets.iter().find(|s| s.n_dims() != n_dims) {
            return Err(Error::DimMismatch {
                expected: n_dims,
                got: bad.n_dims(),
            });
        }
        let views: Vec<_> = sets.iter().map(|s| s.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views).expect("column counts checked");
        let meta = sets.iter().flat_map(|s| s.meta.iter().cloned()).collect();
        Ok(EmbeddingSet { data, meta })
    }

    /// Groups item indices by `image_id` in order of first appearance.
    pub fn group_by_image(&self) -> Vec<ImageGroup> {
        let mut order: Vec<ImageGroup> = Vec::new();
        let mut lookup: HashMap<&str, usize> = HashMap::new();
        for (i, m) in self.meta.iter().enumerate() {
            let slot = *lookup.entry(m.image_id.as_str()).or_insert_with(|| {
                order.push(ImageGroup {
                    image_id: m.image_id.clone(),
                    items: Vec::new(),
                });
                order.len() - 1
            });
            order[slot].items.push(i);
        }
        order
    }

    /// Assembles the `grid² × n_dims` patch matrix of one image in row-major
    /// patch order. Every grid position must be present exactly once.
    pub fn patch_matrix(&self, group: &ImageGroup, grid: usize) -> Result<PatchGrid> {
        let n = grid * grid;
        let mut slot_of: Vec<Option<usize>> = vec![None; n];
        for &i in &group.items {
            let m = &self.meta[i];
            if m.is_summary() {
                continue;
            }
            let (r, c) = (m.patch_row, m.patch_col);
            if r < 0 || c < 0 || r as usize >= grid || c as usize >= grid {
                return Err(Error::InvalidMeta(format!(
                    "image {}: patch ({r}, {c}) outside a {grid}x{grid} grid",
                    group.image_id
                )));
            }
            let p = r as usize * grid + c as usize;
            if slot_of[p].replace(i).is_some() {
                return Err(Error::InvalidMeta(format!(
                    "image {}: duplicate patch ({r}, {c})",
                    group.image_id
                )));
            }
        }
        let items: Vec<usize> = slot_of
            .into_iter()
            .enumerate()
            .map(|(p, s)| {
                s.ok_or_else(|| {
                    Error::InvalidMeta(format!(
                        "image {}: missing patch ({}, {})",
                        group.image_id,
                        p / grid,
                        p % grid
                    ))
                })
            })
            .collect::<Result<_>>()?;
        let patches = self.data.select(Axis(0), &items).mapv(|v| v as f64);
        let is_cue = items.iter().map(|&i| self.meta[i].is_cue).collect();
        Ok(PatchGrid {
            image_id: group.image_id.clone(),
            items,
            patches,
            is_cue,
        })
    }

    /// Subset tag of every item.
    pub fn subsets(&self) -> Vec<&str> {
        self.meta.iter().map(|m| m.subset.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageGroup {
    pub image_id: String,
    pub items: Vec<usize>,
}

/// One image's patches in row-major grid order.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub image_id: String,
    /// Source item index of each patch.
    pub items: Vec<usize>,
    pub patches: Array2<f64>,
    pub is_cue: Vec<bool>,
}

/// Drops cue patches, preserving order.
pub fn filter_non_cue(set: &EmbeddingSet) -> EmbeddingSet {
    let keep: Vec<usize> = (0..set.n_items()).filter(|&i| !set.meta[i].is_cue).collect();
    set.select(&keep)
}

#[derive(Serialize, Deserialize)]
struct EmbzHeader {
    n_items: usize,
    n_dims: usize,
    kind: EmbzKind,
    meta: Vec<ItemMeta>,
}

struct RawEmbz {
    kind: EmbzKind,
    meta: Vec<ItemMeta>,
    data: Array2<f32>,
}

fn encode_embz(kind: EmbzKind, meta: &[ItemMeta], data: ArrayView2<'_, f32>) -> Result<Vec<u8>> {
    let header = EmbzHeader {
        n_items: data.nrows(),
        n_dims: data.ncols(),
        kind,
        meta: meta.to_vec(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + data.len() * 4);
    out.extend_from_slice(EMBZ_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode_embz(bytes: &[u8]) -> Result<RawEmbz> {
    if bytes.len() < EMBZ_MAGIC.len() || &bytes[..EMBZ_MAGIC.len()] != EMBZ_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < PREFIX_LEN {
        return Err(Error::SizeMismatch("missing header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let header_end = PREFIX_LEN
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::SizeMismatch(format!("header length {header_len} exceeds file size {}", bytes.len())))?;
    let header: EmbzHeader = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])?;
    let expected = header
        .n_items
        .checked_mul(header.n_dims)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::SizeMismatch("header dimensions overflow".into()))?;
    let payload = &bytes[header_end..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::SizeMismatch(format!(
            "payload has {} bytes, header declares {expected}",
            payload.len()
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = Array2::from_shape_vec((header.n_items, header.n_dims), values).expect("payload length checked");
    Ok(RawEmbz {
        kind: header.kind,
        meta: header.meta,
        data,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Serializes an embedding set to EMBZ-v1 bytes. `EmbeddingSet` values only
/// exist in a valid state, so every encoded set decodes.
pub fn encode_embeddings(set: &EmbeddingSet) -> Result<Vec<u8>> {
    encode_embz(EmbzKind::Embeddings, &set.meta, set.data.view())
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingSet> {
    let raw = decode_embz(bytes)?;
    if raw.kind != EmbzKind::Embeddings {
        return Err(Error::InvalidMeta("file holds a dictionary, not embeddings".into()));
    }
    if raw.meta.len() != raw.data.nrows() {
        return Err(Error::SizeMismatch(format!(
            "header declares {} items but lists {} metadata records",
            raw.data.nrows(),
            raw.meta.len()
        )));
    }
    EmbeddingSet::new(raw.data, raw.meta)
}

pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let bytes = encode_embeddings(set)?;
    write_bytes(path, &bytes)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    decode_embeddings(&read_bytes(path)?)
}

/// A set of atom directions stored row-wise (`n_dicts × n_dims`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: Array2<f64>,
    max_norm_deviation: f64,
}

impl Dictionary {
    /// Wraps rows as-is. Norms are recorded but not enforced here; sparse
    /// coding checks them before use.
    pub fn new(atoms: Array2<f64>) -> Result<Self> {
        if atoms.nrows() == 0 || atoms.ncols() == 0 {
            return Err(Error::InvalidConfig("dictionary must be non-empty".into()));
        }
        for (i, row) in atoms.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row: i });
            }
        }
        let max_norm_deviation = atoms
            .axis_iter(Axis(0))
            .map(|r| (r.dot(&r).sqrt() - 1.0).abs())
            .fold(0.0, f64::max);
        Ok(Dictionary {
            atoms,
            max_norm_deviation,
        })
    }

    /// Scales every row to unit norm. Zero rows are rejected.
    pub fn normalized(mut atoms: Array2<f64>) -> Result<Self> {
        for (i, mut row) in atoms.axis_iter_mut(Axis(0)).enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::NonUnitAtom { atom: i, norm: n });
            }
            row /= n;
        }
        Self::new(atoms)
    }

    pub fn n_dicts(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn n_dims(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn atoms(&self) -> ArrayView2<'_, f64> {
        self.atoms.view()
    }

    pub fn atom(&self, j: usize) -> ArrayView1<'_, f64> {
        self.atoms.row(j)
    }

    pub fn is_overcomplete(&self) -> bool {
        self.n_dicts() >= self.n_dims()
    }

    pub fn max_norm_deviation(&self) -> f64 {
        self.max_norm_deviation
    }

    pub fn check_unit_norm(&self, tol: f64) -> Result<()> {
        if self.max_norm_deviation <= tol {
            return Ok(());
        }
        let (atom, norm) = self
            .atoms
            .axis_iter(Axis(0))
            .map(|r| r.dot(&r).sqrt())
            .enumerate()
            .max_by(|a, b| (a.1 - 1.0).abs().total_cmp(&(b.1 - 1.0).abs()))
            .unwrap();
        Err(Error::NonUnitAtom { atom, norm })
    }

    /// Reconstructs `D x` for a sparse code.
    pub fn reconstruct(&self, code: &SparseCode) -> Vec<f64> {
        let mut out = vec![0.0; self.n_dims()];
        for (&j, &c) in code.atoms.iter().zip(&code.coeffs) {
            for (o, &d) in out.iter_mut().zip(self.atoms.row(j)) {
                *o += c * d;
            }
        }
        out
    }
}

/// Writes any row matrix as an EMBZ `dictionary` file (f32 payload, empty meta).
pub fn write_matrix(rows: ArrayView2<'_, f64>, path: &Path) -> Result<()> {
    let data = rows.mapv(|v| v as f32);
    write_bytes(path, &encode_embz(EmbzKind::Dictionary, &[], data.view())?)
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let raw = decode_embz(&read_bytes(path)?)?;
    if raw.kind != EmbzKind::Dictionary {
        return Err(Error::InvalidMeta("file holds embeddings, not a dictionary".into()));
    }
    Ok(raw.data.mapv(|v| v as f64))
}

pub fn write_dictionary(dict: &Dictionary, path: &Path) -> Result<()> {
    write_matrix(dict.atoms(), path)
}

/// Reads a dictionary and renormalizes its rows in f64 to undo f32 storage
/// rounding.
pub fn read_dictionary(path: &Path) -> Result<Dictionary> {
    Dictionary::normalized(read_matrix(path)?)
}

/// Sparse code of one item: sorted distinct atom indices and their coefficients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseCode {
    pub atoms: Vec<usize>,
    pub coeffs: Vec<f64>,
}

impl SparseCode {
    /// Builds a code from `(atom, coeff)` pairs in any order.
    pub fn from_pairs(mut pairs: Vec<(usize, f64)>) -> Self {
        pairs.sort_by_key(|p| p.0);
        let (atoms, coeffs) = pairs.into_iter().unzip();
        SparseCode { atoms, coeffs }
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn coeff(&self, atom: usize) -> Option<f64> {
        self.atoms.binary_search(&atom).ok().map(|i| self.coeffs[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.atoms.iter().copied().zip(self.coeffs.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseCodes {
    pub codes: Vec<SparseCode>,
    pub n_nnz_budget: usize,
}

impl SparseCodes {
    pub fn new(codes: Vec<SparseCode>, n_nnz_budget: usize) -> Result<Self> {
        for (i, c) in codes.iter().enumerate() {
            if c.atoms.len() != c.coeffs.len() {
                return Err(Error::InvalidMeta(format!(
                    "code {i}: {} atoms but {} coefficients",
                    c.atoms.len(),
                    c.coeffs.len()
                )));
            }
            if c.atoms.len() > n_nnz_budget {
                return Err(Error::InvalidMeta(format!(
                    "code {i}: support {} exceeds budget {n_nnz_budget}",
                    c.atoms.len()
                )));
            }
            if c.atoms.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidMeta(format!(
                    "code {i}: atom indices must be strictly increasing"
                )));
            }
        }
        Ok(SparseCodes { codes, n_nnz_budget })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn max_atom(&self) -> Option<usize> {
        self.codes.iter().filter_map(|c| c.atoms.last().copied()).max()
    }

    pub fn select(&self, indices: &[usize]) -> SparseCodes {
        SparseCodes {
            codes: indices.iter().map(|&i| self.codes[i].clone()).collect(),
            n_nnz_budget: self.n_nnz_budget,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CodeLine {
    item: usize,
    atoms: Vec<usize>,
    coeffs: Vec<f64>,
}

pub fn write_codes(codes: &SparseCodes, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (item, c) in codes.codes.iter().enumerate() {
        let line = CodeLine {
            item,
            atoms: c.atoms.clone(),
            coeffs: c.coeffs.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads JSON-lines codes. Items must appear in order `0, 1, 2, ...`.
pub fn read_codes(path: &Path, n_nnz_budget: usize) -> Result<SparseCodes> {
    let reader = BufReader::new(File::open(path)?);
    let mut codes = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CodeLine = serde_json::from_str(&line)?;
        if parsed.item != codes.len() {
            return Err(Error::InvalidMeta(format!(
                "code line for item {} found at position {}",
                parsed.item,
                codes.len()
            )));
        }
        codes.push(SparseCode {
            atoms: parsed.atoms,
            coeffs: parsed.coeffs,
        });
    }
    SparseCodes::new(codes, n_nnz_budget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn meta(id: &str, subset: &str, r: i32, c: i32) -> ItemMeta {
        ItemMeta::patch(id, subset, r, c)
    }

    #[test]
    fn single_zero_item_has_header_plus_sixteen_payload_bytes() {
        let set = EmbeddingSet::new(Array2::zeros((1, 4)), vec![meta("a", "xplane", 0, 1)]).unwrap();
        let bytes = encode_embeddings(&set).unwrap();
        let h = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        assert_eq!(&bytes[..6], b"EMBZ1\n");
        assert_eq!(bytes.len(), 14 + h + 16);
        assert_eq!(decode_embeddings(&bytes).unwrap(), set);
    }

    #[test]
    fn header_length_field_matches_json() {
        let set = EmbeddingSet::new(
            array![[1.0f32, 2.0], [3.0, 4.0]],
            vec![meta("a", "ges", 0, 0), meta("b", "arcgis", 1, 0)],
        )
        .unwrap();
        let bytes = encode_embeddings(&set).unwrap();
        let h = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let json: serde_json::Value = serde_json::from_slice(&bytes[14..14 + h]).unwrap();
        assert_eq!(json["n_items"], 2);
        assert_eq!(json["n_dims"], 2);
        assert_eq!(json["kind"], "embeddings");
        assert_eq!(bytes.len() - 14 - h, 2 * 2 * 4);
    }

    #[test]
    fn mixed_subsets_round_trip_in_order() {
        let set = EmbeddingSet::new(
            array![[0.5f32, -1.0], [2.0, 3.0], [-0.25, 1e-30]],
            vec![
                meta("i0", "xplane", 0, 1),
                meta("i0", "bingmaps", 1, 1),
                ItemMeta {
                    sam_alpha: Some(vec![0.1, 0.9]),
                    label: Some("ims".into()),
                    ..meta("i1", "ges", 3, 2)
                },
            ],
        )
        .unwrap();
        let back = decode_embeddings(&encode_embeddings(&set).unwrap()).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.subsets(), vec!["xplane", "bingmaps", "ges"]);
    }

    #[test]
    fn nan_row_is_refused() {
        let err = EmbeddingSet::new(array![[0.0f32, f32::NAN]], vec![meta("a", "s", 0, 1)]).unwrap_err();
        assert!(err.to_string().contains("non-finite data"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = decode_embeddings(b"XXXX").unwrap_err();
        assert_eq!(err.to_string(), "bad magic");
    }

    #[test]
    fn payload_one_byte_short_is_truncated() {
        let set = EmbeddingSet::new(array![[1.0f32, 2.0]], vec![meta("a", "s", 0, 1)]).unwrap();
        let mut bytes = encode_embeddings(&set).unwrap();
        bytes.pop();
        let err = decode_embeddings(&bytes).unwrap_err();
        assert!(err.to_string().starts_with("truncated payload"), "{err}");
    }

    #[test]
    fn payload_too_long_is_size_mismatch() {
        let set = EmbeddingSet::new(array![[1.0f32, 2.0]], vec![meta("a", "s", 0, 1)]).unwrap();
        let mut bytes = encode_embeddings(&set).unwrap();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(decode_embeddings(&bytes), Err(Error::SizeMismatch(_))));
    }

    #[test]
    fn cue_flag_requires_top_left() {
        let bad = ItemMeta {
            is_cue: true,
            ..meta("a", "s", 1, 0)
        };
        assert!(EmbeddingSet::new(array![[1.0f32]], vec![bad]).is_err());
    }

    #[test]
    fn sam_alpha_out_of_range_is_rejected() {
        let bad = ItemMeta {
            sam_alpha: Some(vec![1.5]),
            ..meta("a", "s", 1, 0)
        };
        assert!(EmbeddingSet::new(array![[1.0f32]], vec![bad]).is_err());
    }

    fn grid_image(id: &str, grid: i32, cue: bool) -> (Vec<f32>, Vec<ItemMeta>) {
        let mut data = Vec::new();
        let mut metas = Vec::new();
        for r in 0..grid {
            for c in 0..grid {
                data.push((r * grid + c) as f32);
                metas.push(ItemMeta {
                    is_cue: cue && r == 0 && c == 0,
                    ..meta(id, "xplane", r, c)
                });
            }
        }
        (data, metas)
    }

    #[test]
    fn filter_drops_single_cue_patch_of_256() {
        let (data, metas) = grid_image("img", 16, true);
        let set = EmbeddingSet::new(Array2::from_shape_vec((256, 1), data).unwrap(), metas).unwrap();
        let filtered = filter_non_cue(&set);
        assert_eq!(filtered.n_items(), 255);
        assert!(filtered.meta().iter().all(|m| !m.is_cue));
        assert_eq!(filtered.row(0)[0], 1.0);
        assert_eq!(filter_non_cue(&filtered), filtered);
    }

    #[test]
    fn filter_without_cue_is_identity_and_all_cue_is_empty() {
        let (data, metas) = grid_image("img", 2, false);
        let set = EmbeddingSet::new(Array2::from_shape_vec((4, 1), data).unwrap(), metas).unwrap();
        assert_eq!(filter_non_cue(&set), set);

        let cue = ItemMeta {
            is_cue: true,
            ..meta("a", "s", 0, 0)
        };
        let all_cue = EmbeddingSet::new(array![[1.0f32], [2.0]], vec![cue.clone(), cue]).unwrap();
        assert!(filter_non_cue(&all_cue).is_empty());
    }

    #[test]
    fn patch_matrix_orders_row_major_and_rejects_gaps() {
        let (data, mut metas) = grid_image("img", 2, false);
        metas.reverse();
        let mut data = data;
        data.reverse();
        let set = EmbeddingSet::new(Array2::from_shape_vec((4, 1), data).unwrap(), metas).unwrap();
        let groups = set.group_by_image();
        assert_eq!(groups.len(), 1);
        let grid = set.patch_matrix(&groups[0], 2).unwrap();
        assert_eq!(grid.patches.column(0).to_vec(), vec![0.0, 1.0, 2.0, 3.0]);
        assert!(set.patch_matrix(&groups[0], 3).is_err());
    }

    #[test]
    fn dictionary_normalizes_and_tracks_norms() {
        let d = Dictionary::normalized(array![[3.0, 4.0], [0.0, 2.0]]).unwrap();
        assert!(d.max_norm_deviation() < 1e-15);
        assert!(d.check_unit_norm(1e-12).is_ok());
        let raw = Dictionary::new(array![[1.0, 1.0]]).unwrap();
        assert!(matches!(
            raw.check_unit_norm(1e-4),
            Err(Error::NonUnitAtom { atom: 0, .. })
        ));
        assert!(Dictionary::normalized(array![[0.0, 0.0]]).is_err());
    }

    #[test]
    fn codes_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codes.jsonl");
        let codes = SparseCodes::new(
            vec![
                SparseCode::from_pairs(vec![(5, -0.5), (1, 2.25)]),
                SparseCode::default(),
            ],
            2,
        )
        .unwrap();
        write_codes(&codes, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"item":0,"atoms":[1,5],"coeffs":[2.25,-0.5]}"#
        );
        assert_eq!(read_codes(&path, 2).unwrap(), codes);
    }

    #[test]
    fn codes_reject_unsorted_or_over_budget() {
        let unsorted = SparseCode {
            atoms: vec![3, 1],
            coeffs: vec![1.0, 1.0],
        };
        assert!(SparseCodes::new(vec![unsorted], 4).is_err());
        let big = SparseCode::from_pairs(vec![(0, 1.0), (1, 1.0), (2, 1.0)]);
        assert!(SparseCodes::new(vec![big], 2).is_err());
    }
}
