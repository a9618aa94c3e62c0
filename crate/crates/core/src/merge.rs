//! Position-aware merge: interleave query copies into a flattened
//! image-feature sequence at their projected 1D locations.
//!
//! Each hit reference point maps to a feature cell, the cell to a sequence
//! position under the active traversal, and the query copy is inserted
//! immediately before the feature token at that position. Insertion offsets
//! are computed with the rank trick: after stable-sorting the 1D indices,
//! `position_i = R1D_i + rank_i`, which reproduces naive one-by-one insertion
//! in ascending order without quadratic shifting.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::traversal::Permutation;

/// An interleaved value/query token stream.
#[derive(Debug, Clone)]
pub struct MergedSequence {
    /// (V + M) × width token stream.
    pub stream: Array2<f64>,
    /// true = image-feature token, false = inserted query copy.
    pub s_mask: Vec<bool>,
    /// Merged position of each query copy, in the copies' original order.
    pub insert_positions: Vec<usize>,
    /// BEV query id of each inserted copy (original order).
    pub extract_index: Vec<usize>,
}

impl MergedSequence {
    pub fn len(&self) -> usize {
        self.s_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_mask.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.s_mask.iter().filter(|&&m| m).count()
    }

    pub fn num_queries(&self) -> usize {
        self.len() - self.num_values()
    }

    /// Rows of the stream that are image-feature tokens, in order.
    pub fn value_rows(&self) -> Array2<f64> {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| self.s_mask[i]).collect();
        self.stream.select(Axis(0), &rows)
    }
}

/// Map hit reference points to 1D sequence indices under a traversal.
///
/// `points` are normalized (u, v) pairs that must all be hits (finite and in
/// the closed unit square). The feature cell is `row = ⌊v·H_f⌋, col = ⌊u·W_f⌋`
/// clamped to the grid, flattened row-major and remapped through `perm`.
pub fn refpoints_to_1d(
    points: &[(f64, f64)],
    h_f: usize,
    w_f: usize,
    perm: &Permutation,
) -> Result<Vec<usize>> {
    refpoints_to_1d_with_offset(points, h_f, w_f, perm, 0)
}

/// : [`refpoints_to_1d`] with an integer shift applied to the row-major cell
/// index before remapping (clamped to the grid). Offset 0 inserts right
/// before the hit cell's token; e.g. `-(W_f+1)` targets one row up and one
/// column left instead.
pub fn refpoints_to_1d_with_offset(
    points: &[(f64, f64)],
    h_f: usize,
    w_f: usize,
    perm: &Permutation,
    offset: i64,
) -> Result<Vec<usize>> {
    if h_f < 1 || w_f < 1 {
        return Err(Error::InvalidSpec("feature grid must be at least 1x1".into()));
    }
    if perm.len() != h_f * w_f {
        return Err(Error::shape("refpoints_to_1d", h_f * w_f, perm.len()));
    }
    let mut out = Vec::with_capacity(points.len());
    for &(u, v) in points {
        if !u.is_finite() || !v.is_finite() || !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v)
        {
            return Err(Error::Contract(format!(
                "refpoints_to_1d requires hit points, got ({u}, {v})"
            )));
        }
        let row = ((v * h_f as f64).floor() as usize).min(h_f - 1);
        let col = ((u * w_f as f64).floor() as usize).min(w_f - 1);
        let idx = (w_f * row + col) as i64 + offset;
        let idx = idx.clamp(0, (h_f * w_f - 1) as i64) as usize;
        out.push(perm.apply(idx)?);
    }
    Ok(out)
}

/// Merged insertion positions from 1D reference indices: stable ascending
/// rank added back onto each index. Ties keep their original order.
pub fn index_offset(r_1d: &[usize], num_values: usize) -> Result<Vec<usize>> {
    for &idx in r_1d {
        if idx >= num_values {
            return Err(Error::Range(format!(
                "reference index {idx} >= value count {num_values}"
            )));
        }
    }
    let mut order: Vec<usize> = (0..r_1d.len()).collect();
    order.sort_by_key(|&i| (r_1d[i], i));
    let mut positions = vec![0usize; r_1d.len()];
    for (rank, &i) in order.iter().enumerate() {
        positions[i] = r_1d[i] + rank;
    }
    Ok(positions)
}

/// Assemble the interleaved stream: query copy i sits at `positions[i]`,
/// value tokens fill the remaining slots in their original order.
pub fn build_merged(
    values_flat: ArrayView2<f64>,
    query_tokens: ArrayView2<f64>,
    positions: &[usize],
    extract_ids: &[usize],
) -> Result<MergedSequence> {
    let v_count = values_flat.nrows();
    let m_count = query_tokens.nrows();
    if v_count > 0 && m_count > 0 && values_flat.ncols() != query_tokens.ncols() {
        return Err(Error::shape(
            "build_merged widths",
            values_flat.ncols(),
            query_tokens.ncols(),
        ));
    }
    if positions.len() != m_count || extract_ids.len() != m_count {
        return Err(Error::shape(
            "build_merged positions",
            m_count,
            format!("{} positions, {} extract ids", positions.len(), extract_ids.len()),
        ));
    }
    let total = v_count + m_count;
    let width = if v_count > 0 {
        values_flat.ncols()
    } else {
        query_tokens.ncols()
    };
    let mut occupied = vec![false; total];
    for &p in positions {
        if p >= total {
            return Err(Error::Range(format!("merged position {p} >= {total}")));
        }
        if occupied[p] {
            return Err(Error::Contract(format!("duplicate merged position {p}")));
        }
        occupied[p] = true;
    }

    let mut stream = Array2::zeros((total, width));
    let mut s_mask = vec![true; total];
    for (i, &p) in positions.iter().enumerate() {
        stream.row_mut(p).assign(&query_tokens.row(i));
        s_mask[p] = false;
    }
    let mut next_value = 0usize;
    for slot in 0..total {
        if !occupied[slot] {
            stream.row_mut(slot).assign(&values_flat.row(next_value));
            next_value += 1;
        }
    }
    debug_assert_eq!(next_value, v_count);
    Ok(MergedSequence {
        stream,
        s_mask,
        insert_positions: positions.to_vec(),
        extract_index: extract_ids.to_vec(),
    })
}
