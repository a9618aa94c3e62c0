//! Bijective 2D→1D flattening orders for feature maps.
//!
//! A traversal maps each grid cell (h, w) to a sequence position. Snake
//! orders reverse direction at each row/column edge; the patch order tiles
//! the grid into H_p×W_p blocks, flattens each block with an inner order and
//! arranges blocks with an outer order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flattening order. Serialized as a lowercase string for the simple
/// variants ("row_major", "column_major", "row_snake", "column_snake") and
/// as `{"patch": {...}}` for the patch variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraversalOrder {
    RowMajor,
    ColumnMajor,
    RowSnake,
    ColumnSnake,
    Patch {
        h_p: usize,
        w_p: usize,
        inner: Box<TraversalOrder>,
        outer: Box<TraversalOrder>,
    },
}

impl TraversalOrder {
    /// Short name used in reports.
    pub fn name(&self) -> &'static str {
        match self {
            TraversalOrder::RowMajor => "row_major",
            TraversalOrder::ColumnMajor => "column_major",
            TraversalOrder::RowSnake => "row_snake",
            TraversalOrder::ColumnSnake => "column_snake",
            TraversalOrder::Patch { .. } => "patch",
        }
    }
}

/// A bijection between row-major cell indices and sequence positions.
#[derive(Debug, Clone)]
pub struct Permutation {
    /// forward[row_major_idx] = sequence position
    forward: Vec<usize>,
    /// inverse[sequence position] = row_major_idx
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Sequence position of a row-major cell index.
    pub fn apply(&self, row_major_idx: usize) -> Result<usize> {
        self.forward
            .get(row_major_idx)
            .copied()
            .ok_or_else(|| Error::Range(format!("index {row_major_idx} >= {}", self.len())))
    }

    /// Row-major cell index found at a sequence position.
    pub fn apply_inverse(&self, position: usize) -> Result<usize> {
        self.inverse
            .get(position)
            .copied()
            .ok_or_else(|| Error::Range(format!("position {position} >= {}", self.len())))
    }

    pub fn forward_slice(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse_slice(&self) -> &[usize] {
        &self.inverse
    }
}

fn sequence_position(h: usize, w: usize, rows: usize, cols: usize, order: &TraversalOrder) -> usize {
    match order {
        TraversalOrder::RowMajor => h * cols + w,
        TraversalOrder::ColumnMajor => w * rows + h,
        TraversalOrder::RowSnake => {
            let col = if h % 2 == 0 { w } else { cols - 1 - w };
            h * cols + col
        }
        TraversalOrder::ColumnSnake => {
            let row = if w % 2 == 0 { h } else { rows - 1 - h };
            w * rows + row
        }
        TraversalOrder::Patch {
            h_p,
            w_p,
            inner,
            outer,
        } => {
            let (ph, pw) = (h / h_p, w / w_p);
            let outer_pos = sequence_position(ph, pw, rows / h_p, cols / w_p, outer);
            let inner_pos = sequence_position(h % h_p, w % w_p, *h_p, *w_p, inner);
            outer_pos * (h_p * w_p) + inner_pos
        }
    }
}

fn check_applicable(rows: usize, cols: usize, order: &TraversalOrder) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidOrder(format!("empty grid {rows}x{cols}")));
    }
    if let TraversalOrder::Patch {
        h_p,
        w_p,
        inner,
        outer,
    } = order
    {
        if *h_p == 0 || *w_p == 0 {
            return Err(Error::InvalidOrder("zero patch size".into()));
        }
        if rows % h_p != 0 || cols % w_p != 0 {
            return Err(Error::InvalidOrder(format!(
                "grid {rows}x{cols} not divisible by patch {h_p}x{w_p}"
            )));
        }
        check_applicable(*h_p, *w_p, inner)?;
        check_applicable(rows / h_p, cols / w_p, outer)?;
    }
    Ok(())
}

/// Build the permutation from row-major cell indices to sequence positions.
pub fn flatten_permutation(rows: usize, cols: usize, order: &TraversalOrder) -> Result<Permutation> {
    check_applicable(rows, cols, order)?;
    let n = rows * cols;
    let mut forward = vec![0usize; n];
    let mut inverse = vec![0usize; n];
    for h in 0..rows {
        for w in 0..cols {
            let pos = sequence_position(h, w, rows, cols, order);
            debug_assert!(pos < n);
            forward[h * cols + w] = pos;
            inverse[pos] = h * cols + w;
        }
    }
    Ok(Permutation { forward, inverse })
}

/// Where a row-major index lands under `order`; identity for row-major.
pub fn remap_index(idx_row_major: usize, rows: usize, cols: usize, order: &TraversalOrder) -> Result<usize> {
    if idx_row_major >= rows * cols {
        return Err(Error::Range(format!(
            "index {idx_row_major} out of range for {rows}x{cols} grid"
        )));
    }
    flatten_permutation(rows, cols, order)?.apply(idx_row_major)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn patch(h_p: usize, w_p: usize, inner: TraversalOrder, outer: TraversalOrder) -> TraversalOrder {
        TraversalOrder::Patch {
            h_p,
            w_p,
            inner: Box::new(inner),
            outer: Box::new(outer),
        }
    }

    /// Positions listed by walking the grid; independent of the closed-form
    /// index arithmetic.
    fn enumerate_order(rows: usize, cols: usize, order: &TraversalOrder) -> Vec<usize> {
        let mut cells: Vec<(usize, usize, usize)> = Vec::new(); // (pos, h, w)
        for h in 0..rows {
            for w in 0..cols {
                cells.push((sequence_position(h, w, rows, cols, order), h, w));
            }
        }
        cells.sort();
        let mut by_cell = vec![0usize; rows * cols];
        for (pos, (_, h, w)) in cells.into_iter().enumerate() {
            by_cell[h * cols + w] = pos;
        }
        by_cell
    }

    #[test]
    fn row_major_examples() {
        assert_eq!(remap_index(3, 2, 3, &TraversalOrder::RowMajor).unwrap(), 3);
        assert_eq!(remap_index(7, 4, 4, &TraversalOrder::RowMajor).unwrap(), 7);
    }

    #[test]
    fn snake_and_column_examples() {
        // (1,0) in a 2x3 grid: row-major index 3.
        assert_eq!(remap_index(3, 2, 3, &TraversalOrder::RowSnake).unwrap(), 5);
        assert_eq!(remap_index(3, 2, 3, &TraversalOrder::ColumnMajor).unwrap(), 1);
    }

    #[test]
    fn patch_example() {
        // 4x4 split into 2x2 patches, row-major inside and outside:
        // cell (1,1) = row-major idx 5 lands at position 3.
        let order = patch(2, 2, TraversalOrder::RowMajor, TraversalOrder::RowMajor);
        assert_eq!(remap_index(5, 4, 4, &order).unwrap(), 3);
    }

    #[test]
    fn snake_matches_walk_description() {
        // Row 0 left-to-right, row 1 right-to-left.
        let p = flatten_permutation(2, 3, &TraversalOrder::RowSnake).unwrap();
        assert_eq!(p.forward_slice(), &[0, 1, 2, 5, 4, 3]);
        let p = flatten_permutation(3, 2, &TraversalOrder::ColumnSnake).unwrap();
        // Column 0 top-down (cells 0,2,4), column 1 bottom-up (5,3,1).
        assert_eq!(p.forward_slice(), &[0, 5, 1, 4, 2, 3]);
    }

    #[test]
    fn divisibility_enforced() {
        let order = patch(2, 2, TraversalOrder::RowMajor, TraversalOrder::RowMajor);
        assert!(matches!(
            flatten_permutation(3, 4, &order),
            Err(Error::InvalidOrder(_))
        ));
        assert!(remap_index(6, 2, 3, &TraversalOrder::RowMajor).is_err());
    }

    #[test]
    fn snake_agrees_with_row_major_on_even_rows() {
        let rm = flatten_permutation(5, 7, &TraversalOrder::RowMajor).unwrap();
        let sn = flatten_permutation(5, 7, &TraversalOrder::RowSnake).unwrap();
        for h in (0..5).step_by(2) {
            for w in 0..7 {
                assert_eq!(rm.apply(h * 7 + w).unwrap(), sn.apply(h * 7 + w).unwrap());
            }
        }
    }

    #[test]
    fn patch_with_snake_inner_matches_enumeration() {
        let order = patch(2, 3, TraversalOrder::RowSnake, TraversalOrder::ColumnMajor);
        let p = flatten_permutation(4, 6, &order).unwrap();
        assert_eq!(p.forward_slice(), enumerate_order(4, 6, &order).as_slice());
    }

    #[test]
    fn serde_strings_are_exact() {
        let json = serde_json::to_string(&TraversalOrder::RowSnake).unwrap();
        assert_eq!(json, "\"row_snake\"");
        let back: TraversalOrder = serde_json::from_str("\"column_major\"").unwrap();
        assert_eq!(back, TraversalOrder::ColumnMajor);
        let order = patch(2, 2, TraversalOrder::RowSnake, TraversalOrder::ColumnMajor);
        let json = serde_json::to_string(&order).unwrap();
        assert_eq!(
            json,
            r#"{"patch":{"h_p":2,"w_p":2,"inner":"row_snake","outer":"column_major"}}"#
        );
        let back: TraversalOrder = serde_json::from_str(&json).unwrap();
        assert_eq!(back, order);
    }

    proptest! {
        #[test]
        fn permutation_is_bijective(rows in 1usize..9, cols in 1usize..9, which in 0usize..5) {
            let order = match which {
                0 => TraversalOrder::RowMajor,
                1 => TraversalOrder::ColumnMajor,
                2 => TraversalOrder::RowSnake,
                3 => TraversalOrder::ColumnSnake,
                _ => patch(1, 1, TraversalOrder::RowMajor, TraversalOrder::RowSnake),
            };
            let p = flatten_permutation(rows, cols, &order).unwrap();
            let mut seen = p.forward_slice().to_vec();
            seen.sort_unstable();
            let expect: Vec<usize> = (0..rows * cols).collect();
            prop_assert_eq!(seen, expect);
        }

        #[test]
        fn inverse_recovers_identity(rows in 1usize..8, cols in 1usize..8, idx_seed in 0usize..64) {
            let order = TraversalOrder::ColumnSnake;
            let p = flatten_permutation(rows, cols, &order).unwrap();
            let idx = idx_seed % (rows * cols);
            prop_assert_eq!(p.apply_inverse(p.apply(idx).unwrap()).unwrap(), idx);
            prop_assert_eq!(p.apply(p.apply_inverse(idx).unwrap()).unwrap(), idx);
        }

        #[test]
        fn patch_closed_form_matches_enumeration(
            ph in 1usize..4, pw in 1usize..4, mh in 1usize..4, mw in 1usize..4,
            inner_pick in 0usize..4, outer_pick in 0usize..4,
        ) {
            let pick = |k: usize| match k {
                0 => TraversalOrder::RowMajor,
                1 => TraversalOrder::ColumnMajor,
                2 => TraversalOrder::RowSnake,
                _ => TraversalOrder::ColumnSnake,
            };
            let order = patch(ph, pw, pick(inner_pick), pick(outer_pick));
            let (rows, cols) = (ph * mh, pw * mw);
            let p = flatten_permutation(rows, cols, &order).unwrap();
            let expect = enumerate_order(rows, cols, &order);
            prop_assert_eq!(p.forward_slice(), expect.as_slice());
        }
    }
}
