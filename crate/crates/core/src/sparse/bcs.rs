use super::{Scalar, SparseError, SparsityMask};

/// Block-compressed storage of a sparse matrix.
///
/// Rows are reordered so that rows with equal non-zero counts sit together
/// and rows with identical column lists are adjacent. Each distinct column
/// list is stored once in `compact_cols`; group `g` owns the segment
/// `compact_cols[col_stride[g]..col_stride[g + 1]]` and the reordered rows
/// `occurrence[g]..occurrence[g + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BcsMatrix<T> {
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    pub(crate) weights: Vec<T>,
    pub(crate) compact_cols: Vec<u32>,
    pub(crate) col_stride: Vec<u32>,
    pub(crate) occurrence: Vec<u32>,
    pub(crate) row_offset: Vec<u32>,
    pub(crate) perm: Vec<u32>,
}

impl<T: Scalar> BcsMatrix<T> {
    /// Stores every entry the mask keeps, including explicit zeros.
    pub fn encode(dense: &[T], mask: &SparsityMask) -> Result<Self, SparseError> {
        if dense.len() != mask.rows * mask.cols {
            return Err(SparseError::Shape(format!(
                "{} values for a {}x{} mask",
                dense.len(),
                mask.rows,
                mask.cols
            )));
        }
        Self::build(dense, mask.rows, mask.cols, |i| mask.keep[i])
    }

    /// Stores the non-zero entries of `dense`.
    pub fn from_dense(dense: &[T], rows: usize, cols: usize) -> Result<Self, SparseError> {
        if dense.len() != rows * cols {
            return Err(SparseError::Shape(format!("{} values for {rows}x{cols}", dense.len())));
        }
        Self::build(dense, rows, cols, |i| dense[i] != T::ZERO)
    }

    fn build(dense: &[T], rows: usize, cols: usize, keep: impl Fn(usize) -> bool) -> Result<Self, SparseError> {
        if rows > u32::MAX as usize || cols > u32::MAX as usize {
            return Err(SparseError::Shape("dimensions exceed u32".into()));
        }
        let lists: Vec<Vec<u32>> = (0..rows)
            .map(|r| (0..cols).filter(|&c| keep(r * cols + c)).map(|c| c as u32).collect())
            .collect();
        let mut order: Vec<usize> = (0..rows).collect();
        order.sort_by(|&a, &b| {
            lists[b]
                .len()
                .cmp(&lists[a].len())
                .then_with(|| lists[a].cmp(&lists[b]))
                .then(a.cmp(&b))
        });

        let mut m = BcsMatrix {
            rows,
            cols,
            weights: Vec::new(),
            compact_cols: Vec::new(),
            col_stride: vec![0],
            occurrence: vec![0],
            row_offset: vec![0],
            perm: Vec::with_capacity(rows),
        };
        for (pos, &r) in order.iter().enumerate() {
            if pos > 0 && lists[r] != lists[order[pos - 1]] {
                m.col_stride.push(m.compact_cols.len() as u32);
                m.occurrence.push(pos as u32);
            }
            if pos == 0 || lists[r] != lists[order[pos - 1]] {
                m.compact_cols.extend_from_slice(&lists[r]);
            }
            m.weights.extend(lists[r].iter().map(|&c| dense[r * cols + c as usize]));
            m.row_offset.push(m.weights.len() as u32);
            m.perm.push(r as u32);
        }
        if rows > 0 {
            m.col_stride.push(m.compact_cols.len() as u32);
            m.occurrence.push(rows as u32);
        }
        Ok(m)
    }

    /// Dense reconstruction in the original row order.
    pub fn decode(&self) -> Result<Vec<T>, SparseError> {
        self.validate()?;
        let mut out = vec![T::ZERO; self.rows * self.cols];
        for g in 0..self.groups() {
            let cols = self.group_cols(g);
            for pos in self.occurrence[g] as usize..self.occurrence[g + 1] as usize {
                let r = self.perm[pos] as usize;
                let w = self.row_weights(pos);
                for (&c, &v) in cols.iter().zip(w) {
                    out[r * self.cols + c as usize] = v;
                }
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), SparseError> {
        let fail = |msg: String| Err(SparseError::Format(msg));
        if self.perm.len() != self.rows || self.row_offset.len() != self.rows + 1 {
            return fail("permutation or row offsets do not match the row count".into());
        }
        if self.col_stride.len() != self.occurrence.len() || self.col_stride.is_empty() {
            return fail("column stride and occurrence arrays disagree".into());
        }
        if *self.row_offset.last().unwrap() as usize != self.weights.len() {
            return fail("last row offset does not equal the weight count".into());
        }
        if *self.col_stride.last().unwrap() as usize != self.compact_cols.len() {
            return fail("last column stride does not cover the compact columns".into());
        }
        if self.occurrence[0] != 0 || *self.occurrence.last().unwrap() as usize != self.rows {
            return fail("occurrence ranges do not partition the rows".into());
        }
        let monotone = |a: &[u32]| a.windows(2).all(|w| w[0] <= w[1]);
        if !monotone(&self.occurrence) || !monotone(&self.col_stride) || !monotone(&self.row_offset) {
            return fail("index arrays are not non-decreasing".into());
        }
        if self.compact_cols.iter().any(|&c| c as usize >= self.cols) {
            return fail("column index out of range".into());
        }
        let mut seen = vec![false; self.rows];
        for &p in &self.perm {
            if p as usize >= self.rows || std::mem::replace(&mut seen[p as usize], true) {
                return fail("row permutation is not a bijection".into());
            }
        }
        for g in 0..self.groups() {
            let len = (self.col_stride[g + 1] - self.col_stride[g]) as usize;
            for pos in self.occurrence[g] as usize..self.occurrence[g + 1] as usize {
                if (self.row_offset[pos + 1] - self.row_offset[pos]) as usize != len {
                    return fail(format!("row {pos} length differs from its column segment"));
                }
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.weights.len()
    }

    /// Number of distinct column lists.
    pub fn groups(&self) -> usize {
        self.occurrence.len() - 1
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn compact_cols(&self) -> &[u32] {
        &self.compact_cols
    }

    pub fn col_stride(&self) -> &[u32] {
        &self.col_stride
    }

    pub fn occurrence(&self) -> &[u32] {
        &self.occurrence
    }

    pub fn row_offset(&self) -> &[u32] {
        &self.row_offset
    }

    /// Original row id of each reordered position.
    pub fn permutation(&self) -> &[u32] {
        &self.perm
    }

    pub fn group_cols(&self, g: usize) -> &[u32] {
        &self.compact_cols[self.col_stride[g] as usize..self.col_stride[g + 1] as usize]
    }

    pub(crate) fn row_weights(&self, pos: usize) -> &[T] {
        &self.weights[self.row_offset[pos] as usize..self.row_offset[pos + 1] as usize]
    }

    /// Index entries stored (everything but the weights).
    pub fn index_len(&self) -> usize {
        self.compact_cols.len() + self.col_stride.len() + self.occurrence.len() + self.row_offset.len() + self.perm.len()
    }

    /// Index entries plain CSR would need for the same matrix.
    pub fn csr_index_len(&self) -> usize {
        self.nnz() + self.rows + 1
    }

    pub fn cast<U: Scalar>(&self) -> BcsMatrix<U> {
        BcsMatrix {
            rows: self.rows,
            cols: self.cols,
            weights: self.weights.iter().map(|w| U::from_f64(w.to_f64())).collect(),
            compact_cols: self.compact_cols.clone(),
            col_stride: self.col_stride.clone(),
            occurrence: self.occurrence.clone(),
            row_offset: self.row_offset.clone(),
            perm: self.perm.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::PruningScheme;
    use crate::sparse::{make_mask, MaskParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn figure_matrix() -> Vec<f32> {
        let mut m = vec![0.0f32; 3 * 8];
        for (c, v) in [(0, 2.0), (3, 3.0), (7, 4.0)] {
            m[c] = v;
            m[8 + c] = v + 3.0;
        }
        m[16 + 5] = 9.0;
        m
    }

    #[test]
    fn shared_column_list_stored_once() {
        let dense = figure_matrix();
        let m = BcsMatrix::from_dense(&dense, 3, 8).unwrap();
        assert_eq!(&m.compact_cols()[..3], &[0, 3, 7]);
        assert_eq!(&m.col_stride()[..2], &[0, 3]);
        assert_eq!(&m.occurrence()[..2], &[0, 2]);
        assert_eq!(&m.weights()[..3], &[2.0, 3.0, 4.0]);
        assert_eq!(&m.permutation()[..2], &[0, 1]);
        assert_eq!(m.groups(), 2);
        assert_eq!(m.decode().unwrap(), dense);
    }

    #[test]
    fn rows_sorted_by_nnz_descending() {
        let dense = [0.0f64, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let m = BcsMatrix::from_dense(&dense, 3, 3).unwrap();
        assert_eq!(m.permutation(), &[1, 0, 2]);
        assert_eq!(m.row_offset(), &[0, 3, 4, 4]);
    }

    #[test]
    fn all_zero_matrix() {
        let m = BcsMatrix::from_dense(&[0.0f32; 12], 3, 4).unwrap();
        assert!(m.weights().is_empty());
        assert_eq!(m.groups(), 1);
        assert_eq!(m.col_stride(), &[0, 0]);
        assert_eq!(m.occurrence(), &[0, 3]);
        assert_eq!(m.decode().unwrap(), vec![0.0; 12]);
    }

    #[test]
    fn random_masked_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = MaskParams::default();
        for i in 0..300 {
            let rows = rng.gen_range(1..24);
            let cols = rng.gen_range(1..6) * 9;
            let w: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let scheme = PruningScheme::ALL[i % 3];
            let ratio = if scheme == PruningScheme::Pattern { 0.6 } else { rng.gen_range(0.0..0.95) };
            let mask = make_mask(&w, rows, cols, (3, 3), scheme, ratio, &params).unwrap();
            let masked: Vec<f32> = mask.apply(&w).iter().map(|&v| v as f32).collect();
            let m = BcsMatrix::encode(&masked, &mask).unwrap();
            m.validate().unwrap();
            let back = m.decode().unwrap();
            assert!(back.iter().zip(&masked).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn block_pruned_index_is_smaller_than_csr() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let w: Vec<f64> = (0..48 * 216).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask = make_mask(&w, 48, 216, (3, 3), PruningScheme::Block, 0.5, &MaskParams::default()).unwrap();
        let m = BcsMatrix::encode(&mask.apply(&w), &mask).unwrap();
        assert_eq!(m.groups(), 12);
        assert!(m.index_len() < m.csr_index_len());
    }

    #[test]
    fn corrupted_arrays_rejected() {
        let m = BcsMatrix::from_dense(&figure_matrix(), 3, 8).unwrap();
        let mut bad = m.clone();
        bad.compact_cols[0] = 99;
        assert!(matches!(bad.decode(), Err(SparseError::Format(_))));
        let mut bad = m.clone();
        bad.perm[0] = 1;
        assert!(bad.validate().is_err());
        let mut bad = m;
        bad.row_offset[1] += 1;
        assert!(bad.validate().is_err());
    }
}
