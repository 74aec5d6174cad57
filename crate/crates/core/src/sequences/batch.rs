use super::Vocabulary;

/// Index sequences padded to a common width. Position `j` of row `i` is real
/// iff `j < lengths[i]`; padding positions hold index 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    indices: Vec<usize>,
    mask: Vec<bool>,
    lengths: Vec<usize>,
    width: usize,
}

pub const PAD_INDEX: usize = 0;

/// Maps each sequence through `vocab` and pads (or truncates, keeping the
/// leading most-recent entries) to `width`.
pub fn pad_and_mask<S: AsRef<str>>(
    sequences: &[Vec<S>],
    vocab: &Vocabulary,
    width: usize,
) -> PaddedBatch {
    let rows: Vec<Vec<usize>> = sequences
        .iter()
        .map(|s| s.iter().map(|id| vocab.index(id.as_ref())).collect())
        .collect();
    PaddedBatch::from_indices(&rows, width)
}

impl PaddedBatch {
    pub fn from_indices(rows: &[Vec<usize>], width: usize) -> Self {
        let mut indices = vec![PAD_INDEX; rows.len() * width];
        let mut mask = vec![false; rows.len() * width];
        let mut lengths = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            let n = r.len().min(width);
            indices[i * width..i * width + n].copy_from_slice(&r[..n]);
            mask[i * width..i * width + n]
                .iter_mut()
                .for_each(|m| *m = true);
            lengths.push(n);
        }
        Self {
            indices,
            mask,
            lengths,
            width,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn row_indices(&self, i: usize) -> &[usize] {
        &self.indices[i * self.width..i * self.width + self.lengths[i]]
    }

    /// Drops padding, recovering the (possibly truncated) index sequences.
    pub fn unpad(&self) -> Vec<Vec<usize>> {
        (0..self.batch_size())
            .map(|i| self.row_indices(i).to_vec())
            .collect()
    }

    /// Prepends one always-unmasked column (e.g. the target item).
    pub fn with_leading(&self, leading: &[usize]) -> PaddedBatch {
        assert_eq!(leading.len(), self.batch_size());
        let rows: Vec<Vec<usize>> = (0..self.batch_size())
            .map(|i| {
                let mut r = Vec::with_capacity(self.lengths[i] + 1);
                r.push(leading[i]);
                r.extend_from_slice(self.row_indices(i));
                r
            })
            .collect();
        PaddedBatch::from_indices(&rows, self.width + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::super::build_vocab;
    use super::*;

    #[test]
    fn masks_follow_lengths() {
        let v = build_vocab(["a", "b", "c"], 10, 1).unwrap();
        let seqs = vec![vec!["a", "b", "c"], vec!["a"], vec![]];
        let b = pad_and_mask(&seqs, &v, 4);
        assert_eq!(
            b.mask(),
            &[true, true, true, false, true, false, false, false, false, false, false, false]
        );
        assert_eq!(b.lengths(), &[3, 1, 0]);
        for (i, m) in b.mask().iter().enumerate() {
            if !m {
                assert_eq!(b.indices()[i], PAD_INDEX);
            }
        }
    }

    #[test]
    fn unknown_ids_map_to_oov_but_stay_unmasked() {
        let v = build_vocab(["a"], 10, 1).unwrap();
        let b = pad_and_mask(&[vec!["zzz"]], &v, 2);
        assert_eq!(b.indices()[0], 0);
        assert!(b.mask()[0]);
    }

    #[test]
    fn leading_column_is_prepended() {
        let b = PaddedBatch::from_indices(&[vec![5, 6], vec![]], 3);
        let t = b.with_leading(&[9, 8]);
        assert_eq!(t.width(), 4);
        assert_eq!(t.unpad(), vec![vec![9, 5, 6], vec![8]]);
    }
}
