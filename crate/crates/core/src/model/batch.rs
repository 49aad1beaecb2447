use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use super::Scalar;
use crate::dataio::FeatureSequence;
use crate::error::{Error, Result};

/// Zero-padded batch of variable-length sequences.
///
/// `mask[[i, t]]` is true exactly for `t < lengths[i]`; padded feature rows are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch<F> {
    pub features: Array3<F>,
    pub mask: Array2<bool>,
    pub lengths: Vec<usize>,
}

impl<F: Scalar> PaddedBatch<F> {
    pub fn from_sequences(seqs: &[FeatureSequence]) -> Result<Self> {
        let refs: Vec<ArrayView2<'_, f32>> = seqs.iter().map(|s| s.data.view()).collect();
        Self::from_views(&refs)
    }

    pub fn from_views(seqs: &[ArrayView2<'_, f32>]) -> Result<Self> {
        let first = seqs.first().ok_or_else(|| Error::InvalidArgument("cannot pad an empty batch".into()))?;
        let d = first.ncols();
        if let Some(bad) = seqs.iter().find(|s| s.ncols() != d) {
            return Err(Error::Shape(format!("mixed feature dims in batch: {d} vs {}", bad.ncols())));
        }
        if seqs.iter().any(|s| s.nrows() == 0) {
            return Err(Error::Shape("empty sequence in batch".into()));
        }
        let t_max = seqs.iter().map(|s| s.nrows()).max().unwrap();
        let mut features = Array3::zeros((seqs.len(), t_max, d));
        let mut mask = Array2::from_elem((seqs.len(), t_max), false);
        let mut lengths = Vec::with_capacity(seqs.len());
        for (i, s) in seqs.iter().enumerate() {
            let t = s.nrows();
            features.slice_mut(s![i, ..t, ..]).assign(&s.mapv(|v| F::from_f64(v as f64)));
            mask.slice_mut(s![i, ..t]).fill(true);
            lengths.push(t);
        }
        Ok(PaddedBatch { features, mask, lengths })
    }

    pub fn batch_size(&self) -> usize {
        self.features.len_of(Axis(0))
    }

    pub fn max_len(&self) -> usize {
        self.features.len_of(Axis(1))
    }

    pub fn input_dim(&self) -> usize {
        self.features.len_of(Axis(2))
    }

    /// Checks the mask/lengths/padding invariants.
    pub fn validate(&self) -> Result<()> {
        let (b, t, _) = self.features.dim();
        if self.mask.dim() != (b, t) || self.lengths.len() != b {
            return Err(Error::Shape(format!(
                "batch parts disagree: features {:?}, mask {:?}, {} lengths",
                self.features.dim(),
                self.mask.dim(),
                self.lengths.len()
            )));
        }
        for (i, &len) in self.lengths.iter().enumerate() {
            if len == 0 || len > t {
                return Err(Error::Shape(format!("sequence {i} has invalid length {len}")));
            }
            let row = self.mask.row(i);
            if row.iter().enumerate().any(|(j, &m)| m != (j < len)) {
                return Err(Error::Shape(format!("mask row {i} is not {len} leading trues")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(t: usize, d: usize) -> FeatureSequence {
        FeatureSequence::new("c", Array2::from_elem((t, d), 1.5)).unwrap()
    }

    #[test]
    fn pads_to_longest() {
        let b = PaddedBatch::<f32>::from_sequences(&[seq(3, 4), seq(5, 4)]).unwrap();
        b.validate().unwrap();
        assert_eq!(b.features.dim(), (2, 5, 4));
        assert_eq!(b.lengths, vec![3, 5]);
        let row0: Vec<bool> = b.mask.row(0).to_vec();
        assert_eq!(row0, vec![true, true, true, false, false]);
        assert!(b.mask.row(1).iter().all(|&m| m));
        assert!(b.features.slice(s![0, 3.., ..]).iter().all(|&v| v == 0.0));
        assert!(b.features.slice(s![0, ..3, ..]).iter().all(|&v| v == 1.5));
    }

    #[test]
    fn single_and_errors() {
        let b = PaddedBatch::<f64>::from_sequences(&[seq(4, 2)]).unwrap();
        assert!(b.mask.iter().all(|&m| m));
        assert!(PaddedBatch::<f32>::from_sequences(&[seq(3, 4), seq(3, 5)]).is_err());
        assert!(PaddedBatch::<f32>::from_sequences(&[]).is_err());
    }
}
