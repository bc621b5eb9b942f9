use crate::codec::{TokenSequence, BOS, PAD};
use crate::error::{Error, Result};

/// Padded source/target id matrices for one forward pass.
///
/// `tgt_in` is `tgt_out` shifted right by one with BOS in front; masks mark
/// the non-padding positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    /// `[batch_size x src_len]`
    pub src: Vec<u32>,
    /// `[batch_size x tgt_len]`
    pub tgt_in: Vec<u32>,
    pub tgt_out: Vec<u32>,
    pub src_mask: Vec<bool>,
    pub tgt_mask: Vec<bool>,
    pub(crate) src_lens: Vec<usize>,
    pub(crate) tgt_lens: Vec<usize>,
}

impl Batch {
    /// Pads every pair to the longest source and target in the list.
    pub fn new(pairs: &[(TokenSequence, TokenSequence)]) -> Result<Self> {
        let src_len = pairs.iter().map(|(s, _)| s.unpadded_len()).max().unwrap_or(0);
        let tgt_len = pairs.iter().map(|(_, t)| t.unpadded_len()).max().unwrap_or(0);
        Self::with_lengths(pairs, src_len, tgt_len)
    }

    /// Pads to explicit lengths, which must cover every sequence.
    pub fn with_lengths(
        pairs: &[(TokenSequence, TokenSequence)],
        src_len: usize,
        tgt_len: usize,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let b = pairs.len();
        let mut batch = Batch {
            batch_size: b,
            src_len,
            tgt_len,
            src: vec![PAD; b * src_len],
            tgt_in: vec![PAD; b * tgt_len],
            tgt_out: vec![PAD; b * tgt_len],
            src_mask: vec![false; b * src_len],
            tgt_mask: vec![false; b * tgt_len],
            src_lens: Vec::with_capacity(b),
            tgt_lens: Vec::with_capacity(b),
        };
        for (row, (src, tgt)) in pairs.iter().enumerate() {
            let s = &src.ids()[..src.unpadded_len()];
            let t = &tgt.ids()[..tgt.unpadded_len()];
            if s.is_empty() || t.is_empty() {
                return Err(Error::Shape(format!("row {row} has an empty sequence")));
            }
            if s.len() > src_len || t.len() > tgt_len {
                return Err(Error::Shape(format!(
                    "row {row} does not fit padded lengths {src_len}/{tgt_len}"
                )));
            }
            let so = row * src_len;
            batch.src[so..so + s.len()].copy_from_slice(s);
            batch.src_mask[so..so + s.len()].fill(true);
            let to = row * tgt_len;
            batch.tgt_out[to..to + t.len()].copy_from_slice(t);
            batch.tgt_mask[to..to + t.len()].fill(true);
            batch.tgt_in[to] = BOS;
            batch.tgt_in[to + 1..to + t.len()].copy_from_slice(&t[..t.len() - 1]);
            batch.src_lens.push(s.len());
            batch.tgt_lens.push(t.len());
        }
        Ok(batch)
    }

    pub fn src_lens(&self) -> &[usize] {
        &self.src_lens
    }

    pub fn tgt_lens(&self) -> &[usize] {
        &self.tgt_lens
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_lens.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode, EOS};

    #[test]
    fn shifts_targets_and_pads() {
        let pairs = vec![
            (encode("ab", None).unwrap(), encode("x", None).unwrap()),
            (encode("a", None).unwrap(), encode("xyz", None).unwrap()),
        ];
        let batch = Batch::new(&pairs).unwrap();
        assert_eq!((batch.src_len, batch.tgt_len), (3, 4));
        let x = b'x' as u32 + 3;
        assert_eq!(&batch.tgt_out[..4], &[x, EOS, PAD, PAD]);
        assert_eq!(&batch.tgt_in[..4], &[BOS, x, PAD, PAD]);
        assert_eq!(&batch.tgt_mask[..4], &[true, true, false, false]);
        assert_eq!(&batch.tgt_in[4..], &[BOS, x, x + 1, x + 2]);
        assert_eq!(&batch.src_mask[3..], &[true, true, false]);
        assert_eq!(batch.target_tokens(), 6);
    }

    #[test]
    fn rejects_overlong_rows() {
        let pairs = vec![(encode("abc", None).unwrap(), encode("x", None).unwrap())];
        assert!(Batch::with_lengths(&pairs, 2, 4).is_err());
        assert!(Batch::new(&[]).is_err());
    }
}
