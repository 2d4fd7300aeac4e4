use crate::error::{Error, Result};

/// Layout of several variable-length sequences packed along the time axis.
///
/// A batch of utterances is stored as one `[C × ΣT]` matrix. Convolutions pad
/// at segment boundaries and pooling reduces each segment separately, so a
/// packed batch behaves exactly like independent sequences except for batch
/// normalization, which sees every frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
    lens: Vec<usize>,
    total: usize,
}

impl Segments {
    pub fn new(lens: &[usize]) -> Result<Self> {
        if lens.is_empty() {
            return Err(Error::Shape("a batch needs at least one segment".into()));
        }
        if lens.contains(&0) {
            return Err(Error::Shape("segments must hold at least one frame".into()));
        }
        let mut offsets = Vec::with_capacity(lens.len());
        let mut total = 0;
        for &l in lens {
            offsets.push(total);
            total += l;
        }
        Ok(Segments {
            offsets,
            lens: lens.to_vec(),
            total,
        })
    }

    /// One segment spanning `frames`.
    pub fn single(frames: usize) -> Self {
        Segments {
            offsets: vec![0],
            lens: vec![frames],
            total: frames,
        }
    }

    pub fn len(&self) -> usize {
        self.lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lens.is_empty()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn min_len(&self) -> usize {
        self.lens.iter().copied().min().unwrap_or(0)
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    /// `(offset, len)` of every segment in order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.offsets.iter().copied().zip(self.lens.iter().copied())
    }
}
