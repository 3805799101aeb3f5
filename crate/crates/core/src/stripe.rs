//! Deterministic partitioning of a message across the channels of a path.

/// One channel's share of a striped message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chunk {
    pub offset: usize,
    pub len: usize,
}

impl Chunk {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StripeLayout {
    total_len: usize,
    chunks: Vec<Chunk>,
}

impl StripeLayout {
    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Split `buf` into one immutable slice per chunk.
    pub fn split<'a>(&self, buf: &'a [u8]) -> Vec<&'a [u8]> {
        assert_eq!(buf.len(), self.total_len, "buffer does not match layout");
        self.chunks.iter().map(|c| &buf[c.range()]).collect()
    }

    /// Split `buf` into one mutable slice per chunk.
    pub fn split_mut<'a>(&self, mut buf: &'a mut [u8]) -> Vec<&'a mut [u8]> {
        assert_eq!(buf.len(), self.total_len, "buffer does not match layout");
        let mut out = Vec::with_capacity(self.chunks.len());
        for c in &self.chunks {
            let (head, tail) = std::mem::take(&mut buf).split_at_mut(c.len);
            out.push(head);
            buf = tail;
        }
        out
    }
}

/// Partition `total_len` bytes over `n_channels` channels.
///
/// Chunk `i` gets `total_len / n` bytes plus one extra byte when
/// `i < total_len % n`, so remainders land on the lowest-indexed channels and
/// both peers derive the same layout without negotiation.
///
/// # Panics
///
/// Panics if `n_channels` is zero.
pub fn stripe_layout(total_len: usize, n_channels: usize) -> StripeLayout {
    assert!(n_channels >= 1, "a stripe needs at least one channel");
    let base = total_len / n_channels;
    let extra = total_len % n_channels;
    let mut offset = 0;
    let chunks = (0..n_channels)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let chunk = Chunk { offset, len };
            offset += len;
            chunk
        })
        .collect();
    StripeLayout { total_len, chunks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairs(layout: &StripeLayout) -> Vec<(usize, usize)> {
        layout.chunks().iter().map(|c| (c.offset, c.len)).collect()
    }

    #[test]
    fn single_channel_identity() {
        assert_eq!(pairs(&stripe_layout(100, 1)), [(0, 100)]);
    }

    #[test]
    fn even_split() {
        assert_eq!(pairs(&stripe_layout(100, 2)), [(0, 50), (50, 50)]);
    }

    #[test]
    fn remainder_goes_to_low_channels() {
        assert_eq!(pairs(&stripe_layout(5, 3)), [(0, 2), (2, 2), (4, 1)]);
    }

    #[test]
    fn empty_message() {
        assert_eq!(pairs(&stripe_layout(0, 4)), [(0, 0); 4]);
    }

    #[test]
    fn fewer_bytes_than_channels() {
        assert_eq!(
            pairs(&stripe_layout(2, 4)),
            [(0, 1), (1, 1), (2, 0), (2, 0)]
        );
    }

    #[test]
    #[should_panic]
    fn zero_channels_panics() {
        stripe_layout(10, 0);
    }

    #[test]
    fn split_mut_matches_chunks() {
        let layout = stripe_layout(11, 4);
        let mut buf: Vec<u8> = (0..11).collect();
        let parts = layout.split_mut(&mut buf);
        let lens: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        assert_eq!(lens, [3, 3, 3, 2]);
        assert_eq!(parts[3], &[9, 10]);
    }

    proptest! {
        #[test]
        fn tiles_exactly(total in 0usize..1_000_000, n in 1usize..256) {
            let layout = stripe_layout(total, n);
            prop_assert_eq!(layout.len(), n);
            let mut next = 0;
            for c in layout.chunks() {
                prop_assert_eq!(c.offset, next);
                next += c.len;
            }
            prop_assert_eq!(next, total);
            let max = layout.chunks().iter().map(|c| c.len).max().unwrap();
            let min = layout.chunks().iter().map(|c| c.len).min().unwrap();
            prop_assert!(max - min <= 1);
            prop_assert_eq!(stripe_layout(total, n), layout);
        }
    }
}
