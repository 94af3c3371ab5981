/// Fixed-capacity bitset over flat cell (or pair) indices.
///
/// Unions and intersections are word-wise, so parallel merges are
/// order-independent and results do not depend on thread count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellSet {
    len: usize,
    words: Vec<u64>,
}

impl CellSet {
    pub fn new(len: usize) -> Self {
        CellSet {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut s = CellSet::new(len);
        for i in indices {
            s.insert(i);
        }
        s
    }

    /// Capacity in bits (the universe size), not the number of set bits.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn insert(&mut self, idx: usize) {
        debug_assert!(idx < self.len);
        self.words[idx / 64] |= 1u64 << (idx % 64);
    }

    pub fn remove(&mut self, idx: usize) {
        debug_assert!(idx < self.len);
        self.words[idx / 64] &= !(1u64 << (idx % 64));
    }

    pub fn contains(&self, idx: usize) -> bool {
        debug_assert!(idx < self.len);
        self.words[idx / 64] & (1u64 << (idx % 64)) != 0
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn union_with(&mut self, other: &CellSet) {
        assert_eq!(self.len, other.len);
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    pub fn difference_with(&mut self, other: &CellSet) {
        assert_eq!(self.len, other.len);
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= !b;
        }
    }

    pub fn intersects(&self, other: &CellSet) -> bool {
        self.words.iter().zip(&other.words).any(|(a, b)| a & b != 0)
    }

    pub fn is_subset_of(&self, other: &CellSet) -> bool {
        self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    /// Ascending iteration over set bits.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut bits = w;
            std::iter::from_fn(move || {
                if bits == 0 {
                    None
                } else {
                    let tz = bits.trailing_zeros() as usize;
                    bits &= bits - 1;
                    Some(wi * 64 + tz)
                }
            })
        })
    }

    pub(crate) fn words(&self) -> &[u64] {
        &self.words
    }

    pub(crate) fn from_words(len: usize, words: Vec<u64>) -> Option<Self> {
        if words.len() != len.div_ceil(64) {
            return None;
        }
        // Reject stray bits beyond `len` so equality stays structural.
        if len % 64 != 0 {
            let last_mask = (1u64 << (len % 64)) - 1;
            if let Some(&last) = words.last() {
                if last & !last_mask != 0 {
                    return None;
                }
            }
        }
        Some(CellSet { len, words })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_contains_iter() {
        let mut s = CellSet::new(130);
        for i in [0, 1, 63, 64, 129] {
            s.insert(i);
        }
        assert_eq!(s.count(), 5);
        assert!(s.contains(63) && s.contains(64) && !s.contains(65));
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![0, 1, 63, 64, 129]);
        s.remove(64);
        assert!(!s.contains(64));
        assert_eq!(s.count(), 4);
    }

    #[test]
    fn set_algebra() {
        let a = CellSet::from_indices(100, [1, 2, 3]);
        let b = CellSet::from_indices(100, [3, 4]);
        let mut u = a.clone();
        u.union_with(&b);
        assert_eq!(u.iter().collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert!(a.intersects(&b));
        assert!(a.is_subset_of(&u));
        assert!(!u.is_subset_of(&a));
        let mut d = u.clone();
        d.difference_with(&b);
        assert_eq!(d.iter().collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn from_words_rejects_stray_bits() {
        assert!(CellSet::from_words(65, vec![0, 0b10]).is_none());
        assert!(CellSet::from_words(65, vec![u64::MAX, 0b1]).is_some());
        assert!(CellSet::from_words(65, vec![0]).is_none());
    }
}
