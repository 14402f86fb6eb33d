use std::fmt;
use std::num::NonZeroU64;

/// Token returned to a guest for an in-flight host operation. Zero is reserved
/// for "no id", so the value is never zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AsyncId(NonZeroU64);

impl AsyncId {
    pub fn new(value: u64) -> Option<Self> {
        NonZeroU64::new(value).map(AsyncId)
    }

    pub fn get(self) -> u64 {
        self.0.get()
    }
}

impl fmt::Display for AsyncId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Per-instance id source: hands out 1, 2, 3, ... and never repeats.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsyncIdAllocator {
    next: u64,
}

impl Default for AsyncIdAllocator {
    fn default() -> Self {
        AsyncIdAllocator { next: 1 }
    }
}

impl AsyncIdAllocator {
    pub fn next_id(&mut self) -> AsyncId {
        let id = AsyncId::new(self.next).expect("allocator starts at 1");
        self.next = self.next.checked_add(1).expect("async id space exhausted");
        id
    }

    /// The value the next call to [`next_id`](Self::next_id) will return.
    pub fn peek(&self) -> u64 {
        self.next
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_is_reserved() {
        assert!(AsyncId::new(0).is_none());
        assert_eq!(AsyncId::new(7).unwrap().get(), 7);
    }

    #[test]
    fn allocator_is_strictly_increasing_from_one() {
        let mut alloc = AsyncIdAllocator::default();
        let ids: Vec<u64> = (0..100).map(|_| alloc.next_id().get()).collect();
        assert_eq!(ids[0], 1);
        assert!(ids.windows(2).all(|w| w[1] == w[0] + 1));
    }
}
