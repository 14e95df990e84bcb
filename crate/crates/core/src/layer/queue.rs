use std::collections::VecDeque;

/// Bounded FIFO of `(key, value)` pairs: the recurrent state of one layer.
///
/// Iteration yields the newest entry first, i.e. `[H_{t-1}, ..., H_{t-S}]`.
#[derive(Clone, Debug)]
pub struct KvQueue<E> {
    entries: VecDeque<(E, E)>,
    capacity: usize,
}

impl<E> KvQueue<E> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "queue capacity must be at least 1");
        KvQueue {
            entries: VecDeque::with_capacity(capacity + 1),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Pushes the newest pair and returns the evicted oldest pair when the
    /// queue was already full.
    pub fn push(&mut self, key: E, value: E) -> Option<(E, E)> {
        self.entries.push_front((key, value));
        if self.entries.len() > self.capacity {
            self.entries.pop_back()
        } else {
            None
        }
    }

    /// Newest first.
    pub fn iter(&self) -> impl Iterator<Item = &(E, E)> {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

impl<E: Copy> KvQueue<E> {
    pub fn keys(&self) -> Vec<E> {
        self.entries.iter().map(|(k, _)| *k).collect()
    }

    pub fn values(&self) -> Vec<E> {
        self.entries.iter().map(|(_, v)| *v).collect()
    }
}
