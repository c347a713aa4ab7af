use std::collections::VecDeque;

use crate::sample::Sample;

/// A sample waiting for upload, with the entropy it had when it was scored.
#[derive(Debug, Clone, PartialEq)]
pub struct QueuedSample {
    pub sample: Sample,
    pub entropy: f64,
}

/// Bounded FIFO of samples awaiting upload.
///
/// When full, the element with the highest entropy among the queued ones and
/// the incoming one is discarded. Entropies are the values recorded at
/// enqueue time. On ties the most recently enqueued element goes.
#[derive(Debug, Clone)]
pub struct UploadQueue {
    capacity: usize,
    items: VecDeque<QueuedSample>,
    dropped_ids: Vec<u64>,
}

impl UploadQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(4096)),
            dropped_ids: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Ids of every sample discarded by the overflow policy, in drop order.
    pub fn dropped_ids(&self) -> &[u64] {
        &self.dropped_ids
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueuedSample> {
        self.items.iter()
    }

    /// Enqueues a sample; returns the id dropped to make room, if any.
    pub fn push(&mut self, item: QueuedSample) -> Option<u64> {
        if self.items.len() < self.capacity {
            self.items.push_back(item);
            return None;
        }
        // Scan from the back so that ties resolve to the newest element.
        let mut worst: Option<usize> = None;
        let mut worst_entropy = item.entropy;
        for (i, q) in self.items.iter().enumerate().rev() {
            if q.entropy > worst_entropy {
                worst = Some(i);
                worst_entropy = q.entropy;
            }
        }
        let dropped = match worst {
            None => item.sample.id,
            Some(i) => {
                let gone = self.items.remove(i).expect("index in range");
                self.items.push_back(item);
                gone.sample.id
            }
        };
        self.dropped_ids.push(dropped);
        Some(dropped)
    }

    /// Removes and returns everything queued, oldest first.
    pub fn take_all(&mut self) -> Vec<QueuedSample> {
        self.items.drain(..).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(id: u64, entropy: f64) -> QueuedSample {
        QueuedSample {
            sample: Sample::new(id, vec![]),
            entropy,
        }
    }

    #[test]
    fn below_capacity_is_fifo() {
        let mut u = UploadQueue::new(3);
        for i in 0..3 {
            assert_eq!(u.push(q(i, i as f64)), None);
        }
        let ids: Vec<u64> = u.take_all().iter().map(|s| s.sample.id).collect();
        assert_eq!(ids, [0, 1, 2]);
        assert!(u.is_empty());
    }

    #[test]
    fn overflow_drops_highest_entropy() {
        let mut u = UploadQueue::new(3);
        u.push(q(0, 0.5));
        u.push(q(1, 0.9));
        u.push(q(2, 0.1));
        assert_eq!(u.push(q(3, 0.3)), Some(1));
        // Incoming sample is the worst: it is the one discarded.
        assert_eq!(u.push(q(4, 2.0)), Some(4));
        let ids: Vec<u64> = u.iter().map(|s| s.sample.id).collect();
        assert_eq!(ids, [0, 2, 3]);
        assert_eq!(u.dropped_ids(), [1, 4]);
    }

    #[test]
    fn ties_drop_newest() {
        let mut u = UploadQueue::new(2);
        u.push(q(0, 1.0));
        u.push(q(1, 1.0));
        assert_eq!(u.push(q(2, 1.0)), Some(2));
        u.push(q(3, 0.0));
        assert_eq!(u.dropped_ids(), [2, 1]);
    }

    #[test]
    fn zero_capacity_drops_everything() {
        let mut u = UploadQueue::new(0);
        assert_eq!(u.push(q(7, 0.2)), Some(7));
        assert!(u.is_empty());
    }
}
