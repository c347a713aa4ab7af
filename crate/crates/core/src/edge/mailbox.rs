use crate::nn::AffineParamSet;

/// Single-slot holder for the latest parameter update.
///
/// With interval `K`, only every `K`-th received update is placed in the
/// slot; a placed update overwrites any older one not yet taken.
#[derive(Debug, Clone)]
pub struct UpdateMailbox {
    interval: u64,
    received: u64,
    slot: Option<AffineParamSet>,
}

impl UpdateMailbox {
    pub fn new(interval: usize) -> Self {
        Self {
            interval: interval.max(1) as u64,
            received: 0,
            slot: None,
        }
    }

    pub fn received(&self) -> u64 {
        self.received
    }

    /// Records an arriving update. Returns whether it was placed in the slot.
    pub fn deliver(&mut self, update: AffineParamSet) -> bool {
        self.received += 1;
        if !self.received.is_multiple_of(self.interval) {
            return false;
        }
        self.slot = Some(update);
        true
    }

    pub fn take(&mut self) -> Option<AffineParamSet> {
        self.slot.take()
    }
}
