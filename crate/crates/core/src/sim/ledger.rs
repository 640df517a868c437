use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Reservation {
    reserved: u64,
    committed: u64,
}

/// KV-cache accounting on the attention pool.
///
/// Each admitted request holds `reserved` bytes for its current context and
/// `committed` bytes for the context it will have when finished. Admission is
/// gated on commitments, so reservations can never outgrow the capacity.
#[derive(Debug, Clone)]
pub struct KvLedger {
    capacity: u64,
    reserved: u64,
    committed: u64,
    peak: u64,
    slots: Vec<Option<Reservation>>,
}

impl KvLedger {
    pub fn new(capacity: u64, n_requests: usize) -> Self {
        KvLedger {
            capacity,
            reserved: 0,
            committed: 0,
            peak: 0,
            slots: vec![None; n_requests],
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn reserved(&self) -> u64 {
        self.reserved
    }

    pub fn committed(&self) -> u64 {
        self.committed
    }

    pub fn peak(&self) -> u64 {
        self.peak
    }

    pub fn fits(&self, final_bytes: u64) -> bool {
        self.committed + final_bytes <= self.capacity
    }

    pub fn admit(&mut self, req: usize, current: u64, final_bytes: u64) -> Result<()> {
        if !self.fits(final_bytes) || current > final_bytes {
            return Err(Error::Precondition(format!(
                "request {req} ({current}/{final_bytes} B) does not fit the KV ledger"
            )));
        }
        self.slots[req] = Some(Reservation {
            reserved: current,
            committed: final_bytes,
        });
        self.reserved += current;
        self.committed += final_bytes;
        self.peak = self.peak.max(self.reserved);
        Ok(())
    }

    /// Grow a reservation by one token's worth of KV.
    pub fn grow(&mut self, req: usize, bytes: u64) {
        let r = self.slots[req].as_mut().expect("growing an unadmitted request");
        let add = bytes.min(r.committed - r.reserved);
        r.reserved += add;
        self.reserved += add;
        self.peak = self.peak.max(self.reserved);
    }

    pub fn release(&mut self, req: usize) {
        if let Some(r) = self.slots[req].take() {
            self.reserved -= r.reserved;
            self.committed -= r.committed;
        }
    }

    /// Reservations within capacity.
    pub fn holds(&self) -> bool {
        self.reserved <= self.committed && self.committed <= self.capacity
    }
}
