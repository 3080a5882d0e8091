//! Bounded episodic memory with a fill-then-replace lifecycle.

use std::fmt::Write as _;

use crate::error::{contract, Result};

/// One stored item together with the auxiliary state retention policies keep
/// per entry.
///
/// `hidden` is `None` until a temporal policy commits a state; `None` reads as
/// the zero state.
#[derive(Debug, Clone, PartialEq)]
pub struct EntrySlot<P, H> {
    pub payload: P,
    pub birth_step: u64,
    pub usage: f64,
    pub hidden: Option<H>,
}

impl<P, H> EntrySlot<P, H> {
    fn fresh(payload: P, birth_step: u64) -> Self {
        Self {
            payload,
            birth_step,
            usage: 0.0,
            hidden: None,
        }
    }
}

/// Ordered store of at most `capacity` entries, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBuffer<P, H> {
    capacity: usize,
    entries: Vec<EntrySlot<P, H>>,
    step: u64,
}

impl<P, H> MemoryBuffer<P, H> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(contract("memory capacity must be positive"));
        }
        Ok(Self {
            capacity,
            entries: Vec::with_capacity(capacity),
            step: 0,
        })
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

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    /// Number of items offered so far, including discarded ones.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn entries(&self) -> &[EntrySlot<P, H>] {
        &self.entries
    }

    pub fn payloads(&self) -> impl Iterator<Item = &P> {
        self.entries.iter().map(|e| &e.payload)
    }

    pub fn append(&mut self, item: P) -> Result<()> {
        if self.is_full() {
            return Err(contract(format!(
                "append on a full memory of {} entries; use replace_at",
                self.capacity
            )));
        }
        self.entries.push(EntrySlot::fresh(item, self.step));
        self.step += 1;
        Ok(())
    }

    /// Removes entry `i` and appends `item`; `i == capacity` discards `item`
    /// and leaves the entries untouched.
    ///
    /// Returns the evicted payload (the incoming item itself for the discard
    /// action).
    pub fn replace_at(&mut self, i: usize, item: P) -> Result<P> {
        if !self.is_full() {
            return Err(contract(format!(
                "replace_at on a memory holding {} of {} entries",
                self.entries.len(),
                self.capacity
            )));
        }
        if i > self.capacity {
            return Err(contract(format!(
                "slot {i} outside 0..={} (last slot discards the input)",
                self.capacity
            )));
        }
        let birth = self.step;
        self.step += 1;
        if i == self.capacity {
            return Ok(item);
        }
        let evicted = self.entries.remove(i);
        self.entries.push(EntrySlot::fresh(item, birth));
        Ok(evicted.payload)
    }

    /// Overwrites per-entry usage and temporal states, aligned with the
    /// current entry order.
    pub fn commit_aux(&mut self, usage: Option<&[f64]>, hidden: Option<Vec<H>>) -> Result<()> {
        if let Some(u) = usage {
            if u.len() != self.entries.len() {
                return Err(contract(format!(
                    "{} usage values for {} entries",
                    u.len(),
                    self.entries.len()
                )));
            }
            for (e, &v) in self.entries.iter_mut().zip(u) {
                e.usage = v;
            }
        }
        if let Some(h) = hidden {
            if h.len() != self.entries.len() {
                return Err(contract(format!(
                    "{} hidden states for {} entries",
                    h.len(),
                    self.entries.len()
                )));
            }
            for (e, v) in self.entries.iter_mut().zip(h) {
                e.hidden = Some(v);
            }
        }
        Ok(())
    }

    pub fn usages(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.usage).collect()
    }

    pub fn hidden_states(&self) -> Vec<Option<&H>> {
        self.entries.iter().map(|e| e.hidden.as_ref()).collect()
    }

    /// Encodes every entry in order.
    pub fn encode_entries<T, F>(&self, mut encoder: F) -> Result<Vec<T>>
    where
        F: FnMut(&P) -> Result<T>,
    {
        if self.entries.is_empty() {
            return Err(contract("encoding an empty memory"));
        }
        self.entries.iter().map(|e| encoder(&e.payload)).collect()
    }

    /// One line per entry: `birth_step<TAB>payload`.
    pub fn dump<F>(&self, mut render: F) -> String
    where
        F: FnMut(&P) -> String,
    {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}", e.birth_step, render(&e.payload));
        }
        out
    }
}
