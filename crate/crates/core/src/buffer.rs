//! Fixed-budget replay buffer with class-balanced quotas.
//!
//! Capacity `C` is split evenly across every class seen so far; remainders go
//! to classes picked by a seeded shuffle, so quotas are `floor(C/n)` or
//! `ceil(C/n)` and reproducible. Within a class, items are kept by reservoir
//! sampling over everything that class has streamed past the buffer.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Clone)]
struct ClassSlot {
    items: Vec<Vec<f64>>,
    /// How many samples of this class have ever been offered.
    seen: u64,
}

#[derive(Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    dim: Option<usize>,
    rng: ChaCha8Rng,
    slots: BTreeMap<usize, ClassSlot>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("replay buffer capacity must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        Ok(ReplayBuffer { capacity, dim: None, rng, slots: BTreeMap::new() })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.values().map(|s| s.items.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes_seen(&self) -> usize {
        self.slots.len()
    }

    pub fn class_count(&self, label: usize) -> usize {
        self.slots.get(&label).map_or(0, |s| s.items.len())
    }

    /// Quota per class after the seeded remainder assignment, largest first.
    fn quotas(&mut self) -> BTreeMap<usize, usize> {
        let n = self.slots.len();
        if n == 0 {
            return BTreeMap::new();
        }
        let base = self.capacity / n;
        let rem = self.capacity % n;
        let mut labels: Vec<usize> = self.slots.keys().copied().collect();
        labels.shuffle(&mut self.rng);
        let mut q: BTreeMap<usize, usize> = labels.iter().map(|&l| (l, base)).collect();
        for &l in labels.iter().take(rem) {
            *q.get_mut(&l).unwrap() += 1;
        }
        q
    }

    /// Fold one task's samples into the buffer (call once at end of task).
    pub fn update_from_task(&mut self, x: &Tensor, labels: &[usize]) -> Result<()> {
        let (b, d) = x.as_2d();
        if labels.len() != b {
            return Err(Error::shape(
                "buffer_update",
                format!("{b} rows vs {} labels", labels.len()),
            ));
        }
        if b == 0 {
            return Err(Error::invalid("task update needs at least one sample"));
        }
        match self.dim {
            None => self.dim = Some(d),
            Some(d0) if d0 != d => {
                return Err(Error::shape("buffer_update", format!("dim {d} vs stored {d0}")));
            }
            _ => {}
        }

        // register new classes, then rebalance quotas over everything seen
        for &l in labels {
            self.slots.entry(l).or_insert_with(|| ClassSlot { items: Vec::new(), seen: 0 });
        }
        let quotas = self.quotas();
        for (l, slot) in self.slots.iter_mut() {
            let q = quotas[l];
            if slot.items.len() > q {
                slot.items.shuffle(&mut self.rng);
                slot.items.truncate(q);
            }
        }

        // reservoir-insert the new items into their class slots
        for (r, &l) in labels.iter().enumerate() {
            let q = quotas[&l];
            let slot = self.slots.get_mut(&l).unwrap();
            let item = x.row(r).to_vec();
            slot.seen += 1;
            if slot.items.len() < q {
                slot.items.push(item);
            } else if q > 0 {
                let j = self.rng.gen_range(0..slot.seen) as usize;
                if j < q {
                    slot.items[j] = item;
                }
            }
        }
        Ok(())
    }

    /// Uniform-with-replacement draw over all stored items.
    pub fn sample_pairs(&mut self, n: usize) -> Result<(Tensor, Vec<usize>)> {
        if self.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        if n == 0 {
            return Err(Error::invalid("sample_pairs needs n >= 1"));
        }
        let d = self.dim.expect("non-empty buffer has a dim");
        // flat view: (label, index-within-class) in deterministic order
        let flat: Vec<(usize, usize)> = self
            .slots
            .iter()
            .flat_map(|(&l, s)| (0..s.items.len()).map(move |i| (l, i)))
            .collect();
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (l, i) = flat[self.rng.gen_range(0..flat.len())];
            data.extend_from_slice(&self.slots[&l].items[i]);
            labels.push(l);
        }
        Ok((Tensor::matrix(n, d, data)?, labels))
    }

    pub fn dump_json(&self) -> String {
        #[derive(Serialize)]
        struct Dump<'a> {
            capacity: usize,
            total: usize,
            classes: BTreeMap<usize, &'a Vec<Vec<f64>>>,
        }
        let d = Dump {
            capacity: self.capacity,
            total: self.len(),
            classes: self.slots.iter().map(|(&l, s)| (l, &s.items)).collect(),
        };
        serde_json::to_string_pretty(&d).expect("buffer serializes")
    }
}
