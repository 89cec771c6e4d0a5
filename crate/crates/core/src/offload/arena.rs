//! Byte-budgeted simulated device memory backed by an unbounded host store.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::OffloadError;
use crate::tensor::{crop, Rect, Shape, Tensor, View};

/// Opaque identity of a tensor registered with a [`DeviceArena`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TensorHandle {
    id: u64,
    shape: Shape,
}

impl TensorHandle {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Residency {
    Host,
    Device,
}

/// Counters in the shape of an efficiency table: peak device bytes, transfer
/// counts, tiles run and time spent in tracked sections.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryStats {
    #[serde(rename = "peak_resident_bytes")]
    pub peak_resident: usize,
    #[serde(rename = "swap_in")]
    pub swap_in_count: u64,
    #[serde(rename = "swap_out")]
    pub swap_out_count: u64,
    #[serde(rename = "tiles")]
    pub tiles_executed: u64,
    #[serde(rename = "wall_seconds")]
    pub wall_time: f64,
}

/// Device bytes set aside before the tensor that fills them exists.
#[must_use = "a reservation must be filled or released"]
#[derive(Debug)]
pub struct Reservation {
    bytes: usize,
}

impl Reservation {
    pub fn bytes(&self) -> usize {
        self.bytes
    }
}

#[derive(Debug)]
struct Entry {
    tensor: Tensor,
    residency: Residency,
    pinned: bool,
    last_use: u64,
}

/// Simulated accelerator memory.
///
/// Device-resident tensors and outstanding reservations count against
/// `budget`; host-resident tensors are free. When room is needed the
/// least-recently-used unpinned device tensor is swapped out to the host.
#[derive(Debug)]
pub struct DeviceArena {
    budget: usize,
    entries: BTreeMap<u64, Entry>,
    resident: usize,
    peak: usize,
    swap_in: u64,
    swap_out: u64,
    tiles: u64,
    wall: Duration,
    clock: u64,
    next_id: u64,
}

impl DeviceArena {
    pub fn new(budget: usize) -> Self {
        Self {
            budget,
            entries: BTreeMap::new(),
            resident: 0,
            peak: 0,
            swap_in: 0,
            swap_out: 0,
            tiles: 0,
            wall: Duration::ZERO,
            clock: 0,
            next_id: 0,
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// Bytes currently held on the device, reservations included.
    pub fn resident_bytes(&self) -> usize {
        self.resident
    }

    pub fn stats(&self) -> MemoryStats {
        MemoryStats {
            peak_resident: self.peak,
            swap_in_count: self.swap_in,
            swap_out_count: self.swap_out,
            tiles_executed: self.tiles,
            wall_time: self.wall.as_secs_f64(),
        }
    }

    /// Stores `data` in the host store. Never fails: the budget only applies
    /// to device residency.
    pub fn register(&mut self, data: Tensor) -> TensorHandle {
        self.insert(data, Residency::Host)
    }

    /// Places a freshly computed tensor directly on the device.
    pub fn admit(&mut self, data: Tensor) -> Result<TensorHandle, OffloadError> {
        let r = self.reserve(data.bytes())?;
        Ok(self.fill(r, data))
    }

    pub fn reserve(&mut self, bytes: usize) -> Result<Reservation, OffloadError> {
        self.make_room(bytes)?;
        self.resident += bytes;
        self.peak = self.peak.max(self.resident);
        self.check_budget();
        Ok(Reservation { bytes })
    }

    pub fn fill(&mut self, reservation: Reservation, data: Tensor) -> TensorHandle {
        assert_eq!(
            reservation.bytes,
            data.bytes(),
            "reservation size does not match the tensor it is filled with"
        );
        // The bytes are already counted; the entry takes them over.
        self.resident -= reservation.bytes;
        self.insert(data, Residency::Device)
    }

    pub fn release(&mut self, reservation: Reservation) {
        self.resident -= reservation.bytes;
    }

    pub fn residency(&self, h: &TensorHandle) -> Result<Residency, OffloadError> {
        Ok(self.entry(h)?.residency)
    }

    pub fn is_pinned(&self, h: &TensorHandle) -> Result<bool, OffloadError> {
        Ok(self.entry(h)?.pinned)
    }

    /// Read access regardless of residency. Contents are identical either way.
    pub fn get(&self, h: &TensorHandle) -> Result<&Tensor, OffloadError> {
        Ok(&self.entry(h)?.tensor)
    }

    /// Host to device copy. A no-op apart from the LRU touch when already
    /// resident.
    pub fn swap_in(&mut self, h: &TensorHandle) -> Result<(), OffloadError> {
        let bytes = self.entry(h)?.tensor.bytes();
        if self.entry(h)?.residency == Residency::Host {
            self.make_room(bytes)?;
            self.resident += bytes;
            self.peak = self.peak.max(self.resident);
            self.swap_in += 1;
            self.entry_mut(h)?.residency = Residency::Device;
            self.check_budget();
        }
        self.touch(h)
    }

    /// Device to host copy.
    pub fn swap_out(&mut self, h: &TensorHandle) -> Result<(), OffloadError> {
        let e = self.entry(h)?;
        if e.pinned {
            return Err(OffloadError::Pinned(h.id));
        }
        if e.residency == Residency::Device {
            self.evict(h.id);
        }
        Ok(())
    }

    pub fn pin(&mut self, h: &TensorHandle) -> Result<(), OffloadError> {
        self.entry_mut(h)?.pinned = true;
        Ok(())
    }

    pub fn unpin(&mut self, h: &TensorHandle) -> Result<(), OffloadError> {
        self.entry_mut(h)?.pinned = false;
        Ok(())
    }

    pub fn touch(&mut self, h: &TensorHandle) -> Result<(), OffloadError> {
        self.clock += 1;
        let now = self.clock;
        self.entry_mut(h)?.last_use = now;
        Ok(())
    }

    /// Drops a tensor, returning its data.
    pub fn take(&mut self, h: TensorHandle) -> Result<Tensor, OffloadError> {
        let e = self
            .entries
            .remove(&h.id)
            .ok_or(OffloadError::UnknownHandle(h.id))?;
        if e.residency == Residency::Device {
            self.resident -= e.tensor.bytes();
        }
        Ok(e.tensor)
    }

    pub fn free(&mut self, h: TensorHandle) -> Result<(), OffloadError> {
        self.take(h).map(drop)
    }

    /// Copies the pixels `rect` of `src` into a new device tensor: one
    /// host-to-device transfer.
    pub fn stage_region(
        &mut self,
        src: &TensorHandle,
        rect: Rect,
    ) -> Result<TensorHandle, OffloadError> {
        let s = self.entry(src)?.tensor.shape();
        let bytes = Shape::new(s.n, s.c, rect.h, rect.w).bytes();
        let r = self.reserve(bytes)?;
        let part = match crop(View::whole(&self.entry(src)?.tensor), rect) {
            Ok(p) => p,
            Err(e) => {
                self.release(r);
                return Err(e.into());
            }
        };
        self.swap_in += 1;
        Ok(self.fill(r, part))
    }

    /// Copies a device tensor into the pixels `rect` of a host tensor: one
    /// device-to-host transfer.
    pub fn write_back(
        &mut self,
        dst: &TensorHandle,
        src: &TensorHandle,
        rect: Rect,
    ) -> Result<(), OffloadError> {
        if dst.id == src.id {
            return Err(OffloadError::PlanMismatch(
                "write-back source and destination are the same tensor".into(),
            ));
        }
        let part = self.take_entry_tensor(src)?;
        let result = (|| {
            let d = self.entry_mut(dst)?;
            let ds = d.tensor.shape();
            let ps = part.shape();
            if ps.n != ds.n
                || ps.c != ds.c
                || (ps.h, ps.w) != (rect.h, rect.w)
                || !Rect::full(ds.h, ds.w).contains(&rect)
            {
                return Err(OffloadError::PlanMismatch(format!(
                    "cannot write {ps} into {rect} of {ds}"
                )));
            }
            for n in 0..ds.n {
                for c in 0..ds.c {
                    let from = part.plane(n, c);
                    let to = d.tensor.plane_mut(n, c);
                    for y in 0..rect.h {
                        let at = (rect.y + y) * ds.w + rect.x;
                        to[at..at + rect.w].copy_from_slice(&from[y * rect.w..(y + 1) * rect.w]);
                    }
                }
            }
            Ok(())
        })();
        self.restore_entry_tensor(src, part);
        result?;
        self.swap_out += 1;
        Ok(())
    }

    pub fn record_tile(&mut self) {
        self.tiles += 1;
    }

    pub fn add_wall_time(&mut self, d: Duration) {
        self.wall += d;
    }

    fn insert(&mut self, tensor: Tensor, residency: Residency) -> TensorHandle {
        let id = self.next_id;
        self.next_id += 1;
        self.clock += 1;
        let shape = tensor.shape();
        if residency == Residency::Device {
            self.resident += tensor.bytes();
            self.peak = self.peak.max(self.resident);
        }
        self.entries.insert(
            id,
            Entry {
                tensor,
                residency,
                pinned: false,
                last_use: self.clock,
            },
        );
        self.check_budget();
        TensorHandle { id, shape }
    }

    fn make_room(&mut self, bytes: usize) -> Result<(), OffloadError> {
        if bytes > self.budget {
            return Err(OffloadError::OutOfBudget {
                requested: bytes,
                budget: self.budget,
                resident: self.resident,
            });
        }
        while self.resident + bytes > self.budget {
            let victim = self
                .entries
                .iter()
                .filter(|(_, e)| e.residency == Residency::Device && !e.pinned)
                .min_by_key(|(id, e)| (e.last_use, **id))
                .map(|(id, _)| *id);
            match victim {
                Some(id) => self.evict(id),
                None => {
                    return Err(OffloadError::OutOfBudget {
                        requested: bytes,
                        budget: self.budget,
                        resident: self.resident,
                    })
                }
            }
        }
        Ok(())
    }

    fn evict(&mut self, id: u64) {
        let e = self.entries.get_mut(&id).expect("victim exists");
        debug_assert_eq!(e.residency, Residency::Device);
        e.residency = Residency::Host;
        self.resident -= e.tensor.bytes();
        self.swap_out += 1;
    }

    fn check_budget(&self) {
        assert!(
            self.resident <= self.budget,
            "device residency {} exceeds the arena budget {}",
            self.resident,
            self.budget
        );
    }

    fn entry(&self, h: &TensorHandle) -> Result<&Entry, OffloadError> {
        self.entries
            .get(&h.id)
            .ok_or(OffloadError::UnknownHandle(h.id))
    }

    fn entry_mut(&mut self, h: &TensorHandle) -> Result<&mut Entry, OffloadError> {
        self.entries
            .get_mut(&h.id)
            .ok_or(OffloadError::UnknownHandle(h.id))
    }

    fn take_entry_tensor(&mut self, h: &TensorHandle) -> Result<Tensor, OffloadError> {
        let e = self.entry_mut(h)?;
        let shape = e.tensor.shape();
        Ok(std::mem::replace(
            &mut e.tensor,
            Tensor::new(Shape::new(0, shape.c, shape.h, shape.w), Vec::new()).expect("empty"),
        ))
    }

    fn restore_entry_tensor(&mut self, h: &TensorHandle, t: Tensor) {
        if let Some(e) = self.entries.get_mut(&h.id) {
            e.tensor = t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_init, InitScheme};

    const MIB: usize = 1 << 20;

    fn t(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        seeded_init(Shape::new(1, c, h, w), InitScheme::UniformFanIn, seed)
    }

    #[test]
    fn fresh_arena_stats_are_zero() {
        assert_eq!(DeviceArena::new(1024).stats(), MemoryStats::default());
    }

    #[test]
    fn register_round_trip_and_distinct_ids() {
        let mut a = DeviceArena::new(1024);
        let x = t(2, 5, 5, 1);
        let h1 = a.register(x.clone());
        let h2 = a.register(x.clone());
        assert_ne!(h1.id(), h2.id());
        assert_eq!(a.residency(&h1).unwrap(), Residency::Host);
        assert!(a.get(&h1).unwrap().bit_eq(&x));
        assert_eq!(a.resident_bytes(), 0);
    }

    #[test]
    fn host_store_is_unbounded() {
        let mut a = DeviceArena::new(64 * MIB);
        // 1 GiB; zero pages are never touched.
        let big = Tensor::zeros(Shape::new(1, 1, 16384, 16384));
        let h = a.register(big);
        assert_eq!(h.shape().bytes(), 1 << 30);
        assert_eq!(a.resident_bytes(), 0);
        assert!(matches!(a.swap_in(&h), Err(OffloadError::OutOfBudget { .. })));
    }

    #[test]
    fn swap_cycle_counts_and_is_lossless() {
        let mut a = DeviceArena::new(4096);
        let x = t(1, 8, 8, 2);
        let h = a.admit(x.clone()).unwrap();
        assert_eq!(a.resident_bytes(), 256);
        a.swap_out(&h).unwrap();
        assert_eq!(a.residency(&h).unwrap(), Residency::Host);
        a.swap_in(&h).unwrap();
        let s = a.stats();
        assert_eq!(s.swap_out_count, 1);
        assert!(s.swap_in_count >= 1);
        assert!(a.get(&h).unwrap().bit_eq(&x));
    }

    #[test]
    fn lru_eviction_skips_pinned() {
        // Room for exactly two 256-byte tensors.
        let mut a = DeviceArena::new(512);
        let h0 = a.admit(t(1, 8, 8, 1)).unwrap();
        let h1 = a.admit(t(1, 8, 8, 2)).unwrap();
        a.pin(&h0).unwrap();
        let h2 = a.admit(t(1, 8, 8, 3)).unwrap();
        assert_eq!(a.residency(&h0).unwrap(), Residency::Device);
        assert_eq!(a.residency(&h1).unwrap(), Residency::Host);
        assert_eq!(a.residency(&h2).unwrap(), Residency::Device);
        // Both remaining device tensors pinned: nothing can be evicted.
        a.pin(&h2).unwrap();
        assert!(matches!(
            a.admit(t(1, 8, 8, 4)),
            Err(OffloadError::OutOfBudget { .. })
        ));
        assert!(matches!(a.swap_out(&h0), Err(OffloadError::Pinned(_))));
    }

    #[test]
    fn least_recently_used_goes_first() {
        let mut a = DeviceArena::new(768);
        let h0 = a.admit(t(1, 8, 8, 1)).unwrap();
        let h1 = a.admit(t(1, 8, 8, 2)).unwrap();
        let h2 = a.admit(t(1, 8, 8, 3)).unwrap();
        a.touch(&h0).unwrap();
        let _h3 = a.admit(t(1, 8, 8, 4)).unwrap();
        assert_eq!(a.residency(&h1).unwrap(), Residency::Host);
        assert_eq!(a.residency(&h0).unwrap(), Residency::Device);
        assert_eq!(a.residency(&h2).unwrap(), Residency::Device);
    }

    #[test]
    fn peak_is_monotone_and_bounded() {
        let mut a = DeviceArena::new(1000);
        let mut last = 0;
        for i in 0..20 {
            let h = a.admit(t(1, 4, 4 + i % 5, i as u64)).unwrap();
            if i % 3 == 0 {
                a.free(h).unwrap();
            }
            let p = a.stats().peak_resident;
            assert!(p >= last && p <= 1000);
            assert!(a.resident_bytes() <= 1000);
            last = p;
        }
    }

    #[test]
    fn stage_and_write_back_regions() {
        let mut a = DeviceArena::new(1 << 16);
        let x = t(3, 10, 12, 9);
        let src = a.register(x.clone());
        let dst = a.register(Tensor::zeros(x.shape()));
        let rect = Rect::new(2, 3, 4, 5);
        let part = a.stage_region(&src, rect).unwrap();
        assert_eq!(a.residency(&part).unwrap(), Residency::Device);
        a.write_back(&dst, &part, rect).unwrap();
        let out = a.get(&dst).unwrap();
        assert_eq!(out.at(0, 2, 3, 4), x.at(0, 2, 3, 4));
        assert_eq!(out.at(0, 2, 0, 0), 0.0);
        let s = a.stats();
        assert_eq!((s.swap_in_count, s.swap_out_count), (1, 1));
    }

    #[test]
    fn stats_json_keys() {
        let v = serde_json::to_value(MemoryStats::default()).unwrap();
        for key in ["peak_resident_bytes", "swap_in", "swap_out", "tiles", "wall_seconds"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
