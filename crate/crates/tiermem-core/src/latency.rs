//! Virtual clock, latency model and the charge trace.
//!
//! Every engine action that costs time charges the trace. Client-visible
//! (critical path) charges advance the clock; background work (the drainer,
//! the disk sink, migration traffic) is recorded on its own lane with its own
//! timestamps and does not advance the client clock. Total simulated time is
//! a pure function of the operation trace and the latency model, which is
//! what makes replays byte-identical.
//!
//! One time unit is nominally a microsecond; only orderings matter.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::types::{DeviceId, PeerId};

/// Configurable cost model. All values are per-unit time charges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    /// Time to copy one 4KB page between buffers.
    pub copy_per_page: u64,
    /// Time per network message of up to `message_size` bytes.
    pub net_write: u64,
    /// Time per remote page read.
    pub net_read: u64,
    /// Time to establish a connection to a peer (charged once per pair).
    pub connect: u64,
    /// Time to map one slab to a remote block.
    pub map_block: u64,
    /// Time per block-I/O write to the local disk sink.
    pub disk_write: u64,
    /// Time per page read from the local disk sink.
    pub disk_read: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            copy_per_page: 1,
            net_write: 5,
            net_read: 5,
            connect: 200,
            map_block: 50,
            disk_write: 1000,
            disk_read: 500,
        }
    }
}

impl LatencyModel {
    /// Rejects non-positive charges and disk costs that do not dominate the
    /// network costs.
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("copy_per_page", self.copy_per_page),
            ("net_write", self.net_write),
            ("net_read", self.net_read),
            ("connect", self.connect),
            ("map_block", self.map_block),
            ("disk_write", self.disk_write),
            ("disk_read", self.disk_read),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(SimError::Config(format!(
                    "latency.{name} must be strictly positive"
                )));
            }
        }
        if self.disk_read <= self.net_read {
            return Err(SimError::Config(
                "latency.disk_read must exceed latency.net_read".into(),
            ));
        }
        if self.disk_write <= self.net_write {
            return Err(SimError::Config(
                "latency.disk_write must exceed latency.net_write".into(),
            ));
        }
        Ok(())
    }
}

/// What a charge paid for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChargeKind {
    Copy,
    NetWrite,
    NetRead,
    Connect,
    MapBlock,
    DiskWrite,
    DiskRead,
    /// Client time spent waiting on backpressure (staging full or pool
    /// starved). Not a network or disk charge.
    Stall,
}

impl ChargeKind {
    /// True for charges that must never appear on the write critical path.
    pub fn is_network_or_disk(self) -> bool {
        matches!(
            self,
            ChargeKind::NetWrite | ChargeKind::NetRead | ChargeKind::DiskWrite | ChargeKind::DiskRead
        )
    }
}

/// Which actor paid the charge. Client lanes are the critical path; all
/// other lanes run concurrently with it on the simulated hardware.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Lane {
    Client(DeviceId),
    Drainer(DeviceId),
    DiskSink(DeviceId),
    Migration(u64),
    Control,
}

impl Lane {
    pub fn is_client(self) -> bool {
        matches!(self, Lane::Client(_))
    }
}

/// One recorded charge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Charge {
    pub at: u64,
    pub lane: Lane,
    pub kind: ChargeKind,
    pub units: u64,
    pub peer: Option<PeerId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Write,
    Read,
}

/// Start/completion window of one client operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpWindow {
    pub device: DeviceId,
    pub kind: OpKind,
    pub start: u64,
    pub end: u64,
    pub pages: u32,
}

impl OpWindow {
    pub fn latency(&self) -> u64 {
        self.end - self.start
    }
}

/// The virtual clock plus everything charged against it.
#[derive(Debug, Default)]
pub struct Trace {
    now: u64,
    pub records: Vec<Charge>,
    pub windows: Vec<OpWindow>,
}

impl Trace {
    pub fn new() -> Self {
        Trace::default()
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    /// Records a charge at the current clock and advances the clock by it.
    /// Only the client critical path uses this.
    pub fn advance(&mut self, lane: Lane, kind: ChargeKind, units: u64, peer: Option<PeerId>) {
        if units == 0 {
            return;
        }
        self.records.push(Charge { at: self.now, lane, kind, units, peer });
        self.now += units;
    }

    /// Records a charge at an explicit time without touching the clock.
    /// Background lanes schedule their own timestamps.
    pub fn charge_at(&mut self, at: u64, lane: Lane, kind: ChargeKind, units: u64, peer: Option<PeerId>) {
        if units == 0 {
            return;
        }
        self.records.push(Charge { at, lane, kind, units, peer });
    }

    /// Moves the clock forward to `t` without recording anything. Used when
    /// the critical path already recorded its charges and just needs the
    /// completion timestamp (e.g. parallel page reads).
    pub fn advance_clock_to(&mut self, t: u64) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Charges a stall on the client lane up to time `t`.
    pub fn stall_until(&mut self, device: DeviceId, t: u64) {
        if t > self.now {
            let units = t - self.now;
            self.records.push(Charge {
                at: self.now,
                lane: Lane::Client(device),
                kind: ChargeKind::Stall,
                units,
                peer: None,
            });
            self.now = t;
        }
    }

    pub fn push_window(&mut self, w: OpWindow) {
        self.windows.push(w);
    }

    /// Client-lane charges that violate write critical-path isolation:
    /// network or disk charges recorded inside a write's start→completion
    /// window on that device's client lane.
    pub fn write_isolation_violations(&self) -> Vec<Charge> {
        let mut bad = Vec::new();
        for w in self.windows.iter().filter(|w| w.kind == OpKind::Write) {
            for c in &self.records {
                if c.lane == Lane::Client(w.device)
                    && c.kind.is_network_or_disk()
                    && c.at >= w.start
                    && c.at < w.end
                {
                    bad.push(*c);
                }
            }
        }
        bad
    }

    pub fn count_kind(&self, kind: ChargeKind) -> usize {
        self.records.iter().filter(|c| c.kind == kind).count()
    }

    pub fn total_units(&self, kind: ChargeKind) -> u64 {
        self.records
            .iter()
            .filter(|c| c.kind == kind)
            .map(|c| c.units)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_is_valid() {
        LatencyModel::default().validate().unwrap();
    }

    #[test]
    fn rejects_disk_cheaper_than_net() {
        let m = LatencyModel { disk_read: 5, net_read: 5, ..Default::default() };
        assert!(m.validate().is_err());
        let m = LatencyModel { disk_write: 3, net_write: 5, ..Default::default() };
        assert!(m.validate().is_err());
        let m = LatencyModel { connect: 0, ..Default::default() };
        assert!(m.validate().is_err());
    }

    #[test]
    fn advance_moves_clock_and_records() {
        let mut t = Trace::new();
        let d = DeviceId(0);
        t.advance(Lane::Client(d), ChargeKind::Copy, 3, None);
        t.advance(Lane::Client(d), ChargeKind::Copy, 0, None);
        assert_eq!(t.now(), 3);
        assert_eq!(t.records.len(), 1);
        t.charge_at(10, Lane::Drainer(d), ChargeKind::NetWrite, 5, Some(PeerId(1)));
        assert_eq!(t.now(), 3);
        assert_eq!(t.records.len(), 2);
    }

    #[test]
    fn isolation_check_flags_client_net_inside_write_window() {
        let mut t = Trace::new();
        let d = DeviceId(0);
        let start = t.now();
        t.advance(Lane::Client(d), ChargeKind::Copy, 2, None);
        t.advance(Lane::Client(d), ChargeKind::NetWrite, 5, Some(PeerId(0)));
        t.push_window(OpWindow { device: d, kind: OpKind::Write, start, end: t.now(), pages: 1 });
        assert_eq!(t.write_isolation_violations().len(), 1);

        // Background drain inside the same span is fine.
        let mut t2 = Trace::new();
        let start = t2.now();
        t2.advance(Lane::Client(d), ChargeKind::Copy, 2, None);
        t2.charge_at(1, Lane::Drainer(d), ChargeKind::NetWrite, 5, Some(PeerId(0)));
        t2.push_window(OpWindow { device: d, kind: OpKind::Write, start, end: t2.now(), pages: 1 });
        assert!(t2.write_isolation_violations().is_empty());
    }
}
