//! Charging station snapshots with time-stamped outlet installations.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::geo::LatLon;
use crate::Level;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutletEventKind {
    Install,
    Close,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutletEvent {
    pub at: DateTime<Utc>,
    pub kind: OutletEventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationSnapshot {
    pub station_id: String,
    pub pos: LatLon,
    pub level: Level,
    pub operator: String,
    pub outlet_events: Vec<OutletEvent>,
    /// Permanent closure of the whole station.
    pub closed: Option<DateTime<Utc>>,
}

impl StationSnapshot {
    pub fn new(station_id: impl Into<String>, pos: LatLon, level: Level) -> Self {
        Self {
            station_id: station_id.into(),
            pos,
            level,
            operator: String::new(),
            outlet_events: Vec::new(),
            closed: None,
        }
    }

    pub fn with_installs(mut self, installs: &[DateTime<Utc>]) -> Self {
        self.outlet_events
            .extend(installs.iter().map(|&at| OutletEvent { at, kind: OutletEventKind::Install }));
        self
    }

    /// Installed outlets at time `t` (events at exactly `t` count).
    pub fn outlets_at(&self, t: DateTime<Utc>) -> u32 {
        if self.closed.is_some_and(|c| c <= t) {
            return 0;
        }
        let mut n: i64 = 0;
        for e in self.outlet_events.iter().filter(|e| e.at <= t) {
            n += match e.kind {
                OutletEventKind::Install => 1,
                OutletEventKind::Close => -1,
            };
        }
        n.max(0) as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    #[test]
    fn outlet_counting() {
        let t = |d| Utc.with_ymd_and_hms(2019, 1, d, 0, 0, 0).unwrap();
        let mut s = StationSnapshot::new("s", LatLon::new(45.5, -73.6), Level::L2).with_installs(&[t(2), t(5)]);
        s.outlet_events.push(OutletEvent { at: t(10), kind: OutletEventKind::Close });
        assert_eq!(s.outlets_at(t(1)), 0);
        assert_eq!(s.outlets_at(t(2)), 1);
        assert_eq!(s.outlets_at(t(6)), 2);
        assert_eq!(s.outlets_at(t(11)), 1);
        s.closed = Some(t(20));
        assert_eq!(s.outlets_at(t(21)), 0);
    }
}
