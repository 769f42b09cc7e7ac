//! Cascade data model.
//!
//! A cascade mixes two kinds of records: observed point events and
//! censored intervals that only carry the number of events they contain.
//! The canonical ("fully tiled") form covers `[0, horizon]` with
//! censored intervals everywhere between point events, so a compensator
//! sum over the records ranges over a well-defined partition.

mod downsample;
mod io;
mod reconstruct;

use std::collections::BTreeSet;
use std::fmt;

pub use downsample::downsample;
pub use io::{
    groups_from_str, groups_to_string, raw_from_str, raw_to_string, read_groups, read_raw,
    write_groups, write_raw, RawCascade,
};
pub use reconstruct::{reconstruct_missing_counts, ReconstructionWarning};

use crate::error::{Error, Result};

/// One element of a cascade.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CascadeRecord {
    /// An observed event at `time`.
    Event { time: f64 },
    /// `count` events known to lie in the open interval `(start, start + duration)`.
    Censored {
        start: f64,
        duration: f64,
        count: u64,
    },
}

impl CascadeRecord {
    pub fn event(time: f64) -> Self {
        CascadeRecord::Event { time }
    }

    pub fn censored(start: f64, duration: f64, count: u64) -> Self {
        CascadeRecord::Censored {
            start,
            duration,
            count,
        }
    }

    /// Event time, or interval start.
    /// Interval covering `[start, end]`. The duration is nudged by at most
    /// a few ulps so that `start + duration == end` whenever some duration
    /// achieves it.
    pub fn spanning(start: f64, end: f64, count: u64) -> Self {
        let mut d = end - start;
        for _ in 0..4 {
            let e = start + d;
            if e == end {
                break;
            }
            d = if e > end { d.next_down() } else { d.next_up() };
        }
        if start + d != end {
            d = end - start;
        }
        Self::censored(start, d, count)
    }

    pub fn time(&self) -> f64 {
        match *self {
            CascadeRecord::Event { time } => time,
            CascadeRecord::Censored { start, .. } => start,
        }
    }

    /// Time at which the record has been fully observed: the event time,
    /// or the end of the interval.
    pub fn end(&self) -> f64 {
        match *self {
            CascadeRecord::Event { time } => time,
            CascadeRecord::Censored {
                start, duration, ..
            } => start + duration,
        }
    }

    /// Number of events the record stands for.
    pub fn implied_count(&self) -> u64 {
        match *self {
            CascadeRecord::Event { .. } => 1,
            CascadeRecord::Censored { count, .. } => count,
        }
    }

    pub fn is_event(&self) -> bool {
        matches!(self, CascadeRecord::Event { .. })
    }

    fn sort_key(&self) -> (f64, u8) {
        (self.time(), if self.is_event() { 0 } else { 1 })
    }

    pub(crate) fn check_values(&self) -> std::result::Result<(), String> {
        match *self {
            CascadeRecord::Event { time } => {
                if !time.is_finite() || time < 0.0 {
                    return Err(format!("event time {time} must be finite and >= 0"));
                }
            }
            CascadeRecord::Censored {
                start, duration, ..
            } => {
                if !start.is_finite() || start < 0.0 {
                    return Err(format!("interval start {start} must be finite and >= 0"));
                }
                if !duration.is_finite() || duration <= 0.0 {
                    return Err(format!("interval duration {duration} must be finite and > 0"));
                }
                if !(start + duration).is_finite() {
                    return Err("interval end overflows".into());
                }
            }
        }
        Ok(())
    }
}

/// An ordered sequence of records observed over `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cascade {
    pub id: String,
    pub horizon: f64,
    pub records: Vec<CascadeRecord>,
}

impl Cascade {
    /// Builds a cascade, checking per-record value constraints (finite,
    /// non-negative times, positive durations, positive horizon). Ordering
    /// and tiling are not enforced here; see [`validate`].
    pub fn new(
        id: impl Into<String>,
        horizon: f64,
        records: Vec<CascadeRecord>,
    ) -> Result<Self> {
        let id = id.into();
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::InvalidCascade {
                id,
                reason: format!("horizon {horizon} must be finite and > 0"),
            });
        }
        for (i, r) in records.iter().enumerate() {
            if let Err(reason) = r.check_values() {
                return Err(Error::InvalidCascade {
                    id,
                    reason: format!("record {i}: {reason}"),
                });
            }
        }
        Ok(Cascade {
            id,
            horizon,
            records,
        })
    }

    /// Event-only cascade from sorted event times.
    pub fn from_event_times(id: impl Into<String>, horizon: f64, times: &[f64]) -> Result<Self> {
        Cascade::new(
            id,
            horizon,
            times.iter().map(|&t| CascadeRecord::event(t)).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Point events plus all censored counts, saturating at `u64::MAX`.
    pub fn total_count(&self) -> u64 {
        self.records
            .iter()
            .fold(0u64, |a, r| a.saturating_add(r.implied_count()))
    }

    pub fn event_times(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                CascadeRecord::Event { time } => Some(*time),
                _ => None,
            })
            .collect()
    }

    pub fn has_events(&self) -> bool {
        self.records.iter().any(CascadeRecord::is_event)
    }

    pub fn has_intervals(&self) -> bool {
        self.records.iter().any(|r| !r.is_event())
    }

    /// Fills every uncovered gap of `[0, horizon]` with a zero-count
    /// interval. Cascades already in canonical form are returned unchanged.
    pub fn tiled(&self) -> Cascade {
        let mut out = Vec::with_capacity(self.records.len() * 2 + 1);
        let tol = tolerance(self.horizon);
        let mut cursor = 0.0;
        for r in &self.records {
            if r.time() > cursor + tol {
                out.push(CascadeRecord::spanning(cursor, r.time(), 0));
            }
            out.push(*r);
            cursor = f64::max(cursor, r.end());
        }
        if self.horizon > cursor + tol {
            out.push(CascadeRecord::spanning(cursor, self.horizon, 0));
        }
        Cascade {
            id: self.id.clone(),
            horizon: self.horizon,
            records: out,
        }
    }

    /// Records fully observed by `t_obs`, with the horizon moved to `t_obs`.
    /// Intervals straddling `t_obs` are dropped since their count cannot be
    /// split.
    pub fn truncated(&self, t_obs: f64) -> Result<Cascade> {
        if !(t_obs > 0.0 && t_obs <= self.horizon) {
            return Err(Error::invalid(format!(
                "observation time {t_obs} must lie in (0, {}]",
                self.horizon
            )));
        }
        Ok(Cascade {
            id: self.id.clone(),
            horizon: t_obs,
            records: self
                .records
                .iter()
                .copied()
                .filter(|r| r.end() <= t_obs)
                .collect(),
        })
    }
}

/// A labeled or unlabeled set of cascades sharing one item or user.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeGroup {
    pub group_id: String,
    pub label: Option<String>,
    pub tags: Option<BTreeSet<String>>,
    pub cascades: Vec<Cascade>,
}

impl CascadeGroup {
    pub fn new(group_id: impl Into<String>, label: Option<String>, cascades: Vec<Cascade>) -> Self {
        CascadeGroup {
            group_id: group_id.into(),
            label,
            tags: None,
            cascades,
        }
    }

    pub fn total_count(&self) -> u64 {
        self.cascades
            .iter()
            .fold(0u64, |a, c| a.saturating_add(c.total_count()))
    }
}

/// Observed event carrying the platform's cumulative reshare count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawObservedEvent {
    pub time: f64,
    pub cumulative_count: u64,
}

/// A departure from canonical form reported by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Record `index` has an invalid time, duration or count value.
    InvalidValue { index: usize, reason: String },
    /// Record `index` sorts before its predecessor.
    Unsorted { index: usize },
    /// Interval `index` starts before the previous interval ends.
    Overlap { index: usize },
    /// Event `index` lies strictly inside an interval.
    EventInsideInterval { index: usize },
    /// Record `index` ends after the horizon.
    Horizon { index: usize },
    /// `(start, end)` is not covered by any interval.
    UntiledGap { start: f64, end: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::InvalidValue { index, reason } => write!(f, "record {index}: {reason}"),
            Violation::Unsorted { index } => write!(f, "record {index} out of order"),
            Violation::Overlap { index } => write!(f, "interval {index} overlaps its predecessor"),
            Violation::EventInsideInterval { index } => {
                write!(f, "event {index} lies inside a censored interval")
            }
            Violation::Horizon { index } => write!(f, "record {index} ends after the horizon"),
            Violation::UntiledGap { start, end } => write!(f, "gap ({start}, {end}) is not tiled"),
        }
    }
}

/// Slack allowed when comparing record boundaries, so that an interval end
/// rebuilt as `start + duration` still meets the next record.
pub(crate) fn tolerance(horizon: f64) -> f64 {
    1e-12 * horizon.abs().max(1.0)
}

/// Returns every invariant violation of `cascade`; empty iff canonical.
pub fn validate(cascade: &Cascade) -> Vec<Violation> {
    let mut out = Vec::new();
    if !cascade.horizon.is_finite() || cascade.horizon <= 0.0 {
        out.push(Violation::InvalidValue {
            index: 0,
            reason: format!("horizon {} must be finite and > 0", cascade.horizon),
        });
    }
    let tol = tolerance(cascade.horizon);
    let mut last_interval_end: Option<(usize, f64)> = None;
    let mut intervals: Vec<(f64, f64)> = Vec::new();
    for (i, r) in cascade.records.iter().enumerate() {
        if let Err(reason) = r.check_values() {
            out.push(Violation::InvalidValue { index: i, reason });
            continue;
        }
        if i > 0 {
            let prev = cascade.records[i - 1];
            if r.sort_key() < prev.sort_key() {
                out.push(Violation::Unsorted { index: i });
            }
        }
        if r.end() > cascade.horizon + tol {
            out.push(Violation::Horizon { index: i });
        }
        if let CascadeRecord::Censored { start, .. } = *r {
            if let Some((_, end)) = last_interval_end {
                if start < end - tol {
                    out.push(Violation::Overlap { index: i });
                }
            }
            let end = r.end();
            if last_interval_end.map_or(true, |(_, e)| end > e) {
                last_interval_end = Some((i, end));
            }
            intervals.push((start, end));
        }
    }
    for (i, r) in cascade.records.iter().enumerate() {
        if let CascadeRecord::Event { time } = *r {
            if intervals.iter().any(|&(s, e)| s + tol < time && time < e - tol) {
                out.push(Violation::EventInsideInterval { index: i });
            }
        }
    }
    // Tiling: walk the covered span from 0.
    let mut cursor = 0.0_f64;
    for r in &cascade.records {
        if r.check_values().is_err() || r.time() > cascade.horizon + tol {
            continue;
        }
        match *r {
            CascadeRecord::Event { time } => {
                if time > cursor + tol {
                    out.push(Violation::UntiledGap {
                        start: cursor,
                        end: time,
                    });
                    cursor = time;
                }
            }
            CascadeRecord::Censored { start, .. } => {
                if start > cursor + tol {
                    out.push(Violation::UntiledGap { start: cursor, end: start });
                }
                cursor = cursor.max(r.end());
            }
        }
    }
    if cascade.horizon.is_finite() && cursor < cascade.horizon - tol {
        out.push(Violation::UntiledGap {
            start: cursor,
            end: cascade.horizon,
        });
    }
    out
}

/// Like [`validate`] but turns violations into an error.
pub fn ensure_canonical(cascade: &Cascade) -> Result<()> {
    let v = validate(cascade);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidCascade {
            id: cascade.id.clone(),
            reason: v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: f64) -> CascadeRecord {
        CascadeRecord::event(t)
    }
    fn iv(o: f64, d: f64, c: u64) -> CascadeRecord {
        CascadeRecord::censored(o, d, c)
    }

    #[test]
    fn canonical_cascade_has_no_violations() {
        let c = Cascade::new("a", 4.0, vec![iv(0.0, 1.0, 1), ev(1.0), iv(1.0, 3.0, 2)]).unwrap();
        assert_eq!(validate(&c), vec![]);
    }

    #[test]
    fn overlapping_intervals_reported_once() {
        let c = Cascade::new("a", 4.0, vec![iv(0.0, 2.0, 1), iv(1.0, 3.0, 0)]).unwrap();
        assert_eq!(validate(&c), vec![Violation::Overlap { index: 1 }]);
    }

    #[test]
    fn event_after_horizon_reported() {
        let c = Cascade::new("a", 2.0, vec![iv(0.0, 2.0, 0), ev(2.5)]).unwrap();
        assert_eq!(validate(&c), vec![Violation::Horizon { index: 1 }]);
    }

    #[test]
    fn untiled_gaps_and_interior_events() {
        let c = Cascade::from_event_times("a", 3.0, &[1.0, 2.0]).unwrap();
        assert_eq!(validate(&c).len(), 3);
        let t = c.tiled();
        assert_eq!(validate(&t), vec![]);
        assert_eq!(t.total_count(), 2);

        let bad = Cascade::new("b", 3.0, vec![iv(0.0, 3.0, 1), ev(1.5)]).unwrap();
        assert!(validate(&bad).contains(&Violation::EventInsideInterval { index: 1 }));
    }

    #[test]
    fn unsorted_records_reported() {
        let c = Cascade::new("a", 3.0, vec![iv(0.0, 2.0, 0), ev(2.0), ev(1.0), iv(2.0, 1.0, 0)])
            .unwrap();
        assert!(validate(&c).contains(&Violation::Unsorted { index: 2 }));
    }

    #[test]
    fn constructor_rejects_bad_values() {
        assert!(Cascade::new("a", 0.0, vec![]).is_err());
        assert!(Cascade::new("a", 1.0, vec![iv(0.0, 0.0, 1)]).is_err());
        assert!(Cascade::new("a", 1.0, vec![ev(-1.0)]).is_err());
        assert!(Cascade::new("a", 1.0, vec![ev(f64::NAN)]).is_err());
    }

    #[test]
    fn truncation_drops_straddling_intervals() {
        let c = Cascade::new("a", 4.0, vec![ev(0.0), iv(0.0, 1.0, 2), ev(1.0), iv(1.0, 3.0, 5)])
            .unwrap();
        let t = c.truncated(2.0).unwrap();
        assert_eq!(t.records.len(), 3);
        assert_eq!(t.total_count(), 4);
        assert_eq!(t.horizon, 2.0);
    }
}
