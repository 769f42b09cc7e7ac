use super::{Cascade, CascadeRecord, RawObservedEvent};
use crate::error::{Error, Result};

/// A gap whose missing count had to be adjusted during reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionWarning {
    /// Index of the observed event closing the gap (0 for the gap before
    /// the first observation).
    pub index: usize,
    /// Missing count implied by the raw cumulative counts (may be negative).
    pub raw_missing: i64,
    /// Events added to (positive) or dropped from (negative) the cascade
    /// relative to the last cumulative count.
    pub adjustment: i64,
    pub reason: &'static str,
}

/// Rebuilds a fully tiled cascade from sampled-down observations that carry
/// the platform's cumulative reshare counter.
///
/// Between consecutive observations `i` and `i + 1` there are
/// `rtc[i+1] - rtc[i] - 1` unobserved events; before the first observation
/// there are `rtc[0] - 1`. Negative gaps (deletions) are clamped to zero and
/// reported. The implied total equals the last counter plus the sum of the
/// reported adjustments.
pub fn reconstruct_missing_counts(
    id: &str,
    raw: &[RawObservedEvent],
    horizon: f64,
) -> Result<(Cascade, Vec<ReconstructionWarning>)> {
    let bad = |reason: String| Error::InvalidCascade {
        id: id.to_string(),
        reason,
    };
    if raw.is_empty() {
        return Err(bad("no observed events".into()));
    }
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(bad(format!("horizon {horizon} must be finite and > 0")));
    }
    for (i, e) in raw.iter().enumerate() {
        if !e.time.is_finite() || e.time < 0.0 {
            return Err(bad(format!("event {i}: time {} must be finite and >= 0", e.time)));
        }
        if e.time > horizon {
            return Err(bad(format!("event {i}: time {} exceeds horizon {horizon}", e.time)));
        }
        if i > 0 && e.time < raw[i - 1].time {
            return Err(bad(format!("event {i}: times are not sorted")));
        }
        if e.cumulative_count > i64::MAX as u64 {
            return Err(bad(format!("event {i}: cumulative count {} out of range", e.cumulative_count)));
        }
    }

    let mut records = Vec::with_capacity(raw.len() * 2 + 1);
    let mut warnings = Vec::new();

    let first = raw[0];
    let lead = first.cumulative_count as i64 - 1;
    if lead < 0 {
        warnings.push(ReconstructionWarning {
            index: 0,
            raw_missing: lead,
            adjustment: -lead,
            reason: "cumulative count below one at first observation",
        });
    }
    let lead = lead.max(0) as u64;
    if first.time > 0.0 {
        records.push(CascadeRecord::censored(0.0, first.time, lead));
    } else if lead > 0 {
        warnings.push(ReconstructionWarning {
            index: 0,
            raw_missing: lead as i64,
            adjustment: -(lead as i64),
            reason: "missing events before an observation at time zero cannot be placed",
        });
    }
    records.push(CascadeRecord::event(first.time));

    for i in 1..raw.len() {
        let (prev, cur) = (raw[i - 1], raw[i]);
        let missing = cur.cumulative_count as i64 - prev.cumulative_count as i64 - 1;
        if missing < 0 {
            warnings.push(ReconstructionWarning {
                index: i,
                raw_missing: missing,
                adjustment: -missing,
                reason: "non-monotone cumulative count clamped to zero",
            });
        }
        let missing = missing.max(0) as u64;
        let gap = cur.time - prev.time;
        if gap > 0.0 {
            records.push(CascadeRecord::spanning(prev.time, cur.time, missing));
        } else if missing > 0 {
            warnings.push(ReconstructionWarning {
                index: i,
                raw_missing: missing as i64,
                adjustment: -(missing as i64),
                reason: "missing events between simultaneous observations cannot be placed",
            });
        }
        records.push(CascadeRecord::event(cur.time));
    }
    let last = raw[raw.len() - 1].time;
    if horizon > last {
        records.push(CascadeRecord::spanning(last, horizon, 0));
    }
    Ok((Cascade::new(id, horizon, records)?, warnings))
}
