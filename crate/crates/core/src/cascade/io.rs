//! JSON-lines files for cascade groups and raw observed events.
//!
//! Group file, one object per line:
//! `{"group_id": str, "label": str|null, "tags": [str]|null, "cascades": [{"id": str, "horizon": float, "records": [{"t": float} | {"o": float, "d": float, "c": int}]}]}`
//!
//! Raw-event file, one object per line:
//! `{"cascade_id": str, "events": [{"t": float, "rtc": int}], "horizon": float}`

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Cascade, CascadeGroup, CascadeRecord, RawObservedEvent};
use crate::error::{Error, Result};
use crate::json;

#[derive(Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
enum WireRecord {
    Event {
        t: f64,
    },
    Censored {
        o: f64,
        d: f64,
        c: u64,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireCascade {
    id: String,
    horizon: f64,
    records: Vec<WireRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireGroup {
    group_id: String,
    label: Option<String>,
    tags: Option<BTreeSet<String>>,
    cascades: Vec<WireCascade>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRawEvent {
    t: f64,
    rtc: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRawCascade {
    cascade_id: String,
    events: Vec<WireRawEvent>,
    horizon: f64,
}

/// One line of a raw-event file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCascade {
    pub cascade_id: String,
    pub events: Vec<RawObservedEvent>,
    pub horizon: f64,
}

impl From<&CascadeRecord> for WireRecord {
    fn from(r: &CascadeRecord) -> Self {
        match *r {
            CascadeRecord::Event { time } => WireRecord::Event { t: time },
            CascadeRecord::Censored {
                start,
                duration,
                count,
            } => WireRecord::Censored {
                o: start,
                d: duration,
                c: count,
            },
        }
    }
}

fn group_to_wire(g: &CascadeGroup) -> WireGroup {
    WireGroup {
        group_id: g.group_id.clone(),
        label: g.label.clone(),
        tags: g.tags.clone(),
        cascades: g
            .cascades
            .iter()
            .map(|c| WireCascade {
                id: c.id.clone(),
                horizon: c.horizon,
                records: c.records.iter().map(WireRecord::from).collect(),
            })
            .collect(),
    }
}

fn group_from_wire(w: WireGroup) -> std::result::Result<CascadeGroup, String> {
    if w.cascades.is_empty() {
        return Err(format!("group `{}` has no cascades", w.group_id));
    }
    let cascades = w
        .cascades
        .into_iter()
        .map(|c| {
            let records = c
                .records
                .into_iter()
                .map(|r| match r {
                    WireRecord::Event { t } => CascadeRecord::event(t),
                    WireRecord::Censored { o, d, c } => CascadeRecord::censored(o, d, c),
                })
                .collect();
            Cascade::new(c.id, c.horizon, records).map_err(|e| e.to_string())
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(CascadeGroup {
        group_id: w.group_id,
        label: w.label,
        tags: w.tags,
        cascades,
    })
}

/// Serializes groups to JSON-lines text.
pub fn groups_to_string(groups: &[CascadeGroup]) -> Result<String> {
    let mut out = String::new();
    for g in groups {
        out.push_str(&json::to_line(&group_to_wire(g))?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses JSON-lines group text. `origin` only labels error messages.
pub fn groups_from_str(text: &str, origin: &Path) -> Result<Vec<CascadeGroup>> {
    let mut groups = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            reason,
        };
        let wire: WireGroup = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let group = group_from_wire(wire).map_err(parse_err)?;
        if !seen.insert(group.group_id.clone()) {
            return Err(Error::DuplicateGroup(group.group_id));
        }
        groups.push(group);
    }
    Ok(groups)
}

pub fn read_groups(path: &Path) -> Result<Vec<CascadeGroup>> {
    groups_from_str(&json::read_to_string(path)?, path)
}

pub fn write_groups(groups: &[CascadeGroup], path: &Path) -> Result<()> {
    json::write_atomic(path, groups_to_string(groups)?.as_bytes())
}

pub fn raw_from_str(text: &str, origin: &Path) -> Result<Vec<RawCascade>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let w: WireRawCascade = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(RawCascade {
            cascade_id: w.cascade_id,
            horizon: w.horizon,
            events: w
                .events
                .into_iter()
                .map(|e| RawObservedEvent {
                    time: e.t,
                    cumulative_count: e.rtc,
                })
                .collect(),
        });
    }
    Ok(out)
}

pub fn raw_to_string(raw: &[RawCascade]) -> Result<String> {
    let mut out = String::new();
    for r in raw {
        let w = WireRawCascade {
            cascade_id: r.cascade_id.clone(),
            horizon: r.horizon,
            events: r
                .events
                .iter()
                .map(|e| WireRawEvent {
                    t: e.time,
                    rtc: e.cumulative_count,
                })
                .collect(),
        };
        out.push_str(&json::to_line(&w)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_raw(path: &Path) -> Result<Vec<RawCascade>> {
    raw_from_str(&json::read_to_string(path)?, path)
}

pub fn write_raw(raw: &[RawCascade], path: &Path) -> Result<()> {
    json::write_atomic(path, raw_to_string(raw)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(id: &str) -> CascadeGroup {
        let c = Cascade::new(
            "c0",
            3.0,
            vec![
                CascadeRecord::event(0.0),
                CascadeRecord::censored(0.0, 0.1 + 0.2, 7),
                CascadeRecord::event(0.1 + 0.2),
                CascadeRecord::censored(0.30000000000000004, 2.6999999999999997, 0),
            ],
        )
        .unwrap();
        let mut g = CascadeGroup::new(id, Some("news".into()), vec![c]);
        g.tags = Some(["#a".to_string(), "#b".to_string()].into_iter().collect());
        g
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.jsonl");
        let groups = vec![group("g1"), CascadeGroup::new("g2", None, group("x").cascades)];
        write_groups(&groups, &path).unwrap();
        assert_eq!(read_groups(&path).unwrap(), groups);
    }

    #[test]
    fn empty_file_reads_as_no_groups() {
        assert!(groups_from_str("", Path::new("e")).unwrap().is_empty());
    }

    #[test]
    fn missing_records_field_names_the_line() {
        let good = groups_to_string(&[group("g1")]).unwrap();
        let text = format!(
            "{good}{}\n",
            r#"{"group_id":"g2","label":null,"tags":null,"cascades":[{"id":"c","horizon":1.0}]}"#
        );
        match groups_from_str(&text, Path::new("f.jsonl")) {
            Err(Error::Parse { line, reason, .. }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("records"), "{reason}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_group_ids_rejected() {
        let text = groups_to_string(&[group("g1"), group("g1")]).unwrap();
        assert!(matches!(
            groups_from_str(&text, Path::new("f")),
            Err(Error::DuplicateGroup(_))
        ));
    }

    #[test]
    fn invalid_values_rejected_on_read() {
        let text = r#"{"group_id":"g","label":null,"tags":null,"cascades":[{"id":"c","horizon":1.0,"records":[{"o":0.0,"d":0.0,"c":1}]}]}"#;
        assert!(matches!(
            groups_from_str(text, Path::new("f")),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn raw_file_round_trip() {
        let raw = vec![RawCascade {
            cascade_id: "r".into(),
            horizon: 9.5,
            events: vec![
                RawObservedEvent {
                    time: 0.25,
                    cumulative_count: 1,
                },
                RawObservedEvent {
                    time: 1.0 / 3.0,
                    cumulative_count: 9,
                },
            ],
        }];
        let text = raw_to_string(&raw).unwrap();
        assert_eq!(raw_from_str(&text, Path::new("r")).unwrap(), raw);
    }
}
