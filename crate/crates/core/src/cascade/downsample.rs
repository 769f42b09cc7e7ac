use rand::Rng as _;

use super::{ensure_canonical, tolerance, Cascade, CascadeRecord};
use crate::error::{Error, Result};
use crate::rng;

fn add_count(a: u64, b: u64, id: &str) -> Result<u64> {
    a.checked_add(b).ok_or_else(|| Error::InvalidCascade {
        id: id.to_string(),
        reason: "merged interval count overflows".into(),
    })
}

/// Removes each point event independently with probability `p_missing`.
///
/// A removed event is folded into the censored interval(s) touching its
/// time: its unit count is added and the intervals on either side merge
/// into one. Intervals that were already adjacent in the input are kept
/// apart, so `p_missing = 0` returns the input unchanged. The total
/// implied event count is preserved exactly.
pub fn downsample(cascade: &Cascade, p_missing: f64, seed: u64) -> Result<Cascade> {
    if !(0.0..=1.0).contains(&p_missing) {
        return Err(Error::invalid(format!(
            "p_missing {p_missing} must lie in [0, 1]"
        )));
    }
    ensure_canonical(cascade)?;

    let tol = tolerance(cascade.horizon);
    let mut rng = rng::seeded(seed);
    let removed: Vec<bool> = cascade
        .records
        .iter()
        .map(|r| r.is_event() && rng.gen::<f64>() < p_missing)
        .collect();

    struct Acc {
        start: f64,
        end: f64,
        count: u64,
        // the last element folded in was a removed event, so the next
        // interval starting at `end` belongs to the same run
        open: bool,
    }

    let mut out = Vec::with_capacity(cascade.records.len());
    let mut acc: Option<Acc> = None;

    fn flush(acc: &mut Option<Acc>, out: &mut Vec<CascadeRecord>, id: &str) -> Result<()> {
        if let Some(a) = acc.take() {
            if a.end <= a.start {
                return Err(Error::InvalidCascade {
                    id: id.to_string(),
                    reason: format!("removed event at {} has no adjacent interval", a.start),
                });
            }
            out.push(CascadeRecord::spanning(a.start, a.end, a.count));
        }
        Ok(())
    }

    for (r, &gone) in cascade.records.iter().zip(&removed) {
        match *r {
            CascadeRecord::Event { time } if gone => match acc.as_mut() {
                Some(a) if (a.end - time).abs() <= tol => {
                    a.count = add_count(a.count, 1, &cascade.id)?;
                    a.open = true;
                }
                _ => {
                    flush(&mut acc, &mut out, &cascade.id)?;
                    acc = Some(Acc {
                        start: time,
                        end: time,
                        count: 1,
                        open: true,
                    });
                }
            },
            CascadeRecord::Event { .. } => {
                flush(&mut acc, &mut out, &cascade.id)?;
                out.push(*r);
            }
            CascadeRecord::Censored {
                start,
                duration,
                count,
            } => match acc.as_mut() {
                Some(a) if a.open && (a.end - start).abs() <= tol => {
                    a.end = start + duration;
                    a.count = add_count(a.count, count, &cascade.id)?;
                    a.open = false;
                }
                _ => {
                    flush(&mut acc, &mut out, &cascade.id)?;
                    acc = Some(Acc {
                        start,
                        end: start + duration,
                        count,
                        open: false,
                    });
                }
            },
        }
    }
    flush(&mut acc, &mut out, &cascade.id)?;

    Ok(Cascade {
        id: cascade.id.clone(),
        horizon: cascade.horizon,
        records: out,
    })
}

#[cfg(test)]
mod tests {
    use super::super::validate;
    use super::*;

    fn sample() -> Cascade {
        Cascade::from_event_times("s", 10.0, &[0.0, 0.5, 1.0, 1.0, 3.0, 7.5, 10.0])
            .unwrap()
            .tiled()
    }

    #[test]
    fn zero_probability_is_identity() {
        let c = sample();
        assert_eq!(downsample(&c, 0.0, 3).unwrap(), c);
    }

    #[test]
    fn full_removal_leaves_only_intervals() {
        let c = sample();
        let d = downsample(&c, 1.0, 3).unwrap();
        assert!(!d.has_events());
        assert_eq!(d.total_count(), c.total_count());
        assert_eq!(d.records.len(), 1);
        assert!(validate(&d).is_empty());
    }

    #[test]
    fn preexisting_adjacent_intervals_stay_apart() {
        let c = Cascade::new(
            "m",
            3.0,
            vec![
                CascadeRecord::censored(0.0, 1.0, 2),
                CascadeRecord::censored(1.0, 1.0, 0),
                CascadeRecord::event(2.0),
                CascadeRecord::censored(2.0, 1.0, 4),
            ],
        )
        .unwrap();
        let d = downsample(&c, 1.0, 0).unwrap();
        assert_eq!(
            d.records,
            vec![
                CascadeRecord::censored(0.0, 1.0, 2),
                CascadeRecord::censored(1.0, 2.0, 5),
            ]
        );
    }

    #[test]
    fn rejects_bad_probability_and_untiled_input() {
        let c = sample();
        assert!(downsample(&c, -0.1, 0).is_err());
        assert!(downsample(&c, 1.5, 0).is_err());
        let raw = Cascade::from_event_times("r", 3.0, &[1.0]).unwrap();
        assert!(downsample(&raw, 0.5, 0).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let c = sample();
        assert_eq!(downsample(&c, 0.5, 11).unwrap(), downsample(&c, 0.5, 11).unwrap());
    }
}
