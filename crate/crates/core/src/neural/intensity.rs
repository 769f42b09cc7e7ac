//! Intensity between records, its integral and the fused log-likelihood.
//!
//! The start token and every record carry an availability time (anchor):
//! 0 for the start token, the event time for events and the interval end
//! for censored intervals. On `(a_s, a_next]` the intensity is driven by
//! the last state whose anchor equals `a_s`:
//!
//! `ξ(t) = softplus_β(g_s + α (t − a_s))`, with `g = H w`.
//!
//! The integral over a segment is the exact integral of the piecewise
//! linear interpolant through `M` equally spaced nodes, so it is additive
//! over adjacent ranges.

use crate::autograd::{sigmoid, softplus, CustomOp, Mat};
use crate::{Error, Result};

pub(crate) const XI_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Segment {
    pub state: usize,
    pub lo: f64,
    pub hi: f64,
}

pub(crate) fn segments(anchors: &[f64], horizon: f64) -> Vec<Segment> {
    let mut out = Vec::new();
    for s in 0..anchors.len() {
        if s + 1 < anchors.len() && anchors[s + 1] <= anchors[s] {
            continue;
        }
        let lo = anchors[s];
        let hi = anchors.get(s + 1).copied().unwrap_or(horizon);
        if hi > lo {
            out.push(Segment { state: s, lo, hi });
        }
    }
    out
}

/// Index of the state driving the intensity at `t`.
pub(crate) fn state_at(anchors: &[f64], t: f64) -> usize {
    anchors.partition_point(|&a| a < t).saturating_sub(1)
}

/// Calls `push(node, weight)` for the interpolant integral over the
/// offsets `[p, q]` of a segment of length `len` with `m` nodes.
fn interp_weights(len: f64, m: usize, p: f64, q: f64, mut push: impl FnMut(usize, f64)) {
    let h = len / (m - 1) as f64;
    for i in 0..m - 1 {
        let x0 = i as f64 * h;
        let x1 = if i == m - 2 { len } else { (i + 1) as f64 * h };
        let lo = p.max(x0);
        let hi = q.min(x1);
        if hi <= lo {
            continue;
        }
        let l0 = (lo - x0) / (x1 - x0);
        let l1 = (hi - x0) / (x1 - x0);
        let w = hi - lo;
        push(i, 0.5 * w * ((1.0 - l0) + (1.0 - l1)));
        push(i + 1, 0.5 * w * (l0 + l1));
    }
}

/// Read-only view over the quantities the intensity depends on.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Driver<'a> {
    pub g: &'a [f64],
    pub anchors: &'a [f64],
    pub alpha: f64,
    pub beta: f64,
    pub nodes: usize,
    pub horizon: f64,
}

impl Driver<'_> {
    pub fn intensity(&self, t: f64) -> Result<f64> {
        if !(t.is_finite() && (0.0..=self.horizon).contains(&t)) {
            return Err(Error::invalid(format!(
                "time {t} outside [0, {}]",
                self.horizon
            )));
        }
        let s = state_at(self.anchors, t);
        Ok(softplus(self.g[s] + self.alpha * (t - self.anchors[s]), self.beta))
    }

    pub fn compensator(&self, a: f64, b: f64) -> Result<f64> {
        if !(a.is_finite() && b.is_finite() && 0.0 <= a && a <= b && b <= self.horizon) {
            return Err(Error::invalid(format!(
                "invalid range [{a}, {b}] for horizon {}",
                self.horizon
            )));
        }
        let m = self.nodes;
        let mut total = 0.0;
        for seg in segments(self.anchors, self.horizon) {
            let p = a.max(seg.lo) - seg.lo;
            let q = b.min(seg.hi) - seg.lo;
            if q <= p {
                continue;
            }
            let len = seg.hi - seg.lo;
            let h = len / (m - 1) as f64;
            let node = |i: usize| {
                let x = if i == m - 1 { len } else { i as f64 * h };
                (x, softplus(self.g[seg.state] + self.alpha * x, self.beta))
            };
            for i in 0..m - 1 {
                let (x0, v0) = node(i);
                let (x1, v1) = node(i + 1);
                let lo = p.max(x0);
                let hi = q.min(x1);
                if hi <= lo {
                    continue;
                }
                let at = |x: f64| v0 + (v1 - v0) * (x - x0) / (x1 - x0);
                total += 0.5 * (hi - lo) * (at(lo) + at(hi));
            }
        }
        Ok(total)
    }
}

/// Sparse linear form over node values.
type Form = Vec<(usize, f64)>;

/// Likelihood structure that does not depend on the weights.
pub(crate) struct Plan {
    /// `(state, offset from anchor)` of every evaluation node.
    nodes: Vec<(usize, f64)>,
    counts: Vec<(f64, Form)>,
    events: Vec<usize>,
    compensator: Form,
    beta: f64,
}

impl Plan {
    /// `events` are event times and `intervals` are `(start, end, count)`.
    pub fn new(
        anchors: &[f64],
        horizon: f64,
        nodes_per_segment: usize,
        beta: f64,
        events: &[f64],
        intervals: &[(f64, f64, u64)],
    ) -> Plan {
        let m = nodes_per_segment;
        let segs = segments(anchors, horizon);
        let mut nodes = Vec::with_capacity(segs.len() * m + events.len());
        for seg in &segs {
            let len = seg.hi - seg.lo;
            let h = len / (m - 1) as f64;
            for i in 0..m {
                let x = if i == m - 1 { len } else { i as f64 * h };
                nodes.push((seg.state, x));
            }
        }
        let range = |a: f64, b: f64| -> Form {
            let mut form = Vec::new();
            for (k, seg) in segs.iter().enumerate() {
                let p = a.max(seg.lo) - seg.lo;
                let q = b.min(seg.hi) - seg.lo;
                if q > p {
                    interp_weights(seg.hi - seg.lo, m, p, q, |i, w| form.push((k * m + i, w)));
                }
            }
            form
        };
        let counts = intervals
            .iter()
            .filter(|&&(_, _, c)| c > 0)
            .map(|&(a, b, c)| (c as f64, range(a, b)))
            .collect();
        let compensator = range(0.0, horizon);
        let mut event_nodes = Vec::with_capacity(events.len());
        for &t in events {
            let s = state_at(anchors, t);
            event_nodes.push(nodes.len());
            nodes.push((s, t - anchors[s]));
        }
        Plan {
            nodes,
            counts,
            events: event_nodes,
            compensator,
            beta,
        }
    }

    fn preactivations(&self, g: &[f64], alpha: f64) -> Vec<f64> {
        self.nodes.iter().map(|&(s, tau)| g[s] + alpha * tau).collect()
    }

    pub fn value(&self, g: &[f64], alpha: f64) -> f64 {
        let v: Vec<f64> = self
            .preactivations(g, alpha)
            .into_iter()
            .map(|z| softplus(z, self.beta))
            .collect();
        let dot = |f: &Form| f.iter().map(|&(i, w)| w * v[i]).sum::<f64>();
        let mut ll = 0.0;
        for (c, form) in &self.counts {
            ll += c * dot(form).max(XI_FLOOR).ln();
        }
        for &i in &self.events {
            ll += v[i].ln();
        }
        ll - dot(&self.compensator)
    }
}

/// Tape operation computing the log-likelihood from `g` (`L × 1`) and
/// `α` (`1 × 1`).
pub(crate) struct LogLikOp(pub(crate) Plan);

impl CustomOp for LogLikOp {
    fn backward(&self, inputs: &[&Mat], _output: &Mat, grad_out: &Mat) -> Vec<Mat> {
        let plan = &self.0;
        let g: Vec<f64> = inputs[0].iter().copied().collect();
        let alpha = inputs[1][[0, 0]];
        let z = plan.preactivations(&g, alpha);
        let v: Vec<f64> = z.iter().map(|&z| softplus(z, plan.beta)).collect();
        let mut dv = vec![0.0; v.len()];
        for (c, form) in &plan.counts {
            let xi: f64 = form.iter().map(|&(i, w)| w * v[i]).sum();
            if xi > XI_FLOOR {
                for &(i, w) in form {
                    dv[i] += c * w / xi;
                }
            }
        }
        for &i in &plan.events {
            dv[i] += 1.0 / v[i];
        }
        for &(i, w) in &plan.compensator {
            dv[i] -= w;
        }
        let go = grad_out[[0, 0]];
        let mut dg = Mat::zeros(inputs[0].raw_dim());
        let mut dalpha = 0.0;
        for (k, &(s, tau)) in plan.nodes.iter().enumerate() {
            let dz = dv[k] * sigmoid(z[k] / plan.beta) * go;
            dg[[s, 0]] += dz;
            dalpha += dz * tau;
        }
        vec![dg, Mat::from_elem((1, 1), dalpha)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn driver<'a>(g: &'a [f64], anchors: &'a [f64], alpha: f64, horizon: f64) -> Driver<'a> {
        Driver {
            g,
            anchors,
            alpha,
            beta: 1.0,
            nodes: 8,
            horizon,
        }
    }

    #[test]
    fn ties_use_the_last_state() {
        let anchors = [0.0, 1.0, 1.0, 3.0];
        let segs = segments(&anchors, 5.0);
        let states: Vec<usize> = segs.iter().map(|s| s.state).collect();
        assert_eq!(states, vec![0, 2, 3]);
        assert_eq!(state_at(&anchors, 1.0), 0);
        assert_eq!(state_at(&anchors, 1.5), 2);
        assert_eq!(state_at(&anchors, 0.0), 0);
    }

    #[test]
    fn constant_intensity_integrates_exactly() {
        let g = [0.3, -0.2];
        let anchors = [0.0, 2.0];
        let d = driver(&g, &anchors, 0.0, 5.0);
        let xi = softplus(-0.2, 1.0);
        assert!((d.compensator(2.5, 4.25).unwrap() - xi * 1.75).abs() < 1e-15);
    }

    #[test]
    fn compensator_is_additive() {
        let g = [0.3, -0.2, 1.1];
        let anchors = [0.0, 1.3, 2.9];
        let d = driver(&g, &anchors, -0.7, 6.0);
        for (a, b, c) in [(0.0, 1.0, 6.0), (0.2, 1.3, 2.95), (1.31, 4.0, 4.5)] {
            let lhs = d.compensator(a, b).unwrap() + d.compensator(b, c).unwrap();
            assert!((lhs - d.compensator(a, c).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn plan_matches_direct_evaluation() {
        let g = [0.3, -0.2, 1.1, 0.4];
        let anchors = [0.0, 1.0, 2.0, 3.5];
        let alpha = 0.4;
        let horizon = 4.0;
        let d = driver(&g, &anchors, alpha, horizon);
        let plan = Plan::new(&anchors, horizon, 8, 1.0, &[1.0, 3.5], &[(1.0, 2.0, 3), (2.0, 3.5, 0)]);
        let direct = 3.0 * d.compensator(1.0, 2.0).unwrap().ln()
            + d.intensity(1.0).unwrap().ln()
            + d.intensity(3.5).unwrap().ln()
            - d.compensator(0.0, horizon).unwrap();
        assert!((plan.value(&g, alpha) - direct).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_queries_fail() {
        let g = [0.0];
        let anchors = [0.0];
        let d = driver(&g, &anchors, 0.0, 1.0);
        assert!(d.intensity(-0.1).is_err());
        assert!(d.intensity(1.5).is_err());
        assert!(d.compensator(0.5, 0.2).is_err());
    }
}
