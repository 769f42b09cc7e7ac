//! Interval-censored transformer Hawkes model.
//!
//! Each record is encoded by a sinusoidal embedding of its start time. For
//! censored intervals the encoding is gated by two sigmoid masks computed
//! from `log d` and `log(c + 1)`. A start token at time 0 is prepended so
//! that the intensity before the first record is defined. The sequence is
//! processed by post-norm transformer blocks whose attention is the causal
//! Linformer variant in [`attention`].
//!
//! The hidden state of the start token is not part of any embedding.

pub mod attention;
mod intensity;
pub mod params;

use std::path::Path;

use ndarray::{s, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus, Mat, Tape, Var};
use crate::cascade::{validate, Cascade, CascadeGroup, CascadeRecord, Violation};
use crate::{json, par, Error, Result};
use attention::LinformerOp;
use intensity::{Driver, LogLikOp, Plan};
pub use params::{tensor_shapes, Bound, ParamStore};

pub type Embedding = Vec<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcthConfig {
    pub d_m: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_layers: usize,
    /// Hidden width of the feed-forward sublayer.
    pub d_ff: usize,
    pub linformer_k: usize,
    /// Softplus temperature.
    pub beta: f64,
    /// Quadrature nodes per inter-record segment.
    pub integ_points: usize,
    /// Longest accepted cascade, in records.
    pub max_seq_len: usize,
}

impl Default for IcthConfig {
    fn default() -> Self {
        IcthConfig {
            d_m: 16,
            n_heads: 2,
            d_k: 8,
            d_v: 8,
            n_layers: 1,
            d_ff: 32,
            linformer_k: 64,
            beta: 1.0,
            integ_points: 8,
            max_seq_len: 512,
        }
    }
}

impl IcthConfig {
    /// Small configuration used for gradient checks.
    pub fn tiny() -> Self {
        IcthConfig {
            d_m: 8,
            n_heads: 1,
            d_k: 4,
            d_v: 4,
            n_layers: 1,
            d_ff: 16,
            linformer_k: 4,
            beta: 1.0,
            integ_points: 8,
            max_seq_len: 16,
        }
    }

    pub fn check(&self) -> Result<()> {
        let positive = [
            ("d_m", self.d_m),
            ("n_heads", self.n_heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("linformer_k", self.linformer_k),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if self.d_m % 2 != 0 {
            return Err(Error::invalid(format!("d_m must be even, got {}", self.d_m)));
        }
        if self.linformer_k > self.max_seq_len {
            return Err(Error::invalid(format!(
                "linformer_k {} exceeds max_seq_len {}",
                self.linformer_k, self.max_seq_len
            )));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::invalid(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.integ_points < 2 {
            return Err(Error::invalid("integ_points must be at least 2"));
        }
        Ok(())
    }

    /// Attention positions: the start token plus `max_seq_len` records.
    pub fn positions(&self) -> usize {
        self.max_seq_len + 1
    }
}

/// Sinusoidal encoding of a time stamp.
pub fn encode_time(t: f64, d_m: usize) -> Vec<f64> {
    (0..d_m)
        .map(|k| {
            if k % 2 == 0 {
                (t / 1000f64.powf(k as f64 / d_m as f64)).cos()
            } else {
                (t / 1000f64.powf((k + 1) as f64 / d_m as f64)).sin()
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Row {
    time: f64,
    censored: Option<(f64, u64)>,
}

impl From<&CascadeRecord> for Row {
    fn from(r: &CascadeRecord) -> Self {
        match *r {
            CascadeRecord::Event { time } => Row { time, censored: None },
            CascadeRecord::Censored {
                start,
                duration,
                count,
            } => Row {
                time: start,
                censored: Some((duration, count)),
            },
        }
    }
}

const START: Row = Row {
    time: 0.0,
    censored: None,
};

/// Tape handles of one forward pass.
pub struct Graph {
    /// Hidden states including the start token, `(n + 1) × d_m`.
    pub hidden: Var,
    /// Intensity pre-activations `H w`, `(n + 1) × 1`.
    pub preact: Var,
    pub alpha: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcthModel {
    pub config: IcthConfig,
    pub params: ParamStore,
    /// Task heads stored alongside the backbone in checkpoints.
    pub extras: ParamStore,
}

impl IcthModel {
    /// Randomly initialised model.
    pub fn new(config: IcthConfig, seed: u64) -> Result<Self> {
        config.check()?;
        let mut rng = crate::rng::seeded(seed);
        let params = params::initial(&config, &mut rng);
        Ok(IcthModel {
            config,
            params,
            extras: ParamStore::new(),
        })
    }

    /// Model with every weight set to zero.
    pub fn zeros(config: IcthConfig) -> Result<Self> {
        config.check()?;
        let params = params::zeros(&config);
        Ok(IcthModel {
            config,
            params,
            extras: ParamStore::new(),
        })
    }

    pub fn to_checkpoint(&self) -> Result<String> {
        params::encode(&self.config, &self.params, &self.extras)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let (config, params, extras) = params::decode(text)?;
        Ok(IcthModel {
            config,
            params,
            extras,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_checkpoint()?;
        text.push('\n');
        json::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, params, extras) = params::read(path)?;
        Ok(IcthModel {
            config,
            params,
            extras,
        })
    }

    fn check_sequence(&self, cascade: &Cascade) -> Result<()> {
        if cascade.records.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: cascade.records.len(),
                max: self.config.max_seq_len,
            });
        }
        let bad: Vec<String> = validate(cascade)
            .into_iter()
            .filter(|v| !matches!(v, Violation::UntiledGap { .. }))
            .map(|v| v.to_string())
            .collect();
        if !bad.is_empty() {
            return Err(Error::InvalidCascade {
                id: cascade.id.clone(),
                reason: bad.join("; "),
            });
        }
        Ok(())
    }

    fn inputs(&self, tape: &mut Tape, b: &Bound, rows: &[Row]) -> Var {
        let d = self.config.d_m;
        let n = rows.len();
        let mut enc = Mat::zeros((n, d));
        for (i, r) in rows.iter().enumerate() {
            for (k, v) in encode_time(r.time, d).into_iter().enumerate() {
                enc[[i, k]] = v;
            }
        }
        let x0 = tape.constant(enc);
        if rows.iter().all(|r| r.censored.is_none()) {
            return x0;
        }
        let mut sel = Mat::zeros((n, d));
        let mut log_d = Mat::zeros((n, 1));
        let mut log_c = Mat::zeros((n, 1));
        for (i, r) in rows.iter().enumerate() {
            if let Some((dur, count)) = r.censored {
                sel.row_mut(i).fill(1.0);
                log_d[[i, 0]] = dur.ln();
                log_c[[i, 0]] = (count as f64).ln_1p();
            }
        }
        let keep = tape.constant(sel.mapv(|s| 1.0 - s));
        let sel = tape.constant(sel);
        let mut x = x0;
        for (kind, u) in [("duration", log_d), ("count", log_c)] {
            let u = tape.constant(u);
            let cw = b.var(&format!("mask.{kind}.context_w"));
            let cb = b.var(&format!("mask.{kind}.context_b"));
            let w = b.var(&format!("mask.{kind}.w"));
            let bias = b.var(&format!("mask.{kind}.b"));
            let ctx = tape.matmul(u, cw);
            let ctx = tape.add_row(ctx, cb);
            let ctx = tape.tanh(ctx);
            let m = tape.matmul(ctx, w);
            let m = tape.add_row(m, bias);
            let m = tape.sigmoid(m);
            let m = tape.mul(sel, m);
            let m = tape.add(m, keep);
            x = tape.mul(x, m);
        }
        x
    }

    fn block(&self, tape: &mut Tape, b: &Bound, l: usize, x: Var) -> Var {
        let c = &self.config;
        let e = b.var(&format!("layers.{l}.proj_e"));
        let f = b.var(&format!("layers.{l}.proj_f"));
        let mut heads = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            let q = tape.matmul(x, b.var(&format!("layers.{l}.heads.{h}.w_q")));
            let k = tape.matmul(x, b.var(&format!("layers.{l}.heads.{h}.w_k")));
            let v = tape.matmul(x, b.var(&format!("layers.{l}.heads.{h}.w_v")));
            let (out, cache) = attention::forward(
                tape.value(q),
                tape.value(k),
                tape.value(v),
                tape.value(e),
                tape.value(f),
            );
            heads.push(tape.custom(&[q, k, v, e, f], out, Box::new(LinformerOp(cache))));
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        let o = tape.matmul(cat, b.var(&format!("layers.{l}.w_o")));
        let r = tape.add(x, o);
        let x1 = tape.layer_norm(
            r,
            b.var(&format!("layers.{l}.norm1.gain")),
            b.var(&format!("layers.{l}.norm1.bias")),
        );
        let h = tape.matmul(x1, b.var(&format!("layers.{l}.ffn.w1")));
        let h = tape.add_row(h, b.var(&format!("layers.{l}.ffn.b1")));
        let h = tape.relu(h);
        let h = tape.matmul(h, b.var(&format!("layers.{l}.ffn.w2")));
        let h = tape.add_row(h, b.var(&format!("layers.{l}.ffn.b2")));
        let r = tape.add(x1, h);
        tape.layer_norm(
            r,
            b.var(&format!("layers.{l}.norm2.gain")),
            b.var(&format!("layers.{l}.norm2.bias")),
        )
    }

    /// Records the forward pass of `cascade` on `tape`.
    pub fn graph(&self, tape: &mut Tape, b: &Bound, cascade: &Cascade) -> Result<Graph> {
        self.check_sequence(cascade)?;
        let rows: Vec<Row> = std::iter::once(START)
            .chain(cascade.records.iter().map(Row::from))
            .collect();
        let mut x = self.inputs(tape, b, &rows);
        for l in 0..self.config.n_layers {
            x = self.block(tape, b, l, x);
        }
        let preact = tape.matmul(x, b.var("intensity.w"));
        Ok(Graph {
            hidden: x,
            preact,
            alpha: b.var("intensity.alpha"),
        })
    }

    /// Masked input vector of a single record.
    pub fn encode_record(&self, record: &CascadeRecord) -> Result<Vec<f64>> {
        if let Err(reason) = record.check_values() {
            return Err(Error::invalid(reason));
        }
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let x = self.inputs(&mut tape, &b, &[Row::from(record)]);
        Ok(tape.value(x).row(0).to_vec())
    }

    pub fn forward(&self, cascade: &Cascade) -> Result<ForwardPass> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let g = self.graph(&mut tape, &b, cascade)?;
        Ok(ForwardPass {
            hidden: tape.value(g.hidden).clone(),
            preact: tape.value(g.preact).iter().copied().collect(),
            anchors: anchors(cascade),
            alpha: tape.scalar(g.alpha),
            beta: self.config.beta,
            nodes: self.config.integ_points,
            horizon: cascade.horizon,
        })
    }

    /// Records the log-likelihood of `cascade` on `tape`.
    pub fn loglik_graph(&self, tape: &mut Tape, b: &Bound, cascade: &Cascade) -> Result<Var> {
        check_loglik_input(cascade)?;
        let g = self.graph(tape, b, cascade)?;
        let mut events = Vec::new();
        let mut intervals = Vec::new();
        for r in &cascade.records {
            match *r {
                CascadeRecord::Event { time } => events.push(time),
                CascadeRecord::Censored { start, count, .. } => {
                    intervals.push((start, r.end(), count))
                }
            }
        }
        let plan = Plan::new(
            &anchors(cascade),
            cascade.horizon,
            self.config.integ_points,
            self.config.beta,
            &events,
            &intervals,
        );
        let gv: Vec<f64> = tape.value(g.preact).iter().copied().collect();
        let value = plan.value(&gv, tape.scalar(g.alpha));
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("log-likelihood of `{}`", cascade.id)));
        }
        Ok(tape.custom(
            &[g.preact, g.alpha],
            Mat::from_elem((1, 1), value),
            Box::new(LogLikOp(plan)),
        ))
    }

    /// Mean hidden state over the records, `1 × d_m`, on `tape`.
    pub fn embedding_graph(&self, tape: &mut Tape, b: &Bound, cascade: &Cascade) -> Result<Var> {
        if cascade.records.is_empty() {
            return Err(Error::InvalidCascade {
                id: cascade.id.clone(),
                reason: "cannot embed an empty cascade".into(),
            });
        }
        let g = self.graph(tape, b, cascade)?;
        let rows = tape.slice_rows(g.hidden, 1, cascade.records.len() + 1);
        Ok(tape.mean_rows(rows))
    }
}

fn anchors(cascade: &Cascade) -> Vec<f64> {
    std::iter::once(0.0)
        .chain(cascade.records.iter().map(CascadeRecord::end))
        .collect()
}

fn check_loglik_input(cascade: &Cascade) -> Result<()> {
    let violations = validate(cascade);
    let event_only = !cascade.has_intervals()
        && violations
            .iter()
            .all(|v| matches!(v, Violation::UntiledGap { .. }));
    if violations.is_empty() || event_only {
        Ok(())
    } else {
        Err(Error::InvalidCascade {
            id: cascade.id.clone(),
            reason: format!(
                "log-likelihood needs a tiled or event-only cascade: {}",
                violations
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("; ")
            ),
        })
    }
}

/// Values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    hidden: Mat,
    preact: Vec<f64>,
    anchors: Vec<f64>,
    alpha: f64,
    beta: f64,
    nodes: usize,
    horizon: f64,
}

impl ForwardPass {
    fn driver(&self) -> Driver<'_> {
        Driver {
            g: &self.preact,
            anchors: &self.anchors,
            alpha: self.alpha,
            beta: self.beta,
            nodes: self.nodes,
            horizon: self.horizon,
        }
    }

    pub fn len(&self) -> usize {
        self.hidden.nrows() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Hidden states of the records (start token excluded).
    pub fn hidden(&self) -> ArrayView2<'_, f64> {
        self.hidden.slice(s![1.., ..])
    }

    /// Hidden state of the start token.
    pub fn start_hidden(&self) -> ArrayView1<'_, f64> {
        self.hidden.row(0)
    }

    /// `softplus_β(wᵀ h_j)` for record `j`.
    pub fn record_intensity(&self, j: usize) -> f64 {
        softplus(self.preact[j + 1], self.beta)
    }

    pub fn intensity(&self, t: f64) -> Result<f64> {
        self.driver().intensity(t)
    }

    pub fn compensator(&self, a: f64, b: f64) -> Result<f64> {
        self.driver().compensator(a, b)
    }

    pub fn embedding(&self) -> Result<Embedding> {
        if self.is_empty() {
            return Err(Error::invalid("cannot embed an empty cascade"));
        }
        Ok(self
            .hidden()
            .mean_axis(Axis(0))
            .expect("non-empty")
            .to_vec())
    }
}

/// Intensity at `t ∈ [0, T]`.
pub fn intensity_between(model: &IcthModel, cascade: &Cascade, t: f64) -> Result<f64> {
    model.forward(cascade)?.intensity(t)
}

/// Integrated intensity over `[a, b] ⊆ [0, T]`.
pub fn compensator(model: &IcthModel, cascade: &Cascade, a: f64, b: f64) -> Result<f64> {
    model.forward(cascade)?.compensator(a, b)
}

/// Log-likelihood of a tiled or event-only cascade.
pub fn icth_loglik(model: &IcthModel, cascade: &Cascade) -> Result<f64> {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, false);
    let v = model.loglik_graph(&mut tape, &b, cascade)?;
    Ok(tape.scalar(v))
}

/// Event-time log-likelihood `Σ log ξ(t_i) − Ξ(0, T)` evaluated pointwise,
/// without the likelihood plan. Only defined for event-only cascades.
pub fn event_only_loglik(model: &IcthModel, cascade: &Cascade) -> Result<f64> {
    if cascade.has_intervals() {
        return Err(Error::InvalidCascade {
            id: cascade.id.clone(),
            reason: "expected an event-only cascade".into(),
        });
    }
    let fp = model.forward(cascade)?;
    let mut ll = 0.0;
    for t in cascade.event_times() {
        ll += fp.intensity(t)?.ln();
    }
    Ok(ll - fp.compensator(0.0, cascade.horizon)?)
}

pub fn cascade_embedding(model: &IcthModel, cascade: &Cascade) -> Result<Embedding> {
    if cascade.records.is_empty() {
        return Err(Error::InvalidCascade {
            id: cascade.id.clone(),
            reason: "cannot embed an empty cascade".into(),
        });
    }
    model.forward(cascade)?.embedding()
}

/// Mean of the cascade embeddings of `cascades`.
pub fn mean_embedding(model: &IcthModel, cascades: &[Cascade]) -> Result<Embedding> {
    if cascades.is_empty() {
        return Err(Error::invalid("cannot embed an empty group"));
    }
    let parts = par::map(cascades, |c| cascade_embedding(model, c));
    let mut acc = vec![0.0; model.config.d_m];
    for p in parts {
        for (a, x) in acc.iter_mut().zip(p?) {
            *a += x;
        }
    }
    let n = cascades.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

pub fn group_embedding(model: &IcthModel, group: &CascadeGroup) -> Result<Embedding> {
    mean_embedding(model, &group.cascades)
}

#[cfg(test)]
mod tests;
