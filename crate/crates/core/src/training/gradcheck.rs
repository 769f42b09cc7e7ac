//! Finite-difference verification of every trained loss.
//!
//! The relative error of one scalar is `|a − n| / max(|a|, |n|, 1e-3)`
//! where `a` is the analytic and `n` the central-difference gradient; the
//! floor keeps the ratio defined where both vanish.

use serde::{Deserialize, Serialize};

use super::contrastive::{batch, projection_head, ContrastiveConfig};
use super::heads::{cross_entropy, head_store, linear_head};
use super::{backprop_sets, embed_sets, make_pairs, set_items, GroupPair};
use crate::autograd::{Mat, Tape};
use crate::cascade::{downsample, Cascade, CascadeGroup};
use crate::neural::{icth_loglik, IcthConfig, IcthModel, ParamStore};
use crate::{rng, Error, Result};
use rand::Rng as _;

pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradCheckTarget {
    Loglik,
    Ntxent,
    Classifier,
    Popularity,
}

impl GradCheckTarget {
    pub const ALL: [GradCheckTarget; 4] = [
        GradCheckTarget::Loglik,
        GradCheckTarget::Ntxent,
        GradCheckTarget::Classifier,
        GradCheckTarget::Popularity,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub target: GradCheckTarget,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_tensor: String,
    pub values_checked: usize,
}

/// Small random canonical cascade with both events and counted intervals.
pub(crate) fn tiny_cascade(id: &str, seed: u64, n: usize) -> Cascade {
    let mut r = rng::seeded(seed);
    let mut t: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..5.0)).collect();
    t.sort_by(f64::total_cmp);
    let c = Cascade::from_event_times(id, 5.0, &t).expect("valid times");
    let mut d = downsample(&c.tiled(), 0.6, seed).expect("canonical input");
    // Keep the sequence short enough for the tiny configuration.
    while d.records.len() > 8 {
        d = downsample(&d, 0.9, seed.wrapping_add(d.records.len() as u64)).expect("canonical");
    }
    d
}

/// Model and fixtures of the default gradient check.
pub fn tiny_model(seed: u64) -> IcthModel {
    let mut m = IcthModel::new(IcthConfig::tiny(), seed).expect("tiny config is valid");
    m.params.get_mut("intensity.alpha").expect("alpha")[[0, 0]] = -0.2;
    m
}

type LossFn<'a> = dyn Fn(&IcthModel, &ParamStore) -> Result<f64> + 'a;

fn compare(
    target: GradCheckTarget,
    model: &IcthModel,
    head: &ParamStore,
    analytic: (&ParamStore, &ParamStore),
    loss: &LossFn,
    step: f64,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        target,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_tensor: String::new(),
        values_checked: 0,
    };
    for (in_head, grads) in [(false, analytic.0), (true, analytic.1)] {
        for (name, g) in grads.iter() {
            for idx in 0..g.len() {
                let eval = |delta: f64| -> Result<f64> {
                    let mut m = model.clone();
                    let mut h = head.clone();
                    let store = if in_head { &mut h } else { &mut m.params };
                    store.get_mut(name).expect("tensor").as_slice_mut().expect("contiguous")[idx] +=
                        delta;
                    loss(&m, &h)
                };
                let num = (eval(step)? - eval(-step)?) / (2.0 * step);
                let a = g.as_slice().expect("contiguous")[idx];
                let abs = (a - num).abs();
                let rel = abs / a.abs().max(num.abs()).max(RELATIVE_FLOOR);
                if !rel.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of `{name}`")));
                }
                report.values_checked += 1;
                report.max_abs_error = report.max_abs_error.max(abs);
                if rel > report.max_rel_error || report.worst_tensor.is_empty() {
                    report.max_rel_error = rel.max(report.max_rel_error);
                    report.worst_tensor = name.clone();
                }
            }
        }
    }
    Ok(report)
}

fn tiny_groups(seed: u64) -> Vec<CascadeGroup> {
    (0..4)
        .map(|g| {
            let cascades = (0..2)
                .map(|i| tiny_cascade(&format!("g{g}c{i}"), seed * 100 + (g * 2 + i) as u64, 4 + g + i))
                .collect();
            CascadeGroup::new(format!("g{g}"), Some(format!("class{}", g % 2)), cascades)
        })
        .collect()
}

/// Compares analytic gradients of the selected loss with central finite
/// differences of step `step` for every weight it depends on.
pub fn grad_check(
    model: &IcthModel,
    target: GradCheckTarget,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid("finite-difference step must be > 0"));
    }
    match target {
        GradCheckTarget::Loglik => {
            let c = tiny_cascade("check", seed, 6);
            let mut t = Tape::new();
            let b = model.params.bind(&mut t, true);
            let ll = model.loglik_graph(&mut t, &b, &c)?;
            let g = b.gradients(&t.backward(ll), &model.params);
            let empty = ParamStore::new();
            compare(target, model, &empty, (&g, &empty), &|m, _| icth_loglik(m, &c), step)
        }
        GradCheckTarget::Ntxent => {
            let groups = tiny_groups(seed);
            let pairs: Vec<GroupPair> = make_pairs(&groups[..2], seed);
            let refs: Vec<&GroupPair> = pairs.iter().collect();
            let cfg = ContrastiveConfig {
                loglik_weight: 0.1,
                seed,
                ..ContrastiveConfig::default()
            };
            let head = projection_head(model, &cfg);
            let r = batch(model, &head, &groups, &refs, &cfg, true)?;
            compare(
                target,
                model,
                &head,
                (&r.backbone, &r.head),
                &|m, h| Ok(batch(m, h, &groups, &refs, &cfg, false)?.loss),
                step,
            )
        }
        GradCheckTarget::Classifier | GradCheckTarget::Popularity => {
            let groups = tiny_groups(seed);
            let sets: Vec<Vec<&Cascade>> = groups.iter().map(|g| g.cascades.iter().collect()).collect();
            let items = set_items(&sets);
            let (prefix, out) = if target == GradCheckTarget::Classifier {
                ("classifier", 2)
            } else {
                ("popularity", 1)
            };
            let mut r = rng::stream(seed, 77);
            let emb = embed_sets(model, &items, groups.len())?;
            let mut head = head_store(
                prefix,
                (0..model.config.d_m).map(|_| r.gen_range(-0.1..0.1)).collect(),
                (0..model.config.d_m).map(|_| r.gen_range(0.5..1.5)).collect(),
                out,
            );
            for name in [format!("{prefix}.w"), format!("{prefix}.b")] {
                head.get_mut(&name)
                    .expect("head tensor")
                    .mapv_inplace(|_| r.gen_range(-1.0..1.0));
            }
            let labels = [0usize, 1, 0, 1];
            let targets = Mat::from_shape_vec((4, 1), vec![0.5, 2.0, 1.0, 3.5]).expect("column");
            let objective = |t: &mut Tape, x, h: &ParamStore, trainable: bool| {
                let b = h.bind(t, trainable);
                let y = linear_head(t, x, &b, prefix);
                let loss = if prefix == "classifier" {
                    cross_entropy(t, y, &labels)
                } else {
                    let c = t.constant(targets.clone());
                    let d = t.sub(y, c);
                    let sq = t.mul(d, d);
                    let s = t.sum_all(sq);
                    t.scale(s, 0.25)
                };
                (loss, b)
            };
            let mut t = Tape::new();
            let x = t.param(emb.clone());
            let (loss, b) = objective(&mut t, x, &head, true);
            let g = t.backward(loss);
            let mut hg = b.gradients(&g, &head);
            // Normalisation statistics are fixed, not trained.
            hg = super::heads::trainable(prefix, &hg);
            let (bg, _) = backprop_sets(model, &items, &g.get_or_zeros(x, &emb), 0.0)?;
            let loss_fn = |m: &IcthModel, h: &ParamStore| -> Result<f64> {
                let e = embed_sets(m, &items, groups.len())?;
                let mut t = Tape::new();
                let x = t.constant(e);
                let (l, _) = objective(&mut t, x, h, false);
                Ok(t.scalar(l))
            };
            compare(target, model, &head, (&bg, &hg), &loss_fn, step)
        }
    }
}
