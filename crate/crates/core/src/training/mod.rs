//! Contrastive pre-training, task heads and gradient verification.

mod contrastive;
mod gradcheck;
mod heads;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape};
use crate::cascade::{Cascade, CascadeGroup};
use crate::neural::{cascade_embedding, IcthModel, ParamStore};
use crate::{par, rng, Result};

pub use contrastive::{
    contrastive_loss, ntxent_loss, pretrain, ContrastiveConfig, PretrainReport,
};
pub use gradcheck::{grad_check, tiny_model, GradCheckReport, GradCheckTarget, RELATIVE_FLOOR};
pub use heads::{
    finetune_classify, finetune_popularity, macro_f1, ClassifyReport, HeadConfig, HeadTask,
    PopularityReport,
};

/// Per-epoch training metrics, written as one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub val_metric: f64,
}

/// Random split of one group into two halves, as indices into its cascades.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPair {
    pub group: usize,
    pub first: Vec<usize>,
    pub second: Vec<usize>,
}

/// Splits every group with at least two cascades into two halves whose
/// sizes differ by at most one. Smaller groups are skipped with a warning.
pub fn make_pairs(groups: &[CascadeGroup], seed: u64) -> Vec<GroupPair> {
    let mut out = Vec::with_capacity(groups.len());
    for (gi, g) in groups.iter().enumerate() {
        let n = g.cascades.len();
        if n < 2 {
            log::warn!("group `{}` has {n} cascade(s); excluded from pairing", g.group_id);
            continue;
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(seed, gi as u64));
        let second = idx.split_off(n.div_ceil(2));
        out.push(GroupPair {
            group: gi,
            first: idx,
            second,
        });
    }
    out
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: ParamStore,
    v: ParamStore,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &ParamStore) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment for every tensor");
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = self.v.get_mut(name).expect("moment for every tensor");
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let m = self.m.get(name).expect("moment");
            let v = self.v.get(name).expect("moment");
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= self.learning_rate * (m / c1) / ((v / c2).sqrt() + self.eps);
            });
        }
    }
}

/// Scales every gradient so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [&mut ParamStore], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter().map(|(_, m)| m.iter().map(|x| x * x).sum::<f64>()))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            for (_, m) in g.iter_mut() {
                *m *= k;
            }
        }
    }
    norm
}

pub(crate) fn add_into(acc: &mut ParamStore, g: &ParamStore) {
    for (name, m) in acc.iter_mut() {
        if let Some(x) = g.get(name) {
            *m += x;
        }
    }
}

/// One cascade contributing to the mean embedding of set `set`.
pub(crate) struct SetItem<'a> {
    pub cascade: &'a Cascade,
    pub set: usize,
    pub weight: f64,
}

pub(crate) fn set_items<'a>(sets: &[Vec<&'a Cascade>]) -> Vec<SetItem<'a>> {
    let mut out = Vec::new();
    for (s, cs) in sets.iter().enumerate() {
        for c in cs {
            out.push(SetItem {
                cascade: c,
                set: s,
                weight: 1.0 / cs.len() as f64,
            });
        }
    }
    out
}

/// Mean cascade embedding of every set, one row per set.
pub(crate) fn embed_sets(model: &IcthModel, items: &[SetItem], n_sets: usize) -> Result<Mat> {
    let embeddings = par::map(items, |it| cascade_embedding(model, it.cascade));
    let mut out = Mat::zeros((n_sets, model.config.d_m));
    for (it, e) in items.iter().zip(embeddings) {
        let e = e?;
        out.row_mut(it.set)
            .scaled_add(it.weight, &ndarray::ArrayView1::from(&e));
    }
    Ok(out)
}

const CHUNK: usize = 8;

/// Backbone gradient of `Σ_s upstream[s] · embedding_s − w Σ_i loglik_i`,
/// plus the summed log-likelihood when `w > 0`. Reduction order is fixed.
pub(crate) fn backprop_sets(
    model: &IcthModel,
    items: &[SetItem],
    upstream: &Mat,
    loglik_weight: f64,
) -> Result<(ParamStore, f64)> {
    let chunks: Vec<&[SetItem]> = items.chunks(CHUNK).collect();
    let partial = par::map(&chunks, |chunk| -> Result<(ParamStore, f64)> {
        let mut acc = model.params.zeros_like();
        let mut ll_sum = 0.0;
        for it in chunk.iter() {
            let mut t = Tape::new();
            let b = model.params.bind(&mut t, true);
            let e = model.embedding_graph(&mut t, &b, it.cascade)?;
            let up = upstream.row(it.set).mapv(|x| x * it.weight);
            let up = t.constant(row(up.as_slice().expect("contiguous")));
            let s = t.mul(e, up);
            let mut obj = t.sum_all(s);
            if loglik_weight > 0.0 {
                let ll = model.loglik_graph(&mut t, &b, it.cascade)?;
                ll_sum += t.scalar(ll);
                let scaled = t.scale(ll, -loglik_weight);
                obj = t.add(obj, scaled);
            }
            add_into(&mut acc, &b.gradients(&t.backward(obj), &model.params));
        }
        Ok((acc, ll_sum))
    });
    let mut grads = model.params.zeros_like();
    let mut ll = 0.0;
    for p in partial {
        let (g, l) = p?;
        add_into(&mut grads, &g);
        ll += l;
    }
    Ok((grads, ll))
}

pub(crate) fn row(v: &[f64]) -> Mat {
    Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

#[cfg(test)]
mod tests;
