//! NT-Xent contrastive pre-training over group halves.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    backprop_sets, clip_gradients, embed_sets, make_pairs, set_items, Adam, EpochMetrics,
    GroupPair,
};
use crate::autograd::{CustomOp, Mat, Tape};
use crate::cascade::{Cascade, CascadeGroup};
use crate::neural::{icth_loglik, params::normal_tensor, IcthModel, ParamStore};
use crate::{par, rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// Groups per optimisation step.
    pub batch_groups: usize,
    /// Output width of the projection head; `d_m / 2` when unset.
    pub projection_dim: Option<usize>,
    /// Hidden width of the projection head; `d_m` when unset.
    pub projection_hidden: Option<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    /// Weight of the mean negative log-likelihood added to the loss.
    pub loglik_weight: f64,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.5,
            batch_groups: 8,
            projection_dim: None,
            projection_hidden: None,
            epochs: 20,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            loglik_weight: 0.0,
            seed: 0,
        }
    }
}

impl ContrastiveConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be > 0"));
        }
        if self.batch_groups < 2 {
            return Err(Error::invalid("batch_groups must be at least 2"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate must be >= 0"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip_norm must be > 0"));
        }
        if !(self.loglik_weight.is_finite() && self.loglik_weight >= 0.0) {
            return Err(Error::invalid("loglik_weight must be >= 0"));
        }
        if self.projection_dim == Some(0) || self.projection_hidden == Some(0) {
            return Err(Error::invalid("projection widths must be positive"));
        }
        Ok(())
    }
}

struct NtXentCache {
    unit: Mat,
    norms: Vec<f64>,
    probs: Mat,
}

/// Mean NT-Xent loss over the rows of `z`, where rows `2i` and `2i + 1`
/// are the two views of item `i`.
fn ntxent_forward(z: &Mat, tau: f64) -> Result<(f64, NtXentCache)> {
    let n = z.nrows();
    if n < 2 || n % 2 != 0 {
        return Err(Error::invalid(format!("need an even number (>= 2) of views, got {n}")));
    }
    let mut unit = z.clone();
    let mut norms = Vec::with_capacity(n);
    for mut r in unit.rows_mut() {
        let norm = r.dot(&r).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::invalid("zero-norm or non-finite embedding in contrastive loss"));
        }
        r /= norm;
        norms.push(norm);
    }
    let sim = unit.dot(&unit.t()) / tau;
    let mut probs = Mat::zeros((n, n));
    let mut loss = 0.0;
    for a in 0..n {
        let max = (0..n)
            .filter(|&b| b != a)
            .map(|b| sim[[a, b]])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for b in (0..n).filter(|&b| b != a) {
            let e = (sim[[a, b]] - max).exp();
            probs[[a, b]] = e;
            z += e;
        }
        probs.row_mut(a).mapv_inplace(|p| p / z);
        loss += -sim[[a, a ^ 1]] + max + z.ln();
    }
    Ok((loss / n as f64, NtXentCache { unit, norms, probs }))
}

struct NtXentOp {
    tau: f64,
    cache: NtXentCache,
}

impl CustomOp for NtXentOp {
    fn backward(&self, inputs: &[&Mat], _output: &Mat, grad_out: &Mat) -> Vec<Mat> {
        let c = &self.cache;
        let n = inputs[0].nrows();
        let mut g = c.probs.clone();
        for a in 0..n {
            g[[a, a ^ 1]] -= 1.0;
        }
        g *= grad_out[[0, 0]] / n as f64;
        let sym = &g + &g.t();
        let du = sym.dot(&c.unit) / self.tau;
        let mut dz = Mat::zeros(inputs[0].raw_dim());
        for a in 0..n {
            let u = c.unit.row(a);
            let d = du.row(a);
            let proj = u.dot(&d);
            let mut out = dz.row_mut(a);
            out.assign(&d);
            out.scaled_add(-proj, &u);
            out /= c.norms[a];
        }
        vec![dz]
    }
}

/// NT-Xent loss of `(view_1, view_2)` embedding pairs at temperature `tau`.
/// Each anchor's denominator runs over every other view in the batch.
pub fn ntxent_loss(views: &[(Vec<f64>, Vec<f64>)], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be > 0"));
    }
    let d = views.first().map_or(0, |v| v.0.len());
    let mut z = Mat::zeros((2 * views.len(), d));
    for (i, (a, b)) in views.iter().enumerate() {
        if a.len() != d || b.len() != d {
            return Err(Error::invalid("embeddings must share one dimension"));
        }
        z.row_mut(2 * i).assign(&ndarray::ArrayView1::from(a));
        z.row_mut(2 * i + 1).assign(&ndarray::ArrayView1::from(b));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("contrastive embedding".into()));
    }
    Ok(ntxent_forward(&z, tau)?.0)
}

const PROJECTION: [&str; 4] = ["projection.w1", "projection.b1", "projection.w2", "projection.b2"];

pub(crate) fn projection_shapes(model: &IcthModel, cfg: &ContrastiveConfig) -> [(usize, usize); 4] {
    let d = model.config.d_m;
    let h = cfg.projection_hidden.unwrap_or(d);
    let p = cfg.projection_dim.unwrap_or((d / 2).max(1));
    [(d, h), (1, h), (h, p), (1, p)]
}

/// Projection head parameters taken from `model.extras`, freshly
/// initialised when absent or shaped differently.
pub(crate) fn projection_head(model: &IcthModel, cfg: &ContrastiveConfig) -> ParamStore {
    let shapes = projection_shapes(model, cfg);
    let present = PROJECTION
        .iter()
        .zip(shapes)
        .all(|(name, s)| model.extras.get(name).is_some_and(|m| m.dim() == s));
    let mut head = ParamStore::new();
    if present {
        for name in PROJECTION {
            head.insert(name, model.extras.tensor(name).clone());
        }
        return head;
    }
    let mut rng = rng::stream(cfg.seed, 0x5052_4f4a);
    for (name, s) in PROJECTION.iter().zip(shapes) {
        let m = if s.0 == 1 {
            Mat::zeros(s)
        } else {
            normal_tensor(&mut rng, s, 1.0 / (s.0 as f64).sqrt())
        };
        head.insert(*name, m);
    }
    head
}

pub(crate) struct BatchResult {
    pub loss: f64,
    pub backbone: ParamStore,
    pub head: ParamStore,
}

fn half_sets<'a>(groups: &'a [CascadeGroup], batch: &[&GroupPair]) -> Vec<Vec<&'a Cascade>> {
    let mut out = Vec::with_capacity(2 * batch.len());
    for p in batch {
        let g = &groups[p.group];
        out.push(p.first.iter().map(|&i| &g.cascades[i]).collect());
        out.push(p.second.iter().map(|&i| &g.cascades[i]).collect());
    }
    out
}

/// Loss of one batch of pairs and, when `grads` is set, its gradients.
pub(crate) fn batch(
    model: &IcthModel,
    head: &ParamStore,
    groups: &[CascadeGroup],
    batch: &[&GroupPair],
    cfg: &ContrastiveConfig,
    grads: bool,
) -> Result<BatchResult> {
    let sets = half_sets(groups, batch);
    let items = set_items(&sets);
    let halves = embed_sets(model, &items, sets.len())?;

    let mut tape = Tape::new();
    let hv = if grads {
        tape.param(halves.clone())
    } else {
        tape.constant(halves.clone())
    };
    let b = head.bind(&mut tape, grads);
    let x = tape.matmul(hv, b.var(PROJECTION[0]));
    let x = tape.add_row(x, b.var(PROJECTION[1]));
    let x = tape.relu(x);
    let x = tape.matmul(x, b.var(PROJECTION[2]));
    let z = tape.add_row(x, b.var(PROJECTION[3]));
    let (value, cache) = ntxent_forward(tape.value(z), cfg.temperature)?;
    let loss = tape.custom(
        &[z],
        Mat::from_elem((1, 1), value),
        Box::new(NtXentOp {
            tau: cfg.temperature,
            cache,
        }),
    );

    let lw = cfg.loglik_weight / items.len() as f64;
    if !grads {
        let mut total = value;
        if cfg.loglik_weight > 0.0 {
            let lls = par::map(&items, |it| icth_loglik(model, it.cascade));
            for ll in lls {
                total -= lw * ll?;
            }
        }
        return Ok(BatchResult {
            loss: total,
            backbone: ParamStore::new(),
            head: ParamStore::new(),
        });
    }

    let g = tape.backward(loss);
    let head_grads = b.gradients(&g, head);
    let upstream = g.get_or_zeros(hv, &halves);
    let (backbone, ll) = backprop_sets(model, &items, &upstream, lw)?;
    Ok(BatchResult {
        loss: value - lw * ll,
        backbone,
        head: head_grads,
    })
}

fn batches<'a>(pairs: &'a [GroupPair], size: usize) -> Vec<Vec<&'a GroupPair>> {
    let mut out: Vec<Vec<&GroupPair>> = pairs.chunks(size).map(|c| c.iter().collect()).collect();
    // A trailing batch of one pair has no negatives; fold it into the previous one.
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

/// Mean contrastive loss over `pairs` in fixed batches, without gradients.
pub fn contrastive_loss(
    model: &IcthModel,
    groups: &[CascadeGroup],
    pairs: &[GroupPair],
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    cfg.check()?;
    let head = projection_head(model, cfg);
    let bs = batches(pairs, cfg.batch_groups);
    if bs.is_empty() || bs[0].len() < 2 {
        return Err(Error::invalid("contrastive loss needs at least two groups"));
    }
    let mut total = 0.0;
    for b in &bs {
        total += batch(model, &head, groups, b, cfg, false)?.loss;
    }
    Ok(total / bs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub metrics: Vec<EpochMetrics>,
    /// Full-set loss of the untrained model on the evaluation split.
    pub initial_loss: f64,
    pub best_loss: f64,
    /// Epoch of the kept weights; 0 means the initial weights.
    pub best_epoch: usize,
}

/// Trains the backbone and projection head in place. The weights with the
/// lowest full-set evaluation loss (initial weights included) are kept.
pub fn pretrain(
    model: &mut IcthModel,
    groups: &[CascadeGroup],
    cfg: &ContrastiveConfig,
) -> Result<PretrainReport> {
    cfg.check()?;
    let eval_pairs = make_pairs(groups, rng::derive_seed(cfg.seed, u64::MAX));
    if eval_pairs.len() < 2 {
        return Err(Error::invalid("pre-training needs at least two groups with two or more cascades"));
    }
    let mut head = projection_head(model, cfg);
    let eval = |m: &IcthModel, head: &ParamStore| -> Result<f64> {
        let mut total = 0.0;
        let bs = batches(&eval_pairs, cfg.batch_groups);
        for b in &bs {
            total += batch(m, head, groups, b, cfg, false)?.loss;
        }
        Ok(total / bs.len() as f64)
    };
    let initial = eval(model, &head)?;
    if !initial.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            reason: format!("initial loss {initial}"),
        });
    }
    let mut best = (initial, 0, model.params.clone(), head.clone());
    let mut adam_backbone = Adam::new(cfg.learning_rate, &model.params);
    let mut adam_head = Adam::new(cfg.learning_rate, &head);
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut pairs = make_pairs(groups, rng::derive_seed(cfg.seed, epoch as u64));
        pairs.shuffle(&mut rng::stream(cfg.seed, 0x4550_0000 + epoch as u64));
        let mut sum = 0.0;
        let bs = batches(&pairs, cfg.batch_groups);
        for b in &bs {
            let mut r = batch(model, &head, groups, b, cfg, true)?;
            if !r.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("batch loss {}", r.loss),
                });
            }
            sum += r.loss;
            clip_gradients(&mut [&mut r.backbone, &mut r.head], cfg.clip_norm);
            adam_backbone.step(&mut model.params, &r.backbone);
            adam_head.step(&mut head, &r.head);
        }
        let loss = sum / bs.len() as f64;
        let val = eval(model, &head)?;
        if !val.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: format!("evaluation loss {val}"),
            });
        }
        log::info!("epoch {epoch}: loss {loss:.6} eval {val:.6}");
        metrics.push(EpochMetrics {
            epoch,
            loss,
            val_metric: val,
        });
        if val < best.0 {
            best = (val, epoch, model.params.clone(), head.clone());
        }
    }
    let (best_loss, best_epoch, params, head) = best;
    model.params = params;
    for (name, m) in head.iter() {
        model.extras.insert(name.clone(), m.clone());
    }
    Ok(PretrainReport {
        metrics,
        initial_loss: initial,
        best_loss,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_similarities_give_log_of_denominator_size() {
        let e = vec![1.0, 0.0];
        let views = vec![(e.clone(), e.clone()), (e.clone(), e.clone())];
        let l = ntxent_loss(&views, 0.5).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_separation_drives_loss_to_zero() {
        let views = vec![(vec![1.0, 0.0], vec![1.0, 0.0]), (vec![-1.0, 0.0], vec![-1.0, 0.0])];
        let l = ntxent_loss(&views, 0.5).unwrap();
        assert!((l - (2.0 * (-4.0f64).exp()).ln_1p()).abs() < 1e-14);
        let l = ntxent_loss(&views, 0.01).unwrap();
        assert!(l < 1e-6);
    }

    #[test]
    fn zero_vectors_are_rejected() {
        let views = vec![(vec![0.0, 0.0], vec![1.0, 0.0]), (vec![1.0, 1.0], vec![1.0, 0.0])];
        assert!(ntxent_loss(&views, 0.5).is_err());
    }

    #[test]
    fn trailing_single_pair_joins_previous_batch() {
        let pairs: Vec<GroupPair> = (0..5)
            .map(|g| GroupPair {
                group: g,
                first: vec![0],
                second: vec![1],
            })
            .collect();
        let sizes: Vec<usize> = batches(&pairs, 2).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 3]);
    }
}
