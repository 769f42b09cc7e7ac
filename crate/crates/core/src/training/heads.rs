//! Supervised heads on top of the embeddings.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{backprop_sets, clip_gradients, embed_sets, row, set_items, Adam, SetItem};
use crate::autograd::{CustomOp, Mat, Tape, Var};
use crate::cascade::{Cascade, CascadeGroup};
use crate::neural::{Bound, IcthModel, ParamStore};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadTask {
    Classify,
    Popularity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub task: HeadTask,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Learning rate of the backbone when `unfreeze` is set.
    pub backbone_learning_rate: f64,
    pub unfreeze: bool,
    pub clip_norm: f64,
    pub test_fraction: f64,
    /// Share of the training split held out for early stopping.
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Popularity: end of the observed prefix; 10% of the horizon when unset.
    pub observation_time: Option<f64>,
    /// Popularity: time at which the final count is measured; the horizon
    /// when unset.
    pub final_time: Option<f64>,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            task: HeadTask::Classify,
            epochs: 300,
            learning_rate: 1e-2,
            backbone_learning_rate: 1e-3,
            unfreeze: false,
            clip_norm: 5.0,
            test_fraction: 0.5,
            val_fraction: 0.05,
            patience: 30,
            observation_time: None,
            final_time: None,
            seed: 0,
        }
    }
}

impl HeadConfig {
    fn check(&self, task: HeadTask) -> Result<()> {
        if self.task != task {
            return Err(Error::invalid(format!(
                "config is for task {:?}, not {task:?}",
                self.task
            )));
        }
        if !(0.0 < self.test_fraction && self.test_fraction < 1.0) {
            return Err(Error::invalid("test_fraction must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("val_fraction must lie in [0, 1)"));
        }
        if !(self.learning_rate >= 0.0 && self.backbone_learning_rate >= 0.0) {
            return Err(Error::invalid("learning rates must be >= 0"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip_norm must be > 0"));
        }
        if let (Some(o), Some(f)) = (self.observation_time, self.final_time) {
            if !(o < f) {
                return Err(Error::invalid("observation_time must be < final_time"));
            }
        }
        Ok(())
    }
}

/// Macro-averaged F1 over the classes that occur in `truth` or
/// `predicted`.
pub fn macro_f1(truth: &[usize], predicted: &[usize], n_classes: usize) -> f64 {
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let mut sum = 0.0;
    let mut k = 0;
    for c in 0..n_classes {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom > 0 {
            sum += 2.0 * tp[c] as f64 / denom as f64;
            k += 1;
        }
    }
    if k == 0 {
        0.0
    } else {
        sum / k as f64
    }
}

struct SoftmaxXent {
    labels: Vec<usize>,
    probs: Mat,
}

fn softmax_rows(logits: &Mat) -> Mat {
    let mut p = logits.clone();
    for mut r in p.rows_mut() {
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        r.mapv_inplace(|x| (x - max).exp());
        let z = r.sum();
        r /= z;
    }
    p
}

impl CustomOp for SoftmaxXent {
    fn backward(&self, _inputs: &[&Mat], _output: &Mat, g: &Mat) -> Vec<Mat> {
        let n = self.labels.len() as f64;
        let mut d = self.probs.clone();
        for (i, &y) in self.labels.iter().enumerate() {
            d[[i, y]] -= 1.0;
        }
        vec![d * (g[[0, 0]] / n)]
    }
}

/// Mean softmax cross-entropy of `logits` against `labels`.
pub(crate) fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Var {
    let probs = softmax_rows(tape.value(logits));
    let value = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[[i, y]].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / labels.len() as f64;
    tape.custom(
        &[logits],
        Mat::from_elem((1, 1), value),
        Box::new(SoftmaxXent {
            labels: labels.to_vec(),
            probs,
        }),
    )
}

/// Column means and standard deviations of the rows of `x` selected by
/// `idx`.
fn standardizer(x: &Mat, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = x.ncols();
    let n = idx.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in idx {
        for j in 0..d {
            mean[j] += x[[i, j]] / n;
        }
    }
    let mut scale = vec![0.0; d];
    for &i in idx {
        for j in 0..d {
            scale[j] += (x[[i, j]] - mean[j]).powi(2) / n;
        }
    }
    let scale = scale.into_iter().map(|v| v.sqrt().max(1e-8)).collect();
    (mean, scale)
}

/// `(x − mean) / scale · W + b` for the head tensors `prefix.*`.
pub(crate) fn linear_head(tape: &mut Tape, x: Var, b: &Bound, prefix: &str) -> Var {
    let n = tape.value(x).nrows();
    let mean = b.var(&format!("{prefix}.mean"));
    let inv = {
        let s = tape.value(b.var(&format!("{prefix}.scale"))).mapv(|v| 1.0 / v);
        let full = s
            .broadcast((n, s.ncols()))
            .expect("row broadcast")
            .to_owned();
        tape.constant(full)
    };
    let neg = tape.scale(mean, -1.0);
    let c = tape.add_row(x, neg);
    let z = tape.mul(c, inv);
    let y = tape.matmul(z, b.var(&format!("{prefix}.w")));
    tape.add_row(y, b.var(&format!("{prefix}.b")))
}

pub(crate) fn head_store(prefix: &str, mean: Vec<f64>, scale: Vec<f64>, out: usize) -> ParamStore {
    let d = mean.len();
    let mut s = ParamStore::new();
    s.insert(format!("{prefix}.w"), Mat::zeros((d, out)));
    s.insert(format!("{prefix}.b"), Mat::zeros((1, out)));
    s.insert(format!("{prefix}.mean"), row(&mean));
    s.insert(format!("{prefix}.scale"), row(&scale));
    s
}

/// Trainable subset of a head (normalisation statistics stay fixed).
pub(crate) fn trainable(prefix: &str, grads: &ParamStore) -> ParamStore {
    let mut g = ParamStore::new();
    for name in [format!("{prefix}.w"), format!("{prefix}.b")] {
        g.insert(name.clone(), grads.tensor(&name).clone());
    }
    g
}

/// Stratified split into (train, val, test) index lists.
fn stratified_split(
    labels: &[usize],
    n_classes: usize,
    cfg: &HeadConfig,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let mut rng = rng::stream(cfg.seed, 0x5350_4c54);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * cfg.test_fraction).floor() as usize;
        let rest = idx.len() - n_test;
        let n_val = if rest >= 2 && cfg.val_fraction > 0.0 {
            ((rest as f64 * cfg.val_fraction).round() as usize).clamp(1, rest - 1)
        } else {
            0
        };
        if rest == n_val {
            return Err(Error::invalid(format!("class {c} is absent from the training split")));
        }
        test.extend_from_slice(&idx[..n_test]);
        val.extend_from_slice(&idx[n_test..n_test + n_val]);
        train.extend_from_slice(&idx[n_test + n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok((train, val, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub classes: Vec<String>,
    pub train_macro_f1: f64,
    pub val_macro_f1: f64,
    pub test_macro_f1: f64,
    /// Rows are true classes, columns predicted classes, on the test split.
    pub confusion: Vec<Vec<usize>>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub test_groups: Vec<String>,
}

fn argmax_rows(m: &Mat) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
                .0
        })
        .collect()
}

fn select(m: &Mat, idx: &[usize]) -> Mat {
    m.select(ndarray::Axis(0), idx)
}

fn pick<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Trains a softmax head on group embeddings with early stopping on the
/// validation macro-F1 (ties broken by validation cross-entropy). The head
/// is stored in `model.extras` under `classifier.*`.
pub fn finetune_classify(
    model: &mut IcthModel,
    groups: &[CascadeGroup],
    cfg: &HeadConfig,
) -> Result<ClassifyReport> {
    cfg.check(HeadTask::Classify)?;
    let mut classes: Vec<String> = Vec::new();
    for g in groups {
        let Some(l) = &g.label else {
            return Err(Error::invalid(format!("group `{}` has no label", g.group_id)));
        };
        if !classes.contains(l) {
            classes.push(l.clone());
        }
    }
    classes.sort();
    if classes.len() < 2 {
        return Err(Error::invalid("classification needs at least two classes"));
    }
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let labels: Vec<usize> = groups
        .iter()
        .map(|g| index[g.label.as_deref().expect("checked")])
        .collect();
    let k = classes.len();
    let (train, val, test) = stratified_split(&labels, k, cfg)?;

    let sets: Vec<Vec<&Cascade>> = groups.iter().map(|g| g.cascades.iter().collect()).collect();
    if let Some(g) = groups.iter().find(|g| g.cascades.is_empty()) {
        return Err(Error::invalid(format!("group `{}` is empty", g.group_id)));
    }
    let train_sets: Vec<Vec<&Cascade>> = train.iter().map(|&i| sets[i].clone()).collect();
    let train_items = set_items(&train_sets);
    let all_items = set_items(&sets);
    let mut emb = embed_sets(model, &all_items, groups.len())?;
    let (mean, scale) = standardizer(&emb, &train);
    let mut head = head_store("classifier", mean, scale, k);
    let mut adam_head = Adam::new(cfg.learning_rate, &head);
    let mut adam_backbone = Adam::new(cfg.backbone_learning_rate, &model.params);
    let y_train = pick(&labels, &train);
    let y_val = pick(&labels, &val);

    let evaluate = |emb: &Mat, head: &ParamStore, idx: &[usize]| -> (Vec<usize>, f64) {
        if idx.is_empty() {
            return (Vec::new(), 0.0);
        }
        let mut t = Tape::new();
        let b = head.bind(&mut t, false);
        let x = t.constant(select(emb, idx));
        let logits = linear_head(&mut t, x, &b, "classifier");
        let y = pick(&labels, idx);
        let ce = cross_entropy(&mut t, logits, &y);
        (argmax_rows(t.value(logits)), t.scalar(ce))
    };
    let score = |emb: &Mat, head: &ParamStore| -> (f64, f64) {
        let idx = if val.is_empty() { &train } else { &val };
        let (pred, ce) = evaluate(emb, head, idx);
        let y = if val.is_empty() { &y_train } else { &y_val };
        (macro_f1(y, &pred, k), ce)
    };

    let mut best = (score(&emb, &head), 0, head.clone(), model.params.clone());
    let mut since = 0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        if cfg.unfreeze && epoch > 1 {
            emb = embed_sets(model, &all_items, groups.len())?;
        }
        let mut t = Tape::new();
        let x_train = select(&emb, &train);
        let x = if cfg.unfreeze {
            t.param(x_train.clone())
        } else {
            t.constant(x_train.clone())
        };
        let b = head.bind(&mut t, true);
        let logits = linear_head(&mut t, x, &b, "classifier");
        let loss = cross_entropy(&mut t, logits, &y_train);
        if !t.scalar(loss).is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: "classification loss is not finite".into(),
            });
        }
        let g = t.backward(loss);
        let mut hg = trainable("classifier", &b.gradients(&g, &head));
        if cfg.unfreeze {
            let upstream = g.get_or_zeros(x, &x_train);
            let (mut bg, _) = backprop_sets(model, &train_items, &upstream, 0.0)?;
            clip_gradients(&mut [&mut hg, &mut bg], cfg.clip_norm);
            adam_backbone.step(&mut model.params, &bg);
        } else {
            clip_gradients(&mut [&mut hg], cfg.clip_norm);
        }
        adam_head.step(&mut head, &hg);

        let eval_emb = if cfg.unfreeze {
            embed_sets(model, &all_items, groups.len())?
        } else {
            emb.clone()
        };
        let s = score(&eval_emb, &head);
        let (bf1, bce) = best.0;
        if s.0 > bf1 || (s.0 == bf1 && s.1 < bce) {
            best = (s, epoch, head.clone(), model.params.clone());
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                break;
            }
        }
    }
    let ((val_f1, _), best_epoch, head, params) = best;
    model.params = params;
    let emb = if cfg.unfreeze {
        embed_sets(model, &all_items, groups.len())?
    } else {
        emb
    };
    let (train_pred, _) = evaluate(&emb, &head, &train);
    let (test_pred, _) = evaluate(&emb, &head, &test);
    let y_test = pick(&labels, &test);
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in y_test.iter().zip(&test_pred) {
        confusion[t][p] += 1;
    }
    for (name, m) in head.iter() {
        model.extras.insert(name.clone(), m.clone());
    }
    Ok(ClassifyReport {
        test_macro_f1: macro_f1(&y_test, &test_pred, k),
        train_macro_f1: macro_f1(&y_train, &train_pred, k),
        val_macro_f1: val_f1,
        classes,
        confusion,
        best_epoch,
        epochs_run,
        test_groups: test.iter().map(|&i| groups[i].group_id.clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeApe {
    pub id: String,
    pub observed: u64,
    pub actual: u64,
    pub predicted: f64,
    pub ape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityReport {
    pub observation_time: f64,
    pub final_time: f64,
    pub test: Vec<CascadeApe>,
    pub mean_ape: f64,
    pub median_ape: f64,
    /// APE of predicting the median training increment for every cascade.
    pub baseline_mean_ape: f64,
    pub baseline_median_ape: f64,
    pub n_train: usize,
    pub excluded: Vec<String>,
    pub best_epoch: usize,
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Final count implied by an observed count and a predicted
/// `log(1 + increment)`; never negative.
pub fn predicted_final(observed: u64, log1p_increment: f64) -> f64 {
    observed as f64 + log1p_increment.exp_m1().max(0.0)
}

struct PopItem {
    prefix: Cascade,
    observed: u64,
    actual: u64,
    target: f64,
}

/// Regresses `log(1 + events after T_obs)` on the embedding of the prefix
/// observed by `T_obs` and reports absolute percentage errors of the
/// implied final counts on a held-out split.
pub fn finetune_popularity(
    model: &mut IcthModel,
    cascades: &[Cascade],
    cfg: &HeadConfig,
) -> Result<PopularityReport> {
    cfg.check(HeadTask::Popularity)?;
    let horizon = cascades
        .iter()
        .map(|c| c.horizon)
        .fold(f64::INFINITY, f64::min);
    if !horizon.is_finite() {
        return Err(Error::invalid("popularity prediction needs at least one cascade"));
    }
    let t_obs = cfg.observation_time.unwrap_or(0.1 * horizon);
    let t_final = cfg.final_time.unwrap_or(horizon);
    if !(0.0 < t_obs && t_obs < t_final && t_final <= horizon) {
        return Err(Error::invalid(format!(
            "need 0 < T_obs ({t_obs}) < T_final ({t_final}) <= shortest horizon ({horizon})"
        )));
    }
    let mut items = Vec::new();
    let mut excluded = Vec::new();
    for c in cascades {
        let actual: u64 = c
            .records
            .iter()
            .filter(|r| r.end() <= t_final)
            .map(|r| r.implied_count())
            .sum();
        if actual == 0 {
            log::warn!("cascade `{}` has final count 0; excluded", c.id);
            excluded.push(c.id.clone());
            continue;
        }
        let prefix = c.truncated(t_obs)?;
        if prefix.records.is_empty() {
            log::warn!("cascade `{}` has nothing observed by {t_obs}; excluded", c.id);
            excluded.push(c.id.clone());
            continue;
        }
        let observed = prefix.total_count();
        items.push(PopItem {
            observed,
            actual,
            target: ((actual - observed) as f64).ln_1p(),
            prefix,
        });
    }
    if items.len() < 3 {
        return Err(Error::invalid("popularity prediction needs at least three usable cascades"));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, 0x504f_5055));
    let n_test = ((items.len() as f64 * cfg.test_fraction).floor() as usize).clamp(1, items.len() - 2);
    let rest = items.len() - n_test;
    let n_val = if cfg.val_fraction > 0.0 {
        ((rest as f64 * cfg.val_fraction).round() as usize).clamp(1, rest - 1)
    } else {
        0
    };
    let mut test = order[..n_test].to_vec();
    let mut val = order[n_test..n_test + n_val].to_vec();
    let mut train = order[n_test + n_val..].to_vec();
    test.sort_unstable();
    val.sort_unstable();
    train.sort_unstable();

    let sets: Vec<Vec<&Cascade>> = items.iter().map(|it| vec![&it.prefix]).collect();
    let all_items: Vec<SetItem> = set_items(&sets);
    let train_sets: Vec<Vec<&Cascade>> = train.iter().map(|&i| sets[i].clone()).collect();
    let train_items = set_items(&train_sets);
    let targets: Vec<f64> = items.iter().map(|it| it.target).collect();
    let mut emb = embed_sets(model, &all_items, items.len())?;
    let (mu, scale) = standardizer(&emb, &train);
    let mut head = head_store("popularity", mu, scale, 1);
    head.get_mut("popularity.b").expect("bias")[[0, 0]] = mean(&pick(&targets, &train));
    let mut adam_head = Adam::new(cfg.learning_rate, &head);
    let mut adam_backbone = Adam::new(cfg.backbone_learning_rate, &model.params);

    let predict = |emb: &Mat, head: &ParamStore, idx: &[usize]| -> Vec<f64> {
        let mut t = Tape::new();
        let b = head.bind(&mut t, false);
        let x = t.constant(select(emb, idx));
        let y = linear_head(&mut t, x, &b, "popularity");
        t.value(y).iter().copied().collect()
    };
    let mse = |pred: &[f64], idx: &[usize]| -> f64 {
        pred.iter()
            .zip(idx)
            .map(|(p, &i)| (p - targets[i]).powi(2))
            .sum::<f64>()
            / idx.len().max(1) as f64
    };
    let monitor = if val.is_empty() { train.clone() } else { val.clone() };
    let mut best = (
        mse(&predict(&emb, &head, &monitor), &monitor),
        0,
        head.clone(),
        model.params.clone(),
    );
    let mut since = 0;
    for epoch in 1..=cfg.epochs {
        if cfg.unfreeze && epoch > 1 {
            emb = embed_sets(model, &all_items, items.len())?;
        }
        let mut t = Tape::new();
        let x_train = select(&emb, &train);
        let x = if cfg.unfreeze {
            t.param(x_train.clone())
        } else {
            t.constant(x_train.clone())
        };
        let b = head.bind(&mut t, true);
        let y = linear_head(&mut t, x, &b, "popularity");
        let target = t.constant(Mat::from_shape_vec((train.len(), 1), pick(&targets, &train)).expect("column"));
        let r = t.sub(y, target);
        let sq = t.mul(r, r);
        let s = t.sum_all(sq);
        let loss = t.scale(s, 1.0 / train.len() as f64);
        if !t.scalar(loss).is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: "popularity loss is not finite".into(),
            });
        }
        let g = t.backward(loss);
        let mut hg = trainable("popularity", &b.gradients(&g, &head));
        if cfg.unfreeze {
            let upstream = g.get_or_zeros(x, &x_train);
            let (mut bg, _) = backprop_sets(model, &train_items, &upstream, 0.0)?;
            clip_gradients(&mut [&mut hg, &mut bg], cfg.clip_norm);
            adam_backbone.step(&mut model.params, &bg);
        } else {
            clip_gradients(&mut [&mut hg], cfg.clip_norm);
        }
        adam_head.step(&mut head, &hg);
        let eval_emb = if cfg.unfreeze {
            embed_sets(model, &all_items, items.len())?
        } else {
            emb.clone()
        };
        let m = mse(&predict(&eval_emb, &head, &monitor), &monitor);
        if m < best.0 {
            best = (m, epoch, head.clone(), model.params.clone());
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, head, params) = best;
    model.params = params;
    let emb = if cfg.unfreeze {
        embed_sets(model, &all_items, items.len())?
    } else {
        emb
    };
    let pred = predict(&emb, &head, &test);
    let baseline = median(&pick(&targets, &train));
    let mut out = Vec::with_capacity(test.len());
    let mut base = Vec::with_capacity(test.len());
    for (&i, &p) in test.iter().zip(&pred) {
        let it = &items[i];
        let predicted = predicted_final(it.observed, p);
        let actual = it.actual as f64;
        base.push((predicted_final(it.observed, baseline) - actual).abs() / actual);
        out.push(CascadeApe {
            id: it.prefix.id.clone(),
            observed: it.observed,
            actual: it.actual,
            predicted,
            ape: (predicted - actual).abs() / actual,
        });
    }
    let apes: Vec<f64> = out.iter().map(|a| a.ape).collect();
    for (name, m) in head.iter() {
        model.extras.insert(name.clone(), m.clone());
    }
    Ok(PopularityReport {
        observation_time: t_obs,
        final_time: t_final,
        mean_ape: mean(&apes),
        median_ape: median(&apes),
        baseline_mean_ape: mean(&base),
        baseline_median_ape: median(&base),
        test: out,
        n_train: train.len(),
        excluded,
        best_epoch,
    })
}
