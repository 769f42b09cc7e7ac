//! Synthetic down-sampling benchmark, embedding metrics and export.
//!
//! The benchmark simulates groups of Hawkes cascades from two kernel
//! families, removes events at several missing probabilities and measures
//! how well contrastively trained embeddings still separate the groups.

mod export;
mod metrics;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use export::{
    embeddings_from_str, embeddings_to_string, export_embeddings, read_embeddings, EmbeddingRow,
};
pub use metrics::{
    jaccard, jaccard_matrix, kmeans, knn_accuracy, pair_retrieval, silhouette, ClusterJaccard,
    JaccardReport, KMeans, Summary,
};

use crate::cascade::{downsample, validate, Cascade, CascadeGroup};
use crate::neural::{group_embedding, mean_embedding, Embedding, IcthConfig, IcthModel};
use crate::parametric::{simulate, Kernel, ParametricModel, SimulateOptions};
use crate::training::{make_pairs, pretrain, ContrastiveConfig, PretrainReport};
use crate::{json, par, rng, Error, Result};

pub const EXPONENTIAL: &str = "exponential";
pub const POWER_LAW: &str = "power_law";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExponentialRanges {
    pub kappa: [f64; 2],
    pub theta: [f64; 2],
}

impl Default for ExponentialRanges {
    fn default() -> Self {
        ExponentialRanges {
            kappa: [0.3, 0.9],
            theta: [0.5, 5.0],
        }
    }
}

/// `mass` is the branching factor; κ follows from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerLawRanges {
    pub mass: [f64; 2],
    pub theta: [f64; 2],
    pub c: [f64; 2],
}

impl Default for PowerLawRanges {
    fn default() -> Self {
        PowerLawRanges {
            mass: [0.3, 0.9],
            theta: [0.3, 1.5],
            c: [0.5, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticBenchConfig {
    pub n_groups_per_family: usize,
    pub cascades_per_group: usize,
    pub horizon: f64,
    pub exponential: ExponentialRanges,
    pub power_law: PowerLawRanges,
    pub background_rate: f64,
    /// Start every cascade with an event at time 0.
    pub immigrant: bool,
    pub max_events_per_cascade: usize,
    pub p_missing: Vec<f64>,
    pub knn_k: usize,
    pub seed: u64,
    pub model: IcthConfig,
}

impl Default for SyntheticBenchConfig {
    fn default() -> Self {
        SyntheticBenchConfig {
            n_groups_per_family: 20,
            cascades_per_group: 50,
            horizon: 50.0,
            exponential: ExponentialRanges::default(),
            power_law: PowerLawRanges::default(),
            background_rate: 0.0,
            immigrant: true,
            max_events_per_cascade: 200,
            p_missing: vec![0.0, 0.5, 0.8, 0.9],
            knn_k: 5,
            seed: 0,
            model: IcthConfig::default(),
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && r[0] >= lo && r[1] <= hi) {
        return Err(Error::invalid(format!(
            "range {name} = [{}, {}] must be ordered and within [{lo}, {hi}]",
            r[0], r[1]
        )));
    }
    Ok(())
}

impl SyntheticBenchConfig {
    pub fn check(&self) -> Result<()> {
        if self.n_groups_per_family == 0 || self.cascades_per_group < 2 {
            return Err(Error::invalid(
                "need at least one group per family and two cascades per group",
            ));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::invalid("horizon must be > 0"));
        }
        if !(self.background_rate.is_finite() && self.background_rate >= 0.0) {
            return Err(Error::invalid("background_rate must be >= 0"));
        }
        if !self.immigrant && self.background_rate == 0.0 {
            return Err(Error::invalid(
                "without an immigrant event a zero background rate yields empty cascades",
            ));
        }
        if self.max_events_per_cascade == 0 {
            return Err(Error::invalid("max_events_per_cascade must be positive"));
        }
        let inf = f64::INFINITY;
        check_range("exponential.kappa", self.exponential.kappa, 0.0, inf)?;
        check_range("exponential.theta", self.exponential.theta, f64::MIN_POSITIVE, inf)?;
        check_range("power_law.mass", self.power_law.mass, 0.0, inf)?;
        check_range("power_law.theta", self.power_law.theta, f64::MIN_POSITIVE, inf)?;
        check_range("power_law.c", self.power_law.c, f64::MIN_POSITIVE, inf)?;
        if self.p_missing.is_empty() || self.p_missing.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("p_missing values must lie in [0, 1]"));
        }
        if self.knn_k == 0 || self.knn_k >= 2 * self.n_groups_per_family {
            return Err(Error::invalid("knn_k must satisfy 1 <= k < number of groups"));
        }
        self.model.check()?;
        // tiled length is at most 2n + 1 records
        if 2 * self.max_events_per_cascade + 1 > self.model.max_seq_len {
            return Err(Error::invalid(format!(
                "max_events_per_cascade {} does not fit max_seq_len {}",
                self.max_events_per_cascade, self.model.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn n_groups(&self) -> usize {
        2 * self.n_groups_per_family
    }
}

fn uniform(rng: &mut rng::Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

/// Kernel parameter sets in group order: all exponential sets, then all
/// power-law sets.
pub fn synthetic_kernels(cfg: &SyntheticBenchConfig) -> Result<Vec<(String, Kernel)>> {
    cfg.check()?;
    let mut out = Vec::with_capacity(cfg.n_groups());
    let mut r = rng::stream(cfg.seed, 0);
    for i in 0..cfg.n_groups_per_family {
        let k = Kernel::exponential(uniform(&mut r, cfg.exponential.kappa), uniform(&mut r, cfg.exponential.theta));
        out.push((format!("{EXPONENTIAL}-{i:03}"), k));
    }
    let mut r = rng::stream(cfg.seed, 1);
    for i in 0..cfg.n_groups_per_family {
        let p = &cfg.power_law;
        let k = Kernel::power_law_with_mass(uniform(&mut r, p.mass), uniform(&mut r, p.theta), uniform(&mut r, p.c));
        out.push((format!("{POWER_LAW}-{i:03}"), k));
    }
    Ok(out)
}

/// Simulates one group per kernel parameter set. Groups are labelled with
/// their family; the group id carries the parameter-set index. Cascades
/// are returned in tiled canonical form.
pub fn generate_synthetic_groups(cfg: &SyntheticBenchConfig) -> Result<Vec<CascadeGroup>> {
    let kernels = synthetic_kernels(cfg)?;
    let opts = SimulateOptions {
        max_events: Some(cfg.max_events_per_cascade),
    };
    let index: Vec<usize> = (0..kernels.len()).collect();
    let built = par::map(&index, |&gi| -> Result<CascadeGroup> {
        let (gid, kernel) = &kernels[gi];
        let model = ParametricModel::hawkes(cfg.background_rate, *kernel).with_immigrant(cfg.immigrant);
        let group_seed = rng::derive_seed(cfg.seed, 0x4752_0000 + gi as u64);
        let mut cascades = Vec::with_capacity(cfg.cascades_per_group);
        for ci in 0..cfg.cascades_per_group {
            let mut c = simulate(&model, cfg.horizon, rng::derive_seed(group_seed, ci as u64), &opts)?
                .tiled();
            c.id = format!("{gid}/{ci:04}");
            debug_assert!(validate(&c).is_empty());
            cascades.push(c);
        }
        let label = gid.rsplit_once('-').expect("family-index").0.to_string();
        Ok(CascadeGroup::new(gid.clone(), Some(label), cascades))
    });
    built.into_iter().collect()
}

/// Down-samples every cascade of `groups`. The per-cascade seed depends on
/// `seed` and the cascade position only, so the removal masks for a
/// smaller `p_missing` are subsets of those for a larger one.
pub fn downsample_groups(groups: &[CascadeGroup], p_missing: f64, seed: u64) -> Result<Vec<CascadeGroup>> {
    let mut out = Vec::with_capacity(groups.len());
    for (gi, g) in groups.iter().enumerate() {
        let gseed = rng::derive_seed(seed, gi as u64);
        let cascades = g
            .cascades
            .iter()
            .enumerate()
            .map(|(ci, c)| downsample(c, p_missing, rng::derive_seed(gseed, ci as u64)))
            .collect::<Result<Vec<Cascade>>>()?;
        out.push(CascadeGroup {
            cascades,
            ..g.clone()
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub epochs: usize,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub final_train_loss: Option<f64>,
}

impl From<&PretrainReport> for PretrainSummary {
    fn from(r: &PretrainReport) -> Self {
        PretrainSummary {
            epochs: r.metrics.len(),
            initial_loss: r.initial_loss,
            best_loss: r.best_loss,
            best_epoch: r.best_epoch,
            final_train_loss: r.metrics.last().map(|m| m.loss),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separability {
    pub retrieval_accuracy: f64,
    pub knn_accuracy: f64,
    pub silhouette: f64,
}

/// Metrics at one missing probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub p_missing: f64,
    pub retrieval_accuracy: f64,
    pub knn_accuracy: f64,
    pub silhouette: f64,
    /// The same metrics for the model before pre-training.
    pub untrained: Separability,
    /// Point events left after down-sampling.
    pub observed_events: u64,
    pub total_count: u64,
    pub count_preserved: bool,
    pub pretrain: PretrainSummary,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub embeddings: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub runtime_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_groups: usize,
    pub n_cascades: usize,
    pub total_count: u64,
    pub knn_k: usize,
    pub levels: Vec<LevelReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub runtime_seconds: Option<f64>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        json::to_line(self)
    }
}

#[derive(Debug, Clone, Default)]
pub struct BenchOptions {
    /// Write `embeddings_pm{P}.tsv` per level into this directory.
    pub export_dir: Option<PathBuf>,
    /// Record wall-clock runtimes in the report. Off by default so that
    /// reports are reproducible byte for byte.
    pub timings: bool,
}

/// Group embeddings of `groups` and their separability metrics.
fn score(
    model: &IcthModel,
    groups: &[CascadeGroup],
    labels: &[&str],
    split_seed: u64,
    knn_k: usize,
) -> Result<(Vec<Embedding>, Separability)> {
    let emb = groups
        .iter()
        .map(|g| group_embedding(model, g))
        .collect::<Result<Vec<Embedding>>>()?;
    let halves = make_pairs(groups, split_seed)
        .iter()
        .map(|pair| {
            let pick = |idx: &[usize]| -> Vec<Cascade> {
                idx.iter().map(|&i| groups[pair.group].cascades[i].clone()).collect()
            };
            Ok((
                mean_embedding(model, &pick(&pair.first))?,
                mean_embedding(model, &pick(&pair.second))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let s = Separability {
        retrieval_accuracy: pair_retrieval(&halves)?,
        knn_accuracy: knn_accuracy(&emb, labels, knn_k)?,
        silhouette: silhouette(&emb, labels)?,
    };
    Ok((emb, s))
}

/// Runs the down-sampling robustness benchmark: groups are generated once,
/// then for each missing probability the cascades are down-sampled, a
/// fresh model is pretrained contrastively and the embeddings are scored.
pub fn run_downsampling_benchmark(
    cfg: &SyntheticBenchConfig,
    training: &ContrastiveConfig,
    options: &BenchOptions,
) -> Result<MetricReport> {
    let start = Instant::now();
    cfg.check()?;
    training.check()?;
    let groups = generate_synthetic_groups(cfg)?;
    let total: u64 = groups.iter().map(CascadeGroup::total_count).sum();
    let labels: Vec<&str> = groups.iter().map(|g| g.label.as_deref().unwrap_or("")).collect();
    let mask_seed = rng::derive_seed(cfg.seed, 0x4d41_534b);
    let split_seed = rng::derive_seed(cfg.seed, 0x5350_4c54);
    let model_seed = rng::derive_seed(cfg.seed, 0x4d4f_444c);

    let mut levels = Vec::with_capacity(cfg.p_missing.len());
    for &p in &cfg.p_missing {
        let level_start = Instant::now();
        let data = downsample_groups(&groups, p, mask_seed)?;
        let level_total: u64 = data.iter().map(CascadeGroup::total_count).sum();
        let observed: u64 = data
            .iter()
            .flat_map(|g| &g.cascades)
            .map(|c| c.records.iter().filter(|r| r.is_event()).count() as u64)
            .sum();
        let mut model = IcthModel::new(cfg.model.clone(), model_seed)?;
        let (_, untrained) = score(&model, &data, &labels, split_seed, cfg.knn_k)?;
        let report = pretrain(&mut model, &data, training)?;
        let (emb, trained) = score(&model, &data, &labels, split_seed, cfg.knn_k)?;
        let embeddings = match &options.export_dir {
            Some(dir) => {
                let path = dir.join(format!("embeddings_pm{p}.tsv"));
                let rows: Vec<EmbeddingRow> = data
                    .iter()
                    .zip(&emb)
                    .map(|(g, e)| EmbeddingRow {
                        group_id: g.group_id.clone(),
                        label: g.label.clone().unwrap_or_default(),
                        values: e.clone(),
                    })
                    .collect();
                export_embeddings(&rows, &path)?;
                Some(path)
            }
            None => None,
        };
        let level = LevelReport {
            p_missing: p,
            retrieval_accuracy: trained.retrieval_accuracy,
            knn_accuracy: trained.knn_accuracy,
            silhouette: trained.silhouette,
            untrained,
            observed_events: observed,
            total_count: level_total,
            count_preserved: level_total == total,
            pretrain: PretrainSummary::from(&report),
            embeddings,
            runtime_seconds: options.timings.then(|| level_start.elapsed().as_secs_f64()),
        };
        log::info!(
            "P_m {p}: retrieval {:.4} knn {:.4} silhouette {:.4} (untrained {:.4} {:.4} {:.4})",
            level.retrieval_accuracy,
            level.knn_accuracy,
            level.silhouette,
            untrained.retrieval_accuracy,
            untrained.knn_accuracy,
            untrained.silhouette
        );
        levels.push(level);
    }
    Ok(MetricReport {
        n_groups: groups.len(),
        n_cascades: groups.iter().map(|g| g.cascades.len()).sum(),
        total_count: total,
        knn_k: cfg.knn_k,
        levels,
        runtime_seconds: options.timings.then(|| start.elapsed().as_secs_f64()),
    })
}

/// Reads a report written by [`MetricReport::to_json`].
pub fn read_report(path: &Path) -> Result<MetricReport> {
    Ok(serde_json::from_str(&json::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests;
