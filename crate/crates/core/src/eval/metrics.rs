//! Separability, clustering and tag-similarity metrics on embeddings.

use std::collections::BTreeSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

fn check_dims(points: &[Vec<f64>]) -> Result<()> {
    if let Some(first) = points.first() {
        if points.iter().any(|p| p.len() != first.len()) {
            return Err(Error::invalid("embeddings differ in dimension"));
        }
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
    }
    Ok(())
}

/// Share of halves whose nearest other half (by cosine similarity) is
/// their partner. Ties go to the lowest index.
pub fn pair_retrieval(halves: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if halves.len() < 2 {
        return Err(Error::invalid("pair retrieval needs at least two groups"));
    }
    let points: Vec<Vec<f64>> = halves
        .iter()
        .flat_map(|(a, b)| [a.clone(), b.clone()])
        .collect();
    check_dims(&points)?;
    let n = points.len();
    let mut hits = 0;
    for i in 0..n {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for j in (0..n).filter(|&j| j != i) {
            let s = cosine(&points[i], &points[j])?;
            if s > best.1 {
                best = (j, s);
            }
        }
        if best.0 == i ^ 1 {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Leave-one-out `k`-nearest-neighbour vote accuracy with Euclidean
/// distance. Vote ties go to the tied class with the nearest member.
pub fn knn_accuracy<L: PartialEq>(points: &[Vec<f64>], labels: &[L], k: usize) -> Result<f64> {
    let n = points.len();
    if labels.len() != n {
        return Err(Error::invalid("labels and embeddings differ in length"));
    }
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k = {k} must satisfy 1 <= k < n = {n}")));
    }
    check_dims(points)?;
    let mut hits = 0;
    for i in 0..n {
        let mut nb: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (dist2(&points[i], &points[j]), j))
            .collect();
        nb.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        nb.truncate(k);
        // (votes, rank of nearest member) per distinct label
        let mut tally: Vec<(usize, usize, usize)> = Vec::new();
        for (rank, &(_, j)) in nb.iter().enumerate() {
            match tally.iter_mut().find(|t| labels[t.0] == labels[j]) {
                Some(t) => t.1 += 1,
                None => tally.push((j, 1, rank)),
            }
        }
        let winner = tally
            .iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
            .expect("k >= 1");
        if labels[winner.0] == labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Mean silhouette with Euclidean distance. Members of singleton clusters
/// score 0.
pub fn silhouette<L: PartialEq>(points: &[Vec<f64>], labels: &[L]) -> Result<f64> {
    let n = points.len();
    if labels.len() != n {
        return Err(Error::invalid("labels and embeddings differ in length"));
    }
    check_dims(points)?;
    let mut reps: Vec<usize> = Vec::new();
    let class: Vec<usize> = (0..n)
        .map(|i| match reps.iter().position(|&r| labels[r] == labels[i]) {
            Some(p) => p,
            None => {
                reps.push(i);
                reps.len() - 1
            }
        })
        .collect();
    let k = class.iter().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(Error::invalid("silhouette needs at least two labels"));
    }
    let sizes: Vec<usize> = (0..k).map(|c| class.iter().filter(|&&x| x == c).count()).collect();
    let mut total = 0.0;
    for i in 0..n {
        if sizes[class[i]] == 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in (0..n).filter(|&j| j != i) {
            sums[class[j]] += dist2(&points[i], &points[j]).sqrt();
        }
        let a = sums[class[i]] / (sizes[class[i]] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != class[i])
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub inertia: Vec<f64>,
}

/// Lloyd iterations from a seeded k-means++ start, until assignments stop
/// changing (at most 300 rounds). Empty clusters keep their centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} must satisfy 1 <= k <= n = {n}")));
    }
    check_dims(points)?;
    let mut rng = rng::seeded(seed);
    let mut centroids = vec![points[rng.gen_range(0..n)].clone()];
    while centroids.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, di) in d.iter().enumerate() {
                if u < *di {
                    pick = i;
                    break;
                }
                u -= di;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centroids.push(points[next].clone());
    }
    let assign = |centroids: &[Vec<f64>]| -> Vec<usize> {
        points
            .iter()
            .map(|p| {
                (0..k)
                    .min_by(|&a, &b| dist2(p, &centroids[a]).total_cmp(&dist2(p, &centroids[b])))
                    .expect("k >= 1")
            })
            .collect()
    };
    let inertia_of = |a: &[usize], c: &[Vec<f64>]| -> f64 {
        points.iter().zip(a).map(|(p, &j)| dist2(p, &c[j])).sum()
    };
    let mut assignments = assign(&centroids);
    let mut inertia = vec![inertia_of(&assignments, &centroids)];
    for _ in 0..300 {
        for (j, c) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&assignments)
                .filter(|(_, &a)| a == j)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            for (d, v) in c.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
        let next = assign(&centroids);
        inertia.push(inertia_of(&next, &centroids));
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok(KMeans {
        assignments,
        centroids,
        inertia,
    })
}

/// `|A ∩ B| / |A ∪ B|`, or `None` when both sets are empty.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> Option<f64> {
    let union = a.union(b).count();
    if union == 0 {
        return None;
    }
    Some(a.intersection(b).count() as f64 / union as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub pairs: usize,
}

impl Summary {
    fn of(v: &[f64]) -> Summary {
        if v.is_empty() {
            return Summary {
                mean: f64::NAN,
                std: f64::NAN,
                pairs: 0,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Summary {
            mean,
            std: var.sqrt(),
            pairs: v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterJaccard {
    pub cluster: usize,
    pub within: Summary,
    pub across: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JaccardReport {
    /// Pairwise similarities; `None` on the diagonal and for pairs of
    /// empty sets.
    pub matrix: Vec<Vec<Option<f64>>>,
    pub within: Summary,
    pub across: Summary,
    pub clusters: Vec<ClusterJaccard>,
    pub skipped_pairs: usize,
}

/// Tag-set similarity within and across clusters.
pub fn jaccard_matrix(tags: &[BTreeSet<String>], assignments: &[usize]) -> Result<JaccardReport> {
    let n = tags.len();
    if assignments.len() != n {
        return Err(Error::invalid("tags and assignments differ in length"));
    }
    let mut matrix = vec![vec![None; n]; n];
    let mut within = Vec::new();
    let mut across = Vec::new();
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let mut per: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); k];
    let mut skipped = 0;
    for i in 0..n {
        for j in i + 1..n {
            let Some(s) = jaccard(&tags[i], &tags[j]) else {
                log::warn!("items {i} and {j} both have no tags; pair skipped");
                skipped += 1;
                continue;
            };
            matrix[i][j] = Some(s);
            matrix[j][i] = Some(s);
            let (ci, cj) = (assignments[i], assignments[j]);
            if ci == cj {
                within.push(s);
                per[ci].0.push(s);
            } else {
                across.push(s);
                per[ci].1.push(s);
                per[cj].1.push(s);
            }
        }
    }
    Ok(JaccardReport {
        matrix,
        within: Summary::of(&within),
        across: Summary::of(&across),
        clusters: per
            .iter()
            .enumerate()
            .map(|(c, (w, a))| ClusterJaccard {
                cluster: c,
                within: Summary::of(w),
                across: Summary::of(a),
            })
            .collect(),
        skipped_pairs: skipped,
    })
}
