use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Topic centroids in a (mean-centred) sentence feature space plus disjoint
/// keyword lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicModel {
    pub m: usize,
    /// Sharpness of the similarity softmax: `d ∝ exp(tau · cos)`.
    pub tau: f64,
    pub keywords: Vec<Vec<String>>,
    pub centroids: Vec<Vec<f64>>,
    /// Mean training feature vector, subtracted before any similarity.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub center: Vec<f64>,
}

/// Probability of a sentence belonging to each topic.
#[derive(Clone, Debug, PartialEq)]
pub struct TopicDistribution(pub Vec<f64>);

impl TopicDistribution {
    pub fn get(&self, b: usize) -> f64 {
        self.0[b]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopicFitConfig {
    pub m: usize,
    pub j: usize,
    pub tau: f64,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for TopicFitConfig {
    fn default() -> Self {
        Self {
            m: 2,
            j: 4,
            tau: 5.0,
            seed: 0,
            restarts: 5,
            max_iter: 100,
        }
    }
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 0.0).then(|| v.iter().map(|x| x / norm).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Spherical k-means with k-means++ seeding; returns (centroids, assignment).
pub fn spherical_kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    restarts: usize,
    max_iter: usize,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if k == 0 || k > points.len() {
        return Err(Error::Config(format!(
            "cannot form {k} clusters from {} points",
            points.len()
        )));
    }
    let unit: Vec<Vec<f64>> = points
        .iter()
        .map(|p| normalized(p).unwrap_or_else(|| p.clone()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<Vec<f64>>, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let mut centroids = vec![unit[rng.random_range(0..unit.len())].clone()];
        while centroids.len() < k {
            let dist: Vec<f64> = unit
                .iter()
                .map(|p| {
                    centroids
                        .iter()
                        .map(|c| (1.0 - dot(p, c)).max(0.0))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let total: f64 = dist.iter().sum();
            let pick = if total > 0.0 {
                let mut r = rng.random_range(0.0..total);
                dist.iter()
                    .position(|&d| {
                        r -= d;
                        r < 0.0
                    })
                    .unwrap_or(unit.len() - 1)
            } else {
                rng.random_range(0..unit.len())
            };
            centroids.push(unit[pick].clone());
        }
        let mut assign = vec![usize::MAX; unit.len()];
        for _ in 0..max_iter {
            let next: Vec<usize> = unit
                .iter()
                .map(|p| {
                    let mut bi = 0;
                    for (i, c) in centroids.iter().enumerate() {
                        if dot(p, c) > dot(p, &centroids[bi]) {
                            bi = i;
                        }
                    }
                    bi
                })
                .collect();
            let changed = next != assign;
            assign = next;
            for (c, centroid) in centroids.iter_mut().enumerate() {
                let mut sum = vec![0.0; unit[0].len()];
                for (p, _) in unit.iter().zip(&assign).filter(|(_, &a)| a == c) {
                    sum.iter_mut().zip(p).for_each(|(s, x)| *s += x);
                }
                if let Some(u) = normalized(&sum) {
                    *centroid = u;
                }
            }
            if !changed {
                break;
            }
        }
        let objective: f64 = unit.iter().zip(&assign).map(|(p, &a)| dot(p, &centroids[a])).sum();
        if best.as_ref().is_none_or(|(o, _, _)| objective > *o) {
            best = Some((objective, centroids, assign));
        }
    }
    let (_, centroids, assign) = best.expect("at least one restart");
    Ok((centroids, assign))
}

/// Greedy disjoint keyword selection by within-cluster tf-idf.
///
/// `docs[i]` lists the words of document `i`, `assign[i]` its cluster.
pub fn select_keywords(
    docs: &[Vec<String>],
    assign: &[usize],
    m: usize,
    j: usize,
) -> Result<Vec<Vec<String>>> {
    let n_docs = docs.len() as f64;
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in docs {
        let uniq: BTreeSet<&str> = doc.iter().map(String::as_str).collect();
        for w in uniq {
            *df.entry(w).or_default() += 1;
        }
    }
    let mut candidates: Vec<(f64, usize, &str)> = Vec::new();
    for b in 0..m {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut total = 0usize;
        for (doc, _) in docs.iter().zip(assign).filter(|(_, &a)| a == b) {
            for w in doc {
                *counts.entry(w.as_str()).or_default() += 1;
                total += 1;
            }
        }
        for (w, c) in counts {
            let tf = c as f64 / total as f64;
            let idf = (n_docs / df[w] as f64).ln();
            candidates.push((tf * idf, b, w));
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(b.2))
    });
    let mut claimed: BTreeSet<&str> = BTreeSet::new();
    let mut keywords = vec![Vec::new(); m];
    for (_, b, w) in candidates {
        if keywords[b].len() < j && claimed.insert(w) {
            keywords[b].push(w.to_string());
        }
    }
    if let Some(b) = keywords.iter().position(|k| k.len() < j) {
        return Err(Error::Config(format!(
            "topic {b} has only {} distinct words available, {j} keywords requested",
            keywords[b].len()
        )));
    }
    Ok(keywords)
}

impl TopicModel {
    /// Cluster document feature vectors and pick keywords.
    ///
    /// `docs` are the words of each training conversation and `features`
    /// the matching document vectors.
    pub fn fit(docs: &[Vec<String>], features: &[Vec<f64>], config: &TopicFitConfig) -> Result<Self> {
        if config.m == 0 || config.j == 0 {
            return Err(Error::Config("m and j must be at least 1".into()));
        }
        if docs.is_empty() || docs.len() != features.len() {
            return Err(Error::Input(format!(
                "{} documents with {} features",
                docs.len(),
                features.len()
            )));
        }
        if config.m > docs.len() {
            return Err(Error::Config(format!(
                "{} topics requested from {} conversations",
                config.m,
                docs.len()
            )));
        }
        let dim = features[0].len();
        let mut center = vec![0.0; dim];
        for e in features {
            center.iter_mut().zip(e).for_each(|(c, x)| *c += x / features.len() as f64);
        }
        let centred: Vec<Vec<f64>> = features
            .iter()
            .map(|e| e.iter().zip(&center).map(|(x, c)| x - c).collect())
            .collect();
        let (centroids, assign) =
            spherical_kmeans(&centred, config.m, config.seed, config.restarts, config.max_iter)?;
        let keywords = select_keywords(docs, &assign, config.m, config.j)?;
        Ok(Self {
            m: config.m,
            tau: config.tau,
            keywords,
            centroids,
            center,
        })
    }

    /// Most probable topic of a feature vector.
    pub fn assign(&self, features: &[f64]) -> usize {
        let d = self.infer(features);
        (0..self.m)
            .max_by(|&a, &b| d.0[a].partial_cmp(&d.0[b]).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a)))
            .unwrap_or(0)
    }

    /// `softmax(tau · cos(e - center, centroid_b))`; an all-zero vector gives
    /// the uniform distribution.
    pub fn infer(&self, features: &[f64]) -> TopicDistribution {
        let uniform = || TopicDistribution(vec![1.0 / self.m as f64; self.m]);
        if features.iter().all(|&x| x == 0.0) {
            return uniform();
        }
        let shifted: Vec<f64> = if self.center.is_empty() {
            features.to_vec()
        } else {
            features.iter().zip(&self.center).map(|(x, c)| x - c).collect()
        };
        let Some(e) = normalized(&shifted) else {
            return uniform();
        };
        let logits: Vec<f64> = self
            .centroids
            .iter()
            .map(|c| normalized(c).map_or(0.0, |u| self.tau * dot(&e, &u)))
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        TopicDistribution(exp.into_iter().map(|v| v / z).collect())
    }

    /// Topic whose keyword list contains `word`.
    pub fn topic_of(&self, word: &str) -> Option<usize> {
        self.keywords.iter().position(|k| k.iter().any(|w| w == word))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let model: Self = serde_json::from_str(&text)?;
        if model.keywords.len() != model.m || model.centroids.len() != model.m {
            return Err(Error::Input("topic model lists do not match m".into()));
        }
        Ok(model)
    }
}
