//! Exhaustive cosine ranking and R@k / AP evaluation in both directions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Side;
use crate::fisher_agg::{Aggregator, DescriptorStore, GlobalDescriptor};

#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    ids: Vec<String>,
    matrix: Vec<f64>,
    dim: usize,
    pub side: Side,
    pub aggregator: Aggregator,
    pub vocab_digest: String,
}

impl Gallery {
    pub fn new(
        ids: Vec<String>,
        vectors: Vec<Vec<f64>>,
        side: Side,
        aggregator: Aggregator,
        vocab_digest: &str,
    ) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(Error::dims(ids.len(), vectors.len()));
        }
        let dim = vectors.first().map_or(0, |v| v.len());
        let mut seen = BTreeSet::new();
        for (id, v) in ids.iter().zip(&vectors) {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate gallery id `{id}`")));
            }
            if v.len() != dim {
                return Err(Error::dims(dim, v.len()));
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !((n - 1.0).abs() <= 1e-6) {
                return Err(Error::InvalidInput(format!("gallery item `{id}` has norm {n}")));
            }
        }
        Ok(Self {
            ids,
            matrix: vectors.concat(),
            dim,
            side,
            aggregator,
            vocab_digest: vocab_digest.into(),
        })
    }

    pub fn from_store(store: &DescriptorStore) -> Result<Self> {
        Self::new(
            store.ids().to_vec(),
            (0..store.len()).map(|i| store.vector(i)).collect(),
            store.side,
            store.aggregator,
            &store.vocab_digest,
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.iter().any(|i| i == id)
    }

    fn check(&self, q: &GlobalDescriptor) -> Result<()> {
        if q.vocab_digest != self.vocab_digest {
            return Err(Error::DigestMismatch { expected: self.vocab_digest.clone(), actual: q.vocab_digest.clone() });
        }
        if q.aggregator != self.aggregator {
            return Err(Error::InvalidInput(format!(
                "query aggregator {} differs from gallery {}",
                q.aggregator, self.aggregator
            )));
        }
        if !self.is_empty() && q.dim() != self.dim {
            return Err(Error::dims(self.dim, q.dim()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranked {
    pub id: String,
    pub score: f64,
}

/// Full ranking by inner product, descending; ties by ascending id.
/// `exclude` drops one gallery id (a query's own entry).
pub fn rank_excluding(query: &GlobalDescriptor, gallery: &Gallery, exclude: Option<&str>) -> Result<Vec<Ranked>> {
    gallery.check(query)?;
    let mut out: Vec<Ranked> = (0..gallery.len())
        .filter(|&i| Some(gallery.ids[i].as_str()) != exclude)
        .map(|i| Ranked {
            id: gallery.ids[i].clone(),
            score: gallery.vector(i).iter().zip(&query.vector).map(|(a, b)| a * b).sum(),
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    Ok(out)
}

pub fn rank(query: &GlobalDescriptor, gallery: &Gallery) -> Result<Vec<Ranked>> {
    rank_excluding(query, gallery, None)
}

/// Query id → set of correct gallery ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroundTruth {
    pub matches: BTreeMap<String, BTreeSet<String>>,
}

impl GroundTruth {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::raster::write_bytes(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn insert(&mut self, query: &str, gallery_id: &str) {
        self.matches.entry(query.into()).or_default().insert(gallery_id.into());
    }

    pub fn get(&self, query: &str) -> Option<&BTreeSet<String>> {
        self.matches.get(query)
    }

    /// Gallery id → query ids.
    pub fn inverted(&self) -> Self {
        let mut inv = Self::default();
        for (q, set) in &self.matches {
            for g in set {
                inv.insert(g, q);
            }
        }
        inv
    }

    /// Every correct set is non-empty and refers to gallery items.
    pub fn validate(&self, gallery: &Gallery) -> Result<()> {
        for (q, set) in &self.matches {
            if set.is_empty() {
                return Err(Error::MissingGroundTruth(format!("empty correct set for `{q}`")));
            }
            if let Some(g) = set.iter().find(|g| !gallery.contains(g)) {
                return Err(Error::InvalidInput(format!("ground truth for `{q}` names unknown gallery id `{g}`")));
            }
        }
        Ok(())
    }
}

/// One query's ranked gallery ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub query: String,
    pub ids: Vec<String>,
}

fn correct_for<'a>(gt: &'a GroundTruth, q: &str) -> Result<&'a BTreeSet<String>> {
    gt.get(q).ok_or_else(|| Error::MissingGroundTruth(format!("no ground truth for query `{q}`")))
}

/// Fraction of queries with a correct id among the first `k`.
pub fn recall_at_k(rankings: &[Ranking], gt: &GroundTruth, k: usize) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::Empty("rankings"));
    }
    let mut hits = 0;
    for r in rankings {
        let correct = correct_for(gt, &r.query)?;
        if r.ids.iter().take(k).any(|id| correct.contains(id)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / rankings.len() as f64)
}

/// `(1/|C|)·Σ_{hits at rank r} (#correct ≤ r)/r`.
pub fn average_precision(ranking: &[String], correct: &BTreeSet<String>) -> Result<f64> {
    if correct.is_empty() {
        return Err(Error::MissingGroundTruth("empty correct set".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranking.iter().enumerate() {
        if correct.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / correct.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub direction: String,
    pub queries: usize,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aggregator: String,
    pub vocab_digest: String,
    pub config_digest: String,
    pub directions: Vec<DirectionMetrics>,
}

impl MetricsReport {
    pub fn direction(&self, name: &str) -> Option<&DirectionMetrics> {
        self.directions.iter().find(|d| d.direction == name)
    }

    /// Plain-text table, percentages with two decimals.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<22}{:>8}{:>8}{:>8}{:>8}{:>9}", "direction", "queries", "R@1", "R@5", "R@10", "AP");
        for d in &self.directions {
            let _ = writeln!(
                s,
                "{:<22}{:>8}{:>8.2}{:>8.2}{:>8.2}{:>9.2}",
                d.direction,
                d.queries,
                100.0 * d.recall_at_1,
                100.0 * d.recall_at_5,
                100.0 * d.recall_at_10,
                100.0 * d.ap
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("direction,queries,r1,r5,r10,ap\n");
        for d in &self.directions {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                d.direction, d.queries, d.recall_at_1, d.recall_at_5, d.recall_at_10, d.ap
            );
        }
        s
    }
}

/// Ranks every query that has ground truth against the gallery. Queries are
/// scored in parallel and collected in query order. When both sides are
/// the same, a query's own id is removed from its ranking.
pub fn evaluate_direction(
    queries: &Gallery,
    gallery: &Gallery,
    gt: &GroundTruth,
    require_all: bool,
) -> Result<DirectionMetrics> {
    gt.validate(gallery)?;
    let same_side = queries.side == gallery.side;
    let selected: Vec<usize> = (0..queries.len())
        .filter(|&i| require_all || gt.get(&queries.ids[i]).is_some())
        .collect();
    if selected.is_empty() {
        return Err(Error::MissingGroundTruth("no query has ground truth".into()));
    }
    let per_query: Vec<(Ranking, f64)> = selected
        .par_iter()
        .map(|&i| {
            let id = &queries.ids[i];
            let q = GlobalDescriptor {
                vector: queries.vector(i).to_vec(),
                aggregator: queries.aggregator,
                vocab_digest: queries.vocab_digest.clone(),
            };
            let ranked = rank_excluding(&q, gallery, same_side.then_some(id.as_str()))?;
            let ids: Vec<String> = ranked.into_iter().map(|r| r.id).collect();
            let ap = average_precision(&ids, correct_for(gt, id)?)?;
            Ok((Ranking { query: id.clone(), ids }, ap))
        })
        .collect::<Result<_>>()?;
    let rankings: Vec<Ranking> = per_query.iter().map(|p| p.0.clone()).collect();
    let ap = per_query.iter().map(|p| p.1).sum::<f64>() / per_query.len() as f64;
    Ok(DirectionMetrics {
        direction: format!("{}->{}", queries.side, gallery.side),
        queries: rankings.len(),
        recall_at_1: recall_at_k(&rankings, gt, 1)?,
        recall_at_5: recall_at_k(&rankings, gt, 5)?,
        recall_at_10: recall_at_k(&rankings, gt, 10)?,
        ap,
    })
}

/// Both directions: every query must have ground truth; in the reverse
/// direction only gallery items named by the ground truth act as queries.
pub fn evaluate(queries: &Gallery, gallery: &Gallery, gt: &GroundTruth, config_digest: &str) -> Result<MetricsReport> {
    if queries.vocab_digest != gallery.vocab_digest {
        return Err(Error::DigestMismatch { expected: gallery.vocab_digest.clone(), actual: queries.vocab_digest.clone() });
    }
    if queries.aggregator != gallery.aggregator {
        return Err(Error::InvalidInput(format!(
            "query aggregator {} differs from gallery {}",
            queries.aggregator, gallery.aggregator
        )));
    }
    let forward = evaluate_direction(queries, gallery, gt, true)?;
    let backward = evaluate_direction(gallery, queries, &gt.inverted(), false)?;
    Ok(MetricsReport {
        aggregator: gallery.aggregator.to_string(),
        vocab_digest: gallery.vocab_digest.clone(),
        config_digest: config_digest.into(),
        directions: vec![forward, backward],
    })
}

/// Index of every id, for callers that join rankings back to rows.
pub fn id_index(ids: &[String]) -> HashMap<&str, usize> {
    ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
}
