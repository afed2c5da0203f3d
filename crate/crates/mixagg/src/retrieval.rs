//! Descriptor database, exhaustive nearest-neighbour search, geodesic
//! ground truth, and recall@k evaluation.
//!
//! Similarity is the dot product on unit vectors everywhere (monotone in
//! Euclidean distance), with ties broken by ascending insertion index so
//! rankings are reproducible bit-for-bit.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{aggregate, MixVprParams};
use crate::data_io;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean Earth radius, metres.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Default success radius for ground truth, metres.
pub const DEFAULT_RADIUS_M: f64 = 25.0;

pub(crate) fn coords_in_range(lat: f64, lon: f64) -> std::result::Result<(), String> {
    if !(-90.0..=90.0).contains(&lat) {
        return Err(format!("latitude {lat} outside [-90, 90]"));
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(format!("longitude {lon} outside [-180, 180]"));
    }
    Ok(())
}

/// Great-circle distance between two (lat, lon) points in degrees, via the
/// haversine formula on a spherical Earth.
pub fn haversine_m(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    coords_in_range(a.0, a.1).map_err(Error::Data)?;
    coords_in_range(b.0, b.1).map_err(Error::Data)?;
    let (phi1, phi2) = (a.0.to_radians(), b.0.to_radians());
    let dphi = (b.0 - a.0).to_radians();
    let dlambda = (b.1 - a.1).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_M * h.sqrt().atan2((1.0 - h).sqrt()))
}

// ── Descriptor database ─────────────────────────────────────────────

/// Immutable collection of L2-normalized descriptors with ids and
/// optional geotags. Rows are validated to unit norm ± 1e-5 on build.
#[derive(Clone, Debug)]
pub struct DescriptorDb {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    geo: Vec<Option<(f64, f64)>>,
}

impl DescriptorDb {
    /// Builds a database from a `[num × dim]` descriptor matrix. Ids must
    /// be unique, `geo` must have one entry per row, and every row must be
    /// unit-norm within 1e-5.
    pub fn new(ids: Vec<String>, descriptors: &Tensor<f32>, geo: Vec<Option<(f64, f64)>>) -> Result<Self> {
        let (num, dim) = descriptors.dims2("descriptor db")?;
        if ids.len() != num || geo.len() != num {
            return Err(Error::Contract(format!(
                "row count mismatch: {num} descriptors, {} ids, {} geotags",
                ids.len(),
                geo.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Data(format!("duplicate descriptor id {id:?}")));
            }
        }
        for (i, tag) in geo.iter().enumerate() {
            if let Some((lat, lon)) = tag {
                coords_in_range(*lat, *lon)
                    .map_err(|msg| Error::Data(format!("id {:?}: {msg}", ids[i])))?;
            }
        }
        for i in 0..num {
            let row = &descriptors.data()[i * dim..(i + 1) * dim];
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::Contract(format!(
                    "descriptor {:?} has norm {norm}, expected 1 ± 1e-5",
                    ids[i]
                )));
            }
        }
        Ok(DescriptorDb {
            ids,
            dim,
            data: descriptors.data().to_vec(),
            geo,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn geo(&self, i: usize) -> Option<(f64, f64)> {
        self.geo[i]
    }
}

#[derive(Serialize, Deserialize)]
struct DbIdRecord {
    id: String,
    lat: Option<f64>,
    lon: Option<f64>,
}

/// Writes a database as `descriptors.mxt` (the matrix) plus `ids.jsonl`
/// (one id + optional geotag per row) inside `dir`.
pub fn save_db(db: &DescriptorDb, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let matrix = Tensor::new(vec![db.len(), db.dim()], db.data.clone())?;
    data_io::write_tensor(&dir.join("descriptors.mxt"), &matrix)?;
    let mut lines = String::new();
    for i in 0..db.len() {
        let rec = DbIdRecord {
            id: db.ids[i].clone(),
            lat: db.geo[i].map(|g| g.0),
            lon: db.geo[i].map(|g| g.1),
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| Error::Format(format!("id record serialization: {e}")))?;
        lines.push_str(&line);
        lines.push('\n');
    }
    std::fs::write(dir.join("ids.jsonl"), lines)?;
    Ok(())
}

/// Reads a database written by [`save_db`], revalidating all invariants.
pub fn load_db(dir: &Path) -> Result<DescriptorDb> {
    let matrix = data_io::read_tensor(&dir.join("descriptors.mxt"))?;
    let text = std::fs::read_to_string(dir.join("ids.jsonl"))?;
    let mut ids = Vec::new();
    let mut geo = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let rec: DbIdRecord = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        let tag = match (rec.lat, rec.lon) {
            (Some(lat), Some(lon)) => Some((lat, lon)),
            (None, None) => None,
            _ => {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: "geotag must set both lat and lon or neither".into(),
                })
            }
        };
        ids.push(rec.id);
        geo.push(tag);
    }
    DescriptorDb::new(ids, &matrix, geo)
}

// ── Ground truth ────────────────────────────────────────────────────

/// Reference indices within `radius_m` of each query, by geodesic
/// distance. Every row on both sides must carry a geotag.
pub fn ground_truth(
    queries: &DescriptorDb,
    refs: &DescriptorDb,
    radius_m: f64,
) -> Result<Vec<BTreeSet<usize>>> {
    if !(radius_m >= 0.0) || !radius_m.is_finite() {
        return Err(Error::Param(format!("radius must be finite and >= 0, got {radius_m}")));
    }
    let tag = |db: &DescriptorDb, i: usize| -> Result<(f64, f64)> {
        db.geo(i)
            .ok_or_else(|| Error::Data(format!("id {:?} has no geotag", db.id(i))))
    };
    let mut out = Vec::with_capacity(queries.len());
    for qi in 0..queries.len() {
        let q = tag(queries, qi)?;
        let mut positives = BTreeSet::new();
        for ri in 0..refs.len() {
            let r = tag(refs, ri)?;
            if haversine_m(q, r)? <= radius_m {
                positives.insert(ri);
            }
        }
        out.push(positives);
    }
    Ok(out)
}

// ── Top-k search ────────────────────────────────────────────────────

/// Ranking key: higher score wins; equal scores favour the earlier index.
#[derive(Clone, Copy, PartialEq)]
struct RankKey {
    score: f32,
    index: usize,
}

impl Eq for RankKey {}

impl Ord for RankKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for RankKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Result of one search; `truncated` flags a `k` larger than the database.
#[derive(Clone, Debug)]
pub struct TopkOutcome {
    pub indices: Vec<usize>,
    pub truncated: bool,
}

/// The `k` database rows most similar to `query` (largest dot product),
/// best first. Maintains a size-k heap rather than sorting the whole
/// score list, so it stays an independent code path from any full-sort
/// reference.
pub fn topk(db: &DescriptorDb, query: &[f32], k: usize) -> Result<TopkOutcome> {
    if k == 0 {
        return Err(Error::Param("k must be >= 1".into()));
    }
    if db.is_empty() {
        return Err(Error::Contract("top-k search on an empty database".into()));
    }
    if query.len() != db.dim() {
        return Err(Error::shape(
            "topk",
            format!("query has {} entries, database rows have {}", query.len(), db.dim()),
        ));
    }
    let truncated = k > db.len();
    let k = k.min(db.len());
    // Min-heap of the k best keys: the peeked element is the current
    // worst, so any candidate beating it swaps in. A later candidate with
    // an equal score never beats an earlier one (index tie-break).
    let mut heap: std::collections::BinaryHeap<std::cmp::Reverse<RankKey>> =
        std::collections::BinaryHeap::with_capacity(k + 1);
    for i in 0..db.len() {
        let row = db.row(i);
        let mut score = 0f32;
        for (a, b) in query.iter().zip(row) {
            score += a * b;
        }
        let key = RankKey { score, index: i };
        if heap.len() < k {
            heap.push(std::cmp::Reverse(key));
        } else if key > heap.peek().expect("nonempty heap").0 {
            heap.pop();
            heap.push(std::cmp::Reverse(key));
        }
    }
    let mut keys: Vec<RankKey> = heap.into_iter().map(|r| r.0).collect();
    keys.sort_by(|a, b| b.cmp(a));
    Ok(TopkOutcome {
        indices: keys.into_iter().map(|key| key.index).collect(),
        truncated,
    })
}

// ── Recall evaluation ───────────────────────────────────────────────

/// Evaluation summary. `recalls` maps k to the fraction of non-excluded
/// queries whose top-k hit a positive; queries with empty positive sets
/// are excluded from denominators and counted in `excluded_queries`.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub recalls: BTreeMap<usize, f64>,
    /// Ranked candidate ids per query, best first (up to the largest k).
    pub per_query: Vec<Vec<String>>,
    pub num_queries: usize,
    pub excluded_queries: usize,
    /// Timing side-channel (means), excluded from determinism guarantees.
    pub timing_ms: BTreeMap<String, f64>,
    /// Hash of the settings that produced this report, when known.
    pub config_hash: Option<String>,
}

impl EvalReport {
    /// JSON form: recalls keyed by stringified k, plus counters, timings,
    /// and the config hash when present.
    pub fn to_json(&self) -> serde_json::Value {
        let mut recalls = serde_json::Map::new();
        for (k, v) in &self.recalls {
            recalls.insert(k.to_string(), serde_json::json!(v));
        }
        let mut timing = serde_json::Map::new();
        for (name, v) in &self.timing_ms {
            timing.insert(name.clone(), serde_json::json!(v));
        }
        let mut obj = serde_json::json!({
            "recalls": serde_json::Value::Object(recalls),
            "num_queries": self.num_queries,
            "excluded_queries": self.excluded_queries,
            "timing_ms": serde_json::Value::Object(timing),
        });
        if let Some(hash) = &self.config_hash {
            obj.as_object_mut()
                .expect("object literal")
                .insert("config_hash".into(), serde_json::json!(hash));
        }
        obj
    }
}

/// Recall@k over `queries` against `refs`: the fraction of queries whose
/// top-k retrieved set intersects its positive set, for each requested k.
pub fn recall_at_k(
    queries: &DescriptorDb,
    refs: &DescriptorDb,
    truth: &[BTreeSet<usize>],
    ks: &[usize],
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Contract("recall evaluation needs at least one query".into()));
    }
    if truth.len() != queries.len() {
        return Err(Error::Contract(format!(
            "ground truth covers {} queries, database has {}",
            truth.len(),
            queries.len()
        )));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Param(format!("ks must be nonempty positive integers, got {ks:?}")));
    }
    if queries.dim() != refs.dim() {
        return Err(Error::shape(
            "recall_at_k",
            format!("query dim {} vs reference dim {}", queries.dim(), refs.dim()),
        ));
    }
    let max_k = *ks.iter().max().expect("nonempty ks");
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut per_query = Vec::with_capacity(queries.len());
    let mut excluded = 0usize;
    let start = Instant::now();
    for qi in 0..queries.len() {
        let outcome = topk(refs, queries.row(qi), max_k)?;
        per_query.push(outcome.indices.iter().map(|&i| refs.id(i).to_string()).collect());
        if truth[qi].is_empty() {
            excluded += 1;
            continue;
        }
        for &k in ks {
            let hit = outcome.indices.iter().take(k).any(|i| truth[qi].contains(i));
            if hit {
                *hits.get_mut(&k).expect("preseeded key") += 1;
            }
        }
    }
    let search_ms = start.elapsed().as_secs_f64() * 1e3 / queries.len() as f64;
    let denom = queries.len() - excluded;
    if denom == 0 {
        log::warn!("every query was excluded (no in-radius positives); recalls are 0");
    }
    let recalls = hits
        .into_iter()
        .map(|(k, h)| (k, if denom == 0 { 0.0 } else { h as f64 / denom as f64 }))
        .collect();
    let mut timing_ms = BTreeMap::new();
    timing_ms.insert("search_ms_per_query".to_string(), search_ms);
    Ok(EvalReport {
        recalls,
        per_query,
        num_queries: queries.len(),
        excluded_queries: excluded,
        timing_ms,
        config_hash: None,
    })
}

// ── Latency benchmark ───────────────────────────────────────────────

/// Wall-clock statistics for descriptor extraction. `noisy` flags a >3×
/// disagreement between the two measurement passes.
#[derive(Clone, Debug)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub samples: usize,
    pub pass_ratio: f64,
    pub noisy: bool,
}

/// Times [`aggregate`] on seeded random inputs: `warmup` discarded calls,
/// then two passes of `n` measured calls each. Statistics cover both
/// passes; the ratio of pass means feeds the `noisy` flag. Numbers are
/// machine-dependent and for reporting only.
pub fn bench_latency(params: &MixVprParams<f32>, n: usize, warmup: usize, seed: u64) -> Result<LatencyStats> {
    if n == 0 {
        return Err(Error::Param("benchmark needs n >= 1".into()));
    }
    let cfg = &params.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel = cfg.channels * cfg.height * cfg.width;
    let mut make_input = || -> Result<Tensor<f32>> {
        Tensor::new(
            vec![cfg.channels, cfg.height, cfg.width],
            (0..numel).map(|_| rng.random_range(-1.0..1.0f64) as f32).collect(),
        )
    };
    for _ in 0..warmup {
        aggregate(params, &make_input()?)?;
    }
    let mut pass_means = [0.0f64; 2];
    let mut samples_ms = Vec::with_capacity(2 * n);
    for (pass, mean_slot) in pass_means.iter_mut().enumerate() {
        let mut total = 0.0;
        for _ in 0..n {
            let input = make_input()?;
            let start = Instant::now();
            let out = aggregate(params, &input)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(out);
            samples_ms.push(ms);
            total += ms;
        }
        *mean_slot = total / n as f64;
        let _ = pass;
    }
    samples_ms.sort_by(f64::total_cmp);
    let pct = |q: f64| -> f64 {
        let rank = ((q * samples_ms.len() as f64).ceil() as usize).clamp(1, samples_ms.len());
        samples_ms[rank - 1]
    };
    let mean_ms = samples_ms.iter().sum::<f64>() / samples_ms.len() as f64;
    let (lo, hi) = (
        pass_means[0].min(pass_means[1]).max(f64::MIN_POSITIVE),
        pass_means[0].max(pass_means[1]),
    );
    let pass_ratio = hi / lo;
    if pass_ratio > 3.0 {
        log::warn!("benchmark passes disagree by {pass_ratio:.1}x; treat results as noisy");
    }
    Ok(LatencyStats {
        mean_ms,
        p50_ms: pct(0.50),
        p95_ms: pct(0.95),
        samples: samples_ms.len(),
        pass_ratio,
        noisy: pass_ratio > 3.0,
    })
}
