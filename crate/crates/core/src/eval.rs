//! Embedding extraction, cosine retrieval with CMC/mAP, and the linear probe.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use candle_core::DType;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardMode, ReidModel};
use crate::sample::Sample;
use crate::seed::SeedStream;

/// Number of CMC entries written to reports.
pub const CMC_RANKS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    Standard,
    ClothChanging,
}

impl fmt::Display for ProtocolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtocolMode::Standard => "standard",
            ProtocolMode::ClothChanging => "cloth_changing",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub mode: ProtocolMode,
    /// Also drop every gallery item shot by the query's camera, whatever its identity.
    #[serde(default)]
    pub cross_camera_only: bool,
}

impl Protocol {
    pub const STANDARD: Protocol = Protocol {
        mode: ProtocolMode::Standard,
        cross_camera_only: false,
    };
    pub const CLOTH_CHANGING: Protocol = Protocol {
        mode: ProtocolMode::ClothChanging,
        cross_camera_only: false,
    };
}

/// The labels retrieval needs from a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetrievalLabels {
    pub identity: u32,
    pub camera: u32,
    pub clothes: u32,
}

impl From<&Sample> for RetrievalLabels {
    fn from(s: &Sample) -> Self {
        Self {
            identity: s.identity,
            camera: s.camera,
            clothes: s.clothes,
        }
    }
}

/// Which pooled vector serves as the retrieval embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    PreBn,
    #[default]
    PostBn,
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Unit-norm embeddings from the ungated identity path, in input order.
pub fn extract_embeddings(
    model: &ReidModel,
    samples: &[&Sample],
    batch_size: usize,
    source: EmbeddingSource,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let x = model.images_to_tensor(&images)?;
        let o = model.forward(&x, ForwardMode::Eval, false)?;
        let e = match source {
            EmbeddingSource::PreBn => o.embedding_pre_bn,
            EmbeddingSource::PostBn => o.embedding_post_bn,
        };
        let rows = e.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        out.extend(rows.into_iter().map(normalize));
    }
    Ok(out)
}

/// `true` where a gallery item takes part in the query's ranking.
pub fn valid_gallery_mask(query: &RetrievalLabels, gallery: &[RetrievalLabels], protocol: Protocol) -> Vec<bool> {
    gallery
        .iter()
        .map(|g| {
            let same_id = g.identity == query.identity;
            if same_id && g.camera == query.camera {
                return false;
            }
            if protocol.mode == ProtocolMode::ClothChanging && same_id && g.clothes == query.clothes {
                return false;
            }
            !(protocol.cross_camera_only && g.camera == query.camera)
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Valid gallery indices by descending similarity; ties keep gallery order.
pub fn rank_gallery(query: &[f64], gallery: &[Vec<f64>], valid: &[bool]) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = gallery
        .iter()
        .enumerate()
        .filter(|(i, _)| valid[*i])
        .map(|(i, g)| (i, dot(query, g)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().map(|(i, _)| i).collect()
}

/// AP and first-hit rank (0-based) of a relevance list; `None` without positives.
pub fn average_precision(relevant: &[bool]) -> Option<(f64, usize)> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    let mut first = None;
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
            first.get_or_insert(k);
        }
    }
    Some((sum / total as f64, first.unwrap()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub target: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub protocol: Protocol,
    pub rank1: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc: Vec<f64>,
    pub num_queries: usize,
    pub num_valid_queries: usize,
    /// Per-query AP; `None` for queries without a valid positive.
    pub average_precisions: Vec<Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub probe: Option<ProbeResult>,
}

/// CMC and mAP over every query with at least one valid positive.
pub fn compute_cmc_map(
    query_emb: &[Vec<f64>],
    query_labels: &[RetrievalLabels],
    gallery_emb: &[Vec<f64>],
    gallery_labels: &[RetrievalLabels],
    protocol: Protocol,
) -> Result<RetrievalReport> {
    if query_emb.len() != query_labels.len() || gallery_emb.len() != gallery_labels.len() {
        return Err(Error::Argument("one label per embedding required".into()));
    }
    let per_query: Vec<Option<(f64, usize)>> = query_emb
        .par_iter()
        .zip(query_labels.par_iter())
        .map(|(q, ql)| {
            let valid = valid_gallery_mask(ql, gallery_labels, protocol);
            let ranked = rank_gallery(q, gallery_emb, &valid);
            let relevant: Vec<bool> = ranked
                .iter()
                .map(|&g| gallery_labels[g].identity == ql.identity)
                .collect();
            average_precision(&relevant)
        })
        .collect();
    let scored: Vec<(f64, usize)> = per_query.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::Evaluation(format!(
            "no query has a valid positive under the {} protocol",
            protocol.mode
        )));
    }
    let n = scored.len() as f64;
    let cmc: Vec<f64> = (0..CMC_RANKS)
        .map(|k| scored.iter().filter(|(_, first)| *first <= k).count() as f64 / n)
        .collect();
    let map = scored.iter().map(|(ap, _)| ap).sum::<f64>() / n;
    Ok(RetrievalReport {
        protocol,
        rank1: cmc[0],
        map,
        cmc,
        num_queries: query_emb.len(),
        num_valid_queries: scored.len(),
        average_precisions: per_query.iter().map(|p| p.map(|(ap, _)| ap)).collect(),
        probe: None,
    })
}

/// One random gallery image per identity.
pub fn single_shot_gallery(gallery_labels: &[RetrievalLabels], rng: &mut impl Rng) -> Vec<usize> {
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, g) in gallery_labels.iter().enumerate() {
        by_id.entry(g.identity).or_default().push(i);
    }
    by_id.values().map(|v| *v.choose(rng).expect("non-empty")).collect()
}

/// Averages reports over `trials` single-shot galleries drawn from `seed`.
pub fn single_shot_report(
    query_emb: &[Vec<f64>],
    query_labels: &[RetrievalLabels],
    gallery_emb: &[Vec<f64>],
    gallery_labels: &[RetrievalLabels],
    protocol: Protocol,
    trials: usize,
    seed: SeedStream,
) -> Result<RetrievalReport> {
    if trials == 0 {
        return Err(Error::Argument(
            "single-shot evaluation needs at least one trial".into(),
        ));
    }
    let mut reports = Vec::with_capacity(trials);
    for t in 0..trials {
        let pick = single_shot_gallery(gallery_labels, &mut seed.child(t as u64).rng());
        let emb: Vec<Vec<f64>> = pick.iter().map(|&i| gallery_emb[i].clone()).collect();
        let lab: Vec<RetrievalLabels> = pick.iter().map(|&i| gallery_labels[i]).collect();
        reports.push(compute_cmc_map(query_emb, query_labels, &emb, &lab, protocol)?);
    }
    let n = trials as f64;
    let mut avg = reports[0].clone();
    avg.map = reports.iter().map(|r| r.map).sum::<f64>() / n;
    avg.cmc = (0..CMC_RANKS)
        .map(|k| reports.iter().map(|r| r.cmc[k]).sum::<f64>() / n)
        .collect();
    avg.rank1 = avg.cmc[0];
    avg.num_valid_queries = reports.iter().map(|r| r.num_valid_queries).min().unwrap_or(0);
    avg.average_precisions = (0..query_emb.len())
        .map(|q| {
            let aps: Vec<f64> = reports.iter().filter_map(|r| r.average_precisions[q]).collect();
            (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
        })
        .collect();
    Ok(avg)
}

/// Writes `query_id,rank,gallery_id,match` rows for the top `k` of every query.
pub fn write_top_k_csv(
    path: &Path,
    query_ids: &[&str],
    query_emb: &[Vec<f64>],
    query_labels: &[RetrievalLabels],
    gallery_ids: &[&str],
    gallery_emb: &[Vec<f64>],
    gallery_labels: &[RetrievalLabels],
    protocol: Protocol,
    k: usize,
) -> Result<()> {
    let mut out = String::from("query_id,rank,gallery_id,match\n");
    for (qi, q) in query_emb.iter().enumerate() {
        let valid = valid_gallery_mask(&query_labels[qi], gallery_labels, protocol);
        for (rank, g) in rank_gallery(q, gallery_emb, &valid).into_iter().take(k).enumerate() {
            let hit = u8::from(gallery_labels[g].identity == query_labels[qi].identity);
            out.push_str(&format!("{},{},{},{hit}\n", query_ids[qi], rank + 1, gallery_ids[g]));
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub target: String,
    pub accuracy: f64,
    pub num_classes: usize,
    pub train_size: usize,
    pub test_size: usize,
}

/// Held-out accuracy of a softmax-regression probe on a seeded 70/30 split.
pub fn linear_probe(embeddings: &[Vec<f64>], labels: &[u32], split_seed: u64) -> Result<ProbeReport> {
    if embeddings.len() != labels.len() {
        return Err(Error::Argument("probe: one label per embedding required".into()));
    }
    let classes: Vec<u32> = {
        let mut c = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    if classes.len() < 2 {
        return Err(Error::Probe(format!(
            "probe needs at least two classes, found {}",
            classes.len()
        )));
    }
    let class_of: BTreeMap<u32, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let y: Vec<usize> = labels.iter().map(|l| class_of[l]).collect();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut SeedStream::new(split_seed).named("probe-split").rng());
    let n_train = ((labels.len() as f64) * 0.7).round() as usize;
    let (train, test) = order.split_at(n_train.clamp(1, labels.len() - 1));

    let d = embeddings[0].len();
    let c = classes.len();
    // standardize with training statistics
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for &i in train {
        for j in 0..d {
            mean[j] += embeddings[i][j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    for &i in train {
        for j in 0..d {
            std[j] += (embeddings[i][j] - mean[j]).powi(2);
        }
    }
    std.iter_mut()
        .for_each(|s| *s = (*s / train.len() as f64).sqrt().max(1e-8));
    let x = |i: usize| -> Vec<f64> { (0..d).map(|j| (embeddings[i][j] - mean[j]) / std[j]).collect() };
    let xtr: Vec<Vec<f64>> = train.iter().map(|&i| x(i)).collect();

    let mut w = vec![vec![0.0; d + 1]; c];
    let (lr, l2, iters) = (0.5, 1e-3, 300);
    let logits = |w: &[Vec<f64>], xi: &[f64]| -> Vec<f64> { w.iter().map(|wc| wc[d] + dot(&wc[..d], xi)).collect() };
    for _ in 0..iters {
        let mut grad = vec![vec![0.0; d + 1]; c];
        for (xi, &i) in xtr.iter().zip(train) {
            let z = logits(&w, xi);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..c {
                let g = e[k] / s - f64::from(u8::from(k == y[i]));
                for j in 0..d {
                    grad[k][j] += g * xi[j];
                }
                grad[k][d] += g;
            }
        }
        let n = xtr.len() as f64;
        for k in 0..c {
            for j in 0..=d {
                let reg = if j < d { l2 * w[k][j] } else { 0.0 };
                w[k][j] -= lr * (grad[k][j] / n + reg);
            }
        }
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let z = logits(&w, &x(i));
            let best = (0..c).fold(0, |b, k| if z[k] > z[b] { k } else { b });
            best == y[i]
        })
        .count();
    Ok(ProbeReport {
        target: String::new(),
        accuracy: correct as f64 / test.len() as f64,
        num_classes: c,
        train_size: train.len(),
        test_size: test.len(),
    })
}

/// Probe of hairstyle decodability.
pub fn hairstyle_probe(embeddings: &[Vec<f64>], hairstyle_labels: &[u32], split_seed: u64) -> Result<ProbeReport> {
    let mut r = linear_probe(embeddings, hairstyle_labels, split_seed)?;
    r.target = "hairstyle".into();
    Ok(r)
}
