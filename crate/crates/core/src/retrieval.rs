//! Gallery indexing, ranking and recall metrics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::compose::{compose_queries, encode_targets, SsnParameters};
use crate::datamodel::{FeatureStore, TokenFeatures, Triplet};
use crate::error::{Result, SsnError};
use crate::numerics::Tensor;

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 50];
pub const SUBSET_KS: [usize; 3] = [1, 2, 3];

/// L2-normalized target embeddings of every gallery image, in id order.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryIndex {
    ids: Vec<u64>,
    rows: Tensor<f32>,
    param_hash: u64,
}

fn normalize_rows(rows: &mut Tensor<f32>) -> Result<()> {
    for r in 0..rows.rows() {
        let row = rows.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(SsnError::Numeric(format!("embedding row {r} has norm {n}")));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(())
}

impl GalleryIndex {
    /// Index over precomputed embeddings; rows are normalized here.
    pub fn from_rows(ids: Vec<u64>, mut rows: Tensor<f32>, param_hash: u64) -> Result<Self> {
        if ids.len() != rows.rows() {
            return Err(SsnError::Dimension(format!(
                "{} ids for {} rows",
                ids.len(),
                rows.rows()
            )));
        }
        normalize_rows(&mut rows)?;
        Ok(GalleryIndex {
            ids,
            rows: rows.as_matrix(),
            param_hash,
        })
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn rows(&self) -> &Tensor<f32> {
        &self.rows
    }

    pub fn param_hash(&self) -> u64 {
        self.param_hash
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn check(&self, params: &SsnParameters) -> Result<()> {
        let model = params.fingerprint();
        if model != self.param_hash {
            return Err(SsnError::StaleIndex {
                index: self.param_hash,
                model,
            });
        }
        Ok(())
    }

    /// Ranks every gallery item against a query embedding.
    pub fn rank(&self, query_id: u64, query: &[f32]) -> Result<RankedList> {
        if query.len() != self.rows.cols() {
            return Err(SsnError::Dimension(format!(
                "query of width {} against index of width {}",
                query.len(),
                self.rows.cols()
            )));
        }
        let n = query.iter().map(|v| v * v).sum::<f32>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(SsnError::Numeric(format!("query {query_id} has norm {n}")));
        }
        let scores: Vec<f32> = (0..self.len())
            .map(|r| {
                self.rows
                    .row(r)
                    .iter()
                    .zip(query)
                    .map(|(a, b)| a * (b / n))
                    .sum()
            })
            .collect();
        Ok(RankedList::from_scores(query_id, &self.ids, &scores))
    }
}

/// Encodes every target-role item of `store`.
pub fn build_index(store: &FeatureStore, params: &SsnParameters) -> Result<GalleryIndex> {
    let ids = store.gallery_ids();
    if ids.is_empty() {
        return Err(SsnError::Data("store has no gallery images".into()));
    }
    let items: Vec<&TokenFeatures> = ids
        .iter()
        .map(|&id| store.item(id))
        .collect::<Result<_>>()?;
    let rows = encode_targets(&items, params)?;
    GalleryIndex::from_rows(ids, rows, params.fingerprint())
}

/// Gallery ids by descending score; equal scores by ascending id.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub query_id: u64,
    pub ids: Vec<u64>,
    pub scores: Vec<f32>,
}

impl RankedList {
    pub fn from_scores(query_id: u64, ids: &[u64], scores: &[f32]) -> Self {
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(Ordering::Equal)
                .then(ids[a].cmp(&ids[b]))
        });
        RankedList {
            query_id,
            ids: order.iter().map(|&i| ids[i]).collect(),
            scores: order.iter().map(|&i| scores[i]).collect(),
        }
    }

    /// Zero-based position of `id`.
    pub fn rank_of(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    pub fn without(&self, id: u64) -> RankedList {
        let keep: Vec<usize> = (0..self.ids.len()).filter(|&i| self.ids[i] != id).collect();
        RankedList {
            query_id: self.query_id,
            ids: keep.iter().map(|&i| self.ids[i]).collect(),
            scores: keep.iter().map(|&i| self.scores[i]).collect(),
        }
    }

    /// Restriction to `keep`, re-ranked by the original scores.
    pub fn restricted(&self, keep: &[u64]) -> RankedList {
        let idx: Vec<usize> = (0..self.ids.len())
            .filter(|&i| keep.contains(&self.ids[i]))
            .collect();
        RankedList {
            query_id: self.query_id,
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            scores: idx.iter().map(|&i| self.scores[i]).collect(),
        }
    }
}

/// Ranks the gallery for one (reference, text) query.
pub fn query(
    reference: &TokenFeatures,
    text: &TokenFeatures,
    index: &GalleryIndex,
    params: &SsnParameters,
) -> Result<RankedList> {
    index.check(params)?;
    let q = compose_queries(&[(reference, text)], params)?;
    index.rank(text.item_id, q.row(0))
}

fn check_inputs(lists: &[RankedList], triplets: &[Triplet], k: usize) -> Result<()> {
    if k < 1 {
        return Err(SsnError::Argument("K must be at least 1".into()));
    }
    if lists.len() != triplets.len() {
        return Err(SsnError::Argument(format!(
            "{} ranked lists for {} triplets",
            lists.len(),
            triplets.len()
        )));
    }
    if lists.is_empty() {
        return Err(SsnError::Argument("no queries".into()));
    }
    Ok(())
}

/// Percentage of queries whose target is within the top `k`.
pub fn recall_at_k(lists: &[RankedList], triplets: &[Triplet], k: usize) -> Result<f64> {
    check_inputs(lists, triplets, k)?;
    let mut hits = 0usize;
    for (l, t) in lists.iter().zip(triplets) {
        let rank = l.rank_of(t.target_id).ok_or_else(|| {
            SsnError::Data(format!("target {} missing from the gallery", t.target_id))
        })?;
        hits += (rank < k) as usize;
    }
    Ok(100.0 * hits as f64 / lists.len() as f64)
}

/// Recall@k over the target and its six subset images only.
pub fn recall_subset_at_k(lists: &[RankedList], triplets: &[Triplet], k: usize) -> Result<f64> {
    check_inputs(lists, triplets, k)?;
    let mut hits = 0usize;
    for (l, t) in lists.iter().zip(triplets) {
        let subset = t.subset_ids.ok_or_else(|| {
            SsnError::Data(format!("triplet with text {} has no subset", t.text_id))
        })?;
        let mut keep = subset.to_vec();
        keep.push(t.target_id);
        let r = l.restricted(&keep);
        let rank = r.rank_of(t.target_id).ok_or_else(|| {
            SsnError::Data(format!("target {} missing from the gallery", t.target_id))
        })?;
        hits += (rank < k) as usize;
    }
    Ok(100.0 * hits as f64 / lists.len() as f64)
}

/// Two-decimal rounding, half away from zero, of a value whose decimal
/// expansion is short. Binary noise below 1e-6 (in units of the last kept
/// digit) is cleared first, so 74.505 rounds up even when stored as
/// 74.50499999999.
pub fn round2(x: f64) -> f64 {
    let cents = (x * 100.0 * 1e6).round() / 1e6;
    cents.round() / 100.0
}

/// `(R@5 + R_sub@1) / 2`, rounded to two decimals.
pub fn mean_of(recall_at_5: f64, subset_at_1: f64) -> f64 {
    round2((recall_at_5 + subset_at_1) / 2.0)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    #[serde(rename = "recall")]
    pub recall_at: BTreeMap<usize, f64>,
    #[serde(rename = "recall_subset")]
    pub subset_recall_at: BTreeMap<usize, f64>,
    pub mean_recall: Option<f64>,
}

/// Mean metric of a report.
pub fn mean_recall(report: &RecallReport) -> Result<f64> {
    let r5 = report
        .recall_at
        .get(&5)
        .ok_or_else(|| SsnError::Report("Recall@5 missing".into()))?;
    let s1 = report
        .subset_recall_at
        .get(&1)
        .ok_or_else(|| SsnError::Report("Recall_subset@1 missing".into()))?;
    Ok(mean_of(*r5, *s1))
}

impl RecallReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| SsnError::Report(e.to_string()))
    }

    /// Aligned table: recall columns, subset columns, then the mean.
    pub fn table(&self) -> String {
        let mut head = Vec::new();
        let mut vals = Vec::new();
        for (k, v) in &self.recall_at {
            head.push(format!("R@{k}"));
            vals.push(format!("{v:.2}"));
        }
        let split = head.len();
        for (k, v) in &self.subset_recall_at {
            head.push(format!("Rsub@{k}"));
            vals.push(format!("{v:.2}"));
        }
        let split2 = head.len();
        if let Some(m) = self.mean_recall {
            head.push("Avg".into());
            vals.push(format!("{m:.2}"));
        }
        let widths: Vec<usize> = head.iter().zip(&vals).map(|(h, v)| h.len().max(v.len())).collect();
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
                if i > 0 {
                    s.push_str(if i == split || i == split2 { " | " } else { "  " });
                }
                write!(s, "{c:>w$}").unwrap();
            }
            s
        };
        format!("{}\n{}\n", line(&head), line(&vals))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub subset_ks: Vec<usize>,
    /// Drop the query's own reference image from its ranking.
    pub exclude_reference: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ks: RECALL_KS.to_vec(),
            subset_ks: SUBSET_KS.to_vec(),
            exclude_reference: false,
        }
    }
}

/// Ranks the gallery for every triplet of `store`, with optional
/// replacement reference features.
fn rank_all(
    store: &FeatureStore,
    index: &GalleryIndex,
    params: &SsnParameters,
    refs: &HashMap<usize, TokenFeatures>,
    exclude_reference: bool,
) -> Result<Vec<RankedList>> {
    let trips = store.triplets();
    let mut pairs = Vec::with_capacity(trips.len());
    for (i, t) in trips.iter().enumerate() {
        let r = match refs.get(&i) {
            Some(f) => f,
            None => store.item(t.reference_id)?,
        };
        pairs.push((r, store.item(t.text_id)?));
    }
    let queries = compose_queries(&pairs, params)?;
    trips
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let l = index.rank(t.text_id, queries.row(i))?;
            Ok(if exclude_reference {
                l.without(t.reference_id)
            } else {
                l
            })
        })
        .collect()
}

fn report(lists: &[RankedList], triplets: &[Triplet], opts: &EvalOptions) -> Result<RecallReport> {
    let mut rep = RecallReport::default();
    for &k in &opts.ks {
        rep.recall_at.insert(k, recall_at_k(lists, triplets, k)?);
    }
    if triplets.iter().all(|t| t.subset_ids.is_some()) {
        for &k in &opts.subset_ks {
            rep.subset_recall_at.insert(k, recall_subset_at_k(lists, triplets, k)?);
        }
    }
    rep.mean_recall = mean_recall(&rep).ok();
    Ok(rep)
}

/// Recall report over every triplet of `store`, ranking its whole gallery.
pub fn evaluate(
    store: &FeatureStore,
    params: &SsnParameters,
    opts: &EvalOptions,
) -> Result<(RecallReport, Vec<RankedList>)> {
    let index = build_index(store, params)?;
    evaluate_with_index(store, &index, params, opts)
}

pub fn evaluate_with_index(
    store: &FeatureStore,
    index: &GalleryIndex,
    params: &SsnParameters,
    opts: &EvalOptions,
) -> Result<(RecallReport, Vec<RankedList>)> {
    index.check(params)?;
    let lists = rank_all(store, index, params, &HashMap::new(), opts.exclude_reference)?;
    Ok((report(&lists, store.triplets(), opts)?, lists))
}

fn rms(values: &[f32]) -> f64 {
    (values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / values.len().max(1) as f64).sqrt()
}

/// Reference features with i.i.d. Gaussian noise of standard deviation
/// `sigma * RMS`, taken separately for the tokens and the global vector.
pub fn perturb_reference(item: &TokenFeatures, sigma: f64, rng: &mut ChaCha8Rng) -> TokenFeatures {
    let mut out = item.clone();
    if sigma == 0.0 {
        return out;
    }
    let tok = Normal::new(0.0, sigma * rms(item.tokens.data())).expect("finite std");
    for v in out.tokens.data_mut() {
        *v += tok.sample(rng) as f32;
    }
    let glob = Normal::new(0.0, sigma * rms(&item.global)).expect("finite std");
    for v in out.global.iter_mut() {
        *v += glob.sample(rng) as f32;
    }
    out
}

/// Clean and reference-noised reports over the same gallery.
pub fn sensitivity_probe(
    store: &FeatureStore,
    params: &SsnParameters,
    sigma: f64,
    seed: u64,
    opts: &EvalOptions,
) -> Result<(RecallReport, RecallReport)> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(SsnError::Argument(format!("sigma must be non-negative, got {sigma}")));
    }
    let index = build_index(store, params)?;
    let (clean, _) = evaluate_with_index(store, &index, params, opts)?;
    let mut noisy = HashMap::new();
    for (i, t) in store.triplets().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        noisy.insert(i, perturb_reference(store.item(t.reference_id)?, sigma, &mut rng));
    }
    let lists = rank_all(store, &index, params, &noisy, opts.exclude_reference)?;
    Ok((clean, report(&lists, store.triplets(), opts)?))
}

#[cfg(test)]
mod tests;
