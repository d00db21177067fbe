//! Exhaustive Euclidean retrieval and the evaluation metrics: top-k
//! accuracy, landmark NME and attribute average precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LandmarkTarget;
use crate::tensor::Tensor;

pub const DEFAULT_KS: [usize; 6] = [1, 10, 20, 30, 40, 50];

#[derive(Clone, Debug, PartialEq)]
pub struct Gallery {
    embeddings: Vec<Vec<f64>>,
    item_ids: Vec<usize>,
}

impl Gallery {
    pub fn new(embeddings: Vec<Vec<f64>>, item_ids: Vec<usize>) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::Argument("gallery must hold at least one item".into()));
        }
        if embeddings.len() != item_ids.len() {
            return Err(Error::shape(format!(
                "{} gallery embeddings but {} item ids",
                embeddings.len(),
                item_ids.len()
            )));
        }
        let dim = embeddings[0].len();
        if embeddings.iter().any(|e| e.len() != dim) {
            return Err(Error::shape("gallery embeddings differ in length"));
        }
        if embeddings.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite gallery embedding".into()));
        }
        Ok(Gallery { embeddings, item_ids })
    }

    pub fn from_tensors(embeddings: &[Tensor], item_ids: Vec<usize>) -> Result<Self> {
        Self::new(embeddings.iter().map(|t| t.data().to_vec()).collect(), item_ids)
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn item_ids(&self) -> &[usize] {
        &self.item_ids
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gallery indices of every query, nearest first. Equal distances keep
/// gallery order.
pub fn rank_queries(queries: &[Vec<f64>], gallery: &Gallery) -> Result<Vec<Vec<usize>>> {
    queries
        .iter()
        .enumerate()
        .map(|(qi, q)| {
            if q.len() != gallery.dim() {
                return Err(Error::shape(format!(
                    "query {qi} has dimension {}, gallery has {}",
                    q.len(),
                    gallery.dim()
                )));
            }
            let dist: Vec<f64> = gallery.embeddings.iter().map(|g| squared_distance(q, g)).collect();
            let mut order: Vec<usize> = (0..gallery.len()).collect();
            order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
            Ok(order)
        })
        .collect()
}

/// Removes each query's own gallery row from its ranking, for evaluation
/// where queries and gallery are the same images.
pub fn exclude_self(ranked: &mut [Vec<usize>], self_index: &[usize]) -> Result<()> {
    if ranked.len() != self_index.len() {
        return Err(Error::shape("one self index per query is required"));
    }
    for (list, &own) in ranked.iter_mut().zip(self_index) {
        list.retain(|&g| g != own);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub acc_at_k: BTreeMap<usize, f64>,
    /// 1-based rank of the first correct gallery entry; `None` when the
    /// query's item has no gallery entry.
    pub ranks: Vec<Option<usize>>,
    pub unmatched: usize,
}

pub fn topk_accuracy(ranked: &[Vec<usize>], query_ids: &[usize], gallery_ids: &[usize], ks: &[usize]) -> Result<TopK> {
    if ranked.len() != query_ids.len() {
        return Err(Error::shape(format!("{} rankings for {} query ids", ranked.len(), query_ids.len())));
    }
    if ks.contains(&0) {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let mut ranks = Vec::with_capacity(ranked.len());
    for (list, &qid) in ranked.iter().zip(query_ids) {
        let mut rank = None;
        for (pos, &g) in list.iter().enumerate() {
            let gid = *gallery_ids.get(g).ok_or_else(|| Error::Argument(format!("gallery index {g} out of range")))?;
            if gid == qid {
                rank = Some(pos + 1);
                break;
            }
        }
        ranks.push(rank);
    }
    let matched: Vec<usize> = ranks.iter().flatten().copied().collect();
    let unmatched = ranks.len() - matched.len();
    if matched.is_empty() {
        return Err(Error::Argument("no query item appears in the gallery".into()));
    }
    let acc_at_k =
        ks.iter().map(|&k| (k, matched.iter().filter(|&&r| r <= k).count() as f64 / matched.len() as f64)).collect();
    Ok(TopK { acc_at_k, ranks, unmatched })
}

/// Top-k accuracy over the queries selected by `keep`.
pub fn subset_accuracy(topk: &TopK, keep: impl Fn(usize) -> bool, ks: &[usize]) -> Option<BTreeMap<usize, f64>> {
    let ranks: Vec<usize> = topk.ranks.iter().enumerate().filter(|&(q, _)| keep(q)).filter_map(|(_, r)| *r).collect();
    if ranks.is_empty() {
        return None;
    }
    Some(ks.iter().map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)).collect())
}

/// First maximum of a `[H, W]` plane in row-major order.
fn argmax(plane: &[f64], w: usize) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in plane.iter().enumerate() {
        if v > plane[best] {
            best = i;
        }
    }
    (best / w, best % w)
}

/// Per-landmark normalized mean error; `None` for landmarks never visible.
pub fn landmark_nme(preds: &[Tensor], targets: &[&LandmarkTarget]) -> Result<Vec<Option<f64>>> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::shape(format!("{} heatmap sets for {} targets", preds.len(), targets.len())));
    }
    let (m, h, w) = preds[0].dims3()?;
    let mut sum = vec![0.0; m];
    let mut count = vec![0usize; m];
    for (pred, target) in preds.iter().zip(targets) {
        if pred.shape() != [m, h, w] || target.num_landmarks() != m {
            return Err(Error::shape("heatmap shapes differ across samples"));
        }
        for j in 0..m {
            if !target.visibility()[j] {
                continue;
            }
            let (r, c) = argmax(&pred.data()[j * h * w..(j + 1) * h * w], w);
            let (gr, gc) = target.coords()[j];
            sum[j] += ((r as f64 - gr).powi(2) + (c as f64 - gc).powi(2)).sqrt() / w as f64;
            count[j] += 1;
        }
    }
    Ok(sum.iter().zip(&count).map(|(&s, &n)| (n > 0).then(|| s / n as f64)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeAp {
    /// `None` for attributes without positives.
    pub ap: Vec<Option<f64>>,
    pub map: Option<f64>,
    pub excluded: usize,
}

/// Average of the precision at each positive's rank, per attribute column.
/// Equal scores keep sample order.
pub fn attribute_map(scores: &[Vec<f64>], targets: &[Vec<bool>]) -> Result<AttributeAp> {
    if scores.len() != targets.len() {
        return Err(Error::shape(format!("{} score rows for {} target rows", scores.len(), targets.len())));
    }
    let n = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != n) || targets.iter().any(|r| r.len() != n) {
        return Err(Error::shape("attribute rows differ in length"));
    }
    let mut ap = Vec::with_capacity(n);
    for a in 0..n {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&i, &j| scores[j][a].total_cmp(&scores[i][a]).then(i.cmp(&j)));
        let (mut hits, mut total) = (0usize, 0.0);
        for (pos, &i) in order.iter().enumerate() {
            if targets[i][a] {
                hits += 1;
                total += hits as f64 / (pos + 1) as f64;
            }
        }
        ap.push((hits > 0).then(|| total / hits as f64));
    }
    let included: Vec<f64> = ap.iter().flatten().copied().collect();
    let map = (!included.is_empty()).then(|| included.iter().sum::<f64>() / included.len() as f64);
    Ok(AttributeAp { excluded: n - included.len(), ap, map })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub acc_at_k: BTreeMap<usize, f64>,
    pub nme: Vec<Option<f64>>,
    pub attribute_ap: Vec<Option<f64>>,
    pub map: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
    pub ranks: Vec<Option<usize>>,
    pub unmatched_queries: usize,
    pub excluded_attributes: usize,
    /// Accuracy restricted to queries of items in a confusable pair.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusable_acc_at_k: Option<BTreeMap<usize, f64>>,
    /// Per-query attention weights `(alpha_a, alpha_l)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<(Vec<f64>, Vec<f64>)>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gallery(rows: &[&[f64]]) -> Gallery {
        Gallery::new(rows.iter().map(|r| r.to_vec()).collect(), (0..rows.len()).collect()).unwrap()
    }

    #[test]
    fn ranking_examples() {
        let g = gallery(&[&[2.0], &[1.0], &[3.0]]);
        assert_eq!(rank_queries(&[vec![0.0]], &g).unwrap(), vec![vec![1, 0, 2]]);
        let g1 = gallery(&[&[5.0, 5.0]]);
        assert_eq!(rank_queries(&[vec![0.0, 1.0], vec![9.0, 9.0]], &g1).unwrap(), vec![vec![0], vec![0]]);
        let g = gallery(&[&[1.0, 1.0], &[0.5, 0.25], &[3.0, 0.0]]);
        assert_eq!(rank_queries(&[vec![0.5, 0.25]], &g).unwrap()[0][0], 1);
    }

    #[test]
    fn ties_keep_gallery_order() {
        let g = gallery(&[&[1.0], &[-1.0], &[1.0]]);
        assert_eq!(rank_queries(&[vec![0.0]], &g).unwrap(), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let g = gallery(&[&[1.0, 2.0]]);
        assert!(matches!(rank_queries(&[vec![1.0]], &g), Err(Error::Shape(_))));
    }

    #[test]
    fn hand_enumerated_topk() {
        // True matches at ranks 1, 3, 12 and 25 of a 30-entry gallery.
        let gallery_ids: Vec<usize> = (0..30).collect();
        let ranked: Vec<Vec<usize>> = (0..4).map(|_| (0..30).collect()).collect();
        let query_ids = [0, 2, 11, 24];
        let t = topk_accuracy(&ranked, &query_ids, &gallery_ids, &[1, 10, 20, 30]).unwrap();
        assert_eq!(t.acc_at_k[&1], 0.25);
        assert_eq!(t.acc_at_k[&10], 0.5);
        assert_eq!(t.acc_at_k[&20], 0.75);
        assert_eq!(t.acc_at_k[&30], 1.0);
    }

    #[test]
    fn unmatched_queries_are_excluded() {
        let t = topk_accuracy(&[vec![0, 1], vec![1, 0]], &[7, 1], &[0, 1], &[1]).unwrap();
        assert_eq!(t.unmatched, 1);
        assert_eq!(t.acc_at_k[&1], 1.0);
        assert_eq!(t.ranks, vec![None, Some(1)]);
        assert!(topk_accuracy(&[vec![0]], &[3], &[0], &[1]).is_err());
    }

    #[test]
    fn self_exclusion() {
        let mut ranked = vec![vec![0, 1, 2], vec![1, 2, 0]];
        exclude_self(&mut ranked, &[0, 1]).unwrap();
        assert_eq!(ranked, vec![vec![1, 2], vec![2, 0]]);
    }

    #[test]
    fn nme_examples() {
        let target = |r: f64, c: f64| LandmarkTarget::from_coords(vec![(r, c)], vec![true], (64, 64), 1.0).unwrap();
        let at = |r: usize, c: usize| {
            let mut d = vec![0.0; 64 * 64];
            d[r * 64 + c] = 1.0;
            Tensor::new(vec![1, 64, 64], d).unwrap()
        };
        let t = target(10.0, 5.0);
        assert_eq!(landmark_nme(&[at(10, 5)], &[&t]).unwrap(), vec![Some(0.0)]);
        assert_eq!(landmark_nme(&[at(10, 37)], &[&t]).unwrap(), vec![Some(0.5)]);
        assert_eq!(landmark_nme(&[at(10, 5), at(10, 37)], &[&t, &t]).unwrap(), vec![Some(0.25)]);
        let hidden = LandmarkTarget::from_coords(vec![(1.0, 1.0)], vec![false], (64, 64), 1.0).unwrap();
        assert_eq!(landmark_nme(&[at(0, 0)], &[&hidden]).unwrap(), vec![None]);
    }

    #[test]
    fn nme_argmax_ties_take_first_index() {
        let t = LandmarkTarget::from_coords(vec![(0.0, 0.0)], vec![true], (2, 2), 1.0).unwrap();
        let flat = Tensor::full(vec![1, 2, 2], 0.5);
        assert_eq!(landmark_nme(&[flat], &[&t]).unwrap(), vec![Some(0.0)]);
    }

    #[test]
    fn ap_examples() {
        let scores = vec![vec![0.9], vec![0.8], vec![0.1], vec![0.05]];
        let perfect = vec![vec![true], vec![true], vec![false], vec![false]];
        assert_eq!(attribute_map(&scores, &perfect).unwrap().ap, vec![Some(1.0)]);
        let second = vec![vec![false], vec![true], vec![false], vec![false]];
        assert_eq!(attribute_map(&scores, &second).unwrap().ap, vec![Some(0.5)]);
    }

    #[test]
    fn attributes_without_positives_are_excluded() {
        let r = attribute_map(&[vec![0.2, 0.3], vec![0.4, 0.1]], &[vec![true, false], vec![false, false]]).unwrap();
        assert_eq!(r.ap, vec![Some(0.5), None]);
        assert_eq!(r.excluded, 1);
        assert_eq!(r.map, Some(0.5));
    }
}
