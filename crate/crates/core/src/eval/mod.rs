//! Ranking, temporal NMS, the two prediction strategies and evaluation
//! metrics.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::branch::{Pln, ScoreMap};
use crate::error::{config_err, input_err, Result};
use crate::temporal_map::{cross_stage_align, moment_to_seconds};
use crate::training::{temporal_iou, SyntheticSample};

/// A ranked candidate moment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub start_sec: f64,
    pub end_sec: f64,
    pub score: f64,
    /// 1-based stage whose grid the moment lives on.
    pub stage: usize,
}

impl Prediction {
    pub fn span(&self) -> (f64, f64) {
        (self.start_sec, self.end_sec)
    }

    pub fn length(&self) -> f64 {
        self.end_sec - self.start_sec
    }
}

/// Descending score; ties go to the earlier start, then the shorter moment.
pub fn ranking_order(a: &Prediction, b: &Prediction) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start_sec.total_cmp(&b.start_sec))
        .then(a.length().total_cmp(&b.length()))
}

/// Every sampled cell of `map` as a prediction, ranked.
pub fn rank_cells(map: &ScoreMap) -> Vec<Prediction> {
    let mut out = Vec::with_capacity(map.mask.sampled_count());
    for (i, j) in map.mask.sampled_cells() {
        let (start_sec, end_sec) =
            moment_to_seconds(i, j, map.n, map.duration).expect("sampled cells are valid");
        out.push(Prediction {
            start_sec,
            end_sec,
            score: map.score(i, j),
            stage: map.stage,
        });
    }
    out.sort_by(ranking_order);
    out
}

/// Greedy suppression: keeps a prediction iff its IoU with every kept one is
/// at most `threshold`.
pub fn nms(ranked: &[Prediction], threshold: f64) -> Vec<Prediction> {
    let mut kept: Vec<Prediction> = Vec::new();
    for p in ranked {
        if kept.iter().all(|k| temporal_iou(k.span(), p.span()) <= threshold) {
            kept.push(*p);
        }
    }
    kept
}

/// Highest-ranked moment of one map.
pub fn top1(map: &ScoreMap) -> Option<(f64, f64)> {
    let mut best: Option<Prediction> = None;
    for (i, j) in map.mask.sampled_cells() {
        let (s, e) = moment_to_seconds(i, j, map.n, map.duration).expect("sampled cells are valid");
        let p = Prediction {
            start_sec: s,
            end_sec: e,
            score: map.score(i, j),
            stage: map.stage,
        };
        if best.map_or(true, |b| ranking_order(&p, &b) == Ordering::Less) {
            best = Some(p);
        }
    }
    best.map(|p| p.span())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "stage", rename_all = "snake_case")]
pub enum Strategy {
    /// Rank one stage's map (1-based).
    Select(usize),
    /// Average aligned scores across stages on the finest grid.
    Fused,
}

pub fn strategy1(maps: &[ScoreMap], t_select: usize, nms_threshold: f64) -> Result<Vec<Prediction>> {
    if t_select == 0 || t_select > maps.len() {
        return Err(input_err!(
            "stage {} selected from a {}-stage model",
            t_select,
            maps.len()
        ));
    }
    Ok(nms(&rank_cells(&maps[t_select - 1]), nms_threshold))
}

/// Finest-stage map whose scores are the mean over every stage holding an
/// exactly aligned sampled cell.
pub fn fuse_score_maps(maps: &[ScoreMap]) -> Result<ScoreMap> {
    let last = maps.last().ok_or_else(|| input_err!("no score maps"))?;
    let n = last.n;
    for m in maps {
        if n % m.n != 0 {
            return Err(config_err!("stage sizes {} and {} do not align", m.n, n));
        }
    }
    let mut fused = last.clone();
    for (i, j) in last.mask.sampled_cells() {
        let mut total = 0.0;
        let mut count = 0usize;
        for m in maps {
            if let Some((a, b)) = cross_stage_align(i, j, n, m.n)? {
                if m.mask.sample[a * m.n + b] {
                    total += m.score(a, b);
                    count += 1;
                }
            }
        }
        fused.scores[i * n + j] = total / count as f64;
    }
    Ok(fused)
}

pub fn strategy2(maps: &[ScoreMap], nms_threshold: f64) -> Result<Vec<Prediction>> {
    Ok(nms(&rank_cells(&fuse_score_maps(maps)?), nms_threshold))
}

pub fn predict(maps: &[ScoreMap], strategy: Strategy, nms_threshold: f64) -> Result<Vec<Prediction>> {
    match strategy {
        Strategy::Select(t) => strategy1(maps, t, nms_threshold),
        Strategy::Fused => strategy2(maps, nms_threshold),
    }
}

/// Percentage of queries with a top-`n` prediction of IoU at least `m`.
pub fn rank_at(preds: &[Vec<Prediction>], gts: &[(f64, f64)], n: usize, m: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, &gt)| p.iter().take(n).any(|x| temporal_iou(x.span(), gt) >= m))
        .count();
    100.0 * hits as f64 / gts.len() as f64
}

/// Mean top-1 IoU as a fraction; a missing top-1 counts as zero.
pub fn mean_iou(top1: &[Option<(f64, f64)>], gts: &[(f64, f64)]) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let total: f64 = top1
        .iter()
        .zip(gts)
        .map(|(p, &gt)| p.map_or(0.0, |s| temporal_iou(s, gt)))
        .sum();
    total / gts.len() as f64
}

pub const RANK_NS: [usize; 2] = [1, 5];
pub const RANK_MS: [f64; 4] = [0.1, 0.3, 0.5, 0.7];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankCell {
    pub n: usize,
    pub m: f64,
    pub value: f64,
}

/// Queries whose ground-truth length fraction falls in `(lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Rank@1 at IoU 0.5; `None` when the bucket is empty.
    pub rank1_iou05: Option<f64>,
}

/// Bucket index of a length fraction among `n_buckets` equal bins of `(0, 1]`.
pub fn bucket_index(fraction: f64, n_buckets: usize) -> usize {
    let b = libm::ceil(fraction * n_buckets as f64) as usize;
    b.clamp(1, n_buckets) - 1
}

pub fn length_bucket_report(
    preds: &[Vec<Prediction>],
    gts: &[(f64, f64)],
    durations: &[f64],
    n_buckets: usize,
) -> Result<Vec<LengthBucket>> {
    if n_buckets < 2 {
        return Err(config_err!("need at least two length buckets"));
    }
    if preds.len() != gts.len() || gts.len() != durations.len() {
        return Err(input_err!("prediction, ground-truth and duration counts differ"));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_buckets];
    for (q, (&gt, &dur)) in gts.iter().zip(durations).enumerate() {
        members[bucket_index((gt.1 - gt.0) / dur, n_buckets)].push(q);
    }
    Ok(members
        .iter()
        .enumerate()
        .map(|(b, qs)| {
            let p: Vec<Vec<Prediction>> = qs.iter().map(|&q| preds[q].clone()).collect();
            let g: Vec<(f64, f64)> = qs.iter().map(|&q| gts[q]).collect();
            LengthBucket {
                lo: b as f64 / n_buckets as f64,
                hi: (b + 1) as f64 / n_buckets as f64,
                count: qs.len(),
                rank1_iou05: (!qs.is_empty()).then(|| rank_at(&p, &g, 1, 0.5)),
            }
        })
        .collect())
}

/// Per-bucket `100 * (ours - base) / base`.
///
/// `None` when either side is empty; a zero baseline gives `+inf` unless
/// both are zero.
pub fn relative_improvement(ours: &[LengthBucket], base: &[LengthBucket]) -> Vec<Option<f64>> {
    ours.iter()
        .zip(base)
        .map(|(a, b)| match (a.rank1_iou05, b.rank1_iou05) {
            (Some(x), Some(y)) if y > 0.0 => Some(100.0 * (x - y) / y),
            (Some(x), Some(_)) if x > 0.0 => Some(f64::INFINITY),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        })
        .collect()
}

/// Mean length in seconds of each stage's own top-`k` predictions.
pub fn topk_length_stats(maps_per_query: &[Vec<ScoreMap>], k: usize, nms_threshold: f64) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(config_err!("k must be at least 1"));
    }
    let t = maps_per_query.first().map_or(0, |m| m.len());
    let mut sums = vec![0.0; t];
    let mut counts = vec![0usize; t];
    for maps in maps_per_query {
        if maps.len() != t {
            return Err(input_err!("queries disagree on the stage count"));
        }
        for s in 0..t {
            for p in strategy1(maps, s + 1, nms_threshold)?.iter().take(k) {
                sums[s] += p.length();
                counts[s] += 1;
            }
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub strategy: Strategy,
    pub nms_threshold: f64,
    pub n_buckets: usize,
    pub topk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Fused,
            nms_threshold: 0.5,
            n_buckets: 5,
            topk: 5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, n_stages: usize) -> Result<()> {
        if let Strategy::Select(t) = self.strategy {
            if t == 0 || t > n_stages {
                return Err(config_err!("stage {} selected from a {}-stage model", t, n_stages));
            }
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(config_err!("nms threshold must lie in [0, 1]"));
        }
        if self.n_buckets < 2 || self.topk == 0 {
            return Err(config_err!("need n_buckets >= 2 and topk >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_queries: usize,
    pub rank: Vec<RankCell>,
    /// Percentage.
    pub miou: f64,
    pub buckets: Vec<LengthBucket>,
    /// Mean top-k predicted length per stage, in seconds.
    pub topk_lengths: Vec<f64>,
}

impl EvalReport {
    pub fn rank_at(&self, n: usize, m: f64) -> Option<f64> {
        self.rank.iter().find(|c| c.n == n && c.m == m).map(|c| c.value)
    }
}

/// Report plus the ranked predictions behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<Vec<Prediction>>,
}

/// Evaluates precomputed score maps against ground truth.
pub fn evaluate_maps(
    maps_per_query: &[Vec<ScoreMap>],
    gts: &[(f64, f64)],
    durations: &[f64],
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    let t = maps_per_query.first().map_or(1, |m| m.len());
    cfg.validate(t)?;
    let predictions: Vec<Vec<Prediction>> = maps_per_query
        .iter()
        .map(|maps| predict(maps, cfg.strategy, cfg.nms_threshold))
        .collect::<Result<_>>()?;
    let mut rank = Vec::new();
    for n in RANK_NS {
        for m in RANK_MS {
            rank.push(RankCell {
                n,
                m,
                value: rank_at(&predictions, gts, n, m),
            });
        }
    }
    let tops: Vec<Option<(f64, f64)>> = predictions.iter().map(|p| p.first().map(|x| x.span())).collect();
    Ok(Evaluation {
        report: EvalReport {
            n_queries: gts.len(),
            rank,
            miou: 100.0 * mean_iou(&tops, gts),
            buckets: length_bucket_report(&predictions, gts, durations, cfg.n_buckets)?,
            topk_lengths: topk_length_stats(maps_per_query, cfg.topk, cfg.nms_threshold)?,
        },
        predictions,
    })
}

/// Score maps of every sample under `model`.
pub fn model_score_maps(model: &Pln, samples: &[SyntheticSample]) -> Result<Vec<Vec<ScoreMap>>> {
    samples
        .iter()
        .map(|s| model.score_maps(&s.units, &s.tokens, s.duration_seconds))
        .collect()
}

/// Maps on the same grids as `template` filled with seeded uniform noise.
pub fn random_score_maps(template: &[Vec<ScoreMap>], seed: u64) -> Vec<Vec<ScoreMap>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    template
        .iter()
        .map(|maps| {
            maps.iter()
                .map(|m| {
                    let probs: Vec<f64> = (0..m.n * m.n).map(|_| rng.random::<f64>()).collect();
                    ScoreMap::from_probs(m.stage, m.duration, &probs, &m.mask)
                })
                .collect()
        })
        .collect()
}

pub fn evaluate(model: &Pln, samples: &[SyntheticSample], cfg: &EvalConfig) -> Result<Evaluation> {
    let maps = model_score_maps(model, samples)?;
    evaluate_samples(&maps, samples, cfg)
}

pub fn evaluate_samples(maps: &[Vec<ScoreMap>], samples: &[SyntheticSample], cfg: &EvalConfig) -> Result<Evaluation> {
    let gts: Vec<(f64, f64)> = samples.iter().map(|s| s.gt()).collect();
    let durations: Vec<f64> = samples.iter().map(|s| s.duration_seconds).collect();
    evaluate_maps(maps, &gts, &durations, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::temporal_map::TemporalMask;

    fn map(n: usize, stage: usize, dur: f64, f: impl Fn(usize, usize) -> f64) -> ScoreMap {
        let mask = TemporalMask::new(n, n);
        let probs: Vec<f64> = (0..n * n).map(|k| f(k / n, k % n)).collect();
        ScoreMap::from_probs(stage, dur, &probs, &mask)
    }

    fn pred(s: f64, e: f64, score: f64) -> Prediction {
        Prediction {
            start_sec: s,
            end_sec: e,
            score,
            stage: 1,
        }
    }

    #[test]
    fn unique_maximum_is_top() {
        let m = map(4, 1, 8.0, |i, j| if (i, j) == (1, 2) { 0.9 } else { 0.1 });
        assert_eq!(top1(&m), Some((2.0, 6.0)));
        assert_eq!(strategy1(&[m], 1, 0.5).unwrap()[0].span(), (2.0, 6.0));
    }

    #[test]
    fn ties_prefer_earlier_then_shorter() {
        let m = map(4, 1, 4.0, |_, _| 0.5);
        let r = rank_cells(&m);
        assert_eq!(r[0].span(), (0.0, 1.0));
        assert_eq!(r[1].span(), (0.0, 2.0));
    }

    #[test]
    fn nms_cases() {
        let a = pred(0.0, 4.0, 0.9);
        let ranked = [a, a, pred(0.0, 2.0, 0.8)];
        assert_eq!(nms(&ranked, 1.0).len(), 3);
        assert_eq!(nms(&ranked, 0.99), vec![a, ranked[2]]);
        assert_eq!(nms(&ranked, 0.4), vec![a]);
    }

    #[test]
    fn fused_two_term_mean() {
        let coarse = map(2, 1, 4.0, |_, _| 0.8);
        let fine = map(4, 2, 4.0, |_, _| 0.2);
        let f = fuse_score_maps(&[coarse, fine]).unwrap();
        assert!((f.score(0, 1) - 0.5).abs() < 1e-15);
        assert!((f.score(0, 0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn rank_and_miou_examples() {
        let gts = [(0.0, 10.0); 3];
        let preds = vec![vec![pred(0.0, 6.0, 1.0)], vec![pred(0.0, 4.0, 1.0)], vec![pred(0.0, 8.0, 1.0)]];
        assert!((rank_at(&preds, &gts, 1, 0.5) - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(rank_at(&[vec![], vec![], vec![]], &gts, 5, 0.1), 0.0);
        let m = mean_iou(&[Some((0.0, 2.0)), Some((0.0, 6.0))], &[(0.0, 10.0); 2]);
        assert!((m - 0.4).abs() < 1e-12);
        assert_eq!(mean_iou(&[None], &[(0.0, 1.0)]), 0.0);
    }

    #[test]
    fn bucket_binning() {
        let gts = [(0.0, 1.0), (0.0, 2.0), (0.0, 7.0), (0.0, 10.0)];
        let preds: Vec<Vec<Prediction>> = gts.iter().map(|g| vec![pred(g.0, g.1, 1.0)]).collect();
        let b = length_bucket_report(&preds, &gts, &[10.0; 4], 2).unwrap();
        assert_eq!((b[0].count, b[1].count), (2, 2));
        let b5 = length_bucket_report(&preds, &gts, &[10.0; 4], 5).unwrap();
        assert_eq!(b5.iter().map(|x| x.count).collect::<Vec<_>>(), vec![2, 0, 0, 1, 1]);
        assert_eq!(b5[1].rank1_iou05, None);
        let rel = relative_improvement(&b5, &b5);
        assert_eq!(rel, vec![Some(0.0), None, None, Some(0.0), Some(0.0)]);
    }

    #[test]
    fn topk_lengths() {
        let whole = map(4, 1, 8.0, |i, j| if (i, j) == (0, 3) { 0.9 } else { 0.1 });
        let s = topk_length_stats(&[vec![whole]], 1, 0.5).unwrap();
        assert_eq!(s, vec![8.0]);
    }
}
