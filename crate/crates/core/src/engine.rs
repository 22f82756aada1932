//! The blacken/crop region search.
//!
//! A run freezes the top-K classes of the unmodified image, then repeatedly
//! proposes shrunken sub-regions inside the current search frame, scores a
//! blackened and a cropped version of the full image for each, and narrows
//! the frame to the bounding box of the best proposals from both branches.
//! It stops once the cropped score no longer exceeds the blackened score by
//! `eta` percent of the reference self-score.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{classify_batch, Classifier, ResponseVector};
use crate::error::{Error, Result};
use crate::geometry::{bounding_union, child_dims, propose_grid, Grid, Region};
use crate::imaging::{crop_rescale, Image};
use crate::scalar::Scalar;

pub type SearchRng = ChaCha8Rng;

/// Proposals per classifier batch; each contributes two images.
const PROPOSALS_PER_BATCH: usize = 16;

/// How blackened proposals are ranked before the union step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlackenedRanking {
    /// Highest score first, like the cropped branch.
    #[default]
    HighestScore,
    /// Lowest score first: regions whose removal costs the most response.
    MostOccluding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EissConfig {
    /// Linear shrink factor per iteration, in `(0, 1)`.
    pub alpha: f64,
    /// Stopping threshold as a percentage of the reference self-score.
    pub eta: f64,
    /// Number of reference classes.
    pub k: usize,
    pub max_iterations: usize,
    pub stride: u32,
    pub top_regions_per_branch: usize,
    /// Random proposals per iteration; `None` sweeps the whole grid.
    pub sample_count: Option<usize>,
    pub min_region_side: u32,
    pub seed: u64,
    pub blackened_ranking: BlackenedRanking,
}

impl Default for EissConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            eta: 10.0,
            k: 1,
            max_iterations: 30,
            stride: 1,
            top_regions_per_branch: 5,
            sample_count: None,
            min_region_side: 8,
            seed: 0,
            blackened_ranking: BlackenedRanking::HighestScore,
        }
    }
}

impl EissConfig {
    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return invalid(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return invalid(format!("eta {} must be a finite percentage >= 0", self.eta));
        }
        if self.k == 0 {
            return invalid("k must be at least 1".into());
        }
        if self.max_iterations == 0 {
            return invalid("max_iterations must be at least 1".into());
        }
        if self.stride == 0 {
            return invalid("stride must be at least 1".into());
        }
        if self.top_regions_per_branch == 0 {
            return invalid("top_regions_per_branch must be at least 1".into());
        }
        if self.sample_count == Some(0) {
            return invalid("sample count must be at least 1".into());
        }
        if self.min_region_side == 0 {
            return invalid("min_region_side must be at least 1".into());
        }
        Ok(())
    }
}

/// Top-K classes of the unmodified image, frozen for the whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKReference<T> {
    pub class_indices: Vec<usize>,
    pub ref_probs: Vec<T>,
    /// Self-score of the original image: sum of squared reference probabilities.
    pub initial_score: T,
}

impl<T: Scalar> TopKReference<T> {
    /// Picks the `k` largest entries, ties going to the lower index.
    pub fn from_response(resp: &ResponseVector<T>, k: usize) -> Result<Self> {
        if k == 0 || k > resp.len() {
            return Err(Error::InvalidConfig(format!(
                "k = {k} but the classifier emits {} classes",
                resp.len()
            )));
        }
        let probs = resp.probs();
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp_scalar(&probs[a]).then(a.cmp(&b)));
        order.truncate(k);
        let ref_probs: Vec<T> = order.iter().map(|&i| probs[i]).collect();
        let initial_score = ref_probs.iter().map(|p| *p * *p).sum::<T>();
        if initial_score <= T::zero() {
            return Err(Error::Classifier("reference classes carry no probability".into()));
        }
        Ok(Self { class_indices: order, ref_probs, initial_score })
    }

    /// Largest score any proposal can reach.
    pub fn max_score(&self) -> T {
        self.ref_probs.iter().copied().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EtaThreshold,
    MaxIterations,
    DegenerateRegion,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::EtaThreshold => "eta_threshold",
            StopReason::MaxIterations => "max_iterations",
            StopReason::DegenerateRegion => "degenerate_region",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord<T> {
    /// 1-based.
    pub iteration: usize,
    pub resultant_region: Region,
    pub blackened_score: T,
    pub cropped_score: T,
    pub proposal_count: usize,
    pub iou_vs_truth: Option<T>,
    /// Best blackened proposals in rank order.
    pub top_blackened: Vec<Region>,
    /// Best cropped proposals in rank order.
    pub top_cropped: Vec<Region>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EissResult<T> {
    pub final_region: Region,
    pub records: Vec<IterationRecord<T>>,
    pub stop_reason: StopReason,
    pub reference: TopKReference<T>,
}

/// Classifies the unmodified image and freezes its top-K classes.
pub fn initial_reference<T: Scalar, C: Classifier<T> + ?Sized>(
    classifier: &C,
    img: &Image<T>,
    k: usize,
) -> Result<TopKReference<T>> {
    if k > classifier.class_count() {
        return Err(Error::InvalidConfig(format!(
            "k = {k} exceeds the {} classifier classes",
            classifier.class_count()
        )));
    }
    TopKReference::from_response(&classifier.classify(img)?, k)
}

/// Inner product of a response with the reference, restricted to the
/// reference classes.
pub fn score_proposal<T: Scalar>(resp: &ResponseVector<T>, reference: &TopKReference<T>) -> T {
    reference
        .class_indices
        .iter()
        .zip(&reference.ref_probs)
        .map(|(&c, &r)| resp.probs()[c] * r)
        .sum()
}

/// True once `cropped - blackened` falls below `eta` percent of `initial_score`.
pub fn should_stop<T: Scalar>(blackened: T, cropped: T, initial_score: T, eta: f64) -> bool {
    cropped - blackened < T::lit(eta / 100.0) * initial_score
}

/// `count` distinct stride-1 grid regions drawn uniformly, in row-major order.
pub fn sample_regions(parent: &Region, alpha: f64, count: usize, rng: &mut SearchRng) -> Result<Vec<Region>> {
    if count == 0 {
        return Err(Error::InvalidConfig("sample count must be at least 1".into()));
    }
    let grid = Grid::new(*parent, alpha, 1)?;
    if count >= grid.len() {
        return Ok(grid.regions());
    }
    let mut picks = rand::seq::index::sample(rng, grid.len(), count).into_vec();
    picks.sort_unstable();
    Ok(picks.into_iter().map(|i| grid.get(i)).collect())
}

/// Blackened and cropped scores for each candidate, in candidate order.
pub fn score_candidates<T: Scalar, C: Classifier<T> + ?Sized>(
    img: &Image<T>,
    classifier: &C,
    reference: &TopKReference<T>,
    candidates: &[Region],
) -> Result<Vec<(T, T)>> {
    let dims = classifier.input_dims();
    let score_chunk = |chunk: &[Region]| -> Result<Vec<(T, T)>> {
        let blackened = classifier.classify_blackened_batch(img, chunk)?;
        let mut crops = Vec::with_capacity(chunk.len());
        // Index of each candidate's crop in `crops`; `None` for an empty crop.
        let mut crop_slot = Vec::with_capacity(chunk.len());
        for r in chunk {
            match crop_rescale(img, r, dims) {
                Ok(c) => {
                    crop_slot.push(Some(crops.len()));
                    crops.push(c);
                }
                Err(Error::EmptyCrop) => crop_slot.push(None),
                Err(e) => return Err(e),
            }
        }
        let cropped = if crops.is_empty() { Vec::new() } else { classify_batch(classifier, &crops)? };
        Ok(blackened
            .iter()
            .zip(crop_slot)
            .map(|(b, slot)| {
                let crop = slot.map_or(T::zero(), |i| score_proposal(&cropped[i], reference));
                (score_proposal(b, reference), crop)
            })
            .collect())
    };

    let chunks: Vec<&[Region]> = candidates.chunks(PROPOSALS_PER_BATCH).collect();
    let parts: Vec<Result<Vec<(T, T)>>> = if classifier.concurrent() {
        chunks.par_iter().map(|c| score_chunk(c)).collect()
    } else {
        chunks.iter().map(|c| score_chunk(c)).collect()
    };
    let mut scores = Vec::with_capacity(candidates.len());
    for part in parts {
        scores.extend(part?);
    }
    Ok(scores)
}

/// Indices of the `n` best scores; ties go to the earlier (row-major) index.
pub fn select_top<T: Scalar>(scores: &[T], n: usize, lowest_first: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let by_score = if lowest_first {
            scores[a].total_cmp_scalar(&scores[b])
        } else {
            scores[b].total_cmp_scalar(&scores[a])
        };
        by_score.then(a.cmp(&b))
    });
    order.truncate(n);
    order
}

/// Scores of the full image with `region` blackened, and with `region` cropped.
pub fn region_scores<T: Scalar, C: Classifier<T> + ?Sized>(
    img: &Image<T>,
    classifier: &C,
    reference: &TopKReference<T>,
    region: &Region,
) -> Result<(T, T)> {
    let black = classifier.classify_blackened_batch(img, std::slice::from_ref(region))?;
    let black = score_proposal(&black[0], reference);
    let crop = match crop_rescale(img, region, classifier.input_dims()) {
        Ok(c) => score_proposal(&classifier.classify(&c)?, reference),
        Err(Error::EmptyCrop) => T::zero(),
        Err(e) => return Err(e),
    };
    Ok((black, crop))
}

/// One search step inside `parent`. `iteration` is only recorded.
pub fn run_iteration<T: Scalar, C: Classifier<T> + ?Sized>(
    img: &Image<T>,
    classifier: &C,
    reference: &TopKReference<T>,
    parent: &Region,
    cfg: &EissConfig,
    iteration: usize,
    rng: &mut SearchRng,
) -> Result<IterationRecord<T>> {
    let (cw, ch) = child_dims(parent, cfg.alpha)?;
    if cw < cfg.min_region_side || ch < cfg.min_region_side {
        return Err(Error::DegenerateRegion { width: cw, height: ch });
    }
    let candidates = match cfg.sample_count {
        Some(m) => sample_regions(parent, cfg.alpha, m, rng)?,
        None => propose_grid(parent, cfg.alpha, cfg.stride)?,
    };
    let scores = score_candidates(img, classifier, reference, &candidates)?;
    let (black, crop): (Vec<T>, Vec<T>) = scores.into_iter().unzip();

    let n = cfg.top_regions_per_branch;
    let lowest_first = cfg.blackened_ranking == BlackenedRanking::MostOccluding;
    let top_blackened: Vec<Region> =
        select_top(&black, n, lowest_first).into_iter().map(|i| candidates[i]).collect();
    let top_cropped: Vec<Region> =
        select_top(&crop, n, false).into_iter().map(|i| candidates[i]).collect();

    let selected: Vec<Region> = top_blackened.iter().chain(&top_cropped).copied().collect();
    let resultant_region = bounding_union(&selected)?;
    let (blackened_score, cropped_score) = region_scores(img, classifier, reference, &resultant_region)?;

    Ok(IterationRecord {
        iteration,
        resultant_region,
        blackened_score,
        cropped_score,
        proposal_count: candidates.len(),
        iou_vs_truth: None,
        top_blackened,
        top_cropped,
    })
}

/// Full search over `img`. Deterministic for fixed inputs, whatever the
/// size of the rayon pool it runs in.
pub fn run_eiss<T: Scalar, C: Classifier<T> + ?Sized>(
    img: &Image<T>,
    classifier: &C,
    cfg: &EissConfig,
    ground_truth: Option<&Region>,
) -> Result<EissResult<T>> {
    cfg.validate()?;
    let reference = initial_reference(classifier, img, cfg.k)?;
    let mut rng = SearchRng::seed_from_u64(cfg.seed);
    let mut parent = img.frame();
    let mut records: Vec<IterationRecord<T>> = Vec::new();

    let stop_reason = loop {
        let iteration = records.len() + 1;
        let mut record = match run_iteration(img, classifier, &reference, &parent, cfg, iteration, &mut rng) {
            Ok(r) => r,
            Err(Error::DegenerateRegion { .. }) if !records.is_empty() => {
                break StopReason::DegenerateRegion;
            }
            Err(e) => return Err(Error::Iteration { iteration, source: Box::new(e) }),
        };
        record.iou_vs_truth = ground_truth.map(|gt| record.resultant_region.iou(gt));
        parent = record.resultant_region;
        let stop = should_stop(
            record.blackened_score,
            record.cropped_score,
            reference.initial_score,
            cfg.eta,
        );
        records.push(record);
        if stop {
            break StopReason::EtaThreshold;
        }
        if records.len() >= cfg.max_iterations {
            break StopReason::MaxIterations;
        }
    };

    Ok(EissResult { final_region: parent, records, stop_reason, reference })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns the same response for every input.
    struct Fixed(Vec<f64>);

    impl Classifier<f64> for Fixed {
        fn input_dims(&self) -> (u32, u32) {
            (8, 8)
        }
        fn class_count(&self) -> usize {
            self.0.len()
        }
        fn classify(&self, _: &Image<f64>) -> Result<ResponseVector<f64>> {
            ResponseVector::new(self.0.clone(), None)
        }
    }

    fn reference(indices: Vec<usize>, probs: Vec<f64>) -> TopKReference<f64> {
        let initial_score = probs.iter().map(|p| p * p).sum();
        TopKReference { class_indices: indices, ref_probs: probs, initial_score }
    }

    fn gray(w: u32, h: u32) -> Image<f64> {
        Image::filled(w, h, &[0.5, 0.5, 0.5]).unwrap()
    }

    #[test]
    fn reference_top1() {
        let r = initial_reference(&Fixed(vec![0.1, 0.7, 0.2]), &gray(4, 4), 1).unwrap();
        assert_eq!(r.class_indices, vec![1]);
        assert_eq!(r.ref_probs, vec![0.7]);
        assert!((r.initial_score - 0.49).abs() < 1e-15);
    }

    #[test]
    fn reference_ties_go_to_lower_index() {
        let r = initial_reference(&Fixed(vec![0.5, 0.5]), &gray(4, 4), 2).unwrap();
        assert_eq!(r.class_indices, vec![0, 1]);
        let r = initial_reference(&Fixed(vec![0.2, 0.4, 0.4]), &gray(4, 4), 2).unwrap();
        assert_eq!(r.class_indices, vec![1, 2]);
    }

    #[test]
    fn reference_rejects_large_k() {
        assert!(initial_reference(&Fixed(vec![0.5, 0.5]), &gray(4, 4), 3).is_err());
        assert!(initial_reference(&Fixed(vec![0.5, 0.5]), &gray(4, 4), 0).is_err());
    }

    #[test]
    fn score_examples() {
        let resp = ResponseVector::new(vec![0.5, 0.5], None).unwrap();
        assert_eq!(score_proposal(&resp, &reference(vec![0], vec![0.8])), 0.4);

        let original = ResponseVector::new(vec![0.1, 0.7, 0.2], None).unwrap();
        let r = TopKReference::from_response(&original, 2).unwrap();
        assert_eq!(score_proposal(&original, &r), r.initial_score);

        let dead = ResponseVector::new(vec![0.0, 0.0, 1.0], None).unwrap();
        assert_eq!(score_proposal(&dead, &reference(vec![0, 1], vec![0.6, 0.3])), 0.0);
    }

    #[test]
    fn stop_rule_table() {
        assert!(should_stop(0.3, 0.3, 0.49, 10.0));
        assert!(should_stop(0.3f32, 0.3, 0.49, 1e-3));
        assert!(!should_stop(0.1, 0.2, 0.49, 0.0));
        assert!(should_stop(0.1, 0.1 + 0.048, 0.49, 10.0));
        assert!(!should_stop(0.1, 0.1 + 0.05, 0.49, 10.0));
        // Signed: blackened above cropped always stops when eta > 0.
        assert!(should_stop(0.5, 0.1, 0.49, 1.0));
    }

    #[test]
    fn select_top_orders_and_breaks_ties() {
        let s = [0.3, 0.9, 0.3, 0.1, 0.9];
        assert_eq!(select_top(&s, 3, false), vec![1, 4, 0]);
        assert_eq!(select_top(&s, 3, true), vec![3, 0, 2]);
        assert_eq!(select_top(&s, 10, false).len(), 5);
    }

    #[test]
    fn equal_scores_pick_row_major_first() {
        let cfg = EissConfig { top_regions_per_branch: 1, min_region_side: 1, ..Default::default() };
        let img = gray(10, 10);
        let c = Fixed(vec![0.6, 0.4]);
        let r = initial_reference(&c, &img, 1).unwrap();
        let mut rng = SearchRng::seed_from_u64(0);
        let rec = run_iteration(&img, &c, &r, &img.frame(), &cfg, 1, &mut rng).unwrap();
        let first = Region::new(0, 0, 8, 8).unwrap();
        assert_eq!(rec.top_blackened, vec![first]);
        assert_eq!(rec.top_cropped, vec![first]);
        assert_eq!(rec.resultant_region, first);
        assert_eq!(rec.proposal_count, 9);
    }

    #[test]
    fn sampling_contracts() {
        let parent = Region::new(0, 0, 100, 100).unwrap();
        let full = propose_grid(&parent, 0.8, 1).unwrap();
        let mut rng = SearchRng::seed_from_u64(3);
        assert_eq!(sample_regions(&parent, 0.8, 441, &mut rng).unwrap(), full);
        assert_eq!(sample_regions(&parent, 0.8, 10_000, &mut rng).unwrap(), full);

        let a = sample_regions(&parent, 0.8, 16, &mut SearchRng::seed_from_u64(7)).unwrap();
        let b = sample_regions(&parent, 0.8, 16, &mut SearchRng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        assert!(a.iter().all(|r| full.contains(r)));
        assert!(a.windows(2).all(|w| (w[0].y, w[0].x) < (w[1].y, w[1].x)));

        assert!(sample_regions(&parent, 0.8, 0, &mut rng).is_err());
    }

    #[test]
    fn huge_eta_stops_after_one_iteration() {
        let cfg = EissConfig { eta: 1e6, ..Default::default() };
        let img = gray(24, 24);
        let res = run_eiss(&img, &Fixed(vec![0.6, 0.4]), &cfg, None).unwrap();
        assert_eq!(res.records.len(), 1);
        assert_eq!(res.stop_reason, StopReason::EtaThreshold);
        assert_eq!(res.final_region, res.records[0].resultant_region);
    }

    #[test]
    fn tiny_image_is_an_error() {
        let img = gray(6, 6);
        let err = run_eiss(&img, &Fixed(vec![0.6, 0.4]), &EissConfig::default(), None).unwrap_err();
        assert!(matches!(err, Error::Iteration { iteration: 1, .. }), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(EissConfig::default().validate().is_ok());
        for bad in [
            EissConfig { alpha: 1.0, ..Default::default() },
            EissConfig { alpha: 0.0, ..Default::default() },
            EissConfig { eta: -1.0, ..Default::default() },
            EissConfig { k: 0, ..Default::default() },
            EissConfig { max_iterations: 0, ..Default::default() },
            EissConfig { stride: 0, ..Default::default() },
            EissConfig { top_regions_per_branch: 0, ..Default::default() },
            EissConfig { sample_count: Some(0), ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
