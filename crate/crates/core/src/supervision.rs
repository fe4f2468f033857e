//! Weakly supervised variants: slide labels inherited by instances and
//! cleaned by generator loss, and subtype fine-tuning of the cleaner on
//! detected positives.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::RunConfig;
use crate::corpus::WsiBag;
use crate::error::{Result, UmtlError};
use crate::eval::{predict_state, report, MetricReport};
use crate::features::Embedder;
use crate::mutual::{run_mutual, stage_rng, stage_seed, CleanerKind, IterationState, MutualOptions};
use crate::params::ParamId;
use crate::slide::{self, minmax, SpatialGraph, SMOOTHED_THRESHOLD};
use crate::tensor::Mat;
use crate::tlc::{self, Classifier, Cleaner, CleanerItem, CleanerTrainConfig};
use crate::tplg::EpochRecord;

const STAGE_SPLIT: u64 = 13;
const STAGE_LABELED: u64 = 14;
const STAGE_WEAK: u64 = 15;
const STAGE_SUBTYPE: u64 = 16;

/// Cut-off on per-slide min-max losses.
pub const DISCARD_THRESHOLD: f64 = 0.5;

/// Bags sharing a patient stay together; bags without one stand alone.
fn patient_groups(bags: &[&WsiBag]) -> Vec<Vec<usize>> {
    let mut by_patient: BTreeMap<&str, usize> = BTreeMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, b) in bags.iter().enumerate() {
        match &b.patient_id {
            Some(p) => {
                let g = *by_patient.entry(p.as_str()).or_insert_with(|| {
                    groups.push(Vec::new());
                    groups.len() - 1
                });
                groups[g].push(i);
            }
            None => groups.push(vec![i]),
        }
    }
    groups
}

/// Seeded order of the bags, grouped by patient and interleaved so that any
/// prefix is close to stratified by slide label.
fn stratified_order(bags: &[&WsiBag], seed: u64) -> Vec<Vec<usize>> {
    let mut strata: [Vec<Vec<usize>>; 2] = [Vec::new(), Vec::new()];
    for g in patient_groups(bags) {
        let positive = g.iter().any(|&i| bags[i].truth_slide_label == Some(1));
        strata[positive as usize].push(g);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in &mut strata {
        s.shuffle(&mut rng);
    }
    // merge by position in stratum so each class appears at its share
    let n = [strata[0].len() as f64, strata[1].len() as f64];
    let mut keyed: Vec<(f64, usize, Vec<usize>)> = Vec::new();
    for (c, s) in strata.into_iter().enumerate() {
        for (k, g) in s.into_iter().enumerate() {
            keyed.push(((k as f64 + 0.5) / n[c], c, g));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, _, g)| g).collect()
}

/// Takes whole patient groups from each class until its share of
/// `fraction` is reached.
fn take_fraction(bags: &[&WsiBag], fraction: f64, seed: u64) -> Vec<usize> {
    let groups = stratified_order(bags, seed);
    let mut totals = [0usize; 2];
    for g in &groups {
        totals[g.iter().any(|&i| bags[i].truth_slide_label == Some(1)) as usize] += g.len();
    }
    let want = [
        (fraction * totals[0] as f64).round() as usize,
        (fraction * totals[1] as f64).round() as usize,
    ];
    let mut taken = [0usize; 2];
    let mut out = Vec::new();
    for g in groups {
        let c = g.iter().any(|&i| bags[i].truth_slide_label == Some(1)) as usize;
        if taken[c] < want[c] {
            taken[c] += g.len();
            out.extend(g);
        }
    }
    out.sort_unstable();
    out
}

/// Seeded train/test split, stratified by slide label, keeping each patient
/// on one side. Returns (train, test) indices in corpus order.
pub fn split_bags(bags: &[&WsiBag], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let test = take_fraction(bags, test_fraction, stage_seed(seed, 0, STAGE_SPLIT));
    let train = (0..bags.len()).filter(|i| test.binary_search(i).is_err()).collect();
    (train, test)
}

/// Bags whose slide labels are revealed at `fraction`. Subsets are nested:
/// a larger fraction keeps every bag of a smaller one.
pub fn labeled_subset(bags: &[&WsiBag], fraction: f64, seed: u64) -> Vec<usize> {
    take_fraction(bags, fraction, stage_seed(seed, 0, STAGE_LABELED))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InheritedSlide {
    pub slide_id: String,
    pub slide_label: u8,
    /// Slide label copied to every instance.
    pub labels: Vec<u8>,
    pub retained: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InheritedLabelSet {
    pub slides: Vec<InheritedSlide>,
    pub fraction: f64,
    /// Slides dropped because every instance was discarded.
    pub excluded: Vec<String>,
}

impl InheritedLabelSet {
    pub fn retained_count(&self) -> usize {
        self.slides.iter().map(|s| s.retained.iter().filter(|&&r| r).count()).sum()
    }

    pub fn labeled_count(&self) -> usize {
        self.slides.iter().map(|s| s.labels.len()).sum()
    }
}

/// Copies each slide label to its instances, then drops instances of normal
/// slides with scaled loss above 0.5 and instances of positive slides with
/// scaled loss below 0.5. Losses are min-max scaled within each slide.
pub fn inherit_and_clean(bags: &[&WsiBag], losses: &[f64], fraction: f64) -> Result<InheritedLabelSet> {
    let total: usize = bags.iter().map(|b| b.len()).sum();
    if losses.len() != total {
        return Err(UmtlError::Shape(format!("{} losses for {total} instances", losses.len())));
    }
    let mut slides = Vec::with_capacity(bags.len());
    let mut excluded = Vec::new();
    let mut off = 0;
    for b in bags {
        let label = b
            .truth_slide_label
            .ok_or_else(|| UmtlError::DegenerateLabels(format!("{} has no slide label", b.slide_id)))?;
        let scaled = minmax(&losses[off..off + b.len()]);
        off += b.len();
        let retained: Vec<bool> = scaled
            .iter()
            .map(|&l| if label == 1 { l >= DISCARD_THRESHOLD } else { l <= DISCARD_THRESHOLD })
            .collect();
        if !retained.iter().any(|&r| r) {
            excluded.push(b.slide_id.clone());
        }
        slides.push(InheritedSlide {
            slide_id: b.slide_id.clone(),
            slide_label: label,
            labels: vec![label; b.len()],
            retained,
        });
    }
    Ok(InheritedLabelSet { slides, fraction, excluded })
}

/// Cleaner evaluated on pixels, so that the feature head receives gradients.
struct HeadedCleaner<'a> {
    embed: &'a Embedder,
    clf: &'a Classifier,
}

impl Cleaner for HeadedCleaner<'_> {
    fn logits(&self, g: &mut Graph, pixels: Var) -> Var {
        let (_, words) = self.embed.forward(g, pixels);
        self.clf.logits(g, words)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.embed.param_ids();
        ids.extend(self.clf.param_ids());
        ids
    }

    fn outputs(&self) -> usize {
        self.clf.outputs()
    }
}

#[derive(Clone, Debug)]
pub struct WeakRun {
    pub fraction: f64,
    pub labeled: Vec<String>,
    pub inherited: Option<InheritedLabelSet>,
    pub state: IterationState,
    pub history: Vec<EpochRecord>,
    pub report: MetricReport,
}

/// Continues from a finished unsupervised run: retrains the transformer
/// cleaner on inherited, loss-cleaned labels of the labeled fraction of
/// `train`, then reports on `test`. Fraction 0 returns the unsupervised
/// state untouched.
pub fn weak_from_state(
    unsupervised: &IterationState,
    train: &[&WsiBag],
    test: &[&WsiBag],
    cfg: &RunConfig,
    fraction: f64,
) -> Result<WeakRun> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(UmtlError::config("run.label_fraction", format!("{fraction} outside [0,1]")));
    }
    let variant = format!("W-UMTL@{fraction:.2}");
    let chosen = labeled_subset(train, fraction, cfg.run.seed);
    if chosen.is_empty() {
        let preds = predict_state(unsupervised, test, cfg, Some(CleanerKind::Transformer), cfg.smoothing.rule)?;
        return Ok(WeakRun {
            fraction,
            labeled: Vec::new(),
            inherited: None,
            state: unsupervised.clone(),
            history: Vec::new(),
            report: report(&preds, &variant, cfg),
        });
    }
    let labeled: Vec<&WsiBag> = chosen.iter().map(|&i| train[i]).collect();
    let classes: Vec<u8> = labeled.iter().filter_map(|b| b.truth_slide_label).collect();
    if !(classes.contains(&0) && classes.contains(&1)) {
        return Err(UmtlError::DegenerateLabels(format!(
            "labeled subset of {} slides is single-class",
            labeled.len()
        )));
    }
    let pixels: Vec<&Mat> = labeled.iter().flat_map(|b| b.patches.iter().map(|p| &p.pixels)).collect();
    let outputs = unsupervised.model.infer(&pixels);
    let losses: Vec<f64> = outputs.iter().map(|o| o.loss).collect();
    let inherited = inherit_and_clean(&labeled, &losses, fraction)?;

    let mut state = unsupervised.clone();
    let ccfg = CleanerTrainConfig {
        lr: cfg.train.lr,
        epochs: cfg.train.tlc_epochs,
        batch_size: cfg.train.cleaner_batch,
        balance_classes: cfg.train.balance_classes,
        seed: stage_seed(cfg.run.seed, 0, STAGE_WEAK),
    };
    let mut keep: Vec<(usize, u8)> = Vec::new();
    let mut off = 0;
    for s in &inherited.slides {
        for (k, &r) in s.retained.iter().enumerate() {
            if r {
                keep.push((off + k, s.labels[k]));
            }
        }
        off += s.labels.len();
    }
    let model = &mut state.model;
    let history = if cfg.run.weak_train_head {
        let items: Vec<CleanerItem<'_>> = keep
            .iter()
            .map(|&(i, l)| CleanerItem { input: pixels[i], class: l as usize })
            .collect();
        let cleaner = HeadedCleaner { embed: &model.embed, clf: &model.tlc };
        let ids = cleaner.param_ids();
        tlc::train_cleaner(&mut model.store, &cleaner, ids, &items, &ccfg, "weak_tlc", 0)?
    } else {
        let items: Vec<CleanerItem<'_>> = keep
            .iter()
            .map(|&(i, l)| CleanerItem { input: &outputs[i].words, class: l as usize })
            .collect();
        let clf = model.tlc.clone();
        tlc::train_cleaner(&mut model.store, &clf, clf.param_ids(), &items, &ccfg, "weak_tlc", 0)?
    };
    let preds = predict_state(&state, test, cfg, Some(CleanerKind::Transformer), cfg.smoothing.rule)?;
    Ok(WeakRun {
        fraction,
        labeled: labeled.iter().map(|b| b.slide_id.clone()).collect(),
        inherited: Some(inherited),
        state,
        history,
        report: report(&preds, &variant, cfg),
    })
}

/// Unsupervised run on `train` followed by weak fine-tuning at `fraction`.
pub fn run_weak(train: &[&WsiBag], test: &[&WsiBag], cfg: &RunConfig, fraction: f64) -> Result<WeakRun> {
    let states = run_mutual(train, cfg, &MutualOptions::default(), &mut |_| Ok(()))?;
    weak_from_state(states.last().expect("iterations"), train, test, cfg, fraction)
}

/// One weak run per fraction, all sharing one unsupervised run.
pub fn weak_curve(train: &[&WsiBag], test: &[&WsiBag], cfg: &RunConfig, fractions: &[f64]) -> Result<Vec<WeakRun>> {
    let states = run_mutual(train, cfg, &MutualOptions::default(), &mut |_| Ok(()))?;
    let last = states.last().expect("iterations");
    fractions.iter().map(|&f| weak_from_state(last, train, test, cfg, f)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubtypePrediction {
    pub slide_id: String,
    pub truth: Option<usize>,
    /// None when no instance was detected as positive.
    pub subtype: Option<usize>,
    /// Mean class probability over detected positives.
    pub scores: Vec<f64>,
    /// Largest smoothed component per subtype.
    pub component_sizes: Vec<usize>,
    pub positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubtypeReport {
    pub classes: usize,
    pub evaluated: usize,
    pub accuracy: Option<f64>,
    pub predictions: Vec<SubtypePrediction>,
    pub skipped_training_slides: Vec<String>,
    pub frozen_digest: String,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Clone, Debug)]
pub struct SubtypeRun {
    pub classifier: Classifier,
    pub store: crate::params::ParamStore,
    pub history: Vec<EpochRecord>,
    pub report: SubtypeReport,
}

/// Instances the frozen pipeline calls positive, per bag.
fn detected_positives(frozen: &IterationState, bag: &WsiBag, cfg: &RunConfig) -> (Vec<usize>, Vec<Mat>) {
    let pixels: Vec<&Mat> = bag.patches.iter().map(|p| &p.pixels).collect();
    let outputs = frozen.model.infer(&pixels);
    let probs = frozen.model.cleaner_probabilities(CleanerKind::Transformer, &outputs);
    let labels = tlc::clean_labels(&probs, cfg.thresholds.beta_c);
    let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let words = outputs.into_iter().map(|o| o.words).collect();
    (idx, words)
}

/// Slide subtype from per-subtype smoothed maps: each subtype's probability
/// on detected positives (zero elsewhere) is smoothed and thresholded, and the
/// subtype with the largest component wins. Ties go to the lower index; if no
/// component survives, the highest mean probability decides.
pub fn subtype_vote(
    graph: &SpatialGraph,
    positives: &[usize],
    class_probs: &[Vec<f64>],
    hops: usize,
) -> Result<(usize, Vec<usize>, Vec<f64>)> {
    let k = class_probs.first().map_or(0, Vec::len);
    let n = graph.positions.len();
    let mut sizes = vec![0usize; k];
    let mut means = vec![0.0; k];
    for j in 0..k {
        let mut attr = vec![0.0; n];
        for (p, probs) in positives.iter().zip(class_probs) {
            attr[*p] = probs[j];
            means[j] += probs[j] / positives.len() as f64;
        }
        let smoothed = slide::smooth(graph, &attr, hops)?;
        let flags: Vec<bool> = smoothed.iter().map(|&v| v >= SMOOTHED_THRESHOLD).collect();
        sizes[j] = slide::connected_components(graph, &flags).iter().map(Vec::len).max().unwrap_or(0);
    }
    let best = if sizes.iter().any(|&s| s > 0) {
        (0..k).fold(0, |b, j| if sizes[j] > sizes[b] { j } else { b })
    } else {
        (0..k).fold(0, |b, j| if means[j] > means[b] { j } else { b })
    };
    Ok((best, sizes, means))
}

/// Fine-tunes a copy of the cleaner with a `classes`-way head on instances
/// the frozen pipeline detects as positive, labelled with their slide's
/// subtype, and votes a subtype per test slide.
pub fn finetune_subtype(
    frozen: &IterationState,
    train: &[&WsiBag],
    test: &[&WsiBag],
    cfg: &RunConfig,
    classes: usize,
) -> Result<SubtypeRun> {
    if classes < 2 {
        return Err(UmtlError::config("corpus.num_subtypes", "subtype fine-tuning needs at least 2 classes"));
    }
    let frozen_digest = frozen.model.digest();
    let mut store = frozen.model.store.clone();
    let mut rng = stage_rng(cfg.run.seed, 0, STAGE_SUBTYPE);
    let clf = frozen.model.tlc.with_head(&mut store, "subtype.head", classes, &mut rng);

    let mut words_keep: Vec<Mat> = Vec::new();
    let mut classes_keep: Vec<usize> = Vec::new();
    let mut skipped = Vec::new();
    for b in train {
        let Some(s) = b.subtype_label else { continue };
        if s >= classes {
            return Err(UmtlError::Shape(format!("{}: subtype {s} outside {classes} classes", b.slide_id)));
        }
        let (pos, words) = detected_positives(frozen, b, cfg);
        if pos.is_empty() {
            skipped.push(b.slide_id.clone());
            continue;
        }
        for i in pos {
            words_keep.push(words[i].clone());
            classes_keep.push(s);
        }
    }
    let present: std::collections::BTreeSet<usize> = classes_keep.iter().copied().collect();
    if present.len() < 2 {
        return Err(UmtlError::DegenerateLabels(format!(
            "single-class fine-tuning: positives carry subtypes {present:?}"
        )));
    }
    let items: Vec<CleanerItem<'_>> = words_keep
        .iter()
        .zip(&classes_keep)
        .map(|(w, &c)| CleanerItem { input: w, class: c })
        .collect();
    let ccfg = CleanerTrainConfig {
        lr: cfg.train.lr,
        epochs: cfg.train.tlc_epochs,
        batch_size: cfg.train.cleaner_batch,
        balance_classes: cfg.train.balance_classes,
        seed: stage_seed(cfg.run.seed, 0, STAGE_SUBTYPE),
    };
    let history = tlc::train_cleaner(&mut store, &clf, clf.param_ids(), &items, &ccfg, "subtype", 0)?;

    let mut predictions = Vec::with_capacity(test.len());
    for b in test {
        let (pos, words) = detected_positives(frozen, b, cfg);
        let positions: Vec<(usize, usize)> = b.patches.iter().map(|p| p.grid_pos).collect();
        let graph = SpatialGraph::new(&positions);
        let (subtype, component_sizes, scores) = if pos.is_empty() {
            (None, vec![0; classes], vec![0.0; classes])
        } else {
            let probs: Vec<Vec<f64>> = pos
                .iter()
                .map(|&i| tlc::class_probabilities(&clf, &store, &words[i]))
                .collect();
            let (best, sizes, means) = subtype_vote(&graph, &pos, &probs, cfg.smoothing.hops)?;
            (Some(best), sizes, means)
        };
        predictions.push(SubtypePrediction {
            slide_id: b.slide_id.clone(),
            truth: b.subtype_label,
            subtype,
            scores,
            component_sizes,
            positives: pos.len(),
        });
    }
    let judged: Vec<&SubtypePrediction> = predictions.iter().filter(|p| p.truth.is_some()).collect();
    let accuracy = (!judged.is_empty())
        .then(|| judged.iter().filter(|p| p.subtype == p.truth).count() as f64 / judged.len() as f64);
    debug_assert_eq!(frozen.model.digest(), frozen_digest);
    Ok(SubtypeRun {
        classifier: clf,
        store,
        history,
        report: SubtypeReport {
            classes,
            evaluated: judged.len(),
            accuracy,
            predictions,
            skipped_training_slides: skipped,
            frozen_digest,
            seed: cfg.run.seed,
            config_digest: cfg.digest(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Patch;
    use proptest::prelude::*;

    fn bag(id: &str, label: u8, n: usize, patient: Option<&str>) -> WsiBag {
        let patches = (0..n)
            .map(|i| Patch::new(Mat::zeros(4, 3), 2, (0, i), None).unwrap())
            .collect();
        WsiBag {
            slide_id: id.into(),
            patches,
            grid_shape: (1, n),
            truth_slide_label: Some(label),
            subtype_label: None,
            patient_id: patient.map(str::to_string),
        }
    }

    #[test]
    fn discard_rule_examples() {
        // per-slide min-max of [0, 0.6, 0.5, 1] is itself
        let normal = bag("n", 0, 4, None);
        let positive = bag("p", 1, 4, None);
        let losses = [0.0, 0.6, 0.5, 1.0, 0.0, 0.6, 0.5, 1.0];
        let set = inherit_and_clean(&[&normal, &positive], &losses, 1.0).unwrap();
        assert_eq!(set.slides[0].retained, vec![true, false, true, false]);
        assert_eq!(set.slides[1].retained, vec![false, true, true, true]);
        assert_eq!(set.slides[1].labels, vec![1; 4]);
        assert!(set.excluded.is_empty());
    }

    #[test]
    fn fully_discarded_slide_is_excluded() {
        // a positive slide whose instances all scale below 0.5 cannot exist
        // with min-max, but a single-instance slide scales to 0
        let p = bag("p", 1, 1, None);
        let set = inherit_and_clean(&[&p], &[3.0], 1.0).unwrap();
        assert_eq!(set.excluded, vec!["p".to_string()]);
    }

    #[test]
    fn split_keeps_patients_together_and_stratifies() {
        let bags: Vec<WsiBag> = (0..40)
            .map(|i| bag(&format!("s{i}"), (i % 2) as u8, 2, Some(&format!("pt{}", i / 4))))
            .collect();
        let refs: Vec<&WsiBag> = bags.iter().collect();
        let (train, test) = split_bags(&refs, 0.25, 7);
        assert_eq!(train.len() + test.len(), 40);
        for t in &test {
            for r in &train {
                assert_ne!(bags[*t].patient_id, bags[*r].patient_id);
            }
        }
        let pos = test.iter().filter(|&&i| bags[i].truth_slide_label == Some(1)).count();
        assert_eq!(pos * 2, test.len());
        assert_eq!(split_bags(&refs, 0.25, 7), (train, test));
    }

    #[test]
    fn split_without_patients_is_exactly_stratified() {
        let bags: Vec<WsiBag> = (0..40).map(|i| bag(&format!("s{i}"), (i < 20) as u8, 1, None)).collect();
        let refs: Vec<&WsiBag> = bags.iter().collect();
        let (_, test) = split_bags(&refs, 0.25, 3);
        let pos = test.iter().filter(|&&i| bags[i].truth_slide_label == Some(1)).count();
        assert_eq!((test.len(), pos), (10, 5));
    }

    #[test]
    fn vote_prefers_largest_component() {
        let positions: Vec<(usize, usize)> = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).collect();
        let g = SpatialGraph::new(&positions);
        // whole grid positive, class 1 confident everywhere
        let pos: Vec<usize> = (0..9).collect();
        let probs: Vec<Vec<f64>> = (0..9).map(|_| vec![0.1, 0.9]).collect();
        let (best, sizes, means) = subtype_vote(&g, &pos, &probs, 1).unwrap();
        assert_eq!(best, 1);
        assert_eq!(sizes, vec![0, 9]);
        assert!((means[0] + means[1] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn retained_and_discarded_partition_the_labeled(
            losses in proptest::collection::vec(0.0f64..5.0, 12),
            labels in proptest::collection::vec(0u8..2, 3),
        ) {
            let bags: Vec<WsiBag> = labels.iter().enumerate().map(|(i, &l)| bag(&format!("b{i}"), l, 4, None)).collect();
            let refs: Vec<&WsiBag> = bags.iter().collect();
            let set = inherit_and_clean(&refs, &losses, 1.0).unwrap();
            let discarded: usize = set.slides.iter().map(|s| s.retained.iter().filter(|&&r| !r).count()).sum();
            prop_assert_eq!(set.retained_count() + discarded, set.labeled_count());
            for (s, chunk) in set.slides.iter().zip(losses.chunks(4)) {
                let scaled = minmax(chunk);
                for (k, &r) in s.retained.iter().enumerate() {
                    let discard = if s.slide_label == 1 { scaled[k] < 0.5 } else { scaled[k] > 0.5 };
                    prop_assert_eq!(r, !discard);
                }
            }
        }

        #[test]
        fn labeled_subsets_are_nested(seed in 0u64..50, lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let bags: Vec<WsiBag> = (0..30).map(|i| bag(&format!("s{i}"), (i % 3 == 0) as u8, 1, None)).collect();
            let refs: Vec<&WsiBag> = bags.iter().collect();
            let small = labeled_subset(&refs, lo, seed);
            let large = labeled_subset(&refs, hi, seed);
            prop_assert!(small.iter().all(|i| large.contains(i)));
        }
    }
}
