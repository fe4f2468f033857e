//! Metrics, patch heterogeneity statistics, prediction on held-out bags and
//! the ablation harness.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::baseline::run_auto_mlp;
use crate::config::{NodeAttribute, RunConfig, SlideRule};
use crate::corpus::WsiBag;
use crate::error::{Result, UmtlError};
use crate::mutual::{run_mutual, Bootstrap, CleanerKind, IterationState, LossScale, MutualOptions};
use crate::slide::{self, minmax, SlideDecision, SpatialGraph};
use crate::tensor::Mat;
use crate::tlc::clean_labels;
use crate::tplg::pseudo_labels;

/// Area under the ROC curve via the Mann-Whitney statistic with midranks.
pub fn roc_auc(scores: &[f64], truths: &[u8]) -> Result<f64> {
    if scores.len() != truths.len() {
        return Err(UmtlError::Shape(format!("{} scores for {} truths", scores.len(), truths.len())));
    }
    let pos = truths.iter().filter(|&&t| t == 1).count();
    let neg = truths.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(UmtlError::DegenerateLabels("AUC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = (0..scores.len()).filter(|&k| truths[k] == 1).map(|k| ranks[k]).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_labels(pred: &[u8], truth: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        c
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.tp + self.fp + self.tn + self.fn_;
        if n == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / n as f64
    }

    /// F1 of the positive class; 0 when there are no true or predicted
    /// positives.
    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            return 0.0;
        }
        2.0 * self.tp as f64 / d as f64
    }
}

/// False-positive rates per slide at which sensitivity is averaged.
pub const FROC_RATES: [f64; 6] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// One slide for FROC: patch positions, ground truth and scored detections
/// (patch index, confidence).
#[derive(Clone, Debug)]
pub struct FrocSlide {
    pub positions: Vec<(usize, usize)>,
    pub truth: Vec<u8>,
    pub detections: Vec<(usize, f64)>,
}

/// Mean lesion sensitivity at the six false-positive rates. Lesions are
/// 4-connected truth-positive regions; a detection hits the lesion holding
/// its patch. At each rate the best sensitivity reachable without exceeding
/// it is used.
pub fn froc(slides: &[FrocSlide]) -> Result<f64> {
    let mut lesion_of: Vec<Vec<Option<usize>>> = Vec::with_capacity(slides.len());
    let mut total_lesions = 0usize;
    for s in slides {
        let g = SpatialGraph::new(&s.positions);
        let flags: Vec<bool> = s.truth.iter().map(|&t| t == 1).collect();
        let mut owner = vec![None; s.positions.len()];
        for comp in slide::connected_components(&g, &flags) {
            for v in comp {
                owner[v] = Some(total_lesions);
            }
            total_lesions += 1;
        }
        lesion_of.push(owner);
    }
    if total_lesions == 0 {
        return Err(UmtlError::DegenerateLabels("FROC needs at least one lesion".into()));
    }
    // (score, lesion or None)
    let mut dets: Vec<(f64, Option<usize>)> = Vec::new();
    for (s, owner) in slides.iter().zip(&lesion_of) {
        for &(p, score) in &s.detections {
            dets.push((score, owner[p]));
        }
    }
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_slides = slides.len() as f64;
    let mut hit = vec![false; total_lesions];
    let mut hits = 0usize;
    let mut fps = 0usize;
    let mut curve = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < dets.len() {
        let mut j = i;
        while j < dets.len() && dets[j].0 == dets[i].0 {
            match dets[j].1 {
                Some(l) if !hit[l] => {
                    hit[l] = true;
                    hits += 1;
                }
                Some(_) => {}
                None => fps += 1,
            }
            j += 1;
        }
        curve.push((fps as f64 / n_slides, hits as f64 / total_lesions as f64));
        i = j;
    }
    let mean = FROC_RATES
        .iter()
        .map(|&r| {
            curve
                .iter()
                .filter(|(fp, _)| *fp <= r)
                .map(|(_, s)| *s)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / FROC_RATES.len() as f64;
    Ok(mean)
}

/// Orthonormal 2-D type-II DCT of a row-major m×m image.
pub fn dct2(gray: &[f64], m: usize) -> Vec<f64> {
    let basis: Vec<f64> = (0..m)
        .flat_map(|k| {
            let s = if k == 0 { (1.0 / m as f64).sqrt() } else { (2.0 / m as f64).sqrt() };
            (0..m).map(move |n| s * (PI / m as f64 * (n as f64 + 0.5) * k as f64).cos())
        })
        .collect();
    let mut rows = vec![0.0; m * m];
    for r in 0..m {
        for k in 0..m {
            rows[r * m + k] = (0..m).map(|n| basis[k * m + n] * gray[r * m + n]).sum();
        }
    }
    let mut out = vec![0.0; m * m];
    for k in 0..m {
        for c in 0..m {
            out[k * m + c] = (0..m).map(|n| basis[k * m + n] * rows[n * m + c]).sum();
        }
    }
    out
}

/// Normalised Shannon entropy of the AC magnitude spectrum, in [0,1].
/// Constant patches have entropy 0.
pub fn dct_entropy(gray: &[f64], m: usize) -> f64 {
    let coeffs = dct2(gray, m);
    let ac: Vec<f64> = coeffs[1..].iter().map(|c| c.abs()).collect();
    let total: f64 = ac.iter().sum();
    if total.is_nan() || total <= 1e-12 || ac.len() < 2 {
        return 0.0;
    }
    let h: f64 = ac
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let p = v / total;
            -p * p.ln()
        })
        .sum();
    h / (ac.len() as f64).ln()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn has_variance(v: &[f64]) -> bool {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() > 1e-24
}

/// Mean Pearson correlation over unordered pairs of a×a windows of an m×m
/// grayscale patch; constant windows are left out.
pub fn window_pcc(gray: &[f64], m: usize, a: usize) -> Result<f64> {
    if a == 0 || !m.is_multiple_of(a) {
        return Err(UmtlError::config("window", format!("{a} does not divide {m}")));
    }
    let per = m / a;
    let windows: Vec<Vec<f64>> = (0..per * per)
        .map(|w| {
            let (wr, wc) = (w / per, w % per);
            (0..a * a).map(|k| gray[(wr * a + k / a) * m + wc * a + k % a]).collect()
        })
        .filter(|w: &Vec<f64>| has_variance(w))
        .collect();
    if windows.len() < 2 {
        return Err(UmtlError::DegenerateBatch(format!("{} windows with variance", windows.len())));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..windows.len() {
        for j in i + 1..windows.len() {
            total += pearson(&windows[i], &windows[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Mean DCT entropy and window PCC of positive and negative patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heterogeneity {
    pub positive_entropy: f64,
    pub negative_entropy: f64,
    pub positive_pcc: f64,
    pub negative_pcc: f64,
    pub positive_patches: usize,
    pub negative_patches: usize,
}

pub fn heterogeneity(bags: &[WsiBag], window: usize) -> Result<Heterogeneity> {
    let mut sums = [[0.0; 2]; 2];
    let mut pcc_counts = [0usize; 2];
    let mut counts = [0usize; 2];
    for b in bags {
        for p in &b.patches {
            let Some(t) = p.truth_label else { continue };
            let t = t as usize;
            let g = p.gray();
            sums[t][0] += dct_entropy(&g, p.size);
            counts[t] += 1;
            if let Ok(v) = window_pcc(&g, p.size, window) {
                sums[t][1] += v;
                pcc_counts[t] += 1;
            }
        }
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(UmtlError::DegenerateLabels("need labelled patches of both classes".into()));
    }
    Ok(Heterogeneity {
        positive_entropy: sums[1][0] / counts[1] as f64,
        negative_entropy: sums[0][0] / counts[0] as f64,
        positive_pcc: sums[1][1] / pcc_counts[1].max(1) as f64,
        negative_pcc: sums[0][1] / pcc_counts[0].max(1) as f64,
        positive_patches: counts[1],
        negative_patches: counts[0],
    })
}

/// Held-out predictions for one slide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub positions: Vec<(usize, usize)>,
    pub losses: Vec<f64>,
    /// Instance score used for ranking: φ when a cleaner ran, otherwise the
    /// scaled generator loss.
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    /// Node attributes before smoothing.
    pub attributes: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub decision: SlideDecision,
    pub rule: SlideRule,
    pub truth_slide: Option<u8>,
    pub truths: Option<Vec<u8>>,
}

/// Turns per-instance losses (and φ when available) for `bags` into instance
/// labels, smoothed attributes and slide decisions.
pub fn predict_slides(
    bags: &[&WsiBag],
    losses: &[f64],
    probs: Option<&[f64]>,
    scale: &LossScale,
    cfg: &RunConfig,
    rule: SlideRule,
) -> Result<Vec<SlidePrediction>> {
    let total: usize = bags.iter().map(|b| b.len()).sum();
    if losses.len() != total || probs.is_some_and(|p| p.len() != total) {
        return Err(UmtlError::Shape("predictions do not cover every instance".into()));
    }
    let labels = match probs {
        Some(p) => clean_labels(p, cfg.thresholds.beta_c),
        None => pseudo_labels(losses, cfg.thresholds.beta_r, cfg.train.loss_normalization)?,
    };
    let scores: Vec<f64> = match probs {
        Some(p) => p.to_vec(),
        None => losses.iter().map(|&l| scale.apply(l)).collect(),
    };
    let mut out = Vec::with_capacity(bags.len());
    let mut off = 0;
    for b in bags {
        let n = b.len();
        let r = off..off + n;
        off += n;
        let positions: Vec<(usize, usize)> = b.patches.iter().map(|p| p.grid_pos).collect();
        let attributes = match cfg.smoothing.attribute {
            NodeAttribute::Loss => minmax(&losses[r.clone()]),
            NodeAttribute::Label => labels[r.clone()].iter().map(|&l| l as f64).collect(),
            NodeAttribute::Probability => scores[r.clone()].to_vec(),
        };
        let graph = SpatialGraph::new(&positions);
        let smoothed = slide::smooth(&graph, &attributes, cfg.smoothing.hops)?;
        let decision = match rule {
            SlideRule::Count => slide::count_decision(&labels[r.clone()], cfg.thresholds.beta_wsi)?,
            SlideRule::Component => slide::component_decision(&graph, &smoothed, cfg.thresholds.beta_wsi)?,
        };
        out.push(SlidePrediction {
            slide_id: b.slide_id.clone(),
            positions,
            losses: losses[r.clone()].to_vec(),
            scores: scores[r.clone()].to_vec(),
            labels: labels[r].to_vec(),
            attributes,
            smoothed,
            decision,
            rule,
            truth_slide: b.truth_slide_label,
            truths: b.truths(),
        });
    }
    Ok(out)
}

/// Predictions of a trained iteration state on `bags`.
pub fn predict_state(
    state: &IterationState,
    bags: &[&WsiBag],
    cfg: &RunConfig,
    cleaner: Option<CleanerKind>,
    rule: SlideRule,
) -> Result<Vec<SlidePrediction>> {
    let pixels: Vec<&Mat> = bags.iter().flat_map(|b| b.patches.iter().map(|p| &p.pixels)).collect();
    let outputs = state.model.infer(&pixels);
    let losses: Vec<f64> = outputs.iter().map(|o| o.loss).collect();
    let probs = cleaner.map(|k| state.model.cleaner_probabilities(k, &outputs));
    predict_slides(bags, &losses, probs.as_deref(), &state.scale, cfg, rule)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub count: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    pub seed: u64,
    pub config_digest: String,
    pub instance: Option<LevelMetrics>,
    pub slide: Option<LevelMetrics>,
    pub froc: Option<f64>,
    /// Set when ground truth is missing and only unsupervised diagnostics
    /// could be computed.
    pub note: Option<String>,
    pub positive_instances: usize,
    pub positive_slides: usize,
}

impl MetricReport {
    pub fn instance_auc(&self) -> Option<f64> {
        self.instance.as_ref().and_then(|m| m.auc)
    }

    pub fn slide_accuracy(&self) -> Option<f64> {
        self.slide.as_ref().map(|m| m.accuracy)
    }

    /// True for a comparison variant whose training collapsed.
    pub fn aborted(&self) -> bool {
        self.note.as_deref().is_some_and(|n| n.starts_with(ABORTED_PREFIX))
    }
}

pub const NO_TRUTH_NOTE: &str = "no ground truth; diagnostics only";

pub fn report(preds: &[SlidePrediction], variant: &str, cfg: &RunConfig) -> MetricReport {
    let positive_instances = preds.iter().map(|p| p.labels.iter().filter(|&&l| l == 1).count()).sum();
    let positive_slides = preds.iter().filter(|p| p.decision.label == 1).count();
    let instance = preds
        .iter()
        .map(|p| p.truths.clone())
        .collect::<Option<Vec<_>>>()
        .map(|truths| {
            let t: Vec<u8> = truths.concat();
            let l: Vec<u8> = preds.iter().flat_map(|p| p.labels.iter().copied()).collect();
            let s: Vec<f64> = preds.iter().flat_map(|p| p.scores.iter().copied()).collect();
            let c = Confusion::from_labels(&l, &t);
            LevelMetrics {
                count: t.len(),
                accuracy: c.accuracy(),
                f1: c.f1(),
                auc: roc_auc(&s, &t).ok(),
            }
        });
    let slide = preds.iter().map(|p| p.truth_slide).collect::<Option<Vec<u8>>>().map(|t| {
        let l: Vec<u8> = preds.iter().map(|p| p.decision.label).collect();
        let s: Vec<f64> = preds
            .iter()
            .map(|p| p.decision.score / p.positions.len().max(1) as f64)
            .collect();
        let c = Confusion::from_labels(&l, &t);
        LevelMetrics {
            count: t.len(),
            accuracy: c.accuracy(),
            f1: c.f1(),
            auc: roc_auc(&s, &t).ok(),
        }
    });
    let froc_score = preds
        .iter()
        .map(|p| {
            p.truths.clone().map(|truth| FrocSlide {
                positions: p.positions.clone(),
                detections: (0..p.labels.len())
                    .filter(|&i| p.labels[i] == 1)
                    .map(|i| (i, p.scores[i]))
                    .collect(),
                truth,
            })
        })
        .collect::<Option<Vec<_>>>()
        .and_then(|s| froc(&s).ok());
    let note = (instance.is_none() && slide.is_none()).then(|| NO_TRUTH_NOTE.to_string());
    MetricReport {
        variant: variant.to_string(),
        seed: cfg.run.seed,
        config_digest: cfg.digest(),
        instance,
        slide,
        froc: froc_score,
        note,
        positive_instances,
        positive_slides,
    }
}

/// Rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationVariant {
    #[serde(rename = "UMTL")]
    Umtl,
    #[serde(rename = "UMTL_v1")]
    NoClustering,
    #[serde(rename = "UMTL_v2")]
    GeneratorOnly,
    #[serde(rename = "UMTL_v3")]
    NoDiscriminative,
    #[serde(rename = "TLC_C")]
    ClusterLabels,
    #[serde(rename = "UMTL_v4")]
    PerceptronCleaner,
    #[serde(rename = "Auto-MLP")]
    AutoMlp,
    #[serde(rename = "UMTL_v5")]
    NoSmoothing,
}

/// Component inclusion of one variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub clustering: bool,
    pub transformer_generator: bool,
    pub autoencoder_generator: bool,
    pub discriminative: bool,
    pub transformer_cleaner: bool,
    pub perceptron_cleaner: bool,
    pub smoothing: bool,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 8] = [
        AblationVariant::Umtl,
        AblationVariant::NoClustering,
        AblationVariant::GeneratorOnly,
        AblationVariant::NoDiscriminative,
        AblationVariant::ClusterLabels,
        AblationVariant::PerceptronCleaner,
        AblationVariant::AutoMlp,
        AblationVariant::NoSmoothing,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Umtl => "UMTL",
            AblationVariant::NoClustering => "UMTL_v1",
            AblationVariant::GeneratorOnly => "UMTL_v2",
            AblationVariant::NoDiscriminative => "UMTL_v3",
            AblationVariant::ClusterLabels => "TLC_C",
            AblationVariant::PerceptronCleaner => "UMTL_v4",
            AblationVariant::AutoMlp => "Auto-MLP",
            AblationVariant::NoSmoothing => "UMTL_v5",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|v| v.name().eq_ignore_ascii_case(s))
    }

    pub fn components(&self) -> Components {
        let all = Components {
            clustering: true,
            transformer_generator: true,
            autoencoder_generator: false,
            discriminative: true,
            transformer_cleaner: true,
            perceptron_cleaner: false,
            smoothing: true,
        };
        match self {
            AblationVariant::Umtl => all,
            AblationVariant::NoClustering => Components { clustering: false, ..all },
            AblationVariant::GeneratorOnly => Components {
                discriminative: false,
                transformer_cleaner: false,
                ..all
            },
            AblationVariant::NoDiscriminative => Components { discriminative: false, ..all },
            AblationVariant::ClusterLabels => Components {
                transformer_generator: false,
                discriminative: false,
                ..all
            },
            AblationVariant::PerceptronCleaner => Components {
                transformer_cleaner: false,
                perceptron_cleaner: true,
                ..all
            },
            AblationVariant::AutoMlp => Components {
                transformer_generator: false,
                autoencoder_generator: true,
                transformer_cleaner: false,
                perceptron_cleaner: true,
                ..all
            },
            AblationVariant::NoSmoothing => Components { smoothing: false, ..all },
        }
    }

    /// Loop options for variants built on the transformer generator or the
    /// clustering bootstrap.
    pub fn mutual_options(&self) -> Option<MutualOptions> {
        let c = self.components();
        if c.autoencoder_generator {
            return None;
        }
        Some(MutualOptions {
            clustering: c.clustering,
            cleaner: if c.transformer_cleaner {
                Some(CleanerKind::Transformer)
            } else if c.perceptron_cleaner {
                Some(CleanerKind::Perceptron)
            } else {
                None
            },
            discriminative: c.discriminative,
            bootstrap: if c.transformer_generator {
                Bootstrap::Generator
            } else {
                Bootstrap::Clustering
            },
        })
    }

    pub fn rule(&self) -> SlideRule {
        if self.components().smoothing {
            SlideRule::Component
        } else {
            SlideRule::Count
        }
    }
}

/// Trains `variant` on `train` and reports on `test`.
pub fn run_ablation(train: &[&WsiBag], test: &[&WsiBag], cfg: &RunConfig, variant: AblationVariant) -> Result<MetricReport> {
    Ok(run_ablation_suite(train, test, cfg, &[variant])?.remove(0))
}

/// Runs several variants, sharing work between those that are prefixes of
/// the full pipeline: the generator-only and no-discriminative variants are
/// read off the first iteration of the full run, and the count-rule variant
/// reuses its final state.
pub fn run_ablation_suite(
    train: &[&WsiBag],
    test: &[&WsiBag],
    cfg: &RunConfig,
    variants: &[AblationVariant],
) -> Result<Vec<MetricReport>> {
    use AblationVariant as V;
    let needs_full = variants
        .iter()
        .any(|v| matches!(v, V::Umtl | V::GeneratorOnly | V::NoDiscriminative | V::NoSmoothing));
    let full = if needs_full {
        Some(run_mutual(train, cfg, &MutualOptions::default(), &mut |_| Ok(()))?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(variants.len());
    for &v in variants {
        let preds = match v {
            V::Umtl | V::NoSmoothing => {
                let s = full.as_ref().expect("full run").last().expect("iterations");
                predict_state(s, test, cfg, Some(CleanerKind::Transformer), v.rule())?
            }
            V::GeneratorOnly => {
                let s = &full.as_ref().expect("full run")[0];
                predict_state(s, test, cfg, None, v.rule())?
            }
            V::NoDiscriminative => {
                let s = &full.as_ref().expect("full run")[0];
                predict_state(s, test, cfg, Some(CleanerKind::Transformer), v.rule())?
            }
            V::NoClustering | V::ClusterLabels | V::PerceptronCleaner => {
                let opts = v.mutual_options().expect("transformer variant");
                match run_mutual(train, cfg, &opts, &mut |_| Ok(())) {
                    Ok(states) => predict_state(states.last().expect("iterations"), test, cfg, opts.cleaner, v.rule())?,
                    Err(UmtlError::DegenerateLabels(why)) => {
                        out.push(aborted_report(v.name(), cfg, &why));
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            }
            V::AutoMlp => match run_auto_mlp(train, cfg) {
                Ok(run) => {
                    let pixels: Vec<&Mat> = test.iter().flat_map(|b| b.patches.iter().map(|p| &p.pixels)).collect();
                    let (losses, probs) = run.score(&pixels);
                    predict_slides(test, &losses, Some(&probs), &run.scale, cfg, v.rule())?
                }
                Err(UmtlError::DegenerateLabels(why)) => {
                    out.push(aborted_report(v.name(), cfg, &why));
                    continue;
                }
                Err(e) => return Err(e),
            },
        };
        out.push(report(&preds, v.name(), cfg));
    }
    Ok(out)
}

pub const ABORTED_PREFIX: &str = "aborted: ";

/// Report for a comparison variant whose training collapsed to one class.
pub fn aborted_report(variant: &str, cfg: &RunConfig, why: &str) -> MetricReport {
    MetricReport {
        variant: variant.to_string(),
        seed: cfg.run.seed,
        config_digest: cfg.digest(),
        instance: None,
        slide: None,
        froc: None,
        note: Some(format!("{ABORTED_PREFIX}{why}")),
        positive_instances: 0,
        positive_slides: 0,
    }
}
