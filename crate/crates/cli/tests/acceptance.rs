//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit when any
//! criterion fails.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umtl::autograd::gradcheck::max_rel_error_sampled;
use umtl::config::{LossNormalization, ModelConfig, RunConfig, SlideRule};
use umtl::corpus::{synthesize, SyntheticConfig, WsiBag};
use umtl::eval::{
    froc, heterogeneity, predict_state, report, roc_auc, run_ablation_suite, AblationVariant, FrocSlide, MetricReport,
};
use umtl::labels::{Provenance, PseudoLabelSet, SlideLabels};
use umtl::mutual::{run_mutual, CleanerKind, IterationState, Model, MutualOptions};
use umtl::params::ParamStore;
use umtl::slide::{connected_components, smooth, wsi_label, SpatialGraph};
use umtl::supervision::{split_bags, weak_from_state};
use umtl::tlc::{clean_labels, cleaner_loss_and_grads, cross_entropy_loss, Cleaner, CleanerItem};
use umtl::tplg::{batch_loss_and_grads, pseudo_labels, transformation_losses, NoiseTarget, SlideOutputs, Target, TplgItem};
use umtl::Mat;

const SEEDS: u64 = 10;
const ORDERING_SEEDS: u64 = 5;
const MIN_INSTANCE_AUC: f64 = 0.85;
const MIN_SLIDE_ACCURACY: f64 = 0.80;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Collects failed checks of one criterion.
#[derive(Default)]
struct Checks {
    failed: Vec<String>,
    count: usize,
}

impl Checks {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        self.count += 1;
        if !ok {
            self.failed.push(what.into());
        }
    }

    fn close(&mut self, a: f64, b: f64, tol: f64, what: &str) {
        self.check((a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0), format!("{what}: {a} vs {b}"));
    }

    fn finish(self, t0: Instant) -> Outcome {
        let secs = t0.elapsed().as_secs_f64();
        if self.failed.is_empty() {
            outcome(true, format!("{} checks in {secs:.1}s", self.count))
        } else {
            outcome(false, format!("{} of {} checks failed: {}", self.failed.len(), self.count, self.failed.join("; ")))
        }
    }
}

fn tiny_model_cfg() -> ModelConfig {
    ModelConfig {
        patch_size: 8,
        window: 4,
        channels: 4,
        layers: 1,
        heads: 2,
        mlp_ratio: 0.5,
    }
}

fn grid(rows: usize, cols: usize) -> Vec<(usize, usize)> {
    (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect()
}

fn l1_rows(a: &Mat, b: &Mat) -> Vec<f64> {
    (0..a.rows)
        .map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y).abs()).sum())
        .collect()
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut c = Checks::default();

    // slide decision
    let labels: Vec<u8> = (0..100).map(|i| (i < 10) as u8).collect();
    let flat = grid(10, 10);
    let attrs: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let y = wsi_label(&flat, &labels, &attrs, 0.1, SlideRule::Count, 0).unwrap();
    c.check(y.label == 1, "count rule, 10 of 100");
    let labels9: Vec<u8> = (0..100).map(|i| (i < 9) as u8).collect();
    let y = wsi_label(&flat, &labels9, &attrs, 0.1, SlideRule::Count, 0).unwrap();
    c.check(y.label == 0, "count rule, 9 of 100");
    let pos = grid(8, 8);
    let mut blob = vec![0.0; 64];
    for (r, cc) in [(1, 1), (1, 2), (1, 3), (1, 4), (2, 1), (2, 2), (2, 3), (2, 4)] {
        blob[r * 8 + cc] = 1.0;
    }
    for (r, cc) in [(5, 0), (6, 6), (4, 7), (7, 3)] {
        blob[r * 8 + cc] = 1.0;
    }
    let binary: Vec<u8> = blob.iter().map(|&v| v as u8).collect();
    let largest = flood_fill(8, 8, &binary.iter().map(|&b| b == 1).collect::<Vec<_>>())
        .iter()
        .map(BTreeSet::len)
        .max()
        .unwrap();
    c.check(largest == 8, format!("flood fill largest {largest}"));
    let y = wsi_label(&pos, &binary, &blob, 0.1, SlideRule::Component, 0).unwrap();
    c.check(y.label == 1 && y.score == 8.0, format!("component rule, blob of 8: {y:?}"));
    let mut seven = blob.clone();
    seven[2 * 8 + 4] = 0.0;
    let y = wsi_label(&pos, &binary, &seven, 0.1, SlideRule::Component, 0).unwrap();
    c.check(y.label == 1 && y.score == 7.0, "component rule, blob of 7");
    seven[2 * 8 + 3] = 0.0;
    let y = wsi_label(&pos, &binary, &seven, 0.1, SlideRule::Component, 0).unwrap();
    c.check(y.label == 0 && y.score == 6.0, "component rule, blob of 6");

    // loss hierarchy and the discriminative target
    let noise = NoiseTarget::new(7, 4);
    let ones = Mat::filled(3, 4, 1.0);
    let zeros = Mat::zeros(3, 4);
    let same = transformation_losses(
        &[SlideOutputs {
            slide_id: "a",
            words: std::slice::from_ref(&ones),
            recon: std::slice::from_ref(&ones),
        }],
        None,
        &noise,
    )
    .unwrap();
    c.check(same.slides[0].windows[0].iter().all(|&v| v == 0.0), "identical tensors give zero loss");
    let unit = transformation_losses(
        &[SlideOutputs {
            slide_id: "a",
            words: std::slice::from_ref(&ones),
            recon: std::slice::from_ref(&zeros),
        }],
        None,
        &noise,
    )
    .unwrap();
    c.check(unit.slides[0].windows[0] == vec![4.0; 3], "a=2, c=1 window loss is 4");

    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let dim = 16;
    let noise = NoiseTarget::new(41, dim);
    let target = noise.rows(4);
    let mut data: Vec<(String, Vec<Mat>, Vec<Mat>, Vec<u8>)> = Vec::new();
    for s in 0..3 {
        let n = 3 + s;
        let words: Vec<Mat> = (0..n).map(|_| Mat::uniform(4, dim, 1.0, &mut rng)).collect();
        let recon: Vec<Mat> = (0..n).map(|_| Mat::uniform(4, dim, 1.0, &mut rng)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        data.push((format!("s{s}"), words, recon, labels));
    }
    let outputs: Vec<SlideOutputs<'_>> = data
        .iter()
        .map(|(id, w, r, _)| SlideOutputs {
            slide_id: id,
            words: w,
            recon: r,
        })
        .collect();
    let set = PseudoLabelSet {
        slides: data
            .iter()
            .map(|(id, _, _, l)| SlideLabels {
                slide_id: id.clone(),
                labels: l.clone(),
                probs: None,
            })
            .collect(),
        provenance: Provenance::Tlc,
        iteration: 2,
    };
    let labelled = transformation_losses(&outputs, Some(&set), &noise).unwrap();
    let free = transformation_losses(&outputs, None, &noise).unwrap();
    let mut corpus_total = 0.0;
    for (k, (_, words, recon, labels)) in data.iter().enumerate() {
        let mut slide_total = 0.0;
        for i in 0..words.len() {
            let expect_dl = if labels[i] == 1 {
                l1_rows(&target, &recon[i])
            } else {
                l1_rows(&words[i], &recon[i])
            };
            let expect_free = l1_rows(&words[i], &recon[i]);
            for (j, &e) in expect_dl.iter().enumerate() {
                c.close(labelled.slides[k].windows[i][j], e, 1e-12, "labelled window loss");
            }
            for (j, &e) in expect_free.iter().enumerate() {
                c.close(free.slides[k].windows[i][j], e, 1e-12, "label-free window loss");
            }
            let inst: f64 = labelled.slides[k].windows[i].iter().sum();
            c.check(labelled.slides[k].instances[i] == inst, "instance = sum of windows");
            slide_total += labelled.slides[k].instances[i];
        }
        c.check(labelled.slides[k].total == slide_total, "slide = sum of instances");
        corpus_total += labelled.slides[k].total;
    }
    c.check(labelled.total == corpus_total, "corpus = sum of slides");

    // pseudo-labels
    let norm = LossNormalization::MinOverMax;
    c.check(pseudo_labels(&[0.0, 10.0], 0.5, norm).unwrap() == vec![0, 1], "losses {0,10}");
    c.check(pseudo_labels(&[2.0, 4.0, 6.0, 8.0], 0.5, norm).unwrap() == vec![0, 0, 1, 1], "losses {2,4,6,8}");
    c.check(pseudo_labels(&[0.0, 0.0], 0.5, norm).is_err(), "all-zero losses rejected");

    // cross-entropy
    let ce = cross_entropy_loss(&[1], &[1.0 - 1e-7]).unwrap();
    c.close(ce, 1e-7, 1e-3, "perfect prediction");
    c.close(cross_entropy_loss(&[1], &[0.5]).unwrap(), std::f64::consts::LN_2, 1e-15, "ln 2");
    let ls: Vec<u8> = (0..64).map(|_| rng.random_range(0..2u8)).collect();
    let ps: Vec<f64> = (0..64).map(|_| rng.random_range(0.01..0.99)).collect();
    let oracle = -ls
        .iter()
        .zip(&ps)
        .map(|(&l, &p)| if l == 1 { p.ln() } else { (1.0 - p).ln() })
        .sum::<f64>()
        / 64.0;
    c.close(cross_entropy_loss(&ls, &ps).unwrap(), oracle, 1e-12, "cross-entropy oracle");

    // cleaned labels
    c.check(clean_labels(&[0.5], 0.5) == vec![1], "phi = beta_c is positive");
    c.check(clean_labels(&[0.1, 0.9], 0.5) == vec![0, 1], "phi {0.1, 0.9}");

    c.finish(t0)
}

fn perturbed_model(seed: u64) -> Model {
    let mut model = Model::new(&tiny_model_cfg(), seed, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for id in model.store.ids().collect::<Vec<_>>() {
        if model.store.name(id).contains("head.") {
            continue;
        }
        for v in &mut model.store.get_mut(id).data {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    model
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let mut c = Checks::default();
    let model = perturbed_model(11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let px = Mat::from_vec(64, 3, (0..192).map(|_| rng.random_range(0.0..1.0)).collect());
    let store = &model.store;
    let mut worst = Vec::new();
    for target in [Target::Words, Target::Noise] {
        let items = [TplgItem { pixels: &px, target }];
        let (_, grads) = batch_loss_and_grads(store, &model.embed, &model.tplg, &model.noise, &items);
        let loss = |s: &ParamStore| batch_loss_and_grads(s, &model.embed, &model.tplg, &model.noise, &items).0;
        let groups: [(&str, Vec<_>, f64); 3] = [
            ("feature head", model.embed.head.param_ids(), 1e-6),
            (
                "projector",
                store.ids_with_prefix(&["proj."]).into_iter().chain([model.embed.positional]).collect(),
                1e-4,
            ),
            ("inverse projector", store.ids_with_prefix(&["inv."]), 1e-4),
        ];
        for (name, ids, h) in groups {
            let err = max_rel_error_sampled(store, &ids, h, 1e-3, 48, loss, &grads);
            worst.push(format!("{name}/{target:?} {err:.1e}"));
            c.check(err < 1e-4, format!("{name} ({target:?}) rel err {err:.2e}"));
        }
    }
    let inputs: Vec<Mat> = (0..4).map(|_| Mat::uniform(4, 64, 1.0, &mut rng)).collect();
    let items: Vec<CleanerItem<'_>> = inputs
        .iter()
        .enumerate()
        .map(|(i, x)| CleanerItem { input: x, class: i % 2 })
        .collect();
    let w = [1.0, 1.0];
    let (_, grads) = cleaner_loss_and_grads(store, &model.tlc, &items, &w);
    let err = max_rel_error_sampled(
        store,
        &model.tlc.param_ids(),
        1e-5,
        1e-6,
        64,
        |s| cleaner_loss_and_grads(s, &model.tlc, &items, &w).0,
        &grads,
    );
    worst.push(format!("cleaner {err:.1e}"));
    c.check(err < 1e-4, format!("cleaner rel err {err:.2e}"));
    let mut o = c.finish(t0);
    o.detail = format!("{} [{}]", o.detail, worst.join(", "));
    o
}

fn pairwise_auc(scores: &[f64], truths: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if truths[i] == 1 && truths[j] == 0 {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn flood_fill(rows: usize, cols: usize, on: &[bool]) -> Vec<BTreeSet<usize>> {
    fn visit(r: usize, c: usize, rows: usize, cols: usize, on: &[bool], seen: &mut [bool], comp: &mut BTreeSet<usize>) {
        let i = r * cols + c;
        if !on[i] || seen[i] {
            return;
        }
        seen[i] = true;
        comp.insert(i);
        if r > 0 {
            visit(r - 1, c, rows, cols, on, seen, comp);
        }
        if r + 1 < rows {
            visit(r + 1, c, rows, cols, on, seen, comp);
        }
        if c > 0 {
            visit(r, c - 1, rows, cols, on, seen, comp);
        }
        if c + 1 < cols {
            visit(r, c + 1, rows, cols, on, seen, comp);
        }
    }
    let mut seen = vec![false; on.len()];
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let mut comp = BTreeSet::new();
            visit(r, c, rows, cols, on, &mut seen, &mut comp);
            if !comp.is_empty() {
                out.push(comp);
            }
        }
    }
    out
}

fn dense_smooth(rows: usize, cols: usize, attrs: &[f64], hops: usize) -> Vec<f64> {
    let n = rows * cols;
    let mut a = vec![vec![0.0; n]; n];
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            let mut nb = vec![i];
            if r > 0 {
                nb.push(i - cols);
            }
            if r + 1 < rows {
                nb.push(i + cols);
            }
            if c > 0 {
                nb.push(i - 1);
            }
            if c + 1 < cols {
                nb.push(i + 1);
            }
            for &j in &nb {
                a[i][j] = 1.0 / nb.len() as f64;
            }
        }
    }
    let mut power: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    for _ in 0..hops {
        power = (0..n)
            .map(|i| (0..n).map(|j| (0..n).map(|k| power[i][k] * a[k][j]).sum()).collect())
            .collect();
    }
    (0..n).map(|i| (0..n).map(|j| power[i][j] * attrs[j]).sum()).collect()
}

/// Every distinct threshold, then the best sensitivity within each rate.
fn swept_froc(slides: &[FrocSlide], lesions: &[Vec<Option<usize>>], total: usize) -> f64 {
    let mut thresholds: Vec<f64> = slides.iter().flat_map(|s| s.detections.iter().map(|d| d.1)).collect();
    thresholds.push(f64::INFINITY);
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let mut hit = BTreeSet::new();
            let mut fps = 0;
            for (s, owner) in slides.iter().zip(lesions) {
                for &(p, score) in &s.detections {
                    if score >= t {
                        match owner[p] {
                            Some(l) => {
                                hit.insert(l);
                            }
                            None => fps += 1,
                        }
                    }
                }
            }
            (fps as f64 / slides.len() as f64, hit.len() as f64 / total as f64)
        })
        .collect();
    let rates = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
    rates
        .iter()
        .map(|&r| points.iter().filter(|p| p.0 <= r).map(|p| p.1).fold(0.0, f64::max))
        .sum::<f64>()
        / 6.0
}

fn criterion_3() -> Outcome {
    let t0 = Instant::now();
    let mut c = Checks::default();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scores: Vec<f64> = (0..50).map(|_| rng.random_range(0..12) as f64 / 3.0).collect();
    let truths: Vec<u8> = (0..50).map(|_| rng.random_range(0..2u8)).collect();
    c.close(roc_auc(&scores, &truths).unwrap(), pairwise_auc(&scores, &truths), 1e-12, "AUC vs all pairs");

    let positions = grid(10, 10);
    let graph = SpatialGraph::new(&positions);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let on: Vec<bool> = (0..100).map(|_| rng.random_bool(0.45)).collect();
        let got: BTreeSet<BTreeSet<usize>> = connected_components(&graph, &on)
            .into_iter()
            .map(|v| v.into_iter().collect())
            .collect();
        let want: BTreeSet<BTreeSet<usize>> = flood_fill(10, 10, &on).into_iter().collect();
        c.check(got == want, format!("components differ for seed {seed}"));
    }

    let positions = grid(5, 5);
    let graph = SpatialGraph::new(&positions);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let attrs: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut isolated = vec![0.0; 25];
    isolated[12] = 1.0;
    for hops in 0..=3 {
        for a in [&attrs, &isolated] {
            let got = smooth(&graph, a, hops).unwrap();
            let want = dense_smooth(5, 5, a, hops);
            for (g, w) in got.iter().zip(&want) {
                c.close(*g, *w, 1e-12, &format!("smoothing at n={hops}"));
            }
        }
    }
    c.check(smooth(&graph, &isolated, 2).unwrap()[12] < 0.5, "isolated positive suppressed");

    let slides = vec![
        FrocSlide {
            positions: grid(1, 4),
            truth: vec![1, 1, 0, 0],
            detections: vec![(0, 0.9), (2, 0.8), (1, 0.3)],
        },
        FrocSlide {
            positions: grid(1, 4),
            truth: vec![1, 0, 1, 0],
            detections: vec![(3, 0.95), (2, 0.6)],
        },
        FrocSlide {
            positions: grid(1, 3),
            truth: vec![0, 0, 0],
            detections: vec![(1, 0.7), (0, 0.2)],
        },
    ];
    let lesions = vec![
        vec![Some(0), Some(0), None, None],
        vec![Some(1), None, Some(2), None],
        vec![None, None, None],
    ];
    let got = froc(&slides).unwrap();
    c.close(got, swept_froc(&slides, &lesions, 3), 1e-15, "FROC vs sweep");
    // by hand: 0 at 1/4, 1/3 at 1/2, 2/3 from 1 FP per slide on
    c.close(got, (0.0 + 1.0 / 3.0 + 4.0 * 2.0 / 3.0) / 6.0, 1e-15, "FROC by hand");

    c.finish(t0)
}

fn criterion_4() -> Outcome {
    let t0 = Instant::now();
    let bags = synthesize(&SyntheticConfig::default()).unwrap();
    let h = heterogeneity(&bags, ModelConfig::default().window).unwrap();
    let de = h.positive_entropy - h.negative_entropy;
    let dp = h.negative_pcc - h.positive_pcc;
    let pass = de >= 0.05 && dp >= 0.05 && h.positive_patches >= 100 && h.negative_patches >= 100;
    outcome(
        pass,
        format!(
            "entropy pos {:.3} neg {:.3} (diff {de:.3}); pcc pos {:.3} neg {:.3} (diff {dp:.3}); {} pos / {} neg patches; {:.1}s",
            h.positive_entropy,
            h.negative_entropy,
            h.positive_pcc,
            h.negative_pcc,
            h.positive_patches,
            h.negative_patches,
            t0.elapsed().as_secs_f64()
        ),
    )
}

struct SeedRun {
    seed: u64,
    seconds: f64,
    umtl: MetricReport,
    generator_accuracy: [f64; 2],
    cleaned_accuracy: [f64; 2],
    weak_zero_identical: bool,
    weak_auc: [f64; 2],
    orderings: Option<Orderings>,
}

/// Instance AUC of UMTL, UMTL_v2, UMTL_v3, TLC_C and Auto-MLP on one seed.
struct Orderings {
    auc: [f64; 5],
    aborted: Vec<String>,
}

const ORDER_NAMES: [&str; 5] = ["UMTL", "UMTL_v2", "UMTL_v3", "TLC_C", "Auto-MLP"];
/// Score of a comparison variant whose training collapsed to one class.
const CHANCE_AUC: f64 = 0.5;

fn run_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::desk_small();
    cfg.corpus.seed = seed;
    cfg.run.seed = seed;
    cfg
}

fn auc(r: &MetricReport) -> f64 {
    r.instance_auc().unwrap_or(f64::NAN)
}

fn seed_run(seed: u64) -> Result<SeedRun, String> {
    let err = |e: umtl::UmtlError| format!("seed {seed}: {e}");
    let t0 = Instant::now();
    let cfg = run_config(seed);
    let bags = synthesize(&cfg.corpus).map_err(err)?;
    let refs: Vec<&WsiBag> = bags.iter().collect();
    let (tr, te) = split_bags(&refs, cfg.run.test_fraction, cfg.run.seed);
    let train: Vec<&WsiBag> = tr.iter().map(|&i| refs[i]).collect();
    let test: Vec<&WsiBag> = te.iter().map(|&i| refs[i]).collect();
    assert_eq!(test.len(), 10, "ten held-out bags");
    let states = run_mutual(&train, &cfg, &MutualOptions::default(), &mut |_| Ok(())).map_err(err)?;
    assert_eq!(states.len(), 3);
    let last: &IterationState = &states[2];
    let tlc = Some(CleanerKind::Transformer);
    let preds = predict_state(last, &test, &cfg, tlc, cfg.smoothing.rule).map_err(err)?;
    let umtl = report(&preds, "UMTL", &cfg);
    let seconds = t0.elapsed().as_secs_f64();
    let metric = |s: &IterationState, f: fn(&IterationState) -> Option<f64>| f(s).unwrap_or(f64::NAN);
    let generator_accuracy = [
        metric(&states[0], |s| s.metrics.generator_accuracy),
        metric(last, |s| s.metrics.generator_accuracy),
    ];
    let cleaned_accuracy = [
        metric(&states[0], |s| s.metrics.cleaned_accuracy),
        metric(last, |s| s.metrics.cleaned_accuracy),
    ];

    let zero = weak_from_state(last, &train, &test, &cfg, 0.0).map_err(err)?;
    let mut zero_report = zero.report.clone();
    zero_report.variant = umtl.variant.clone();
    let weak_zero_identical = zero.state.model.digest() == last.model.digest()
        && zero.state.current_labels() == last.current_labels()
        && zero_report == umtl;
    let mut weak_auc = [f64::NAN; 2];
    for (slot, f) in weak_auc.iter_mut().zip([0.1, 1.0]) {
        *slot = auc(&weak_from_state(last, &train, &test, &cfg, f).map_err(err)?.report);
    }

    let orderings = if seed < ORDERING_SEEDS {
        let v2 = predict_state(&states[0], &test, &cfg, None, SlideRule::Component).map_err(err)?;
        let v3 = predict_state(&states[0], &test, &cfg, tlc, SlideRule::Component).map_err(err)?;
        let others = run_ablation_suite(&train, &test, &cfg, &[AblationVariant::ClusterLabels, AblationVariant::AutoMlp])
            .map_err(err)?;
        let aborted = others.iter().filter(|r| r.aborted()).map(|r| r.variant.clone()).collect();
        let baseline = |r: &MetricReport| if r.aborted() { CHANCE_AUC } else { auc(r) };
        Some(Orderings {
            auc: [
                auc(&umtl),
                auc(&report(&v2, "UMTL_v2", &cfg)),
                auc(&report(&v3, "UMTL_v3", &cfg)),
                baseline(&others[0]),
                baseline(&others[1]),
            ],
            aborted,
        })
    } else {
        None
    };
    let s = SeedRun {
        seed,
        seconds,
        umtl,
        generator_accuracy,
        cleaned_accuracy,
        weak_zero_identical,
        weak_auc,
        orderings,
    };
    eprintln!(
        "  seed {seed}: auc {:.4} slide acc {:.2} | generator acc {:.4} -> {:.4}, cleaned acc {:.4} -> {:.4} | weak auc {:.4} / {:.4} | {:.0}s",
        auc(&s.umtl),
        s.umtl.slide_accuracy().unwrap_or(f64::NAN),
        s.generator_accuracy[0],
        s.generator_accuracy[1],
        s.cleaned_accuracy[0],
        s.cleaned_accuracy[1],
        s.weak_auc[0],
        s.weak_auc[1],
        t0.elapsed().as_secs_f64()
    );
    if let Some(o) = &s.orderings {
        eprintln!("  seed {seed} orderings: {:?} aborted {:?}", o.auc, o.aborted);
    }
    Ok(s)
}

fn errors_note(errors: &[String]) -> String {
    if errors.is_empty() {
        String::new()
    } else {
        format!("; failed runs: {}", errors.join(" | "))
    }
}

fn criterion_5(runs: &[SeedRun], errors: &[String]) -> Outcome {
    let first: Vec<&SeedRun> = runs.iter().filter(|r| r.seed < ORDERING_SEEDS).collect();
    let ok = first
        .iter()
        .filter(|r| auc(&r.umtl) >= MIN_INSTANCE_AUC && r.umtl.slide_accuracy().unwrap_or(0.0) >= MIN_SLIDE_ACCURACY)
        .count();
    let per: Vec<String> = first
        .iter()
        .map(|r| format!("{:.3}/{:.2}", auc(&r.umtl), r.umtl.slide_accuracy().unwrap_or(f64::NAN)))
        .collect();
    let slowest = first.iter().map(|r| r.seconds).fold(0.0, f64::max);
    let threads = rayon::current_num_threads();
    outcome(
        ok >= 4,
        format!(
            "{ok}/{ORDERING_SEEDS} seeds reach auc >= {MIN_INSTANCE_AUC} and slide acc >= {MIN_SLIDE_ACCURACY} [{}]; slowest run {slowest:.0}s on {threads} thread(s){}",
            per.join(" "),
            errors_note(errors)
        ),
    )
}

fn criterion_6(runs: &[SeedRun], errors: &[String]) -> Outcome {
    let improved = runs.iter().filter(|r| r.generator_accuracy[1] >= r.generator_accuracy[0]).count();
    let cleaned = runs.iter().filter(|r| r.cleaned_accuracy[1] >= r.cleaned_accuracy[0]).count();
    let need = (0.8 * SEEDS as f64).ceil() as usize;
    outcome(
        improved >= need,
        format!(
            "generator pseudo-label accuracy at t=3 >= t=1 in {improved}/{SEEDS} seeds (need {need}); cleaned labels: {cleaned}/{SEEDS}{}",
            errors_note(errors)
        ),
    )
}

fn criterion_7(runs: &[SeedRun], errors: &[String]) -> Outcome {
    let rows: Vec<&Orderings> = runs.iter().filter_map(|r| r.orderings.as_ref()).collect();
    let mean = |k: usize| rows.iter().map(|r| r.auc[k]).sum::<f64>() / rows.len() as f64;
    let m: Vec<f64> = (0..5).map(mean).collect();
    let complete = rows.len() as u64 == ORDERING_SEEDS;
    let pass = complete && m[0] > m[1] && m[0] > m[3] && m[0] > m[4] && m[0] >= m[2];
    let means: Vec<String> = ORDER_NAMES.iter().zip(&m).map(|(n, v)| format!("{n} {v:.4}")).collect();
    let aborted: Vec<String> = rows
        .iter()
        .zip(runs.iter().filter(|r| r.orderings.is_some()))
        .flat_map(|(o, r)| o.aborted.iter().map(move |v| format!("{v} seed {}", r.seed)))
        .collect();
    let aborted = if aborted.is_empty() {
        String::new()
    } else {
        format!("; collapsed to one class and scored at chance {CHANCE_AUC}: {}", aborted.join(", "))
    };
    outcome(
        pass,
        format!("mean auc over {} seeds: {}{aborted}{}", rows.len(), means.join(", "), errors_note(errors)),
    )
}

fn criterion_8(runs: &[SeedRun], errors: &[String]) -> Outcome {
    let ok = runs.iter().filter(|r| r.weak_auc[1] >= r.weak_auc[0]).count();
    let identical = runs.len() as u64 == SEEDS && runs.iter().all(|r| r.weak_zero_identical);
    let need = (0.8 * SEEDS as f64).ceil() as usize;
    outcome(
        ok >= need && identical,
        format!(
            "auc(100%) >= auc(10%) in {ok}/{SEEDS} seeds (need {need}); fraction 0 identical to the unsupervised run: {identical}{}",
            errors_note(errors)
        ),
    )
}

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

/// Runs every command once under `root`; returns the number of commands.
fn cli_session(root: &Path) -> Result<usize, String> {
    let cfg = tiny_config();
    let cfg = cfg.to_str().unwrap();
    let steps: Vec<Vec<&str>> = vec![
        vec!["generate", "--config", cfg, "--out", "corpus"],
        vec!["train", "--config", cfg, "--corpus", "runs/corpus", "--out", "run"],
        vec!["evaluate", "--run", "run"],
        vec!["ablate", "--config", cfg, "--corpus", "runs/corpus", "--out", "ablation"],
        vec!["weak-curve", "--config", cfg, "--corpus", "runs/corpus", "--out", "curve", "--fractions", "0,0.5,1"],
        vec!["generate", "--config", cfg, "--set", "corpus.num_subtypes=2", "--out", "typed"],
        vec!["train", "--config", cfg, "--corpus", "runs/typed", "--out", "frozen", "--set", "corpus.num_subtypes=2"],
        vec![
            "subtype", "--config", cfg, "--corpus", "runs/typed", "--run", "frozen", "--out", "subtype", "--set",
            "corpus.num_subtypes=2",
        ],
    ];
    for args in &steps {
        let out = Command::new(env!("CARGO_BIN_EXE_umtl"))
            .args(args)
            .current_dir(root)
            .env("UMTL_RUN_DIR", "runs")
            .env_remove("UMTL_THREADS")
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()));
        }
    }
    Ok(steps.len())
}

fn files_under(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files_under(&p, base, out);
        } else {
            out.push(p.strip_prefix(base).unwrap().to_path_buf());
        }
    }
}

fn criterion_9() -> Outcome {
    let t0 = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut commands = 0;
    for root in [a.path(), b.path()] {
        match cli_session(root) {
            Ok(n) => commands = n,
            Err(e) => return outcome(false, e),
        }
    }
    let mut files = Vec::new();
    files_under(&a.path().join("runs"), a.path(), &mut files);
    files.sort();
    let mut other = Vec::new();
    files_under(&b.path().join("runs"), b.path(), &mut other);
    other.sort();
    if files != other {
        return outcome(false, "the two sessions wrote different file sets");
    }
    let compared: Vec<&PathBuf> = files.iter().filter(|p| !p.ends_with("timings.json")).collect();
    let differing: Vec<String> = compared
        .iter()
        .filter(|p| std::fs::read(a.path().join(p)).unwrap() != std::fs::read(b.path().join(p)).unwrap())
        .map(|p| p.display().to_string())
        .collect();
    let kinds = ["run_manifest.json", "checkpoint.umtl", "report.json"];
    let covered = kinds.iter().all(|k| compared.iter().any(|p| p.ends_with(k)));
    outcome(
        differing.is_empty() && covered,
        if differing.is_empty() {
            format!(
                "{} files byte-identical across two sessions of {commands} commands (wall-clock timings excluded); {:.1}s",
                compared.len(),
                t0.elapsed().as_secs_f64()
            )
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn main() {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report_line = |k: usize, o: Outcome| {
        println!("criterion {k}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((k, o));
    };
    report_line(1, criterion_1());
    report_line(2, criterion_2());
    report_line(3, criterion_3());
    report_line(4, criterion_4());
    let (runs, errors): (Vec<_>, Vec<_>) = (0..SEEDS).map(seed_run).partition(Result::is_ok);
    let runs: Vec<SeedRun> = runs.into_iter().map(Result::unwrap).collect();
    let errors: Vec<String> = errors.into_iter().map(|e| e.err().unwrap()).collect();
    report_line(5, criterion_5(&runs, &errors));
    report_line(6, criterion_6(&runs, &errors));
    report_line(7, criterion_7(&runs, &errors));
    report_line(8, criterion_8(&runs, &errors));
    report_line(9, criterion_9());
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(k, _)| *k).collect();
    if failed.is_empty() {
        println!("acceptance: all 9 criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
