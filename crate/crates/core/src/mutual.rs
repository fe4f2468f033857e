//! Instance clustering bootstrap and the alternating generator/cleaner loop.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arrays::{read_file, sha256_hex, write_atomic, ArrayFile};
use crate::config::{LossNormalization, ModelConfig, RunConfig};
use crate::corpus::WsiBag;
use crate::error::{Result, UmtlError};
use crate::features::Embedder;
use crate::labels::{Provenance, PseudoLabelSet};
use crate::params::ParamStore;
use crate::tensor::Mat;
use crate::tlc::{self, Cleaner, CleanerItem, CleanerTrainConfig, Classifier, PerceptronCleaner};
use crate::tplg::{self, EpochRecord, NoiseTarget, Target, Tplg, TplgItem, TplgTrainConfig};

/// Independent random stream for one (iteration, stage) of a run.
pub fn stage_rng(seed: u64, iteration: usize, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64 * 16 + stage);
    rng
}

pub fn stage_seed(seed: u64, iteration: usize, stage: u64) -> u64 {
    stage_rng(seed, iteration, stage).random()
}

const STAGE_CLUSTER: u64 = 1;
const STAGE_TPLG: u64 = 2;
const STAGE_TLC: u64 = 3;
const STAGE_NOISE: u64 = 4;
const STAGE_INIT: u64 = 5;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centroids.iter().enumerate() {
        let d = sq_dist(p, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

const RESEED_LIMIT: usize = 16;

/// Lloyd iterations from k-means++ seeding. Clusters left empty are re-seeded
/// at the point farthest from its centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iterations: usize, seed: u64) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let n = points.len();
    if k == 0 || n < k {
        return Err(UmtlError::config("clustering.k_o", format!("{k} clusters for {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    pick = i;
                    break;
                }
                t -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    let mut assign = vec![usize::MAX; n];
    let mut reseeds = 0;
    for _ in 0..max_iterations.max(1) {
        let next: Vec<usize> = points.par_iter().map(|p| nearest(p, &centroids).0).collect();
        let changed = next != assign;
        assign = next;
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assign) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut reseeded = false;
        for c in 0..k {
            if counts[c] == 0 {
                if reseeds >= RESEED_LIMIT {
                    continue;
                }
                reseeds += 1;
                reseeded = true;
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centroids[assign[a]])
                            .total_cmp(&sq_dist(&points[b], &centroids[assign[b]]))
                            .then(b.cmp(&a))
                    })
                    .expect("non-empty");
                centroids[c] = points[far].clone();
            } else {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed && !reseeded {
            break;
        }
    }
    Ok((assign, centroids))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub assignments: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Ids of the largest clusters, presumed negative.
    pub retained: Vec<usize>,
}

impl ClusterAssignment {
    pub fn retained_mask(&self) -> Vec<bool> {
        self.assignments.iter().map(|c| self.retained.contains(c)).collect()
    }

    pub fn retained_count(&self) -> usize {
        self.retained.iter().map(|&c| self.sizes[c]).sum()
    }
}

/// k-means on pooled features; the `k_l` largest clusters (ties to the
/// lower id) are retained.
pub fn instance_clustering(
    features: &[Vec<f64>],
    k_o: usize,
    k_l: usize,
    max_iterations: usize,
    seed: u64,
) -> Result<ClusterAssignment> {
    if k_l == 0 || k_l > k_o {
        return Err(UmtlError::config("clustering.k_l", "need 1 <= k_l <= k_o"));
    }
    let (assignments, _) = kmeans(features, k_o, max_iterations, seed)?;
    let mut sizes = vec![0usize; k_o];
    for &c in &assignments {
        sizes[c] += 1;
    }
    let mut order: Vec<usize> = (0..k_o).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    order.truncate(k_l);
    order.sort_unstable();
    Ok(ClusterAssignment {
        assignments,
        sizes,
        retained: order,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanerKind {
    Transformer,
    Perceptron,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bootstrap {
    /// Generator losses thresholded into pseudo-labels.
    Generator,
    /// Cluster membership used directly as labels (largest clusters negative).
    Clustering,
}

/// Component toggles of the loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MutualOptions {
    pub clustering: bool,
    pub cleaner: Option<CleanerKind>,
    pub discriminative: bool,
    pub bootstrap: Bootstrap,
}

impl Default for MutualOptions {
    fn default() -> Self {
        MutualOptions {
            clustering: true,
            cleaner: Some(CleanerKind::Transformer),
            discriminative: true,
            bootstrap: Bootstrap::Generator,
        }
    }
}

/// Every trainable part of the pipeline with its parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub embed: Embedder,
    pub tplg: Tplg,
    pub tlc: Classifier,
    pub perceptron: Option<PerceptronCleaner>,
    pub noise: NoiseTarget,
}

impl Model {
    pub fn new(model: &ModelConfig, seed: u64, perceptron: bool) -> Result<Self> {
        model.validate()?;
        let mut rng = stage_rng(seed, 0, STAGE_INIT);
        let mut store = ParamStore::new();
        let embed = Embedder::new(&mut store, model.patch_size, model.window, model.channels, &mut rng)?;
        let tplg = Tplg::new(&mut store, model, &mut rng);
        let tlc = Classifier::new(&mut store, "tlc", model, 1, &mut rng);
        let d = model.token_dim();
        let perceptron = perceptron.then(|| PerceptronCleaner::new(&mut store, "mlp_cleaner", d, (d / 2).max(1), &mut rng));
        let noise = NoiseTarget::new(stage_seed(seed, 0, STAGE_NOISE), d);
        Ok(Model {
            store,
            embed,
            tplg,
            tlc,
            perceptron,
            noise,
        })
    }

    /// Label-free generator outputs for each instance.
    pub fn infer(&self, pixels: &[&Mat]) -> Vec<tplg::InstanceOutputs> {
        tplg::infer_instances(&self.store, &self.embed, &self.tplg, &self.noise, pixels)
    }

    pub fn pooled_features(&self, pixels: &[&Mat]) -> Vec<Vec<f64>> {
        pixels.par_iter().map(|p| self.embed.pooled(&self.store, p)).collect()
    }

    pub fn words(&self, pixels: &[&Mat]) -> Vec<Mat> {
        pixels.par_iter().map(|p| self.embed.words(&self.store, p)).collect()
    }

    /// φ for each instance from the configured cleaner.
    pub fn cleaner_probabilities(&self, kind: CleanerKind, outputs: &[tplg::InstanceOutputs]) -> Vec<f64> {
        match kind {
            CleanerKind::Transformer => {
                let refs: Vec<&Mat> = outputs.iter().map(|o| &o.words).collect();
                tlc::probabilities(&self.tlc, &self.store, &refs)
            }
            CleanerKind::Perceptron => {
                let clf = self.perceptron.as_ref().expect("perceptron cleaner initialised");
                let rows = latent_rows(outputs);
                let refs: Vec<&Mat> = rows.iter().collect();
                tlc::probabilities(clf, &self.store, &refs)
            }
        }
    }

    pub fn checkpoint(&self) -> ArrayFile {
        let mut f = ArrayFile::new();
        f.set_meta("kind", "umtl-checkpoint");
        f.set_meta("noise_seed", self.noise.seed);
        f.set_meta("noise_digest", self.noise.digest());
        for (name, m) in self.store.iter() {
            f.push(name, m.clone());
        }
        f
    }

    pub fn load_checkpoint(&mut self, f: &ArrayFile, origin: &Path) -> Result<()> {
        let mut loaded = ParamStore::new();
        for (name, m) in &f.arrays {
            loaded.add(name.clone(), m.clone());
        }
        self.store.load_from(&loaded).map_err(|e| UmtlError::Malformed {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })?;
        if f.meta("noise_digest") != Some(self.noise.digest().as_str()) {
            return Err(UmtlError::Malformed {
                path: origin.to_path_buf(),
                reason: "noise target does not match the configured seed".into(),
            });
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        sha256_hex(&self.checkpoint().to_bytes())
    }
}

fn latent_rows(outputs: &[tplg::InstanceOutputs]) -> Vec<Mat> {
    outputs
        .iter()
        .map(|o| Mat::from_vec(1, o.latent_pooled.len(), o.latent_pooled.clone()))
        .collect()
}

/// Min and max of the training losses, used to place new losses on the same
/// scale as the training pseudo-labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossScale {
    pub min: f64,
    pub max: f64,
    pub normalization: LossNormalization,
}

impl LossScale {
    pub fn fit(losses: &[f64], normalization: LossNormalization) -> Self {
        LossScale {
            min: losses.iter().cloned().fold(f64::INFINITY, f64::min),
            max: losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            normalization,
        }
    }

    pub fn apply(&self, loss: f64) -> f64 {
        let denom = match self.normalization {
            LossNormalization::MinOverMax => self.max,
            LossNormalization::MinMax => self.max - self.min,
        };
        if denom > 0.0 {
            (loss - self.min) / denom
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub instances: usize,
    pub generator_positives: usize,
    pub cleaned_positives: Option<usize>,
    pub retained_by_clustering: Option<usize>,
    /// Agreement with ground truth, reported only; never used for training.
    pub generator_accuracy: Option<f64>,
    pub cleaned_accuracy: Option<f64>,
    pub final_generator_loss: Option<f64>,
    pub final_cleaner_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct IterationState {
    pub iteration: usize,
    pub model: Model,
    /// Generator (or clustering) labels for the training instances.
    pub pseudo: PseudoLabelSet,
    /// Cleaner output labels, when a cleaner ran.
    pub cleaned: Option<PseudoLabelSet>,
    pub scale: LossScale,
    pub clusters: Option<ClusterAssignment>,
    pub history: Vec<EpochRecord>,
    pub metrics: IterationMetrics,
}

impl IterationState {
    /// Labels that drive the next iteration.
    pub fn current_labels(&self) -> &PseudoLabelSet {
        self.cleaned.as_ref().unwrap_or(&self.pseudo)
    }
}

fn accuracy_against_truth(bags: &[&WsiBag], labels: &[u8]) -> Option<f64> {
    let mut truth = Vec::new();
    for b in bags {
        truth.extend(b.truths()?);
    }
    let hits = truth.iter().zip(labels).filter(|(a, b)| a == b).count();
    Some(hits as f64 / truth.len().max(1) as f64)
}

fn check_two_classes(labels: &[u8], what: &str, iteration: usize) -> Result<()> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(UmtlError::DegenerateLabels(format!(
            "{what} at iteration {iteration}: {pos} of {} instances positive",
            labels.len()
        )));
    }
    Ok(())
}

/// Pseudo-labels with min/max taken over consecutive groups of `batch_bags`
/// bags.
pub fn batched_pseudo_labels(
    bags: &[&WsiBag],
    losses: &[f64],
    batch_bags: usize,
    beta_r: f64,
    norm: LossNormalization,
) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(losses.len());
    let mut off = 0;
    for group in bags.chunks(batch_bags.max(1)) {
        let n: usize = group.iter().map(|b| b.len()).sum();
        out.extend(tplg::pseudo_labels(&losses[off..off + n], beta_r, norm)?);
        off += n;
    }
    Ok(out)
}

struct Pipeline<'a> {
    bags: &'a [&'a WsiBag],
    pixels: Vec<&'a Mat>,
    offsets: Vec<usize>,
    cfg: &'a RunConfig,
    opts: &'a MutualOptions,
}

impl<'a> Pipeline<'a> {
    fn new(bags: &'a [&'a WsiBag], cfg: &'a RunConfig, opts: &'a MutualOptions) -> Result<Self> {
        if bags.is_empty() {
            return Err(UmtlError::EmptyBag("no training bags".into()));
        }
        let mut pixels = Vec::new();
        let mut offsets = vec![0];
        for b in bags {
            b.validate()?;
            if b.patch_size() != cfg.model.patch_size {
                return Err(UmtlError::Shape(format!(
                    "{}: patch size {} but model expects {}",
                    b.slide_id,
                    b.patch_size(),
                    cfg.model.patch_size
                )));
            }
            pixels.extend(b.patches.iter().map(|p| &p.pixels));
            offsets.push(pixels.len());
        }
        Ok(Pipeline {
            bags,
            pixels,
            offsets,
            cfg,
            opts,
        })
    }

    fn tplg_cfg(&self, iteration: usize) -> TplgTrainConfig {
        TplgTrainConfig {
            lr: self.cfg.train.lr,
            epochs: self.cfg.train.tplg_epochs,
            batch_bags: self.cfg.train.batch_bags,
            train_head: self.cfg.train.train_head,
            seed: stage_seed(self.cfg.run.seed, iteration, STAGE_TPLG),
        }
    }

    fn cleaner_cfg(&self, iteration: usize) -> CleanerTrainConfig {
        CleanerTrainConfig {
            lr: self.cfg.train.lr,
            epochs: self.cfg.train.tlc_epochs,
            batch_size: self.cfg.train.cleaner_batch,
            balance_classes: self.cfg.train.balance_classes,
            seed: stage_seed(self.cfg.run.seed, iteration, STAGE_TLC),
        }
    }

    /// Per-bag generator items; `target` picks the reconstruction target of
    /// each flat instance, `None` drops it.
    fn tplg_items(&self, target: impl Fn(usize) -> Option<Target>) -> Vec<Vec<TplgItem<'a>>> {
        (0..self.bags.len())
            .map(|b| {
                (self.offsets[b]..self.offsets[b + 1])
                    .filter_map(|i| target(i).map(|t| TplgItem { pixels: self.pixels[i], target: t }))
                    .collect()
            })
            .collect()
    }

    fn train_cleaner(
        &self,
        model: &mut Model,
        kind: CleanerKind,
        outputs: &[tplg::InstanceOutputs],
        labels: &[u8],
        iteration: usize,
    ) -> Result<(Vec<f64>, Vec<EpochRecord>)> {
        let cfg = self.cleaner_cfg(iteration);
        let (hist, probs) = match kind {
            CleanerKind::Transformer => {
                let refs: Vec<&Mat> = outputs.iter().map(|o| &o.words).collect();
                let clf = model.tlc.clone();
                let hist = tlc::train_tlc(&mut model.store, &clf, &refs, labels, &cfg, iteration)?;
                (hist, tlc::probabilities(&clf, &model.store, &refs))
            }
            CleanerKind::Perceptron => {
                let clf = model.perceptron.clone().expect("perceptron cleaner initialised");
                let rows = latent_rows(outputs);
                let items: Vec<CleanerItem<'_>> = rows
                    .iter()
                    .zip(labels)
                    .map(|(r, &l)| CleanerItem { input: r, class: l as usize })
                    .collect();
                let hist = tlc::train_cleaner(&mut model.store, &clf, clf.param_ids(), &items, &cfg, "perceptron", iteration)?;
                let refs: Vec<&Mat> = rows.iter().collect();
                (hist, tlc::probabilities(&clf, &model.store, &refs))
            }
        };
        Ok((probs, hist))
    }

    fn reset_cleaner(&self, model: &mut Model) -> Result<()> {
        let fresh = Model::new(&self.cfg.model, self.cfg.run.seed, model.perceptron.is_some())?;
        let mut ids = model.tlc.param_ids();
        if let Some(p) = &model.perceptron {
            ids.extend(p.param_ids());
        }
        for id in ids {
            *model.store.get_mut(id) = fresh.store.get(id).clone();
        }
        Ok(())
    }

    fn iteration(&self, iteration: usize, prev: Option<&IterationState>) -> Result<IterationState> {
        let cfg = self.cfg;
        let mut model = match prev {
            Some(p) if cfg.train.warm_start => p.model.clone(),
            Some(p) => {
                let mut m = Model::new(&cfg.model, cfg.run.seed, p.model.perceptron.is_some())?;
                // the shared head keeps its trained state
                for id in m.embed.param_ids() {
                    *m.store.get_mut(id) = p.model.store.get(id).clone();
                }
                m
            }
            None => Model::new(&cfg.model, cfg.run.seed, self.opts.cleaner == Some(CleanerKind::Perceptron))?,
        };
        let mut history = Vec::new();
        let mut metrics = IterationMetrics {
            instances: self.pixels.len(),
            ..IterationMetrics::default()
        };

        let mut clusters = None;
        if iteration == 1 && (self.opts.clustering || self.opts.bootstrap == Bootstrap::Clustering) {
            let feats = model.pooled_features(&self.pixels);
            let c = instance_clustering(
                &feats,
                cfg.clustering.k_o,
                cfg.clustering.k_l,
                cfg.clustering.max_iterations,
                stage_seed(cfg.run.seed, iteration, STAGE_CLUSTER),
            )?;
            metrics.retained_by_clustering = Some(c.retained_count());
            clusters = Some(c);
        }

        let (pseudo, scale, outputs) = if iteration == 1 && self.opts.bootstrap == Bootstrap::Clustering {
            let c = clusters.as_ref().expect("clustering ran");
            let labels: Vec<u8> = c.retained_mask().iter().map(|&r| (!r) as u8).collect();
            let outputs = model.infer(&self.pixels);
            let losses: Vec<f64> = outputs.iter().map(|o| o.loss).collect();
            let set = PseudoLabelSet::from_flat(self.bags, &labels, None, Provenance::Clustering, iteration);
            (set, LossScale::fit(&losses, cfg.train.loss_normalization), outputs)
        } else {
            let items = if iteration == 1 {
                let mask = clusters.as_ref().map(|c| c.retained_mask());
                self.tplg_items(|i| match &mask {
                    Some(m) if !m[i] => None,
                    _ => Some(Target::Words),
                })
            } else {
                let labels = prev.expect("previous iteration").current_labels().flat_labels();
                let dl = self.opts.discriminative;
                self.tplg_items(|i| Some(if dl && labels[i] == 1 { Target::Noise } else { Target::Words }))
            };
            let hist = tplg::train_tplg(
                &mut model.store,
                &model.embed.clone(),
                &model.tplg.clone(),
                &model.noise.clone(),
                &items,
                &self.tplg_cfg(iteration),
                iteration,
            )?;
            metrics.final_generator_loss = hist.last().map(|h| h.loss);
            history.extend(hist);
            let outputs = model.infer(&self.pixels);
            let losses: Vec<f64> = outputs.iter().map(|o| o.loss).collect();
            let labels = batched_pseudo_labels(
                self.bags,
                &losses,
                cfg.train.batch_bags,
                cfg.thresholds.beta_r,
                cfg.train.loss_normalization,
            )?;
            let set = PseudoLabelSet::from_flat(self.bags, &labels, None, Provenance::Tplg, iteration);
            (set, LossScale::fit(&losses, cfg.train.loss_normalization), outputs)
        };
        let flat = pseudo.flat_labels();
        metrics.generator_positives = flat.iter().filter(|&&l| l == 1).count();
        metrics.generator_accuracy = accuracy_against_truth(self.bags, &flat);

        let cleaned = match self.opts.cleaner {
            Some(kind) => {
                check_two_classes(&flat, "generator labels", iteration)?;
                if prev.is_some() && !cfg.train.warm_start {
                    self.reset_cleaner(&mut model)?;
                }
                let (probs, hist) = self.train_cleaner(&mut model, kind, &outputs, &flat, iteration)?;
                metrics.final_cleaner_loss = hist.last().map(|h| h.loss);
                history.extend(hist);
                let set = tlc::cleaned_set(self.bags, &probs, cfg.thresholds.beta_c, iteration);
                let cl = set.flat_labels();
                metrics.cleaned_positives = Some(cl.iter().filter(|&&l| l == 1).count());
                metrics.cleaned_accuracy = accuracy_against_truth(self.bags, &cl);
                Some(set)
            }
            None => None,
        };
        if let Some(c) = &cleaned {
            if iteration < cfg.run.iterations && self.opts.discriminative {
                check_two_classes(&c.flat_labels(), "cleaned labels", iteration)?;
            }
        }

        Ok(IterationState {
            iteration,
            model,
            pseudo,
            cleaned,
            scale,
            clusters,
            history,
            metrics,
        })
    }
}

/// Iterations a configuration actually runs: discriminative retraining needs
/// cleaned labels, so without a cleaner or discriminative step the loop ends
/// after the first pass.
pub fn effective_iterations(cfg: &RunConfig, opts: &MutualOptions) -> usize {
    if opts.cleaner.is_none() || !opts.discriminative || opts.bootstrap == Bootstrap::Clustering {
        1
    } else {
        cfg.run.iterations
    }
}

/// Runs the loop on `bags`, calling `sink` after each iteration.
pub fn run_mutual(
    bags: &[&WsiBag],
    cfg: &RunConfig,
    opts: &MutualOptions,
    sink: &mut dyn FnMut(&IterationState) -> Result<()>,
) -> Result<Vec<IterationState>> {
    cfg.validate()?;
    let p = Pipeline::new(bags, cfg, opts)?;
    let mut states: Vec<IterationState> = Vec::new();
    for t in 1..=effective_iterations(cfg, opts) {
        let s = p.iteration(t, states.last())?;
        sink(&s)?;
        states.push(s);
    }
    Ok(states)
}

/// Continues a run from a saved iteration.
pub fn resume_mutual(
    bags: &[&WsiBag],
    cfg: &RunConfig,
    opts: &MutualOptions,
    from: IterationState,
    sink: &mut dyn FnMut(&IterationState) -> Result<()>,
) -> Result<Vec<IterationState>> {
    cfg.validate()?;
    let p = Pipeline::new(bags, cfg, opts)?;
    let mut states = vec![from];
    for t in states[0].iteration + 1..=effective_iterations(cfg, opts) {
        let s = p.iteration(t, states.last())?;
        sink(&s)?;
        states.push(s);
    }
    Ok(states)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.umtl";
pub const LABELS_FILE: &str = "labels.json";
pub const METRICS_FILE: &str = "metrics.json";

pub fn iteration_dir(run_dir: &Path, iteration: usize) -> std::path::PathBuf {
    run_dir.join(format!("iter_{iteration}"))
}

#[derive(Serialize, Deserialize)]
struct LabelsOnDisk {
    iteration: usize,
    pseudo: PseudoLabelSet,
    cleaned: Option<PseudoLabelSet>,
    scale: LossScale,
    clusters: Option<ClusterAssignment>,
}

#[derive(Serialize, Deserialize)]
struct MetricsOnDisk {
    iteration: usize,
    metrics: IterationMetrics,
    history: Vec<EpochRecord>,
}

/// Paths and digests of one saved iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedIteration {
    pub iteration: usize,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub labels: String,
    pub metrics: String,
}

pub fn save_iteration(run_dir: &Path, state: &IterationState) -> Result<SavedIteration> {
    let dir = iteration_dir(run_dir, state.iteration);
    std::fs::create_dir_all(&dir).map_err(|e| UmtlError::io(&dir, e))?;
    let digest = state.model.checkpoint().write(&dir.join(CHECKPOINT_FILE))?;
    let labels = LabelsOnDisk {
        iteration: state.iteration,
        pseudo: state.pseudo.clone(),
        cleaned: state.cleaned.clone(),
        scale: state.scale,
        clusters: state.clusters.clone(),
    };
    write_atomic(&dir.join(LABELS_FILE), serde_json::to_string_pretty(&labels)?.as_bytes())?;
    let metrics = MetricsOnDisk {
        iteration: state.iteration,
        metrics: state.metrics.clone(),
        history: state.history.clone(),
    };
    write_atomic(&dir.join(METRICS_FILE), serde_json::to_string_pretty(&metrics)?.as_bytes())?;
    let rel = |f: &str| format!("iter_{}/{f}", state.iteration);
    Ok(SavedIteration {
        iteration: state.iteration,
        checkpoint: rel(CHECKPOINT_FILE),
        checkpoint_sha256: digest,
        labels: rel(LABELS_FILE),
        metrics: rel(METRICS_FILE),
    })
}

pub fn load_iteration(run_dir: &Path, iteration: usize, cfg: &RunConfig, opts: &MutualOptions) -> Result<IterationState> {
    let dir = iteration_dir(run_dir, iteration);
    let ck_path = dir.join(CHECKPOINT_FILE);
    let ck = ArrayFile::read(&ck_path)?;
    let mut model = Model::new(&cfg.model, cfg.run.seed, opts.cleaner == Some(CleanerKind::Perceptron))?;
    model.load_checkpoint(&ck, &ck_path)?;
    let lp = dir.join(LABELS_FILE);
    let labels: LabelsOnDisk = serde_json::from_slice(&read_file(&lp)?).map_err(|e| UmtlError::Malformed {
        path: lp.clone(),
        reason: e.to_string(),
    })?;
    let mp = dir.join(METRICS_FILE);
    let metrics: MetricsOnDisk = serde_json::from_slice(&read_file(&mp)?).map_err(|e| UmtlError::Malformed {
        path: mp.clone(),
        reason: e.to_string(),
    })?;
    if labels.iteration != iteration || metrics.iteration != iteration {
        return Err(UmtlError::Malformed {
            path: dir,
            reason: "iteration index does not match directory".into(),
        });
    }
    Ok(IterationState {
        iteration,
        model,
        pseudo: labels.pseudo,
        cleaned: labels.cleaned,
        scale: labels.scale,
        clusters: labels.clusters,
        history: metrics.history,
        metrics: metrics.metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(seed: u64, big: usize, small: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        for _ in 0..big {
            pts.push(vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]);
        }
        for _ in 0..small {
            pts.push(vec![10.0 + rng.random_range(-0.5..0.5), 10.0 + rng.random_range(-0.5..0.5)]);
        }
        pts
    }

    #[test]
    fn larger_blob_is_retained() {
        let pts = blobs(1, 40, 20);
        let c = instance_clustering(&pts, 2, 1, 100, 3).unwrap();
        // brute-force size count of the blob each point belongs to
        let big_id = c.assignments[0];
        assert!(c.assignments[..40].iter().all(|&a| a == big_id));
        assert!(c.assignments[40..].iter().all(|&a| a != big_id));
        assert_eq!(c.retained, vec![big_id]);
        assert_eq!(c.retained_count(), 40);
        assert_eq!(c.sizes.iter().sum::<usize>(), 60);
    }

    #[test]
    fn one_cluster_per_point() {
        let pts = blobs(2, 6, 4);
        let c = instance_clustering(&pts, 10, 3, 100, 0).unwrap();
        assert!(c.sizes.iter().all(|&s| s == 1));
        assert_eq!(c.retained, vec![0, 1, 2]);
    }

    #[test]
    fn too_few_points_is_an_error() {
        assert!(instance_clustering(&blobs(0, 3, 0), 10, 3, 10, 0).is_err());
    }

    #[test]
    fn clustering_is_seeded() {
        let pts = blobs(4, 30, 30);
        assert_eq!(
            instance_clustering(&pts, 5, 2, 50, 9).unwrap(),
            instance_clustering(&pts, 5, 2, 50, 9).unwrap()
        );
    }

    #[test]
    fn batched_labels_use_group_statistics() {
        use crate::corpus::{Patch, WsiBag};
        let mk = |id: &str, n: usize| WsiBag {
            slide_id: id.into(),
            patches: (0..n)
                .map(|i| Patch::new(Mat::zeros(4, 3), 2, (0, i), None).unwrap())
                .collect(),
            grid_shape: (1, n),
            truth_slide_label: None,
            subtype_label: None,
            patient_id: None,
        };
        let a = mk("a", 2);
        let b = mk("b", 2);
        let bags = [&a, &b];
        let losses = [0.0, 10.0, 100.0, 110.0];
        let per_bag = batched_pseudo_labels(&bags, &losses, 1, 0.5, LossNormalization::MinMax).unwrap();
        assert_eq!(per_bag, vec![0, 1, 0, 1]);
        let pooled = batched_pseudo_labels(&bags, &losses, 2, 0.5, LossNormalization::MinMax).unwrap();
        assert_eq!(pooled, vec![0, 0, 1, 1]);
    }

    #[test]
    fn loss_scale_matches_threshold_rule() {
        let s = LossScale::fit(&[2.0, 4.0, 6.0, 8.0], LossNormalization::MinOverMax);
        assert_eq!(s.apply(6.0), 0.5);
        assert_eq!(s.apply(2.0), 0.0);
    }
}
