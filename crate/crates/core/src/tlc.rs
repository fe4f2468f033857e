//! Transformer pseudo-label cleaner and the perceptron baseline cleaner.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{prob_from_logit, softmax, Graph, Var, PROB_CLAMP};
use crate::config::ModelConfig;
use crate::error::{Result, UmtlError};
use crate::features::WindowSequence;
use crate::labels::{Provenance, PseudoLabelSet};
use crate::nn::{Dense, EncoderLayer, Linear};
use crate::params::{Adam, AdamConfig, Grads, ParamId, ParamStore};
use crate::tensor::Mat;
use crate::tplg::{EpochRecord, GRAD_CHUNK};

/// Anything mapping one instance input to a row of logits.
pub trait Cleaner: Sync {
    fn logits(&self, g: &mut Graph, input: Var) -> Var;
    fn param_ids(&self) -> Vec<ParamId>;
    fn outputs(&self) -> usize;
}

/// Encoder stack over the instance's words, mean-pooled over tokens, then a
/// linear head.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub layers: Vec<EncoderLayer>,
    pub head: Linear,
    outputs: usize,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let d = cfg.token_dim();
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(store, &format!("{prefix}.{i}"), d, cfg.heads, cfg.mlp_hidden(), rng))
            .collect();
        let head = Linear::new(store, &format!("{prefix}.head"), d, outputs, rng);
        Classifier { layers, head, outputs }
    }

    /// Same encoder, fresh `outputs`-way head registered under `name`.
    pub fn with_head<R: Rng + ?Sized>(&self, store: &mut ParamStore, name: &str, outputs: usize, rng: &mut R) -> Self {
        let d = store.get(self.head.w).rows;
        Classifier {
            layers: self.layers.clone(),
            head: Linear::new(store, name, d, outputs, rng),
            outputs,
        }
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.param_ids()).collect()
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        self.head.param_ids()
    }
}

impl Cleaner for Classifier {
    fn logits(&self, g: &mut Graph, words: Var) -> Var {
        let x = self.layers.iter().fold(words, |x, l| l.forward(g, x));
        let pooled = g.mean_rows(x);
        self.head.forward(g, pooled)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder_ids();
        ids.extend(self.head_ids());
        ids
    }

    fn outputs(&self) -> usize {
        self.outputs
    }
}

/// Two fully connected layers on a feature vector.
#[derive(Clone, Debug)]
pub struct PerceptronCleaner {
    pub net: Dense,
}

impl PerceptronCleaner {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        PerceptronCleaner {
            net: Dense::new(store, name, &[input, hidden, 1], rng),
        }
    }
}

impl Cleaner for PerceptronCleaner {
    fn logits(&self, g: &mut Graph, input: Var) -> Var {
        self.net.forward(g, input)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.net.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    fn outputs(&self) -> usize {
        1
    }
}

/// φ for one instance input of a binary cleaner.
pub fn probability<C: Cleaner>(cleaner: &C, store: &ParamStore, input: &Mat) -> f64 {
    let mut g = Graph::new(store);
    let x = g.input(input.clone());
    let z = cleaner.logits(&mut g, x);
    prob_from_logit(g.value(z).data[0])
}

/// Softmax over the logits of a multi-way cleaner.
pub fn class_probabilities<C: Cleaner>(cleaner: &C, store: &ParamStore, input: &Mat) -> Vec<f64> {
    let mut g = Graph::new(store);
    let x = g.input(input.clone());
    let z = cleaner.logits(&mut g, x);
    softmax(&g.value(z).data)
}

/// φ ∈ (0,1) for one window sequence.
pub fn classify(seq: &WindowSequence, clf: &Classifier, store: &ParamStore) -> Result<f64> {
    let d = store.get(clf.head.w).rows;
    if seq.is_empty() || seq.words.cols != d {
        return Err(UmtlError::Shape(format!(
            "classifier expects {d}-wide tokens, got {}x{}",
            seq.words.rows, seq.words.cols
        )));
    }
    Ok(probability(clf, store, &seq.words))
}

pub fn probabilities<C: Cleaner>(cleaner: &C, store: &ParamStore, inputs: &[&Mat]) -> Vec<f64> {
    inputs.par_iter().map(|x| probability(cleaner, store, x)).collect()
}

/// −mean[ℓ ln φ + (1−ℓ) ln(1−φ)] with φ clamped to [1e-7, 1−1e-7].
pub fn cross_entropy_loss(labels: &[u8], probs: &[f64]) -> Result<f64> {
    if labels.len() != probs.len() {
        return Err(UmtlError::Shape(format!("{} labels for {} probabilities", labels.len(), probs.len())));
    }
    if labels.is_empty() {
        return Err(UmtlError::DegenerateBatch("empty label set".into()));
    }
    let total: f64 = labels
        .iter()
        .zip(probs)
        .map(|(&l, &p)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if l == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// ℓᶜ = 1 iff φ ≥ β_c.
pub fn clean_labels(probs: &[f64], beta_c: f64) -> Vec<u8> {
    probs.iter().map(|&p| (p >= beta_c) as u8).collect()
}

/// Cleaned labels for a set of bags from flat φ.
pub fn cleaned_set(
    bags: &[&crate::corpus::WsiBag],
    probs: &[f64],
    beta_c: f64,
    iteration: usize,
) -> PseudoLabelSet {
    let labels = clean_labels(probs, beta_c);
    PseudoLabelSet::from_flat(bags, &labels, Some(probs), Provenance::Tlc, iteration)
}

#[derive(Clone, Debug)]
pub struct CleanerTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Instances per optimizer step.
    pub batch_size: usize,
    /// Weight each class by n / (classes · n_class).
    pub balance_classes: bool,
    pub seed: u64,
}

/// One training example: an input and its class (0/1 for binary cleaners).
#[derive(Clone, Copy, Debug)]
pub struct CleanerItem<'a> {
    pub input: &'a Mat,
    pub class: usize,
}

fn item_loss<C: Cleaner>(g: &mut Graph, cleaner: &C, item: &CleanerItem<'_>, weight: f64) -> Var {
    let x = g.input(item.input.clone());
    let z = cleaner.logits(g, x);
    let l = if cleaner.outputs() == 1 {
        g.bce_logit(z, item.class as f64)
    } else {
        g.softmax_xent(z, item.class)
    };
    g.scale(l, weight)
}

/// Weighted mean loss over `items` and its gradient.
pub fn cleaner_loss_and_grads<C: Cleaner>(
    store: &ParamStore,
    cleaner: &C,
    items: &[CleanerItem<'_>],
    class_weights: &[f64],
) -> (f64, Grads) {
    let inv_n = 1.0 / items.len().max(1) as f64;
    let partial: Vec<(f64, Grads)> = items
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut acc = Grads::new(store.len());
            let mut total = 0.0;
            for it in chunk {
                let mut g = Graph::new(store);
                let l = item_loss(&mut g, cleaner, it, class_weights[it.class] * inv_n);
                total += g.scalar(l);
                g.backward_into(l, &mut acc);
            }
            (total, acc)
        })
        .collect();
    let mut grads = Grads::new(store.len());
    let mut total = 0.0;
    for (l, g) in partial {
        total += l;
        grads.merge(&g);
    }
    (total, grads)
}

fn class_weights(items: &[CleanerItem<'_>], classes: usize, balance: bool) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; classes];
    for it in items {
        if it.class >= classes {
            return Err(UmtlError::Shape(format!("class {} outside {classes} outputs", it.class)));
        }
        counts[it.class] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(UmtlError::DegenerateLabels(format!(
            "cleaner needs at least two classes, got counts {counts:?}"
        )));
    }
    if !balance {
        return Ok(vec![1.0; classes]);
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let n = items.len() as f64;
    Ok(counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n / (present * c as f64) })
        .collect())
}

/// Minimises the (weighted) cross-entropy of `cleaner` on `items` with Adam
/// over `trainable`.
pub fn train_cleaner<C: Cleaner>(
    store: &mut ParamStore,
    cleaner: &C,
    trainable: Vec<ParamId>,
    items: &[CleanerItem<'_>],
    cfg: &CleanerTrainConfig,
    stage: &str,
    iteration: usize,
) -> Result<Vec<EpochRecord>> {
    let classes = cleaner.outputs().max(2);
    let weights = class_weights(items, classes, cfg.balance_classes)?;
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        store,
        trainable,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let b: Vec<CleanerItem<'_>> = batch.iter().map(|&i| items[i]).collect();
            let (loss, grads) = cleaner_loss_and_grads(store, cleaner, &b, &weights);
            if !loss.is_finite() || !grads.is_finite() {
                return Err(UmtlError::Diverged(format!("{stage} loss became {loss} at epoch {epoch}")));
            }
            epoch_loss += loss * b.len() as f64;
            opt.step(store, &grads);
        }
        history.push(EpochRecord {
            stage: stage.to_string(),
            iteration,
            epoch,
            loss: epoch_loss / items.len() as f64,
            instances: items.len(),
        });
    }
    Ok(history)
}

/// Trains the transformer cleaner on binary pseudo-labels.
pub fn train_tlc(
    store: &mut ParamStore,
    clf: &Classifier,
    words: &[&Mat],
    labels: &[u8],
    cfg: &CleanerTrainConfig,
    iteration: usize,
) -> Result<Vec<EpochRecord>> {
    if words.len() != labels.len() {
        return Err(UmtlError::Shape(format!("{} inputs for {} labels", words.len(), labels.len())));
    }
    let items: Vec<CleanerItem<'_>> = words
        .iter()
        .zip(labels)
        .map(|(w, &l)| CleanerItem { input: w, class: l as usize })
        .collect();
    let ids = clf.param_ids();
    train_cleaner(store, clf, ids, &items, cfg, "tlc", iteration)
}
