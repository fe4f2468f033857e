//! Fully connected autoencoder generator with a perceptron cleaner, run
//! through the same bootstrap/discriminative loop as the transformer
//! pipeline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::Graph;
use crate::config::RunConfig;
use crate::corpus::WsiBag;
use crate::error::{Result, UmtlError};
use crate::features::Embedder;
use crate::labels::{Provenance, PseudoLabelSet};
use crate::mutual::{batched_pseudo_labels, instance_clustering, stage_rng, stage_seed, LossScale};
use crate::nn::Dense;
use crate::params::{Adam, AdamConfig, Grads, ParamStore};
use crate::tensor::Mat;
use crate::tlc::{self, Cleaner, CleanerItem, CleanerTrainConfig, PerceptronCleaner};
use crate::tplg::{EpochRecord, GRAD_CHUNK};

/// Layer widths d, d/2, d/4, d/2, d.
pub fn autoencoder_widths(d: usize) -> Vec<usize> {
    vec![d, (d / 2).max(1), (d / 4).max(1), (d / 2).max(1), d]
}

#[derive(Clone, Debug)]
pub struct AutoMlp {
    pub store: ParamStore,
    pub embed: Embedder,
    pub encoder: Dense,
    pub decoder: Dense,
    pub cleaner: PerceptronCleaner,
    pub noise: Vec<f64>,
    /// Per-dimension mean and standard deviation of training features.
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

impl AutoMlp {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.model.validate()?;
        let mut rng = stage_rng(cfg.run.seed, 0, 9);
        let mut store = ParamStore::new();
        let m = &cfg.model;
        let embed = Embedder::new(&mut store, m.patch_size, m.window, m.channels, &mut rng)?;
        let w = autoencoder_widths(m.token_dim());
        let encoder = Dense::new(&mut store, "ae.enc", &w[..3], &mut rng);
        let decoder = Dense::new(&mut store, "ae.dec", &w[2..], &mut rng);
        let cleaner = PerceptronCleaner::new(&mut store, "ae.cleaner", w[2], w[2], &mut rng);
        let mut nrng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.run.seed, 0, 10));
        let noise = Mat::standard_normal(1, w[0], &mut nrng).data;
        Ok(AutoMlp {
            store,
            embed,
            encoder,
            decoder,
            cleaner,
            noise,
            feature_mean: vec![0.0; w[0]],
            feature_std: vec![1.0; w[0]],
        })
    }

    fn raw_features(&self, pixels: &[&Mat]) -> Vec<Mat> {
        pixels
            .par_iter()
            .map(|p| self.embed.words(&self.store, p).mean_rows())
            .collect()
    }

    /// Fits the feature standardisation on training instances.
    pub fn fit_standardizer(&mut self, pixels: &[&Mat]) {
        let raw = self.raw_features(pixels);
        let n = raw.len().max(1) as f64;
        let d = self.feature_mean.len();
        let mut mean = vec![0.0; d];
        for f in &raw {
            for (m, v) in mean.iter_mut().zip(&f.data) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for f in &raw {
            for ((s, v), m) in var.iter_mut().zip(&f.data).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        self.feature_mean = mean;
        self.feature_std = var.iter().map(|v| if *v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    }

    /// Instance feature: the token-averaged words of the fixed head,
    /// standardised with the training statistics.
    pub fn features(&self, pixels: &[&Mat]) -> Vec<Mat> {
        let mut feats = self.raw_features(pixels);
        for f in &mut feats {
            for ((v, m), s) in f.data.iter_mut().zip(&self.feature_mean).zip(&self.feature_std) {
                *v = (*v - m) / s;
            }
        }
        feats
    }

    /// (reconstruction loss, bottleneck) per feature row.
    pub fn infer(&self, feats: &[Mat]) -> Vec<(f64, Mat)> {
        feats
            .par_iter()
            .map(|f| {
                let mut g = Graph::new(&self.store);
                let x = g.input(f.clone());
                let z = self.encoder.forward(&mut g, x);
                let z = g.relu(z);
                let r = self.decoder.forward(&mut g, z);
                let l = g.l1(x, r);
                (g.scalar(l), g.value(z).clone())
            })
            .collect()
    }

    fn loss_and_grads(&self, feats: &[(&Mat, bool)]) -> (f64, Grads) {
        let noise = Mat::from_vec(1, self.noise.len(), self.noise.clone());
        let partial: Vec<(f64, Grads)> = feats
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut acc = Grads::new(self.store.len());
                let mut total = 0.0;
                for (f, positive) in chunk {
                    let mut g = Graph::new(&self.store);
                    let x = g.input((*f).clone());
                    let z = self.encoder.forward(&mut g, x);
                    let z = g.relu(z);
                    let r = self.decoder.forward(&mut g, z);
                    let t = if *positive { g.input(noise.clone()) } else { x };
                    let l = g.l1(t, r);
                    total += g.scalar(l);
                    g.backward_into(l, &mut acc);
                }
                (total, acc)
            })
            .collect();
        let mut grads = Grads::new(self.store.len());
        let mut total = 0.0;
        for (l, g) in partial {
            total += l;
            grads.merge(&g);
        }
        (total, grads)
    }

    fn train_generator(
        &mut self,
        per_bag: &[Vec<(&Mat, bool)>],
        cfg: &RunConfig,
        iteration: usize,
    ) -> Result<Vec<EpochRecord>> {
        use rand::seq::SliceRandom;
        let mut ids = self.encoder.layers.iter().flat_map(|l| l.param_ids()).collect::<Vec<_>>();
        ids.extend(self.decoder.layers.iter().flat_map(|l| l.param_ids()));
        let mut opt = Adam::new(
            AdamConfig {
                lr: cfg.train.lr,
                ..AdamConfig::default()
            },
            &self.store,
            ids,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.run.seed, iteration, 11));
        let mut order: Vec<usize> = (0..per_bag.len()).collect();
        let total: usize = per_bag.iter().map(Vec::len).sum();
        let mut history = Vec::new();
        for epoch in 0..cfg.train.tplg_epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(cfg.train.batch_bags) {
                let items: Vec<(&Mat, bool)> = batch.iter().flat_map(|&b| per_bag[b].iter().copied()).collect();
                if items.is_empty() {
                    continue;
                }
                let (loss, grads) = self.loss_and_grads(&items);
                if !loss.is_finite() || !grads.is_finite() {
                    return Err(UmtlError::Diverged(format!("autoencoder loss became {loss}")));
                }
                epoch_loss += loss;
                opt.step(&mut self.store, &grads);
            }
            history.push(EpochRecord {
                stage: "autoencoder".into(),
                iteration,
                epoch,
                loss: epoch_loss,
                instances: total,
            });
        }
        Ok(history)
    }
}

/// Final state of an autoencoder run.
#[derive(Clone, Debug)]
pub struct AutoMlpRun {
    pub model: AutoMlp,
    pub scale: LossScale,
    pub labels: Vec<PseudoLabelSet>,
    pub history: Vec<EpochRecord>,
}

impl AutoMlpRun {
    /// (losses, φ) for the instances of `bags`.
    pub fn score(&self, pixels: &[&Mat]) -> (Vec<f64>, Vec<f64>) {
        let feats = self.model.features(pixels);
        let out = self.model.infer(&feats);
        let losses = out.iter().map(|o| o.0).collect();
        let refs: Vec<&Mat> = out.iter().map(|o| &o.1).collect();
        (losses, tlc::probabilities(&self.model.cleaner, &self.model.store, &refs))
    }
}

pub fn run_auto_mlp(bags: &[&WsiBag], cfg: &RunConfig) -> Result<AutoMlpRun> {
    cfg.validate()?;
    let mut model = AutoMlp::new(cfg)?;
    let pixels: Vec<&Mat> = bags.iter().flat_map(|b| b.patches.iter().map(|p| &p.pixels)).collect();
    if pixels.is_empty() {
        return Err(UmtlError::EmptyBag("no training instances".into()));
    }
    let mut offsets = vec![0];
    for b in bags {
        offsets.push(offsets.last().unwrap() + b.len());
    }
    model.fit_standardizer(&pixels);
    let feats = model.features(&pixels);
    let pooled: Vec<Vec<f64>> = pixels.par_iter().map(|p| model.embed.pooled(&model.store, p)).collect();
    let clusters = instance_clustering(
        &pooled,
        cfg.clustering.k_o,
        cfg.clustering.k_l,
        cfg.clustering.max_iterations,
        stage_seed(cfg.run.seed, 1, 1),
    )?;
    let mask = clusters.retained_mask();
    let mut history = Vec::new();
    let mut labels_hist = Vec::new();
    let mut cleaned: Option<Vec<u8>> = None;
    let mut scale = LossScale::fit(&[0.0, 1.0], cfg.train.loss_normalization);
    for t in 1..=cfg.run.iterations {
        let per_bag: Vec<Vec<(&Mat, bool)>> = (0..bags.len())
            .map(|b| {
                (offsets[b]..offsets[b + 1])
                    .filter_map(|i| match &cleaned {
                        None => mask[i].then_some((&feats[i], false)),
                        Some(l) => Some((&feats[i], l[i] == 1)),
                    })
                    .collect()
            })
            .collect();
        history.extend(model.train_generator(&per_bag, cfg, t)?);
        let out = model.infer(&feats);
        let losses: Vec<f64> = out.iter().map(|o| o.0).collect();
        scale = LossScale::fit(&losses, cfg.train.loss_normalization);
        let pseudo = batched_pseudo_labels(bags, &losses, cfg.train.batch_bags, cfg.thresholds.beta_r, cfg.train.loss_normalization)?;
        let pos = pseudo.iter().filter(|&&l| l == 1).count();
        if pos == 0 || pos == pseudo.len() {
            return Err(UmtlError::DegenerateLabels(format!("autoencoder labels at iteration {t}: {pos} positive")));
        }
        let items: Vec<CleanerItem<'_>> = out
            .iter()
            .zip(&pseudo)
            .map(|(o, &l)| CleanerItem { input: &o.1, class: l as usize })
            .collect();
        let ccfg = CleanerTrainConfig {
            lr: cfg.train.lr,
            epochs: cfg.train.tlc_epochs,
            batch_size: cfg.train.cleaner_batch,
            balance_classes: cfg.train.balance_classes,
            seed: stage_seed(cfg.run.seed, t, 12),
        };
        let clf = model.cleaner.clone();
        history.extend(tlc::train_cleaner(&mut model.store, &clf, clf.param_ids(), &items, &ccfg, "mlp", t)?);
        let refs: Vec<&Mat> = out.iter().map(|o| &o.1).collect();
        let probs = tlc::probabilities(&clf, &model.store, &refs);
        let set = tlc::cleaned_set(bags, &probs, cfg.thresholds.beta_c, t);
        let flat = set.flat_labels();
        labels_hist.push(PseudoLabelSet::from_flat(bags, &pseudo, None, Provenance::Tplg, t));
        labels_hist.push(set);
        let cpos = flat.iter().filter(|&&l| l == 1).count();
        if t < cfg.run.iterations && (cpos == 0 || cpos == flat.len()) {
            return Err(UmtlError::DegenerateLabels(format!("perceptron labels at iteration {t}: {cpos} positive")));
        }
        cleaned = Some(flat);
    }
    Ok(AutoMlpRun {
        model,
        scale,
        labels: labels_hist,
        history,
    })
}
