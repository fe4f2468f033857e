//! End-to-end run on the small synthetic preset, printing held-out metrics
//! after every iteration.
//!
//! usage: pilot <seed> [tplg_epochs] [tlc_epochs] [loss|label|probability]
//!        [iterations] [minmax|min_over_max]

use std::time::Instant;

use umtl::config::{NodeAttribute, RunConfig};
use umtl::corpus::synthesize;
use umtl::eval::{predict_state, report};
use umtl::mutual::{run_mutual, CleanerKind, MutualOptions};
use umtl::supervision::split_bags;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0);
    let mut cfg = RunConfig::desk_small();
    cfg.run.seed = seed;
    cfg.corpus.seed = seed;
    if let Some(e) = args.get(2) {
        cfg.train.tplg_epochs = e.parse().unwrap();
    }
    if let Some(e) = args.get(3) {
        cfg.train.tlc_epochs = e.parse().unwrap();
    }
    if let Some(a) = args.get(4) {
        cfg.smoothing.attribute = match a.as_str() {
            "label" => NodeAttribute::Label,
            "probability" => NodeAttribute::Probability,
            _ => NodeAttribute::Loss,
        };
    }
    if let Some(n) = args.get(6) {
        cfg.train.loss_normalization = match n.as_str() {
            "min_over_max" => umtl::config::LossNormalization::MinOverMax,
            _ => umtl::config::LossNormalization::MinMax,
        };
    }
    if let Some(t) = args.get(5) {
        cfg.run.iterations = t.parse().unwrap();
    }
    let bags = synthesize(&cfg.corpus).unwrap();
    let refs: Vec<_> = bags.iter().collect();
    let (train, test) = split_bags(&refs, cfg.run.test_fraction, seed);
    let train: Vec<_> = train.into_iter().map(|i| refs[i]).collect();
    let test: Vec<_> = test.into_iter().map(|i| refs[i]).collect();
    let t0 = Instant::now();
    let mut last = t0;
    let states = run_mutual(&train, &cfg, &MutualOptions::default(), &mut |s| {
        let now = Instant::now();
        let mut line = format!("iter {} {:.1}s", s.iteration, (now - last).as_secs_f64());
        for (name, cleaner) in [("gen", None), ("tlc", Some(CleanerKind::Transformer))] {
            let mut slide = String::new();
            let mut r = None;
            for attr in [NodeAttribute::Loss, NodeAttribute::Label, NodeAttribute::Probability] {
                let mut c = cfg.clone();
                c.smoothing.attribute = attr;
                let preds = predict_state(s, &test, &c, cleaner, c.smoothing.rule)?;
                let rep = report(&preds, name, &c);
                slide += &format!(" {:?}={:.2}", attr, rep.slide_accuracy().unwrap_or(f64::NAN));
                r = Some(rep);
            }
            let r = r.unwrap();
            line += &format!(
                " | {name} auc {:.3} froc {:.3} slide{slide}",
                r.instance_auc().unwrap_or(f64::NAN),
                r.froc.unwrap_or(f64::NAN)
            );
        }
        println!("{line}\n    {:?}", s.metrics);
        last = now;
        Ok(())
    });
    match states {
        Err(e) => println!("error: {e}"),
        Ok(states) => {
            let s = states.last().unwrap();
            let preds = predict_state(s, &test, &cfg, Some(CleanerKind::Transformer), cfg.smoothing.rule).unwrap();
            for p in &preds {
                let truth = p.truths.as_ref().unwrap();
                let neg_phi: Vec<f64> = (0..truth.len()).filter(|&i| truth[i] == 0).map(|i| p.scores[i]).collect();
                let max_neg = neg_phi.iter().cloned().fold(0.0, f64::max);
                let pos_min = (0..truth.len()).filter(|&i| truth[i] == 1).map(|i| p.scores[i]).fold(1.0, f64::min);
                println!(
                    "{} truth {:?} true_pos {} pred_pos {} decision {:?} max_neg_phi {:.3} min_pos_phi {:.3}",
                    p.slide_id,
                    p.truth_slide,
                    truth.iter().filter(|&&t| t == 1).count(),
                    p.labels.iter().filter(|&&l| l == 1).count(),
                    p.decision,
                    max_neg,
                    pos_min
                );
            }
        }
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
