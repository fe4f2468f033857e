use std::sync::OnceLock;

use umtl::config::RunConfig;
use umtl::corpus::{synthesize, WsiBag};
use umtl::eval::predict_state;
use umtl::mutual::{run_mutual, CleanerKind, IterationState, MutualOptions};
use umtl::supervision::{finetune_subtype, split_bags, weak_from_state};
use umtl::UmtlError;

struct Fixture {
    cfg: RunConfig,
    bags: Vec<WsiBag>,
    train: Vec<usize>,
    test: Vec<usize>,
    state: IterationState,
}

impl Fixture {
    fn train(&self) -> Vec<&WsiBag> {
        self.train.iter().map(|&i| &self.bags[i]).collect()
    }

    fn test(&self) -> Vec<&WsiBag> {
        self.test.iter().map(|&i| &self.bags[i]).collect()
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let mut cfg = RunConfig::desk_small();
        cfg.corpus.num_bags = 20;
        cfg.corpus.num_subtypes = 2;
        cfg.corpus.seed = 5;
        cfg.run.seed = 5;
        cfg.run.iterations = 2;
        let bags = synthesize(&cfg.corpus).unwrap();
        let refs: Vec<&WsiBag> = bags.iter().collect();
        let (train, test) = split_bags(&refs, cfg.run.test_fraction, cfg.run.seed);
        let train_refs: Vec<&WsiBag> = train.iter().map(|&i| refs[i]).collect();
        let state = run_mutual(&train_refs, &cfg, &MutualOptions::default(), &mut |_| Ok(()))
            .unwrap()
            .pop()
            .unwrap();
        Fixture {
            cfg,
            bags,
            train,
            test,
            state,
        }
    })
}

#[test]
fn zero_fraction_is_the_unsupervised_run() {
    let f = fixture();
    let (train, test) = (f.train(), f.test());
    let weak = weak_from_state(&f.state, &train, &test, &f.cfg, 0.0).unwrap();
    assert_eq!(weak.state.model.digest(), f.state.model.digest());
    assert!(weak.labeled.is_empty());
    let preds = predict_state(&f.state, &test, &f.cfg, Some(CleanerKind::Transformer), f.cfg.smoothing.rule).unwrap();
    let direct = umtl::eval::report(&preds, &weak.report.variant, &f.cfg);
    assert_eq!(weak.report, direct);
}

#[test]
fn full_fraction_repeats_exactly() {
    let f = fixture();
    let (train, test) = (f.train(), f.test());
    let a = weak_from_state(&f.state, &train, &test, &f.cfg, 1.0).unwrap();
    let b = weak_from_state(&f.state, &train, &test, &f.cfg, 1.0).unwrap();
    assert_eq!(a.labeled.len(), train.len());
    assert_eq!(a.state.model.digest(), b.state.model.digest());
    assert_eq!(a.report, b.report);
    assert_ne!(a.state.model.digest(), f.state.model.digest());
}

#[test]
fn single_class_labeled_subset_is_rejected() {
    let f = fixture();
    let negatives: Vec<&WsiBag> = f.train().into_iter().filter(|b| b.truth_slide_label == Some(0)).collect();
    let err = weak_from_state(&f.state, &negatives, &f.test(), &f.cfg, 1.0).unwrap_err();
    assert!(matches!(err, UmtlError::DegenerateLabels(_)), "{err}");
}

#[test]
fn two_subtypes_are_told_apart() {
    let f = fixture();
    let run = finetune_subtype(&f.state, &f.train(), &f.test(), &f.cfg, 2).unwrap();
    assert_eq!(run.report.frozen_digest, f.state.model.digest());
    let acc = run.report.accuracy.expect("positive test slides");
    assert!(acc >= 0.8, "subtype accuracy {acc}: {:?}", run.report.predictions);
}

#[test]
fn one_subtype_class_is_rejected() {
    let f = fixture();
    let err = finetune_subtype(&f.state, &f.train(), &f.test(), &f.cfg, 1).unwrap_err();
    assert_eq!(err.code(), "E_CONFIG");
}
