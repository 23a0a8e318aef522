use proptest::prelude::*;

use super::*;
use crate::tensor::Rng;
use crate::data::VOCAB_SIZE;
use crate::transformer::{AttentionMode, ModelSpec};

fn model(mode: AttentionMode, std: f64, seed: u64) -> Model<f64> {
    Model::init(
        ModelSpec {
            seq_len: 64,
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            init_std: std,
            attention_mode: mode,
            ..ModelSpec::default()
        },
        seed,
    )
    .unwrap()
}

fn item(context: &str, options: &[&str], answer: usize) -> McItem {
    McItem {
        context: context.into(),
        options: options.iter().map(|s| s.to_string()).collect(),
        answer_index: answer,
    }
}

#[test]
fn ar_option_nll_hand_cases() {
    let m = model(AttentionMode::Causal, 0.0, 0);
    let cfg = ScoringConfig::default();
    let lnk = (VOCAB_SIZE as f64).ln();
    let one = option_nll(&m, ObjectiveKind::Ar, "the cat", "a", &cfg, 0).unwrap();
    assert!((one - lnk).abs() < 1e-12);
    // two bytes, one character: the divisor is the character count
    let accent = option_nll(&m, ObjectiveKind::Ar, "caf", "é", &cfg, 0).unwrap();
    assert!((accent - 2.0 * lnk).abs() < 1e-12);
    assert_eq!(char_count("é"), 1);
}

#[test]
fn duplicate_options_score_identically() {
    for (mode, kind) in [(AttentionMode::Causal, ObjectiveKind::Ar), (AttentionMode::Bidirectional, ObjectiveKind::Mdm)] {
        let m = model(mode, 0.3, 1);
        let cfg = ScoringConfig::default();
        let a = option_nll(&m, kind, "Oslo is", " cold.", &cfg, 3).unwrap();
        let b = option_nll(&m, kind, "Oslo is", " cold.", &cfg, 3).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let r = mc_accuracy(&m, &[item("Oslo is", &[" cold.", " cold."], 1)], kind, &cfg).unwrap();
        assert_eq!(r.items[0].nlls[0], r.items[0].nlls[1]);
        assert_eq!(r.items[0].chosen, 0);
    }
}

#[test]
fn uniform_model_ties_break_to_lowest_index() {
    let m = model(AttentionMode::Causal, 0.0, 0);
    let r = mc_accuracy(&m, &[item("x", &[" ab", " cd", " ef"], 2)], ObjectiveKind::Ar, &ScoringConfig::default()).unwrap();
    assert_eq!(r.items[0].chosen, 0);
    assert_eq!(r.accuracy, 0.0);
}

#[test]
fn accuracy_arithmetic() {
    let scores = vec![
        ItemScore {
            nlls: vec![1.0, 2.0],
            chosen: 0,
            answer: 0,
        },
        ItemScore {
            nlls: vec![1.0, 2.0],
            chosen: 0,
            answer: 1,
        },
    ];
    let r = McResult::from_scores(scores, 0).unwrap();
    assert_eq!(r.accuracy, 0.5);
    assert_eq!(r.nll_truth, 1.5);
    assert_eq!(r.nll_others, 1.5);
}

#[test]
fn random_model_is_at_chance() {
    let m = model(AttentionMode::Causal, 0.05, 2);
    let mut rng = Rng::new(3);
    let words = ["red", "blue", "green", "gold", "pink", "gray", "teal", "navy"];
    let items: Vec<McItem> = (0..400)
        .map(|_| {
            let opts: Vec<String> = (0..4).map(|_| format!(" {}.", words[rng.below(words.len())])).collect();
            McItem {
                context: "The color is".into(),
                options: opts,
                answer_index: rng.below(4),
            }
        })
        .collect();
    let r = mc_accuracy(&m, &items, ObjectiveKind::Ar, &ScoringConfig::default()).unwrap();
    let sigma = (0.25f64 * 0.75 / 400.0).sqrt();
    assert!((r.accuracy - 0.25).abs() <= 3.0 * sigma, "{}", r.accuracy);
}

#[test]
fn overflowing_items_are_skipped() {
    let m = model(AttentionMode::Causal, 0.02, 0);
    let long = "x".repeat(100);
    let items = [item(&long, &[" a", " b"], 0), item("ok", &[" a", " b"], 0)];
    let r = mc_accuracy(&m, &items, ObjectiveKind::Ar, &ScoringConfig::default()).unwrap();
    assert_eq!((r.scored, r.skipped), (1, 1));
    assert!(mc_accuracy(&m, &items[..1], ObjectiveKind::Ar, &ScoringConfig::default()).is_err());
    assert!(mc_accuracy(&m, &[], ObjectiveKind::Ar, &ScoringConfig::default()).is_err());
}

#[test]
fn item_validation_and_jsonl_round_trip() {
    assert!(item("c", &["a"], 0).validate().is_err());
    assert!(item("c", &["a", "b"], 2).validate().is_err());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("items.jsonl");
    let items = vec![item("c", &["a", "b"], 1), item("d \"q\"", &["x", "y", "z"], 0)];
    write_items(&p, &items).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.lines().next().unwrap().contains("\"answer\":1"));
    assert_eq!(load_items(&p).unwrap(), items);
}

#[test]
fn validation_ce_of_uniform_models() {
    let mut rng = Rng::new(0);
    let windows: Vec<Vec<Token>> = (0..5).map(|_| (0..32).map(|_| rng.below(256) as Token).collect()).collect();
    let lnk = (VOCAB_SIZE as f64).ln();
    let ar = model(AttentionMode::Causal, 0.0, 0);
    assert!((validation_ce(&ar, ObjectiveKind::Ar, &windows, 1, 2).unwrap() - lnk).abs() < 1e-9);
    let dlm = model(AttentionMode::Bidirectional, 0.3, 0);
    let a = validation_ce(&dlm, ObjectiveKind::Mdm, &windows, 1, 2).unwrap();
    assert_eq!(a, validation_ce(&dlm, ObjectiveKind::Mdm, &windows, 1, 2).unwrap());
    assert!(validation_ce(&ar, ObjectiveKind::Ar, &[], 1, 2).is_err());
}

#[test]
fn dlm_scoring_is_deterministic_given_seeds() {
    let m = model(AttentionMode::Bidirectional, 0.3, 5);
    let cfg = ScoringConfig::default();
    let a = option_nll(&m, ObjectiveKind::Mdm, "ctx", " option", &cfg, 9).unwrap();
    assert_eq!(a, option_nll(&m, ObjectiveKind::Mdm, "ctx", " option", &cfg, 9).unwrap());
    let other = ScoringConfig {
        seed: 1,
        ..cfg.clone()
    };
    assert!(a.is_finite() && option_nll(&m, ObjectiveKind::Mdm, "ctx", " option", &other, 9).unwrap().is_finite());
}

fn rec(step: u64, truth: f64, others: f64, val: f64) -> NllRecord {
    NllRecord {
        step,
        nll_truth: truth,
        nll_others: others,
        delta: 0.0,
        val_ce: val,
        accuracy: 0.5,
    }
}

#[test]
fn delta_series_behaviour() {
    assert!(delta_nll_series(&[rec(1, 1.0, 2.0, 3.0)]).is_err());
    let constant = delta_nll_series(&[rec(2, 1.0, 2.0, 3.0), rec(1, 1.0, 2.0, 3.0)]).unwrap();
    assert_eq!(constant[0].step, 1);
    assert!(constant.iter().all(|r| r.delta == 1.0));
    assert!(decoupling_intervals(&constant).is_empty());
    // both NLLs rise, the gap widens, validation CE rises
    let s = delta_nll_series(&[rec(1, 1.0, 1.5, 2.0), rec(2, 1.2, 1.9, 2.1), rec(3, 1.5, 2.4, 2.3)]).unwrap();
    assert!(s.windows(2).all(|w| w[1].delta > w[0].delta && w[1].val_ce > w[0].val_ce));
    assert_eq!(decoupling_intervals(&s), vec![(1, 2), (2, 3)]);
}

#[test]
fn eval_csv_round_trip() {
    let s = delta_nll_series(&[rec(1, 1.0, 1.5, 2.0), rec(2, 1.25, 1.875, 2.125)]).unwrap();
    let mut buf = Vec::new();
    write_eval_csv(&mut buf, &s).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("step,nll_truth,nll_others,delta,val_ce,accuracy\n"));
    assert_eq!(read_eval_csv(&text).unwrap(), s);
}

proptest! {
    #[test]
    fn selection_is_invariant_to_shifts(nlls in prop::collection::vec(0.0f64..10.0, 2..8), c in -5.0f64..5.0) {
        let shifted: Vec<f64> = nlls.iter().map(|v| v + c).collect();
        let a = select_answer(&nlls);
        let b = select_answer(&shifted);
        // exact ties can be split by rounding; compare the chosen values instead
        prop_assert!(a == b || (nlls[a] - nlls[b]).abs() < 1e-12);
    }
}
