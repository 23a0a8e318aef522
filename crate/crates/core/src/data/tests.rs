use proptest::prelude::*;

use super::synth::{write_synthetic, SynthConfig, World};
use super::*;
use crate::tensor::Rng;

fn docs(n: usize, len: usize) -> Vec<Vec<Token>> {
    (0..n).map(|i| vec![(i % 200) as Token; len]).collect()
}

#[test]
fn byte_round_trip_basics() {
    assert_eq!(tokenize(b"ab"), vec![97, 98]);
    assert_eq!(detokenize(&[97, 98]), (b"ab".to_vec(), 0));
    assert!(tokenize(b"").is_empty());
    assert_eq!(detokenize(&[97, MASK, 98, BOS, PAD]), (b"ab".to_vec(), 3));
}

proptest! {
    #[test]
    fn random_blobs_round_trip(blob in prop::collection::vec(any::<u8>(), 1024)) {
        let (back, dropped) = detokenize(&tokenize(&blob));
        prop_assert_eq!(back, blob);
        prop_assert_eq!(dropped, 0);
    }
}

#[test]
fn packing_arithmetic() {
    let p = pack_sequences(&vec![1; 2050], 2048).unwrap();
    assert_eq!((p.windows.len(), p.dropped), (1, 2));
    let p = pack_sequences(&vec![1; 4096], 2048).unwrap();
    assert_eq!((p.windows.len(), p.dropped), (2, 0));
    let p = pack_sequences(&[], 16).unwrap();
    assert_eq!((p.windows.len(), p.dropped), (0, 0));
    assert!(pack_sequences(&[1], 0).is_err());
    assert_eq!(join_documents(&[vec![1, 2], vec![3]]), vec![BOS, 1, 2, BOS, 3]);
}

fn corpus(u: usize, t: usize, seq_len: usize, seed: u64) -> BudgetedCorpus {
    BudgetedCorpus {
        unique_tokens: u,
        total_tokens: t,
        seq_len,
        seed,
        sources: vec![],
        tier: "synthetic".into(),
    }
}

#[test]
fn unique_selection_is_exact_and_deterministic() {
    let d = docs(50, 39);
    let c = corpus(1000, 4000, 100, 7);
    let a = c.select_unique(&d).unwrap();
    assert_eq!(a.len(), 1000);
    assert_eq!(a, c.select_unique(&d).unwrap());
    assert_eq!(a[0], BOS);
    let other = corpus(1000, 4000, 100, 8).select_unique(&d).unwrap();
    assert_ne!(a, other);
    match corpus(5000, 5000, 100, 7).select_unique(&d) {
        Err(DataError::SourceTooSmall { available, required }) => assert_eq!((available, required), (2000, 5000)),
        other => panic!("{other:?}"),
    }
    assert!(corpus(1000, 500, 100, 7).select_unique(&d).is_err());
}

#[test]
fn every_window_delivered_epoch_count_times() {
    let d = docs(50, 39);
    let s = corpus(1000, 4000, 100, 7).build_stream_from(&d, 5).unwrap();
    assert_eq!(s.n_windows(), 10);
    assert_eq!(s.n_steps(), 8);
    let mut counts = vec![0; 10];
    for b in s.iter_from(0) {
        b.window_ids.iter().for_each(|&w| counts[w] += 1);
        assert!(b.tokens.iter().all(|&t| t != MASK && (t as usize) < VOCAB_SIZE));
    }
    assert_eq!(counts, vec![4; 10]);
    assert_eq!(s.tokens_after(s.n_steps()), 4000);
}

#[test]
fn single_epoch_when_budgets_match() {
    let d = docs(50, 39);
    let s = corpus(1000, 1000, 100, 1).build_stream_from(&d, 2).unwrap();
    let mut seen: Vec<usize> = s.iter_from(0).flat_map(|b| b.window_ids).collect();
    seen.sort();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
    assert!(s.iter_from(0).all(|b| b.epoch == 0));
}

#[test]
fn delivered_tokens_match_budget_within_a_batch() {
    let d = docs(100, 57);
    let c = corpus(3000, 31_000, 64, 3);
    let s = c.build_stream_from(&d, 7).unwrap();
    let delivered = s.tokens_after(s.n_steps()) as i64;
    assert!((delivered - 31_000).abs() <= 7 * 64);
    assert_eq!(s.n_windows(), 3000 / 64);
}

#[test]
fn epoch_orders_differ() {
    let windows: Vec<Vec<Token>> = (0..64).map(|i| vec![i as Token; 4]).collect();
    let s = BatchStream::new(windows, 8, 64 * 10, 5).unwrap();
    let orders: Vec<Vec<usize>> = (0..10).map(|e| s.epoch_order(e)).collect();
    for i in 0..10 {
        for j in i + 1..10 {
            assert_ne!(orders[i], orders[j]);
        }
    }
}

#[test]
fn random_access_and_prefetch_agree_with_sequential_order() {
    let windows: Vec<Vec<Token>> = (0..13).map(|i| vec![i as Token; 3]).collect();
    let s = BatchStream::new(windows, 4, 13 * 3, 9).unwrap();
    let seq: Vec<Batch> = s.iter_from(0).collect();
    assert_eq!(seq.len(), 9);
    assert_eq!(s.batch(5).unwrap(), seq[5]);
    for depth in [1, 3, 16] {
        assert_eq!(s.prefetch(2, depth).collect::<Vec<_>>(), seq[2..].to_vec());
    }
    assert!(s.batch(9).is_err());
    // a batch crossing an epoch boundary
    assert_eq!(seq[3].epoch, 0);
    assert_eq!(seq[4].epoch, 1);
}

#[test]
fn stream_rejects_masks_and_ragged_windows() {
    assert!(BatchStream::new(vec![vec![1, MASK]], 1, 1, 0).is_err());
    assert!(BatchStream::new(vec![vec![1, 2], vec![1]], 1, 1, 0).is_err());
    assert!(BatchStream::new(vec![], 1, 1, 0).is_err());
}

#[test]
fn validation_cursor_rotates() {
    let windows: Vec<Vec<Token>> = (0..5).map(|i| vec![i as Token]).collect();
    let mut c = ValidationCursor::new(windows.clone(), 2, true).unwrap();
    assert_eq!(c.next_chunk(), vec![vec![0], vec![1]]);
    assert_eq!(c.next_chunk(), vec![vec![2], vec![3]]);
    assert_eq!(c.next_chunk(), vec![vec![4], vec![0]]);
    let mut fixed = ValidationCursor::new(windows, 2, false).unwrap();
    assert_eq!(fixed.next_chunk(), fixed.next_chunk());
}

#[test]
fn documents_split_on_newlines() {
    let d = split_documents(b"one\r\n\n  \ntwo\n");
    assert_eq!(d, vec![tokenize(b"one"), tokenize(b"two")]);
}

#[test]
fn synthetic_world_is_consistent() {
    let w = World::generate(20, 1);
    assert_eq!(w, World::generate(20, 1));
    assert_eq!(w.names.len(), 20);
    let items = w.cloze_items(50, 2);
    for it in &items {
        it.validate().unwrap();
        assert_eq!(it.options.len(), 4);
        let mut o = it.options.clone();
        o.sort();
        o.dedup();
        assert_eq!(o.len(), 4);
    }
    let answers: std::collections::HashSet<usize> = items.iter().map(|i| i.answer_index).collect();
    assert!(answers.len() > 1);
    let docs = w.documents(10, 3);
    assert!(docs.iter().all(|d| !d.contains('\n') && d.starts_with("This is about")));
    let mut rng = Rng::new(0);
    assert!(w.document(&mut rng).len() > 20);
}

#[test]
fn synthetic_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        train_docs: 30,
        heldout_docs: 10,
        cloze_items: 5,
        ..Default::default()
    };
    let p = write_synthetic(dir.path(), &cfg).unwrap();
    assert_eq!(load_documents(&p.train).unwrap().len(), 30);
    assert_eq!(load_documents(&p.heldout).unwrap().len(), 10);
    assert_eq!(crate::eval::load_items(&p.cloze).unwrap().len(), 5);
}
