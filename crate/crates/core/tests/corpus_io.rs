use std::fs;
use std::path::Path;

use proptest::prelude::*;
use sufisent::corpus::{
    gen_toy_nli, load_checkpoint, load_embeddings, make_batches, parse_snli, save_checkpoint, toy_tokens, write_snli,
    Checkpoint, EmbeddingTable, NliExample, Vocab,
};
use sufisent::encoder::{EncoderConfig, Variant};
use sufisent::head::{Activation, HeadConfig, NliLabel};
use sufisent::model::Model;
use sufisent::train::TrainConfig;

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn fixture_examples_plus_skipped_equals_lines() {
    let path = fixture("snli_10.jsonl");
    let lines = fs::read_to_string(&path).unwrap().lines().filter(|l| !l.trim().is_empty()).count();
    let data = parse_snli(&path).unwrap();
    assert_eq!(data.pairs.len() + data.skipped, lines);
    assert_eq!((data.pairs.len(), data.skipped), (8, 2));
    assert_eq!(data.pairs[0].label, NliLabel::Neutral);
}

#[test]
fn toy_data_survives_the_snli_format() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.jsonl");
    let pairs = gen_toy_nli(7, 300).unwrap();
    write_snli(&path, &pairs).unwrap();
    let back = parse_snli(&path).unwrap();
    assert_eq!(back.skipped, 0);
    assert_eq!(back.pairs, pairs);
}

fn checkpoint(variant: Variant, trainable: bool) -> Checkpoint {
    let pairs = gen_toy_nli(2, 30).unwrap();
    let vocab = Vocab::build(&pairs, 1);
    let enc = EncoderConfig::new(variant, 5, 4).unwrap();
    let head = HeadConfig {
        encoding_dim: enc.encoding_dim(),
        fc_dim: 6,
        activation: Activation::None,
    };
    let emb = EmbeddingTable::random(vocab.len(), 4, 8).with_trainable(trainable);
    Checkpoint {
        train: TrainConfig {
            seed: 77,
            lr0: 0.123456789,
            ..Default::default()
        },
        vocab,
        model: Model::init(enc, head, emb, 4).unwrap(),
        best_val_acc: 2.0 / 3.0,
    }
}

#[test]
fn checkpoint_file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for (i, v) in Variant::ALL.into_iter().enumerate() {
        let c = checkpoint(v, i % 2 == 0);
        let (a, b) = (dir.path().join(format!("{i}a.ckpt")), dir.path().join(format!("{i}b.ckpt")));
        save_checkpoint(&a, &c).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        save_checkpoint(&b, &loaded).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(loaded, c);
        for ids in [vec![2, 3, 4], vec![5], vec![9, 9, 2, 7, 1]] {
            assert_eq!(loaded.model.encode_ids(&ids).unwrap(), c.model.encode_ids(&ids).unwrap());
        }
    }
}

#[test]
fn load_reports_missing_file() {
    assert!(load_checkpoint(Path::new("/nonexistent/x.ckpt")).is_err());
}

#[test]
fn embedding_fixture_coverage() {
    let vocab = Vocab::from_tokens(["dog", "cat", "the", "bird", "fish"]);
    let (table, report) = load_embeddings(&fixture("embeddings_5.txt"), &vocab, 3, 1).unwrap();
    assert_eq!((report.pretrained, report.vocab_tokens, report.duplicates), (3, 5, 1));
    assert_eq!(table.table.row(vocab.id("dog")), &[0.12, -0.21, 0.32]);
    assert!(table.table.row(0).iter().all(|&x| x == 0.0));
    let (again, _) = load_embeddings(&fixture("embeddings_5.txt"), &vocab, 3, 1).unwrap();
    assert_eq!(again, table);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generation_and_batching_are_seed_deterministic(seed in any::<u64>(), count in 3usize..60, bs in 1usize..9) {
        let a = gen_toy_nli(seed, count).unwrap();
        prop_assert_eq!(&a, &gen_toy_nli(seed, count).unwrap());
        let mut hist = [0usize; 3];
        for p in &a {
            hist[p.label.index()] += 1;
        }
        prop_assert!(hist.iter().max().unwrap() - hist.iter().min().unwrap() <= 1);

        let vocab = Vocab::from_tokens(toy_tokens());
        let ex: Vec<NliExample> = a.iter().map(|p| vocab.encode_pair(p)).collect();
        let b1 = make_batches(&ex, bs, seed).unwrap();
        prop_assert_eq!(&b1, &make_batches(&ex, bs, seed).unwrap());
        prop_assert_eq!(b1.iter().map(|b| b.len()).sum::<usize>(), count);
        prop_assert_eq!(Vocab::build(&a, 1), Vocab::build(&a, 1));
    }
}
