mod common;

use std::collections::BTreeMap;

use memoe::dataset::{self, CorpusSpec};
use memoe::model::{forward, greedy_decode, ModelConfig, ModelSnapshot, LM_HEAD, LN_F_BIAS, LN_F_GAIN};
use memoe::train::{corpus_loss, train_base, train_base_with, TrainOptions};
use memoe::{rng, Error, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

fn tiny(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 10,
        seed,
    }
}

fn params(s: &ModelSnapshot) -> BTreeMap<String, Tensor> {
    s.params().map(|(n, t)| (n.to_owned(), t.clone())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoint_round_trip_is_byte_exact(seed in any::<u64>()) {
        let s = ModelSnapshot::init(tiny(seed)).unwrap();
        let bytes = s.to_bytes().unwrap();
        let back = ModelSnapshot::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back.fingerprint(), s.fingerprint());
    }

    #[test]
    fn fingerprint_follows_parameter_bytes(seed in any::<u64>(), which in 0usize..1000) {
        let s = ModelSnapshot::init(tiny(seed)).unwrap();
        let again = ModelSnapshot::init(tiny(seed)).unwrap();
        prop_assert_eq!(s.fingerprint(), again.fingerprint());
        let mut p = params(&s);
        let names: Vec<String> = p.keys().cloned().collect();
        let t = p.get_mut(&names[which % names.len()]).unwrap();
        let i = which % t.numel();
        t.data_mut()[i] += 1.0;
        let changed = ModelSnapshot::new(s.config().clone(), p).unwrap();
        prop_assert_ne!(changed.fingerprint(), s.fingerprint());
    }

    #[test]
    fn forward_is_deterministic_and_shaped(seed in any::<u64>(), len in 1usize..10) {
        let s = ModelSnapshot::init(tiny(3)).unwrap();
        let mut r = rng::stream(seed, "tokens");
        let tokens: Vec<usize> = (0..len).map(|_| r.gen_range(0..12)).collect();
        let a = forward(&tokens, &s, None).unwrap();
        prop_assert_eq!(a.shape(), &[len, 12]);
        prop_assert_eq!(&forward(&tokens, &s, None).unwrap(), &a);
        prop_assert!(a.is_finite());
    }
}

#[test]
fn forward_rejects_bad_inputs() {
    let s = ModelSnapshot::init(tiny(0)).unwrap();
    assert!(matches!(forward(&[1, 12], &s, None), Err(Error::TokenOutOfRange { token: 12, .. })));
    assert!(matches!(forward(&[3; 11], &s, None), Err(Error::SequenceTooLong { len: 11, max: 10 })));
    assert!(ModelSnapshot::init(ModelConfig { n_heads: 3, ..tiny(0) }).is_err());
}

#[test]
fn decode_emits_the_dominant_token() {
    let s = ModelSnapshot::init(tiny(1)).unwrap();
    let mut p = params(&s);
    let d = 8;
    p.insert(LN_F_GAIN.into(), Tensor::zeros(&[1, d]));
    let mut bias = vec![0.0; d];
    bias[0] = 1.0;
    p.insert(LN_F_BIAS.into(), Tensor::matrix(1, d, bias));
    let mut head = Tensor::zeros(&[12, d]);
    for t in 0..12 {
        head.row_mut(t)[0] = 1.0;
    }
    head.row_mut(7)[0] = 10.0;
    p.insert(LM_HEAD.into(), head);
    let s = ModelSnapshot::new(s.config().clone(), p).unwrap();
    assert_eq!(greedy_decode(&[3, 4], &s, None, 1).unwrap(), vec![7]);
    assert_eq!(greedy_decode(&[3, 4], &s, None, 0).unwrap(), Vec::<usize>::new());
    let out = greedy_decode(&[3], &s, None, 4).unwrap();
    assert_eq!(out, greedy_decode(&[3], &s, None, 4).unwrap());
}

#[test]
fn zero_steps_return_the_initialization() {
    let cfg = tiny(5);
    let corpus = vec![vec![3, 4, 5], vec![6, 7]];
    let trained = train_base(&corpus, cfg.clone(), 0, 1e-3).unwrap();
    assert_eq!(trained.fingerprint(), ModelSnapshot::init(cfg).unwrap().fingerprint());
    assert!(train_base(&[], tiny(5), 10, 1e-3).is_err());
}

#[test]
fn repeated_fact_is_memorized() {
    let cfg = ModelConfig {
        vocab_size: 10,
        ..ModelConfig::desk(10, 42)
    };
    let fact = vec![3, 4, 5, 6, 7];
    let snap = train_base(&[fact.clone()], cfg, 500, 3e-3).unwrap();
    assert_eq!(greedy_decode(&fact[..3], &snap, None, 2).unwrap(), vec![6, 7]);
}

#[test]
fn training_lowers_loss_on_fifty_facts() {
    let corpus = dataset::generate(&CorpusSpec::desk(50, 42)).unwrap();
    let seqs = corpus.pretrain_tokens();
    let cfg = common::small_config(corpus.vocab.len());
    let opts = TrainOptions {
        steps: 500,
        ..TrainOptions::default()
    };
    let (snap, log) = train_base_with(&seqs, cfg.clone(), &opts).unwrap();
    let before = corpus_loss(&seqs, &ModelSnapshot::init(cfg).unwrap()).unwrap();
    let after = corpus_loss(&seqs, &snap).unwrap();
    assert!(after < before, "{before} -> {after}");
    let means = log.window_means();
    assert_eq!(means.len(), 10);
    assert!(means.windows(2).all(|w| w[1] <= w[0]), "{means:?}");
}

#[test]
fn forward_never_touches_the_snapshot() {
    let f = common::small();
    let fp = f.snapshot.fingerprint().to_owned();
    let bytes = f.snapshot.to_bytes().unwrap();
    let _ = forward(&f.corpus.vocab.encode(&f.records[0].prompt), &f.snapshot, None).unwrap();
    assert_eq!(f.snapshot.fingerprint(), fp);
    assert_eq!(f.snapshot.to_bytes().unwrap(), bytes);
}
