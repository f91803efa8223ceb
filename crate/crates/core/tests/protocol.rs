mod common;

use memoe::dataset::EditRecord;
use memoe::eval::{locality, reliability, EvalCase, ModelState};
use memoe::harness::{
    rollback, run_batch_edit, run_protocol, run_sequential_batch, run_single_edit, EditedState, Editor,
    ProtocolConfig, ProtocolMode,
};
use memoe::memoe::{edit_step, EditExample};
use memoe::model::forward;
use memoe::optim::Optimizer;
use memoe::{rng, Error, MemoeConfig};

use common::{small, Fixture};

const STEPS: usize = 40;

fn editor(f: &Fixture) -> Editor<'_> {
    Editor::new(&f.snapshot, &f.corpus.vocab, &f.corpus.gazetteer, MemoeConfig::default()).unwrap()
}

fn fast_editor(f: &Fixture) -> Editor<'_> {
    let cfg = MemoeConfig {
        lr: 5e-3,
        ..MemoeConfig::default()
    };
    Editor::new(&f.snapshot, &f.corpus.vocab, &f.corpus.gazetteer, cfg).unwrap()
}

fn with_steps(mut p: ProtocolConfig, steps: usize) -> ProtocolConfig {
    p.steps_per_batch = steps;
    p
}

fn probe_logits(f: &Fixture, state: Option<&memoe::AdapterState>, cases: &[EvalCase]) -> Vec<Vec<f64>> {
    let cfg = MemoeConfig::default();
    cases
        .iter()
        .flat_map(|c| [&c.prompt, &c.rephrase, &c.locality])
        .map(|p| {
            let attached = state.map(|s| memoe::memoe::Attached {
                state: s,
                config: &cfg,
                context: &p.context,
            });
            forward(&p.tokens, &f.snapshot, attached).unwrap().into_data()
        })
        .collect()
}

#[test]
fn batches_with_rollback_do_not_see_earlier_batches() {
    let f = small();
    let e = editor(f);
    let cases = e.cases(&f.records).unwrap();
    let fp = f.snapshot.fingerprint().to_owned();
    let all = run_protocol(&e, &cases, &with_steps(ProtocolConfig::batch(3, 9), STEPS)).unwrap();
    let alone = run_protocol(&e, &cases[6..], &with_steps(ProtocolConfig::batch(3, 3), STEPS)).unwrap();
    assert_eq!(all.state.adapter, alone.state.adapter);
    assert_eq!(all.outcomes.reliable[6..], alone.outcomes.reliable[..]);
    assert_eq!(all.outcomes.general[6..], alone.outcomes.general[..]);
    assert_eq!(all.outcomes.local[6..], alone.outcomes.local[..]);
    assert_eq!(all.outcomes.traces[12..], alone.outcomes.traces[..]);
    assert_eq!(f.snapshot.fingerprint(), fp);
}

#[test]
fn one_sequential_batch_equals_a_batch_edit() {
    let f = small();
    let e = editor(f);
    let cases = e.cases(&f.records[..4]).unwrap();
    let seq = run_sequential_batch(&e, &cases, &with_steps(ProtocolConfig::sequential_batch(4, 4), STEPS)).unwrap();
    let mut no_rollback = with_steps(ProtocolConfig::batch(4, 4), STEPS);
    no_rollback.rollback_between_batches = false;
    let batch = run_batch_edit(&e, &cases, &no_rollback).unwrap();
    assert_eq!(seq.adapter, batch.adapter);
    assert_eq!(seq.history, batch.history);
    let a = run_protocol(&e, &cases, &with_steps(ProtocolConfig::sequential_batch(4, 4), STEPS)).unwrap();
    let b = run_protocol(&e, &cases, &no_rollback).unwrap();
    assert_eq!(a.outcomes, b.outcomes);
}

#[test]
fn sequential_is_sequential_batch_of_one() {
    let f = small();
    let e = editor(f);
    let cases = e.cases(&f.records[..3]).unwrap();
    let a = run_protocol(&e, &cases, &with_steps(ProtocolConfig::sequential(3), 10)).unwrap();
    let b = run_protocol(&e, &cases, &with_steps(ProtocolConfig::sequential_batch(1, 3), 10)).unwrap();
    assert_eq!(a.state.adapter, b.state.adapter);
    assert_eq!(a.outcomes, b.outcomes);
    assert_eq!(a.state.history.len(), 3);
}

#[test]
fn single_edit_equals_a_batch_of_one() {
    let f = small();
    let e = editor(f);
    let cases = e.cases(&f.records[..1]).unwrap();
    let p = with_steps(ProtocolConfig::single(), STEPS);
    let single = run_single_edit(&e, &cases[0], &p).unwrap();
    let batch = run_batch_edit(&e, &cases, &with_steps(ProtocolConfig::batch(1, 1), STEPS)).unwrap();
    assert_eq!(single.adapter, batch.adapter);
}

#[test]
fn rollback_restores_pre_edit_behavior() {
    let f = small();
    let e = fast_editor(f);
    let cases = e.cases(&f.records).unwrap();
    let before = probe_logits(f, None, &cases);
    let mut state = run_batch_edit(&e, &cases, &with_steps(ProtocolConfig::batch(12, 12), 200)).unwrap();
    let cfg = e.config.clone();
    let pre = ModelState::base(&f.snapshot);
    let edited = locality(pre, ModelState::with_adapter(&f.snapshot, &state.adapter, &cfg), &cases).unwrap();
    assert_ne!(probe_logits(f, Some(&state.adapter), &cases), before);

    rollback(&mut state).unwrap();
    let once = state.adapter.clone();
    rollback(&mut state).unwrap();
    assert_eq!(state.adapter, once);
    assert_eq!(probe_logits(f, Some(&state.adapter), &cases), before);
    let restored = locality(pre, ModelState::with_adapter(&f.snapshot, &state.adapter, &cfg), &cases).unwrap();
    assert_eq!(restored, 1.0, "locality {edited} after editing, {restored} after rollback");

    let mut bare = EditedState {
        pristine: None,
        ..state
    };
    assert!(matches!(rollback(&mut bare), Err(Error::MissingPristine)));
}

#[test]
fn runs_are_reproducible_and_order_sensitive() {
    let f = small();
    let e = editor(f);
    let cases = e.cases(&f.records[..6]).unwrap();
    let p = with_steps(ProtocolConfig::sequential_batch(3, 6), STEPS);
    let a = run_protocol(&e, &cases, &p).unwrap();
    assert_eq!(run_protocol(&e, &cases, &p).unwrap(), a);
    let mut swapped = cases[3..].to_vec();
    swapped.extend_from_slice(&cases[..3]);
    let b = run_sequential_batch(&e, &swapped, &p).unwrap();
    assert_ne!(a.state.adapter, b.adapter);
}

#[test]
fn a_default_single_edit_succeeds() {
    let f = common::desk();
    let e = editor(f);
    let cases = e.cases(&f.records[..1]).unwrap();
    let run = run_protocol(&e, &cases, &ProtocolConfig::single()).unwrap();
    assert_eq!(run.report.reliability, 1.0);
}

#[test]
fn an_already_true_edit_stays_reliable() {
    let f = small();
    let e = editor(f);
    let record = &f.records[0];
    let known = EditRecord {
        target_new: f.corpus.base_object(record).unwrap().to_owned(),
        ..record.clone()
    };
    let cases = e.cases(&[known]).unwrap();
    let pre = reliability(ModelState::base(&f.snapshot), &cases).unwrap();
    assert_eq!(pre, 1.0);
    let run = run_protocol(&e, &cases, &ProtocolConfig::single()).unwrap();
    assert_eq!(run.report.reliability, 1.0);
}

#[test]
fn edit_step_advances_only_the_adapter() {
    let f = small();
    let e = editor(f);
    let cases = e.cases(&f.records[..2]).unwrap();
    let examples: Vec<EditExample> = cases
        .iter()
        .map(|c| EditExample::new(&c.prompt.tokens, &c.target, c.prompt.context.clone()).unwrap())
        .collect();
    let mut adapter = e.fresh_adapter().unwrap();
    let before = adapter.clone();
    let fp = f.snapshot.fingerprint().to_owned();
    let mut opt = Optimizer::adam(2e-4);
    let mut noise = rng::stream(0, "noise");
    let losses = edit_step(&examples, &f.snapshot, &mut adapter, &e.config, &mut opt, &mut noise).unwrap();
    assert!(losses.task > 0.0 && losses.aux >= 0.0);
    assert_eq!(adapter.step_count, 1);
    assert_ne!(adapter.experts, before.experts);
    assert_eq!(f.snapshot.fingerprint(), fp);
    assert!(matches!(
        edit_step(&[], &f.snapshot, &mut adapter, &e.config, &mut opt, &mut noise),
        Err(Error::EmptyInput(_))
    ));
}

#[test]
fn protocol_configs_are_validated() {
    assert!(ProtocolConfig { batch_size: 2, ..ProtocolConfig::single() }.validate().is_err());
    assert!(ProtocolConfig { batch_size: 2, ..ProtocolConfig::sequential(4) }.validate().is_err());
    assert!(ProtocolConfig {
        rollback_between_batches: true,
        ..ProtocolConfig::sequential_batch(2, 4)
    }
    .validate()
    .is_err());
    assert_eq!(ProtocolConfig::sequential_batch(10, 25).num_batches(), 3);
    assert_eq!(ProtocolConfig::default_for(ProtocolMode::Batch).batch_size, 30);
    let f = small();
    let e = editor(f);
    let cases = e.cases(&f.records[..2]).unwrap();
    assert!(run_protocol(&e, &cases, &ProtocolConfig::batch(2, 4)).is_err());
}

#[test]
fn earlier_batches_are_forgotten_first() {
    let corpus = memoe::dataset::generate(&memoe::dataset::CorpusSpec::desk(100, 42)).unwrap();
    let config = memoe::model::ModelConfig::desk(corpus.vocab.len(), 42);
    let (snapshot, _) =
        memoe::train::train_base_with(&corpus.pretrain_tokens(), config, &memoe::train::TrainOptions::default()).unwrap();
    let e = Editor::new(&snapshot, &corpus.vocab, &corpus.gazetteer, MemoeConfig::default()).unwrap();
    let records = memoe::dataset::attach_locality_ground_truth(&corpus.records, &corpus.vocab, &snapshot).unwrap();
    let cases = e.cases(&records).unwrap();
    let run = run_protocol(&e, &cases, &ProtocolConfig::sequential_batch(10, 100)).unwrap();
    let per_batch: Vec<f64> = run
        .outcomes
        .reliable
        .chunks(10)
        .map(|c| c.iter().filter(|&&b| b).count() as f64 / c.len() as f64)
        .collect();
    println!("reliability by batch {per_batch:?}");
    assert!(per_batch[0] <= per_batch[9], "{per_batch:?}");
}
