use std::sync::Arc;

use cogen_core::config::RunConfig;
use cogen_core::diffusion::Denoiser;
use cogen_core::embedder::{default_vocab, EmbeddingModel};
use cogen_core::explicit::{parse_utterance, summarize, DialogueHistory, PromptRep};
use cogen_core::generator::Generator;
use cogen_core::implicit::{attend_excite, clarify, delta_from_sims, AeConfig};
use cogen_core::pipeline::generator_for;
use cogen_core::scene::{PartialSceneSpec, SceneSpec, Slot, SlotValue};
use cogen_core::session::{Choice, RoundRecord, SessionMode, SessionRecord, SessionStatus, SessionStore};
use cogen_core::user::utterance_for;
use proptest::prelude::*;

fn slot_value() -> impl Strategy<Value = SlotValue> {
    (0usize..72, 0usize..4).prop_map(|(i, s)| SceneSpec::all()[i].value(Slot::ALL[s]))
}

/// An utterance mentioning a random subset of values, possibly with filler.
fn utterance() -> impl Strategy<Value = (Vec<SlotValue>, String)> {
    (prop::collection::vec(slot_value(), 0..3), any::<bool>()).prop_map(|(values, filler)| {
        let mut parts: Vec<String> = values.iter().map(|v| utterance_for(*v)).collect();
        if filler || parts.is_empty() {
            parts.push("please".to_string());
        }
        (values, parts.join(" and "))
    })
}

fn partial_spec() -> impl Strategy<Value = PartialSceneSpec> {
    (0usize..PartialSceneSpec::all().len()).prop_map(|i| PartialSceneSpec::all()[i])
}

fn tiny_generator() -> Generator {
    let cfg = RunConfig::tiny();
    let embedder = Arc::new(EmbeddingModel::new(cfg.embedder, default_vocab(), 11).unwrap());
    let denoiser = Arc::new(Denoiser::new(cfg.denoiser, cfg.schedule.build().unwrap(), 12).unwrap());
    generator_for(&cfg, embedder, denoiser)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merged_slot_is_latest_mention(dialogue in prop::collection::vec(utterance(), 1..6)) {
        let mut history = DialogueHistory::new();
        for (_, w) in &dialogue[..dialogue.len() - 1] {
            history.push(w.clone(), "ok");
        }
        let last = &dialogue.last().unwrap().1;
        let prompt = summarize(&history, last);
        for slot in Slot::ALL {
            let expected = dialogue
                .iter()
                .rev()
                .find_map(|(values, _)| values.iter().rev().find(|v| v.slot() == slot).copied());
            prop_assert_eq!(prompt.slots.get(slot), expected);
        }
        prop_assert_eq!(&prompt, &summarize(&history, last));
        prop_assert_eq!(prompt.source_round, dialogue.len());
    }

    #[test]
    fn prompt_tokens_follow_slots(spec in partial_spec()) {
        let p = PromptRep::new(spec, 1);
        prop_assert_eq!(parse_utterance(&p.text()), spec);
    }

    #[test]
    fn delta_bounds_and_trigger(sims in prop::collection::vec(-1.0f64..=1.0, 1..8), tau in 0.0f64..2.0, spec in partial_spec()) {
        let delta = delta_from_sims(&sims);
        prop_assert!((0.0..=2.0).contains(&delta));
        let prompt = PromptRep::new(spec, 1);
        let q = clarify(&prompt, &sims, delta, tau);
        prop_assert_eq!(q.is_some(), delta > tau);
        if let (Some((slot, _)), Some(first)) = (&q, spec.unspecified_slots().first()) {
            prop_assert_eq!(slot, first);
        }
    }

    #[test]
    fn session_store_round_trip(
        rounds in prop::collection::vec((utterance(), any::<u64>(), any::<bool>(), prop::option::of(any::<bool>())), 0..5),
        training in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::new(dir.path()).unwrap();
        let mode = if training { SessionMode::Training } else { SessionMode::Inference };
        let mut s = SessionRecord::new("prop", mode, seed);
        let mut history = DialogueHistory::new();
        for (i, ((_, w), img_seed, pair, pref)) in rounds.iter().enumerate() {
            let prompt = summarize(&history, w);
            history.push(w.clone(), "ok");
            let n = if *pair && training { 2 } else { 1 };
            let preference = if training && n == 2 { pref.map(|a| if a { Choice::A } else { Choice::B }) } else { None };
            s.push_round(RoundRecord {
                round: i + 1,
                user_input: w.clone(),
                response: "ok".into(),
                prompt,
                images: (0..n).map(|k| format!("prop/{}_{k}.png", i + 1)).collect(),
                seeds: (0..n as u64).map(|k| img_seed ^ k).collect(),
                ambiguity: None,
                preference,
            }).unwrap();
        }
        s.status = if rounds.len() % 2 == 0 { SessionStatus::Active } else { SessionStatus::Satisfied };
        store.persist(&s).unwrap();
        prop_assert_eq!(store.load("prop").unwrap(), s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn attend_excite_invariants(spec in partial_spec(), seed in any::<u64>(), k in -0.5f64..0.99, n_max in 1usize..5) {
        let g = tiny_generator();
        let prompt = PromptRep::new(spec, 1);
        let first = g.generate(&prompt, seed).unwrap();
        let cfg = AeConfig { k, n_max, gamma: 2.0 };
        let st = attend_excite(&prompt, &first, &cfg, &g, seed).unwrap();
        let t = &st.activation_list;
        prop_assert!(t.len() <= n_max.min(prompt.tokens.len()));
        prop_assert_eq!(st.iterations_used, t.len() + 1);
        prop_assert_eq!(st.sims.len(), st.iterations_used);
        let mut sorted = t.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), t.len());
        prop_assert!(t.iter().all(|&i| i < prompt.tokens.len()));
        let max = st.sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(st.best_sim, max);
        prop_assert_eq!(st.sims[st.best_index], st.best_sim);
        prop_assert!(st.best_sim >= st.initial_sim());
        // every non-final iteration stayed below k
        prop_assert!(st.sims[..st.sims.len() - 1].iter().all(|&s| s < k));
        if st.reached_threshold {
            prop_assert!(*st.sims.last().unwrap() >= k);
        } else {
            prop_assert!(t.len() == n_max || st.exhausted);
        }
        if st.initial_sim() >= k {
            prop_assert!(t.is_empty());
            prop_assert_eq!(&st.best_image, &first);
        }
    }
}

#[test]
fn history_is_append_only() {
    use cogen_core::explicit::{run_round, ExplicitSession, GrammarSummarizer, RoundMode};
    let g = tiny_generator();
    let mut session = ExplicitSession::new(4);
    let mut snapshots = Vec::new();
    for (w, mode) in [("a red circle", RoundMode::Single), ("on the left", RoundMode::Pair), ("actually blue", RoundMode::Pair)] {
        let out = run_round(&mut session, &g, &GrammarSummarizer, w, mode).unwrap();
        assert_eq!(out.candidates.len(), mode.candidates());
        if mode == RoundMode::Pair {
            assert_ne!(out.seeds[0], out.seeds[1]);
        }
        for (i, snap) in snapshots.iter().enumerate() {
            assert_eq!(&session.history.turns()[i], snap);
        }
        snapshots.push(session.history.turns().last().unwrap().clone());
    }
    assert_eq!(session.history.len(), 3);
}
