//! Serialized-transcript representation tests: pinned join/split examples
//! and the randomized round-trip property.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use saasr_core::sot::{deserialize, serialize, SotTranscript, Utterance, Vocabulary};

fn vocab24() -> Vocabulary {
    Vocabulary::new(24).unwrap()
}

fn utt(tokens: &[usize], speaker_id: usize, start_frame: usize) -> Utterance {
    Utterance { tokens: tokens.to_vec(), speaker_id, start_frame }
}

#[test]
fn vocabulary_reserves_top_two_indices() {
    let v = vocab24();
    assert_eq!(v.size(), 24);
    assert_eq!(v.sc(), 22);
    assert_eq!(v.eos(), 23);
    assert_eq!(v.content_count(), 22);
    assert!(v.is_content(0) && v.is_content(21));
    assert!(!v.is_content(22) && !v.is_content(23) && !v.is_content(24));
}

#[test]
fn vocabulary_rejects_tiny_sizes() {
    assert!(Vocabulary::new(2).is_err());
    assert!(Vocabulary::new(3).is_ok());
}

#[test]
fn serialize_single_utterance() {
    let v = vocab24();
    let t = serialize(&[utt(&[5, 7], 2, 0)], &v).unwrap();
    assert_eq!(t.tokens, vec![5, 7, 23]);
    assert_eq!(t.speakers, vec![2, 2, 2]);
}

#[test]
fn serialize_two_speakers_with_change_marker() {
    let v = vocab24();
    let t = serialize(&[utt(&[5], 1, 0), utt(&[9, 4], 3, 80)], &v).unwrap();
    assert_eq!(t.tokens, vec![5, 22, 9, 4, 23]);
    assert_eq!(t.speakers, vec![1, 1, 3, 3, 3]);
}

#[test]
fn serialize_sorts_by_start_frame() {
    let v = vocab24();
    let sorted = serialize(&[utt(&[5], 1, 0), utt(&[9, 4], 3, 80)], &v).unwrap();
    let reversed = serialize(&[utt(&[9, 4], 3, 80), utt(&[5], 1, 0)], &v).unwrap();
    assert_eq!(sorted, reversed);
}

#[test]
fn serialize_breaks_start_ties_by_speaker() {
    let v = vocab24();
    let t = serialize(&[utt(&[9], 4, 10), utt(&[5], 2, 10)], &v).unwrap();
    assert_eq!(t.tokens, vec![5, 22, 9, 23]);
    assert_eq!(t.speakers, vec![2, 2, 4, 4]);
}

#[test]
fn serialize_rejects_bad_input() {
    let v = vocab24();
    assert!(serialize(&[], &v).is_err(), "no utterances");
    assert!(serialize(&[utt(&[], 1, 0)], &v).is_err(), "empty utterance");
    assert!(serialize(&[utt(&[22], 1, 0)], &v).is_err(), "marker used as content");
    assert!(serialize(&[utt(&[23], 1, 0)], &v).is_err(), "end marker used as content");
}

#[test]
fn deserialize_inverts_the_pinned_example() {
    let v = vocab24();
    let t = SotTranscript { tokens: vec![5, 22, 9, 4, 23], speakers: vec![1, 1, 3, 3, 3] };
    assert_eq!(deserialize(&t, &v).unwrap(), vec![(vec![5], 1), (vec![9, 4], 3)]);
}

#[test]
fn deserialize_rejects_bare_end_marker() {
    let v = vocab24();
    let t = SotTranscript { tokens: vec![23], speakers: vec![1] };
    // The sequence shape is admissible, but it encodes an empty utterance.
    assert!(t.validate(&v).is_ok());
    let err = deserialize(&t, &v).unwrap_err();
    assert!(err.to_string().contains("empty utterance"), "got: {err}");
}

#[test]
fn validate_enforces_marker_placement() {
    let v = vocab24();
    let bad = |tokens: Vec<usize>| {
        let speakers = vec![1; tokens.len()];
        SotTranscript { tokens, speakers }.validate(&v).is_err()
    };
    assert!(bad(vec![5, 7]), "missing end marker");
    assert!(bad(vec![5, 23, 7, 23]), "interior end marker");
    assert!(bad(vec![22, 5, 23]), "change marker first");
    assert!(bad(vec![5, 22, 22, 7, 23]), "adjacent change markers");
    assert!(bad(vec![5, 22, 23]), "change marker immediately before end");
    assert!(bad(vec![]), "empty transcript");
    let uneven = SotTranscript { tokens: vec![5, 23], speakers: vec![1] };
    assert!(uneven.validate(&v).is_err(), "length mismatch");
    let ok = SotTranscript { tokens: vec![5, 22, 7, 23], speakers: vec![1, 1, 2, 2] };
    assert!(ok.validate(&v).is_ok());
}

#[test]
fn utterance_count_is_change_markers_plus_one() {
    let v = vocab24();
    let t = serialize(
        &[utt(&[1], 1, 0), utt(&[2], 2, 5), utt(&[3], 3, 9)],
        &v,
    )
    .unwrap();
    assert_eq!(t.utterance_count(&v), 3);
    let sc_count = t.tokens.iter().filter(|&&x| x == v.sc()).count();
    assert_eq!(t.utterance_count(&v), sc_count + 1);
}

#[test]
fn round_trip_identity_over_1000_random_transcripts() {
    let v = vocab24();
    let mut rng = StdRng::seed_from_u64(2024);
    for case in 0..1000 {
        let n_utts = rng.gen_range(1..=6);
        let mut utts = Vec::with_capacity(n_utts);
        for _ in 0..n_utts {
            let len = rng.gen_range(1..=8);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..22)).collect();
            utts.push(Utterance {
                tokens,
                speaker_id: rng.gen_range(1..=8),
                start_frame: rng.gen_range(0..200),
            });
        }
        let t = serialize(&utts, &v).unwrap();
        t.validate(&v).expect("serialized transcripts are always valid");
        let back = deserialize(&t, &v).unwrap();

        let mut expected: Vec<(Vec<usize>, usize)> = {
            let mut order: Vec<&Utterance> = utts.iter().collect();
            order.sort_by_key(|u| (u.start_frame, u.speaker_id));
            order.iter().map(|u| (u.tokens.clone(), u.speaker_id)).collect()
        };
        assert_eq!(back.len(), n_utts, "case {case}");
        assert_eq!(back, std::mem::take(&mut expected), "case {case}");
    }
}
