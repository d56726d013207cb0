//! Length-synchronous beam search and post-hoc speaker assignment.
//!
//! Search ranks hypotheses by token probabilities alone; the per-step
//! profile posteriors are carried along and only consulted afterwards, when
//! each decoded utterance is assigned a speaker — either independently per
//! utterance (argmax) or jointly under the constraint that consecutive
//! utterances come from different speakers (deduplicated Viterbi).

use crate::error::{Error, Result};
use crate::model::{EncoderStates, SaAsrModel};
use crate::sot::{SotTranscript, Vocabulary};
use crate::tensor::Tensor;

/// Per-step scores a search needs: log token distribution and profile
/// posteriors for the next position given the emitted prefix.
#[derive(Debug, Clone)]
pub struct StepScores {
    pub token_log_probs: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Anything that can score next-token continuations. The model is the real
/// implementor; tests drive the search with synthetic distributions.
pub trait StepScorer {
    fn vocab(&self) -> Vocabulary;
    fn step(&mut self, prefix: &[usize]) -> Result<StepScores>;
}

/// Scores continuations with a frozen model against one input's encoder
/// states and profile set.
pub struct ModelScorer<'a> {
    model: &'a SaAsrModel,
    enc: EncoderStates,
    profiles: &'a Tensor,
}

impl<'a> ModelScorer<'a> {
    /// Encodes `x` once and scores all subsequent steps against it.
    pub fn new(model: &'a SaAsrModel, x: &Tensor, profiles: &'a Tensor) -> Result<Self> {
        let enc = model.encode(x)?;
        Ok(ModelScorer { model, enc, profiles })
    }

    /// Reuses already-computed encoder states.
    pub fn from_states(model: &'a SaAsrModel, enc: EncoderStates, profiles: &'a Tensor) -> Self {
        ModelScorer { model, enc, profiles }
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab(&self) -> Vocabulary {
        self.model.vocab()
    }

    fn step(&mut self, prefix: &[usize]) -> Result<StepScores> {
        let out = self.model.decoder_step(prefix, &self.enc, self.profiles)?;
        Ok(StepScores { token_log_probs: out.token_log_probs, beta: out.profile_posteriors })
    }
}

/// One (possibly unfinished) decoded sequence.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Sum of the chosen tokens' log-probabilities.
    pub log_score: f64,
    /// The chosen token's log-probability at each step.
    pub token_log_probs: Vec<f64>,
    /// Profile posteriors recorded at each step, one row per token.
    pub beta_rows: Vec<Vec<f64>>,
    pub terminated: bool,
}

impl Hypothesis {
    fn empty() -> Self {
        Hypothesis {
            tokens: Vec::new(),
            log_score: 0.0,
            token_log_probs: Vec::new(),
            beta_rows: Vec::new(),
            terminated: false,
        }
    }

    fn extend(&self, token: usize, log_prob: f64, beta: Vec<f64>) -> Self {
        let mut h = self.clone();
        h.tokens.push(token);
        h.token_log_probs.push(log_prob);
        h.beta_rows.push(beta);
        h.log_score += log_prob;
        h
    }

    /// Ranking score: raw log-score divided by token count.
    pub fn normalized_score(&self) -> f64 {
        self.log_score / self.tokens.len() as f64
    }
}

/// Continuations that keep the transcript well-formed: a speaker change
/// cannot open the sequence or follow another speaker change, and the
/// terminator cannot close an utterance that has no content yet.
fn valid_next(tokens: &[usize], candidate: usize, vocab: &Vocabulary) -> bool {
    let last = tokens.last().copied();
    if candidate == vocab.sc() {
        return matches!(last, Some(t) if t != vocab.sc());
    }
    if candidate == vocab.eos() {
        return last != Some(vocab.sc());
    }
    true
}

fn force_terminate<S: StepScorer>(scorer: &mut S, mut h: Hypothesis, vocab: &Vocabulary) -> Result<Hypothesis> {
    // A trailing speaker change would leave an empty final utterance; drop
    // it and rescore so the hypothesis stays exactly recomputable.
    if h.tokens.last() == Some(&vocab.sc()) {
        h.tokens.pop();
        h.beta_rows.pop();
        h.log_score -= h.token_log_probs.pop().expect("token and score counts match");
    }
    let scores = scorer.step(&h.tokens)?;
    let eos = vocab.eos();
    let mut out = h.extend(eos, scores.token_log_probs[eos], scores.beta);
    out.terminated = true;
    Ok(out)
}

/// Length-synchronous beam search. Returns terminated hypotheses sorted by
/// length-normalized score, best first; every hypothesis has at most
/// `max_len` tokens including the terminator, appended by force when the
/// budget runs out. Exact score ties rank the earlier-expanded (lower token
/// id) hypothesis first, matching greedy's tie-break.
pub fn beam_search<S: StepScorer>(
    scorer: &mut S,
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if beam_width == 0 {
        return Err(Error::InvalidArgument("beam_width must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let vocab = scorer.vocab();
    let eos = vocab.eos();
    let mut live = vec![Hypothesis::empty()];
    let mut finished = Vec::new();

    for _ in 0..max_len.saturating_sub(1) {
        if live.is_empty() {
            break;
        }
        let mut candidates = Vec::with_capacity(live.len() * vocab.size());
        for h in &live {
            let scores = scorer.step(&h.tokens)?;
            for token in 0..vocab.size() {
                if valid_next(&h.tokens, token, &vocab) {
                    candidates.push(h.extend(token, scores.token_log_probs[token], scores.beta.clone()));
                }
            }
        }
        // Stable sort keeps insertion order (hypothesis, then token id) on
        // exact ties, which is what makes beam width 1 coincide with greedy.
        candidates.sort_by(|a, b| b.log_score.total_cmp(&a.log_score));
        candidates.truncate(beam_width);
        live.clear();
        for mut c in candidates {
            if *c.tokens.last().expect("extended hypothesis") == eos {
                c.terminated = true;
                finished.push(c);
            } else {
                live.push(c);
            }
        }
    }
    for h in live {
        finished.push(force_terminate(scorer, h, &vocab)?);
    }
    finished.sort_by(|a, b| b.normalized_score().total_cmp(&a.normalized_score()));
    Ok(finished)
}

/// Greedy decoding: the locally best valid token at every step, ties to the
/// lowest token id, with the same forced termination as the beam.
pub fn greedy_decode<S: StepScorer>(scorer: &mut S, max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let vocab = scorer.vocab();
    let eos = vocab.eos();
    let mut h = Hypothesis::empty();
    for _ in 0..max_len.saturating_sub(1) {
        let scores = scorer.step(&h.tokens)?;
        let mut best: Option<usize> = None;
        for token in 0..vocab.size() {
            if !valid_next(&h.tokens, token, &vocab) {
                continue;
            }
            if best.is_none_or(|b| scores.token_log_probs[token] > scores.token_log_probs[b]) {
                best = Some(token);
            }
        }
        let token = best.expect("content tokens are always valid");
        h = h.extend(token, scores.token_log_probs[token], scores.beta);
        if token == eos {
            h.terminated = true;
            return Ok(h);
        }
    }
    force_terminate(scorer, h, &vocab)
}

/// Speakers chosen for a hypothesis's utterances, with the summed log
/// posterior of the choice.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerAssignment {
    /// One profile index per utterance, in transcript order.
    pub speakers: Vec<usize>,
    /// Sum over utterances of the chosen speaker's window score.
    pub log_score: f64,
}

/// Splits token positions `0..n` into per-utterance windows; each window
/// covers an utterance's content tokens plus its terminating marker.
pub fn utterance_windows(tokens: &[usize], vocab: &Vocabulary) -> Vec<std::ops::Range<usize>> {
    let mut windows = Vec::new();
    let mut start = 0;
    for (i, &t) in tokens.iter().enumerate() {
        if t == vocab.sc() || t == vocab.eos() {
            windows.push(start..i + 1);
            start = i + 1;
        }
    }
    windows
}

fn check_assignable(h: &Hypothesis, vocab: &Vocabulary) -> Result<usize> {
    if !h.terminated || h.tokens.last() != Some(&vocab.eos()) {
        return Err(Error::InvalidArgument("speaker assignment needs a terminated hypothesis".into()));
    }
    if h.beta_rows.len() != h.tokens.len() {
        return Err(Error::InvalidArgument(format!(
            "{} posterior rows for {} tokens",
            h.beta_rows.len(),
            h.tokens.len()
        )));
    }
    let k = h.beta_rows.first().map(|r| r.len()).unwrap_or(0);
    if k == 0 || h.beta_rows.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidArgument("posterior rows must share one nonzero width".into()));
    }
    Ok(k)
}

/// Per-utterance, per-profile window scores: sums of log posteriors over
/// each utterance's positions (markers included). `[M][K]`.
fn window_scores(h: &Hypothesis, vocab: &Vocabulary, k: usize) -> Vec<Vec<f64>> {
    utterance_windows(&h.tokens, vocab)
        .into_iter()
        .map(|w| {
            (0..k)
                .map(|s| w.clone().map(|n| h.beta_rows[n][s].ln()).sum())
                .collect()
        })
        .collect()
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Independent per-utterance choice: the profile with the highest average
/// log posterior over the utterance's window (equivalently the highest
/// sum). Duplicate consecutive speakers are allowed.
pub fn assign_speakers_argmax(h: &Hypothesis, vocab: &Vocabulary) -> Result<SpeakerAssignment> {
    let k = check_assignable(h, vocab)?;
    let scores = window_scores(h, vocab, k);
    let speakers: Vec<usize> = scores.iter().map(|row| argmax_lowest(row)).collect();
    let log_score = scores.iter().zip(&speakers).map(|(row, &s)| row[s]).sum();
    Ok(SpeakerAssignment { speakers, log_score })
}

/// Globally optimal assignment under the constraint that consecutive
/// utterances get different speakers, by dynamic programming over
/// (utterance, profile) in O(M K^2). Ties prefer lower profile indices.
pub fn assign_speakers_dedup(h: &Hypothesis, vocab: &Vocabulary) -> Result<SpeakerAssignment> {
    let k = check_assignable(h, vocab)?;
    let scores = window_scores(h, vocab, k);
    let m = scores.len();
    if m >= 2 && k == 1 {
        return Err(Error::InfeasibleAssignment(format!(
            "{m} consecutive utterances cannot alternate over a single profile"
        )));
    }
    // dp[u][s]: best total for utterances 0..=u with utterance u on s.
    let mut dp = vec![vec![0.0f64; k]; m];
    let mut back = vec![vec![0usize; k]; m];
    dp[0].clone_from_slice(&scores[0]);
    for u in 1..m {
        for s in 0..k {
            let mut best_prev = usize::MAX;
            for p in 0..k {
                if p == s {
                    continue;
                }
                if best_prev == usize::MAX || dp[u - 1][p] > dp[u - 1][best_prev] {
                    best_prev = p;
                }
            }
            dp[u][s] = scores[u][s] + dp[u - 1][best_prev];
            back[u][s] = best_prev;
        }
    }
    let mut s = argmax_lowest(&dp[m - 1]);
    let log_score = dp[m - 1][s];
    let mut speakers = vec![0usize; m];
    for u in (0..m).rev() {
        speakers[u] = s;
        if u > 0 {
            s = back[u][s];
        }
    }
    Ok(SpeakerAssignment { speakers, log_score })
}

/// Reference assigner: enumerates every speaker sequence satisfying the
/// adjacency constraint and keeps the best. Exponential in the utterance
/// count — exists to cross-check the dynamic program, including from the
/// command-line self-test.
pub fn assign_speakers_exhaustive(h: &Hypothesis, vocab: &Vocabulary) -> Result<SpeakerAssignment> {
    let k = check_assignable(h, vocab)?;
    let scores = window_scores(h, vocab, k);
    let m = scores.len();
    if m >= 2 && k == 1 {
        return Err(Error::InfeasibleAssignment(format!(
            "{m} consecutive utterances cannot alternate over a single profile"
        )));
    }
    let mut best: Option<SpeakerAssignment> = None;
    let mut current = vec![0usize; m];
    // Odometer over K^M in lexicographic order; strict improvement keeps
    // the lexicographically smallest optimum.
    loop {
        if current.windows(2).all(|w| w[0] != w[1]) {
            let score: f64 = current.iter().enumerate().map(|(u, &s)| scores[u][s]).sum();
            if best.as_ref().is_none_or(|b| score > b.log_score) {
                best = Some(SpeakerAssignment { speakers: current.clone(), log_score: score });
            }
        }
        let mut pos = m;
        while pos > 0 {
            pos -= 1;
            current[pos] += 1;
            if current[pos] < k {
                break;
            }
            current[pos] = 0;
            if pos == 0 {
                return Ok(best.expect("at least one valid sequence exists"));
            }
        }
    }
}

/// A finished decode of one input: the speaker-attributed transcript, the
/// assignment that produced it, the per-token posteriors, and both speaker
/// counts.
#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub transcript: SotTranscript,
    pub assignment: SpeakerAssignment,
    /// `[n][K]` profile posteriors, one row per transcript token.
    pub beta: Vec<Vec<f64>>,
    /// Utterance count (speaker-change markers plus one).
    pub segments: usize,
    /// Number of distinct assigned profiles.
    pub distinct_speakers: usize,
}

/// Combines a terminated hypothesis with a speaker assignment, expanding
/// per-utterance speakers to per-token labels.
pub fn decode_result(
    h: &Hypothesis,
    assignment: SpeakerAssignment,
    vocab: &Vocabulary,
) -> Result<DecodeResult> {
    check_assignable(h, vocab)?;
    let windows = utterance_windows(&h.tokens, vocab);
    if windows.len() != assignment.speakers.len() {
        return Err(Error::InvalidArgument(format!(
            "{} speakers assigned to {} utterances",
            assignment.speakers.len(),
            windows.len()
        )));
    }
    let mut speakers = vec![0usize; h.tokens.len()];
    for (w, &s) in windows.iter().zip(&assignment.speakers) {
        for n in w.clone() {
            speakers[n] = s;
        }
    }
    let transcript = SotTranscript { tokens: h.tokens.clone(), speakers };
    transcript.validate(vocab)?;
    let (segments, distinct) = count_speakers_of(&transcript, &assignment, vocab);
    Ok(DecodeResult {
        transcript,
        assignment,
        beta: h.beta_rows.clone(),
        segments,
        distinct_speakers: distinct,
    })
}

fn count_speakers_of(
    transcript: &SotTranscript,
    assignment: &SpeakerAssignment,
    vocab: &Vocabulary,
) -> (usize, usize) {
    let segments = transcript.utterance_count(vocab);
    let mut ids: Vec<usize> = assignment.speakers.clone();
    ids.sort_unstable();
    ids.dedup();
    (segments, ids.len())
}

/// Both speaker-count readings of a decode: serialized segments and
/// distinct assigned profiles.
pub fn count_speakers(r: &DecodeResult) -> (usize, usize) {
    (r.segments, r.distinct_speakers)
}
