//! Evaluation measures for speaker-attributed transcription.
//!
//! Everything reduces to token edit distances combined in different ways:
//! plain WER on one pair of sequences; a speaker-agnostic multi-talker WER
//! that matches hypothesis utterances to reference utterances by minimum
//! total edit distance; SER, which reuses that matching and counts speaker
//! disagreements; SA-WER, which concatenates each speaker's words and holds
//! the hypothesis accountable for attribution (a word on the wrong speaker
//! costs a deletion plus an insertion); cpWER, the same matching idea over
//! per-speaker streams; and the speaker-counting confusion matrix.

pub mod assignment;

use serde::Serialize;

use crate::error::{Error, Result};

/// Counts from one minimal alignment of a hypothesis to a reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AlignmentResult {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_length: usize,
}

impl AlignmentResult {
    /// Total error count S + D + I.
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Error rate relative to the reference length; may exceed 1.
    pub fn rate(&self) -> Result<f64> {
        if self.ref_length == 0 {
            return Err(Error::InvalidArgument(
                "error rate is undefined against an empty reference".into(),
            ));
        }
        Ok(self.errors() as f64 / self.ref_length as f64)
    }
}

/// Unit-cost Levenshtein alignment with error-type counts. Among equal-cost
/// alignments the backtrace prefers match/substitution, then deletion, then
/// insertion, so the counts are deterministic.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> AlignmentResult {
    let (r, h) = (reference.len(), hypothesis.len());
    let mut d = vec![0usize; (r + 1) * (h + 1)];
    let idx = |i: usize, j: usize| i * (h + 1) + j;
    for i in 0..=r {
        d[idx(i, 0)] = i;
    }
    for j in 0..=h {
        d[idx(0, j)] = j;
    }
    for i in 1..=r {
        for j in 1..=h {
            let sub = d[idx(i - 1, j - 1)] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[idx(i - 1, j)] + 1;
            let ins = d[idx(i, j - 1)] + 1;
            d[idx(i, j)] = sub.min(del).min(ins);
        }
    }
    let (mut i, mut j) = (r, h);
    let mut out = AlignmentResult { substitutions: 0, deletions: 0, insertions: 0, ref_length: r };
    while i > 0 || j > 0 {
        let cur = d[idx(i, j)];
        if i > 0 && j > 0 {
            let was_sub = reference[i - 1] != hypothesis[j - 1];
            if d[idx(i - 1, j - 1)] + usize::from(was_sub) == cur {
                out.substitutions += usize::from(was_sub);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[idx(i - 1, j)] + 1 == cur {
            out.deletions += 1;
            i -= 1;
        } else {
            out.insertions += 1;
            j -= 1;
        }
    }
    out
}

/// Unit-cost edit rate; errors on an empty reference.
pub fn wer_rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    wer(reference, hypothesis).rate()
}

/// Alignment where substituting is not allowed (equivalently costs 2):
/// every reference token absent from the longest common subsequence is a
/// deletion and every such hypothesis token an insertion. This is the inner
/// distance of SA-WER, where a word attributed to the wrong speaker is both
/// missing and spurious.
pub fn two_way_alignment<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> AlignmentResult {
    let (r, h) = (reference.len(), hypothesis.len());
    let mut lcs = vec![0usize; (r + 1) * (h + 1)];
    let idx = |i: usize, j: usize| i * (h + 1) + j;
    for i in 1..=r {
        for j in 1..=h {
            lcs[idx(i, j)] = if reference[i - 1] == hypothesis[j - 1] {
                lcs[idx(i - 1, j - 1)] + 1
            } else {
                lcs[idx(i - 1, j)].max(lcs[idx(i, j - 1)])
            };
        }
    }
    let common = lcs[idx(r, h)];
    AlignmentResult {
        substitutions: 0,
        deletions: r - common,
        insertions: h - common,
        ref_length: r,
    }
}

/// Minimum-total-edit-distance matching between two utterance (or stream)
/// lists. The shorter side is padded with empty phantoms, so unmatched
/// references cost their full length in deletions and unmatched hypotheses
/// theirs in insertions. Returns the total distance and, for each real
/// reference index, the real hypothesis index it was paired with.
fn matched_distance<T: PartialEq>(
    refs: &[&[T]],
    hyps: &[&[T]],
) -> Result<(usize, Vec<Option<usize>>)> {
    let n = refs.len().max(hyps.len());
    if n == 0 {
        return Ok((0, Vec::new()));
    }
    let mut costs = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = match (refs.get(i), hyps.get(j)) {
                (Some(r), Some(h)) => wer(r, h).errors(),
                (Some(r), None) => r.len(),
                (None, Some(h)) => h.len(),
                (None, None) => 0,
            };
            costs[i * n + j] = d as f64;
        }
    }
    let (row_to_col, total) = assignment::solve(&costs, n)?;
    let pairing = (0..refs.len())
        .map(|i| Some(row_to_col[i]).filter(|&j| j < hyps.len()))
        .collect();
    Ok((total.round() as usize, pairing))
}

/// Speaker-agnostic multi-talker WER: hypothesis utterances are matched to
/// reference utterances to minimize total edit distance, then the total is
/// divided by the reference word count.
pub fn multi_speaker_wer<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::InvalidArgument(
            "multi-speaker WER needs at least one reference utterance".into(),
        ));
    }
    let ref_words: usize = refs.iter().map(|r| r.len()).sum();
    if ref_words == 0 {
        return Err(Error::InvalidArgument(
            "error rate is undefined against an empty reference".into(),
        ));
    }
    let r: Vec<&[T]> = refs.iter().map(|v| v.as_slice()).collect();
    let h: Vec<&[T]> = hyps.iter().map(|v| v.as_slice()).collect();
    let (total, _) = matched_distance(&r, &h)?;
    Ok(total as f64 / ref_words as f64)
}

/// Speaker error rate: utterances are paired by the same minimum-edit
/// matching as `multi_speaker_wer` (text only — attribution is judged given
/// the best textual pairing); the rate counts matched pairs whose speakers
/// disagree plus unmatched reference utterances, over reference utterances.
pub fn ser<T: PartialEq>(refs: &[(Vec<T>, usize)], hyps: &[(Vec<T>, usize)]) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::InvalidArgument("SER needs at least one reference utterance".into()));
    }
    let r: Vec<&[T]> = refs.iter().map(|(t, _)| t.as_slice()).collect();
    let h: Vec<&[T]> = hyps.iter().map(|(t, _)| t.as_slice()).collect();
    let (_, pairing) = matched_distance(&r, &h)?;
    let mut wrong = 0usize;
    for (i, pair) in pairing.iter().enumerate() {
        match pair {
            Some(j) => wrong += usize::from(refs[i].1 != hyps[*j].1),
            None => wrong += 1,
        }
    }
    Ok(wrong as f64 / refs.len() as f64)
}

/// Speaker-attributed WER. Reference utterances must arrive in start-time
/// order and hypothesis utterances in decode order; each speaker's
/// utterances are concatenated and aligned without substitutions, so a word
/// on the wrong speaker is punished on both sides. Hypothesis words for
/// speakers missing from the reference are pure insertions.
pub fn sa_wer<T: PartialEq + Clone>(
    refs: &[(Vec<T>, usize)],
    hyps: &[(Vec<T>, usize)],
) -> Result<f64> {
    let (errors, ref_words) = sa_wer_counts(refs, hyps)?;
    Ok(errors as f64 / ref_words as f64)
}

/// SA-WER numerator and denominator, for exact aggregation across samples.
pub fn sa_wer_counts<T: PartialEq + Clone>(
    refs: &[(Vec<T>, usize)],
    hyps: &[(Vec<T>, usize)],
) -> Result<(usize, usize)> {
    if refs.is_empty() {
        return Err(Error::InvalidArgument("SA-WER needs at least one reference utterance".into()));
    }
    let ref_words: usize = refs.iter().map(|(t, _)| t.len()).sum();
    if ref_words == 0 {
        return Err(Error::InvalidArgument(
            "error rate is undefined against an empty reference".into(),
        ));
    }
    let concat = |utts: &[(Vec<T>, usize)], speaker: usize| -> Vec<T> {
        utts.iter()
            .filter(|(_, s)| *s == speaker)
            .flat_map(|(t, _)| t.iter().cloned())
            .collect()
    };
    let mut ref_speakers: Vec<usize> = refs.iter().map(|(_, s)| *s).collect();
    ref_speakers.sort_unstable();
    ref_speakers.dedup();
    let mut errors = 0usize;
    for &s in &ref_speakers {
        errors += two_way_alignment(&concat(refs, s), &concat(hyps, s)).errors();
    }
    let mut hyp_speakers: Vec<usize> = hyps.iter().map(|(_, s)| *s).collect();
    hyp_speakers.sort_unstable();
    hyp_speakers.dedup();
    for s in hyp_speakers {
        if !ref_speakers.contains(&s) {
            errors += concat(hyps, s).len();
        }
    }
    Ok((errors, ref_words))
}

/// Concatenated minimum-permutation WER over per-speaker streams: the best
/// injective mapping of hypothesis streams onto reference streams (padding
/// the shorter side with empty streams), total edit distance over total
/// reference words.
pub fn cpwer<T: PartialEq>(ref_streams: &[Vec<T>], hyp_streams: &[Vec<T>]) -> Result<f64> {
    let (errors, ref_words) = cpwer_counts(ref_streams, hyp_streams)?;
    Ok(errors as f64 / ref_words as f64)
}

/// cpWER numerator and denominator, for exact aggregation across samples.
pub fn cpwer_counts<T: PartialEq>(
    ref_streams: &[Vec<T>],
    hyp_streams: &[Vec<T>],
) -> Result<(usize, usize)> {
    if ref_streams.is_empty() {
        return Err(Error::InvalidArgument("cpWER needs at least one reference stream".into()));
    }
    let ref_words: usize = ref_streams.iter().map(|r| r.len()).sum();
    if ref_words == 0 {
        return Err(Error::InvalidArgument(
            "error rate is undefined against an empty reference".into(),
        ));
    }
    let r: Vec<&[T]> = ref_streams.iter().map(|v| v.as_slice()).collect();
    let h: Vec<&[T]> = hyp_streams.iter().map(|v| v.as_slice()).collect();
    let (total, _) = matched_distance(&r, &h)?;
    Ok((total, ref_words))
}

/// Reference cpWER that enumerates every padded permutation instead of
/// solving the assignment problem. Exponential; exists to cross-check the
/// solver, including from the command-line self-test.
pub fn cpwer_brute_force<T: PartialEq>(
    ref_streams: &[Vec<T>],
    hyp_streams: &[Vec<T>],
) -> Result<f64> {
    if ref_streams.is_empty() {
        return Err(Error::InvalidArgument("cpWER needs at least one reference stream".into()));
    }
    let ref_words: usize = ref_streams.iter().map(|r| r.len()).sum();
    if ref_words == 0 {
        return Err(Error::InvalidArgument(
            "error rate is undefined against an empty reference".into(),
        ));
    }
    let n = ref_streams.len().max(hyp_streams.len());
    if n > 9 {
        return Err(Error::InvalidArgument(format!(
            "brute-force cpWER caps at 9 streams, got {n}"
        )));
    }
    let cost = |i: usize, j: usize| -> usize {
        match (ref_streams.get(i), hyp_streams.get(j)) {
            (Some(r), Some(h)) => wer(r, h).errors(),
            (Some(r), None) => r.len(),
            (None, Some(h)) => h.len(),
            (None, None) => 0,
        }
    };
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = usize::MAX;
    // Heap's algorithm over column permutations.
    fn visit(perm: &mut Vec<usize>, k: usize, best: &mut usize, cost: &dyn Fn(usize, usize) -> usize) {
        if k == 1 {
            let total: usize = perm.iter().enumerate().map(|(i, &j)| cost(i, j)).sum();
            *best = (*best).min(total);
            return;
        }
        for i in 0..k {
            visit(perm, k - 1, best, cost);
            if k % 2 == 0 {
                perm.swap(i, k - 1);
            } else {
                perm.swap(0, k - 1);
            }
        }
    }
    visit(&mut perm, n, &mut best, &cost);
    Ok(best as f64 / ref_words as f64)
}

/// Speaker-counting confusion over a dataset: rows are actual speaker
/// counts 1-3, columns are estimated counts 1, 2, 3, and >= 4.
#[derive(Debug, Clone, Default, Serialize)]
pub struct CountingMatrix {
    counts: [[usize; 4]; 3],
}

impl CountingMatrix {
    pub fn new() -> Self {
        CountingMatrix::default()
    }

    pub fn record(&mut self, actual: usize, estimated: usize) -> Result<()> {
        if !(1..=3).contains(&actual) {
            return Err(Error::InvalidArgument(format!(
                "actual speaker count {actual} outside the evaluated range 1-3"
            )));
        }
        if estimated == 0 {
            return Err(Error::InvalidArgument("estimated speaker count cannot be zero".into()));
        }
        self.counts[actual - 1][estimated.min(4) - 1] += 1;
        Ok(())
    }

    pub fn counts(&self) -> &[[usize; 4]; 3] {
        &self.counts
    }

    /// Samples recorded with the given actual count.
    pub fn row_total(&self, actual: usize) -> usize {
        self.counts[actual - 1].iter().sum()
    }

    /// Row-normalized percentages; rows with no samples are all zeros.
    pub fn percentages(&self) -> [[f64; 4]; 3] {
        let mut out = [[0.0; 4]; 3];
        for (row, out_row) in self.counts.iter().zip(out.iter_mut()) {
            let total: usize = row.iter().sum();
            if total > 0 {
                for (c, o) in row.iter().zip(out_row.iter_mut()) {
                    *o = 100.0 * *c as f64 / total as f64;
                }
            }
        }
        out
    }

    /// Fraction of samples with the given actual count whose estimate was
    /// exactly right; `None` if no such samples were recorded.
    pub fn accuracy(&self, actual: usize) -> Option<f64> {
        let total = self.row_total(actual);
        if total == 0 {
            return None;
        }
        Some(self.counts[actual - 1][actual - 1] as f64 / total as f64)
    }
}

/// Error accumulators for one condition (or the whole set): micro-averaged
/// rates fall out as error sums over reference sums.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct ConditionScores {
    pub samples: usize,
    pub ref_words: usize,
    pub ref_utterances: usize,
    pub wer_errors: usize,
    pub sa_wer_errors: usize,
    pub ser_errors: usize,
}

impl ConditionScores {
    pub fn wer(&self) -> Option<f64> {
        (self.ref_words > 0).then(|| self.wer_errors as f64 / self.ref_words as f64)
    }

    pub fn sa_wer(&self) -> Option<f64> {
        (self.ref_words > 0).then(|| self.sa_wer_errors as f64 / self.ref_words as f64)
    }

    pub fn ser(&self) -> Option<f64> {
        (self.ref_utterances > 0).then(|| self.ser_errors as f64 / self.ref_utterances as f64)
    }
}

/// Full evaluation over a dataset: per-condition and total SER / WER /
/// SA-WER plus the counting confusion matrix.
#[derive(Debug, Clone, Default, Serialize)]
pub struct EvalReport {
    /// Indexed by actual speaker count minus one.
    pub by_condition: [ConditionScores; 3],
    pub total: ConditionScores,
    pub counting: CountingMatrix,
}

impl EvalReport {
    pub fn new() -> Self {
        EvalReport::default()
    }

    /// Scores one sample. `refs` must be in start-time order with actual
    /// profile ids; `hyps` in decode order. The actual speaker count is the
    /// number of distinct reference speakers and must be 1-3.
    pub fn add_sample(
        &mut self,
        refs: &[(Vec<usize>, usize)],
        hyps: &[(Vec<usize>, usize)],
        estimated_speakers: usize,
    ) -> Result<()> {
        if refs.is_empty() {
            return Err(Error::InvalidArgument("cannot score an empty reference".into()));
        }
        let mut actual_set: Vec<usize> = refs.iter().map(|(_, s)| *s).collect();
        actual_set.sort_unstable();
        actual_set.dedup();
        let actual = actual_set.len();
        self.counting.record(actual, estimated_speakers)?;

        let ref_words: usize = refs.iter().map(|(t, _)| t.len()).sum();
        let r: Vec<&[usize]> = refs.iter().map(|(t, _)| t.as_slice()).collect();
        let h: Vec<&[usize]> = hyps.iter().map(|(t, _)| t.as_slice()).collect();
        let (wer_errors, pairing) = matched_distance(&r, &h)?;
        let mut ser_errors = 0usize;
        for (i, pair) in pairing.iter().enumerate() {
            match pair {
                Some(j) => ser_errors += usize::from(refs[i].1 != hyps[*j].1),
                None => ser_errors += 1,
            }
        }
        let (sa_errors, _) = sa_wer_counts(refs, hyps)?;

        for scores in [&mut self.by_condition[actual - 1], &mut self.total] {
            scores.samples += 1;
            scores.ref_words += ref_words;
            scores.ref_utterances += refs.len();
            scores.wer_errors += wer_errors;
            scores.sa_wer_errors += sa_errors;
            scores.ser_errors += ser_errors;
        }
        Ok(())
    }

    /// Plain-text table of all rates, percentages to two decimals.
    pub fn render_text(&self) -> String {
        fn pct(v: Option<f64>) -> String {
            match v {
                Some(v) => format!("{:8.2}", 100.0 * v),
                None => format!("{:>8}", "-"),
            }
        }
        let mut out = String::new();
        out.push_str("condition   samples      SER      WER   SA-WER\n");
        for (i, c) in self.by_condition.iter().enumerate() {
            out.push_str(&format!(
                "{}-speaker  {:8} {} {} {}\n",
                i + 1,
                c.samples,
                pct(c.ser()),
                pct(c.wer()),
                pct(c.sa_wer())
            ));
        }
        let t = &self.total;
        out.push_str(&format!(
            "total      {:8} {} {} {}\n\n",
            t.samples,
            pct(t.ser()),
            pct(t.wer()),
            pct(t.sa_wer())
        ));
        out.push_str("speaker counting (% of row)   est=1    est=2    est=3    est>=4\n");
        let pcts = self.counting.percentages();
        for (i, row) in pcts.iter().enumerate() {
            out.push_str(&format!(
                "actual={}                   {:8.2} {:8.2} {:8.2} {:8.2}\n",
                i + 1,
                row[0],
                row[1],
                row[2],
                row[3]
            ));
        }
        out
    }
}
