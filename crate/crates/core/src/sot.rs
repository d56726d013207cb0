//! Serialized transcripts for multi-talker audio.
//!
//! A mixture's utterances are flattened into one token stream in
//! first-in-first-out order of their start frames. Utterances are separated
//! by a speaker-change marker and the stream ends with a single
//! end-of-stream marker; each marker carries the speaker label of the
//! utterance it terminates, so the speaker sequence has exactly the same
//! length as the token sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token inventory: ids `0..size-2` are content tokens, `size-2` is the
/// speaker-change marker and `size-1` is the end-of-stream marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
}

impl Vocabulary {
    /// Needs room for at least one content token plus the two markers.
    pub fn new(size: usize) -> Result<Self> {
        if size < 3 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary size {size} leaves no room for content tokens"
            )));
        }
        Ok(Vocabulary { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Speaker-change marker id.
    pub fn sc(&self) -> usize {
        self.size - 2
    }

    /// End-of-stream marker id.
    pub fn eos(&self) -> usize {
        self.size - 1
    }

    pub fn content_count(&self) -> usize {
        self.size - 2
    }

    pub fn is_content(&self, token: usize) -> bool {
        token < self.content_count()
    }
}

/// One speaker's contiguous contribution to a mixture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    /// Content token ids (no markers).
    pub tokens: Vec<usize>,
    /// Index into the sample's speaker profile set.
    pub speaker_id: usize,
    /// Offset of the utterance's first frame within the mixture.
    pub start_frame: usize,
}

/// Flattened multi-talker transcript: `tokens` and `speakers` always have
/// equal length, `tokens` ends with the single end-of-stream marker, and
/// speaker-change markers never start the stream, never repeat, and never
/// directly precede end-of-stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SotTranscript {
    pub tokens: Vec<usize>,
    pub speakers: Vec<usize>,
}

impl SotTranscript {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of utterances implied by the markers (speaker changes + 1).
    pub fn utterance_count(&self, vocab: &Vocabulary) -> usize {
        self.tokens.iter().filter(|&&t| t == vocab.sc()).count() + 1
    }

    /// Checks the structural invariants listed on the type.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::TranscriptFormat("empty token stream".into()));
        }
        if self.speakers.len() != self.tokens.len() {
            return Err(Error::TranscriptFormat(format!(
                "{} speaker labels for {} tokens",
                self.speakers.len(),
                self.tokens.len()
            )));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t >= vocab.size()) {
            return Err(Error::TranscriptFormat(format!(
                "token {bad} outside vocabulary of size {}",
                vocab.size()
            )));
        }
        let eos_positions: Vec<usize> = self
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == vocab.eos())
            .map(|(i, _)| i)
            .collect();
        if eos_positions != [self.tokens.len() - 1] {
            return Err(Error::TranscriptFormat(
                "stream must contain exactly one end marker, at the final position".into(),
            ));
        }
        for (i, &t) in self.tokens.iter().enumerate() {
            if t != vocab.sc() {
                continue;
            }
            if i == 0 {
                return Err(Error::TranscriptFormat("speaker change at stream start".into()));
            }
            if self.tokens[i - 1] == vocab.sc() {
                return Err(Error::TranscriptFormat("adjacent speaker changes".into()));
            }
            if self.tokens[i + 1] == vocab.eos() {
                return Err(Error::TranscriptFormat(
                    "speaker change directly before end marker".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Flattens utterances into one marker-separated stream. Utterances are
/// ordered by start frame, ties broken by speaker id; ordering and labeling
/// are deterministic. Every utterance must be non-empty and contain only
/// content tokens.
pub fn serialize(utterances: &[Utterance], vocab: &Vocabulary) -> Result<SotTranscript> {
    if utterances.is_empty() {
        return Err(Error::InvalidArgument("no utterances to serialize".into()));
    }
    for (i, u) in utterances.iter().enumerate() {
        if u.tokens.is_empty() {
            return Err(Error::InvalidArgument(format!("utterance {i} is empty")));
        }
        if let Some(&bad) = u.tokens.iter().find(|&&t| !vocab.is_content(t)) {
            return Err(Error::InvalidArgument(format!(
                "utterance {i} contains non-content token {bad}"
            )));
        }
    }
    let mut order: Vec<&Utterance> = utterances.iter().collect();
    order.sort_by_key(|u| (u.start_frame, u.speaker_id));
    let mut tokens = Vec::new();
    let mut speakers = Vec::new();
    for (i, u) in order.iter().enumerate() {
        tokens.extend_from_slice(&u.tokens);
        speakers.extend(std::iter::repeat(u.speaker_id).take(u.tokens.len()));
        // The terminating marker carries this utterance's speaker.
        tokens.push(if i + 1 == order.len() { vocab.eos() } else { vocab.sc() });
        speakers.push(u.speaker_id);
    }
    Ok(SotTranscript { tokens, speakers })
}

/// Splits a serialized stream back into `(tokens, speaker)` pairs, taking
/// each utterance's speaker from the label on its terminating marker.
pub fn deserialize(
    transcript: &SotTranscript,
    vocab: &Vocabulary,
) -> Result<Vec<(Vec<usize>, usize)>> {
    transcript.validate(vocab)?;
    let mut out = Vec::new();
    let mut current = Vec::new();
    for (i, &t) in transcript.tokens.iter().enumerate() {
        if t == vocab.sc() || t == vocab.eos() {
            if current.is_empty() {
                // Unreachable after validate(), except for a bare end marker.
                return Err(Error::TranscriptFormat(format!("empty utterance at token {i}")));
            }
            out.push((std::mem::take(&mut current), transcript.speakers[i]));
        } else {
            current.push(t);
        }
    }
    Ok(out)
}
