//! On-disk formats: JSON-lines datasets, the speaker inventory file, and
//! decode output records. Feature payloads are base64-encoded
//! little-endian 64-bit floats, so round-trips are bit-exact.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::decode::DecodeResult;
use crate::error::{Error, Result};
use crate::sot::{self, Utterance, Vocabulary};
use crate::synth::{MixtureSample, SpeakerInventory};
use crate::tensor::Tensor;

/// A tensor in transit: shape plus base64 of the little-endian f64 payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorBlob {
    pub shape: Vec<usize>,
    pub data: String,
}

impl TensorBlob {
    pub fn encode(t: &Tensor) -> Self {
        let mut bytes = Vec::with_capacity(8 * t.len());
        for &v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        TensorBlob { shape: t.shape().to_vec(), data: BASE64.encode(bytes) }
    }

    pub fn decode(&self) -> Result<Tensor> {
        let bytes = BASE64
            .decode(&self.data)
            .map_err(|e| Error::MalformedFile(format!("bad base64 payload: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::MalformedFile(format!(
                "payload of {} bytes is not a whole number of f64s",
                bytes.len()
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let expected: usize = self.shape.iter().product();
        if data.len() != expected {
            return Err(Error::MalformedFile(format!(
                "payload holds {} values but shape {:?} needs {expected}",
                data.len(),
                self.shape
            )));
        }
        Tensor::new(self.shape.clone(), data)
    }
}

/// One reference utterance as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceData {
    pub tokens: Vec<usize>,
    pub speaker_id: usize,
    pub start_frame: usize,
}

/// One dataset line. The transcript is stored as the utterance list; the
/// joined token/speaker sequence is rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub index: usize,
    pub features: TensorBlob,
    pub utterances: Vec<UtteranceData>,
    pub profiles: TensorBlob,
    pub true_speaker_ids: Vec<usize>,
}

impl SampleRecord {
    pub fn from_sample(index: usize, s: &MixtureSample) -> Self {
        SampleRecord {
            index,
            features: TensorBlob::encode(&s.features),
            utterances: s
                .utterances
                .iter()
                .map(|u| UtteranceData {
                    tokens: u.tokens.clone(),
                    speaker_id: u.speaker_id,
                    start_frame: u.start_frame,
                })
                .collect(),
            profiles: TensorBlob::encode(&s.profiles),
            true_speaker_ids: s.true_speaker_ids.clone(),
        }
    }

    /// Rebuilds the sample, validating the transcript against `vocab`.
    pub fn to_sample(&self, vocab: &Vocabulary) -> Result<MixtureSample> {
        let utterances: Vec<Utterance> = self
            .utterances
            .iter()
            .map(|u| Utterance {
                tokens: u.tokens.clone(),
                speaker_id: u.speaker_id,
                start_frame: u.start_frame,
            })
            .collect();
        let transcript = sot::serialize(&utterances, vocab)?;
        transcript.validate(vocab)?;
        let profiles = self.profiles.decode()?;
        if let Some(&bad) = transcript.speakers.iter().find(|&&s| s >= profiles.rows()) {
            return Err(Error::MalformedFile(format!(
                "speaker label {bad} outside the sample's profile set of {}",
                profiles.rows()
            )));
        }
        Ok(MixtureSample {
            features: self.features.decode()?,
            utterances,
            transcript,
            profiles,
            true_speaker_ids: self.true_speaker_ids.clone(),
        })
    }
}

/// The persisted inventory, with the seed that grew it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InventoryFile {
    pub seed: u64,
    pub content_tokens: usize,
    pub signatures: TensorBlob,
    pub emissions: TensorBlob,
}

impl InventoryFile {
    pub fn from_inventory(inv: &SpeakerInventory, seed: u64) -> Self {
        InventoryFile {
            seed,
            content_tokens: inv.content_tokens(),
            signatures: TensorBlob::encode(inv.signatures()),
            emissions: TensorBlob::encode(inv.emissions()),
        }
    }

    pub fn to_inventory(&self) -> Result<SpeakerInventory> {
        SpeakerInventory::from_parts(
            self.signatures.decode()?,
            self.emissions.decode()?,
            self.content_tokens,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(fs::File::open(path)?))?)
    }
}

/// One decoded utterance as written to disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub tokens: Vec<usize>,
    pub speaker_id: usize,
    /// Summed log profile posterior over the utterance's window.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerCountRecord {
    pub segments: usize,
    pub distinct: usize,
}

/// One decode output line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeRecord {
    pub index: usize,
    pub tokens: Vec<usize>,
    pub utterances: Vec<UtteranceRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_matrix: Option<Vec<Vec<f64>>>,
    pub speaker_count: SpeakerCountRecord,
}

impl DecodeRecord {
    pub fn from_result(
        index: usize,
        r: &DecodeResult,
        vocab: &Vocabulary,
        include_beta: bool,
    ) -> Self {
        let windows = crate::decode::utterance_windows(&r.transcript.tokens, vocab);
        let utterances = windows
            .iter()
            .zip(&r.assignment.speakers)
            .map(|(w, &speaker_id)| UtteranceRecord {
                tokens: r.transcript.tokens[w.clone()]
                    .iter()
                    .copied()
                    .filter(|&t| vocab.is_content(t))
                    .collect(),
                speaker_id,
                score: w.clone().map(|n| r.beta[n][speaker_id].ln()).sum(),
            })
            .collect();
        DecodeRecord {
            index,
            tokens: r.transcript.tokens.clone(),
            utterances,
            beta_matrix: include_beta.then(|| r.beta.clone()),
            speaker_count: SpeakerCountRecord {
                segments: r.segments,
                distinct: r.distinct_speakers,
            },
        }
    }
}

/// Writes one JSON value per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a JSON-lines file, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line).map_err(|e| {
            Error::MalformedFile(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(item);
    }
    Ok(out)
}
