//! WAV ingestion, magnitude-based silence trimming, and a codec hook.
//!
//! Trimming frames the signal on a hop grid, measures per-frame RMS in
//! dBFS, and keeps the union of the active frames' sample ranges. Because
//! concatenation can create new frame windows that straddle two kept
//! regions, one pass is not always a fixed point; the pass is repeated
//! until nothing changes, which makes trim_silence exactly idempotent.
//!
//! Codec augmentation shells out to a user-configured command template
//! instead of embedding an encoder.

use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};

use thiserror::Error;

/// Mono audio in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VadConfig {
    pub frame_ms: u32,
    pub hop_ms: u32,
    /// frames with RMS below this (dBFS) are treated as silence
    pub threshold_db: f64,
    /// active runs shorter than this many frames are discarded
    pub min_active_frames: usize,
}

impl Default for VadConfig {
    fn default() -> Self {
        VadConfig {
            frame_ms: 25,
            hop_ms: 10,
            threshold_db: -40.0,
            min_active_frames: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("not a RIFF/WAVE file")]
    NotWave,
    #[error("malformed wav: {0}")]
    Malformed(String),
    #[error("unsupported wav encoding: format tag {format}, {bits} bits per sample")]
    Unsupported { format: u16, bits: u16 },
    #[error("data chunk truncated: header declares {expected} bytes, {actual} available")]
    TruncatedData { expected: usize, actual: usize },
    #[error("empty waveform")]
    EmptyWaveform,
    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),
    #[error("vad config: hop_ms {hop_ms} must be positive and at most frame_ms {frame_ms}")]
    BadVadConfig { frame_ms: u32, hop_ms: u32 },
    #[error("codec command exited with {status}: {stderr}")]
    CodecFailed { status: String, stderr: String },
    #[error("codec command {command:?} could not run: {cause}")]
    CodecSpawn { command: String, cause: String },
    #[error("codec template must contain {{in}} and {{out}} placeholders")]
    BadCodecTemplate,
}

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Parse RIFF/WAVE bytes: PCM 16-bit or IEEE float 32-bit, first channel.
pub fn read_wav(bytes: &[u8]) -> Result<Waveform, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::NotWave);
    }
    let mut at = 12;
    let mut format: Option<(u16, u16, u16, u32)> = None; // tag, channels, bits, rate
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = le_u32(&bytes[at + 4..at + 8]) as usize;
        let body_start = at + 8;
        if id == b"fmt " {
            if size < 16 || body_start + 16 > bytes.len() {
                return Err(AudioError::Malformed("fmt chunk too short".into()));
            }
            let body = &bytes[body_start..];
            format = Some((
                le_u16(&body[0..2]),
                le_u16(&body[2..4]),
                le_u16(&body[14..16]),
                le_u32(&body[4..8]),
            ));
        } else if id == b"data" {
            let (tag, channels, bits, rate) =
                format.ok_or_else(|| AudioError::Malformed("data chunk before fmt".into()))?;
            if channels == 0 || rate == 0 {
                return Err(AudioError::Malformed("zero channels or sample rate".into()));
            }
            let available = bytes.len().saturating_sub(body_start);
            if available < size {
                return Err(AudioError::TruncatedData { expected: size, actual: available });
            }
            let data = &bytes[body_start..body_start + size];
            let samples = decode_samples(tag, bits, channels, data)?;
            return Ok(Waveform { samples, sample_rate: rate });
        }
        // skip unknown chunks, honoring RIFF's even-byte padding
        at = body_start + size + (size & 1);
    }
    Err(AudioError::Malformed("no data chunk".into()))
}

fn decode_samples(tag: u16, bits: u16, channels: u16, data: &[u8]) -> Result<Vec<f64>, AudioError> {
    let bytes_per = (bits / 8) as usize;
    let block = bytes_per * channels as usize;
    match (tag, bits) {
        (1, 16) => Ok(data
            .chunks_exact(block)
            .map(|frame| i16::from_le_bytes([frame[0], frame[1]]) as f64 / 32768.0)
            .collect()),
        (3, 32) => data
            .chunks_exact(block)
            .enumerate()
            .map(|(i, frame)| {
                let v = f32::from_bits(le_u32(&frame[0..4])) as f64;
                if v.is_finite() {
                    Ok(v.clamp(-1.0, 1.0))
                } else {
                    Err(AudioError::NonFiniteSample(i))
                }
            })
            .collect(),
        _ => Err(AudioError::Unsupported { format: tag, bits }),
    }
}

/// Encode as mono 16-bit PCM.
pub fn write_wav(w: &Waveform) -> Vec<u8> {
    let data_len = w.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &w.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

/// Result of silence trimming.
#[derive(Debug, Clone, PartialEq)]
pub struct TrimOutcome {
    pub waveform: Waveform,
    /// nothing exceeded the threshold; rejection is the caller's policy
    pub all_silent: bool,
}

fn frame_rms_db(samples: &[f64]) -> f64 {
    let mean_sq = samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64;
    10.0 * mean_sq.log10()
}

/// One detection-and-keep pass; `None` means nothing was removed.
fn trim_pass(samples: &[f64], frame_len: usize, hop_len: usize, cfg: &VadConfig) -> Option<Vec<f64>> {
    let n = samples.len();
    let n_frames = n.div_ceil(hop_len);
    let mut active: Vec<bool> = (0..n_frames)
        .map(|i| {
            let start = i * hop_len;
            let end = (start + frame_len).min(n);
            frame_rms_db(&samples[start..end]) >= cfg.threshold_db
        })
        .collect();

    // drop active runs shorter than the configured minimum
    if cfg.min_active_frames > 1 {
        let mut i = 0;
        while i < n_frames {
            if active[i] {
                let mut j = i;
                while j < n_frames && active[j] {
                    j += 1;
                }
                if j - i < cfg.min_active_frames {
                    active[i..j].fill(false);
                }
                i = j;
            } else {
                i += 1;
            }
        }
    }

    let mut keep = vec![false; n];
    for (i, &on) in active.iter().enumerate() {
        if on {
            let start = i * hop_len;
            let end = (start + frame_len).min(n);
            keep[start..end].fill(true);
        }
    }
    if keep.iter().all(|&k| k) {
        return None;
    }
    Some(
        samples
            .iter()
            .zip(&keep)
            .filter_map(|(&s, &k)| k.then_some(s))
            .collect(),
    )
}

/// Drop frames whose RMS falls below the threshold, keeping the union of
/// the remaining frames' sample ranges. The pass repeats until the output
/// stops changing, so trimming an already-trimmed waveform is a no-op.
pub fn trim_silence(w: &Waveform, cfg: &VadConfig) -> Result<TrimOutcome, AudioError> {
    if w.samples.is_empty() {
        return Err(AudioError::EmptyWaveform);
    }
    if let Some(i) = w.samples.iter().position(|s| !s.is_finite()) {
        return Err(AudioError::NonFiniteSample(i));
    }
    if cfg.hop_ms == 0 || cfg.hop_ms > cfg.frame_ms {
        return Err(AudioError::BadVadConfig {
            frame_ms: cfg.frame_ms,
            hop_ms: cfg.hop_ms,
        });
    }
    let frame_len = ((w.sample_rate as usize * cfg.frame_ms as usize) / 1000).max(1);
    let hop_len = ((w.sample_rate as usize * cfg.hop_ms as usize) / 1000).max(1);

    let mut samples = w.samples.clone();
    while !samples.is_empty() {
        match trim_pass(&samples, frame_len, hop_len, cfg) {
            None => break,
            Some(next) => samples = next,
        }
    }
    let all_silent = samples.is_empty();
    Ok(TrimOutcome {
        waveform: Waveform { samples, sample_rate: w.sample_rate },
        all_silent,
    })
}

/// External encode-then-decode command, e.g.
/// `"ffmpeg -i {in} -b:a {bitrate} {out}"`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecHook {
    pub command_template: String,
}

/// What ran, for the run manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecLog {
    pub command: String,
}

/// Run the configured codec round trip; `out_path` must be a WAV the
/// command produces.
pub fn augment_codec(
    hook: &CodecHook,
    in_path: &Path,
    out_path: &Path,
    bitrate: &str,
) -> Result<CodecLog, AudioError> {
    let t = &hook.command_template;
    if !t.contains("{in}") || !t.contains("{out}") {
        return Err(AudioError::BadCodecTemplate);
    }
    let command = t
        .replace("{in}", &in_path.display().to_string())
        .replace("{out}", &out_path.display().to_string())
        .replace("{bitrate}", bitrate);
    let output = Command::new("sh")
        .arg("-c")
        .arg(&command)
        .output()
        .map_err(|e| AudioError::CodecSpawn { command: command.clone(), cause: e.to_string() })?;
    if !output.status.success() {
        return Err(AudioError::CodecFailed {
            status: output.status.to_string(),
            stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
        });
    }
    Ok(CodecLog { command })
}
