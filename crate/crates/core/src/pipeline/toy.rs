//! Synthetic corpus generator. Each character of a small invented word list
//! is rendered as a pure tone, so the mapping from audio to text is learnable
//! by a tiny model in seconds, while speaker colouring, additive noise, and
//! speed perturbation give the conversational side a real domain shift.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, Wave};
use crate::corpus::{Domain, Manifest, Role, Utterance};

use super::PipelineError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCorpusSpec {
    pub words: Vec<String>,
    pub read_utts: usize,
    pub transcribed_cs_utts: usize,
    pub untranscribed_cs_utts: usize,
    pub test_utts: usize,
    pub read_speakers: usize,
    pub cs_speakers: usize,
    /// Speakers for the test set, disjoint from the training speakers.
    pub test_speakers: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Signal-to-noise ratio of the conversational recordings.
    pub snr_db: f64,
    /// Conversational speed perturbation range.
    pub speed_min: f64,
    pub speed_max: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            words: ["ba", "de", "gi", "ko", "lu", "me", "ni", "po"]
                .iter()
                .map(|s| (*s).to_string())
                .collect(),
            read_utts: 150,
            transcribed_cs_utts: 120,
            untranscribed_cs_utts: 200,
            test_utts: 40,
            read_speakers: 6,
            cs_speakers: 8,
            test_speakers: 4,
            min_words: 2,
            max_words: 5,
            snr_db: 8.0,
            speed_min: 0.92,
            speed_max: 1.08,
            sample_rate: 8000,
            seed: 1234,
        }
    }
}

impl ToyCorpusSpec {
    fn validate(&self) -> Result<(), PipelineError> {
        if self.words.is_empty() {
            return Err(PipelineError::Config("word list is empty".to_string()));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(PipelineError::Config(format!(
                "bad word-count range {}..={}",
                self.min_words, self.max_words
            )));
        }
        if self.read_speakers == 0 || self.cs_speakers == 0 || self.test_speakers == 0 {
            return Err(PipelineError::Config(
                "speaker counts must be positive".to_string(),
            ));
        }
        if !(0.5..=2.0).contains(&self.speed_min)
            || !(0.5..=2.0).contains(&self.speed_max)
            || self.speed_min > self.speed_max
        {
            return Err(PipelineError::Config(format!(
                "bad speed range {}..{}",
                self.speed_min, self.speed_max
            )));
        }
        let freqs = char_frequencies(&self.words);
        let top = freqs.values().fold(0.0f64, |a, &b| a.max(b));
        if top * 1.01 * self.speed_max >= 0.45 * self.sample_rate as f64 {
            return Err(PipelineError::Config(format!(
                "character tone {top:.0} Hz too close to Nyquist at {} Hz; \
                 raise sample_rate or shrink the word list",
                self.sample_rate
            )));
        }
        Ok(())
    }
}

/// One tone per distinct character. The ladder is uniform on the mel scale,
/// not in Hz: a linear-Hz ladder crowds its upper rungs into neighboring mel
/// bins and those characters end up systematically confusable.
fn char_frequencies(words: &[String]) -> BTreeMap<char, f64> {
    let mut chars: Vec<char> = words.iter().flat_map(|w| w.chars()).collect();
    chars.sort_unstable();
    chars.dedup();
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let (lo, hi) = (mel(350.0), mel(3100.0));
    let n = chars.len().max(2) as f64;
    chars
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c, hz(lo + (hi - lo) * i as f64 / (n - 1.0))))
        .collect()
}

#[derive(Clone, Copy)]
struct Voice {
    freq_mult: f64,
    amplitude: f64,
}

const CHAR_S: f64 = 0.12;
const GAP_S: f64 = 0.09;
const PAD_S: f64 = 0.05;
// Word boundaries are marked by a low tone below the character ladder rather
// than by silence: a positive spectral cue survives noise, masking, and the
// analysis-window smear, while a short silence is routinely wiped out by all
// three, which makes word segmentation a coin flip instead of a skill.
const GAP_HZ: f64 = 170.0;

fn render(
    text: &str,
    freqs: &BTreeMap<char, f64>,
    voice: Voice,
    speed: f64,
    sr: u32,
) -> Vec<f64> {
    let sr_f = sr as f64;
    let char_len = ((CHAR_S / speed) * sr_f).round() as usize;
    let gap_len = ((GAP_S / speed) * sr_f).round() as usize;
    let pad_len = (PAD_S * sr_f).round() as usize;
    let mut samples = vec![0.0f64; pad_len];
    let mut tone = |samples: &mut Vec<f64>, f: f64, n: usize, amp: f64| {
        let n = n.max(2);
        for k in 0..n {
            let t = k as f64 / sr_f;
            let env = (std::f64::consts::PI * k as f64 / (n - 1) as f64).sin();
            samples.push(amp * env * (2.0 * std::f64::consts::PI * f * t).sin());
        }
    };
    let mut first_word = true;
    for word in text.split_whitespace() {
        if !first_word {
            tone(
                &mut samples,
                GAP_HZ * voice.freq_mult * speed,
                gap_len,
                voice.amplitude * 0.7,
            );
        }
        first_word = false;
        for ch in word.chars() {
            tone(
                &mut samples,
                freqs[&ch] * voice.freq_mult * speed,
                char_len,
                voice.amplitude,
            );
        }
    }
    samples.extend(std::iter::repeat(0.0).take(pad_len));
    samples
}

fn add_noise(samples: &mut [f64], snr_db: f64, rng: &mut ChaCha20Rng) {
    let power: f64 =
        samples.iter().map(|s| s * s).sum::<f64>() / samples.len().max(1) as f64;
    if power == 0.0 {
        return;
    }
    let noise_power = power / 10f64.powf(snr_db / 10.0);
    // Uniform white noise over [-a, a] has power a^2 / 3.
    let a = (3.0 * noise_power).sqrt();
    for s in samples.iter_mut() {
        *s += rng.gen_range(-a..a);
    }
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.9 {
        let scale = 0.9 / peak;
        for s in samples.iter_mut() {
            *s *= scale;
        }
    }
}

fn sample_text(spec: &ToyCorpusSpec, rng: &mut ChaCha20Rng) -> String {
    let n = rng.gen_range(spec.min_words..=spec.max_words);
    (0..n)
        .map(|_| spec.words.choose(rng).unwrap().as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

fn make_voices(count: usize, rng: &mut ChaCha20Rng) -> Vec<Voice> {
    // Keep the per-voice pitch jitter well under the tone spacing: voices must
    // sound distinct without carrying any symbol information, or subsets drawn
    // by speaker would differ in difficulty from subsets drawn by utterance.
    (0..count)
        .map(|_| Voice {
            freq_mult: rng.gen_range(0.998..1.002),
            amplitude: rng.gen_range(0.28..0.32),
        })
        .collect()
}

/// Generate the corpus under `dir`: wav files, the four manifests, a sealed
/// answer key for the untranscribed pool, and the spec that produced it all.
/// Output is byte-identical for identical specs.
pub fn make_toy_corpus(dir: &Path, spec: &ToyCorpusSpec) -> Result<(), PipelineError> {
    spec.validate()?;
    let wav_dir = dir.join("wav");
    fs::create_dir_all(&wav_dir)?;
    let freqs = char_frequencies(&spec.words);
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);

    let read_voices = make_voices(spec.read_speakers, &mut rng);
    let cs_voices = make_voices(spec.cs_speakers, &mut rng);
    let test_voices = make_voices(spec.test_speakers, &mut rng);

    struct Block<'a> {
        prefix: &'a str,
        count: usize,
        speaker_prefix: &'a str,
        voices: &'a [Voice],
        domain: Domain,
        noisy: bool,
        keep_text: bool,
    }
    let blocks = [
        Block {
            prefix: "read",
            count: spec.read_utts,
            speaker_prefix: "r",
            voices: &read_voices,
            domain: Domain::Read,
            noisy: false,
            keep_text: true,
        },
        Block {
            prefix: "cs",
            count: spec.transcribed_cs_utts,
            speaker_prefix: "s",
            voices: &cs_voices,
            domain: Domain::Cs,
            noisy: true,
            keep_text: true,
        },
        Block {
            prefix: "un",
            count: spec.untranscribed_cs_utts,
            speaker_prefix: "s",
            voices: &cs_voices,
            domain: Domain::Cs,
            noisy: true,
            keep_text: false,
        },
        Block {
            prefix: "test",
            count: spec.test_utts,
            speaker_prefix: "t",
            voices: &test_voices,
            domain: Domain::Cs,
            noisy: true,
            keep_text: true,
        },
    ];

    let mut manifests: BTreeMap<&str, Manifest> = BTreeMap::new();
    let mut answers: Vec<(String, String)> = Vec::new();
    for block in &blocks {
        let mut manifest = Manifest::new(match (block.prefix, block.keep_text) {
            ("read", _) => Role::Read,
            (_, true) => Role::TranscribedCs,
            (_, false) => Role::UntranscribedCs,
        });
        for i in 0..block.count {
            let text = sample_text(spec, &mut rng);
            let spk_idx = rng.gen_range(0..block.voices.len());
            let speed = if block.noisy {
                rng.gen_range(spec.speed_min..=spec.speed_max)
            } else {
                1.0
            };
            let mut samples = render(&text, &freqs, block.voices[spk_idx], speed, spec.sample_rate);
            if block.noisy {
                add_noise(&mut samples, spec.snr_db, &mut rng);
            }
            let utt_id = format!("{}_{i:03}", block.prefix);
            let file = format!("wav/{utt_id}.wav");
            write_wav(
                &dir.join(&file),
                &Wave {
                    sample_rate: spec.sample_rate,
                    samples: samples.clone(),
                },
            )
            .map_err(|e| PipelineError::Config(format!("{utt_id}: {e}")))?;
            if block.prefix == "un" {
                answers.push((utt_id.clone(), text.clone()));
            }
            manifest.utterances.push(Utterance {
                utt_id,
                audio: file,
                duration_s: samples.len() as f64 / spec.sample_rate as f64,
                speaker: format!("{}{spk_idx:02}", block.speaker_prefix),
                domain: block.domain,
                text: block.keep_text.then_some(text),
                sample_rate: spec.sample_rate,
                weight: 1.0,
            });
        }
        manifests.insert(block.prefix, manifest);
    }

    manifests["read"]
        .write(&dir.join("read.jsonl"))
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    manifests["cs"]
        .write(&dir.join("transcribed_cs.jsonl"))
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    manifests["un"]
        .write(&dir.join("untranscribed_cs.jsonl"))
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    manifests["test"]
        .write(&dir.join("test.jsonl"))
        .map_err(|e| PipelineError::Config(e.to_string()))?;

    let mut key = fs::File::create(dir.join("untranscribed_answers.tsv"))?;
    writeln!(key, "utt_id\ttext")?;
    for (id, text) in &answers {
        writeln!(key, "{id}\t{text}")?;
    }
    key.flush()?;
    fs::write(
        dir.join("spec.json"),
        serde_json::to_string_pretty(spec).expect("spec serializes"),
    )?;
    Ok(())
}
