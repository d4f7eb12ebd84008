use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::language::{self, generate_languages, PhonemeBank, ToyLanguage, ALPHABET, FRAME_DIM};
use crate::autodiff::rng::SeededRng;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// First header value of every feature file ("CPGF" read as a big-endian integer).
pub const FEATURE_MAGIC: f64 = 1_129_334_598.0;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const LANGUAGES_FILE: &str = "languages.tsv";
pub const BANK_FILE: &str = "phonemes.f64";
const MANIFEST_HEADER: &str = "id\tlanguage\tspeaker\ttext\tfeature_path\tsplit";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// One example with its frames loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub language: usize,
    pub speaker: usize,
    pub text: String,
    /// `[N, FRAME_DIM]`.
    pub frames: Tensor,
    pub split: Split,
}

impl Utterance {
    pub fn graphemes(&self) -> Vec<usize> {
        language::parse_text(&self.text).expect("corpus text uses the toy alphabet")
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.graphemes().into_iter().map(|g| g + 1).collect()
    }

    pub fn chars(&self) -> usize {
        self.text.chars().count()
    }

    /// Duration proxy: number of frames.
    pub fn duration(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn feature_path(&self) -> PathBuf {
        Path::new("features").join(format!("{}.f64", self.id))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub languages: usize,
    pub speakers_per_language: usize,
    pub train_per_language: usize,
    pub val_per_language: usize,
    pub test_per_language: usize,
    pub min_chars: usize,
    pub max_chars: usize,
    pub speaker_offset: f64,
    /// Standard deviation of the Gaussian noise added to every frame value.
    pub noise_std: f64,
    /// Fraction of examples given a run of spurious trailing silence.
    pub outlier_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            languages: 4,
            speakers_per_language: 2,
            train_per_language: 400,
            val_per_language: 16,
            test_per_language: 25,
            min_chars: 3,
            max_chars: 30,
            speaker_offset: 0.1,
            noise_std: 0.01,
            outlier_fraction: 0.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.languages == 0 || self.speakers_per_language == 0 {
            return Err(Error::Config("corpus needs at least one language and one speaker".into()));
        }
        if self.min_chars == 0 || self.min_chars > self.max_chars {
            return Err(Error::Config(format!(
                "invalid text length range [{}, {}]",
                self.min_chars, self.max_chars
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("noise_std {} must be finite and non-negative", self.noise_std)));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(Error::Config("outlier_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn num_speakers(&self) -> usize {
        self.languages * self.speakers_per_language
    }
}

/// A corpus in memory: languages, phoneme bank and utterances.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub languages: Vec<ToyLanguage>,
    pub bank: PhonemeBank,
    pub speakers: usize,
    pub utterances: Vec<Utterance>,
}

/// Expected frames for a grapheme sequence read in one language by one speaker.
pub fn render_frames(
    phonemes: &[usize],
    bank: &PhonemeBank,
    offset: &[f64],
    trailing_silence: usize,
) -> Tensor {
    let r = bank.frames_per_phoneme;
    let n = phonemes.len() * r + trailing_silence;
    let mut data = Vec::with_capacity(n * FRAME_DIM);
    let symbols = phonemes
        .iter()
        .flat_map(|&p| std::iter::repeat_n(p, r))
        .chain(std::iter::repeat_n(PhonemeBank::SILENCE, trailing_silence));
    for s in symbols {
        data.extend(bank.vector(s).iter().zip(offset).map(|(v, o)| v + o));
    }
    Tensor::new(vec![n, FRAME_DIM], data).expect("frame shape")
}

/// Per-speaker offsets: uniformly random directions scaled to `norm`.
pub fn speaker_offsets(count: usize, norm: f64, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..FRAME_DIM).map(|_| rng.normal()).collect();
            let len = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x * norm / len).collect()
        })
        .collect()
}

/// Generates the synthetic multilingual corpus. Everything depends on `seed` alone.
pub fn generate_toy_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = SeededRng::with_stream(seed, crate::autodiff::rng::streams::CORPUS);
    let languages = generate_languages(cfg.languages, &mut rng);
    let bank = PhonemeBank::generate(&mut rng);
    let offsets = speaker_offsets(cfg.num_speakers(), cfg.speaker_offset, &mut rng);
    let r = bank.frames_per_phoneme;
    let per_lang = cfg.train_per_language + cfg.val_per_language + cfg.test_per_language;
    let mut utterances = Vec::with_capacity(per_lang * cfg.languages);
    for lang in &languages {
        for i in 0..per_lang {
            let split = if i < cfg.train_per_language {
                Split::Train
            } else if i < cfg.train_per_language + cfg.val_per_language {
                Split::Val
            } else {
                Split::Test
            };
            let len = rng.inclusive(cfg.min_chars, cfg.max_chars);
            let graphemes: Vec<usize> = (0..len).map(|_| rng.below(ALPHABET)).collect();
            let speaker = lang.id * cfg.speakers_per_language + rng.below(cfg.speakers_per_language);
            let extra = if rng.uniform() < cfg.outlier_fraction {
                rng.inclusive(10, 30)
            } else {
                0
            };
            let mut frames = render_frames(&lang.pronounce(&graphemes), &bank, &offsets[speaker], r + extra);
            if cfg.noise_std > 0.0 {
                for v in frames.data_mut() {
                    *v += cfg.noise_std * rng.normal();
                }
            }
            utterances.push(Utterance {
                id: format!("{}_{:05}", lang.name, i),
                language: lang.id,
                speaker,
                text: graphemes.iter().map(|&g| language::grapheme_char(g)).collect(),
                frames,
                split,
            });
        }
    }
    Ok(Corpus {
        languages,
        bank,
        speakers: cfg.num_speakers(),
        utterances,
    })
}

impl Corpus {
    pub fn num_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.split == split).collect()
    }

    pub fn with_utterances(&self, utterances: Vec<Utterance>) -> Corpus {
        Corpus {
            languages: self.languages.clone(),
            bank: self.bank.clone(),
            speakers: self.speakers,
            utterances,
        }
    }

    /// Phoneme sequence a correct reading of `u` produces.
    pub fn reference_phonemes(&self, u: &Utterance) -> Vec<usize> {
        self.languages[u.language].pronounce(&u.graphemes())
    }

    /// Writes the manifest, one feature file per utterance, the language table and the bank.
    /// Returns every path written, relative to `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let features = dir.join("features");
        fs::create_dir_all(&features).map_err(|e| Error::file(&features, e))?;
        let mut written = Vec::new();
        let mut manifest = String::from(MANIFEST_HEADER);
        manifest.push('\n');
        for u in &self.utterances {
            let rel = u.feature_path();
            write_features(&dir.join(&rel), &u.frames)?;
            manifest.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                u.id,
                u.language,
                u.speaker,
                u.text,
                rel.display(),
                u.split
            ));
            written.push(rel);
        }
        write_text(&dir.join(MANIFEST_FILE), &manifest)?;
        written.push(MANIFEST_FILE.into());

        let mut langs = String::from("id\tname\tpermutation\n");
        for l in &self.languages {
            let perm: Vec<String> = l.grapheme_permutation.iter().map(|g| g.to_string()).collect();
            langs.push_str(&format!("{}\t{}\t{}\n", l.id, l.name, perm.join(" ")));
        }
        langs.push_str(&format!("# speakers\t{}\n", self.speakers));
        write_text(&dir.join(LANGUAGES_FILE), &langs)?;
        written.push(LANGUAGES_FILE.into());

        write_features(&dir.join(BANK_FILE), &self.bank.vectors)?;
        written.push(BANK_FILE.into());
        Ok(written)
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let (languages, speakers) = read_languages(&dir.join(LANGUAGES_FILE))?;
        let vectors = read_features(&dir.join(BANK_FILE))?;
        if vectors.shape() != [ALPHABET + 1, FRAME_DIM] {
            return Err(Error::shape("phoneme bank", vectors.shape(), &[ALPHABET + 1, FRAME_DIM]));
        }
        let bank = PhonemeBank {
            vectors,
            frames_per_phoneme: language::FRAMES_PER_PHONEME,
        };
        let entries = read_manifest(&dir.join(MANIFEST_FILE))?;
        let mut utterances = Vec::with_capacity(entries.len());
        for e in entries {
            if e.language >= languages.len() {
                return Err(Error::Lookup(format!("{}: unknown language {}", e.id, e.language)));
            }
            if e.speaker >= speakers {
                return Err(Error::Lookup(format!("{}: unknown speaker {}", e.id, e.speaker)));
            }
            let frames = read_features(&dir.join(&e.feature_path))?;
            utterances.push(Utterance {
                id: e.id,
                language: e.language,
                speaker: e.speaker,
                text: e.text,
                frames,
                split: e.split,
            });
        }
        Ok(Corpus {
            languages,
            bank,
            speakers,
            utterances,
        })
    }
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub language: usize,
    pub speaker: usize,
    pub text: String,
    pub feature_path: PathBuf,
    pub split: Split,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_manifest(&text)
}

/// Parses manifest text; errors carry the byte offset of the offending line.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let at = offset;
        offset += line.len() as u64;
        let line = line.trim_end_matches(['\n', '\r']);
        if i == 0 {
            if line != MANIFEST_HEADER {
                return Err(Error::Parse {
                    offset: at,
                    msg: format!("expected header `{MANIFEST_HEADER}`"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = |msg: String| Error::Parse { offset: at, msg };
        if cols.len() != 6 {
            return Err(bad(format!("expected 6 columns, found {}", cols.len())));
        }
        let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| bad(format!("bad {what} `{s}`")));
        if language::parse_text(cols[3]).is_none() {
            return Err(bad(format!("text `{}` outside the alphabet", cols[3])));
        }
        out.push(ManifestEntry {
            id: cols[0].to_string(),
            language: num(cols[1], "language")?,
            speaker: num(cols[2], "speaker")?,
            text: cols[3].to_string(),
            feature_path: PathBuf::from(cols[4]),
            split: cols[5].parse().map_err(bad)?,
        });
    }
    if out.is_empty() && offset == 0 {
        return Err(Error::Parse {
            offset: 0,
            msg: "empty manifest".into(),
        });
    }
    Ok(out)
}

fn read_languages(path: &Path) -> Result<(Vec<ToyLanguage>, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut langs = Vec::new();
    let mut speakers = None;
    let mut offset = 0u64;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let at = offset;
        offset += line.len() as u64;
        let line = line.trim_end();
        let bad = |msg: &str| Error::Parse {
            offset: at,
            msg: format!("{}: {msg}", path.display()),
        };
        if i == 0 || line.is_empty() {
            continue;
        }
        if let Some(n) = line.strip_prefix("# speakers\t") {
            speakers = Some(n.parse().map_err(|_| bad("bad speaker count"))?);
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(bad("expected 3 columns"));
        }
        let id: usize = cols[0].parse().map_err(|_| bad("bad id"))?;
        let perm: Vec<usize> = cols[2]
            .split(' ')
            .map(|g| g.parse().map_err(|_| bad("bad permutation entry")))
            .collect::<Result<_>>()?;
        if id != langs.len() || perm.len() != ALPHABET {
            return Err(bad("languages must be listed in id order with full permutations"));
        }
        langs.push(ToyLanguage::new(id, cols[1].to_string(), perm).ok_or_else(|| bad("not a permutation"))?);
    }
    let speakers = speakers.ok_or_else(|| Error::Parse {
        offset,
        msg: format!("{}: missing speaker count", path.display()),
    })?;
    Ok((langs, speakers))
}

/// Writes `[N, F]` frames as little-endian f64: magic, N, F, then the data.
pub fn write_features(path: &Path, frames: &Tensor) -> Result<()> {
    if frames.ndim() != 2 {
        return Err(Error::shape("write_features", frames.shape(), &[]));
    }
    let file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    let header = [FEATURE_MAGIC, frames.shape()[0] as f64, frames.shape()[1] as f64];
    for v in header.iter().chain(frames.data()) {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::file(path, e))?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_features(&bytes).map_err(|e| match e {
        Error::Parse { offset, msg } => Error::Parse {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Parse {
            offset: (bytes.len() - bytes.len() % 8) as u64,
            msg: "length is not a multiple of 8 bytes".into(),
        });
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if vals.len() < 3 {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            msg: "truncated header".into(),
        });
    }
    if vals[0] != FEATURE_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let dim = |v: f64, at: u64| {
        if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
            Ok(v as usize)
        } else {
            Err(Error::Parse {
                offset: at,
                msg: format!("bad dimension {v}"),
            })
        }
    };
    let (n, f) = (dim(vals[1], 8)?, dim(vals[2], 16)?);
    if vals.len() - 3 != n * f {
        return Err(Error::Parse {
            offset: 24,
            msg: format!("header declares {n}x{f} values, file holds {}", vals.len() - 3),
        });
    }
    Tensor::new(vec![n, f], vals[3..].to_vec())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            train_per_language: 12,
            val_per_language: 2,
            test_per_language: 3,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn frames_follow_text_length() {
        let corpus = generate_toy_corpus(&small(), 5).unwrap();
        let r = corpus.bank.frames_per_phoneme;
        assert_eq!(corpus.utterances.len(), 4 * 17);
        for u in &corpus.utterances {
            assert_eq!(u.duration(), r * u.chars() + r);
            assert!((3..=30).contains(&u.chars()));
            assert_eq!(u.speaker / 2, u.language);
        }
    }

    #[test]
    fn nearest_vector_recovers_reference() {
        let corpus = generate_toy_corpus(&small(), 11).unwrap();
        let r = corpus.bank.frames_per_phoneme;
        for u in corpus.utterances.iter().take(20) {
            let reference = corpus.reference_phonemes(u);
            for (i, &p) in reference.iter().enumerate() {
                let row = &u.frames.data()[i * r * FRAME_DIM..(i * r + 1) * FRAME_DIM];
                assert_eq!(corpus.bank.nearest(row), p);
            }
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_toy_corpus(&small(), 3).unwrap();
        let b = generate_toy_corpus(&small(), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_toy_corpus(&small(), 4).unwrap();
        assert_ne!(a.utterances[0].text, c.utterances[0].text);
    }

    #[test]
    fn write_then_load_round_trips() {
        let corpus = generate_toy_corpus(&small(), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let written = corpus.write(dir.path()).unwrap();
        assert_eq!(written.len(), corpus.utterances.len() + 3);
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn feature_errors_report_offsets() {
        let t = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f64");
        write_features(&p, &t).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        assert_eq!(decode_features(&bytes).unwrap(), t);
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(decode_features(&bytes), Err(Error::Parse { offset: 24, .. })));
        bytes[7] ^= 0x40;
        assert!(matches!(decode_features(&bytes), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn manifest_errors_report_line_offset() {
        let good = format!("{MANIFEST_HEADER}\na\t0\t0\tabc\tf.f64\ttrain\n");
        assert_eq!(parse_manifest(&good).unwrap().len(), 1);
        let bad = format!("{MANIFEST_HEADER}\na\t0\t0\tabc\tf.f64\ttrain\nb\tx\t0\tab\tg\ttest\n");
        let first = MANIFEST_HEADER.len() as u64 + 1;
        let second = first + "a\t0\t0\tabc\tf.f64\ttrain\n".len() as u64;
        match parse_manifest(&bad) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, second),
            other => panic!("{other:?}"),
        }
    }
}
