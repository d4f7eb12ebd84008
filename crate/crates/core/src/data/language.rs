use crate::autodiff::rng::SeededRng;
use crate::autodiff::tensor::Tensor;

/// Size of the grapheme/phoneme alphabet shared by every toy language.
pub const ALPHABET: usize = 20;
/// Feature dimension of one frame.
pub const FRAME_DIM: usize = 8;
/// Frames emitted per phoneme.
pub const FRAMES_PER_PHONEME: usize = 2;
/// Minimum pairwise distance between canonical vectors.
pub const MIN_SPACING: f64 = 0.5;

/// Token id 0 is padding; grapheme `g` is token `g + 1`.
pub const PAD_TOKEN: usize = 0;
pub const VOCAB_SIZE: usize = ALPHABET + 1;

const LETTERS: &[u8; ALPHABET] = b"abcdefghijklmnopqrst";

pub fn grapheme_char(g: usize) -> char {
    LETTERS[g] as char
}

pub fn char_grapheme(c: char) -> Option<usize> {
    LETTERS.iter().position(|&l| l as char == c)
}

/// Parses a transcript into grapheme indices.
pub fn parse_text(text: &str) -> Option<Vec<usize>> {
    text.chars().map(char_grapheme).collect()
}

pub fn tokens_of(text: &str) -> Option<Vec<usize>> {
    parse_text(text).map(|g| g.into_iter().map(|x| x + 1).collect())
}

/// A synthetic language: a spelling of every phoneme as a distinct grapheme.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyLanguage {
    pub id: usize,
    pub name: String,
    /// `grapheme_permutation[phoneme] = grapheme`.
    pub grapheme_permutation: Vec<usize>,
    reading: Vec<usize>,
}

impl ToyLanguage {
    pub fn new(id: usize, name: String, grapheme_permutation: Vec<usize>) -> Option<Self> {
        let mut reading = vec![usize::MAX; grapheme_permutation.len()];
        for (p, &g) in grapheme_permutation.iter().enumerate() {
            if g >= reading.len() || reading[g] != usize::MAX {
                return None;
            }
            reading[g] = p;
        }
        Some(ToyLanguage {
            id,
            name,
            grapheme_permutation,
            reading,
        })
    }

    /// Phoneme read for a grapheme (inverse permutation).
    pub fn phoneme(&self, grapheme: usize) -> usize {
        self.reading[grapheme]
    }

    pub fn pronounce(&self, graphemes: &[usize]) -> Vec<usize> {
        graphemes.iter().map(|&g| self.phoneme(g)).collect()
    }

    pub fn differing_positions(&self, other: &ToyLanguage) -> usize {
        self.grapheme_permutation
            .iter()
            .zip(&other.grapheme_permutation)
            .filter(|(a, b)| a != b)
            .count()
    }
}

/// Generates `count` languages whose permutations pairwise differ in at least half the alphabet.
pub fn generate_languages(count: usize, rng: &mut SeededRng) -> Vec<ToyLanguage> {
    let mut langs: Vec<ToyLanguage> = Vec::with_capacity(count);
    while langs.len() < count {
        let mut perm: Vec<usize> = (0..ALPHABET).collect();
        rng.shuffle(&mut perm);
        let id = langs.len();
        let cand = ToyLanguage::new(id, format!("lang{id}"), perm).expect("shuffle is a permutation");
        if langs.iter().all(|l| l.differing_positions(&cand) >= ALPHABET / 2) {
            langs.push(cand);
        }
    }
    langs
}

/// Canonical frame vectors for every phoneme plus a trailing silence symbol.
#[derive(Clone, Debug, PartialEq)]
pub struct PhonemeBank {
    /// `[ALPHABET + 1, FRAME_DIM]`; row `ALPHABET` is silence.
    pub vectors: Tensor,
    pub frames_per_phoneme: usize,
}

impl PhonemeBank {
    pub const SILENCE: usize = ALPHABET;

    /// Rejection-samples vectors with every pairwise distance at least [`MIN_SPACING`].
    /// Silence is the origin.
    pub fn generate(rng: &mut SeededRng) -> Self {
        let mut rows: Vec<Vec<f64>> = vec![vec![0.0; FRAME_DIM]];
        while rows.len() <= ALPHABET {
            let cand: Vec<f64> = (0..FRAME_DIM).map(|_| rng.normal() * 0.5).collect();
            if rows.iter().all(|r| distance(r, &cand) >= MIN_SPACING) {
                rows.push(cand);
            }
        }
        // Move silence to the last row.
        rows.rotate_left(1);
        let data = rows.into_iter().flatten().collect();
        PhonemeBank {
            vectors: Tensor::new(vec![ALPHABET + 1, FRAME_DIM], data).expect("bank shape"),
            frames_per_phoneme: FRAMES_PER_PHONEME,
        }
    }

    pub fn symbols(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vector(&self, symbol: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors.data()[symbol * d..(symbol + 1) * d]
    }

    /// Closest canonical vector by Euclidean distance (first on ties).
    pub fn nearest(&self, frame: &[f64]) -> usize {
        (0..self.symbols())
            .map(|s| (s, distance(self.vector(s), frame)))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
            .0
    }

    pub fn min_spacing(&self) -> f64 {
        let mut min = f64::INFINITY;
        for a in 0..self.symbols() {
            for b in a + 1..self.symbols() {
                min = min.min(distance(self.vector(a), self.vector(b)));
            }
        }
        min
    }
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
