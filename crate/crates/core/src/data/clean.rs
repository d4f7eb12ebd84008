use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::corpus::{Split, Utterance};
use crate::autodiff::rng::SeededRng;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleanConfig {
    pub min_chars: usize,
    pub max_chars: usize,
    /// Duration window in frames, inclusive.
    pub min_frames: usize,
    pub max_frames: usize,
    /// Half-width of the kept band, in population standard deviations.
    pub sigmas: u32,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig {
            min_chars: 3,
            max_chars: 190,
            min_frames: 8,
            max_frames: 202,
            sigmas: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LanguageCleanStats {
    pub language: usize,
    pub before: usize,
    pub window_dropped: usize,
    pub outlier_dropped: usize,
    pub kept: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CleanReport {
    pub languages: Vec<LanguageCleanStats>,
    pub warnings: Vec<String>,
}

/// Keep-mask for one group: `d` survives iff `μ − kσ < d < μ + kσ`, σ the
/// population deviation. A group with σ = 0 is kept whole.
///
/// With `S = Σd`, `Q = Σd²` this is `(n·d − S)² < k²·(n·Q − S²)`, evaluated in
/// integers so the boundary is decided exactly.
pub fn outlier_keep(durations: &[u64], sigmas: u32) -> Vec<bool> {
    let n = durations.len() as i128;
    let s: i128 = durations.iter().map(|&d| d as i128).sum();
    let q: i128 = durations.iter().map(|&d| (d as i128) * (d as i128)).sum();
    let spread = n * q - s * s;
    if spread == 0 {
        return vec![true; durations.len()];
    }
    let k2 = (sigmas as i128) * (sigmas as i128);
    durations
        .iter()
        .map(|&d| {
            let dev = n * d as i128 - s;
            dev * dev < k2 * spread
        })
        .collect()
}

/// Outlier filter over (language, transcript length) groups.
pub fn outlier_filter(utts: Vec<Utterance>, sigmas: u32) -> (Vec<Utterance>, Vec<Utterance>) {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, u) in utts.iter().enumerate() {
        groups.entry((u.language, u.chars())).or_default().push(i);
    }
    let mut keep = vec![true; utts.len()];
    for idx in groups.values() {
        let durations: Vec<u64> = idx.iter().map(|&i| utts[i].duration() as u64).collect();
        for (&i, k) in idx.iter().zip(outlier_keep(&durations, sigmas)) {
            keep[i] = k;
        }
    }
    let (mut kept, mut dropped) = (Vec::new(), Vec::new());
    for (u, k) in utts.into_iter().zip(keep) {
        if k {
            kept.push(u)
        } else {
            dropped.push(u)
        }
    }
    (kept, dropped)
}

/// Length-window filter followed by the outlier filter. Order is preserved.
pub fn clean_corpus(utts: Vec<Utterance>, cfg: &CleanConfig, languages: usize) -> (Vec<Utterance>, CleanReport) {
    let mut stats: Vec<LanguageCleanStats> = (0..languages)
        .map(|language| LanguageCleanStats {
            language,
            ..Default::default()
        })
        .collect();
    let mut windowed = Vec::with_capacity(utts.len());
    for u in utts {
        stats[u.language].before += 1;
        let chars_ok = (cfg.min_chars..=cfg.max_chars).contains(&u.chars());
        let frames_ok = (cfg.min_frames..=cfg.max_frames).contains(&u.duration());
        if chars_ok && frames_ok {
            windowed.push(u);
        } else {
            stats[u.language].window_dropped += 1;
        }
    }
    let (kept, dropped) = outlier_filter(windowed, cfg.sigmas);
    for u in &dropped {
        stats[u.language].outlier_dropped += 1;
    }
    for u in &kept {
        stats[u.language].kept += 1;
    }
    let warnings = stats
        .iter()
        .filter(|s| s.before > 0 && s.kept == 0)
        .map(|s| format!("language {} lost all {} examples during cleaning", s.language, s.before))
        .collect();
    (
        kept,
        CleanReport {
            languages: stats,
            warnings,
        },
    )
}

/// Keeps `n` random training examples per language; validation and test rows are untouched.
pub fn subset_per_language(utts: Vec<Utterance>, n: usize, languages: usize, rng: &mut SeededRng) -> Result<Vec<Utterance>> {
    let mut keep = vec![true; utts.len()];
    for lang in 0..languages {
        let mut idx: Vec<usize> = utts
            .iter()
            .enumerate()
            .filter(|(_, u)| u.language == lang && u.split == Split::Train)
            .map(|(i, _)| i)
            .collect();
        if idx.len() < n {
            return Err(Error::Config(format!(
                "language {lang} has {} training examples, fewer than the requested {n}",
                idx.len()
            )));
        }
        rng.shuffle(&mut idx);
        for &i in &idx[n..] {
            keep[i] = false;
        }
    }
    Ok(utts.into_iter().zip(keep).filter(|(_, k)| *k).map(|(u, _)| u).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_example_drops_the_long_one() {
        let mut d = vec![2u64; 9];
        d.push(10);
        let keep = outlier_keep(&d, 3);
        assert_eq!(keep.iter().filter(|k| !**k).count(), 1);
        assert!(!keep[9]);
    }

    #[test]
    fn zero_spread_keeps_everything() {
        assert_eq!(outlier_keep(&[7, 7, 7], 3), vec![true; 3]);
        assert_eq!(outlier_keep(&[4], 3), vec![true]);
    }

    #[test]
    fn single_deviant_depends_on_group_size() {
        // One deviant among n sits sqrt(n - 1) deviations from the mean.
        for delta in [1u64, 5, 40] {
            let mut nine = vec![3u64; 8];
            nine.push(3 + delta);
            assert!(outlier_keep(&nine, 3).iter().all(|k| *k));
            let mut eleven = vec![3u64; 10];
            eleven.push(3 + delta);
            assert!(!outlier_keep(&eleven, 3)[10]);
        }
    }
}
