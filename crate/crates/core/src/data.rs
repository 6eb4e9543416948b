//! Synthetic multi-domain, multi-accent utterances and the binary corpus format.
//!
//! Each utterance is rendered from a blank-interleaved label sequence. Frames
//! are the symbol's base pattern, plus an accent-and-symbol-specific shift,
//! plus a per-domain additive bias, plus Gaussian noise. Optionally each
//! accent permutes which base pattern realizes which grapheme and adds a weak
//! constant marker, which makes single frames ambiguous until the accent is
//! known from the whole utterance.
//!
//! Corpus file layout (little-endian):
//!
//! ```text
//! magic  b"MOECORP\0"   8 bytes
//! version u32           = 1
//! count   u64
//! count × {
//!     id_len u32, id bytes (UTF-8)
//!     T u32, d_feat u32, n_labels u32, domain_id u32, accent_id u32
//!     T·d_feat × f64 frames (row-major)
//!     n_labels × u32 labels
//! }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MOECORP\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    /// `T×d_feat`
    pub frames: Tensor,
    pub labels: Vec<usize>,
    pub domain_id: usize,
    pub accent_id: usize,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_domains: usize,
    pub n_accents: usize,
    pub vocab: usize,
    pub d_feat: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub max_labels: usize,
    /// Per-coordinate scale of the grapheme base patterns.
    pub pattern_scale: f64,
    /// Per-coordinate scale of the additive domain bias.
    pub domain_bias: f64,
    /// Per-coordinate scale of the accent-specific pattern shift.
    pub accent_shift: f64,
    pub noise: f64,
    /// Every accent but the first realizes the graphemes through its own
    /// permutation of the base patterns, so a single frame is ambiguous
    /// without knowing the accent.
    pub accent_permute: bool,
    /// Per-coordinate scale of an accent offset added to every frame; weak
    /// per frame, identifiable once pooled over the utterance.
    pub accent_marker: f64,
    /// Empty means uniform.
    pub domain_priors: Vec<f64>,
    pub accent_priors: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_domains: 6,
            n_accents: 4,
            vocab: 8,
            d_feat: 24,
            t_min: 20,
            t_max: 40,
            max_labels: 8,
            pattern_scale: 1.0,
            domain_bias: 1.0,
            accent_shift: 1.0,
            noise: 0.5,
            accent_permute: false,
            accent_marker: 0.0,
            domain_priors: Vec::new(),
            accent_priors: Vec::new(),
            seed: 7,
        }
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("data.{key}: cannot parse {s:?}")))
        })
        .collect()
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("data.{key}: cannot parse {value:?}")))
}

impl SynthConfig {
    /// Copies the dimensions shared with the model.
    pub fn align_with(&mut self, model: &ModelConfig) {
        self.vocab = model.vocab;
        self.d_feat = model.d_feat;
        self.n_domains = model.n_domains;
        self.n_accents = model.n_accents;
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "t_min" => self.t_min = parse_num(key, value)?,
            "t_max" => self.t_max = parse_num(key, value)?,
            "max_labels" => self.max_labels = parse_num(key, value)?,
            "pattern_scale" => self.pattern_scale = parse_num(key, value)?,
            "domain_bias" => self.domain_bias = parse_num(key, value)?,
            "accent_shift" => self.accent_shift = parse_num(key, value)?,
            "noise" => self.noise = parse_num(key, value)?,
            "accent_permute" => {
                self.accent_permute = match value {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(Error::Config(format!("data.{key}: expected true or false, got {value:?}"))),
                }
            }
            "accent_marker" => self.accent_marker = parse_num(key, value)?,
            "domain_priors" => self.domain_priors = parse_list(key, value)?,
            "accent_priors" => self.accent_priors = parse_list(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 1 {
            return Err(Error::Config("vocab must be at least 1".into()));
        }
        if self.d_feat == 0 || self.n_domains == 0 || self.n_accents == 0 {
            return Err(Error::Config("d_feat, n_domains and n_accents must be positive".into()));
        }
        if self.t_min < 3 || self.t_max < self.t_min {
            return Err(Error::Config(format!(
                "data.t_min/t_max must satisfy 3 ≤ t_min ≤ t_max, got {}..{}",
                self.t_min, self.t_max
            )));
        }
        if self.max_labels == 0 {
            return Err(Error::Config("data.max_labels must be positive".into()));
        }
        for (key, priors, n) in [
            ("domain_priors", &self.domain_priors, self.n_domains),
            ("accent_priors", &self.accent_priors, self.n_accents),
        ] {
            if !priors.is_empty() && (priors.len() != n || priors.iter().any(|&p| !(p >= 0.0)) || priors.iter().sum::<f64>() <= 0.0) {
                return Err(Error::Config(format!(
                    "data.{key} must list {n} non-negative weights with a positive sum"
                )));
            }
        }
        for (key, v) in [
            ("pattern_scale", self.pattern_scale),
            ("domain_bias", self.domain_bias),
            ("accent_shift", self.accent_shift),
            ("noise", self.noise),
            ("accent_marker", self.accent_marker),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("data.{key} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Fixed random quantities shared by every utterance of a corpus.
struct World {
    /// `(V+1)` base patterns; the last is the blank.
    patterns: Vec<Vec<f64>>,
    domain_bias: Vec<Vec<f64>>,
    /// `[accent][symbol]`
    accent_shift: Vec<Vec<Vec<f64>>>,
    /// `[accent][symbol]` → index of the base pattern used.
    realize: Vec<Vec<usize>>,
    accent_marker: Vec<Vec<f64>>,
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

impl World {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_feat;
        let patterns = (0..=cfg.vocab).map(|_| normal_vec(rng, d, cfg.pattern_scale)).collect();
        let domain_bias = (0..cfg.n_domains).map(|_| normal_vec(rng, d, cfg.domain_bias)).collect();
        let accent_shift = (0..cfg.n_accents)
            .map(|_| (0..=cfg.vocab).map(|_| normal_vec(rng, d, cfg.accent_shift)).collect())
            .collect();
        // accent permutations and markers use their own stream so that turning
        // them on leaves every other draw of the corpus unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let rng = &mut rng;
        let realize = (0..cfg.n_accents)
            .map(|a| {
                let mut order: Vec<usize> = (0..=cfg.vocab).collect();
                if cfg.accent_permute && a > 0 {
                    order[..cfg.vocab].shuffle(rng);
                }
                order
            })
            .collect();
        let accent_marker = (0..cfg.n_accents)
            .map(|_| if cfg.accent_marker > 0.0 { normal_vec(rng, d, cfg.accent_marker) } else { vec![0.0; d] })
            .collect();
        World {
            patterns,
            domain_bias,
            accent_shift,
            realize,
            accent_marker,
        }
    }
}

/// Frame-level symbol sequence: `2L+1` segments (blank, l1, blank, …, blank) of near-equal length.
pub fn segment_symbols(t_len: usize, labels: &[usize], blank: usize) -> Vec<usize> {
    let segs = 2 * labels.len() + 1;
    let (base, rem) = (t_len / segs, t_len % segs);
    let mut out = Vec::with_capacity(t_len);
    for i in 0..segs {
        let sym = if i % 2 == 0 { blank } else { labels[i / 2] };
        let len = base + usize::from(i < rem);
        out.extend(std::iter::repeat_n(sym, len));
    }
    out
}

fn categorical(priors: &[f64], n: usize) -> Result<WeightedIndex<f64>> {
    let weights = if priors.is_empty() { vec![1.0; n] } else { priors.to_vec() };
    WeightedIndex::new(weights).map_err(|e| Error::Config(format!("priors: {e}")))
}

/// Generates `count` utterances; identical configs give bit-identical corpora.
pub fn generate(cfg: &SynthConfig, count: usize) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::Config("utterance count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = World::new(cfg, &mut rng);
    let domains = categorical(&cfg.domain_priors, cfg.n_domains)?;
    let accents = categorical(&cfg.accent_priors, cfg.n_accents)?;
    let blank = cfg.vocab;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let t_len = rng.random_range(cfg.t_min..=cfg.t_max);
        let max_l = cfg.max_labels.min((t_len - 1) / 2).max(1);
        let n_labels = rng.random_range(1..=max_l);
        let labels: Vec<usize> = (0..n_labels).map(|_| rng.random_range(0..cfg.vocab)).collect();
        let domain_id = domains.sample(&mut rng);
        let accent_id = accents.sample(&mut rng);
        let mut data = Vec::with_capacity(t_len * cfg.d_feat);
        for sym in segment_symbols(t_len, &labels, blank) {
            let pat = &world.patterns[world.realize[accent_id][sym]];
            let shift = &world.accent_shift[accent_id][sym];
            let bias = &world.domain_bias[domain_id];
            let marker = &world.accent_marker[accent_id];
            for j in 0..cfg.d_feat {
                let noise = cfg.noise * rng.sample::<f64, _>(StandardNormal);
                data.push(pat[j] + shift[j] + bias[j] + marker[j] + noise);
            }
        }
        out.push(Utterance {
            utt_id: format!("utt{i:06}"),
            frames: Tensor::matrix(t_len, cfg.d_feat, data)?,
            labels,
            domain_id,
            accent_id,
        });
    }
    Ok(out)
}

/// Deterministic hash bucket of an utterance id in `[0, 100)`.
pub fn id_bucket(utt_id: &str) -> u64 {
    let digest = Sha256::digest(utt_id.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b) % 100
}

/// Splits into `(train, test)`; an utterance goes to test when its id bucket is below `test_percent`.
pub fn split(corpus: &[Utterance], test_percent: u64) -> (Vec<Utterance>, Vec<Utterance>) {
    corpus
        .iter()
        .cloned()
        .partition(|u| id_bucket(&u.utt_id) >= test_percent)
}

pub fn write_corpus<W: Write>(mut w: W, corpus: &[Utterance]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(corpus.len() as u64)?;
    for u in corpus {
        let id = u.utt_id.as_bytes();
        w.write_u32::<LittleEndian>(id.len() as u32)?;
        w.write_all(id)?;
        w.write_u32::<LittleEndian>(u.frames.rows() as u32)?;
        w.write_u32::<LittleEndian>(u.frames.cols() as u32)?;
        w.write_u32::<LittleEndian>(u.labels.len() as u32)?;
        w.write_u32::<LittleEndian>(u.domain_id as u32)?;
        w.write_u32::<LittleEndian>(u.accent_id as u32)?;
        for &x in u.frames.data() {
            w.write_f64::<LittleEndian>(x)?;
        }
        for &l in &u.labels {
            w.write_u32::<LittleEndian>(l as u32)?;
        }
    }
    Ok(())
}

pub fn read_corpus<R: Read>(mut r: R) -> Result<Vec<Utterance>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a corpus file (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported corpus version {version}")));
    }
    let count = r.read_u64::<LittleEndian>()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let id_len = r.read_u32::<LittleEndian>()? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let utt_id = String::from_utf8(id).map_err(|_| Error::Format("utterance id is not UTF-8".into()))?;
        let t_len = r.read_u32::<LittleEndian>()? as usize;
        let d_feat = r.read_u32::<LittleEndian>()? as usize;
        let n_labels = r.read_u32::<LittleEndian>()? as usize;
        let domain_id = r.read_u32::<LittleEndian>()? as usize;
        let accent_id = r.read_u32::<LittleEndian>()? as usize;
        let mut data = vec![0.0; t_len * d_feat];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        let mut labels = Vec::with_capacity(n_labels);
        for _ in 0..n_labels {
            labels.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let frames = Tensor::matrix(t_len, d_feat, data)
            .map_err(|e| Error::Format(format!("utterance {utt_id}: {e}")))?;
        out.push(Utterance {
            utt_id,
            frames,
            labels,
            domain_id,
            accent_id,
        });
    }
    Ok(out)
}

pub fn save_corpus(path: &Path, corpus: &[Utterance]) -> Result<()> {
    let mut buf = Vec::new();
    write_corpus(&mut buf, corpus)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<Utterance>> {
    read_corpus(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_domains: 3,
            n_accents: 2,
            vocab: 4,
            d_feat: 6,
            t_min: 8,
            t_max: 14,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate(&small(), 20).unwrap();
        let b = generate(&small(), 20).unwrap();
        assert_eq!(a, b);
        let mut other = small();
        other.seed += 1;
        assert_ne!(a, generate(&other, 20).unwrap());
    }

    #[test]
    fn noiseless_single_condition_frames_depend_only_on_labels() {
        let cfg = SynthConfig {
            n_domains: 1,
            n_accents: 1,
            noise: 0.0,
            t_min: 12,
            t_max: 12,
            max_labels: 1,
            vocab: 2,
            ..small()
        };
        let corpus = generate(&cfg, 40).unwrap();
        for a in &corpus {
            for b in &corpus {
                if a.labels == b.labels {
                    assert_eq!(a.frames, b.frames);
                }
            }
        }
    }

    #[test]
    fn permuted_accents_reuse_the_same_patterns() {
        let cfg = SynthConfig {
            n_domains: 1,
            n_accents: 3,
            noise: 0.0,
            domain_bias: 0.0,
            accent_shift: 0.0,
            accent_permute: true,
            t_min: 3,
            t_max: 3,
            max_labels: 1,
            ..small()
        };
        let corpus = generate(&cfg, 300).unwrap();
        // middle frame of a 3-frame utterance is its single label
        let mut seen: Vec<std::collections::BTreeMap<usize, Vec<u64>>> = vec![Default::default(); 3];
        for u in &corpus {
            let bits: Vec<u64> = u.frames.row(1).iter().map(|x| x.to_bits()).collect();
            let prev = seen[u.accent_id].insert(u.labels[0], bits.clone());
            assert!(prev.is_none_or(|p| p == bits), "accent realizes a label inconsistently");
        }
        let sets: Vec<std::collections::BTreeSet<Vec<u64>>> =
            seen.iter().map(|m| m.values().cloned().collect()).collect();
        assert_eq!(sets[0].len(), 4);
        assert!(sets.iter().all(|s| *s == sets[0]));
        assert!(seen.iter().skip(1).any(|m| *m != seen[0]));
    }

    #[test]
    fn accent_marker_is_a_constant_offset() {
        let base = SynthConfig {
            n_domains: 1,
            noise: 0.0,
            domain_bias: 0.0,
            accent_shift: 0.0,
            ..small()
        };
        let marked = SynthConfig {
            accent_marker: 0.5,
            ..base.clone()
        };
        let (a, b) = (generate(&base, 10).unwrap(), generate(&marked, 10).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.labels, y.labels);
            let d0: Vec<f64> = y.frames.row(0).iter().zip(x.frames.row(0)).map(|(p, q)| p - q).collect();
            assert!(d0.iter().any(|v| v.abs() > 1e-6));
            for t in 1..x.len() {
                for (j, (p, q)) in y.frames.row(t).iter().zip(x.frames.row(t)).enumerate() {
                    assert!((p - q - d0[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn every_utterance_is_ctc_feasible() {
        let corpus = generate(&small(), 200).unwrap();
        for u in &corpus {
            assert!(u.len() >= 2 * u.labels.len() + 1);
            assert!(crate::losses::min_frames(&u.labels) <= u.len());
            assert!(u.labels.iter().all(|&l| l < 4));
        }
    }

    #[test]
    fn segments_cover_all_frames() {
        let s = segment_symbols(10, &[1, 1], 9);
        assert_eq!(s, vec![9, 9, 1, 1, 9, 9, 1, 1, 9, 9]);
        assert_eq!(segment_symbols(7, &[0, 2, 3], 5).len(), 7);
    }

    #[test]
    fn zero_vocab_is_rejected() {
        let cfg = SynthConfig { vocab: 0, ..small() };
        assert!(matches!(generate(&cfg, 1), Err(Error::Config(_))));
        assert!(generate(&small(), 0).is_err());
    }

    #[test]
    fn corpus_file_round_trip_is_bit_exact() {
        let corpus = generate(&small(), 15).unwrap();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &corpus).unwrap();
        let back = read_corpus(buf.as_slice()).unwrap();
        assert_eq!(back, corpus);
        let mut again = Vec::new();
        write_corpus(&mut again, &back).unwrap();
        assert_eq!(again, buf);
        buf[0] = b'X';
        assert!(matches!(read_corpus(buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let corpus = generate(&small(), 100).unwrap();
        let (train, test) = split(&corpus, 20);
        assert_eq!(train.len() + test.len(), 100);
        assert!(!test.is_empty() && !train.is_empty());
        let (train2, _) = split(&corpus, 20);
        assert_eq!(train, train2);
    }
}
