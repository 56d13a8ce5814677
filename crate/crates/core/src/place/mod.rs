//! Bag-of-words place recognition over global keyframes.

mod features;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SlamError};
use crate::sensor::GrayImage;

pub use features::{detect_fast, gaussian_blur, BriefPattern, Descriptor, Keypoint, BORDER, DESCRIPTOR_BITS};

/// Number of hyperplanes in the quantizer; the vocabulary has `2^12` words.
pub const HASH_BITS: usize = 12;
pub const VOCABULARY_SIZE: usize = 1 << HASH_BITS;
/// Frames with fewer keypoints are flagged as degenerate.
pub const MIN_KEYPOINTS: usize = 10;

/// Sparse, L1-normalized word histogram sorted by word id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BowVector {
    entries: Vec<(u32, f64)>,
}

impl BowVector {
    /// Normalizes positive weights to unit sum; zero and negative weights
    /// are dropped.
    pub fn from_weights(weights: impl IntoIterator<Item = (u32, f64)>) -> Self {
        let mut map: BTreeMap<u32, f64> = BTreeMap::new();
        for (w, v) in weights {
            if v > 0.0 {
                *map.entry(w).or_default() += v;
            }
        }
        let total: f64 = map.values().sum();
        let entries = if total > 0.0 {
            map.into_iter().map(|(w, v)| (w, v / total)).collect()
        } else {
            Vec::new()
        };
        Self { entries }
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

/// `1 − ½ Σ |a_w − b_w|` over the union of words. Two empty vectors score 1,
/// an empty and a non-empty vector score 0.
pub fn similarity(a: &BowVector, b: &BowVector) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let (x, y) = (&a.entries, &b.entries);
    let (mut i, mut j) = (0, 0);
    let mut l1 = 0.0;
    while i < x.len() || j < y.len() {
        match (x.get(i), y.get(j)) {
            (Some(&(wa, va)), Some(&(wb, vb))) if wa == wb => {
                l1 += (va - vb).abs();
                i += 1;
                j += 1;
            }
            (Some(&(wa, va)), Some(&(wb, _))) if wa < wb => {
                l1 += va;
                i += 1;
            }
            (Some(&(_, va)), None) => {
                l1 += va;
                i += 1;
            }
            (_, Some(&(_, vb))) => {
                l1 += vb;
                j += 1;
            }
            (None, None) => unreachable!(),
        }
    }
    (1.0 - 0.5 * l1).clamp(0.0, 1.0)
}

/// Acceptance threshold for loop candidates: the lowest similarity between
/// a global keyframe and the frames of its own submap.
pub fn dynamic_threshold(keyframe: &BowVector, submap_frames: &[BowVector]) -> Result<f64> {
    submap_frames
        .iter()
        .map(|f| similarity(keyframe, f))
        .reduce(f64::min)
        .ok_or_else(|| SlamError::InsufficientData("dynamic threshold needs at least one submap frame".into()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameDescription {
    pub vector: BowVector,
    pub keypoints: usize,
    /// Fewer than [`MIN_KEYPOINTS`] keypoints were found.
    pub degenerate: bool,
}

/// Training-free vocabulary: binary descriptors are hashed to words by the
/// signs of their projections onto seeded Gaussian hyperplanes. Word weights
/// are term frequency times a smoothed inverse document frequency that is
/// fixed once by [`Vocabulary::train_idf`].
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    seed: u64,
    pattern: BriefPattern,
    hyperplanes: Vec<[f32; DESCRIPTOR_BITS]>,
    idf: Option<Vec<f64>>,
    pub fast_threshold: f32,
    pub max_keypoints: usize,
}

impl Vocabulary {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
        let hyperplanes = (0..HASH_BITS)
            .map(|_| {
                let mut h = [0f32; DESCRIPTOR_BITS];
                for v in h.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                h
            })
            .collect();
        Self {
            seed,
            pattern: BriefPattern::new(seed),
            hyperplanes,
            idf: None,
            fast_threshold: 0.05,
            max_keypoints: 500,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn idf(&self) -> Option<&[f64]> {
        self.idf.as_deref()
    }

    pub fn is_trained(&self) -> bool {
        self.idf.is_some()
    }

    pub fn word(&self, d: &Descriptor) -> u32 {
        let mut word = 0u32;
        for (k, h) in self.hyperplanes.iter().enumerate() {
            let mut dot = 0f32;
            for (bit, w) in h.iter().enumerate() {
                if d[bit / 64] >> (bit % 64) & 1 == 1 {
                    dot += w;
                } else {
                    dot -= w;
                }
            }
            if dot > 0.0 {
                word |= 1 << k;
            }
        }
        word
    }

    /// Word ids of every keypoint in the image.
    pub fn words(&self, img: &GrayImage) -> Vec<u32> {
        let kps = detect_fast(img, self.fast_threshold, self.max_keypoints);
        if kps.is_empty() {
            return Vec::new();
        }
        let smoothed = gaussian_blur(img, 2.0);
        kps.iter().map(|kp| self.word(&self.pattern.describe(&smoothed, kp))).collect()
    }

    /// Fixes the inverse document frequencies `ln((N + 1) / (n_w + 1)) + 1`
    /// from a set of training images. Subsequent calls are ignored.
    pub fn train_idf<'a>(&mut self, images: impl IntoIterator<Item = &'a GrayImage>) {
        if self.idf.is_some() {
            return;
        }
        let mut df = vec![0u32; VOCABULARY_SIZE];
        let mut n = 0usize;
        for img in images {
            let mut words = self.words(img);
            words.sort_unstable();
            words.dedup();
            for w in words {
                df[w as usize] += 1;
            }
            n += 1;
        }
        self.idf = Some(df.iter().map(|&d| ((n as f64 + 1.0) / (d as f64 + 1.0)).ln() + 1.0).collect());
    }

    pub fn describe(&self, img: &GrayImage) -> FrameDescription {
        let words = self.words(img);
        let n = words.len();
        let mut tf: BTreeMap<u32, f64> = BTreeMap::new();
        for w in words {
            *tf.entry(w).or_default() += 1.0;
        }
        let vector = BowVector::from_weights(tf.into_iter().map(|(w, c)| {
            let idf = self.idf.as_ref().map_or(1.0, |v| v[w as usize]);
            (w, c / n as f64 * idf)
        }));
        FrameDescription {
            vector,
            keypoints: n,
            degenerate: n < MIN_KEYPOINTS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeEntry {
    pub keyframe_id: u64,
    pub submap_id: usize,
    pub vector: BowVector,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopCandidate {
    pub keyframe_id: u64,
    pub submap_id: usize,
    pub score: f64,
}

/// Global keyframe descriptors with an inverted index over words.
#[derive(Clone, Debug)]
pub struct KeyframeDatabase {
    vocabulary: Vocabulary,
    entries: Vec<KeyframeEntry>,
    inverted: BTreeMap<u32, Vec<(usize, f64)>>,
    document_frequency: BTreeMap<u32, u32>,
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"SLAMBOW\0";
const SNAPSHOT_VERSION: u32 = 1;

impl KeyframeDatabase {
    pub fn new(vocabulary: Vocabulary) -> Self {
        Self {
            vocabulary,
            entries: Vec::new(),
            inverted: BTreeMap::new(),
            document_frequency: BTreeMap::new(),
        }
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn vocabulary_mut(&mut self) -> &mut Vocabulary {
        &mut self.vocabulary
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[KeyframeEntry] {
        &self.entries
    }

    /// Number of stored keyframes containing `word`.
    pub fn document_frequency(&self, word: u32) -> u32 {
        self.document_frequency.get(&word).copied().unwrap_or(0)
    }

    pub fn add(&mut self, keyframe_id: u64, submap_id: usize, vector: BowVector) {
        let idx = self.entries.len();
        for &(w, v) in vector.entries() {
            self.inverted.entry(w).or_default().push((idx, v));
            *self.document_frequency.entry(w).or_default() += 1;
        }
        self.entries.push(KeyframeEntry {
            keyframe_id,
            submap_id,
            vector,
        });
    }

    /// Top `k` keyframes from submaps at least `min_distance` ids away from
    /// `submap_id` whose score exceeds `s_min`, best first (ties by id).
    ///
    /// Scores accumulate `min(a_w, b_w)` over shared words, which equals
    /// [`similarity`] for normalized vectors.
    pub fn query(&self, v: &BowVector, submap_id: usize, k: usize, s_min: f64, min_distance: usize) -> Vec<LoopCandidate> {
        let mut scores: BTreeMap<usize, f64> = BTreeMap::new();
        for &(w, a) in v.entries() {
            if let Some(list) = self.inverted.get(&w) {
                for &(idx, b) in list {
                    *scores.entry(idx).or_default() += a.min(b);
                }
            }
        }
        let mut hits: Vec<LoopCandidate> = scores
            .into_iter()
            .filter(|(idx, _)| self.entries[*idx].submap_id.abs_diff(submap_id) >= min_distance)
            .map(|(idx, s)| LoopCandidate {
                keyframe_id: self.entries[idx].keyframe_id,
                submap_id: self.entries[idx].submap_id,
                score: s.min(1.0),
            })
            .filter(|c| c.score > s_min)
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.keyframe_id.cmp(&b.keyframe_id)));
        hits.truncate(k);
        hits
    }

    /// Version-tagged little-endian snapshot of the vocabulary state and all
    /// stored keyframes.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&self.vocabulary.seed.to_le_bytes())?;
        w.write_all(&self.vocabulary.fast_threshold.to_le_bytes())?;
        w.write_all(&(self.vocabulary.max_keypoints as u64).to_le_bytes())?;
        match &self.vocabulary.idf {
            None => w.write_all(&0u32.to_le_bytes())?,
            Some(idf) => {
                w.write_all(&(idf.len() as u32).to_le_bytes())?;
                for v in idf {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&e.keyframe_id.to_le_bytes())?;
            w.write_all(&(e.submap_id as u64).to_le_bytes())?;
            w.write_all(&(e.vector.len() as u32).to_le_bytes())?;
            for &(word, v) in e.vector.entries() {
                w.write_all(&word.to_le_bytes())?;
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
            let mut b = [0u8; N];
            r.read_exact(&mut b)
                .map_err(|e| SlamError::Format(format!("truncated keyframe snapshot: {e}")))?;
            Ok(b)
        }
        if &take::<8>(&mut r)? != SNAPSHOT_MAGIC {
            return Err(SlamError::Format("not a keyframe database snapshot".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != SNAPSHOT_VERSION {
            return Err(SlamError::Format(format!("unsupported snapshot version {version}")));
        }
        let seed = u64::from_le_bytes(take(&mut r)?);
        let mut vocabulary = Vocabulary::new(seed);
        vocabulary.fast_threshold = f32::from_le_bytes(take(&mut r)?);
        vocabulary.max_keypoints = u64::from_le_bytes(take(&mut r)?) as usize;
        let idf_len = u32::from_le_bytes(take(&mut r)?) as usize;
        if idf_len > 0 {
            if idf_len != VOCABULARY_SIZE {
                return Err(SlamError::Format(format!("idf table has {idf_len} entries")));
            }
            let idf = (0..idf_len).map(|_| take(&mut r).map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
            vocabulary.idf = Some(idf);
        }
        let mut db = KeyframeDatabase::new(vocabulary);
        let n = u64::from_le_bytes(take(&mut r)?);
        for _ in 0..n {
            let keyframe_id = u64::from_le_bytes(take(&mut r)?);
            let submap_id = u64::from_le_bytes(take(&mut r)?) as usize;
            let len = u32::from_le_bytes(take(&mut r)?) as usize;
            let mut entries = Vec::with_capacity(len);
            for _ in 0..len {
                let word = u32::from_le_bytes(take(&mut r)?);
                let v = f64::from_le_bytes(take(&mut r)?);
                entries.push((word, v));
            }
            db.add(keyframe_id, submap_id, BowVector { entries });
        }
        Ok(db)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_snapshot(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_snapshot(std::fs::read(path)?.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(pairs: &[(u32, f64)]) -> BowVector {
        BowVector::from_weights(pairs.iter().copied())
    }

    #[test]
    fn similarity_examples() {
        let a = v(&[(1, 1.0)]);
        let b = v(&[(1, 0.5), (2, 0.5)]);
        assert!((similarity(&a, &b) - 0.5).abs() < 1e-12);
        assert_eq!(similarity(&a, &a), 1.0);
        assert_eq!(similarity(&a, &v(&[(7, 3.0)])), 0.0);
    }

    #[test]
    fn bow_vectors_are_normalized() {
        let b = v(&[(3, 2.0), (1, 6.0), (3, 2.0), (9, 0.0)]);
        assert_eq!(b.entries(), &[(1, 0.6), (3, 0.4)]);
    }

    #[test]
    fn dynamic_threshold_is_the_minimum() {
        let kf = v(&[(1, 1.0)]);
        let frames = [v(&[(1, 0.9), (2, 0.1)]), v(&[(1, 0.6), (3, 0.4)]), v(&[(1, 0.75), (4, 0.25)])];
        assert!((dynamic_threshold(&kf, &frames).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(dynamic_threshold(&kf, &[kf.clone()]).unwrap(), 1.0);
        assert_eq!(dynamic_threshold(&kf, &[v(&[(2, 1.0)])]).unwrap(), 0.0);
        assert!(dynamic_threshold(&kf, &[]).is_err());
    }

    #[test]
    fn query_applies_threshold_distance_and_k() {
        let mut db = KeyframeDatabase::new(Vocabulary::new(0));
        assert!(db.query(&v(&[(1, 1.0)]), 5, 4, 0.0, 2).is_empty());
        db.add(10, 0, v(&[(1, 0.7), (2, 0.3)]));
        db.add(20, 1, v(&[(1, 0.4), (3, 0.6)]));
        db.add(30, 4, v(&[(1, 1.0)]));
        let q = v(&[(1, 1.0)]);
        let hits = db.query(&q, 4, 1, 0.5, 2);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].keyframe_id, 10);
        assert!((hits[0].score - 0.7).abs() < 1e-12);
        let all = db.query(&q, 4, 10, 0.0, 0);
        assert_eq!(all[0].keyframe_id, 30);
        assert_eq!(all[0].score, 1.0);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut vocab = Vocabulary::new(5);
        let mut img = GrayImage::new(64, 64);
        for (i, p) in img.data.iter_mut().enumerate() {
            *p = if (i / 8 + i / 512) % 2 == 0 { 0.2 } else { 0.8 };
        }
        vocab.train_idf([&img]);
        let mut db = KeyframeDatabase::new(vocab);
        db.add(3, 1, v(&[(5, 0.25), (9, 0.75)]));
        db.add(8, 4, v(&[(2, 1.0)]));
        let mut buf = Vec::new();
        db.write_snapshot(&mut buf).unwrap();
        let back = KeyframeDatabase::read_snapshot(buf.as_slice()).unwrap();
        assert_eq!(back.entries(), db.entries());
        assert_eq!(back.vocabulary(), db.vocabulary());
        assert_eq!(back.document_frequency(5), 1);
        assert!(KeyframeDatabase::read_snapshot(&buf[..buf.len() - 3]).is_err());
        assert!(KeyframeDatabase::read_snapshot(&b"garbage!........"[..]).is_err());
    }
}
