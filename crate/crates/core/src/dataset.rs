//! CIFAR-10 binary ingestion, channel statistics and the local cache file.
//!
//! Records are 3,073 bytes: one label byte, then 1,024 red, 1,024 green and
//! 1,024 blue bytes, each plane row-major. Pixels are kept channel-planar
//! (`C×H×W`) as `f32` in `[0, 1]`.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const PLANE: usize = SIDE * SIDE;
pub const IMAGE_LEN: usize = CHANNELS * PLANE;
pub const RECORD_BYTES: usize = 1 + IMAGE_LEN;
pub const NUM_CLASSES: usize = 10;

pub const TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const TEST_FILE: &str = "test_batch.bin";

pub const OFFICIAL_TRAIN_LEN: usize = 50_000;
pub const OFFICIAL_TEST_LEN: usize = 10_000;

const CACHE_MAGIC: &[u8; 8] = b"DAINVDS\0";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub seed_id: usize,
    pub label: u8,
    /// `3×32×32`, channel-planar, values in `[0, 1]`.
    pub pixels: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl ChannelStats {
    /// Mean 0, std 1: normalization becomes the identity.
    pub fn identity() -> Self {
        ChannelStats { mean: [0.0; CHANNELS], std: [1.0; CHANNELS] }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
    pub channel_stats: ChannelStats,
}

impl Dataset {
    pub fn new(train: Vec<ImageRecord>, test: Vec<ImageRecord>) -> Result<Self> {
        let channel_stats = compute_channel_stats(&train)?;
        Ok(Dataset { train, test, channel_stats })
    }

    /// Loads the five training files and the test file from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut train = Vec::new();
        for name in TRAIN_FILES {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let offset = train.len();
            let mut records = parse_cifar10_binary(&bytes)?;
            for r in &mut records {
                r.seed_id += offset;
            }
            train.extend(records);
        }
        let path = dir.join(TEST_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let test = parse_cifar10_binary(&bytes)?;
        Dataset::new(train, test)
    }

    /// True when split sizes match the official distribution.
    pub fn is_official(&self) -> bool {
        self.train.len() == OFFICIAL_TRAIN_LEN && self.test.len() == OFFICIAL_TEST_LEN
    }

    /// Keeps the first `train` / `test` records of each split (0 keeps all)
    /// and recomputes channel statistics on the retained training records.
    pub fn subset(mut self, train: usize, test: usize) -> Result<Self> {
        if train > 0 {
            self.train.truncate(train);
        }
        if test > 0 {
            self.test.truncate(test);
        }
        Dataset::new(self.train, self.test)
    }
}

pub fn dataset_files_present(dir: &Path) -> bool {
    TRAIN_FILES.iter().chain(std::iter::once(&TEST_FILE)).all(|f| dir.join(f).is_file())
}

pub fn parse_cifar10_binary(bytes: &[u8]) -> Result<Vec<ImageRecord>> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::MalformedFile(format!("length {} is not a multiple of {RECORD_BYTES}", bytes.len())));
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(index, chunk)| {
            let label = chunk[0];
            if usize::from(label) >= NUM_CLASSES {
                return Err(Error::CorruptRecord { index, label });
            }
            let pixels = chunk[1..].iter().map(|&b| f32::from(b) / 255.0).collect();
            Ok(ImageRecord { seed_id: index, label, pixels })
        })
        .collect()
}

/// Encodes records back into the official 3,073-byte layout. Pixels are
/// rounded to the nearest byte.
pub fn encode_cifar10_binary(records: &[ImageRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * RECORD_BYTES);
    for r in records {
        out.push(r.label);
        out.extend(r.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    out
}

/// Per-channel mean and population standard deviation.
pub fn compute_channel_stats(train: &[ImageRecord]) -> Result<ChannelStats> {
    if train.is_empty() {
        return Err(Error::EmptyInput("channel statistics need at least one image"));
    }
    let mut sum = [0.0f64; CHANNELS];
    let mut sum_sq = [0.0f64; CHANNELS];
    for r in train {
        for (c, plane) in r.pixels.chunks_exact(PLANE).enumerate() {
            for &p in plane {
                let p = f64::from(p);
                sum[c] += p;
                sum_sq[c] += p * p;
            }
        }
    }
    let n = (train.len() * PLANE) as f64;
    let mut stats = ChannelStats { mean: [0.0; CHANNELS], std: [0.0; CHANNELS] };
    for c in 0..CHANNELS {
        let mean = sum[c] / n;
        let var = (sum_sq[c] / n - mean * mean).max(0.0);
        // Values are bytes/255: a true non-constant channel has variance far above rounding noise.
        if var <= 1e-12 {
            return Err(Error::DegenerateChannel { channel: c });
        }
        stats.mean[c] = mean;
        stats.std[c] = var.sqrt();
    }
    Ok(stats)
}

/// `out[c] = (in[c] - mean[c]) / std[c]` for a channel-planar image.
pub fn normalize(image: &[f32], stats: &ChannelStats) -> Vec<f32> {
    let mut out = image.to_vec();
    normalize_in_place(&mut out, stats);
    out
}

pub fn normalize_in_place(image: &mut [f32], stats: &ChannelStats) {
    assert_eq!(image.len(), IMAGE_LEN);
    for (c, plane) in image.chunks_exact_mut(PLANE).enumerate() {
        let (mean, std) = (stats.mean[c], stats.std[c]);
        for p in plane {
            *p = ((f64::from(*p) - mean) / std) as f32;
        }
    }
}

/// Looks up a record by seed id; splits are stored sorted by seed id.
/// Procedural 10-class images: class-dependent stripe orientation and
/// colour, a randomly placed blob, and pixel noise. Seed ids start at
/// `first_id`.
pub fn synthetic_records(count: usize, seed: u64, first_id: usize) -> Vec<ImageRecord> {
    let mut rng = crate::rng::stream(seed, "synthetic", first_id as u64, 0);
    (0..count)
        .map(|i| {
            let label = (i % NUM_CLASSES) as u8;
            let angle = f64::from(label) * std::f64::consts::PI / NUM_CLASSES as f64;
            let (sin, cos) = angle.sin_cos();
            let freq = 0.35 + 0.05 * f64::from(label % 3);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let tint = [
                0.5 + 0.3 * (f64::from(label) * 0.9).cos(),
                0.5 + 0.3 * (f64::from(label) * 1.7).sin(),
                0.5 + 0.3 * (f64::from(label) * 2.3).cos(),
            ];
            let (bx, by): (f64, f64) = (rng.random_range(6.0..26.0), rng.random_range(6.0..26.0));
            let mut pixels = vec![0.0f32; IMAGE_LEN];
            for c in 0..CHANNELS {
                for y in 0..SIDE {
                    for x in 0..SIDE {
                        let (xf, yf) = (x as f64, y as f64);
                        let stripe = (freq * (xf * cos + yf * sin) + phase).sin();
                        let blob = (-((xf - bx).powi(2) + (yf - by).powi(2)) / 18.0).exp();
                        let noise: f64 = rng.random_range(-0.05..0.05);
                        let v = tint[c] + 0.25 * stripe * tint[(c + 1) % CHANNELS] + 0.3 * blob - 0.15 + noise;
                        pixels[c * PLANE + y * SIDE + x] = v.clamp(0.0, 1.0) as f32;
                    }
                }
            }
            ImageRecord { seed_id: first_id + i, label, pixels }
        })
        .collect()
}

pub fn find_seed(split: &[ImageRecord], seed_id: usize) -> Result<&ImageRecord> {
    match split.get(seed_id) {
        Some(r) if r.seed_id == seed_id => Ok(r),
        _ => split
            .binary_search_by_key(&seed_id, |r| r.seed_id)
            .map(|i| &split[i])
            .map_err(|_| Error::UnknownSeed(seed_id)),
    }
}

// Cache layout, all integers little-endian:
//   magic "DAINVDS\0" | version u32 | train count u64 | test count u64
//   then per record (train first): seed_id u64 | label u8 | 3,072 × f32
pub fn write_cache(path: &Path, train: &[ImageRecord], test: &[ImageRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(CACHE_MAGIC).map_err(io)?;
    w.write_all(&CACHE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(train.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(test.len() as u64).to_le_bytes()).map_err(io)?;
    for r in train.iter().chain(test) {
        w.write_all(&(r.seed_id as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&[r.label]).map_err(io)?;
        for p in &r.pixels {
            w.write_all(&p.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_cache(path: &Path) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    let bad = |reason: &str| Error::Cache { path: PathBuf::from(path), reason: reason.to_string() };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; 28];
    r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    if &header[..8] != CACHE_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let n_train = u64::from_le_bytes(header[12..20].try_into().unwrap()) as usize;
    let n_test = u64::from_le_bytes(header[20..28].try_into().unwrap()) as usize;
    let mut record = vec![0u8; 9 + 4 * IMAGE_LEN];
    let mut read_split = |n: usize| -> Result<Vec<ImageRecord>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut record).map_err(|_| bad("truncated payload"))?;
            let seed_id = u64::from_le_bytes(record[..8].try_into().unwrap()) as usize;
            let label = record[8];
            if usize::from(label) >= NUM_CLASSES {
                return Err(bad("label out of range"));
            }
            let pixels = record[9..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            out.push(ImageRecord { seed_id, label, pixels });
        }
        Ok(out)
    };
    let train = read_split(n_train)?;
    let test = read_split(n_test)?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe).map_err(|e| Error::io(path, e))? != 0 {
        return Err(bad("trailing bytes after payload"));
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_records_are_valid_and_reproducible() {
        let a = synthetic_records(20, 3, 100);
        assert_eq!(a, synthetic_records(20, 3, 100));
        assert_eq!(a[0].seed_id, 100);
        assert_eq!(a[13].label, 3);
        assert!(a.iter().all(|r| r.pixels.iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(compute_channel_stats(&a).is_ok());
        let bytes = encode_cifar10_binary(&a);
        let back = parse_cifar10_binary(&bytes).unwrap();
        assert_eq!(back.len(), 20);
        assert_eq!(back[5].label, a[5].label);
    }

    fn record(label: u8, byte: u8) -> Vec<u8> {
        let mut v = vec![label];
        v.extend(std::iter::repeat_n(byte, IMAGE_LEN));
        v
    }

    #[test]
    fn official_file_size() {
        assert_eq!(10_000 * RECORD_BYTES, 30_730_000);
    }

    #[test]
    fn parses_max_byte_record() {
        let recs = parse_cifar10_binary(&record(0, 255)).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].label, 0);
        assert!(recs[0].pixels.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn empty_input_gives_no_records() {
        assert!(parse_cifar10_binary(&[]).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_length_and_label() {
        let mut bytes = record(3, 7);
        bytes.pop();
        assert!(matches!(parse_cifar10_binary(&bytes), Err(Error::MalformedFile(_))));
        let mut bytes = record(3, 7);
        bytes.extend(record(10, 7));
        assert!(matches!(parse_cifar10_binary(&bytes), Err(Error::CorruptRecord { index: 1, label: 10 })));
    }

    #[test]
    fn channel_planar_layout() {
        let mut bytes = vec![4u8];
        bytes.extend(std::iter::repeat_n(0u8, PLANE));
        bytes.extend(std::iter::repeat_n(255u8, PLANE));
        bytes.extend(std::iter::repeat_n(51u8, PLANE));
        let r = &parse_cifar10_binary(&bytes).unwrap()[0];
        assert_eq!(r.pixels[0], 0.0);
        assert_eq!(r.pixels[PLANE], 1.0);
        assert_eq!(r.pixels[2 * PLANE + 17], 0.2);
    }

    #[test]
    fn constant_channel_is_degenerate() {
        let recs = parse_cifar10_binary(&[record(1, 128), record(2, 128)].concat()).unwrap();
        assert!(matches!(compute_channel_stats(&recs), Err(Error::DegenerateChannel { channel: 0 })));
        assert!(matches!(compute_channel_stats(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn two_point_distribution_stats() {
        let recs = parse_cifar10_binary(&[record(1, 0), record(2, 255)].concat()).unwrap();
        let s = compute_channel_stats(&recs).unwrap();
        for c in 0..CHANNELS {
            assert!((s.mean[c] - 0.5).abs() < 1e-12);
            assert!((s.std[c] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_arithmetic() {
        let stats = ChannelStats { mean: [0.5; 3], std: [0.25; 3] };
        let mut img = vec![0.5f32; IMAGE_LEN];
        img[0] = 0.75;
        img[1] = 1.0;
        let out = normalize(&img, &stats);
        assert_eq!(out[0], 1.0);
        assert_eq!(out[1], 2.0);
        assert_eq!(out[2], 0.0);
    }

    #[test]
    fn find_seed_handles_offsets() {
        let mut recs = parse_cifar10_binary(&[record(1, 0), record(2, 9)].concat()).unwrap();
        recs[0].seed_id = 10;
        recs[1].seed_id = 12;
        assert_eq!(find_seed(&recs, 12).unwrap().label, 2);
        assert!(matches!(find_seed(&recs, 11), Err(Error::UnknownSeed(11))));
    }
}
