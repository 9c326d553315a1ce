//! Synthetic ad-hoc array data in embedding space.
//!
//! Stands in for a frozen single-channel front-end. Every speaker owns a
//! unit prototype; every utterance perturbs it; every channel sees that
//! utterance vector attenuated by `a(d) = 1/(1+d)` plus noise of standard
//! deviation `sigma0·d`, where `d` is the source–microphone distance in a
//! randomly sized shoebox room. A configurable share of channels is
//! swamped by noise (SNR between -20 and -10 dB). Crops are small jitters
//! of the utterance vector shared by all channels of that utterance.
//!
//! Generation is a pure function of [`SimConfig`]: per-speaker and
//! per-utterance seeds are derived with splitmix64, so utterances can be
//! built in parallel and still come out identical.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::EmbeddingProvider;

/// Channels per utterance: a fixed count or an inclusive range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChannelCount {
    Fixed(u16),
    Range([u16; 2]),
}

impl ChannelCount {
    pub fn bounds(self) -> (u16, u16) {
        match self {
            ChannelCount::Fixed(n) => (n, n),
            ChannelCount::Range([lo, hi]) => (lo, hi),
        }
    }
}

fn d_in() -> usize {
    512
}
fn speakers() -> u32 {
    40
}
fn utterances() -> u32 {
    10
}
fn channels() -> ChannelCount {
    ChannelCount::Fixed(20)
}
fn crops() -> u32 {
    5
}
fn room_side() -> [f64; 2] {
    [5.0, 25.0]
}
fn room_height() -> [f64; 2] {
    [2.7, 4.0]
}
fn source_wall() -> f64 {
    0.2
}
fn source_mic() -> f64 {
    0.3
}
fn t60() -> [f64; 2] {
    [0.2, 0.4]
}
fn noise_snr() -> [f64; 2] {
    [-20.0, -10.0]
}
fn noise_scale() -> f64 {
    0.05
}
fn spread() -> f64 {
    0.6
}
fn jitter() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "d_in")]
    pub d_in: usize,
    #[serde(default = "speakers")]
    pub speakers: u32,
    #[serde(default = "utterances")]
    pub utterances_per_speaker: u32,
    #[serde(default = "channels")]
    pub channels: ChannelCount,
    /// Crops per utterance used by multi-crop scoring.
    #[serde(default = "crops")]
    pub crops: u32,
    #[serde(default = "room_side")]
    pub room_length: [f64; 2],
    #[serde(default = "room_side")]
    pub room_width: [f64; 2],
    #[serde(default = "room_height")]
    pub room_height: [f64; 2],
    #[serde(default = "source_wall")]
    pub min_source_wall: f64,
    #[serde(default = "source_mic")]
    pub min_source_mic: f64,
    /// Reverberation time range; echoed as metadata only.
    #[serde(default = "t60")]
    pub t60: [f64; 2],
    /// Share of channels per utterance that are noise-dominated.
    #[serde(default)]
    pub noise_channel_fraction: f64,
    /// SNR range (dB) of noise-dominated channels.
    #[serde(default = "noise_snr")]
    pub noise_channel_snr_db: [f64; 2],
    /// `sigma0` in `sigma(d) = sigma0·d`.
    #[serde(default = "noise_scale")]
    pub noise_scale: f64,
    /// Within-speaker spread of utterance vectors around the prototype.
    #[serde(default = "spread")]
    pub utterance_spread: f64,
    /// Scale of per-crop jitter.
    #[serde(default = "jitter")]
    pub crop_jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_in == 0 || self.speakers == 0 || self.utterances_per_speaker == 0 || self.crops == 0 {
            return bad("d_in, speakers, utterances_per_speaker and crops must be at least 1");
        }
        let (lo, hi) = self.channels.bounds();
        if lo == 0 || lo > hi {
            return bad("channel range must be nonempty and start at 1 or more");
        }
        for (name, r) in [
            ("room_length", self.room_length),
            ("room_width", self.room_width),
            ("room_height", self.room_height),
            ("t60", self.t60),
            ("noise_channel_snr_db", self.noise_channel_snr_db),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return Err(Error::Config(format!("{name} range is empty")));
            }
        }
        if self.room_length[0] <= 0.0 || self.room_width[0] <= 0.0 || self.room_height[0] <= 0.0 {
            return bad("room dimensions must be positive");
        }
        let margin = 2.0 * self.min_source_wall;
        if self.room_length[0] <= margin || self.room_width[0] <= margin || self.room_height[0] <= margin {
            return bad("rooms too small for the source-wall margin");
        }
        if !(0.0..=1.0).contains(&self.noise_channel_fraction) {
            return bad("noise_channel_fraction must lie in [0, 1]");
        }
        if self.noise_channel_snr_db[1] > -10.0 {
            return bad("noise-dominated channels need SNR at most -10 dB");
        }
        for (name, v) in [
            ("min_source_wall", self.min_source_wall),
            ("min_source_mic", self.min_source_mic),
            ("noise_scale", self.noise_scale),
            ("utterance_spread", self.utterance_spread),
            ("crop_jitter", self.crop_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// One utterance as seen by every microphone.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUtterance {
    pub speaker: u32,
    pub id: u32,
    /// Source–microphone distance per channel, meters.
    pub distances: Vec<f32>,
    /// Per-channel SNR in dB.
    pub snr_db: Vec<f32>,
    pub noise_mask: Vec<bool>,
    pub crops: usize,
    pub d_in: usize,
    /// `C x crops x d_in`, row-major.
    pub embeddings: Vec<f32>,
}

impl SyntheticUtterance {
    pub fn channels(&self) -> usize {
        self.distances.len()
    }

    pub fn embedding(&self, channel: usize, crop: usize) -> &[f32] {
        let start = (channel * self.crops + crop) * self.d_in;
        &self.embeddings[start..start + self.d_in]
    }

    /// `C x d_in` matrix of one crop.
    pub fn crop_matrix(&self, crop: usize) -> Matrix {
        let c = self.channels();
        let mut data = Vec::with_capacity(c * self.d_in);
        for ch in 0..c {
            data.extend(self.embedding(ch, crop).iter().map(|&v| v as f64));
        }
        Matrix::from_vec(c, self.d_in, data).expect("embeddings are finite")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SimConfig,
    pub utterances: Vec<SyntheticUtterance>,
}

impl Dataset {
    pub fn channel_bounds(&self) -> (usize, usize) {
        let lo = self.utterances.iter().map(|u| u.channels()).min().unwrap_or(0);
        let hi = self.utterances.iter().map(|u| u.channels()).max().unwrap_or(0);
        (lo, hi)
    }

    pub fn num_speakers(&self) -> usize {
        let mut ids: Vec<u32> = self.utterances.iter().map(|u| u.speaker).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

impl EmbeddingProvider for Dataset {
    fn num_utterances(&self) -> usize {
        self.utterances.len()
    }

    fn speaker(&self, utterance: usize) -> u32 {
        self.utterances[utterance].speaker
    }

    fn num_crops(&self, utterance: usize) -> usize {
        self.utterances[utterance].crops
    }

    fn channel_matrix(&self, utterance: usize, crop: usize) -> Result<Matrix> {
        let u = self
            .utterances
            .get(utterance)
            .ok_or_else(|| Error::contract(format!("no utterance {utterance}")))?;
        if crop >= u.crops {
            return Err(Error::contract(format!("utterance has {} crops", u.crops)));
        }
        Ok(u.crop_matrix(crop))
    }
}

// ---------------------------------------------------------------------------
// Seeding

/// One step of the splitmix64 generator.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SPEAKER: u64 = 1;
const STREAM_UTTERANCE: u64 = 2;

pub(crate) fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut s = seed;
    let a = splitmix64(&mut s);
    let mut s = a ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    let b = splitmix64(&mut s);
    let mut s = b ^ index;
    splitmix64(&mut s)
}

// ---------------------------------------------------------------------------
// Geometry

#[derive(Debug, Clone, PartialEq)]
pub struct RoomGeometry {
    /// Length, width, height in meters.
    pub room: [f64; 3],
    pub source: [f64; 3],
    pub mics: Vec<[f64; 3]>,
}

impl RoomGeometry {
    pub fn distances(&self) -> Vec<f64> {
        self.mics
            .iter()
            .map(|m| {
                m.iter()
                    .zip(&self.source)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

const MAX_PLACEMENT_TRIES: usize = 1000;

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

/// Samples a room, a source at least `min_source_wall` from every surface,
/// and `channels` microphones at least `min_source_mic` from the source.
pub fn sample_geometry(rng: &mut ChaCha8Rng, cfg: &SimConfig, channels: usize) -> Result<RoomGeometry> {
    let room = [
        uniform(rng, cfg.room_length),
        uniform(rng, cfg.room_width),
        uniform(rng, cfg.room_height),
    ];
    let m = cfg.min_source_wall;
    let source = [
        uniform(rng, [m, room[0] - m]),
        uniform(rng, [m, room[1] - m]),
        uniform(rng, [m, room[2] - m]),
    ];
    let mut mics = Vec::with_capacity(channels);
    for _ in 0..channels {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let p = [
                uniform(rng, [0.0, room[0]]),
                uniform(rng, [0.0, room[1]]),
                uniform(rng, [0.0, room[2]]),
            ];
            let d2: f64 = p.iter().zip(&source).map(|(a, b)| (a - b).powi(2)).sum();
            if d2.sqrt() >= cfg.min_source_mic {
                placed = Some(p);
                break;
            }
        }
        mics.push(placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place a microphone {} m from the source in {MAX_PLACEMENT_TRIES} tries",
                cfg.min_source_mic
            ))
        })?);
    }
    Ok(RoomGeometry { room, source, mics })
}

/// Signal attenuation at distance `d`.
pub fn attenuation(d: f64) -> f64 {
    1.0 / (1.0 + d)
}

/// SNR in dB for attenuation `a` and noise scale `sigma` on unit vectors.
pub fn snr_db(a: f64, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        MAX_SNR_DB
    } else {
        (20.0 * (a / sigma).log10()).min(MAX_SNR_DB)
    }
}

const MAX_SNR_DB: f64 = 100.0;

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn speaker_prototype(cfg: &SimConfig, speaker: u32) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SPEAKER, speaker as u64));
    normalized(gaussian_vec(&mut rng, cfg.d_in, 1.0))
}

/// Builds one utterance; also returns its clean (unit) utterance vector.
pub(crate) fn synthesize_utterance(
    cfg: &SimConfig,
    prototype: &[f64],
    speaker: u32,
    id: u32,
) -> Result<(SyntheticUtterance, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_UTTERANCE, id as u64));
    let d = cfg.d_in;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    let offset = gaussian_vec(&mut rng, d, cfg.utterance_spread * inv_sqrt_d);
    let clean = normalized(prototype.iter().zip(&offset).map(|(p, o)| p + o).collect());

    let (lo, hi) = cfg.channels.bounds();
    let channels = if lo == hi {
        lo as usize
    } else {
        rng.random_range(lo..=hi) as usize
    };
    let geometry = sample_geometry(&mut rng, cfg, channels)?;
    let distances = geometry.distances();

    let n_noise = (cfg.noise_channel_fraction * channels as f64).round() as usize;
    let mut order: Vec<usize> = (0..channels).collect();
    for i in 0..n_noise.min(channels) {
        let j = rng.random_range(i..channels);
        order.swap(i, j);
    }
    let mut noise_mask = vec![false; channels];
    for &c in &order[..n_noise.min(channels)] {
        noise_mask[c] = true;
    }

    let mut gains = Vec::with_capacity(channels);
    let mut snrs = Vec::with_capacity(channels);
    for (c, &dist) in distances.iter().enumerate() {
        let a = attenuation(dist);
        let (sigma, snr) = if noise_mask[c] {
            let snr = uniform(&mut rng, cfg.noise_channel_snr_db);
            (a * 10f64.powf(-snr / 20.0), snr)
        } else {
            let sigma = cfg.noise_scale * dist;
            (sigma, snr_db(a, sigma))
        };
        gains.push((a, sigma));
        snrs.push(snr);
    }

    let crops = cfg.crops as usize;
    let mut embeddings = vec![0f32; channels * crops * d];
    for k in 0..crops {
        let jitter = gaussian_vec(&mut rng, d, cfg.crop_jitter * inv_sqrt_d);
        let crop_vec: Vec<f64> = clean.iter().zip(&jitter).map(|(u, j)| u + j).collect();
        for (c, &(a, sigma)) in gains.iter().enumerate() {
            let start = (c * crops + k) * d;
            for (t, slot) in embeddings[start..start + d].iter_mut().enumerate() {
                let noise = if sigma > 0.0 {
                    rng.sample::<f64, _>(StandardNormal) * sigma * inv_sqrt_d
                } else {
                    0.0
                };
                *slot = (a * crop_vec[t] + noise) as f32;
            }
        }
    }

    let utt = SyntheticUtterance {
        speaker,
        id,
        distances: distances.iter().map(|&v| v as f32).collect(),
        snr_db: snrs.iter().map(|&v| v as f32).collect(),
        noise_mask,
        crops,
        d_in: d,
        embeddings,
    };
    Ok((utt, clean))
}

/// Generates a full dataset; a pure function of `cfg` (seed included).
pub fn generate(cfg: &SimConfig) -> Result<Dataset> {
    cfg.validate()?;
    let prototypes: Vec<Vec<f64>> = (0..cfg.speakers)
        .into_par_iter()
        .map(|s| speaker_prototype(cfg, s))
        .collect();
    let per = cfg.utterances_per_speaker;
    let total = cfg.speakers as u64 * per as u64;
    if total > u32::MAX as u64 {
        return Err(Error::Config("too many utterances for u32 ids".into()));
    }
    let utterances = (0..total as u32)
        .into_par_iter()
        .map(|id| {
            let speaker = id / per;
            synthesize_utterance(cfg, &prototypes[speaker as usize], speaker, id).map(|(u, _)| u)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: cfg.clone(),
        utterances,
    })
}

// ---------------------------------------------------------------------------
// Dataset files
//
// b"AFDS", u32 version, u32 header length, JSON header, then one record per
// utterance: speaker u32, id u32, C u16, distances C×f32, SNRs C×f32,
// noise mask C×u8, embeddings C×crops×d_in f32. All little-endian.

const DS_MAGIC: &[u8; 4] = b"AFDS";
pub const DS_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    config: SimConfig,
    speakers: usize,
    utterances: usize,
    min_channels: usize,
    max_channels: usize,
    crops: usize,
    d_in: usize,
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let (min_channels, max_channels) = ds.channel_bounds();
    let crops = ds.config.crops as usize;
    let d_in = ds.config.d_in;
    let header = serde_json::to_vec(&DatasetHeader {
        config: ds.config.clone(),
        speakers: ds.num_speakers(),
        utterances: ds.utterances.len(),
        min_channels,
        max_channels,
        crops,
        d_in,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(DS_MAGIC);
    out.extend_from_slice(&DS_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for u in &ds.utterances {
        if u.crops != crops || u.d_in != d_in {
            return Err(Error::contract(format!(
                "utterance {} has crops/d_in {}x{}, dataset declares {crops}x{d_in}",
                u.id, u.crops, u.d_in
            )));
        }
        let c = u16::try_from(u.channels())
            .map_err(|_| Error::contract("more than 65535 channels"))?;
        out.extend_from_slice(&u.speaker.to_le_bytes());
        out.extend_from_slice(&u.id.to_le_bytes());
        out.extend_from_slice(&c.to_le_bytes());
        for v in u.distances.iter().chain(&u.snr_db) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(u.noise_mask.iter().map(|&m| m as u8));
        for v in &u.embeddings {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let at = self.pos as u64;
        let v: Vec<f32> = self
            .take(n * 4, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::format(at, format!("non-finite value in {what}")));
        }
        Ok(v)
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != DS_MAGIC {
        return Err(Error::format(0, "bad magic, not a dataset file"));
    }
    let version = r.u32("version")?;
    if version != DS_VERSION {
        return Err(Error::format(
            4,
            format!("dataset version {version}, this build reads {DS_VERSION}"),
        ));
    }
    let header_len = r.u32("header length")? as usize;
    let header: DatasetHeader = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| Error::format(12, format!("bad header: {e}")))?;
    let (crops, d_in) = (header.crops, header.d_in);
    if crops == 0 || d_in == 0 {
        return Err(Error::format(12, "header declares zero crops or zero width"));
    }
    let mut utterances = Vec::with_capacity(header.utterances);
    for _ in 0..header.utterances {
        let start = r.pos as u64;
        let speaker = r.u32("speaker id")?;
        let id = r.u32("utterance id")?;
        let c = r.u16("channel count")? as usize;
        if c < header.min_channels || c > header.max_channels || c == 0 {
            return Err(Error::format(
                start + 8,
                format!(
                    "utterance {id} has {c} channels, header allows {}..={}",
                    header.min_channels, header.max_channels
                ),
            ));
        }
        let distances = r.f32s(c, "distances")?;
        let snr_db = r.f32s(c, "SNRs")?;
        let mask_at = r.pos as u64;
        let noise_mask = r
            .take(c, "noise mask")?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::format(mask_at, format!("noise mask byte {b}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let embeddings = r.f32s(c * crops * d_in, "embeddings")?;
        utterances.push(SyntheticUtterance {
            speaker,
            id,
            distances,
            snr_db,
            noise_mask,
            crops,
            d_in,
            embeddings,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes after the last record", bytes.len() - r.pos),
        ));
    }
    Ok(Dataset {
        config: header.config,
        utterances,
    })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<u64> {
    let bytes = encode_dataset(ds)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(bytes.len() as u64)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}
