//! Disease response maps: dense H x W x K activation maps linking report
//! content to image regions, produced by pluggable providers.
//!
//! The synthetic provider is the desk-scale default: for every disease the
//! report labels positive it places a unit-peak Gaussian blob at a position
//! derived deterministically from the image reference, the disease index,
//! and a salt. The remote provider calls a vision-language grounder over
//! HTTP and normalizes its output per channel into [0, 1].

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::http::{post_json, HttpConfig};
use crate::labeler::{DiseaseStatus, DiseaseVocabulary, LabelerBackend, RuleLabeler};
use crate::{Error, Result};

/// Dense H x W x K activation maps, all values finite and in [0, 1].
/// Stored channel-major: channel k occupies `data[k*h*w .. (k+1)*h*w]`
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMapSet {
    h: usize,
    w: usize,
    k: usize,
    data: Vec<f64>,
}

impl ResponseMapSet {
    pub fn new(h: usize, w: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if h < 1 || w < 1 || k < 1 {
            return Err(Error::Validation(format!(
                "map dimensions must be at least 1, got {h}x{w}x{k}"
            )));
        }
        if data.len() != h * w * k {
            return Err(Error::Arity(format!(
                "map data has {} values, expected {}",
                data.len(),
                h * w * k
            )));
        }
        for &v in &data {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!(
                    "map values must be finite and in [0,1], got {v}"
                )));
            }
        }
        Ok(ResponseMapSet { h, w, k, data })
    }

    pub fn zeros(h: usize, w: usize, k: usize) -> Self {
        ResponseMapSet { h, w, k, data: vec![0.0; h * w * k] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.k
    }

    pub fn pixels_per_channel(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        &self.data[k * self.h * self.w..(k + 1) * self.h * self.w]
    }

    pub fn channel_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.h * self.w..(k + 1) * self.h * self.w]
    }

    pub fn same_shape(&self, other: &ResponseMapSet) -> bool {
        self.h == other.h && self.w == other.w && self.k == other.k
    }

    /// Reorder into the H x W x K row-major wire layout as f32.
    pub fn to_wire(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.h {
            for x in 0..self.w {
                for k in 0..self.k {
                    out.push(self.data[k * self.h * self.w + y * self.w + x] as f32);
                }
            }
        }
        out
    }

    /// Build from the H x W x K row-major wire layout.
    pub fn from_wire(h: usize, w: usize, k: usize, wire: &[f32]) -> Result<Self> {
        if wire.len() != h * w * k {
            return Err(Error::Arity(format!(
                "wire payload has {} values, expected {}",
                wire.len(),
                h * w * k
            )));
        }
        let mut data = vec![0.0f64; h * w * k];
        for y in 0..h {
            for x in 0..w {
                for c in 0..k {
                    data[c * h * w + y * w + x] = wire[(y * w + x) * k + c] as f64;
                }
            }
        }
        ResponseMapSet::new(h, w, k, data)
    }
}

/// How the synthetic provider obtains the status vector that drives blob
/// placement: which labeler reads the report text.
#[derive(Clone)]
pub struct StatusSource {
    pub labeler: Arc<dyn LabelerBackend>,
}

impl Default for StatusSource {
    fn default() -> Self {
        StatusSource { labeler: Arc::new(RuleLabeler) }
    }
}

impl std::fmt::Debug for StatusSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("StatusSource")
    }
}

/// Configuration of the synthetic grounder.
#[derive(Debug, Clone)]
pub struct SyntheticGrounderConfig {
    pub h: usize,
    pub w: usize,
    /// Spatial standard deviation of each blob, in pixels.
    pub blob_sigma: f64,
    pub seed_salt: u64,
    pub status_source: StatusSource,
}

impl Default for SyntheticGrounderConfig {
    fn default() -> Self {
        SyntheticGrounderConfig {
            h: 16,
            w: 16,
            blob_sigma: 2.0,
            seed_salt: 0,
            status_source: StatusSource::default(),
        }
    }
}

impl SyntheticGrounderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h < 4 || self.w < 4 {
            return Err(Error::Config(format!(
                "map resolution must be at least 4x4, got {}x{}",
                self.h, self.w
            )));
        }
        if !(self.blob_sigma > 0.0) {
            return Err(Error::Config(format!(
                "blob_sigma must be positive, got {}",
                self.blob_sigma
            )));
        }
        Ok(())
    }
}

/// Produces response maps for an (image, report) pair.
pub trait GroundingBackend: Send + Sync {
    fn ground(
        &self,
        image_ref: Option<&str>,
        report: &str,
        vocab: &DiseaseVocabulary,
    ) -> Result<ResponseMapSet>;
}

/// Stable 64-bit string hash (FNV-1a); std hashers are not stable across
/// releases and the blob layout must be.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic synthetic grounder. Pure: identical inputs give bitwise
/// identical maps.
#[derive(Debug, Clone, Default)]
pub struct SyntheticGrounder {
    pub cfg: SyntheticGrounderConfig,
}

impl SyntheticGrounder {
    pub fn new(cfg: SyntheticGrounderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SyntheticGrounder { cfg })
    }

    fn blob_center(&self, anchor: &str, disease: usize) -> (usize, usize) {
        let mixed = splitmix64(
            fnv1a64(anchor.as_bytes())
                ^ (disease as u64).wrapping_mul(0x9e3779b97f4a7c15)
                ^ self.cfg.seed_salt.wrapping_mul(0xb5297a4d3a2dd93d),
        );
        // Keep centers off the border so blobs stay visibly inside the map
        // (h, w >= 4 guarantees a non-empty range).
        let cy = 2 + (mixed % (self.cfg.h as u64 - 3)) as usize;
        let cx = 2 + ((mixed >> 32) % (self.cfg.w as u64 - 3)) as usize;
        (cy, cx)
    }
}

impl GroundingBackend for SyntheticGrounder {
    fn ground(
        &self,
        image_ref: Option<&str>,
        report: &str,
        vocab: &DiseaseVocabulary,
    ) -> Result<ResponseMapSet> {
        let statuses = self.cfg.status_source.labeler.extract(report, vocab)?;
        if statuses.len() != vocab.len() {
            return Err(Error::Protocol(format!(
                "status source returned {} statuses for {} labels",
                statuses.len(),
                vocab.len()
            )));
        }
        let (h, w) = (self.cfg.h, self.cfg.w);
        let mut maps = ResponseMapSet::zeros(h, w, vocab.len());
        let anchor = image_ref.unwrap_or("");
        let two_sigma_sq = 2.0 * self.cfg.blob_sigma * self.cfg.blob_sigma;
        for k in 0..vocab.len() {
            if statuses.get(k) != DiseaseStatus::Positive {
                continue;
            }
            let (cy, cx) = self.blob_center(anchor, k);
            let channel = maps.channel_mut(k);
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 - cy as f64;
                    let dx = x as f64 - cx as f64;
                    channel[y * w + x] = (-(dy * dy + dx * dx) / two_sigma_sq).exp();
                }
            }
        }
        Ok(maps)
    }
}

/// Produce response maps for an (image, report) pair via the configured
/// backend, enforcing the shared output contract.
pub fn ground(
    image_ref: Option<&str>,
    report: &str,
    vocab: &DiseaseVocabulary,
    backend: &dyn GroundingBackend,
) -> Result<ResponseMapSet> {
    let maps = backend.ground(image_ref, report, vocab)?;
    if maps.channels() != vocab.len() {
        return Err(Error::Protocol(format!(
            "grounder returned {} channels for {} labels",
            maps.channels(),
            vocab.len()
        )));
    }
    Ok(maps)
}

/// Remote grounder speaking
/// `POST {"image_ref", "report", "labels", "h", "w"} -> {"maps": [[[f]]]}`
/// with maps in H x W x K row-major order. Outputs are min-max normalized
/// per channel; an all-constant channel maps to all-zero.
pub struct RemoteGrounder {
    pub endpoint: String,
    pub h: usize,
    pub w: usize,
    pub http: HttpConfig,
}

#[derive(Serialize)]
struct RemoteGroundRequest<'a> {
    image_ref: Option<&'a str>,
    report: &'a str,
    labels: &'a [String],
    h: usize,
    w: usize,
}

#[derive(Deserialize)]
struct RemoteGroundResponse {
    maps: Vec<Vec<Vec<f64>>>,
}

impl GroundingBackend for RemoteGrounder {
    fn ground(
        &self,
        image_ref: Option<&str>,
        report: &str,
        vocab: &DiseaseVocabulary,
    ) -> Result<ResponseMapSet> {
        let request = RemoteGroundRequest {
            image_ref,
            report,
            labels: vocab.labels(),
            h: self.h,
            w: self.w,
        };
        let response: RemoteGroundResponse = post_json(&self.endpoint, &request, &self.http)?;
        let k = vocab.len();
        if response.maps.len() != self.h {
            return Err(Error::Protocol(format!(
                "remote grounder returned {} rows, expected {}",
                response.maps.len(),
                self.h
            )));
        }
        let mut data = vec![0.0f64; self.h * self.w * k];
        for (y, row) in response.maps.iter().enumerate() {
            if row.len() != self.w {
                return Err(Error::Protocol(format!(
                    "remote grounder row {y} has {} columns, expected {}",
                    row.len(),
                    self.w
                )));
            }
            for (x, cell) in row.iter().enumerate() {
                if cell.len() != k {
                    return Err(Error::Protocol(format!(
                        "remote grounder cell ({y},{x}) has {} channels, expected {k}",
                        cell.len()
                    )));
                }
                for (c, &v) in cell.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::Protocol(format!(
                            "remote grounder returned non-finite value at ({y},{x},{c})"
                        )));
                    }
                    data[c * self.h * self.w + y * self.w + x] = v;
                }
            }
        }
        // Per-channel min-max normalization into [0,1].
        let hw = self.h * self.w;
        for c in 0..k {
            let channel = &mut data[c * hw..(c + 1) * hw];
            let min = channel.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = channel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max > min {
                for v in channel.iter_mut() {
                    *v = (*v - min) / (max - min);
                }
            } else {
                channel.fill(0.0);
            }
        }
        ResponseMapSet::new(self.h, self.w, k, data)
    }
}

const CACHE_MAGIC: &[u8; 4] = b"DRMC";

/// On-disk map cache: one binary file per (study anchor, report hash) with
/// header {H, W, K} followed by the float32 array, little-endian, in
/// H x W x K row-major order.
pub struct MapCache {
    dir: PathBuf,
}

impl MapCache {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(MapCache { dir: dir.to_path_buf() })
    }

    fn entry_path(&self, anchor: &str, report: &str) -> PathBuf {
        let name = format!(
            "{:016x}-{:016x}.drm",
            fnv1a64(anchor.as_bytes()),
            fnv1a64(report.as_bytes())
        );
        self.dir.join(name)
    }

    pub fn get(&self, anchor: &str, report: &str) -> Result<Option<ResponseMapSet>> {
        let path = self.entry_path(anchor, report);
        if !path.exists() {
            return Ok(None);
        }
        let mut file = std::fs::File::open(&path)?;
        binio::expect_magic(&mut file, CACHE_MAGIC, "map cache entry")?;
        let h = binio::read_u32(&mut file)? as usize;
        let w = binio::read_u32(&mut file)? as usize;
        let k = binio::read_u32(&mut file)? as usize;
        let mut wire = vec![0f32; h * w * k];
        let mut bytes = vec![0u8; wire.len() * 4];
        file.read_exact(&mut bytes)?;
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            wire[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        Ok(Some(ResponseMapSet::from_wire(h, w, k, &wire)?))
    }

    pub fn put(&self, anchor: &str, report: &str, maps: &ResponseMapSet) -> Result<()> {
        let path = self.entry_path(anchor, report);
        let mut file = std::fs::File::create(&path)?;
        file.write_all(CACHE_MAGIC)?;
        binio::write_u32(&mut file, maps.height() as u32)?;
        binio::write_u32(&mut file, maps.width() as u32)?;
        binio::write_u32(&mut file, maps.channels() as u32)?;
        for v in maps.to_wire() {
            binio::write_f32(&mut file, v)?;
        }
        Ok(())
    }
}

/// Wraps a backend with the on-disk cache.
pub struct CachedGrounder<B: GroundingBackend> {
    pub inner: B,
    pub cache: MapCache,
}

impl<B: GroundingBackend> GroundingBackend for CachedGrounder<B> {
    fn ground(
        &self,
        image_ref: Option<&str>,
        report: &str,
        vocab: &DiseaseVocabulary,
    ) -> Result<ResponseMapSet> {
        let anchor = image_ref.unwrap_or("");
        if let Some(maps) = self.cache.get(anchor, report)? {
            return Ok(maps);
        }
        let maps = self.inner.ground(image_ref, report, vocab)?;
        self.cache.put(anchor, report, &maps)?;
        Ok(maps)
    }
}
