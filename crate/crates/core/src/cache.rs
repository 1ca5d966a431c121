//! Preloaded LPM features: per image and fused layer, only the kept tokens'
//! keys and values.
//!
//! File layout (little-endian):
//!
//! ```text
//! "FPTC" | u32 version = 1 | fingerprint (45 bytes) | u32 record count
//! index:  per record  u32 id length | UTF-8 id | u64 offset | u64 length
//! record: u32 layer count
//!         per layer   u32 layer index | u32 n_sel | n_sel × u32 indices
//!                     | K then V, each [head][token][d_h] f32
//! ```
//!
//! Offsets are absolute. Records are staged in `<path>.tmp` and the final
//! file is assembled once every record is known.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use crate::adapter::{select_layer, FptConfig, SelectedFeatures};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::ViT;

pub const MAGIC: &[u8; 4] = b"FPTC";
pub const VERSION: u32 = 1;

/// Everything that decides the content of a record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fingerprint {
    pub high_res: u32,
    pub patch_size: u32,
    pub lpm_layers: u32,
    pub side_layers: u32,
    pub lpm_dim: u32,
    pub heads: u32,
    pub channels: u32,
    pub token_ratio: f64,
    pub selection: u8,
    pub selection_seed: u64,
}

impl Fingerprint {
    pub const BYTES: usize = 7 * 4 + 8 + 1 + 8;

    pub fn of(cfg: &FptConfig) -> Self {
        Fingerprint {
            high_res: cfg.high_res as u32,
            patch_size: cfg.patch_size as u32,
            lpm_layers: cfg.lpm_layers as u32,
            side_layers: cfg.side_layers as u32,
            lpm_dim: cfg.lpm_dim as u32,
            heads: cfg.heads as u32,
            channels: cfg.channels as u32,
            token_ratio: cfg.token_ratio,
            selection: cfg.selection.code(),
            selection_seed: cfg.selection_seed,
        }
    }

    pub fn to_bytes(&self) -> [u8; Self::BYTES] {
        let mut out = [0u8; Self::BYTES];
        let mut at = 0;
        let mut put = |bytes: &[u8]| {
            out[at..at + bytes.len()].copy_from_slice(bytes);
            at += bytes.len();
        };
        for v in [
            self.high_res,
            self.patch_size,
            self.lpm_layers,
            self.side_layers,
            self.lpm_dim,
            self.heads,
            self.channels,
        ] {
            put(&v.to_le_bytes());
        }
        put(&self.token_ratio.to_bits().to_le_bytes());
        put(&[self.selection]);
        put(&self.selection_seed.to_le_bytes());
        out
    }

    pub fn from_bytes(b: &[u8; Self::BYTES]) -> Self {
        let u32_at = |i: usize| u32::from_le_bytes(b[i * 4..i * 4 + 4].try_into().unwrap());
        Fingerprint {
            high_res: u32_at(0),
            patch_size: u32_at(1),
            lpm_layers: u32_at(2),
            side_layers: u32_at(3),
            lpm_dim: u32_at(4),
            heads: u32_at(5),
            channels: u32_at(6),
            token_ratio: f64::from_bits(u64::from_le_bytes(b[28..36].try_into().unwrap())),
            selection: b[36],
            selection_seed: u64::from_le_bytes(b[37..45].try_into().unwrap()),
        }
    }

    fn head_dim(&self) -> usize {
        (self.lpm_dim / self.heads.max(1)) as usize
    }
}

#[derive(Clone, Debug)]
pub struct CacheRecord {
    pub image_id: String,
    pub layers: Vec<SelectedFeatures>,
}

fn encode_record(layers: &[SelectedFeatures]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for sel in layers {
        out.extend_from_slice(&(sel.layer_index as u32).to_le_bytes());
        out.extend_from_slice(&(sel.indices.len() as u32).to_le_bytes());
        for &i in &sel.indices {
            out.extend_from_slice(&(i as u32).to_le_bytes());
        }
        for t in [&sel.keys, &sel.values] {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn decode_record(bytes: &[u8], fp: &Fingerprint) -> Result<Vec<SelectedFeatures>> {
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::format("cache record truncated"))?;
        pos += n;
        Ok(s)
    };
    let read_u32 = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    let layer_count = read_u32(take(4)?);
    let (heads, dh) = (fp.heads as usize, fp.head_dim());
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let layer_index = read_u32(take(4)?);
        let n_sel = read_u32(take(4)?);
        if n_sel == 0 {
            return Err(Error::format("cache layer with no selected tokens"));
        }
        let indices: Vec<usize> = take(4 * n_sel)?.chunks_exact(4).map(read_u32).collect();
        let mut floats = || -> Result<Tensor> {
            let raw = take(4 * heads * n_sel * dh)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("cached features"));
            }
            Tensor::new(data, &[heads, n_sel, dh])
        };
        let keys = floats()?;
        let values = floats()?;
        layers.push(SelectedFeatures {
            layer_index,
            indices,
            keys,
            values,
        });
    }
    if pos != bytes.len() {
        return Err(Error::format("trailing bytes in cache record"));
    }
    Ok(layers)
}

pub struct CacheWriter {
    path: PathBuf,
    staging: PathBuf,
    records: BufWriter<File>,
    fingerprint: Fingerprint,
    index: Vec<(String, u64, u64)>,
    staged: u64,
}

impl CacheWriter {
    pub fn create(path: impl AsRef<Path>, fingerprint: Fingerprint) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut staging = path.clone().into_os_string();
        staging.push(".tmp");
        let staging = PathBuf::from(staging);
        Ok(CacheWriter {
            records: BufWriter::new(File::create(&staging)?),
            path,
            staging,
            fingerprint,
            index: Vec::new(),
            staged: 0,
        })
    }

    pub fn append(&mut self, record: &CacheRecord) -> Result<()> {
        if self.index.iter().any(|(id, _, _)| *id == record.image_id) {
            return Err(Error::Data(format!("duplicate image id {}", record.image_id)));
        }
        let mut prev = 0;
        for sel in &record.layers {
            if sel.layer_index <= prev {
                return Err(Error::contract("cache layers must be strictly ascending"));
            }
            prev = sel.layer_index;
        }
        let bytes = encode_record(&record.layers);
        self.records.write_all(&bytes)?;
        self.index.push((record.image_id.clone(), self.staged, bytes.len() as u64));
        self.staged += bytes.len() as u64;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Writes header, index and records to the final path.
    pub fn finish(self) -> Result<()> {
        let CacheWriter {
            path,
            staging,
            records,
            fingerprint,
            index,
            ..
        } = self;
        records.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        let index_len: u64 = index.iter().map(|(id, _, _)| 4 + id.len() as u64 + 16).sum();
        let base = 4 + 4 + Fingerprint::BYTES as u64 + 4 + index_len;
        let mut out = BufWriter::new(File::create(&path)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&fingerprint.to_bytes())?;
        out.write_all(&(index.len() as u32).to_le_bytes())?;
        for (id, offset, len) in &index {
            out.write_all(&(id.len() as u32).to_le_bytes())?;
            out.write_all(id.as_bytes())?;
            out.write_all(&(base + offset).to_le_bytes())?;
            out.write_all(&len.to_le_bytes())?;
        }
        std::io::copy(&mut BufReader::new(File::open(&staging)?), &mut out)?;
        out.flush()?;
        fs::remove_file(&staging)?;
        Ok(())
    }
}

/// Random-access reader; safe to share between threads once opened.
pub struct CacheReader {
    file: File,
    fingerprint: Fingerprint,
    ids: Vec<String>,
    index: HashMap<String, (u64, u64)>,
}

impl CacheReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let size = file.metadata()?.len();
        let mut r = BufReader::new(&file);
        let mut head = [0u8; 8];
        r.read_exact(&mut head)?;
        if &head[..4] != MAGIC {
            return Err(Error::format("bad magic, expected FPTC"));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(format!("unsupported cache version {version}")));
        }
        let mut fp = [0u8; Fingerprint::BYTES];
        r.read_exact(&mut fp)?;
        let fingerprint = Fingerprint::from_bytes(&fp);
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let count = u32::from_le_bytes(word) as usize;
        let mut ids = Vec::with_capacity(count);
        let mut index = HashMap::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut word)?;
            let mut id = vec![0u8; u32::from_le_bytes(word) as usize];
            r.read_exact(&mut id)?;
            let id = String::from_utf8(id).map_err(|_| Error::format("image id is not UTF-8"))?;
            let mut pair = [0u8; 16];
            r.read_exact(&mut pair)?;
            let offset = u64::from_le_bytes(pair[..8].try_into().unwrap());
            let len = u64::from_le_bytes(pair[8..].try_into().unwrap());
            if offset.checked_add(len).is_none_or(|end| end > size) {
                return Err(Error::format(format!("record {id} points past the end of the file")));
            }
            ids.push(id.clone());
            index.insert(id, (offset, len));
        }
        Ok(CacheReader {
            file,
            fingerprint,
            ids,
            index,
        })
    }

    /// Opens and refuses a cache built under a different configuration.
    pub fn open_checked(path: impl AsRef<Path>, expected: &Fingerprint) -> Result<Self> {
        let reader = Self::open(path)?;
        reader.check(expected)?;
        Ok(reader)
    }

    pub fn check(&self, expected: &Fingerprint) -> Result<()> {
        if self.fingerprint.to_bytes() != expected.to_bytes() {
            return Err(Error::config(format!(
                "cache was built for {:?}, current configuration is {:?}",
                self.fingerprint, expected
            )));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    /// Image ids in file order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn load_record(&self, image_id: &str) -> Result<Vec<SelectedFeatures>> {
        let &(offset, len) = self
            .index
            .get(image_id)
            .ok_or_else(|| Error::Lookup(format!("image {image_id} not in cache")))?;
        let mut buf = vec![0u8; len as usize];
        self.file.read_exact_at(&mut buf, offset)?;
        decode_record(&buf, &self.fingerprint)
    }

    /// Decodes every record into memory.
    pub fn load_all(&self) -> Result<FeatureTable> {
        let mut table = FeatureTable {
            fingerprint: Some(self.fingerprint),
            ..FeatureTable::default()
        };
        for id in &self.ids {
            table.insert(id.clone(), self.load_record(id)?);
        }
        Ok(table)
    }
}

/// Per-image features for the side network.
pub trait FeatureSource {
    fn features(&self, image_id: &str) -> Result<Vec<SelectedFeatures>>;

    /// Fails when the features were produced under a different configuration.
    fn check(&self, _cfg: &FptConfig) -> Result<()> {
        Ok(())
    }
}

impl FeatureSource for CacheReader {
    fn features(&self, image_id: &str) -> Result<Vec<SelectedFeatures>> {
        self.load_record(image_id)
    }

    fn check(&self, cfg: &FptConfig) -> Result<()> {
        CacheReader::check(self, &Fingerprint::of(cfg))
    }
}

/// In-memory features keyed by image id.
#[derive(Clone, Debug, Default)]
pub struct FeatureTable {
    map: HashMap<String, Vec<SelectedFeatures>>,
    fingerprint: Option<Fingerprint>,
}

impl FeatureTable {
    pub fn insert(&mut self, id: String, layers: Vec<SelectedFeatures>) {
        self.map.insert(id, layers);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl FeatureSource for FeatureTable {
    fn features(&self, image_id: &str) -> Result<Vec<SelectedFeatures>> {
        self.map
            .get(image_id)
            .cloned()
            .ok_or_else(|| Error::Lookup(format!("image {image_id} has no features")))
    }

    fn check(&self, cfg: &FptConfig) -> Result<()> {
        match self.fingerprint {
            Some(fp) if fp.to_bytes() != Fingerprint::of(cfg).to_bytes() => Err(Error::config(
                "features were extracted under a different configuration",
            )),
            _ => Ok(()),
        }
    }
}

/// For the fusion-free baseline: no features at all.
pub struct NoFeatures;

impl FeatureSource for NoFeatures {
    fn features(&self, _: &str) -> Result<Vec<SelectedFeatures>> {
        Ok(Vec::new())
    }
}

/// Computes features on demand from high-resolution images.
pub struct LiveFeatures<'a, F> {
    pub lpm: &'a ViT,
    pub cfg: &'a FptConfig,
    /// Normalized high-resolution image for an id.
    pub image: F,
}

impl<F: Fn(&str) -> Result<Tensor>> FeatureSource for LiveFeatures<'_, F> {
    fn features(&self, image_id: &str) -> Result<Vec<SelectedFeatures>> {
        extract(self.lpm, self.cfg, image_id, &(self.image)(image_id)?)
    }
}

/// One LPM pass and selection for a prepared high-resolution image.
pub fn extract(
    lpm: &ViT,
    cfg: &FptConfig,
    image_id: &str,
    image_high: &Tensor,
) -> Result<Vec<SelectedFeatures>> {
    let mut layers = Vec::with_capacity(cfg.side_layers);
    lpm.lpm_forward_each(image_high, &cfg.tap_layers(), |tap| {
        layers.push(select_layer(&tap, cfg, image_id)?);
        Ok(())
    })?;
    Ok(layers)
}

/// One cache to produce.
#[derive(Clone, Debug)]
pub struct CacheTarget {
    pub cfg: FptConfig,
    pub path: PathBuf,
}

#[derive(Debug, Default)]
pub struct PreloadReport {
    pub written: usize,
    pub failures: Vec<(String, Error)>,
}

/// Runs the frozen LPM once per image and writes every target cache.
/// Targets must agree on everything that shapes the LPM pass; they may
/// differ in selection strategy, seed and token ratio. An item whose image
/// fails to load is reported and skipped.
pub fn preload<I>(items: I, lpm: &ViT, targets: &[CacheTarget]) -> Result<PreloadReport>
where
    I: IntoIterator<Item = (String, Result<Tensor>)>,
{
    let first = targets
        .first()
        .ok_or_else(|| Error::contract("preload needs at least one target"))?;
    for t in targets {
        t.cfg.validate()?;
        if t.cfg.lpm() != lpm.cfg || t.cfg.tap_layers() != first.cfg.tap_layers() {
            return Err(Error::config(
                "every cache target must match the LPM configuration and fused layers",
            ));
        }
    }
    let mut writers = targets
        .iter()
        .map(|t| CacheWriter::create(&t.path, Fingerprint::of(&t.cfg)))
        .collect::<Result<Vec<_>>>()?;
    let mut report = PreloadReport::default();
    for (id, image) in items {
        let mut per_target = vec![Vec::new(); targets.len()];
        let pass = image.and_then(|img| {
            lpm.lpm_forward_each(&img, &first.cfg.tap_layers(), |tap| {
                for (target, layers) in targets.iter().zip(&mut per_target) {
                    layers.push(select_layer(&tap, &target.cfg, &id)?);
                }
                Ok(())
            })
        });
        if let Err(e) = pass {
            report.failures.push((id, e));
            continue;
        }
        for (layers, writer) in per_target.into_iter().zip(&mut writers) {
            writer.append(&CacheRecord {
                image_id: id.clone(),
                layers,
            })?;
        }
        report.written += 1;
    }
    for w in writers {
        w.finish()?;
    }
    Ok(report)
}

/// Payload bytes of one record holding `n_sel` tokens for each of
/// `layers` layers at width `dim`.
pub fn record_bytes(layers: usize, n_sel: usize, dim: usize) -> u64 {
    (4 + layers * (8 + 4 * n_sel + 2 * 4 * n_sel * dim)) as u64
}
