//! File formats and data generation: MXT1 tensor files, MXC1 checkpoints,
//! the JSON-lines manifest, and a deterministic synthetic place generator
//! for desk-scale experiments.
//!
//! MXT1 layout: magic `MXT1`, u32 LE rank, rank × u64 LE dims, row-major
//! f32 LE data. MXC1 layout: magic `MXC1`, u32 LE version, u32 LE entry
//! count, per entry (u32 LE name length, UTF-8 name, MXT1 blob), then a
//! u32 LE length-prefixed plain-text config record. Both readers reject
//! wrong magic, bad versions, truncation, and trailing bytes.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::aggregator::{MixVprConfig, MixVprParams};
use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

const TENSOR_MAGIC: &[u8; 4] = b"MXT1";
const CHECKPOINT_MAGIC: &[u8; 4] = b"MXC1";
const CHECKPOINT_VERSION: u32 = 1;

/// Largest rank the tensor decoder accepts; a guard against garbage
/// headers allocating absurd dimension lists.
const MAX_RANK: u32 = 32;

// ── MXT1 tensor blobs ───────────────────────────────────────────────

/// Encodes one tensor into a writer (the embedded-blob form used by both
/// `.mxt` files and checkpoint entries).
pub fn write_tensor_to<W: Write>(w: &mut W, t: &Tensor<f32>) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

/// Decodes one tensor from a reader, leaving the stream positioned just
/// past the blob.
pub fn read_tensor_from<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic, "tensor magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad tensor magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(TENSOR_MAGIC)
        )));
    }
    let mut u32buf = [0u8; 4];
    read_exact_or_truncated(r, &mut u32buf, "tensor rank")?;
    let rank = u32::from_le_bytes(u32buf);
    if rank > MAX_RANK {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    let mut u64buf = [0u8; 8];
    for _ in 0..rank {
        read_exact_or_truncated(r, &mut u64buf, "tensor dims")?;
        let d = u64::from_le_bytes(u64buf);
        dims.push(usize::try_from(d).map_err(|_| {
            Error::Format(format!("tensor dimension {d} does not fit this platform"))
        })?);
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("tensor dims {dims:?} overflow")))?;
    let mut data = vec![0f32; numel];
    for v in &mut data {
        read_exact_or_truncated(r, &mut u32buf, "tensor data")?;
        *v = f32::from_le_bytes(u32buf);
    }
    Tensor::new(dims, data)
}

fn expect_eof<R: Read>(r: &mut R, what: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Format(format!("trailing bytes after {what}"))),
    }
}

/// Writes a standalone `.mxt` tensor file.
pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

/// Reads a standalone `.mxt` tensor file; the blob must span the whole
/// file.
pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tensor_from(&mut r)?;
    expect_eof(&mut r, "tensor payload")?;
    Ok(t)
}

// ── MXC1 checkpoints ────────────────────────────────────────────────

/// Writes a checkpoint: named tensors plus a flat-text config record.
pub fn save_checkpoint(path: &Path, config_text: &str, tensors: &[(String, &Tensor<f32>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        write_tensor_to(&mut w, t)?;
    }
    let cfg = config_text.as_bytes();
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg)?;
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back as (config text, named tensors), entries in
/// file order.
pub fn load_checkpoint(path: &Path) -> Result<(String, Vec<(String, Tensor<f32>)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, "checkpoint magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(CHECKPOINT_MAGIC)
        )));
    }
    let mut u32buf = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut u32buf, "checkpoint version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    read_exact_or_truncated(&mut r, &mut u32buf, "checkpoint entry count")?;
    let count = u32::from_le_bytes(u32buf);
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        read_exact_or_truncated(&mut r, &mut u32buf, "entry name length")?;
        let len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; len];
        read_exact_or_truncated(&mut r, &mut name, "entry name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("entry name is not valid UTF-8".into()))?;
        let t = read_tensor_from(&mut r)?;
        tensors.push((name, t));
    }
    read_exact_or_truncated(&mut r, &mut u32buf, "config record length")?;
    let len = u32::from_le_bytes(u32buf) as usize;
    let mut cfg = vec![0u8; len];
    read_exact_or_truncated(&mut r, &mut cfg, "config record")?;
    let cfg = String::from_utf8(cfg)
        .map_err(|_| Error::Format("config record is not valid UTF-8".into()))?;
    expect_eof(&mut r, "checkpoint payload")?;
    Ok((cfg, tensors))
}

/// Saves a full model (config record + every named parameter tensor).
pub fn save_model(path: &Path, params: &MixVprParams<f32>) -> Result<()> {
    let named = params.named_tensors();
    save_checkpoint(path, &params.config.to_text(), &named)
}

/// Loads a model checkpoint, validating names and dims against its own
/// config record.
pub fn load_model(path: &Path) -> Result<MixVprParams<f32>> {
    let (config_text, tensors) = load_checkpoint(path)?;
    let config = MixVprConfig::from_text(&config_text)?;
    MixVprParams::assemble(config, tensors)
}

// ── Manifest ────────────────────────────────────────────────────────

/// One image record: identity, place membership, geotag, and the tensor
/// file holding its feature maps (path relative to the manifest).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub place: String,
    pub lat: f64,
    pub lon: f64,
    pub tensor: String,
}

/// A validated record list plus the directory tensor paths resolve
/// against.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub root: PathBuf,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Absolute path of a record's tensor file.
    pub fn tensor_path(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.tensor)
    }

    /// Record indices grouped by place id, places in sorted order.
    pub fn places(&self) -> std::collections::BTreeMap<&str, Vec<usize>> {
        let mut map: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
        for (i, r) in self.records.iter().enumerate() {
            map.entry(r.place.as_str()).or_default().push(i);
        }
        map
    }
}

fn validate_coords(lat: f64, lon: f64) -> std::result::Result<(), String> {
    if !(-90.0..=90.0).contains(&lat) {
        return Err(format!("latitude {lat} outside [-90, 90]"));
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(format!("longitude {lon} outside [-180, 180]"));
    }
    Ok(())
}

/// Parses and validates a JSON-lines manifest. Empty files yield an empty
/// manifest with a warning; malformed lines and duplicate ids are errors
/// citing the line number.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut records = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        validate_coords(record.lat, record.lon)
            .map_err(|msg| Error::Data(format!("line {line}: {msg}")))?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::Data(format!(
                "line {line}: duplicate image id {:?}",
                record.id
            )));
        }
        records.push(record);
    }
    if records.is_empty() {
        log::warn!("manifest {} contains no records", path.display());
    }
    Ok(Manifest { records, root })
}

/// Writes records as one JSON object per line.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Format(format!("manifest record serialization: {e}")))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

// ── Synthetic place generator ───────────────────────────────────────

/// Latent dimensionality of the generator.
pub const SYNTH_LATENT_DIM: usize = 64;
/// Standard deviation of per-view feature noise (variance 0.1).
pub const SYNTH_NOISE_STD: f64 = 0.31622776601683794;
/// Grid spacing between places, metres.
pub const SYNTH_PLACE_SPACING_M: f64 = 150.0;
/// Maximum per-axis view jitter, metres (diagonal stays under 5 m).
pub const SYNTH_VIEW_JITTER_M: f64 = 2.0;

const METERS_PER_DEG_LAT: f64 = 111_320.0;
const SYNTH_BASE_LAT: f64 = 45.0;
const SYNTH_BASE_LON: f64 = 7.0;

/// Settings for [`synth_generate`].
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub num_places: usize,
    pub views_per_place: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

/// Generates a separable synthetic dataset: each place is a Gaussian
/// latent pushed through one fixed seeded linear map, each view adds
/// Gaussian feature noise and a small positional jitter. Places sit on a
/// 150 m grid; views stay within 5 m of their place. Writes MXT1 files
/// under `out_dir/tensors/` and the manifest to `out_dir/manifest.jsonl`.
///
/// Before returning, every view is classified against the clean place
/// prototypes; anything but 100% accuracy is a hard error, so callers can
/// rely on the labels being learnable.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    if cfg.num_places == 0 || cfg.views_per_place == 0 {
        return Err(Error::Param(format!(
            "need at least one place and one view, got {} x {}",
            cfg.num_places, cfg.views_per_place
        )));
    }
    if cfg.channels == 0 || cfg.height == 0 || cfg.width == 0 {
        return Err(Error::Param(format!(
            "feature dims must be >= 1, got {}x{}x{}",
            cfg.channels, cfg.height, cfg.width
        )));
    }
    let feat = cfg.channels * cfg.height * cfg.width;
    let tensor_dir = out_dir.join("tensors");
    fs::create_dir_all(&tensor_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, SYNTH_NOISE_STD)
        .map_err(|e| Error::Param(format!("noise distribution: {e}")))?;

    // Fixed linear map, entries N(0, 1/latent_dim) so projected distances
    // track latent distances.
    let gscale = 1.0 / (SYNTH_LATENT_DIM as f64).sqrt();
    let gmap: Tensor<f64> = Tensor::new(
        vec![feat, SYNTH_LATENT_DIM],
        (0..feat * SYNTH_LATENT_DIM)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * gscale)
            .collect(),
    )?;

    let side = (cfg.num_places as f64).sqrt().ceil() as usize;
    let dlat = SYNTH_PLACE_SPACING_M / METERS_PER_DEG_LAT;
    let meters_per_deg_lon = METERS_PER_DEG_LAT * SYNTH_BASE_LAT.to_radians().cos();
    let dlon = SYNTH_PLACE_SPACING_M / meters_per_deg_lon;

    let mut records = Vec::with_capacity(cfg.num_places * cfg.views_per_place);
    let mut prototypes: Vec<Tensor<f64>> = Vec::with_capacity(cfg.num_places);
    let mut views: Vec<(usize, Tensor<f64>)> = Vec::with_capacity(records.capacity());

    for p in 0..cfg.num_places {
        let z: Tensor<f64> = Tensor::new(
            vec![SYNTH_LATENT_DIM, 1],
            (0..SYNTH_LATENT_DIM)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect(),
        )?;
        let proto = matmul(&gmap, &z)?;
        let place_lat = SYNTH_BASE_LAT + (p / side) as f64 * dlat;
        let place_lon = SYNTH_BASE_LON + (p % side) as f64 * dlon;

        for v in 0..cfg.views_per_place {
            let mut data = proto.data().to_vec();
            for val in &mut data {
                *val += noise.sample(&mut rng);
            }
            let jlat = rng.random_range(-SYNTH_VIEW_JITTER_M..SYNTH_VIEW_JITTER_M);
            let jlon = rng.random_range(-SYNTH_VIEW_JITTER_M..SYNTH_VIEW_JITTER_M);

            let view = Tensor::new(vec![feat], data)?;
            let rel = format!("tensors/p{p:04}_v{v:02}.mxt");
            let stored: Tensor<f32> = view
                .reshape(vec![cfg.channels, cfg.height, cfg.width])?
                .cast();
            write_tensor(&out_dir.join(&rel), &stored)?;
            records.push(ManifestRecord {
                id: format!("p{p:04}_v{v:02}"),
                place: format!("place{p:04}"),
                lat: place_lat + jlat / METERS_PER_DEG_LAT,
                lon: place_lon + jlon / meters_per_deg_lon,
                tensor: rel,
            });
            views.push((p, view));
        }
        prototypes.push(proto.reshape(vec![feat])?);
    }

    // Generation-time separability oracle: nearest clean prototype must
    // recover every view's place.
    for (true_place, view) in &views {
        let mut best = (usize::MAX, f64::INFINITY);
        for (q, proto) in prototypes.iter().enumerate() {
            let mut dist2 = 0.0;
            for (a, b) in view.data().iter().zip(proto.data()) {
                let d = a - b;
                dist2 += d * d;
            }
            if dist2 < best.1 {
                best = (q, dist2);
            }
        }
        if best.0 != *true_place {
            return Err(Error::Contract(format!(
                "synthetic data not separable: a view of place {true_place} is nearest prototype {}",
                best.0
            )));
        }
    }

    let manifest_path = out_dir.join("manifest.jsonl");
    write_manifest(&manifest_path, &records)?;
    Ok(Manifest {
        records,
        root: out_dir.to_path_buf(),
    })
}
