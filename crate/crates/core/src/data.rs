//! SSWC chip container, dataset manifests, and synthetic data generators.
//!
//! SSWC layout (little-endian):
//!
//! | field | type |
//! |---|---|
//! | magic | `b"SSWC"` |
//! | version | `u16` (= 1) |
//! | T | `u16` |
//! | H, W | `u32`, `u32` |
//! | B | `u16` |
//! | dtype | `u8` (0 = u8 scaled by 1/255, 1 = f32) |
//! | band names | B × (`u16` byte length + UTF-8) |
//! | label flag | `u8` (0 = none, 1 = present) |
//! | label dtype, T_lab | `u8` (0 = u8, 1 = f32, 2 = u16), `u16` (only when flagged) |
//! | payload | `T·H·W·B` values, row-major `[T, H, W, B]` |
//! | labels | `T_lab·H·W` values, row-major (only when flagged) |

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};
use crate::types::TimeCube;

pub const CHIP_MAGIC: &[u8; 4] = b"SSWC";
pub const CHIP_VERSION: u16 = 1;
/// Label value skipped by metrics and losses.
pub const IGNORE_LABEL: usize = 255;
/// Default band names, matching the six-band Sentinel-2 subset.
pub const DEFAULT_BANDS: [&str; 6] = ["B2", "B3", "B4", "B8A", "B11", "B12"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    F32,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::U8 => 0,
            Dtype::F32 => 1,
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
        }
    }
}

/// Per-pixel labels `[T_lab, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub enum LabelData {
    U8(Vec<u8>),
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl LabelData {
    fn code(&self) -> u8 {
        match self {
            LabelData::U8(_) => 0,
            LabelData::F32(_) => 1,
            LabelData::U16(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            LabelData::U8(v) => v.len(),
            LabelData::U16(v) => v.len(),
            LabelData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Class ids, or `None` for real-valued labels.
    pub fn classes(&self) -> Option<Vec<usize>> {
        match self {
            LabelData::U8(v) => Some(v.iter().map(|&x| x as usize).collect()),
            LabelData::U16(v) => Some(v.iter().map(|&x| x as usize).collect()),
            LabelData::F32(_) => None,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            LabelData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            LabelData::U16(v) => v.iter().map(|&x| x as f64).collect(),
            LabelData::F32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelBlock {
    pub timesteps: usize,
    pub data: LabelData,
}

/// A cube with band names and optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Chip {
    pub cube: TimeCube,
    pub band_names: Vec<String>,
    pub labels: Option<LabelBlock>,
}

impl Chip {
    pub fn new(cube: TimeCube) -> Self {
        let band_names = default_band_names(cube.bands());
        Self {
            cube,
            band_names,
            labels: None,
        }
    }

    pub fn check_bands(&self, expected: usize) -> Result<()> {
        if self.cube.bands() != expected {
            return Err(Error::Invalid(format!(
                "chip has {} bands, configuration expects {expected}",
                self.cube.bands()
            )));
        }
        Ok(())
    }

    /// Indices of the bands to show as red, green, blue.
    pub fn rgb_bands(&self) -> [usize; 3] {
        let find = |n: &str| self.band_names.iter().position(|b| b == n);
        match (find("B4"), find("B3"), find("B2")) {
            (Some(r), Some(g), Some(b)) => [r, g, b],
            _ => {
                let last = self.cube.bands() - 1;
                [2.min(last), 1.min(last), 0]
            }
        }
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Result<Vec<u8>> {
        let [t, h, w, b] = self.cube.shape();
        if self.band_names.len() != b {
            return Err(Error::Invalid(format!("{} band names for {b} bands", self.band_names.len())));
        }
        let narrow = |v: usize, max: u64, what: &str| {
            if v as u64 > max {
                Err(Error::Invalid(format!("{what} {v} exceeds the format limit {max}")))
            } else {
                Ok(v)
            }
        };
        let mut out = Vec::new();
        out.extend_from_slice(CHIP_MAGIC);
        out.extend_from_slice(&CHIP_VERSION.to_le_bytes());
        out.extend_from_slice(&(narrow(t, u16::MAX as u64, "T")? as u16).to_le_bytes());
        out.extend_from_slice(&(narrow(h, u32::MAX as u64, "H")? as u32).to_le_bytes());
        out.extend_from_slice(&(narrow(w, u32::MAX as u64, "W")? as u32).to_le_bytes());
        out.extend_from_slice(&(narrow(b, u16::MAX as u64, "B")? as u16).to_le_bytes());
        out.push(dtype.code());
        for name in &self.band_names {
            let bytes = name.as_bytes();
            out.extend_from_slice(&(narrow(bytes.len(), u16::MAX as u64, "band name length")? as u16).to_le_bytes());
            out.extend_from_slice(bytes);
        }
        match &self.labels {
            None => out.push(0),
            Some(l) => {
                if l.data.len() != l.timesteps * h * w {
                    return Err(Error::Shape(format!(
                        "label block has {} values, expected {}×{h}×{w}",
                        l.data.len(),
                        l.timesteps
                    )));
                }
                out.push(1);
                out.push(l.data.code());
                out.extend_from_slice(&(narrow(l.timesteps, u16::MAX as u64, "T_lab")? as u16).to_le_bytes());
            }
        }
        match dtype {
            Dtype::U8 => out.extend(self.cube.data().iter().map(|&v| (v * 255.0).round() as u8)),
            Dtype::F32 => {
                for v in self.cube.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        if let Some(l) = &self.labels {
            match &l.data {
                LabelData::U8(v) => out.extend_from_slice(v),
                LabelData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                LabelData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHIP_MAGIC {
            return Err(Error::Format("bad magic: not an SSWC chip".into()));
        }
        let version = r.u16("version")?;
        if version != CHIP_VERSION {
            return Err(Error::Format(format!("unsupported SSWC version {version}")));
        }
        let t = r.u16("T")? as usize;
        let h = r.u32("H")? as usize;
        let w = r.u32("W")? as usize;
        let b = r.u16("B")? as usize;
        let dtype = match r.u8("dtype")? {
            0 => Dtype::U8,
            1 => Dtype::F32,
            c => return Err(Error::Format(format!("unknown payload dtype code {c}"))),
        };
        let mut band_names = Vec::with_capacity(b);
        for i in 0..b {
            let len = r.u16("band name length")? as usize;
            let raw = r.take(len, "band name")?;
            band_names.push(
                String::from_utf8(raw.to_vec()).map_err(|_| Error::Format(format!("band name {i} is not UTF-8")))?,
            );
        }
        let label_desc = match r.u8("label flag")? {
            0 => None,
            1 => Some((r.u8("label dtype")?, r.u16("T_lab")? as usize)),
            f => return Err(Error::Format(format!("invalid label flag {f}"))),
        };
        let n = t
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .and_then(|v| v.checked_mul(b))
            .ok_or_else(|| Error::Format("header dims overflow".into()))?;
        let label_size = match label_desc {
            None => 0,
            Some((0, tl)) => tl * h * w,
            Some((1, tl)) => 4 * tl * h * w,
            Some((2, tl)) => 2 * tl * h * w,
            Some((c, _)) => return Err(Error::Format(format!("unknown label dtype code {c}"))),
        };
        let expected = r.pos + n * dtype.size() + label_size;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "chip payload size mismatch: expected {expected} bytes in total, found {}",
                bytes.len()
            )));
        }
        let raw = r.take(n * dtype.size(), "payload")?;
        let data: Vec<f32> = match dtype {
            Dtype::U8 => raw.iter().map(|&v| v as f32 / 255.0).collect(),
            Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        let cube = TimeCube::new([t, h, w, b], data)?;
        let labels = match label_desc {
            None => None,
            Some((code, tl)) => {
                let raw = r.take(label_size, "labels")?;
                let data = match code {
                    0 => LabelData::U8(raw.to_vec()),
                    1 => LabelData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                    _ => LabelData::U16(raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()),
                };
                Some(LabelBlock { timesteps: tl, data })
            }
        };
        Ok(Self {
            cube,
            band_names,
            labels,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self.bytes.get(self.pos..end).ok_or_else(|| {
            Error::Format(format!(
                "truncated chip reading {what}: expected at least {end} bytes, found {}",
                self.bytes.len()
            ))
        })?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn default_band_names(bands: usize) -> Vec<String> {
    (0..bands)
        .map(|i| DEFAULT_BANDS.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("band{i}")))
        .collect()
}

pub fn write_chip(path: impl AsRef<Path>, chip: &Chip, dtype: Dtype) -> Result<()> {
    fs::write(path, chip.to_bytes(dtype)?)?;
    Ok(())
}

pub fn read_chip(path: impl AsRef<Path>) -> Result<Chip> {
    let path = path.as_ref();
    Chip::from_bytes(&fs::read(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub split: Split,
    pub task: String,
    /// Per-chip cloud-cover fraction in `[0, 1]`, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud_score: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub chips: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    /// Parses and checks that every chip path exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let missing: Vec<String> = m
            .chips
            .iter()
            .map(|e| m.resolve(e))
            .filter(|p| !p.is_file())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Incompatible(missing.into_iter().map(|p| format!("chip not found: {p}")).collect()));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn resolve(&self, e: &ManifestEntry) -> PathBuf {
        if e.path.is_absolute() {
            e.path.clone()
        } else {
            self.root.join(&e.path)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.chips.iter().filter(move |e| e.split == split)
    }

    /// Drops chips whose cloud score exceeds `max_cloud`; unscored chips are kept.
    pub fn filter_cloud(&self, max_cloud: f64) -> Self {
        Self {
            chips: self.chips.iter().filter(|e| e.cloud_score.is_none_or(|s| s <= max_cloud)).cloned().collect(),
            root: self.root.clone(),
        }
    }

    /// Reads every chip of `split`, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<Chip>> {
        self.split(split).map(|e| read_chip(self.resolve(e))).collect()
    }
}

/// Three consecutive seasons, starting at a uniformly drawn frame and
/// wrapping cyclically. Returns the triplet and the drawn start.
pub fn seasonal_triplet(cube: &TimeCube, seed: u64) -> Result<(TimeCube, usize)> {
    let n = cube.timesteps();
    if n < 3 {
        return Err(Error::Invalid(format!("seasonal sampling needs at least 3 frames, got {n}")));
    }
    let start = stream_rng(seed, stream::SEASON, 0).random_range(0..n);
    Ok((triplet_from(cube, start), start))
}

/// Frames `(start, start+1, start+2) mod T`.
pub fn triplet_from(cube: &TimeCube, start: usize) -> TimeCube {
    let n = cube.timesteps();
    cube.select_frames(&[start % n, (start + 1) % n, (start + 2) % n])
}

/// Where the source region landed after [`crop_and_pad`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRecord {
    /// Top-left of the copied region in the source.
    pub src_offset: (usize, usize),
    /// Top-left of the copied region in the output.
    pub dst_offset: (usize, usize),
    /// Copied height and width.
    pub size: (usize, usize),
}

/// Center crop along axes that are too large, zero-pad on the high side
/// along axes that are too small. `data` is `[T, H, W, C]` row-major.
pub fn crop_and_pad_raw<V: Copy + Default>(
    data: &[V],
    dims: [usize; 4],
    target: (usize, usize),
) -> (Vec<V>, CropRecord) {
    let [t, h, w, c] = dims;
    let (th, tw) = target;
    let (sy, ch) = if h > th { ((h - th) / 2, th) } else { (0, h) };
    let (sx, cw) = if w > tw { ((w - tw) / 2, tw) } else { (0, w) };
    let mut out = vec![V::default(); t * th * tw * c];
    for a in 0..t {
        for y in 0..ch {
            let src = ((a * h + sy + y) * w + sx) * c;
            let dst = (a * th + y) * tw * c;
            out[dst..dst + cw * c].copy_from_slice(&data[src..src + cw * c]);
        }
    }
    (
        out,
        CropRecord {
            src_offset: (sy, sx),
            dst_offset: (0, 0),
            size: (ch, cw),
        },
    )
}

pub fn crop_and_pad(cube: &TimeCube, height: usize, width: usize) -> (TimeCube, CropRecord) {
    let [t, _, _, b] = cube.shape();
    let (data, rec) = crop_and_pad_raw(cube.data(), cube.shape(), (height, width));
    (TimeCube::new([t, height, width, b], data).expect("crop keeps values in range"), rec)
}

/// Crops/pads a chip's cube and labels together. Padded labels are [`IGNORE_LABEL`] for class maps.
pub fn crop_and_pad_chip(chip: &Chip, height: usize, width: usize) -> (Chip, CropRecord) {
    let (cube, rec) = crop_and_pad(&chip.cube, height, width);
    let [_, h, w, _] = chip.cube.shape();
    let labels = chip.labels.as_ref().map(|l| {
        let dims = [l.timesteps, h, w, 1];
        let data = match &l.data {
            LabelData::U8(v) => {
                let (mut d, _) = crop_and_pad_raw(v, dims, (height, width));
                mark_padding(&mut d, l.timesteps, (height, width), rec, IGNORE_LABEL as u8);
                LabelData::U8(d)
            }
            LabelData::U16(v) => {
                let (mut d, _) = crop_and_pad_raw(v, dims, (height, width));
                mark_padding(&mut d, l.timesteps, (height, width), rec, IGNORE_LABEL as u16);
                LabelData::U16(d)
            }
            LabelData::F32(v) => LabelData::F32(crop_and_pad_raw(v, dims, (height, width)).0),
        };
        LabelBlock {
            timesteps: l.timesteps,
            data,
        }
    });
    (
        Chip {
            cube,
            band_names: chip.band_names.clone(),
            labels,
        },
        rec,
    )
}

fn mark_padding<V: Copy>(d: &mut [V], t: usize, (h, w): (usize, usize), rec: CropRecord, fill: V) {
    for a in 0..t {
        for y in 0..h {
            for x in 0..w {
                if y >= rec.size.0 || x >= rec.size.1 {
                    d[(a * h + y) * w + x] = fill;
                }
            }
        }
    }
}

/// Synthetic chip families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Band-correlated multiscale noise with slow temporal drift.
    TexturedFields,
    /// Static scene plus an occluder present only in the first frame;
    /// labels hold the occlusion mask.
    MovingCloud,
    /// Two spectral classes laid out by a thresholded smooth field.
    TwoClassBlobs,
    /// Per-pixel density in `[0, 100]` encoded in the spectra.
    DensityRamp,
}

impl SynthKind {
    pub const ALL: [SynthKind; 4] = [
        SynthKind::TexturedFields,
        SynthKind::MovingCloud,
        SynthKind::TwoClassBlobs,
        SynthKind::DensityRamp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::TexturedFields => "textured-fields",
            SynthKind::MovingCloud => "moving-cloud",
            SynthKind::TwoClassBlobs => "two-class-blobs",
            SynthKind::DensityRamp => "density-ramp",
        }
    }

    /// Task tag written to manifests.
    pub fn task(self) -> &'static str {
        match self {
            SynthKind::TexturedFields | SynthKind::MovingCloud => "pretrain",
            SynthKind::TwoClassBlobs => "segmentation",
            SynthKind::DensityRamp => "regression",
        }
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::Invalid(format!("unknown synthetic kind `{s}`; valid kinds: {}", valid.join(", ")))
        })
    }
}

/// Smooth random field on `h × w`: random values on a lattice with spacing
/// `cell`, smoothstep-interpolated. Roughly zero-mean, values in `[-1, 1]`.
fn value_noise(h: usize, w: usize, cell: f64, seed: u64, index: u64) -> Vec<f64> {
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let mut rng = stream_rng(seed, stream::SYNTH, index);
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / cell;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let at = |i: usize, j: usize| lattice[i * gw + j];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Sum of octaves starting at cell size `base`, halving each octave.
fn multiscale(h: usize, w: usize, base: f64, octaves: usize, seed: u64, index: u64) -> Vec<f64> {
    let mut acc = vec![0.0; h * w];
    let mut amp = 1.0;
    let mut cell = base;
    for o in 0..octaves {
        let f = value_noise(h, w, cell.max(1.0), seed, index * 16 + o as u64);
        for (a, v) in acc.iter_mut().zip(f) {
            *a += amp * v;
        }
        amp *= 0.5;
        cell /= 2.0;
    }
    acc
}

/// `[H, W, B]` band-correlated scene: two shared latent fields mixed per band
/// plus a small band-specific component.
fn scene(h: usize, w: usize, b: usize, seed: u64, index: u64) -> Vec<f64> {
    let cell = (h.min(w) as f64 / 4.0).max(2.0);
    let l1 = multiscale(h, w, cell, 3, seed, index * 64);
    let l2 = multiscale(h, w, cell, 3, seed, index * 64 + 1);
    let mut rng = stream_rng(seed, stream::SYNTH, index * 64 + 2);
    let mix: Vec<(f64, f64, f64)> = (0..b)
        .map(|_| (rng.random_range(0.3..0.9), rng.random_range(-0.6..0.6), rng.random_range(0.3..0.7)))
        .collect();
    let own: Vec<Vec<f64>> = (0..b).map(|k| multiscale(h, w, cell / 2.0, 2, seed, index * 64 + 3 + k as u64)).collect();
    let mut out = vec![0.0; h * w * b];
    for p in 0..h * w {
        for (k, &(a1, a2, base)) in mix.iter().enumerate() {
            out[p * b + k] = base + 0.25 * (a1 * l1[p] + a2 * l2[p]) + 0.05 * own[k][p];
        }
    }
    out
}

fn to_cube(shape: [usize; 4], data: Vec<f64>) -> TimeCube {
    TimeCube::new(shape, data.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect()).expect("clamped values")
}

/// Deterministic synthetic chip of `kind` with `dims = [T, H, W, B]`.
pub fn synth_generate(kind: SynthKind, dims: [usize; 4], seed: u64) -> Result<Chip> {
    let [t, h, w, b] = dims;
    if dims.contains(&0) {
        return Err(Error::Invalid(format!("synthetic dims must be positive, got {dims:?}")));
    }
    let frame = h * w * b;
    let chip = match kind {
        SynthKind::TexturedFields => {
            let base = scene(h, w, b, seed, 0);
            let mut data = Vec::with_capacity(t * frame);
            for a in 0..t {
                let drift = multiscale(h, w, (h.min(w) as f64 / 2.0).max(2.0), 2, seed, 1000 + a as u64);
                let gain = 1.0 + 0.1 * (a as f64 * 1.3).sin();
                for p in 0..h * w {
                    for k in 0..b {
                        data.push(base[p * b + k] * gain + 0.08 * drift[p]);
                    }
                }
            }
            Chip::new(to_cube(dims, data))
        }
        SynthKind::MovingCloud => {
            let base = scene(h, w, b, seed, 0);
            let occ = cloud_mask(h, w, seed);
            let mut data = Vec::with_capacity(t * frame);
            for a in 0..t {
                for p in 0..h * w {
                    for k in 0..b {
                        data.push(if a == 0 && occ[p] { 0.92 + 0.02 * k as f64 / b as f64 } else { base[p * b + k] });
                    }
                }
            }
            let mut chip = Chip::new(to_cube(dims, data));
            chip.labels = Some(LabelBlock {
                timesteps: 1,
                data: LabelData::U8(occ.iter().map(|&o| o as u8).collect()),
            });
            chip
        }
        SynthKind::TwoClassBlobs => {
            let field = multiscale(h, w, (h.min(w) as f64 / 3.0).max(2.0), 2, seed, 7);
            let threshold = median(&field);
            let labels: Vec<u8> = field.iter().map(|&v| (v > threshold) as u8).collect();
            // Class signatures are shared by every chip so labels are learnable across chips;
            // only the per-chip offset varies.
            let mut shared = stream_rng(0, stream::SYNTH, 8);
            let mut rng = stream_rng(seed, stream::SYNTH, 8);
            let sig: Vec<[f64; 2]> = (0..b)
                .map(|k| {
                    let d = shared.random_range(0.08..0.15) * if k % 2 == 0 { 1.0 } else { -1.0 };
                    let m = 0.5 + rng.random_range(-0.05..0.05);
                    [m - d, m + d]
                })
                .collect();
            let texture = scene(h, w, b, seed, 9);
            let mut data = Vec::with_capacity(t * frame);
            for a in 0..t {
                let gain = 1.0 + 0.05 * a as f64;
                for p in 0..h * w {
                    for k in 0..b {
                        let tex = texture[p * b + k] - 0.5;
                        data.push(gain * sig[k][labels[p] as usize] + 0.4 * tex);
                    }
                }
            }
            let mut chip = Chip::new(to_cube(dims, data));
            chip.labels = Some(LabelBlock {
                timesteps: 1,
                data: LabelData::U8(labels),
            });
            chip
        }
        SynthKind::DensityRamp => {
            let mut rng = stream_rng(seed, stream::SYNTH, 10);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (ca, sa) = (angle.cos(), angle.sin());
            let field = multiscale(h, w, (h.min(w) as f64 / 3.0).max(2.0), 2, seed, 11);
            let diag = ((h * h + w * w) as f64).sqrt();
            let density: Vec<f64> = (0..h * w)
                .map(|p| {
                    let (y, x) = ((p / w) as f64 - h as f64 / 2.0, (p % w) as f64 - w as f64 / 2.0);
                    let ramp = 0.5 + (x * ca + y * sa) / diag;
                    (100.0 * (ramp + 0.3 * field[p])).clamp(0.0, 100.0)
                })
                .collect();
            let texture = scene(h, w, b, seed, 12);
            let mut data = Vec::with_capacity(t * frame);
            for _ in 0..t {
                for p in 0..h * w {
                    for k in 0..b {
                        let slope = if k % 2 == 0 { 0.5 } else { -0.4 };
                        data.push(0.5 + slope * (density[p] / 100.0 - 0.5) + 0.1 * (texture[p * b + k] - 0.5));
                    }
                }
            }
            let mut chip = Chip::new(to_cube(dims, data));
            chip.labels = Some(LabelBlock {
                timesteps: 1,
                data: LabelData::F32(density.into_iter().map(|v| v as f32).collect()),
            });
            chip
        }
    };
    Ok(chip)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

/// Occluder: one or two soft-edged ellipses covering roughly 10–25% of the frame.
fn cloud_mask(h: usize, w: usize, seed: u64) -> Vec<bool> {
    let mut rng = stream_rng(seed, stream::SYNTH, 20);
    let blobs = 1 + rng.random_range(0..2usize);
    let ell: Vec<(f64, f64, f64, f64)> = (0..blobs)
        .map(|_| {
            let cy = rng.random_range(0.25..0.75) * h as f64;
            let cx = rng.random_range(0.25..0.75) * w as f64;
            let ry = rng.random_range(0.12..0.22) * h as f64;
            let rx = rng.random_range(0.12..0.22) * w as f64;
            (cy, cx, ry, rx)
        })
        .collect();
    let edge = multiscale(h, w, (h.min(w) as f64 / 8.0).max(2.0), 1, seed, 21);
    (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            ell.iter()
                .any(|&(cy, cx, ry, rx)| ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) < 1.0 + 0.3 * edge[p])
        })
        .collect()
}

/// Nearest unflagged neighbours `(index along the line, pixel)` below and above a hole.
type Segment = (Option<(usize, usize)>, Option<(usize, usize)>);

/// Per-slice infill baseline: every flagged pixel of each band is replaced by
/// the mean of linear interpolations along its row and its column between the
/// nearest unflagged pixels (one-sided neighbours are copied).
pub fn bilinear_infill(frame: &[f64], h: usize, w: usize, bands: usize, holes: &[bool]) -> Vec<f64> {
    let mut out = frame.to_vec();
    let line = |len: usize, at: &dyn Fn(usize) -> usize, pos: usize| -> Option<Segment> {
        let lo = (0..pos).rev().find(|&i| !holes[at(i)]).map(|i| (i, at(i)));
        let hi = (pos + 1..len).find(|&i| !holes[at(i)]).map(|i| (i, at(i)));
        (lo.is_some() || hi.is_some()).then_some((lo, hi))
    };
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if !holes[p] {
                continue;
            }
            let row = line(w, &|i| y * w + i, x);
            let col = line(h, &|i| i * w + x, y);
            for k in 0..bands {
                let interp = |seg: Option<Segment>, pos: usize| {
                    seg.map(|(lo, hi)| match (lo, hi) {
                        (Some((i0, p0)), Some((i1, p1))) => {
                            let t = (pos - i0) as f64 / (i1 - i0) as f64;
                            frame[p0 * bands + k] * (1.0 - t) + frame[p1 * bands + k] * t
                        }
                        (Some((_, p0)), None) => frame[p0 * bands + k],
                        (None, Some((_, p1))) => frame[p1 * bands + k],
                        (None, None) => unreachable!(),
                    })
                };
                let vals: Vec<f64> = [interp(row, x), interp(col, y)].into_iter().flatten().collect();
                if !vals.is_empty() {
                    out[p * bands + k] = vals.iter().sum::<f64>() / vals.len() as f64;
                }
            }
        }
    }
    out
}

/// Occluded-pixel mean squared errors of a reconstruction and of the
/// per-slice bilinear baseline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InfillErrors {
    pub model: f64,
    pub baseline: f64,
    /// Scored values (occluded pixels × bands).
    pub count: usize,
}

/// Scores the infill of frame 0 of `observed` over the pixels flagged in `occ`.
/// Ground truth is frame 1, which shows the same static scene unoccluded.
pub fn infill_errors(observed: &TimeCube, recon: &TimeCube, occ: &[bool]) -> Result<InfillErrors> {
    let [t, h, w, b] = observed.shape();
    if t < 2 || recon.shape() != observed.shape() || occ.len() != h * w {
        return Err(Error::Shape(format!(
            "infill scoring needs two or more frames, matching cubes, and an {h}x{w} map; got {:?}, {:?}, {} pixels",
            observed.shape(),
            recon.shape(),
            occ.len()
        )));
    }
    let n = h * w * b;
    let frame = |c: &TimeCube, t: usize| -> Vec<f64> { c.data()[t * n..(t + 1) * n].iter().map(|&v| v as f64).collect() };
    let truth = frame(observed, 1);
    let pred = frame(recon, 0);
    let infill = bilinear_infill(&frame(observed, 0), h, w, b, occ);
    let (mut model, mut baseline, mut count) = (0.0, 0.0, 0);
    for p in (0..h * w).filter(|&p| occ[p]) {
        for i in p * b..(p + 1) * b {
            model += (pred[i] - truth[i]).powi(2);
            baseline += (infill[i] - truth[i]).powi(2);
        }
        count += b;
    }
    if count == 0 {
        return Err(Error::Invalid("occlusion map flags no pixels".into()));
    }
    Ok(InfillErrors {
        model: model / count as f64,
        baseline: baseline / count as f64,
        count,
    })
}

/// Occlusion flags from a chip's first label frame (nonzero = occluded).
pub fn occlusion_map(chip: &Chip) -> Result<Vec<bool>> {
    let labels = chip.labels.as_ref().ok_or_else(|| Error::Invalid("chip has no occlusion labels".into()))?;
    let n = chip.cube.height() * chip.cube.width();
    Ok(labels.data.values().into_iter().take(n).map(|v| v != 0.0).collect())
}
