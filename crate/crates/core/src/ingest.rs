//! Dataset loading: PGM images, the raw tensor format, preprocessing, patch
//! extraction and checksummed manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CaolError, Result};
use crate::signal::{Geometry, Signal};

pub const TENSOR_MAGIC: &[u8; 8] = b"CAOLTNSR";
pub const TENSOR_VERSION: u32 = 1;
const TAG_LINE: u32 = 1;
const TAG_GRID: u32 = 2;

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| CaolError::InvalidConfig(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CaolError::io(format!("writing {}", path.display()), e)
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CaolError::io(format!("reading {}", path.display()), e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Option<&str> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok().filter(|t| !t.is_empty())
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self
            .token()
            .ok_or_else(|| CaolError::MalformedHeader(format!("missing {what}")))?;
        tok.parse()
            .map_err(|_| CaolError::MalformedHeader(format!("{what} is not a number: '{tok}'")))
    }
}

/// Decodes a P2 or P5 image into a grid signal with values in `[0, maxval]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Signal> {
    let ascii = match bytes.get(..2) {
        Some(b"P2") => true,
        Some(b"P5") => false,
        _ => return Err(CaolError::MalformedHeader("not a P2/P5 PGM".into())),
    };
    let mut hdr = HeaderReader { bytes, pos: 2 };
    let w = hdr.number("width")?;
    let h = hdr.number("height")?;
    let maxval = hdr.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(CaolError::MalformedHeader(format!("empty image {w}x{h}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(CaolError::MalformedHeader(format!("maxval {maxval} outside 1..=65535")));
    }
    let n = h
        .checked_mul(w)
        .ok_or_else(|| CaolError::DimensionOverflow(format!("{h}x{w}")))?;
    let values = if ascii {
        let mut values = Vec::with_capacity(n);
        while values.len() < n {
            match hdr.token() {
                Some(tok) => {
                    let v: usize = tok
                        .parse()
                        .map_err(|_| CaolError::MalformedHeader(format!("bad sample '{tok}'")))?;
                    if v > maxval {
                        return Err(CaolError::InvalidSignal(format!("sample {v} exceeds maxval {maxval}")));
                    }
                    values.push(v as f64);
                }
                None => return Err(CaolError::TruncatedData { expected: n, found: values.len() }),
            }
        }
        values
    } else {
        // Exactly one whitespace byte separates maxval from the raster.
        let start = hdr.pos + 1;
        let width = if maxval < 256 { 1 } else { 2 };
        let raster = bytes.get(start..).unwrap_or(&[]);
        if raster.len() < n * width {
            return Err(CaolError::TruncatedData { expected: n, found: raster.len() / width });
        }
        let values: Vec<f64> = if width == 1 {
            raster[..n].iter().map(|&b| b as f64).collect()
        } else {
            raster[..2 * n].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64).collect()
        };
        if let Some(v) = values.iter().find(|&&v| v > maxval as f64) {
            return Err(CaolError::InvalidSignal(format!("sample {v} exceeds maxval {maxval}")));
        }
        values
    };
    Signal::grid(h, w, values)
}

pub fn load_pgm(path: &Path) -> Result<Signal> {
    decode_pgm(&read_file(path)?)
}

/// Binary (P5) encoding. Values must be integers in `[0, maxval]`.
pub fn encode_pgm(x: &Signal, maxval: u16) -> Result<Vec<u8>> {
    let Geometry::Grid { h, w } = x.geometry() else {
        return Err(CaolError::InvalidSignal("PGM needs a grid signal".into()));
    };
    if maxval == 0 {
        return Err(CaolError::InvalidConfig("maxval must be >= 1".into()));
    }
    let mut out = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    for &v in x.values() {
        if v.fract() != 0.0 || v < 0.0 || v > maxval as f64 {
            return Err(CaolError::InvalidSignal(format!("{v} is not an integer sample in 0..={maxval}")));
        }
        if maxval < 256 {
            out.push(v as u8);
        } else {
            out.extend_from_slice(&(v as u16).to_be_bytes());
        }
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, x: &Signal, maxval: u16) -> Result<()> {
    write_atomic(path, &encode_pgm(x, maxval)?)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let out = bytes
        .get(*pos..*pos + n)
        .ok_or_else(|| CaolError::MalformedHeader(format!("header ends before {what}")))?;
    *pos += n;
    Ok(out)
}

pub fn decode_raw_tensor(bytes: &[u8]) -> Result<Signal> {
    if bytes.get(..8) != Some(TENSOR_MAGIC.as_slice()) {
        return Err(CaolError::BadMagic);
    }
    let mut pos = 8;
    let u32_at = |pos: &mut usize, what| -> Result<u32> {
        Ok(u32::from_le_bytes(take(bytes, pos, 4, what)?.try_into().unwrap()))
    };
    let version = u32_at(&mut pos, "version")?;
    if version != TENSOR_VERSION {
        return Err(CaolError::MalformedHeader(format!("unsupported tensor version {version}")));
    }
    let tag = u32_at(&mut pos, "geometry tag")?;
    let mut dim = |what| -> Result<usize> {
        let d = u64::from_le_bytes(take(bytes, &mut pos, 8, what)?.try_into().unwrap());
        usize::try_from(d).map_err(|_| CaolError::DimensionOverflow(format!("{what} = {d}")))
    };
    let geometry = match tag {
        TAG_LINE => Geometry::Line { n: dim("N")? },
        TAG_GRID => {
            let h = dim("H")?;
            let w = dim("W")?;
            Geometry::Grid { h, w }
        }
        other => return Err(CaolError::MalformedHeader(format!("unknown geometry tag {other}"))),
    };
    let n = match geometry {
        Geometry::Line { n } => n,
        Geometry::Grid { h, w } => h
            .checked_mul(w)
            .ok_or_else(|| CaolError::DimensionOverflow(format!("{h}x{w}")))?,
    };
    let payload_len = n
        .checked_mul(8)
        .ok_or_else(|| CaolError::DimensionOverflow(format!("{n} values")))?;
    let payload = &bytes[pos..];
    if payload.len() < payload_len {
        return Err(CaolError::TruncatedData { expected: n, found: payload.len() / 8 });
    }
    if payload.len() > payload_len {
        return Err(CaolError::MalformedHeader(format!("{} trailing bytes", payload.len() - payload_len)));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Signal::new(values, geometry)
}

pub fn encode_raw_tensor(x: &Signal) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 8 * x.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    match x.geometry() {
        Geometry::Line { n } => {
            out.extend_from_slice(&TAG_LINE.to_le_bytes());
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        Geometry::Grid { h, w } => {
            out.extend_from_slice(&TAG_GRID.to_le_bytes());
            out.extend_from_slice(&(h as u64).to_le_bytes());
            out.extend_from_slice(&(w as u64).to_le_bytes());
        }
    }
    for v in x.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn load_raw_tensor(path: &Path) -> Result<Signal> {
    decode_raw_tensor(&read_file(path)?)
}

pub fn write_raw_tensor(path: &Path, x: &Signal) -> Result<()> {
    write_atomic(path, &encode_raw_tensor(x))
}

/// Stores a matrix as a row-major grid tensor.
pub fn matrix_to_signal(m: &DMatrix<f64>) -> Result<Signal> {
    Signal::grid(m.nrows(), m.ncols(), m.transpose().iter().copied().collect())
}

pub fn signal_to_matrix(x: &Signal) -> Result<DMatrix<f64>> {
    match x.geometry() {
        Geometry::Grid { h, w } => Ok(DMatrix::from_row_slice(h, w, x.values())),
        g => Err(CaolError::InvalidSignal(format!("expected a grid tensor, found {g}"))),
    }
}

/// Decodes by content: raw tensors by magic, anything else as PGM.
pub fn decode_any(bytes: &[u8]) -> Result<Signal> {
    if bytes.starts_with(TENSOR_MAGIC) {
        decode_raw_tensor(bytes)
    } else {
        decode_pgm(bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreprocessStep {
    MeanSubtract,
    /// Mean subtraction followed by scaling to unit sample standard deviation.
    Standardize,
    /// Subtracts the cyclic box mean of side `2 radius + 1`.
    Highpass { radius: usize },
}

/// Serialized form of a step, as stored in manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<usize>,
}

impl PreprocessStep {
    pub fn from_record(rec: &StepRecord) -> Result<Self> {
        match (rec.step.as_str(), rec.radius) {
            ("mean_subtract", None) => Ok(PreprocessStep::MeanSubtract),
            ("standardize", None) => Ok(PreprocessStep::Standardize),
            ("highpass", Some(radius)) => Ok(PreprocessStep::Highpass { radius }),
            ("highpass", None) => Err(CaolError::InvalidConfig("highpass needs a radius".into())),
            _ => Err(CaolError::UnknownStep(rec.step.clone())),
        }
    }

    pub fn record(&self) -> StepRecord {
        let (step, radius) = match *self {
            PreprocessStep::MeanSubtract => ("mean_subtract", None),
            PreprocessStep::Standardize => ("standardize", None),
            PreprocessStep::Highpass { radius } => ("highpass", Some(radius)),
        };
        StepRecord { step: step.into(), radius }
    }

    /// Parses `mean_subtract`, `standardize` or `highpass:<radius>`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, radius) = match s.split_once(':') {
            Some((name, r)) => (
                name,
                Some(r.parse().map_err(|_| CaolError::InvalidConfig(format!("bad highpass radius '{r}'")))?),
            ),
            None => (s, None),
        };
        Self::from_record(&StepRecord { step: name.into(), radius })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn box_mean(x: &Signal, radius: usize) -> Result<Vec<f64>> {
    let (h, w) = match x.geometry() {
        Geometry::Line { n } => (1, n),
        Geometry::Grid { h, w } => (h, w),
    };
    let side = 2 * radius + 1;
    let ry = if h == 1 { 0 } else { radius };
    if side > w || (h > 1 && side > h) {
        return Err(CaolError::InvalidConfig(format!(
            "highpass radius {radius} too large for {}",
            x.geometry()
        )));
    }
    let v = x.values();
    let count = ((2 * ry + 1) * side) as f64;
    let out = (0..h * w)
        .map(|idx| {
            let (i, j) = (idx / w, idx % w);
            let mut s = 0.0;
            for dy in 0..=2 * ry {
                let y = (i + h + dy - ry) % h;
                for dx in 0..side {
                    s += v[y * w + (j + w + dx - radius) % w];
                }
            }
            s / count
        })
        .collect();
    Ok(out)
}

/// Applies `steps` in order. Geometry is preserved.
pub fn preprocess(x: &Signal, steps: &[PreprocessStep]) -> Result<Signal> {
    let mut cur = x.clone();
    for step in steps {
        let v = cur.values();
        let next = match *step {
            PreprocessStep::MeanSubtract => {
                let m = mean(v);
                v.iter().map(|a| a - m).collect()
            }
            PreprocessStep::Standardize => {
                let m = mean(v);
                let centered: Vec<f64> = v.iter().map(|a| a - m).collect();
                let n = v.len() as f64;
                let var = if v.len() > 1 {
                    centered.iter().map(|a| a * a).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                if var > 0.0 {
                    let s = var.sqrt();
                    centered.into_iter().map(|a| a / s).collect()
                } else {
                    log::warn!("standardize: constant signal left unchanged");
                    v.to_vec()
                }
            }
            PreprocessStep::Highpass { radius } => {
                let local = box_mean(&cur, radius)?;
                v.iter().zip(local).map(|(a, b)| a - b).collect()
            }
        };
        cur = cur.with_values(next)?;
    }
    Ok(cur)
}

/// Row-major raster of `ph x pw` patches taken every `stride` pixels. Patches that
/// would cross the border are dropped.
pub fn patchify(x: &Signal, ph: usize, pw: usize, stride: usize) -> Result<Vec<Signal>> {
    let Geometry::Grid { h, w } = x.geometry() else {
        return Err(CaolError::InvalidSignal("patchify needs a grid signal".into()));
    };
    if stride == 0 || ph == 0 || pw == 0 {
        return Err(CaolError::InvalidConfig("patch sides and stride must be >= 1".into()));
    }
    if ph > h || pw > w {
        return Err(CaolError::PatchTooLarge { ph, pw, h, w });
    }
    let v = x.values();
    let mut out = Vec::new();
    for y in (0..=h - ph).step_by(stride) {
        for xo in (0..=w - pw).step_by(stride) {
            let vals = (0..ph).flat_map(|i| v[(y + i) * w + xo..(y + i) * w + xo + pw].iter().copied()).collect();
            out.push(Signal::grid(ph, pw, vals)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest directory.
    pub path: PathBuf,
    pub geometry: Geometry,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default)]
    pub source: String,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub preprocessing: Vec<StepRecord>,
    /// When present, training samples are patches rather than whole signals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patches: Option<PatchSpec>,
}

impl DatasetManifest {
    pub fn steps(&self) -> Result<Vec<PreprocessStep>> {
        self.preprocessing.iter().map(PreprocessStep::from_record).collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&read_file(path)?)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    /// Builds a manifest over existing files, hashing and decoding each one.
    pub fn from_files(root: &Path, paths: &[PathBuf], source: &str, steps: &[PreprocessStep]) -> Result<Self> {
        let entries = paths
            .iter()
            .map(|p| {
                let bytes = read_file(&root.join(p))?;
                Ok(ManifestEntry {
                    path: p.clone(),
                    geometry: decode_any(&bytes)?.geometry(),
                    sha256: sha256_hex(&bytes),
                })
            })
            .collect::<Result<_>>()?;
        Ok(DatasetManifest {
            source: source.into(),
            entries,
            preprocessing: steps.iter().map(PreprocessStep::record).collect(),
            patches: None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub signals: Vec<Signal>,
}

/// Loads, verifies and preprocesses every entry, then cuts patches if requested.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::read(manifest_path)?;
    if manifest.entries.is_empty() {
        return Err(CaolError::EmptyDataset("manifest"));
    }
    let steps = manifest.steps()?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut signals = Vec::new();
    for entry in &manifest.entries {
        let path = root.join(&entry.path);
        let bytes = read_file(&path)?;
        if !sha256_hex(&bytes).eq_ignore_ascii_case(&entry.sha256) {
            return Err(CaolError::ChecksumMismatch(path));
        }
        let x = decode_any(&bytes)?;
        if x.geometry() != entry.geometry {
            return Err(CaolError::InvalidSignal(format!(
                "{} decodes to {}, manifest says {}",
                path.display(),
                x.geometry(),
                entry.geometry
            )));
        }
        let x = preprocess(&x, &steps)?;
        match manifest.patches {
            Some(p) => signals.extend(patchify(&x, p.h, p.w, p.stride)?),
            None => signals.push(x),
        }
    }
    Ok(Dataset { manifest, signals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ascii_pgm_decodes() {
        let x = decode_pgm(b"P2\n# comment\n2 2\n3\n0 1\n2 3\n").unwrap();
        assert_eq!(x.geometry(), Geometry::Grid { h: 2, w: 2 });
        assert_eq!(x.values(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn pgm_errors() {
        assert!(matches!(decode_pgm(b"P6\n1 1\n255\n\0"), Err(CaolError::MalformedHeader(_))));
        assert!(matches!(decode_pgm(b"GIF89a"), Err(CaolError::MalformedHeader(_))));
        assert!(matches!(decode_pgm(b"P5\n2 2\n70000\n"), Err(CaolError::MalformedHeader(_))));
        assert!(matches!(
            decode_pgm(b"P5\n2 2\n255\n\x01\x02"),
            Err(CaolError::TruncatedData { expected: 4, found: 2 })
        ));
        assert!(matches!(decode_pgm(b"P2 2 1 9 1"), Err(CaolError::TruncatedData { .. })));
    }

    #[test]
    fn sixteen_bit_pgm_is_big_endian() {
        let x = decode_pgm(b"P5 2 1 65535\n\x01\x00\xff\xff").unwrap();
        assert_eq!(x.values(), &[256.0, 65535.0]);
        assert_eq!(decode_pgm(&encode_pgm(&x, 65535).unwrap()).unwrap(), x);
    }

    #[test]
    fn tensor_decodes_line() {
        let mut bytes = TENSOR_MAGIC.to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&4u64.to_le_bytes());
        for v in [1.0f64, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(decode_raw_tensor(&bytes).unwrap().values(), &[1.0, 2.0, 3.0, 4.0]);

        bytes[16] = 5;
        assert!(matches!(
            decode_raw_tensor(&bytes),
            Err(CaolError::TruncatedData { expected: 5, found: 4 })
        ));
        bytes[0] = b'X';
        assert!(matches!(decode_raw_tensor(&bytes), Err(CaolError::BadMagic)));
    }

    #[test]
    fn tensor_dimension_overflow() {
        let mut bytes = TENSOR_MAGIC.to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode_raw_tensor(&bytes), Err(CaolError::DimensionOverflow(_))));
    }

    #[test]
    fn mean_subtract_examples() {
        let x = Signal::line(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let once = preprocess(&x, &[PreprocessStep::MeanSubtract]).unwrap();
        assert_eq!(once.values(), &[-1.5, -0.5, 0.5, 1.5]);
        let twice = preprocess(&x, &[PreprocessStep::MeanSubtract, PreprocessStep::MeanSubtract]).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn standardize_constant_is_noop() {
        let x = Signal::line(vec![2.0; 5]).unwrap();
        assert_eq!(preprocess(&x, &[PreprocessStep::Standardize]).unwrap(), x);
    }

    #[test]
    fn highpass_removes_constants_and_keeps_geometry() {
        let x = Signal::grid(4, 5, vec![3.0; 20]).unwrap();
        let y = preprocess(&x, &[PreprocessStep::Highpass { radius: 1 }]).unwrap();
        assert_eq!(y.geometry(), x.geometry());
        assert!(y.values().iter().all(|v| v.abs() < 1e-15));
        assert!(preprocess(&x, &[PreprocessStep::Highpass { radius: 2 }]).is_err());
    }

    #[test]
    fn step_parsing() {
        assert_eq!(PreprocessStep::parse("highpass:2").unwrap(), PreprocessStep::Highpass { radius: 2 });
        assert!(matches!(PreprocessStep::parse("sharpen"), Err(CaolError::UnknownStep(_))));
        for s in [PreprocessStep::MeanSubtract, PreprocessStep::Standardize, PreprocessStep::Highpass { radius: 3 }] {
            assert_eq!(PreprocessStep::from_record(&s.record()).unwrap(), s);
        }
    }

    #[test]
    fn patch_examples() {
        let x = Signal::grid(4, 4, (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&x, 2, 2, 2).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p[1].values(), &[2.0, 3.0, 6.0, 7.0]);
        let y = Signal::grid(3, 3, (0..9).map(f64::from).collect()).unwrap();
        assert_eq!(patchify(&y, 2, 2, 1).unwrap().len(), 4);
        assert!(matches!(patchify(&y, 4, 1, 1), Err(CaolError::PatchTooLarge { .. })));
    }

    proptest! {
        #[test]
        fn standardize_moments(v in prop::collection::vec(-100.0f64..100.0, 3..64)) {
            let x = Signal::line(v).unwrap();
            let y = preprocess(&x, &[PreprocessStep::Standardize]).unwrap();
            let n = y.len() as f64;
            let m = mean(y.values());
            let var = y.values().iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0);
            prop_assume!(x.values().iter().any(|&a| a != x.values()[0]));
            prop_assert!(m.abs() <= 1e-10);
            prop_assert!((var.sqrt() - 1.0).abs() <= 1e-10);
        }

        #[test]
        fn disjoint_patches_permute_pixels(h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
            let (hh, ww) = (2 * h, 2 * w);
            let vals: Vec<f64> = (0..hh * ww).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64).collect();
            let x = Signal::grid(hh, ww, vals.clone()).unwrap();
            let mut got: Vec<f64> = patchify(&x, 2, 2, 2).unwrap().into_iter().flat_map(Signal::into_values).collect();
            let mut want = vals;
            got.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            prop_assert_eq!(got, want);
        }

        #[test]
        fn tensor_round_trip(v in prop::collection::vec(-1e300f64..1e300, 1..40)) {
            let x = Signal::line(v).unwrap();
            prop_assert_eq!(decode_raw_tensor(&encode_raw_tensor(&x)).unwrap(), x);
        }

        #[test]
        fn pgm_round_trip(h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
            let vals = (0..h * w).map(|i| ((seed >> (i % 56)) % 256) as f64).collect();
            let x = Signal::grid(h, w, vals).unwrap();
            let bytes = encode_pgm(&x, 255).unwrap();
            prop_assert_eq!(decode_pgm(&bytes).unwrap(), x);
        }
    }
}
