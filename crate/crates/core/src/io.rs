//! File formats: PFM float maps, 8/16-bit gray PGM/PNG, grid checkpoints,
//! JSON configs and manifests. Every write goes through a temporary file in
//! the target directory followed by a rename.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::geometry::{CameraModel, DeviceSpec, ProjectorModel};
use crate::grid::DensityGrid;
use crate::patterns::Pattern;
use crate::raster::{Image, Mask};
use crate::simulator::{RadiometricParams, SceneKind};
use crate::trainer::TrainConfig;

/// Writes `bytes` to `path` atomically.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

pub fn encode_pfm(img: &Image) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    out.reserve(img.data.len() * 4);
    for row in (0..img.height).rev() {
        for col in 0..img.width {
            out.extend_from_slice(&(img.get(row, col) as f32).to_le_bytes());
        }
    }
    out
}

/// Grayscale PFM (`Pf`); the sign of the scale selects the byte order and
/// rows are stored bottom to top.
pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut token = |what: &str| -> Result<(usize, String)> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(start, format!("missing {what}")));
        }
        Ok((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()))
    };
    let (at, magic) = token("magic")?;
    match magic.as_str() {
        "Pf" => {}
        "PF" => return Err(Error::UnsupportedFormat("color PFM".into())),
        _ => return Err(parse_err(at, format!("bad PFM magic '{magic}'"))),
    }
    let mut dim = |what: &str| -> Result<usize> {
        let (at, t) = token(what)?;
        t.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| parse_err(at, format!("bad {what} '{t}'")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let (at, t) = token("scale")?;
    let scale: f64 = t
        .parse()
        .ok()
        .filter(|s: &f64| *s != 0.0 && s.is_finite())
        .ok_or_else(|| parse_err(at, format!("bad scale '{t}'")))?;
    // exactly one whitespace byte separates the header from the payload
    let data_start = pos + 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| parse_err(at, "image too large"))?;
    if bytes.len() < data_start + need {
        return Err(parse_err(bytes.len(), format!("truncated payload: need {need} bytes after offset {data_start}")));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; width * height];
    for (k, chunk) in bytes[data_start..data_start + need].chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().unwrap();
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (file_row, col) = (k / width, k % width);
        data[(height - 1 - file_row) * width + col] = v as f64;
    }
    Image::new(width, height, data)
}

pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    atomic_write(path, &encode_pfm(img))
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    decode_pfm(&fs::read(path)?)
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("pgm") | Some("pnm") => Ok(ImageFormat::Pnm),
        other => Err(Error::UnsupportedFormat(format!("image extension {other:?}"))),
    }
}

/// Gray image normalized to `[0, 1]` by `2^bits - 1`. Color images are
/// rejected.
pub fn read_gray(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let img = image::load_from_memory_with_format(&bytes, format_for(path)?)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: expected 8- or 16-bit grayscale, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Image::new(w, h, data)
}

fn encode_gray(img: &Image, bits: u32, format: ImageFormat) -> Result<Vec<u8>> {
    let (w, h) = (img.width as u32, img.height as u32);
    let dynamic = match bits {
        8 => {
            let px = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(w, h, px).expect("sized buffer"))
        }
        16 => {
            let px = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
            DynamicImage::ImageLuma16(ImageBuffer::<Luma<u16>, _>::from_raw(w, h, px).expect("sized buffer"))
        }
        _ => return invalid(format!("bit depth must be 8 or 16, got {bits}")),
    };
    let mut out = std::io::Cursor::new(Vec::new());
    dynamic.write_to(&mut out, format)?;
    Ok(out.into_inner())
}

/// Writes `img` (values in `[0, 1]`) as 8- or 16-bit PGM or PNG, chosen by
/// the file extension.
pub fn write_gray(path: &Path, img: &Image, bits: u32) -> Result<()> {
    let bytes = encode_gray(img, bits, format_for(path)?)?;
    atomic_write(path, &bytes)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let img = Image::new(
        mask.width,
        mask.height,
        mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )?;
    write_gray(path, &img, 8)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = read_gray(path)?;
    Ok(Mask {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&v| v >= 0.5).collect(),
    })
}

pub fn pattern_from_image(img: &Image) -> Result<Pattern> {
    Pattern::from_data(img.width, img.height, img.data.iter().map(|&v| v as f32).collect())
}

pub fn pattern_to_image(p: &Pattern) -> Image {
    Image::new(p.width, p.height, p.data.iter().map(|&v| v as f64).collect()).expect("consistent sizes")
}

pub fn write_checkpoint(path: &Path, grid: &DensityGrid) -> Result<()> {
    let mut buf = Vec::with_capacity(28 + grid.len() * 4);
    grid.write_checkpoint(&mut buf)?;
    atomic_write(path, &buf)
}

pub fn read_checkpoint(path: &Path) -> Result<DensityGrid> {
    DensityGrid::read_checkpoint(fs::File::open(path)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// A file referenced from a manifest, identified by content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    /// Path relative to the manifest's directory, or absolute.
    pub path: String,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Artifact {
    pub fn of(path: &Path, relative_to: &Path) -> Result<Self> {
        let shown = path.strip_prefix(relative_to).unwrap_or(path);
        Ok(Self {
            path: shown.to_string_lossy().into_owned(),
            sha256: file_sha256(path)?,
            cell: None,
            seed: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Which subcommand produced it.
    pub kind: String,
    pub files: Vec<Artifact>,
    /// Manifests this run consumed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<Artifact>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

impl Manifest {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            files: Vec::new(),
            inputs: Vec::new(),
            details: serde_json::Value::Null,
        }
    }

    /// Re-hashes every listed file relative to `dir`; returns the first
    /// mismatch.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for a in &self.files {
            let p = dir.join(&a.path);
            let h = file_sha256(&p)?;
            if h != a.sha256 {
                return Err(Error::Config(format!("{} does not match its manifest hash", p.display())));
            }
        }
        Ok(())
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub camera: DeviceSpec,
    pub projector: DeviceSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub radiometric: RadiometricParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneKind>,
    #[serde(default, skip_serializing_if = "RunPaths::is_empty")]
    pub paths: RunPaths,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patterns: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captures: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl RunPaths {
    pub fn is_empty(&self) -> bool {
        self.patterns.is_none() && self.captures.is_none() && self.checkpoint.is_none()
    }
}

impl RunConfig {
    /// Reference rig at `scale` with the projector toed in towards `converge`.
    pub fn reference(scale: f64, converge: f64) -> Result<Self> {
        let cam = CameraModel::reference_camera().scaled(scale)?;
        let proj = ProjectorModel::reference_rig(&cam, 209.39, converge);
        Ok(Self {
            camera: DeviceSpec::from_camera(&cam),
            projector: DeviceSpec::from_projector(&proj),
            train: TrainConfig::default(),
            radiometric: RadiometricParams::default(),
            scene: None,
            paths: RunPaths::default(),
        })
    }

    pub fn rig(&self) -> Result<(CameraModel, ProjectorModel)> {
        let cam = self.camera.to_camera()?;
        let proj = self.projector.to_projector(&cam)?;
        Ok((cam, proj))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.train.validate()?;
        cfg.radiometric.validate()?;
        Ok(cfg)
    }
}
