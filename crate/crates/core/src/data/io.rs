use std::fs;
use std::io::{BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageDecoder, ImageEncoder};

use super::DepthSample;
use crate::error::{Error, Result};

const DPT_MAGIC: &[u8; 4] = b"DPT1";
const DPT_HEADER: usize = 16;

/// Writes an 8-bit binary PPM from a (3, H, W) plane stack in [0, 1].
pub fn write_ppm(path: &Path, rgb: &[f32], width: usize, height: usize) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::format(path, format!("{} values for a {width}x{height} rgb image", rgb.len())));
    }
    let n = width * height;
    let mut bytes = Vec::with_capacity(3 * n);
    for p in 0..n {
        for c in 0..3 {
            bytes.push((rgb[c * n + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&bytes, width as u32, height as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::format(path, e.to_string()))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit P6 PPM into a (3, H, W) plane stack in [0, 1].
pub fn read_ppm(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !raw.starts_with(b"P6") {
        return Err(Error::format(path, "not a binary PPM (P6)"));
    }
    let dec = PnmDecoder::new(Cursor::new(raw)).map_err(|e| Error::format(path, e.to_string()))?;
    if dec.color_type() != image::ColorType::Rgb8 {
        return Err(Error::format(path, format!("unsupported PPM sample type {:?}", dec.color_type())));
    }
    let (w, h) = dec.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut bytes = vec![0u8; dec.total_bytes() as usize];
    dec.read_image(&mut bytes).map_err(|e| Error::format(path, e.to_string()))?;
    let n = w * h;
    let mut rgb = vec![0.0f32; 3 * n];
    for (p, px) in bytes.chunks_exact(3).enumerate() {
        for c in 0..3 {
            rgb[c * n + p] = px[c] as f32 / 255.0;
        }
    }
    Ok((rgb, w, h))
}

/// Writes a depth map: "DPT1", u32 width, u32 height, u32 reserved (0),
/// then row-major little-endian f32.
pub fn write_dpt(path: &Path, depth: &[f32], width: usize, height: usize) -> Result<()> {
    if depth.len() != width * height {
        return Err(Error::format(path, format!("{} values for a {width}x{height} depth map", depth.len())));
    }
    let mut bytes = Vec::with_capacity(DPT_HEADER + 4 * depth.len());
    bytes.extend_from_slice(DPT_MAGIC);
    bytes.extend_from_slice(&(width as u32).to_le_bytes());
    bytes.extend_from_slice(&(height as u32).to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    for d in depth {
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dpt(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < DPT_HEADER || &bytes[..4] != DPT_MAGIC {
        return Err(Error::format(path, "missing DPT1 header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (w, h) = (u32_at(4), u32_at(8));
    let expect = DPT_HEADER + 4 * w * h;
    if bytes.len() != expect {
        return Err(Error::format(
            path,
            format!("{w}x{h} depth map needs {expect} bytes, file has {}", bytes.len()),
        ));
    }
    let depth = bytes[DPT_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((depth, w, h))
}

/// Writes `stem.ppm` and `stem.dpt`; invalid pixels are stored as depth 0.
pub fn save_sample(dir: &Path, stem: &str, s: &DepthSample) -> Result<()> {
    write_ppm(&dir.join(format!("{stem}.ppm")), &s.rgb, s.width, s.height)?;
    let depth: Vec<f32> = s.depth.iter().zip(&s.valid).map(|(&d, &v)| if v { d } else { 0.0 }).collect();
    write_dpt(&dir.join(format!("{stem}.dpt")), &depth, s.width, s.height)
}

/// Saves samples as `0000.ppm/.dpt`, `0001.ppm/.dpt`, ...
pub fn save_dataset(dir: &Path, samples: &[DepthSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        save_sample(dir, &format!("{i:04}"), s)?;
    }
    Ok(())
}

/// Iterator over the stems of a dataset directory in lexicographic order.
/// Yields an error for the first unpaired or malformed file; callers should
/// stop there.
pub struct DatasetIter {
    stems: std::vec::IntoIter<(String, Option<PathBuf>, Option<PathBuf>)>,
    failed: bool,
}

impl Iterator for DatasetIter {
    type Item = Result<DepthSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let (stem, ppm, dpt) = self.stems.next()?;
        let item = load_pair(&stem, ppm, dpt);
        self.failed = item.is_err();
        Some(item)
    }
}

fn load_pair(stem: &str, ppm: Option<PathBuf>, dpt: Option<PathBuf>) -> Result<DepthSample> {
    let (ppm, dpt) = match (ppm, dpt) {
        (Some(a), Some(b)) => (a, b),
        (Some(a), None) => return Err(Error::format(&a, format!("no matching {stem}.dpt"))),
        (None, Some(b)) => return Err(Error::format(&b, format!("no matching {stem}.ppm"))),
        (None, None) => unreachable!(),
    };
    let (rgb, w, h) = read_ppm(&ppm)?;
    let (depth, dw, dh) = read_dpt(&dpt)?;
    if (w, h) != (dw, dh) {
        return Err(Error::format(
            &dpt,
            format!(
                "size mismatch: {} is {w}x{h} but {} is {dw}x{dh}",
                ppm.display(),
                dpt.display()
            ),
        ));
    }
    DepthSample::new(w, h, rgb, depth).map_err(|e| Error::format(&dpt, e.to_string()))
}

/// Lists `NNNN.ppm` / `NNNN.dpt` pairs; other files are ignored.
pub fn load_dataset(dir: &Path) -> Result<DatasetIter> {
    let mut stems: std::collections::BTreeMap<String, (Option<PathBuf>, Option<PathBuf>)> = Default::default();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let (Some(stem), Some(ext)) = (path.file_stem(), path.extension()) else {
            continue;
        };
        let slot = stems.entry(stem.to_string_lossy().into_owned()).or_default();
        match ext.to_str() {
            Some("ppm") => slot.0 = Some(path),
            Some("dpt") => slot.1 = Some(path),
            _ => {}
        }
    }
    let stems: Vec<_> = stems
        .into_iter()
        .filter(|(_, (a, b))| a.is_some() || b.is_some())
        .map(|(s, (a, b))| (s, a, b))
        .collect();
    Ok(DatasetIter {
        stems: stems.into_iter(),
        failed: false,
    })
}
