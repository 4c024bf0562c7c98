//! Grayscale image IO: binary PGM (P5) and IDX archives (optionally
//! gzip-compressed), with intensities scaled to `[0, 1]` by dividing by 255.

use std::io::Read;
use std::path::{Path, PathBuf};

use cspn_core::abcspn::ImageSet;
use flate2::read::GzDecoder;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

#[derive(Debug, thiserror::Error)]
pub enum ImageIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn format_err(path: &Path, message: impl Into<String>) -> ImageIoError {
    ImageIoError::Format { path: path.to_path_buf(), message: message.into() }
}

/// Writes `[0, 1]` intensities (clamped) as an 8-bit P5 file.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<(), ImageIoError> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let bytes: Vec<u8> = pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let file = std::fs::File::create(path).map_err(|source| ImageIoError::Io { path: path.to_path_buf(), source })?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&bytes, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| format_err(path, e.to_string()))
}

/// Reads a PGM file; returns `(width, height, pixels in [0, 1])`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>), ImageIoError> {
    let img = image::ImageReader::open(path)
        .map_err(|source| ImageIoError::Io { path: path.to_path_buf(), source })?
        .with_guessed_format()
        .map_err(|source| ImageIoError::Io { path: path.to_path_buf(), source })?
        .decode()
        .map_err(|e| format_err(path, e.to_string()))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect()))
}

/// An unsigned-byte IDX array: dimensions and row-major data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray, String> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err("missing IDX magic".into());
    }
    if bytes[2] != 0x08 {
        return Err(format!("IDX element type 0x{:02x} is not unsigned byte", bytes[2]));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err("truncated IDX header".into());
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() != header + count {
        return Err(format!("IDX body has {} bytes, dimensions {dims:?} need {count}", bytes.len() - header));
    }
    Ok(IdxArray { dims, data: bytes[header..].to_vec() })
}

pub fn encode_idx(arr: &IdxArray) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, arr.dims.len() as u8];
    for &d in &arr.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&arr.data);
    out
}

/// Reads an IDX file, transparently decompressing gzip.
pub fn read_idx(path: &Path) -> Result<IdxArray, ImageIoError> {
    let raw = std::fs::read(path).map_err(|source| ImageIoError::Io { path: path.to_path_buf(), source })?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|source| ImageIoError::Io { path: path.to_path_buf(), source })?;
        out
    } else {
        raw
    };
    parse_idx(&bytes).map_err(|m| format_err(path, m))
}

/// Image and label IDX files as an [`ImageSet`]. The class count is one more
/// than the largest label unless given.
pub fn load_idx_images(images: &Path, labels: &Path, num_classes: Option<usize>) -> Result<ImageSet, ImageIoError> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    if img.dims.len() != 3 {
        return Err(format_err(images, format!("expected n x height x width, got dimensions {:?}", img.dims)));
    }
    if lab.dims.len() != 1 || lab.dims[0] != img.dims[0] {
        return Err(format_err(labels, format!("expected {} labels, got dimensions {:?}", img.dims[0], lab.dims)));
    }
    let labels_v: Vec<usize> = lab.data.iter().map(|&b| b as usize).collect();
    let max = labels_v.iter().copied().max().unwrap_or(0);
    let classes = num_classes.unwrap_or(max + 1);
    if max >= classes {
        return Err(format_err(labels, format!("label {max} out of range for {classes} classes")));
    }
    Ok(ImageSet {
        height: img.dims[1],
        width: img.dims[2],
        pixels: img.data.iter().map(|&b| f64::from(b) / 255.0).collect(),
        labels: labels_v,
        num_classes: classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trips_bytes() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("a.pgm");
        let px: Vec<f64> = (0..12).map(|i| f64::from(i * 20) / 255.0).collect();
        write_pgm(&p, 4, 3, &px).unwrap();
        let head = std::fs::read(&p).unwrap();
        assert!(head.starts_with(b"P5"));
        let (w, h, back) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (4, 3));
        assert!(back.iter().zip(&px).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn idx_round_trips_and_validates() {
        let arr = IdxArray { dims: vec![2, 2, 3], data: (0..12).collect() };
        let bytes = encode_idx(&arr);
        assert_eq!(parse_idx(&bytes).unwrap(), arr);
        assert!(parse_idx(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[2] = 0x0d;
        assert!(parse_idx(&wrong).unwrap_err().contains("0x0d"));
    }

    #[test]
    fn gzip_idx_loads_as_image_set() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let d = tempfile::tempdir().unwrap();
        let imgs = IdxArray { dims: vec![3, 2, 2], data: vec![0, 255, 0, 255, 51, 51, 51, 51, 0, 0, 0, 0] };
        let labs = IdxArray { dims: vec![3], data: vec![1, 0, 2] };
        let ip = d.path().join("i.idx.gz");
        let mut gz = GzEncoder::new(std::fs::File::create(&ip).unwrap(), flate2::Compression::default());
        gz.write_all(&encode_idx(&imgs)).unwrap();
        gz.finish().unwrap();
        let lp = d.path().join("l.idx");
        std::fs::write(&lp, encode_idx(&labs)).unwrap();
        let set = load_idx_images(&ip, &lp, None).unwrap();
        assert_eq!((set.len(), set.height, set.width, set.num_classes), (3, 2, 2, 3));
        assert_eq!(set.image(1), &[0.2, 0.2, 0.2, 0.2]);
        assert!(load_idx_images(&ip, &lp, Some(2)).is_err());
    }
}
