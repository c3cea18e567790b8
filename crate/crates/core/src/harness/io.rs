//! File formats: PFM float rasters, 8-bit PNG images, 16-bit PNG instance
//! masks, Middlebury `.flo` flow and JSON.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::annotate::FlowField;
use crate::error::{Error, Result};
use crate::instance::InstanceMaskSet;
use crate::raster::{DepthMap, Image};

/// A float raster as stored in a PFM file, rows top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatRaster {
    pub width: usize,
    pub height: usize,
    /// 1 or 3.
    pub channels: usize,
    pub data: Vec<f32>,
}

/// Writes little-endian PFM (scale -1). PFM stores the bottom row first.
pub fn write_pfm(path: &Path, r: &FloatRaster) -> Result<()> {
    let tag = match r.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::InvalidArgument(format!("PFM holds 1 or 3 channels, not {c}"))),
    };
    if r.data.len() != r.width * r.height * r.channels {
        return Err(Error::ShapeMismatch("PFM data does not match its dimensions".into()));
    }
    let mut out = Vec::with_capacity(r.data.len() * 4 + 32);
    write!(out, "{tag}\n{} {}\n-1.0\n", r.width, r.height)?;
    let row = r.width * r.channels;
    for y in (0..r.height).rev() {
        for v in &r.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<FloatRaster> {
    let mut rd = BufReader::new(fs::File::open(path)?);
    let mut header = || -> Result<String> {
        let mut line = String::new();
        while line.trim().is_empty() {
            line.clear();
            if rd.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated PFM header".into()));
            }
        }
        Ok(line.trim().to_string())
    };
    let channels = match header()?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        t => return Err(Error::Format(format!("not a PFM file (tag {t:?})"))),
    };
    let dims = header()?;
    let mut it = dims.split_whitespace().map(str::parse::<usize>);
    let (Some(Ok(width)), Some(Ok(height)), None) = (it.next(), it.next(), it.next()) else {
        return Err(Error::Format(format!("bad PFM dimensions {dims:?}")));
    };
    let scale: f64 = header()?.parse().map_err(|_| Error::Format("bad PFM scale".into()))?;
    let mut bytes = vec![0u8; width * height * channels * 4];
    rd.read_exact(&mut bytes)
        .map_err(|_| Error::Format("truncated PFM data".into()))?;
    let decode = |b: &[u8]| {
        let a = [b[0], b[1], b[2], b[3]];
        if scale < 0.0 {
            f32::from_le_bytes(a)
        } else {
            f32::from_be_bytes(a)
        }
    };
    let row = width * channels;
    let mut data = vec![0f32; width * height * channels];
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let (y, rest) = (i / row, i % row);
        data[(height - 1 - y) * row + rest] = decode(chunk);
    }
    Ok(FloatRaster {
        width,
        height,
        channels,
        data,
    })
}

/// Invalid depth is written as 0.
pub fn write_depth_pfm(path: &Path, d: &DepthMap) -> Result<()> {
    let (width, height) = d.dims();
    write_pfm(
        path,
        &FloatRaster {
            width,
            height,
            channels: 1,
            data: d.values().iter().map(|&v| v as f32).collect(),
        },
    )
}

pub fn read_depth_pfm(path: &Path) -> Result<DepthMap> {
    let r = read_pfm(path)?;
    if r.channels != 1 {
        return Err(Error::Format("depth PFM must have one channel".into()));
    }
    DepthMap::from_vec(r.width, r.height, r.data.into_iter().map(f64::from).collect())
}

/// Single-channel float map with a validity flag; invalid entries become NaN.
pub fn write_scalar_pfm(path: &Path, width: usize, height: usize, values: &[f64], valid: &[bool]) -> Result<()> {
    let data = values
        .iter()
        .zip(valid)
        .map(|(&v, &ok)| if ok { v as f32 } else { f32::NAN })
        .collect();
    write_pfm(
        path,
        &FloatRaster {
            width,
            height,
            channels: 1,
            data,
        },
    )
}

/// Values in [0, 1] are quantized to 8 bits. One channel is written as
/// grayscale, three as RGB.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let (w, h) = img.dims();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match img.channels() {
        1 => {
            let buf: ImageBuffer<Luma<u8>, _> =
                ImageBuffer::from_raw(w as u32, h as u32, img.data().iter().map(|&v| q(v)).collect::<Vec<_>>())
                    .expect("buffer matches dimensions");
            buf.save(path)?;
        }
        3 => {
            let buf: ImageBuffer<Rgb<u8>, _> =
                ImageBuffer::from_raw(w as u32, h as u32, img.data().iter().map(|&v| q(v)).collect::<Vec<_>>())
                    .expect("buffer matches dimensions");
            buf.save(path)?;
        }
        c => return Err(Error::InvalidArgument(format!("cannot write a {c}-channel PNG"))),
    }
    Ok(())
}

/// Reads any PNG as RGB with values in [0, 1].
pub fn read_png(path: &Path) -> Result<Image> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Image::from_vec(
        w,
        h,
        3,
        rgb.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect(),
    )
}

/// 16-bit grayscale, each pixel `1000 * category + track`, 0 for background.
pub fn write_mask_png(path: &Path, masks: &InstanceMaskSet) -> Result<()> {
    let (w, h) = masks.dims();
    let labels = masks
        .to_label_map()
        .into_iter()
        .map(|l| u16::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} does not fit 16 bits"))))
        .collect::<Result<Vec<u16>>>()?;
    let buf: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(w as u32, h as u32, labels).expect("buffer matches dimensions");
    buf.save(path)?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<InstanceMaskSet> {
    let img = image::open(path)?;
    if !matches!(img.color(), image::ColorType::L16 | image::ColorType::L8) {
        return Err(Error::Format(format!(
            "mask PNG must be grayscale, got {:?}",
            img.color()
        )));
    }
    let buf = img.to_luma16();
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let labels: Vec<u32> = buf.into_raw().into_iter().map(u32::from).collect();
    InstanceMaskSet::from_label_map(w, h, &labels)
}

const FLO_MAGIC: f32 = 202021.25;

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let (w, h) = flow.dims();
    let mut out = Vec::with_capacity(12 + w * h * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for [u, v] in flow.data() {
        out.extend_from_slice(&(*u as f32).to_le_bytes());
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path)?;
    let word = |i: usize| -> Result<[u8; 4]> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| [b[0], b[1], b[2], b[3]])
            .ok_or_else(|| Error::Format("truncated .flo file".into()))
    };
    if f32::from_le_bytes(word(0)?) != FLO_MAGIC {
        return Err(Error::Format("bad .flo magic number".into()));
    }
    let (w, h) = (i32::from_le_bytes(word(1)?), i32::from_le_bytes(word(2)?));
    if w <= 0 || h <= 0 {
        return Err(Error::Format(format!("bad .flo dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    if bytes.len() != 12 + w * h * 8 {
        return Err(Error::Format("wrong .flo payload size".into()));
    }
    let data = (0..w * h)
        .map(|i| {
            Ok([
                f64::from(f32::from_le_bytes(word(3 + 2 * i)?)),
                f64::from(f32::from_le_bytes(word(4 + 2 * i)?)),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    FlowField::from_vec(w, h, data)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::BinaryMask;

    #[test]
    fn pfm_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pfm");
        let r = FloatRaster {
            width: 3,
            height: 2,
            channels: 1,
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        write_pfm(&p, &r).unwrap();
        let bytes = fs::read(&p).unwrap();
        let header = b"Pf\n3 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        // Bottom row first, little-endian.
        assert_eq!(&bytes[header.len()..header.len() + 4], &4.0f32.to_le_bytes());
        assert_eq!(read_pfm(&p).unwrap(), r);
    }

    #[test]
    fn big_endian_pfm_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.pfm");
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        for v in [0.5f32, -2.0] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        fs::write(&p, bytes).unwrap();
        assert_eq!(read_pfm(&p).unwrap().data, vec![0.5, -2.0]);
    }

    #[test]
    fn depth_pfm_keeps_invalid_pixels_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let d = DepthMap::from_vec(2, 2, vec![1.5, 0.0, 3.25, 8.0]).unwrap();
        write_depth_pfm(&p, &d).unwrap();
        assert_eq!(read_depth_pfm(&p).unwrap(), d);
    }

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.png");
        let img = Image::from_fn(5, 4, 3, |x, y, c| ((x + 2 * y + 3 * c) % 7) as f64 / 6.0);
        write_png(&p, &img).unwrap();
        let back = read_png(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn mask_png_encodes_category_and_track() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let mut m = InstanceMaskSet::new(4, 3);
        m.insert(7, 2, BinaryMask::from_fn(4, 3, |x, _| x == 0)).unwrap();
        m.insert(12, 1, BinaryMask::from_fn(4, 3, |x, y| x == 3 && y > 0))
            .unwrap();
        write_mask_png(&p, &m).unwrap();
        let raw = image::open(&p).unwrap();
        assert_eq!(raw.color(), image::ColorType::L16);
        let raw = raw.to_luma16();
        assert_eq!(raw.get_pixel(0, 0).0[0], 2007);
        assert_eq!(raw.get_pixel(3, 2).0[0], 1012);
        assert_eq!(raw.get_pixel(1, 1).0[0], 0);
        assert_eq!(read_mask_png(&p).unwrap(), m);
    }

    #[test]
    fn flo_layout_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.flo");
        let f = FlowField::from_vec(2, 1, vec![[1.5, -0.25], [3.0, 4.0]]).unwrap();
        write_flo(&p, &f).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 12 + 16);
        assert_eq!(&bytes[..4], b"PIEH");
        assert_eq!(&bytes[4..8], &2i32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1.5f32.to_le_bytes());
        assert_eq!(read_flo(&p).unwrap(), f);
        fs::write(&p, &bytes[..20]).unwrap();
        assert!(read_flo(&p).is_err());
    }
}
