//! Image and point-cloud file formats: PNG (8-bit RGB), PFM (f32 disparity)
//! and ASCII PLY.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::raster::Image;

/// Keyword of the PNG text chunk that carries the config hash.
pub const PNG_HASH_KEY: &str = "config-hash";

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Encodes a 3-channel image in [0, 1] as 8-bit RGB, tagged with `hash`.
pub fn encode_png(img: &Image, hash: &str) -> Result<Vec<u8>> {
    if img.channels != 3 {
        return Err(Error::Shape(format!("PNG needs 3 channels, got {}", img.channels)));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.add_text_chunk(PNG_HASH_KEY.into(), hash.into())
            .map_err(|e| Error::Format(e.to_string()))?;
        let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
        w.write_image_data(&bytes).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes an 8-bit RGB PNG into [0, 1] values, with its hash tag if any.
pub fn decode_png(bytes: &[u8]) -> Result<(Image, Option<String>)> {
    let dec = png::Decoder::new(bytes);
    let mut reader = dec.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format("expected 8-bit RGB PNG".into()));
    }
    let hash = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .find(|t| t.keyword == PNG_HASH_KEY)
        .map(|t| t.text.clone());
    let data = buf[..info.buffer_size()].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((Image::from_vec(info.width as usize, info.height as usize, 3, data)?, hash))
}

/// Single-channel PFM, big-endian (positive scale), rows bottom-up.
pub fn encode_pfm(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 1 {
        return Err(Error::Shape(format!("PFM needs 1 channel, got {}", img.channels)));
    }
    let mut out = format!("Pf\n{} {}\n1.0\n", img.width, img.height).into_bytes();
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            out.extend_from_slice(&(img.at(x, y, 0) as f32).to_be_bytes());
        }
    }
    Ok(out)
}

/// Reads single-channel PFM in either byte order.
pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| Error::Format(format!("PFM: {m}"));
    let mut cursor = bytes;
    let mut header = Vec::new();
    for _ in 0..3 {
        let mut line = String::new();
        cursor.read_line(&mut line).map_err(|_| bad("header is not text"))?;
        header.push(line.trim().to_string());
    }
    if header[0] != "Pf" {
        return Err(bad("expected single-channel 'Pf' magic"));
    }
    let dims: Vec<usize> = header[1]
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| bad("bad dimensions")))
        .collect::<Result<_>>()?;
    let [w, h] = dims[..] else {
        return Err(bad("bad dimensions"));
    };
    let scale: f64 = header[2].parse().map_err(|_| bad("bad scale"))?;
    if scale == 0.0 {
        return Err(bad("zero scale"));
    }
    if cursor.len() != w * h * 4 {
        return Err(bad("payload length does not match dimensions"));
    }
    let mut img = Image::new(w, h, 1);
    for (i, chunk) in cursor.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale > 0.0 { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) };
        let (x, row) = (i % w, i / w);
        *img.at_mut(x, h - 1 - row, 0) = v as f64;
    }
    Ok(img)
}

/// ASCII PLY with `x y z` vertices and the config hash as a comment.
pub fn encode_ply(points: &[[f64; 3]], hash: &str) -> Vec<u8> {
    let mut out = Vec::new();
    write!(
        out,
        "ply\nformat ascii 1.0\ncomment config-hash {hash}\nelement vertex {}\n\
         property double x\nproperty double y\nproperty double z\nend_header\n",
        points.len()
    )
    .unwrap();
    for p in points {
        writeln!(out, "{:e} {:e} {:e}", p[0], p[1], p[2]).unwrap();
    }
    out
}

pub fn decode_ply(bytes: &[u8]) -> Result<Vec<[f64; 3]>> {
    let bad = |m: &str| Error::Format(format!("PLY: {m}"));
    let text = std::str::from_utf8(bytes).map_err(|_| bad("not ASCII"))?;
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing magic"));
    }
    let mut count = None;
    for line in lines.by_ref() {
        if line == "end_header" {
            break;
        }
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(n.trim().parse::<usize>().map_err(|_| bad("bad vertex count"))?);
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    let pts: Vec<[f64; 3]> = lines
        .take(count)
        .map(|l| {
            let v: Vec<f64> = l
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| bad("bad coordinate")))
                .collect::<Result<_>>()?;
            match v[..] {
                [x, y, z] => Ok([x, y, z]),
                _ => Err(bad("vertex needs 3 coordinates")),
            }
        })
        .collect::<Result<_>>()?;
    if pts.len() != count {
        return Err(bad("truncated vertex list"));
    }
    Ok(pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn png_rounds_half_to_even() {
        // 0.5 * 255 = 127.5 rounds to 128, 1.5/255 * 255 = 1.5 rounds to 2
        assert_eq!(to_u8(0.5), 128);
        assert_eq!(to_u8(2.5 / 255.0), 2);
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(7.0), 255);
    }

    #[test]
    fn png_round_trip_with_hash() {
        let img = Image::from_vec(2, 1, 3, vec![0.0, 0.5, 1.0, 0.2, 0.4, 0.6]).unwrap();
        let bytes = encode_png(&img, "abc").unwrap();
        let (back, hash) = decode_png(&bytes).unwrap();
        assert_eq!(hash.as_deref(), Some("abc"));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert_eq!(bytes, encode_png(&img, "abc").unwrap());
    }

    #[test]
    fn pfm_layout() {
        let img = Image::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_pfm(&img).unwrap();
        assert!(bytes.starts_with(b"Pf\n2 2\n1.0\n"));
        // bottom row first
        let body = &bytes[bytes.len() - 16..];
        assert_eq!(&body[..4], &3.0f32.to_be_bytes());
        assert_eq!(decode_pfm(&bytes).unwrap(), img);
    }

    #[test]
    fn pfm_reads_little_endian() {
        let mut bytes = b"Pf\n1 2\n-1.0\n".to_vec();
        bytes.extend_from_slice(&5.0f32.to_le_bytes());
        bytes.extend_from_slice(&6.0f32.to_le_bytes());
        let img = decode_pfm(&bytes).unwrap();
        assert_eq!(img.data, vec![6.0, 5.0]);
        assert!(decode_pfm(b"PF\n1 1\n1.0\n\0\0\0\0").is_err());
        assert!(decode_pfm(b"Pf\n2 1\n1.0\n\0\0\0\0").is_err());
    }

    proptest! {
        #[test]
        fn pfm_round_trips_f32(vals in proptest::collection::vec(-1e6f32..1e6, 12)) {
            let img = Image::from_vec(4, 3, 1, vals.iter().map(|&v| v as f64).collect()).unwrap();
            prop_assert_eq!(decode_pfm(&encode_pfm(&img).unwrap()).unwrap(), img);
        }

        #[test]
        fn ply_round_trips(pts in proptest::collection::vec(prop::array::uniform3(-1e3f64..1e3), 0..20)) {
            let bytes = encode_ply(&pts, "h");
            prop_assert_eq!(decode_ply(&bytes).unwrap(), pts);
        }
    }
}
