//! IDX binary format: 4-byte big-endian magic, big-endian dimension sizes,
//! then unsigned payload bytes. Image files use magic 0x00000803 with
//! dimensions (count, rows, cols); label files use 0x00000801 with (count).
//! Pixels are scaled to [0, 1] at parse time; serialization is bit-exact.

use crate::error::{Error, Result};
use crate::tensor::{ActivationTensor, Shape};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    if bytes.len() < offset + 4 {
        return Err(Error::Format(format!(
            "truncated IDX header: need {} bytes for {what}, file has {}",
            offset + 4,
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parse an IDX image file into an `(M, 1, H, W)` tensor with pixels in [0, 1].
pub fn parse_idx_images(bytes: &[u8]) -> Result<ActivationTensor> {
    let magic = read_u32(bytes, 0, "magic")?;
    if magic != IMAGE_MAGIC {
        let hint = if magic == LABEL_MAGIC {
            " (this is a label file)"
        } else {
            ""
        };
        return Err(Error::Format(format!(
            "expected image magic 0x{IMAGE_MAGIC:08x}, got 0x{magic:08x}{hint}"
        )));
    }
    let m = read_u32(bytes, 4, "image count")? as usize;
    let h = read_u32(bytes, 8, "rows")? as usize;
    let w = read_u32(bytes, 12, "cols")? as usize;
    let expected = 16 + m * h * w;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "image payload mismatch: header promises {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    ActivationTensor::new(Shape::Nchw { n: m, c: 1, h, w }, data)
}

/// Parse an IDX label file. Values above 9 are permitted (the format is
/// generic); range validation happens where labels meet a class count.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, "magic")?;
    if magic != LABEL_MAGIC {
        let hint = if magic == IMAGE_MAGIC {
            " (this is an image file)"
        } else {
            ""
        };
        return Err(Error::Format(format!(
            "expected label magic 0x{LABEL_MAGIC:08x}, got 0x{magic:08x}{hint}"
        )));
    }
    let m = read_u32(bytes, 4, "label count")? as usize;
    let expected = 8 + m;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "label payload mismatch: header promises {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    Ok(bytes[8..].to_vec())
}

/// Serialize an `(M, 1, H, W)` tensor with [0, 1] pixels back to IDX bytes.
/// Round-trips the output of [`parse_idx_images`] byte for byte.
pub fn write_idx_images(images: &ActivationTensor) -> Result<Vec<u8>> {
    let (m, c, h, w) = match images.shape() {
        Shape::Nchw { n, c, h, w } => (n, c, h, w),
        Shape::Ncl { .. } => return Err(Error::Shape("IDX images must be rank-4".into())),
    };
    if c != 1 {
        return Err(Error::Shape(format!(
            "IDX images are single-channel, got {c}"
        )));
    }
    let mut out = Vec::with_capacity(16 + m * h * w);
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(m as u32).to_be_bytes());
    out.extend_from_slice(&(h as u32).to_be_bytes());
    out.extend_from_slice(&(w as u32).to_be_bytes());
    for &v in images.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(format!("pixel {v} outside [0, 1]")));
        }
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_file(m: usize, h: usize, w: usize, payload: &[u8]) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&(m as u32).to_be_bytes());
        bytes.extend_from_slice(&(h as u32).to_be_bytes());
        bytes.extend_from_slice(&(w as u32).to_be_bytes());
        bytes.extend_from_slice(payload);
        bytes
    }

    #[test]
    fn accepts_image_magic_rejects_label_magic() {
        let good = image_file(1, 1, 1, &[0]);
        assert!(parse_idx_images(&good).is_ok());

        let mut labelled = good.clone();
        labelled[..4].copy_from_slice(&LABEL_MAGIC.to_be_bytes());
        let err = parse_idx_images(&labelled).unwrap_err();
        assert!(err.to_string().contains("label file"), "{err}");
    }

    #[test]
    fn header_dimensions_are_base_256_big_endian() {
        // Bytes 00 00 01 0C = 0x010C = 268.
        let bytes = [0x00, 0x00, 0x01, 0x0C];
        assert_eq!(u32::from_be_bytes(bytes), 268);
        let mut file = Vec::new();
        file.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        file.extend_from_slice(&1u32.to_be_bytes());
        file.extend_from_slice(&bytes); // h = 268
        file.extend_from_slice(&1u32.to_be_bytes());
        file.extend(std::iter::repeat(7u8).take(268));
        let t = parse_idx_images(&file).unwrap();
        assert_eq!(
            t.shape(),
            Shape::Nchw {
                n: 1,
                c: 1,
                h: 268,
                w: 1
            }
        );
    }

    #[test]
    fn pixel_scaling_arithmetic() {
        let file = image_file(1, 2, 2, &[0, 128, 255, 64]);
        let t = parse_idx_images(&file).unwrap();
        let expect = [0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0];
        for (a, b) in t.data().iter().zip(&expect) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncation_reports_byte_counts() {
        let mut file = image_file(2, 2, 2, &[1; 8]);
        file.pop();
        let err = parse_idx_images(&file).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("24"), "{err}");
        assert!(err.to_string().contains("23"), "{err}");
    }

    #[test]
    fn labels_parse_and_mismatch_detection() {
        let mut file = Vec::new();
        file.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        file.extend_from_slice(&3u32.to_be_bytes());
        file.extend_from_slice(&[7, 0, 9]);
        assert_eq!(parse_idx_labels(&file).unwrap(), vec![7, 0, 9]);

        let mut wrong_magic = file.clone();
        wrong_magic[..4].copy_from_slice(&IMAGE_MAGIC.to_be_bytes());
        assert!(matches!(
            parse_idx_labels(&wrong_magic),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let payload: Vec<u8> = (0..=255).cycle().take(2 * 3 * 4).collect();
        let file = image_file(2, 3, 4, &payload);
        let parsed = parse_idx_images(&file).unwrap();
        let written = write_idx_images(&parsed).unwrap();
        assert_eq!(written, file);

        let labels = vec![3u8, 1, 4, 1, 5];
        let lfile = write_idx_labels(&labels);
        assert_eq!(parse_idx_labels(&lfile).unwrap(), labels);
    }
}
