//! Mock image payload: a small grayscale PNG whose `tEXt` chunk carries the
//! exact vector the image stands for. Standard viewers can open it and the
//! mock backends can read the vector back bit for bit.

use std::io::Cursor;

use super::{GatewayError, ImageBlob, ImageFormat, ImageOrigin};

pub const VECTOR_KEYWORD: &str = "genir-vector";
const SIDE: u32 = 8;

/// Space separated shortest round-trip representation of each component.
pub fn format_vector(v: &[f32]) -> String {
    let mut out = String::with_capacity(v.len() * 12);
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&x.to_string());
    }
    out
}

pub fn parse_vector(s: &str) -> Option<Vec<f32>> {
    let v: Option<Vec<f32>> = s.split_ascii_whitespace().map(|t| t.parse().ok()).collect();
    v.filter(|v| !v.is_empty() && v.iter().all(|x| x.is_finite()))
}

fn pixels(v: &[f32]) -> Vec<u8> {
    (0..(SIDE * SIDE) as usize)
        .map(|i| {
            let x = v[i % v.len()];
            (127.5 + 127.5 * x.tanh()) as u8
        })
        .collect()
}

pub fn encode_vector_png(v: &[f32], origin: ImageOrigin) -> ImageBlob {
    assert!(!v.is_empty(), "cannot encode an empty vector");
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, SIDE, SIDE);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.add_text_chunk(VECTOR_KEYWORD.to_string(), format_vector(v))
            .expect("ASCII keyword and text");
        let mut w = enc.write_header().expect("in-memory PNG header");
        w.write_image_data(&pixels(v)).expect("in-memory PNG data");
    }
    ImageBlob {
        format: ImageFormat::Png,
        bytes,
        origin,
    }
}

/// Reads the vector back out of a blob produced by [`encode_vector_png`].
pub fn decode_vector_png(blob: &ImageBlob) -> Result<Vec<f32>, GatewayError> {
    if blob.format() != ImageFormat::Png {
        return Err(GatewayError::InvalidImage(
            "mock payloads are PNG only".into(),
        ));
    }
    let reader = png::Decoder::new(Cursor::new(blob.bytes()))
        .read_info()
        .map_err(|e| GatewayError::InvalidImage(format!("PNG decode: {e}")))?;
    reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .find(|c| c.keyword == VECTOR_KEYWORD)
        .and_then(|c| parse_vector(&c.text))
        .ok_or_else(|| GatewayError::InvalidImage("PNG carries no vector chunk".into()))
}
