use attend_core::image::{decode_netpbm, resize_bilinear, GrayImage};
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;

use crate::protocol::FrameEncoding;
use crate::ServiceError;

/// Decodes an uploaded frame to grayscale, downscaling it so that neither side exceeds `max_side`.
pub fn decode_frame(
    encoding: FrameEncoding,
    width: Option<usize>,
    height: Option<usize>,
    payload: &str,
    max_bytes: usize,
    max_side: usize,
) -> Result<GrayImage, ServiceError> {
    if payload.len() / 4 * 3 > max_bytes + 3 {
        return Err(ServiceError::BadFrame(format!("payload exceeds {max_bytes} bytes")));
    }
    let bytes = STANDARD
        .decode(payload.trim())
        .map_err(|e| ServiceError::BadFrame(format!("base64: {e}")))?;
    if bytes.len() > max_bytes {
        return Err(ServiceError::BadFrame(format!("payload exceeds {max_bytes} bytes")));
    }
    let img = match encoding {
        FrameEncoding::Png => {
            if !bytes.starts_with(b"\x89PNG") {
                return Err(ServiceError::BadFrame("payload is not a PNG".into()));
            }
            decode_image_bytes(&bytes)?
        }
        FrameEncoding::Gray => {
            let (Some(w), Some(h)) = (width, height) else {
                return Err(ServiceError::BadFrame("gray frames need width and height".into()));
            };
            GrayImage::new(w, h, bytes).map_err(|e| ServiceError::BadFrame(e.to_string()))?
        }
    };
    Ok(limit_side(img, max_side))
}

/// Reads a PNG or Netpbm image file as grayscale.
pub fn read_image(path: &std::path::Path) -> Result<GrayImage, ServiceError> {
    let bytes = std::fs::read(path)?;
    decode_image_bytes(&bytes)
}

pub fn decode_image_bytes(bytes: &[u8]) -> Result<GrayImage, ServiceError> {
    if bytes.starts_with(b"\x89PNG") {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| ServiceError::BadFrame(format!("png: {e}")))?
            .to_luma8();
        let (w, h) = img.dimensions();
        return GrayImage::new(w as usize, h as usize, img.into_raw()).map_err(|e| ServiceError::BadFrame(e.to_string()));
    }
    decode_netpbm(bytes).map_err(|e| ServiceError::BadFrame(e.to_string()))
}

pub fn limit_side(img: GrayImage, max_side: usize) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let longest = w.max(h);
    if longest <= max_side {
        return img;
    }
    let scale = max_side as f64 / longest as f64;
    let nw = ((w as f64 * scale).round() as usize).max(1);
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let src: Vec<f64> = img.pixels().iter().map(|&p| p as f64).collect();
    let px = resize_bilinear(&src, w, h, nw, nh)
        .into_iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage::new(nw, nh, px).expect("resized dimensions match")
}

pub fn encode_gray(img: &GrayImage) -> String {
    STANDARD.encode(img.pixels())
}

pub fn encode_png(img: &GrayImage) -> String {
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, img.pixels().to_vec()).expect("buffer matches dimensions");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).expect("png encodes in memory");
    STANDARD.encode(out.into_inner())
}
