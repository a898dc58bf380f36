//! Image payload helpers. Images are `[H, W, 3]` tensors with values in
//! `[0, 1]`; PNG files are 8-bit RGB.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned pixel rectangle, top-left origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Rect { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }
}

pub fn image_dims(t: &Tensor) -> Result<(u32, u32)> {
    let s = t.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Dimension(format!(
            "expected an [H, W, 3] image tensor, got shape {s:?}"
        )));
    }
    Ok((s[1] as u32, s[0] as u32))
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let dynimg = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            offset: 0,
            msg: format!("{}: {other}", path.display()),
        },
    })?;
    let rgb = dynimg.to_rgb8();
    Ok(from_rgb8(&rgb))
}

pub fn save_png(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let rgb = to_rgb8(t)?;
    rgb.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            offset: 0,
            msg: format!("{}: {other}", path.display()),
        },
    })
}

pub fn from_rgb8(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(h * w * 3);
    for px in img.pixels() {
        data.push(px[0] as f32 / 255.0);
        data.push(px[1] as f32 / 255.0);
        data.push(px[2] as f32 / 255.0);
    }
    Tensor::new(vec![h, w, 3], data).expect("pixel count matches dimensions")
}

pub fn to_rgb8(t: &Tensor) -> Result<RgbImage> {
    let (w, h) = image_dims(t)?;
    let mut img: RgbImage = ImageBuffer::new(w, h);
    let d = t.data();
    for y in 0..h {
        for x in 0..w {
            let base = ((y * w + x) * 3) as usize;
            let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x, y, Rgb([q(d[base]), q(d[base + 1]), q(d[base + 2])]));
        }
    }
    Ok(img)
}

/// Bilinear resample to `out_h x out_w` (stretch; aspect ratio is not
/// preserved). Resizing to the input size returns an exact copy.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!(
            "resize: expected rank-3 tensor, got {s:?}"
        )));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dimension("resize: zero output extent".into()));
    }
    if out_h == h && out_w == w {
        return Ok(t.clone());
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let d = t.data();
    let mut out = vec![0.0f32; out_h * out_w * c];
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ci in 0..c {
                let v00 = d[(y0 * w + x0) * c + ci] as f64;
                let v01 = d[(y0 * w + x1) * c + ci] as f64;
                let v10 = d[(y1 * w + x0) * c + ci] as f64;
                let v11 = d[(y1 * w + x1) * c + ci] as f64;
                let top = v00 * (1.0 - wx) + v01 * wx;
                let bot = v10 * (1.0 - wx) + v11 * wx;
                out[(oy * out_w + ox) * c + ci] = (top * (1.0 - wy) + bot * wy) as f32;
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

pub fn crop(t: &Tensor, rect: Rect) -> Result<Tensor> {
    let (w, h) = image_dims(t)?;
    if rect.w == 0 || rect.h == 0 || rect.x + rect.w > w || rect.y + rect.h > h {
        return Err(Error::Dimension(format!(
            "crop {rect:?} outside {w}x{h} image"
        )));
    }
    let (cw, ch) = (rect.w as usize, rect.h as usize);
    let src_w = w as usize;
    let d = t.data();
    let mut out = Vec::with_capacity(ch * cw * 3);
    for y in 0..ch {
        let row = (rect.y as usize + y) * src_w + rect.x as usize;
        out.extend_from_slice(&d[row * 3..(row + cw) * 3]);
    }
    Tensor::new(vec![ch, cw, 3], out)
}

/// Copies `src` into `dst` with its top-left corner at `(x, y)`.
pub fn paste(dst: &mut Tensor, src: &Tensor, x: u32, y: u32) -> Result<()> {
    let (dw, dh) = image_dims(dst)?;
    let (sw, sh) = image_dims(src)?;
    if x + sw > dw || y + sh > dh {
        return Err(Error::Dimension(format!(
            "paste of {sw}x{sh} at ({x}, {y}) outside {dw}x{dh} canvas"
        )));
    }
    let (dw, sw) = (dw as usize, sw as usize);
    for row in 0..sh as usize {
        let src_off = row * sw * 3;
        let dst_off = ((y as usize + row) * dw + x as usize) * 3;
        let src_row = &src.data()[src_off..src_off + sw * 3];
        dst.data_mut()[dst_off..dst_off + sw * 3].copy_from_slice(src_row);
    }
    Ok(())
}
