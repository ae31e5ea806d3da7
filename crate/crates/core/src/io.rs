//! Raster file formats.
//!
//! * `LAPD`: depth map, 16-byte header (magic, u32 H, u32 W, 4 zero bytes),
//!   then H*W little-endian f32.
//! * `LAPI`: lossless multi-channel raster, 16-byte header (magic, u32 C,
//!   u32 H, u32 W), then C*H*W little-endian f64. Used where 8-bit PNG would
//!   lose the precision a consistency check needs.
//! * 8-bit PNG for images (RGB), normal maps ((n+1)/2) and relaxed masks
//!   (gray, {0, 77, 255} for {0, 0.3, 1}).

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use lap_tensor::Tensor;

use crate::error::{Error, Result};

pub const LAPD_MAGIC: &[u8; 4] = b"LAPD";
pub const LAPI_MAGIC: &[u8; 4] = b"LAPI";

/// Mask gray levels and the weights they encode.
pub const MASK_LEVELS: [(u8, f64); 3] = [(0, 0.0), (77, 0.3), (255, 1.0)];

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Last two axes of `t` as (H, W), requiring every leading axis to be 1.
fn plane_dims(t: &Tensor, channels: usize) -> Result<(usize, usize)> {
    let s = t.shape();
    let n = s.len();
    if n < 2 || s[..n - 2].iter().product::<usize>() != channels {
        return Err(Error::Contract(format!(
            "expected {channels} plane(s) of H x W, got shape {s:?}"
        )));
    }
    Ok((s[n - 2], s[n - 1]))
}

pub fn write_lapd(path: impl AsRef<Path>, depth: &Tensor) -> Result<()> {
    let (h, w) = plane_dims(depth, 1)?;
    let mut out = Vec::with_capacity(16 + 4 * h * w);
    out.extend_from_slice(LAPD_MAGIC);
    out.extend((h as u32).to_le_bytes());
    out.extend((w as u32).to_le_bytes());
    out.extend([0u8; 4]);
    for &v in depth.data() {
        out.extend((v as f32).to_le_bytes());
    }
    write(path.as_ref(), &out)
}

/// Reads a depth raster as `[1, 1, H, W]`.
pub fn read_lapd(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = read(path)?;
    if bytes.len() < 16 || &bytes[..4] != LAPD_MAGIC {
        return Err(Error::format(path, "not a LAPD depth raster"));
    }
    let (h, w) = (u32_at(&bytes, 4) as usize, u32_at(&bytes, 8) as usize);
    if h == 0 || w == 0 || bytes.len() != 16 + 4 * h * w {
        return Err(Error::format(path, format!("payload does not match {h}x{w}")));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Tensor::new([1, 1, h, w], data)?)
}

pub fn write_lapi(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let s = t.shape();
    let n = s.len();
    if !(3..=4).contains(&n) || (n == 4 && s[0] != 1) {
        return Err(Error::Contract(format!("LAPI needs [C, H, W] or [1, C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[n - 3], s[n - 2], s[n - 1]);
    let mut out = Vec::with_capacity(16 + 8 * t.numel());
    out.extend_from_slice(LAPI_MAGIC);
    for d in [c, h, w] {
        out.extend((d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend(v.to_le_bytes());
    }
    write(path.as_ref(), &out)
}

/// Reads a lossless raster as `[1, C, H, W]`.
pub fn read_lapi(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = read(path)?;
    if bytes.len() < 16 || &bytes[..4] != LAPI_MAGIC {
        return Err(Error::format(path, "not a LAPI raster"));
    }
    let (c, h, w) = (
        u32_at(&bytes, 4) as usize,
        u32_at(&bytes, 8) as usize,
        u32_at(&bytes, 12) as usize,
    );
    if c * h * w == 0 || bytes.len() != 16 + 8 * c * h * w {
        return Err(Error::format(path, format!("payload does not match {c}x{h}x{w}")));
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Ok(Tensor::new([1, c, h, w], data)?)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png<P, C>(path: &Path, img: ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    write(path, &buf.into_inner())
}

/// Writes a 3-channel image with values in [0, 1] (clamped) as RGB PNG.
pub fn write_png_rgb(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let (h, w) = plane_dims(img, 3)?;
    let d = img.data();
    let plane = h * w;
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])])
    });
    encode_png(path.as_ref(), out)
}

/// Writes one plane in [0, 1] as 8-bit gray PNG.
pub fn write_png_gray(path: impl AsRef<Path>, plane: &Tensor) -> Result<()> {
    let (h, w) = plane_dims(plane, 1)?;
    let d = plane.data();
    let out = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(d[y as usize * w + x as usize])]));
    encode_png(path.as_ref(), out)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    let bytes = read(path)?;
    image::load_from_memory(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads an image as `[1, 3, H, W]` in [0, 1].
pub fn read_png_rgb(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = open_image(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = p[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new([1, 3, h, w], data)?)
}

/// Writes a relaxed mask (`[.., H, W]`, entries in {0, 0.3, 1}).
pub fn write_mask_png(path: impl AsRef<Path>, mask: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = plane_dims(mask, 1)?;
    let mut px = Vec::with_capacity(h * w);
    for &v in mask.data() {
        let level = MASK_LEVELS
            .iter()
            .find(|(_, m)| *m == v)
            .ok_or_else(|| Error::Contract(format!("mask weight {v} is not one of 0, 0.3, 1")))?;
        px.push(level.0);
    }
    let img = GrayImage::from_raw(w as u32, h as u32, px).expect("buffer sized to image");
    encode_png(path, img)
}

/// Reads a relaxed mask as `[1, 1, H, W]`; gray levels other than 0, 77, 255
/// are rejected.
pub fn read_mask_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = open_image(path)?;
    if img.color().has_color() {
        return Err(Error::format(path, "mask must be grayscale"));
    }
    let img = img.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .map(|p| {
            MASK_LEVELS
                .iter()
                .find(|(g, _)| *g == p[0])
                .map(|(_, m)| *m)
                .ok_or_else(|| Error::format(path, format!("mask gray level {} not in {{0, 77, 255}}", p[0])))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::new([1, 1, h, w], data)?)
}

/// Writes unit normals `[.., 3, H, W]` mapped by (n+1)/2.
pub fn write_normals_png(path: impl AsRef<Path>, n: &Tensor) -> Result<()> {
    write_png_rgb(path, &n.add_scalar(1.0)?.scale(0.5)?)
}

/// Writes a depth map in the renderer's [0.9, 1.1] range as gray PNG, near
/// surfaces bright.
pub fn write_depth_png(path: impl AsRef<Path>, depth: &Tensor) -> Result<()> {
    write_png_gray(path, &depth.scale(-5.0)?.add_scalar(5.5)?)
}
