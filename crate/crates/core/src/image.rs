//! Images, density maps, resampling, patchification and the on-disk raster formats.
//!
//! `CVDM` layout: magic `b"CVDM"`, `u32` LE width, `u32` LE height, then
//! `width·height` little-endian `f32` values in row-major order. Multi-channel
//! images are stored as consecutive `CVDM` blocks, one per channel.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub const DENSITY_MAGIC: &[u8; 4] = b"CVDM";

/// Default Gaussian width (pixels) of ground-truth density kernels.
pub const DEFAULT_SIGMA: f64 = 1.0;

/// Row-major, channel-interleaved float image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(dim_err!("image extents must be positive, got {width}x{height}x{channels}"));
        }
        if data.len() != width * height * channels {
            return Err(dim_err!("image {width}x{height}x{channels} given {} values", data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("image value {v} outside [0, 1]")));
        }
        Ok(Image { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Image::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Copies the `w×h` window whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Image> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(dim_err!(
                "crop {w}x{h} at ({x},{y}) outside {}x{} image",
                self.width,
                self.height
            ));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for yy in y..y + h {
            let start = (yy * self.width + x) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(Image { width: w, height: h, channels: c, data })
    }

    /// One channel as a row-major plane.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn from_planes(width: usize, height: usize, planes: &[Vec<f64>]) -> Result<Image> {
        let channels = planes.len();
        if planes.iter().any(|p| p.len() != width * height) {
            return Err(dim_err!("plane sizes disagree with {width}x{height}"));
        }
        let mut data = vec![0.0; width * height * channels];
        for (c, p) in planes.iter().enumerate() {
            for (i, v) in p.iter().enumerate() {
                data[i * channels + c] = *v;
            }
        }
        Image::new(width, height, channels, data)
    }
}

/// Nonnegative per-pixel object density; its sum is the object count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DensityMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(dim_err!("density {width}x{height} given {} values", data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Data(format!("density value {v} is negative or non-finite")));
        }
        Ok(DensityMap { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        DensityMap { width, height, data: vec![0.0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Axis-aligned pixel box: top-left corner plus extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        BBox { x, y, w, h }
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }
}

/// Per-output-index source taps `(i0, i1, frac)` for a half-pixel-center
/// bilinear resample from `in_len` to `out_len` samples.
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn resize_bilinear(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(dim_err!("resize target {out_w}x{out_h} has a zero extent"));
    }
    let (w, c) = (img.width, img.channels);
    let tx = bilinear_taps(img.width, out_w);
    let ty = bilinear_taps(img.height, out_h);
    let src = &img.data;
    let mut data = Vec::with_capacity(out_w * out_h * c);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            for ch in 0..c {
                let p = |x: usize, y: usize| src[(y * w + x) * c + ch];
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                // convex weights can overshoot [0,1] by an ulp
                data.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(out_w, out_h, c, data)
}

/// Splits `img` into `patch×patch` tokens: patches left-to-right then
/// top-to-bottom, pixels row-major inside a patch, channels fastest.
pub fn patchify(img: &Image, patch: usize) -> Result<Tensor> {
    patchify_data(img.width, img.height, img.channels, &img.data, patch)
}

/// [`patchify`] over raw channel-interleaved data (values unrestricted).
pub fn patchify_data(width: usize, height: usize, channels: usize, data: &[f64], patch: usize) -> Result<Tensor> {
    if patch == 0 || width % patch != 0 || height % patch != 0 {
        return Err(dim_err!("patch size {patch} does not divide the {width}x{height} image"));
    }
    if data.len() != width * height * channels {
        return Err(dim_err!("{width}x{height}x{channels} layout given {} values", data.len()));
    }
    let (gw, gh, c) = (width / patch, height / patch, channels);
    let row = patch * c;
    let mut out = Vec::with_capacity(data.len());
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                let start = ((py * patch + y) * width + px * patch) * c;
                out.extend_from_slice(&data[start..start + row]);
            }
        }
    }
    Tensor::new(vec![gw * gh, patch * patch * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, width: usize, height: usize, channels: usize, patch: usize) -> Result<Image> {
    if patch == 0 || width % patch != 0 || height % patch != 0 {
        return Err(dim_err!("patch size {patch} does not divide {width}x{height}"));
    }
    let (gw, gh) = (width / patch, height / patch);
    if tokens.shape() != [gw * gh, patch * patch * channels] {
        return Err(dim_err!("token shape {:?} does not match the image layout", tokens.shape()));
    }
    let row = patch * channels;
    let mut data = vec![0.0; width * height * channels];
    let src = tokens.data();
    for py in 0..gh {
        for px in 0..gw {
            let tok = &src[(py * gw + px) * patch * row..(py * gw + px + 1) * patch * row];
            for y in 0..patch {
                let start = ((py * patch + y) * width + px * patch) * channels;
                data[start..start + row].copy_from_slice(&tok[y * row..(y + 1) * row]);
            }
        }
    }
    Image::new(width, height, channels, data)
}

/// Sum of unit-mass Gaussians, one per center. Each kernel is truncated at
/// four sigmas and to the canvas, then renormalized so it contributes exactly
/// one object of mass. Pixel `(i, j)` is sampled at its center `(i+0.5, j+0.5)`.
pub fn render_density(width: usize, height: usize, centers: &[(f64, f64)], sigma: f64) -> Result<DensityMap> {
    if width == 0 || height == 0 {
        return Err(dim_err!("density canvas {width}x{height} has a zero extent"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("density sigma must be positive, got {sigma}")));
    }
    let mut data = vec![0.0; width * height];
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel = Vec::new();
    for &(cx, cy) in centers {
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(Error::Data(format!("center ({cx}, {cy}) outside the {width}x{height} canvas")));
        }
        let (ix, iy) = (cx.floor() as isize, cy.floor() as isize);
        let x_lo = (ix - radius).max(0) as usize;
        let x_hi = ((ix + radius) as usize).min(width - 1);
        let y_lo = (iy - radius).max(0) as usize;
        let y_hi = ((iy + radius) as usize).min(height - 1);
        kernel.clear();
        let mut total = 0.0;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                total += v;
                kernel.push((y * width + x, v));
            }
        }
        if total > 0.0 && total.is_normal() {
            for &(i, v) in &kernel {
                data[i] += v / total;
            }
        } else {
            // kernel narrower than a pixel: all mass lands on the containing pixel
            data[iy as usize * width + ix as usize] += 1.0;
        }
    }
    DensityMap::new(width, height, data)
}

fn write_cvdm_block<W: Write>(out: &mut W, width: usize, height: usize, values: &[f64]) -> io::Result<()> {
    out.write_all(DENSITY_MAGIC)?;
    out.write_all(&(width as u32).to_le_bytes())?;
    out.write_all(&(height as u32).to_le_bytes())?;
    for v in values {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Encodes a density map in the `CVDM` container.
pub fn encode_density(map: &DensityMap) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 4 * map.data.len());
    write_cvdm_block(&mut buf, map.width, map.height, &map.data).expect("writing to a Vec cannot fail");
    buf
}

fn decode_cvdm_block(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>, usize)> {
    if bytes.len() < 12 || &bytes[..4] != DENSITY_MAGIC {
        return Err(Error::Format("missing CVDM magic".into()));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::Format(format!("CVDM dimensions {width}x{height} overflow")))?;
    let end = 12 + 4 * n;
    if width == 0 || height == 0 || bytes.len() < end {
        return Err(Error::Format(format!(
            "CVDM header declares {width}x{height} but the payload has {} bytes",
            bytes.len().saturating_sub(12)
        )));
    }
    let data = bytes[12..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok((width, height, data, end))
}

pub fn decode_density(bytes: &[u8]) -> Result<DensityMap> {
    let (w, h, data, end) = decode_cvdm_block(bytes)?;
    if end != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after CVDM payload", bytes.len() - end)));
    }
    DensityMap::new(w, h, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_density(path: &Path, map: &DensityMap) -> Result<()> {
    fs::write(path, encode_density(map)).map_err(|e| Error::io(path, e))
}

pub fn read_density(path: &Path) -> Result<DensityMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_density(&bytes)
}

/// Stores an image as one `CVDM` block per channel.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let mut buf = Vec::new();
    for c in 0..img.channels {
        write_cvdm_block(&mut buf, img.width, img.height, &img.plane(c)).expect("Vec write");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut planes = Vec::new();
    let mut rest = &bytes[..];
    let mut dims = None;
    while !rest.is_empty() {
        let (w, h, data, end) = decode_cvdm_block(rest)?;
        if dims.is_some_and(|d| d != (w, h)) {
            return Err(Error::Format(format!("{}: channel planes disagree in size", path.display())));
        }
        dims = Some((w, h));
        planes.push(data);
        rest = &rest[end..];
    }
    let (w, h) = dims.ok_or_else(|| Error::Format(format!("{}: empty image file", path.display())))?;
    Image::from_planes(w, h, &planes)
}

/// Binary P5 PGM (maxval 255) of `values`, min-max scaled to `[0, 255]`.
/// A constant input maps to all zeros.
pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != width * height || width == 0 || height == 0 {
        return Err(dim_err!("PGM {width}x{height} given {} values", values.len()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend(values.iter().map(|v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(buf)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let bytes = encode_pgm(width, height, values)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a binary P5 PGM into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("non-ASCII PGM header".into()))?);
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!("expected P5 magic, found {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM header field {s:?}")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 || w == 0 || h == 0 {
        return Err(Error::Format(format!("unsupported PGM {w}x{h} maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let pixels = bytes.get(pos..pos + w * h).ok_or_else(|| Error::Format("truncated PGM raster".into()))?;
    Ok((w, h, pixels.to_vec()))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent scalar bilinear oracle: maps each output pixel center back
    /// to input coordinates and blends the four neighbours.
    fn oracle_sample(src: &[f64], w: usize, h: usize, ox: usize, oy: usize, out_w: usize, out_h: usize) -> f64 {
        let sx = ((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).max(0.0).min((w - 1) as f64);
        let sy = ((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).max(0.0).min((h - 1) as f64);
        let (x0, y0) = (sx.floor(), sy.floor());
        let (x1, y1) = ((x0 + 1.0).min((w - 1) as f64), (y0 + 1.0).min((h - 1) as f64));
        let (ax, ay) = (sx - x0, sy - y0);
        let at = |x: f64, y: f64| src[y as usize * w + x as usize];
        (1.0 - ay) * ((1.0 - ax) * at(x0, y0) + ax * at(x1, y0)) + ay * ((1.0 - ax) * at(x0, y1) + ax * at(x1, y1))
    }

    #[test]
    fn resize_constant_and_identity() {
        let img = Image::filled(5, 3, 2, 0.375).unwrap();
        let up = resize_bilinear(&img, 11, 7).unwrap();
        assert!(up.data().iter().all(|v| *v == 0.375));

        let data: Vec<f64> = (0..5 * 4 * 3).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let img = Image::new(5, 4, 3, data).unwrap();
        let same = resize_bilinear(&img, 5, 4).unwrap();
        for (a, b) in same.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_checkerboard_matches_scalar_oracle() {
        let src = [0.0, 1.0, 1.0, 0.0];
        let img = Image::new(2, 2, 1, src.to_vec()).unwrap();
        let up = resize_bilinear(&img, 4, 4).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let want = oracle_sample(&src, 2, 2, ox, oy, 4, 4);
                assert!((up.get(ox, oy, 0) - want).abs() < 1e-12);
            }
        }
        // the four center samples sit a quarter pixel from each source center
        assert!((up.get(1, 1, 0) - 0.375).abs() < 1e-12);
        assert!((up.get(2, 1, 0) - 0.625).abs() < 1e-12);
        assert_eq!(up.get(0, 0, 0), 0.0);
    }

    #[test]
    fn resize_rejects_zero_target() {
        let img = Image::filled(2, 2, 1, 0.5).unwrap();
        assert!(resize_bilinear(&img, 0, 2).is_err());
        assert!(Image::new(0, 2, 1, vec![]).is_err());
    }

    #[test]
    fn patch_counts() {
        let img = Image::filled(384, 384, 3, 0.0).unwrap();
        assert_eq!(patchify(&img, 16).unwrap().shape(), &[576, 768]);
        let ex = Image::filled(64, 64, 3, 0.0).unwrap();
        assert_eq!(patchify(&ex, 16).unwrap().shape()[0], 16);
        assert!(patchify(&Image::filled(10, 8, 1, 0.0).unwrap(), 4).is_err());
    }

    #[test]
    fn patch_ordering() {
        // 4x2 image, 1 channel, patch 2: two patches side by side
        let img = Image::new(4, 2, 1, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]).unwrap();
        let t = patchify(&img, 2).unwrap();
        assert_eq!(t.data(), &[0.0, 0.1, 0.4, 0.5, 0.2, 0.3, 0.6, 0.7]);
        assert_eq!(unpatchify(&t, 4, 2, 1, 2).unwrap(), img);
    }

    #[test]
    fn density_mass() {
        assert_eq!(render_density(8, 8, &[], 1.0).unwrap().count(), 0.0);
        let one = render_density(16, 16, &[(0.2, 15.9)], 1.0).unwrap();
        assert!((one.count() - 1.0).abs() < 1e-9);
        let centers: Vec<(f64, f64)> = (0..17).map(|i| ((i * 7 % 31) as f64 + 0.3, (i * 3 % 29) as f64)).collect();
        let many = render_density(32, 32, &centers, 1.0).unwrap();
        assert!((many.count() - 17.0).abs() < 1e-6);
        let tiny = render_density(4, 4, &[(1.5, 1.5)], 1e-3).unwrap();
        assert!((tiny.count() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn density_rejects_out_of_bounds_center() {
        assert!(render_density(8, 8, &[(8.0, 1.0)], 1.0).is_err());
        assert!(render_density(8, 8, &[(1.0, -0.1)], 1.0).is_err());
        assert!(render_density(8, 8, &[(1.0, 1.0)], 0.0).is_err());
    }

    #[test]
    fn density_file_bytes() {
        let map = DensityMap::new(3, 2, vec![0.0, 1.0, 0.5, 2.0, 0.25, 3.0]).unwrap();
        let bytes = encode_density(&map);
        let mut want = b"CVDM".to_vec();
        want.extend_from_slice(&[3, 0, 0, 0, 2, 0, 0, 0]);
        for v in [0x0000_0000u32, 0x3f80_0000, 0x3f00_0000, 0x4000_0000, 0x3e80_0000, 0x4040_0000] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes.len(), 36);
        assert_eq!(bytes, want);
        assert_eq!(decode_density(&bytes).unwrap(), map);
    }

    #[test]
    fn density_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cvdm");
        let map = render_density(9, 7, &[(2.0, 3.0), (6.5, 1.25)], 1.0).unwrap();
        // f32 storage: round once, then the round trip is exact
        let stored = decode_density(&encode_density(&map)).unwrap();
        write_density(&path, &stored).unwrap();
        assert_eq!(read_density(&path).unwrap(), stored);
    }

    #[test]
    fn malformed_density_is_a_format_error() {
        assert!(matches!(decode_density(b"CVDX\x01\0\0\0\x01\0\0\0\0\0\0\0"), Err(Error::Format(_))));
        assert!(matches!(decode_density(b"CVDM\x02\0\0\0\x01\0\0\0\0\0\0\0"), Err(Error::Format(_))));
    }

    #[test]
    fn pgm_encoding() {
        let bytes = encode_pgm(3, 1, &[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 0, 0]);
        let bytes = encode_pgm(2, 2, &[0.0, 1.0, 0.5, 0.25]).unwrap();
        assert_eq!(bytes, b"P5\n2 2\n255\n\x00\xff\x80\x40".to_vec());
        let (w, h, px) = decode_pgm(&bytes).unwrap();
        assert_eq!((w, h, px), (2, 2, vec![0, 255, 128, 64]));
        assert!(decode_pgm(b"P2\n2 2\n255\n1234").is_err());
    }

    #[test]
    fn image_planes_round_trip_through_cvdm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.cvdm");
        let data: Vec<f64> = (0..4 * 3 * 3).map(|i| (i % 8) as f64 / 8.0).collect();
        let img = Image::new(4, 3, 3, data).unwrap();
        write_image(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }
}
