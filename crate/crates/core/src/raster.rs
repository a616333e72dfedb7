//! Single-channel f32 rasters and the handful of image operations the
//! pipeline needs: mirroring, windowing, separable Gaussian blur, bilinear
//! resampling and 16-bit PGM I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Raster {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "raster {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Raster { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Raster { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.width + c] = v;
    }

    /// Value at signed coordinates, zero outside the raster.
    #[inline]
    pub fn get_or_zero(&self, r: isize, c: isize) -> f32 {
        if r < 0 || c < 0 || r as usize >= self.height || c as usize >= self.width {
            0.0
        } else {
            self.data[r as usize * self.width + c as usize]
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.width..(r + 1) * self.width]
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// Column-reversed copy: (r, c) -> (r, W-1-c).
    pub fn flip_horizontal(&self) -> Raster {
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.width.max(1)) {
            row.reverse();
        }
        out
    }

    /// Square window of side `size` centred on `(row, col)`; pixels outside
    /// the raster are zero. For even sizes the centre is the pixel at
    /// index `size / 2` of the window.
    pub fn window(&self, row: usize, col: usize, size: usize) -> Raster {
        let half = (size / 2) as isize;
        let r0 = row as isize - half;
        let c0 = col as isize - half;
        let mut out = Raster::zeros(size, size);
        for wr in 0..size {
            let r = r0 + wr as isize;
            if r < 0 || r as usize >= self.height {
                continue;
            }
            let c_lo = c0.max(0);
            let c_hi = (c0 + size as isize).min(self.width as isize);
            if c_lo >= c_hi {
                continue;
            }
            let src = &self.row(r as usize)[c_lo as usize..c_hi as usize];
            let dst_start = (c_lo - c0) as usize;
            out.data[wr * size + dst_start..wr * size + dst_start + src.len()].copy_from_slice(src);
        }
        out
    }

    /// Bilinear interpolation at fractional coordinates, zero outside.
    #[inline]
    pub fn bilinear(&self, r: f64, c: f64) -> f32 {
        let r0 = r.floor();
        let c0 = c.floor();
        let fr = (r - r0) as f32;
        let fc = (c - c0) as f32;
        let (ri, ci) = (r0 as isize, c0 as isize);
        let v00 = self.get_or_zero(ri, ci);
        let v01 = self.get_or_zero(ri, ci + 1);
        let v10 = self.get_or_zero(ri + 1, ci);
        let v11 = self.get_or_zero(ri + 1, ci + 1);
        let top = v00 + (v01 - v00) * fc;
        let bottom = v10 + (v11 - v10) * fc;
        top + (bottom - top) * fr
    }

    /// Separable Gaussian blur with the kernel truncated at 4 sigma and zero
    /// boundary fill. Sigma values too small to produce off-centre taps
    /// return an exact copy.
    ///
    /// Symmetric taps are summed in pairs, which makes the result exactly
    /// equivariant under horizontal and vertical mirroring.
    pub fn gaussian_blur(&self, sigma: f64) -> Raster {
        self.gaussian_blur_with(sigma, Boundary::Zero)
    }

    pub fn gaussian_blur_with(&self, sigma: f64, boundary: Boundary) -> Raster {
        let kernel = gaussian_kernel(sigma);
        if kernel.len() == 1 {
            return self.clone();
        }
        let rad = kernel.len() / 2;
        let half = &kernel[rad..];
        let (h, w) = self.shape();
        let mut tmp = Raster::zeros(h, w);
        for r in 0..h {
            let src = self.row(r);
            let dst = &mut tmp.data[r * w..(r + 1) * w];
            for (c, out) in dst.iter_mut().enumerate() {
                let mut acc = half[0] * src[c];
                for (t, &kv) in half.iter().enumerate().skip(1) {
                    let lo = if c >= t { src[c - t] } else { boundary.pick(src[0]) };
                    let hi = if c + t < w { src[c + t] } else { boundary.pick(src[w - 1]) };
                    acc += kv * (lo + hi);
                }
                *out = acc;
            }
        }
        let mut out = Raster::zeros(h, w);
        let zero_row = vec![0.0f32; w];
        for r in 0..h {
            let dst = &mut out.data[r * w..(r + 1) * w];
            for (d, &s) in dst.iter_mut().zip(&tmp.data[r * w..(r + 1) * w]) {
                *d = half[0] * s;
            }
            for (t, &kv) in half.iter().enumerate().skip(1) {
                let edge = |rr: usize| match boundary {
                    Boundary::Zero => &zero_row[..],
                    Boundary::Replicate => &tmp.data[rr * w..(rr + 1) * w],
                };
                let lo = if r >= t { &tmp.data[(r - t) * w..(r - t + 1) * w] } else { edge(0) };
                let hi = if r + t < h { &tmp.data[(r + t) * w..(r + t + 1) * w] } else { edge(h - 1) };
                for ((d, &a), &b) in dst.iter_mut().zip(lo).zip(hi) {
                    *d += kv * (a + b);
                }
            }
        }
        out
    }

    /// Resamples to `size`×`size` by bilinear interpolation at pixel
    /// centres, low-pass filtering first when shrinking.
    pub fn resize_square(&self, size: usize) -> Raster {
        if self.height == size && self.width == size {
            return self.clone();
        }
        let scale_r = self.height as f64 / size as f64;
        let scale_c = self.width as f64 / size as f64;
        let shrink = scale_r.max(scale_c);
        let src = if shrink > 1.0 {
            self.gaussian_blur(0.5 * shrink)
        } else {
            self.clone()
        };
        Raster::from_fn(size, size, |r, c| {
            let sr = (r as f64 + 0.5) * scale_r - 0.5;
            let sc = (c as f64 + 0.5) * scale_c - 0.5;
            src.bilinear(sr, sc)
        })
    }

    /// Writes a binary 16-bit PGM (P5, big-endian samples) with intensities
    /// in [0, 1] mapped to [0, 65535]. `comment` lines are embedded in the
    /// header.
    pub fn write_pgm16(&self, path: &Path, comment: &str) -> Result<()> {
        let mut buf = Vec::with_capacity(self.data.len() * 2 + 128);
        buf.extend_from_slice(b"P5\n");
        for line in comment.lines() {
            writeln!(buf, "# {line}").expect("write to vec");
        }
        write!(buf, "{} {}\n65535\n", self.width, self.height).expect("write to vec");
        for &v in &self.data {
            buf.extend_from_slice(&quantize_u16(v).to_be_bytes());
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm16(path: &Path) -> Result<Raster> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_pgm16(&bytes).map_err(|reason| Error::format(format!("PGM {}", path.display()), reason))
    }
}

/// How blur kernels see pixels beyond the raster edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Zero,
    Replicate,
}

impl Boundary {
    #[inline]
    fn pick(self, edge: f32) -> f32 {
        match self {
            Boundary::Zero => 0.0,
            Boundary::Replicate => edge,
        }
    }
}

/// Maps an intensity in [0, 1] to the 16-bit code used on disk.
#[inline]
pub fn quantize_u16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

#[inline]
pub fn dequantize_u16(q: u16) -> f32 {
    q as f32 / 65535.0
}

fn parse_pgm16(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let mut pos = 0usize;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err("truncated header".into());
        }
        if bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the samples
    pos += 1;
    if tokens[0] != "P5" {
        return Err(format!("expected magic P5, found {}", tokens[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let width = parse(&tokens[1])?;
    let height = parse(&tokens[2])?;
    let maxval = parse(&tokens[3])?;
    if maxval != 65535 {
        return Err(format!("expected maxval 65535, found {maxval}"));
    }
    let need = width * height * 2;
    if bytes.len() < pos + need {
        return Err("truncated sample data".into());
    }
    let data = bytes[pos..pos + need]
        .chunks_exact(2)
        .map(|b| dequantize_u16(u16::from_be_bytes([b[0], b[1]])))
        .collect();
    Ok(Raster { height, width, data })
}

/// Normalised Gaussian taps truncated at 4 sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    if !(sigma > 0.0) {
        return vec![1.0];
    }
    let rad = (4.0 * sigma).floor() as usize;
    if rad == 0 {
        return vec![1.0];
    }
    let taps: Vec<f64> = (0..=2 * rad)
        .map(|i| {
            let x = i as f64 - rad as f64;
            (-0.5 * x * x / (sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter().map(|t| (t / sum) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_is_an_involution() {
        let r = Raster::from_fn(3, 5, |r, c| (r * 5 + c) as f32);
        assert_eq!(r.flip_horizontal().get(1, 0), r.get(1, 4));
        assert_eq!(r.flip_horizontal().flip_horizontal(), r);
    }

    #[test]
    fn window_zero_fills_outside() {
        let r = Raster::filled(10, 10, 0.5);
        let w = r.window(0, 0, 6);
        // rows/cols 0..3 of the window fall outside
        assert_eq!(w.get(2, 2), 0.0);
        assert_eq!(w.get(3, 3), 0.5);
        let zeros = w.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 36 - 9);
    }

    #[test]
    fn blur_preserves_mass_in_the_interior() {
        let mut r = Raster::zeros(41, 41);
        r.set(20, 20, 1.0);
        let b = r.gaussian_blur(2.0);
        let total: f32 = b.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-5);
        assert!(b.get(20, 20) < 1.0);
    }

    #[test]
    fn blur_is_exactly_mirror_equivariant() {
        let r = Raster::from_fn(23, 31, |r, c| ((r * 31 + c) as f32 * 0.37).sin().abs());
        assert_eq!(r.flip_horizontal().gaussian_blur(1.7), r.gaussian_blur(1.7).flip_horizontal());
    }

    #[test]
    fn tiny_sigma_blur_is_identity() {
        let r = Raster::from_fn(8, 8, |r, c| (r + 2 * c) as f32);
        assert_eq!(r.gaussian_blur(0.2), r);
    }

    #[test]
    fn pgm_round_trip_is_exact_on_quantized_values() {
        let r = Raster::from_fn(7, 9, |r, c| dequantize_u16(((r * 9 + c) * 997 % 65536) as u16));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        r.write_pgm16(&p, "provenance test\nsecond line").unwrap();
        assert_eq!(Raster::read_pgm16(&p).unwrap(), r);
    }

    #[test]
    fn resize_identity_when_same_size() {
        let r = Raster::from_fn(4, 4, |r, c| (r * c) as f32);
        assert_eq!(r.resize_square(4), r);
        let s = Raster::filled(300, 300, 0.25).resize_square(96);
        assert!((s.get(48, 48) - 0.25).abs() < 1e-6);
    }
}
