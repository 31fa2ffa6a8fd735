//! Disparity rasters and their 16-bit PGM representation.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Canonical side length of a depth map fed to the codec.
pub const CANONICAL_SIZE: usize = 320;

const PGM_MAX: f64 = 65535.0;

/// Row-major disparity raster; larger values are closer to the camera.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: format!("{width}x{height} values"),
                got: format!("{} values", values.len()),
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || !(0.0..=1.0).contains(*v)) {
            return Err(Error::ShapeMismatch {
                expected: "finite disparities in [0,1]".into(),
                got: v.to_string(),
            });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("constant map is valid")
    }

    /// Builds a map by evaluating `f(x, y)` at every pixel; values are clamped to [0,1].
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self::new(width, height, values).expect("from_fn produces a valid map")
    }

    /// Per-image min-max normalization of arbitrary finite raw values.
    /// A constant input maps to all 0.5.
    pub fn normalized(width: usize, height: usize, raw: &[f64]) -> Result<Self> {
        if raw.len() != width * height || raw.is_empty() {
            return Err(Error::ShapeMismatch {
                expected: format!("{width}x{height} values"),
                got: format!("{} values", raw.len()),
            });
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch {
                expected: "finite values".into(),
                got: "non-finite value".into(),
            });
        }
        let (lo, hi) = raw
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let values = if hi > lo {
            raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![0.5; raw.len()]
        };
        Self::new(width, height, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn is_canonical(&self) -> bool {
        self.width == CANONICAL_SIZE && self.height == CANONICAL_SIZE
    }

    pub fn ensure_canonical(&self) -> Result<()> {
        if self.is_canonical() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: format!("{CANONICAL_SIZE}x{CANONICAL_SIZE}"),
                got: format!("{}x{}", self.width, self.height),
            })
        }
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        Self::from_fn(width, height, |x, y| {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let top = self.get(x0, y0) * (1.0 - tx) + self.get(x1, y0) * tx;
            let bottom = self.get(x0, y1) * (1.0 - tx) + self.get(x1, y1) * tx;
            top * (1.0 - ty) + bottom * ty
        })
    }

    pub fn to_canonical(&self) -> Self {
        self.resize_bilinear(CANONICAL_SIZE, CANONICAL_SIZE)
    }

    /// Mean squared difference against another map of the same shape.
    pub fn mse(&self, other: &DepthMap) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.width, self.height),
                got: format!("{}x{}", other.width, other.height),
            });
        }
        let sum: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.values.len() as f64)
    }

    /// Nearest-neighbor lookup of a point given in a `frame_w × frame_h` image.
    pub fn sample_nearest(&self, x: f64, y: f64, frame_w: usize, frame_h: usize) -> f64 {
        let (mx, my) = self.scale_point(x, y, frame_w, frame_h);
        let px = (mx.floor() as usize).min(self.width - 1);
        let py = (my.floor() as usize).min(self.height - 1);
        self.get(px, py)
    }

    /// Bilinear lookup of a point given in a `frame_w × frame_h` image.
    pub fn sample_bilinear(&self, x: f64, y: f64, frame_w: usize, frame_h: usize) -> f64 {
        let (mx, my) = self.scale_point(x, y, frame_w, frame_h);
        let fx = (mx - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (my - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let top = self.get(x0, y0) * (1.0 - tx) + self.get(x1, y0) * tx;
        let bottom = self.get(x0, y1) * (1.0 - tx) + self.get(x1, y1) * tx;
        top * (1.0 - ty) + bottom * ty
    }

    // Pixel (x, y) of the frame covers [x, x+1); its center maps to the
    // matching fractional position in this raster.
    fn scale_point(&self, x: f64, y: f64, frame_w: usize, frame_h: usize) -> (f64, f64) {
        (
            (x + 0.5) * self.width as f64 / frame_w as f64,
            (y + 0.5) * self.height as f64 / frame_h as f64,
        )
    }

    /// Serializes as binary 16-bit PGM (P5, maxval 65535, big-endian samples).
    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P5\n{} {}\n65535\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.values.len() * 2);
        for v in &self.values {
            let q = (v * PGM_MAX).round() as u16;
            buf.extend_from_slice(&q.to_be_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_pgm(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads a binary PGM. 8-bit files are accepted and scaled by 1/255.
    pub fn read_pgm<R: Read>(input: R) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let magic = read_header_token(&mut reader)?;
        if magic != "P5" {
            return Err(Error::Pgm(format!("expected P5 magic, found `{magic}`")));
        }
        let width = parse_header_number(&mut reader, "width")?;
        let height = parse_header_number(&mut reader, "height")?;
        let maxval = parse_header_number(&mut reader, "maxval")?;
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(Error::Pgm(format!(
                "unsupported geometry {width}x{height} maxval {maxval}"
            )));
        }
        let bytes_per = if maxval > 255 { 2 } else { 1 };
        let mut data = vec![0u8; width * height * bytes_per];
        reader
            .read_exact(&mut data)
            .map_err(|e| Error::Pgm(format!("truncated raster: {e}")))?;
        let scale = maxval as f64;
        let values = if bytes_per == 2 {
            data.chunks_exact(2)
                .map(|c| (f64::from(u16::from_be_bytes([c[0], c[1]])) / scale).min(1.0))
                .collect()
        } else {
            data.iter().map(|&b| (f64::from(b) / scale).min(1.0)).collect()
        };
        Self::new(width, height, values)
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_pgm(std::fs::File::open(path)?)
    }
}

fn read_header_token<R: BufRead>(reader: &mut R) -> Result<String> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    loop {
        if reader.read(&mut byte)? == 0 {
            return Err(Error::Pgm("unexpected end of header".into()));
        }
        match byte[0] {
            b'#' if token.is_empty() => {
                let mut comment = Vec::new();
                reader.read_until(b'\n', &mut comment)?;
            }
            b if b.is_ascii_whitespace() => {
                if !token.is_empty() {
                    return Ok(token);
                }
            }
            b => token.push(b as char),
        }
    }
}

fn parse_header_number<R: BufRead>(reader: &mut R, what: &str) -> Result<usize> {
    let token = read_header_token(reader)?;
    token
        .parse()
        .map_err(|_| Error::Pgm(format!("bad {what} `{token}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_raw_normalizes_to_half() {
        let map = DepthMap::normalized(2, 2, &[3.0; 4]).unwrap();
        assert!(map.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn normalization_spans_unit_interval() {
        let map = DepthMap::normalized(3, 1, &[-2.0, 0.0, 6.0]).unwrap();
        assert_eq!(map.values(), &[0.0, 0.25, 1.0]);
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(DepthMap::new(1, 1, vec![1.5]).is_err());
        assert!(DepthMap::new(1, 1, vec![f64::NAN]).is_err());
        assert!(DepthMap::new(2, 1, vec![0.5]).is_err());
    }

    #[test]
    fn pgm_round_trip_quantizes_to_16_bits() {
        let map = DepthMap::from_fn(7, 5, |x, y| (x * 5 + y) as f64 / 40.0);
        let bytes = map.to_pgm_bytes();
        assert!(bytes.starts_with(b"P5\n7 5\n65535\n"));
        let back = DepthMap::read_pgm(&bytes[..]).unwrap();
        for (a, b) in map.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-15);
        }
        assert_eq!(back.to_pgm_bytes(), bytes);
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let map = DepthMap::read_pgm(&bytes[..]).unwrap();
        assert_eq!(map.values(), &[0.0, 1.0]);
    }

    #[test]
    fn truncated_pgm_is_rejected() {
        let bytes = b"P5\n4 4\n65535\n\x00\x01".to_vec();
        assert!(matches!(DepthMap::read_pgm(&bytes[..]), Err(Error::Pgm(_))));
    }

    #[test]
    fn resize_preserves_constants_and_linear_ramps() {
        let flat = DepthMap::constant(64, 48, 0.3).to_canonical();
        assert!(flat.is_canonical());
        assert!(flat.values().iter().all(|v| (v - 0.3).abs() < 1e-12));

        let ramp = DepthMap::from_fn(640, 10, |x, _| (x as f64 + 0.5) / 640.0);
        let small = ramp.resize_bilinear(320, 5);
        // Interior pixels of a linear ramp are reproduced exactly by bilinear sampling.
        for x in 1..319 {
            let expected = (x as f64 + 0.5) / 320.0;
            assert!((small.get(x, 2) - expected).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn nearest_lookup_scales_frame_coordinates() {
        let map = DepthMap::from_fn(320, 320, |x, _| x as f64 / 319.0);
        // Pixel 639 of a 640-wide frame lands in the last map column.
        assert_eq!(map.sample_nearest(639.0, 0.0, 640, 480), 1.0);
        assert_eq!(map.sample_nearest(0.0, 479.0, 640, 480), 0.0);
        assert_eq!(map.sample_nearest(100.0, 10.0, 320, 320), 100.0 / 319.0);
    }
}
