//! Contrast-limited adaptive histogram equalization for 8-bit thermal frames,
//! plus binary PGM (P5) reading and writing.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("image {width}x{height} is smaller than the {tiles_x}x{tiles_y} tile grid")]
    ImageTooSmall {
        width: usize,
        height: usize,
        tiles_x: usize,
        tiles_y: usize,
    },
    #[error("invalid CLAHE parameters: {0}")]
    InvalidParams(String),
    #[error("unsupported PGM variant {0:?}")]
    UnsupportedVariant(String),
    #[error("unsupported PGM maxval {0} (only 255 is accepted)")]
    UnsupportedMaxval(u32),
    #[error("malformed PGM: {0}")]
    Malformed(String),
    #[error("pixel buffer has {found} bytes, expected {expected}")]
    BufferSize { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, PreprocessError> {
        if pixels.len() != width * height {
            return Err(PreprocessError::BufferSize {
                expected: width * height,
                found: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClaheParams {
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Histogram clip height as a multiple of the uniform bin height
    /// (`tile_pixels / 256`). 1.0 flattens every tile completely.
    pub clip_limit: f64,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            tiles_x: 8,
            tiles_y: 8,
            clip_limit: 3.0,
        }
    }
}

/// Tile boundaries along one axis: tile `i` covers `[edges[i], edges[i + 1])`.
fn tile_edges(len: usize, tiles: usize) -> Vec<usize> {
    (0..=tiles).map(|i| i * len / tiles).collect()
}

/// Clips a histogram at `limit` and hands the clipped mass back to every bin
/// in equal shares, never lifting a bin above `limit`.
///
/// The equal share `delta` solves `sum_i min(c_i + delta, limit) = total`
/// where `c_i = min(h_i, limit)`.
fn clip_histogram(hist: &[f64; 256], limit: f64) -> [f64; 256] {
    let total: f64 = hist.iter().sum();
    let mut clipped = [0.0; 256];
    for (c, h) in clipped.iter_mut().zip(hist) {
        *c = h.min(limit);
    }
    let kept: f64 = clipped.iter().sum();
    if kept >= total {
        return clipped;
    }
    if 256.0 * limit <= total {
        // Only reachable for clip_limit == 1: the flat histogram.
        return [total / 256.0; 256];
    }
    // Headroom per bin, ascending. Bins saturate in that order as delta grows.
    let mut room: Vec<f64> = clipped.iter().map(|c| limit - c).collect();
    room.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let excess = total - kept;
    let mut filled = 0.0; // mass absorbed by saturated bins
    let mut delta = excess / 256.0;
    for (i, r) in room.iter().enumerate() {
        let open = (256 - i) as f64;
        let candidate = (excess - filled) / open;
        if candidate <= *r {
            delta = candidate;
            break;
        }
        filled += r;
    }
    let mut out = [0.0; 256];
    for (o, c) in out.iter_mut().zip(&clipped) {
        *o = (c + delta).min(limit);
    }
    out
}

/// Intensity mapping of one tile: `floor(255 * cdf(v) / total)`.
fn tile_mapping(hist: &[f64; 256]) -> [u8; 256] {
    let total: f64 = hist.iter().sum();
    let mut map = [0u8; 256];
    let mut cdf = 0.0;
    for (v, h) in hist.iter().enumerate() {
        cdf += h;
        map[v] = (255.0 * cdf / total).floor().clamp(0.0, 255.0) as u8;
    }
    map
}

/// Per-tile mappings in row-major tile order, exposed for inspection.
pub fn tile_mappings(img: &GrayImage, p: &ClaheParams) -> Result<Vec<[u8; 256]>, PreprocessError> {
    validate(img, p)?;
    let xs = tile_edges(img.width, p.tiles_x);
    let ys = tile_edges(img.height, p.tiles_y);
    let mut maps = Vec::with_capacity(p.tiles_x * p.tiles_y);
    for ty in 0..p.tiles_y {
        for tx in 0..p.tiles_x {
            let mut hist = [0.0f64; 256];
            for y in ys[ty]..ys[ty + 1] {
                let row = &img.pixels[y * img.width..(y + 1) * img.width];
                for &v in &row[xs[tx]..xs[tx + 1]] {
                    hist[v as usize] += 1.0;
                }
            }
            let n = ((xs[tx + 1] - xs[tx]) * (ys[ty + 1] - ys[ty])) as f64;
            let limit = p.clip_limit * n / 256.0;
            maps.push(tile_mapping(&clip_histogram(&hist, limit)));
        }
    }
    Ok(maps)
}

fn validate(img: &GrayImage, p: &ClaheParams) -> Result<(), PreprocessError> {
    if p.tiles_x == 0 || p.tiles_y == 0 {
        return Err(PreprocessError::InvalidParams("tile grid must be at least 1x1".into()));
    }
    if !p.clip_limit.is_finite() || p.clip_limit < 1.0 {
        return Err(PreprocessError::InvalidParams(format!(
            "clip limit {} must be finite and >= 1",
            p.clip_limit
        )));
    }
    if img.width < p.tiles_x || img.height < p.tiles_y {
        return Err(PreprocessError::ImageTooSmall {
            width: img.width,
            height: img.height,
            tiles_x: p.tiles_x,
            tiles_y: p.tiles_y,
        });
    }
    Ok(())
}

/// Bracketing tile indices and the weight of the upper one for a pixel at
/// `pos` given tile centers; clamps to the outermost tile at the borders.
fn bracket(centers: &[f64], pos: f64) -> (usize, usize, f64) {
    let last = centers.len() - 1;
    if pos <= centers[0] {
        return (0, 0, 0.0);
    }
    if pos >= centers[last] {
        return (last, last, 0.0);
    }
    let hi = centers.partition_point(|c| *c <= pos);
    let lo = hi - 1;
    let w = (pos - centers[lo]) / (centers[hi] - centers[lo]);
    (lo, hi, w)
}

pub fn clahe(img: &GrayImage, p: &ClaheParams) -> Result<GrayImage, PreprocessError> {
    let maps = tile_mappings(img, p)?;
    let xs = tile_edges(img.width, p.tiles_x);
    let ys = tile_edges(img.height, p.tiles_y);
    let cx: Vec<f64> = xs.windows(2).map(|w| (w[0] + w[1]) as f64 / 2.0).collect();
    let cy: Vec<f64> = ys.windows(2).map(|w| (w[0] + w[1]) as f64 / 2.0).collect();
    let col_brackets: Vec<_> = (0..img.width).map(|x| bracket(&cx, x as f64 + 0.5)).collect();

    let mut out = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        let (ty0, ty1, wy) = bracket(&cy, y as f64 + 0.5);
        for (x, &(tx0, tx1, wx)) in col_brackets.iter().enumerate() {
            let v = img.pixels[y * img.width + x] as usize;
            let m = |tx: usize, ty: usize| maps[ty * p.tiles_x + tx][v] as f64;
            let top = m(tx0, ty0) * (1.0 - wx) + m(tx1, ty0) * wx;
            let bottom = m(tx0, ty1) * (1.0 - wx) + m(tx1, ty1) * wx;
            let blended = top * (1.0 - wy) + bottom * wy;
            out.push((blended + 0.5).floor().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(GrayImage {
        width: img.width,
        height: img.height,
        pixels: out,
    })
}

/// Parses a binary (P5) PGM with maxval 255. Comments are allowed in the header.
pub fn pgm_from_bytes(bytes: &[u8]) -> Result<GrayImage, PreprocessError> {
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<String, PreprocessError> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(PreprocessError::Malformed("unexpected end of header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos)?;
    if magic != "P5" {
        return Err(PreprocessError::UnsupportedVariant(magic));
    }
    let number = |pos: &mut usize, what: &str| -> Result<u32, PreprocessError> {
        let t = token(pos)?;
        t.parse()
            .map_err(|_| PreprocessError::Malformed(format!("bad {what} {t:?}")))
    };
    let width = number(&mut pos, "width")? as usize;
    let height = number(&mut pos, "height")? as usize;
    let maxval = number(&mut pos, "maxval")?;
    if maxval != 255 {
        return Err(PreprocessError::UnsupportedMaxval(maxval));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != width * height {
        return Err(PreprocessError::BufferSize {
            expected: width * height,
            found: raster.len(),
        });
    }
    GrayImage::new(width, height, raster.to_vec())
}

pub fn pgm_to_bytes(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage, PreprocessError> {
    pgm_from_bytes(&std::fs::read(path)?)
}

pub fn write_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<(), PreprocessError> {
    Ok(std::fs::write(path, pgm_to_bytes(img))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::XorShift64Star;
    use proptest::prelude::*;

    fn random_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = XorShift64Star::new(seed);
        let px = (0..w * h).map(|_| rng.next_u64() as u8).collect();
        GrayImage::new(w, h, px).unwrap()
    }

    #[test]
    fn unit_clip_is_identity() {
        for (w, h, seed) in [(64, 48, 1), (37, 29, 2), (8, 8, 3)] {
            let img = random_image(w, h, seed);
            let p = ClaheParams {
                tiles_x: 4,
                tiles_y: 3,
                clip_limit: 1.0,
            };
            assert_eq!(clahe(&img, &p).unwrap(), img);
        }
        // Also for a skewed (dark, low-contrast) frame.
        let px: Vec<u8> = (0..40 * 30).map(|i| 20 + (i % 7) as u8).collect();
        let img = GrayImage::new(40, 30, px).unwrap();
        assert_eq!(
            clahe(
                &img,
                &ClaheParams {
                    clip_limit: 1.0,
                    ..Default::default()
                }
            )
            .unwrap(),
            img
        );
    }

    #[test]
    fn half_black_half_white_single_tile() {
        // Hand-computed: cdf(0) = n/2, so 0 -> floor(255 / 2) = 127; cdf(255) = n -> 255.
        let mut px = vec![0u8; 32];
        px.extend(vec![255u8; 32]);
        let img = GrayImage::new(8, 8, px).unwrap();
        let p = ClaheParams {
            tiles_x: 1,
            tiles_y: 1,
            clip_limit: 1e9,
        };
        let out = clahe(&img, &p).unwrap();
        assert!(out.pixels()[..32].iter().all(|&v| v == 127));
        assert!(out.pixels()[32..].iter().all(|&v| v == 255));
    }

    #[test]
    fn tile_mappings_are_monotone() {
        let img = random_image(50, 40, 4);
        for clip in [1.0, 2.0, 3.0, 10.0] {
            let p = ClaheParams {
                tiles_x: 5,
                tiles_y: 4,
                clip_limit: clip,
            };
            for map in tile_mappings(&img, &p).unwrap() {
                assert!(map.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn constant_image_stays_single_level() {
        let img = GrayImage::filled(64, 64, 90);
        let out = clahe(&img, &ClaheParams::default()).unwrap();
        let first = out.pixels()[0];
        assert!(out.pixels().iter().all(|&v| v == first));
    }

    #[test]
    fn clipping_conserves_mass_and_respects_limit() {
        let mut hist = [0.0; 256];
        hist[10] = 500.0;
        hist[11] = 100.0;
        hist[200] = 424.0;
        let limit = 3.0 * 1024.0 / 256.0;
        let out = clip_histogram(&hist, limit);
        let total: f64 = out.iter().sum();
        assert!((total - 1024.0).abs() < 1e-9);
        assert!(out.iter().all(|v| *v <= limit + 1e-12));
    }

    #[test]
    fn too_small_image_is_rejected() {
        let img = GrayImage::filled(4, 4, 0);
        assert!(matches!(
            clahe(&img, &ClaheParams::default()),
            Err(PreprocessError::ImageTooSmall { .. })
        ));
        assert!(clahe(
            &img,
            &ClaheParams {
                clip_limit: 0.5,
                tiles_x: 1,
                tiles_y: 1
            }
        )
        .is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let img = random_image(13, 7, 5);
        let bytes = pgm_to_bytes(&img);
        assert_eq!(pgm_from_bytes(&bytes).unwrap(), img);
        assert_eq!(pgm_to_bytes(&pgm_from_bytes(&bytes).unwrap()), bytes);
        let one = GrayImage::new(1, 1, vec![42]).unwrap();
        assert_eq!(pgm_from_bytes(&pgm_to_bytes(&one)).unwrap(), one);
    }

    #[test]
    fn pgm_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = random_image(9, 4, 6);
        write_pgm(&img, &path).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), img);
    }

    #[test]
    fn pgm_rejects_other_variants() {
        let err = pgm_from_bytes(b"P2\n1 1\n255\n0\n").unwrap_err();
        assert!(err.to_string().starts_with("unsupported PGM variant"), "{err}");
        assert!(matches!(
            pgm_from_bytes(b"P5\n1 1\n65535\n\0\0"),
            Err(PreprocessError::UnsupportedMaxval(65535))
        ));
        assert!(pgm_from_bytes(b"P5\n# comment\n2 1\n255\n\x01").is_err());
        assert_eq!(
            pgm_from_bytes(b"P5\n# comment\n2 1\n255\n\x01\x02").unwrap().pixels(),
            &[1, 2]
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn clahe_is_deterministic(seed in any::<u64>(), clip in 1.0f64..8.0) {
            let img = random_image(33, 21, seed);
            let p = ClaheParams { tiles_x: 3, tiles_y: 2, clip_limit: clip };
            prop_assert_eq!(clahe(&img, &p).unwrap(), clahe(&img, &p).unwrap());
        }
    }
}
