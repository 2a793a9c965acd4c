//! Fixed-codebook patch quantizer.
//!
//! Images are split into `patch_size x patch_size` patches in raster order.
//! Each patch is encoded as the index of the nearest codebook entry and
//! decoded back by table lookup, so `encode(decode(t)) == t` exactly.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("decode error: token {token} at position {position} is out of range for {size} entries")]
    TokenOutOfRange {
        position: usize,
        token: usize,
        size: usize,
    },
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

pub type Rgb = [f64; 3];

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    pixels: Vec<Rgb>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<Rgb>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(TokenizerError::Dimension(format!(
                "image must be non-empty, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(TokenizerError::Dimension(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels
            .iter()
            .flatten()
            .find(|c| !(0.0..=1.0).contains(*c))
        {
            return Err(TokenizerError::Image(format!(
                "channel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, color: Rgb) -> Result<Self> {
        Self::new(height, width, vec![color; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> Rgb {
        self.pixels[row * self.width + col]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, color: Rgb) {
        self.pixels[row * self.width + col] = color.map(|c| c.clamp(0.0, 1.0));
    }

    /// Channel values of one patch, row-major, RGB interleaved.
    pub fn patch(&self, patch_row: usize, patch_col: usize, patch_size: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * patch_size * patch_size);
        for r in 0..patch_size {
            for c in 0..patch_size {
                out.extend_from_slice(&self.pixel(patch_row * patch_size + r, patch_col * patch_size + c));
            }
        }
        out
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, encode_png_bytes(self)?)?;
        Ok(())
    }

    /// 8-bit RGB bytes; a channel value `v` is stored as `round(v * 255)`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flatten()
            .map(|v| (v * 255.0).round() as u8)
            .collect()
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let decoder = png::Decoder::new(file);
        let mut reader = decoder
            .read_info()
            .map_err(|e| TokenizerError::Image(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| TokenizerError::Image("image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| TokenizerError::Image(e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(TokenizerError::Image(format!(
                "expected 8-bit RGB, got {:?} {:?}",
                info.color_type, info.bit_depth
            )));
        }
        let pixels = buf[..info.buffer_size()]
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]].map(|b| f64::from(b) / 255.0))
            .collect();
        Self::new(info.height as usize, info.width as usize, pixels)
    }
}

/// Encodes `image` as an 8-bit RGB PNG.
pub fn encode_png_bytes(image: &ImageGrid) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    let mut encoder = png::Encoder::new(&mut bytes, image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| TokenizerError::Image(e.to_string()))?;
    writer
        .write_image_data(&image.to_rgb8())
        .map_err(|e| TokenizerError::Image(e.to_string()))?;
    writer
        .finish()
        .map_err(|e| TokenizerError::Image(e.to_string()))?;
    Ok(bytes)
}

/// Discrete token sequence over a codebook, in raster order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// `K` patch vectors of dimension `3 * patch_size^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Vec<Vec<f64>>,
    patch_size: usize,
    levels: usize,
}

fn lattice_color(index: usize, levels: usize) -> Rgb {
    let step = 1.0 / (levels - 1) as f64;
    let r = index / (levels * levels);
    let g = (index / levels) % levels;
    let b = index % levels;
    [r as f64 * step, g as f64 * step, b as f64 * step]
}

impl Codebook {
    /// Builds the deterministic lattice codebook.
    ///
    /// With `L = max(2, floor(cbrt(K)))` per-channel levels, the first
    /// `min(K, L^3)` entries are constant-color patches in lattice order
    /// (`index = r*L^2 + g*L + b`). Any remaining entries are two-tone
    /// patches whose top half and bottom half take distinct lattice colors.
    pub fn build_lattice(size: usize, patch_size: usize) -> Result<Self> {
        if size < 2 {
            return Err(TokenizerError::Configuration(format!(
                "codebook needs at least 2 entries, got {size}"
            )));
        }
        if patch_size == 0 {
            return Err(TokenizerError::Configuration("patch_size must be >= 1".into()));
        }
        let mut levels: usize = 2;
        while (levels + 1).pow(3) <= size {
            levels += 1;
        }
        let colors = levels.pow(3);
        let pixels = patch_size * patch_size;
        let mut entries: Vec<Vec<f64>> = (0..colors.min(size))
            .map(|i| lattice_color(i, levels).repeat(pixels))
            .collect();
        if size > colors {
            if patch_size < 2 {
                return Err(TokenizerError::Configuration(format!(
                    "K={size} exceeds the {colors} constant colors and patch_size 1 has no two-tone patches"
                )));
            }
            let top_rows = patch_size / 2;
            'outer: for a in 0..colors {
                for b in 0..colors {
                    if a == b {
                        continue;
                    }
                    if entries.len() == size {
                        break 'outer;
                    }
                    let (ca, cb) = (lattice_color(a, levels), lattice_color(b, levels));
                    let mut entry = Vec::with_capacity(3 * pixels);
                    for r in 0..patch_size {
                        let c = if r < top_rows { ca } else { cb };
                        for _ in 0..patch_size {
                            entry.extend_from_slice(&c);
                        }
                    }
                    entries.push(entry);
                }
            }
        }
        Ok(Self {
            entries,
            patch_size,
            levels,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn entry(&self, index: usize) -> &[f64] {
        &self.entries[index]
    }

    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }

    /// Index of the constant-color entry for lattice coordinates `(r, g, b)`.
    pub fn constant_index(&self, rgb_levels: [usize; 3]) -> usize {
        let l = self.levels;
        rgb_levels[0] * l * l + rgb_levels[1] * l + rgb_levels[2]
    }

    pub fn lattice_value(&self, level: usize) -> f64 {
        level as f64 / (self.levels - 1) as f64
    }

    /// Nearest entry by squared Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, patch: &[f64]) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, e) in self.entries.iter().enumerate() {
            let d: f64 = e.iter().zip(patch).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_dist {
                best_dist = d;
                best = i;
            }
        }
        best
    }

    pub fn grid_shape(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let p = self.patch_size;
        if height % p != 0 || width % p != 0 {
            return Err(TokenizerError::Dimension(format!(
                "{height}x{width} image is not divisible by patch size {p}"
            )));
        }
        Ok((height / p, width / p))
    }

    pub fn encode(&self, image: &ImageGrid) -> Result<TokenSequence> {
        let (rows, cols) = self.grid_shape(image.height, image.width)?;
        let mut tokens = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                tokens.push(self.nearest(&image.patch(r, c, self.patch_size)));
            }
        }
        Ok(TokenSequence { tokens })
    }

    /// Decodes onto a `grid_rows x grid_cols` patch grid.
    pub fn decode(
        &self,
        tokens: &TokenSequence,
        grid_rows: usize,
        grid_cols: usize,
    ) -> Result<ImageGrid> {
        if tokens.len() != grid_rows * grid_cols {
            return Err(TokenizerError::Dimension(format!(
                "{} tokens do not fill a {grid_rows}x{grid_cols} grid",
                tokens.len()
            )));
        }
        let p = self.patch_size;
        let (height, width) = (grid_rows * p, grid_cols * p);
        let mut pixels = vec![[0.0; 3]; height * width];
        for (position, &token) in tokens.tokens.iter().enumerate() {
            let entry = self.entries.get(token).ok_or(TokenizerError::TokenOutOfRange {
                position,
                token,
                size: self.entries.len(),
            })?;
            let (gr, gc) = (position / grid_cols, position % grid_cols);
            for r in 0..p {
                for c in 0..p {
                    let k = 3 * (r * p + c);
                    pixels[(gr * p + r) * width + gc * p + c] = [entry[k], entry[k + 1], entry[k + 2]];
                }
            }
        }
        Ok(ImageGrid {
            height,
            width,
            pixels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn corner_codebook() {
        let cb = Codebook::build_lattice(8, 1).unwrap();
        assert_eq!(cb.len(), 8);
        assert_eq!(cb.levels(), 2);
        let mut seen: Vec<Vec<f64>> = cb.entries().to_vec();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (i, e) in seen.iter().enumerate() {
            let expect = [(i >> 2) & 1, (i >> 1) & 1, i & 1].map(|b| b as f64);
            assert_eq!(e.as_slice(), &expect);
        }
    }

    #[test]
    fn sixty_four_entry_lattice() {
        let cb = Codebook::build_lattice(64, 2).unwrap();
        assert_eq!(cb.levels(), 4);
        // enumerate the 4-level lattice independently
        let levels = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        let mut expected = Vec::new();
        for r in levels {
            for g in levels {
                for b in levels {
                    expected.push([r, g, b].repeat(4));
                }
            }
        }
        assert_eq!(cb.entries(), expected.as_slice());
        for i in 0..64 {
            for j in 0..i {
                assert_ne!(cb.entry(i), cb.entry(j));
            }
        }
    }

    #[test]
    fn padded_codebook_is_distinct() {
        let cb = Codebook::build_lattice(100, 2).unwrap();
        assert_eq!(cb.len(), 100);
        for i in 0..100 {
            for j in 0..i {
                assert_ne!(cb.entry(i), cb.entry(j));
            }
        }
        assert!(Codebook::build_lattice(100, 1).is_err());
    }

    #[test]
    fn deterministic_and_rejects_tiny() {
        assert_eq!(
            Codebook::build_lattice(64, 2).unwrap(),
            Codebook::build_lattice(64, 2).unwrap()
        );
        assert!(matches!(
            Codebook::build_lattice(1, 2),
            Err(TokenizerError::Configuration(_))
        ));
    }

    #[test]
    fn mid_gray_ties_to_zero() {
        let cb = Codebook::build_lattice(8, 1).unwrap();
        let img = ImageGrid::filled(4, 4, [0.5; 3]).unwrap();
        assert!(cb.encode(&img).unwrap().tokens.iter().all(|&t| t == 0));
    }

    #[test]
    fn indivisible_image_rejected() {
        let cb = Codebook::build_lattice(64, 2).unwrap();
        let img = ImageGrid::filled(5, 4, [0.0; 3]).unwrap();
        assert!(matches!(cb.encode(&img), Err(TokenizerError::Dimension(_))));
    }

    #[test]
    fn decode_out_of_range_names_position() {
        let cb = Codebook::build_lattice(64, 2).unwrap();
        let err = cb
            .decode(&TokenSequence::new(vec![0, 3, 64, 1]), 2, 2)
            .unwrap_err();
        assert!(matches!(
            err,
            TokenizerError::TokenOutOfRange { position: 2, token: 64, .. }
        ));
    }

    #[test]
    fn all_zero_tokens_tile_entry_zero() {
        let cb = Codebook::build_lattice(64, 2).unwrap();
        let img = cb.decode(&TokenSequence::new(vec![0; 16]), 4, 4).unwrap();
        assert!(img.pixels().iter().all(|p| *p == [0.0; 3]));
    }

    #[test]
    fn png_round_trip_of_lattice_image() {
        let cb = Codebook::build_lattice(64, 2).unwrap();
        let tokens = TokenSequence::new((0..16).map(|i| (i * 7) % 64).collect());
        let img = cb.decode(&tokens, 4, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        img.write_png(&path).unwrap();
        let back = ImageGrid::read_png(&path).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
        assert_eq!(cb.encode(&back).unwrap(), tokens);
        assert_eq!(encode_png_bytes(&img).unwrap(), std::fs::read(&path).unwrap());
    }

    proptest! {
        #[test]
        fn encode_inverts_decode(tokens in proptest::collection::vec(0usize..64, 16)) {
            let cb = Codebook::build_lattice(64, 2).unwrap();
            let seq = TokenSequence::new(tokens);
            let img = cb.decode(&seq, 4, 4).unwrap();
            prop_assert_eq!(cb.encode(&img).unwrap(), seq.clone());
            // every decoded patch equals its entry
            for (i, &t) in seq.tokens.iter().enumerate() {
                prop_assert_eq!(img.patch(i / 4, i % 4, 2), cb.entry(t).to_vec());
            }
        }

        #[test]
        fn decode_encode_is_idempotent(values in proptest::collection::vec(0.0f64..=1.0, 8 * 8 * 3)) {
            let cb = Codebook::build_lattice(64, 2).unwrap();
            let pixels = values.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            let img = ImageGrid::new(8, 8, pixels).unwrap();
            let once = cb.decode(&cb.encode(&img).unwrap(), 4, 4).unwrap();
            let twice = cb.decode(&cb.encode(&once).unwrap(), 4, 4).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn small_perturbations_keep_token(
            values in proptest::collection::vec(0.0f64..=1.0, 12),
            direction in proptest::collection::vec(-1.0f64..1.0, 12),
        ) {
            let cb = Codebook::build_lattice(64, 2).unwrap();
            let token = cb.nearest(&values);
            let dist = |e: &[f64]| e.iter().zip(&values).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let d1 = dist(cb.entry(token));
            let d2 = (0..64).filter(|&i| i != token).map(|i| dist(cb.entry(i))).fold(f64::INFINITY, f64::min);
            let margin = d2 - d1;
            prop_assume!(margin > 1e-9);
            let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
            prop_assume!(norm > 1e-9);
            let shift = 0.49 * margin / norm;
            let moved: Vec<f64> = values.iter().zip(&direction).map(|(v, d)| v + d * shift).collect();
            prop_assert_eq!(cb.nearest(&moved), token);
        }
    }
}
