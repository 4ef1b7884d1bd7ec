//! Dataset representation and bit-exact file formats.
//!
//! Owns the universal sample type ([`Image`]), labeled datasets with optional
//! poison ground truth, CIFAR-10 binary ingestion, the synthetic desk-scale
//! dataset generator, the UCDS container format, and PPM import/export.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// H×W×C float tensor in [0,1], row-major and channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image, checking the range/shape invariants.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "data length {} != {height}x{width}x{channels}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Shape("pixel outside [0,1] or non-finite".into()));
        }
        Ok(Self { height, width, channels, data })
    }

    /// All-zero image of the given shape.
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    /// Constant-valued image. `value` must be in [0,1].
    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    /// Sets a pixel, clamping into [0,1] to preserve the invariant.
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f32) {
        let i = self.index(y, x, c);
        self.data[i] = value.clamp(0.0, 1.0);
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Rebuilds an image from raw values, clamping each into [0,1].
    pub fn from_clamped(height: usize, width: usize, channels: usize, raw: &[f64]) -> Self {
        debug_assert_eq!(raw.len(), height * width * channels);
        let data = raw.iter().map(|&v| (v.clamp(0.0, 1.0)) as f32).collect();
        Self { height, width, channels, data }
    }
}

/// Images with class labels. All images share one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            let shape = first.shape();
            if images.iter().any(|img| img.shape() != shape) {
                return Err(Error::Shape("images have non-uniform shapes".into()));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Shape(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Self { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Shape of the samples, or None for an empty dataset.
    pub fn sample_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(Image::shape)
    }

    /// Indices of all samples carrying the given label, in dataset order.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Ground-truth poison flags for metric computation.
#[derive(Debug, Clone, PartialEq)]
pub struct PoisonMask {
    pub flags: Vec<bool>,
    pub target_class: usize,
    pub attack_name: String,
}

impl PoisonMask {
    pub fn new(flags: Vec<bool>, target_class: usize, attack_name: impl Into<String>) -> Self {
        Self { flags, target_class, attack_name: attack_name.into() }
    }

    pub fn flagged_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches
// ---------------------------------------------------------------------------

const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;
const CIFAR_PLANE: usize = CIFAR_SIDE * CIFAR_SIDE;

/// Reads a CIFAR-10 binary batch file (1 label byte + 3x1024 planar pixel
/// bytes per record) into a dataset of 32×32×3 images scaled to [0,1].
pub fn import_cifar10(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path.as_ref())?;
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = (bytes.len() / CIFAR_RECORD) * CIFAR_RECORD;
        return Err(Error::Format(format!(
            "truncated CIFAR-10 record starting at byte offset {offset} (file length {})",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (rec, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = chunk[0] as usize;
        if label >= 10 {
            return Err(Error::Format(format!(
                "record {rec}: label byte {label} >= 10"
            )));
        }
        let mut data = vec![0.0f32; CIFAR_PLANE * 3];
        for c in 0..3 {
            let plane = &chunk[1 + c * CIFAR_PLANE..1 + (c + 1) * CIFAR_PLANE];
            for (i, &b) in plane.iter().enumerate() {
                data[i * 3 + c] = b as f32 / 255.0;
            }
        }
        images.push(Image { height: CIFAR_SIDE, width: CIFAR_SIDE, channels: 3, data });
        labels.push(label);
    }
    LabeledDataset::new(images, labels, 10)
}

// ---------------------------------------------------------------------------
// Synthetic dataset generator
// ---------------------------------------------------------------------------

const PALETTE: [[f32; 3]; 10] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.90, 0.10],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.10],
    [0.90, 0.15, 0.90],
    [0.10, 0.90, 0.90],
    [0.95, 0.55, 0.10],
    [0.60, 0.20, 0.85],
    [0.95, 0.95, 0.95],
    [0.55, 0.35, 0.15],
];

const NOISE_AMPLITUDE: f32 = 0.1;

/// Deterministic desk-scale dataset: each class is a colored geometric motif
/// on a gray background, with per-image position jitter and uniform noise.
///
/// The (color, motif) pairing is a Latin-square assignment so class identities
/// stay distinct when `num_classes` exceeds the palette size.
pub fn generate_synthetic(
    seed: u64,
    n_per_class: usize,
    num_classes: usize,
    size: usize,
) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(Error::Config(format!("num_classes must be >= 2, got {num_classes}")));
    }
    if size < 16 {
        return Err(Error::Config(format!("size must be >= 16, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(num_classes * n_per_class);
    let mut labels = Vec::with_capacity(num_classes * n_per_class);
    let jitter_max = (size / 8) as i64;
    // Classes 10 and 11, when requested, are both magenta disks told apart
    // only by radius, with ranges sharing a narrow interval: a deliberately
    // confusable pair the way real benchmarks contain near classes (e.g.
    // two speed-limit signs). The first ten classes are unambiguous.
    let twin_color: [f32; 3] = [0.90, 0.15, 0.90];
    let r_lo = (size as f64 / 8.0).max(2.0);
    let r_hi = size as f64 / 4.0;
    let r_mid = (r_lo + r_hi) / 2.0;
    let band = 0.15 * (r_hi - r_lo);
    for class in 0..num_classes {
        let (color, motif) = match class {
            0..=9 => (PALETTE[class], class),
            10 | 11 => (twin_color, 0),
            _ => (PALETTE[class % 10], (class + class / 10) % 10),
        };
        for _ in 0..n_per_class {
            let dy = rng.gen_range(-jitter_max..=jitter_max);
            let dx = rng.gen_range(-jitter_max..=jitter_max);
            // Per-image brightness variation; motifs stay clearly visible
            // (the hard samples are the twin-pair boundary cases, not faint
            // ones). The background level is fixed so additive structure
            // stays salient to the classifier.
            let gain: f32 = rng.gen_range(0.7..=1.0);
            let bg: f32 = 0.2;
            let radius = match class {
                10 => rng.gen_range(r_lo..=r_mid + band),
                11 => rng.gen_range(r_mid - band..=r_hi),
                _ => r_hi,
            };
            let faded = [
                bg + (color[0] - bg) * gain,
                bg + (color[1] - bg) * gain,
                bg + (color[2] - bg) * gain,
            ];
            let mut img = paint_motif(size, motif, faded, bg, radius, dy, dx);
            for v in img.data.iter_mut() {
                let noise: f32 = rng.gen_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE);
                *v = (*v + noise).clamp(0.0, 1.0);
            }
            images.push(img);
            labels.push(class);
        }
    }
    LabeledDataset::new(images, labels, num_classes)
}

fn paint_motif(
    size: usize,
    motif: usize,
    color: [f32; 3],
    background: f32,
    radius: f64,
    dy: i64,
    dx: i64,
) -> Image {
    let mut img = Image::constant(size, size, 3, background);
    let s = size as i64;
    let cy = s / 2 + dy;
    let cx = s / 2 + dx;
    // The disk uses the exact radius; block motifs snap to the pixel grid.
    let rf = radius.max(2.0);
    let r = rf.round() as i64;
    // All motifs are low-frequency (strokes >= 3 px) so the class identity
    // survives mild smoothing; a denoised benign sample must stay
    // in-distribution for its class.
    for y in 0..s {
        for x in 0..s {
            let u = y - cy;
            let v = x - cx;
            let inside = match motif {
                0 => (u * u + v * v) as f64 <= rf * rf,
                1 => {
                    let d = u.abs().max(v.abs());
                    (r - 2..=r).contains(&d)
                }
                2 => u.abs() <= r - 1 && v.abs() <= r - 1,
                3 => u >= -1 && u <= r && v.abs() <= u + 1,
                4 => (u - v).abs() <= 2 && u.abs() <= r + 2 && v.abs() <= r + 2,
                5 => (u.abs() <= 1 && v.abs() <= r) || (v.abs() <= 1 && u.abs() <= r),
                6 => v.abs() <= r && (u.abs() <= r && u.abs() >= r - 2),
                7 => u <= 1 && u >= -r && v.abs() <= -u + 1,
                8 => {
                    let d2 = u * u + v * v;
                    d2 >= (r - 2) * (r - 2) && d2 <= r * r
                }
                _ => u.abs() >= r - 2 && u.abs() <= r && v.abs() >= r - 2 && v.abs() <= r,
            };
            if inside {
                for (c, &col) in color.iter().enumerate() {
                    img.set(y as usize, x as usize, c, col);
                }
            }
        }
    }
    img
}

// ---------------------------------------------------------------------------
// UCDS container format
// ---------------------------------------------------------------------------
//
// Layout (little-endian throughout):
//   magic       "UCDS"
//   version     u16      (currently 1)
//   n, h, w, c  u32 each
//   num_classes u32
//   pixels      n*h*w*c × f32  (row-major, channel-interleaved)
//   labels      n × u16
//   mask flag   u8 (0 = absent, 1 = present)
//   [flags      n × u8 (0/1)]
//   [target     u16]
//   [name_len   u16, name bytes (utf-8)]

const UCDS_MAGIC: &[u8; 4] = b"UCDS";
const UCDS_VERSION: u16 = 1;

/// Writes a dataset (and optional poison mask) to the UCDS binary format.
/// The round trip through [`load_dataset`] is bit-exact.
pub fn save_dataset(
    ds: &LabeledDataset,
    mask: Option<&PoisonMask>,
    path: impl AsRef<Path>,
) -> Result<()> {
    if let Some(m) = mask {
        if m.flags.len() != ds.len() {
            return Err(Error::Shape(format!(
                "mask has {} flags for {} samples",
                m.flags.len(),
                ds.len()
            )));
        }
    }
    let (h, w, c) = ds.sample_shape().unwrap_or((0, 0, 0));
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    out.write_all(UCDS_MAGIC)?;
    out.write_all(&UCDS_VERSION.to_le_bytes())?;
    for dim in [ds.len(), h, w, c, ds.num_classes] {
        out.write_all(&(dim as u32).to_le_bytes())?;
    }
    for img in &ds.images {
        for &v in img.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    for &label in &ds.labels {
        out.write_all(&(label as u16).to_le_bytes())?;
    }
    match mask {
        None => out.write_all(&[0u8])?,
        Some(m) => {
            out.write_all(&[1u8])?;
            for &f in &m.flags {
                out.write_all(&[f as u8])?;
            }
            out.write_all(&(m.target_class as u16).to_le_bytes())?;
            let name = m.attack_name.as_bytes();
            out.write_all(&(name.len() as u16).to_le_bytes())?;
            out.write_all(name)?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    pos: usize,
}

impl<R: Read> Cursor<R> {
    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|_| {
            Error::Format(format!("truncated file: failed reading {what} at byte {}", self.pos))
        })?;
        self.pos += buf.len();
        Ok(())
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.take(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(f32::from_le_bytes(b))
    }
}

/// Reads a UCDS file written by [`save_dataset`].
pub fn load_dataset(path: impl AsRef<Path>) -> Result<(LabeledDataset, Option<PoisonMask>)> {
    let file = File::open(path.as_ref())?;
    let mut cur = Cursor { inner: BufReader::new(file), pos: 0 };
    let mut magic = [0u8; 4];
    cur.take(&mut magic, "magic")?;
    if &magic != UCDS_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"UCDS\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = cur.u16("version")?;
    if version != UCDS_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {UCDS_VERSION}"
        )));
    }
    let n = cur.u32("sample count")? as usize;
    let h = cur.u32("height")? as usize;
    let w = cur.u32("width")? as usize;
    let c = cur.u32("channels")? as usize;
    let num_classes = cur.u32("class count")? as usize;
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let mut data = Vec::with_capacity(h * w * c);
        for _ in 0..h * w * c {
            data.push(cur.f32(&format!("pixels of image {i}"))?);
        }
        images.push(Image::new(h, w, c, data)?);
    }
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        labels.push(cur.u16(&format!("label {i}"))? as usize);
    }
    let mut flag_byte = [0u8; 1];
    cur.take(&mut flag_byte, "mask marker")?;
    let mask = match flag_byte[0] {
        0 => None,
        1 => {
            let mut flags = vec![0u8; n];
            cur.take(&mut flags, "mask flags")?;
            let target = cur.u16("mask target class")? as usize;
            let name_len = cur.u16("mask name length")? as usize;
            let mut name = vec![0u8; name_len];
            cur.take(&mut name, "mask attack name")?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("mask attack name is not utf-8".into()))?;
            Some(PoisonMask::new(flags.iter().map(|&b| b != 0).collect(), target, name))
        }
        other => {
            return Err(Error::Format(format!("invalid mask marker byte {other}")));
        }
    };
    Ok((LabeledDataset::new(images, labels, num_classes)?, mask))
}

// ---------------------------------------------------------------------------
// PPM P6
// ---------------------------------------------------------------------------

/// Writes a binary P6 PPM with maxval 255. Grayscale images are replicated
/// across the three output channels. Pixel bytes are round(value*255).
pub fn export_ppm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    if img.channels != 3 && img.channels != 1 {
        return Err(Error::Shape(format!(
            "PPM export needs 1 or 3 channels, got {}",
            img.channels
        )));
    }
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    write!(out, "P6\n{} {}\n255\n", img.width, img.height)?;
    let mut row = Vec::with_capacity(img.width * 3);
    for y in 0..img.height {
        row.clear();
        for x in 0..img.width {
            for c in 0..3 {
                let v = img.get(y, x, c.min(img.channels - 1));
                row.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out.write_all(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a binary P6 PPM into a 3-channel image with values byte/255.
pub fn import_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = std::fs::read(path.as_ref())?;
    let mut pos = 0usize;
    let mut fields = Vec::new();
    // Header: "P6", width, height, maxval, each followed by whitespace.
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
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(Error::Format(format!("not a P6 PPM (got {:?})", fields[0])));
    }
    let width: usize =
        fields[1].parse().map_err(|_| Error::Format("bad PPM width".into()))?;
    let height: usize =
        fields[2].parse().map_err(|_| Error::Format("bad PPM height".into()))?;
    if fields[3] != "255" {
        return Err(Error::Format(format!("unsupported PPM maxval {}", fields[3])));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(Error::Format(format!(
            "truncated PPM pixel data at byte {}",
            bytes.len()
        )));
    }
    let data = bytes[pos..pos + need].iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(height, width, 3, data)
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn arb_dataset() -> impl Strategy<Value = LabeledDataset> {
        (2usize..5, 1usize..6, prop::bool::ANY).prop_flat_map(|(classes, n, gray)| {
            let c = if gray { 1 } else { 3 };
            let len = 16 * 16 * c;
            (
                prop::collection::vec(prop::collection::vec(0.0f32..=1.0, len..=len), n..=n),
                prop::collection::vec(0usize..classes, n..=n),
                Just(classes),
                Just(c),
            )
                .prop_map(move |(pixel_sets, labels, classes, c)| {
                    let images = pixel_sets
                        .into_iter()
                        .map(|data| Image::new(16, 16, c, data).unwrap())
                        .collect();
                    LabeledDataset::new(images, labels, classes).unwrap()
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn save_load_is_identity(ds in arb_dataset()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("prop.ucds");
            save_dataset(&ds, None, &path).unwrap();
            let (loaded, _) = load_dataset(&path).unwrap();
            // Bit-exact comparison of every float and label.
            prop_assert_eq!(ds.labels, loaded.labels);
            for (a, b) in ds.images.iter().zip(&loaded.images) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}
