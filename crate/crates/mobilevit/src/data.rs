//! Dataset plumbing: image decode/encode (PNG and binary PPM), bilinear
//! resizing, class-per-folder indexing, the stratified three-way split, and
//! a deterministic synthetic dataset generator.
//!
//! Images are value tensors shaped `(H, W, 3)` with entries in `[0, 1]`.
//! Models consume `(C, H, W)`; see [`hwc_to_chw`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::LabeledSet;

// ---- image tensors ----

pub fn hwc_to_chw(img: &Tensor) -> Result<Tensor> {
    if img.shape().len() != 3 {
        return Err(Error::shape("hwc_to_chw", format!("expected (H,W,C), got {:?}", img.shape())));
    }
    img.permute(&[2, 0, 1])
}

pub fn chw_to_hwc(img: &Tensor) -> Result<Tensor> {
    if img.shape().len() != 3 {
        return Err(Error::shape("chw_to_hwc", format!("expected (C,H,W), got {:?}", img.shape())));
    }
    img.permute(&[1, 2, 0])
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decode PNG or binary PPM (P6), dispatching on content magic. Returns the
/// `(H, W, 3)` tensor and whether the source was grayscale (in which case the
/// single channel is replicated).
pub fn read_image(path: &Path) -> Result<(Tensor, bool)> {
    let bytes = fs::read(path).map_err(|e| Error::Image(format!("{}: {}", path.display(), e)))?;
    if bytes.starts_with(b"P6") {
        return decode_ppm(&bytes, path).map(|t| (t, false));
    }
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        return decode_png(&bytes, path);
    }
    Err(Error::Image(format!("{}: not a PNG or binary PPM file", path.display())))
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<(Tensor, bool)> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::Image(format!("{}: {}", path.display(), e)))?;
    let grayscale = matches!(
        img.color(),
        image::ColorType::L8 | image::ColorType::La8 | image::ColorType::L16 | image::ColorType::La16
    );
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data: Vec<f64> = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Ok((Tensor::new(vec![h, w, 3], data)?, grayscale))
}

fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |msg: &str| Error::Image(format!("{}: {}", path.display(), msg));
    // Header: "P6", then width, height, maxval as ASCII integers separated
    // by whitespace, with '#' comments running to end of line; a single
    // whitespace byte separates the header from the binary pixels.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| bad("header value out of range"))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing pixel separator"));
    }
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(bad("pixel payload truncated"));
    }
    let data: Vec<f64> = bytes[pos..pos + need].iter().map(|&b| b as f64 / maxval as f64).collect();
    Tensor::new(vec![h, w, 3], data)
}

/// Encode an `(H, W, 3)` tensor as PNG or binary PPM by file extension
/// (anything other than `.ppm` is written as PNG). Values are clamped to
/// `[0, 1]` and quantized to 8 bits.
pub fn write_image(img: &Tensor, path: &Path) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape("write_image", format!("expected (H,W,3), got {:?}", s)));
    }
    let (h, w) = (s[0], s[1]);
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let is_ppm = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("ppm"))
        .unwrap_or(false);
    if is_ppm {
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        out.extend_from_slice(&bytes);
        fs::write(path, out)?;
    } else {
        image::save_buffer_with_format(
            path,
            &bytes,
            w as u32,
            h as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::Image(format!("{}: {}", path.display(), e)))?;
    }
    Ok(())
}

/// Center-aligned bilinear resize of an `(H, W, C)` tensor. Equal source and
/// target sizes return the input bitwise.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::shape("resize", format!("expected (H,W,C), got {:?}", s)));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if out_h == 0 || out_w == 0 {
        return Err(Error::Invalid("resize target must be nonzero".into()));
    }
    if out_h == h && out_w == w {
        return Ok(img.clone());
    }
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    let coord = |d: usize, scale: f64, limit: usize| -> (usize, usize, f64) {
        let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (limit - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(limit - 1);
        (lo, hi, src - lo as f64)
    };
    Ok(Tensor::from_fn(&[out_h, out_w, c], |ix| {
        let (y0, y1, fy) = coord(ix[0], scale_y, h);
        let (x0, x1, fx) = coord(ix[1], scale_x, w);
        let ch = ix[2];
        let top = img.at(&[y0, x0, ch]) * (1.0 - fx) + img.at(&[y0, x1, ch]) * fx;
        let bot = img.at(&[y1, x0, ch]) * (1.0 - fx) + img.at(&[y1, x1, ch]) * fx;
        top * (1.0 - fy) + bot * fy
    }))
}

/// Decode, replicate grayscale to RGB, and resize. Returns the tensor and
/// the grayscale flag so callers can surface a warning.
pub fn load_resize_image(path: &Path, h: usize, w: usize) -> Result<(Tensor, bool)> {
    let (img, grayscale) = read_image(path)?;
    Ok((resize_bilinear(&img, h, w)?, grayscale))
}

// ---- dataset indexing and splitting ----

#[derive(Clone, Debug)]
pub struct DatasetIndex {
    /// Lexicographically ordered class names; label = position.
    pub class_names: Vec<String>,
    /// `(path, label)` pairs, grouped by class, files sorted by name.
    pub entries: Vec<(PathBuf, usize)>,
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .map(|e| {
            let e = e.to_string_lossy().to_lowercase();
            e == "png" || e == "ppm"
        })
        .unwrap_or(false)
}

/// Scan `root/<class>/<file>` into an index. Classes in `exclude` are
/// dropped before labels are assigned; a class directory without a single
/// image file is an error naming it.
pub fn index_directory(root: &Path, exclude: &[String]) -> Result<DatasetIndex> {
    let mut class_dirs: Vec<(String, PathBuf)> = Vec::new();
    let read = fs::read_dir(root).map_err(|e| Error::Data(format!("{}: {}", root.display(), e)))?;
    for entry in read {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if !exclude.contains(&name) {
                class_dirs.push((name, entry.path()));
            }
        }
    }
    if class_dirs.is_empty() {
        return Err(Error::Data(format!(
            "{}: no class directories found (expected root/<class>/<images>)",
            root.display()
        )));
    }
    class_dirs.sort_by(|a, b| a.0.cmp(&b.0));
    let mut class_names = Vec::with_capacity(class_dirs.len());
    let mut entries = Vec::new();
    for (label, (name, dir)) in class_dirs.into_iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        if files.is_empty() {
            return Err(Error::Data(format!("class directory '{}' contains no images", name)));
        }
        files.sort();
        for f in files {
            entries.push((f, label));
        }
        class_names.push(name);
    }
    Ok(DatasetIndex { class_names, entries })
}

#[derive(Clone, Copy, Debug)]
pub struct SplitSpec {
    pub test_ratio: f64,
    pub val_ratio: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { test_ratio: 0.20, val_ratio: 0.16, seed: 0 }
    }
}

impl SplitSpec {
    pub fn train_ratio(&self) -> f64 {
        1.0 - self.test_ratio - self.val_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.test_ratio > 0.0 && self.val_ratio > 0.0 && self.train_ratio() > 0.0) {
            return Err(Error::Invalid(format!(
                "split ratios {}/{}/{} must all be positive",
                self.train_ratio(),
                self.val_ratio,
                self.test_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditRow {
    pub class_name: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl AuditRow {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub class_names: Vec<String>,
    pub train: Vec<(PathBuf, usize)>,
    pub val: Vec<(PathBuf, usize)>,
    pub test: Vec<(PathBuf, usize)>,
    pub audit: Vec<AuditRow>,
}

impl Splits {
    pub fn audit_totals(&self) -> AuditRow {
        AuditRow {
            class_name: "total".to_string(),
            train: self.audit.iter().map(|r| r.train).sum(),
            val: self.audit.iter().map(|r| r.val).sum(),
            test: self.audit.iter().map(|r| r.test).sum(),
        }
    }
}

fn round_half_up(x: f64) -> usize {
    x.round() as usize
}

/// Stratified split. Per class, with a seeded shuffle:
/// `test = round(n * test_ratio)`, then `val = round(remaining * v)` where
/// `v = val_ratio / (1 - test_ratio)`, and train takes the rest. With the
/// default 0.64/0.16/0.20 ratios this is round(n * 0.20) then
/// round(remaining * 0.20).
pub fn split_index(index: &DatasetIndex, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut by_class: BTreeMap<usize, Vec<&(PathBuf, usize)>> = BTreeMap::new();
    for e in &index.entries {
        by_class.entry(e.1).or_default().push(e);
    }
    let val_of_rest = spec.val_ratio / (1.0 - spec.test_ratio);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    let mut audit = Vec::new();
    for (label, mut files) in by_class {
        files.shuffle(&mut rng);
        let n = files.len();
        let n_test = round_half_up(n as f64 * spec.test_ratio);
        let rem = n - n_test;
        let n_val = round_half_up(rem as f64 * val_of_rest);
        let n_train = rem - n_val;
        for (i, e) in files.into_iter().enumerate() {
            if i < n_test {
                test.push(e.clone());
            } else if i < n_test + n_val {
                val.push(e.clone());
            } else {
                train.push(e.clone());
            }
        }
        audit.push(AuditRow {
            class_name: index.class_names[label].clone(),
            train: n_train,
            val: n_val,
            test: n_test,
        });
    }
    Ok(Splits { class_names: index.class_names.clone(), train, val, test, audit })
}

/// Fixed-width audit table with a totals row.
pub fn render_audit(splits: &Splits) -> String {
    let width = splits
        .audit
        .iter()
        .map(|r| r.class_name.len())
        .chain(std::iter::once("class".len()))
        .max()
        .unwrap_or(5);
    let mut out = format!("{:<width$} {:>7} {:>7} {:>7} {:>7}\n", "class", "train", "val", "test", "total");
    for r in &splits.audit {
        out.push_str(&format!(
            "{:<width$} {:>7} {:>7} {:>7} {:>7}\n",
            r.class_name,
            r.train,
            r.val,
            r.test,
            r.total()
        ));
    }
    let t = splits.audit_totals();
    out.push_str(&format!(
        "{:<width$} {:>7} {:>7} {:>7} {:>7}\n",
        t.class_name,
        t.train,
        t.val,
        t.test,
        t.total()
    ));
    out
}

/// Load a split's files into memory as model-ready `(C, H, W)` tensors.
/// Undecodable files are skipped; the skip count is returned so callers can
/// warn. Grayscale sources are replicated to three channels and counted too.
pub struct LoadedSplit {
    pub set: LabeledSet,
    pub paths: Vec<String>,
    pub skipped: usize,
    pub grayscale: usize,
}

pub fn load_split(entries: &[(PathBuf, usize)], image_size: usize) -> Result<LoadedSplit> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut paths = Vec::new();
    let mut skipped = 0;
    let mut grayscale = 0;
    for (path, label) in entries {
        match load_resize_image(path, image_size, image_size) {
            Ok((img, gray)) => {
                if gray {
                    grayscale += 1;
                }
                images.push(hwc_to_chw(&img)?);
                labels.push(*label);
                paths.push(path.to_string_lossy().into_owned());
            }
            Err(Error::Io(_)) | Err(Error::Image(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if images.is_empty() {
        return Err(Error::Data("no decodable images in split".into()));
    }
    Ok(LoadedSplit { set: LabeledSet::new(images, labels)?, paths, skipped, grayscale })
}

// ---- synthetic data ----

pub const MOTIF_NAMES: [&str; 8] = [
    "square", "disk", "hstripes", "vstripes", "cross", "ring", "triangle", "checker",
];

const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.90, 0.20],
    [0.20, 0.30, 0.90],
    [0.90, 0.90, 0.20],
    [0.90, 0.20, 0.90],
    [0.20, 0.90, 0.90],
    [0.95, 0.55, 0.15],
    [0.95, 0.95, 0.95],
];

const BACKGROUND: f64 = 0.12;
const NOISE_SD: f64 = 0.04;

#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > MOTIF_NAMES.len() {
            return Err(Error::Invalid(format!(
                "synthetic classes must be in 2..={}, got {} (each class needs a distinct motif)",
                MOTIF_NAMES.len(),
                self.classes
            )));
        }
        if self.per_class == 0 {
            return Err(Error::Invalid("need at least one image per class".into()));
        }
        if self.size < 8 {
            return Err(Error::Invalid(format!("image size {} too small to draw motifs", self.size)));
        }
        Ok(())
    }

    pub fn class_dir_name(&self, label: usize) -> String {
        format!("class_{:02}_{}", label, MOTIF_NAMES[label])
    }
}

#[derive(Clone, Debug)]
pub struct SynthSample {
    pub image: Tensor,
    pub label: usize,
    /// Bounding box `(row0, col0, row1, col1)`, exclusive ends, of the drawn
    /// motif; full image for the field-filling motifs.
    pub motif_box: (usize, usize, usize, usize),
}

fn normal(rng: &mut ChaCha20Rng) -> f64 {
    // Box-Muller from two uniforms; 1-u keeps the log argument positive.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Deterministic in-memory generation, class-major order. The draw sequence
/// per image is fixed, so any prefix of classes reproduces the same images.
pub fn synthesize_images(spec: &SyntheticSpec) -> Result<Vec<SynthSample>> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let s = spec.size;
    let sf = s as f64;
    let mut out = Vec::with_capacity(spec.classes * spec.per_class);
    for label in 0..spec.classes {
        let color = PALETTE[label];
        for _ in 0..spec.per_class {
            let cy = rng.random_range(0.35..0.65) * sf;
            let cx = rng.random_range(0.35..0.65) * sf;
            let e = rng.random_range(0.22..0.32) * sf;
            let phase = rng.random_range(0..s);
            let period = (s / 8).max(2);
            let inside = |r: usize, c: usize| -> bool {
                let dy = r as f64 + 0.5 - cy;
                let dx = c as f64 + 0.5 - cx;
                match label {
                    0 => dy.abs() <= e && dx.abs() <= e,
                    1 => dy * dy + dx * dx <= e * e,
                    2 => ((r + phase) / period) % 2 == 0,
                    3 => ((c + phase) / period) % 2 == 0,
                    4 => (dy - dx).abs() <= e * 0.35 || (dy + dx).abs() <= e * 0.35,
                    5 => {
                        let d2 = dy * dy + dx * dx;
                        d2 <= e * e && d2 >= (e * 0.5) * (e * 0.5)
                    }
                    6 => dy.abs() <= e && dx.abs() <= (dy + e) / 2.0,
                    7 => ((r + phase) / period + (c + phase) / period) % 2 == 0,
                    _ => unreachable!("validated class count"),
                }
            };
            let clamp_px = |v: f64| (v.max(0.0) as usize).min(s);
            let motif_box = match label {
                2 | 3 | 7 => (0, 0, s, s),
                _ => (
                    clamp_px((cy - e).floor()),
                    clamp_px((cx - e).floor()),
                    clamp_px((cy + e).ceil()),
                    clamp_px((cx + e).ceil()),
                ),
            };
            let mut data = Vec::with_capacity(s * s * 3);
            for r in 0..s {
                for c in 0..s {
                    let hit = inside(r, c);
                    for ch in 0..3 {
                        let base = if hit { color[ch] } else { BACKGROUND };
                        data.push((base + NOISE_SD * normal(&mut rng)).clamp(0.0, 1.0));
                    }
                }
            }
            out.push(SynthSample {
                image: Tensor::new(vec![s, s, 3], data)?,
                label,
                motif_box,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SynthSummary {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub files_written: usize,
}

/// Write the synthetic dataset as `root/<class>/img_NNNN.png`. An existing
/// non-empty target is rejected unless `force` is set.
pub fn synthesize_dataset(spec: &SyntheticSpec, out_dir: &Path, force: bool) -> Result<SynthSummary> {
    spec.validate()?;
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Data(format!(
                "{}: directory is not empty (pass --force to overwrite)",
                out_dir.display()
            )));
        }
    }
    fs::create_dir_all(out_dir)?;
    let samples = synthesize_images(spec)?;
    let mut class_names = Vec::with_capacity(spec.classes);
    for label in 0..spec.classes {
        let dir = out_dir.join(spec.class_dir_name(label));
        fs::create_dir_all(&dir)?;
        class_names.push(spec.class_dir_name(label));
    }
    let mut written = 0;
    let mut per_class_counter = vec![0usize; spec.classes];
    for sample in &samples {
        let idx = per_class_counter[sample.label];
        per_class_counter[sample.label] += 1;
        let path = out_dir
            .join(spec.class_dir_name(sample.label))
            .join(format!("img_{:04}.png", idx));
        write_image(&sample.image, &path)?;
        written += 1;
    }
    Ok(SynthSummary { root: out_dir.to_path_buf(), class_names, files_written: written })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ppm_round_trip_and_header_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = Tensor::from_fn(&[3, 5, 3], |ix| ((ix[0] * 5 * 3 + ix[1] * 3 + ix[2]) % 256) as f64 / 255.0);
        write_image(&img, &path).unwrap();
        let (back, gray) = read_image(&path).unwrap();
        assert!(!gray);
        assert_eq!(back.shape(), &[3, 5, 3]);
        assert_eq!(back.data(), img.data());
        // Comments and extra whitespace in the header are legal.
        let mut raw = b"P6 # comment\n# another\n 2\t1 # w h\n255\n".to_vec();
        raw.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        let path2 = dir.path().join("c.ppm");
        fs::write(&path2, raw).unwrap();
        let (t, _) = read_image(&path2).unwrap();
        assert_eq!(t.shape(), &[1, 2, 3]);
        assert_eq!(t.at(&[0, 0, 0]), 1.0);
        assert_eq!(t.at(&[0, 1, 1]), 1.0);
    }

    #[test]
    fn ppm_rejects_truncation_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        fs::write(&path, b"P6\n2 2\n255\n\x00\x01").unwrap();
        assert!(read_image(&path).is_err());
        fs::write(&path, b"JUNKJUNKJUNK").unwrap();
        let err = read_image(&path).unwrap_err().to_string();
        assert!(err.contains("not a PNG or binary PPM"), "{err}");
    }

    #[test]
    fn png_round_trip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = Tensor::from_fn(&[4, 4, 3], |ix| (ix[0] as f64 * 0.25 + ix[2] as f64 * 0.1).min(1.0));
        write_image(&img, &path).unwrap();
        let (back, gray) = read_image(&path).unwrap();
        assert!(!gray);
        let quantized = img.map(|v| quantize(v) as f64 / 255.0);
        assert_eq!(back.data(), quantized.data());
    }

    #[test]
    fn grayscale_png_is_replicated_with_flag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let gray = image::GrayImage::from_fn(4, 4, |x, y| image::Luma([(x * 20 + y) as u8]));
        gray.save(&path).unwrap();
        let (t, was_gray) = read_image(&path).unwrap();
        assert!(was_gray);
        assert_eq!(t.shape(), &[4, 4, 3]);
        for r in 0..4 {
            for c in 0..4 {
                let v = t.at(&[r, c, 0]);
                assert_eq!(t.at(&[r, c, 1]), v);
                assert_eq!(t.at(&[r, c, 2]), v);
            }
        }
    }

    #[test]
    fn resize_identity_is_bitwise_and_constant_stays_constant() {
        let img = Tensor::from_fn(&[5, 7, 3], |ix| (ix[0] * 7 + ix[1]) as f64 / 35.0);
        let same = resize_bilinear(&img, 5, 7).unwrap();
        assert_eq!(same.data(), img.data());
        let solid = Tensor::full(&[3, 3, 3], 0.6);
        let up = resize_bilinear(&solid, 9, 11).unwrap();
        for &v in up.data() {
            assert!((v - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_checkerboard_hand_trace() {
        // 2x2 checkerboard [[1,0],[0,1]] upsampled to 4x4 with center
        // alignment: source coordinate (d + 0.5) / 2 - 0.5, clamped.
        let img = Tensor::new(vec![2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let up = resize_bilinear(&img, 4, 4).unwrap();
        let expect = [
            [1.0, 0.75, 0.25, 0.0],
            [0.75, 0.625, 0.375, 0.25],
            [0.25, 0.375, 0.625, 0.75],
            [0.0, 0.25, 0.75, 1.0],
        ];
        for r in 0..4 {
            for c in 0..4 {
                assert!(
                    (up.at(&[r, c, 0]) - expect[r][c]).abs() < 1e-12,
                    "({r},{c}): {} vs {}",
                    up.at(&[r, c, 0]),
                    expect[r][c]
                );
            }
        }
    }

    fn fake_tree(counts: &[(&str, usize)]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for (name, n) in counts {
            let class_dir = dir.path().join(name);
            fs::create_dir_all(&class_dir).unwrap();
            for i in 0..*n {
                // 1x1 PPM files are enough for split accounting.
                fs::write(class_dir.join(format!("f{i:04}.ppm")), b"P6\n1 1\n255\nabc").unwrap();
            }
        }
        dir
    }

    #[test]
    fn index_orders_classes_lexicographically_and_excludes() {
        let dir = fake_tree(&[("zeta", 2), ("alpha", 3), ("mid", 1)]);
        let idx = index_directory(dir.path(), &[]).unwrap();
        assert_eq!(idx.class_names, vec!["alpha", "mid", "zeta"]);
        assert_eq!(idx.entries.len(), 6);
        let idx = index_directory(dir.path(), &["mid".to_string()]).unwrap();
        assert_eq!(idx.class_names, vec!["alpha", "zeta"]);
        assert_eq!(idx.entries.iter().filter(|e| e.1 == 1).count(), 2);
    }

    #[test]
    fn index_rejects_empty_class_dir() {
        let dir = fake_tree(&[("full", 2)]);
        fs::create_dir_all(dir.path().join("hollow")).unwrap();
        let err = index_directory(dir.path(), &[]).unwrap_err().to_string();
        assert!(err.contains("hollow"), "{err}");
    }

    #[test]
    fn split_reproduces_reference_counts() {
        // The documented rounding rule on three reference class sizes.
        for (n, expect) in [(1028, (658, 164, 206)), (41, (26, 7, 8)), (10, (6, 2, 2))] {
            let n_test = round_half_up(n as f64 * 0.20);
            let rem = n - n_test;
            let n_val = round_half_up(rem as f64 * 0.20);
            let got = (rem - n_val, n_val, n_test);
            assert_eq!(got, expect, "n={n}");
        }
    }

    #[test]
    fn split_is_disjoint_exhaustive_stratified_and_seeded() {
        let dir = fake_tree(&[("a", 41), ("b", 10), ("c", 137)]);
        let idx = index_directory(dir.path(), &[]).unwrap();
        let spec = SplitSpec { seed: 9, ..Default::default() };
        let s1 = split_index(&idx, &spec).unwrap();
        let all: Vec<&PathBuf> = s1.train.iter().chain(&s1.val).chain(&s1.test).map(|e| &e.0).collect();
        assert_eq!(all.len(), idx.entries.len());
        let unique: std::collections::BTreeSet<&PathBuf> = all.iter().copied().collect();
        assert_eq!(unique.len(), all.len(), "splits overlap");
        // Stratification: per class each split deviates from the ideal
        // ratio by at most one file.
        for row in &s1.audit {
            let n = row.total() as f64;
            assert!((row.test as f64 - 0.20 * n).abs() <= 1.0, "{row:?}");
            assert!((row.val as f64 - 0.16 * n).abs() <= 1.0, "{row:?}");
            assert!((row.train as f64 - 0.64 * n).abs() <= 1.0, "{row:?}");
        }
        // Same seed reproduces the assignment; a different seed moves at
        // least one file on the largest class.
        let s2 = split_index(&idx, &spec).unwrap();
        assert_eq!(s1.train, s2.train);
        assert_eq!(s1.val, s2.val);
        assert_eq!(s1.test, s2.test);
        let s3 = split_index(&idx, &SplitSpec { seed: 10, ..Default::default() }).unwrap();
        assert_ne!(s1.test, s3.test);
    }

    #[test]
    fn audit_table_renders_rows_and_totals() {
        let dir = fake_tree(&[("a", 10), ("b", 20)]);
        let idx = index_directory(dir.path(), &[]).unwrap();
        let splits = split_index(&idx, &SplitSpec::default()).unwrap();
        let table = render_audit(&splits);
        assert!(table.lines().count() == 4);
        assert!(table.contains("class"));
        assert!(table.contains("total"));
        let totals = splits.audit_totals();
        assert_eq!(totals.total(), 30);
    }

    #[test]
    fn synth_counts_and_determinism() {
        let spec = SyntheticSpec { classes: 4, per_class: 3, size: 16, seed: 5 };
        let a = synthesize_images(&spec).unwrap();
        let b = synthesize_images(&spec).unwrap();
        assert_eq!(a.len(), 12);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.motif_box, y.motif_box);
        }
        let c = synthesize_images(&SyntheticSpec { seed: 6, ..spec }).unwrap();
        assert_ne!(a[0].image.data(), c[0].image.data());
        // Class 0 boxes are proper sub-regions.
        for s in a.iter().filter(|s| s.label == 0) {
            let (r0, c0, r1, c1) = s.motif_box;
            assert!(r1 > r0 && c1 > c0);
            assert!(r1 - r0 < 16 && c1 - c0 < 16);
        }
        assert!(synthesize_images(&SyntheticSpec { classes: 9, ..spec }).is_err());
        assert!(synthesize_images(&SyntheticSpec { classes: 1, ..spec }).is_err());
    }

    #[test]
    fn synth_writes_files_and_respects_force() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        let spec = SyntheticSpec { classes: 2, per_class: 4, size: 12, seed: 1 };
        let summary = synthesize_dataset(&spec, &out, false).unwrap();
        assert_eq!(summary.files_written, 8);
        assert!(out.join("class_00_square").join("img_0003.png").exists());
        // Non-empty target without force is rejected; with force it runs.
        let err = synthesize_dataset(&spec, &out, false).unwrap_err().to_string();
        assert!(err.contains("--force"), "{err}");
        synthesize_dataset(&spec, &out, true).unwrap();
        // Determinism through the PNG encoder: identical bytes across runs.
        let first = fs::read(out.join("class_00_square/img_0000.png")).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let out2 = dir2.path().join("data");
        synthesize_dataset(&spec, &out2, false).unwrap();
        let second = fs::read(out2.join("class_00_square/img_0000.png")).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn synth_classes_learnable_by_nearest_centroid() {
        // Half the samples build per-class mean images; the other half must
        // classify correctly by nearest centroid almost always.
        let spec = SyntheticSpec { classes: 4, per_class: 20, size: 16, seed: 11 };
        let samples = synthesize_images(&spec).unwrap();
        let mut centroids: Vec<Vec<f64>> = vec![vec![0.0; 16 * 16 * 3]; 4];
        let mut counts = [0usize; 4];
        let mut held_out = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            if i % 2 == 0 {
                for (acc, &v) in centroids[s.label].iter_mut().zip(s.image.data()) {
                    *acc += v;
                }
                counts[s.label] += 1;
            } else {
                held_out.push(s);
            }
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            for v in c.iter_mut() {
                *v /= n as f64;
            }
        }
        let mut hits = 0;
        for s in &held_out {
            let mut best = 0;
            let mut best_d = f64::MAX;
            for (k, c) in centroids.iter().enumerate() {
                let d: f64 = c.iter().zip(s.image.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            if best == s.label {
                hits += 1;
            }
        }
        let acc = hits as f64 / held_out.len() as f64;
        assert!(acc >= 0.8, "centroid accuracy {acc}");
    }

    #[test]
    fn load_split_skips_undecodable_and_converts_layout() {
        let dir = fake_tree(&[("a", 3)]);
        // One corrupt file alongside the good ones.
        fs::write(dir.path().join("a/zz_bad.png"), b"not a png").unwrap();
        let idx = index_directory(dir.path(), &[]).unwrap();
        assert_eq!(idx.entries.len(), 4);
        let loaded = load_split(&idx.entries, 8).unwrap();
        assert_eq!(loaded.skipped, 1);
        assert_eq!(loaded.set.len(), 3);
        assert_eq!(loaded.set.images[0].shape(), &[3, 8, 8]);
        assert_eq!(loaded.paths.len(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn hwc_chw_round_trip(h in 1usize..5, w in 1usize..5, seed in 0u64..1000) {
            let mut state = seed.wrapping_add(17);
            let img = Tensor::from_fn(&[h, w, 3], |_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 40) as f64 / (1u64 << 24) as f64
            });
            let chw = hwc_to_chw(&img).unwrap();
            prop_assert_eq!(chw.shape(), &[3, h, w]);
            let back = chw_to_hwc(&chw).unwrap();
            prop_assert_eq!(back.data(), img.data());
        }

        #[test]
        fn split_rule_counts_are_consistent(n in 1usize..3000) {
            let n_test = round_half_up(n as f64 * 0.20);
            let rem = n - n_test;
            let n_val = round_half_up(rem as f64 * 0.20);
            let n_train = rem - n_val;
            prop_assert_eq!(n_train + n_val + n_test, n);
            prop_assert!((n_test as f64 - 0.20 * n as f64).abs() <= 1.0);
            prop_assert!((n_val as f64 - 0.16 * n as f64).abs() <= 1.0);
            prop_assert!((n_train as f64 - 0.64 * n as f64).abs() <= 1.0);
        }
    }
}
