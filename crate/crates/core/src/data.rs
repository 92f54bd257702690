//! Dataset ingestion and shifted test-stream construction.
//!
//! MNIST-style IDX files are parsed into grayscale digits, which the
//! colored builder turns into two-class images whose color is spuriously
//! correlated with the class (color follows the class, flipped with
//! probability 0.2 on train and 0.9 on test). A procedural glyph generator
//! provides the same construction without any data files.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::transforms::{ImageGrid, TransformSpec};

pub const TRAIN_FLIP_P: f64 = 0.2;
pub const TEST_FLIP_P: f64 = 0.9;

/// Red lives in channel 0, green in channel 1 (RGB layout).
pub const RED: usize = 0;
pub const GREEN: usize = 1;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn flip_probability(&self) -> f64 {
        match self {
            Split::Train => TRAIN_FLIP_P,
            Split::Test => TEST_FLIP_P,
        }
    }
}

/// A 28x28 grayscale digit with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// A colored two-class sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: ImageGrid,
    /// 0 for source digits 0-4, 1 for 5-9.
    pub class_label: usize,
    /// `2 * class_label + color_bit`.
    pub group_id: usize,
    pub source_digit: u8,
}

/// An ordered set of samples presented to the model at once.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Vec<ImageGrid>,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a LabeledImage>) -> Self {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut groups = Vec::new();
        for s in samples {
            images.push(s.image.clone());
            labels.push(s.class_label);
            groups.push(s.group_id);
        }
        Batch {
            images,
            labels,
            groups,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Flattens the images into a row-per-sample matrix; every image must
    /// have `input_dim` values.
    pub fn to_matrix(&self, input_dim: usize) -> Result<Matrix> {
        let mut data = Vec::with_capacity(self.len() * input_dim);
        for img in &self.images {
            if img.data.len() != input_dim {
                return Err(Error::DimensionMismatch {
                    context: "Batch::to_matrix",
                    expected: format!("{input_dim} values per image"),
                    actual: format!("{}", img.data.len()),
                });
            }
            data.extend_from_slice(&img.data);
        }
        Matrix::from_vec(self.len(), input_dim, data)
    }

    /// Applies `f` to every image, keeping labels and groups.
    pub fn map_images(&self, mut f: impl FnMut(&ImageGrid) -> Result<ImageGrid>) -> Result<Batch> {
        let mut images = Vec::with_capacity(self.len());
        for img in &self.images {
            images.push(f(img)?);
        }
        Ok(Batch {
            images,
            labels: self.labels.clone(),
            groups: self.groups.clone(),
        })
    }

    /// Selects a sub-batch by index.
    pub fn subset(&self, idx: &[usize]) -> Batch {
        Batch {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            groups: idx.iter().map(|&i| self.groups[i]).collect(),
        }
    }

    /// The batch content twice in a row (used to give batch norm a second
    /// sample when only one survives a gate).
    pub fn repeated_twice(&self) -> Batch {
        let mut out = self.clone();
        out.images.extend(self.images.iter().cloned());
        out.labels.extend(self.labels.iter().cloned());
        out.groups.extend(self.groups.iter().cloned());
        out
    }
}

// ---------------------------------------------------------------------------
// IDX parsing
// ---------------------------------------------------------------------------

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(Error::Format {
            offset,
            message: "truncated header".into(),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Parses an IDX image file (magic 0x00000803): big-endian header of
/// count/rows/cols, then one byte per pixel, scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<GrayImage>> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let count = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected),
            message: format!(
                "payload size mismatch: header promises {count} images of {rows}x{cols} \
                 ({expected} bytes total), file has {} bytes",
                bytes.len()
            ),
        });
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * rows * cols;
        let data = bytes[start..start + rows * cols]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        images.push(GrayImage {
            height: rows,
            width: cols,
            data,
        });
    }
    Ok(images)
}

/// Parses an IDX label file (magic 0x00000801).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let count = read_be_u32(bytes, 4)? as usize;
    if bytes.len() != 8 + count {
        return Err(Error::Format {
            offset: bytes.len().min(8 + count),
            message: format!(
                "payload size mismatch: header promises {count} labels, file has {} payload bytes",
                bytes.len().saturating_sub(8)
            ),
        });
    }
    Ok(bytes[8..].to_vec())
}

/// Encodes images back to IDX bytes (values are clamped and quantized to
/// one byte, so this round-trips data produced by [`parse_idx_images`]).
pub fn write_idx_images(images: &[GrayImage]) -> Vec<u8> {
    let (rows, cols) = images
        .first()
        .map(|i| (i.height, i.width))
        .unwrap_or((0, 0));
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        for &v in &img.data {
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

// ---------------------------------------------------------------------------
// Colored construction
// ---------------------------------------------------------------------------

/// Colors grayscale digits with an explicit label-color flip probability.
///
/// Class is 0 for digits 0-4 and 1 for 5-9. The color bit follows the class
/// and flips with probability `flip_p`; the digit intensity is painted into
/// the green channel for color bit 0 and the red channel for color bit 1,
/// with the other channels zero.
pub fn build_colored_with_flip(
    digits: &[GrayImage],
    labels: &[u8],
    flip_p: f64,
    rng: &mut Rng,
) -> Result<Vec<LabeledImage>> {
    if digits.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "build_colored_mnist",
            expected: format!("{} labels", digits.len()),
            actual: format!("{}", labels.len()),
        });
    }
    let mut out = Vec::with_capacity(digits.len());
    for (digit, &label) in digits.iter().zip(labels) {
        if label > 9 {
            return Err(Error::Config(format!(
                "digit label {label} out of range 0-9"
            )));
        }
        let class = if label <= 4 { 0 } else { 1 };
        let flipped = rng.bernoulli(flip_p);
        let color_bit = if flipped { 1 - class } else { class };
        let mut image = ImageGrid::new(digit.height, digit.width, 3);
        let channel = if color_bit == 1 { RED } else { GREEN };
        for y in 0..digit.height {
            for x in 0..digit.width {
                image.set(y, x, channel, digit.data[y * digit.width + x]);
            }
        }
        out.push(LabeledImage {
            image,
            class_label: class,
            group_id: 2 * class + color_bit,
            source_digit: label,
        });
    }
    Ok(out)
}

/// Colored construction with the split's standard flip probability
/// (0.2 train, 0.9 test).
pub fn build_colored_mnist(
    digits: &[GrayImage],
    labels: &[u8],
    split: Split,
    rng: &mut Rng,
) -> Result<Vec<LabeledImage>> {
    build_colored_with_flip(digits, labels, split.flip_probability(), rng)
}

// ---------------------------------------------------------------------------
// Synthetic fallback
// ---------------------------------------------------------------------------

/// Procedurally drawn 28x28 glyphs: diagonal strokes rising left-to-right
/// for digits 0-4, falling for 5-9 (mirror images of each other, so both
/// classes have identical pixel-mass and fragility statistics).
///
/// The strokes are jittered and degraded (dropout, speckle) so that shape
/// is learnable but not trivially so; the color shortcut added by the
/// colored construction then actually competes with it, which is the
/// regime the biased scenario needs.
pub fn synth_glyphs(n: usize, rng: &mut Rng) -> (Vec<GrayImage>, Vec<u8>) {
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let digit = rng.below(10) as u8;
        // +1 slope for class 0 ("/" in image coordinates), -1 for class 1.
        let orient = if digit <= 4 { 1.0 } else { -1.0 };
        let mut data = vec![0.0f64; 28 * 28];
        let mut draw_strokes = |rng: &mut Rng, orient: f64, intensity: f64| {
            let strokes = 1 + rng.below(2);
            let cx = 13.5 + rng.uniform(-4.0, 4.0);
            let cy = 13.5 + rng.uniform(-4.0, 4.0);
            let half_len = rng.uniform(4.5, 8.5);
            let gap = rng.uniform(4.0, 7.0);
            let thickness = rng.uniform(1.3, 2.2);
            let keep_p = 0.75;
            for y in 0..28 {
                for x in 0..28 {
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cy;
                    // Strokes follow dy = -orient * dx + offset; `perp` is the
                    // perpendicular distance, `along` the position on the line.
                    let along = (dx - orient * dy) * 0.5;
                    let mut lit = false;
                    for s in 0..strokes {
                        let offset = (s as f64 - (strokes - 1) as f64 / 2.0) * gap;
                        let perp = (dy + orient * dx - offset) / 2.0f64.sqrt();
                        if perp.abs() < thickness && along.abs() < half_len {
                            lit = true;
                            break;
                        }
                    }
                    if lit && rng.bernoulli(keep_p) {
                        let v = intensity * rng.uniform(0.8, 1.0);
                        data[y * 28 + x] = data[y * 28 + x].max(v);
                    }
                }
            }
        };
        let intensity = rng.uniform(0.6, 1.0);
        draw_strokes(rng, orient, intensity);
        // A fainter distractor of the opposite orientation: the class is
        // carried by the dominant orientation only, so the shape cue takes
        // real work to extract while color stays a one-feature shortcut.
        let distractor = intensity * rng.uniform(0.35, 0.75);
        draw_strokes(rng, -orient, distractor);
        // Speckle: stray pixels of the same grayscale source carry the
        // sample's color but no shape.
        for _ in 0..rng.below(30) + 25 {
            let p = rng.below(28 * 28);
            data[p] = data[p].max(rng.uniform(0.25, 0.7));
        }
        images.push(GrayImage {
            height: 28,
            width: 28,
            data,
        });
        labels.push(digit);
    }
    (images, labels)
}

/// Synthetic colored samples with the same class/color coupling as the
/// MNIST-based construction; removes the data-file dependency.
pub fn synth_fallback(n: usize, split: Split, rng: &mut Rng) -> Result<Vec<LabeledImage>> {
    synth_fallback_with_flip(n, split.flip_probability(), rng)
}

pub fn synth_fallback_with_flip(n: usize, flip_p: f64, rng: &mut Rng) -> Result<Vec<LabeledImage>> {
    if n == 0 {
        return Err(Error::EmptyInput("synth_fallback: n must be >= 1"));
    }
    let (images, labels) = synth_glyphs(n, rng);
    build_colored_with_flip(&images, &labels, flip_p, rng)
}

// ---------------------------------------------------------------------------
// Scenario streams
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Global shuffle, fixed-size batches.
    Mild,
    /// Classes in random order, samples contiguous within a class
    /// (imbalance ratio of infinity).
    LabelShift,
    /// Mild order, one sample per batch.
    BatchSize1,
    /// Per-sample corruption drawn from a transform mix, then mild order.
    Mixed,
}

impl ScenarioKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "mild" => ScenarioKind::Mild,
            "label_shift" | "label-shift" => ScenarioKind::LabelShift,
            "batch_size_1" | "bs1" => ScenarioKind::BatchSize1,
            "mixed" => ScenarioKind::Mixed,
            other => {
                return Err(Error::Config(format!(
                    "unknown scenario kind '{other}' (expected mild, label_shift, \
                     batch_size_1, or mixed)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::Mild => "mild",
            ScenarioKind::LabelShift => "label_shift",
            ScenarioKind::BatchSize1 => "batch_size_1",
            ScenarioKind::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub batch_size: usize,
    /// Transform mix for [`ScenarioKind::Mixed`]; fractions must sum to 1.
    pub mix: Vec<(TransformSpec, f64)>,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, batch_size: usize, seed: u64) -> Self {
        ScenarioSpec {
            kind,
            batch_size: if kind == ScenarioKind::BatchSize1 {
                1
            } else {
                batch_size
            },
            mix: Vec::new(),
            seed,
        }
    }

    pub fn effective_batch_size(&self) -> usize {
        if self.kind == ScenarioKind::BatchSize1 {
            1
        } else {
            self.batch_size
        }
    }
}

/// Orders samples per the scenario and cuts them into batches. No sample is
/// dropped or duplicated. A trailing single-sample batch is merged into the
/// previous one (batch statistics need two samples) except in the
/// single-sample scenario.
pub fn make_stream(samples: &[LabeledImage], scenario: &ScenarioSpec) -> Result<Vec<Batch>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("make_stream: samples"));
    }
    let batch_size = scenario.effective_batch_size();
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    // Separate streams so the corruption draws of the mixed scenario leave
    // the ordering draws untouched.
    let mut order_rng = Rng::new(crate::numerics::sub_seed(scenario.seed, 0x6f72_6465));
    let mut corrupt_rng = Rng::new(crate::numerics::sub_seed(scenario.seed, 0x636f_7272));

    let mut working: Vec<LabeledImage>;
    match scenario.kind {
        ScenarioKind::Mild | ScenarioKind::BatchSize1 => {
            working = samples.to_vec();
            order_rng.shuffle(&mut working);
        }
        ScenarioKind::LabelShift => {
            let mut classes: Vec<usize> = {
                let mut seen: Vec<usize> = samples.iter().map(|s| s.class_label).collect();
                seen.sort_unstable();
                seen.dedup();
                seen
            };
            order_rng.shuffle(&mut classes);
            working = Vec::with_capacity(samples.len());
            for class in classes {
                let mut members: Vec<LabeledImage> = samples
                    .iter()
                    .filter(|s| s.class_label == class)
                    .cloned()
                    .collect();
                order_rng.shuffle(&mut members);
                working.extend(members);
            }
        }
        ScenarioKind::Mixed => {
            let total: f64 = scenario.mix.iter().map(|(_, f)| f).sum();
            if scenario.mix.is_empty() || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "mixed scenario fractions must sum to 1, got {total}"
                )));
            }
            working = Vec::with_capacity(samples.len());
            for s in samples {
                let mut draw = corrupt_rng.next_f64();
                let mut chosen = scenario.mix.last().map(|(t, _)| *t).unwrap();
                for (t, f) in &scenario.mix {
                    if draw < *f {
                        chosen = *t;
                        break;
                    }
                    draw -= f;
                }
                let mut s = s.clone();
                s.image = chosen.apply(&s.image, &mut corrupt_rng)?;
                working.push(s);
            }
            order_rng.shuffle(&mut working);
        }
    }

    let mut batches: Vec<Batch> = working
        .chunks(batch_size)
        .map(|chunk| Batch::from_samples(chunk.iter()))
        .collect();
    if batch_size > 1 && batches.len() > 1 {
        if let Some(last) = batches.last() {
            if last.len() == 1 {
                let tail = batches.pop().unwrap();
                let prev = batches.last_mut().unwrap();
                prev.images.extend(tail.images);
                prev.labels.extend(tail.labels);
                prev.groups.extend(tail.groups);
            }
        }
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_images_parse_hand_encoded_bytes() {
        // Two 2x2 images with known pixel bytes.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 51, 102, 255, 255, 204, 153, 0]);
        let images = parse_idx_images(&bytes).unwrap();
        assert_eq!(images.len(), 2);
        assert_eq!(
            images[0].data,
            vec![0.0, 51.0 / 255.0, 102.0 / 255.0, 1.0]
        );
        assert_eq!(images[1].data[0], 1.0);
        assert_eq!(images[1].data[3], 0.0);
    }

    #[test]
    fn idx_rejects_wrong_magic() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0x0000_0802u32.to_be_bytes());
        bytes.extend_from_slice(&[0; 12]);
        match parse_idx_images(&bytes) {
            Err(Error::Format { offset: 0, message }) => {
                assert!(message.contains("magic"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(parse_idx_labels(&bytes).is_err());
    }

    #[test]
    fn idx_rejects_size_mismatch() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        bytes.extend_from_slice(&3u32.to_be_bytes()); // promises 3 images
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0; 8]); // only 2 images worth of data
        assert!(matches!(
            parse_idx_images(&bytes),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn idx_round_trips_through_writer() {
        let mut rng = Rng::new(1);
        let (images, labels) = synth_glyphs(5, &mut rng);
        let img_bytes = write_idx_images(&images);
        let lbl_bytes = write_idx_labels(&labels);
        let images2 = parse_idx_images(&img_bytes).unwrap();
        let labels2 = parse_idx_labels(&lbl_bytes).unwrap();
        assert_eq!(labels, labels2);
        for (a, b) in images.iter().zip(&images2) {
            for (x, y) in a.data.iter().zip(&b.data) {
                // One quantization through u8 in each direction.
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        // Exact round trip once quantized.
        let again = write_idx_images(&images2);
        assert_eq!(img_bytes, again);
    }

    #[test]
    fn colored_classes_split_at_digit_four() {
        let digit = GrayImage {
            height: 2,
            width: 2,
            data: vec![0.5; 4],
        };
        let digits = vec![digit.clone(), digit];
        let mut rng = Rng::new(2);
        let out = build_colored_with_flip(&digits, &[4, 5], 0.0, &mut rng).unwrap();
        assert_eq!(out[0].class_label, 0);
        assert_eq!(out[1].class_label, 1);
    }

    #[test]
    fn colored_without_flip_populates_two_groups() {
        let mut rng = Rng::new(3);
        let (digits, labels) = synth_glyphs(100, &mut rng);
        let out = build_colored_with_flip(&digits, &labels, 0.0, &mut rng).unwrap();
        for s in &out {
            assert_eq!(s.group_id, 2 * s.class_label + s.class_label);
            // Class 0 -> green channel, class 1 -> red channel.
            let channel = if s.class_label == 1 { RED } else { GREEN };
            let other = 1 - channel;
            let lit: f64 = (0..28 * 28).map(|i| s.image.data[i * 3 + channel]).sum();
            let dark: f64 = (0..28 * 28).map(|i| s.image.data[i * 3 + other]).sum();
            assert!(lit > 0.0);
            assert_eq!(dark, 0.0);
        }
        let groups: std::collections::BTreeSet<usize> =
            out.iter().map(|s| s.group_id).collect();
        assert_eq!(groups.len(), 2);
    }

    #[test]
    fn colored_flip_rate_concentrates() {
        let mut rng = Rng::new(4);
        let (digits, labels) = synth_glyphs(10_000, &mut rng);
        let out = build_colored_with_flip(&digits, &labels, 0.9, &mut rng).unwrap();
        let flipped = out
            .iter()
            .filter(|s| s.group_id % 2 != s.class_label)
            .count() as f64
            / out.len() as f64;
        assert!(
            (flipped - 0.9).abs() < 0.01,
            "flip fraction {flipped} strayed from 0.9"
        );
    }

    #[test]
    fn synth_is_deterministic_and_covers_groups() {
        let a = synth_fallback_with_flip(100, 0.5, &mut Rng::new(5)).unwrap();
        let b = synth_fallback_with_flip(100, 0.5, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
        let groups: std::collections::BTreeSet<usize> = a.iter().map(|s| s.group_id).collect();
        assert_eq!(groups.len(), 4, "all four groups should appear");
        let classes: std::collections::BTreeSet<usize> =
            a.iter().map(|s| s.class_label).collect();
        assert_eq!(classes.len(), 2);
    }

    fn sample_key(s: &LabeledImage) -> (usize, usize, u8, Vec<u64>) {
        (
            s.class_label,
            s.group_id,
            s.source_digit,
            s.image.data.iter().map(|v| v.to_bits()).collect(),
        )
    }

    #[test]
    fn mild_stream_is_a_permutation_of_the_input() {
        let samples = synth_fallback_with_flip(97, 0.5, &mut Rng::new(6)).unwrap();
        let spec = ScenarioSpec::new(ScenarioKind::Mild, 16, 11);
        let stream = make_stream(&samples, &spec).unwrap();
        let mut seen: Vec<_> = Vec::new();
        for batch in &stream {
            for i in 0..batch.len() {
                seen.push((
                    batch.labels[i],
                    batch.groups[i],
                    batch.images[i].data.iter().map(|v| v.to_bits()).collect::<Vec<u64>>(),
                ));
            }
        }
        let mut expect: Vec<_> = samples
            .iter()
            .map(|s| {
                (
                    s.class_label,
                    s.group_id,
                    s.image.data.iter().map(|v| v.to_bits()).collect::<Vec<u64>>(),
                )
            })
            .collect();
        seen.sort();
        expect.sort();
        assert_eq!(seen, expect);
    }

    #[test]
    fn label_shift_stream_is_class_contiguous() {
        let samples = synth_fallback_with_flip(200, 0.5, &mut Rng::new(7)).unwrap();
        let spec = ScenarioSpec::new(ScenarioKind::LabelShift, 16, 12);
        let stream = make_stream(&samples, &spec).unwrap();
        let flat: Vec<usize> = stream.iter().flat_map(|b| b.labels.clone()).collect();
        // The label sequence must have exactly one transition point.
        let transitions = flat.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(transitions, 1, "two classes, one boundary");
        // Batches are pure except possibly the boundary one.
        let impure = stream
            .iter()
            .filter(|b| b.labels.iter().any(|&l| l != b.labels[0]))
            .count();
        assert!(impure <= 1);
    }

    #[test]
    fn batch_size_one_scenario_emits_singletons() {
        let samples = synth_fallback_with_flip(10, 0.5, &mut Rng::new(8)).unwrap();
        let spec = ScenarioSpec::new(ScenarioKind::BatchSize1, 64, 13);
        let stream = make_stream(&samples, &spec).unwrap();
        assert_eq!(stream.len(), 10);
        assert!(stream.iter().all(|b| b.len() == 1));
    }

    #[test]
    fn mixed_identity_equals_mild_exactly() {
        let samples = synth_fallback_with_flip(50, 0.5, &mut Rng::new(9)).unwrap();
        let mild = ScenarioSpec::new(ScenarioKind::Mild, 8, 14);
        let mut mixed = ScenarioSpec::new(ScenarioKind::Mixed, 8, 14);
        mixed.mix = vec![(TransformSpec::identity(), 1.0)];
        let a = make_stream(&samples, &mild).unwrap();
        let b = make_stream(&samples, &mixed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mixed_rejects_bad_fractions() {
        let samples = synth_fallback_with_flip(10, 0.5, &mut Rng::new(10)).unwrap();
        let mut spec = ScenarioSpec::new(ScenarioKind::Mixed, 4, 15);
        spec.mix = vec![(TransformSpec::identity(), 0.7)];
        assert!(matches!(
            make_stream(&samples, &spec),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn trailing_singleton_merges_into_previous_batch() {
        let samples = synth_fallback_with_flip(17, 0.5, &mut Rng::new(11)).unwrap();
        let spec = ScenarioSpec::new(ScenarioKind::Mild, 8, 16);
        let stream = make_stream(&samples, &spec).unwrap();
        assert_eq!(stream.len(), 2);
        assert_eq!(stream[0].len(), 8);
        assert_eq!(stream[1].len(), 9);
        let total: usize = stream.iter().map(|b| b.len()).sum();
        assert_eq!(total, 17);
    }

    #[test]
    fn streams_preserve_sample_multisets() {
        let samples = synth_fallback_with_flip(60, 0.5, &mut Rng::new(12)).unwrap();
        for kind in [
            ScenarioKind::Mild,
            ScenarioKind::LabelShift,
            ScenarioKind::BatchSize1,
        ] {
            let spec = ScenarioSpec::new(kind, 7, 17);
            let stream = make_stream(&samples, &spec).unwrap();
            let count: usize = stream.iter().map(|b| b.len()).sum();
            assert_eq!(count, samples.len(), "{kind:?} dropped or duplicated");
            let mut labels: Vec<usize> = stream.iter().flat_map(|b| b.labels.clone()).collect();
            let mut expect: Vec<usize> = samples.iter().map(|s| s.class_label).collect();
            labels.sort_unstable();
            expect.sort_unstable();
            assert_eq!(labels, expect);
        }
        let _ = sample_key(&samples[0]);
    }
}
