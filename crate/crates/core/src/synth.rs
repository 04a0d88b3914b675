//! Synthetic two-modality domain-shift scenarios and the `MMDS1` dataset
//! format.
//!
//! Each point draws a class uniformly, then a 2D and a 3D feature vector from
//! class-conditional Gaussians with independent means. The target domain
//! applies a per-feature affine map and a noise multiplier to each modality,
//! may blend the 2D features toward class-independent noise (`corrupt2d`),
//! and may replace a modality of single points by noise (`dropout`).
//!
//! Points inside a frame are stored in scan order: with `scan_coherence`
//! above zero, points of one class tend to sit next to each other, as
//! consecutive returns of one object do in a real scan.
//!
//! Frames are indexed globally: source frame `i` is frame `i`, target frame
//! `i` is frame `source_frames + i`, and frame `j` draws from stream `j` of
//! the scenario seed. Class means and the target transform come from two
//! reserved streams, so frames can be generated independently.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 5] = b"MMDS1";

const MEANS_STREAM: u64 = u64::MAX;
const SHIFT_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// Target-domain change of one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModalityShift {
    /// Per-feature scales are drawn uniformly from `[scale_min, scale_max]`.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Per-feature offsets are drawn from `N(0, offset_std²)`.
    pub offset_std: f64,
    /// Multiplier on the within-class noise.
    pub noise_mult: f64,
    /// Probability that a target point's features in this modality are
    /// replaced by class-independent noise.
    pub dropout: f64,
}

impl Default for ModalityShift {
    fn default() -> Self {
        Self::identity()
    }
}

impl ModalityShift {
    pub fn identity() -> Self {
        Self {
            scale_min: 1.0,
            scale_max: 1.0,
            offset_std: 0.0,
            noise_mult: 1.0,
            dropout: 0.0,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = self.scale_min > 0.0
            && self.scale_max >= self.scale_min
            && self.scale_max.is_finite()
            && self.offset_std >= 0.0
            && self.offset_std.is_finite()
            && self.noise_mult > 0.0
            && self.noise_mult.is_finite()
            && (0.0..=1.0).contains(&self.dropout);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid {name} shift {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    pub classes: usize,
    pub f2: usize,
    pub f3: usize,
    pub points: usize,
    pub source_frames: usize,
    pub target_frames: usize,
    /// Standard deviation of the class means around the origin.
    pub class_sep2d: f64,
    pub class_sep3d: f64,
    /// Within-class noise standard deviation in the source domain.
    pub noise2d: f64,
    pub noise3d: f64,
    pub shift2d: ModalityShift,
    pub shift3d: ModalityShift,
    /// Blend weight of 2D features toward class-independent noise.
    pub corrupt2d: f64,
    /// 0 stores points in draw order; 1 sorts them by class.
    pub scan_coherence: f64,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self::preset("sensor-swap").expect("built-in preset")
    }
}

pub const PRESETS: [&str; 3] = ["sensor-swap", "day-night", "syn-real"];

impl ScenarioSpec {
    /// Source and target drawn from the same distribution.
    pub fn unshifted() -> Self {
        Self {
            classes: 6,
            f2: 16,
            f3: 12,
            points: 256,
            source_frames: 200,
            target_frames: 100,
            class_sep2d: 1.0,
            class_sep3d: 1.0,
            noise2d: 1.0,
            noise3d: 1.0,
            shift2d: ModalityShift::identity(),
            shift3d: ModalityShift::identity(),
            corrupt2d: 0.0,
            scan_coherence: 0.5,
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::unshifted();
        let shift = |lo, hi, off, noise, dropout| ModalityShift {
            scale_min: lo,
            scale_max: hi,
            offset_std: off,
            noise_mult: noise,
            dropout,
        };
        Ok(match name {
            "sensor-swap" => Self {
                shift2d: shift(0.6, 1.6, 0.8, 1.2, 0.1),
                shift3d: shift(0.6, 1.6, 0.8, 1.2, 0.1),
                ..base
            },
            "day-night" => Self {
                shift2d: shift(0.5, 1.0, 0.5, 1.5, 0.1),
                shift3d: ModalityShift::identity(),
                corrupt2d: 0.6,
                ..base
            },
            "syn-real" => Self {
                shift2d: shift(0.4, 2.0, 1.2, 1.4, 0.15),
                shift3d: shift(0.4, 2.0, 1.2, 1.4, 0.15),
                ..base
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown scenario {other:?}; expected one of {PRESETS:?}"
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("classes", self.classes),
            ("f2", self.f2),
            ("f3", self.f3),
            ("points", self.points),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("class_sep2d", self.class_sep2d),
            ("class_sep3d", self.class_sep3d),
            ("noise2d", self.noise2d),
            ("noise3d", self.noise3d),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.corrupt2d) {
            return Err(Error::Config(format!("corrupt2d {} outside [0, 1]", self.corrupt2d)));
        }
        if !(0.0..=1.0).contains(&self.scan_coherence) {
            return Err(Error::Config(format!(
                "scan_coherence {} outside [0, 1]",
                self.scan_coherence
            )));
        }
        self.shift2d.validate("2d")?;
        self.shift3d.validate("3d")
    }

    pub fn frames(&self, domain: Domain) -> usize {
        match domain {
            Domain::Source => self.source_frames,
            Domain::Target => self.target_frames,
        }
    }
}

/// One frame: aligned 2D features, 3D features and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalBatch {
    pub x2d: Tensor,
    pub x3d: Tensor,
    pub labels: Vec<usize>,
}

impl MultiModalBatch {
    pub fn new(x2d: Tensor, x3d: Tensor, labels: Vec<usize>) -> Result<Self> {
        if x2d.rows() != x3d.rows() || x2d.rows() != labels.len() {
            return Err(Error::dim(
                "MultiModalBatch",
                format!("{} rows", x2d.rows()),
                format!("{}, {}, {}", x2d.rows(), x3d.rows(), labels.len()),
            ));
        }
        Ok(Self { x2d, x3d, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stacks batches row-wise.
    pub fn concat(parts: &[&MultiModalBatch]) -> Result<Self> {
        let x2d: Vec<&Tensor> = parts.iter().map(|b| &b.x2d).collect();
        let x3d: Vec<&Tensor> = parts.iter().map(|b| &b.x3d).collect();
        let labels = parts.iter().flat_map(|b| b.labels.iter().copied()).collect();
        Self::new(Tensor::vstack(&x2d)?, Tensor::vstack(&x3d)?, labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub frames: Vec<MultiModalBatch>,
}

impl Dataset {
    pub fn new(classes: usize, frames: Vec<MultiModalBatch>) -> Result<Self> {
        if let Some(first) = frames.first() {
            let widths = (first.x2d.cols(), first.x3d.cols(), first.len());
            for f in &frames {
                if (f.x2d.cols(), f.x3d.cols(), f.len()) != widths {
                    return Err(Error::dim(
                        "Dataset",
                        format!("{widths:?}"),
                        format!("{:?}", (f.x2d.cols(), f.x3d.cols(), f.len())),
                    ));
                }
            }
        }
        if let Some(&bad) = frames.iter().flat_map(|f| &f.labels).find(|&&y| y >= classes) {
            return Err(Error::dim("Dataset labels", classes, bad));
        }
        Ok(Self { classes, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(f2, f3, points per frame)`, zeros when empty.
    pub fn widths(&self) -> (usize, usize, usize) {
        self.frames
            .first()
            .map_or((0, 0, 0), |f| (f.x2d.cols(), f.x3d.cols(), f.len()))
    }

    /// Frames `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            classes: self.classes,
            frames: self.frames[range].to_vec(),
        }
    }

    /// All frames stacked into one batch.
    pub fn stacked(&self) -> Result<MultiModalBatch> {
        let parts: Vec<&MultiModalBatch> = self.frames.iter().collect();
        MultiModalBatch::concat(&parts)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for y in self.frames.iter().flat_map(|f| &f.labels) {
            counts[*y] += 1;
        }
        counts
    }
}

struct Transform {
    scale: Vec<f64>,
    offset: Vec<f64>,
}

impl Transform {
    fn draw(r: &mut Stream, width: usize, shift: &ModalityShift) -> Self {
        let scale = (0..width)
            .map(|_| shift.scale_min + (shift.scale_max - shift.scale_min) * rng::uniform(r))
            .collect();
        let offset = (0..width)
            .map(|_| shift.offset_std * rng::standard_normal(r))
            .collect();
        Self { scale, offset }
    }
}

fn class_means(r: &mut Stream, classes: usize, width: usize, sep: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|_| (0..width).map(|_| sep * rng::standard_normal(r)).collect())
        .collect()
}

struct Generator<'a> {
    spec: &'a ScenarioSpec,
    means2d: Vec<Vec<f64>>,
    means3d: Vec<Vec<f64>>,
    t2d: Transform,
    t3d: Transform,
}

impl<'a> Generator<'a> {
    fn new(spec: &'a ScenarioSpec) -> Self {
        let mut r = rng::stream(spec.seed, MEANS_STREAM);
        let means2d = class_means(&mut r, spec.classes, spec.f2, spec.class_sep2d);
        let means3d = class_means(&mut r, spec.classes, spec.f3, spec.class_sep3d);
        let mut r = rng::stream(spec.seed, SHIFT_STREAM);
        let t2d = Transform::draw(&mut r, spec.f2, &spec.shift2d);
        let t3d = Transform::draw(&mut r, spec.f3, &spec.shift3d);
        Self {
            spec,
            means2d,
            means3d,
            t2d,
            t3d,
        }
    }

    /// Features of one modality for one point. Every draw happens in both
    /// domains so the two consume their streams identically.
    #[allow(clippy::too_many_arguments)]
    fn features(
        r: &mut Stream,
        mean: &[f64],
        noise: f64,
        spread: f64,
        shift: Option<(&ModalityShift, &Transform)>,
        corrupt: f64,
        out: &mut Vec<f32>,
    ) {
        let mult = shift.map_or(1.0, |(s, _)| s.noise_mult);
        let dropout = shift.map_or(0.0, |(s, _)| s.dropout);
        let dropped = rng::uniform(r) < dropout;
        for (j, &m) in mean.iter().enumerate() {
            let z = rng::standard_normal(r);
            let u = spread * rng::standard_normal(r);
            let mut v = m + mult * noise * z;
            if let Some((_, t)) = shift {
                v = t.scale[j] * v + t.offset[j];
            }
            if corrupt > 0.0 {
                v = (1.0 - corrupt) * v + corrupt * u;
            }
            if dropped {
                v = u;
            }
            out.push(v as f32);
        }
    }

    fn frame(&self, domain: Domain, index: usize) -> MultiModalBatch {
        let s = self.spec;
        let global = match domain {
            Domain::Source => index,
            Domain::Target => s.source_frames + index,
        };
        let mut r = rng::stream(s.seed, global as u64);
        let target = domain == Domain::Target;
        let spread2d = (s.class_sep2d.powi(2) + s.noise2d.powi(2)).sqrt();
        let spread3d = (s.class_sep3d.powi(2) + s.noise3d.powi(2)).sqrt();
        let mut x2d = Vec::with_capacity(s.points * s.f2);
        let mut x3d = Vec::with_capacity(s.points * s.f3);
        let mut labels = Vec::with_capacity(s.points);
        let mut keys = Vec::with_capacity(s.points);
        for _ in 0..s.points {
            let k = rng::below(&mut r, s.classes);
            labels.push(k);
            let c = s.scan_coherence;
            keys.push(c * k as f64 + (1.0 - c) * s.classes as f64 * rng::uniform(&mut r));
            Self::features(
                &mut r,
                &self.means2d[k],
                s.noise2d,
                spread2d,
                target.then_some((&s.shift2d, &self.t2d)),
                if target { s.corrupt2d } else { 0.0 },
                &mut x2d,
            );
            Self::features(
                &mut r,
                &self.means3d[k],
                s.noise3d,
                spread3d,
                target.then_some((&s.shift3d, &self.t3d)),
                0.0,
                &mut x3d,
            );
        }
        let mut order: Vec<usize> = (0..s.points).collect();
        order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));
        let x2d = Tensor::new(s.points, s.f2, x2d).expect("sized");
        let x3d = Tensor::new(s.points, s.f3, x3d).expect("sized");
        MultiModalBatch {
            x2d: x2d.select_rows(&order),
            x3d: x3d.select_rows(&order),
            labels: order.iter().map(|&i| labels[i]).collect(),
        }
    }
}

/// Generates every frame of `domain`. A pure function of `(spec, domain)`.
pub fn generate(spec: &ScenarioSpec, domain: Domain) -> Result<Dataset> {
    spec.validate()?;
    let gen = Generator::new(spec);
    let frames = (0..spec.frames(domain)).map(|i| gen.frame(domain, i)).collect();
    Ok(Dataset {
        classes: spec.classes,
        frames,
    })
}

/// Layout, little-endian: `"MMDS1"`, then `u32` K, f2, f3, frame count,
/// points per frame, then per frame the `f32` 2D block, the `f32` 3D block
/// and the `i32` labels.
pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>> {
    let (f2, f3, points) = data.widths();
    let mut w = Writer::default();
    w.bytes(DATASET_MAGIC);
    for v in [data.classes, f2, f3, data.len(), points] {
        w.usize(v)?;
    }
    for frame in &data.frames {
        w.f32s(frame.x2d.data());
        w.f32s(frame.x3d.data());
        let labels: Vec<i32> = frame.labels.iter().map(|&y| y as i32).collect();
        w.i32s(&labels);
    }
    Ok(w.finish())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let at = r.offset();
    let classes = r.u32("class count")? as usize;
    let f2 = r.u32("2d width")? as usize;
    let f3 = r.u32("3d width")? as usize;
    let count = r.u32("frame count")? as usize;
    let points = r.u32("points per frame")? as usize;
    if classes == 0 || (count > 0 && (f2 == 0 || f3 == 0 || points == 0)) {
        return Err(Error::format(at, "zero-sized header field"));
    }
    let frame_bytes = points.saturating_mul(f2 + f3 + 1).saturating_mul(4);
    let remaining = bytes.len() as u64 - r.offset();
    if (count as u64).saturating_mul(frame_bytes as u64) != remaining {
        return Err(Error::format(
            r.offset(),
            format!("header promises {count} frames of {frame_bytes} bytes, {remaining} bytes follow"),
        ));
    }
    let mut frames = Vec::with_capacity(count);
    for _ in 0..count {
        let x2d = Tensor::new(points, f2, r.f32s(points * f2, "2d block")?)?;
        let x3d = Tensor::new(points, f3, r.f32s(points * f3, "3d block")?)?;
        let at = r.offset();
        let raw = r.i32s(points, "labels")?;
        let mut labels = Vec::with_capacity(points);
        for (i, y) in raw.into_iter().enumerate() {
            if y < 0 || y as usize >= classes {
                return Err(Error::format(at + 4 * i as u64, format!("label {y} outside 0..{classes}")));
            }
            labels.push(y as usize);
        }
        frames.push(MultiModalBatch { x2d, x3d, labels });
    }
    r.finish()?;
    Ok(Dataset { classes, frames })
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    write_file(path, &encode_dataset(data)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioSpec {
        ScenarioSpec {
            points: 40,
            source_frames: 6,
            target_frames: 3,
            ..ScenarioSpec::default()
        }
    }

    #[test]
    fn scan_order_groups_classes_without_changing_the_points() {
        let sorted = ScenarioSpec { scan_coherence: 1.0, ..small() };
        let shuffled = ScenarioSpec { scan_coherence: 0.0, ..small() };
        let a = generate(&sorted, Domain::Source).unwrap();
        let b = generate(&shuffled, Domain::Source).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert!(fa.labels.windows(2).all(|w| w[0] <= w[1]));
            let mut la = fa.labels.clone();
            let mut lb = fb.labels.clone();
            la.sort_unstable();
            lb.sort_unstable();
            assert_eq!(la, lb);
        }
        assert!(b.frames.iter().any(|f| f.labels.windows(2).any(|w| w[0] > w[1])));
    }

    #[test]
    fn generation_is_pure() {
        let spec = small();
        assert_eq!(generate(&spec, Domain::Target).unwrap(), generate(&spec, Domain::Target).unwrap());
        let other = ScenarioSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate(&spec, Domain::Source).unwrap(), generate(&other, Domain::Source).unwrap());
    }

    #[test]
    fn identity_target_continues_the_source_stream() {
        let spec = ScenarioSpec {
            points: 30,
            source_frames: 4,
            target_frames: 2,
            ..ScenarioSpec::unshifted()
        };
        let target = generate(&spec, Domain::Target).unwrap();
        let longer = ScenarioSpec {
            source_frames: 6,
            ..spec.clone()
        };
        let source = generate(&longer, Domain::Source).unwrap();
        assert_eq!(target.frames[..], source.frames[4..]);
    }

    #[test]
    fn shifted_target_differs_only_in_features() {
        let spec = small();
        let target = generate(&spec, Domain::Target).unwrap();
        let plain = generate(&ScenarioSpec { shift2d: ModalityShift::identity(), shift3d: ModalityShift::identity(), corrupt2d: 0.0, ..spec }, Domain::Target).unwrap();
        for (a, b) in target.frames.iter().zip(&plain.frames) {
            assert_eq!(a.labels, b.labels);
            assert_ne!(a.x2d, b.x2d);
        }
    }

    #[test]
    fn presets_validate_and_unknown_names_fail() {
        for name in PRESETS {
            let spec = ScenarioSpec::preset(name).unwrap();
            spec.validate().unwrap();
            assert_eq!((spec.classes, spec.f2, spec.f3, spec.points), (6, 16, 12, 256));
            assert_eq!((spec.source_frames, spec.target_frames), (200, 100));
        }
        assert!(matches!(ScenarioSpec::preset("mars"), Err(Error::Config(_))));
        let bad = ScenarioSpec {
            shift2d: ModalityShift { scale_min: 0.0, ..ModalityShift::identity() },
            ..small()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dataset_round_trip_and_corruption() {
        let data = generate(&small(), Domain::Target).unwrap();
        let bytes = encode_dataset(&data).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back, data);
        assert_eq!(encode_dataset(&back).unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[2] = b'!';
        assert!(matches!(decode_dataset(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(decode_dataset(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[5] = 2; // two classes cannot hold the stored labels
        assert!(decode_dataset(&bad).is_err());
    }
}
