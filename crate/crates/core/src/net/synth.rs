//! Hermetic procedurally generated shape dataset.
//!
//! Each class is one colored geometric shape drawn over a low-amplitude
//! noise background. Shapes are confined to the middle 60% of the image so
//! that corner patches never cover the main object. Generation is a pure
//! function of `(seed, split, class, index)`, which lets tests re-derive the
//! exact geometry of any image and check pixel membership directly.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Image, Scalar, Tensor, IMAGE_CHANNELS};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    pub fn label(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }
}

/// Images plus labels for one split.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    images: Vec<Image<T>>,
    labels: Vec<usize>,
    split: Split,
    num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Vec<Image<T>>, labels: Vec<usize>, split: Split, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid("labels", "one label required per image"));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::invalid("labels", format!("label {bad} >= {num_classes} classes")));
        }
        Ok(Dataset { images, labels, split, num_classes })
    }

    pub fn images(&self) -> &[Image<T>] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// A copy with only the first `n` images (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset<T> {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            split: self.split,
            num_classes: self.num_classes,
        }
    }
}

pub const MAX_CLASSES: usize = 16;

/// The sixteen shape families, one per possible class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    TriangleUp,
    Cross,
    Ring,
    Diamond,
    HBar,
    VBar,
    Frame,
    XCross,
    HalfDisk,
    TwoDots,
    TriangleDown,
    Stripes,
    LShape,
    Dot,
}

const SHAPES: [ShapeKind; MAX_CLASSES] = [
    ShapeKind::Disk,
    ShapeKind::Square,
    ShapeKind::TriangleUp,
    ShapeKind::Cross,
    ShapeKind::Ring,
    ShapeKind::Diamond,
    ShapeKind::HBar,
    ShapeKind::VBar,
    ShapeKind::Frame,
    ShapeKind::XCross,
    ShapeKind::HalfDisk,
    ShapeKind::TwoDots,
    ShapeKind::TriangleDown,
    ShapeKind::Stripes,
    ShapeKind::LShape,
    ShapeKind::Dot,
];

/// Geometry and palette of one generated image.
#[derive(Debug, Clone, Copy)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Center in pixel coordinates.
    pub cx: f64,
    pub cy: f64,
    /// Half-extent in pixels.
    pub radius: f64,
    pub color: [f64; 3],
    pub bg_level: f64,
    pub noise_amp: f64,
}

impl ShapeSpec {
    /// Whether the pixel at `(row, col)` (by its center) is part of the shape.
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let dy = (row as f64 + 0.5) - self.cy;
        let dx = (col as f64 + 0.5) - self.cx;
        let r = self.radius;
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::TriangleUp => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
            ShapeKind::Cross => {
                (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r)
            }
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (r * 0.55) * (r * 0.55)
            }
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
            ShapeKind::HBar => dy.abs() <= r * 0.4 && dx.abs() <= r,
            ShapeKind::VBar => dx.abs() <= r * 0.4 && dy.abs() <= r,
            ShapeKind::Frame => {
                let m = dx.abs().max(dy.abs());
                m <= r && m >= r * 0.55
            }
            ShapeKind::XCross => {
                dx.abs().max(dy.abs()) <= r
                    && ((dx - dy).abs() <= r * 0.45 || (dx + dy).abs() <= r * 0.45)
            }
            ShapeKind::HalfDisk => dx * dx + dy * dy <= r * r && dy >= 0.0,
            ShapeKind::TwoDots => {
                let rr = r * 0.5;
                let left = (dx + rr) * (dx + rr) + dy * dy <= rr * rr;
                let right = (dx - rr) * (dx - rr) + dy * dy <= rr * rr;
                left || right
            }
            ShapeKind::TriangleDown => dy >= -r && dy <= r && dx.abs() <= (r - dy) * 0.5,
            ShapeKind::Stripes => {
                dx.abs() <= r && dy.abs() <= r && (((dy + r) / (r * 0.5)).floor() as i64) % 2 == 0
            }
            ShapeKind::LShape => {
                (dx <= -r * 0.4 && dx >= -r && dy.abs() <= r)
                    || (dy >= r * 0.2 && dy <= r && dx.abs() <= r)
            }
            ShapeKind::Dot => dx * dx + dy * dy <= (r * 0.5) * (r * 0.5),
        }
    }
}

/// Deterministic geometry for image `index` of `class` in `split`.
pub fn shape_spec(seed: u64, split: Split, class: usize, index: usize, image_size: usize) -> ShapeSpec {
    let label = format!("synth/{}/{}/{}", split.label(), class, index);
    let mut r = rng::substream(seed, &label);
    let s = image_size as f64;
    // Shape fits entirely inside the middle 60% box [0.2 s, 0.8 s].
    let radius = r.gen_range(0.12 * s..0.20 * s);
    let lo = 0.2 * s + radius;
    let hi = 0.8 * s - radius;
    let cx = r.gen_range(lo..hi);
    let cy = r.gen_range(lo..hi);
    let color = [
        r.gen_range(0.60..1.0),
        r.gen_range(0.60..1.0),
        r.gen_range(0.60..1.0),
    ];
    let bg_level = r.gen_range(0.10..0.40);
    ShapeSpec {
        kind: SHAPES[class],
        cx,
        cy,
        radius,
        color,
        bg_level,
        noise_amp: 0.06,
    }
}

/// Render one image from its spec. Background noise comes from its own
/// substream so geometry draws stay stable if the noise model changes.
pub fn render_image<T: Scalar>(
    seed: u64,
    split: Split,
    class: usize,
    index: usize,
    image_size: usize,
    spec: &ShapeSpec,
) -> Image<T> {
    let label = format!("synth-bg/{}/{}/{}", split.label(), class, index);
    let mut noise = rng::substream(seed, &label);
    let mut data = vec![T::zero(); image_size * image_size * IMAGE_CHANNELS];
    for row in 0..image_size {
        for col in 0..image_size {
            let off = (row * image_size + col) * IMAGE_CHANNELS;
            if spec.contains(row, col) {
                for ch in 0..IMAGE_CHANNELS {
                    data[off + ch] = T::from_f64(spec.color[ch]);
                }
            } else {
                let u: f64 = noise.gen_range(-1.0..1.0);
                let v = (spec.bg_level + u * spec.noise_amp).clamp(0.0, 1.0);
                for ch in 0..IMAGE_CHANNELS {
                    data[off + ch] = T::from_f64(v);
                }
            }
        }
    }
    let tensor = Tensor::from_vec(&[image_size, image_size, IMAGE_CHANNELS], data)
        .expect("render size");
    Image::new(tensor).expect("rendered pixels are clamped to [0,1]")
}

/// Generate a balanced synthetic dataset, class-interleaved so any prefix of
/// the image list spans all classes roughly evenly.
pub fn synth_dataset<T: Scalar>(
    seed: u64,
    n_per_class: usize,
    num_classes: usize,
    image_size: usize,
    split: Split,
) -> Result<Dataset<T>> {
    if !(2..=MAX_CLASSES).contains(&num_classes) {
        return Err(Error::invalid("num_classes", format!("must be in [2, {MAX_CLASSES}]")));
    }
    if image_size < 16 {
        return Err(Error::invalid("image_size", "must be at least 16"));
    }
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class", "must be positive"));
    }
    let mut images = Vec::with_capacity(n_per_class * num_classes);
    let mut labels = Vec::with_capacity(n_per_class * num_classes);
    for index in 0..n_per_class {
        for class in 0..num_classes {
            let spec = shape_spec(seed, split, class, index, image_size);
            images.push(render_image(seed, split, class, index, image_size, &spec));
            labels.push(class);
        }
    }
    Dataset::new(images, labels, split, num_classes)
}
