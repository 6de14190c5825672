//! Single-image, single-location localized noise generation.
//!
//! The attack replaces an s-by-s window of the image with a noise patch and
//! ascends the decoupled pre-softmax objective
//! `logit(target) - logit(reference)` by updating only the patch values.
//! The reference class is by default the current argmax (excluding the
//! target when the target leads); it can be pinned to the clean source
//! class instead. Network-domain patches take any finite value; image-domain
//! patches are clipped to `[0, 1]` after every step.

pub mod patch_io;

use crate::error::{Error, Result};
use crate::net::{argmax, softmax, Network};
use crate::rng;
use crate::tensor::{Image, Scalar, Tensor, IMAGE_CHANNELS};
use rand::Rng;

/// Whether patch values are confined to the image's dynamic range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDomain {
    /// Unrestricted finite values.
    Network,
    /// Values clipped to `[0, 1]` after each gradient step.
    Image,
}

impl NoiseDomain {
    pub fn label(&self) -> &'static str {
        match self {
            NoiseDomain::Network => "network",
            NoiseDomain::Image => "image",
        }
    }
}

impl std::str::FromStr for NoiseDomain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "network" => Ok(NoiseDomain::Network),
            "image" => Ok(NoiseDomain::Image),
            other => Err(Error::invalid("domain", format!("unknown domain `{other}`"))),
        }
    }
}

/// A square noise block.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch<T> {
    values: Tensor<T>,
    domain: NoiseDomain,
}

impl<T: Scalar> Patch<T> {
    pub fn new(values: Tensor<T>, domain: NoiseDomain) -> Result<Self> {
        let shape = values.shape();
        if shape.len() != 3 || shape[0] != shape[1] || shape[2] != IMAGE_CHANNELS {
            return Err(Error::invalid(
                "patch",
                format!("values must be square [s, s, {IMAGE_CHANNELS}], got {shape:?}"),
            ));
        }
        values.ensure_finite("patch values")?;
        if domain == NoiseDomain::Image {
            let ok = values.data().iter().all(|v| *v >= T::zero() && *v <= T::one());
            if !ok {
                return Err(Error::invalid("patch", "image-domain values must lie in [0, 1]"));
            }
        }
        Ok(Patch { values, domain })
    }

    pub fn size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn domain(&self) -> NoiseDomain {
        self.domain
    }
}

/// Top-left corner of the patch window inside an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PatchLocation {
    pub row: usize,
    pub col: usize,
}

impl PatchLocation {
    pub fn new(row: usize, col: usize) -> Self {
        PatchLocation { row, col }
    }

    /// The patch window `[row, row+s) x [col, col+s)` must lie inside `h x w`.
    pub fn validate(&self, h: usize, w: usize, s: usize) -> Result<()> {
        if s == 0 || s > h || s > w || self.row > h - s || self.col > w - s {
            return Err(Error::invalid(
                "location",
                format!("patch of size {s} at ({}, {}) exceeds {h}x{w} image", self.row, self.col),
            ));
        }
        Ok(())
    }

    /// The four corner placements for an `s`-sized patch in an `h x w` image.
    pub fn corners(h: usize, w: usize, s: usize) -> [PatchLocation; 4] {
        [
            PatchLocation::new(0, 0),
            PatchLocation::new(0, w - s),
            PatchLocation::new(h - s, 0),
            PatchLocation::new(h - s, w - s),
        ]
    }
}

/// How the patch values start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchInit {
    #[default]
    Zero,
    /// Uniform random in `[0, 1]`, seeded.
    Uniform,
}

/// Which class the objective pushes away from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePolicy {
    /// Recompute per iteration: current argmax, or the runner-up when the
    /// argmax is the target.
    #[default]
    ArgmaxPerIter,
    /// Always the clean image's source class.
    FixedSource,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackConfig {
    /// Gradient-ascent step size.
    pub step_size: f64,
    /// Stop once the target probability reaches this value.
    pub target_confidence: f64,
    pub max_iterations: usize,
    pub patch_size: usize,
    pub init: PatchInit,
    pub reference: ReferencePolicy,
    pub seed: u64,
    /// Max number of patch min/max bound samples kept for auditing.
    pub audit_samples: usize,
}

impl AttackConfig {
    /// Defaults for the given domain; unrestricted noise takes larger steps.
    pub fn default_for(domain: NoiseDomain) -> Self {
        AttackConfig {
            step_size: match domain {
                NoiseDomain::Network => 0.05,
                NoiseDomain::Image => 0.01,
            },
            target_confidence: 0.9,
            max_iterations: 10_000,
            patch_size: 5,
            init: PatchInit::Zero,
            reference: ReferencePolicy::ArgmaxPerIter,
            seed: 0,
            audit_samples: 100,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("step_size", "must be finite and non-negative"));
        }
        if !(self.target_confidence > 0.0 && self.target_confidence <= 1.0) {
            return Err(Error::invalid("target_confidence", "must lie in (0, 1]"));
        }
        if self.patch_size == 0 {
            return Err(Error::invalid("patch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Success tiers, nested from weakest to strongest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Failed,
    /// Top-1 differs from the source class.
    Misclassified,
    /// Target is the top-1 class.
    Argmax,
    /// Target probability reached the configured confidence.
    Confident,
}

impl Outcome {
    pub fn label(&self) -> &'static str {
        match self {
            Outcome::Failed => "failed",
            Outcome::Misclassified => "misclassified",
            Outcome::Argmax => "argmax",
            Outcome::Confident => "confident",
        }
    }
}

/// Patch bounds observed after one iteration's clip step.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct BoundsSample {
    pub iteration: usize,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone)]
pub struct AttackResult<T> {
    pub patch: Patch<T>,
    /// Composed input at the best-tier iterate. Pixels outside the patch
    /// window are bit-identical to the clean image.
    pub noised: Tensor<T>,
    /// Total update steps performed.
    pub iterations: usize,
    /// Step index at which the reported tier was first reached.
    pub best_iteration: usize,
    pub outcome: Outcome,
    /// Probabilities at the best-tier iterate.
    pub p_target: T,
    pub p_source: T,
    pub source_class: usize,
    pub target_class: usize,
    /// Sampled patch value bounds, one entry per audited iteration.
    pub audit: Vec<BoundsSample>,
}

/// Replace the patch window of `image` with the patch values.
///
/// Pure replacement: every pixel outside the window is copied bit-exactly,
/// and no clipping is applied to the patch values.
pub fn apply_patch<T: Scalar>(image: &Image<T>, patch: &Patch<T>, loc: PatchLocation) -> Result<Tensor<T>> {
    loc.validate(image.height(), image.width(), patch.size())?;
    let mut out = image.tensor().clone();
    write_window(&mut out, patch.values().data(), patch.size(), loc);
    Ok(out)
}

/// Overwrite the window at `loc` with `values` (`[s, s, c]`, row-major).
fn write_window<T: Scalar>(out: &mut Tensor<T>, values: &[T], s: usize, loc: PatchLocation) {
    let w = out.shape()[1];
    let c = out.shape()[2];
    for dy in 0..s {
        let src = &values[dy * s * c..(dy + 1) * s * c];
        let dst_off = ((loc.row + dy) * w + loc.col) * c;
        out.data_mut()[dst_off..dst_off + s * c].copy_from_slice(src);
    }
}

/// Extract the `[s, s, c]` window of a `[h, w, c]` tensor at `loc`.
fn read_window<T: Scalar>(x: &Tensor<T>, s: usize, loc: PatchLocation) -> Vec<T> {
    let w = x.shape()[1];
    let c = x.shape()[2];
    let mut out = Vec::with_capacity(s * s * c);
    for dy in 0..s {
        let off = ((loc.row + dy) * w + loc.col) * c;
        out.extend_from_slice(&x.data()[off..off + s * c]);
    }
    out
}

/// The decoupled pre-softmax objective `logit(target) - logit(reference)`.
pub fn objective<T: Scalar>(
    net: &Network<T>,
    noised: &Tensor<T>,
    target: usize,
    reference: usize,
) -> Result<T> {
    let classes = net.num_classes();
    if target >= classes || reference >= classes {
        return Err(Error::invalid(
            "class",
            format!("target {target} / reference {reference} out of range for {classes} classes"),
        ));
    }
    if target == reference {
        return Err(Error::invalid("reference", "target and reference must differ"));
    }
    let logits = net.forward_tensor(noised)?;
    Ok(logits.data()[target] - logits.data()[reference])
}

/// The class the objective pushes away from: the current argmax, or the
/// runner-up when the argmax is the target. Never returns the target.
pub fn select_reference<T: Scalar>(probs: &[T], target: usize) -> Result<usize> {
    if probs.len() < 2 {
        return Err(Error::invalid("probs", "need at least 2 classes"));
    }
    if target >= probs.len() {
        return Err(Error::invalid("target", "target class out of range"));
    }
    let top = argmax(probs);
    if top != target {
        return Ok(top);
    }
    let mut best = usize::MAX;
    for (i, v) in probs.iter().enumerate() {
        if i == target {
            continue;
        }
        if best == usize::MAX || *v > probs[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Zero or seeded-uniform initial patch values for a domain.
pub fn init_patch<T: Scalar>(domain: NoiseDomain, s: usize, seed: u64, init: PatchInit) -> Result<Patch<T>> {
    if s == 0 {
        return Err(Error::invalid("patch_size", "must be positive"));
    }
    let shape = [s, s, IMAGE_CHANNELS];
    let values = match init {
        PatchInit::Zero => Tensor::zeros(&shape),
        PatchInit::Uniform => {
            let mut r = rng::substream(seed, "patch/init");
            let n = s * s * IMAGE_CHANNELS;
            let data = (0..n).map(|_| T::from_f64(r.gen_range(0.0..1.0))).collect();
            Tensor::from_vec(&shape, data)?
        }
    };
    Patch::new(values, domain)
}

fn tier<T: Scalar>(probs: &[T], source: usize, target: usize, confidence: T) -> Outcome {
    let top = argmax(probs);
    if top == target {
        if probs[target] >= confidence {
            Outcome::Confident
        } else {
            Outcome::Argmax
        }
    } else if top != source {
        Outcome::Misclassified
    } else {
        Outcome::Failed
    }
}

struct Snapshot<T> {
    outcome: Outcome,
    iteration: usize,
    delta: Vec<T>,
    noised: Tensor<T>,
    p_target: T,
    p_source: T,
}

/// Iterative localized noising of a single image at a single location.
///
/// Each step composes the current patch into the image, takes one gradient
/// ascent step on the decoupled objective restricted to the patch window,
/// clips to `[0, 1]` in the image domain, and re-evaluates. Stops when the
/// target probability reaches the configured confidence or at the iteration
/// cap, reporting the best tier reached at any iterate.
pub fn attack_single<T: Scalar>(
    net: &Network<T>,
    image: &Image<T>,
    target: usize,
    loc: PatchLocation,
    domain: NoiseDomain,
    cfg: &AttackConfig,
) -> Result<AttackResult<T>> {
    cfg.validate()?;
    let classes = net.num_classes();
    if target >= classes {
        return Err(Error::invalid("target", format!("class {target} out of range for {classes} classes")));
    }
    let s = cfg.patch_size;
    loc.validate(image.height(), image.width(), s)?;
    let (source, _) = net.predict(image)?;
    if source == target {
        return Err(Error::invalid("target", format!("image is already classified as class {target}")));
    }

    let confidence = T::from_f64(cfg.target_confidence);
    let step = T::from_f64(cfg.step_size);
    let mut delta = init_patch::<T>(domain, s, cfg.seed, cfg.init)?.values().data().to_vec();

    let mut noised = image.tensor().clone();
    write_window(&mut noised, &delta, s, loc);
    let mut probs = softmax(&net.forward_tensor(&noised)?)?;

    let snapshot_of = |iteration: usize, delta: &[T], noised: &Tensor<T>, probs: &[T]| Snapshot {
        outcome: tier(probs, source, target, confidence),
        iteration,
        delta: delta.to_vec(),
        noised: noised.clone(),
        p_target: probs[target],
        p_source: probs[source],
    };
    let mut best = snapshot_of(0, &delta, &noised, probs.data());

    let audit_stride = (cfg.max_iterations / cfg.audit_samples.max(1)).max(1);
    let mut audit = Vec::new();
    let mut class_weights = vec![T::zero(); classes];
    let mut iterations = 0;

    for iteration in 1..=cfg.max_iterations {
        let reference = match cfg.reference {
            ReferencePolicy::ArgmaxPerIter => select_reference(probs.data(), target)?,
            ReferencePolicy::FixedSource => source,
        };
        class_weights.iter_mut().for_each(|v| *v = T::zero());
        class_weights[target] = T::one();
        class_weights[reference] = class_weights[reference] - T::one();

        let grad = net.input_gradient(&noised, &class_weights)?;
        grad.ensure_finite("attack gradient")?;
        let grad_window = read_window(&grad, s, loc);
        for (d, g) in delta.iter_mut().zip(&grad_window) {
            *d = *d + step * *g;
        }
        if domain == NoiseDomain::Image {
            for d in delta.iter_mut() {
                *d = d.max(T::zero()).min(T::one());
            }
        }
        write_window(&mut noised, &delta, s, loc);
        probs = softmax(&net.forward_tensor(&noised)?)?;
        iterations = iteration;

        if iteration % audit_stride == 0 || iteration == cfg.max_iterations {
            let min = delta.iter().copied().fold(T::infinity(), T::min);
            let max = delta.iter().copied().fold(T::neg_infinity(), T::max);
            audit.push(BoundsSample { iteration, min: min.as_f64(), max: max.as_f64() });
        }

        let now = tier(probs.data(), source, target, confidence);
        if now > best.outcome {
            best = snapshot_of(iteration, &delta, &noised, probs.data());
        }
        if now == Outcome::Confident {
            break;
        }
    }

    let patch_values = Tensor::from_vec(&[s, s, IMAGE_CHANNELS], best.delta.clone())?;
    Ok(AttackResult {
        patch: Patch::new(patch_values, domain)?,
        noised: best.noised,
        iterations,
        best_iteration: best.iteration,
        outcome: best.outcome,
        p_target: best.p_target,
        p_source: best.p_source,
        source_class: source,
        target_class: target,
        audit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::LayerSpec;

    fn image_from_fn(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> Image<f32> {
        let mut t = Tensor::zeros(&[h, w, 3]);
        for row in 0..h {
            for col in 0..w {
                for ch in 0..3 {
                    let i = t.idx3(row, col, ch);
                    t.data_mut()[i] = f(row, col, ch);
                }
            }
        }
        Image::new(t).unwrap()
    }

    #[test]
    fn apply_patch_is_pure_replacement() {
        let img = image_from_fn(8, 8, |r, c, ch| ((r * 8 + c + ch) % 10) as f32 / 10.0 + 0.05);
        let patch = init_patch::<f32>(NoiseDomain::Network, 5, 0, PatchInit::Zero).unwrap();
        let out = apply_patch(&img, &patch, PatchLocation::new(0, 0)).unwrap();
        let mut differing = 0;
        for row in 0..8 {
            for col in 0..8 {
                for ch in 0..3 {
                    let i = out.idx3(row, col, ch);
                    let inside = row < 5 && col < 5;
                    if out.data()[i] != img.tensor().data()[i] {
                        differing += 1;
                        assert!(inside, "difference outside the window at ({row},{col},{ch})");
                    } else if inside {
                        panic!("window pixel unexpectedly equals a nonzero image pixel");
                    }
                }
            }
        }
        assert_eq!(differing, 5 * 5 * 3);
    }

    #[test]
    fn apply_patch_identity_when_patch_equals_region() {
        let img = image_from_fn(8, 8, |r, c, ch| ((r + 2 * c + 3 * ch) % 7) as f32 / 7.0);
        let region = read_window(img.tensor(), 4, PatchLocation::new(2, 3));
        let values = Tensor::from_vec(&[4, 4, 3], region).unwrap();
        let patch = Patch::new(values, NoiseDomain::Image).unwrap();
        let out = apply_patch(&img, &patch, PatchLocation::new(2, 3)).unwrap();
        assert_eq!(out.data(), img.tensor().data());
    }

    #[test]
    fn apply_patch_keeps_network_domain_values_unclipped() {
        let img = image_from_fn(8, 8, |_, _, _| 0.5);
        let mut values = Tensor::zeros(&[3, 3, 3]);
        values.data_mut()[0] = 7.0;
        let patch = Patch::new(values, NoiseDomain::Network).unwrap();
        let out = apply_patch(&img, &patch, PatchLocation::new(1, 1)).unwrap();
        assert!(out.data().contains(&7.0));
    }

    #[test]
    fn apply_patch_rejects_out_of_bounds() {
        let img = image_from_fn(8, 8, |_, _, _| 0.5);
        let patch = init_patch::<f32>(NoiseDomain::Image, 5, 0, PatchInit::Zero).unwrap();
        assert!(apply_patch(&img, &patch, PatchLocation::new(4, 0)).is_err());
        assert!(apply_patch(&img, &patch, PatchLocation::new(0, 6)).is_err());
    }

    #[test]
    fn image_domain_patch_rejects_out_of_range_values() {
        let mut values = Tensor::zeros(&[3, 3, 3]);
        values.data_mut()[5] = 1.5;
        assert!(Patch::new(values.clone(), NoiseDomain::Image).is_err());
        assert!(Patch::new(values, NoiseDomain::Network).is_ok());
    }

    #[test]
    fn select_reference_prefers_argmax() {
        assert_eq!(select_reference(&[0.7f32, 0.2, 0.1], 2).unwrap(), 0);
    }

    #[test]
    fn select_reference_excludes_target() {
        // argmax is the target: runner-up wins, ties to the lowest index
        assert_eq!(select_reference(&[0.1f32, 0.8, 0.1], 1).unwrap(), 0);
        assert_eq!(select_reference(&[0.5f32, 0.5], 0).unwrap(), 1);
    }

    #[test]
    fn select_reference_rejects_single_class() {
        assert!(select_reference(&[1.0f32], 0).is_err());
    }

    #[test]
    fn objective_is_antisymmetric_and_matches_forward(
    ) {
        let net = Network::<f32>::build(
            [8, 8, 3],
            vec![
                LayerSpec::Conv2d { kernel: 3, out_channels: 4, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { out_features: 4 },
            ],
            21,
        )
        .unwrap();
        let img = image_from_fn(8, 8, |r, c, ch| ((r * 3 + c * 5 + ch) % 11) as f32 / 11.0);
        let x = img.tensor();
        let ab = objective(&net, x, 1, 3).unwrap();
        let ba = objective(&net, x, 3, 1).unwrap();
        assert!((ab + ba).abs() < 1e-6);
        let logits = net.forward_tensor(x).unwrap();
        let manual = logits.data()[1] - logits.data()[3];
        assert!((ab - manual).abs() < 1e-6);
        assert!(objective(&net, x, 2, 2).is_err());
        assert!(objective(&net, x, 9, 0).is_err());
    }

    #[test]
    fn init_patch_zero_and_seeded_uniform() {
        let z = init_patch::<f32>(NoiseDomain::Network, 5, 3, PatchInit::Zero).unwrap();
        assert!(z.values().data().iter().all(|v| *v == 0.0));
        let a = init_patch::<f32>(NoiseDomain::Image, 5, 3, PatchInit::Uniform).unwrap();
        let b = init_patch::<f32>(NoiseDomain::Image, 5, 3, PatchInit::Uniform).unwrap();
        assert_eq!(a.values().data(), b.values().data());
        assert!(a.values().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn outcome_tiers_are_ordered() {
        assert!(Outcome::Confident > Outcome::Argmax);
        assert!(Outcome::Argmax > Outcome::Misclassified);
        assert!(Outcome::Misclassified > Outcome::Failed);
    }
}
