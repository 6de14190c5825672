//! Does the network "see" the patch? Gradient-fix maps and windowed
//! overlap statistics.
//!
//! A fix map accumulates the absolute per-pixel updates of full-image
//! gradient steps applied to a noised input until its classification is
//! restored (towards the source class) or broken (away from the target
//! class). Window scoring then asks whether the most active patch-sized
//! window of the map overlaps the noise location.

use crate::attack::{apply_patch, NoiseDomain, Patch, PatchLocation};
use crate::error::{Error, Result};
use crate::net::{argmax, softmax, Network};
use crate::tensor::{Image, Scalar, Tensor};
use rayon::prelude::*;

/// Direction of the fixing optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixMode {
    /// Ascend the source-class logit until the argmax is the source again.
    TowardsSource,
    /// Descend the target-class logit until the argmax leaves the target.
    AwayFromTarget,
}

impl FixMode {
    pub fn label(&self) -> &'static str {
        match self {
            FixMode::TowardsSource => "towards_source",
            FixMode::AwayFromTarget => "away_from_target",
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FixConfig {
    pub step_size: f64,
    pub max_iterations: usize,
    /// Clamp the image to `[0, 1]` after each step. Off by default: the fix
    /// follows the raw gradient trajectory.
    pub clip: bool,
}

impl Default for FixConfig {
    fn default() -> Self {
        FixConfig { step_size: 0.01, max_iterations: 2000, clip: false }
    }
}

/// Accumulated absolute update magnitude per pixel, channel-summed.
#[derive(Debug, Clone)]
pub struct FixMap<T> {
    /// `[h, w]`, non-negative.
    pub values: Tensor<T>,
    pub mode: FixMode,
    pub iterations: usize,
    /// Whether the desired outcome was reached before the iteration cap.
    pub fixed: bool,
    pub final_class: usize,
}

/// Accumulate full-image gradient steps until the classification flips.
///
/// Preconditions: `noised` currently classifies as `target`, and
/// `source != target`.
pub fn gradient_fix<T: Scalar>(
    net: &Network<T>,
    noised: &Tensor<T>,
    mode: FixMode,
    source: usize,
    target: usize,
    cfg: &FixConfig,
) -> Result<FixMap<T>> {
    let classes = net.num_classes();
    if source >= classes || target >= classes {
        return Err(Error::invalid("class", format!("source {source} / target {target} out of range")));
    }
    if source == target {
        return Err(Error::invalid("source", "source and target must differ"));
    }
    if !(cfg.step_size >= 0.0 && cfg.step_size.is_finite()) {
        return Err(Error::invalid("step_size", "must be finite and non-negative"));
    }
    let (mut current, _) = net.predict_tensor(noised)?;
    if current != target {
        return Err(Error::invalid(
            "noised",
            format!("input classifies as {current}, not the target {target}"),
        ));
    }

    let [h, w, c] = net.input_shape();
    let mut map = Tensor::<T>::zeros(&[h, w]);
    if cfg.step_size == 0.0 {
        return Ok(FixMap { values: map, mode, iterations: 0, fixed: false, final_class: current });
    }

    // Fold the optimization direction into the step: ascend the source
    // logit, or descend the target logit.
    let (class, step) = match mode {
        FixMode::TowardsSource => (source, T::from_f64(cfg.step_size)),
        FixMode::AwayFromTarget => (target, -T::from_f64(cfg.step_size)),
    };
    let mut class_weights = vec![T::zero(); classes];
    class_weights[class] = T::one();

    let mut x = noised.clone();
    let mut iterations = 0;
    let mut fixed = false;
    while iterations < cfg.max_iterations {
        let grad = net.input_gradient(&x, &class_weights)?;
        grad.ensure_finite("fix gradient")?;
        iterations += 1;
        for row in 0..h {
            for col in 0..w {
                let off = (row * w + col) * c;
                let mut acc = T::zero();
                for ch in 0..c {
                    let delta = step * grad.data()[off + ch];
                    x.data_mut()[off + ch] = x.data()[off + ch] + delta;
                    acc = acc + delta.abs();
                }
                let mi = row * w + col;
                map.data_mut()[mi] = map.data()[mi] + acc;
            }
        }
        if cfg.clip {
            for v in x.data_mut() {
                *v = v.max(T::zero()).min(T::one());
            }
        }
        let probs = softmax(&net.forward_tensor(&x)?)?;
        current = argmax(probs.data());
        let done = match mode {
            FixMode::TowardsSource => current == source,
            FixMode::AwayFromTarget => current != target,
        };
        if done {
            fixed = true;
            break;
        }
    }
    Ok(FixMap { values: map, mode, iterations, fixed, final_class: current })
}

/// MAX and SUM scores of every patch-sized window (stride 1).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowScores<T> {
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Row-major maximum value per window.
    pub max_scores: Vec<T>,
    /// Row-major sum of values per window.
    pub sum_scores: Vec<T>,
}

/// Exhaustive stride-1 window scan of a `[h, w]` map.
pub fn window_scores<T: Scalar>(map: &Tensor<T>, s: usize) -> Result<WindowScores<T>> {
    let shape = map.shape();
    if shape.len() != 2 {
        return Err(Error::invalid("map", format!("expected [h, w] map, got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    if s == 0 || s > h || s > w {
        return Err(Error::invalid("window", format!("window {s} does not fit in {h}x{w}")));
    }
    let (gh, gw) = (h - s + 1, w - s + 1);
    let mut max_scores = Vec::with_capacity(gh * gw);
    let mut sum_scores = Vec::with_capacity(gh * gw);
    for gr in 0..gh {
        for gc in 0..gw {
            let mut maxv = map.data()[gr * w + gc];
            let mut sum = T::zero();
            for dy in 0..s {
                let off = (gr + dy) * w + gc;
                for dx in 0..s {
                    let v = map.data()[off + dx];
                    if v > maxv {
                        maxv = v;
                    }
                    sum = sum + v;
                }
            }
            max_scores.push(maxv);
            sum_scores.push(sum);
        }
    }
    Ok(WindowScores { grid_rows: gh, grid_cols: gw, max_scores, sum_scores })
}

/// Whether two `s`-sized windows share at least one pixel.
fn windows_overlap(a: PatchLocation, b: PatchLocation, s: usize) -> bool {
    a.row < b.row + s && b.row < a.row + s && a.col < b.col + s && b.col < a.col + s
}

/// Does the top-scoring window (under MAX and under SUM) overlap the noise
/// location? Argmax ties break to the lowest row-major index.
pub fn top_window_overlap<T: Scalar>(
    map: &Tensor<T>,
    noise_loc: PatchLocation,
    s: usize,
) -> Result<(bool, bool)> {
    let scores = window_scores(map, s)?;
    noise_loc.validate(map.shape()[0], map.shape()[1], s)?;
    let top_max = argmax(&scores.max_scores);
    let top_sum = argmax(&scores.sum_scores);
    let to_loc = |idx: usize| PatchLocation::new(idx / scores.grid_cols, idx % scores.grid_cols);
    Ok((
        windows_overlap(to_loc(top_max), noise_loc, s),
        windows_overlap(to_loc(top_sum), noise_loc, s),
    ))
}

/// One (patch, image, mode) fix evaluation.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PairRecord {
    pub patch_index: usize,
    pub domain: NoiseDomain,
    pub image_index: usize,
    pub mode: FixMode,
    pub overlap_max: bool,
    pub overlap_sum: bool,
    pub iterations: usize,
    pub fixed: bool,
}

/// Overlap fractions for one (domain, mode) table row.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SaliencyCell {
    pub domain: NoiseDomain,
    pub mode: FixMode,
    pub pairs: usize,
    pub frac_overlap_max: Option<f64>,
    pub frac_overlap_sum: Option<f64>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SaliencyStats {
    /// The four (domain, mode) rows, in table order.
    pub cells: Vec<SaliencyCell>,
    /// (patch, image) pairs skipped because the patch did not mislead the
    /// image to its target, or the image already classified as the target.
    pub excluded_pairs: usize,
    pub records: Vec<PairRecord>,
}

/// Run the full (patch x image) cross product of gradient fixes and report
/// how often the most active window overlaps the noise.
pub fn saliency_stats<T: Scalar>(
    net: &Network<T>,
    patches: &[(usize, Patch<T>)],
    images: &[Image<T>],
    loc: PatchLocation,
    cfg: &FixConfig,
) -> Result<SaliencyStats> {
    if patches.is_empty() || images.is_empty() {
        return Err(Error::invalid("inputs", "need at least one patch and one image"));
    }
    for (target, _) in patches {
        if *target >= net.num_classes() {
            return Err(Error::invalid("patches", format!("target {target} out of range")));
        }
    }

    struct PairOutput {
        records: Vec<PairRecord>,
        excluded: bool,
    }

    let pairs: Vec<(usize, usize)> = (0..patches.len())
        .flat_map(|p| (0..images.len()).map(move |i| (p, i)))
        .collect();

    let outputs: Result<Vec<PairOutput>> = pairs
        .par_iter()
        .map(|&(patch_index, image_index)| {
            let (target, patch) = &patches[patch_index];
            let image = &images[image_index];
            let (source, _) = net.predict(image)?;
            let noised = apply_patch(image, patch, loc)?;
            let (patched_class, _) = net.predict_tensor(&noised)?;
            if source == *target || patched_class != *target {
                return Ok(PairOutput { records: Vec::new(), excluded: true });
            }
            let mut records = Vec::with_capacity(2);
            for mode in [FixMode::TowardsSource, FixMode::AwayFromTarget] {
                let fix = gradient_fix(net, &noised, mode, source, *target, cfg)?;
                let (overlap_max, overlap_sum) =
                    top_window_overlap(&fix.values, loc, patch.size())?;
                records.push(PairRecord {
                    patch_index,
                    domain: patch.domain(),
                    image_index,
                    mode,
                    overlap_max,
                    overlap_sum,
                    iterations: fix.iterations,
                    fixed: fix.fixed,
                });
            }
            Ok(PairOutput { records, excluded: false })
        })
        .collect();
    let outputs = outputs?;

    let excluded_pairs = outputs.iter().filter(|o| o.excluded).count();
    let records: Vec<PairRecord> = outputs.into_iter().flat_map(|o| o.records).collect();
    if records.is_empty() {
        return Err(Error::invalid("inputs", "no (patch, image) pair was successfully misled"));
    }

    let mut cells = Vec::with_capacity(4);
    for domain in [NoiseDomain::Network, NoiseDomain::Image] {
        for mode in [FixMode::TowardsSource, FixMode::AwayFromTarget] {
            let subset: Vec<&PairRecord> = records
                .iter()
                .filter(|r| r.domain == domain && r.mode == mode)
                .collect();
            let n = subset.len();
            let frac = |f: fn(&PairRecord) -> bool| {
                if n == 0 {
                    None
                } else {
                    Some(subset.iter().filter(|r| f(r)).count() as f64 / n as f64)
                }
            };
            cells.push(SaliencyCell {
                domain,
                mode,
                pairs: n,
                frac_overlap_max: frac(|r| r.overlap_max),
                frac_overlap_sum: frac(|r| r.overlap_sum),
            });
        }
    }
    Ok(SaliencyStats { cells, excluded_pairs, records })
}
