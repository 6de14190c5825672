//! Robustness evaluation: location sweeps, cross-image transfer rates, and
//! source/target class-dependence matrices.
//!
//! Every cell of every report is reproducible through the public
//! `apply_patch` + `forward` + `softmax` path; the batch runners never take
//! a different numeric route. Parallel and sequential sweeps produce
//! identical reports because each cell is computed independently and merged
//! in row-major order.

use crate::attack::{apply_patch, NoiseDomain, Patch, PatchLocation};
use crate::error::{Error, Result};
use crate::net::{argmax, softmax, Dataset, Network, Split};
use crate::tensor::{Image, Scalar};
use rayon::prelude::*;

/// Confidence bar shared by the success tiers.
pub const CONFIDENT_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapCell<T> {
    pub grid_row: usize,
    pub grid_col: usize,
    /// Top-left pixel of the patch window for this cell.
    pub pixel_row: usize,
    pub pixel_col: usize,
    pub p_source: T,
    pub p_target: T,
    pub argmax_class: usize,
}

/// Per-location probabilities and argmax for one (image, patch) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapReport<T> {
    pub source_class: usize,
    pub target_class: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Row-major `grid_rows * grid_cols` cells.
    pub cells: Vec<HeatmapCell<T>>,
}

impl<T: Scalar> HeatmapReport<T> {
    /// Boolean map: the patched prediction is the target class.
    pub fn map_argmax_is_target(&self) -> Vec<bool> {
        self.cells.iter().map(|c| c.argmax_class == self.target_class).collect()
    }

    /// Boolean map: the patched prediction is still the source class.
    pub fn map_argmax_is_source(&self) -> Vec<bool> {
        self.cells.iter().map(|c| c.argmax_class == self.source_class).collect()
    }

    /// Boolean map: the patched prediction is neither source nor target.
    pub fn map_argmax_is_other(&self) -> Vec<bool> {
        self.cells
            .iter()
            .map(|c| c.argmax_class != self.source_class && c.argmax_class != self.target_class)
            .collect()
    }
}

/// Fractions over all sweep locations.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LocationRobustness {
    /// Locations where the target probability reached the confidence bar.
    pub frac_target_confident: f64,
    /// Locations where the prediction is not the source class.
    pub frac_not_source: f64,
}

fn sweep_positions(extent: usize, s: usize, stride: usize) -> Vec<usize> {
    (0..=extent - s).step_by(stride).collect()
}

/// Evaluate the model with the patch placed at every strided location.
pub fn location_sweep<T: Scalar>(
    net: &Network<T>,
    image: &Image<T>,
    patch: &Patch<T>,
    target: usize,
    stride: usize,
) -> Result<HeatmapReport<T>> {
    location_sweep_impl(net, image, patch, target, stride, false)
}

/// Same report as [`location_sweep`], computed cell-parallel.
pub fn location_sweep_parallel<T: Scalar>(
    net: &Network<T>,
    image: &Image<T>,
    patch: &Patch<T>,
    target: usize,
    stride: usize,
) -> Result<HeatmapReport<T>> {
    location_sweep_impl(net, image, patch, target, stride, true)
}

fn location_sweep_impl<T: Scalar>(
    net: &Network<T>,
    image: &Image<T>,
    patch: &Patch<T>,
    target: usize,
    stride: usize,
    parallel: bool,
) -> Result<HeatmapReport<T>> {
    if stride < 1 {
        return Err(Error::invalid("stride", "must be at least 1"));
    }
    if target >= net.num_classes() {
        return Err(Error::invalid("target", format!("class {target} out of range")));
    }
    let s = patch.size();
    PatchLocation::new(0, 0).validate(image.height(), image.width(), s)?;
    let (source, _) = net.predict(image)?;

    let rows = sweep_positions(image.height(), s, stride);
    let cols = sweep_positions(image.width(), s, stride);
    let coords: Vec<(usize, usize)> = (0..rows.len())
        .flat_map(|gr| (0..cols.len()).map(move |gc| (gr, gc)))
        .collect();

    let eval_cell = |&(gr, gc): &(usize, usize)| -> Result<HeatmapCell<T>> {
        let loc = PatchLocation::new(rows[gr], cols[gc]);
        let noised = apply_patch(image, patch, loc)?;
        let probs = softmax(&net.forward_tensor(&noised)?)?;
        Ok(HeatmapCell {
            grid_row: gr,
            grid_col: gc,
            pixel_row: loc.row,
            pixel_col: loc.col,
            p_source: probs.data()[source],
            p_target: probs.data()[target],
            argmax_class: argmax(probs.data()),
        })
    };

    let cells: Result<Vec<HeatmapCell<T>>> = if parallel {
        coords.par_iter().map(eval_cell).collect()
    } else {
        coords.iter().map(eval_cell).collect()
    };

    Ok(HeatmapReport {
        source_class: source,
        target_class: target,
        patch_size: s,
        stride,
        grid_rows: rows.len(),
        grid_cols: cols.len(),
        cells: cells?,
    })
}

/// Aggregate a sweep into location-robustness fractions.
pub fn location_robustness<T: Scalar>(report: &HeatmapReport<T>) -> LocationRobustness {
    let n = report.cells.len() as f64;
    let bar = T::from_f64(CONFIDENT_THRESHOLD);
    let confident = report.cells.iter().filter(|c| c.p_target >= bar).count();
    let not_source = report.cells.iter().filter(|c| c.argmax_class != report.source_class).count();
    LocationRobustness {
        frac_target_confident: confident as f64 / n,
        frac_not_source: not_source as f64 / n,
    }
}

/// One evaluated image in a transfer report.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferRecord<T> {
    pub image_index: usize,
    pub clean_class: usize,
    pub clean_prob: T,
    /// Clean prediction already equals the target; the image is excluded
    /// from the rate denominators.
    pub excluded: bool,
    pub patched_argmax: usize,
    pub p_target: T,
    pub p_source: T,
    pub confident: bool,
    pub argmax_target: bool,
    pub not_source: bool,
}

/// Nested cross-image success rates for one patch at one location.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport<T> {
    pub target_class: usize,
    pub domain: NoiseDomain,
    pub location: PatchLocation,
    pub included: usize,
    pub excluded_already_target: usize,
    pub count_confident: usize,
    pub count_argmax_target: usize,
    pub count_not_source: usize,
    pub rate_confident: f64,
    pub rate_argmax_target: f64,
    pub rate_not_source: f64,
    pub records: Vec<TransferRecord<T>>,
}

/// Place the patch on every held-out image at one location and classify the
/// outcomes into the nested tiers.
pub fn transfer_eval<T: Scalar>(
    net: &Network<T>,
    heldout: &Dataset<T>,
    patch: &Patch<T>,
    target: usize,
    loc: PatchLocation,
) -> Result<TransferReport<T>> {
    if heldout.is_empty() {
        return Err(Error::invalid("heldout", "evaluation set is empty"));
    }
    if heldout.split() != Split::Heldout {
        return Err(Error::invalid("heldout", "transfer evaluation requires the heldout split"));
    }
    if target >= net.num_classes() {
        return Err(Error::invalid("target", format!("class {target} out of range")));
    }
    let first = &heldout.images()[0];
    loc.validate(first.height(), first.width(), patch.size())?;
    let bar = T::from_f64(CONFIDENT_THRESHOLD);

    let records: Result<Vec<TransferRecord<T>>> = heldout
        .images()
        .par_iter()
        .enumerate()
        .map(|(image_index, image)| {
            let (clean_class, clean_prob) = net.predict(image)?;
            let excluded = clean_class == target;
            let noised = apply_patch(image, patch, loc)?;
            let probs = softmax(&net.forward_tensor(&noised)?)?;
            let patched_argmax = argmax(probs.data());
            let p_target = probs.data()[target];
            let p_source = probs.data()[clean_class];
            Ok(TransferRecord {
                image_index,
                clean_class,
                clean_prob,
                excluded,
                patched_argmax,
                p_target,
                p_source,
                confident: !excluded && p_target >= bar,
                argmax_target: !excluded && patched_argmax == target,
                not_source: !excluded && patched_argmax != clean_class,
            })
        })
        .collect();
    let records = records?;

    let excluded = records.iter().filter(|r| r.excluded).count();
    let included = records.len() - excluded;
    if included == 0 {
        return Err(Error::invalid("heldout", "every image already classifies as the target"));
    }
    let count_confident = records.iter().filter(|r| r.confident).count();
    let count_argmax_target = records.iter().filter(|r| r.argmax_target).count();
    let count_not_source = records.iter().filter(|r| r.not_source).count();
    Ok(TransferReport {
        target_class: target,
        domain: patch.domain(),
        location: loc,
        included,
        excluded_already_target: excluded,
        count_confident,
        count_argmax_target,
        count_not_source,
        rate_confident: count_confident as f64 / included as f64,
        rate_argmax_target: count_argmax_target as f64 / included as f64,
        rate_not_source: count_not_source as f64 / included as f64,
        records,
    })
}

/// Mean target-class probability per (source class, target class) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMatrix {
    pub num_classes: usize,
    pub targets: Vec<usize>,
    /// Row-major `[num_classes x targets.len()]`; `None` marks a source
    /// class with no images.
    pub cells: Vec<Option<f64>>,
}

impl ClassMatrix {
    pub fn cell(&self, source: usize, target_index: usize) -> Option<f64> {
        self.cells[source * self.targets.len() + target_index]
    }
}

/// Group images by the classifier's clean prediction (their source class).
pub fn group_by_source_class<T: Scalar>(
    net: &Network<T>,
    images: &[Image<T>],
) -> Result<Vec<Vec<Image<T>>>> {
    let mut groups: Vec<Vec<Image<T>>> = vec![Vec::new(); net.num_classes()];
    for image in images {
        let (class, _) = net.predict(image)?;
        groups[class].push(image.clone());
    }
    Ok(groups)
}

/// Cell `(i, j)`: mean probability of target `j` after patching class-`i`
/// images with target `j`'s patch at `loc`.
pub fn class_matrix<T: Scalar>(
    net: &Network<T>,
    images_by_class: &[Vec<Image<T>>],
    patches_by_target: &[(usize, Patch<T>)],
    loc: PatchLocation,
) -> Result<ClassMatrix> {
    if images_by_class.len() != net.num_classes() {
        return Err(Error::invalid(
            "images_by_class",
            format!("need one group per class, got {}", images_by_class.len()),
        ));
    }
    if patches_by_target.is_empty() {
        return Err(Error::invalid("patches_by_target", "need at least one patch"));
    }
    for (target, _) in patches_by_target {
        if *target >= net.num_classes() {
            return Err(Error::invalid("patches_by_target", format!("target {target} out of range")));
        }
    }
    let targets: Vec<usize> = patches_by_target.iter().map(|(t, _)| *t).collect();
    let mut cells = Vec::with_capacity(net.num_classes() * targets.len());
    for images in images_by_class {
        for (target, patch) in patches_by_target {
            if images.is_empty() {
                cells.push(None);
                continue;
            }
            let mut sum = 0.0;
            for image in images {
                let noised = apply_patch(image, patch, loc)?;
                let probs = softmax(&net.forward_tensor(&noised)?)?;
                sum += probs.data()[*target].as_f64();
            }
            cells.push(Some(sum / images.len() as f64));
        }
    }
    Ok(ClassMatrix { num_classes: net.num_classes(), targets, cells })
}
