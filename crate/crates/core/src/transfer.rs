//! Transferable ("universal") patch training.
//!
//! One patch is optimized across a pool of training images: every iteration
//! samples an image and a location uniformly (from separate streams),
//! composes the current patch there, and takes one ascent step on the
//! decoupled objective restricted to the patch. Training stops once the
//! post-update patch reaches the success confidence on k consecutive
//! sampled pairs, or at the total iteration cap.

use crate::attack::{select_reference, AttackConfig, NoiseDomain, Patch, PatchLocation};
use crate::error::{Error, Result};
use crate::net::{softmax, Dataset, Network, Split};
use crate::rng;
use crate::tensor::{Scalar, Tensor, IMAGE_CHANNELS};
use rand::Rng;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransferConfig {
    pub attack: AttackConfig,
    /// How many images from the train split form the patch's training pool.
    pub train_image_count: usize,
    /// Consecutive successful iterations required to stop.
    pub consecutive_successes: usize,
    pub max_total_iterations: usize,
    /// Gradient steps per sampled (image, location) pair.
    pub steps_per_sample: usize,
}

impl TransferConfig {
    pub fn default_for(domain: NoiseDomain) -> Self {
        TransferConfig {
            attack: AttackConfig::default_for(domain),
            train_image_count: 100,
            consecutive_successes: 30,
            max_total_iterations: 100_000,
            steps_per_sample: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransferOutcome<T> {
    pub patch: Patch<T>,
    pub converged: bool,
    /// Sampled (image, location) pairs consumed.
    pub iterations: usize,
    /// Training images dropped because they already classified as the target.
    pub excluded_images: usize,
    pub final_streak: usize,
}

/// Uniform draw over all `(h-s+1)(w-s+1)` valid top-left positions.
pub fn sample_location(h: usize, w: usize, s: usize, rng: &mut impl Rng) -> Result<PatchLocation> {
    if s == 0 || s > h || s > w {
        return Err(Error::invalid("patch_size", format!("patch of size {s} does not fit in {h}x{w}")));
    }
    let row = rng.gen_range(0..=h - s);
    let col = rng.gen_range(0..=w - s);
    Ok(PatchLocation::new(row, col))
}

/// Train one patch effective across images and locations.
pub fn train_transfer_patch<T: Scalar>(
    net: &Network<T>,
    train_set: &Dataset<T>,
    target: usize,
    domain: NoiseDomain,
    cfg: &TransferConfig,
) -> Result<TransferOutcome<T>> {
    train_transfer_patch_from(net, train_set, target, domain, cfg, None)
}

/// Like [`train_transfer_patch`], optionally resuming from an existing patch
/// instead of the configured initializer.
pub fn train_transfer_patch_from<T: Scalar>(
    net: &Network<T>,
    train_set: &Dataset<T>,
    target: usize,
    domain: NoiseDomain,
    cfg: &TransferConfig,
    initial: Option<&Patch<T>>,
) -> Result<TransferOutcome<T>> {
    if train_set.is_empty() {
        return Err(Error::invalid("train_set", "training set is empty"));
    }
    if train_set.split() != Split::Train {
        return Err(Error::invalid("train_set", "patch training requires the train split"));
    }
    if target >= net.num_classes() {
        return Err(Error::invalid("target", format!("class {target} out of range")));
    }
    if cfg.consecutive_successes == 0 || cfg.train_image_count == 0 || cfg.steps_per_sample == 0 {
        return Err(Error::invalid(
            "cfg",
            "consecutive_successes, train_image_count, and steps_per_sample must be positive",
        ));
    }

    let pool_size = cfg.train_image_count.min(train_set.len());
    let mut pool = Vec::with_capacity(pool_size);
    let mut excluded_images = 0;
    for image in &train_set.images()[..pool_size] {
        let (clean, _) = net.predict(image)?;
        if clean == target {
            excluded_images += 1;
        } else {
            pool.push(image);
        }
    }
    if pool.is_empty() {
        return Err(Error::invalid("train_set", "every training image already classifies as the target"));
    }

    let s = cfg.attack.patch_size;
    let [h, w, _] = net.input_shape();
    let confidence = T::from_f64(cfg.attack.target_confidence);
    let step = T::from_f64(cfg.attack.step_size);
    let seed = cfg.attack.seed;
    let mut image_rng = rng::substream(seed, "transfer/sample-image");
    let mut loc_rng = rng::substream(seed, "transfer/sample-loc");

    let mut delta = match initial {
        Some(patch) => {
            if patch.size() != s || patch.domain() != domain {
                return Err(Error::invalid(
                    "initial",
                    format!(
                        "initial patch is {}x{} {}, config wants {s}x{s} {}",
                        patch.size(),
                        patch.size(),
                        patch.domain().label(),
                        domain.label()
                    ),
                ));
            }
            patch.values().data().to_vec()
        }
        None => crate::attack::init_patch::<T>(domain, s, seed, cfg.attack.init)?
            .values()
            .data()
            .to_vec(),
    };
    let mut class_weights = vec![T::zero(); net.num_classes()];
    let mut streak = 0usize;
    let mut iterations = 0usize;
    let mut converged = false;
    let mut noised = Tensor::zeros(&[h, w, IMAGE_CHANNELS]);

    while iterations < cfg.max_total_iterations {
        let image = pool[image_rng.gen_range(0..pool.len())];
        let loc = sample_location(h, w, s, &mut loc_rng)?;
        iterations += 1;

        for _ in 0..cfg.steps_per_sample {
            noised.data_mut().copy_from_slice(image.tensor().data());
            write_window(&mut noised, &delta, s, loc);
            let probs = softmax(&net.forward_tensor(&noised)?)?;
            let reference = select_reference(probs.data(), target)?;
            class_weights.iter_mut().for_each(|v| *v = T::zero());
            class_weights[target] = T::one();
            class_weights[reference] = class_weights[reference] - T::one();
            let grad = net.input_gradient(&noised, &class_weights)?;
            grad.ensure_finite("transfer gradient")?;
            add_window_scaled(&mut delta, &grad, s, loc, step);
            if domain == NoiseDomain::Image {
                for d in delta.iter_mut() {
                    *d = d.max(T::zero()).min(T::one());
                }
            }
        }

        // Success check runs on the post-update patch at the sampled pair.
        noised.data_mut().copy_from_slice(image.tensor().data());
        write_window(&mut noised, &delta, s, loc);
        let probs = softmax(&net.forward_tensor(&noised)?)?;
        if probs.data()[target] >= confidence {
            streak += 1;
            if streak >= cfg.consecutive_successes {
                converged = true;
                break;
            }
        } else {
            streak = 0;
        }
    }

    let values = Tensor::from_vec(&[s, s, IMAGE_CHANNELS], delta)?;
    Ok(TransferOutcome {
        patch: Patch::new(values, domain)?,
        converged,
        iterations,
        excluded_images,
        final_streak: streak,
    })
}

fn write_window<T: Scalar>(out: &mut Tensor<T>, values: &[T], s: usize, loc: PatchLocation) {
    let w = out.shape()[1];
    let c = out.shape()[2];
    for dy in 0..s {
        let src = &values[dy * s * c..(dy + 1) * s * c];
        let dst = ((loc.row + dy) * w + loc.col) * c;
        out.data_mut()[dst..dst + s * c].copy_from_slice(src);
    }
}

/// delta += step * grad[window]
fn add_window_scaled<T: Scalar>(delta: &mut [T], grad: &Tensor<T>, s: usize, loc: PatchLocation, step: T) {
    let w = grad.shape()[1];
    let c = grad.shape()[2];
    for dy in 0..s {
        let src = ((loc.row + dy) * w + loc.col) * c;
        let g = &grad.data()[src..src + s * c];
        let d = &mut delta[dy * s * c..(dy + 1) * s * c];
        for (dv, gv) in d.iter_mut().zip(g) {
            *dv = *dv + step * *gv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::synth_dataset;
    use rand::SeedableRng;

    #[test]
    fn sample_location_single_position() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let loc = sample_location(5, 5, 5, &mut rng).unwrap();
            assert_eq!(loc, PatchLocation::new(0, 0));
        }
    }

    #[test]
    fn sample_location_in_bounds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let loc = sample_location(14, 14, 5, &mut rng).unwrap();
            assert!(loc.row <= 9 && loc.col <= 9);
        }
    }

    #[test]
    fn sample_location_rejects_oversized_patch() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        assert!(sample_location(8, 8, 9, &mut rng).is_err());
        assert!(sample_location(8, 8, 0, &mut rng).is_err());
    }

    #[test]
    fn empty_training_set_rejected() {
        let net = crate::net::Network::<f32>::build(
            [16, 16, 3],
            vec![crate::net::LayerSpec::Flatten, crate::net::LayerSpec::Dense { out_features: 4 }],
            0,
        )
        .unwrap();
        let empty = Dataset::<f32>::new(vec![], vec![], Split::Train, 4).unwrap();
        let cfg = TransferConfig::default_for(NoiseDomain::Network);
        assert!(train_transfer_patch(&net, &empty, 0, NoiseDomain::Network, &cfg).is_err());
    }

    #[test]
    fn heldout_split_rejected() {
        let net = crate::net::Network::<f32>::build(
            [16, 16, 3],
            vec![crate::net::LayerSpec::Flatten, crate::net::LayerSpec::Dense { out_features: 4 }],
            0,
        )
        .unwrap();
        let data = synth_dataset::<f32>(3, 2, 4, 16, Split::Heldout).unwrap();
        let cfg = TransferConfig::default_for(NoiseDomain::Network);
        assert!(train_transfer_patch(&net, &data, 0, NoiseDomain::Network, &cfg).is_err());
    }

    #[test]
    fn already_successful_patch_converges_after_one_iteration() {
        // Rigged network: class 0 is a constant bias, class 1 sums all
        // pixels with a small weight. A huge network-domain patch drives
        // class 1 past 0.9 at any location of any image.
        use crate::net::{LayerParams, LayerSpec};
        use crate::tensor::Image;
        let n_in = 16 * 16 * 3;
        let mut w = Tensor::<f32>::zeros(&[n_in, 2]);
        for i in 0..n_in {
            w.data_mut()[i * 2 + 1] = 0.01;
        }
        let net = crate::net::Network::with_params(
            [16, 16, 3],
            vec![LayerSpec::Flatten, LayerSpec::Dense { out_features: 2 }],
            vec![LayerParams::None, LayerParams::Dense { weights: w, bias: vec![1.0, 0.0] }],
        )
        .unwrap();

        let dark = Image::new(Tensor::from_vec(&[16, 16, 3], vec![0.05; n_in]).unwrap()).unwrap();
        let data = Dataset::new(vec![dark.clone(), dark], vec![0, 0], Split::Train, 2).unwrap();

        let strong = Patch::new(
            Tensor::from_vec(&[5, 5, 3], vec![100.0; 75]).unwrap(),
            NoiseDomain::Network,
        )
        .unwrap();
        let mut cfg = TransferConfig::default_for(NoiseDomain::Network);
        cfg.attack.step_size = 0.0;
        cfg.consecutive_successes = 1;
        cfg.train_image_count = 2;
        let out =
            train_transfer_patch_from(&net, &data, 1, NoiseDomain::Network, &cfg, Some(&strong))
                .unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn training_is_deterministic() {
        let net = crate::net::Network::<f32>::build(
            [16, 16, 3],
            vec![
                crate::net::LayerSpec::Conv2d { kernel: 3, out_channels: 4, padding: 1 },
                crate::net::LayerSpec::Relu,
                crate::net::LayerSpec::MaxPool2d { window: 2 },
                crate::net::LayerSpec::Flatten,
                crate::net::LayerSpec::Dense { out_features: 4 },
            ],
            8,
        )
        .unwrap();
        let data = synth_dataset::<f32>(3, 4, 4, 16, Split::Train).unwrap();
        let mut cfg = TransferConfig::default_for(NoiseDomain::Network);
        cfg.max_total_iterations = 50;
        cfg.train_image_count = 8;
        // pick a target some pooled image does not already predict
        let (p0, _) = net.predict(&data.images()[0]).unwrap();
        let target = (p0 + 1) % 4;
        let a = train_transfer_patch(&net, &data, target, NoiseDomain::Network, &cfg).unwrap();
        let b = train_transfer_patch(&net, &data, target, NoiseDomain::Network, &cfg).unwrap();
        assert_eq!(a.patch.values().data(), b.patch.values().data());
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn image_domain_patch_obeys_bounds() {
        let net = crate::net::Network::<f32>::build(
            [16, 16, 3],
            vec![
                crate::net::LayerSpec::Conv2d { kernel: 3, out_channels: 4, padding: 1 },
                crate::net::LayerSpec::Relu,
                crate::net::LayerSpec::MaxPool2d { window: 2 },
                crate::net::LayerSpec::Flatten,
                crate::net::LayerSpec::Dense { out_features: 4 },
            ],
            9,
        )
        .unwrap();
        let data = synth_dataset::<f32>(4, 4, 4, 16, Split::Train).unwrap();
        let mut cfg = TransferConfig::default_for(NoiseDomain::Image);
        cfg.max_total_iterations = 40;
        cfg.train_image_count = 8;
        let (p0, _) = net.predict(&data.images()[0]).unwrap();
        let target = (p0 + 1) % 4;
        let out = train_transfer_patch(&net, &data, target, NoiseDomain::Image, &cfg).unwrap();
        assert!(out.patch.values().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
