//! Deterministic minibatch SGD on softmax cross-entropy.

use crate::error::{Error, Result};
use crate::net::{softmax, Dataset, Network, Split};
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 12, batch_size: 32, learning_rate: 0.3, seed: 42 }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// Train a network, returning the updated parameters.
pub fn train<T: Scalar>(net: &Network<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<Network<T>> {
    train_with_metrics(net, data, cfg).map(|(net, _)| net)
}

/// Train and report per-epoch loss and train-split accuracy.
pub fn train_with_metrics<T: Scalar>(
    net: &Network<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<(Network<T>, Vec<EpochStats>)> {
    if data.is_empty() {
        return Err(Error::invalid("data", "training dataset is empty"));
    }
    if data.split() != Split::Train {
        return Err(Error::invalid("data", "training requires the train split"));
    }
    if data.num_classes() != net.num_classes() {
        return Err(Error::invalid(
            "data",
            format!("dataset has {} classes, network {}", data.num_classes(), net.num_classes()),
        ));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("cfg", "epochs and batch_size must be positive"));
    }
    if !(cfg.learning_rate >= 0.0) {
        return Err(Error::invalid("cfg", "learning_rate must be non-negative"));
    }

    let mut net = net.clone();
    let mut shuffle_rng = rng::substream(cfg.seed, "train/shuffle");
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut stats = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in indices.chunks(cfg.batch_size) {
            let mut grads = net.zero_grads();
            for &i in batch {
                let image = &data.images()[i];
                let label = data.labels()[i];
                let logits = net.accumulate_grads(
                    image.tensor(),
                    |logits| ce_logit_gradient(logits, label),
                    &mut grads,
                );
                let probs = softmax(&logits).expect("finite logits during training");
                let p = probs.data()[label].as_f64().max(1e-12);
                loss_sum += -p.ln();
                if crate::net::argmax(probs.data()) == label {
                    correct += 1;
                }
            }
            let scale = T::from_f64(cfg.learning_rate / batch.len() as f64);
            net.apply_update(&grads, scale);
        }
        stats.push(EpochStats {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok((net, stats))
}

/// dLoss/dLogits for softmax cross-entropy: `p - onehot(label)`.
fn ce_logit_gradient<T: Scalar>(logits: &Tensor<T>, label: usize) -> Tensor<T> {
    let mut g = softmax(logits).expect("finite logits during training");
    g.data_mut()[label] = g.data()[label] - T::one();
    g
}

/// Fraction of images whose prediction matches the label.
pub fn accuracy<T: Scalar>(net: &Network<T>, data: &Dataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("data", "dataset is empty"));
    }
    let mut correct = 0usize;
    for (image, label) in data.images().iter().zip(data.labels()) {
        let (class, _) = net.predict(image)?;
        if class == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{synth_dataset, LayerSpec};

    fn small_net(seed: u64) -> Network<f32> {
        Network::build(
            [16, 16, 3],
            vec![
                LayerSpec::Conv2d { kernel: 3, out_channels: 4, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { window: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_features: 4 },
            ],
            seed,
        )
        .unwrap()
    }

    fn small_data() -> Dataset<f32> {
        synth_dataset(5, 6, 4, 16, Split::Train).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let net = small_net(1);
        let cfg = TrainConfig { epochs: 1, batch_size: 4, learning_rate: 0.0, seed: 9 };
        let trained = train(&net, &small_data(), &cfg).unwrap();
        assert_eq!(net.params(), trained.params());
    }

    #[test]
    fn training_is_deterministic() {
        let net = small_net(2);
        let cfg = TrainConfig { epochs: 2, batch_size: 8, learning_rate: 0.05, seed: 13 };
        let a = train(&net, &small_data(), &cfg).unwrap();
        let b = train(&net, &small_data(), &cfg).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn loss_decreases_over_epochs() {
        let net = small_net(3);
        let cfg = TrainConfig { epochs: 4, batch_size: 8, learning_rate: 0.05, seed: 17 };
        let (_, stats) = train_with_metrics(&net, &small_data(), &cfg).unwrap();
        assert!(stats.last().unwrap().mean_loss < stats.first().unwrap().mean_loss);
    }

    #[test]
    fn empty_dataset_rejected() {
        let net = small_net(4);
        let data = Dataset::<f32>::new(vec![], vec![], Split::Train, 4).unwrap();
        assert!(train(&net, &data, &TrainConfig::default()).is_err());
    }

    #[test]
    fn heldout_split_rejected_for_training() {
        let net = small_net(4);
        let data = synth_dataset(5, 2, 4, 16, Split::Heldout).unwrap();
        assert!(train(&net, &data, &TrainConfig::default()).is_err());
    }
}
