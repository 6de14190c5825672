//! Temporary throughput probe (deleted before release).

use patchnoise::net::{synth_dataset, train_with_metrics, LayerSpec, Network, Split, TrainConfig};

fn victim_layers(classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d { kernel: 3, out_channels: 8, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { window: 2 },
        LayerSpec::Conv2d { kernel: 3, out_channels: 16, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { window: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense { out_features: classes },
    ]
}

#[test]
#[ignore]
fn train_speed_probe() {
    let t0 = std::time::Instant::now();
    let train = synth_dataset::<f32>(42, 200, 8, 32, Split::Train).unwrap();
    let heldout = synth_dataset::<f32>(42, 100, 8, 32, Split::Heldout).unwrap();
    println!("datasets: {:?} ({} train / {} heldout)", t0.elapsed(), train.len(), heldout.len());

    let net = Network::build([32, 32, 3], victim_layers(8), 42).unwrap();
    let cfg = TrainConfig::default();
    let t1 = std::time::Instant::now();
    let (trained, _) = train_with_metrics(&net, &train, &cfg).unwrap();
    let acc = patchnoise::net::accuracy(&trained, &heldout).unwrap();
    println!("trained: heldout {:.4} time {:?}", acc, t1.elapsed());

    use patchnoise::attack::{attack_single, AttackConfig, NoiseDomain, PatchLocation};
    use patchnoise::rng::substream;
    use rand::Rng;
    let variants: &[(NoiseDomain, f64)] = &[
        (NoiseDomain::Network, 0.2),
        (NoiseDomain::Network, 0.5),
        (NoiseDomain::Network, 1.0),
        (NoiseDomain::Image, 0.03),
        (NoiseDomain::Image, 0.05),
        (NoiseDomain::Image, 0.1),
    ];
    for &(domain, eps) in variants {
        let mut rng = substream(42, "probe/triples");
        let t = std::time::Instant::now();
        let mut tiers = [0usize; 4];
        let mut iters_sum = 0usize;
        let n = 12;
        let mut done = 0;
        let mut idx = 0;
        while done < n {
            let image = &heldout.images()[idx];
            idx += 1;
            let (source, _) = trained.predict(image).unwrap();
            let target = (source + 1 + rng.gen_range(0..7)) % 8;
            if target == source {
                continue;
            }
            let corners = PatchLocation::corners(32, 32, 5);
            let loc = corners[rng.gen_range(0..4)];
            let mut cfg = AttackConfig::default_for(domain);
            cfg.step_size = eps;
            let res = attack_single(&trained, image, target, loc, domain, &cfg).unwrap();
            tiers[res.outcome as usize] += 1;
            iters_sum += res.iterations;
            done += 1;
        }
        println!(
            "{:?} eps {}: tiers [fail/mis/argmax/conf] {:?} mean_iters {} time {:?}",
            domain,
            eps,
            tiers,
            iters_sum / n,
            t.elapsed()
        );
    }
}
