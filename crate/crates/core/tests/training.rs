//! Small end-to-end training runs of the flow and the denoiser.

use ndarray::{array, Array2};
use rand_distr::{Distribution, StandardNormal};

use shorthorizon::denoiser::{train_denoiser, DenoiseTrainConfig};
use shorthorizon::flow::{train_flow, FlowMode, FlowModel, FlowTrainConfig};
use shorthorizon::metrics::{sliced_wasserstein, Order};
use shorthorizon::rng;
use shorthorizon::score::ScoreModel;
use shorthorizon::targets::{forward_noise, make_random_gmm, GmmSpec, Provenance, SampleBatch};

fn gaussian(n: usize, d: usize, scale: f64, r: &mut rng::Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| {
        let z: f64 = StandardNormal.sample(r);
        scale * z
    })
}

#[test]
fn untrained_flow_has_gaussian_entropy() {
    // Zeroed couplings leave only the training factor: N(0, c²I).
    let c = 1.7;
    let flow = FlowModel::init(4, 4, 16, 2, c, 2.0, &mut rng::from_seed(30)).unwrap();
    let x = flow.sample(50_000, &mut rng::from_seed(31)).unwrap();
    let entropy = -flow.log_density(x.view()).unwrap().mean().unwrap();
    let exact = 2.0 * (2.0 * std::f64::consts::PI * std::f64::consts::E * c * c).ln();
    assert!((entropy - exact).abs() / exact < 0.02, "{entropy} vs {exact}");
}

#[test]
fn flow_fit_beats_the_isotropic_start() {
    let gmm = make_random_gmm(2, 32).unwrap();
    let mut r = rng::from_seed(32);
    let sigma_t = 1.0;
    let train = gmm.sample(4000, &mut r).unwrap();
    let cfg = FlowTrainConfig {
        n_layers: 4,
        hidden_width: 32,
        lr: 2e-3,
        batch_size: 200,
        epochs: 30,
        seed: 3,
        ..FlowTrainConfig::default()
    };
    let (flow, log) = train_flow(&train, sigma_t, &cfg, FlowMode::Dynamical).unwrap();
    let losses = &log.epoch_losses;
    assert!(losses.last().unwrap() < &(losses[0] - 0.05), "{losses:?}");

    let reference = forward_noise(&gmm.sample(4000, &mut r).unwrap(), sigma_t, &mut r).unwrap();
    let fitted = flow.sample(4000, &mut r).unwrap();
    let iso = SampleBatch::new(
        gaussian(4000, 2, sigma_t, &mut r),
        Provenance::Prior,
        Some(sigma_t),
    )
    .unwrap();
    let d_flow = sliced_wasserstein(fitted.view(), reference.view(), 200, Order::Two, &mut r).unwrap();
    let d_iso = sliced_wasserstein(iso.view(), reference.view(), 200, Order::Two, &mut r).unwrap();
    assert!(d_flow < 0.6 * d_iso, "{d_flow} vs {d_iso}");
}

#[test]
fn denoiser_learns_a_mixture_score() {
    let gmm = GmmSpec::isotropic(vec![0.3, 0.7], array![[-2.0, 0.0], [2.0, 1.0]], 0.25).unwrap();
    let mut r = rng::from_seed(33);
    let data = gmm.sample(20_000, &mut r).unwrap();
    let cfg = DenoiseTrainConfig {
        lr: 2e-3,
        batch_size: 500,
        epochs: 30,
        sigma_max: 5.0,
        hidden_width: 64,
        hidden_layers: 3,
        seed: 4,
        ..DenoiseTrainConfig::default()
    };
    let (untrained, _) = train_denoiser(&data, &DenoiseTrainConfig { epochs: 1, lr: 1e-12, ..cfg.clone() }).unwrap();
    let (net, log) = train_denoiser(&data, &cfg).unwrap();
    assert!(log.epoch_losses.iter().all(|l| l.is_finite()));
    for sigma in [0.5, 1.0, 3.0] {
        let x = forward_noise(&data, sigma, &mut r).unwrap();
        let want = gmm.score(x.view(), sigma).unwrap();
        let err = |m: &dyn ScoreModel| {
            let got = m.score(x.view(), sigma).unwrap();
            (&got - &want).mapv(|v| v * v).sum() / want.mapv(|v| v * v).sum()
        };
        let (trained, start) = (err(&net), err(&untrained));
        assert!(trained < 0.1 && trained < 0.5 * start, "σ = {sigma}: {trained} vs untrained {start}");
    }
}
