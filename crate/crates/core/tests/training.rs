use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zoomnet_core::corpus::{SceneSpec, Split, SyntheticSplit};
use zoomnet_core::corpus::Corpus;
use zoomnet_core::gradcheck::small_network_config;
use zoomnet_core::network::ZipNet;
use zoomnet_core::train::{prepare_example, train, train_step, TrainConfig};
use zoomnet_core::ParamStore;

fn tiny_corpus(count: usize) -> SyntheticSplit {
    let spec = SceneSpec { height: 64, width: 64, size_range: (10.0, 48.0), ..SceneSpec::default() };
    SyntheticSplit { spec, split: Split::Train, count }
}

fn build(seed: u64) -> (ZipNet, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let net = ZipNet::new(small_network_config(), &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (net, store)
}

fn short_run() -> TrainConfig {
    TrainConfig { steps: 6, lr: 0.003, dy_train_scale: false, log_every: 0, ..TrainConfig::default() }
}

fn trainable(store: &ParamStore<f32>) -> Vec<Vec<f32>> {
    store.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.tensor.data().to_vec()).collect()
}

#[test]
fn same_seed_same_weights() {
    let corpus = tiny_corpus(4);
    let cfg = short_run();
    let run = || {
        let (net, mut store) = build(1);
        let losses: Vec<f64> = train(&net, &mut store, &corpus, &cfg, &mut ChaCha8Rng::seed_from_u64(9), |_| {})
            .unwrap()
            .iter()
            .map(|r| r.loss.total)
            .collect();
        (losses, store.iter().map(|(_, p)| p.tensor.data().to_vec()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_rate_leaves_weights_alone() {
    let corpus = tiny_corpus(3);
    let cfg = TrainConfig { lr: 0.0, ..short_run() };
    let (net, mut store) = build(2);
    let before = trainable(&store);
    train(&net, &mut store, &corpus, &cfg, &mut ChaCha8Rng::seed_from_u64(0), |_| {}).unwrap();
    assert_eq!(before, trainable(&store));
}

#[test]
fn loss_falls_on_a_fixed_batch() {
    let corpus = tiny_corpus(8);
    let cfg = TrainConfig { lr: 0.01, ..short_run() };
    let (net, mut store) = build(3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch: Vec<_> = (0..8)
        .map(|i| {
            let (_, img, gts) = corpus.get(i).unwrap();
            prepare_example(&net, &img, &gts, &cfg, &mut rng)
        })
        .collect();
    let mut epoch_loss = Vec::new();
    for epoch in 0..25 {
        let sgd = cfg.sgd_at(0);
        let total: f64 = batch.iter().map(|ex| train_step(&net, &mut store, ex, &sgd, cfg.clip_grad_norm).unwrap().total).sum();
        epoch_loss.push(total / 8.0);
        assert!(epoch_loss[epoch].is_finite());
    }
    let (first, last) = (epoch_loss[0], *epoch_loss.last().unwrap());
    assert!(last < 0.8 * first, "loss {first} -> {last}");
}
