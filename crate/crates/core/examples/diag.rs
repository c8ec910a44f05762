use tc3d_core::consensus::{Aggregator, AggregatorKind, TemporalModel};
use tc3d_core::dataset::{generate_synthetic, GenConfig};
use tc3d_core::network::reference_network;
use tc3d_core::rng::{derive_seed, rng_from};
use tc3d_core::sampler::{SamplerConfig, VideoSample};
use tc3d_core::trainer::TrainState;

fn run(dropout: f64, lr: f64, steps: usize, label: &str) {
    let cfg = GenConfig { classes: 4, train_per_class: 2, test_per_class: 1, frames: 48, height: 16, width: 16, seed: 8 };
    let (train, _) = generate_synthetic(&cfg);
    let batch: Vec<&VideoSample> = train.videos.iter().collect();
    let net = reference_network(1, 4, dropout, false, &mut rng_from(21));
    let model = TemporalModel::new(net, Aggregator::new(AggregatorKind::Average, 3, 4));
    let mut state = TrainState::new(model, lr, 0.9, SamplerConfig::default(), 21);
    let mut first = 0.0;
    let mut last = 0.0;
    for step in 0..steps {
        let loss = state.train_step(&batch, derive_seed(21, &[step as u64])).unwrap();
        if step == 0 { first = loss; }
        last = loss;
        if step % 10 == 0 || step == steps - 1 { print!("{loss:.3} "); }
    }
    println!("\n{label}: first {first:.4} last {last:.4} ratio {:.3}", last / first);
}

fn main() {
    run(0.8, 0.005, 50, "dropout0.8 lr.005 50");
    run(0.0, 0.005, 50, "dropout0.0 lr.005 50");
    run(0.8, 0.005, 200, "dropout0.8 lr.005 200");
}
