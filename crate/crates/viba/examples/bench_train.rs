use std::time::Instant;
use viba::nn::*;
use viba::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for kind in [ModelKind::ToyXception, ModelKind::ToyVgg] {
        let mut model = build_model(kind.spec(), 7).unwrap();
        let data: Vec<(Tensor, usize)> = (0..32)
            .map(|i| (Tensor::rand_uniform(&[3, 64, 64], -1.0, 1.0, &mut rng), i % 2))
            .collect();
        let cfg = TrainConfig { max_epochs: 2, patience: 1, seed: 1, ..Default::default() };
        let t = Instant::now();
        let hist = train_model(&mut model, &data[..24], &data[24..], &cfg).unwrap();
        let dt = t.elapsed();
        println!("{kind}: 2 epochs x 24 samples in {:.2?} ({:.1} ms/sample-epoch), epochs {}", dt, dt.as_millis() as f64 / 48.0, hist.epochs.len());
    }
}
