use std::time::Instant;
use viba::nn::*;
use viba::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = build_model(ModelKind::ToyVgg.spec(), 7).unwrap();
    let batch = Tensor::rand_uniform(&[16, 3, 64, 64], -1.0, 1.0, &mut rng);

    let t = Instant::now();
    for _ in 0..5 { model.forward(&batch).unwrap(); }
    println!("vgg forward b16: {:.1} ms", t.elapsed().as_millis() as f64 / 5.0);

    let mut m2 = model.clone();
    let t = Instant::now();
    for _ in 0..5 {
        let mut tape = Tape::new();
        let (logits, _pv) = m2.forward_train(&mut tape, &batch).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[0usize; 16]).unwrap();
        tape.backward(loss).unwrap();
    }
    println!("vgg fwd+bwd b16: {:.1} ms", t.elapsed().as_millis() as f64 / 5.0);

    // Raw conv kernel throughput: 16x32x32x32 input, 32 out, k3 (layer11-like)
    use viba::tensor::ConvDims;
    let d = ConvDims { n: 16, c_in: 32, h: 16, w: 16, c_out: 32, kh: 3, kw: 3, sh: 1, sw: 1, ph: 1, pw: 1 };
    let x = Tensor::rand_uniform(&[16, 32, 16, 16], -1.0, 1.0, &mut rng);
    let w = Tensor::rand_uniform(&[32, 32, 3, 3], -1.0, 1.0, &mut rng);
    let t = Instant::now();
    let mut tape = Tape::new();
    let xv = tape.input(x, false).unwrap();
    let wv = tape.input(w, false).unwrap();
    for _ in 0..20 { tape.conv2d(xv, wv, (1,1), (1,1)).unwrap(); }
    let dt = t.elapsed().as_secs_f64() / 20.0;
    let macs = (16*32*16*16*32*9) as f64;
    println!("conv 32->32@16x16 b16: {:.2} ms = {:.2} GMAC/s", dt*1e3, macs/dt/1e9);
}
