use crprune_core::datagen::{make_dataset, PatternClass};
use crprune_core::diffusion::{make_schedule, q_sample, train, TrainConfig};
use crprune_core::rng::substream;
use crprune_core::tensor::Tensor;
use crprune_core::unet::build;
use rand::Rng;
use rand_distr::StandardNormal;

fn main() {
    let sched = make_schedule(200, 1e-4, 0.02).unwrap();
    let data = make_dataset(&PatternClass::all_standard(), 16, 16, 16, 13, 0.25).unwrap();
    let mut store = build(16, 11, 16, 16).unwrap();
    let cfg = TrainConfig { epochs: 40, batch: 16, lr: 0.05, seed: 17 };
    train(&mut store, &data, &sched, &cfg).unwrap();
    let model = store.resolve::<f32>(None).unwrap();
    for t in [1usize, 3, 10, 25, 50, 100, 150, 200] {
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for (i, s) in data.iter().take(16).enumerate() {
            let mut rng = substream(900 + i as u64, "bin", t as u64);
            let x0 = s.image.reshaped(&[1, 1, 16, 16]).unwrap();
            let eps = Tensor::from_fn(&[1, 1, 16, 16], |_| {
                let z: f64 = rng.sample(StandardNormal);
                z as f32
            });
            let xt = q_sample(&x0, t, &eps, &sched).unwrap();
            let pred = model.forward(&xt, &[t], &[s.class.index()]).unwrap();
            let mse: f64 = pred.data().iter().zip(eps.data())
                .map(|(&a, &b)| { let d = f64::from(a) - f64::from(b); d * d })
                .sum::<f64>() / 256.0;
            acc += mse;
            count += 1;
        }
        println!("t={t:3}: mse {:.4}", acc / count as f64);
    }
}
