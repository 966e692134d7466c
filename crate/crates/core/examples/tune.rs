use crprune_core::datagen::{make_dataset, PatternClass};
use crprune_core::diffusion::{loss, make_schedule, train, TrainConfig};
use crprune_core::unet::build;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(10);
    let n_per_class: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(16);
    let width: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(16);

    let sched = make_schedule(200, 1e-4, 0.02).unwrap();
    let data = make_dataset(&PatternClass::all_standard(), n_per_class, 16, 16, 13, 0.25).unwrap();
    let mut store = build(width, 11, 16, 16).unwrap();
    let batch: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(16);
    let cfg = TrainConfig { epochs, batch, lr, seed: 17 };
    let t0 = std::time::Instant::now();
    match train(&mut store, &data, &sched, &cfg) {
        Ok(report) => {
            let per_epoch = data.len().div_ceil(batch);
            for (e, chunk) in report.curve.chunks(per_epoch).enumerate() {
                let avg: f64 = chunk.iter().map(|p| p.loss).sum::<f64>() / chunk.len() as f64;
                if e % 5 == 0 || e == epochs - 1 {
                    println!("epoch {e}: loss {avg:.4}");
                }
            }
            let probe: Vec<_> = data.iter().collect();
            let l = loss(&store, &probe, &sched, 999).unwrap();
            println!("final probe loss {:.4}, wall {:.1}s", l.value, t0.elapsed().as_secs_f64());
        }
        Err(e) => println!("diverged: {e}"),
    }
}
