use crprune_core::ops;
use crprune_core::tensor::Tensor;
use crprune_core::unet::build;
use std::time::Instant;


/// Prototype: per-output-row accumulator over (ci, u, v).
fn conv2d_v2(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, _, kh, kw) = w.dims4().unwrap();
    let ho = h + 2 * pad + 1 - kh;
    let wo = wd + 2 * pad + 1 - kw;
    let xs = x.data();
    let ws = w.data();
    let bs = b.data();
    let mut out = vec![0.0f32; n * cout * ho * wo];
    let mut acc = vec![0.0f32; wo];
    for ni in 0..n {
        for co in 0..cout {
            let op = &mut out[(ni * cout + co) * ho * wo..][..ho * wo];
            for i in 0..ho {
                acc.fill(bs[co]);
                for ci in 0..cin {
                    let xp = &xs[(ni * cin + ci) * h * wd..][..h * wd];
                    let wbase = (co * cin + ci) * kh * kw;
                    for u in 0..kh {
                        let iy = (i + u) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xp[iy as usize * wd..][..wd];
                        let wrow = &ws[wbase + u * kw..][..kw];
                        for (v, &wv) in wrow.iter().enumerate() {
                            let j_lo = pad.saturating_sub(v);
                            let j_hi = (wd + pad - v).min(wo);
                            let x_lo = j_lo + v - pad;
                            for (a, &xv) in acc[j_lo..j_hi].iter_mut().zip(&xrow[x_lo..x_lo + (j_hi - j_lo)]) {
                                *a += wv * xv;
                            }
                        }
                    }
                }
                op[i * wo..(i + 1) * wo].copy_from_slice(&acc);
            }
        }
    }
    Tensor::new(vec![n, cout, ho, wo], out).unwrap()
}

fn main() {
    let store = build(16, 1, 16, 16).unwrap();
    let model = store.resolve::<f32>(None).unwrap();
    let x = Tensor::from_fn(&[1, 1, 24, 24], |i| ((i * 7 % 31) as f32) * 0.05 - 0.7);

    let t0 = Instant::now();
    let reps = 500;
    for _ in 0..reps {
        let _ = model.forward(&x, &[100], &[1]).unwrap();
    }
    let per_fwd = t0.elapsed().as_secs_f64() / reps as f64;
    println!("full forward: {:.3} ms", per_fwd * 1e3);

    // Pure conv at the dominant layer shape.
    let xc = Tensor::from_fn(&[1, 16, 24, 24], |i| (i as f32 * 0.01).sin());
    let w = Tensor::from_fn(&[16, 16, 3, 3], |i| (i as f32 * 0.1).cos() * 0.1);
    let b = Tensor::zeros(&[16]);
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = ops::conv2d_forward(&xc, &w, &b, 1, 1).unwrap();
    }
    let per_conv = t0.elapsed().as_secs_f64() / reps as f64;
    let macs = 16.0 * 16.0 * 24.0 * 24.0 * 9.0;
    println!("conv 16->16 @24x24: {:.3} ms ({:.2} GMAC/s)", per_conv * 1e3, macs / per_conv / 1e9);

    // 32->32 at 12x12 (mid-ish) and 32ch gn/silu.
    let xc2 = Tensor::from_fn(&[1, 32, 12, 12], |i| (i as f32 * 0.01).sin());
    let w2 = Tensor::from_fn(&[32, 32, 3, 3], |i| (i as f32 * 0.1).cos() * 0.1);
    let b2 = Tensor::zeros(&[32]);
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = conv2d_v2(&xc, &w, &b, 1);
    }
    let pv2 = t0.elapsed().as_secs_f64() / reps as f64;
    println!("conv_v2 16->16 @24x24: {:.3} ms ({:.2} GMAC/s)", pv2 * 1e3, macs / pv2 / 1e9);
    let ya = ops::conv2d_forward(&xc, &w, &b, 1, 1).unwrap();
    let yb = conv2d_v2(&xc, &w, &b, 1);
    let md = ya.data().iter().zip(yb.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    println!("v1 vs v2 max diff: {md}");
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = ops::conv2d_forward(&xc2, &w2, &b2, 1, 1).unwrap();
    }
    let per2 = t0.elapsed().as_secs_f64() / reps as f64;
    let macs2 = 32.0 * 32.0 * 144.0 * 9.0;
    println!("conv 32->32 @12x12: {:.3} ms ({:.2} GMAC/s)", per2 * 1e3, macs2 / per2 / 1e9);

    let gamma = Tensor::from_fn(&[16], |_| 1.0);
    let beta = Tensor::zeros(&[16]);
    let t0 = Instant::now();
    for _ in 0..reps {
        let (y, _) = ops::group_norm_forward(&xc, 8, &gamma, &beta, 1e-5).unwrap();
        let _ = ops::silu_forward(&y);
    }
    println!("gn+silu @16x24x24: {:.3} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let pos = model.tensor("mid.attn.pos").unwrap().clone();
    let wq = model.tensor("mid.attn.wq").unwrap().clone();
    let xm = Tensor::from_fn(&[1, 32, 6, 6], |i| (i as f32 * 0.02).sin());
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = crprune_core::unet::attention2d(&xm, &wq, &wq, &wq, &wq, &pos).unwrap();
    }
    println!("attention @6x6: {:.3} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}
