// Rough throughput check for the batched MLP paths at training-relevant sizes.
use std::time::Instant;

use ebmlab::model::{EnergyModel, MlpEnergy, MlpHead};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for width in [64, 128, 256, 512] {
        let model = EnergyModel::Mlp(
            MlpEnergy::init(
                vec![1, width, width, width, 1],
                0.2,
                MlpHead::SquaredReconstruction,
                &mut rng,
            )
            .unwrap(),
        );
        let n = 1000;
        let mut xs = Array2::zeros((n, 1));
        for v in xs.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let w = vec![1.0 / n as f64; n];

        let t = Instant::now();
        let reps = 20;
        for _ in 0..reps {
            let _ = model.grad_x_batch(xs.view()).unwrap();
        }
        let gx = t.elapsed().as_secs_f64() / reps as f64;

        let t = Instant::now();
        for _ in 0..reps {
            let _ = model.grad_theta_weighted(xs.view(), &w).unwrap();
        }
        let gt = t.elapsed().as_secs_f64() / reps as f64;

        // flops: grad_x ~ 8 n w^2 (2 inner GEMMs each way), grad_theta ~ 12 n w^2
        let fx = 8.0 * n as f64 * (width * width) as f64 / gx / 1e9;
        let ft = 12.0 * n as f64 * (width * width) as f64 / gt / 1e9;
        println!(
            "width {width:3}: grad_x_batch {:.1} ms ({fx:.1} GF/s)  grad_theta_weighted {:.1} ms ({ft:.1} GF/s)",
            gx * 1e3,
            gt * 1e3
        );
        let per_iter_srlmc = 40.0 * gx + 2.0 * gt;
        println!(
            "  est. srlmc train iter (T=40, batch 1k): {:.0} ms -> 5k iters ~ {:.1} min",
            per_iter_srlmc * 1e3,
            per_iter_srlmc * 5000.0 / 60.0
        );
    }
}
