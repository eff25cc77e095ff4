use super::*;
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Central finite differences of the energy with respect to the input.
fn fd_grad_x(model: &EnergyModel, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            (model.energy(&xp).unwrap() - model.energy(&xm).unwrap()) / (2.0 * h)
        })
        .collect()
}

/// Central finite differences with respect to every parameter.
fn fd_grad_theta(model: &EnergyModel, x: &[f64], h: f64) -> Vec<f64> {
    let base = model.params();
    (0..base.len())
        .map(|i| {
            let mut m = model.clone();
            let mut p = base.clone();
            p.values_mut()[i] += h;
            m.set_params(&p).unwrap();
            let ep = m.energy(x).unwrap();
            p.values_mut()[i] -= 2.0 * h;
            m.set_params(&p).unwrap();
            let em = m.energy(x).unwrap();
            (ep - em) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-8)
}

/// Naive per-point forward pass, written independently of the batched code.
fn mlp_forward_oracle(m: &MlpEnergy, x: &[f64]) -> f64 {
    let widths = m.widths();
    let mut a = x.to_vec();
    for l in 0..widths.len() - 1 {
        let p = m.params();
        let (woff, _) = p.layout().segment(&format!("w{l}")).unwrap();
        let (boff, _) = p.layout().segment(&format!("b{l}")).unwrap();
        let (rows, cols) = (widths[l + 1], widths[l]);
        let mut z = vec![0.0; rows];
        for r in 0..rows {
            let mut s = p.values()[boff + r];
            for c in 0..cols {
                s += p.values()[woff + r * cols + c] * a[c];
            }
            z[r] = s;
        }
        if l < widths.len() - 2 {
            for v in &mut z {
                if *v < 0.0 {
                    *v *= m.slope();
                }
            }
        }
        a = z;
    }
    match m.head() {
        MlpHead::Scalar => a[0],
        MlpHead::SquaredReconstruction => x
            .iter()
            .zip(&a)
            .map(|(xi, fi)| (xi - fi) * (xi - fi))
            .sum(),
    }
}

fn random_mlp(rng: &mut ChaCha8Rng, head: MlpHead) -> MlpEnergy {
    let dim = rng.random_range(1..=3);
    let hidden = rng.random_range(4..=12);
    let depth = rng.random_range(1..=3);
    let mut widths = vec![dim];
    widths.extend(std::iter::repeat(hidden).take(depth));
    widths.push(match head {
        MlpHead::Scalar => 1,
        MlpHead::SquaredReconstruction => dim,
    });
    MlpEnergy::init(widths, 0.2, head, rng).unwrap()
}

/// Sample a point whose pre-activations are all well away from the
/// leaky-ReLU kink, so finite differences stay on one branch.
fn point_away_from_kinks(m: &MlpEnergy, rng: &mut ChaCha8Rng) -> Vec<f64> {
    'outer: for _ in 0..1000 {
        let x: Vec<f64> = (0..m.input_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        // reuse the oracle forward structure to inspect pre-activations
        let widths = m.widths();
        let p = m.params();
        let mut a = x.clone();
        for l in 0..widths.len() - 1 {
            let (woff, _) = p.layout().segment(&format!("w{l}")).unwrap();
            let (boff, _) = p.layout().segment(&format!("b{l}")).unwrap();
            let (rows, cols) = (widths[l + 1], widths[l]);
            let mut z = vec![0.0; rows];
            for r in 0..rows {
                let mut s = p.values()[boff + r];
                for c in 0..cols {
                    s += p.values()[woff + r * cols + c] * a[c];
                }
                z[r] = s;
            }
            if l < widths.len() - 2 {
                if z.iter().any(|v| v.abs() < 1e-3) {
                    continue 'outer;
                }
                for v in &mut z {
                    if *v < 0.0 {
                        *v *= m.slope();
                    }
                }
            }
            a = z;
        }
        return x;
    }
    panic!("could not find a kink-free point");
}

#[test]
fn quadratic_energy_and_gradients_match_closed_forms() {
    let m = EnergyModel::Quadratic(QuadraticEnergy::isotropic(2, 1.0).unwrap());
    assert_eq!(m.energy(&[0.0, 0.0]).unwrap(), 0.0);
    assert_eq!(m.grad_x(&[2.0, -1.0]).unwrap(), vec![2.0, -1.0]);
    // center as parameter: grad_theta = -(x - c) / s^2
    let g = m.grad_theta(&[2.0, -1.0]).unwrap();
    assert_eq!(g.values(), &[-2.0, 1.0]);
}

#[test]
fn grid_energy_interpolation_identity_at_knots() {
    let g = GridEnergy::new(-1.0, 1.0, vec![3.0, 1.0, 4.0, 1.5, 9.0]).unwrap();
    for k in 0..5 {
        assert_eq!(g.energy(g.knot(k)), [3.0, 1.0, 4.0, 1.5, 9.0][k]);
    }
    // between knots: linear slope
    let h = g.spacing();
    assert!((g.grad_x(-0.75) - (1.0 - 3.0) / h).abs() < 1e-14);
    // grad_theta one-hot at a knot
    let m = EnergyModel::Grid(g);
    let gt = m.grad_theta(&[0.0]).unwrap();
    assert_eq!(gt.values(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn grid_gradient_is_invariant_under_energy_shift() {
    let vals = vec![0.3, -1.0, 0.9, 2.0];
    let a = GridEnergy::new(0.0, 3.0, vals.clone()).unwrap();
    let b = GridEnergy::new(0.0, 3.0, vals.iter().map(|v| v + 17.5).collect()).unwrap();
    for i in 0..=60 {
        let x = i as f64 * 0.05;
        assert!((a.grad_x(x) - b.grad_x(x)).abs() < 1e-12);
    }
}

#[test]
fn mlp_forward_matches_independent_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for head in [MlpHead::Scalar, MlpHead::SquaredReconstruction] {
        for _ in 0..20 {
            let m = random_mlp(&mut rng, head);
            let x: Vec<f64> = (0..m.input_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = m.energy(&x);
            let want = mlp_forward_oracle(&m, &x);
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }
}

#[test]
fn gradients_match_finite_differences_across_families() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-5;
    for case in 0..30 {
        let model = match case % 3 {
            0 => {
                let dim = rng.random_range(1..=3);
                let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                EnergyModel::Quadratic(
                    QuadraticEnergy::new(center, rng.random_range(0.5..2.0)).unwrap(),
                )
            }
            1 => {
                let knots = rng.random_range(2..=32);
                let vals: Vec<f64> = (0..knots).map(|_| rng.random_range(-2.0..2.0)).collect();
                EnergyModel::Grid(GridEnergy::new(-1.0, 1.0, vals).unwrap())
            }
            _ => {
                let head = if case % 2 == 0 {
                    MlpHead::Scalar
                } else {
                    MlpHead::SquaredReconstruction
                };
                EnergyModel::Mlp(random_mlp(&mut rng, head))
            }
        };
        let x: Vec<f64> = match &model {
            EnergyModel::Mlp(m) => point_away_from_kinks(m, &mut rng),
            EnergyModel::Grid(_) => vec![rng.random_range(-0.97..0.97) + 0.013],
            _ => (0..model.input_dim())
                .map(|_| rng.random_range(-2.0..2.0))
                .collect(),
        };
        let gx = model.grad_x(&x).unwrap();
        assert!(
            rel_err(&gx, &fd_grad_x(&model, &x, h)) < 1e-4,
            "grad_x mismatch on case {case}"
        );
        let gt = model.grad_theta(&x).unwrap();
        assert!(
            rel_err(gt.values(), &fd_grad_theta(&model, &x, h)) < 1e-4,
            "grad_theta mismatch on case {case}"
        );
    }
}

#[test]
fn evaluation_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = EnergyModel::Mlp(random_mlp(&mut rng, MlpHead::SquaredReconstruction));
    let x: Vec<f64> = (0..m.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let e1 = m.energy(&x).unwrap();
    let e2 = m.energy(&x).unwrap();
    assert_eq!(e1.to_bits(), e2.to_bits());
    let g1 = m.grad_theta(&x).unwrap();
    let g2 = m.grad_theta(&x).unwrap();
    assert!(g1
        .values()
        .iter()
        .zip(g2.values())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn batched_paths_agree_with_per_point_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let m = EnergyModel::Mlp(random_mlp(&mut rng, MlpHead::Scalar));
    let n = 17;
    let mut pts = Array2::zeros((n, m.input_dim()));
    for mut row in pts.rows_mut() {
        for v in row.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
    }
    let energies = m.energy_batch(pts.view()).unwrap();
    let grads = m.grad_x_batch(pts.view()).unwrap();
    for (i, row) in pts.rows().into_iter().enumerate() {
        let x: Vec<f64> = row.to_vec();
        assert!((energies[i] - m.energy(&x).unwrap()).abs() < 1e-12);
        let g = m.grad_x(&x).unwrap();
        for (a, b) in grads.row(i).iter().zip(&g) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    // weighted parameter gradient equals the explicit weighted sum
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let batched = m.grad_theta_weighted(pts.view(), &weights).unwrap();
    let mut manual = ParamVector::zeros(m.layout());
    for (i, row) in pts.rows().into_iter().enumerate() {
        let g = m.grad_theta(&row.to_vec()).unwrap();
        manual.axpy(weights[i], &g).unwrap();
    }
    let scale = manual.l2_norm().max(1.0);
    for (a, b) in batched.values().iter().zip(manual.values()) {
        assert!((a - b).abs() < 1e-11 * scale);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for model in [
        EnergyModel::Mlp(random_mlp(&mut rng, MlpHead::SquaredReconstruction)),
        EnergyModel::Quadratic(QuadraticEnergy::new(vec![0.25, -0.5], 1.5).unwrap()),
        EnergyModel::Grid(GridEnergy::new(-1.0, 1.0, vec![0.1, 0.7, -0.3]).unwrap()),
    ] {
        let text = model.to_checkpoint_json().unwrap();
        let back = EnergyModel::from_checkpoint_json(&text).unwrap();
        assert_eq!(model.input_dim(), back.input_dim());
        assert!(model
            .params()
            .values()
            .iter()
            .zip(back.params().values())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        // hyperparams round-trip bit-exactly too: serialize again and compare
        assert_eq!(text, back.to_checkpoint_json().unwrap());
    }
}

#[test]
fn dimension_mismatch_is_rejected_with_diagnostic() {
    let m = EnergyModel::Quadratic(QuadraticEnergy::isotropic(2, 1.0).unwrap());
    let err = m.energy(&[1.0]).unwrap_err();
    assert!(err.to_string().contains("expected 2"));
    assert!(m.grad_x(&[1.0, 2.0, 3.0]).is_err());
    assert!(m.energy(&[f64::NAN, 0.0]).is_err());
}

#[test]
fn invalid_hyperparameters_are_rejected() {
    assert!(QuadraticEnergy::isotropic(1, 0.0).is_err());
    assert!(GridEnergy::new(1.0, -1.0, vec![0.0, 1.0]).is_err());
    assert!(GridEnergy::new(-1.0, 1.0, vec![0.0]).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(MlpEnergy::init(vec![2, 4, 1], 0.0, MlpHead::Scalar, &mut rng).is_err());
    assert!(MlpEnergy::init(vec![2, 4, 2], 0.2, MlpHead::Scalar, &mut rng).is_err());
    assert!(MlpEnergy::init(vec![2, 4, 1], 0.2, MlpHead::SquaredReconstruction, &mut rng).is_err());
}
