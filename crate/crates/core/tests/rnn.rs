mod common;

use common::{law_window, plant_cost, plant_step, PLANT_K};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sepsis_core::rnn::{loss, loss_and_grad, rollout_plant, train, Arch, FeatureMap, RnnModel, TrainConfig, TrainSet};

#[test]
fn bptt_gradient_matches_central_differences() {
    let arch = Arch { input_dim: 3, hidden: 4, outputs: 2, d: 3 };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w: Vec<f64> = (0..arch.param_count()).map(|_| rng.gen_range(-0.8..0.8)).collect();
    let inputs: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect();
    let targets: Vec<Vec<f64>> = (0..5).map(|_| (0..6).map(|_| rng.gen()).collect()).collect();
    let (l, g) = loss_and_grad(&arch, &w, &inputs, &targets);
    assert!((l - loss(&arch, &w, &inputs, &targets)).abs() <= 1e-12 * l);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        let mut wp = w.clone();
        let mut wm = w.clone();
        wp[i] += h;
        wm[i] -= h;
        let fd = (loss(&arch, &wp, &inputs, &targets) - loss(&arch, &wm, &inputs, &targets)) / (2.0 * h);
        let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "worst relative gradient error {worst:e}");
}

fn feedback_set(n: usize, d: usize, seed: u64) -> TrainSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..n {
        let x0 = rng.gen_range(-1.0..1.0);
        inputs.push(vec![x0]);
        targets.push(law_window(x0, d).into_iter().map(|u| (u + 1.0) / 2.0).collect());
    }
    TrainSet { inputs, targets, d, outputs: 1 }
}

fn feedback_model() -> RnnModel {
    let d = 3;
    let set = feedback_set(400, d, 2);
    let template = RnnModel::zeros(Arch { input_dim: 1, hidden: 8, outputs: 1, d }, FeatureMap::Raw, None, vec![-1.0], vec![1.0]);
    let cfg = TrainConfig { hidden: 8, epochs: 400, learning_rate: 1e-2, patience: 400, ..Default::default() };
    let (model, report) = train(&set, template, &cfg).unwrap();
    assert!(report.final_validation_mse.is_finite());
    model
}

#[test]
fn learns_linear_feedback_law() {
    let model = feedback_model();
    // Held-out inputs, error in raw control units.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut se = 0.0;
    let mut count = 0.0;
    for _ in 0..200 {
        let x0: f64 = rng.gen_range(-1.0..1.0);
        let pred = model.predict_window(&[x0]).unwrap();
        for (p, t) in pred[0].iter().zip(law_window(x0, 3)) {
            se += (p - t).powi(2);
            count += 1.0;
        }
    }
    let mse = se / count;
    assert!(mse < 1e-3, "validation MSE {mse:e}");

    for x0 in [-0.9, -0.4, 0.3, 0.8] {
        let (xs, us) = rollout_plant(&model, &[x0], 10, |x, u| vec![plant_step(x[0], u[0])]).unwrap();
        let xs: Vec<f64> = xs.iter().map(|x| x[0]).collect();
        let us: Vec<f64> = us.iter().map(|u| u[0]).collect();
        let mut tx = vec![x0];
        let mut tu = Vec::new();
        for _ in 0..10 {
            let u = -PLANT_K * tx.last().unwrap();
            tu.push(u);
            tx.push(plant_step(*tx.last().unwrap(), u));
        }
        let (got, want) = (plant_cost(&xs, &us), plant_cost(&tx, &tu));
        assert!((got - want).abs() <= 0.1 * want, "x0 {x0}: rollout cost {got} vs law {want}");
    }
}

#[test]
fn save_and_load_are_bit_identical() {
    let model = feedback_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();
    let back = RnnModel::load(&path).unwrap();
    assert_eq!(back.flat_weights().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), model.flat_weights().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    for x0 in [-0.77, 0.0, 0.123456789] {
        let a = model.predict_window(&[x0]).unwrap();
        let b = back.predict_window(&[x0]).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (va, vb) in ra.iter().zip(rb) {
                assert_eq!(va.to_bits(), vb.to_bits());
            }
        }
    }
    assert_eq!(back.to_json().unwrap(), model.to_json().unwrap());
}

#[test]
fn training_is_reproducible() {
    let set = feedback_set(60, 2, 4);
    let template = RnnModel::zeros(Arch { input_dim: 1, hidden: 4, outputs: 1, d: 2 }, FeatureMap::Raw, None, vec![-1.0], vec![1.0]);
    let cfg = TrainConfig { hidden: 4, epochs: 20, ..Default::default() };
    let (a, ra) = train(&set, template.clone(), &cfg).unwrap();
    let (b, rb) = train(&set, template, &cfg).unwrap();
    assert_eq!(a.flat_weights(), b.flat_weights());
    assert_eq!(ra.train_loss, rb.train_loss);
}
