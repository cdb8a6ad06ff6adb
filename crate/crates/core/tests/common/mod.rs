#![allow(dead_code)]

use cberl::nn::ParamStore;
use cberl::tape::Matrix;
use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Held-out accuracy of a multinomial logistic regression fit by full-batch
/// gradient descent on standardized features.
pub fn probe_accuracy(
    train_x: &Matrix,
    train_y: &[usize],
    test_x: &Matrix,
    test_y: &[usize],
    num_classes: usize,
) -> f64 {
    let mean = train_x.mean_axis(Axis(0)).unwrap();
    let std = train_x.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-9));
    let norm = |x: &Matrix| (x - &mean) / &std;
    let (xtr, xte) = (norm(train_x), norm(test_x));
    let n = xtr.nrows() as f64;
    let d = xtr.ncols();
    let mut w = Matrix::zeros((d, num_classes));
    let mut b = Matrix::zeros((1, num_classes));
    let mut onehot = Matrix::zeros((xtr.nrows(), num_classes));
    for (i, &y) in train_y.iter().enumerate() {
        onehot[[i, y]] = 1.0;
    }
    for _ in 0..500 {
        let p = cberl::tape::softmax_rows(&(xtr.dot(&w) + &b));
        let err = (p - &onehot) / n;
        w = &w * (1.0 - 1e-4) - xtr.t().dot(&err) * 0.5;
        b = b - err.sum_axis(Axis(0)).insert_axis(Axis(0)) * 0.5;
    }
    let pred = cberl::augment::argmax_rows(&(xte.dot(&w) + &b));
    let hits = pred.iter().zip(test_y).filter(|(p, y)| p == y).count();
    hits as f64 / test_y.len() as f64
}

/// Largest relative error between analytic gradients and central differences
/// over `slices` randomly chosen scalar parameters.
///
/// `grads` is aligned with `store_of(model).ids()`.
pub fn gradient_check<M: Clone>(
    model: &M,
    store_of: fn(&mut M) -> &mut ParamStore,
    grads: &[Matrix],
    loss: impl Fn(&M) -> f64,
    slices: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let ids: Vec<_> = store_of(&mut probe).ids().collect();
    assert_eq!(ids.len(), grads.len(), "one gradient per parameter");
    let candidates: Vec<usize> = (0..ids.len()).filter(|&k| grads[k].len() > 0).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..slices {
        let k = candidates[rng.random_range(0..candidates.len())];
        let idx = rng.random_range(0..grads[k].len());
        let (rows, cols) = grads[k].dim();
        let (r, c) = (idx / cols, idx % cols);
        assert!(r < rows);
        let original = store_of(&mut probe).get(ids[k])[[r, c]];
        store_of(&mut probe).get_mut(ids[k])[[r, c]] = original + h;
        let up = loss(&probe);
        store_of(&mut probe).get_mut(ids[k])[[r, c]] = original - h;
        let down = loss(&probe);
        store_of(&mut probe).get_mut(ids[k])[[r, c]] = original;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[k][[r, c]];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    worst
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}
