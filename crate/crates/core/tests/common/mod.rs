//! Closed-form checks of the loss module shared by the property tests and
//! the acceptance run. Each returns the largest deviation it saw.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use zsldg::diffcore::{backward, Activation, Graph, Layer, Mlp, Tensor};
use zsldg::losses::{center_deltas, gradient_penalty, loss_align, loss_center, loss_d2, sample_eta, BatchEmbeds, CenterTable, Hyper};

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn linear(w: Vec<f64>, b: f64) -> Mlp {
    let layer = Layer::new(Tensor::column(&w).unwrap(), Tensor::scalar(b).unwrap()).unwrap();
    Mlp::new(vec![layer], Activation::Identity, Activation::Identity).unwrap()
}

fn tanh_mlp(rng: &mut ChaCha8Rng, widths: &[usize]) -> Mlp {
    Mlp::init(widths, Activation::Tanh, Activation::Identity, rng)
}

fn batch(g: &mut Graph, z_v: Tensor, z_a: Tensor, a_y: Tensor, a_hat: Tensor, labels: Vec<usize>) -> BatchEmbeds {
    let n = labels.len();
    BatchEmbeds {
        z_v: g.leaf(z_v),
        z_a: g.leaf(z_a),
        a_y: g.leaf(a_y),
        a_hat: g.leaf(a_hat),
        labels: labels.into(),
        domains: vec![0; n].into(),
    }
}

/// Gradient penalty of linear critics whose gradient has unit norm: in the
/// latent only (alignment critic) and jointly over latent and semantics.
pub fn gp_of_unit_linear_critics(seed: u64, trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (zd, ad, n) = (6, 4, 8);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut g = Graph::new();
        let z = g.leaf(gaussian(&mut rng, n, zd, 3.0));
        let a = g.leaf(gaussian(&mut rng, n, ad, 3.0));
        let b = rng.sample(StandardNormal);

        let mut w = unit(&mut rng, zd);
        w.extend((0..ad).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let d = linear(w, b).bind(&mut g);
        let gp = gradient_penalty(&mut g, &d, z, a, false).unwrap();
        worst = worst.max(g.value(gp).item().unwrap().abs());

        let d = linear(unit(&mut rng, zd + ad), b).bind(&mut g);
        let gp = gradient_penalty(&mut g, &d, z, a, true).unwrap();
        worst = worst.max(g.value(gp).item().unwrap().abs());
    }
    worst
}

/// `L_V` when the seen-class table has a single entry: the softmax over one
/// class is 1 whatever the network does.
pub fn lv_with_one_seen_class(seed: u64, trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (zd, ad, n) = (5, 3, 7);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut g = Graph::new();
        let d1 = tanh_mlp(&mut rng, &[zd + ad, 8, 1]).bind(&mut g);
        let h = tanh_mlp(&mut rng, &[zd, 8, ad]).bind(&mut g);
        let a = gaussian(&mut rng, 1, ad, 1.0);
        let a_rows = Tensor::from_rows(&vec![a.row_slice(0); n]).unwrap();
        let b = batch(
            &mut g,
            gaussian(&mut rng, n, zd, 2.0),
            gaussian(&mut rng, n, zd, 2.0),
            a_rows.clone(),
            gaussian(&mut rng, n, ad, 1.0),
            vec![0; n],
        );
        let table = g.leaf(a);
        let terms = loss_align(&mut g, &d1, &h, &b, table).unwrap();
        worst = worst.max(g.value(terms.l_v).item().unwrap().abs());
    }
    worst
}

/// `|Δc_y - (1/2δ) ∂L_center/∂c_y|` on single-class batches, where the
/// batch mean and the class mean coincide.
pub fn center_update_identity(seed: u64, trials: usize) -> f64 {
    center_identity(seed, trials, true)
}

/// Mixed-class batches: the loss averages over the whole batch, so class
/// `y`'s gradient carries the factor `n_y / B` relative to `Δc_y`.
pub fn center_update_identity_mixed(seed: u64, trials: usize) -> f64 {
    center_identity(seed, trials, false)
}

fn center_identity(seed: u64, trials: usize, single_class: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dim, n_classes, n) = (4, 5, 12);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let delta = rng.gen_range(0.05..2.0);
        let hyper = Hyper { delta, ..Hyper::default() };
        let labels: Vec<usize> = if single_class {
            vec![rng.gen_range(0..n_classes); n]
        } else {
            (0..n).map(|_| rng.gen_range(0..n_classes)).collect()
        };
        let table = CenterTable {
            centers: gaussian(&mut rng, n_classes, dim, 1.0),
        };
        let (zv, za) = (gaussian(&mut rng, n, dim, 1.5), gaussian(&mut rng, n, dim, 1.5));
        let mut g = Graph::new();
        let b = batch(&mut g, zv.clone(), za.clone(), Tensor::zeros(n, 1), Tensor::zeros(n, 1), labels.clone());
        let c = g.leaf(table.centers.clone());
        let loss = loss_center(&mut g, &b, c, &hyper).unwrap();
        let grad = backward(&mut g, loss, &[c]).unwrap().remove(0);
        for (y, dc) in center_deltas(&table, &zv, &za, &labels).into_iter().enumerate() {
            let share = labels.iter().filter(|&&l| l == y).count() as f64 / n as f64;
            match dc {
                Some(dc) => {
                    for (k, v) in dc.iter().enumerate() {
                        let expect = grad.get(y, k) / (2.0 * delta * share);
                        worst = worst.max((v - expect).abs());
                    }
                }
                None => worst = worst.max(grad.row_slice(y).iter().fold(0.0, |m, v| m.max(v.abs()))),
            }
        }
    }
    worst
}

/// Adversarial part of `L_D2` (penalty switched off) when both fakes equal
/// the real pair: `1 - α - β = 0` makes it vanish for any critic.
pub fn d2_adversarial_cancellation(seed: u64, trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (zd, ad, n) = (5, 3, 9);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let hyper = Hyper {
            alpha: rng.gen_range(0.0..=1.0),
            lambda: 0.0,
            ..Hyper::default()
        };
        let mut g = Graph::new();
        let d2 = tanh_mlp(&mut rng, &[zd + ad, 10, 1]).bind(&mut g);
        let z = gaussian(&mut rng, n, zd, 1.0);
        let a = gaussian(&mut rng, n, ad, 1.0);
        let b = batch(&mut g, z.clone(), z, a.clone(), a, vec![0; n]);
        let eta = g.leaf(sample_eta(&mut rng, n));
        let l = loss_d2(&mut g, &d2, &b, &hyper, eta).unwrap();
        worst = worst.max(g.value(l).item().unwrap().abs());
    }
    worst
}
