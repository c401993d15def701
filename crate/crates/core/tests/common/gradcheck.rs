//! Finite-difference oracle, independent of the analytical backward code.

use octa_restore::model::ops::Mode;
use octa_restore::model::{backward, build_params, forward, loss_l2, Params, Tensor, UNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;

fn step() -> f64 {
    std::env::var("GC_STEP").ok().and_then(|s| s.parse().ok()).unwrap_or(STEP)
}
pub const TOLERANCE: f64 = 1e-3;

pub fn random_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(n, c, h, w, data)
}

pub fn random_vec(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_error<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> f64 {
    let a: Vec<f64> = a.iter().map(|&v| v.into()).collect();
    let b: Vec<f64> = b.iter().map(|&v| v.into()).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let scale = norm(&a).max(norm(&b));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

/// Checks `d/dx` and `d/dp` of `sum(f(x, p) * r)` for a random projection `r`.
#[allow(clippy::too_many_arguments)]
pub fn check_layer(
    name: &str,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: impl Fn(&Tensor<f64>, &[f64]) -> Tensor<f64>,
    n_params: usize,
    grad: impl Fn(&Tensor<f64>, &[f64], &Tensor<f64>) -> (Tensor<f64>, Vec<f64>),
) -> f64 {
    // keep inputs away from the leaky ReLU kink
    let x = random_tensor(n, c, h, w, 1).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let p: Vec<f64> = random_vec(n_params, 2).iter().map(|v| v + 0.5).collect();
    let out = f(&x, &p);
    let r = random_tensor(out.n, out.c, out.h, out.w, 3);
    let (gx, gp) = grad(&x, &p, &r);

    let mut fd_x = vec![0.0; x.data.len()];
    for (i, slot) in fd_x.iter_mut().enumerate() {
        let mut xp = x.clone();
        xp.data[i] += STEP;
        let mut xm = x.clone();
        xm.data[i] -= STEP;
        *slot = (dot(&f(&xp, &p), &r) - dot(&f(&xm, &p), &r)) / (2.0 * STEP);
    }
    let mut fd_p = vec![0.0; p.len()];
    for (i, slot) in fd_p.iter_mut().enumerate() {
        let mut pp = p.clone();
        pp[i] += STEP;
        let mut pm = p.clone();
        pm[i] -= STEP;
        *slot = (dot(&f(&x, &pp), &r) - dot(&f(&x, &pm), &r)) / (2.0 * STEP);
    }
    let ex = rel_error(&gx.data, &fd_x);
    let ep = rel_error(&gp, &fd_p);
    assert!(ex < TOLERANCE, "{name} input gradient: {ex:e}");
    assert!(ep < TOLERANCE, "{name} parameter gradient: {ep:e}");
    ex.max(ep)
}

/// Perturbs initialization so biases, BN shifts and running statistics are
/// all non-trivial.
pub fn jittered_params(cfg: &UNetConfig, seed: u64) -> Params<f64> {
    let mut p = build_params(cfg, seed).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for t in &mut p.tensors {
        for v in &mut t.data {
            if t.name.ends_with("running_var") || t.name.ends_with("gamma") {
                *v = rng.gen_range(0.6..1.4);
            } else if !t.name.ends_with(".weight") {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
    }
    p
}

fn loss_at(params: &Params<f64>, x: &Tensor<f64>, y: &Tensor<f64>, mode: Mode) -> (f64, Vec<bool>) {
    let pass = forward(params, x, mode).unwrap();
    (loss_l2(&pass.output, y).unwrap(), pass.tape.activation_pattern())
}

/// Worst per-tensor relative error over tensors whose name passes `select`.
/// Coordinates whose `+-h` perturbation flips any leaky ReLU are skipped,
/// since the central difference straddles a kink there.
pub fn check_network(
    cfg: &UNetConfig,
    h: usize,
    w: usize,
    n: usize,
    mode: Mode,
    seed: u64,
    select: impl Fn(&str) -> bool,
) -> f64 {
    let params = jittered_params(cfg, seed);
    let x = random_tensor(n, 1, h, w, seed + 1).map(|v| 0.5 * (v + 1.0));
    let y = random_tensor(n, 1, h, w, seed + 2).map(|v| 0.5 * (v + 1.0));
    let (_, grads) = backward(&params, &x, &y, mode).unwrap();
    let base = loss_at(&params, &x, &y, mode).1;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let (mut kept, mut total) = (0, 0);
    for (k, t) in params.tensors.iter().enumerate() {
        if !t.learnable || !select(&t.name) {
            continue;
        }
        checked += 1;
        let (mut analytic, mut fd) = (Vec::new(), Vec::new());
        for i in 0..t.data.len() {
            let mut pp = params.clone();
            pp.tensors[k].data[i] += step();
            let mut pm = params.clone();
            pm.tensors[k].data[i] -= step();
            let (lp, sp) = loss_at(&pp, &x, &y, mode);
            let (lm, sm) = loss_at(&pm, &x, &y, mode);
            if sp != base || sm != base {
                continue;
            }
            analytic.push(grads.tensors[k].data[i]);
            fd.push((lp - lm) / (2.0 * step()));
        }
        kept += fd.len();
        total += t.data.len();
        if fd.is_empty() {
            continue;
        }
        let e = rel_error(&analytic, &fd);
        worst = worst.max(e);
    }
    assert!(checked > 0, "no tensors selected");
    assert!(kept * 4 >= total, "only {kept} of {total} coordinates clear of kinks");
    worst
}
