//! Forward and backward evaluation of the dense-block U-Net.
//!
//! Encoder: initial conv, then per level `dense_per_level` dense blocks
//! (`h <- [h, unit(h)]`) and a transition (1x1 unit + 2x2 average pooling).
//! Decoder, deepest first: concatenate the skip of the level below (except at
//! the bottom), residual block, x2 nearest upsampling, 3x3 unit. Head:
//! concatenate the full-resolution skip, 1x1 conv, sigmoid.
//!
//! A "unit" is conv -> leaky ReLU -> batch norm.

use std::collections::HashMap;

use super::config::{Architecture, ConvSpec};
use super::ops::{self, BnCache, Mode};
use super::params::{Gradients, Params};
use super::tensor::{Real, Tensor};
use super::ModelError;

struct UnitCache<T> {
    input: Tensor<T>,
    pre_act: Option<Tensor<T>>,
    bn: Option<BnCache<T>>,
}

/// Intermediate values recorded by a forward pass.
pub struct Tape<T> {
    units: HashMap<usize, UnitCache<T>>,
    /// `(running_mean slot, new mean, new var)` from train-mode batch norm.
    running: Vec<(usize, Vec<T>, Vec<T>)>,
    mode: Mode,
}

pub struct ForwardPass<T> {
    pub output: Tensor<T>,
    pub tape: Tape<T>,
}

impl<T: Real> Tape<T> {
    /// Signs of every recorded leaky ReLU pre-activation, in unit order.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut keys: Vec<_> = self.units.keys().copied().collect();
        keys.sort_unstable();
        keys.iter()
            .filter_map(|k| self.units[k].pre_act.as_ref())
            .flat_map(|z| z.data.iter().map(|&v| v > T::zero()))
            .collect()
    }
}

impl<T: Real> ForwardPass<T> {
    /// Writes train-mode running statistics into `params`.
    pub fn update_running_stats(&self, params: &mut Params<T>) {
        for (slot, mean, var) in &self.tape.running {
            params.tensors[*slot].data.clone_from(mean);
            params.tensors[*slot + 1].data.clone_from(var);
        }
    }
}

fn unit_forward<T: Real>(
    spec: &ConvSpec,
    params: &Params<T>,
    x: &Tensor<T>,
    tape: &mut Tape<T>,
    record: bool,
) -> Tensor<T> {
    let t = &params.tensors;
    let w = &t[spec.first].data;
    let b = &t[spec.first + 1].data;
    let z = ops::conv2d_forward(x, w, b, spec.cout, spec.k);
    if !spec.act_bn {
        if record {
            tape.units.insert(
                spec.first,
                UnitCache {
                    input: x.clone(),
                    pre_act: None,
                    bn: None,
                },
            );
        }
        return z;
    }
    let a = ops::leaky_relu(&z);
    let bn = ops::batch_norm_forward(
        &a,
        &t[spec.first + 2].data,
        &t[spec.first + 3].data,
        &t[spec.first + 4].data,
        &t[spec.first + 5].data,
        tape.mode,
    );
    if let Some((m, v)) = bn.running {
        tape.running.push((spec.first + 4, m, v));
    }
    if record {
        tape.units.insert(
            spec.first,
            UnitCache {
                input: x.clone(),
                pre_act: Some(z),
                bn: Some(bn.cache),
            },
        );
    }
    bn.out
}

fn unit_backward<T: Real>(
    spec: &ConvSpec,
    params: &Params<T>,
    tape: &Tape<T>,
    grad_out: &Tensor<T>,
    grads: &mut Gradients<T>,
) -> Tensor<T> {
    let cache = &tape.units[&spec.first];
    let g_pre = if spec.act_bn {
        let bn = ops::batch_norm_backward(
            cache.bn.as_ref().expect("bn cache"),
            &params.tensors[spec.first + 2].data,
            grad_out,
            tape.mode,
        );
        grads.tensors[spec.first + 2].data = bn.gamma;
        grads.tensors[spec.first + 3].data = bn.beta;
        ops::leaky_relu_backward(cache.pre_act.as_ref().expect("pre-activation"), &bn.input)
    } else {
        grad_out.clone()
    };
    let cg = ops::conv2d_backward(
        &cache.input,
        &params.tensors[spec.first].data,
        spec.cout,
        spec.k,
        &g_pre,
    );
    grads.tensors[spec.first].data = cg.weight;
    grads.tensors[spec.first + 1].data = cg.bias;
    cg.input
}

pub fn check_input<T: Real>(params: &Params<T>, x: &Tensor<T>) -> Result<(), ModelError> {
    let d = params.config.divisor();
    if x.c != params.config.in_channels || !x.h.is_multiple_of(d) || !x.w.is_multiple_of(d) || x.h == 0 || x.w == 0 || x.n == 0 {
        return Err(ModelError::ShapeMismatch(format!(
            "input {:?} needs {} channel(s) and non-zero H, W divisible by {d}",
            x.shape(),
            params.config.in_channels
        )));
    }
    Ok(())
}

fn run<T: Real>(
    arch: &Architecture,
    params: &Params<T>,
    x: &Tensor<T>,
    mode: Mode,
    record: bool,
) -> ForwardPass<T> {
    let mut tape = Tape {
        units: HashMap::new(),
        running: Vec::new(),
        mode,
    };
    let mut h = unit_forward(&arch.initial, params, x, &mut tape, record);
    let mut skips = Vec::with_capacity(arch.encoder.len());
    for level in &arch.encoder {
        for dense in &level.dense {
            let y = unit_forward(dense, params, &h, &mut tape, record);
            h = ops::concat(&h, &y);
        }
        let t = unit_forward(&level.transition, params, &h, &mut tape, record);
        skips.push(h);
        h = ops::avg_pool2(&t);
    }
    let depth = arch.encoder.len();
    for (j, dec) in arch.decoder.iter().enumerate() {
        if j > 0 {
            h = ops::concat(&h, &skips[depth - j]);
        }
        let r1 = unit_forward(&dec.res1, params, &h, &mut tape, record);
        let r2 = unit_forward(&dec.res2, params, &r1, &mut tape, record);
        let r = match &dec.projection {
            Some(p) => ops::add(&r2, &unit_forward(p, params, &h, &mut tape, record)),
            None => ops::add(&r2, &h),
        };
        h = unit_forward(&dec.up, params, &ops::upsample2(&r), &mut tape, record);
    }
    let h = ops::concat(&h, &skips[0]);
    let z = unit_forward(&arch.head, params, &h, &mut tape, record);
    ForwardPass {
        output: ops::sigmoid(&z),
        tape,
    }
}

/// Evaluates the network. `Train` mode normalizes with batch statistics and
/// records the updated running statistics in the returned tape.
pub fn forward<T: Real>(params: &Params<T>, x: &Tensor<T>, mode: Mode) -> Result<ForwardPass<T>, ModelError> {
    let arch = params.audit()?;
    check_input(params, x)?;
    Ok(run(&arch, params, x, mode, true))
}

/// Forward pass without recording intermediates.
pub fn predict<T: Real>(params: &Params<T>, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    let arch = params.audit()?;
    check_input(params, x)?;
    Ok(run(&arch, params, x, Mode::Eval, false).output)
}

/// Gradients of a scalar loss given `d loss / d output`.
pub fn backward_from<T: Real>(
    params: &Params<T>,
    pass: &ForwardPass<T>,
    grad_output: &Tensor<T>,
) -> Result<Gradients<T>, ModelError> {
    let arch = params.audit()?;
    if grad_output.shape() != pass.output.shape() {
        return Err(ModelError::ShapeMismatch(format!(
            "output gradient {:?} vs output {:?}",
            grad_output.shape(),
            pass.output.shape()
        )));
    }
    let tape = &pass.tape;
    let mut grads = params.zeros_like();
    let depth = arch.encoder.len();

    let gz = ops::sigmoid_backward(&pass.output, grad_output);
    let gh = unit_backward(&arch.head, params, tape, &gz, &mut grads);
    let dec_out = arch.decoder.last().map_or(0, |d| d.up.cout);
    let (mut g, g_skip0) = ops::split(&gh, dec_out);
    let mut skip_grads: Vec<Option<Tensor<T>>> = (0..depth).map(|_| None).collect();
    skip_grads[0] = Some(g_skip0);

    for (j, dec) in arch.decoder.iter().enumerate().rev() {
        let gu = unit_backward(&dec.up, params, tape, &g, &mut grads);
        let gr = ops::upsample2_backward(&gu);
        let g_r1 = unit_backward(&dec.res2, params, tape, &gr, &mut grads);
        let mut g_in = unit_backward(&dec.res1, params, tape, &g_r1, &mut grads);
        match &dec.projection {
            Some(p) => ops::add_assign(&mut g_in, &unit_backward(p, params, tape, &gr, &mut grads)),
            None => ops::add_assign(&mut g_in, &gr),
        }
        if j > 0 {
            let prev_out = arch.decoder[j - 1].up.cout;
            let (gh, gs) = ops::split(&g_in, prev_out);
            skip_grads[depth - j] = Some(gs);
            g = gh;
        } else {
            g = g_in;
        }
    }

    for (l, level) in arch.encoder.iter().enumerate().rev() {
        let gt = ops::avg_pool2_backward(&g);
        let mut gh = unit_backward(&level.transition, params, tape, &gt, &mut grads);
        if let Some(gs) = &skip_grads[l] {
            ops::add_assign(&mut gh, gs);
        }
        for dense in level.dense.iter().rev() {
            let (g_prev, g_y) = ops::split(&gh, dense.cin);
            let mut g_in = unit_backward(dense, params, tape, &g_y, &mut grads);
            ops::add_assign(&mut g_in, &g_prev);
            gh = g_in;
        }
        g = gh;
    }
    unit_backward(&arch.initial, params, tape, &g, &mut grads);
    Ok(grads)
}

/// Mean squared error over every element of the batch.
pub fn loss_l2<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T, ModelError> {
    if pred.shape() != target.shape() {
        return Err(ModelError::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = T::from_usize(pred.data.len().max(1)).unwrap();
    let sum: T = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(sum / n)
}

pub fn loss_l2_grad<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    let scale = T::lit(2.0) / T::from_usize(pred.data.len().max(1)).unwrap();
    let data = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &t)| scale * (p - t))
        .collect();
    Tensor { data, ..*pred }
}

/// Loss and its gradients with respect to every learnable tensor.
pub fn backward<T: Real>(
    params: &Params<T>,
    x: &Tensor<T>,
    target: &Tensor<T>,
    mode: Mode,
) -> Result<(T, Gradients<T>), ModelError> {
    let pass = forward(params, x, mode)?;
    let loss = loss_l2(&pass.output, target)?;
    let g = loss_l2_grad(&pass.output, target);
    Ok((loss, backward_from(params, &pass, &g)?))
}
