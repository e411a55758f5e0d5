//! Central finite differences against analytic gradients, through the full
//! model, for every training loss at 32-bit precision.

use clozefit_core::model::{
    backward, backward_from_hidden, forward, Mat, ModelConfig, Params, RtdHead,
};
use clozefit_core::objectives::{
    decoupled_label_loss_grad, decoupled_label_loss_multi_grad, label_conditioned_mlm_loss_grad,
    pet_ce_loss_grad, rtd_loss_grad, LabelRendering,
};
use clozefit_core::scalar::Scalar;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 50,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_len: 16,
        seed: 42,
    }
}

/// max over parameters of |analytic - fd| / max(|analytic|, |fd|, 1), the
/// denominator floor absorbing finite-difference round-off on near-zero
/// entries.
fn max_relative_error<S: Scalar>(
    params: &mut Params<S>,
    analytic: &Params<S>,
    loss_fn: &dyn Fn(&Params<S>) -> f64,
    step: f64,
) -> f64 {
    let grad_tensors: Vec<(String, Vec<f64>)> = analytic
        .named_tensors()
        .into_iter()
        .map(|t| (t.name, t.data.iter().map(|v| v.widen()).collect()))
        .collect();
    let h = S::from_f64_lossy(step);
    let mut max_rel: f64 = 0.0;
    for (ti, (_, grads)) in grad_tensors.iter().enumerate() {
        for i in 0..grads.len() {
            let orig = {
                let mut slots = params.tensors_mut();
                let x = slots[ti].1[i];
                slots[ti].1[i] = x + h;
                x
            };
            let up = loss_fn(params);
            {
                let mut slots = params.tensors_mut();
                slots[ti].1[i] = orig - h;
            }
            let down = loss_fn(params);
            {
                let mut slots = params.tensors_mut();
                slots[ti].1[i] = orig;
            }
            let fd = (up - down) / (2.0 * step);
            let a = grads[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-3;

#[test]
fn pet_loss_gradcheck_through_model() {
    let cfg = tiny_config();
    let mut params = Params::<f32>::init(&cfg).unwrap();
    let ids = [4u32, 9, 7, 0, 12, 3];
    let candidates = [5u32, 17];

    let loss_fn = |p: &Params<f32>| {
        let out = forward(p, &ids).unwrap();
        pet_ce_loss_grad(out.logits.row(3), &candidates, 0).unwrap().0.widen()
    };
    let out = forward(&params, &ids).unwrap();
    let (_, d_row) = pet_ce_loss_grad(out.logits.row(3), &candidates, 0).unwrap();
    let mut d_logits = Mat::zeros(out.logits.rows, out.logits.cols);
    d_logits.row_mut(3).copy_from_slice(&d_row);
    let grads = backward(&params, &out, &d_logits).unwrap();

    let err = max_relative_error(&mut params, &grads, &loss_fn, STEP);
    println!("pet gradcheck max relative error: {err:.3e}");
    assert!(err < TOL, "max relative error {err}");
}

#[test]
fn decoupled_loss_gradcheck_through_model() {
    let cfg = tiny_config();
    let mut params = Params::<f32>::init(&cfg).unwrap();
    let ids = [4u32, 9, 7, 0, 12, 3];
    let candidates = [5u32, 17];

    let loss_fn = |p: &Params<f32>| {
        let out = forward(p, &ids).unwrap();
        decoupled_label_loss_grad(out.logits.row(3), &candidates, 1).unwrap().0.widen()
    };
    let out = forward(&params, &ids).unwrap();
    let (_, d_row) = decoupled_label_loss_grad(out.logits.row(3), &candidates, 1).unwrap();
    let mut d_logits = Mat::zeros(out.logits.rows, out.logits.cols);
    d_logits.row_mut(3).copy_from_slice(&d_row);
    let grads = backward(&params, &out, &d_logits).unwrap();

    let err = max_relative_error(&mut params, &grads, &loss_fn, STEP);
    println!("decoupled gradcheck max relative error: {err:.3e}");
    assert!(err < TOL, "max relative error {err}");
}

/// Two renderings (2-token and 3-token labels), one forward pass each.
#[test]
fn decoupled_multi_token_gradcheck_through_model() {
    let cfg = tiny_config();
    let mut params = Params::<f32>::init(&cfg).unwrap();
    let ids_a = [4u32, 0, 0, 12, 3];
    let masks_a = [1usize, 2];
    let tokens_a = vec![5u32, 17];
    let ids_b = [4u32, 0, 0, 0, 12, 3];
    let masks_b = [1usize, 2, 3];
    let tokens_b = vec![5u32, 19, 22];

    let gather = |p: &Params<f32>| {
        let out_a = forward(p, &ids_a).unwrap();
        let out_b = forward(p, &ids_b).unwrap();
        let renderings = vec![
            LabelRendering {
                tokens: tokens_a.clone(),
                logits: masks_a.iter().map(|&m| out_a.logits.row(m).to_vec()).collect(),
            },
            LabelRendering {
                tokens: tokens_b.clone(),
                logits: masks_b.iter().map(|&m| out_b.logits.row(m).to_vec()).collect(),
            },
        ];
        (out_a, out_b, renderings)
    };

    let loss_fn = |p: &Params<f32>| {
        let (_, _, renderings) = gather(p);
        decoupled_label_loss_multi_grad(&renderings, 0).unwrap().0.widen()
    };

    let (out_a, out_b, renderings) = gather(&params);
    let (_, d_rows) = decoupled_label_loss_multi_grad(&renderings, 0).unwrap();
    let mut grads = Params::<f32>::zeros(&cfg).unwrap();
    for ((out, masks), rows) in
        [(&out_a, &masks_a[..]), (&out_b, &masks_b[..])].iter().zip(&d_rows)
    {
        let mut d_logits = Mat::zeros(out.logits.rows, out.logits.cols);
        for (&m, row) in masks.iter().zip(rows) {
            d_logits.row_mut(m).copy_from_slice(row);
        }
        grads.add_assign(&backward(&params, out, &d_logits).unwrap());
    }

    let err = max_relative_error(&mut params, &grads, &loss_fn, STEP);
    println!("multi-token gradcheck max relative error: {err:.3e}");
    assert!(err < TOL, "max relative error {err}");
}

/// Label-conditioned loss: two conditioned inputs differing at the inserted
/// label token, sharing masked positions [1, 4].
#[test]
fn label_conditioned_gradcheck_through_model() {
    let cfg = tiny_config();
    let mut params = Params::<f32>::init(&cfg).unwrap();
    let ids_pos = [4u32, 0, 7, 5, 0, 3];
    let ids_neg = [4u32, 0, 7, 17, 0, 3];
    let plan_positions = [1usize, 4];
    let originals = [9u32, 12];

    let gather = |p: &Params<f32>| {
        let out_pos = forward(p, &ids_pos).unwrap();
        let out_neg = forward(p, &ids_neg).unwrap();
        let rows = vec![
            plan_positions.iter().map(|&m| out_pos.logits.row(m).to_vec()).collect::<Vec<_>>(),
            plan_positions.iter().map(|&m| out_neg.logits.row(m).to_vec()).collect::<Vec<_>>(),
        ];
        (out_pos, out_neg, rows)
    };

    let loss_fn = |p: &Params<f32>| {
        let (_, _, rows) = gather(p);
        label_conditioned_mlm_loss_grad(&rows, &originals, 0, false).unwrap().0.widen()
    };

    let (out_pos, out_neg, rows) = gather(&params);
    let (_, d_rows) = label_conditioned_mlm_loss_grad(&rows, &originals, 0, false).unwrap();
    let mut grads = Params::<f32>::zeros(&cfg).unwrap();
    for (out, rows) in [&out_pos, &out_neg].iter().zip(&d_rows) {
        let mut d_logits = Mat::zeros(out.logits.rows, out.logits.cols);
        for (&m, row) in plan_positions.iter().zip(rows) {
            d_logits.row_mut(m).copy_from_slice(row);
        }
        grads.add_assign(&backward(&params, out, &d_logits).unwrap());
    }

    let err = max_relative_error(&mut params, &grads, &loss_fn, STEP);
    println!("label-conditioned gradcheck max relative error: {err:.3e}");
    assert!(err < TOL, "max relative error {err}");
}

/// Replaced-token-detection loss through the binary head and backbone.
#[test]
fn rtd_loss_gradcheck_through_model() {
    let cfg = tiny_config();
    let mut params = Params::<f32>::init(&cfg).unwrap();
    let head = RtdHead::<f32>::init(&cfg);
    let ids_pos = [4u32, 9, 5, 12];
    let ids_neg = [4u32, 9, 17, 12];
    let position = 2usize;

    let scores = |p: &Params<f32>| {
        let out_pos = forward(p, &ids_pos).unwrap();
        let out_neg = forward(p, &ids_neg).unwrap();
        let s = vec![
            head.score_at(&out_pos, position).unwrap(),
            head.score_at(&out_neg, position).unwrap(),
        ];
        (out_pos, out_neg, s)
    };

    let loss_fn = |p: &Params<f32>| {
        let (_, _, s) = scores(p);
        rtd_loss_grad(&s, 0).unwrap().0.widen()
    };

    let (out_pos, out_neg, s) = scores(&params);
    let (_, d_scores) = rtd_loss_grad(&s, 0).unwrap();
    let mut grads = Params::<f32>::zeros(&cfg).unwrap();
    for (out, &ds) in [&out_pos, &out_neg].iter().zip(&d_scores) {
        let mut d_hidden = Mat::zeros(out.hidden().rows, out.hidden().cols);
        for (d, &w) in d_hidden.row_mut(position).iter_mut().zip(&head.w) {
            *d = w * ds;
        }
        grads.add_assign(&backward_from_hidden(&params, out, &d_hidden).unwrap());
    }

    let err = max_relative_error(&mut params, &grads, &loss_fn, STEP);
    println!("rtd gradcheck max relative error: {err:.3e}");
    assert!(err < TOL, "max relative error {err}");

    // The vocabulary head is unused by this objective: its bias gradient is
    // identically zero while the backbone still receives signal.
    assert!(grads.out_bias.iter().all(|&g| g == 0.0));
    assert!(grads.layers[0].attn.wq.data.iter().any(|&g| g != 0.0));

    // Head gradients, checked by finite differences on the head weights.
    let mut head_grad = vec![0.0f64; cfg.d_model];
    let mut head_grad_b = 0.0f64;
    for (out, &ds) in [&out_pos, &out_neg].iter().zip(&d_scores) {
        for (g, &h) in head_grad.iter_mut().zip(out.hidden().row(position)) {
            *g += h.widen() * ds.widen();
        }
        head_grad_b += ds.widen();
    }
    let mut head_mut = head.clone();
    let head_loss = |h: &RtdHead<f32>| {
        let out_pos = forward(&params, &ids_pos).unwrap();
        let out_neg = forward(&params, &ids_neg).unwrap();
        let s = vec![
            h.score_at(&out_pos, position).unwrap(),
            h.score_at(&out_neg, position).unwrap(),
        ];
        rtd_loss_grad(&s, 0).unwrap().0.widen()
    };
    let mut max_rel: f64 = 0.0;
    for i in 0..cfg.d_model {
        let orig = head_mut.w[i];
        head_mut.w[i] = orig + STEP as f32;
        let up = head_loss(&head_mut);
        head_mut.w[i] = orig - STEP as f32;
        let down = head_loss(&head_mut);
        head_mut.w[i] = orig;
        let fd = (up - down) / (2.0 * STEP);
        let rel = (head_grad[i] - fd).abs() / head_grad[i].abs().max(fd.abs()).max(1.0);
        max_rel = max_rel.max(rel);
    }
    let _ = head_grad_b;
    println!("rtd head gradcheck max relative error: {max_rel:.3e}");
    assert!(max_rel < TOL);
}
