//! Finite-difference verification of the full model backward pass.
//!
//! The numeric side only evaluates forward losses, so it stays independent
//! of the reverse-mode path under test.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tgl_core::model::{Model, ModelConfig};
use tgl_core::model::{Span, Tracking};
use tgl_core::tensor::GradMap;

fn check_cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 23,
        context_length: 16,
        n_blocks: 2,
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        tie_embeddings: true,
        seed: 42,
        lora: None,
    }
}

/// Max relative FD error over sampled coordinates of every parameter.
fn model_fd_error(
    model: &mut Model<f64>,
    tokens: &[usize],
    span: Option<Span>,
    h: f64,
    coords_per_param: usize,
    seed: u64,
) -> f64 {
    let eval = |m: &Model<f64>| -> f64 {
        match span {
            Some(s) => m.span_loss_value(tokens, s).unwrap(),
            None => m.lm_loss_value(tokens).unwrap(),
        }
    };
    let analytic: GradMap<f64> = match span {
        Some(s) => model.span_loss_grads(tokens, s).unwrap(),
        None => model.lm_loss_grads(tokens).unwrap(),
    };

    let ids: Vec<_> = model.store().iter().map(|(id, _)| id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for id in ids {
        let numel = model.store().value(id).numel();
        let mut coords: Vec<usize> = (0..numel).collect();
        if numel > coords_per_param {
            coords.shuffle(&mut rng);
            coords.truncate(coords_per_param);
        }
        for c in coords {
            let orig = model.store().value(id).data()[c];
            model.store_mut().get_mut(id).value.data_mut()[c] = orig + h;
            let f_plus = eval(model);
            model.store_mut().get_mut(id).value.data_mut()[c] = orig - h;
            let f_minus = eval(model);
            model.store_mut().get_mut(id).value.data_mut()[c] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic.get(id).map(|t| t.data()[c]).unwrap_or(0.0);
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn lm_loss_gradients_match_finite_differences() {
    let mut model = Model::<f64>::init(check_cfg()).unwrap();
    let tokens = [1, 7, 2, 19, 4, 11, 3, 8];
    let err = model_fd_error(&mut model, &tokens, None, 1e-5, 4, 9);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn span_loss_gradients_match_finite_differences() {
    let mut model = Model::<f64>::init(check_cfg()).unwrap();
    let tokens = [1, 7, 2, 19, 4, 11, 3, 8];
    let err = model_fd_error(&mut model, &tokens, Some(Span::new(4, 7)), 1e-5, 4, 10);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn lora_adapter_gradients_match_finite_differences() {
    let mut model = Model::<f64>::init(check_cfg()).unwrap();
    model.attach_lora(2, 4.0, &[0, 1]).unwrap();
    // Nonzero B so both adapter factors influence the loss.
    let b_ids: Vec<_> = model
        .store()
        .iter()
        .filter(|(_, p)| p.name.ends_with("lora_b"))
        .map(|(id, _)| id)
        .collect();
    for id in b_ids {
        for (i, v) in model
            .store_mut()
            .get_mut(id)
            .value
            .data_mut()
            .iter_mut()
            .enumerate()
        {
            *v = (i as f64 * 0.31).cos() * 0.05;
        }
    }
    let tokens = [5, 3, 17, 2, 9, 14];
    let err = model_fd_error(&mut model, &tokens, Some(Span::new(2, 5)), 1e-5, 4, 11);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn untied_model_gradients_match_finite_differences() {
    let mut cfg = check_cfg();
    cfg.tie_embeddings = false;
    let mut model = Model::<f64>::init(cfg).unwrap();
    let tokens = [2, 9, 12, 1, 6];
    let err = model_fd_error(&mut model, &tokens, None, 1e-5, 3, 12);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn grads_cover_exactly_tracked_params() {
    let model = Model::<f64>::init(check_cfg()).unwrap();
    let tokens = [1, 2, 3, 4];
    let (tape, loss) = model
        .lm_loss_tape(&tokens, Tracking::All, None)
        .unwrap();
    let grads = tape.graph.backward(loss).unwrap();
    // Tied model, short sequence: every parameter participates except the
    // unused tail rows of wte/wpe (gather keeps whole-table gradients).
    assert_eq!(grads.len(), model.store().len());
    for (id, p) in model.store().iter() {
        let g = grads.get(id).unwrap();
        assert_eq!(g.shape(), p.value.shape(), "{}", p.name);
        assert!(g.all_finite());
    }
}
