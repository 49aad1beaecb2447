use crashseq_core::model::{
    attention_weights, backward, encoder_forward, forward, loss_and_grad, predict_proba, project, relu_signature,
    Dropout, ModelConfig, ModelParams, PaddedBatch,
};
use ndarray::{s, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig { dropout_rate: 0.0, ..ModelConfig::new(8, 8, 1, 2) }
}

fn random_seq(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Array2<f32> {
    Array2::from_shape_simple_fn((t, d), || rng.random_range(-1.0f32..1.0))
}

fn batch_of<F: crashseq_core::model::Scalar>(seqs: &[Array2<f32>]) -> PaddedBatch<F> {
    let views: Vec<_> = seqs.iter().map(|s| s.view()).collect();
    PaddedBatch::from_views(&views).unwrap()
}

fn loss_at(batch: &PaddedBatch<f64>, labels: &[u8], p: &ModelParams<f64>, cfg: &ModelConfig) -> f64 {
    backward(batch, labels, p, cfg).unwrap().0
}

fn perturbed(p: &ModelParams<f64>, idx: usize, delta: f64) -> ModelParams<f64> {
    let mut q = p.clone();
    let mut seen = 0;
    for (_, mut t) in q.named_mut() {
        if idx < seen + t.len() {
            let flat = t.as_slice_mut().unwrap();
            flat[idx - seen] += delta;
            break;
        }
        seen += t.len();
    }
    q
}

fn flat_grad(g: &ModelParams<f64>, idx: usize) -> (String, f64) {
    let mut seen = 0;
    for (name, t) in g.named() {
        if idx < seen + t.len() {
            return (name, t.as_slice().unwrap()[idx - seen]);
        }
        seen += t.len();
    }
    unreachable!()
}

#[test]
fn analytic_gradients_match_central_differences() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = ModelParams::<f64>::random_full(&cfg, &mut rng, 0.5).unwrap();
    let seqs = [random_seq(&mut rng, 5, 8), random_seq(&mut rng, 3, 8)];
    let batch = batch_of::<f64>(&seqs);
    let labels = [1u8, 0];
    let (_, grads) = backward(&batch, &labels, &params, &cfg).unwrap();
    let base_sig = relu_signature(&batch, &params, &cfg).unwrap();
    let n = params.num_params();
    let eps = 1e-3;
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    while checked < 250 {
        let idx = rng.random_range(0..n);
        let plus = perturbed(&params, idx, eps);
        let minus = perturbed(&params, idx, -eps);
        if relu_signature(&batch, &plus, &cfg).unwrap() != base_sig
            || relu_signature(&batch, &minus, &cfg).unwrap() != base_sig
        {
            skipped += 1;
            continue;
        }
        let numeric = (loss_at(&batch, &labels, &plus, &cfg) - loss_at(&batch, &labels, &minus, &cfg)) / (2.0 * eps);
        let (name, analytic) = flat_grad(&grads, idx);
        // Some gradients are exactly zero (key biases cancel in the softmax), so
        // the denominator is floored well above the f64 differencing noise.
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(rel < 1e-4, "{name}[{idx}]: analytic {analytic:e} numeric {numeric:e} rel {rel:e}");
        worst = worst.max(rel);
        checked += 1;
    }
    assert!(skipped < 250, "too many kink crossings: {skipped}");
    eprintln!("worst relative error {worst:e}, {skipped} kink coordinates skipped");
}

#[test]
fn default_config_logits_shape_and_single_frame() {
    let cfg = ModelConfig::default();
    let params = ModelParams::<f32>::init(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seqs = [random_seq(&mut rng, 7, 2048), random_seq(&mut rng, 7, 2048)];
    let logits = forward(&batch_of::<f32>(&seqs), &params, &cfg, false, &mut rng).unwrap();
    assert_eq!(logits.dim(), (2, 2));
    let one = forward(&batch_of::<f32>(&[random_seq(&mut rng, 1, 2048)]), &params, &cfg, false, &mut rng).unwrap();
    assert!(one.iter().all(|v| v.is_finite()));
}

#[test]
fn projection_examples() {
    let cfg = ModelConfig::new(4, 4, 1, 2);
    let mut p = ModelParams::<f64>::zeros(&cfg).unwrap();
    let x = Array2::from_shape_fn((3, 4), |(t, j)| (t * 4 + j) as f32);
    let batch = batch_of::<f64>(std::slice::from_ref(&x));
    p.proj_b.fill(0.25);
    assert!(project(&batch, &p).unwrap().iter().all(|&v| v == 0.25));
    p.proj_b.fill(0.0);
    p.proj_w = Array2::eye(4);
    let z = project(&batch, &p).unwrap();
    assert_eq!(z.index_axis(Axis(0), 0), x.mapv(f64::from));
    p.proj_w = Array2::from_shape_fn((4, 4), |(r, c)| (r * 10 + c) as f64);
    p.proj_b = ndarray::arr1(&[1.0, 2.0, 3.0, 4.0]);
    let mut e1 = Array2::zeros((1, 4));
    e1[[0, 1]] = 1.0f32;
    let z = project(&batch_of::<f64>(&[e1]), &p).unwrap();
    assert_eq!(z.slice(s![0, 0, ..]).to_vec(), vec![2.0, 13.0, 24.0, 35.0]);
}

#[test]
fn padding_leaves_valid_outputs_unchanged() {
    let cfg = ModelConfig::new(16, 16, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = ModelParams::<f32>::random_full(&cfg, &mut rng, 0.3).unwrap();
    let x = random_seq(&mut rng, 4, 16);
    let long = random_seq(&mut rng, 9, 16);
    let alone = batch_of::<f32>(std::slice::from_ref(&x));
    let padded = batch_of::<f32>(&[x.clone(), long]);
    let la = forward(&alone, &params, &cfg, false, &mut rng).unwrap();
    let lp = forward(&padded, &params, &cfg, false, &mut rng).unwrap();
    for c in 0..2 {
        assert!((la[[0, c]] - lp[[0, c]]).abs() <= 1e-5);
    }

    let z_a = project(&alone, &params).unwrap();
    let z_p = project(&padded, &params).unwrap();
    let h_a = encoder_forward(&z_a, &alone.mask, &params, &cfg, false, &mut rng).unwrap();
    let h_p = encoder_forward(&z_p, &padded.mask, &params, &cfg, false, &mut rng).unwrap();
    assert_eq!(h_p.dim(), (2, 9, 16));
    let diff = (&h_a.slice(s![0, .., ..]) - &h_p.slice(s![0, ..4, ..])).mapv(f32::abs);
    assert!(diff.iter().all(|&d| d <= 1e-5));
    assert!(h_p.slice(s![0, 4.., ..]).iter().all(|&v| v == 0.0));
}

#[test]
fn inference_is_deterministic_and_training_dropout_is_keyed() {
    let cfg = ModelConfig::new(8, 8, 1, 2);
    let params = ModelParams::<f32>::init(&cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = batch_of::<f32>(&[random_seq(&mut rng, 6, 8), random_seq(&mut rng, 2, 8)]);
    let a1 = forward(&b, &params, &cfg, false, &mut rng).unwrap();
    let a2 = forward(&b, &params, &cfg, false, &mut rng).unwrap();
    assert_eq!(a1, a2);
    let t1 = forward(&b, &params, &cfg, true, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let t2 = forward(&b, &params, &cfg, true, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(t1, t2);
    assert_ne!(t1, a1);
    let p = predict_proba(&b, &params, &cfg).unwrap();
    for row in p.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn reversing_frames_changes_logits() {
    let cfg = ModelConfig::new(8, 8, 1, 2);
    let mut hits = 0;
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let params = ModelParams::<f32>::random_full(&cfg, &mut rng, 0.5).unwrap();
        let x = random_seq(&mut rng, 5, 8);
        let rev = x.slice(s![..;-1, ..]).to_owned();
        let a = forward(&batch_of::<f32>(&[x]), &params, &cfg, false, &mut rng).unwrap();
        let b = forward(&batch_of::<f32>(&[rev]), &params, &cfg, false, &mut rng).unwrap();
        if (&a - &b).iter().any(|d| d.abs() > 1e-6) {
            hits += 1;
        }
    }
    assert!(hits >= 19, "{hits}/20");
}

#[test]
fn zero_head_blocks_upstream_gradients() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut params = ModelParams::<f64>::random_full(&cfg, &mut rng, 0.5).unwrap();
    params.head_w.fill(0.0);
    params.head_b.fill(0.0);
    let b = batch_of::<f64>(&[random_seq(&mut rng, 5, 8), random_seq(&mut rng, 2, 8)]);
    let (loss, g) = backward(&b, &[0, 1], &params, &cfg).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    for (name, t) in g.named() {
        if !name.starts_with("head") {
            assert!(t.iter().all(|&v| v == 0.0), "{name}");
        }
    }
    assert!(g.head_w.iter().any(|&v| v != 0.0));
}

#[test]
fn duplicated_clip_doubles_its_contribution() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let params = ModelParams::<f64>::random_full(&cfg, &mut rng, 0.5).unwrap();
    let x = random_seq(&mut rng, 4, 8);
    let (l1, g1) = backward(&batch_of::<f64>(std::slice::from_ref(&x)), &[1], &params, &cfg).unwrap();
    let (l2, g2) = backward(&batch_of::<f64>(&[x.clone(), x]), &[1, 1], &params, &cfg).unwrap();
    // Summed contributions are 1x and 2x; after the batch mean they agree.
    assert_eq!(l1, l2);
    for ((_, a), (_, b)) in g1.named().iter().zip(g2.named().iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn seeded_dropout_gradients_are_reproducible() {
    let cfg = ModelConfig::new(8, 8, 1, 2);
    let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = batch_of::<f32>(&[random_seq(&mut rng, 5, 8), random_seq(&mut rng, 3, 8)]);
    let (la, ga) = loss_and_grad(&b, &[0, 1], &params, &cfg, Dropout::Seeded(77)).unwrap();
    let (lb, gb) = loss_and_grad(&b, &[0, 1], &params, &cfg, Dropout::Seeded(77)).unwrap();
    assert_eq!(la, lb);
    assert_eq!(ga, gb);
    let (lc, _) = loss_and_grad(&b, &[0, 1], &params, &cfg, Dropout::Off).unwrap();
    assert_ne!(la, lc);
}

#[test]
fn attention_rows_are_distributions_over_valid_keys() {
    let cfg = ModelConfig::new(8, 8, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = ModelParams::<f64>::random_full(&cfg, &mut rng, 0.5).unwrap();
    let b = batch_of::<f64>(&[random_seq(&mut rng, 6, 8), random_seq(&mut rng, 3, 8), random_seq(&mut rng, 1, 8)]);
    let a = attention_weights(&b, &params, &cfg).unwrap();
    assert_eq!(a.shape(), &[2, 3, 2, 6, 6]);
    for l in 0..2 {
        for (i, &len) in b.lengths.iter().enumerate() {
            for h in 0..2 {
                let m = a.slice(s![l, i, h, .., ..]);
                for q in 0..len {
                    assert!((m.row(q).sum() - 1.0).abs() < 1e-6);
                    assert!(m.slice(s![q, len..]).iter().all(|&v| v == 0.0));
                }
            }
        }
    }
    assert_eq!(a[[0, 2, 0, 0, 0]], 1.0);
}

#[test]
fn rejects_mismatched_inputs() {
    let cfg = tiny();
    let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let wrong_d = batch_of::<f32>(&[random_seq(&mut rng, 3, 5)]);
    assert!(forward(&wrong_d, &params, &cfg, false, &mut rng).is_err());
    let ok = batch_of::<f32>(&[random_seq(&mut rng, 3, 8)]);
    assert!(backward(&ok, &[2], &params, &cfg).is_err());
    assert!(backward(&ok, &[0, 1], &params, &cfg).is_err());
    let bad_mask = Array2::from_shape_vec((1, 3), vec![true, false, true]).unwrap();
    let z = Array3::<f32>::zeros((1, 3, 8));
    assert!(encoder_forward(&z, &bad_mask, &params, &cfg, false, &mut rng).is_err());
}
