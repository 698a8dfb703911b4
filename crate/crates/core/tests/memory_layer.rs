use pkm_core::{
    init_memory, AccessAccumulator, KeyKind, KeyStore, MemoryConfig, MemoryLayer, Mode, Parameters, PkmError, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(d: usize, dq: usize, n_sub: usize, heads: usize, k: usize, bn: bool) -> MemoryConfig {
    MemoryConfig {
        input_dim: d,
        query_dim: dq,
        n_sub,
        heads,
        k,
        batch_norm: bn,
        keys: KeyKind::Product,
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Dense oracle: score every materialized key, sort all of them, softmax the
/// top-k and mix the values. No shared code with the layer's search path.
fn dense_forward(layer: &MemoryLayer<f64>, x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let k = layer.k();
    let mut out = vec![vec![0.0; x.cols()]; x.rows()];
    for head in &layer.heads {
        let (q, _) = head.query.forward(x, Mode::Eval).unwrap();
        let keys = match &head.keys {
            KeyStore::Product(index) => index.materialize(),
            KeyStore::Flat(keys) => keys.clone(),
        };
        for r in 0..x.rows() {
            let mut scored: Vec<(usize, f64)> = (0..keys.rows())
                .map(|i| (i, q.row(r).iter().zip(keys.row(i)).map(|(a, b)| a * b).sum()))
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let top = &scored[..k];
            let max = top[0].1;
            let z: f64 = top.iter().map(|(_, s)| (s - max).exp()).sum();
            for &(i, s) in top {
                let w = (s - max).exp() / z;
                for (o, v) in out[r].iter_mut().zip(layer.values.row(i)) {
                    *o += w * v;
                }
            }
        }
    }
    out
}

#[test]
fn forward_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..10 {
        let layer: MemoryLayer<f64> = init_memory(seed, config(4, 4, 4, 1, 2, false)).unwrap();
        let x = random(&mut rng, &[6, 4]);
        let (out, record) = layer.infer(&x).unwrap();
        let oracle = dense_forward(&layer, &x);
        for r in 0..6 {
            for c in 0..4 {
                assert!((out.row(r)[c] - oracle[r][c]).abs() < 1e-12);
            }
        }
        for r in 0..6 {
            let (_, w) = record.selection(0, r);
            assert!(w.iter().all(|&v| v > 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn k_one_returns_argmax_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let layer: MemoryLayer<f64> = init_memory(3, config(6, 8, 5, 1, 1, false)).unwrap();
    let x = random(&mut rng, &[5, 6]);
    let (out, record) = layer.infer(&x).unwrap();
    for r in 0..5 {
        let (idx, w) = record.selection(0, r);
        assert_eq!(w, &[1.0]);
        assert_eq!(out.row(r), layer.values.row(idx[0]));
    }
}

#[test]
fn identical_heads_double_the_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let single: MemoryLayer<f64> = init_memory(8, config(4, 6, 4, 1, 3, false)).unwrap();
    let mut cfg2 = single.config;
    cfg2.heads = 2;
    let doubled = MemoryLayer::new(cfg2, vec![single.heads[0].clone(), single.heads[0].clone()], single.values.clone()).unwrap();
    let x = random(&mut rng, &[7, 4]);
    let (a, _) = single.infer(&x).unwrap();
    let (b, _) = doubled.infer(&x).unwrap();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert_eq!(2.0 * u, *v);
    }
}

#[test]
fn positive_query_scaling_keeps_selection() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let layer: MemoryLayer<f64> = init_memory(10, config(5, 8, 8, 2, 4, false)).unwrap();
    let mut scaled = layer.clone();
    for head in &mut scaled.heads {
        head.query.weight.scale(3.5);
        head.query.bias.scale(3.5);
    }
    let x = random(&mut rng, &[9, 5]);
    let (_, a) = layer.infer(&x).unwrap();
    let (_, b) = scaled.infer(&x).unwrap();
    for h in 0..2 {
        for r in 0..9 {
            let mut ia = a.selection(h, r).0.to_vec();
            let mut ib = b.selection(h, r).0.to_vec();
            ia.sort_unstable();
            ib.sort_unstable();
            assert_eq!(ia, ib);
        }
    }
}

#[test]
fn product_and_flat_forward_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..5 {
        let layer: MemoryLayer<f64> = init_memory(seed, config(6, 8, 16, 3, 5, true)).unwrap();
        let mut flat = layer.clone();
        for head in &mut flat.heads {
            head.keys = head.keys.to_flat();
        }
        flat.config.keys = KeyKind::Flat;
        let x = random(&mut rng, &[12, 6]);
        let (a, ra) = layer.forward(&x, Mode::Train).unwrap();
        let (b, rb) = flat.forward(&x, Mode::Train).unwrap();
        for h in 0..3 {
            assert_eq!(ra.heads[h].indices, rb.heads[h].indices);
        }
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_k_one_is_constant_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let layer: MemoryLayer<f64> = init_memory(11, config(4, 4, 4, 1, 1, false)).unwrap();
    let x = random(&mut rng, &[1, 4]);
    let g = random(&mut rng, &[1, 4]);
    let (_, record) = layer.infer(&x).unwrap();
    let (grads, dx) = layer.backward(&record, &g).unwrap();
    let sel = record.selection(0, 0).0[0];
    assert_eq!(grads.values.touched(), 1);
    assert_eq!(grads.values.get(sel).unwrap(), g.row(0));
    assert_eq!(grads.params_sum_squares(), 0.0);
    assert!(dx.data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_touches_only_selected_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, heads, k) = (10, 3, 4);
    let layer: MemoryLayer<f64> = init_memory(12, config(8, 8, 32, heads, k, true)).unwrap();
    let x = random(&mut rng, &[n, 8]);
    let g = random(&mut rng, &[n, 8]);
    let (_, record) = layer.forward(&x, Mode::Train).unwrap();
    let (grads, _) = layer.backward(&record, &g).unwrap();
    let mut selected: Vec<usize> = record.heads.iter().flat_map(|h| h.indices.clone()).collect();
    selected.sort_unstable();
    selected.dedup();
    assert!(grads.values.touched() <= n * heads * k);
    let touched: Vec<usize> = grads.values.iter().map(|(r, _)| r).collect();
    assert_eq!(touched, selected);
}

#[test]
fn backward_rejects_shape_mismatch() {
    let layer: MemoryLayer<f64> = init_memory(1, config(4, 4, 4, 1, 2, false)).unwrap();
    let x = Tensor::zeros(&[3, 4]);
    let (_, record) = layer.infer(&x).unwrap();
    let bad = Tensor::zeros(&[2, 4]);
    assert!(matches!(layer.backward(&record, &bad), Err(PkmError::InvalidArgument(_))));
}

fn loss(layer: &MemoryLayer<f64>, x: &Tensor<f64>, g: &Tensor<f64>, mode: Mode) -> (f64, Vec<Vec<usize>>) {
    let (out, record) = layer.forward(x, mode).unwrap();
    let l = out.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
    // selected sets per row; order inside a row does not affect the loss
    let sets = record
        .heads
        .iter()
        .map(|h| {
            h.indices
                .chunks(record.k)
                .flat_map(|c| {
                    let mut c = c.to_vec();
                    c.sort_unstable();
                    c
                })
                .collect()
        })
        .collect();
    (l, sets)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na.max(nb) < 1e-10 {
        diff
    } else {
        diff / na.max(nb)
    }
}

/// Central differences of every parameter, value and input entry.
fn finite_difference_check(seed: u64, mode: Mode, bn: bool) -> f64 {
    let h = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let layer: MemoryLayer<f64> = init_memory(seed, config(4, 4, 4, 2, 2, bn)).unwrap();
    let x = random(&mut rng, &[5, 4]);
    let g = random(&mut rng, &[5, 4]);
    let (_, record) = layer.forward(&x, mode).unwrap();
    let (_, base_sel) = loss(&layer, &x, &g, mode);
    let (grads, dx) = layer.backward(&record, &g).unwrap();
    let mut worst: f64 = 0.0;

    let analytic: Vec<(String, Vec<f64>)> =
        grads.named_params("").into_iter().map(|(n, t)| (n, t.data().to_vec())).collect();
    let names: Vec<(String, usize)> = layer.named_params("").into_iter().map(|(n, t)| (n, t.len())).collect();
    assert_eq!(names.len(), analytic.len());
    for (p, (name, len)) in names.iter().enumerate() {
        assert_eq!(&analytic[p].0, name);
        let mut numeric = vec![0.0; *len];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let mut l2 = layer.clone();
                l2.named_params_mut("")[p].1.data_mut()[e] += delta;
                loss(&l2, &x, &g, mode)
            };
            let (lp, sp) = eval(h);
            let (lm, sm) = eval(-h);
            assert_eq!((sp, sm), (base_sel.clone(), base_sel.clone()), "selection moved under perturbation");
            *slot = (lp - lm) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic[p].1, &numeric));
    }

    let rows = layer.values.rows();
    let dim = layer.values.dim();
    let mut analytic_v = vec![0.0; rows * dim];
    for (r, gr) in grads.values.iter() {
        analytic_v[r * dim..(r + 1) * dim].copy_from_slice(gr);
    }
    let mut numeric_v = vec![0.0; rows * dim];
    for e in 0..rows * dim {
        let mut lp = layer.clone();
        lp.values.values.data_mut()[e] += h;
        let mut lm = layer.clone();
        lm.values.values.data_mut()[e] -= h;
        numeric_v[e] = (loss(&lp, &x, &g, mode).0 - loss(&lm, &x, &g, mode).0) / (2.0 * h);
    }
    worst = worst.max(rel_err(&analytic_v, &numeric_v));

    let mut numeric_x = vec![0.0; x.len()];
    for e in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[e] += h;
        let mut xm = x.clone();
        xm.data_mut()[e] -= h;
        numeric_x[e] = (loss(&layer, &xp, &g, mode).0 - loss(&layer, &xm, &g, mode).0) / (2.0 * h);
    }
    worst.max(rel_err(dx.data(), &numeric_x))
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..24 {
        let (mode, bn) = match seed % 3 {
            0 => (Mode::Train, true),
            1 => (Mode::Eval, true),
            _ => (Mode::Eval, false),
        };
        let err = finite_difference_check(seed, mode, bn);
        assert!(err < 1e-5, "seed {seed}: relative error {err}");
    }
}

#[test]
fn init_is_deterministic_and_heads_differ() {
    let cfg = config(8, 8, 16, 4, 4, true);
    let a: MemoryLayer<f32> = init_memory(42, cfg).unwrap();
    let b: MemoryLayer<f32> = init_memory(42, cfg).unwrap();
    assert_eq!(a, b);
    let c: MemoryLayer<f32> = init_memory(43, cfg).unwrap();
    assert_ne!(a, c);
    for h in 1..4 {
        assert_ne!(a.heads[0].keys, a.heads[h].keys);
        assert_ne!(a.heads[0].query.weight, a.heads[h].query.weight);
    }
}

#[test]
fn subkey_mean_within_three_sigma() {
    // Uniform(-b, b) has variance b²/3; the mean of n draws has σ = b/√(3n).
    let (n_sub, dq) = (512, 64);
    let layer: MemoryLayer<f64> = init_memory(5, config(8, dq, n_sub, 1, 4, false)).unwrap();
    let KeyStore::Product(index) = &layer.heads[0].keys else { unreachable!() };
    let bound = 1.0 / ((dq / 2) as f64).sqrt();
    for cb in [index.codebook_1(), index.codebook_2()] {
        let data = cb.vectors().data();
        assert!(data.iter().all(|v| v.abs() <= bound));
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let sigma = bound / (3.0 * data.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean} sigma {sigma}");
    }
}

#[test]
fn invalid_configs_rejected() {
    assert!(init_memory::<f32>(0, config(8, 7, 4, 1, 2, false)).is_err());
    assert!(init_memory::<f32>(0, config(8, 8, 4, 1, 5, false)).is_err());
    assert!(init_memory::<f32>(0, config(8, 8, 4, 0, 2, false)).is_err());
}

#[test]
fn single_row_train_batch_with_bn_errors() {
    let mut layer: MemoryLayer<f64> = init_memory(0, config(4, 4, 4, 1, 2, true)).unwrap();
    let x = Tensor::zeros(&[1, 4]);
    assert!(matches!(layer.forward_train(&x), Err(PkmError::DegenerateBatch { rows: 1 })));
    assert!(layer.infer(&x).is_ok());
}

#[test]
fn head_overlap_is_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let layer: MemoryLayer<f64> = init_memory(2, config(16, 16, 32, 4, 8, false)).unwrap();
    let x = random(&mut rng, &[64, 16]);
    let (_, record) = layer.infer(&x).unwrap();
    let overlap = record.head_overlap();
    assert!((0.0..=1.0).contains(&overlap));
    let same = MemoryLayer::new(
        layer.config,
        vec![layer.heads[0].clone(); 4],
        layer.values.clone(),
    )
    .unwrap();
    let (_, record) = same.infer(&x).unwrap();
    assert_eq!(record.head_overlap(), 1.0);
}

#[test]
fn accumulating_records_feeds_usage() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let layer: MemoryLayer<f64> = init_memory(2, config(8, 8, 8, 2, 4, false)).unwrap();
    let mut acc = AccessAccumulator::new(64);
    let mut last = 0.0;
    for _ in 0..5 {
        let x = random(&mut rng, &[16, 8]);
        let (_, record) = layer.infer(&x).unwrap();
        acc.accumulate(&record).unwrap();
        let u = acc.usage().unwrap();
        assert!(u >= last && u <= 100.0);
        last = u;
    }
    assert_eq!(acc.examples_seen(), 80);
    // each example deposits total weight H
    let total: f64 = acc.z_prime().iter().sum();
    assert!((total - 160.0).abs() < 1e-9);
}
