use super::*;
use crate::adapters::AdapterKind;
use crate::rng::seeded;

fn small(n_layers: usize, d_model: usize) -> ModelConfig {
    ModelConfig { n_layers, d_model, n_heads: 2, d_ff: 2 * d_model, vocab_size: 256, max_seq_len: 16, seed: 7 }
}

/// Straight-line reference forward: explicit −∞ masking, full softmax per
/// row, no packing or tape.
fn brute_force(model: &TransformerModel, ids: &[usize], mask: &[bool]) -> Vec<Vec<Vec<f64>>> {
    let cfg = &model.config;
    let (d, heads) = (cfg.d_model, cfg.n_heads);
    let dh = d / heads;
    let n = ids.len();
    let dense = |w: &FrozenWeight| w.materialize().unwrap().into_owned();
    let tok = dense(&model.token_embedding);
    let pos = dense(&model.position_embedding);
    let matvec = |w: &Tensor, x: &[f64]| -> Vec<f64> { (0..w.rows()).map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum()).collect() };
    let layer_norm = |x: &[f64], p: &LayerNormParams| -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
        let s = var.max(1e-5).sqrt();
        x.iter().enumerate().map(|(i, v)| (v - mean) / s * p.gain.data()[i] + p.bias.data()[i]).collect()
    };
    let mut x: Vec<Vec<f64>> = (0..n).map(|i| (0..d).map(|c| tok.row(ids[i])[c] + pos.row(i)[c]).collect()).collect();
    let mut states = Vec::new();
    for block in &model.blocks {
        let w = |p: Projection| block.projection(p).effective_weight().unwrap().into_owned();
        let (wq, wk, wv, wo) = (w(Projection::Query), w(Projection::Key), w(Projection::Value), w(Projection::Output));
        let h: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, &block.ln1)).collect();
        let q: Vec<_> = h.iter().map(|r| matvec(&wq, r)).collect();
        let k: Vec<_> = h.iter().map(|r| matvec(&wk, r)).collect();
        let v: Vec<_> = h.iter().map(|r| matvec(&wv, r)).collect();
        let mut att = vec![vec![0.0; d]; n];
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        if j > i || !mask[j] {
                            f64::NEG_INFINITY
                        } else {
                            cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                        }
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..n {
                    for c in cols.clone() {
                        att[i][c] += e[j] / z * v[j][c];
                    }
                }
            }
        }
        for i in 0..n {
            let o = matvec(&wo, &att[i]);
            x[i].iter_mut().zip(o).for_each(|(a, b)| *a += b);
            let h2 = layer_norm(&x[i], &block.ln2);
            let mut f = matvec(&dense(&block.ff1), &h2);
            f.iter_mut().zip(block.ff1_bias.data()).for_each(|(a, b)| *a = (*a + b).max(0.0));
            let f = matvec(&dense(&block.ff2), &f);
            x[i].iter_mut().zip(f).zip(block.ff2_bias.data()).for_each(|((a, b), c)| *a += b + c);
        }
        states.push(x.clone());
    }
    states
}

fn live_rows_close(a: &Tensor, b: &[Vec<f64>], mask: &[bool], tol: f64) {
    for (i, row) in b.iter().enumerate() {
        if mask[i] {
            for (x, y) in a.row(i).iter().zip(row) {
                assert!((x - y).abs() <= tol, "row {i}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn default_config_matches_documented_shape() {
    let c = ModelConfig::default();
    assert_eq!((c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_seq_len), (12, 64, 4, 256, 256, 128));
}

#[test]
fn init_is_deterministic() {
    let a = init_model(&small(2, 16)).unwrap();
    let b = init_model(&small(2, 16)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.base_checksum(), b.base_checksum());
    let other = init_model(&ModelConfig { seed: 8, ..small(2, 16) }).unwrap();
    assert_ne!(a.base_checksum(), other.base_checksum());
}

#[test]
fn config_validation() {
    let bad = ModelConfig { d_model: 8, n_heads: 3, ..small(2, 8) };
    assert!(matches!(init_model(&bad), Err(ModelError::InvalidConfig(_))));
    assert!(init_model(&ModelConfig { n_layers: 0, ..small(2, 8) }).is_err());
    assert!(init_model(&ModelConfig { vocab_size: 0, ..small(2, 8) }).is_err());
}

#[test]
fn shape_contract() {
    let m = init_model(&small(2, 16)).unwrap();
    assert_eq!(m.blocks.len(), 2);
    let e = m.tokenize("hello").unwrap();
    let s = m.forward_with_hidden_states(&e.ids, &e.mask).unwrap();
    assert_eq!(s.n_layers(), 2);
    assert!(s.per_layer.iter().all(|t| t.shape() == [16, 16]));

    let m4 = init_model(&small(4, 8)).unwrap();
    let e = m4.tokenize("abc").unwrap();
    assert_eq!(m4.forward_with_hidden_states(&e.ids, &e.mask).unwrap().per_layer.len(), 4);
}

#[test]
fn matches_brute_force_reference() {
    let m = init_model(&small(3, 8)).unwrap();
    let e = m.tokenize("quality").unwrap();
    let s = m.forward_with_hidden_states(&e.ids, &e.mask).unwrap();
    let reference = brute_force(&m, &e.ids, &e.mask);
    for (t, r) in s.per_layer.iter().zip(&reference) {
        live_rows_close(t, r, &e.mask, 1e-9);
    }
}

#[test]
fn pad_tail_contents_do_not_leak() {
    let m = init_model(&small(2, 16)).unwrap();
    let e = m.tokenize("tail test").unwrap();
    let base = m.forward_with_hidden_states(&e.ids, &e.mask).unwrap();
    let mut ids = e.ids.clone();
    let live = e.live_len();
    // Arbitrary ids in masked positions, in reversed order.
    for (k, id) in ids[live..].iter_mut().rev().enumerate() {
        *id = 200 - k;
    }
    let shuffled = m.forward_with_hidden_states(&ids, &e.mask).unwrap();
    let reference = brute_force(&m, &ids, &e.mask);
    for layer in 0..2 {
        let b: Vec<Vec<f64>> = (0..16).map(|r| base.per_layer[layer].row(r).to_vec()).collect();
        live_rows_close(&shuffled.per_layer[layer], &b, &e.mask, 1e-9);
        live_rows_close(&shuffled.per_layer[layer], &reference[layer], &e.mask, 1e-9);
    }
}

#[test]
fn packed_batch_equals_single_sequence_runs() {
    let m = init_model(&small(2, 8)).unwrap();
    let encs: Vec<_> = ["first one", "b", "a third sentence"].iter().map(|t| m.tokenize(t).unwrap()).collect();
    let batch = TokenBatch::packed(&encs);
    assert_eq!(batch.rows(), encs.iter().map(|e| e.live_len()).sum::<usize>());
    let mut tape = Tape::new();
    let outs = m.forward_on_tape(&mut tape, &batch, None, 2).unwrap();
    let last = tape.tensor(outs[1]);
    for (e, seg) in encs.iter().zip(&batch.segments) {
        let single = m.forward_with_hidden_states(&e.ids, &e.mask).unwrap();
        for r in 0..seg.len {
            assert_eq!(last.row(seg.start + r), single.per_layer[1].row(r));
        }
    }
}

#[test]
fn causality() {
    let m = init_model(&small(2, 8)).unwrap();
    let e = m.tokenize("causal mask").unwrap();
    let base = m.forward_with_hidden_states(&e.ids, &e.mask).unwrap();
    let t = 4;
    let mut ids = e.ids.clone();
    ids[t] = (ids[t] + 17) % 256;
    let changed = m.forward_with_hidden_states(&ids, &e.mask).unwrap();
    for layer in 0..2 {
        for r in 0..t {
            assert_eq!(base.per_layer[layer].row(r), changed.per_layer[layer].row(r));
        }
        assert_ne!(base.per_layer[layer].row(t), changed.per_layer[layer].row(t));
    }
}

#[test]
fn out_of_range_token_is_rejected() {
    let m = init_model(&ModelConfig { vocab_size: 50, ..small(2, 8) }).unwrap();
    let err = m.forward_with_hidden_states(&[3, 60], &[true, true]).unwrap_err();
    assert!(matches!(err, ModelError::TokenOutOfRange { id: 60, vocab: 50 }));
}

#[test]
fn layer_indexing() {
    assert_eq!(resolve_layer(12, -7).unwrap(), 5);
    assert_eq!(resolve_layer(12, -1).unwrap(), 11);
    assert_eq!(resolve_layer(12, 0).unwrap(), 0);
    assert!(matches!(resolve_layer(4, -7), Err(ModelError::LayerOutOfRange { index: -7, n_layers: 4 })));
    assert!(resolve_layer(4, 4).is_err());

    let m = init_model(&small(4, 8)).unwrap();
    let e = m.tokenize("index").unwrap();
    let s = m.forward_with_hidden_states(&e.ids, &e.mask).unwrap();
    for k in 1..=4i64 {
        assert_eq!(s.select_layer(-k).unwrap(), s.select_layer(4 - k).unwrap());
    }
    assert_eq!(select_layer(&s, -1).unwrap(), &s.per_layer[3]);
}

#[test]
fn adapter_counting_formula() {
    let mut m = init_model(&ModelConfig::default()).unwrap();
    let cfg = AdapterConfig::new(AdapterKind::Lora, 8, 16.0);
    let n = m.attach_adapters(&cfg, &mut seeded(1)).unwrap();
    assert_eq!(n, 24_576);
    assert_eq!(m.adapter_params().iter().map(|t| t.numel()).sum::<usize>(), n);
    assert!(matches!(m.attach_adapters(&cfg, &mut seeded(1)), Err(ModelError::AdaptersAlreadyAttached)));

    let mut m = init_model(&small(2, 8)).unwrap();
    let err = m.attach_adapters(&AdapterConfig::default().with_targets(&[]), &mut seeded(1)).unwrap_err();
    assert!(matches!(err, ModelError::NoAdapterTargets));
}

#[test]
fn lorma_count_and_all_targets() {
    let mut m = init_model(&small(2, 8)).unwrap();
    let cfg = AdapterConfig::new(AdapterKind::Lorma, 4, 8.0).with_targets(&Projection::ALL);
    assert_eq!(m.attach_adapters(&cfg, &mut seeded(2)).unwrap(), 2 * 4 * 4 * (8 + 8));
}

#[test]
fn fresh_adapters_are_bitwise_identity() {
    for kind in [AdapterKind::Lora, AdapterKind::Lorma] {
        let base = init_model(&small(2, 8)).unwrap();
        let mut adapted = base.clone();
        adapted.attach_adapters(&AdapterConfig::new(kind, 4, 8.0).with_targets(&Projection::ALL), &mut seeded(3)).unwrap();
        let e = base.tokenize("identity").unwrap();
        let a = base.forward_with_hidden_states(&e.ids, &e.mask).unwrap();
        let b = adapted.forward_with_hidden_states(&e.ids, &e.mask).unwrap();
        for (x, y) in a.per_layer.iter().zip(&b.per_layer) {
            assert!(x.bit_eq(y));
        }
    }
}

#[test]
fn merged_model_matches_factored_model() {
    let mut m = init_model(&small(2, 8)).unwrap();
    m.attach_adapters(&AdapterConfig::new(AdapterKind::Lorma, 2, 4.0), &mut seeded(4)).unwrap();
    let mut rng = seeded(5);
    for t in m.adapter_params_mut() {
        let v = normal_vec(&mut rng, t.numel(), 0.1);
        t.assign(&v).unwrap();
    }
    let e = m.tokenize("merge me").unwrap();
    let factored = m.forward_with_hidden_states(&e.ids, &e.mask).unwrap();
    let mut merged = m.clone();
    merged.merge_adapters().unwrap();
    assert_eq!(merged.trainable_adapter_params(), 0);
    assert!(merged.merge_adapters().is_err());
    let out = merged.forward_with_hidden_states(&e.ids, &e.mask).unwrap();
    for (a, b) in factored.per_layer.iter().zip(&out.per_layer) {
        assert!(a.max_abs_diff(b).unwrap() < 1e-9);
    }
}

#[test]
fn quantized_base_round_trip_and_checksum() {
    let mut m = init_model(&small(2, 16)).unwrap();
    let dense = m.clone();
    m.quantize_base();
    assert!(m.is_quantized());
    assert_ne!(m.base_checksum(), dense.base_checksum());
    let before = m.base_checksum();

    let pairs = [(&dense.token_embedding, &m.token_embedding), (&dense.blocks[1].ff2, &m.blocks[1].ff2)];
    for (d, q) in pairs {
        let FrozenWeight::Quantized(qb) = q else { panic!("not quantized") };
        let orig = d.materialize().unwrap();
        let back = q.materialize().unwrap();
        for (b, (o, r)) in orig.data().chunks(QUANT_BLOCK).zip(back.data().chunks(QUANT_BLOCK)).enumerate() {
            let bound = qb.weights.error_bound(b);
            assert!(o.iter().zip(r).all(|(x, y)| (x - y).abs() <= bound));
        }
    }

    let e = m.tokenize("quantized").unwrap();
    let s1 = m.forward_with_hidden_states(&e.ids, &e.mask).unwrap();
    let s2 = m.forward_with_hidden_states(&e.ids, &e.mask).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(m.base_checksum(), before);
}

#[test]
fn checkpoint_serde_round_trip() {
    let mut m = init_model(&small(2, 8)).unwrap();
    m.attach_adapters(&AdapterConfig::new(AdapterKind::Lora, 2, 4.0), &mut seeded(6)).unwrap();
    m.quantize_base();
    let json = serde_json::to_string(&m).unwrap();
    let back: TransformerModel = serde_json::from_str(&json).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.base_checksum(), m.base_checksum());
}
