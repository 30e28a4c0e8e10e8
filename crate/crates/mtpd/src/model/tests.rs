use super::*;
use crate::autodiff::grad_check;

fn tiny_config(k: usize) -> ModelConfig {
    ModelConfig {
        dim: 8,
        n_layers: 1,
        n_heads: 2,
        n_kv_heads: 1,
        head_dim: 4,
        ffn_hidden_dim: 16,
        vocab_size: 16,
        max_seq_len: 16,
        rope_theta: 10000.0,
        norm_eps: 1e-5,
        num_mtp_heads: k,
        mtp_head_layers: 1,
        seed: 5,
        qk_norm: true,
        initializer_range: 0.02,
    }
}

fn param_bits(m: &MtpModel) -> Vec<u32> {
    m.params
        .entries()
        .iter()
        .flat_map(|e| e.value.data().iter().map(|x| x.to_bits()))
        .collect()
}

#[test]
fn same_seed_same_parameters() {
    let a = init_model(tiny_config(2)).unwrap();
    let b = init_model(tiny_config(2)).unwrap();
    assert_eq!(param_bits(&a), param_bits(&b));
    let c = init_model(ModelConfig {
        seed: 6,
        ..tiny_config(2)
    })
    .unwrap();
    assert_ne!(param_bits(&a), param_bits(&c));
}

#[test]
fn default_initializer_range_is_002() {
    assert_eq!(tiny_config(0).initializer_range, 0.02);
    // drawn weights actually use it: sample std should be near 0.02
    let m = init_model(ModelConfig {
        dim: 64,
        vocab_size: 256,
        ..tiny_config(0)
    })
    .unwrap();
    let emb = m.params.tensor(m.embedding);
    let var: f64 = emb.data().iter().map(|x| (*x as f64).powi(2)).sum::<f64>()
        / emb.numel() as f64;
    assert!((var.sqrt() - 0.02).abs() < 0.002, "std {}", var.sqrt());
}

#[test]
fn parameter_count_matches_closed_form() {
    // dim=64, 2 layers, V=256, K=1, desk head geometry
    let cfg = ModelConfig {
        dim: 64,
        n_layers: 2,
        n_heads: 4,
        n_kv_heads: 2,
        head_dim: 16,
        ffn_hidden_dim: 256,
        vocab_size: 256,
        max_seq_len: 128,
        rope_theta: 10000.0,
        norm_eps: 1e-5,
        num_mtp_heads: 1,
        mtp_head_layers: 1,
        seed: 0,
        qk_norm: true,
        initializer_range: 0.02,
    };
    let m = init_model(cfg.clone()).unwrap();
    let d = cfg.dim;
    let hd = cfg.n_heads * cfg.head_dim;
    let kd = cfg.n_kv_heads * cfg.head_dim;
    let f = cfg.ffn_hidden_dim;
    let v = cfg.vocab_size;
    let block = d + d * hd + 2 * (d * kd) + hd * d + 2 * cfg.head_dim + d + 2 * (d * f) + f * d;
    let expect = v * d + d * v + d + cfg.n_layers * block + cfg.num_mtp_heads * (2 * d + 2 * d * d + block);
    assert_eq!(m.num_params(), expect);
}

#[test]
fn trunk_is_causal_bitwise() {
    let m = init_model(tiny_config(1)).unwrap();
    let a = [1u16, 2, 3, 4, 5, 6];
    let mut b = a;
    b[5] = 9; // change the last token only
    let (_, la) = m.main_pass(&a).unwrap();
    let (_, lb) = m.main_pass(&b).unwrap();
    let v = m.config.vocab_size;
    // rows 0..5 (positions before the changed token) must match bitwise
    let bits = |t: &Tensor, row: usize| {
        t.data()[row * v..(row + 1) * v]
            .iter()
            .map(|x| x.to_bits())
            .collect::<Vec<_>>()
    };
    for row in 0..5 {
        assert_eq!(bits(&la, row), bits(&lb, row), "row {row}");
    }
    assert_ne!(bits(&la, 5), bits(&lb, 5));
}

#[test]
fn single_token_forward_shape() {
    let m = init_model(tiny_config(0)).unwrap();
    let (h, l) = m.main_pass(&[3]).unwrap();
    assert_eq!(h.shape(), &[1, 8]);
    assert_eq!(l.shape(), &[1, 16]);
}

#[test]
fn rejects_bad_tokens_and_lengths() {
    let m = init_model(tiny_config(0)).unwrap();
    assert!(matches!(
        m.main_pass(&[99]),
        Err(ModelError::TokenOutOfRange { .. })
    ));
    let long = vec![0u16; 17];
    assert!(matches!(
        m.main_pass(&long),
        Err(ModelError::SequenceTooLong { .. })
    ));
    let m1 = init_model(tiny_config(2)).unwrap();
    let mut g = Graph::inference();
    let bind = m1.bind_all_frozen(&mut g);
    assert!(matches!(
        m1.forward_train(&mut g, &bind, &[1, 2, 3]),
        Err(ModelError::RowTooShort { .. })
    ));
}

#[test]
fn shared_embedding_feeds_main_and_heads() {
    let mut m = init_model(tiny_config(1)).unwrap();
    let row = [1u16, 2, 3, 4, 5, 6];
    let run = |m: &MtpModel| {
        let mut g = Graph::inference();
        let bind = m.bind_all_frozen(&mut g);
        let out = m.forward_train(&mut g, &bind, &row).unwrap();
        (
            g.value(out.main_logits).data().to_vec(),
            g.value(out.head_logits[0]).data().to_vec(),
        )
    };
    let (main_a, head_a) = run(&m);
    let mut emb = m.params.tensor(m.embedding).data().to_vec();
    emb[2 * 8] += 0.5; // token 2 appears in both the trunk input and head windows
    m.set_param("embedding", emb).unwrap();
    let (main_b, head_b) = run(&m);
    assert_ne!(main_a, main_b, "embedding must feed the main path");
    assert_ne!(head_a, head_b, "embedding must feed the head path");
}

#[test]
fn heads_with_identical_parameters_emit_identical_logits() {
    let mut m = init_model(tiny_config(2)).unwrap();
    // copy head 1 params onto head 2
    let names: Vec<(String, Vec<f32>)> = m
        .params
        .entries()
        .iter()
        .filter(|e| e.group == head_group(1))
        .map(|e| (e.name.replacen("head.1.", "head.2.", 1), e.value.data().to_vec()))
        .collect();
    for (name, data) in names {
        m.set_param(&name, data).unwrap();
    }
    let row = [1u16, 2, 3, 4, 5, 6, 7];
    let mut g = Graph::inference();
    let bind = m.bind_all_frozen(&mut g);
    let (h0, _) = m.trunk_forward(&mut g, &bind, &row[..4]).unwrap();
    // same physical shift and inputs
    let (_, l1) = m.mtp_head_forward(&mut g, &bind, 1, 1, h0, &row).unwrap();
    let (_, l2) = m.mtp_head_forward(&mut g, &bind, 2, 1, h0, &row).unwrap();
    assert_eq!(g.value(l1).data(), g.value(l2).data());
}

#[test]
fn cascade_perturbation_flows_forward_only() {
    let mut m = init_model(tiny_config(2)).unwrap();
    let row = [1u16, 2, 3, 4, 5, 6, 7];
    let run = |m: &MtpModel| {
        let mut g = Graph::inference();
        let bind = m.bind_all_frozen(&mut g);
        let out = m.forward_train(&mut g, &bind, &row).unwrap();
        (
            g.value(out.main_logits).data().to_vec(),
            g.value(out.head_logits[0]).data().to_vec(),
            g.value(out.head_logits[1]).data().to_vec(),
        )
    };
    let (main_a, h1_a, h2_a) = run(&m);
    let mut fusion = m.params.tensor(m.heads[0].fusion).data().to_vec();
    fusion[0] += 0.25;
    m.set_param("head.1.fusion", fusion).unwrap();
    let (main_b, h1_b, h2_b) = run(&m);
    assert_eq!(main_a, main_b, "main path must not depend on head params");
    assert_ne!(h1_a, h1_b);
    assert_ne!(h2_a, h2_b, "head 2 consumes head 1 hidden states");
}

#[test]
fn target_shift_structure_is_exact() {
    // Last row token is target-only; token T+K-1 is embedded only by head K.
    let m = init_model(tiny_config(2)).unwrap();
    let t = 4;
    let row_a = [1u16, 2, 3, 4, 5, 6, 7];
    let mut row_b = row_a;
    row_b[t + 2] = 0; // index T+K = 6: pure target
    let run = |row: &[u16]| {
        let mut g = Graph::inference();
        let bind = m.bind_all_frozen(&mut g);
        let out = m.forward_train(&mut g, &bind, row).unwrap();
        let mut all = vec![g.value(out.main_logits).data().to_vec()];
        for h in &out.head_logits {
            all.push(g.value(*h).data().to_vec());
        }
        all
    };
    assert_eq!(run(&row_a), run(&row_b));

    let mut row_c = row_a;
    row_c[t + 1] = 0; // index T+K-1 = 5: embedded by head 2 only
    let a = run(&row_a);
    let c = run(&row_c);
    assert_eq!(a[0], c[0], "main logits see tokens 0..T-1 only");
    assert_eq!(a[1], c[1], "head 1 embeds up to index T");
    assert_ne!(a[2], c[2], "head 2 embeds index T+1");
}

#[test]
fn k0_degenerates_to_next_token_model() {
    let m = init_model(tiny_config(0)).unwrap();
    let row = [1u16, 2, 3, 4, 5];
    let mut g = Graph::inference();
    let bind = m.bind_all_frozen(&mut g);
    let out = m.forward_train(&mut g, &bind, &row).unwrap();
    assert_eq!(out.seq_len, 4);
    assert!(out.head_logits.is_empty());
    let (_, l) = m.main_pass(&row[..4]).unwrap();
    assert_eq!(g.value(out.main_logits).data(), l.data());
}

#[test]
fn full_forward_backward_grad_checks() {
    let m = init_model(tiny_config(1)).unwrap();
    let row = [1u16, 5, 9, 2, 7, 11];
    let mut g = Graph::new();
    let bind = m.bind(&mut g, &BTreeSet::new());
    let out = m.forward_train(&mut g, &bind, &row).unwrap();
    // cross-entropy on both output paths (realistic, well-conditioned loss)
    let t = out.seq_len;
    let ce = |g: &mut Graph, logits: Value, targets: &[u16]| {
        let lsm = g.log_softmax(logits, 1).unwrap();
        let ids = targets.iter().map(|&x| x as u32).collect();
        let picked = g.gather_last(lsm, ids, 1).unwrap();
        let mean = g.mean(picked);
        g.scale(mean, -1.0)
    };
    let lm = ce(&mut g, out.main_logits, &row[1..1 + t]);
    let lh = ce(&mut g, out.head_logits[0], &row[2..2 + t]);
    let loss = g.add(lm, lh).unwrap();
    let params: Vec<(String, Value)> = m
        .params
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| (e.name.clone(), bind.leaves[i]))
        .collect();
    let report = grad_check(&mut g, loss, &params, 1e-4, 1e-3).unwrap();
    assert!(
        report.passed,
        "max rel {} at {}",
        report.max_rel_error, report.worst_param
    );
}

// ---------------------------------------------------------------------------
// spreadsheet-style manual forward oracle
// ---------------------------------------------------------------------------

/// Independent straight-line f64 recomputation of a 1-layer, dim=2, V=3
/// model (single attention head, no qk-norm). Any convention drift between
/// this arithmetic and the graph implementation fails the comparison.
#[test]
fn manual_forward_oracle_dim2() {
    let cfg = ModelConfig {
        dim: 2,
        n_layers: 1,
        n_heads: 1,
        n_kv_heads: 1,
        head_dim: 2,
        ffn_hidden_dim: 4,
        vocab_size: 3,
        max_seq_len: 8,
        rope_theta: 10000.0,
        norm_eps: 1e-5,
        num_mtp_heads: 0,
        mtp_head_layers: 1,
        seed: 0,
        qk_norm: false,
        initializer_range: 0.02,
    };
    let mut m = init_model(cfg).unwrap();

    let emb = vec![0.10, -0.20, 0.30, 0.05, -0.15, 0.25];
    let wq = vec![0.20, -0.10, 0.15, 0.25];
    let wk = vec![-0.05, 0.30, 0.10, -0.20];
    let wv = vec![0.12, 0.08, -0.06, 0.18];
    let wo = vec![0.22, -0.14, 0.05, 0.17];
    let w_gate = vec![0.12, -0.03, 0.21, 0.07, -0.11, 0.09, 0.02, 0.16];
    let w_up = vec![0.05, 0.14, -0.09, 0.11, 0.08, -0.02, 0.13, 0.06];
    let w_down = vec![0.07, -0.12, 0.15, 0.04, -0.05, 0.10, 0.02, 0.09];
    let wout = vec![0.19, -0.08, 0.06, 0.12, 0.03, -0.16];
    let g_attn = vec![1.1, 0.9];
    let g_mlp = vec![0.95, 1.05];
    let g_final = vec![1.02, 0.98];

    m.set_param("embedding", emb.clone()).unwrap();
    m.set_param("output_projection", wout.clone()).unwrap();
    m.set_param("final_norm.gain", g_final.clone()).unwrap();
    m.set_param("trunk.0.attn_norm.gain", g_attn.clone()).unwrap();
    m.set_param("trunk.0.wq", wq.clone()).unwrap();
    m.set_param("trunk.0.wk", wk.clone()).unwrap();
    m.set_param("trunk.0.wv", wv.clone()).unwrap();
    m.set_param("trunk.0.wo", wo.clone()).unwrap();
    m.set_param("trunk.0.mlp_norm.gain", g_mlp.clone()).unwrap();
    m.set_param("trunk.0.w_gate", w_gate.clone()).unwrap();
    m.set_param("trunk.0.w_up", w_up.clone()).unwrap();
    m.set_param("trunk.0.w_down", w_down.clone()).unwrap();

    let tokens = [2u16, 0];
    let (_, logits) = m.main_pass(&tokens).unwrap();

    // -- manual recomputation in f64 --
    let eps = 1e-5f64;
    let rms = |x: &[f64], g: &[f64]| -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        x.iter().zip(g).map(|(v, gg)| v * inv * gg).collect()
    };
    let mat2 = |x: &[f64], w: &[f32], cols: usize| -> Vec<f64> {
        // x [2] times w [2, cols]
        (0..cols)
            .map(|c| x[0] * w[c] as f64 + x[1] * w[cols + c] as f64)
            .collect()
    };
    let f64v = |v: &[f32]| v.iter().map(|x| *x as f64).collect::<Vec<f64>>();

    // token embeddings: rows 2 and 0 of the table
    let x0: Vec<f64> = f64v(&emb[4..6]);
    let x1: Vec<f64> = f64v(&emb[0..2]);

    let a0 = rms(&x0, &f64v(&g_attn));
    let a1 = rms(&x1, &f64v(&g_attn));
    let q0 = mat2(&a0, &wq, 2);
    let q1 = mat2(&a1, &wq, 2);
    let k0 = mat2(&a0, &wk, 2);
    let k1 = mat2(&a1, &wk, 2);
    let v0 = mat2(&a0, &wv, 2);
    let v1 = mat2(&a1, &wv, 2);

    // rotary, head_dim 2 => one pair, inv_freq = 1, angle = position
    let rot = |v: &[f64], p: f64| -> Vec<f64> {
        vec![
            v[0] * p.cos() - v[1] * p.sin(),
            v[0] * p.sin() + v[1] * p.cos(),
        ]
    };
    // position 0 attends only to itself, so its rotated query never enters
    // a score; q0 is dropped
    let _ = q0;
    let q1 = rot(&q1, 1.0);
    let k0 = rot(&k0, 0.0);
    let k1 = rot(&k1, 1.0);

    let scale = 1.0 / 2.0f64.sqrt();
    // position 0 attends to itself only
    let attn0 = v0.clone();
    // position 1: softmax over two scores
    let s10 = (q1[0] * k0[0] + q1[1] * k0[1]) * scale;
    let s11 = (q1[0] * k1[0] + q1[1] * k1[1]) * scale;
    let mx = s10.max(s11);
    let (e0, e1) = ((s10 - mx).exp(), (s11 - mx).exp());
    let z = e0 + e1;
    let attn1: Vec<f64> = (0..2)
        .map(|j| (e0 * v0[j] + e1 * v1[j]) / z)
        .collect();

    let o0 = mat2(&attn0, &wo, 2);
    let o1 = mat2(&attn1, &wo, 2);
    let x0: Vec<f64> = vec![x0[0] + o0[0], x0[1] + o0[1]];
    let x1: Vec<f64> = vec![x1[0] + o1[0], x1[1] + o1[1]];

    let silu = |x: f64| x / (1.0 + (-x).exp());
    let mlp = |x: &[f64]| -> Vec<f64> {
        let mnorm = rms(x, &f64v(&g_mlp));
        let gate = mat2(&mnorm, &w_gate, 4);
        let up = mat2(&mnorm, &w_up, 4);
        let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
        (0..2)
            .map(|c| (0..4).map(|r| act[r] * w_down[r * 2 + c] as f64).sum::<f64>())
            .collect()
    };
    let d0 = mlp(&x0);
    let d1 = mlp(&x1);
    let x0: Vec<f64> = vec![x0[0] + d0[0], x0[1] + d0[1]];
    let x1: Vec<f64> = vec![x1[0] + d1[0], x1[1] + d1[1]];

    let n0 = rms(&x0, &f64v(&g_final));
    let n1 = rms(&x1, &f64v(&g_final));
    let l0 = mat2(&n0, &wout, 3);
    let l1 = mat2(&n1, &wout, 3);

    let got = logits.data();
    for (i, expect) in l0.iter().chain(&l1).enumerate() {
        assert!(
            (got[i] as f64 - expect).abs() < 1e-5,
            "logit {i}: impl {} vs manual {}",
            got[i],
            expect
        );
    }
}
