//! Encoders against a plain straight-line evaluation that shares no code
//! with the graph implementation.

use mla_core::model::{Model, ModelConfig, Vocab, EOS_ID, SOS_ID};
use mla_core::rng::Rng;
use mla_core::{Error, Tensor};

type M = Vec<Vec<f64>>;

fn get(model: &Model<f64>, name: &str) -> M {
    let t = &model.registry().by_name(name).unwrap().value;
    if t.shape().len() == 1 {
        vec![t.data().to_vec()]
    } else {
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }
}

fn vecp(model: &Model<f64>, name: &str) -> Vec<f64> {
    model
        .registry()
        .by_name(name)
        .unwrap()
        .value
        .data()
        .to_vec()
}

fn matmul(a: &M, b: &M) -> M {
    a.iter()
        .map(|r| {
            (0..b[0].len())
                .map(|j| r.iter().zip(b).map(|(x, bk)| x * bk[j]).sum())
                .collect()
        })
        .collect()
}

fn add_bias(a: &M, b: &[f64]) -> M {
    a.iter()
        .map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

fn layer_norm(a: &M, g: &[f64], b: &[f64], eps: f64) -> M {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .zip(g)
                .zip(b)
                .map(|((x, gi), bi)| (x - mean) / (var + eps).sqrt() * gi + bi)
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn attention(q: &M, k: &M, v: &M, heads: usize, causal: bool) -> M {
    let (n, d) = (q.len(), q[0].len());
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let c = h * dh..(h + 1) * dh;
        for i in 0..n {
            let lim = if causal { i + 1 } else { n };
            let s: Vec<f64> = (0..lim)
                .map(|j| c.clone().map(|t| q[i][t] * k[j][t]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..lim {
                for t in c.clone() {
                    out[i][t] += e[j] / z * v[j][t];
                }
            }
        }
    }
    out
}

fn layer(model: &Model<f64>, prefix: &str, l: usize, x: &M, causal: bool) -> M {
    let p = |n: &str| format!("{prefix}.layer{l}.{n}");
    let eps = model.config().layer_norm_eps;
    let a = layer_norm(x, &vecp(model, &p("ln1_g")), &vecp(model, &p("ln1_b")), eps);
    let lin =
        |x: &M, w: &str, b: &str| add_bias(&matmul(x, &get(model, &p(w))), &vecp(model, &p(b)));
    let q = lin(&a, "wq", "bq");
    let k = lin(&a, "wk", "bk");
    let v = lin(&a, "wv", "bv");
    let att = attention(&q, &k, &v, model.config().num_heads, causal);
    let h = add(x, &lin(&att, "wo", "bo"));
    let c = layer_norm(
        &h,
        &vecp(model, &p("ln2_g")),
        &vecp(model, &p("ln2_b")),
        eps,
    );
    let f: M = lin(&c, "w1", "b1")
        .iter()
        .map(|r| r.iter().map(|&x| gelu(x)).collect())
        .collect();
    add(&h, &lin(&f, "w2", "b2"))
}

fn acquirer(model: &Model<f64>, lang: &str, l: usize, x: &M) -> M {
    let p = |n: &str| format!("acquirer.{lang}.layer{l}.{n}");
    let down = add_bias(
        &matmul(x, &get(model, &p("w_down"))),
        &vecp(model, &p("b_down")),
    );
    let act: M = down
        .iter()
        .map(|r| r.iter().map(|&v| v.max(0.0)).collect())
        .collect();
    add(
        x,
        &add_bias(
            &matmul(&act, &get(model, &p("w_up"))),
            &vecp(model, &p("b_up")),
        ),
    )
}

fn rows_of(table: &M, ids: &[usize]) -> M {
    ids.iter().map(|&i| table[i].clone()).collect()
}

fn ref_native(model: &Model<f64>, ids: &[usize]) -> Vec<f64> {
    let pos: Vec<usize> = (0..ids.len()).collect();
    let mut x = add(
        &rows_of(&get(model, "text.tok_emb"), ids),
        &rows_of(&get(model, "text.pos_emb"), &pos),
    );
    for l in 0..model.config().num_layers {
        x = layer(model, "text", l, &x, true);
    }
    matmul(
        &vec![x[ids.len() - 1].clone()],
        &get(model, "heads.text_proj"),
    )[0]
    .clone()
}

fn ref_nonnative(model: &Model<f64>, ids: &[usize], lang: &str) -> Vec<f64> {
    let pos: Vec<usize> = (0..ids.len()).collect();
    let u = matmul(
        &rows_of(&get(model, "nonnative.tok_emb"), ids),
        &get(model, "nonnative.in_proj"),
    );
    let mut x = add(&u, &rows_of(&get(model, "text.pos_emb"), &pos));
    for l in 0..model.config().num_layers {
        x = layer(model, "text", l, &x, true);
        x = acquirer(model, lang, l, &x);
    }
    matmul(
        &vec![x[ids.len() - 1].clone()],
        &get(model, "heads.text_proj"),
    )[0]
    .clone()
}

fn ref_image(model: &Model<f64>, patches: &M) -> Vec<f64> {
    let mut x = vec![vecp(model, "vision.class_emb")];
    x.extend(matmul(patches, &get(model, "vision.patch_proj")));
    let x0 = add(&x, &get(model, "vision.pos_emb"));
    let mut x = x0;
    for l in 0..model.config().num_layers {
        x = layer(model, "vision", l, &x, false);
    }
    matmul(&vec![x[0].clone()], &get(model, "heads.image_proj"))[0].clone()
}

fn model(layers: usize, d: usize, heads: usize) -> Model<f64> {
    let cfg = ModelConfig {
        num_layers: layers,
        model_dim: d,
        num_heads: heads,
        ffn_dim: 3,
        proj_dim: 2,
        acquirer_hidden: 2,
        max_text_len: 6,
        patch_count: 3,
        patch_dim: 2,
        nonnative_emb_dim: 3,
        ..Default::default()
    };
    let nv = Vocab::new("native", ["a", "b", "c"]).unwrap();
    let xv = Vocab::new("nonnative", ["p", "q", "r", "s"]).unwrap();
    let mut m = Model::<f64>::new(cfg, nv, xv, 5).unwrap();
    m.register_language("xa", 9).unwrap();
    // Hand-set every parameter so the oracle sees no initialisation shortcuts.
    let mut rng = Rng::new(77);
    let names: Vec<String> = m.registry().iter().map(|(_, p)| p.name.clone()).collect();
    for n in names {
        let v = m.registry_mut().value_mut(&n).unwrap();
        for x in v.data_mut() {
            *x = rng.normal() * 0.8;
        }
    }
    m
}

fn assert_close(a: &[f64], b: &[f64]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < 1e-6, "{a:?} vs {b:?}");
    }
}

#[test]
fn native_text_matches_straight_line_reference() {
    for (l, d, h) in [(1, 2, 1), (2, 4, 2)] {
        let m = model(l, d, h);
        let ids = [SOS_ID, 3, 2, 4, EOS_ID];
        assert_close(
            m.encode_native_text(&ids).unwrap().data(),
            &ref_native(&m, &ids),
        );
    }
}

#[test]
fn nonnative_text_matches_straight_line_reference() {
    for (l, d, h) in [(1, 2, 1), (2, 4, 2)] {
        let m = model(l, d, h);
        let ids = [SOS_ID, 5, 2, EOS_ID];
        assert_close(
            m.encode_nonnative_text(&ids, "xa").unwrap().data(),
            &ref_nonnative(&m, &ids, "xa"),
        );
    }
}

#[test]
fn image_matches_straight_line_reference() {
    for (l, d, h) in [(1, 2, 1), (2, 4, 2)] {
        let m = model(l, d, h);
        let patches = vec![vec![0.5, -1.0], vec![2.0, 0.1], vec![-0.3, 0.7]];
        let t = Tensor::from_rows(&patches);
        assert_close(m.encode_image(&t).unwrap().data(), &ref_image(&m, &patches));
    }
}

#[test]
fn acquirer_hand_case() {
    let mut m = model(1, 2, 1);
    let cfg = ModelConfig {
        acquirer_hidden: 1,
        ..m.config().clone()
    };
    let (nv, xv) = (m.native_vocab().clone(), m.nonnative_vocab().clone());
    m = Model::new(cfg, nv, xv, 1).unwrap();
    m.register_language("xa", 2).unwrap();
    let r = m.registry_mut();
    *r.value_mut("acquirer.xa.layer0.w_down").unwrap() = Tensor::from_rows(&[vec![1.0], vec![0.0]]);
    *r.value_mut("acquirer.xa.layer0.w_up").unwrap() = Tensor::from_rows(&[vec![1.0, 0.0]]);
    let out = m
        .acquirer_forward(&Tensor::from_rows(&[vec![2.0, 3.0]]), "xa", 0)
        .unwrap();
    assert_eq!(out.data(), &[4.0, 3.0]);
    // Negative pre-activation: the ReLU closes the branch.
    let out = m
        .acquirer_forward(&Tensor::from_rows(&[vec![-2.0, 3.0]]), "xa", 0)
        .unwrap();
    assert_eq!(out.data(), &[-2.0, 3.0]);
}

#[test]
fn zero_up_projection_is_identity() {
    let mut m = model(2, 4, 2);
    for l in 0..2 {
        for p in ["w_up", "b_up"] {
            let v = m
                .registry_mut()
                .value_mut(&format!("acquirer.xa.layer{l}.{p}"))
                .unwrap();
            v.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let x = Tensor::from_rows(&[vec![0.3, -1.5, 2.0, 1e-7], vec![4.0, 0.0, -3.25, 9.0]]);
    assert!(m.acquirer_forward(&x, "xa", 1).unwrap().bit_eq(&x));
    let ids = vec![SOS_ID, 3, 4, EOS_ID];
    let full = m
        .encode_nonnative_texts(std::slice::from_ref(&ids), "xa")
        .unwrap();
    assert!(full.bit_eq(&m.encode_nonnative_bypassed(&[ids], "xa").unwrap()));
}

#[test]
fn encoders_are_deterministic_and_sized() {
    let m = model(2, 4, 2);
    let ids = [SOS_ID, 2, EOS_ID];
    let a = m.encode_native_text(&ids).unwrap();
    assert!(a.bit_eq(&m.encode_native_text(&ids).unwrap()));
    assert_eq!(a.shape(), [2]);
    let img = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]]);
    assert!(m
        .encode_image(&img)
        .unwrap()
        .bit_eq(&m.encode_image(&img).unwrap()));
}

#[test]
fn batched_encoding_matches_single() {
    let m = model(2, 4, 2);
    let seqs = vec![vec![SOS_ID, 2, EOS_ID], vec![SOS_ID, 3, 4, 2, EOS_ID]];
    let batch = m.encode_nonnative_texts(&seqs, "xa").unwrap();
    for (i, s) in seqs.iter().enumerate() {
        assert_close(
            batch.row(i),
            m.encode_nonnative_text(s, "xa").unwrap().data(),
        );
    }
}

#[test]
fn input_errors() {
    let m = model(1, 2, 1);
    assert!(matches!(
        m.encode_native_text(&[SOS_ID, 99, EOS_ID]),
        Err(Error::TokenId { .. })
    ));
    assert!(matches!(
        m.encode_native_text(&[SOS_ID, 2, 2, 2, 2, 2, EOS_ID]),
        Err(Error::Length { .. })
    ));
    assert!(matches!(
        m.encode_native_text(&[2, EOS_ID]),
        Err(Error::Framing)
    ));
    assert!(matches!(
        m.encode_nonnative_text(&[SOS_ID, EOS_ID], "zz"),
        Err(Error::UnknownLanguage(_))
    ));
    assert!(matches!(
        m.encode_image(&Tensor::zeros(&[2, 2])),
        Err(Error::Shape(_))
    ));
}

#[test]
fn shared_head_serves_both_paths() {
    let mut m = model(1, 2, 1);
    let (n, x) = (vec![SOS_ID, 2, EOS_ID], vec![SOS_ID, 3, EOS_ID]);
    let (n0, x0) = (
        m.encode_native_text(&n).unwrap(),
        m.encode_nonnative_text(&x, "xa").unwrap(),
    );
    m.registry_mut()
        .value_mut("heads.text_proj")
        .unwrap()
        .data_mut()[0] += 1.0;
    assert!(!n0.bit_eq(&m.encode_native_text(&n).unwrap()));
    assert!(!x0.bit_eq(&m.encode_nonnative_text(&x, "xa").unwrap()));
}
