//! Finite-difference checks of every differentiable operation, both
//! objectives, and the encoders end to end.

use super::{grad_check_detailed, LossFn, DEFAULT_EPS};
use crate::error::Result;
use crate::graph::{Graph, Segment, Var};
use crate::model::{Binder, Model, ModelConfig, Vocab, EOS_ID, SOS_ID};
use crate::objectives::{joint_loss, le_loss, nlt_loss};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckCase {
    pub name: String,
    pub rel_error: f64,
    pub coords: usize,
}

impl CheckCase {
    pub fn passed(&self) -> bool {
        self.rel_error < TOLERANCE
    }
}

fn run(
    name: &str,
    f: &LossFn<'_>,
    params: &[Tensor<f64>],
    max_coords: Option<usize>,
    seed: u64,
) -> Result<CheckCase> {
    let checks = grad_check_detailed(f, params, DEFAULT_EPS, max_coords, seed)?;
    Ok(CheckCase {
        name: name.to_string(),
        rel_error: checks.iter().map(|c| c.rel_error).fold(0.0, f64::max),
        coords: checks.iter().map(|c| c.coords_checked).sum(),
    })
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output coordinate matters.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = Rng::new(seed).gaussian(g.value(out).shape(), 1.0);
    let wv = g.constant(w);
    let p = g.mul(out, wv)?;
    Ok(g.sum(p))
}

/// One case per graph operation and per objective.
pub fn op_suite(seed: u64) -> Result<Vec<CheckCase>> {
    let mut rng = Rng::derive(seed, 0);
    let mut t = |shape: &[usize]| rng.gaussian::<f64>(shape, 1.0);
    let (a, b, c) = (t(&[3, 4]), t(&[4, 5]), t(&[3, 4]));
    let (row, sq) = (t(&[4]), t(&[4, 4]));
    let (q, k, v) = (t(&[7, 4]), t(&[7, 4]), t(&[7, 4]));
    let (x6, y6) = (t(&[5, 6]), t(&[5, 6]));
    let mut out = Vec::new();
    let mut case = |name: &str, f: &LossFn<'_>, p: &[Tensor<f64>]| -> Result<()> {
        out.push(run(name, f, p, None, seed)?);
        Ok(())
    };
    case(
        "matmul",
        &|g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 1)
        },
        &[a.clone(), b.clone()],
    )?;
    case(
        "add",
        &|g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 2)
        },
        &[a.clone(), c.clone()],
    )?;
    case(
        "sub",
        &|g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, 3)
        },
        &[a.clone(), c.clone()],
    )?;
    case(
        "mul",
        &|g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 4)
        },
        &[a.clone(), c.clone()],
    )?;
    case(
        "add_row",
        &|g, v| {
            let y = g.add_row(v[0], v[1])?;
            project(g, y, 5)
        },
        &[a.clone(), row.clone()],
    )?;
    case(
        "scale",
        &|g, v| {
            let y = g.scale(v[0], 2.5);
            project(g, y, 6)
        },
        std::slice::from_ref(&a),
    )?;
    case(
        "relu",
        &|g, v| {
            let y = g.relu(v[0]);
            project(g, y, 7)
        },
        std::slice::from_ref(&a),
    )?;
    case(
        "gelu",
        &|g, v| {
            let y = g.gelu(v[0]);
            project(g, y, 8)
        },
        std::slice::from_ref(&a),
    )?;
    case(
        "layer_norm",
        &|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, y, 9)
        },
        &[a.clone(), row.clone(), t(&[4])],
    )?;
    case(
        "softmax_rows",
        &|g, v| {
            let y = g.softmax_rows(v[0], None)?;
            project(g, y, 10)
        },
        std::slice::from_ref(&sq),
    )?;
    let mask = [
        true, false, true, true, false, true, true, true, true, true, false, true, true, true,
        true, false,
    ];
    case(
        "softmax_rows_masked",
        &|g, v| {
            let y = g.softmax_rows(v[0], Some(&mask))?;
            project(g, y, 11)
        },
        std::slice::from_ref(&sq),
    )?;
    case(
        "select_rows",
        &|g, v| {
            let y = g.select_rows(v[0], &[2, 0, 2, 1])?;
            project(g, y, 12)
        },
        std::slice::from_ref(&a),
    )?;
    case(
        "concat_rows",
        &|g, v| {
            let y = g.concat_rows(&[v[0], v[1]])?;
            project(g, y, 13)
        },
        &[a.clone(), c.clone()],
    )?;
    let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 4 }];
    for (name, causal) in [
        ("attention_causal", true),
        ("attention_bidirectional", false),
    ] {
        case(
            name,
            &|g, v| {
                let y = g.attention(v[0], v[1], v[2], &segs, 2, causal)?;
                project(g, y, 14)
            },
            &[q.clone(), k.clone(), v.clone()],
        )?;
    }
    case(
        "normalize_rows",
        &|g, v| {
            let y = g.normalize_rows(v[0])?;
            project(g, y, 15)
        },
        std::slice::from_ref(&a),
    )?;
    case(
        "transpose",
        &|g, v| {
            let y = g.transpose(v[0]);
            project(g, y, 16)
        },
        std::slice::from_ref(&a),
    )?;
    case(
        "sum",
        &|g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        },
        std::slice::from_ref(&a),
    )?;
    case(
        "diag_cross_entropy",
        &|g, v| g.diag_cross_entropy(v[0]),
        std::slice::from_ref(&sq),
    )?;
    case(
        "nlt_loss",
        &|g, v| nlt_loss(g, v[0], v[1]),
        &[x6.clone(), y6.clone()],
    )?;
    for tau in [1.0, 0.07, 0.01] {
        case(
            &format!("le_loss_tau_{tau}"),
            &|g, v| le_loss(g, v[0], v[1], tau),
            &[x6.clone(), y6.clone()],
        )?;
    }
    case(
        "joint_loss",
        &|g, v| joint_loss(g, v[0], v[1], v[2], v[3], 0.07),
        &[x6.clone(), y6.clone(), t(&[5, 6]), t(&[5, 6])],
    )?;
    Ok(out)
}

fn tiny_model(seed: u64) -> Result<Model<f64>> {
    let cfg = ModelConfig {
        num_layers: 2,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 12,
        proj_dim: 6,
        acquirer_hidden: 3,
        max_text_len: 6,
        patch_count: 3,
        patch_dim: 4,
        nonnative_emb_dim: 5,
        ..Default::default()
    };
    let nv = Vocab::new("native", ["a", "b", "c", "d"])?;
    let xv = Vocab::new("nonnative", ["p", "q", "r", "s", "t"])?;
    let mut m = Model::<f64>::new(cfg, nv, xv, seed)?;
    m.register_language("xa", seed ^ 1)?;
    // Nonzero up-projections so gradients reach the down-projections.
    let mut rng = Rng::derive(seed, 9);
    for l in 0..2 {
        for p in ["w_up", "b_up"] {
            let v = m
                .registry_mut()
                .value_mut(&format!("acquirer.xa.layer{l}.{p}"))?;
            *v = rng.gaussian(v.shape(), 0.3);
        }
    }
    Ok(m)
}

/// Checks gradients through the full encoders and both objectives with
/// respect to every parameter family, on a small 64-bit model. At most
/// `max_coords` coordinates are sampled per tensor.
pub fn model_suite(seed: u64, max_coords: Option<usize>) -> Result<Vec<CheckCase>> {
    let m = tiny_model(seed)?;
    let texts = vec![
        vec![SOS_ID, 2, 3, EOS_ID],
        vec![SOS_ID, 4, EOS_ID],
        vec![SOS_ID, 5, 2, 6, EOS_ID],
    ];
    let native = vec![
        vec![SOS_ID, 2, 3, EOS_ID],
        vec![SOS_ID, 5, EOS_ID],
        vec![SOS_ID, 4, 2, 3, EOS_ID],
    ];
    let mut rng = Rng::derive(seed, 3);
    let images: Vec<Tensor<f64>> = (0..3).map(|_| rng.gaussian(&[3, 4], 1.0)).collect();
    let targets: Tensor<f64> = rng.gaussian(&[3, 6], 1.0);

    let acq: Vec<String> = (0..2)
        .flat_map(|l| {
            ["w_down", "b_down", "w_up", "b_up"].map(|p| format!("acquirer.xa.layer{l}.{p}"))
        })
        .collect();
    let emb = vec![
        "nonnative.tok_emb".to_string(),
        "nonnative.in_proj".to_string(),
    ];
    let text: Vec<String> = [
        "text.tok_emb",
        "text.pos_emb",
        "text.layer0.wq",
        "text.layer1.ln2_g",
        "text.layer1.w1",
        "heads.text_proj",
    ]
    .map(String::from)
    .to_vec();
    let vision: Vec<String> = [
        "vision.patch_proj",
        "vision.class_emb",
        "vision.pos_emb",
        "vision.layer0.wk",
        "vision.layer1.b2",
        "heads.image_proj",
    ]
    .map(String::from)
    .to_vec();

    let values = |names: &[String]| -> Result<Vec<Tensor<f64>>> {
        names
            .iter()
            .map(|n| Ok(m.registry().by_name(n)?.value.clone()))
            .collect()
    };
    let binder = |names: &[String], vars: &[Var]| -> Result<Binder> {
        let mut b = Binder::frozen();
        for (n, &v) in names.iter().zip(vars) {
            b.preset(&m, n, v)?;
        }
        Ok(b)
    };

    let mut out = Vec::new();
    let nn: Vec<String> = acq.iter().chain(&emb).cloned().collect();
    let nlt = |g: &mut Graph<f64>, v: &[Var]| {
        let mut b = binder(&nn, v)?;
        let s = m.nonnative_text_forward(g, &mut b, &texts, "xa", false)?;
        let t = g.constant(targets.clone());
        nlt_loss(g, t, s)
    };
    out.push(run(
        "model_nlt_acquirer_and_embedding",
        &nlt,
        &values(&nn)?,
        max_coords,
        seed,
    )?);

    let le = |g: &mut Graph<f64>, v: &[Var]| {
        let mut b = binder(&nn, v)?;
        let s = m.nonnative_text_forward(g, &mut b, &texts, "xa", false)?;
        let mut fb = Binder::frozen();
        let refs: Vec<&Tensor<f64>> = images.iter().collect();
        let im = m.image_forward(g, &mut fb, &refs)?;
        le_loss(g, im, s, 0.07)
    };
    out.push(run(
        "model_le_acquirer_and_embedding",
        &le,
        &values(&nn)?,
        max_coords,
        seed,
    )?);

    let both: Vec<String> = text.iter().chain(&vision).cloned().collect();
    let pre = |g: &mut Graph<f64>, v: &[Var]| {
        let mut b = binder(&both, v)?;
        let t = m.native_text_forward(g, &mut b, &native)?;
        let refs: Vec<&Tensor<f64>> = images.iter().collect();
        let im = m.image_forward(g, &mut b, &refs)?;
        le_loss(g, im, t, 0.07)
    };
    out.push(run(
        "model_pretrain_text_and_vision",
        &pre,
        &values(&both)?,
        max_coords,
        seed,
    )?);
    Ok(out)
}
