//! Finite-difference checks of every tape primitive and of a toy EdgeFormer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{
    encoder_layer, grad_check, multi_head_attention, AttentionVars, EncoderLayerVars, Mode, Tape,
    Tensor, Var, DEFAULT_STEP,
};
use crate::error::Result;
use crate::model::{forward_with_vars, init_params, Ablation, EdgeFormerConfig};

/// Tolerance for ops that are linear or elementwise.
pub const SIMPLE_TOLERANCE: f64 = 1e-6;
/// Tolerance for normalizations, attention and whole networks.
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;
/// Entries whose analytic and numeric values differ by at most this much are
/// treated as agreeing; it only matters where the true gradient is zero.
pub const ABSOLUTE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

type Program = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: String,
    tolerance: f64,
    inputs: Vec<Tensor<f64>>,
    program: Program,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape matches data")
}

/// Values bounded away from zero so ReLU kinks stay out of the difference stencil.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = random(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

fn probe(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn case(
    name: &str,
    tolerance: f64,
    inputs: Vec<Tensor<f64>>,
    program: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name: name.to_string(),
        tolerance,
        inputs,
        program: Box::new(program),
    }
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    let w = probe(4 * 5, rng);
    cases.push(case(
        "linear",
        SIMPLE_TOLERANCE,
        vec![random(&[4, 3], rng), random(&[3, 5], rng), random(&[5], rng)],
        move |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            t.weighted_sum(y, &w)
        },
    ));
    for transpose_b in [false, true] {
        let w = probe(2 * 3 * 4, rng);
        let b_shape = if transpose_b { [2, 4, 5] } else { [2, 5, 4] };
        cases.push(case(
            if transpose_b { "batch_matmul_nt" } else { "batch_matmul" },
            SIMPLE_TOLERANCE,
            vec![random(&[2, 3, 5], rng), random(&b_shape, rng)],
            move |t, v| {
                let y = t.batch_matmul(v[0], v[1], transpose_b)?;
                t.weighted_sum(y, &w)
            },
        ));
    }
    let w = probe(12, rng);
    cases.push(case(
        "add",
        SIMPLE_TOLERANCE,
        vec![random(&[3, 4], rng), random(&[3, 4], rng)],
        move |t, v| {
            let y = t.add(v[0], v[1])?;
            t.weighted_sum(y, &w)
        },
    ));
    let w = probe(12, rng);
    cases.push(case("scale", SIMPLE_TOLERANCE, vec![random(&[3, 4], rng)], move |t, v| {
        let y = t.scale(v[0], 0.37);
        t.weighted_sum(y, &w)
    }));
    let w = probe(12, rng);
    cases.push(case("relu", SIMPLE_TOLERANCE, vec![away_from_zero(&[3, 4], rng)], move |t, v| {
        let y = t.relu(v[0]);
        t.weighted_sum(y, &w)
    }));
    let w = probe(12, rng);
    cases.push(case("softmax", COMPOSITE_TOLERANCE, vec![random(&[3, 4], rng)], move |t, v| {
        let y = t.softmax(v[0]);
        t.weighted_sum(y, &w)
    }));
    let w = probe(15, rng);
    cases.push(case(
        "layer_norm",
        COMPOSITE_TOLERANCE,
        vec![random(&[3, 5], rng), random(&[5], rng), random(&[5], rng)],
        move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            t.weighted_sum(y, &w)
        },
    ));
    let w = probe(18, rng);
    cases.push(case(
        "batch_norm_train",
        COMPOSITE_TOLERANCE,
        vec![random(&[6, 3], rng), random(&[3], rng), random(&[3], rng)],
        move |t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2])?;
            t.weighted_sum(y, &w)
        },
    ));
    let w = probe(12, rng);
    let (mean, var) = (probe(3, rng), vec![0.5, 1.2, 2.0]);
    cases.push(case(
        "batch_norm_eval",
        SIMPLE_TOLERANCE,
        vec![random(&[4, 3], rng), random(&[3], rng), random(&[3], rng)],
        move |t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var)?;
            t.weighted_sum(y, &w)
        },
    ));
    let w = probe(20, rng);
    cases.push(case("dropout", SIMPLE_TOLERANCE, vec![random(&[4, 5], rng)], move |t, v| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(9);
        let y = t.dropout(v[0], 0.3, Mode::Train, &mut mask_rng)?;
        t.weighted_sum(y, &w)
    }));
    let w = probe(24, rng);
    cases.push(case("permute", SIMPLE_TOLERANCE, vec![random(&[2, 3, 4], rng)], move |t, v| {
        let y = t.permute(v[0], &[2, 0, 1])?;
        t.weighted_sum(y, &w)
    }));
    let w = probe(24, rng);
    cases.push(case("reshape", SIMPLE_TOLERANCE, vec![random(&[2, 3, 4], rng)], move |t, v| {
        let y = t.reshape(v[0], &[6, 4])?;
        t.weighted_sum(y, &w)
    }));
    let w = probe(15, rng);
    cases.push(case(
        "concat",
        SIMPLE_TOLERANCE,
        vec![random(&[3, 2], rng), random(&[3, 3], rng)],
        move |t, v| {
            let y = t.concat_last(&[v[0], v[1]])?;
            t.weighted_sum(y, &w)
        },
    ));
    cases.push(case(
        "softmax_cross_entropy",
        COMPOSITE_TOLERANCE,
        vec![random(&[4, 2], rng)],
        |t, v| t.softmax_cross_entropy(v[0], &[0, 1, 1, 0]),
    ));

    let (s, b, e, heads) = (3, 2, 8, 2);
    let mut attn_inputs = vec![random(&[s, b, e], rng)];
    for _ in 0..4 {
        attn_inputs.push(random(&[e, e], rng));
        attn_inputs.push(random(&[e], rng));
    }
    let w = probe(s * b * e, rng);
    cases.push(case("multi_head_attention", COMPOSITE_TOLERANCE, attn_inputs, move |t, v| {
        let p = attention_vars(&v[1..9]);
        let y = multi_head_attention(t, v[0], &p, heads)?;
        t.weighted_sum(y, &w)
    }));

    let ffn = 12;
    let mut enc_inputs = vec![random(&[s, b, e], rng)];
    for _ in 0..4 {
        enc_inputs.push(random(&[e, e], rng));
        enc_inputs.push(random(&[e], rng));
    }
    enc_inputs.extend([random(&[e], rng), random(&[e], rng)]);
    enc_inputs.extend([random(&[e, ffn], rng), away_from_zero(&[ffn], rng)]);
    enc_inputs.extend([random(&[ffn, e], rng), random(&[e], rng)]);
    enc_inputs.extend([random(&[e], rng), random(&[e], rng)]);
    let w = probe(s * b * e, rng);
    cases.push(case("encoder_layer", COMPOSITE_TOLERANCE, enc_inputs, move |t, v| {
        let p = EncoderLayerVars {
            attn: attention_vars(&v[1..9]),
            ln1_gamma: v[9],
            ln1_beta: v[10],
            ff1_w: v[11],
            ff1_b: v[12],
            ff2_w: v[13],
            ff2_b: v[14],
            ln2_gamma: v[15],
            ln2_beta: v[16],
        };
        let y = encoder_layer(t, v[0], &p, heads)?;
        t.weighted_sum(y, &w)
    }));
    cases
}

fn attention_vars(v: &[Var]) -> AttentionVars {
    AttentionVars {
        wq: v[0],
        bq: v[1],
        wk: v[2],
        bk: v[3],
        wv: v[4],
        bv: v[5],
        wo: v[6],
        bo: v[7],
    }
}

/// Toy network used by the suite: K=4, d_model=8, 2 heads, 1 layer, decoder [16, 8].
pub fn toy_config(ablation: Ablation) -> EdgeFormerConfig {
    EdgeFormerConfig {
        k: 4,
        d_model: 8,
        heads: 2,
        encoder_layers: 1,
        ffn_width: 16,
        decoder_widths: vec![16, 8],
        ablation,
        ..Default::default()
    }
}

fn model_case(ablation: Ablation, seed: u64) -> Result<Case> {
    let params = init_params(&toy_config(ablation), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    // Perturbing every parameter moves biases off zero, keeping ReLUs away from kinks.
    let inputs: Vec<Tensor<f64>> = params
        .tensors
        .iter()
        .map(|t| {
            let mut t = t.cast::<f64>();
            for v in t.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
            t
        })
        .collect();
    let rows = 3;
    let k = params.config().k;
    let d1: Vec<f64> = (0..rows * k).map(|_| rng.random_range(0.05..1.5)).collect();
    let d2: Vec<f64> = (0..rows * k).map(|_| rng.random_range(0.05..1.5)).collect();
    Ok(case(
        &format!("edgeformer_{ablation}"),
        COMPOSITE_TOLERANCE,
        inputs,
        move |tape, vars| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let out = forward_with_vars(tape, &params, vars.to_vec(), &d1, &d2, Mode::Train, &mut rng)?;
            tape.softmax_cross_entropy(out.logits, &[1, 0, 1])
        },
    ))
}

/// Runs every primitive check plus the toy network under each ablation.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = primitive_cases(&mut rng);
    for ab in Ablation::ALL {
        cases.push(model_case(ab, seed.wrapping_add(11))?);
    }
    cases
        .into_iter()
        .map(|c| {
            let report = grad_check(c.program, &c.inputs, DEFAULT_STEP)?;
            let err = report.max_relative_error_above(ABSOLUTE_FLOOR);
            Ok(GradCheckEntry {
                name: c.name,
                max_relative_error: err,
                tolerance: c.tolerance,
                passed: err < c.tolerance,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let entries = run_suite(1).unwrap();
        assert!(entries.len() >= 20);
        for e in &entries {
            assert!(e.passed, "{}: {:e} >= {:e}", e.name, e.max_relative_error, e.tolerance);
        }
    }
}
