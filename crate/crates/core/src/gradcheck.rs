//! The finite-difference suite behind `ssia gradcheck`: every differentiable
//! tape operation plus the full SSIA block loss, at `f64`.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Mode, Module};
use crate::ssia::{block_loss, BlockConfig, MacroPerceptionPredictor};
use crate::tensor::{finite_diff_check_with_fault, OpKind, Tape, Tensor, Var};

pub const THRESHOLD: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Operation kind under test; `None` for composite checks.
    pub op: Option<OpKind>,
    pub max_rel_error: f64,
    pub seconds: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= THRESHOLD
    }
}

type Body = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: String,
    op: Option<OpKind>,
    inputs: Vec<Tensor<f64>>,
    body: Body,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Values bounded away from zero, for ops with a kink or pole there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    randn(rng, shape).map(|v| if v >= 0.0 { v + 0.2 } else { v - 0.2 })
}

/// Reduces `y` against fixed random weights so every output element matters.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

fn case(
    name: &str,
    op: Option<OpKind>,
    inputs: Vec<Tensor<f64>>,
    out_shape: &[usize],
    rng: &mut ChaCha8Rng,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let w = randn(rng, out_shape);
    Case {
        name: name.into(),
        op,
        inputs,
        body: Box::new(move |t, v| {
            let y = f(t, v)?;
            weighted_sum(t, y, &w)
        }),
    }
}

fn cases() -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(0x55_1a);
    let rng = &mut r;
    let mut out = Vec::new();

    let (a, b) = (randn(rng, &[3, 4]), randn(rng, &[1, 4]));
    out.push(case("add (broadcast)", Some(OpKind::Add), vec![a, b], &[3, 4], rng, |t, v| t.add(v[0], v[1])));
    let (a, b) = (randn(rng, &[2, 1, 3]), randn(rng, &[2, 4, 1]));
    out.push(case("sub (broadcast)", Some(OpKind::Sub), vec![a, b], &[2, 4, 3], rng, |t, v| t.sub(v[0], v[1])));
    let (a, b) = (randn(rng, &[2, 3, 2, 2]), randn(rng, &[1, 3, 1, 1]));
    out.push(case("mul (broadcast)", Some(OpKind::Mul), vec![a, b], &[2, 3, 2, 2], rng, |t, v| t.mul(v[0], v[1])));
    let a = randn(rng, &[3, 3]);
    out.push(case("scale", Some(OpKind::Scale), vec![a], &[3, 3], rng, |t, v| Ok(t.scale(v[0], -1.7))));
    let a = randn(rng, &[3, 3]);
    out.push(case("add_scalar", Some(OpKind::AddScalar), vec![a], &[3, 3], rng, |t, v| Ok(t.add_scalar(v[0], 0.3))));
    let a = randn(rng, &[3, 3]);
    out.push(case("square", Some(OpKind::Square), vec![a], &[3, 3], rng, |t, v| Ok(t.square(v[0]))));
    let a = randn(rng, &[3, 3]).map(|v| v.abs() + 0.5);
    out.push(case("powf", Some(OpKind::Powf), vec![a], &[3, 3], rng, |t, v| Ok(t.powf(v[0], -0.5))));
    let a = away_from_zero(rng, &[4, 5]);
    out.push(case("relu", Some(OpKind::Relu), vec![a], &[4, 5], rng, |t, v| Ok(t.relu(v[0]))));
    let (a, b) = (randn(rng, &[4, 5]), randn(rng, &[5, 3]));
    out.push(case("matmul", Some(OpKind::MatMul), vec![a, b], &[4, 3], rng, |t, v| t.matmul(v[0], v[1])));
    let a = randn(rng, &[2, 6]);
    out.push(case("reshape", Some(OpKind::Reshape), vec![a], &[3, 4], rng, |t, v| t.reshape(v[0], &[3, 4])));
    let a = randn(rng, &[2, 3, 4]);
    out.push(case("sum_axes", Some(OpKind::SumAxes), vec![a], &[2, 1, 1], rng, |t, v| t.sum_axes(v[0], &[1, 2])));
    let a = randn(rng, &[2, 3, 4]);
    out.push(case("mean_axes", Some(OpKind::MeanAxes), vec![a], &[1, 3, 1], rng, |t, v| t.mean_axes(v[0], &[0, 2])));

    for (k, stride, pad, hw) in [(3, 1, 1, 5), (3, 2, 1, 6), (1, 2, 0, 5), (3, 1, 0, 4)] {
        let x = randn(rng, &[2, 3, hw, hw]);
        let w = randn(rng, &[4, 3, k, k]);
        let b = randn(rng, &[4]);
        let o = (hw + 2 * pad - k) / stride + 1;
        out.push(case(
            &format!("conv2d k{k} s{stride} p{pad}"),
            Some(OpKind::Conv2d),
            vec![x, w, b],
            &[2, 4, o, o],
            rng,
            move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad),
        ));
    }

    let (x, g, b) = (randn(rng, &[4, 3, 2, 2]), randn(rng, &[3]), randn(rng, &[3]));
    out.push(case("batchnorm (train)", Some(OpKind::BatchNorm), vec![x, g, b], &[4, 3, 2, 2], rng, |t, v| {
        Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)
    }));
    let (x, g, b) = (randn(rng, &[5, 4]), randn(rng, &[4]), randn(rng, &[4]));
    out.push(case("batchnorm (eval)", Some(OpKind::BatchNorm), vec![x, g, b], &[5, 4], rng, |t, v| {
        t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.3, 0.2, 0.0], &[1.2, 0.8, 2.0, 1.0], 1e-5)
    }));

    let x = randn(rng, &[2, 2, 4, 5]);
    out.push(case("bilinear_resize (down)", Some(OpKind::BilinearResize), vec![x], &[2, 2, 3, 2], rng, |t, v| {
        t.bilinear_resize(v[0], 3, 2)
    }));
    let x = randn(rng, &[1, 2, 3, 3]);
    out.push(case("bilinear_resize (up)", Some(OpKind::BilinearResize), vec![x], &[1, 2, 7, 5], rng, |t, v| {
        t.bilinear_resize(v[0], 7, 5)
    }));

    let logits = Tensor::randn(&[4, 6], 2.0, rng);
    out.push(Case {
        name: "cross_entropy".into(),
        op: Some(OpKind::CrossEntropy),
        inputs: vec![logits],
        body: Box::new(|t, v| t.cross_entropy(v[0], &[0, 5, 2, 2])),
    });

    out.push(block_case(rng));
    out
}

/// Full block loss with respect to the prediction-side map and every MPP
/// parameter, signal side fixed.
fn block_case(rng: &mut ChaCha8Rng) -> Case {
    let cfg = BlockConfig {
        hidden: 8,
        target_spatial: (3, 3),
        ..BlockConfig::default()
    };
    let mpp = MacroPerceptionPredictor::<f64>::new("block", 4, 8, &cfg, rng).expect("valid block");
    let x_l = randn(rng, &[2, 4, 6, 6]);
    let x_h = randn(rng, &[2, 8, 3, 3]);
    let mut inputs = vec![x_l];
    let mut names = Vec::new();
    mpp.visit_params(&mut |p| {
        names.push(p.name.clone());
        inputs.push(p.value.clone());
    });
    Case {
        name: "ssia block loss".into(),
        op: None,
        inputs,
        body: Box::new(move |t, v| {
            let mut m = mpp.clone();
            for (name, &var) in names.iter().zip(&v[1..]) {
                t.bind_param(name, var);
            }
            let xh = t.constant(x_h.clone());
            Ok(block_loss(t, v[0], xh, &mut m, &cfg, Mode::Train)?.total)
        }),
    }
}

/// Runs every check; `fault` corrupts one op's backward rule (mutation test).
pub fn run_suite(fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    cases()
        .into_iter()
        .map(|c| {
            let start = Instant::now();
            let errs = finite_diff_check_with_fault(&c.body, &c.inputs, STEP, fault)?;
            Ok(CheckResult {
                name: c.name,
                op: c.op,
                max_rel_error: errs.into_iter().fold(0.0, f64::max),
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_differentiable_op_is_covered() {
        let covered: Vec<OpKind> = cases().iter().filter_map(|c| c.op).collect();
        for k in OpKind::ALL {
            if k != OpKind::Leaf {
                assert!(covered.contains(&k), "{k} has no check");
            }
        }
    }

    #[test]
    fn suite_passes_and_a_corrupted_conv_is_named() {
        let clean = run_suite(None).unwrap();
        for r in &clean {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_error);
        }
        let broken = run_suite(Some(OpKind::Conv2d)).unwrap();
        let failed: Vec<_> = broken.iter().filter(|r| !r.passed()).collect();
        assert!(!failed.is_empty());
        assert!(failed.iter().all(|r| r.op == Some(OpKind::Conv2d)));
    }
}
