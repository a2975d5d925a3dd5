//! Finite-difference checks for every tape op and for a full model
//! forward + loss pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{OpKind, Tape, Var};
use crate::data::{generate_scene, SceneSpec};
use crate::error::Result;
use crate::gradcheck::{grad_check_coords, Coord, GradCheckOptions, GradCheckReport};
use crate::model::{density_loss_var, prepare_exemplars, Model, ModelConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SuiteRow {
    pub name: String,
    pub report: GradCheckReport,
}

/// Ops with a backward rule (every kind except leaves).
pub fn checked_ops() -> Vec<OpKind> {
    OpKind::ALL.iter().copied().filter(|k| *k != OpKind::Leaf).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts `y` with fixed random weights so every output element matters.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, &shape);
    let w = tape.constant(&w)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, OpFn) {
    let mut t = |s: &[usize]| rand_tensor(rng, s);
    match kind {
        OpKind::MatMul => (vec![t(&[3, 4]), t(&[4, 2])], Box::new(|tp, v| {
            let y = tp.matmul(v[0], v[1])?;
            weighted_sum(tp, y, 1)
        })),
        OpKind::Add | OpKind::Sub | OpKind::Mul => (vec![t(&[2, 3]), t(&[2, 3])], Box::new(move |tp, v| {
            let y = match kind {
                OpKind::Add => tp.add(v[0], v[1])?,
                OpKind::Sub => tp.sub(v[0], v[1])?,
                _ => tp.mul(v[0], v[1])?,
            };
            weighted_sum(tp, y, 2)
        })),
        OpKind::AddRow => (vec![t(&[3, 4]), t(&[4])], Box::new(|tp, v| {
            let y = tp.add_row(v[0], v[1])?;
            weighted_sum(tp, y, 3)
        })),
        OpKind::AddCol => (vec![t(&[3, 2, 2]), t(&[3])], Box::new(|tp, v| {
            let y = tp.add_col(v[0], v[1])?;
            weighted_sum(tp, y, 4)
        })),
        OpKind::Scale => (vec![t(&[5])], Box::new(|tp, v| {
            let y = tp.scale(v[0], -0.7)?;
            weighted_sum(tp, y, 5)
        })),
        OpKind::Gelu => (vec![t(&[2, 4])], Box::new(|tp, v| {
            let y = tp.gelu(v[0])?;
            weighted_sum(tp, y, 6)
        })),
        OpKind::Relu => (vec![t(&[2, 4])], Box::new(|tp, v| {
            let y = tp.relu(v[0])?;
            weighted_sum(tp, y, 7)
        })),
        OpKind::Softmax => (vec![t(&[3, 4])], Box::new(|tp, v| {
            let a = tp.softmax_rows(v[0])?;
            let mask = (0..12).map(|i| i % 4 == 1).collect();
            let b = tp.softmax_rows_masked(v[0], Some(mask))?;
            let y = tp.add(a, b)?;
            weighted_sum(tp, y, 8)
        })),
        OpKind::LayerNorm => (vec![t(&[3, 5]), t(&[5]), t(&[5])], Box::new(|tp, v| {
            let y = tp.layer_norm(v[0], v[1], v[2], 1e-6)?;
            weighted_sum(tp, y, 9)
        })),
        OpKind::Concat => (vec![t(&[2, 3]), t(&[1, 3]), t(&[2, 2])], Box::new(|tp, v| {
            let a = tp.concat(&[v[0], v[1]], 0)?;
            let b = tp.concat(&[v[0], v[2]], 1)?;
            let (a, b) = (weighted_sum(tp, a, 10)?, weighted_sum(tp, b, 11)?);
            tp.add(a, b)
        })),
        OpKind::Slice => (vec![t(&[4, 5])], Box::new(|tp, v| {
            let y = tp.slice(v[0], &[1..3, 2..5])?;
            weighted_sum(tp, y, 12)
        })),
        OpKind::Transpose => (vec![t(&[3, 2])], Box::new(|tp, v| {
            let y = tp.transpose(v[0])?;
            weighted_sum(tp, y, 13)
        })),
        OpKind::Reshape => (vec![t(&[2, 6])], Box::new(|tp, v| {
            let y = tp.reshape(v[0], &[3, 2, 2])?;
            weighted_sum(tp, y, 14)
        })),
        OpKind::Sum => (vec![t(&[2, 3])], Box::new(|tp, v| {
            let y = tp.mul(v[0], v[0])?;
            tp.sum(y)
        })),
        OpKind::Mean => (vec![t(&[2, 3])], Box::new(|tp, v| {
            let y = tp.mul(v[0], v[0])?;
            tp.mean(y)
        })),
        OpKind::MeanRows => (vec![t(&[4, 3])], Box::new(|tp, v| {
            let y = tp.mean_rows(v[0])?;
            weighted_sum(tp, y, 15)
        })),
        OpKind::Resize => (vec![t(&[2, 3, 3])], Box::new(|tp, v| {
            let up = tp.resize_bilinear(v[0], 5, 4)?;
            let down = tp.resize_bilinear(v[0], 2, 2)?;
            let (a, b) = (weighted_sum(tp, up, 16)?, weighted_sum(tp, down, 17)?);
            tp.add(a, b)
        })),
        OpKind::Im2Col => (vec![t(&[2, 4, 4])], Box::new(|tp, v| {
            let y = tp.im2col(v[0], 3, 1)?;
            weighted_sum(tp, y, 18)
        })),
        OpKind::Leaf => (vec![t(&[1])], Box::new(|tp, v| tp.sum(v[0]))),
    }
}

/// Checks one op on seeded random inputs. `fault` perturbs that op's backward rule.
pub fn check_op(kind: OpKind, fault: Option<OpKind>) -> Result<SuiteRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(kind as u64 + 100);
    let (inputs, f) = op_case(kind, &mut rng);
    let coords: Vec<Coord> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |index| Coord { input: i, index }))
        .collect();
    let report = grad_check_coords(f, &inputs, &coords, GradCheckOptions::default(), |tape| {
        if let Some(k) = fault {
            tape.inject_backward_fault(k);
        }
    })?;
    Ok(SuiteRow { name: kind.name().to_string(), report })
}

/// Checks `loss(model(scene), gt)` with respect to at least `min_params`
/// sampled parameters, covering every parameter tensor at least once.
pub fn check_end_to_end(cfg: &ModelConfig, min_params: usize, fault: Option<OpKind>) -> Result<SuiteRow> {
    let model = Model::new(cfg.clone())?;
    let spec = SceneSpec {
        canvas: cfg.image_size,
        k_shots: cfg.k_shots,
        seed: cfg.seed ^ 0x5eed,
        n_min: 1,
        n_max: 4,
        ..SceneSpec::default()
    };
    let (img, gt, rec) = generate_scene(&spec, 0)?;
    let ex = prepare_exemplars(&img, &rec.exemplar_boxes(), cfg)?;
    let input = model.prepare(&img, &ex)?;
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t.clone()).collect();

    let mut coords: Vec<Coord> = Vec::new();
    let total: usize = params.iter().map(Tensor::len).sum();
    let stride = (total / min_params.max(1)).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut flat = 0;
    for (i, t) in params.iter().enumerate() {
        let first = rng.gen_range(0..t.len());
        coords.push(Coord { input: i, index: first });
        for index in 0..t.len() {
            if flat % stride == stride / 2 && index != first {
                coords.push(Coord { input: i, index });
            }
            flat += 1;
        }
    }
    let f = |tape: &mut Tape, vars: &[Var]| {
        let out = model.forward_vars(tape, vars, &input, false)?;
        density_loss_var(tape, out.density, &gt)
    };
    let report = grad_check_coords(f, &params, &coords, GradCheckOptions::default(), |tape| {
        if let Some(k) = fault {
            tape.inject_backward_fault(k);
        }
    })?;
    Ok(SuiteRow { name: "end-to-end".to_string(), report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for k in checked_ops() {
            let row = check_op(k, None).unwrap();
            assert!(row.report.passed(), "{}: {:?}", row.name, row.report);
        }
    }

    #[test]
    fn every_op_detects_its_own_fault() {
        for k in checked_ops() {
            let row = check_op(k, Some(k)).unwrap();
            assert!(!row.report.passed(), "{} fault went unnoticed", row.name);
        }
    }
}
