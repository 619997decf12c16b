//! Central-difference verification of recorded gradients.

use super::{OpKind, ReduceMode, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// and returns the max over coordinates of `|a − n| / max(1, |a|, |n|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// [`finite_diff_check`] over several inputs at once.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_with(Tape::new, f, inputs, h)
}

/// Same as [`finite_diff_check_many`] but records the analytic pass on a
/// tape whose `kind` gradient rule is deliberately wrong.
#[doc(hidden)]
pub fn finite_diff_check_faulty<F>(kind: OpKind, f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_with(|| Tape::with_fault(kind), f, inputs, h)
}

fn check_with<T, F>(make_tape: T, f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    T: Fn() -> Tape,
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = make_tape();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
    drop(tape);

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Weighted sum `Σ y ⊙ r` with fixed random weights, so that every output
/// coordinate contributes a distinct upstream gradient.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng::seeded(seed);
    let shape = tape.shape(y).to_vec();
    let w = if shape.is_empty() {
        Tensor::scalar(1.0 + rng::uniform(&mut r, 0.0, 1.0))
    } else {
        Tensor::uniform(shape, 1.0, &mut r)
    };
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Runs the central-difference check on a small random instance of every
/// registered operation. Returns one `(op, max relative error)` per op.
pub fn op_suite(seed: u64, fault: Option<OpKind>, h: f64) -> Result<Vec<(OpKind, f64)>> {
    let mut out = Vec::with_capacity(OpKind::ALL.len());
    for (i, kind) in OpKind::ALL.into_iter().enumerate() {
        let mut r = rng::seeded(rng::derive_seed(seed, i as u64));
        let err = op_case(kind, &mut r, fault, h)?;
        out.push((kind, err));
    }
    Ok(out)
}

fn op_case(kind: OpKind, r: &mut rng::Rng, fault: Option<OpKind>, h: f64) -> Result<f64> {
    let rand = |shape: &[usize], r: &mut rng::Rng| Tensor::uniform(shape.to_vec(), 1.0, r);
    let (inputs, f): (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>) = match kind {
        OpKind::MatMul => (
            vec![rand(&[2, 3, 4], r), rand(&[2, 4, 2], r)],
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.matmul(v[0], v[1])?;
                probe(t, y, 1)
            }),
        ),
        OpKind::MatMulNt => (
            vec![rand(&[3, 4], r), rand(&[5, 4], r)],
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.matmul_nt(v[0], v[1])?;
                probe(t, y, 2)
            }),
        ),
        OpKind::Linear => (
            vec![rand(&[2, 3, 4], r), rand(&[5, 4], r), rand(&[5], r)],
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                probe(t, y, 3)
            }),
        ),
        OpKind::Add | OpKind::Sub | OpKind::Mul => (
            vec![rand(&[3, 4], r), rand(&[3, 4], r)],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = match kind {
                    OpKind::Add => t.add(v[0], v[1])?,
                    OpKind::Sub => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                probe(t, y, 4)
            }),
        ),
        OpKind::Scale => (
            vec![rand(&[4, 2], r)],
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.scale(v[0], -1.7);
                probe(t, y, 5)
            }),
        ),
        OpKind::Relu => {
            // keep inputs away from the kink at 0
            let mut x = rand(&[3, 5], r);
            x.data_mut().iter_mut().for_each(|v| *v += 0.1 * v.signum());
            (
                vec![x],
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let y = t.relu(v[0]);
                    probe(t, y, 6)
                }),
            )
        }
        OpKind::Softmax => (
            vec![rand(&[2, 3, 4], r)],
            Box::new(|t: &mut Tape, v: &[Var]| {
                let mask = [true, false, true, true, true, true, false, true];
                let y = t.masked_softmax(v[0], Some(&mask))?;
                probe(t, y, 7)
            }),
        ),
        OpKind::LayerNorm => (
            vec![rand(&[3, 6], r), rand(&[6], r), rand(&[6], r)],
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                probe(t, y, 8)
            }),
        ),
        OpKind::Concat => (
            vec![rand(&[2, 2, 3], r), rand(&[2, 2, 1], r)],
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.concat(&[v[0], v[1], v[0]])?;
                probe(t, y, 9)
            }),
        ),
        OpKind::ReduceMean | OpKind::ReduceMax => (
            vec![rand(&[2, 4, 3], r)],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let mode = if kind == OpKind::ReduceMax {
                    ReduceMode::Max
                } else {
                    ReduceMode::Mean
                };
                let mask = [true, true, false, true, false, true, true, true];
                let y = t.reduce(v[0], 1, mode, Some(&mask))?;
                probe(t, y, 10)
            }),
        ),
        OpKind::Gather => (
            vec![rand(&[4, 3], r)],
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.gather_rows(v[0], &[2, 0, 2, 3])?;
                probe(t, y, 11)
            }),
        ),
        OpKind::Reshape => (
            vec![rand(&[2, 6], r)],
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.reshape(v[0], &[3, 4])?;
                probe(t, y, 12)
            }),
        ),
        OpKind::Sum => (
            vec![rand(&[3, 3], r)],
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.sum(v[0]);
                probe(t, y, 13)
            }),
        ),
        OpKind::MaskedFill => (
            vec![rand(&[2, 3], r)],
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.masked_fill(v[0], &[false, true, false, false, false, true], 0.25)?;
                probe(t, y, 14)
            }),
        ),
        OpKind::CrossEntropy => (
            vec![rand(&[4, 5], r)],
            Box::new(|t: &mut Tape, v: &[Var]| {
                t.cross_entropy(v[0], &[1, 4, 0, 2], Some(&[true, true, false, true]))
            }),
        ),
    };
    match fault {
        Some(k) => finite_diff_check_faulty(k, f, &inputs, h),
        None => finite_diff_check_many(f, &inputs, h),
    }
}
