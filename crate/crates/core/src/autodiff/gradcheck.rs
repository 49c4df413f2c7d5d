use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of checking one function at one point.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// One entry per coordinate of the checked tensor.
    pub per_coord: Vec<f64>,
    pub max_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tol
    }
}

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences at `point`.
///
/// `f` must be a pure function of the leaf it is handed: it is re-evaluated
/// on fresh tapes at perturbed points. Errors are relative,
/// `|a - n| / max(|a|, |n|)`, except when both magnitudes are below 1e-8,
/// where the absolute difference is used instead.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidValue {
            what: "grad_check step h",
            value: h,
        });
    }
    if !point.is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check point".to_string(),
        });
    }

    let eval = |data: &[f64]| -> Result<f64> {
        let t = Tensor::new(point.shape().to_vec(), data.to_vec())?;
        let mut tape = Tape::new();
        let leaf = tape.leaf(&t);
        let out = f(&mut tape, leaf)?;
        tape.scalar_value(out)
    };

    let analytic = {
        let t =
            Tensor::new(point.shape().to_vec(), point.data().to_vec())?.with_requires_grad(true);
        let mut tape = Tape::new();
        let leaf = tape.leaf(&t);
        let out = f(&mut tape, leaf)?;
        if !tape.shape_of(out).is_empty() {
            return Err(Error::shape(
                "grad_check",
                "scalar output []",
                tape.shape_of(out),
            ));
        }
        tape.backward(out)?;
        tape.grad(leaf).to_vec()
    };

    let mut per_coord = Vec::with_capacity(point.numel());
    let mut work = point.data().to_vec();
    for i in 0..point.numel() {
        let orig = work[i];
        work[i] = orig + h;
        let up = eval(&work)?;
        work[i] = orig - h;
        let down = eval(&work)?;
        work[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let err = if a.abs() < 1e-8 && numeric.abs() < 1e-8 {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / a.abs().max(numeric.abs())
        };
        per_coord.push(err);
    }
    let max_error = per_coord.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_coord,
        max_error,
        tol,
    })
}

/// One line of a [`SuiteReport`].
#[derive(Debug, Clone, serde::Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub trials: usize,
    pub max_error: f64,
    pub passed: bool,
}

/// Result of sweeping the checker across many randomized trials.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SuiteReport {
    pub tol: f64,
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

fn draw(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Random values kept away from zero, so kinked ops (relu) and
/// sign-sensitive denominators stay finite-difference friendly.
fn draw_off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = draw(rng, 0.1, 2.0);
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

type PointAndFn = (Tensor, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>);
type CaseDraw = Box<dyn Fn(&mut ChaCha8Rng) -> Result<PointAndFn>>;

/// Reduces an arbitrary output to a scalar through a fixed random weighting,
/// so every output coordinate influences the check.
fn weighted_scalar(tape: &mut Tape, out: Var, weights: &[f64]) -> Result<Var> {
    let shape = tape.shape_of(out).to_vec();
    let w = tape.constant(&shape, weights)?;
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Finite-difference checks for every differentiable tape op, each input
/// role separately, across `trials` randomized shapes and points.
pub fn run_op_suite(trials: usize, h: f64, tol: f64, seed: u64) -> Result<SuiteReport> {
    let mut entries = Vec::new();
    let cases: Vec<(&str, CaseDraw)> = vec![
        (
            "add.lhs",
            Box::new(|rng| {
                let n = rng.gen_range(1..=6);
                let other = draw_off_zero(rng, n);
                let w = draw_off_zero(rng, n);
                let point = Tensor::new(vec![n], draw_off_zero(rng, n))?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, x: Var| {
                        let o = t.constant(&[other.len()], &other)?;
                        let y = t.add(x, o)?;
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
        (
            "add.rhs",
            Box::new(|rng| {
                let n = rng.gen_range(1..=6);
                let other = draw_off_zero(rng, n);
                let w = draw_off_zero(rng, n);
                let point = Tensor::new(vec![n], draw_off_zero(rng, n))?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, x: Var| {
                        let o = t.constant(&[other.len()], &other)?;
                        let y = t.add(o, x)?;
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
        (
            "sub.lhs",
            Box::new(|rng| {
                let n = rng.gen_range(1..=6);
                let other = draw_off_zero(rng, n);
                let w = draw_off_zero(rng, n);
                let point = Tensor::new(vec![n], draw_off_zero(rng, n))?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, x: Var| {
                        let o = t.constant(&[other.len()], &other)?;
                        let y = t.sub(x, o)?;
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
        (
            "sub.rhs",
            Box::new(|rng| {
                let n = rng.gen_range(1..=6);
                let other = draw_off_zero(rng, n);
                let w = draw_off_zero(rng, n);
                let point = Tensor::new(vec![n], draw_off_zero(rng, n))?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, x: Var| {
                        let o = t.constant(&[other.len()], &other)?;
                        let y = t.sub(o, x)?;
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
        (
            "mul.lhs",
            Box::new(|rng| {
                let n = rng.gen_range(1..=6);
                let other = draw_off_zero(rng, n);
                let w = draw_off_zero(rng, n);
                let point = Tensor::new(vec![n], draw_off_zero(rng, n))?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, x: Var| {
                        let o = t.constant(&[other.len()], &other)?;
                        let y = t.mul(x, o)?;
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
        (
            "mul.rhs",
            Box::new(|rng| {
                let n = rng.gen_range(1..=6);
                let other = draw_off_zero(rng, n);
                let w = draw_off_zero(rng, n);
                let point = Tensor::new(vec![n], draw_off_zero(rng, n))?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, x: Var| {
                        let o = t.constant(&[other.len()], &other)?;
                        let y = t.mul(o, x)?;
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
        (
            "mul_scalar",
            Box::new(|rng| {
                let n = rng.gen_range(1..=6);
                let s = draw(rng, -2.0, 2.0);
                let w = draw_off_zero(rng, n);
                let point = Tensor::new(vec![n], draw_off_zero(rng, n))?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, x: Var| {
                        let y = t.mul_scalar(x, s)?;
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
        (
            "add_row_bias.x",
            Box::new(|rng| {
                let r = rng.gen_range(1..=4);
                let c = rng.gen_range(1..=4);
                let bias = draw_off_zero(rng, c);
                let w = draw_off_zero(rng, r * c);
                let point = Tensor::new(vec![r, c], draw_off_zero(rng, r * c))?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, x: Var| {
                        let b = t.constant(&[bias.len()], &bias)?;
                        let y = t.add_row_bias(x, b)?;
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
        (
            "add_row_bias.bias",
            Box::new(|rng| {
                let r = rng.gen_range(1..=4);
                let c = rng.gen_range(1..=4);
                let xv = draw_off_zero(rng, r * c);
                let w = draw_off_zero(rng, r * c);
                let point = Tensor::new(vec![c], draw_off_zero(rng, c))?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, bias: Var| {
                        let x = t.constant(&[r, c], &xv)?;
                        let y = t.add_row_bias(x, bias)?;
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
        (
            "matmul.lhs",
            Box::new(|rng| {
                let (m, k, n) = (
                    rng.gen_range(1..=3),
                    rng.gen_range(1..=3),
                    rng.gen_range(1..=3),
                );
                let bv = draw_off_zero(rng, k * n);
                let w = draw_off_zero(rng, m * n);
                let point = Tensor::new(vec![m, k], draw_off_zero(rng, m * k))?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, a: Var| {
                        let b = t.constant(&[k, n], &bv)?;
                        let y = t.matmul(a, b)?;
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
        (
            "matmul.rhs",
            Box::new(|rng| {
                let (m, k, n) = (
                    rng.gen_range(1..=3),
                    rng.gen_range(1..=3),
                    rng.gen_range(1..=3),
                );
                let av = draw_off_zero(rng, m * k);
                let w = draw_off_zero(rng, m * n);
                let point = Tensor::new(vec![k, n], draw_off_zero(rng, k * n))?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, b: Var| {
                        let a = t.constant(&[m, k], &av)?;
                        let y = t.matmul(a, b)?;
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
        (
            "gather",
            Box::new(|rng| {
                let v = rng.gen_range(2..=5);
                let d = rng.gen_range(1..=3);
                let len = rng.gen_range(1..=6);
                let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..v)).collect();
                let w = draw_off_zero(rng, len * d);
                let point = Tensor::new(vec![v, d], draw_off_zero(rng, v * d))?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, table: Var| {
                        let y = t.gather(table, &ids)?;
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
        (
            "relu",
            Box::new(|rng| {
                let n = rng.gen_range(1..=6);
                let w = draw_off_zero(rng, n);
                let point = Tensor::new(vec![n], draw_off_zero(rng, n))?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, x: Var| {
                        let y = t.relu(x);
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
        (
            "tanh",
            Box::new(|rng| {
                let n = rng.gen_range(1..=6);
                let w = draw_off_zero(rng, n);
                let point = Tensor::new(vec![n], draw_off_zero(rng, n))?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, x: Var| {
                        let y = t.tanh(x);
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
        (
            "exp",
            Box::new(|rng| {
                let n = rng.gen_range(1..=6);
                let w = draw_off_zero(rng, n);
                let point = Tensor::new(vec![n], draw_off_zero(rng, n))?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, x: Var| {
                        let y = t.exp(x);
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
        (
            "log",
            Box::new(|rng| {
                let n = rng.gen_range(1..=6);
                let w = draw_off_zero(rng, n);
                let vals: Vec<f64> = (0..n).map(|_| draw(rng, 0.2, 3.0)).collect();
                let point = Tensor::new(vec![n], vals)?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, x: Var| {
                        let y = t.log(x)?;
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
        (
            "softmax",
            Box::new(|rng| {
                let r = rng.gen_range(1..=3);
                let c = rng.gen_range(2..=4);
                let w = draw_off_zero(rng, r * c);
                let point = Tensor::new(vec![r, c], draw_off_zero(rng, r * c))?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, x: Var| {
                        let y = t.softmax(x)?;
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
        (
            "log_softmax",
            Box::new(|rng| {
                let r = rng.gen_range(1..=3);
                let c = rng.gen_range(2..=4);
                let w = draw_off_zero(rng, r * c);
                let point = Tensor::new(vec![r, c], draw_off_zero(rng, r * c))?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, x: Var| {
                        let y = t.log_softmax(x)?;
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
        (
            "sum",
            Box::new(|rng| {
                let n = rng.gen_range(1..=6);
                let point = Tensor::new(vec![n], draw_off_zero(rng, n))?;
                Ok((point, Box::new(move |t: &mut Tape, x: Var| Ok(t.sum(x)))))
            }),
        ),
        (
            "mean",
            Box::new(|rng| {
                let n = rng.gen_range(1..=6);
                let point = Tensor::new(vec![n], draw_off_zero(rng, n))?;
                Ok((point, Box::new(move |t: &mut Tape, x: Var| Ok(t.mean(x)))))
            }),
        ),
        (
            "pick_per_row",
            Box::new(|rng| {
                let r = rng.gen_range(1..=4);
                let c = rng.gen_range(2..=4);
                let idx: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
                let w = draw_off_zero(rng, r);
                let point = Tensor::new(vec![r, c], draw_off_zero(rng, r * c))?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, x: Var| {
                        let y = t.pick_per_row(x, &idx)?;
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
        (
            "masked_mean_pool",
            Box::new(|rng| {
                let r = rng.gen_range(1..=3);
                let s = rng.gen_range(1..=4);
                let d = rng.gen_range(1..=3);
                let mut mask = Vec::with_capacity(r * s);
                for row in 0..r {
                    for t in 0..s {
                        // Keep position 0 of every row so no row is empty.
                        let keep = t == 0 || rng.gen::<bool>();
                        let _ = row;
                        mask.push(if keep { 1.0 } else { 0.0 });
                    }
                }
                let w = draw_off_zero(rng, r * d);
                let point = Tensor::new(vec![r, s, d], draw_off_zero(rng, r * s * d))?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, x: Var| {
                        let y = t.masked_mean_pool(x, &mask)?;
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
        (
            "apply_mask",
            Box::new(|rng| {
                let n = rng.gen_range(1..=6);
                let mask: Vec<f64> = (0..n)
                    .map(|_| {
                        if rng.gen::<bool>() {
                            0.0
                        } else {
                            draw(rng, 0.5, 2.0)
                        }
                    })
                    .collect();
                let w = draw_off_zero(rng, n);
                let point = Tensor::new(vec![n], draw_off_zero(rng, n))?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, x: Var| {
                        let y = t.apply_mask(x, mask.clone())?;
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
        (
            "reshape",
            Box::new(|rng| {
                let r = rng.gen_range(1..=3);
                let c = rng.gen_range(1..=4);
                let w = draw_off_zero(rng, r * c);
                let point = Tensor::new(vec![r, c], draw_off_zero(rng, r * c))?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, x: Var| {
                        let y = t.reshape(x, &[r * c])?;
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
        (
            "kl_div_rows",
            Box::new(|rng| {
                let r = rng.gen_range(1..=3);
                let c = rng.gen_range(2..=4);
                let mut ref_lp = vec![0.0; r * c];
                for row in 0..r {
                    let logits = draw_off_zero(rng, c);
                    let mut tape = Tape::new();
                    let v = tape.constant(&[c], &logits)?;
                    let lp = tape.log_softmax(v)?;
                    ref_lp[row * c..(row + 1) * c].copy_from_slice(tape.value(lp));
                }
                let w = draw_off_zero(rng, r);
                let point = Tensor::new(vec![r, c], draw_off_zero(rng, r * c))?;
                Ok((
                    point,
                    Box::new(move |t: &mut Tape, z: Var| {
                        let y = t.kl_div_rows(z, &ref_lp)?;
                        weighted_scalar(t, y, &w)
                    }),
                ))
            }),
        ),
    ];

    for (name, make_case) in cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let (point, f) = make_case(&mut rng)?;
            let report = grad_check(|t, x| f(t, x), &point, h, tol)?;
            worst = worst.max(report.max_error);
        }
        entries.push(SuiteEntry {
            name: name.to_string(),
            trials,
            max_error: worst,
            passed: worst <= tol,
        });
    }
    Ok(SuiteReport { tol, entries })
}

/// 64-bit FNV-1a. Used to derive independent seeds per named stream and to
/// fingerprint canonical config strings.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
