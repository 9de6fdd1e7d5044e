//! Central finite-difference checks of reverse-mode gradients.
//!
//! The relative error of one coordinate is
//! `|analytic - numeric| / max(|analytic|, |numeric|, floor)`. When a
//! coordinate fails at the nominal step it is re-measured once with a step
//! 100x smaller; a ReLU or max-pool switch lying within the nominal step of
//! the evaluation point is the only legitimate reason for the first
//! measurement to disagree, and the smaller step moves off it.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Check a seeded random subset of at most this many coordinates.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Test hook: perturb the analytic gradient so the check must fail.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            max_coords: None,
            seed: 0,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates that needed the smaller step.
    pub refined: usize,
    pub passed: bool,
}

fn eval<F>(f: &F, params: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    Ok(tape.value(loss).data()[0])
}

fn central<F>(f: &F, params: &mut ParamStore<f64>, id: ParamId, e: usize, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let x0 = params.get(id).data()[e];
    params.get_mut(id).data_mut()[e] = x0 + h;
    let up = eval(f, params);
    params.get_mut(id).data_mut()[e] = x0 - h;
    let down = eval(f, params);
    params.get_mut(id).data_mut()[e] = x0;
    Ok((up? - down?) / (2.0 * h))
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares `backward` of the scalar built by `f` with central differences.
pub fn check_gradients<F>(
    name: &str,
    params: &ParamStore<f64>,
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let mut analytic = tape.backward(loss)?.param_grads(params);
    drop(tape);
    if opts.corrupt {
        if let Some(v) = analytic.iter_mut().find_map(|t| t.data_mut().first_mut()) {
            *v += 1e-2 * (1.0 + v.abs());
        }
    }

    let coords: Vec<(ParamId, usize)> = params
        .iter()
        .flat_map(|(id, _, t)| (0..t.len()).map(move |e| (id, e)))
        .collect();
    let mut chosen: Vec<usize> = match opts.max_coords {
        Some(k) if k < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            sample(&mut rng, coords.len(), k).into_vec()
        }
        _ => (0..coords.len()).collect(),
    };
    chosen.sort_unstable();
    if opts.corrupt && !chosen.contains(&0) && !coords.is_empty() {
        chosen.insert(0, 0);
    }

    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    let mut refined = 0;
    for &c in &chosen {
        let (id, e) = coords[c];
        let a = analytic[id.0].data()[e];
        let n = central(&f, &mut work, id, e, opts.step)?;
        let mut err = rel_error(a, n, opts.floor);
        if err >= opts.tolerance {
            let n_small = central(&f, &mut work, id, e, opts.step * 1e-2)?;
            let err_small = rel_error(a, n_small, opts.floor);
            if err_small < err {
                refined += 1;
                err = err_small;
            }
        }
        max_rel = max_rel.max(err);
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: max_rel,
        checked: chosen.len(),
        refined,
        passed: max_rel < opts.tolerance,
    })
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape")
}

/// Names of the per-operation checks run by [`layer_suite`].
pub const LAYER_NAMES: &[&str] = &[
    "matmul",
    "add_bias",
    "add",
    "scale",
    "relu",
    "sigmoid",
    "l2_normalize_rows",
    "max_pool_over_set",
    "gather_rows",
    "weighted_gather",
    "concat_cols",
    "reshape",
    "sum",
    "mse",
    "weighted_sse",
];

/// One finite-difference check per tape operation on small random inputs.
///
/// Each op output is reduced through a weighted squared error against a
/// random target so every output element carries a distinct gradient.
pub fn layer_suite(seed: u64, corrupt: Option<&str>) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::with_capacity(LAYER_NAMES.len());
    for (li, &name) in LAYER_NAMES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(li as u64));
        let mut params = ParamStore::new();
        let a = params.add("a", random_tensor(&mut rng, &[6, 3]));
        let b = params.add("b", random_tensor(&mut rng, &[3, 4]));
        let bias = params.add("bias", random_tensor(&mut rng, &[3]));
        let other = params.add("other", random_tensor(&mut rng, &[6, 3]));
        let target = random_tensor(&mut rng, &[6, 4]);
        let weights: Vec<f64> = (0..64).map(|_| rng.random_range(0.5..1.5)).collect();
        let gather_idx: Vec<usize> = (0..8).map(|_| rng.random_range(0..6)).collect();
        let wg_w: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();

        let reduce = |tape: &mut Tape<f64>, y: Var| -> Result<Var> {
            let v = tape.value(y);
            let n = v.len();
            let tgt = Tensor::from_vec(
                v.shape().to_vec(),
                (0..n).map(|i| target.data()[i % target.len()]).collect(),
            )?;
            let w = (0..n).map(|i| weights[i % weights.len()]).collect();
            tape.weighted_sse(y, tgt, Some(w))
        };

        let f = |tape: &mut Tape<f64>, p: &ParamStore<f64>| -> Result<Var> {
            let xa = tape.param(p, a);
            let y = match name {
                "matmul" => {
                    let xb = tape.param(p, b);
                    tape.matmul(xa, xb)?
                }
                "add_bias" => {
                    let xb = tape.param(p, bias);
                    tape.add_bias(xa, xb)?
                }
                "add" => {
                    let xo = tape.param(p, other);
                    tape.add(xa, xo)?
                }
                "scale" => tape.scale(xa, -1.7),
                "relu" => tape.relu(xa),
                "sigmoid" => tape.sigmoid(xa),
                "l2_normalize_rows" => tape.l2_normalize_rows(xa)?,
                "max_pool_over_set" => tape.max_pool_over_set(xa, 3)?,
                "gather_rows" => tape.gather_rows(xa, gather_idx.clone())?,
                "weighted_gather" => {
                    tape.weighted_gather(xa, 3, gather_idx[..6].repeat(2), wg_w.clone())?
                }
                "concat_cols" => {
                    let xo = tape.param(p, other);
                    tape.concat_cols(xa, xo)?
                }
                "reshape" => tape.reshape(xa, &[3, 6])?,
                "sum" => {
                    let s = tape.sum(xa);
                    return tape.weighted_sse(s, Tensor::scalar(0.3), None);
                }
                "mse" => return tape.mse(xa, random_like(&target, 18)),
                "weighted_sse" => return reduce(tape, xa),
                other => unreachable!("unknown layer {other}"),
            };
            reduce(tape, y)
        };
        let opts = GradCheckOptions {
            corrupt: corrupt == Some(name),
            ..Default::default()
        };
        out.push(check_gradients(name, &params, f, &opts)?);
    }
    Ok(out)
}

fn random_like(src: &Tensor<f64>, n: usize) -> Tensor<f64> {
    Tensor::from_vec(
        vec![6, 3],
        (0..n).map(|i| src.data()[i % src.len()] * 0.5).collect(),
    )
    .expect("shape")
}
