//! Finite-difference gradient verification.
//!
//! The checker compares tape gradients against central differences
//! (f(p+eps) - f(p-eps)) / (2 eps) coordinate by coordinate, always in
//! the precision the caller instantiated (use `f64` for meaningful
//! tolerances). Large parameter sets can be spot-checked by sampling a
//! fixed number of coordinates per tensor.

use super::{Scalar, Tape, Tensor, Var};
use crate::Result;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, Copy)]
pub enum CoordSampling {
    /// Perturb every coordinate of every parameter.
    All,
    /// Perturb at most this many randomly chosen coordinates per tensor.
    PerTensor { max: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// (param index, flat coordinate, analytic, numeric) of the worst case.
    pub worst: Option<(usize, usize, f64, f64)>,
}

const DENOM_FLOOR: f64 = 1e-8;

/// Worst relative error over a battery of randomized gradient checks
/// covering every differentiable op kind.
pub fn check_all_ops(seed: u64, eps: f64) -> crate::Result<GradReport> {
    use crate::rng::substream;
    use rand::Rng;

    fn rand_tensor(rng: &mut impl Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> crate::Result<Var> {
        let shape = tape.value(v).shape().to_vec();
        let mut rng = crate::rng::substream(seed, "weights");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = tape.constant(Tensor::new(shape, data).unwrap());
        let prod = tape.mul(v, w)?;
        tape.sum(prod)
    }

    let mut worst = GradReport { max_rel_err: 0.0, coords_checked: 0, worst: None };
    let mut merge = |r: GradReport| {
        if r.max_rel_err > worst.max_rel_err {
            worst.max_rel_err = r.max_rel_err;
            worst.worst = r.worst;
        }
        worst.coords_checked += r.coords_checked;
    };

    let mut rng = substream(seed, "opcheck");
    let t = rng.gen_range(2..5usize);
    let d = rng.gen_range(2..6usize);

    // element-wise arithmetic and reductions
    let x = rand_tensor(&mut rng, vec![t, d], -2.0, 2.0);
    let y = rand_tensor(&mut rng, vec![t, d], -2.0, 2.0);
    merge(gradcheck(
        &|tape: &mut Tape<f64>, v: &[Var]| {
            let s = tape.add(v[0], v[1])?;
            let s = tape.sub(s, v[1])?;
            let s = tape.mul(s, v[1])?;
            let s = tape.scale(s, 0.7)?;
            weighted_sum(tape, s, seed)
        },
        &[x, y],
        eps,
        CoordSampling::All,
    )?);

    // activations; keep relu inputs away from the kink
    let xa = {
        let mut t = rand_tensor(&mut rng, vec![t, d], 0.1, 2.0);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -*v;
            }
        }
        t
    };
    merge(gradcheck(
        &|tape: &mut Tape<f64>, v: &[Var]| {
            let r = tape.relu(v[0])?;
            let s = tape.sigmoid(v[0])?;
            let h = tape.tanh(v[0])?;
            let a = tape.add(r, s)?;
            let a = tape.add(a, h)?;
            weighted_sum(tape, a, seed + 1)
        },
        &[xa],
        eps,
        CoordSampling::All,
    )?);

    // rsqrt on positive inputs
    let xp = rand_tensor(&mut rng, vec![1, d], 0.2, 3.0);
    merge(gradcheck(
        &|tape: &mut Tape<f64>, v: &[Var]| {
            let r = tape.rsqrt_eps(v[0], 1e-5)?;
            weighted_sum(tape, r, seed + 2)
        },
        &[xp],
        eps,
        CoordSampling::All,
    )?);

    // matmul chain
    let ma = rand_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
    let mb = rand_tensor(&mut rng, vec![4, 2], -1.0, 1.0);
    merge(gradcheck(
        &|tape: &mut Tape<f64>, v: &[Var]| {
            let ab = tape.matmul(v[0], v[1])?;
            weighted_sum(tape, ab, seed + 7)
        },
        &[ma, mb],
        eps,
        CoordSampling::All,
    )?);

    // concat both axes, repeat, flatten
    let a = rand_tensor(&mut rng, vec![2, d], -1.0, 1.0);
    let b = rand_tensor(&mut rng, vec![3, d], -1.0, 1.0);
    let r = rand_tensor(&mut rng, vec![1, d], -1.0, 1.0);
    merge(gradcheck(
        &|tape: &mut Tape<f64>, v: &[Var]| {
            let cat0 = tape.concat(&[v[0], v[1]], 0)?;
            let rep = tape.repeat_rows(v[2], 5)?;
            let cat1 = tape.concat(&[cat0, rep], 1)?;
            let flat = tape.flatten(cat1, vec![1, 5 * 2 * d])?;
            weighted_sum(tape, flat, seed + 3)
        },
        &[a, b, r],
        eps,
        CoordSampling::All,
    )?);

    // batch statistics and per-channel affine
    let xb = rand_tensor(&mut rng, vec![t.max(3), d], -2.0, 2.0);
    let sc = rand_tensor(&mut rng, vec![1, d], 0.5, 1.5);
    let sh = rand_tensor(&mut rng, vec![1, d], -0.5, 0.5);
    merge(gradcheck(
        &|tape: &mut Tape<f64>, v: &[Var]| {
            let mu = tape.mean_rows(v[0])?;
            let var = tape.var_rows(v[0])?;
            let inv = tape.rsqrt_eps(var, 1e-5)?;
            let mui = tape.mul(mu, inv)?;
            let neg = tape.scale(mui, -1.0)?;
            let xhat = tape.affine_rows(v[0], inv, neg)?;
            let out = tape.affine_rows(xhat, v[1], v[2])?;
            weighted_sum(tape, out, seed + 4)
        },
        &[xb, sc, sh],
        eps,
        CoordSampling::All,
    )?);

    // fully connected into the bce loss
    let xf = rand_tensor(&mut rng, vec![t, d], -1.0, 1.0);
    let w = rand_tensor(&mut rng, vec![d, 3], -1.0, 1.0);
    let bias = rand_tensor(&mut rng, vec![3], -0.5, 0.5);
    let targets = {
        let bits: Vec<f64> = (0..t * 3).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![t, 3], bits).unwrap()
    };
    merge(gradcheck(
        &|tape: &mut Tape<f64>, v: &[Var]| {
            let logits = tape.fully_connected(v[0], v[1], v[2])?;
            tape.bce_with_logits(logits, &targets)
        },
        &[xf, w, bias],
        eps,
        CoordSampling::All,
    )?);

    // convolutions (both strides) with the image ops
    let (h, wd) = (rng.gen_range(4..7usize), rng.gen_range(4..7usize));
    let img = rand_tensor(&mut rng, vec![2, h, wd], -1.0, 1.0);
    let k1 = rand_tensor(&mut rng, vec![3, 2, 3, 3], -0.5, 0.5);
    let b1 = rand_tensor(&mut rng, vec![3], -0.2, 0.2);
    let k2 = rand_tensor(&mut rng, vec![2, 3, 3, 3], -0.5, 0.5);
    let b2 = rand_tensor(&mut rng, vec![2], -0.2, 0.2);
    let pts: Vec<[f64; 2]> = (0..4)
        .map(|_| [rng.gen_range(-0.6..wd as f64), rng.gen_range(-0.6..h as f64)])
        .collect();
    merge(gradcheck(
        &|tape: &mut Tape<f64>, v: &[Var]| {
            let c1 = tape.conv2d(v[0], v[1], v[2], 1, 1)?;
            let c2 = tape.conv2d(c1, v[3], v[4], 2, 1)?;
            let up = tape.bilinear_upsample(c2, 2)?;
            let samp = tape.bilinear_sample(up, &pts)?;
            let pool = tape.global_avg_pool(up)?;
            let a = weighted_sum(tape, samp, seed + 5)?;
            let b = weighted_sum(tape, pool, seed + 6)?;
            tape.add(a, b)
        },
        &[img, k1, b1, k2, b2],
        eps,
        CoordSampling::All,
    )?);

    Ok(worst)
}

/// Check the analytic gradient of a scalar-valued function of `params`.
///
/// `f` rebuilds its computation from the leaf vars it is given each time
/// it is called, so it must be deterministic.
pub fn gradcheck<T, F>(
    f: &F,
    params: &[Tensor<T>],
    eps: f64,
    sampling: CoordSampling,
) -> Result<GradReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if params.is_empty() || params.iter().all(|p| p.numel() == 0) {
        return Ok(GradReport {
            max_rel_err: 0.0,
            coords_checked: 0,
            worst: None,
        });
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.iter().map(|x| x.as_f64()).collect()))
        .collect();

    let eval = |params: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item().as_f64())
    };

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };

    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = match sampling {
            CoordSampling::All => (0..p.numel()).collect(),
            CoordSampling::PerTensor { max, seed } => {
                let mut all: Vec<usize> = (0..p.numel()).collect();
                let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (pi as u64).wrapping_mul(0x9e37));
                all.shuffle(&mut rng);
                all.truncate(max);
                all
            }
        };
        for &ci in &coords {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + T::from_f64(eps);
            let plus = eval(&work)?;
            work[pi].data_mut()[ci] = orig - T::from_f64(eps);
            let minus = eval(&work)?;
            work[pi].data_mut()[ci] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].as_ref().map(|g| g[ci]).unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, ci, a, numeric));
            }
        }
    }
    Ok(report)
}
