//! Slow reference implementations and synthetic data generators.
//!
//! Compiled only with the `testing` feature; the test and benchmark suites
//! use these as independent checks on the fast paths. Nothing here calls
//! into the production solvers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Output of the reference trend-filter solve.
#[derive(Debug, Clone)]
pub struct ReferenceTv2 {
    pub trend: Vec<f64>,
    pub objective: f64,
    /// Certified duality gap: `objective` is within `gap` of the true
    /// minimum.
    pub gap: f64,
    pub iterations: usize,
}

fn apply_d(u: &[f64]) -> Vec<f64> {
    (1..u.len() - 1)
        .map(|t| u[t + 1] - 2.0 * u[t] + u[t - 1])
        .collect()
}

fn apply_dt(v: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (t, &vt) in v.iter().enumerate() {
        out[t] += vt;
        out[t + 1] -= 2.0 * vt;
        out[t + 2] += vt;
    }
    out
}

fn primal_value(x: &[f64], u: &[f64], lambda: f64) -> f64 {
    let fit: f64 = x.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum();
    let tv: f64 = apply_d(u).iter().map(|d| d.abs()).sum();
    fit + lambda * tv
}

/// Solves `min_u ||u - x||^2 + lambda ||D2 u||_1` by accelerated projected
/// gradient on the box-constrained dual
/// `max_{|y| <= lambda} y' D2 x - ||D2' y||^2 / 4`,
/// recovering `u = x - D2' y / 2`. Runs until the duality gap certifies the
/// returned objective to `tol` (relative), or `max_iter`.
///
/// The gap bound makes this self-validating, which is the point: it answers
/// for itself instead of trusting the solver under test.
pub fn solve_tv2_reference(x: &[f64], lambda: f64, tol: f64, max_iter: usize) -> ReferenceTv2 {
    let len = x.len();
    assert!(len >= 3, "reference solver needs length >= 3");
    let m = len - 2;
    if lambda == 0.0 {
        return ReferenceTv2 {
            trend: x.to_vec(),
            objective: 0.0,
            gap: 0.0,
            iterations: 0,
        };
    }

    let dx = apply_d(x);
    // Gradient of F(y) = ||D2' y||^2/4 - y' D2 x is D2 D2' y / 2 - D2 x;
    // ||D2||^2 <= 16, so 8 is a Lipschitz constant.
    let step = 1.0 / 8.0;
    let dual_value = |y: &[f64]| -> f64 {
        let dty = apply_dt(y, len);
        let quarter: f64 = dty.iter().map(|v| v * v).sum::<f64>() / 4.0;
        let lin: f64 = y.iter().zip(&dx).map(|(a, b)| a * b).sum();
        lin - quarter
    };
    let objective_f = |y: &[f64]| -> f64 { -dual_value(y) };

    let mut y = vec![0.0; m];
    let mut momentum = y.clone();
    let mut t = 1.0f64;
    let mut f_prev = objective_f(&y);
    let mut best = ReferenceTv2 {
        trend: x.to_vec(),
        objective: primal_value(x, x, lambda),
        gap: f64::INFINITY,
        iterations: 0,
    };

    for iter in 1..=max_iter {
        // gradient step at the momentum point, then project onto the box
        let dt_m = apply_dt(&momentum, len);
        let grad_part = apply_d(&dt_m);
        let mut y_next = vec![0.0; m];
        for i in 0..m {
            let g = 0.5 * grad_part[i] - dx[i];
            y_next[i] = (momentum[i] - step * g).clamp(-lambda, lambda);
        }

        let f_next = objective_f(&y_next);
        if f_next > f_prev {
            // monotone restart
            momentum = y_next.clone();
            t = 1.0;
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            momentum = y_next
                .iter()
                .zip(&y)
                .map(|(a, b)| a + beta * (a - b))
                .collect();
            t = t_next;
        }
        y = y_next;
        f_prev = f_next;

        if iter % 50 == 0 || iter == max_iter {
            let dty = apply_dt(&y, len);
            let u: Vec<f64> = x.iter().zip(&dty).map(|(xi, d)| xi - d / 2.0).collect();
            let p = primal_value(x, &u, lambda);
            let gap = p - dual_value(&y);
            if gap < best.gap {
                best = ReferenceTv2 {
                    trend: u,
                    objective: p,
                    gap,
                    iterations: iter,
                };
            }
            if best.gap <= tol * best.objective.abs().max(1e-12) {
                return best;
            }
        }
    }
    best
}

/// A piecewise-linear signal of length `len` with kinks at `knots`
/// (0-based interior indices) and the given per-piece slopes
/// (`slopes.len() == knots.len() + 1`), plus Gaussian-ish noise of the given
/// standard deviation. Returned raw; normalize before segmenting.
pub fn piecewise_linear_series(
    len: usize,
    knots: &[usize],
    slopes: &[f64],
    noise_std: f64,
    seed: u64,
) -> Vec<f64> {
    assert_eq!(slopes.len(), knots.len() + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(len);
    let mut level = 0.0;
    let mut piece = 0;
    for t in 0..len {
        if piece < knots.len() && t == knots[piece] {
            piece += 1;
        }
        if t > 0 {
            level += slopes[piece];
        }
        out.push(level + noise_std * gaussian(&mut rng));
    }
    out
}

/// Sum of 12 uniforms, shifted: mean 0, variance 1. Deterministic given the
/// rng state and free of rejection loops.
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    (0..12).map(|_| rng.gen::<f64>()).sum::<f64>() - 6.0
}

/// A meandering piecewise-linear series with randomized knot spacing and
/// alternating-sign slopes; the workhorse input for desk-scale fixtures.
/// Values wander in roughly [-1, 1] before per-window normalization.
pub fn zigzag_series(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(len);
    let mut level = rng.gen_range(-0.3..0.3);
    let mut t = 0;
    let mut sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    while t < len {
        let run = rng.gen_range(40..=90).min(len - t);
        let slope = sign * rng.gen_range(0.004..0.02);
        let volatility = if rng.gen::<f64>() < 0.3 {
            rng.gen_range(0.02..0.05)
        } else {
            rng.gen_range(0.0..0.01)
        };
        for _ in 0..run {
            out.push(level + volatility * gaussian(&mut rng));
            level += slope;
            // soft reflection keeps the walk bounded
            if level > 1.0 {
                level = 1.0;
            }
            if level < -1.0 {
                level = -1.0;
            }
        }
        sign = -sign * if rng.gen::<f64>() < 0.15 { -1.0 } else { 1.0 };
        t += run;
    }
    out
}

/// Writes the bundled desk-scale corpus: `subsets` CSV directories under
/// `<root>/data` plus `train.txt` / `val.txt` / `test.txt` split lists under
/// `<root>/splits`. Fully determined by `seed`.
pub fn write_desk_corpus(
    root: &std::path::Path,
    train: usize,
    val: usize,
    test: usize,
    series_len: usize,
    seed: u64,
) -> std::io::Result<()> {
    use std::fmt::Write as _;
    let data_dir = root.join("data");
    let split_dir = root.join("splits");
    std::fs::create_dir_all(&data_dir)?;
    std::fs::create_dir_all(&split_dir)?;

    let total = train + val + test;
    let mut names = Vec::with_capacity(total);
    for i in 0..total {
        let subset = format!("subset{i:02}");
        let dir = data_dir.join(&subset);
        std::fs::create_dir_all(&dir)?;
        let left = zigzag_series(series_len, seed.wrapping_mul(1000).wrapping_add(2 * i as u64));
        let right = zigzag_series(
            series_len + series_len / 4,
            seed.wrapping_mul(1000).wrapping_add(2 * i as u64 + 1),
        );
        let mut csv = String::from("left,right\n");
        let rows = left.len().max(right.len());
        for r in 0..rows {
            match (left.get(r), right.get(r)) {
                (Some(a), Some(b)) => writeln!(csv, "{a:.5},{b:.5}").unwrap(),
                (Some(a), None) => writeln!(csv, "{a:.5},").unwrap(),
                (None, Some(b)) => writeln!(csv, ",{b:.5}").unwrap(),
                (None, None) => {}
            }
        }
        std::fs::write(dir.join("series.csv"), csv)?;
        names.push(subset);
    }

    let join = |range: std::ops::Range<usize>| {
        names[range]
            .iter()
            .map(|s| format!("{s}\n"))
            .collect::<String>()
    };
    std::fs::write(split_dir.join("train.txt"), join(0..train))?;
    std::fs::write(split_dir.join("val.txt"), join(train..train + val))?;
    std::fs::write(split_dir.join("test.txt"), join(train + val..total))?;
    Ok(())
}
