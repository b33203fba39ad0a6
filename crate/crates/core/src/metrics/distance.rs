use crate::geometry::{resample, Point, Polyline, ResampleStrategy};

use super::EvalError;

/// Symmetric mean nearest-neighbor distance between two raw point sets.
pub fn chamfer_points(a: &[Point], b: &[Point]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "point sets must be non-empty");
    let nearest = |p: &Point, set: &[Point]| {
        set.iter().map(|q| p.dist(q)).fold(f64::INFINITY, f64::min)
    };
    let fwd: f64 = a.iter().map(|p| nearest(p, b)).sum::<f64>() / a.len() as f64;
    let bwd: f64 = b.iter().map(|q| nearest(q, a)).sum::<f64>() / b.len() as f64;
    0.5 * (fwd + bwd)
}

/// Chamfer distance between two polylines, each uniformly resampled to
/// `n_pts` vertices first.
pub fn chamfer_distance(p: &Polyline, q: &Polyline, n_pts: usize) -> Result<f64, EvalError> {
    let a = resample(p, ResampleStrategy::Uniform(n_pts))?;
    let b = resample(q, ResampleStrategy::Uniform(n_pts))?;
    Ok(chamfer_points(a.vertices(), b.vertices()))
}

/// Discrete Fréchet distance between two raw vertex sequences, computed
/// with the standard dynamic program: `ca(i,j)` is the cheapest coupling
/// norm over prefixes, combining `max` with the pairwise distance and
/// `min` over the three monotone predecessor states.
pub fn frechet_points(u: &[Point], v: &[Point]) -> f64 {
    assert!(!u.is_empty() && !v.is_empty(), "vertex sequences must be non-empty");
    let (p, q) = (u.len(), v.len());
    let mut ca = vec![0.0f64; p * q];
    for i in 0..p {
        for j in 0..q {
            let d = u[i].dist(&v[j]);
            ca[i * q + j] = match (i, j) {
                (0, 0) => d,
                (_, 0) => ca[(i - 1) * q].max(d),
                (0, _) => ca[j - 1].max(d),
                _ => {
                    let reach = ca[(i - 1) * q + j]
                        .min(ca[(i - 1) * q + j - 1])
                        .min(ca[i * q + j - 1]);
                    reach.max(d)
                }
            };
        }
    }
    ca[p * q - 1]
}

/// Discrete Fréchet distance between two polylines, each uniformly
/// resampled to `m` vertices first.
pub fn frechet_distance(p: &Polyline, q: &Polyline, m: usize) -> Result<f64, EvalError> {
    let a = resample(p, ResampleStrategy::Uniform(m))?;
    let b = resample(q, ResampleStrategy::Uniform(m))?;
    Ok(frechet_points(a.vertices(), b.vertices()))
}

/// Test oracle: the minimum coupling norm found by explicitly walking
/// every monotone lattice path from (0,0) to (p-1,q-1). Exponential in
/// the input size, so sequences are capped at 8 vertices.
pub fn frechet_bruteforce(u: &[Point], v: &[Point]) -> Result<f64, EvalError> {
    if u.len() > 8 {
        return Err(EvalError::BruteForceGuard(u.len()));
    }
    if v.len() > 8 {
        return Err(EvalError::BruteForceGuard(v.len()));
    }
    assert!(!u.is_empty() && !v.is_empty());
    fn walk(u: &[Point], v: &[Point], i: usize, j: usize, running_max: f64, best: &mut f64) {
        let here = running_max.max(u[i].dist(&v[j]));
        if here >= *best {
            return; // this path can only get worse
        }
        if i == u.len() - 1 && j == v.len() - 1 {
            *best = here;
            return;
        }
        if i + 1 < u.len() {
            walk(u, v, i + 1, j, here, best);
        }
        if j + 1 < v.len() {
            walk(u, v, i, j + 1, here, best);
        }
        if i + 1 < u.len() && j + 1 < v.len() {
            walk(u, v, i + 1, j + 1, here, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(u, v, 0, 0, f64::NEG_INFINITY, &mut best);
    Ok(best)
}
