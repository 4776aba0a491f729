//! Reference implementations of the statistics kernel, computed by means
//! independent of the production code: exact rational raw moments for
//! correlation, bisected quadrature for the normal quantile, compensated
//! natural-log sums for entropy, integer slot indexing for bucket counts,
//! and a naive per-window rescan for the interval maximizer. Each check_*
//! runs `count` randomized inputs and reports the first disagreement.

use std::collections::HashMap;

use flowprint::stats;
use flowprint::trace::ThroughputTrace;
use flowprint::Error;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

type Rat = BigRational;

fn ratf(v: f64) -> Rat {
    BigRational::from_float(v).expect("finite value")
}

/// Pearson r from exact raw moments: n·Σxy − Σx·Σy over the root of the
/// variance product, with the square root taken only at the very end.
/// None when either series is rationally constant.
pub fn rational_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = rat(x.len() as u64);
    let sum = |v: &[f64]| v.iter().fold(Rat::zero(), |a, &b| a + ratf(b));
    let sx = sum(x);
    let sy = sum(y);
    let sxx = x.iter().fold(Rat::zero(), |a, &b| a + ratf(b) * ratf(b));
    let syy = y.iter().fold(Rat::zero(), |a, &b| a + ratf(b) * ratf(b));
    let sxy = x
        .iter()
        .zip(y)
        .fold(Rat::zero(), |acc, (&a, &b)| acc + ratf(a) * ratf(b));
    let vx = &n * sxx - &sx * &sx;
    let vy = &n * syy - &sy * &sy;
    if vx.is_zero() || vy.is_zero() {
        return None;
    }
    let cov = &n * sxy - sx * sy;
    if cov.is_zero() {
        return Some(0.0);
    }
    let r2 = (&cov * &cov) / (vx * vy);
    let r = r2.to_f64().expect("ratio in range").sqrt().min(1.0);
    Some(if cov.is_negative() { -r } else { r })
}

fn rat(v: u64) -> Rat {
    BigRational::from_integer(v.into())
}

/// z with P(|Z| <= z) = level for a unit normal, by bisection on a
/// composite-Simpson integral of the density over [0, z].
pub fn quadrature_z_crit(level: f64) -> f64 {
    let target = level / 2.0;
    let (mut lo, mut hi) = (0.0f64, 8.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if simpson_normal_mass(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn simpson_normal_mass(z: f64) -> f64 {
    const PANELS: usize = 1200;
    let h = z / PANELS as f64;
    let pdf = |u: f64| (-0.5 * u * u).exp();
    let mut s = pdf(0.0) + pdf(z);
    for i in 1..PANELS {
        s += pdf(h * i as f64) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0 / (2.0 * std::f64::consts::PI).sqrt()
}

/// Shannon entropy in bits via compensated summation over natural logs.
pub fn compensated_entropy_bits(p: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &v in p {
        if v > 0.0 {
            let term = -v * v.ln() / std::f64::consts::LN_2;
            let t = sum + term;
            comp += if sum.abs() >= term.abs() {
                (sum - t) + term
            } else {
                (term - t) + sum
            };
            sum = t;
        }
    }
    sum + comp
}

fn dyadic(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0..=1024) as f64 / 16.0
}

pub fn check_pearson(seed: u64, count: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let n = rng.random_range(2..=40);
        let mut x: Vec<f64> = (0..n).map(|_| dyadic(&mut rng)).collect();
        let mut y: Vec<f64> = (0..n).map(|_| dyadic(&mut rng)).collect();
        match rng.random_range(0..10) {
            0 => x = vec![x[0]; n],
            1 => y = vec![y[0]; n],
            2 => {
                // exact affine image, r = +/-1
                let a = rng.random_range(1..=4) as f64 / 2.0;
                let b = dyadic(&mut rng);
                let s = if rng.random_bool(0.5) { a } else { -a };
                y = x.iter().map(|&v| s * v + b).collect();
            }
            _ => {}
        }
        match (stats::pearson(&x, &y), rational_pearson(&x, &y)) {
            (Ok(got), Some(want)) if (got - want).abs() <= 1e-9 => {}
            (Err(Error::ZeroVariance(_)), None) => {}
            (got, want) => {
                return Err(format!("input {i}: pearson {got:?} vs oracle {want:?}"));
            }
        }
    }
    Ok(())
}

pub fn check_fisher_ci(seed: u64, count: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z_cache: HashMap<u64, f64> = HashMap::new();
    let presets = [0.8, 0.9, 0.95, 0.975, 0.99];
    let tanh_def = |a: f64| {
        let e = (2.0 * a).exp();
        (e - 1.0) / (e + 1.0)
    };
    for i in 0..count {
        let r: f64 = rng.random_range(-0.999..=0.999);
        let n: usize = rng.random_range(4..=200);
        let level: f64 = if rng.random_bool(0.7) {
            presets[rng.random_range(0..presets.len())]
        } else {
            rng.random_range(0.5..=0.995)
        };
        let zc = *z_cache
            .entry(level.to_bits())
            .or_insert_with(|| quadrature_z_crit(level));
        let z = 0.5 * ((1.0 + r) / (1.0 - r)).ln();
        let half = zc / ((n - 3) as f64).sqrt();
        let (want_lo, want_hi) = (tanh_def(z - half), tanh_def(z + half));
        let (lo, hi) = stats::fisher_ci(r, n, level)
            .map_err(|e| format!("input {i}: fisher_ci({r}, {n}, {level}): {e}"))?;
        if (lo - want_lo).abs() > 1e-9 || (hi - want_hi).abs() > 1e-9 {
            return Err(format!(
                "input {i}: fisher_ci({r}, {n}, {level}) = ({lo}, {hi}) vs oracle ({want_lo}, {want_hi})"
            ));
        }
    }
    Ok(())
}

fn random_distribution(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let k = rng.random_range(1..=12);
    if rng.random_bool(0.1) {
        return vec![1.0 / k as f64; k];
    }
    let mut w: Vec<f64> = (0..k)
        .map(|_| {
            if rng.random_bool(0.15) {
                0.0
            } else {
                rng.random_range(1..=50) as f64
            }
        })
        .collect();
    if w.iter().all(|v| *v == 0.0) {
        w[0] = 1.0;
    }
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

pub fn check_entropy(seed: u64, count: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let p = random_distribution(&mut rng);
        let got = stats::entropy(&p).map_err(|e| format!("input {i}: {e}"))?;
        let want = compensated_entropy_bits(&p);
        if (got - want).abs() > 1e-9 {
            return Err(format!("input {i}: entropy {got} vs oracle {want} on {p:?}"));
        }
    }
    Ok(())
}

pub fn check_conditional_set_entropy(seed: u64, count: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let n = rng.random_range(1..=40);
        let s = rng.random_range(1..=n);
        let p: f64 = match rng.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..=1.0),
        };
        let got = stats::conditional_set_entropy(s, p, n);
        if s == n && p < 1.0 {
            if !matches!(got, Err(Error::Domain(_))) {
                return Err(format!("input {i}: full-cover set with p {p} gave {got:?}"));
            }
            continue;
        }
        let got = got.map_err(|e| format!("input {i}: ({s}, {p}, {n}): {e}"))?;
        // The explicit posterior the closed form summarizes: mass p spread
        // over the s members, 1-p over the rest.
        let mut atoms = vec![p / s as f64; s];
        atoms.extend(std::iter::repeat_n((1.0 - p) / (n - s).max(1) as f64, n - s));
        let want = compensated_entropy_bits(&atoms);
        if (got - want).abs() > 1e-9 {
            return Err(format!(
                "input {i}: conditional_set_entropy({s}, {p}, {n}) = {got} vs posterior entropy {want}"
            ));
        }
    }
    Ok(())
}

pub fn check_weighted_entropy(seed: u64, count: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let p = random_distribution(&mut rng);
        let obs: Vec<(f64, f64)> = p
            .iter()
            .map(|&pi| (pi, rng.random_range(0..=2048) as f64 / 64.0))
            .collect();
        let got = stats::weighted_entropy(&obs).map_err(|e| format!("input {i}: {e}"))?;
        let want = obs
            .iter()
            .fold(Rat::zero(), |acc, &(pi, h)| acc + ratf(pi) * ratf(h))
            .to_f64()
            .expect("in range");
        if (got - want).abs() > 1e-9 {
            return Err(format!("input {i}: weighted_entropy {got} vs oracle {want}"));
        }
    }
    Ok(())
}

/// Sample grids are laid out on integer slots of width dt so the oracle can
/// assign samples to buckets by pure integer indexing, independent of the
/// float midpoint arithmetic in the production path.
pub fn check_mutual_exclusivity(seed: u64, count: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let dt = [0.0625, 0.125, 0.25][rng.random_range(0..3)];
        let k: usize = rng.random_range(1..=7);
        let bucket = k as f64 * dt;
        let thr = if rng.random_bool(0.5) { 1.0 } else { 50.0 };
        let gx: usize = rng.random_range(0..=8);
        let gy: usize = rng.random_range(0..=8);
        let len_x: usize = rng.random_range(60..=150);
        let len_y: usize = rng.random_range(60..=150);
        let all_zero = rng.random_range(0..20) == 0;
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len)
                .map(|_| {
                    if all_zero {
                        0.0
                    } else {
                        [0.0, 0.0, 200.0, 400.0, 600.0][rng.random_range(0..5)]
                    }
                })
                .collect()
        };
        let sx = draw(len_x);
        let sy = draw(len_y);
        let x = ThroughputTrace::new(gx as f64 * dt, dt, sx.clone()).unwrap();
        let y = ThroughputTrace::new(gy as f64 * dt, dt, sy.clone()).unwrap();

        let t0 = gx.max(gy);
        let t1 = (gx + len_x).min(gy + len_y);
        let nb = (t1 - t0) / k;
        let mut either = 0usize;
        let mut one = 0usize;
        for b in 0..nb {
            let s0 = t0 + b * k;
            let mean = |s: &[f64], g: usize| -> f64 {
                (s0..s0 + k).map(|slot| s[slot - g]).sum::<f64>() / k as f64
            };
            let xa = mean(&sx, gx) > thr;
            let ya = mean(&sy, gy) > thr;
            if xa || ya {
                either += 1;
                if xa != ya {
                    one += 1;
                }
            }
        }

        match stats::mutual_exclusivity(&x, &y, bucket, thr) {
            Ok(v) if either > 0 => {
                let want = one as f64 / either as f64;
                if (v - want).abs() > 1e-9 {
                    return Err(format!("input {i}: exclusivity {v} vs oracle {want}"));
                }
            }
            Err(Error::NoActivity) if either == 0 => {}
            other => {
                return Err(format!(
                    "input {i}: exclusivity {other:?} vs counts {one}/{either}"
                ));
            }
        }
    }
    Ok(())
}

/// Naive two-pass correlation over one window; None when either side is
/// constant. Deliberately avoids the prefix-moment path under test.
fn naive_window_r(x: &[f64], y: &[f64]) -> Option<f64> {
    let m = x.len() as f64;
    let mx = x.iter().sum::<f64>() / m;
    let my = y.iter().sum::<f64>() / m;
    let (mut cxy, mut cxx, mut cyy) = (0.0f64, 0.0f64, 0.0f64);
    for (a, b) in x.iter().zip(y) {
        cxy += (a - mx) * (b - my);
        cxx += (a - mx) * (a - mx);
        cyy += (b - my) * (b - my);
    }
    if cxx == 0.0 || cyy == 0.0 {
        None
    } else {
        Some((cxy / (cxx.sqrt() * cyy.sqrt())).clamp(-1.0, 1.0))
    }
}

/// Exhaustively rescans every qualifying window and cross-checks both the
/// maximum and the window the production code reports. Integer-valued
/// samples keep every per-window moment far from the zero-variance skip
/// boundary, so oracle and implementation always agree on which windows
/// count.
pub fn check_windowed_scan(seed: u64, count: usize, max_len: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let dt = if rng.random_bool(0.5) { 0.125 } else { 0.25 };
        let (gx, gy): (usize, usize) = if rng.random_bool(0.8) {
            (0, 0)
        } else if rng.random_bool(0.5) {
            (rng.random_range(0..=4), 0)
        } else {
            (0, rng.random_range(0..=4))
        };
        let n = rng.random_range(2..=max_len);
        let off = gx.max(gy);
        let tail: usize = rng.random_range(0..=5);
        let len_x = off - gx + n + if rng.random_bool(0.5) { tail } else { 0 };
        let len_y = off - gy + n + if len_x > off - gx + n { 0 } else { tail };

        let mut sx = Vec::with_capacity(len_x);
        for j in 0..len_x {
            if j > 0 && rng.random_bool(0.35) {
                sx.push(sx[j - 1]);
            } else {
                sx.push(rng.random_range(0..=12) as f64);
            }
        }
        let mode = rng.random_range(0..10);
        let mut sy = Vec::with_capacity(len_y);
        for j in 0..len_y {
            let slot = gy + j;
            let base = if slot >= gx && slot < gx + len_x {
                sx[slot - gx]
            } else {
                rng.random_range(0..=12) as f64
            };
            let v = match mode {
                1..=3 => (base as i64 + rng.random_range(-2..=2)).clamp(0, 12) as f64,
                4 => 12.0 - base,
                _ => rng.random_range(0..=12) as f64,
            };
            sy.push(v);
        }
        if mode == 0 {
            let (a, b) = (sx[0], rng.random_range(0..=12) as f64);
            sx = vec![a; len_x];
            sy = vec![b; len_y];
        }

        let m0: usize = rng.random_range(2..=n + 4);
        let min_window = m0 as f64 * dt;
        let x = ThroughputTrace::new(gx as f64 * dt, dt, sx.clone()).unwrap();
        let y = ThroughputTrace::new(gy as f64 * dt, dt, sy.clone()).unwrap();

        let xs = &sx[off - gx..off - gx + n];
        let ys = &sy[off - gy..off - gy + n];
        let min_len = m0.max(2).min(n).max(2);
        let mut best: Option<f64> = None;
        for s in 0..n {
            for e in (s + min_len)..=n {
                if let Some(r) = naive_window_r(&xs[s..e], &ys[s..e]) {
                    if best.is_none_or(|b| r > b) {
                        best = Some(r);
                    }
                }
            }
        }

        match (stats::windowed_max_correlation(&x, &y, min_window), best) {
            (Ok(wm), Some(want)) => {
                if (wm.r_max - want).abs() > 1e-9 {
                    return Err(format!(
                        "input {i}: windowed max {} vs exhaustive {want}",
                        wm.r_max
                    ));
                }
                let t0 = off as f64 * dt;
                let s_idx = ((wm.window_start - t0) / dt).round() as usize;
                let m = (wm.window_len / dt).round() as usize;
                match naive_window_r(&xs[s_idx..s_idx + m], &ys[s_idx..s_idx + m]) {
                    Some(r) if (r - want).abs() <= 1e-9 => {}
                    other => {
                        return Err(format!(
                            "input {i}: reported window [{s_idx}, {}) has r {other:?}, max is {want}",
                            s_idx + m
                        ));
                    }
                }
            }
            (Err(Error::NoValidInterval), None) => {}
            (got, want) => {
                return Err(format!("input {i}: windowed {got:?} vs oracle {want:?}"));
            }
        }
    }
    Ok(())
}
