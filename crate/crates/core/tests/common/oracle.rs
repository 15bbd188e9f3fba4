//! Brute-force reference implementations and the checks built on them.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfanet_core::freqfeat::{fft_magnitude_phase, per_patch_spectra};
use sfanet_core::metrics::{confusion, eer, min_dcf, roc_auc, threshold_metrics, DcfParams, PositiveClass, ScoredSet};
use sfanet_core::{DecisionPolicy, Label};

pub type Pairs = Vec<(f64, Label)>;

pub fn random_pairs(rng: &mut ChaCha8Rng) -> Pairs {
    let n = rng.random_range(1..=100);
    let tied = rng.random_bool(0.5);
    let p_real = rng.random_range(0.05..0.95);
    (0..n)
        .map(|_| {
            let s: f64 = if tied {
                f64::from(rng.random_range(0..=20u32)) / 20.0
            } else {
                rng.random()
            };
            let label = if rng.random_bool(p_real) {
                Label::Real
            } else {
                Label::Fake
            };
            (s, label)
        })
        .collect()
}

pub fn auc(pairs: &Pairs) -> Option<f64> {
    let reals: Vec<f64> = pairs.iter().filter(|p| p.1 == Label::Real).map(|p| p.0).collect();
    let fakes: Vec<f64> = pairs.iter().filter(|p| p.1 == Label::Fake).map(|p| p.0).collect();
    if reals.is_empty() || fakes.is_empty() {
        return None;
    }
    let mut twice = 0u64;
    for r in &reals {
        for f in &fakes {
            twice += if r > f {
                2
            } else if r == f {
                1
            } else {
                0
            };
        }
    }
    Some(twice as f64 / (2.0 * reals.len() as f64 * fakes.len() as f64))
}

/// `(tp, fp, tn, fn)` with real as the positive class.
pub fn counts(pairs: &Pairs, tau: f64) -> (usize, usize, usize, usize) {
    let mut c = (0, 0, 0, 0);
    for &(s, label) in pairs {
        let says_real = !(s < tau);
        match (says_real, label == Label::Real) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, false) => c.2 += 1,
            (false, true) => c.3 += 1,
        }
    }
    c
}

/// `(fnr, fpr)` at every distinct score and at +inf, thresholds ascending.
fn det_curve(pairs: &Pairs) -> Vec<(f64, f64)> {
    let mut ts: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts.push(f64::INFINITY);
    let nr = pairs.iter().filter(|p| p.1 == Label::Real).count() as f64;
    let nf = pairs.len() as f64 - nr;
    ts.iter()
        .map(|&t| {
            let missed = pairs.iter().filter(|p| p.1 == Label::Real && p.0 < t).count() as f64;
            let accepted = pairs.iter().filter(|p| p.1 == Label::Fake && p.0 >= t).count() as f64;
            (missed / nr, accepted / nf)
        })
        .collect()
}

pub fn eer_bruteforce(pairs: &Pairs) -> f64 {
    let curve = det_curve(pairs);
    for w in curve.windows(2) {
        let ((fnr_a, fpr_a), (fnr_b, fpr_b)) = (w[0], w[1]);
        if fnr_a >= fpr_a {
            return fpr_a;
        }
        if fnr_b >= fpr_b {
            // Intersect the segment with fnr = fpr.
            let t = (fpr_a - fnr_a) / ((fnr_b - fnr_a) - (fpr_b - fpr_a));
            return fpr_a + t * (fpr_b - fpr_a);
        }
    }
    unreachable!("the reject-all point has fnr = 1")
}

pub fn min_dcf_bruteforce(pairs: &Pairs, c_miss: f64, c_fa: f64, p: f64) -> f64 {
    let norm = (c_miss * p).min(c_fa * (1.0 - p));
    det_curve(pairs)
        .into_iter()
        .map(|(fnr, fpr)| (c_miss * p * fnr + c_fa * (1.0 - p) * fpr) / norm)
        .fold(f64::INFINITY, f64::min)
}

/// Compares the library against the oracles on `cases` random sets.
pub fn check_metrics(cases: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let pairs = random_pairs(&mut rng);
        let set = ScoredSet::from_pairs(pairs.clone()).map_err(|e| e.to_string())?;
        let tau = rng.random_range(0.01..0.99);
        let policy = DecisionPolicy::new(tau).map_err(|e| e.to_string())?;
        let c = confusion(&set, policy, PositiveClass::Real);
        if (c.tp, c.fp, c.tn, c.fn_) != counts(&pairs, tau) {
            return Err(format!("case {case}: confusion {c:?} vs {:?}", counts(&pairs, tau)));
        }
        let (tp, fp, tn, fn_) = counts(&pairs, tau);
        let r = threshold_metrics(&set, policy);
        if r.accuracy != (tp + tn) as f64 / pairs.len() as f64 {
            return Err(format!("case {case}: accuracy {}", r.accuracy));
        }
        let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
        let recall = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
        if r.precision != precision || r.recall != recall {
            return Err(format!(
                "case {case}: precision/recall {:?}/{:?}",
                r.precision, r.recall
            ));
        }
        let want = auc(&pairs);
        match (want, roc_auc(&set)) {
            (None, Err(_)) => continue,
            (Some(w), Ok(a)) if w == a => {}
            (w, a) => return Err(format!("case {case}: auc {a:?} vs {w:?}")),
        }
        let e = eer(&set).map_err(|e| e.to_string())?;
        let we = eer_bruteforce(&pairs);
        if (e - we).abs() > 1e-9 {
            return Err(format!("case {case}: eer {e} vs {we}"));
        }
        let (cm, cf, pt) = (
            rng.random_range(0.5..5.0),
            rng.random_range(0.5..5.0),
            rng.random_range(0.05..0.95),
        );
        let params = DcfParams::new(cm, cf, pt).map_err(|e| e.to_string())?;
        let d = min_dcf(&set, params).map_err(|e| e.to_string())?.value;
        let wd = min_dcf_bruteforce(&pairs, cm, cf, pt);
        if (d - wd).abs() > 1e-9 {
            return Err(format!("case {case}: min dcf {d} vs {wd}"));
        }
    }
    Ok(())
}

/// Separable direct DFT, returning `(re, im)`.
pub fn dft2(x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = x.dim();
    let tw = |k: usize, n: usize, len: usize| {
        let a = -2.0 * std::f64::consts::PI * ((k * n) % len) as f64 / len as f64;
        (a.cos(), a.sin())
    };
    let mut rre = Array2::<f64>::zeros((h, w));
    let mut rim = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for k in 0..w {
            for n in 0..w {
                let (c, s) = tw(k, n, w);
                rre[[r, k]] += x[[r, n]] * c;
                rim[[r, k]] += x[[r, n]] * s;
            }
        }
    }
    let mut re = Array2::<f64>::zeros((h, w));
    let mut im = Array2::<f64>::zeros((h, w));
    for k in 0..h {
        for n in 0..h {
            let (c, s) = tw(k, n, h);
            for col in 0..w {
                re[[k, col]] += rre[[n, col]] * c - rim[[n, col]] * s;
                im[[k, col]] += rre[[n, col]] * s + rim[[n, col]] * c;
            }
        }
    }
    (re, im)
}

fn rel(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / scale.max(f64::MIN_POSITIVE)
}

/// Parseval, conjugate symmetry, direct-DFT agreement, constant and impulse
/// inputs, and patch tiling for every `size x size` image in `sizes`.
pub fn check_fft(sizes: impl IntoIterator<Item = usize>, seed: u64) -> Result<(), String> {
    const TOL: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for n in sizes {
        let x = Array2::from_shape_fn((n, n), |_| rng.random::<f64>());
        let spec = fft_magnitude_phase(x.view()).map_err(|e| e.to_string())?;
        let energy: f64 = x.iter().map(|v| v * v).sum();
        let spec_energy: f64 = spec.magnitude.iter().map(|m| m * m).sum();
        let e = rel(spec_energy, energy * (n * n) as f64, energy * (n * n) as f64);
        if e > TOL {
            return Err(format!("{n}x{n}: Parseval off by {e}"));
        }
        let scale = spec.magnitude.iter().cloned().fold(0.0, f64::max);
        let (re, im) = dft2(&x);
        for r in 0..n {
            for c in 0..n {
                let (m, p) = (spec.magnitude[[r, c]], spec.phase[[r, c]]);
                let (fr, fi) = (m * p.cos(), m * p.sin());
                if rel(fr, re[[r, c]], scale) > TOL || rel(fi, im[[r, c]], scale) > TOL {
                    return Err(format!("{n}x{n}: bin ({r},{c}) differs from the direct DFT"));
                }
                let (cr, cc) = ((n - r) % n, (n - c) % n);
                let (m2, p2) = (spec.magnitude[[cr, cc]], spec.phase[[cr, cc]]);
                if rel(m, m2, scale) > TOL
                    || rel(fi, -(m2 * p2.sin()), scale) > TOL
                    || rel(fr, m2 * p2.cos(), scale) > TOL
                {
                    return Err(format!("{n}x{n}: bins ({r},{c}) and ({cr},{cc}) are not conjugate"));
                }
            }
        }

        let k = 0.37;
        let flat = fft_magnitude_phase(Array2::from_elem((n, n), k).view()).map_err(|e| e.to_string())?;
        let dc = k * (n * n) as f64;
        for ((r, c), &m) in flat.magnitude.indexed_iter() {
            let want = if (r, c) == (0, 0) { dc } else { 0.0 };
            if rel(m, want, dc) > TOL {
                return Err(format!("{n}x{n}: constant image has energy at ({r},{c})"));
            }
        }
        let mut imp = Array2::zeros((n, n));
        imp[[0, 0]] = 1.0;
        let imp = fft_magnitude_phase(imp.view()).map_err(|e| e.to_string())?;
        if imp.magnitude.iter().any(|&m| rel(m, 1.0, 1.0) > TOL) || imp.phase.iter().any(|p| p.abs() > TOL) {
            return Err(format!("{n}x{n}: impulse spectrum is not flat"));
        }

        for p in (1..=n).filter(|p| n % p == 0) {
            let tiled = per_patch_spectra(x.view(), p).map_err(|e| e.to_string())?;
            let g = n / p;
            if (tiled.grid_rows, tiled.grid_cols, tiled.len()) != (g, g, g * g) {
                return Err(format!("{n}x{n} p={p}: wrong tile grid"));
            }
            for (idx, t) in tiled.patches.iter().enumerate() {
                let (tr, tc) = (idx / g, idx % g);
                let tile = x
                    .slice(ndarray::s![tr * p..(tr + 1) * p, tc * p..(tc + 1) * p])
                    .to_owned();
                let want = fft_magnitude_phase(tile.view()).map_err(|e| e.to_string())?;
                if t.magnitude != want.magnitude || t.phase != want.phase {
                    return Err(format!("{n}x{n} p={p}: tile {idx} differs from its slice"));
                }
            }
        }
    }
    Ok(())
}
