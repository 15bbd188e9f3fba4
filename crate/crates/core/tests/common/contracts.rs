//! Head contracts shared by the integration tests and the acceptance run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfanet_core::heads::{ExtractorPreset, ModelBundle, ModelConfig, ModelKind};
use sfanet_core::Label;

use super::{noise_image, permute_tiles};

pub const ALL: [ModelKind; 5] = [
    ModelKind::Sfnet,
    ModelKind::Sfpnet,
    ModelKind::Swinatten,
    ModelKind::Swinfusion,
    ModelKind::FacecropPair,
];

/// 8x8 input, 4x4 FFT tiles on a 2x2 extractor grid, three-wide features.
pub fn tiny(kind: ModelKind) -> ModelConfig {
    let grid = if kind.is_patch_model() { Some(2) } else { None };
    let mut cfg = ModelConfig::new(
        kind,
        [8, 8],
        ExtractorPreset::RandomProjection { grid, dim: 3, seed: 4 },
    );
    cfg.patch_size = 4;
    cfg.encoder.freq_dim = 3;
    cfg.encoder.channels = 2;
    cfg.encoder.pool_grid = 2;
    cfg.head.dropout = 0.0;
    cfg
}

pub fn check_zero_half() -> Result<(), String> {
    let x = noise_image("x", 8, 8, 3, None);
    for kind in ALL {
        let mut m = ModelBundle::new(tiny(kind)).map_err(|e| e.to_string())?;
        m.set_params(vec![0.0; m.num_params()]).map_err(|e| e.to_string())?;
        let s = m.forward(std::slice::from_ref(&x)).map_err(|e| e.to_string())?[0].value();
        if s != 0.5 {
            return Err(format!("{kind} with zero parameters gives {s}"));
        }
    }
    Ok(())
}

/// Largest score change under tile permutations of the patch models.
pub fn check_permutation(tol: f64) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let x = noise_image("x", 8, 8, 21 + seed, None);
        for kind in [ModelKind::Sfpnet, ModelKind::Swinatten] {
            let mut m = ModelBundle::new(tiny(kind)).map_err(|e| e.to_string())?;
            m.init_weights(8 + seed);
            let a = m.score_one(&x).map_err(|e| e.to_string())?;
            for order in [[1, 0, 3, 2], [3, 2, 1, 0], [2, 0, 3, 1], [0, 3, 1, 2]] {
                let b = m.score_one(&permute_tiles(&x, 4, &order)).map_err(|e| e.to_string())?;
                worst = worst.max((a - b).abs());
            }
        }
    }
    if worst > tol {
        return Err(format!("permutation changed a score by {worst:e}"));
    }
    Ok(worst)
}

/// Largest relative gap between analytic and central-difference gradients.
pub fn check_gradients(tol: f64) -> Result<f64, String> {
    let batch: Vec<_> = (0..3)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Real } else { Label::Fake };
            noise_image(&format!("s{i}"), 8, 8, 10 + i, Some(label))
        })
        .collect();
    let mut worst: f64 = 0.0;
    for kind in ALL {
        let mut m = ModelBundle::new(tiny(kind)).map_err(|e| e.to_string())?;
        m.init_weights(17);
        let (_, grad) = m.loss_and_grad(&batch, None).map_err(|e| e.to_string())?;
        let base = m.params().map_err(|e| e.to_string())?.to_vec();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            m.set_params(p.clone()).map_err(|e| e.to_string())?;
            let up = m.loss(&batch).map_err(|e| e.to_string())?;
            p[i] -= 2.0 * h;
            m.set_params(p).map_err(|e| e.to_string())?;
            let down = m.loss(&batch).map_err(|e| e.to_string())?;
            let numeric = (up - down) / (2.0 * h);
            let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-3);
            if rel > tol {
                return Err(format!(
                    "{kind} parameter {i}: analytic {} vs numeric {numeric}",
                    grad[i]
                ));
            }
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// `[B, P, S + Fq]` fused tokens for random sfpnet configurations.
pub fn check_shape_chain(cases: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let (b, g, s, fq, split) = (
            rng.random_range(1..4usize),
            rng.random_range(1..4usize),
            rng.random_range(1..6usize),
            rng.random_range(1..6usize),
            rng.random_range(1..3usize),
        );
        let p = 4;
        let res = p * g * split;
        let mut cfg = ModelConfig::new(
            ModelKind::Sfpnet,
            [res, res],
            ExtractorPreset::RandomProjection {
                grid: Some(g),
                dim: s,
                seed: 1,
            },
        );
        cfg.patch_size = p;
        cfg.encoder.freq_dim = fq;
        cfg.encoder.channels = 1;
        let mut m = ModelBundle::new(cfg).map_err(|e| e.to_string())?;
        m.init_weights(b as u64);
        let batch: Vec<_> = (0..b)
            .map(|i| noise_image(&format!("x{i}"), res as u32, res as u32, i as u64, None))
            .collect();
        let t = m.trace(&batch).map_err(|e| e.to_string())?;
        let got = (t.fused.dim(), t.representation.dim(), t.scores.len());
        let want = ((b, g * g, s + fq), (b, s + fq), b);
        if got != want {
            return Err(format!("B={b} P={} S={s} Fq={fq}: got {got:?}, want {want:?}", g * g));
        }
    }
    Ok(())
}
