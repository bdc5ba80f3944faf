//! Scalar re-implementation of one gated composition step, written from the
//! formulas with plain index loops and no calls into the composer.

use loracomp::{ConditionId, LatentGrid, ScoreModel};

pub struct OracleConfig {
    pub scale: f64,
    pub lambda: f64,
    pub patch: usize,
    pub total_steps: usize,
}

pub fn gated_step(
    base: &dyn ScoreModel<f64>,
    adapters: &[&dyn ScoreModel<f64>],
    z: &LatentGrid<f64>,
    t: usize,
    c: ConditionId,
    cfg: &OracleConfig,
) -> Vec<f64> {
    let (h, w, ch) = (z.height(), z.width(), z.channels());
    let d = cfg.patch;
    let (ph, pw) = (h / d, w / d);
    let n = adapters.len();

    let eval = |m: &dyn ScoreModel<f64>, cond: Option<ConditionId>| -> Vec<f64> {
        m.predict_noise(z, t, cond).unwrap().into_vec()
    };
    let at = |v: &[f64], y: usize, x: usize, k: usize| v[(y * w + x) * ch + k];

    let base_cond = eval(base, Some(c));
    let conds: Vec<Vec<f64>> = adapters.iter().map(|a| eval(*a, Some(c))).collect();

    let mean_map = |v: &[f64]| -> Vec<f64> {
        let mut m = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for k in 0..ch {
                    s += at(v, y, x, k);
                }
                m[y * w + x] = s / ch as f64;
            }
        }
        m
    };
    let patch_vec = |m: &[f64], py: usize, px: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(d * d);
        for dy in 0..d {
            for dx in 0..d {
                out.push(m[(py * d + dy) * w + px * d + dx]);
            }
        }
        out
    };
    let cosine = |a: &[f64], b: &[f64]| -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na < 1e-12 || nb < 1e-12 {
            0.0
        } else {
            dot / (na * nb)
        }
    };

    let base_map = mean_map(&base_cond);
    let maps: Vec<Vec<f64>> = conds.iter().map(|v| mean_map(v)).collect();
    let remaining = (cfg.total_steps - t).max(1) as f64;
    let tau = 1.0 / (remaining * 10.0);

    // weights[i][py][px]
    let mut weights = vec![vec![0.0; ph * pw]; n];
    for py in 0..ph {
        for px in 0..pw {
            let reference = patch_vec(&base_map, py, px);
            let sims: Vec<f64> = maps
                .iter()
                .map(|m| cosine(&patch_vec(m, py, px), &reference))
                .collect();
            let exps: Vec<f64> = sims.iter().map(|s| (-s / tau).exp()).collect();
            let total: f64 = exps.iter().sum();
            for i in 0..n {
                weights[i][py * pw + px] = exps[i] / total;
            }
        }
    }

    let blend = |preds: &[Vec<f64>]| -> Vec<f64> {
        let mut out = vec![0.0; h * w * ch];
        for y in 0..h {
            for x in 0..w {
                for k in 0..ch {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += weights[i][(y / d) * pw + x / d] * at(&preds[i], y, x, k);
                    }
                    out[(y * w + x) * ch + k] = s;
                }
            }
        }
        out
    };

    let cond_agg = blend(&conds);
    let unconds: Vec<Vec<f64>> = adapters.iter().map(|a| eval(*a, None)).collect();
    let base_uncond = eval(base, None);
    let uncond_agg: Vec<f64> = blend(&unconds)
        .iter()
        .zip(&base_uncond)
        .map(|(a, b)| cfg.lambda * a + (1.0 - cfg.lambda) * b)
        .collect();
    uncond_agg
        .iter()
        .zip(&cond_agg)
        .map(|(u, c)| u + cfg.scale * (c - u))
        .collect()
}
