//! Straight-line reference computations for the masked autoencoder, written
//! with plain loops over nested vectors.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2vec::mae::{decode_reconstruct, encode_visible, init_params, masked_mse_loss, random_mask, MaeConfig, MaeParams, MaskPlan};
use s2vec::numerics::Tensor;

type M = Vec<Vec<f64>>;

fn p(params: &MaeParams<f64>, name: &str) -> Vec<f64> {
    params.get(name).unwrap_or_else(|| panic!("no {name}")).data().to_vec()
}

fn mat(params: &MaeParams<f64>, name: &str) -> M {
    let t = params.get(name).unwrap();
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn affine(x: &M, w: &M, b: &[f64]) -> M {
    x.iter()
        .map(|row| (0..b.len()).map(|j| b[j] + row.iter().enumerate().map(|(k, v)| v * w[k][j]).sum::<f64>()).collect())
        .collect()
}

fn layer_norm(x: &M, g: &[f64], b: &[f64]) -> M {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter().enumerate().map(|(i, v)| (v - mean) / (var + 1e-6).sqrt() * g[i] + b[i]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn block(params: &MaeParams<f64>, prefix: &str, heads: usize, x: &M) -> M {
    let n = |s: &str| format!("{prefix}.{s}");
    let d = x[0].len();
    let dh = d / heads;
    let h = layer_norm(x, &p(params, &n("ln1.gamma")), &p(params, &n("ln1.beta")));
    let qkv = affine(&h, &mat(params, &n("attn.qkv.w")), &p(params, &n("attn.qkv.b")));
    let rows = x.len();
    let mut cat = vec![vec![0.0; d]; rows];
    for head in 0..heads {
        for i in 0..rows {
            let scores: Vec<f64> = (0..rows)
                .map(|j| (0..dh).map(|c| qkv[i][head * dh + c] * qkv[j][d + head * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                cat[i][head * dh + c] = (0..rows).map(|j| e[j] / z * qkv[j][2 * d + head * dh + c]).sum();
            }
        }
    }
    let attn = affine(&cat, &mat(params, &n("attn.proj.w")), &p(params, &n("attn.proj.b")));
    let x: M = x.iter().zip(&attn).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect();
    let h = layer_norm(&x, &p(params, &n("ln2.gamma")), &p(params, &n("ln2.beta")));
    let h = affine(&h, &mat(params, &n("mlp.fc1.w")), &p(params, &n("mlp.fc1.b")));
    let h: M = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    let h = affine(&h, &mat(params, &n("mlp.fc2.w")), &p(params, &n("mlp.fc2.b")));
    x.iter().zip(&h).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect()
}

fn reference_encode(params: &MaeParams<f64>, image: &M, visible: &[usize]) -> M {
    let cfg = &params.config;
    let x: M = visible.iter().map(|&i| image[i].clone()).collect();
    let e = affine(&x, &mat(params, "patch.w"), &p(params, "patch.b"));
    let pos = mat(params, "encoder.pos");
    let mut h: M = e.iter().zip(visible).map(|(r, &i)| r.iter().zip(&pos[i]).map(|(a, b)| a + b).collect()).collect();
    for l in 0..cfg.encoder_layers {
        h = block(params, &format!("encoder.{l}"), cfg.heads, &h);
    }
    h
}

fn reference_decode(params: &MaeParams<f64>, latents: &M, visible: &[usize]) -> M {
    let cfg = &params.config;
    let y = affine(latents, &mat(params, "decoder.embed.w"), &p(params, "decoder.embed.b"));
    let token = p(params, "decoder.mask_token");
    let pos = mat(params, "decoder.pos");
    let mut h: M = (0..cfg.patches())
        .map(|i| {
            let base = match visible.iter().position(|&v| v == i) {
                Some(k) => y[k].clone(),
                None => token.clone(),
            };
            base.iter().zip(&pos[i]).map(|(a, b)| a + b).collect()
        })
        .collect();
    for l in 0..cfg.decoder_layers {
        h = block(params, &format!("decoder.{l}"), cfg.heads, &h);
    }
    affine(&h, &mat(params, "head.w"), &p(params, "head.b"))
}

fn small_config() -> MaeConfig {
    MaeConfig {
        feature_dim: 3,
        grid: 2,
        encoder_dim: 8,
        decoder_dim: 4,
        encoder_layers: 2,
        decoder_layers: 1,
        heads: 2,
        mask_ratio: 0.5,
        ..MaeConfig::default()
    }
}

fn perturbed(cfg: &MaeConfig, seed: u64) -> MaeParams<f64> {
    let mut params = init_params::<f64>(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
    for i in 0..params.set.len() {
        for x in params.set.get_mut(i).data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    params
}

fn to_m(t: &Tensor<f64>) -> M {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn assert_close(a: &M, b: &M, tol: f64) {
    assert_eq!(a.len(), b.len());
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }
}

#[test]
fn encoder_and_decoder_match_reference() {
    let cfg = small_config();
    for seed in 0..3 {
        let params = perturbed(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Tensor::new(&[4, 3], (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let plan = random_mask(4, cfg.mask_ratio, &mut rng).unwrap();
        let lat = encode_visible(&params, &image, &plan, None).unwrap();
        assert_close(&to_m(&lat), &reference_encode(&params, &to_m(&image), &plan.visible), 1e-12);
        let rec = decode_reconstruct(&params, &lat, &plan, None).unwrap();
        assert_close(&to_m(&rec), &reference_decode(&params, &to_m(&lat), &plan.visible), 1e-12);
    }
}

#[test]
fn default_parameter_count() {
    let cfg = MaeConfig::default();
    let (f, p, d, dd) = (cfg.feature_dim, cfg.patches(), cfg.encoder_dim, cfg.decoder_dim);
    let block = |d: usize| 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
    let expected = (f * d + d)
        + p * d
        + cfg.encoder_layers * block(d)
        + (d * dd + dd)
        + dd
        + p * dd
        + cfg.decoder_layers * block(dd)
        + (dd * f + f);
    assert_eq!(expected, 5_311_348);
    assert_eq!(init_params::<f32>(&cfg, 0).unwrap().count(), expected);
}

#[test]
fn mask_frequency_is_uniform() {
    let (n, draws) = (256, 4000);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut hits = vec![0usize; n];
    for _ in 0..draws {
        let plan = random_mask(n, 0.75, &mut rng).unwrap();
        assert_eq!((plan.masked.len(), plan.visible.len()), (192, 64));
        plan.masked.iter().for_each(|&i| hits[i] += 1);
    }
    // 5 standard deviations of a Binomial(4000, 0.75) frequency
    let tol = 5.0 * (0.75f64 * 0.25 / draws as f64).sqrt();
    for (i, h) in hits.iter().enumerate() {
        let freq = *h as f64 / draws as f64;
        assert!((freq - 0.75).abs() < tol, "slot {i}: {freq}");
    }
}

#[test]
fn dropout_only_with_a_training_seed() {
    let cfg = MaeConfig { dropout: 0.5, ..small_config() };
    let params = perturbed(&cfg, 1);
    let image = Tensor::new(&[4, 3], (0..12).map(|i| i as f64 / 6.0 - 1.0).collect()).unwrap();
    let plan = MaskPlan::all_visible(4);
    let a = encode_visible(&params, &image, &plan, None).unwrap();
    assert_eq!(a, encode_visible(&params, &image, &plan, None).unwrap());
    assert_ne!(a, encode_visible(&params, &image, &plan, Some(3)).unwrap());
    assert_eq!(encode_visible(&params, &image, &plan, Some(3)).unwrap(), encode_visible(&params, &image, &plan, Some(3)).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_loss_ignores_visible_rows(seed in any::<u64>(), noise in prop::collection::vec(-5.0f64..5.0, 12)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = random_mask(4, 0.5, &mut rng).unwrap();
        let recon = Tensor::new(&[4, 3], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let target = Tensor::new(&[4, 3], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut changed = target.clone();
        for &v in &plan.visible {
            for c in 0..3 {
                changed.data_mut()[v * 3 + c] += noise[v * 3 + c];
            }
        }
        let a = masked_mse_loss(&recon, &target, &plan).unwrap();
        let b = masked_mse_loss(&recon, &changed, &plan).unwrap();
        prop_assert_eq!(a, b);
        let by_hand: f64 = plan.masked.iter().flat_map(|&r| (0..3).map(move |c| (r, c)))
            .map(|(r, c)| (recon.get2(r, c) - target.get2(r, c)).powi(2)).sum::<f64>() / (plan.masked.len() * 3) as f64;
        prop_assert!((a - by_hand).abs() < 1e-15);
    }

    #[test]
    fn visible_and_masked_partition(patches in 2usize..300, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Ok(plan) = random_mask(patches, ratio, &mut rng) {
            let mut all: Vec<usize> = plan.visible.iter().chain(&plan.masked).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..patches).collect::<Vec<_>>());
            prop_assert_eq!(plan.masked.len(), (ratio * patches as f64).round() as usize);
        }
    }
}
