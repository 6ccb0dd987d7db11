//! Acceptance criteria 1-9. Each test prints one `criterion N: PASS|FAIL`
//! line with its measurements, then asserts the verdict.

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2::cellid::CellID as RefCell;
use s2::latlng::LatLng as RefLatLng;
use s2vec::downstream::{
    metric_mae, metric_r2, split_geographic, split_random, sweep_and_evaluate, EvalRequest, FusionMode, FusionSpec,
    LabeledCell, LocEncoding, ProbeConfig, Region, SplitSpec,
};
use s2vec::ingest::{apply_norm, fit_norm_stats, fit_rows, NormStats, DEFAULT_NORM_EPS};
use s2vec::mae::{extract_embeddings, init_params, loss_on_tape, pretrain, random_mask, Dropout, EmbeddingTable, MaeConfig, TrainOutcome};
use s2vec::numerics::{grad_check, Graph, Tensor, Var};
use s2vec::pipeline::{run_until, PipelineConfig, Stage, EMBEDDINGS, REPORT};
use s2vec::raster::{build_from_records, slot_cells, RasterDataset};
use s2vec::synth::{synth_generate, write_synth, GeoBox, SynthData, SynthSpec, FEATURES_FILE, LABELS_FILE};
use s2vec::{par, CellId, LatLng};

// written to the raw handle so the line shows up without --nocapture
fn verdict(n: u32, ok: bool, detail: String) -> bool {
    let line = format!("criterion {n}: {} {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    ok
}

fn uniform_latlng(rng: &mut impl Rng) -> LatLng {
    let z: f64 = rng.random_range(-1.0..1.0);
    LatLng::new(z.asin().to_degrees(), rng.random_range(-180.0..180.0)).unwrap()
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

#[test]
fn criterion_1_s2_conformance() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0usize;
    let mut worst_center = 0.0f64;
    let n = 2000;
    for _ in 0..n {
        let p = uniform_latlng(&mut rng);
        let level = rng.random_range(0..=30u8);
        let ours = CellId::from_latlng(p, level).unwrap();
        let theirs = RefCell::from(RefLatLng::from_degrees(p.lat, p.lng)).parent(level as u64);
        let parents_ok = (0..=level).all(|l| ours.parent(l).unwrap().raw() == theirs.parent(l as u64).0);
        if ours.raw() != theirs.0 || ours.to_token() != theirs.to_token() || !parents_ok {
            mismatches += 1;
        }
        let (c, rc) = (ours.center(), RefLatLng::from(theirs));
        worst_center = worst_center.max((c.lat - rc.lat.deg()).abs()).max(angle_diff(c.lng, rc.lng.deg()));
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = mismatches == 0 && worst_center < 1e-9 && secs < 10.0;
    assert!(verdict(1, ok, format!("{n} triples, {mismatches} mismatches, center error {worst_center:.1e} deg, {secs:.1} s")));
}

#[test]
fn criterion_2_hierarchy_and_partition() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    let mut failures = 0usize;
    for _ in 0..n {
        let level = rng.random_range(4..=30u8);
        let c = CellId::from_latlng(uniform_latlng(&mut rng), level).unwrap();
        if CellId::from_latlng(c.center(), level).unwrap() != c {
            failures += 1;
        }
        if level < 30 && c.children().unwrap().iter().any(|k| k.parent(level).unwrap() != c) {
            failures += 1;
        }
        let depth = rng.random_range(1..=4u8);
        let anc = c.parent(level - depth).unwrap();
        let pos = c.grid_position(anc).unwrap();
        let g = 1u32 << depth;
        if pos.row >= g || pos.col >= g || slot_cells(anc, level).unwrap()[(pos.row * g + pos.col) as usize] != c {
            failures += 1;
        }
    }

    let data = synth_generate(&SynthSpec { max_images: Some(12), missing_fraction: 0.3, ..SynthSpec::default() }).unwrap();
    let stats = fit_norm_stats(&data.features).unwrap();
    let ds = build_from_records(&data.features, &stats, 8, 12, 0.0).unwrap();
    let input: BTreeSet<CellId> = data.features.iter().map(|f| f.cell).collect();
    let mut placed = Vec::new();
    for img in &ds.images {
        for (slot, cell) in ds.slot_cells(img.parent).unwrap().into_iter().enumerate() {
            if img.presence[slot] {
                placed.push(cell);
            } else if input.contains(&cell) {
                failures += 1;
            }
        }
    }
    let unique: BTreeSet<CellId> = placed.iter().copied().collect();
    let partition = placed.len() == input.len() && unique == input;
    let secs = start.elapsed().as_secs_f64();
    let ok = failures == 0 && partition && secs < 30.0;
    assert!(verdict(
        2,
        ok,
        format!("{n} samples, {failures} failures, {} cells in {} images partitioned: {partition}, {secs:.1} s", input.len(), ds.len())
    ));
}

fn close_rel(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

#[test]
fn criterion_3_normalization() {
    let mut data = synth_generate(&SynthSpec { max_images: Some(40), ..SynthSpec::default() }).unwrap();
    data.features.truncate(10_000);
    let records = &data.features;
    let stats = fit_norm_stats(records).unwrap();
    let normed: Vec<Vec<f64>> = records.iter().map(|r| apply_norm(&r.counts, &stats, DEFAULT_NORM_EPS).unwrap()).collect();
    let n = normed.len() as f64;
    let (mut worst_mean, mut worst_var, mut used) = (0.0f64, 0.0f64, 0);
    for f in 0..stats.dim() {
        if stats.variance[f] <= DEFAULT_NORM_EPS {
            continue;
        }
        used += 1;
        let mean = normed.iter().map(|r| r[f]).sum::<f64>() / n;
        let var = normed.iter().map(|r| (r[f] - mean).powi(2)).sum::<f64>() / n;
        worst_mean = worst_mean.max(mean.abs());
        worst_var = worst_var.max((var - 1.0).abs());
    }

    let rows: Vec<&[f64]> = records.iter().map(|r| r.counts.as_slice()).collect();
    let mut merged: Option<NormStats> = None;
    for shard in rows.chunks(1337) {
        let s = fit_rows(shard).unwrap();
        merged = Some(match merged {
            None => s,
            Some(m) => m.merge(&s).unwrap(),
        });
    }
    let merged = merged.unwrap();
    let merge_ok = merged.count == stats.count
        && (0..stats.dim())
            .all(|f| close_rel(merged.mean[f], stats.mean[f], 1e-9) && close_rel(merged.variance[f], stats.variance[f], 1e-9));
    let ok = used > 0 && worst_mean < 1e-6 && worst_var < 1e-4 && merge_ok;
    assert!(verdict(
        3,
        ok,
        format!(
            "{} cells, {used} features, max |mean| {worst_mean:.1e}, max |var-1| {worst_var:.1e}, shard merge ok: {merge_ok}",
            records.len()
        )
    ));
}

const FD_STEP: f64 = 3e-3;
const FD_TOL: f64 = 1e-5;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn op_error<F>(params: Vec<Tensor<f64>>, target: Tensor<f64>, f: F) -> f64
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> s2vec::Result<Var>,
{
    grad_check(&params, FD_STEP, |g, v| {
        let out = f(g, v)?;
        g.mse(out, target.clone())
    })
    .unwrap()
}

#[test]
fn criterion_4_autodiff() {
    let start = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut note = |name: &str, seed: u64, e: f64| {
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, format!("{name} seed {seed}"));
        }
    };
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&mut rng, &[3, 4]);
        let y = rand_t(&mut rng, &[3, 4]);
        let w = rand_t(&mut rng, &[4, 5]);
        let b = rand_t(&mut rng, &[5]);
        let k = rand_t(&mut rng, &[2, 4]);
        let v4 = rand_t(&mut rng, &[4]);
        let g4 = rand_t(&mut rng, &[4]);
        let s = rand_t(&mut rng, &[1]);
        let t34 = rand_t(&mut rng, &[3, 4]);
        let t35 = rand_t(&mut rng, &[3, 5]);
        let t32 = rand_t(&mut rng, &[3, 2]);
        let t39 = rand_t(&mut rng, &[3, 9]);
        let t44 = rand_t(&mut rng, &[4, 4]);
        let t54 = rand_t(&mut rng, &[5, 4]);
        let mask: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.5 }).collect();

        note("matmul", seed, op_error(vec![x.clone(), w.clone()], t35.clone(), |g, v| g.matmul(v[0], v[1])));
        note("matmul_nt", seed, op_error(vec![x.clone(), k.clone()], t32.clone(), |g, v| g.matmul_nt(v[0], v[1])));
        note("add_bias", seed, op_error(vec![x.clone(), v4.clone()], t34.clone(), |g, v| g.add_bias(v[0], v[1])));
        note("linear", seed, op_error(vec![x.clone(), w.clone(), b.clone()], t35.clone(), |g, v| g.linear(v[0], v[1], v[2])));
        note("add", seed, op_error(vec![x.clone(), y.clone()], t34.clone(), |g, v| g.add(v[0], v[1])));
        note("mul", seed, op_error(vec![x.clone(), y.clone()], t34.clone(), |g, v| g.mul(v[0], v[1])));
        note("scale", seed, op_error(vec![x.clone()], t34.clone(), |g, v| Ok(g.scale(v[0], -1.3))));
        note("scale_by", seed, op_error(vec![x.clone(), s.clone()], t34.clone(), |g, v| g.scale_by(v[0], v[1])));
        note(
            "layer_norm",
            seed,
            op_error(vec![x.clone(), g4.clone(), v4.clone()], t34.clone(), |g, v| g.layer_norm(v[0], v[1], v[2])),
        );
        note("gelu", seed, op_error(vec![x.clone()], t34.clone(), |g, v| Ok(g.gelu(v[0]))));
        note("softmax", seed, op_error(vec![x.clone()], t34.clone(), |g, v| Ok(g.softmax(v[0]))));
        note("dropout", seed, op_error(vec![x.clone()], t34.clone(), |g, v| g.dropout_mask(v[0], mask.clone())));
        note("slice_cols", seed, op_error(vec![x.clone()], t32.clone(), |g, v| g.slice_cols(v[0], 1, 2)));
        note(
            "concat_cols",
            seed,
            op_error(vec![x.clone(), w.clone()], t39.clone(), |g, v| {
                let rows = g.gather_rows(v[1], &[3, 0, 1])?;
                g.concat_cols(&[v[0], rows])
            }),
        );
        note("gather_rows", seed, op_error(vec![x.clone()], t44.clone(), |g, v| g.gather_rows(v[0], &[1, 1, 0, 2])));
        note("interleave", seed, op_error(vec![x.clone(), v4.clone()], t54.clone(), |g, v| g.interleave(v[0], v[1], &[4, 1, 2], 5)));
        note("row_mse", seed, grad_check(&[x.clone()], FD_STEP, |g, v| g.row_mse(v[0], t34.clone(), &[0, 2])).unwrap());
    }

    let cfg = MaeConfig {
        feature_dim: 3,
        grid: 2,
        encoder_dim: 8,
        decoder_dim: 4,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        mask_ratio: 0.5,
        ..MaeConfig::default()
    };
    for seed in 0..3u64 {
        let mut params = init_params::<f64>(&cfg, seed).unwrap();
        // the stock init leaves some gradients near round-off
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        for i in 0..params.set.len() {
            for x in params.set.get_mut(i).data_mut() {
                *x += rng.random_range(-0.5..0.5);
            }
        }
        let image = rand_t(&mut rng, &[4, 3]);
        let plan = random_mask(4, cfg.mask_ratio, &mut rng).unwrap();
        let e = grad_check(params.set.tensors(), FD_STEP, |g, v| {
            loss_on_tape(g, &cfg, v, image.clone(), &plan, None, &mut Dropout::off())
        })
        .unwrap();
        note("mini MAE loss", seed, e);
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst.0 < FD_TOL && secs < 60.0;
    assert!(verdict(4, ok, format!("17 ops and the G=2 MAE loss over 3 seeds, worst {:.1e} ({}), {secs:.1} s", worst.0, worst.1)));
}

struct Pretrained {
    data: SynthData,
    stats: NormStats,
    dataset: RasterDataset,
    cfg: MaeConfig,
    outcome: TrainOutcome,
    secs: f64,
}

fn plains() -> GeoBox {
    GeoBox { lat_min: 34.0, lat_max: 42.0, lng_min: -102.0, lng_max: -92.0 }
}

fn scaled_config() -> MaeConfig {
    MaeConfig { feature_dim: 16, grid: 16, encoder_dim: 64, decoder_dim: 32, encoder_layers: 2, decoder_layers: 1, ..MaeConfig::default() }
}

fn pretrain_on(spec: &SynthSpec, cfg: MaeConfig) -> Pretrained {
    let data = synth_generate(spec).unwrap();
    let stats = fit_norm_stats(&data.features).unwrap();
    let dataset = build_from_records(&data.features, &stats, 8, 12, 0.0).unwrap();
    let start = Instant::now();
    let outcome = pretrain(&dataset, &cfg, 0).unwrap();
    Pretrained { data, stats, dataset, cfg, outcome, secs: start.elapsed().as_secs_f64() }
}

fn main_model() -> &'static Pretrained {
    static CELL: OnceLock<Pretrained> = OnceLock::new();
    CELL.get_or_init(|| {
        let spec = SynthSpec { bbox: plains(), max_images: Some(200), label_fraction: 0.02, ..SynthSpec::default() };
        pretrain_on(&spec, scaled_config())
    })
}

/// Masked MSE of predicting every slot with the dataset-wide feature mean.
/// Masks are uniform over slots, so its expectation is the mean over all slots.
fn constant_mean_mse(ds: &RasterDataset) -> f64 {
    let f = ds.feature_dim;
    let mut mean = vec![0.0f64; f];
    let mut n = 0usize;
    for img in &ds.images {
        for row in img.grid.chunks(f) {
            row.iter().zip(mean.iter_mut()).for_each(|(x, m)| *m += *x as f64);
            n += 1;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut sse = 0.0;
    for img in &ds.images {
        for row in img.grid.chunks(f) {
            sse += row.iter().zip(&mean).map(|(x, m)| (*x as f64 - m).powi(2)).sum::<f64>();
        }
    }
    sse / (n * f) as f64
}

#[test]
fn criterion_5_mae_learning_signal() {
    let m = main_model();
    let h = &m.outcome.history;
    let (first, last) = (h[0], *h.last().unwrap());
    let baseline = constant_mean_mse(&m.dataset);
    let ok = m.dataset.len() == 200 && h.len() == 50 && last < 0.5 * first && last < baseline && m.secs < 900.0;
    assert!(verdict(
        5,
        ok,
        format!(
            "{} images, {} epochs, masked MSE {first:.4} -> {last:.4} (ratio {:.3}), constant-mean {baseline:.4}, {:.0} s",
            m.dataset.len(),
            h.len(),
            last / first,
            m.secs
        )
    ));
}

fn labeled(data: &SynthData) -> Vec<LabeledCell> {
    data.labels.iter().map(|&(cell, target)| LabeledCell { cell, target }).collect()
}

fn sweep_probe() -> ProbeConfig {
    ProbeConfig { hidden_grid: vec![64, 256], lr_grid: vec![5e-4, 1e-3], dropout_grid: vec![0.0, 0.2], seeds: 5, ..ProbeConfig::default() }
}

fn test_r2(name: &str, labels: &[LabeledCell], sources: &[EmbeddingTable], fusion: FusionSpec, location: Option<LocEncoding>) -> f64 {
    let req = EvalRequest {
        name: name.into(),
        labels,
        sources,
        split: SplitSpec::default(),
        fusion,
        probe: sweep_probe(),
        location,
        loc_per_source: false,
    };
    let report = sweep_and_evaluate(&req).unwrap();
    assert_eq!(report.dropped, 0, "{name}");
    report.r2.mean
}

#[test]
fn criterion_6_embedding_utility() {
    let m = main_model();
    let labels = labeled(&m.data);
    let trained = extract_embeddings(&m.data.features, &m.stats, &m.outcome.params).unwrap();
    let random = extract_embeddings(&m.data.features, &m.stats, &init_params(&m.cfg, 0).unwrap()).unwrap();
    let r_trained = test_r2("trained", &labels, &[trained], FusionSpec::default(), None);
    let r_random = test_r2("random-init", &labels, &[random], FusionSpec::default(), None);
    let r_loc = test_r2("location", &labels, &[], FusionSpec::default(), Some(LocEncoding::default()));
    let (a, b) = (r_trained - r_random, r_trained - r_loc);
    let ok = a >= 0.1 && b >= 0.1;
    assert!(verdict(
        6,
        ok,
        format!(
            "{} labels, oracle R2 {:.3}; trained {r_trained:.3}, (a) random-init {r_random:.3} gap {a:+.3} {}, (b) location {r_loc:.3} gap {b:+.3} {}",
            labels.len(),
            m.data.oracle_r2,
            if a >= 0.1 { "ok" } else { "short" },
            if b >= 0.1 { "ok" } else { "short" },
        )
    ));
}

#[test]
fn criterion_7_fusion() {
    let concat = FusionSpec { mode: FusionMode::Concat, proj_dim: 256 }.output_dim(&[256, 512]).unwrap();
    let rejects = FusionSpec { mode: FusionMode::WeightedAdd, proj_dim: 256 }.output_dim(&[256, 512]).is_err();
    let project = FusionSpec { mode: FusionMode::ProjectAdd, proj_dim: 96 }.output_dim(&[256, 512]).unwrap();
    let dims_ok = concat == 768 && rejects && project == 96;

    // features miss latent 0; the external source sees only latents 0 and 1
    let spec = SynthSpec {
        bbox: plains(),
        max_images: Some(200),
        label_fraction: 0.02,
        hidden_latents: 1,
        external_latents: 2,
        ..SynthSpec::default()
    };
    let m = pretrain_on(&spec, MaeConfig { epochs: 20, ..scaled_config() });
    let labels = labeled(&m.data);
    let s2vec = extract_embeddings(&m.data.features, &m.stats, &m.outcome.params).unwrap();
    let mut external = EmbeddingTable::new(spec.external_dim);
    for (p, v) in &m.data.external {
        external.insert(CellId::from_latlng(*p, 12).unwrap(), v.iter().map(|&x| x as f32).collect()).unwrap();
    }
    let fusion = FusionSpec { mode: FusionMode::ProjectAdd, proj_dim: 256 };
    let r_s2vec = test_r2("s2vec", &labels, std::slice::from_ref(&s2vec), FusionSpec::default(), None);
    let r_ext = test_r2("external", &labels, std::slice::from_ref(&external), FusionSpec::default(), None);
    let r_fused = test_r2("s2vec+external", &labels, &[s2vec, external], fusion, None);
    let best = r_s2vec.max(r_ext);
    let ok = dims_ok && r_fused >= best - 0.02;
    assert!(verdict(
        7,
        ok,
        format!(
            "concat {concat}, weighted-add rejects unequal: {rejects}, project-add {project}; R2 s2vec {r_s2vec:.3}, external {r_ext:.3}, project-add {r_fused:.3} (needs >= {:.3})",
            best - 0.02
        )
    ));
}

#[test]
fn criterion_8_splits_and_metrics() {
    let data = synth_generate(&SynthSpec { max_images: Some(30), ..SynthSpec::default() }).unwrap();
    let cells: Vec<CellId> = data.features.iter().map(|f| f.cell).collect();
    let region = Region::from_box(&GeoBox { lat_min: 40.5, lat_max: 41.5, lng_min: -80.0, lng_max: -78.5 });
    let mut geo_ok = true;
    for seed in 0..5 {
        let s = split_geographic(&cells, &region, seed).unwrap();
        let test: BTreeSet<usize> = s.test.iter().copied().collect();
        let leaks = s.train.iter().chain(&s.val).filter(|&&i| region.contains(cells[i].center())).count();
        // the check runs over every cell, not a sample
        let misplaced = (0..cells.len()).filter(|i| region.contains(cells[*i].center()) != test.contains(i)).count();
        geo_ok &= !s.test.is_empty() && leaks == 0 && misplaced == 0 && s.train.len() + s.val.len() + s.test.len() == cells.len();
    }

    let mut sizes_ok = true;
    for n in [10usize, 99, 100, 101, 997, 5000] {
        let cut_a = (0.6 * n as f64).round() as usize;
        let cut_b = (0.8 * n as f64).round() as usize;
        for seed in 0..20 {
            let s = split_random(n, [0.6, 0.2, 0.2], seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            sizes_ok &= s.train.len() == cut_a && s.val.len() == cut_b - cut_a && s.test.len() == n - cut_b;
            sizes_ok &= all == (0..n).collect::<Vec<_>>();
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let truth: Vec<f64> = (0..257).map(|_| rng.random_range(-50.0..50.0)).collect();
    let pred: Vec<f64> = (0..257).map(|_| rng.random_range(-50.0..50.0)).collect();
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let perfect = metric_r2(&truth, &truth).unwrap();
    let mean_pred = metric_r2(&vec![mean; truth.len()], &truth).unwrap();
    let mut brute = 0.0;
    for i in 0..truth.len() {
        brute += (pred[i] - truth[i]).abs();
    }
    brute /= truth.len() as f64;
    let metrics_ok = perfect == 1.0 && mean_pred == 0.0 && metric_mae(&pred, &truth).unwrap() == brute;

    let ok = geo_ok && sizes_ok && metrics_ok;
    assert!(verdict(
        8,
        ok,
        format!(
            "geographic clean over {} cells: {geo_ok}, random sizes over 20 seeds: {sizes_ok}, R2 perfect {perfect}, mean predictor {mean_pred}, MAE oracle: {metrics_ok}",
            cells.len()
        )
    ));
}

fn tiny_pipeline(dir: &std::path::Path, out: &str) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        features: dir.join(FEATURES_FILE),
        labels: Some(dir.join(LABELS_FILE)),
        out: dir.join(out),
        feature_dim: 16,
        seed: 3,
        ..PipelineConfig::default()
    };
    cfg.mae = MaeConfig {
        feature_dim: 16,
        encoder_dim: 16,
        decoder_dim: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        epochs: 3,
        batch_size: 2,
        ..MaeConfig::default()
    };
    cfg.probe = ProbeConfig {
        hidden_grid: vec![16],
        lr_grid: vec![1e-3, 5e-3],
        dropout_grid: vec![0.0],
        max_epochs: 30,
        seeds: 3,
        ..ProbeConfig::default()
    };
    cfg
}

#[test]
fn criterion_9_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { max_images: Some(4), label_fraction: 0.3, ..SynthSpec::default() };
    write_synth(dir.path(), &spec, &synth_generate(&spec).unwrap()).unwrap();
    par::set_parallel(false);
    let a = tiny_pipeline(dir.path(), "a");
    let b = tiny_pipeline(dir.path(), "b");
    run_until(&a, Stage::Eval).unwrap();
    run_until(&b, Stage::Eval).unwrap();
    par::set_parallel(true);
    let read = |cfg: &PipelineConfig, name: &str| std::fs::read(cfg.out.join(name)).unwrap();
    let same_emb = read(&a, EMBEDDINGS) == read(&b, EMBEDDINGS);
    let same_report = read(&a, REPORT) == read(&b, REPORT);
    let ok = same_emb && same_report;
    assert!(verdict(
        9,
        ok,
        format!(
            "embedding tables identical: {same_emb} ({} bytes), reports identical: {same_report} ({} bytes)",
            read(&a, EMBEDDINGS).len(),
            read(&a, REPORT).len()
        )
    ));
}
