//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use citylike_cli::config::LoadedConfig;
use citylike_cli::pipeline::run_pipeline;
use citylike_core::dataset::{
    build_manifest, center_crop, normalize, normalize_value, random_crop, CachingLoader, DatasetManifest, Split,
};
use citylike_core::geo::{haversine_km, radius_for_population, read_cities, LatLon, SamplingPolicy, EARTH_RADIUS_KM};
use citylike_core::imagery::benchmark::{write_benchmark, BenchmarkSpec};
use citylike_core::imagery::{synth_city_image, Palette, Source, StyleSpec};
use citylike_core::inference::{Percent, Report};
use citylike_core::network::{
    cross_entropy_loss, evaluate, l2_penalty, lookahead, nesterov_step, train, Activations, ArchitectureConfig,
    Checkpoint, InceptionBlockSpec, Mode, ModelParameters, Network, OptimizerConfig, ParamKind, ParamTensor,
    TrainOptions, TrainOutcome,
};
use citylike_core::segmentation::color::rgb_to_luv;
use citylike_core::segmentation::{meanshift_modes, segment, SegmentationParams};
use citylike_core::{seed, RasterImage};
use rand::Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

fn radii() -> Outcome {
    let pol = SamplingPolicy::default();
    let r = |p| radius_for_population(p, &pol).map_err(|e| e.to_string());
    let (a, b, c) = (r(300_000)?, r(1_200_000)?, r(30_000_000)?);
    ensure!((a - 3.000).abs() <= 1e-3, "r(300k) = {a}");
    ensure!((b - 5.407).abs() <= 5e-3, "r(1.2M) = {b}");
    ensure!((c - 21.24).abs() <= 0.05, "r(30M) = {c}");
    Ok(format!("{a:.4} / {b:.4} / {c:.3} km"))
}

fn unit_vector_distance(a: LatLon, b: LatLon) -> f64 {
    let v = |p: LatLon| {
        let (la, lo) = (p.lat.to_radians(), p.lon.to_radians());
        [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
    };
    let (x, y) = (v(a), v(b));
    let cross = [x[1] * y[2] - x[2] * y[1], x[2] * y[0] - x[0] * y[2], x[0] * y[1] - x[1] * y[0]];
    let sin = (cross[0].powi(2) + cross[1].powi(2) + cross[2].powi(2)).sqrt();
    let cos = x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
    sin.atan2(cos) * EARTH_RADIUS_KM
}

fn geodesy() -> Outcome {
    let d = |a, b| haversine_km(a, b, EARTH_RADIUS_KM).unwrap();
    let (mel, syd) = (LatLon::new(-37.8136, 144.9631), LatLon::new(-33.8688, 151.2093));
    let ms = d(mel, syd);
    ensure!((ms - 713.4).abs() <= 1.0, "Melbourne-Sydney {ms} km");
    ensure!((ms - unit_vector_distance(mel, syd)).abs() < 1e-6, "oracle disagrees: {ms}");
    let mut rng = seed::rng(2024, "triples", &[]);
    let mut point = || LatLon::new(rng.random_range(-90.0..=90.0), rng.random_range(-180.0..=180.0));
    for i in 0..1000 {
        let (a, b, c) = (point(), point(), point());
        ensure!(d(a, b) == d(b, a), "asymmetric at triple {i}");
        ensure!(d(a, c) <= d(a, b) + d(b, c) + 1e-9, "triangle inequality fails at triple {i}");
        ensure!((d(a, b) - unit_vector_distance(a, b)).abs() < 1e-6, "oracle disagrees at triple {i}");
    }
    Ok(format!("{ms:.2} km, 1000 triples"))
}

fn preprocessing() -> Outcome {
    let vals = [0u8, 128, 255].map(normalize_value);
    ensure!(vals == [-1.0, 0.0, 0.992_187_5], "normalize gave {vals:?}");
    let img = RasterImage::new(1, 3, vec![0, 0, 0, 128, 128, 128, 255, 255, 255]).unwrap();
    let t = normalize(&img);
    ensure!(t.data.iter().all(|v| [-1.0, 0.0, 0.992_187_5].contains(v)), "tensor {:?}", t.data);
    let big = RasterImage::filled(256, 256, [1, 2, 3]);
    let (crop, off) = center_crop(&big, 224).unwrap();
    ensure!(off == (16, 16) && crop.width() == 224, "center crop offset {off:?}");
    let mut max = (0, 0);
    for s in 0..2000 {
        let (_, (dy, dx)) = random_crop(&big, 224, s).unwrap();
        ensure!(dy <= 32 && dx <= 32, "random crop offset ({dy}, {dx})");
        max = (max.0.max(dy), max.1.max(dx));
    }
    Ok(format!("largest random offset {max:?}"))
}

fn two_block_arch() -> ArchitectureConfig {
    ArchitectureConfig {
        input_size: 12,
        stem_channels: 4,
        blocks: vec![
            InceptionBlockSpec { b1: 2, b2_reduce: 2, b2: 3, b3_reduce: 2, b3: 2, pool_proj: 2, pool_after: true },
            InceptionBlockSpec { b1: 3, b2_reduce: 2, b2: 2, b3_reduce: 2, b3: 3, pool_proj: 2, pool_after: false },
        ],
        dropout_rate: 0.2,
        num_classes: 3,
        bn_momentum: 0.9,
        bn_eps: 1e-5,
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let net: Network<f64> = Network::new(two_block_arch(), 4).unwrap();
    let mut rng = seed::rng(9, "batch", &[]);
    let mut x = Activations::zeros(4, 3, 12, 12);
    for v in &mut x.data {
        *v = rng.random_range(-1.0..1.0);
    }
    let labels = [0, 2, 1, 2];
    let (l2, h, mode) = (1e-3, 1e-5, Mode::Train { dropout_seed: 11 });
    let loss = |p: &ModelParameters<f64>| {
        let f = net.forward_with(p, &x, mode).unwrap();
        cross_entropy_loss(&f.probs, &labels, f.num_classes) + l2_penalty(p, l2)
    };
    let fwd = net.forward_with(&net.params, &x, mode).unwrap();
    let grads = net.backward(&net.params, &fwd, &labels, l2).unwrap();
    let (mut worst, mut tensors) = (0.0f64, 0);
    for (ti, t) in net.params.tensors.iter().enumerate() {
        if !t.kind.trainable() {
            continue;
        }
        let mut p = net.params.clone();
        let numeric: Vec<f64> = (0..t.data.len())
            .map(|i| {
                let w = p.tensors[ti].data[i];
                p.tensors[ti].data[i] = w + h;
                let up = loss(&p);
                p.tensors[ti].data[i] = w - h;
                let down = loss(&p);
                p.tensors[ti].data[i] = w;
                (up - down) / (2.0 * h)
            })
            .collect();
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|a| a * a).sum::<f64>().sqrt();
        let diff = norm(&mut grads[ti].iter().zip(&numeric).map(|(a, b)| a - b));
        let scale = norm(&mut grads[ti].iter().copied()).max(norm(&mut numeric.iter().copied())).max(1e-12);
        let rel = diff / scale;
        ensure!(rel < 1e-4, "{}: relative error {rel:e}", t.name);
        worst = worst.max(rel);
        tensors += 1;
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(120), "took {took:?}");
    Ok(format!("{tensors} tensors, worst {worst:.1e}, {:.1}s", took.as_secs_f64()))
}

fn nesterov() -> Outcome {
    let mut params = ModelParameters {
        tensors: vec![ParamTensor { name: "theta".into(), shape: vec![1], kind: ParamKind::Weight, data: vec![1.0f64] }],
    };
    let mut vel = params.zeros_like();
    let (lr, mu) = (0.1, 0.9);
    let mut trail = vec![params.tensors[0].data[0]];
    for _ in 0..2 {
        // L = theta^2 / 2, so the gradient at the lookahead point is the lookahead value
        let grad = lookahead(&params, &vel, mu).tensors[0].data.clone();
        nesterov_step(&mut params, &mut vel, &[grad], lr, mu);
        trail.push(params.tensors[0].data[0]);
    }
    let expect = [1.0, 0.9, 0.729];
    for (got, want) in trail.iter().zip(expect) {
        ensure!((got - want).abs() <= 4.0 * f64::EPSILON, "trajectory {trail:?}");
    }
    Ok(format!("theta {trail:?}"))
}

fn loss_anchors() -> Outcome {
    let uniform = vec![0.1f64; 10 * 4];
    let l = cross_entropy_loss(&uniform, &[0, 3, 7, 9], 10);
    ensure!((l - 10f64.ln()).abs() <= 1e-9, "uniform loss {l}");
    let net: Network<f64> = Network::new(two_block_arch(), 1).unwrap();
    let l2 = 3e-4;
    let perfect = cross_entropy_loss(&[0.0f64, 1.0, 0.0, 1.0, 0.0, 0.0], &[1, 0], 3) + l2_penalty(&net.params, l2);
    let penalty = l2_penalty(&net.params, l2);
    ensure!(perfect == penalty && penalty > 0.0, "perfect loss {perfect} vs L2 {penalty}");
    Ok(format!("ln 10 = {l:.12}, perfect = L2 = {penalty:.6}"))
}

/// Flat-kernel mean shift scanning every pixel per iteration.
fn brute_force_modes(img: &RasterImage, p: &SegmentationParams) -> Vec<[f64; 5]> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let luv: Vec<[f64; 3]> = img.iter_rgb().map(rgb_to_luv).collect();
    let (sr2, rr2, eps2) = (p.spatial_radius.powi(2), p.range_radius.powi(2), p.convergence_eps.powi(2));
    (0..w * h)
        .map(|i| {
            let mut m = [(i % w) as f64, (i / w) as f64, luv[i][0], luv[i][1], luv[i][2]];
            for _ in 0..p.max_iterations {
                let (mut sum, mut n) = ([0.0; 5], 0usize);
                for y in 0..h {
                    for x in 0..w {
                        let (dx, dy) = (x as f64 - m[0], y as f64 - m[1]);
                        let c = luv[y * w + x];
                        let d = (c[0] - m[2]).powi(2) + (c[1] - m[3]).powi(2) + (c[2] - m[4]).powi(2);
                        if dx * dx + dy * dy > sr2 || d > rr2 {
                            continue;
                        }
                        for (s, v) in sum.iter_mut().zip([x as f64, y as f64, c[0], c[1], c[2]]) {
                            *s += v;
                        }
                        n += 1;
                    }
                }
                if n == 0 {
                    break;
                }
                let next = sum.map(|s| s / n as f64);
                let shift: f64 = next.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum();
                m = next;
                if shift <= eps2 {
                    break;
                }
            }
            m
        })
        .collect()
}

fn segmentation() -> Outcome {
    let params = SegmentationParams::default();
    let uniform = segment(&RasterImage::filled(40, 30, [90, 140, 60]), &params).unwrap();
    ensure!(uniform.region_count == 1, "uniform image has {} regions", uniform.region_count);

    let mut halves = RasterImage::filled(64, 48, [0, 0, 0]);
    for y in 0..48 {
        for x in 32..64 {
            halves.set(x, y, [255, 255, 255]);
        }
    }
    let h = segment(&halves, &params).unwrap();
    ensure!(h.region_count == 2, "half planes give {} regions", h.region_count);

    let style = StyleSpec {
        style_id: "s".into(),
        block_size_m: 90.0,
        road_angle: 15.0,
        green_fraction: 0.3,
        water_fraction: 0.05,
        transit_density: 0.3,
        palette: Palette::default(),
        streetview_coverage: 1.0,
    };
    let loc = citylike_core::geo::SampleLocation {
        city_id: "c".into(),
        kind: citylike_core::geo::LocationKind::Grid,
        lat: 48.85,
        lon: 2.35,
    };
    let street = synth_city_image(&style, &loc, Source::Streetview, 3);
    ensure!(street.width() == 256 && street.height() == 256, "street image is not 256x256");
    let s = segment(&street, &params).unwrap();
    let smallest = s.region_sizes().into_iter().min().unwrap_or(0);
    ensure!(smallest >= 50, "smallest region {smallest} px");

    let mut rng = seed::rng(8, "meanshift", &[]);
    for _ in 0..4 {
        let px: Vec<u8> = (0..8 * 8 * 3).map(|i| if (i / 3) % 8 < 4 { 60 } else { 180 } + rng.random_range(0..9)).collect();
        let img = RasterImage::new(8, 8, px).unwrap();
        ensure!(meanshift_modes(&img, &params).unwrap() == brute_force_modes(&img, &params), "8x8 modes differ");
    }
    Ok(format!("{} regions on 256x256, smallest {smallest} px", s.region_count))
}

struct Benchmark {
    manifest: DatasetManifest,
    outcome: TrainOutcome,
    _dir: tempfile::TempDir,
}

fn benchmark_dataset(dir: &Path) -> DatasetManifest {
    let spec = BenchmarkSpec { styles: 10, images_per_style: 100, tile_px: 72, source: Source::Map, seed: 3 };
    let layout = write_benchmark(dir, &spec).unwrap();
    let cities = read_cities(&layout.cities_file).unwrap();
    build_manifest(&[layout.image_dir], &cities, 0.25, 3).unwrap()
}

fn training(slot: &mut Option<Benchmark>) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let manifest = benchmark_dataset(dir.path());
    let loader = CachingLoader::default();
    let arch = ArchitectureConfig::toy(10);
    let opt = OptimizerConfig { epochs: 30, ..OptimizerConfig::default() };
    let opts = TrainOptions { seed: 1, out_dir: None };
    let start = Instant::now();
    let outcome = train(&manifest, &loader, &arch, &opt, &opts).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let last = outcome.metrics.last().unwrap();
    let (top1, top5) = (last.val_top1.unwrap_or(0.0), last.val_top5.unwrap_or(0.0));
    let first_90 = outcome.metrics.iter().position(|m| m.val_top1.unwrap_or(0.0) >= 0.90).map(|e| e + 1);

    // the schedule depends only on the epoch index, so a short rerun must retrace the prefix
    let prefix = train(&manifest, &loader, &arch, &OptimizerConfig { epochs: 3, ..opt }, &opts).unwrap();
    let same = prefix.metrics.iter().zip(&outcome.metrics).all(|(a, b)| {
        a.train_loss.to_bits() == b.train_loss.to_bits() && a.val_top1 == b.val_top1 && a.val_top5 == b.val_top5
    });
    *slot = Some(Benchmark { manifest, outcome, _dir: dir });
    ensure!(top1 >= 0.90, "val top-1 {top1}");
    ensure!(top5 == 1.0, "val top-5 {top5}");
    ensure!(took < Duration::from_secs(600), "took {took:?}");
    ensure!(same, "same seed gave a different trajectory");
    Ok(format!(
        "top-1 {top1:.3} (>= 0.90 from epoch {}), top-5 {top5:.3}, {:.0}s",
        first_90.map_or("-".into(), |e| e.to_string()),
        took.as_secs_f64()
    ))
}

fn table_percentages() -> Outcome {
    let rows = [(22, 23_027, "0.10"), (54, 24_596, "0.22"), (15, 24_596, "0.06")];
    for (n, d, want) in rows {
        let got = Percent::ratio(n, d).unwrap().to_string();
        ensure!(got == want, "{n}/{d} gave {got}%, want {want}%");
    }
    Ok("0.10% / 0.22% / 0.06%".into())
}

fn end_to_end() -> Outcome {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo/demo.json");
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let cfg = LoadedConfig::load(&config, None).map_err(|e| e.to_string())?;
        let eval_city = cfg.config.evaluation[0].city_id.clone();
        let layout = run_pipeline(&cfg, Some(&dir.path().join(name))).map_err(|e| e.to_string())?;
        Ok::<_, String>((layout, eval_city))
    };
    let (a, city) = run("a")?;
    let (b, _) = run("b")?;
    let report: Report = serde_json::from_slice(&std::fs::read(a.report(Source::Map, &city)).unwrap()).unwrap();
    let shares: f64 = report.top_k.rows.iter().map(|r| r.share.as_f64()).sum();
    ensure!(shares <= 100.0 + 1e-9, "top-K shares sum to {shares}");
    ensure!(report.likeness.evaluated == 400, "{} locations evaluated", report.likeness.evaluated);
    let (ma, mb) = (std::fs::read(a.map(Source::Map, &city)).unwrap(), std::fs::read(b.map(Source::Map, &city)).unwrap());
    ensure!(!ma.is_empty() && ma == mb, "map PNGs differ between runs");
    let l = &report.likeness;
    Ok(format!(
        "{} likeness {}% unfiltered / {}% filtered, top-K sum {shares:.2}%, map {} bytes identical",
        l.target_city_id,
        l.pct_unfiltered,
        l.pct_filtered,
        ma.len()
    ))
}

fn checkpoint_round_trip(bench: &Option<Benchmark>) -> Outcome {
    let Some(bench) = bench else {
        return Err("training benchmark produced no checkpoint".into());
    };
    let ck = &bench.outcome.checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.utnc"), dir.path().join("b.utnc"));
    ck.save(&p1).unwrap();
    let loaded = Checkpoint::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    let (b1, b2) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    ensure!(b1 == b2, "re-saved checkpoint differs");
    let loader = CachingLoader::default();
    let e1 = evaluate(&ck.network().unwrap(), &bench.manifest, Split::Val, &loader, 32).unwrap();
    let e2 = evaluate(&loaded.network().unwrap(), &bench.manifest, Split::Val, &loader, 32).unwrap();
    ensure!(e1 == e2, "evaluation differs: {e1:?} vs {e2:?}");
    Ok(format!("{} bytes, val top-1 {:.3} both", b1.len(), e1.top1))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut bench = None;
    let results = vec![
        ("population radius", guarded(radii)),
        ("geodesy", guarded(geodesy)),
        ("preprocessing exactness", guarded(preprocessing)),
        ("gradient correctness", guarded(gradients)),
        ("nesterov steps", guarded(nesterov)),
        ("loss anchors", guarded(loss_anchors)),
        ("segmentation", guarded(segmentation)),
        ("10-style training benchmark", guarded(|| training(&mut bench))),
        ("published percentages", guarded(table_percentages)),
        ("end-to-end pipeline", guarded(end_to_end)),
        ("checkpoint round-trip", guarded(|| checkpoint_round_trip(&bench))),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
