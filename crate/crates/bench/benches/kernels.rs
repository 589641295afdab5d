use std::hint::black_box;

use citylike_bench::{input_batch, location, tile};
use citylike_core::geo::{haversine_km, make_grid, BBox, LatLon, WaterMask, EARTH_RADIUS_KM};
use citylike_core::imagery::{benchmark_styles, synth_city_image, Source};
use citylike_core::network::{ArchitectureConfig, Mode, Network};
use citylike_core::segmentation::{segment, SegmentationParams};
use criterion::{criterion_group, criterion_main, Criterion};

fn geo(c: &mut Criterion) {
    let a = LatLon::new(-37.8136, 144.9631);
    let b = LatLon::new(-33.8688, 151.2093);
    c.bench_function("haversine", |bench| {
        bench.iter(|| haversine_km(black_box(a), black_box(b), EARTH_RADIUS_KM))
    });
    let bbox = BBox { lat_min: -38.0, lon_min: 144.8, lat_max: -37.7, lon_max: 145.1 };
    let mask = WaterMask::empty();
    c.bench_function("grid 400m", |bench| bench.iter(|| make_grid("m", black_box(bbox), 400.0, &mask)));
}

fn imagery(c: &mut Criterion) {
    let style = &benchmark_styles(1)[0];
    let loc = location();
    c.bench_function("synth map tile", |b| b.iter(|| synth_city_image(style, &loc, Source::Map, 1)));
    c.bench_function("synth streetview tile", |b| b.iter(|| synth_city_image(style, &loc, Source::Streetview, 1)));
}

fn segmentation(c: &mut Criterion) {
    let img = tile(Source::Streetview);
    let small = img.crop(0, 0, 64, 64).unwrap();
    let params = SegmentationParams::default();
    let mut g = c.benchmark_group("segment");
    g.sample_size(10);
    g.bench_function("64px", |b| b.iter(|| segment(black_box(&small), &params)));
    g.bench_function("256px", |b| b.iter(|| segment(black_box(&img), &params)));
    g.finish();
}

fn network(c: &mut Criterion) {
    let net = Network::<f32>::new(ArchitectureConfig::toy(10), 1).unwrap();
    let x = input_batch(16, 64);
    let labels: Vec<usize> = (0..16).map(|i| i % 10).collect();
    let mut g = c.benchmark_group("toy network");
    g.sample_size(10);
    g.bench_function("forward eval x16", |b| b.iter(|| net.forward(black_box(&x), Mode::Eval)));
    g.bench_function("forward+backward x16", |b| {
        b.iter(|| {
            let f = net.forward(&x, Mode::Train { dropout_seed: 1 }).unwrap();
            net.backward(&net.params, &f, &labels, 1e-4)
        })
    });
    g.finish();
}

criterion_group!(benches, geo, imagery, segmentation, network);
criterion_main!(benches);
