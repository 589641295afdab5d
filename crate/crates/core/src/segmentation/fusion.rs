use std::collections::BTreeSet;

use super::color::{dist2, rgb_to_luv, Luv};
use super::{SegmentationParams, SegmentedImage};
use crate::error::Result;
use crate::raster::RasterImage;

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller index as root so labelling is order-stable
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.0[hi] = lo;
        }
    }
}

struct Region {
    count: u64,
    sum: [u64; 3],
    neighbours: BTreeSet<usize>,
    alive: bool,
}

impl Region {
    fn mean_luv(&self) -> Luv {
        let c = self.count as f64;
        let mean = [0, 1, 2].map(|k| (self.sum[k] as f64 / c).round() as u8);
        rgb_to_luv(mean)
    }
}

/// Labels 4-connected components of similar filtered colors, then merges
/// every region smaller than `min_density` into the adjacent region with the
/// nearest mean color, smallest regions first (ties by region id).
pub fn fuse_regions(filtered: &RasterImage, params: &SegmentationParams) -> Result<SegmentedImage> {
    params.validate()?;
    let (w, h) = (filtered.width() as usize, filtered.height() as usize);
    let n = w * h;
    let luv: Vec<Luv> = filtered.iter_rgb().map(rgb_to_luv).collect();
    let rr2 = params.range_radius * params.range_radius;

    let mut uf = UnionFind::new(n);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w && dist2(&luv[i], &luv[i + 1]) <= rr2 {
                uf.union(i, i + 1);
            }
            if y + 1 < h && dist2(&luv[i], &luv[i + w]) <= rr2 {
                uf.union(i, i + w);
            }
        }
    }

    // initial region ids in order of first appearance
    let mut label = vec![usize::MAX; n];
    let mut root_to_region = vec![usize::MAX; n];
    let mut regions: Vec<Region> = Vec::new();
    let px = filtered.pixels();
    for i in 0..n {
        let r = uf.find(i);
        if root_to_region[r] == usize::MAX {
            root_to_region[r] = regions.len();
            regions.push(Region { count: 0, sum: [0; 3], neighbours: BTreeSet::new(), alive: true });
        }
        let id = root_to_region[r];
        label[i] = id;
        let reg = &mut regions[id];
        reg.count += 1;
        for k in 0..3 {
            reg.sum[k] += px[i * 3 + k] as u64;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut link = |j: usize| {
                let (a, b) = (label[i], label[j]);
                if a != b {
                    regions[a].neighbours.insert(b);
                    regions[b].neighbours.insert(a);
                }
            };
            if x + 1 < w {
                link(i + 1);
            }
            if y + 1 < h {
                link(i + w);
            }
        }
    }

    let min = params.min_density as u64;
    let mut small: BTreeSet<(u64, usize)> = regions
        .iter()
        .enumerate()
        .filter(|(_, r)| r.count < min)
        .map(|(id, r)| (r.count, id))
        .collect();
    let mut merged_into: Vec<usize> = (0..regions.len()).collect();

    while let Some((size, id)) = small.pop_first() {
        if !regions[id].alive || regions[id].count != size {
            continue;
        }
        let here = regions[id].mean_luv();
        let target = regions[id]
            .neighbours
            .iter()
            .map(|&nb| (dist2(&here, &regions[nb].mean_luv()), nb))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, nb)| nb);
        let Some(target) = target else {
            // the whole image is one undersized region
            continue;
        };

        let absorbed = std::mem::take(&mut regions[id].neighbours);
        let (count, sum) = (regions[id].count, regions[id].sum);
        regions[id].alive = false;
        merged_into[id] = target;

        let old_size = regions[target].count;
        {
            let t = &mut regions[target];
            t.count += count;
            for k in 0..3 {
                t.sum[k] += sum[k];
            }
            t.neighbours.remove(&id);
        }
        for nb in absorbed {
            if nb == target {
                continue;
            }
            regions[nb].neighbours.remove(&id);
            regions[nb].neighbours.insert(target);
            regions[target].neighbours.insert(nb);
        }
        if old_size < min {
            small.remove(&(old_size, target));
        }
        if regions[target].count < min {
            small.insert((regions[target].count, target));
        }
    }

    // resolve merge chains and relabel contiguously in raster order
    let resolve = |mut r: usize| {
        while merged_into[r] != r {
            r = merged_into[r];
        }
        r
    };
    let mut final_id = vec![u32::MAX; regions.len()];
    let mut next = 0u32;
    let mut labels = Vec::with_capacity(n);
    for &l in &label {
        let root = resolve(l);
        if final_id[root] == u32::MAX {
            final_id[root] = next;
            next += 1;
        }
        labels.push(final_id[root]);
    }

    let mut means = vec![[0u8; 3]; next as usize];
    for (root, reg) in regions.iter().enumerate() {
        if reg.alive && final_id[root] != u32::MAX {
            // integer half-up rounding of the exact mean
            means[final_id[root] as usize] =
                [0, 1, 2].map(|k| ((2 * reg.sum[k] + reg.count) / (2 * reg.count)) as u8);
        }
    }
    let mut out = Vec::with_capacity(n * 3);
    for &l in &labels {
        out.extend_from_slice(&means[l as usize]);
    }
    Ok(SegmentedImage {
        image: RasterImage::new(filtered.width(), filtered.height(), out)?,
        labels,
        region_count: next as usize,
    })
}
