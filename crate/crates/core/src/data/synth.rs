//! Ring/disk bag generator.
//!
//! Every instance is a `[1, H, W]` image holding 1..=3 bright shapes on a
//! zero background plus noise. In a negative bag all shapes are filled
//! disks. A positive bag picks one ROI scale `s`, and 1..=3 of its instances
//! replace one disk by a ring of radius `roi_base_radius·s`. Disks are sized
//! to cover the same pixel area as a ring of the same scale range, so neither
//! shape count nor total intensity reveals the label.
//!
//! Rasterization is on the integer pixel grid: pixel `(y, x)` belongs to a
//! ring with integer center `(cy, cx)`, radius `r` and thickness `t` when
//! `(r - t/2)² ≤ (y-cy)² + (x-cx)² ≤ (r + t/2)²`, and to a disk of radius
//! `r` when the squared distance is at most `r²`. Ring thickness is
//! `max(1.5, 0.3·r)`; a disk matching a ring of radius `q` has radius
//! `sqrt(2·q·t(q))`. Shape pixels add `shape_intensity`, then every pixel
//! adds `noise_sigma·normal()` (see [`super::rng`]). The default contrast of
//! 0.3 against noise 0.1 keeps small rings hard to tell from disks.

use serde::{Deserialize, Serialize};

use super::rng::{derive_key, CounterRng};
use crate::error::{Error, Result};
use crate::model::Bag;
use crate::tensor::{Real, Tensor};

/// Scale bins used for stratified test splits and per-bin AUROC.
pub const SCALE_BINS: [(f64, f64); 3] = [(0.5, 0.8), (0.8, 1.25), (1.25, 2.0)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Ring,
    Disk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// `(height, width)`.
    pub image_size: (usize, usize),
    /// Inclusive instance-count range.
    pub instances_per_bag: (usize, usize),
    pub roi_base_radius: f64,
    pub roi_scale_range: (f64, f64),
    pub positive_shape: Shape,
    pub distractor_shape: Shape,
    /// Inclusive range of shapes per instance.
    pub shapes_per_instance: (usize, usize),
    /// Inclusive range of ROI-bearing instances in a positive bag.
    pub roi_instances: (usize, usize),
    pub noise_sigma: f64,
    /// Value added by every shape pixel.
    pub shape_intensity: f64,
    pub n_bags: usize,
    pub positive_fraction: f64,
    /// Draw positive-bag scales round-robin from [`SCALE_BINS`].
    pub scale_stratified: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: (64, 64),
            instances_per_bag: (4, 8),
            roi_base_radius: 6.0,
            roi_scale_range: (0.5, 2.0),
            positive_shape: Shape::Ring,
            distractor_shape: Shape::Disk,
            shapes_per_instance: (1, 3),
            roi_instances: (1, 3),
            noise_sigma: 0.1,
            shape_intensity: 0.3,
            n_bags: 400,
            positive_fraction: 0.5,
            scale_stratified: false,
        }
    }
}

/// Ground truth of one ROI placement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiTruth {
    pub instance: usize,
    /// `(y, x)` pixel center.
    pub center: (i64, i64),
    pub scale: f64,
    /// Inclusive `[y0, x0, y1, x1]`, clipped to the image.
    pub bbox: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagTruth {
    pub bag_id: String,
    pub label: u8,
    /// ROI scale of a positive bag.
    pub scale: Option<f64>,
    pub rois: Vec<RoiTruth>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bags: Vec<BagTruth>,
}

impl GroundTruth {
    pub fn get(&self, bag_id: &str) -> Option<&BagTruth> {
        self.bags.iter().find(|b| b.bag_id == bag_id)
    }
}

pub fn ring_thickness(radius: f64) -> f64 {
    (0.3 * radius).max(1.5)
}

/// Radius of a disk whose area matches a ring of radius `q`.
pub fn matched_disk_radius(q: f64) -> f64 {
    (2.0 * q * ring_thickness(q)).sqrt()
}

/// Bin index of a ROI scale; the last bin is closed on the right.
pub fn scale_bin(scale: f64) -> Option<usize> {
    SCALE_BINS.iter().position(|&(lo, hi)| scale >= lo && scale < hi).or_else(|| {
        let (lo, hi) = SCALE_BINS[SCALE_BINS.len() - 1];
        (scale >= lo && scale <= hi).then_some(SCALE_BINS.len() - 1)
    })
}

#[derive(Clone, Copy, Debug)]
struct Placed {
    shape: Shape,
    cy: i64,
    cx: i64,
    radius: f64,
}

impl Placed {
    /// Outer extent in pixels from the center.
    fn reach(&self) -> i64 {
        match self.shape {
            Shape::Ring => (self.radius + ring_thickness(self.radius) / 2.0).ceil() as i64,
            Shape::Disk => self.radius.ceil() as i64,
        }
    }

    fn covers(&self, y: i64, x: i64) -> bool {
        let d2 = ((y - self.cy) * (y - self.cy) + (x - self.cx) * (x - self.cx)) as f64;
        match self.shape {
            Shape::Ring => {
                let half = ring_thickness(self.radius) / 2.0;
                let lo = (self.radius - half).max(0.0);
                let hi = self.radius + half;
                d2 >= lo * lo && d2 <= hi * hi
            }
            Shape::Disk => d2 <= self.radius * self.radius,
        }
    }
}

impl SyntheticSpec {
    pub fn with_bags(mut self, n_bags: usize) -> Self {
        self.n_bags = n_bags;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let (lo, hi) = self.roi_scale_range;
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if h == 0 || w == 0 {
            return bad("image_size must be positive");
        }
        if self.instances_per_bag.0 == 0 || self.instances_per_bag.0 > self.instances_per_bag.1 {
            return bad("instances_per_bag must be a non-empty range starting at 1 or more");
        }
        if !(lo > 0.0 && lo <= hi) {
            return bad("roi_scale_range must be a positive, non-empty range");
        }
        if !(self.roi_base_radius > 0.0) {
            return bad("roi_base_radius must be positive");
        }
        let max_shape = Placed {
            shape: Shape::Ring,
            cy: 0,
            cx: 0,
            radius: self.roi_base_radius * hi,
        };
        let reach = max_shape.reach().max(matched_disk_radius(self.roi_base_radius * hi).ceil() as i64);
        if 2 * reach + 1 > h.min(w) as i64 {
            return bad("the largest ROI does not fit inside the image");
        }
        if self.shapes_per_instance.0 == 0 || self.shapes_per_instance.0 > self.shapes_per_instance.1 {
            return bad("shapes_per_instance must be a non-empty range starting at 1 or more");
        }
        if self.roi_instances.0 == 0 || self.roi_instances.0 > self.roi_instances.1 {
            return bad("roi_instances must be a non-empty range starting at 1 or more");
        }
        if !(self.shape_intensity > 0.0) {
            return bad("shape_intensity must be positive");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad("positive_fraction must lie in [0, 1]");
        }
        if self.scale_stratified && SCALE_BINS.iter().any(|&(a, b)| b <= lo || a >= hi) {
            return bad("scale_stratified needs roi_scale_range to overlap every scale bin");
        }
        Ok(())
    }

    /// Number of positive bags: `round(n_bags · positive_fraction)`.
    pub fn positive_count(&self) -> usize {
        (self.n_bags as f64 * self.positive_fraction).round() as usize
    }
}

/// Generates `spec.n_bags` bags named `bag00000`, `bag00001`, ...
///
/// Labels: indices `0..n` are shuffled with the stream `derive_key(seed, u64::MAX)`
/// and the first `positive_count` shuffled indices are positive. Bag `i`
/// draws everything else from the stream `derive_key(seed, i)`.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<(Vec<Bag>, GroundTruth)> {
    spec.validate()?;
    let mut order: Vec<usize> = (0..spec.n_bags).collect();
    CounterRng::new(derive_key(seed, u64::MAX)).shuffle(&mut order);
    let mut labels = vec![0u8; spec.n_bags];
    // Rank among positives drives the round-robin scale bin.
    let mut pos_rank = vec![0usize; spec.n_bags];
    for (rank, &i) in order.iter().take(spec.positive_count()).enumerate() {
        labels[i] = 1;
        pos_rank[i] = rank;
    }
    let (bags, truth): (Vec<Bag>, Vec<BagTruth>) = crate::harness::par_map(spec.n_bags, |i| {
        generate_bag(spec, derive_key(seed, i as u64), i, labels[i], pos_rank[i])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?
    .into_iter()
    .unzip();
    Ok((bags, GroundTruth { bags: truth }))
}

fn generate_bag(spec: &SyntheticSpec, key: u64, index: usize, label: u8, pos_rank: usize) -> Result<(Bag, BagTruth)> {
    let mut rng = CounterRng::new(key);
    let (h, w) = spec.image_size;
    let n = rng.int_in(spec.instances_per_bag.0, spec.instances_per_bag.1);
    let (lo, hi) = spec.roi_scale_range;
    let roi_scale = (label == 1).then(|| {
        if spec.scale_stratified {
            let (a, b) = SCALE_BINS[pos_rank % SCALE_BINS.len()];
            rng.uniform_in(a.max(lo), b.min(hi))
        } else {
            rng.uniform_in(lo, hi)
        }
    });
    let mut roi_at = vec![false; n];
    if label == 1 {
        let count = rng.int_in(spec.roi_instances.0, spec.roi_instances.1.min(n).max(spec.roi_instances.0));
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        for &i in idx.iter().take(count.min(n)) {
            roi_at[i] = true;
        }
    }

    let id = format!("bag{index:05}");
    let mut instances = Vec::with_capacity(n);
    let mut rois = Vec::new();
    for (inst, &has_roi) in roi_at.iter().enumerate() {
        let count = rng.int_in(spec.shapes_per_instance.0, spec.shapes_per_instance.1);
        let mut placed: Vec<Placed> = Vec::with_capacity(count);
        for j in 0..count {
            let roi = has_roi && j == 0;
            let shape = if roi { spec.positive_shape } else { spec.distractor_shape };
            let scale = if roi { roi_scale.expect("positive bag") } else { rng.uniform_in(lo, hi) };
            let q = spec.roi_base_radius * scale;
            let radius = match shape {
                Shape::Ring => q,
                Shape::Disk => matched_disk_radius(q),
            };
            let mut candidate = Placed {
                shape,
                cy: 0,
                cx: 0,
                radius,
            };
            let reach = candidate.reach();
            let mut ok = false;
            // Rejection sampling; the ROI is placed first on an empty canvas.
            for _ in 0..64 {
                candidate.cy = rng.int_in(reach as usize, h - 1 - reach as usize) as i64;
                candidate.cx = rng.int_in(reach as usize, w - 1 - reach as usize) as i64;
                let clear = placed.iter().all(|p| {
                    let gap = p.reach() + reach + 2;
                    (p.cy - candidate.cy).abs() > gap || (p.cx - candidate.cx).abs() > gap
                });
                if clear {
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue;
            }
            if roi {
                let r = reach;
                rois.push(RoiTruth {
                    instance: inst,
                    center: (candidate.cy, candidate.cx),
                    scale,
                    bbox: [
                        (candidate.cy - r).max(0) as usize,
                        (candidate.cx - r).max(0) as usize,
                        ((candidate.cy + r) as usize).min(h - 1),
                        ((candidate.cx + r) as usize).min(w - 1),
                    ],
                });
            }
            placed.push(candidate);
        }
        let mut pixels = Vec::with_capacity(h * w);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut v = 0.0f64;
                for p in &placed {
                    if (y - p.cy).abs() <= p.reach() && (x - p.cx).abs() <= p.reach() && p.covers(y, x) {
                        v += spec.shape_intensity;
                    }
                }
                if spec.noise_sigma > 0.0 {
                    v += spec.noise_sigma * rng.normal();
                }
                pixels.push(v as Real);
            }
        }
        instances.push(Tensor::new(&[1, h, w], pixels)?);
    }
    let bag = Bag::new(id.clone(), instances, label)?;
    let truth = BagTruth {
        bag_id: id,
        label,
        scale: roi_scale,
        rois,
    };
    Ok((bag, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_bags: 20,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn stratified_class_count() {
        let spec = SyntheticSpec::default().with_bags(200);
        let (bags, _) = generate(&spec, 3).unwrap();
        assert_eq!(bags.iter().filter(|b| b.label == 1).count(), 100);
    }

    #[test]
    fn same_seed_same_bags() {
        let (a, ta) = generate(&small(), 11).unwrap();
        let (b, tb) = generate(&small(), 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate(&small(), 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn truth_matches_labels() {
        let (bags, truth) = generate(&small(), 5).unwrap();
        for (bag, t) in bags.iter().zip(&truth.bags) {
            assert_eq!(bag.id, t.bag_id);
            assert!((4..=8).contains(&bag.len()));
            if bag.label == 1 {
                assert!((1..=3).contains(&t.rois.len()));
                let s = t.scale.unwrap();
                assert!((0.5..=2.0).contains(&s));
            } else {
                assert!(t.rois.is_empty());
                assert!(t.scale.is_none());
            }
        }
    }

    #[test]
    fn ring_pixels_lie_in_bbox() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            shapes_per_instance: (1, 1),
            ..small()
        };
        let (bags, truth) = generate(&spec, 9).unwrap();
        for (bag, t) in bags.iter().zip(&truth.bags) {
            for roi in &t.rois {
                let img = bag.instances[roi.instance].data();
                let [y0, x0, y1, x1] = roi.bbox;
                let inside: f32 = (y0..=y1)
                    .flat_map(|y| (x0..=x1).map(move |x| (y, x)))
                    .map(|(y, x)| img[y * 64 + x] as f32)
                    .sum();
                let total: f32 = img.iter().map(|&v| v as f32).sum();
                assert!(inside > 0.0);
                assert_eq!(inside, total);
                // The ring center is hollow.
                assert_eq!(img[roi.center.0 as usize * 64 + roi.center.1 as usize], 0.0);
            }
        }
    }

    /// Dark pixels that cannot reach the border through 4-connected dark pixels.
    fn enclosed(inst: &Tensor) -> Vec<(usize, usize)> {
        let (h, w) = (inst.shape()[1], inst.shape()[2]);
        let dark = |y: usize, x: usize| inst.data()[y * w + x] == 0.0;
        let mut seen = vec![false; h * w];
        let mut stack: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| [(y, 0), (y, w - 1)])
            .chain((0..w).flat_map(|x| [(0, x), (h - 1, x)]))
            .filter(|&(y, x)| dark(y, x))
            .collect();
        while let Some((y, x)) = stack.pop() {
            if seen[y * w + x] {
                continue;
            }
            seen[y * w + x] = true;
            let next = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
            stack.extend(next.into_iter().filter(|&(ny, nx)| ny < h && nx < w && dark(ny, nx)));
        }
        (0..h * w)
            .filter(|&i| dark(i / w, i % w) && !seen[i])
            .map(|i| (i / w, i % w))
            .collect()
    }

    #[test]
    fn only_roi_instances_enclose_background() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            ..small()
        };
        let (bags, truth) = generate(&spec, 2).unwrap();
        for (bag, t) in bags.iter().zip(&truth.bags) {
            for (i, inst) in bag.instances.iter().enumerate() {
                assert!(inst.data().iter().all(|&v| v == 0.0 || v as f64 >= spec.shape_intensity - 1e-6));
                let holes = enclosed(inst);
                match t.rois.iter().find(|r| r.instance == i) {
                    Some(roi) => {
                        let c = (roi.center.0 as usize, roi.center.1 as usize);
                        assert!(holes.contains(&c), "{} instance {i}: ring center not enclosed", bag.id);
                    }
                    None => assert!(holes.is_empty(), "{} instance {i}: {} enclosed pixels", bag.id, holes.len()),
                }
            }
        }
    }

    #[test]
    fn disk_area_matches_ring_area() {
        for &q in &[3.0, 6.0, 12.0] {
            let t = ring_thickness(q);
            let ring = std::f64::consts::PI * ((q + t / 2.0).powi(2) - (q - t / 2.0).powi(2));
            let disk = std::f64::consts::PI * matched_disk_radius(q).powi(2);
            assert!((ring - disk).abs() < 1e-9);
        }
    }

    #[test]
    fn stratified_scales_fill_every_bin() {
        let spec = SyntheticSpec {
            scale_stratified: true,
            ..small()
        };
        let (_, truth) = generate(&spec, 1).unwrap();
        let mut counts = [0; 3];
        for t in &truth.bags {
            if let Some(s) = t.scale {
                counts[scale_bin(s).unwrap()] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c >= 3), "{counts:?}");
    }

    #[test]
    fn oversized_roi_is_rejected() {
        let spec = SyntheticSpec {
            image_size: (16, 16),
            ..small()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn scale_bins_partition_the_range() {
        assert_eq!(scale_bin(0.5), Some(0));
        assert_eq!(scale_bin(0.8), Some(1));
        assert_eq!(scale_bin(1.25), Some(2));
        assert_eq!(scale_bin(2.0), Some(2));
        assert_eq!(scale_bin(2.1), None);
    }
}
