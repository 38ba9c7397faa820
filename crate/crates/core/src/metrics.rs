//! Overlap and surface-distance metrics with per-anatomy aggregation.
//!
//! Conventions: a pixel is foreground when its probability is at least the
//! threshold; DSC of two empty masks is 1; sensitivity is undefined for an
//! empty ground truth; boundaries are foreground pixels with a 4-neighbour
//! in the background (pixels beyond the border count as background);
//! distances are Euclidean in pixels; HD95 is the 95th percentile of the
//! pooled two-way distances with linear interpolation between order
//! statistics; ASD is the mean of the same pool. Distance metrics are
//! undefined when either mask is empty.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::image::{Mask, MaskProb, Plane};
use crate::synth::{Anatomy, ANATOMIES};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub fn binarize(prob: &MaskProb, threshold: f64) -> Mask {
    Plane { height: prob.height, width: prob.width, data: prob.data.iter().map(|&p| (p >= threshold) as u8).collect() }
}

fn check<A: Copy, B: Copy>(a: &Plane<A>, b: &Plane<B>) -> Result<()> {
    if !a.same_dims(b) {
        bail!(Shape, "mask dims {}x{} vs {}x{}", a.height, a.width, b.height, b.width);
    }
    Ok(())
}

fn overlap(a: &Mask, b: &Mask) -> (usize, usize, usize) {
    let (mut i, mut na, mut nb) = (0, 0, 0);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x != 0, y != 0);
        i += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    (i, na, nb)
}

/// `2|P∩G| / (|P|+|G|)`, 1 when both are empty.
pub fn dsc(pred: &Mask, gt: &Mask) -> Result<f64> {
    check(pred, gt)?;
    let (i, p, g) = overlap(pred, gt);
    Ok(if p + g == 0 { 1.0 } else { 2.0 * i as f64 / (p + g) as f64 })
}

/// `|P∩G| / |G|`, `None` for an empty ground truth.
pub fn sensitivity(pred: &Mask, gt: &Mask) -> Result<Option<f64>> {
    check(pred, gt)?;
    let (i, _, g) = overlap(pred, gt);
    Ok((g > 0).then(|| i as f64 / g as f64))
}

/// Foreground pixels with at least one background 4-neighbour.
pub fn boundary(mask: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = mask.dims();
    let on = |x: isize, y: isize| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && mask.get(x as usize, y as usize) != 0;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) == 0 {
                continue;
            }
            let (xi, yi) = (x as isize, y as isize);
            if !(on(xi - 1, yi) && on(xi + 1, yi) && on(xi, yi - 1) && on(xi, yi + 1)) {
                out.push((x, y));
            }
        }
    }
    out
}

/// Squared distance to the nearest site along one line (lower envelope of
/// parabolas). `f` holds 0 at sites and `INF` elsewhere on the first pass.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest site.
fn squared_distance_transform(h: usize, w: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; h * w];
    for &(x, y) in sites {
        grid[y * w + x] = 0.0;
    }
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut buf = vec![0.0; n];
    let mut col = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut buf[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = buf[y];
        }
    }
    for y in 0..h {
        let row: Vec<f64> = grid[y * w..(y + 1) * w].to_vec();
        edt_1d(&row, &mut buf[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&buf[..w]);
    }
    grid
}

/// Distances from each boundary pixel of `a` to the boundary of `b`, and
/// from `b` to `a`, each sorted ascending. `None` if either mask is empty.
pub fn surface_distances(a: &Mask, b: &Mask) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    check(a, b)?;
    let (ba, bb) = (boundary(a), boundary(b));
    if ba.is_empty() || bb.is_empty() {
        return Ok(None);
    }
    let (h, w) = a.dims();
    let one_way = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        let dt = squared_distance_transform(h, w, to);
        let mut d: Vec<f64> = from.iter().map(|&(x, y)| libm::sqrt(dt[y * w + x])).collect();
        d.sort_by(f64::total_cmp);
        d
    };
    Ok(Some((one_way(&ba, &bb), one_way(&bb, &ba))))
}

/// Linear-interpolation percentile of sorted data: position `q/100·(n−1)`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q / 100.0 * (n - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn pooled(a: &Mask, b: &Mask) -> Result<Option<Vec<f64>>> {
    Ok(surface_distances(a, b)?.map(|(mut x, y)| {
        x.extend(y);
        x.sort_by(f64::total_cmp);
        x
    }))
}

pub fn hd95(a: &Mask, b: &Mask) -> Result<Option<f64>> {
    Ok(pooled(a, b)?.map(|d| percentile(&d, 95.0)))
}

pub fn asd(a: &Mask, b: &Mask) -> Result<Option<f64>> {
    Ok(pooled(a, b)?.map(|d| d.iter().sum::<f64>() / d.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub video: usize,
    pub frame: usize,
    pub anatomy: u8,
    pub dsc: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub sensitivity: Option<f64>,
}

/// Scores one binarised prediction.
pub fn evaluate_instance(prob: &MaskProb, gt: &Mask, threshold: f64, video: usize, frame: usize, anatomy: u8) -> Result<MetricsRecord> {
    check(prob, gt)?;
    let pred = binarize(prob, threshold);
    Ok(MetricsRecord {
        video,
        frame,
        anatomy,
        dsc: dsc(&pred, gt)?,
        hd95: hd95(&pred, gt)?,
        asd: asd(&pred, gt)?,
        sensitivity: sensitivity(&pred, gt)?,
    })
}

/// Per-anatomy (or overall) means; undefined values are excluded and counted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    pub anatomy: Option<u8>,
    pub count: usize,
    pub dsc: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub sensitivity: Option<f64>,
    pub distance_undefined: usize,
    pub sensitivity_undefined: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    /// Anatomies in label-code order, then the `Average` row (mean of the
    /// anatomy rows).
    pub rows: Vec<AggregateRow>,
}

impl MetricsTable {
    pub fn average(&self) -> &AggregateRow {
        self.rows.last().expect("table always has an average row")
    }

    pub fn row(&self, anatomy: Anatomy) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.anatomy == Some(anatomy.code()))
    }
}

fn mean_some(v: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut s, mut n, mut undefined) = (0.0, 0usize, 0usize);
    for x in v {
        match x {
            Some(x) => {
                s += x;
                n += 1;
            }
            None => undefined += 1,
        }
    }
    ((n > 0).then(|| s / n as f64), undefined)
}

pub fn aggregate(records: &[MetricsRecord]) -> Result<MetricsTable> {
    if records.is_empty() {
        bail!(Config, "no predictions to evaluate");
    }
    let mut rows = Vec::new();
    for a in ANATOMIES {
        let rs: Vec<&MetricsRecord> = records.iter().filter(|r| r.anatomy == a.code()).collect();
        if rs.is_empty() {
            continue;
        }
        let (hd, du) = mean_some(rs.iter().map(|r| r.hd95));
        let (asd, _) = mean_some(rs.iter().map(|r| r.asd));
        let (sens, su) = mean_some(rs.iter().map(|r| r.sensitivity));
        rows.push(AggregateRow {
            label: String::from(a.title()),
            anatomy: Some(a.code()),
            count: rs.len(),
            dsc: rs.iter().map(|r| r.dsc).sum::<f64>() / rs.len() as f64,
            hd95: hd,
            asd,
            sensitivity: sens,
            distance_undefined: du,
            sensitivity_undefined: su,
        });
    }
    if rows.is_empty() {
        bail!(Validation, "records carry no known anatomy codes");
    }
    let n = rows.len() as f64;
    let (hd, _) = mean_some(rows.iter().map(|r| r.hd95));
    let (asd, _) = mean_some(rows.iter().map(|r| r.asd));
    let (sens, _) = mean_some(rows.iter().map(|r| r.sensitivity));
    let avg = AggregateRow {
        label: String::from("Average"),
        anatomy: None,
        count: rows.iter().map(|r| r.count).sum(),
        dsc: rows.iter().map(|r| r.dsc).sum::<f64>() / n,
        hd95: hd,
        asd,
        sensitivity: sens,
        distance_undefined: rows.iter().map(|r| r.distance_undefined).sum(),
        sensitivity_undefined: rows.iter().map(|r| r.sensitivity_undefined).sum(),
    };
    rows.push(avg);
    Ok(MetricsTable { rows })
}

/// One prediction to score against its ground truth.
pub struct InstancePrediction<'a> {
    pub video: usize,
    pub frame: usize,
    pub anatomy: u8,
    pub prob: &'a MaskProb,
    pub gt: &'a Mask,
}

pub fn evaluate_dataset(predictions: &[InstancePrediction<'_>], threshold: f64) -> Result<(Vec<MetricsRecord>, MetricsTable)> {
    if predictions.is_empty() {
        bail!(Config, "empty prediction set");
    }
    let records = predictions
        .iter()
        .map(|p| evaluate_instance(p.prob, p.gt, threshold, p.video, p.frame, p.anatomy))
        .collect::<Result<Vec<_>>>()?;
    let table = aggregate(&records)?;
    Ok((records, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn from_pixels(h: usize, w: usize, px: &[(usize, usize)]) -> Mask {
        let mut m = Mask::filled(h, w, 0);
        for &(x, y) in px {
            m.set(x, y, 1);
        }
        m
    }

    fn brute(a: &Mask, b: &Mask) -> Option<Vec<f64>> {
        let (ba, bb) = (boundary(a), boundary(b));
        if ba.is_empty() || bb.is_empty() {
            return None;
        }
        let near = |p: (usize, usize), set: &[(usize, usize)]| {
            set.iter()
                .map(|q| {
                    let (dx, dy) = (p.0 as f64 - q.0 as f64, p.1 as f64 - q.1 as f64);
                    libm::sqrt(dx * dx + dy * dy)
                })
                .fold(f64::INFINITY, f64::min)
        };
        let mut d: Vec<f64> = ba.iter().map(|&p| near(p, &bb)).chain(bb.iter().map(|&p| near(p, &ba))).collect();
        d.sort_by(f64::total_cmp);
        Some(d)
    }

    fn random_mask(g: &mut rng::Rng, n: usize) -> Mask {
        let mut m = Mask::filled(n, n, 0);
        for _ in 0..g.random_range(1..4) {
            let (x0, y0) = (g.random_range(0..n), g.random_range(0..n));
            let (w, h) = (g.random_range(1..n / 2), g.random_range(1..n / 2));
            let disc = g.random_bool(0.5);
            for y in y0..(y0 + h).min(n) {
                for x in x0..(x0 + w).min(n) {
                    let (dx, dy) = ((x - x0) as f64 / w as f64 - 0.5, (y - y0) as f64 / h as f64 - 0.5);
                    if !disc || dx * dx + dy * dy <= 0.25 {
                        m.set(x, y, 1);
                    }
                }
            }
        }
        for _ in 0..g.random_range(0..20) {
            let (x, y) = (g.random_range(0..n), g.random_range(0..n));
            m.set(x, y, 1 - m.get(x, y));
        }
        if m.is_empty_mask() {
            m.set(n / 2, n / 2, 1);
        }
        m
    }

    #[test]
    fn binarize_ties_go_up() {
        let p = MaskProb { height: 1, width: 3, data: vec![0.5, 0.6, 0.49] };
        assert_eq!(binarize(&p, 0.5).data, vec![1, 1, 0]);
    }

    #[test]
    fn overlap_oracles() {
        let g = from_pixels(4, 4, &[(0, 0), (1, 0), (2, 0), (3, 0)]);
        let p = from_pixels(4, 4, &[(0, 0), (1, 0), (0, 1), (1, 1)]);
        assert_eq!(dsc(&p, &g).unwrap(), 0.5);
        assert_eq!(sensitivity(&p, &g).unwrap(), Some(0.5));
        assert_eq!(sensitivity(&g, &g).unwrap(), Some(1.0));
        let empty = Mask::filled(4, 4, 0);
        assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
        assert_eq!(sensitivity(&p, &empty).unwrap(), None);
        assert_eq!(dsc(&p, &from_pixels(4, 4, &[(3, 3)])).unwrap(), 0.0);
        let half = from_pixels(4, 4, &[(0, 0), (1, 0)]);
        assert_ne!(sensitivity(&half, &g).unwrap(), sensitivity(&g, &half).unwrap());
    }

    #[test]
    fn single_pixels_five_apart() {
        let a = from_pixels(8, 8, &[(0, 0)]);
        let b = from_pixels(8, 8, &[(3, 4)]);
        let (x, y) = surface_distances(&a, &b).unwrap().unwrap();
        assert_eq!((x, y), (vec![5.0], vec![5.0]));
        assert_eq!(hd95(&a, &b).unwrap(), Some(5.0));
        assert_eq!(asd(&a, &b).unwrap(), Some(5.0));
        assert_eq!(hd95(&a, &a).unwrap(), Some(0.0));
        assert_eq!(hd95(&a, &Mask::filled(8, 8, 0)).unwrap(), None);
    }

    #[test]
    fn percentile_against_sort_and_index() {
        let mut d = vec![0.0; 95];
        d.extend([10.0; 5]);
        // position 0.95 * 99 = 94.05 lies between index 94 (0) and 95 (10).
        let direct = d[94] + (d[95] - d[94]) * (0.95 * 99.0 - 94.0);
        assert!((percentile(&d, 95.0) - direct).abs() < 1e-12);
        assert!((percentile(&d, 95.0) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn concentric_squares_match_brute_force() {
        let mut a = Mask::filled(32, 32, 0);
        let mut b = Mask::filled(32, 32, 0);
        for y in 4..28 {
            for x in 4..28 {
                b.set(x, y, 1);
                if (10..22).contains(&x) && (10..22).contains(&y) {
                    a.set(x, y, 1);
                }
            }
        }
        let (x, y) = surface_distances(&a, &b).unwrap().unwrap();
        let mut all = [x, y].concat();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, brute(&a, &b).unwrap());
    }

    #[test]
    fn random_pairs_match_brute_force() {
        let mut g = rng::rng(42);
        for _ in 0..50 {
            let (a, b) = (random_mask(&mut g, 32), random_mask(&mut g, 32));
            let oracle = brute(&a, &b).unwrap();
            let hd = percentile(&oracle, 95.0);
            let mean = oracle.iter().sum::<f64>() / oracle.len() as f64;
            assert!((hd95(&a, &b).unwrap().unwrap() - hd).abs() < 1e-9);
            assert!((asd(&a, &b).unwrap().unwrap() - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregation_shape() {
        let gt = from_pixels(8, 8, &[(2, 2), (3, 3)]);
        let prob = MaskProb { height: 8, width: 8, data: gt.data.iter().map(|&v| v as f64).collect() };
        let preds: Vec<InstancePrediction> =
            ANATOMIES.iter().map(|a| InstancePrediction { video: 0, frame: 0, anatomy: a.code(), prob: &prob, gt: &gt }).collect();
        let (recs, t) = evaluate_dataset(&preds, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(recs.len(), 12);
        assert_eq!(t.rows.len(), 13);
        assert_eq!(t.average().label, "Average");
        for r in &t.rows {
            assert_eq!((r.dsc, r.hd95, r.asd, r.sensitivity), (1.0, Some(0.0), Some(0.0), Some(1.0)));
        }
        assert!(evaluate_dataset(&[], 0.5).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn distance_metrics_are_symmetric_and_translation_invariant(seed in any::<u64>(), dx in 0usize..6, dy in 0usize..6) {
            let mut g = rng::rng(seed);
            let (a, b) = (random_mask(&mut g, 24), random_mask(&mut g, 24));
            prop_assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
            let (h1, h2) = (hd95(&a, &b).unwrap().unwrap(), hd95(&b, &a).unwrap().unwrap());
            prop_assert!((h1 - h2).abs() <= 1e-12);
            let (s1, s2) = (asd(&a, &b).unwrap().unwrap(), asd(&b, &a).unwrap().unwrap());
            prop_assert!((s1 - s2).abs() <= 1e-12);
            let shift = |m: &Mask| Mask::from_fn(30, 30, |x, y| if x >= dx && y >= dy && x - dx < 24 && y - dy < 24 { m.get(x - dx, y - dy) } else { 0 });
            // Embed in a larger canvas first so the translation never clips.
            let pad = |m: &Mask| Mask::from_fn(30, 30, |x, y| if x < 24 && y < 24 { m.get(x, y) } else { 0 });
            let (pa, pb, ta, tb) = (pad(&a), pad(&b), shift(&a), shift(&b));
            prop_assert_eq!(dsc(&pa, &pb).unwrap(), dsc(&ta, &tb).unwrap());
            prop_assert_eq!(sensitivity(&pa, &pb).unwrap(), sensitivity(&ta, &tb).unwrap());
            prop_assert!((hd95(&pa, &pb).unwrap().unwrap() - hd95(&ta, &tb).unwrap().unwrap()).abs() < 1e-12);
            prop_assert!((asd(&pa, &pb).unwrap().unwrap() - asd(&ta, &tb).unwrap().unwrap()).abs() < 1e-12);
        }
    }
}
