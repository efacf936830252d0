//! Overlap and boundary metrics: Dice, IoU, pixel accuracy, normalized
//! surface Dice and Hausdorff distance.
//!
//! Boundary metrics run on surface point sets extracted with
//! 4-connectivity (8 behind an option). Distances use an exact
//! squared-Euclidean distance transform (lower-envelope-of-parabolas,
//! two separable passes) so they agree exactly with the brute-force
//! pairwise oracle used in tests.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn check_binary(name: &str, m: &Array2<u8>) -> Result<()> {
    if m.iter().any(|&v| v > 1) {
        return Err(Error::InvalidArgument(format!("{name} mask must be binary (0/1)")));
    }
    Ok(())
}

fn check_shapes(a: &Array2<u8>, b: &Array2<u8>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn counts(pred: &Array2<u8>, gt: &Array2<u8>) -> (usize, usize, usize) {
    let mut inter = 0usize;
    let mut np = 0usize;
    let mut ng = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        np += p as usize;
        ng += g as usize;
        inter += (p & g) as usize;
    }
    (inter, np, ng)
}

/// 2|A∩B| / (|A|+|B|); 1.0 when both masks are empty.
pub fn dice(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    check_binary("pred", pred)?;
    check_binary("gt", gt)?;
    check_shapes(pred, gt)?;
    let (inter, np, ng) = counts(pred, gt);
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// |A∩B| / |A∪B|; 1.0 when both masks are empty.
pub fn iou(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    check_binary("pred", pred)?;
    check_binary("gt", gt)?;
    check_shapes(pred, gt)?;
    let (inter, np, ng) = counts(pred, gt);
    let union = np + ng - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

pub fn accuracy(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    check_binary("pred", pred)?;
    check_binary("gt", gt)?;
    check_shapes(pred, gt)?;
    let agree = pred.iter().zip(gt.iter()).filter(|(p, g)| p == g).count();
    Ok(agree as f64 / pred.len() as f64)
}

/// Mask pixels with at least one neighbor outside the mask, or lying on
/// the image border. `connectivity` is 4 or 8.
pub fn surface_points(mask: &Array2<u8>, connectivity: u8) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let offsets_4: &[(isize, isize)] = &[(-1, 0), (1, 0), (0, -1), (0, 1)];
    let offsets_8: &[(isize, isize)] = &[
        (-1, -1), (-1, 0), (-1, 1),
        (0, -1), (0, 1),
        (1, -1), (1, 0), (1, 1),
    ];
    let offsets = if connectivity == 8 { offsets_8 } else { offsets_4 };
    let mut out = Vec::new();
    for ((r, c), &v) in mask.indexed_iter() {
        if v == 0 {
            continue;
        }
        if r == 0 || c == 0 || r == h - 1 || c == w - 1 {
            out.push((r, c));
            continue;
        }
        let boundary = offsets.iter().any(|&(dr, dc)| {
            mask[((r as isize + dr) as usize, (c as isize + dc) as usize)] == 0
        });
        if boundary {
            out.push((r, c));
        }
    }
    out
}

/// Exact 1-D squared-distance transform (lower envelope of parabolas) with
/// sample positions `i * spacing`.
fn dt_1d(f: &[f64], spacing: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let x = |i: usize| i as f64 * spacing;
    for q in 1..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        loop {
            let p = v[k];
            if f[p] == f64::INFINITY {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            let s = ((f[q] + x(q) * x(q)) - (f[p] + x(p) * x(p))) / (2.0 * x(q) - 2.0 * x(p));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
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
    // All-infinite row: no sites anywhere.
    if f[v[0]] == f64::INFINITY {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < x(q) {
            k += 1;
        }
        let d = x(q) - x(v[k]);
        out[q] = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel,
/// with anisotropic spacing `(dy, dx)`. All-infinite when `sites` is empty.
pub fn edt_squared(sites: &Array2<bool>, spacing: (f64, f64)) -> Array2<f64> {
    let (h, w) = sites.dim();
    let mut d = Array2::<f64>::from_elem((h, w), f64::INFINITY);
    for ((r, c), &s) in sites.indexed_iter() {
        if s {
            d[(r, c)] = 0.0;
        }
    }
    // Columns first, then rows.
    let mut col_in = vec![0.0f64; h];
    let mut col_out = vec![0.0f64; h];
    for c in 0..w {
        for r in 0..h {
            col_in[r] = d[(r, c)];
        }
        dt_1d(&col_in, spacing.0, &mut col_out);
        for r in 0..h {
            d[(r, c)] = col_out[r];
        }
    }
    let mut row_in = vec![0.0f64; w];
    let mut row_out = vec![0.0f64; w];
    for r in 0..h {
        for c in 0..w {
            row_in[c] = d[(r, c)];
        }
        dt_1d(&row_in, spacing.1, &mut row_out);
        for c in 0..w {
            d[(r, c)] = row_out[c];
        }
    }
    d
}

fn surface_grid(mask: &Array2<u8>, connectivity: u8) -> (Array2<bool>, usize) {
    let pts = surface_points(mask, connectivity);
    let mut grid = Array2::<bool>::from_elem(mask.dim(), false);
    for &(r, c) in &pts {
        grid[(r, c)] = true;
    }
    (grid, pts.len())
}

/// Normalized surface Dice at `tolerance_vox` (distances in voxel units):
/// the fraction of surface points of each mask lying within tolerance of
/// the other mask's surface. 1.0 when both surfaces are empty, 0.0 when
/// exactly one is.
pub fn nsd(pred: &Array2<u8>, gt: &Array2<u8>, tolerance_vox: f64) -> Result<f64> {
    nsd_conn(pred, gt, tolerance_vox, 4)
}

pub fn nsd_conn(pred: &Array2<u8>, gt: &Array2<u8>, tolerance_vox: f64, connectivity: u8) -> Result<f64> {
    check_binary("pred", pred)?;
    check_binary("gt", gt)?;
    check_shapes(pred, gt)?;
    if tolerance_vox < 0.0 {
        return Err(Error::InvalidArgument(format!("tolerance must be >= 0, got {tolerance_vox}")));
    }
    let (sp, np) = surface_grid(pred, connectivity);
    let (sg, ng) = surface_grid(gt, connectivity);
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let tol2 = tolerance_vox * tolerance_vox;
    let d_to_gt = edt_squared(&sg, (1.0, 1.0));
    let d_to_pred = edt_squared(&sp, (1.0, 1.0));
    let mut hits = 0usize;
    for ((r, c), &on) in sp.indexed_iter() {
        if on && d_to_gt[(r, c)] <= tol2 {
            hits += 1;
        }
    }
    for ((r, c), &on) in sg.indexed_iter() {
        if on && d_to_pred[(r, c)] <= tol2 {
            hits += 1;
        }
    }
    Ok(hits as f64 / (np + ng) as f64)
}

/// Symmetric Hausdorff distance in millimeters under anisotropic pixel
/// spacing `(dy, dx)`. Returns 0 when both surfaces are empty and +inf
/// when exactly one is (callers flag that case).
pub fn hausdorff(pred: &Array2<u8>, gt: &Array2<u8>, pixel_spacing: (f64, f64)) -> Result<f64> {
    hausdorff_conn(pred, gt, pixel_spacing, 4, None)
}

/// `percentile` (0, 100] replaces the max with that percentile of the
/// directed surface distances (robustness studies); `None` is the exact
/// Hausdorff maximum.
pub fn hausdorff_conn(
    pred: &Array2<u8>,
    gt: &Array2<u8>,
    pixel_spacing: (f64, f64),
    connectivity: u8,
    percentile: Option<f64>,
) -> Result<f64> {
    check_binary("pred", pred)?;
    check_binary("gt", gt)?;
    check_shapes(pred, gt)?;
    let (sp, np) = surface_grid(pred, connectivity);
    let (sg, ng) = surface_grid(gt, connectivity);
    if np == 0 && ng == 0 {
        return Ok(0.0);
    }
    if np == 0 || ng == 0 {
        return Ok(f64::INFINITY);
    }
    let d_to_gt = edt_squared(&sg, pixel_spacing);
    let d_to_pred = edt_squared(&sp, pixel_spacing);
    let directed = |surface: &Array2<bool>, dist: &Array2<f64>| -> f64 {
        let mut vals: Vec<f64> = surface
            .indexed_iter()
            .filter(|(_, &on)| on)
            .map(|((r, c), _)| dist[(r, c)])
            .collect();
        match percentile {
            None => vals.iter().cloned().fold(0.0, f64::max),
            Some(p) => {
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let rank = (p / 100.0 * (vals.len() - 1) as f64).round() as usize;
                vals[rank.min(vals.len() - 1)]
            }
        }
    };
    let d2 = directed(&sp, &d_to_gt).max(directed(&sg, &d_to_pred));
    Ok(d2.sqrt())
}

/// Per-slice metric record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub subject: String,
    pub slice: u32,
    pub echo: usize,
    pub dice: f64,
    pub iou: f64,
    pub acc: f64,
    pub nsd: f64,
    pub hd_mm: f64,
    /// Set when exactly one surface was empty and hd_mm is the +inf sentinel.
    pub hd_infinite: bool,
}

/// Per-echo aggregate (means over slices; infinite HDs are excluded from
/// the mean and counted instead).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EchoAggregate {
    pub echo: usize,
    pub n_slices: usize,
    pub dice: f64,
    pub iou: f64,
    pub acc: f64,
    pub nsd: f64,
    pub hd_mm: f64,
    pub hd_infinite_count: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub pixel_spacing_mm: (f64, f64),
    pub records: Vec<SliceMetrics>,
}

impl MetricReport {
    pub fn compute_slice(
        subject: &str,
        slice: u32,
        echo: usize,
        pred: &Array2<u8>,
        gt: &Array2<u8>,
        pixel_spacing: (f64, f64),
        tolerance_vox: f64,
        connectivity: u8,
        hd_percentile: Option<f64>,
    ) -> Result<SliceMetrics> {
        let hd = hausdorff_conn(pred, gt, pixel_spacing, connectivity, hd_percentile)?;
        Ok(SliceMetrics {
            subject: subject.to_string(),
            slice,
            echo,
            dice: dice(pred, gt)?,
            iou: iou(pred, gt)?,
            acc: accuracy(pred, gt)?,
            nsd: nsd_conn(pred, gt, tolerance_vox, connectivity)?,
            hd_mm: hd,
            hd_infinite: hd.is_infinite(),
        })
    }

    pub fn aggregates(&self) -> Vec<EchoAggregate> {
        let mut echoes: Vec<usize> = self.records.iter().map(|r| r.echo).collect();
        echoes.sort_unstable();
        echoes.dedup();
        echoes
            .into_iter()
            .map(|echo| {
                let rows: Vec<&SliceMetrics> =
                    self.records.iter().filter(|r| r.echo == echo).collect();
                let n = rows.len();
                let mean = |f: fn(&SliceMetrics) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n as f64;
                let finite_hd: Vec<f64> =
                    rows.iter().filter(|r| !r.hd_infinite).map(|r| r.hd_mm).collect();
                EchoAggregate {
                    echo,
                    n_slices: n,
                    dice: mean(|r| r.dice),
                    iou: mean(|r| r.iou),
                    acc: mean(|r| r.acc),
                    nsd: mean(|r| r.nsd),
                    hd_mm: if finite_hd.is_empty() {
                        f64::NAN
                    } else {
                        finite_hd.iter().sum::<f64>() / finite_hd.len() as f64
                    },
                    hd_infinite_count: n - finite_hd.len(),
                }
            })
            .collect()
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        w.write_record(["subject", "slice", "echo", "dice", "iou", "acc", "nsd", "hd_mm", "hd_infinite"])
            .map_err(|e| Error::Format(e.to_string()))?;
        for r in &self.records {
            w.write_record([
                r.subject.clone(),
                r.slice.to_string(),
                r.echo.to_string(),
                format!("{:.9}", r.dice),
                format!("{:.9}", r.iou),
                format!("{:.9}", r.acc),
                format!("{:.9}", r.nsd),
                if r.hd_infinite { "inf".to_string() } else { format!("{:.9}", r.hd_mm) },
                r.hd_infinite.to_string(),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &std::path::Path) -> Result<MetricReport> {
        let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        let mut records = Vec::new();
        for row in rd.records() {
            let row = row.map_err(|e| Error::Format(e.to_string()))?;
            let get = |i: usize| -> Result<&str> {
                row.get(i).ok_or_else(|| Error::Format(format!("{}: short row", path.display())))
            };
            let parse = |s: &str| -> f64 {
                if s == "inf" {
                    f64::INFINITY
                } else {
                    s.parse().unwrap_or(f64::NAN)
                }
            };
            records.push(SliceMetrics {
                subject: get(0)?.to_string(),
                slice: get(1)?.parse().map_err(|_| Error::Format("bad slice".into()))?,
                echo: get(2)?.parse().map_err(|_| Error::Format("bad echo".into()))?,
                dice: parse(get(3)?),
                iou: parse(get(4)?),
                acc: parse(get(5)?),
                nsd: parse(get(6)?),
                hd_mm: parse(get(7)?),
                hd_infinite: get(8)? == "true",
            });
        }
        Ok(MetricReport { pixel_spacing_mm: (1.0, 1.0), records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from(rows: &[&str]) -> Array2<u8> {
        let h = rows.len();
        let w = rows[0].len();
        Array2::from_shape_fn((h, w), |(r, c)| {
            u8::from(rows[r].as_bytes()[c] == b'#')
        })
    }

    // Brute-force oracles, independent of the accelerated paths.
    fn brute_hd(pred: &Array2<u8>, gt: &Array2<u8>, spacing: (f64, f64)) -> f64 {
        let sp = surface_points(pred, 4);
        let sg = surface_points(gt, 4);
        if sp.is_empty() && sg.is_empty() {
            return 0.0;
        }
        if sp.is_empty() || sg.is_empty() {
            return f64::INFINITY;
        }
        let d2 = |a: &(usize, usize), b: &(usize, usize)| {
            let dy = (a.0 as f64 - b.0 as f64) * spacing.0;
            let dx = (a.1 as f64 - b.1 as f64) * spacing.1;
            dy * dy + dx * dx
        };
        let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
            from.iter()
                .map(|p| to.iter().map(|q| d2(p, q)).fold(f64::INFINITY, f64::min))
                .fold(0.0, f64::max)
        };
        directed(&sp, &sg).max(directed(&sg, &sp)).sqrt()
    }

    fn brute_nsd(pred: &Array2<u8>, gt: &Array2<u8>, tol: f64) -> f64 {
        let sp = surface_points(pred, 4);
        let sg = surface_points(gt, 4);
        if sp.is_empty() && sg.is_empty() {
            return 1.0;
        }
        if sp.is_empty() || sg.is_empty() {
            return 0.0;
        }
        let d2 = |a: &(usize, usize), b: &(usize, usize)| {
            let dy = a.0 as f64 - b.0 as f64;
            let dx = a.1 as f64 - b.1 as f64;
            dy * dy + dx * dx
        };
        let within = |from: &[(usize, usize)], to: &[(usize, usize)]| {
            from.iter()
                .filter(|p| to.iter().map(|q| d2(p, q)).fold(f64::INFINITY, f64::min) <= tol * tol)
                .count()
        };
        (within(&sp, &sg) + within(&sg, &sp)) as f64 / (sp.len() + sg.len()) as f64
    }

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<u8> {
        // A few random rectangles; occasionally empty.
        let mut m = Array2::<u8>::zeros((h, w));
        for _ in 0..rng.random_range(0..4) {
            let r0 = rng.random_range(0..h);
            let c0 = rng.random_range(0..w);
            let rh = rng.random_range(1..=(h - r0));
            let cw = rng.random_range(1..=(w - c0));
            m.slice_mut(ndarray::s![r0..r0 + rh, c0..c0 + cw]).fill(1);
        }
        m
    }

    #[test]
    fn dice_iou_accuracy_basics() {
        let a = mask_from(&["##..", "##..", "....", "...."]);
        let b = mask_from(&[".#..", ".##.", ".#..", "...."]);
        // |A|=4, |B|=4, |A∩B|=2 by hand.
        assert!((dice(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        assert!((iou(&a, &b).unwrap() - 2.0 / 6.0).abs() < 1e-12);
        assert!((dice(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let disjoint = mask_from(&["....", "....", "...#", "..##"]);
        assert_eq!(dice(&a, &disjoint).unwrap(), 0.0);
        assert_eq!(iou(&a, &disjoint).unwrap(), 0.0);
        assert!((accuracy(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = a.mapv(|v| 1 - v);
        assert_eq!(accuracy(&a, &inv).unwrap(), 0.0);

        let mut one_off = a.clone();
        one_off[(3, 3)] = 1;
        assert!((accuracy(&a, &one_off).unwrap() - (1.0 - 1.0 / 16.0)).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_binary() {
        let a = Array2::<u8>::zeros((4, 4));
        let mut b = a.clone();
        b[(0, 0)] = 2;
        assert!(dice(&a, &b).is_err());
        assert!(iou(&b, &a).is_err());
        assert!(accuracy(&a, &b).is_err());
        assert!(nsd(&a, &b, 1.0).is_err());
        assert!(hausdorff(&b, &a, (1.0, 1.0)).is_err());
    }

    #[test]
    fn surface_point_cases() {
        let single = mask_from(&["....", ".#..", "....", "...."]);
        assert_eq!(surface_points(&single, 4), vec![(1, 1)]);

        let square = mask_from(&[".....", ".###.", ".###.", ".###.", "....."]);
        let pts = surface_points(&square, 4);
        assert_eq!(pts.len(), 8); // filled 3x3: all but the center
        assert!(!pts.contains(&(2, 2)));

        let full = Array2::<u8>::from_elem((4, 5), 1);
        let pts = surface_points(&full, 4);
        assert_eq!(pts.len(), 4 * 5 - 2 * 3); // border frame only

        let empty = Array2::<u8>::zeros((4, 4));
        assert!(surface_points(&empty, 4).is_empty());
    }

    #[test]
    fn nsd_cases() {
        let square = mask_from(&["......", ".###..", ".###..", ".###..", "......", "......"]);
        assert!((nsd(&square, &square, 1.0).unwrap() - 1.0).abs() < 1e-12);

        let shifted = mask_from(&["......", "..###.", "..###.", "..###.", "......", "......"]);
        // One-pixel shift: every surface point is within 1 voxel (verified
        // by the brute-force oracle below as well).
        assert!((nsd(&square, &shifted, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((brute_nsd(&square, &shifted, 1.0) - 1.0).abs() < 1e-12);

        let p1 = mask_from(&["#.....", "......", "......", "......", "......", "......"]);
        let p2 = mask_from(&[".....#", "......", "......", "......", "......", "......"]);
        assert_eq!(nsd(&p1, &p2, 1.0).unwrap(), 0.0);

        let empty = Array2::<u8>::zeros((6, 6));
        assert_eq!(nsd(&empty, &empty, 1.0).unwrap(), 1.0);
        assert_eq!(nsd(&p1, &empty, 1.0).unwrap(), 0.0);
        assert!(nsd(&p1, &p2, -0.5).is_err());
    }

    #[test]
    fn hausdorff_cases() {
        let a = mask_from(&["#....", ".....", ".....", ".....", "....."]);
        let mut b = Array2::<u8>::zeros((5, 5));
        b[(3, 4)] = 1;
        // 3-4-5 triangle.
        assert!((hausdorff(&a, &b, (1.0, 1.0)).unwrap() - 5.0).abs() < 1e-12);
        // Anisotropic: dy=3*2mm, dx=4*1mm -> sqrt(36+16).
        let d = hausdorff(&a, &b, (2.0, 1.0)).unwrap();
        assert!((d - 52.0f64.sqrt()).abs() < 1e-9);
        assert!((d - 7.2111).abs() < 1e-4);

        assert_eq!(hausdorff(&a, &a, (1.0, 1.0)).unwrap(), 0.0);
        let empty = Array2::<u8>::zeros((5, 5));
        assert_eq!(hausdorff(&empty, &empty, (1.0, 1.0)).unwrap(), 0.0);
        assert!(hausdorff(&a, &empty, (1.0, 1.0)).unwrap().is_infinite());
    }

    #[test]
    fn oracle_equivalence_on_random_masks() {
        // Accelerated distance-transform implementations vs the O(n^2)
        // pairwise oracle: HD exact, NSD within 1e-9.
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for _ in 0..50 {
            let a = random_mask(&mut rng, 32, 32);
            let b = random_mask(&mut rng, 32, 32);
            let fast = hausdorff(&a, &b, (1.0, 1.0)).unwrap();
            let slow = brute_hd(&a, &b, (1.0, 1.0));
            if slow.is_infinite() {
                assert!(fast.is_infinite());
            } else {
                assert_eq!(fast, slow, "HD must match the oracle exactly");
            }
            let fast_nsd = nsd(&a, &b, 1.0).unwrap();
            let slow_nsd = brute_nsd(&a, &b, 1.0);
            assert!((fast_nsd - slow_nsd).abs() < 1e-9);

            // Set identity: iou == dice / (2 - dice).
            let d = dice(&a, &b).unwrap();
            let i = iou(&a, &b).unwrap();
            assert!((i - d / (2.0 - d)).abs() < 1e-9);
            assert!(i <= d + 1e-12);
        }
    }

    #[test]
    fn anisotropic_hd_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let a = random_mask(&mut rng, 24, 24);
            let b = random_mask(&mut rng, 24, 24);
            let spacing = (1.37, 2.73);
            let fast = hausdorff(&a, &b, spacing).unwrap();
            let slow = brute_hd(&a, &b, spacing);
            if slow.is_finite() {
                assert!((fast - slow).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn symmetry_and_tolerance_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(505);
        for _ in 0..20 {
            let a = random_mask(&mut rng, 20, 20);
            let b = random_mask(&mut rng, 20, 20);
            assert_eq!(nsd(&a, &b, 1.0).unwrap(), nsd(&b, &a, 1.0).unwrap());
            let hab = hausdorff(&a, &b, (1.0, 1.0)).unwrap();
            let hba = hausdorff(&b, &a, (1.0, 1.0)).unwrap();
            if hab.is_finite() {
                assert_eq!(hab, hba);
            }
            let mut prev = 0.0;
            for tol in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
                let v = nsd(&a, &b, tol).unwrap();
                assert!(v + 1e-12 >= prev, "NSD must be monotone in tolerance");
                prev = v;
            }
        }
    }

    #[test]
    fn perfect_value_iff_equal_for_nonempty() {
        let a = mask_from(&["......", ".##...", ".###..", "......", "......", "......"]);
        let mut b = a.clone();
        b[(4, 4)] = 1;
        assert!(dice(&a, &b).unwrap() < 1.0);
        assert!(iou(&a, &b).unwrap() < 1.0);
        assert!(accuracy(&a, &b).unwrap() < 1.0);
        assert!(nsd(&a, &b, 0.0).unwrap() < 1.0);
        assert!(hausdorff(&a, &b, (1.0, 1.0)).unwrap() > 0.0);
    }

    #[test]
    fn report_csv_roundtrip_and_aggregates() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut report = MetricReport { pixel_spacing_mm: (1.0, 1.0), records: vec![] };
        for i in 0..6 {
            let a = random_mask(&mut rng, 16, 16);
            let b = random_mask(&mut rng, 16, 16);
            report.records.push(
                MetricReport::compute_slice(
                    &format!("sub{i:03}"),
                    0,
                    if i % 2 == 0 { 1 } else { 5 },
                    &a,
                    &b,
                    (1.0, 1.0),
                    1.0,
                    4,
                    None,
                )
                .unwrap(),
            );
        }
        let p = dir.path().join("eval.csv");
        report.write_csv(&p).unwrap();
        let back = MetricReport::read_csv(&p).unwrap();
        assert_eq!(back.records.len(), 6);
        for (a, b) in report.records.iter().zip(back.records.iter()) {
            assert!((a.dice - b.dice).abs() < 1e-9);
            assert_eq!(a.hd_infinite, b.hd_infinite);
        }
        let agg = back.aggregates();
        assert_eq!(agg.len(), 2);
        let manual: f64 = back
            .records
            .iter()
            .filter(|r| r.echo == 1)
            .map(|r| r.dice)
            .sum::<f64>()
            / 3.0;
        assert!((agg[0].dice - manual).abs() < 1e-12);
    }
}
