//! Segmentation metrics: Dice, 95th-percentile Hausdorff distance and
//! average surface distance.
//!
//! Distances are Euclidean with unit pixel spacing. Nearest distances come
//! from an exact squared Euclidean distance transform of the target point
//! set, so every distance is `sqrt` of an integer and matches a brute-force
//! search bit for bit.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Pixel confusion counts of a prediction against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn check_same_shape(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Argument(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    check_same_shape(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2TP / (2TP + FP + FN)`; two empty masks score 1.
pub fn dice_score(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        return 1.0;
    }
    (2 * c.tp) as f64 / den as f64
}

/// Which pixels stand in for a mask in distance metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointSet {
    /// Foreground pixels with a background or out-of-bounds 4-neighbour.
    #[default]
    Boundary,
    /// Every foreground pixel.
    FullMask,
}

/// How the average surface distance is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AsdMode {
    /// Mean nearest distance from prediction points to ground-truth points.
    #[default]
    Directed,
    /// Mean over both directions' nearest distances pooled together.
    Symmetric,
}

impl std::str::FromStr for PointSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "boundary" => Ok(Self::Boundary),
            "full-mask" => Ok(Self::FullMask),
            _ => Err(Error::Config(format!("unknown point set `{s}`"))),
        }
    }
}

impl std::str::FromStr for AsdMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "directed" => Ok(Self::Directed),
            "symmetric" => Ok(Self::Symmetric),
            _ => Err(Error::Config(format!("unknown ASD mode `{s}`"))),
        }
    }
}

/// Pixel coordinates `(row, col)` on an `H×W` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundarySet {
    points: Vec<(usize, usize)>,
    shape: (usize, usize),
}

impl BoundarySet {
    /// Arbitrary point set; every point must lie inside `shape`.
    pub fn from_points(points: Vec<(usize, usize)>, shape: (usize, usize)) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| p.0 >= shape.0 || p.1 >= shape.1) {
            return Err(Error::Argument(format!("point {p:?} outside {shape:?}")));
        }
        Ok(Self { points, shape })
    }

    pub fn points(&self) -> &[(usize, usize)] {
        &self.points
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn extract_boundary(mask: &BinaryMask) -> Result<BoundarySet> {
    let (h, w) = mask.shape();
    let mut points = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            if edge {
                points.push((r, c));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyStructure("mask has no foreground".into()));
    }
    Ok(BoundarySet {
        points,
        shape: (h, w),
    })
}

/// All foreground pixels of a mask.
pub fn extract_full(mask: &BinaryMask) -> Result<BoundarySet> {
    let (h, w) = mask.shape();
    let points: Vec<_> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| mask.get(r, c))
        .collect();
    if points.is_empty() {
        return Err(Error::EmptyStructure("mask has no foreground".into()));
    }
    Ok(BoundarySet {
        points,
        shape: (h, w),
    })
}

pub fn extract_points(mask: &BinaryMask, mode: PointSet) -> Result<BoundarySet> {
    match mode {
        PointSet::Boundary => extract_boundary(mask),
        PointSet::FullMask => extract_full(mask),
    }
}

const FAR: i64 = i64::MAX / 4;

/// One-dimensional lower envelope of parabolas (Felzenszwalb–Huttenlocher).
/// Entries at `FAR` contribute no parabola.
fn edt_1d(f: &[i64], out: &mut [i64], v: &mut [usize], z: &mut [f64]) {
    let key = |q: usize| f[q] as f64 + (q * q) as f64;
    let mut k: Option<usize> = None;
    for q in 0..f.len() {
        if f[q] >= FAR {
            continue;
        }
        loop {
            let Some(kk) = k else {
                k = Some(0);
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            };
            let p = v[kk];
            let s = (key(q) - key(p)) / (2.0 * (q - p) as f64);
            if s <= z[kk] {
                k = kk.checked_sub(1);
                continue;
            }
            v[kk + 1] = q;
            z[kk + 1] = s;
            z[kk + 2] = f64::INFINITY;
            k = Some(kk + 1);
            break;
        }
    }
    if k.is_none() {
        out.fill(FAR);
        return;
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as i64 - v[k] as i64;
        *o = f[v[k]] + d * d;
    }
}

/// Squared distance from every grid pixel to the nearest point of `target`.
pub fn squared_distance_map(target: &BoundarySet) -> Result<Vec<i64>> {
    if target.is_empty() {
        return Err(Error::EmptyStructure("empty target point set".into()));
    }
    let (h, w) = target.shape;
    let mut grid = vec![FAR; h * w];
    for &(r, c) in &target.points {
        grid[r * w + c] = 0;
    }
    let n = h.max(w);
    let (mut f, mut out) = (vec![0i64; n], vec![0i64; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0f64; n + 2]);
    for c in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + c];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    Ok(grid)
}

fn check_pair(a: &BoundarySet, b: &BoundarySet) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyStructure("distance between empty point sets".into()));
    }
    if a.shape != b.shape {
        return Err(Error::Argument(format!(
            "point sets live on different grids: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// Nearest Euclidean distance from each point of `a` to `b`, in `a`'s order.
pub fn nearest_distances(a: &BoundarySet, b: &BoundarySet) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let map = squared_distance_map(b)?;
    let w = b.shape.1;
    Ok(a.points
        .iter()
        .map(|&(r, c)| (map[r * w + c] as f64).sqrt())
        .collect())
}

/// Nearest-rank percentile: the value at 0-based index `⌈q·n/100⌉ − 1` of
/// the ascending sort.
pub fn nearest_rank(values: &mut [f64], percent: usize) -> f64 {
    assert!(!values.is_empty() && percent <= 100);
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let rank = (percent * n).div_ceil(100).max(1);
    values[rank - 1]
}

/// 95th percentile of the nearest distances from `a` to `b`.
pub fn directed_h95(a: &BoundarySet, b: &BoundarySet) -> Result<f64> {
    let mut d = nearest_distances(a, b)?;
    Ok(nearest_rank(&mut d, 95))
}

/// Larger of the two directed 95th-percentile distances.
pub fn hd95(pred: &BoundarySet, gt: &BoundarySet) -> Result<f64> {
    Ok(directed_h95(pred, gt)?.max(directed_h95(gt, pred)?))
}

pub fn asd(pred: &BoundarySet, gt: &BoundarySet, mode: AsdMode) -> Result<f64> {
    let d = nearest_distances(pred, gt)?;
    match mode {
        AsdMode::Directed => Ok(d.iter().sum::<f64>() / d.len() as f64),
        AsdMode::Symmetric => {
            let back = nearest_distances(gt, pred)?;
            let total: f64 = d.iter().sum::<f64>() + back.iter().sum::<f64>();
            Ok(total / (d.len() + back.len()) as f64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MetricOptions {
    pub point_set: PointSet,
    pub asd_mode: AsdMode,
}

/// Metrics of one prediction. Distances are in pixels and are `None` when
/// either mask has no foreground.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub point_set: PointSet,
    pub asd_mode: AsdMode,
}

pub fn evaluate(pred: &BinaryMask, gt: &BinaryMask) -> Result<MetricReport> {
    evaluate_with(pred, gt, MetricOptions::default())
}

pub fn evaluate_with(pred: &BinaryMask, gt: &BinaryMask, opts: MetricOptions) -> Result<MetricReport> {
    let counts = confusion(pred, gt)?;
    let dice = dice_score(&counts);
    let (hd, sd) = if pred.is_empty() || gt.is_empty() {
        (None, None)
    } else {
        let pb = extract_points(pred, opts.point_set)?;
        let gb = extract_points(gt, opts.point_set)?;
        (Some(hd95(&pb, &gb)?), Some(asd(&pb, &gb, opts.asd_mode)?))
    };
    Ok(MetricReport {
        dice,
        hd95: hd,
        asd: sd,
        point_set: opts.point_set,
        asd_mode: opts.asd_mode,
    })
}

/// Means over a set of images. Distance means skip undefined entries and
/// report how many were skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub images: usize,
    pub dice: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub undefined_distances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub id: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

/// Per-image reports plus their aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<ImageRow>,
    pub mean: AggregateMetrics,
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl MetricTable {
    pub fn new(rows: Vec<ImageRow>) -> Self {
        let n = rows.len();
        let dice = if n == 0 {
            0.0
        } else {
            rows.iter().map(|r| r.report.dice).sum::<f64>() / n as f64
        };
        let mean = AggregateMetrics {
            images: n,
            dice,
            hd95: mean_defined(rows.iter().map(|r| r.report.hd95)),
            asd: mean_defined(rows.iter().map(|r| r.report.asd)),
            undefined_distances: rows.iter().filter(|r| r.report.hd95.is_none()).count(),
        };
        Self { rows, mean }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Columns `id,dice,hd95_px,asd_px,point_set,asd_mode`; undefined
    /// distances are empty cells.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["id", "dice", "hd95_px", "asd_px", "point_set", "asd_mode"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let m = &r.report;
            out.write_record([
                r.id.clone(),
                m.dice.to_string(),
                opt(m.hd95),
                opt(m.asd),
                label(&m.point_set),
                label(&m.asd_mode),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }
}

fn label<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}
