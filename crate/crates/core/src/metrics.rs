//! Per-organ DSC and HD95 on 3D label volumes, plus report aggregation.
//!
//! Volumes are `[D, H, W]` row-major with spacing `[sz, sy, sx]` in mm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column order of the organ tables.
pub const ORGANS: [&str; 8] = [
    "Aorta",
    "Gallbladder",
    "Kidney(L)",
    "Kidney(R)",
    "Liver",
    "Pancreas",
    "Spleen",
    "Stomach",
];

/// Display name for foreground class `k` (1-based).
pub fn class_name(k: usize) -> String {
    ORGANS.get(k.wrapping_sub(1)).map(|s| s.to_string()).unwrap_or_else(|| format!("class{k}"))
}

fn check_shapes(a: &[bool], b: &[bool], dims: [usize; 3]) -> Result<()> {
    let n = dims.iter().product::<usize>();
    if a.len() != n || b.len() != n {
        return Err(Error::Shape(format!(
            "masks of length {} and {} do not match dims {dims:?}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)`; 1.0 when both are empty.
pub fn dsc(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("mask lengths {} and {} differ", pred.len(), gt.len())));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Mask voxels with a face neighbour outside the mask or on the volume border.
pub fn surface(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = dims;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = idx(z, y, x);
                if !mask[i] {
                    continue;
                }
                out[i] = z == 0
                    || z + 1 == d
                    || y == 0
                    || y + 1 == h
                    || x == 0
                    || x + 1 == w
                    || !mask[idx(z - 1, y, x)]
                    || !mask[idx(z + 1, y, x)]
                    || !mask[idx(z, y - 1, x)]
                    || !mask[idx(z, y + 1, x)]
                    || !mask[idx(z, y, x - 1)]
                    || !mask[idx(z, y, x + 1)];
            }
        }
    }
    out
}

/// One pass of the lower-envelope distance transform:
/// `out[q] = min_p w·(q−p)² + f[p]` over finite `f[p]`.
fn edt_1d(f: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let (qf, pf) = (q as f64, p as f64);
                    let s = ((fq + w * qf * qf) - (f[p] + w * pf * pf)) / (2.0 * w * (qf - pf));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while j + 1 < v.len() && z[j + 1] < qf {
            j += 1;
        }
        let dq = qf - v[j] as f64;
        // candidates are compared as the same sum the brute force forms
        let mut best = w * dq * dq + f[v[j]];
        if j + 1 < v.len() {
            let dn = qf - v[j + 1] as f64;
            best = best.min(w * dn * dn + f[v[j + 1]]);
        }
        *o = best;
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest `seed` voxel.
pub fn squared_edt(seed: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut g: Vec<f64> = seed.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let strides = [h * w, w, 1];
    let (mut v, mut zb) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = dims[axis];
        let wt = spacing[axis] * spacing[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        let others: Vec<usize> = (0..d * h * w).filter(|&i| (i / strides[axis]) % n == 0).collect();
        for base in others {
            for (k, l) in line.iter_mut().enumerate() {
                *l = g[base + k * strides[axis]];
            }
            edt_1d(&line, wt, &mut out, &mut v, &mut zb);
            for (k, &o) in out.iter().enumerate() {
                g[base + k * strides[axis]] = o;
            }
        }
    }
    g
}

/// Linear-interpolated quantile (`q` in [0, 1]) of a sorted slice, numpy's default rule.
pub fn quantile_linear(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn bbox(a: &[bool], b: &[bool], dims: [usize; 3]) -> Option<([usize; 3], [usize; 3])> {
    let [_, h, w] = dims;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, _) in a.iter().zip(b).enumerate().filter(|(_, (&x, &y))| x || y) {
        any = true;
        let c = [i / (h * w), (i / w) % h, i % w];
        for k in 0..3 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k] + 1);
        }
    }
    any.then_some((lo, hi))
}

fn crop(m: &[bool], dims: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> Vec<bool> {
    let [_, h, w] = dims;
    let mut out = Vec::with_capacity((hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2]));
    for z in lo[0]..hi[0] {
        for y in lo[1]..hi[1] {
            let row = (z * h + y) * w;
            out.extend_from_slice(&m[row + lo[2]..row + hi[2]]);
        }
    }
    out
}

fn directed_p95(from: &[bool], to_dist2: &[f64]) -> f64 {
    let mut d: Vec<f64> = from.iter().zip(to_dist2).filter(|(&s, _)| s).map(|(_, &d2)| d2.sqrt()).collect();
    d.sort_by(f64::total_cmp);
    quantile_linear(&d, 0.95)
}

/// Symmetric 95th-percentile surface distance in mm.
///
/// `Some(0.0)` when both masks are empty, `None` (undefined) when exactly one is.
pub fn hd95(pred: &[bool], gt: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Result<Option<f64>> {
    check_shapes(pred, gt, dims)?;
    let (np, ng) = (pred.iter().any(|&v| v), gt.iter().any(|&v| v));
    match (np, ng) {
        (false, false) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let (sp, sg) = (surface(pred, dims), surface(gt, dims));
    let (lo, hi) = bbox(pred, gt, dims).expect("non-empty");
    let cd = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let (sp, sg) = (crop(&sp, dims, lo, hi), crop(&sg, dims, lo, hi));
    let to_g = squared_edt(&sg, cd, spacing);
    let to_p = squared_edt(&sp, cd, spacing);
    Ok(Some(directed_p95(&sp, &to_g).max(directed_p95(&sg, &to_p))))
}

/// Per-class metrics for one case; index 0 of each vector is class 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dsc: Vec<f64>,
    pub hd95: Vec<Option<f64>>,
}

pub fn evaluate_case(
    case_id: &str,
    pred: &[u8],
    gt: &[u8],
    dims: [usize; 3],
    spacing: [f64; 3],
    num_classes: usize,
) -> Result<CaseMetrics> {
    let n = dims.iter().product::<usize>();
    if pred.len() != n || gt.len() != n {
        return Err(Error::Shape(format!("case {case_id}: volumes do not match dims {dims:?}")));
    }
    if let Some(&bad) = pred.iter().chain(gt).find(|&&v| v as usize >= num_classes) {
        return Err(Error::Data(format!("case {case_id}: label {bad} out of range for {num_classes} classes")));
    }
    let mut out = CaseMetrics {
        case_id: case_id.to_string(),
        dsc: Vec::new(),
        hd95: Vec::new(),
    };
    for k in 1..num_classes as u8 {
        let p: Vec<bool> = pred.iter().map(|&v| v == k).collect();
        let g: Vec<bool> = gt.iter().map(|&v| v == k).collect();
        out.dsc.push(dsc(&p, &g)?);
        out.hd95.push(hd95(&p, &g, dims, spacing)?);
    }
    Ok(out)
}

/// What to do with an undefined HD95 when averaging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum UndefinedHd95 {
    #[default]
    Exclude,
    Penalty(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub cases: Vec<CaseMetrics>,
    /// Percent.
    pub mean_dsc: f64,
    /// mm, over defined entries (or with the penalty substituted).
    pub mean_hd95: f64,
    pub per_class_dsc: Vec<f64>,
    pub per_class_hd95: Vec<Option<f64>>,
    pub undefined_hd95: usize,
    pub policy: UndefinedHd95,
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Cases are ordered by id before averaging so the result does not depend on
/// evaluation order.
pub fn aggregate(cases: &[CaseMetrics], policy: UndefinedHd95) -> Result<MetricsReport> {
    let first = cases.first().ok_or_else(|| Error::Data("no cases to aggregate".into()))?;
    let k = first.dsc.len();
    if cases.iter().any(|c| c.dsc.len() != k || c.hd95.len() != k) {
        return Err(Error::Data("cases disagree on the number of classes".into()));
    }
    let mut cases = cases.to_vec();
    cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let hd = |c: &CaseMetrics, j: usize| match (c.hd95[j], policy) {
        (Some(v), _) => Some(v),
        (None, UndefinedHd95::Penalty(p)) => Some(p),
        (None, UndefinedHd95::Exclude) => None,
    };
    let per_class_dsc: Vec<f64> = (0..k)
        .map(|j| 100.0 * mean(cases.iter().map(|c| c.dsc[j])).unwrap())
        .collect();
    let per_class_hd95: Vec<Option<f64>> = (0..k).map(|j| mean(cases.iter().filter_map(|c| hd(c, j)))).collect();
    let undefined_hd95 = cases.iter().map(|c| c.hd95.iter().filter(|v| v.is_none()).count()).sum();
    let mean_dsc = mean(per_class_dsc.iter().copied()).unwrap_or(0.0);
    let mean_hd95 = mean(cases.iter().flat_map(|c| (0..k).filter_map(move |j| hd(c, j)))).unwrap_or(0.0);
    Ok(MetricsReport {
        class_names: (1..=k).map(class_name).collect(),
        cases,
        mean_dsc,
        mean_hd95,
        per_class_dsc,
        per_class_hd95,
        undefined_hd95,
        policy,
    })
}

impl MetricsReport {
    /// `case_id,class,dsc,hd95` rows, `UNDEFINED` for missing HD95.
    pub fn case_csv(&self) -> String {
        let mut s = String::from("case_id,class,dsc,hd95\n");
        for c in &self.cases {
            for (j, name) in self.class_names.iter().enumerate() {
                let hd = c.hd95[j].map(|v| format!("{v:.6}")).unwrap_or_else(|| "UNDEFINED".into());
                s.push_str(&format!("{},{},{:.6},{}\n", c.case_id, name, c.dsc[j], hd));
            }
        }
        s
    }

    /// One-row summary in the table column order.
    pub fn summary_csv(&self, method: &str) -> String {
        let mut s = String::from("method,dsc,hd95");
        for n in &self.class_names {
            s.push(',');
            s.push_str(n);
        }
        s.push_str(&format!("\n{method},{:.2},{:.2}", self.mean_dsc, self.mean_hd95));
        for v in &self.per_class_dsc {
            s.push_str(&format!(",{v:.2}"));
        }
        s.push('\n');
        s
    }
}

/// Parses the output of [`MetricsReport::case_csv`].
pub fn parse_case_csv(text: &str) -> Result<Vec<CaseMetrics>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("case_id,class,dsc,hd95") {
        return Err(Error::Data("case CSV header must be case_id,class,dsc,hd95".into()));
    }
    let mut out: Vec<CaseMetrics> = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Data(format!("malformed case CSV line {}: {line:?}", n + 2));
        if f.len() != 4 {
            return Err(bad());
        }
        let d: f64 = f[2].parse().map_err(|_| bad())?;
        let h = match f[3] {
            "UNDEFINED" => None,
            v => Some(v.parse::<f64>().map_err(|_| bad())?),
        };
        match out.last_mut() {
            Some(c) if c.case_id == f[0] => {
                c.dsc.push(d);
                c.hd95.push(h);
            }
            _ => out.push(CaseMetrics {
                case_id: f[0].to_string(),
                dsc: vec![d],
                hd95: vec![h],
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_hd95(a: &[bool], b: &[bool], dims: [usize; 3], sp: [f64; 3]) -> Option<f64> {
        let (na, nb) = (a.iter().filter(|&&v| v).count(), b.iter().filter(|&&v| v).count());
        if na == 0 && nb == 0 {
            return Some(0.0);
        }
        if na == 0 || nb == 0 {
            return None;
        }
        let [d, h, w] = dims;
        let inside = |m: &[bool], z: isize, y: isize, x: isize| {
            z >= 0
                && y >= 0
                && x >= 0
                && (z as usize) < d
                && (y as usize) < h
                && (x as usize) < w
                && m[(z as usize * h + y as usize) * w + x as usize]
        };
        let surf = |m: &[bool]| {
            let mut pts = Vec::new();
            for z in 0..d as isize {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        if inside(m, z, y, x)
                            && [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                                .iter()
                                .any(|(dz, dy, dx)| !inside(m, z + dz, y + dy, x + dx))
                        {
                            pts.push((z, y, x));
                        }
                    }
                }
            }
            pts
        };
        let (sa, sb) = (surf(a), surf(b));
        let directed = |from: &[(isize, isize, isize)], to: &[(isize, isize, isize)]| {
            let mut ds: Vec<f64> = from
                .iter()
                .map(|p| {
                    to.iter()
                        .map(|q| {
                            let dz = (p.0 - q.0) as f64 * sp[0];
                            let dy = (p.1 - q.1) as f64 * sp[1];
                            let dx = (p.2 - q.2) as f64 * sp[2];
                            dz * dz + dy * dy + dx * dx
                        })
                        .fold(f64::INFINITY, f64::min)
                        .sqrt()
                })
                .collect();
            ds.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let pos = (ds.len() - 1) as f64 * 0.95;
            let i = pos.floor() as usize;
            let j = if i + 1 < ds.len() { i + 1 } else { i };
            ds[i] + (pos - i as f64) * (ds[j] - ds[i])
        };
        Some(directed(&sa, &sb).max(directed(&sb, &sa)))
    }

    fn random_masks(rng: &mut ChaCha8Rng, n: usize) -> (Vec<bool>, Vec<bool>) {
        let pa = rng.random_range(0.02..0.5);
        let pb = rng.random_range(0.02..0.5);
        let a = (0..n).map(|_| rng.random_bool(pa)).collect();
        let b = (0..n).map(|_| rng.random_bool(pb)).collect();
        (a, b)
    }

    #[test]
    fn dsc_examples() {
        let p = [true, true, true, true, false, false];
        let g = [true, true, false, false, false, false];
        assert!((dsc(&p, &g).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(dsc(&p, &p).unwrap(), 1.0);
        assert_eq!(dsc(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert_eq!(dsc(&[true, false], &[false, true]).unwrap(), 0.0);
        assert!(dsc(&[true], &[true, false]).is_err());
    }

    #[test]
    fn single_voxels_three_apart() {
        let dims = [1, 1, 8];
        let mut a = vec![false; 8];
        let mut b = vec![false; 8];
        a[1] = true;
        b[4] = true;
        assert_eq!(hd95(&a, &b, dims, [1.0, 1.0, 1.0]).unwrap(), Some(3.0));
        assert_eq!(hd95(&a, &a, dims, [1.0, 1.0, 1.0]).unwrap(), Some(0.0));
    }

    #[test]
    fn empty_policies() {
        let dims = [1, 2, 2];
        let e = vec![false; 4];
        let f = vec![true, false, false, false];
        assert_eq!(hd95(&e, &e, dims, [1.0; 3]).unwrap(), Some(0.0));
        assert_eq!(hd95(&e, &f, dims, [1.0; 3]).unwrap(), None);
        assert_eq!(hd95(&f, &e, dims, [1.0; 3]).unwrap(), None);
        let m = evaluate_case("c", &[0, 0, 0, 0], &[1, 0, 0, 0], dims, [1.0; 3], 3).unwrap();
        assert_eq!(m.dsc, vec![0.0, 1.0]);
        assert_eq!(m.hd95, vec![None, Some(0.0)]);
    }

    #[test]
    fn hd95_and_dsc_match_brute_force_on_random_volumes() {
        let dims = [4, 16, 16];
        let spacings = [[1.0, 1.0, 1.0], [2.5, 0.75, 0.75], [3.0, 1.5, 0.5]];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..100 {
            let (a, b) = random_masks(&mut rng, 4 * 16 * 16);
            let sp = spacings[trial % spacings.len()];
            assert_eq!(hd95(&a, &b, dims, sp).unwrap(), brute_hd95(&a, &b, dims, sp), "trial {trial}");
            let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
            let total = a.iter().filter(|&&x| x).count() + b.iter().filter(|&&x| x).count();
            assert_eq!(dsc(&a, &b).unwrap(), 2.0 * inter as f64 / total as f64);
        }
    }

    #[test]
    fn aggregate_means_and_undefined_count() {
        let cases = vec![
            CaseMetrics {
                case_id: "b".into(),
                dsc: vec![0.0, 1.0],
                hd95: vec![None, Some(2.0)],
            },
            CaseMetrics {
                case_id: "a".into(),
                dsc: vec![1.0, 1.0],
                hd95: vec![Some(0.0), Some(4.0)],
            },
        ];
        let r = aggregate(&cases, UndefinedHd95::Exclude).unwrap();
        assert_eq!(r.per_class_dsc, vec![50.0, 100.0]);
        assert_eq!(r.mean_dsc, 75.0);
        assert_eq!(r.mean_hd95, 2.0);
        assert_eq!(r.undefined_hd95, 1);
        assert_eq!(r.cases[0].case_id, "a");
        let p = aggregate(&cases, UndefinedHd95::Penalty(10.0)).unwrap();
        assert_eq!(p.mean_hd95, 4.0);
        assert!(aggregate(&[], UndefinedHd95::Exclude).is_err());
        let parsed = parse_case_csv(&r.case_csv()).unwrap();
        assert_eq!(aggregate(&parsed, UndefinedHd95::Exclude).unwrap().mean_dsc, 75.0);
    }

    #[test]
    fn perfect_case_reports_100_and_0() {
        let labels: Vec<u8> = (0..2 * 4 * 4).map(|i| (i % 9) as u8).collect();
        let m = evaluate_case("p", &labels, &labels, [2, 4, 4], [1.0; 3], 9).unwrap();
        let r = aggregate(&[m], UndefinedHd95::Exclude).unwrap();
        assert_eq!(r.mean_dsc, 100.0);
        assert_eq!(r.mean_hd95, 0.0);
        assert_eq!(r.class_names[0], "Aorta");
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = [2, 6, 5];
            let (a, b) = random_masks(&mut rng, 60);
            prop_assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
            prop_assert_eq!(hd95(&a, &b, dims, [2.0, 1.0, 0.5]).unwrap(), hd95(&b, &a, dims, [2.0, 1.0, 0.5]).unwrap());
        }
    }
}
