//! Station clustering by location, geology and lithology, with elbow
//! selection of k and per-cluster log-ratio errors.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{fmt_opt, log_ratio_stats, LogRatioStats, MetricsReport};
use crate::signal_store::StationMeta;

pub const RESTARTS: usize = 5;
pub const DEFAULT_MAX_ITER: usize = 100;

/// Standardized `[latitude, longitude, geology, lithology]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationFeature {
    pub station_id: String,
    pub vector: [f64; 4],
}

/// Codes are taken as ordinal values; each dimension is scaled to zero mean
/// and unit variance over `stations`. A constant dimension becomes all zeros.
pub fn station_features<'a>(stations: impl IntoIterator<Item = &'a StationMeta>) -> Vec<StationFeature> {
    let raw: Vec<(String, [f64; 4])> = stations
        .into_iter()
        .map(|s| {
            (
                s.station_id.clone(),
                [s.latitude, s.longitude, s.geology_code as f64, s.lithology_code as f64],
            )
        })
        .collect();
    let n = raw.len().max(1) as f64;
    let mut mean = [0.0; 4];
    let mut sd = [0.0; 4];
    for d in 0..4 {
        mean[d] = raw.iter().map(|(_, v)| v[d]).sum::<f64>() / n;
        sd[d] = (raw.iter().map(|(_, v)| (v[d] - mean[d]).powi(2)).sum::<f64>() / n).sqrt();
    }
    raw.into_iter()
        .map(|(station_id, v)| {
            let mut out = [0.0; 4];
            for d in 0..4 {
                out[d] = if sd[d] > 0.0 { (v[d] - mean[d]) / sd[d] } else { 0.0 };
            }
            StationFeature { station_id, vector: out }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each Lloyd update, starting from the seeded centres.
    pub inertia_trace: Vec<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, ctr) in centroids.iter().enumerate() {
        let d = dist2(p, ctr);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Moves each non-empty centroid to the mean of its points; returns counts.
fn update_centroids(points: &[Vec<f64>], assign: &[usize], centroids: &mut [Vec<f64>]) -> Vec<usize> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    for (c, ctr) in centroids.iter_mut().enumerate() {
        if counts[c] > 0 {
            *ctr = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
    }
    counts
}

fn inertia_of(points: &[Vec<f64>], centroids: &[Vec<f64>], assign: &[usize]) -> f64 {
    points.iter().zip(assign).map(|(p, &a)| dist2(p, &centroids[a])).sum()
}

fn check_points(points: &[Vec<f64>], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Cluster("k must be >= 1".into()));
    }
    if k > points.len() {
        return Err(Error::Cluster(format!("k = {k} exceeds the {} points", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Cluster("points must be finite and of equal dimension".into()));
    }
    Ok(())
}

/// k-means++ seeding, then Lloyd iterations until the assignment
/// stops changing or `max_iter` updates have run, then single-point
/// refinement. An empty cluster is re-seeded with the point farthest from
/// its current centre. `inertia_trace` never increases.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    check_points(points, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[idx].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &points[idx]));
        }
    }
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut trace = vec![inertia_of(points, &centroids, &assign)];
    for _ in 0..max_iter {
        let mut counts = update_centroids(points, &assign, &mut centroids);
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&i, &j| {
                        dist2(&points[i], &centroids[assign[i]]).total_cmp(&dist2(&points[j], &centroids[assign[j]]))
                    })
                    .unwrap();
                counts[assign[far]] -= 1;
                centroids[c] = points[far].clone();
                assign[far] = c;
                counts[c] = 1;
            }
        }
        trace.push(inertia_of(points, &centroids, &assign));
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    // Hartigan pass: move single points while that strictly lowers the
    // inertia. A partition stable under these moves is also a Lloyd
    // fixpoint, and many Lloyd fixpoints on small sets are not stable.
    let mut counts = update_centroids(points, &assign, &mut centroids);
    for _ in 0..max_iter {
        let mut moved = false;
        for i in 0..n {
            let a = assign[i];
            if k < 2 || counts[a] < 2 {
                continue;
            }
            let na = counts[a] as f64;
            let remove = na / (na - 1.0) * dist2(&points[i], &centroids[a]);
            let (b, add) = (0..k)
                .filter(|&b| b != a)
                .map(|b| {
                    let nb = counts[b] as f64;
                    (b, nb / (nb + 1.0) * dist2(&points[i], &centroids[b]))
                })
                .min_by(|x, y| x.1.total_cmp(&y.1))
                .unwrap();
            if add < remove * (1.0 - 1e-12) {
                assign[i] = b;
                counts = update_centroids(points, &assign, &mut centroids);
                trace.push(inertia_of(points, &centroids, &assign));
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    let inertia = inertia_of(points, &centroids, &assign);
    trace.push(inertia);
    Ok(KMeansResult {
        k,
        assignments: assign,
        centroids,
        inertia,
        inertia_trace: trace,
    })
}

/// Lowest-inertia run over `restarts` seeds `seed, seed + 1, …`.
pub fn kmeans_best(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize, max_iter: usize) -> Result<KMeansResult> {
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts.max(1) {
        let run = kmeans(points, k, seed.wrapping_add(r as u64), max_iter)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowResult {
    pub k: usize,
    /// `(k, best inertia)` over the range.
    pub curve: Vec<(usize, f64)>,
    pub warning: Option<String>,
}

/// Picks the k whose point on the (range-normalized) inertia curve lies
/// farthest from the chord joining the curve's end points. Ties go to the
/// smaller k.
pub fn kneedle(curve: &[(usize, f64)]) -> (usize, Option<String>) {
    let (k0, i0) = curve[0];
    let (k1, i1) = curve[curve.len() - 1];
    let lo = curve.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let hi = curve.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-12 * hi.abs().max(1.0) {
        return (k0, Some("inertia curve is flat; elbow undefined, using k_min".into()));
    }
    if k1 == k0 {
        return (k0, None);
    }
    let nx = |k: usize| (k - k0) as f64 / (k1 - k0) as f64;
    let ny = |i: f64| (i - lo) / (hi - lo);
    let (ax, ay, bx, by) = (0.0, ny(i0), 1.0, ny(i1));
    let len = ((bx - ax) * (bx - ax) + (by - ay) * (by - ay)).sqrt();
    let mut best = (k0, f64::NEG_INFINITY);
    for &(k, i) in curve {
        let (x, y) = (nx(k), ny(i));
        let d = ((by - ay) * x - (bx - ax) * y + bx * ay - by * ax).abs() / len;
        if d > best.1 + 1e-12 {
            best = (k, d);
        }
    }
    (best.0, None)
}

pub fn elbow_select(points: &[Vec<f64>], k_min: usize, k_max: usize, seed: u64) -> Result<ElbowResult> {
    if k_min == 0 || k_min > k_max {
        return Err(Error::Cluster(format!("bad k range [{k_min}, {k_max}]")));
    }
    check_points(points, k_max)?;
    let curve = (k_min..=k_max)
        .map(|k| Ok((k, kmeans_best(points, k, seed, RESTARTS, DEFAULT_MAX_ITER)?.inertia)))
        .collect::<Result<Vec<_>>>()?;
    let (k, warning) = kneedle(&curve);
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(ElbowResult { k, curve, warning })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterErrors {
    pub cluster: usize,
    pub station_count: usize,
    #[serde(flatten)]
    pub stats: LogRatioStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
    pub inertia: f64,
    pub per_cluster: Vec<ClusterErrors>,
    /// Assigned stations with no prediction in the metrics.
    pub skipped_stations: usize,
}

pub fn cluster_stations(features: &[StationFeature], k: usize, seed: u64) -> Result<ClusterReport> {
    let points: Vec<Vec<f64>> = features.iter().map(|f| f.vector.to_vec()).collect();
    let run = kmeans_best(&points, k, seed, RESTARTS, DEFAULT_MAX_ITER)?;
    Ok(ClusterReport {
        k,
        assignments: features
            .iter()
            .zip(&run.assignments)
            .map(|(f, &a)| (f.station_id.clone(), a))
            .collect(),
        inertia: run.inertia,
        per_cluster: Vec::new(),
        skipped_stations: 0,
    })
}

/// Fills `report.per_cluster` from the per-station predictions in
/// `metrics`. Stations without a prediction are skipped and counted.
pub fn cluster_errors(report: &mut ClusterReport, metrics: &MetricsReport) {
    let mut ratios = vec![Vec::new(); report.k];
    let mut skipped = 0;
    for (id, &c) in &report.assignments {
        match metrics.per_station.get(id) {
            Some(p) => ratios[c].push(p.log_ratio()),
            None => skipped += 1,
        }
    }
    report.per_cluster = ratios
        .iter()
        .enumerate()
        .map(|(cluster, r)| ClusterErrors {
            cluster,
            station_count: r.len(),
            stats: log_ratio_stats(r),
        })
        .collect();
    report.skipped_stations = skipped;
}

pub fn assignments_csv(report: &ClusterReport, stations: &BTreeMap<String, StationMeta>) -> String {
    let mut s = String::from("station_id,lat,lon,cluster\n");
    for (id, c) in &report.assignments {
        let (lat, lon) = stations.get(id).map_or((f64::NAN, f64::NAN), |m| (m.latitude, m.longitude));
        s.push_str(&format!("{id},{lat:.6},{lon:.6},{c}\n"));
    }
    s
}

pub fn errors_csv(per_cluster: &[ClusterErrors]) -> String {
    let mut s = String::from("cluster,signed_mean,abs_mean,abs_std,count\n");
    for c in per_cluster {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            c.cluster,
            fmt_opt(c.stats.log_ratio_mean, 6),
            fmt_opt(c.stats.abs_log_ratio_mean, 6),
            fmt_opt(c.stats.abs_log_ratio_std, 6),
            c.station_count
        ));
    }
    s
}

pub fn elbow_csv(curve: &[(usize, f64)]) -> String {
    let mut s = String::from("k,inertia\n");
    for (k, i) in curve {
        s.push_str(&format!("{k},{i:.10e}\n"));
    }
    s
}

/// Bar chart of the signed mean log ratio per cluster with ±std whiskers
/// around the absolute mean.
pub fn errors_svg(per_cluster: &[ClusterErrors]) -> String {
    let (w, h, pad) = (480.0, 300.0, 40.0);
    let vals: Vec<(f64, f64, f64)> = per_cluster
        .iter()
        .map(|c| {
            (
                c.stats.log_ratio_mean.unwrap_or(0.0),
                c.stats.abs_log_ratio_mean.unwrap_or(0.0),
                c.stats.abs_log_ratio_std.unwrap_or(0.0),
            )
        })
        .collect();
    let span = vals
        .iter()
        .map(|(m, a, s)| m.abs().max(a + s))
        .fold(0.0f64, f64::max)
        .max(1e-3);
    let y = |v: f64| h / 2.0 - v / span * (h / 2.0 - pad);
    let slot = (w - 2.0 * pad) / vals.len().max(1) as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{0:.1}\" x2=\"{1:.1}\" y2=\"{0:.1}\" stroke=\"black\"/>\n\
         <text x=\"{pad}\" y=\"20\" font-size=\"12\">log10(pred/true) per cluster (bars: signed mean, whiskers: |r| mean ± std)</text>\n",
        y(0.0),
        w - pad
    );
    for (i, (m, a, sd)) in vals.iter().enumerate() {
        let x = pad + i as f64 * slot + slot * 0.2;
        let bw = slot * 0.6;
        let (top, bot) = (y(*m).min(y(0.0)), y(*m).max(y(0.0)));
        let cx = x + bw / 2.0;
        s.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{top:.1}\" width=\"{bw:.1}\" height=\"{:.1}\" fill=\"{}\"/>\n",
            (bot - top).max(0.5),
            if *m >= 0.0 { "#c0504d" } else { "#4f81bd" }
        ));
        s.push_str(&format!(
            "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            y(a + sd),
            y((a - sd).max(0.0))
        ));
        s.push_str(&format!(
            "<text x=\"{cx:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{i}</text>\n",
            h - 10.0
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::StationPrediction;

    #[test]
    fn two_pairs_cluster_together() {
        let pts = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![10.0, 10.0], vec![10.1, 10.0]];
        for seed in 0..10 {
            let r = kmeans(&pts, 2, seed, 50).unwrap();
            assert_eq!(r.assignments[0], r.assignments[1]);
            assert_eq!(r.assignments[2], r.assignments[3]);
            assert_ne!(r.assignments[0], r.assignments[2]);
        }
    }

    #[test]
    fn degenerate_cases() {
        let pts = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 0.0]];
        assert!(kmeans(&pts, 3, 1, 10).unwrap().inertia.abs() < 1e-12);
        let same = vec![vec![2.0, 2.0]; 5];
        let r = kmeans(&same, 1, 1, 10).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert!(r.assignments.iter().all(|&a| a == 0));
        assert!(kmeans(&pts, 4, 1, 10).is_err());
        assert!(kmeans(&pts, 0, 1, 10).is_err());
    }

    #[test]
    fn kneedle_rules() {
        let linear: Vec<(usize, f64)> = (1..=6).map(|k| (k, 10.0 - k as f64)).collect();
        assert_eq!(kneedle(&linear).0, 1);
        let flat: Vec<(usize, f64)> = (2..=5).map(|k| (k, 3.0)).collect();
        let (k, w) = kneedle(&flat);
        assert_eq!(k, 2);
        assert!(w.is_some());
        let elbow = vec![(1, 100.0), (2, 50.0), (3, 10.0), (4, 8.0), (5, 7.0), (6, 6.0)];
        assert_eq!(kneedle(&elbow).0, 3);
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        assert_eq!(elbow_select(&pts, 3, 3, 0).unwrap().k, 3);
    }

    fn metrics_with(ratios: &[(&str, f64)]) -> MetricsReport {
        let per = ratios
            .iter()
            .map(|(id, r)| {
                (
                    id.to_string(),
                    StationPrediction {
                        true_vs30: 400.0,
                        predicted_vs30: 400.0 * 10f64.powf(*r),
                        record_count: 1,
                    },
                )
            })
            .collect();
        MetricsReport::from_predictions(per, &Default::default()).unwrap()
    }

    #[test]
    fn per_cluster_errors() {
        let mut report = ClusterReport {
            k: 2,
            assignments: [("a", 0), ("b", 0), ("c", 1), ("d", 1), ("e", 1)]
                .into_iter()
                .map(|(s, c)| (s.to_string(), c))
                .collect(),
            inertia: 0.0,
            per_cluster: Vec::new(),
            skipped_stations: 0,
        };
        let m = metrics_with(&[("a", 0.1), ("b", -0.1), ("c", 0.3), ("d", 0.3)]);
        cluster_errors(&mut report, &m);
        let c0 = &report.per_cluster[0].stats;
        assert!(c0.log_ratio_mean.unwrap().abs() < 1e-12);
        assert!((c0.abs_log_ratio_mean.unwrap() - 0.1).abs() < 1e-12);
        assert!(c0.abs_log_ratio_std.unwrap() < 1e-12);
        assert!((report.per_cluster[1].stats.log_ratio_mean.unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(report.skipped_stations, 1);
        let counts: usize = report.per_cluster.iter().map(|c| c.station_count).sum();
        assert_eq!(counts, 4);
        assert!(errors_svg(&report.per_cluster).starts_with("<svg"));
        assert_eq!(errors_csv(&report.per_cluster).lines().count(), 3);
    }

    #[test]
    fn features_are_standardized() {
        let stations: Vec<StationMeta> = (0..10)
            .map(|i| StationMeta {
                station_id: format!("S{i}"),
                latitude: 36.0 + i as f64,
                longitude: 30.0,
                vs30: None,
                geology_code: i % 3,
                lithology_code: 2 * i,
            })
            .collect();
        let f = station_features(&stations);
        for d in [0, 2, 3] {
            let mean: f64 = f.iter().map(|x| x.vector[d]).sum::<f64>() / 10.0;
            let var: f64 = f.iter().map(|x| x.vector[d].powi(2)).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
        assert!(f.iter().all(|x| x.vector[1] == 0.0));
    }
}
