//! Retrieval ranking, the seven retrieval metrics, and distance statistics.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Cut-off of the E-measure.
pub const E_CUTOFF: usize = 32;

/// Column order of every metric table.
pub const METRIC_NAMES: [&str; 7] = ["NN", "FT", "ST", "nDCG", "E", "MRR", "mAP"];

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRun {
    pub queries: Matrix,
    pub query_classes: Vec<usize>,
    pub gallery: Matrix,
    pub gallery_classes: Vec<usize>,
}

impl RetrievalRun {
    pub fn new(queries: Matrix, query_classes: Vec<usize>, gallery: Matrix, gallery_classes: Vec<usize>) -> Result<Self> {
        if queries.rows() != query_classes.len() || gallery.rows() != gallery_classes.len() {
            return Err(Error::dim("retrieval_run", "one class per embedding row"));
        }
        if queries.cols() != gallery.cols() {
            return Err(Error::dim(
                "retrieval_run",
                format!("query width {} vs gallery width {}", queries.cols(), gallery.cols()),
            ));
        }
        if gallery.rows() == 0 {
            return Err(Error::Argument("empty gallery".into()));
        }
        Ok(RetrievalRun {
            queries,
            query_classes,
            gallery,
            gallery_classes,
        })
    }
}

fn unit_rows(m: &Matrix, what: &str) -> Result<Vec<Vec<f64>>> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::degenerate("cosine", format!("{what} row {r} has norm {n}")));
            }
            Ok(row.iter().map(|v| v / n).collect())
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Query x gallery cosine similarities.
pub fn similarities(run: &RetrievalRun) -> Result<Vec<Vec<f64>>> {
    let q = unit_rows(&run.queries, "query")?;
    let g = unit_rows(&run.gallery, "gallery")?;
    Ok(q.iter().map(|a| g.iter().map(|b| dot(a, b)).collect()).collect())
}

/// Gallery indices per query, by descending cosine, ties by ascending index.
pub fn rank_gallery(run: &RetrievalRun) -> Result<Vec<Vec<usize>>> {
    Ok(similarities(run)?
        .into_iter()
        .map(|sims| {
            let mut order: Vec<usize> = (0..sims.len()).collect();
            // partial_cmp, unlike total_cmp, treats -0.0 and 0.0 as a tie.
            order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).expect("finite cosines").then(a.cmp(&b)));
            order
        })
        .collect())
}

/// All values in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    #[serde(rename = "NN")]
    pub nn: f64,
    #[serde(rename = "FT")]
    pub ft: f64,
    #[serde(rename = "ST")]
    pub st: f64,
    #[serde(rename = "nDCG")]
    pub ndcg: f64,
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "MRR")]
    pub mrr: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
}

impl MetricTable {
    pub fn values(&self) -> [f64; 7] {
        [self.nn, self.ft, self.st, self.ndcg, self.e, self.mrr, self.map]
    }

    /// Right-aligned two-decimal table with a header row.
    pub fn to_text(&self) -> String {
        let mut head = String::new();
        let mut row = String::new();
        for (name, v) in METRIC_NAMES.iter().zip(self.values()) {
            let _ = write!(head, "{name:>8}");
            let _ = write!(row, "{v:>8.2}");
        }
        format!("{head}\n{row}\n")
    }
}

/// Per-query relevance of the ranked gallery and the relevant count.
fn relevance(rankings: &[Vec<usize>], query_classes: &[usize], gallery_classes: &[usize]) -> Result<Vec<(Vec<bool>, usize)>> {
    if rankings.len() != query_classes.len() {
        return Err(Error::dim("metrics", "one ranking per query"));
    }
    if query_classes.is_empty() {
        return Err(Error::Argument("no queries".into()));
    }
    rankings
        .iter()
        .zip(query_classes)
        .enumerate()
        .map(|(q, (rank, &c))| {
            let r = gallery_classes.iter().filter(|&&g| g == c).count();
            if r == 0 {
                return Err(Error::Protocol(format!("query {q} has class {c}, which is absent from the gallery")));
            }
            if rank.len() != gallery_classes.len() {
                return Err(Error::dim("metrics", format!("ranking {q} is not a permutation of the gallery")));
            }
            Ok((rank.iter().map(|&i| gallery_classes[i] == c).collect(), r))
        })
        .collect()
}

/// Metrics of precomputed rankings.
pub fn metrics_from_rankings(rankings: &[Vec<usize>], query_classes: &[usize], gallery_classes: &[usize]) -> Result<MetricTable> {
    let rel = relevance(rankings, query_classes, gallery_classes)?;
    let mut sums = [0.0; 7];
    for (hits, r) in &rel {
        let g = hits.len();
        let rf = *r as f64;
        // Prefix counts of relevant items.
        let mut prefix = Vec::with_capacity(g + 1);
        prefix.push(0usize);
        for &h in hits {
            prefix.push(prefix.last().unwrap() + h as usize);
        }
        let nn = if hits[0] { 1.0 } else { 0.0 };
        let ft = prefix[(*r).min(g)] as f64 / rf;
        let st = prefix[(2 * r).min(g)] as f64 / rf;

        let mut dcg = 0.0;
        let mut idcg = 0.0;
        for (i, &h) in hits.iter().enumerate() {
            let disc = 1.0 / ((i + 2) as f64).log2();
            if h {
                dcg += disc;
            }
            if i < *r {
                idcg += disc;
            }
        }

        let k = E_CUTOFF.min(g);
        let found = prefix[k];
        let e = if found == 0 {
            1.0
        } else {
            let p = found as f64 / k as f64;
            let rc = found as f64 / rf;
            1.0 - 2.0 / (1.0 / p + 1.0 / rc)
        };

        let first = hits.iter().position(|&h| h).expect("r >= 1");
        let mrr = 1.0 / (first + 1) as f64;

        let mut ap = 0.0;
        for (i, &h) in hits.iter().enumerate() {
            if h {
                ap += prefix[i + 1] as f64 / (i + 1) as f64;
            }
        }
        ap /= rf;

        for (s, v) in sums.iter_mut().zip([nn, ft, st, dcg / idcg, e, mrr, ap]) {
            *s += v;
        }
    }
    let n = rel.len() as f64;
    let m = sums.map(|s| 100.0 * s / n);
    Ok(MetricTable {
        nn: m[0],
        ft: m[1],
        st: m[2],
        ndcg: m[3],
        e: m[4],
        mrr: m[5],
        map: m[6],
    })
}

pub fn compute_metrics(run: &RetrievalRun) -> Result<MetricTable> {
    metrics_from_rankings(&rank_gallery(run)?, &run.query_classes, &run.gallery_classes)
}

/// Mean mAP of `trials` uniformly random rankings.
pub fn random_baseline_map(query_classes: &[usize], gallery_classes: &[usize], trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Argument("need at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..trials {
        let rankings: Vec<Vec<usize>> = query_classes
            .iter()
            .map(|_| {
                let mut p: Vec<usize> = (0..gallery_classes.len()).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        total += metrics_from_rankings(&rankings, query_classes, gallery_classes)?.map;
    }
    Ok(total / trials as f64)
}

/// Fixed-width histograms of pairwise gallery cosine distances on [0, 2].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceHistograms {
    pub edges: Vec<f64>,
    pub intra: Vec<u64>,
    pub inter: Vec<u64>,
}

impl DistanceHistograms {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,intra_count,inter_count\n");
        for b in 0..self.intra.len() {
            let _ = writeln!(out, "{},{},{}", self.edges[b], self.intra[b], self.inter[b]);
        }
        out
    }
}

/// Cosine distances of every unordered gallery pair, split by class agreement.
fn pair_distances(run: &RetrievalRun) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = unit_rows(&run.gallery, "gallery")?;
    let (mut intra, mut inter) = (Vec::new(), Vec::new());
    for i in 0..g.len() {
        for j in i + 1..g.len() {
            let d = (1.0 - dot(&g[i], &g[j])).clamp(0.0, 2.0);
            if run.gallery_classes[i] == run.gallery_classes[j] {
                intra.push(d);
            } else {
                inter.push(d);
            }
        }
    }
    Ok((intra, inter))
}

pub fn distance_histograms(run: &RetrievalRun, bins: usize) -> Result<DistanceHistograms> {
    if bins == 0 {
        return Err(Error::Argument("need at least one bin".into()));
    }
    let (intra_d, inter_d) = pair_distances(run)?;
    let width = 2.0 / bins as f64;
    let fill = |ds: &[f64]| {
        let mut h = vec![0u64; bins];
        for &d in ds {
            h[((d / width) as usize).min(bins - 1)] += 1;
        }
        h
    };
    Ok(DistanceHistograms {
        edges: (0..=bins).map(|b| b as f64 * width).collect(),
        intra: fill(&intra_d),
        inter: fill(&inter_d),
    })
}

/// Mean inter-class minus mean intra-class gallery distance.
pub fn margin_statistic(run: &RetrievalRun) -> Result<f64> {
    let (intra, inter) = pair_distances(run)?;
    if intra.is_empty() || inter.is_empty() {
        return Err(Error::Protocol(
            "margin needs at least one intra-class and one inter-class pair".into(),
        ));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(mean(&inter) - mean(&intra))
}

/// Straight-from-definition reimplementation used to cross-check the fast path.
pub mod oracle {
    use super::*;

    /// O(Q G^2): repeatedly extracts the best remaining item.
    pub fn naive_rankings(run: &RetrievalRun) -> Result<Vec<Vec<usize>>> {
        let sims = similarities(run)?;
        Ok(sims
            .iter()
            .map(|s| {
                let mut left: Vec<usize> = (0..s.len()).collect();
                let mut out = Vec::with_capacity(s.len());
                while !left.is_empty() {
                    let mut best = 0;
                    for k in 1..left.len() {
                        let (a, b) = (left[k], left[best]);
                        if s[a] > s[b] || (s[a] == s[b] && a < b) {
                            best = k;
                        }
                    }
                    out.push(left.remove(best));
                }
                out
            })
            .collect())
    }

    fn relevant_in_top(rel: &[bool], n: usize) -> usize {
        rel.iter().take(n).filter(|&&r| r).count()
    }

    pub fn metrics(run: &RetrievalRun) -> Result<MetricTable> {
        let rankings = naive_rankings(run)?;
        let mut acc = [0.0; 7];
        for (q, rank) in rankings.iter().enumerate() {
            let c = run.query_classes[q];
            let rel: Vec<bool> = rank.iter().map(|&i| run.gallery_classes[i] == c).collect();
            let r = run.gallery_classes.iter().filter(|&&g| g == c).count();
            if r == 0 {
                return Err(Error::Protocol(format!("query {q} class missing from gallery")));
            }
            let rf = r as f64;
            let g = rel.len();

            let nn = relevant_in_top(&rel, 1) as f64;
            let ft = relevant_in_top(&rel, r) as f64 / rf;
            let st = relevant_in_top(&rel, 2 * r) as f64 / rf;

            let mut dcg = 0.0;
            for (i, &h) in rel.iter().enumerate() {
                if h {
                    dcg += 1.0 / ((i + 2) as f64).log2();
                }
            }
            let mut idcg = 0.0;
            for i in 0..r {
                idcg += 1.0 / ((i + 2) as f64).log2();
            }

            let k = E_CUTOFF.min(g);
            let hits = relevant_in_top(&rel, k);
            let e = if hits == 0 {
                1.0
            } else {
                let p = hits as f64 / k as f64;
                let rc = hits as f64 / rf;
                1.0 - 2.0 / (1.0 / p + 1.0 / rc)
            };

            let mut mrr = 0.0;
            for (i, &h) in rel.iter().enumerate() {
                if h {
                    mrr = 1.0 / (i + 1) as f64;
                    break;
                }
            }

            let mut ap = 0.0;
            for (i, &h) in rel.iter().enumerate() {
                if h {
                    ap += relevant_in_top(&rel, i + 1) as f64 / (i + 1) as f64;
                }
            }
            ap /= rf;

            for (a, v) in acc.iter_mut().zip([nn, ft, st, dcg / idcg, e, mrr, ap]) {
                *a += v;
            }
        }
        let n = rankings.len() as f64;
        Ok(MetricTable {
            nn: 100.0 * acc[0] / n,
            ft: 100.0 * acc[1] / n,
            st: 100.0 * acc[2] / n,
            ndcg: 100.0 * acc[3] / n,
            e: 100.0 * acc[4] / n,
            mrr: 100.0 * acc[5] / n,
            map: 100.0 * acc[6] / n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn run(q: &[&[f64]], qc: &[usize], g: &[&[f64]], gc: &[usize]) -> RetrievalRun {
        RetrievalRun::new(
            Matrix::from_rows(q).unwrap(),
            qc.to_vec(),
            Matrix::from_rows(g).unwrap(),
            gc.to_vec(),
        )
        .unwrap()
    }

    pub(crate) fn random_run(rng: &mut ChaCha8Rng) -> RetrievalRun {
        let classes = rng.random_range(1..=4);
        let g = rng.random_range(1..=20);
        let q = rng.random_range(1..=20);
        let d = rng.random_range(1..=4);
        let mut gc: Vec<usize> = (0..g).map(|_| rng.random_range(0..classes)).collect();
        gc[0] = 0;
        let present: Vec<usize> = gc.clone();
        let qc: Vec<usize> = (0..q).map(|_| present[rng.random_range(0..g)]).collect();
        // Coarse integer coordinates produce exact ties.
        let mut coord = |n: usize| {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| loop {
                    let r: Vec<f64> = (0..d).map(|_| rng.random_range(-2i32..=2) as f64).collect();
                    if r.iter().any(|&v| v != 0.0) {
                        break r;
                    }
                })
                .collect();
            Matrix::from_rows(&rows).unwrap()
        };
        let qm = coord(q);
        let gm = coord(g);
        RetrievalRun::new(qm, qc, gm, gc).unwrap()
    }

    #[test]
    fn hand_average_precision() {
        // Relevant at ranks 1 and 3 of 4.
        let r = metrics_from_rankings(&[vec![0, 1, 2, 3]], &[0], &[0, 1, 0, 1]).unwrap();
        assert_eq!(r.map, 100.0 * (1.0 + 2.0 / 3.0) / 2.0);
        assert!((r.map - 83.33).abs() < 0.005);
        assert_eq!(r.nn, 100.0);
        assert_eq!(r.mrr, 100.0);
        assert_eq!(r.ft, 50.0);
        assert_eq!(r.st, 100.0);
    }

    #[test]
    fn perfect_ranking() {
        let gc = [0, 0, 0, 1, 1];
        let r = metrics_from_rankings(&[vec![0, 1, 2, 3, 4], vec![3, 4, 0, 1, 2]], &[0, 1], &gc).unwrap();
        for v in [r.nn, r.ft, r.st, r.ndcg, r.mrr, r.map] {
            assert!((v - 100.0).abs() < 1e-12);
        }
        // Cut-off clipped to 5: P = R/5, recall = 1.
        let e = |rr: f64| 1.0 - 2.0 / (5.0 / rr + 1.0);
        assert!((r.e - 50.0 * (e(3.0) + e(2.0))).abs() < 1e-12);
    }

    #[test]
    fn ranking_basics() {
        let one = run(&[&[1.0, 0.0]], &[0], &[&[0.0, 1.0]], &[0]);
        assert_eq!(rank_gallery(&one).unwrap(), vec![vec![0]]);
        let r = run(&[&[0.3, 0.7]], &[0], &[&[1.0, 0.0], &[0.3, 0.7], &[0.0, 1.0]], &[0, 0, 0]);
        assert_eq!(rank_gallery(&r).unwrap()[0][0], 1);
        // Ties keep gallery order.
        let t = run(&[&[1.0, 0.0]], &[0], &[&[0.0, 1.0], &[0.0, 2.0], &[1.0, 0.0]], &[0, 0, 0]);
        assert_eq!(rank_gallery(&t).unwrap(), vec![vec![2, 0, 1]]);
    }

    #[test]
    fn missing_query_class_is_a_protocol_error() {
        let r = run(&[&[1.0]], &[2], &[&[1.0]], &[0]);
        assert!(matches!(compute_metrics(&r), Err(Error::Protocol(_))));
        assert!(matches!(oracle::metrics(&r), Err(Error::Protocol(_))));
    }

    #[test]
    fn oracle_agrees_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let r = random_run(&mut rng);
            assert_eq!(rank_gallery(&r).unwrap(), oracle::naive_rankings(&r).unwrap());
            assert_eq!(compute_metrics(&r).unwrap(), oracle::metrics(&r).unwrap());
        }
    }

    #[test]
    fn histograms_and_margin() {
        let same = run(&[&[1.0, 1.0]], &[0], &[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]], &[0, 0, 1]);
        let h = distance_histograms(&same, 10).unwrap();
        assert_eq!(h.intra.iter().sum::<u64>(), 1);
        assert_eq!(h.inter.iter().sum::<u64>(), 2);
        assert_eq!((h.intra[0], h.inter[0]), (1, 2));
        assert!(margin_statistic(&same).unwrap().abs() < 1e-12);

        let single = run(&[&[1.0]], &[0], &[&[1.0], &[2.0]], &[0, 0]);
        let h = distance_histograms(&single, 4).unwrap();
        assert!(h.inter.iter().all(|&c| c == 0));
        assert!(margin_statistic(&single).is_err());

        let split = run(
            &[&[1.0, 0.0]],
            &[0],
            &[&[1.0, 0.1], &[1.0, -0.1], &[-1.0, 0.1], &[-1.0, -0.1]],
            &[0, 0, 1, 1],
        );
        assert!(margin_statistic(&split).unwrap() > 1.5);
        let h = distance_histograms(&split, 4).unwrap();
        assert_eq!(h.intra.iter().sum::<u64>() + h.inter.iter().sum::<u64>(), 6);
        assert_eq!(h.inter[3], 4);
        assert!(h.to_csv().starts_with("bin_start,intra_count,inter_count\n0,2,0\n0.5,0,0\n"));
    }

    #[test]
    fn random_baseline_is_near_class_share() {
        let gc: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let b = random_baseline_map(&[0, 1, 2, 3], &gc, 100, 1).unwrap();
        assert!(b > 20.0 && b < 35.0, "{b}");
    }

    #[test]
    fn table_text() {
        let t = metrics_from_rankings(&[vec![0, 1, 2, 3]], &[0], &[0, 1, 0, 1]).unwrap();
        let text = t.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0].split_whitespace().collect::<Vec<_>>(), METRIC_NAMES);
        assert_eq!(lines[0].len(), lines[1].len());
        assert!(lines[1].ends_with("83.33"));
        let json = serde_json::to_value(t).unwrap();
        assert_eq!(json["mAP"], serde_json::json!(t.map));
    }
}
