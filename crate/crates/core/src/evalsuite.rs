//! Open-set verification and identification metrics over embeddings.

use rayon::prelude::*;

use crate::diffcore::{self, Matrix};
use crate::embedmodel::EmbeddingNet;
use crate::error::{invalid, Error, Result};
use crate::synthdata::SampledDataset;

/// Desk-scale verification operating points.
pub const DEFAULT_FARS: [f64; 3] = [1e-1, 1e-2, 1e-3];
/// Per-dimension variance below which a feature dimension counts as collapsed.
pub const COLLAPSE_VARIANCE: f64 = 1e-6;

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("length {}", a.len()),
            found: format!("length {}", b.len()),
        });
    }
    let (na, nb) = (diffcore::norm(a), diffcore::norm(b));
    if na <= diffcore::NORM_FLOOR || nb <= diffcore::NORM_FLOOR {
        return Err(Error::NormTooSmall { norm: na.min(nb) });
    }
    Ok((diffcore::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Genuine and impostor similarity scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScores {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

/// Scores every unordered pair of rows: same id is genuine, otherwise impostor.
pub fn all_pair_scores(features: &Matrix, ids: &[u32]) -> Result<PairScores> {
    if features.rows() != ids.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} ids", features.rows()),
            found: format!("{} ids", ids.len()),
        });
    }
    let per_row: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..features.rows())
        .into_par_iter()
        .map(|i| {
            let mut g = Vec::new();
            let mut imp = Vec::new();
            for j in i + 1..features.rows() {
                let s = cosine_similarity(features.row(i), features.row(j))?;
                if ids[i] == ids[j] {
                    g.push(s);
                } else {
                    imp.push(s);
                }
            }
            Ok((g, imp))
        })
        .collect();
    let mut scores = PairScores { genuine: Vec::new(), impostor: Vec::new() };
    for row in per_row {
        let (g, imp) = row?;
        scores.genuine.extend(g);
        scores.impostor.extend(imp);
    }
    Ok(scores)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Pairs with score `>= threshold` are accepted.
    pub threshold: f64,
    pub far: f64,
    pub tar: f64,
}

/// Points sorted by ascending threshold; the last point has threshold `+inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn points(&self) -> &[RocPoint] {
        &self.points
    }
}

/// Exact sweep over every distinct score.
pub fn roc(genuine: &[f64], impostor: &[f64]) -> Result<RocCurve> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(invalid("roc", "genuine and impostor score lists must be nonempty"));
    }
    if genuine.iter().chain(impostor).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { context: "roc scores" });
    }
    let mut g = genuine.to_vec();
    let mut imp = impostor.to_vec();
    g.sort_by(f64::total_cmp);
    imp.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = g.iter().chain(&imp).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (ng, ni) = (g.len() as f64, imp.len() as f64);
    // Two pointers: count of scores strictly below the threshold.
    let (mut gi, mut ii) = (0usize, 0usize);
    let mut points = Vec::with_capacity(thresholds.len() + 1);
    for t in thresholds {
        while gi < g.len() && g[gi] < t {
            gi += 1;
        }
        while ii < imp.len() && imp[ii] < t {
            ii += 1;
        }
        points.push(RocPoint { threshold: t, far: (imp.len() - ii) as f64 / ni, tar: (g.len() - gi) as f64 / ng });
    }
    points.push(RocPoint { threshold: f64::INFINITY, far: 0.0, tar: 0.0 });
    Ok(RocCurve { points })
}

/// Best TAR over thresholds whose FAR does not exceed `far`.
///
/// Because both rates fall as the threshold rises, this is the TAR at the
/// lowest threshold meeting the FAR target.
pub fn tar_at_far(curve: &RocCurve, far: f64) -> f64 {
    curve.points.iter().find(|p| p.far <= far).map_or(0.0, |p| p.tar)
}

/// Fraction of probes whose top-1 cosine match over gallery ∪ distractors is
/// their own gallery entry. Ties go to the lowest index, with gallery entries
/// ordered before distractors.
pub fn rank1_identification(
    probes: &Matrix,
    probe_ids: &[u32],
    gallery: &Matrix,
    gallery_ids: &[u32],
    distractors: &Matrix,
) -> Result<f64> {
    if probes.rows() != probe_ids.len() || gallery.rows() != gallery_ids.len() {
        return Err(Error::ShapeMismatch { expected: "one id per row".into(), found: "mismatched id lists".into() });
    }
    if probes.rows() == 0 {
        return Err(invalid("rank1", "no probes"));
    }
    let mut targets = Vec::with_capacity(probe_ids.len());
    for &pid in probe_ids {
        let mut hits = gallery_ids.iter().enumerate().filter(|(_, &g)| g == pid);
        let (idx, _) = hits.next().ok_or(Error::UnknownId(pid))?;
        if hits.next().is_some() {
            return Err(invalid("rank1", format!("identity {pid} appears more than once in the gallery")));
        }
        targets.push(idx);
    }
    let correct: Result<Vec<bool>> = (0..probes.rows())
        .into_par_iter()
        .map(|i| {
            let x = probes.row(i);
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for (k, row) in gallery.iter_rows().chain(distractors.iter_rows()).enumerate() {
                let s = cosine_similarity(x, row)?;
                if s > best.0 {
                    best = (s, k);
                }
            }
            Ok(best.1 == targets[i])
        })
        .collect();
    let correct = correct?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64)
}

/// Fraction of feature dimensions whose variance over the rows is below
/// [`COLLAPSE_VARIANCE`].
pub fn dimension_health(features: &Matrix) -> Result<f64> {
    if features.rows() < 2 {
        return Err(invalid("dimension_health", "need at least 2 feature rows"));
    }
    if features.cols() == 0 {
        return Ok(0.0);
    }
    let n = features.rows() as f64;
    let collapsed = (0..features.cols())
        .filter(|&c| {
            let mean = features.iter_rows().map(|r| r[c]).sum::<f64>() / n;
            let var = features.iter_rows().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
            var < COLLAPSE_VARIANCE
        })
        .count();
    Ok(collapsed as f64 / features.cols() as f64)
}

/// Verification, identification and collapse metrics of one network on one
/// evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `(far, tar)` per requested operating point.
    pub tars: Vec<(f64, f64)>,
    pub rank1: f64,
    pub collapsed_frac: f64,
}

impl EvalReport {
    pub fn tar_at(&self, far: f64) -> Option<f64> {
        self.tars.iter().find(|(f, _)| *f == far).map(|(_, t)| *t)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("far,tar\n");
        for (far, tar) in &self.tars {
            out.push_str(&format!("{far},{tar}\n"));
        }
        out.push_str(&format!("rank1,{}\n", self.rank1));
        out.push_str(&format!("collapsed_frac,{}\n", self.collapsed_frac));
        out
    }
}

/// Embeds `data` with `net` and scores it.
///
/// Verification uses every pair of samples from the non-distractor
/// identities. For identification the first sample of each such identity is
/// its gallery entry and the second its probe; every sample of the last
/// `distractor_ids` identities joins the search set as a distractor.
pub fn evaluate(net: &EmbeddingNet, data: &SampledDataset, fars: &[f64], distractor_ids: usize) -> Result<EvalReport> {
    if net.input_dim() != data.input_dim() {
        return Err(Error::ArchitectureMismatch { left: net.layer_sizes().to_vec(), right: vec![data.input_dim()] });
    }
    if distractor_ids + 2 > data.num_ids() {
        return Err(invalid("eval.distractors", "need at least two non-distractor identities"));
    }
    let features = net.forward(data.samples())?;
    let cut = (data.num_ids() - distractor_ids) as u32;
    let keep = data.ids().iter().take_while(|&&id| id < cut).count();
    let dim = features.cols();
    let head = Matrix::new(keep, dim, features.data()[..keep * dim].to_vec())?;
    let head_ids = &data.ids()[..keep];
    let scores = all_pair_scores(&head, head_ids)?;
    let curve = roc(&scores.genuine, &scores.impostor)?;
    let tars = fars.iter().map(|&f| (f, tar_at_far(&curve, f))).collect();

    let mut gallery = Vec::new();
    let mut probes = Vec::new();
    let mut ids = Vec::new();
    let mut start = 0;
    while start < keep {
        let id = head_ids[start];
        gallery.extend_from_slice(head.row(start));
        probes.extend_from_slice(head.row(start + 1));
        ids.push(id);
        start += data.count(id);
    }
    let n = ids.len();
    let distractors = Matrix::new(features.rows() - keep, dim, features.data()[keep * dim..].to_vec())?;
    let rank1 =
        rank1_identification(&Matrix::new(n, dim, probes)?, &ids, &Matrix::new(n, dim, gallery)?, &ids, &distractors)?;
    Ok(EvalReport { tars, rank1, collapsed_frac: dimension_health(&features)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Brute-force rates at an explicit threshold.
    fn rates_at(genuine: &[f64], impostor: &[f64], t: f64) -> (f64, f64) {
        let far = impostor.iter().filter(|&&s| s >= t).count() as f64 / impostor.len() as f64;
        let tar = genuine.iter().filter(|&&s| s >= t).count() as f64 / genuine.len() as f64;
        (far, tar)
    }

    fn brute_tar_at_far(genuine: &[f64], impostor: &[f64], target: f64) -> f64 {
        let mut best = 0.0f64;
        for &t in genuine.iter().chain(impostor) {
            let (far, tar) = rates_at(genuine, impostor, t);
            if far <= target {
                best = best.max(tar);
            }
        }
        best
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[0.3, -0.4], &[-0.3, 0.4]).unwrap(), -1.0);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn separated_scores_give_full_tar() {
        let c = roc(&[0.8, 0.9, 0.95], &[0.1, 0.2, 0.3]).unwrap();
        for far in [0.0, 1e-3, 0.1, 0.5, 1.0] {
            assert_eq!(tar_at_far(&c, far), 1.0);
        }
        let first = c.points()[0];
        assert_eq!((first.far, first.tar), (1.0, 1.0));
        assert!(roc(&[], &[0.1]).is_err());
        assert!(roc(&[0.1], &[]).is_err());
    }

    #[test]
    fn handcrafted_case_matches_brute_force_sweep() {
        let genuine = [0.9, 0.55, 0.4];
        let impostor = [0.6, 0.3, 0.45];
        let c = roc(&genuine, &impostor).unwrap();
        for p in c.points() {
            if p.threshold.is_finite() {
                assert_eq!(rates_at(&genuine, &impostor, p.threshold), (p.far, p.tar));
            }
        }
        for target in [0.0, 0.2, 1.0 / 3.0, 0.5, 2.0 / 3.0, 1.0] {
            assert_eq!(tar_at_far(&c, target), brute_tar_at_far(&genuine, &impostor, target));
        }
        // At FAR <= 1/3 the best threshold is 0.55 (rejects 0.45 and 0.3, accepts 0.6).
        assert!((tar_at_far(&c, 1.0 / 3.0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn chance_level_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let imp: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let c = roc(&g, &imp).unwrap();
        assert!((tar_at_far(&c, 0.1) - 0.1).abs() <= 0.05);
    }

    #[test]
    fn rank1_examples() {
        let feats = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.2]]).unwrap();
        let ids = [7, 8, 9];
        let none = Matrix::zeros(0, 2);
        assert_eq!(rank1_identification(&feats, &ids, &feats, &ids, &none).unwrap(), 1.0);

        // Distractor identical to identity 8's gallery entry ties; gallery wins.
        let dup = Matrix::from_rows(&[[0.0, 2.0]]).unwrap();
        assert_eq!(rank1_identification(&feats, &ids, &feats, &ids, &dup).unwrap(), 1.0);
        assert!(rank1_identification(&feats, &[7, 8, 10], &feats, &ids, &none).is_err());
    }

    #[test]
    fn rank1_matches_monte_carlo_simulation() {
        let (g, d, dim, noise) = (30, 60, 8, 0.6);
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
            let gallery: Vec<Vec<f64>> = (0..g).map(|_| gauss(dim)).collect();
            let probes: Vec<Vec<f64>> = gallery
                .iter()
                .map(|c| {
                    let n = gauss(dim);
                    c.iter().zip(&n).map(|(a, b)| a + noise * b).collect()
                })
                .collect();
            let distractors: Vec<Vec<f64>> = (0..d).map(|_| gauss(dim)).collect();

            // Direct simulation: a probe is right when no other candidate beats its own entry.
            let cos = |a: &[f64], b: &[f64]| diffcore::dot(a, b) / (diffcore::norm(a) * diffcore::norm(b));
            let mut hits = 0;
            for (i, p) in probes.iter().enumerate() {
                let own = cos(p, &gallery[i]);
                let beaten = gallery.iter().enumerate().any(|(k, c)| {
                    let s = cos(p, c);
                    k != i && (s > own || (s == own && k < i))
                }) || distractors.iter().any(|c| cos(p, c) > own);
                if !beaten {
                    hits += 1;
                }
            }
            let expected = hits as f64 / g as f64;
            let ids: Vec<u32> = (0..g as u32).collect();
            let acc = rank1_identification(
                &Matrix::from_rows(&probes).unwrap(),
                &ids,
                &Matrix::from_rows(&gallery).unwrap(),
                &ids,
                &Matrix::from_rows(&distractors).unwrap(),
            )
            .unwrap();
            assert!((acc - expected).abs() < 1e-12, "seed {seed}: {acc} vs {expected}");
        }
    }

    #[test]
    fn dimension_health_examples() {
        let same = Matrix::from_rows(&[[0.3, 0.4, 0.5], [0.3, 0.4, 0.5], [0.3, 0.4, 0.5]]).unwrap();
        assert_eq!(dimension_health(&same).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..200).map(|_| (0..8).map(|_| rng.sample(StandardNormal)).collect()).collect();
        assert_eq!(dimension_health(&Matrix::from_rows(&rows).unwrap()).unwrap(), 0.0);
        let half: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().enumerate().map(|(i, &v)| if i % 2 == 0 { 0.0 } else { v }).collect())
            .collect();
        assert_eq!(dimension_health(&Matrix::from_rows(&half).unwrap()).unwrap(), 0.5);
        assert!(dimension_health(&Matrix::from_rows(&[[1.0, 2.0]]).unwrap()).is_err());
    }

    #[test]
    fn evaluate_matches_brute_force_protocol() {
        use crate::diffcore::Activation;
        use crate::synthdata::{generate_universe, sample_dataset, Regime};
        let data = sample_dataset(&generate_universe(30, 8, 5).unwrap(), Regime::Deep(3));
        let net = EmbeddingNet::init(&[8, 6, 4], Activation::Tanh, 9).unwrap();
        let report = evaluate(&net, &data, &[0.01, 0.1], 5).unwrap();

        let feats = net.forward(data.samples()).unwrap();
        let ids = data.ids();
        let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                if ids[i] >= 25 || ids[j] >= 25 {
                    continue;
                }
                let s = cosine_similarity(feats.row(i), feats.row(j)).unwrap();
                if ids[i] == ids[j] {
                    genuine.push(s)
                } else {
                    impostor.push(s)
                }
            }
        }
        for (far, tar) in &report.tars {
            assert_eq!(*tar, brute_tar_at_far(&genuine, &impostor, *far));
        }
        let mut hits = 0;
        for id in 0..25usize {
            let probe = feats.row(3 * id + 1);
            let mut best = (f64::NEG_INFINITY, u32::MAX);
            for cand in (0..25).map(|g| (3 * g, g as u32)).chain((75..90).map(|r| (r, u32::MAX))) {
                let s = cosine_similarity(probe, feats.row(cand.0)).unwrap();
                if s > best.0 {
                    best = (s, cand.1);
                }
            }
            hits += (best.1 == id as u32) as usize;
        }
        assert!((report.rank1 - hits as f64 / 25.0).abs() < 1e-12);

        let wrong = EmbeddingNet::init(&[7, 4], Activation::Tanh, 0).unwrap();
        assert!(matches!(evaluate(&wrong, &data, &[0.1], 0), Err(Error::ArchitectureMismatch { .. })));
        assert!(evaluate(&net, &data, &[0.1], 29).is_err());
    }

    #[test]
    fn pair_scores_split_by_identity() {
        let feats = Matrix::from_rows(&[[1.0, 0.0], [0.8, 0.6], [0.0, 1.0], [0.6, 0.8]]).unwrap();
        let s = all_pair_scores(&feats, &[0, 0, 1, 1]).unwrap();
        assert_eq!(s.genuine.len(), 2);
        assert_eq!(s.impostor.len(), 4);
        assert!((s.genuine[0] - 0.8).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn roc_invariant_under_monotone_transform(
            g in proptest::collection::vec(-1.0f64..1.0, 1..40),
            i in proptest::collection::vec(-1.0f64..1.0, 1..40),
        ) {
            let a = roc(&g, &i).unwrap();
            let tf = |v: &[f64]| v.iter().map(|x| (3.0 * x).exp() + 2.0).collect::<Vec<_>>();
            let b = roc(&tf(&g), &tf(&i)).unwrap();
            prop_assert_eq!(a.points().len(), b.points().len());
            for (p, q) in a.points().iter().zip(b.points()) {
                prop_assert_eq!((p.far, p.tar), (q.far, q.tar));
            }
        }

        #[test]
        fn tar_at_far_is_monotone(
            g in proptest::collection::vec(-1.0f64..1.0, 1..40),
            i in proptest::collection::vec(-1.0f64..1.0, 1..40),
            f1 in 0.0f64..1.0, df in 0.0f64..1.0,
        ) {
            let c = roc(&g, &i).unwrap();
            prop_assert!(tar_at_far(&c, f1) <= tar_at_far(&c, f1 + df));
        }

        #[test]
        fn rank1_is_scale_invariant(k in 0.01f64..100.0, seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..12).map(|_| (0..4).map(|_| rng.sample(StandardNormal)).collect()).collect();
            let probes: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect()).collect();
            let scaled: Vec<Vec<f64>> = probes.iter().map(|r| r.iter().map(|v| v * k).collect()).collect();
            let ids: Vec<u32> = (0..12).collect();
            let gal = Matrix::from_rows(&rows).unwrap();
            let none = Matrix::zeros(0, 4);
            let a = rank1_identification(&Matrix::from_rows(&probes).unwrap(), &ids, &gal, &ids, &none).unwrap();
            let b = rank1_identification(&Matrix::from_rows(&scaled).unwrap(), &ids, &gal, &ids, &none).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
