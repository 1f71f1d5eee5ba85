//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 2 7`.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use os2os::eval::{bench_ranking_time, compute_metrics_at, ransac_verify, RansacConfig};
use os2os::index::{build_index, knn_matches, Index, IndexConfig, IndexKind};
use os2os::io::{
    decode_feature_set, encode_feature_set, parse_groundtruth, write_dataset, write_groundtruth, GroundTruth,
};
use os2os::pipeline::{baseline_from_matches, rank_matches, run_query, QueryOptions, RankedEntry, RankedResult};
use os2os::synth::{generate, oracle_vote_point, write_to_dir, DistractorConfig, PlantRecord, SynthConfig, SynthOutput};
use os2os::types::normalize_angle;
use os2os::verify::{
    bin_of, filter_one_to_one, group_matches_by_image, project_votes, score_cluster, verify_image, weighted_centroid,
    AblationFlags, ImageMatch, ImageMatchSet, VerifyConfig,
};
use os2os::{Dataset, Error, FeatureSet, Keypoint, MatchRecord};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

const BIN: &str = env!("CARGO_BIN_EXE_os2os");

fn main() {
    let criteria: [Criterion; 9] = [
        ("closed-form examples", c1_examples),
        ("planted-transform oracle", c2_oracle),
        ("ablation ladder trend", c3_ablation),
        ("window-size stability", c4_window_size),
        ("small-donor advantage", c5_small_donor),
        ("verification time scaling", c6_scaling),
        ("RANSAC agreement", c7_ransac),
        ("index correctness", c8_index),
        ("CLI determinism across workers", c9_determinism),
    ];
    let selected: BTreeSet<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] criterion {n}: {name} ({secs:.1}s) {detail}");
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    if t > limit {
        return Err(format!("took {t:?}, limit {limit:?}"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// shared fixtures

fn kp(x: f64, y: f64, s: f64, a: f64) -> Keypoint {
    Keypoint::new(x, y, s, a).unwrap()
}

fn image(id: &str, w: f64, h: f64, kps: Vec<Keypoint>, descs: &[Vec<f32>]) -> FeatureSet {
    let dim = descs.first().map_or(4, Vec::len);
    FeatureSet::new(id, w, h, kps, descs.concat(), dim).unwrap()
}

fn im(q: Keypoint, p: Keypoint, affinity: f64, qi: u32, pi: u32) -> ImageMatch {
    ImageMatch {
        query_feature_index: qi,
        db_feature_index: pi,
        query_keypoint: q,
        db_keypoint: p,
        affinity,
    }
}

fn mset(matches: Vec<ImageMatch>) -> ImageMatchSet {
    ImageMatchSet { db_image: 0, matches }
}

fn ranked(q: &str, ids: &[&str]) -> RankedResult {
    RankedResult {
        query_id: q.into(),
        ranked: ids
            .iter()
            .enumerate()
            .map(|(i, id)| RankedEntry {
                image_id: id.to_string(),
                score: (ids.len() - i) as f64,
                num_clusters: 1,
            })
            .collect(),
        clusters: None,
        vote_maps: None,
    }
}

fn gt_of(rows: &[(&str, &[&str])]) -> GroundTruth {
    GroundTruth::new(
        rows.iter()
            .map(|(q, r)| (q.to_string(), r.iter().map(|s| s.to_string()).collect()))
            .collect(),
        BTreeMap::new(),
    )
    .unwrap()
}

fn cli(args: &[&str]) -> (i32, String) {
    let out = Command::new(BIN).args(args).output().expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn dir_contents(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Collects failed checks instead of stopping at the first one.
#[derive(Default)]
struct Checks {
    total: usize,
    failed: Vec<String>,
}

impl Checks {
    fn check(&mut self, ok: bool, what: &str) {
        self.total += 1;
        if !ok {
            self.failed.push(what.to_string());
        }
    }

    fn close(&mut self, a: f64, b: f64, tol: f64, what: &str) {
        self.check((a - b).abs() <= tol, &format!("{what}: {a} vs {b}"));
    }

    fn finish(self) -> Outcome {
        if self.failed.is_empty() {
            Ok(format!("{} checks", self.total))
        } else {
            Err(format!("{}/{} checks failed: {}", self.failed.len(), self.total, self.failed.join("; ")))
        }
    }
}

// ---------------------------------------------------------------------------
// 1. closed-form examples

fn c1_examples() -> Outcome {
    let start = Instant::now();
    let mut c = Checks::default();
    c1_types_io(&mut c);
    c1_index(&mut c);
    c1_verify(&mut c);
    c1_pipeline_synth_eval(&mut c);
    c1_cli(&mut c);
    within(Duration::from_secs(10), start)?;
    c.finish()
}

fn c1_types_io(c: &mut Checks) {
    c.close(normalize_angle(0.0).unwrap(), 0.0, 1e-9, "angle 0");
    c.close(normalize_angle(TAU).unwrap(), 0.0, 1e-9, "angle 2pi");
    c.close(normalize_angle(-FRAC_PI_2).unwrap(), 3.0 * FRAC_PI_2, 1e-9, "angle -pi/2");

    let empty = FeatureSet::new("e", 10.0, 10.0, vec![], vec![], 4).unwrap();
    let bytes = encode_feature_set(&empty);
    c.check(bytes.len() == 28, "empty feature file is 28 bytes");
    c.check(decode_feature_set(&bytes, "e").is_ok_and(|f| f.is_empty()), "header-only file decodes empty");
    let two = image(
        "t",
        10.0,
        10.0,
        vec![kp(1.0, 2.0, 1.5, 0.5), kp(3.0, 4.0, 2.5, 1.0)],
        &[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.5]],
    );
    let bytes = encode_feature_set(&two);
    c.check(bytes.len() == 92, "two keypoints at d=4 are 92 bytes");
    c.check(decode_feature_set(&bytes, "t").is_ok_and(|f| f == two), "feature file round trip");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    c.check(matches!(decode_feature_set(&bad, "t"), Err(Error::Format(_))), "wrong magic");
    c.check(
        matches!(decode_feature_set(&bytes[..60], "t"), Err(Error::Format(_))),
        "truncated body",
    );

    let gt = parse_groundtruth("q1\nq2\tb\nq2\tb\n").unwrap();
    c.check(gt.relevant("q1").is_some_and(|r| r.is_empty()), "query with empty relevant set accepted");
    c.check(gt.relevant("q2").is_some_and(|r| r.len() == 1), "duplicate relevant lines deduplicated");
    let m = compute_metrics_at(&[ranked("q1", &["a"]), ranked("q2", &["b"])], &gt, &[25]).unwrap();
    c.check(m.evaluated_queries == 1 && m.recall_at[&25] == 1.0, "empty relevant set excluded");
    let donors = BTreeMap::from([("q".to_string(), BTreeSet::from(["x".to_string()]))]);
    let rel = BTreeMap::from([("q".to_string(), BTreeSet::from(["y".to_string()]))]);
    c.check(
        matches!(GroundTruth::new(rel, donors), Err(Error::Validation(_))),
        "donor outside relevant set rejected",
    );
}

fn line_index(vectors: &[[f32; 2]]) -> Index {
    let kps = (0..vectors.len()).map(|i| kp(i as f64, 0.0, 1.0, 0.0)).collect();
    let descs: Vec<Vec<f32>> = vectors.iter().map(|v| v.to_vec()).collect();
    let ds = Dataset::new(vec![image("db", 100.0, 10.0, kps, &descs)]).unwrap();
    build_index(&ds, &IndexConfig::default(), 1.0).unwrap()
}

fn c1_index(c: &mut Checks) {
    let ten: Vec<[f32; 2]> = (0..10).map(|i| [i as f32, 1.0]).collect();
    let idx = line_index(&ten);
    c.check(idx.images.rows() == 10, "one image with 10 features gives 10 rows");

    let descs: Vec<Vec<f32>> = (0..300).map(|i| vec![i as f32; 6]).collect();
    let kps = (0..300).map(|i| kp((i % 50) as f64, 0.0, 1.0, 0.0)).collect();
    let ds = Dataset::new(vec![image("db", 100.0, 10.0, kps, &descs)]).unwrap();
    let cfg = IndexConfig {
        kind: IndexKind::IvfPq,
        pq_subquantizers: 4,
        ivf_cells: 2,
        ..IndexConfig::default()
    };
    c.check(matches!(build_index(&ds, &cfg, 1.0), Err(Error::Config(_))), "m not dividing d");

    let idx = line_index(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]);
    let q = image("q", 10.0, 10.0, vec![kp(0.0, 0.0, 1.0, 0.0)], &[vec![0.0, 0.0]]);
    let m = knn_matches(&q, &idx, &IndexConfig { k_neighbors: 4, reference_rank: 2, ..IndexConfig::default() }).unwrap();
    c.check(m[0].l2_distance == 0.0, "identical vector at distance 0");
    c.close(m[0].affinity, m[1].l2_distance, 1e-9, "rank-1 affinity equals rank-2 distance");
    c.close(m[1].affinity, 0.0, 1e-9, "rank-phi affinity is 0");

    let idx = line_index(&[[1.0, 0.0], [2.0, 0.0], [5.0, 0.0]]);
    let m = knn_matches(&q, &idx, &IndexConfig { k_neighbors: 3, reference_rank: 2, ..IndexConfig::default() }).unwrap();
    let aff: Vec<f64> = m.iter().map(|r| r.affinity).collect();
    c.check(aff.len() == 3, "three matches");
    for (a, e) in aff.iter().zip([1.0, 0.0, 0.0]) {
        c.close(*a, e, 1e-9, "affinities {1, 0, 0}");
    }
}

fn c1_verify(c: &mut Checks) {
    // grouping
    let descs: Vec<Vec<f32>> = (0..2).map(|i| vec![i as f32, 0.0]).collect();
    let kps = || vec![kp(1.0, 1.0, 1.0, 0.0), kp(2.0, 2.0, 1.0, 0.0)];
    let ds = Dataset::new(vec![
        image("a", 10.0, 10.0, kps(), &descs),
        image("b", 10.0, 10.0, kps(), &descs),
        image("c", 10.0, 10.0, kps(), &descs),
    ])
    .unwrap();
    let idx = build_index(&ds, &IndexConfig::default(), 1.0).unwrap();
    let q = image("q", 10.0, 10.0, kps(), &descs);
    let rec = |img: u32, qi: u32, pi: u32| MatchRecord {
        query_feature_index: qi,
        db_image: img,
        db_feature_index: pi,
        rank: 1,
        affinity: 1.0,
        l2_distance: 0.0,
    };
    let three = group_matches_by_image(&[rec(0, 0, 0), rec(1, 0, 0), rec(2, 1, 1)], &q, &idx.images).unwrap();
    c.check(three.len() == 3, "matches to 3 images give 3 sets");
    c.check(group_matches_by_image(&[], &q, &idx.images).unwrap().is_empty(), "no matches, no sets");
    let same = group_matches_by_image(&[rec(1, 0, 0), rec(1, 0, 1)], &q, &idx.images).unwrap();
    c.check(same.len() == 1 && same[0].matches.len() == 2, "same query feature twice into one image");

    // centroid
    let at = |x: f64, y: f64| kp(x, y, 1.0, 0.0);
    let cen = weighted_centroid(&mset(vec![im(at(0.0, 0.0), at(0.0, 0.0), 2.0, 0, 0), im(at(10.0, 10.0), at(10.0, 10.0), 2.0, 1, 1)]));
    c.close(cen[0], 5.0, 1e-9, "equal-weight centroid x");
    c.close(cen[1], 5.0, 1e-9, "equal-weight centroid y");
    let cen = weighted_centroid(&mset(vec![im(at(0.0, 0.0), at(0.0, 0.0), 3.0, 0, 0), im(at(10.0, 10.0), at(10.0, 10.0), 1.0, 1, 1)]));
    c.close(cen[0], 2.5, 1e-9, "weighted centroid x");
    c.close(cen[1], 2.5, 1e-9, "weighted centroid y");
    let cen = weighted_centroid(&mset(vec![im(at(2.0, 0.0), at(2.0, 0.0), 0.0, 0, 0), im(at(4.0, 0.0), at(4.0, 0.0), 0.0, 1, 1)]));
    c.close(cen[0], 3.0, 1e-9, "zero-affinity fallback x");
    c.close(cen[1], 0.0, 1e-9, "zero-affinity fallback y");

    // identical images: every vote lands on c
    let pts: Vec<Keypoint> = (0..6).map(|i| kp(10.0 + 7.0 * i as f64, 20.0 + 3.0 * i as f64, 1.0 + i as f64, 0.3 * i as f64)).collect();
    let dup = mset(pts.iter().enumerate().map(|(i, &p)| im(p, p, 1.0 + i as f64, i as u32, i as u32)).collect());
    let cdup = weighted_centroid(&dup);
    let vs = project_votes(&dup, cdup, [100.0, 100.0], &VerifyConfig::default());
    for v in &vs.votes {
        c.check(
            (v.position[0] - cdup[0]).abs() <= 1e-6 && (v.position[1] - cdup[1]).abs() <= 1e-6,
            "duplicate votes coincide at the centroid",
        );
    }

    let one = mset(vec![im(at(0.0, 0.0), at(100.0, 100.0), 1.0, 0, 0)]);
    let vs = project_votes(&one, [10.0, 0.0], [1000.0, 1000.0], &VerifyConfig::default());
    c.close(vs.votes[0].position[0], 110.0, 1e-6, "translation vote x");
    c.close(vs.votes[0].position[1], 100.0, 1e-6, "translation vote y");

    let eps0 = VerifyConfig { epsilon: 1e-12, ..VerifyConfig::default() };
    c.close(os2os::verify::window_size(1000.0, 500.0, &eps0), 100.0, 1e-9, "ws with epsilon 0");
    c.check(bin_of([105.0, 17.0], 10.0) == (11, 2), "bin (11, 2)");

    let k = at(1.0, 1.0);
    let shared = mset(vec![im(k, k, 2.0, 0, 0), im(k, k, 1.0, 0, 1)]);
    c.check(filter_one_to_one(&[0, 1], &shared) == vec![0], "greedy keeps the stronger of two");
    let disjoint = mset(vec![im(k, k, 1.0, 0, 0), im(k, k, 2.0, 1, 1), im(k, k, 3.0, 2, 2)]);
    c.check(filter_one_to_one(&[0, 1, 2], &disjoint) == vec![0, 1, 2], "disjoint matches all kept");

    let eight = mset((0..8).map(|i| {
        let p = kp(40.0 + i as f64, 30.0, 2.0, 1.0);
        im(p, p, 1.0, i, i)
    }).collect());
    let vs = project_votes(&eight, weighted_centroid(&eight), [200.0, 200.0], &VerifyConfig::default());
    let all: Vec<usize> = (0..8).collect();
    let cl = score_cluster(&all, &vs, &VerifyConfig::default());
    c.close(cl.centrality_score, 1.0 / (2.0 * PI).sqrt(), 1e-9, "CS = pdf(0)");
    c.close(cl.angle_score, 1.0, 1e-9, "AS = 1");
    c.close(cl.os2os_score, 8f64.ln() / (2.0 * PI).sqrt(), 1e-9, "score = pdf(0) ln 8");
    c.close(score_cluster(&[3], &vs, &VerifyConfig::default()).os2os_score, 0.0, 0.0, "|O| = 1 scores 0");

    let v = verify_image(&one, [10.0, 10.0], [200.0, 200.0], &VerifyConfig::default(), &AblationFlags::FULL, false);
    c.check(v.score == 0.0, "single match image scores 0");

    let clean = verify_image(&eight, [200.0, 200.0], [200.0, 200.0], &VerifyConfig::default(), &AblationFlags::FULL, false);
    let mut noisy = eight.clone();
    noisy.matches.push(im(at(1.0, 1.0), kp(190.0, 190.0, 1.0, 2.0), 0.5, 8, 8));
    let noisy = verify_image(&noisy, [200.0, 200.0], [200.0, 200.0], &VerifyConfig::default(), &AblationFlags::FULL, false);
    c.close(noisy.score, clean.score, 1e-9, "isolated spurious vote does not change the main cluster");
}

fn tiny_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        num_db_images: 12,
        num_queries: 3,
        features_per_image: 60,
        donor_object_size: [10, 15],
        descriptor_dim: 16,
        canvas_width: [200.0, 300.0],
        canvas_height: [160.0, 240.0],
        ..SynthConfig::default()
    }
}

fn c1_pipeline_synth_eval(c: &mut Checks) {
    // exact copy ranks first
    let out = generate(&tiny_synth(5)).unwrap();
    let q = out.queries.images()[0].clone();
    let mut db: Vec<FeatureSet> = out.database.images().to_vec();
    let mut copy = q.clone();
    copy.image_id = "zz-copy".into();
    db.push(copy);
    let db = Dataset::new(db).unwrap();
    let cfg = IndexConfig::default();
    let idx = build_index(&db, &cfg, 1.0).unwrap();
    let r = run_query(&q.image_id, &out.queries, &idx, &cfg, &VerifyConfig::default(), &AblationFlags::FULL, &QueryOptions::default()).unwrap();
    c.check(r.ranked.first().is_some_and(|e| e.image_id == "zz-copy"), "exact copy ranked first");
    let r = run_query(&q.image_id, &out.queries, &idx, &cfg, &VerifyConfig::default(), &AblationFlags::FULL, &QueryOptions::top(0)).unwrap();
    c.check(r.ranked.is_empty(), "top_n 0 gives an empty list");

    // feature-only baseline
    let only = MatchRecord { query_feature_index: 0, db_image: 2, db_feature_index: 0, rank: 1, affinity: 0.75, l2_distance: 0.1 };
    let more = MatchRecord { query_feature_index: 1, affinity: 0.5, db_feature_index: 1, ..only };
    let r = baseline_from_matches("q", &[only, more], &idx.images, 10);
    c.check(r.ranked.len() == 1 && r.ranked[0].image_id == idx.images.ids[2], "single image holding all matches first");
    c.close(r.ranked[0].score, 1.25, 1e-9, "baseline score is the affinity sum");
    let r = baseline_from_matches("q", &[MatchRecord { db_image: 5, ..only }, MatchRecord { db_image: 3, ..only }], &idx.images, 10);
    c.check(r.ranked[0].image_id == idx.images.ids[3], "baseline tie broken by image id");

    // zero-noise plants are exact nearest neighbors
    let zero = SynthConfig { descriptor_noise_sigma: 0.0, geometry_noise_sigma: 0.0, ..tiny_synth(9) };
    let out = generate(&zero).unwrap();
    let idx = build_index(&out.database, &cfg, 1.0).unwrap();
    for p in &out.plants {
        let q = out.queries.get(&p.query_id).unwrap();
        let matches = knn_matches(q, &idx, &cfg).unwrap();
        let donor = idx.images.position(&p.donor_image_id).unwrap() as u32;
        for (&qi, &di) in p.planted_query_indices.iter().zip(&p.planted_donor_indices) {
            let best = matches.iter().find(|m| m.query_feature_index == qi && m.rank == 1).unwrap();
            c.check(
                best.db_image == donor && best.db_feature_index == di && best.l2_distance == 0.0,
                "planted pair is the exact nearest neighbor",
            );
        }
    }

    // same seed, same bytes
    let t1 = tempfile::tempdir().unwrap();
    let t2 = tempfile::tempdir().unwrap();
    write_to_dir(&generate(&tiny_synth(4)).unwrap(), t1.path()).unwrap();
    write_to_dir(&generate(&tiny_synth(4)).unwrap(), t2.path()).unwrap();
    c.check(dir_contents(t1.path()) == dir_contents(t2.path()), "seeded synth output is byte-identical");

    // oracle point
    let plant = |rotation: f64, scale: f64, translation: [f64; 2]| PlantRecord {
        query_id: "q".into(),
        donor_image_id: "d".into(),
        rotation,
        scale,
        translation,
        planted_query_indices: vec![],
        planted_donor_indices: vec![],
        outlier_query_indices: vec![],
        outlier_donor_indices: vec![],
        query_object_center: [0.0, 0.0],
        query_object_radius: 0.0,
        geometry_noise_sigma: 0.0,
        angle_noise_sigma: 0.0,
        scale_noise_sigma: 0.0,
    };
    let o = oracle_vote_point(&plant(0.0, 1.0, [0.0, 0.0]), [10.0, 20.0]);
    c.check(o.point == [10.0, 20.0] && o.error_radius == 0.0, "identity oracle point");
    let o = oracle_vote_point(&plant(0.0, 1.0, [50.0, 0.0]), [10.0, 20.0]);
    c.check(o.point == [60.0, 20.0], "translated oracle point");

    // metrics
    let g = gt_of(&[("q", &["a"])]);
    let m = compute_metrics_at(&[ranked("q", &["a", "x"])], &g, &[25]).unwrap();
    c.check(m.map == 1.0 && m.recall_at[&25] == 1.0, "rank-1 hit gives MAP 1 and recall 1");
    let m = compute_metrics_at(&[ranked("q", &["x", "y"])], &g, &[25, 50, 100, 200]).unwrap();
    c.check(m.map == 0.0 && m.recall_at.values().all(|&r| r == 0.0), "never retrieved gives 0");
    let g2 = gt_of(&[("q", &["a", "c"])]);
    let m = compute_metrics_at(&[ranked("q", &["a", "b", "c"])], &g2, &[25]).unwrap();
    c.close(m.map, 5.0 / 6.0, 1e-9, "AP of hits at ranks 1 and 3");

    // RANSAC on exact duplicates
    let r = ransac_verify(&dup_set(), &RansacConfig::default());
    c.check(r.inlier_count == dup_set().matches.len(), "duplicate correspondences are all inliers");

    // bench at K = 0
    let q = out.queries.images()[0].clone();
    let report = bench_ranking_time(&[&q], &idx, &[0], 1, &VerifyConfig::default()).unwrap();
    c.check(report.rows.len() == 1 && report.rows[0].matches == 0.0, "K = 0 processes no matches");
}

fn dup_set() -> ImageMatchSet {
    mset((0..12).map(|i| {
        let p = kp(5.0 + 9.0 * i as f64, 3.0 + (i * i) as f64, 1.0, 0.0);
        im(p, p, 1.0, i, i)
    }).collect())
}

fn c1_cli(c: &mut Checks) {
    let t = tempfile::tempdir().unwrap();
    let d = |s: &str| t.path().join(s).display().to_string();

    // a toy database holding an exact duplicate of the query
    let out = generate(&tiny_synth(8)).unwrap();
    let q = out.queries.images()[0].clone();
    let mut db: Vec<FeatureSet> = out.database.images().to_vec();
    let mut copy = q.clone();
    copy.image_id = "dup".into();
    db.push(copy);
    write_dataset(&Dataset::new(db).unwrap(), t.path().join("db"), t.path().join("db.tsv")).unwrap();
    write_dataset(&Dataset::new(vec![q]).unwrap(), t.path().join("q"), t.path().join("q.tsv")).unwrap();

    let (code, _) = cli(&["index", "--manifest", &d("db.tsv"), "--out", &d("idx.bin")]);
    c.check(code == 0 && t.path().join("idx.bin").exists(), "index exits 0 and writes the file");
    let (code, _) = cli(&["index", "--manifest", &d("missing.tsv"), "--out", &d("x.bin")]);
    c.check(code == 3, "missing manifest exits 3");
    let (code, _) = cli(&["index", "--manifest", &d("db.tsv"), "--out", &d("x.bin"), "--kind", "ivf-pq", "--pq-m", "5"]);
    c.check(code == 2, "pq-m not dividing d exits 2");

    let (code, _) = cli(&["query", "--index", &d("idx.bin"), "--queries", &d("q.tsv"), "--out", &d("r.tsv"), "--top-n", "5", "--vote-maps", &d("maps")]);
    let res = fs::read_to_string(t.path().join("r.tsv")).unwrap_or_default();
    c.check(code == 0 && res.lines().next().is_some_and(|l| l.split('\t').nth(2) == Some("dup")), "duplicate at rank 1");
    let pgms = fs::read_dir(t.path().join("maps")).map(|r| r.count()).unwrap_or(0);
    c.check(pgms == res.lines().count() && pgms > 0, "one vote map per ranked image");

    let (code, _) = cli(&["query", "--index", &d("idx.bin"), "--queries", &d("q.tsv"), "--out", &d("h.tsv"), "--ablate", "pure-hough", "--diagnostics", &d("h.jsonl")]);
    let diag = fs::read_to_string(t.path().join("h.jsonl")).unwrap_or_default();
    let integer_scores = diag.lines().all(|l| {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        let s = v["score"].as_f64().unwrap();
        s.fract() == 0.0 && s == v["votes"].as_f64().unwrap()
    });
    c.check(code == 0 && !diag.is_empty() && integer_scores, "pure Hough diagnostics carry integer bin counts");

    let (c1, _) = cli(&["synth", "--out", &d("s1"), "--seed", "3"]);
    let (c2, _) = cli(&["synth", "--out", &d("s2"), "--seed", "3"]);
    c.check(
        c1 == 0 && c2 == 0 && dir_contents(&t.path().join("s1")) == dir_contents(&t.path().join("s2")),
        "synth twice with one seed gives identical trees",
    );

    fs::write(t.path().join("ap.tsv"), "q\t1\ta\t3\t1\nq\t2\tb\t2\t1\nq\t3\tc\t1\t1\n").unwrap();
    write_groundtruth(&gt_of(&[("q", &["a", "c"])]), t.path().join("ap_gt.tsv")).unwrap();
    let (code, _) = cli(&["eval", "--results", &d("ap.tsv"), "--groundtruth", &d("ap_gt.tsv"), "--out", &d("ap.json")]);
    let map = fs::read_to_string(t.path().join("ap.json"))
        .ok()
        .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
        .and_then(|v| v["map"].as_f64())
        .unwrap_or(-1.0);
    c.check(code == 0 && (map - 0.8333).abs() < 1e-4 && (map - 5.0 / 6.0).abs() < 1e-6, "cli eval MAP 5/6");

    let (code, _) = cli(&["bench", "--index", &d("idx.bin"), "--queries", &d("q.tsv"), "--ks", "2,4,8", "--out", &d("b.csv")]);
    let csv = fs::read_to_string(t.path().join("b.csv")).unwrap_or_default();
    c.check(code == 0 && csv.lines().count() == 4, "bench CSV has one row per K");
}

// ---------------------------------------------------------------------------
// 2. planted-transform oracle

fn single_plant(seed: u64, noisy: bool) -> SynthConfig {
    SynthConfig {
        seed,
        num_db_images: if noisy { 100 } else { 10 },
        num_queries: 1,
        features_per_image: 200,
        donors_per_query: [1, 1],
        donor_object_size: [15, 30],
        with_host: false,
        descriptor_noise_sigma: if noisy { 0.02 } else { 0.0 },
        geometry_noise_sigma: if noisy { 2.0 } else { 0.0 },
        outlier_fraction: if noisy { 0.3 } else { 0.0 },
        ..SynthConfig::default()
    }
}

fn donor_set(out: &SynthOutput, idx: &Index, cfg: &IndexConfig) -> (ImageMatchSet, PlantRecord, FeatureSet) {
    let plant = out.plants[0].clone();
    let q = out.queries.get(&plant.query_id).unwrap().clone();
    let matches = knn_matches(&q, idx, cfg).unwrap();
    let donor = idx.images.position(&plant.donor_image_id).unwrap() as u32;
    let set = group_matches_by_image(&matches, &q, &idx.images)
        .unwrap()
        .into_iter()
        .find(|s| s.db_image == donor)
        .expect("donor receives matches");
    (set, plant, q)
}

fn c2_oracle() -> Outcome {
    let start = Instant::now();
    let seeds = 200;
    let cfg = IndexConfig::default();
    let (mut votes, mut exact, mut one_bin, mut plants) = (0usize, 0usize, 0usize, 0usize);
    let (mut rot_lo, mut rot_hi, mut sc_lo, mut sc_hi) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for seed in 0..seeds {
        let out = generate(&single_plant(seed, false)).map_err(|e| e.to_string())?;
        let idx = build_index(&out.database, &cfg, 1.0).unwrap();
        let (set, plant, _) = donor_set(&out, &idx, &cfg);
        rot_lo = rot_lo.min(plant.rotation);
        rot_hi = rot_hi.max(plant.rotation);
        sc_lo = sc_lo.min(plant.scale);
        sc_hi = sc_hi.max(plant.scale);
        let c = weighted_centroid(&set);
        let db_size = idx.images.sizes[set.db_image as usize];
        let vs = project_votes(&set, c, db_size, &VerifyConfig::default());
        let oracle = oracle_vote_point(&plant, c);
        let mut bins = BTreeSet::new();
        for (&qi, &di) in plant.planted_query_indices.iter().zip(&plant.planted_donor_indices) {
            let Some(k) = set.matches.iter().position(|m| m.query_feature_index == qi && m.db_feature_index == di) else {
                continue;
            };
            votes += 1;
            let v = vs.votes[k].position;
            if (v[0] - oracle.point[0]).hypot(v[1] - oracle.point[1]) <= 1e-6 {
                exact += 1;
            }
            bins.insert(bin_of(v, vs.window_size));
        }
        plants += 1;
        if bins.len() == 1 {
            one_bin += 1;
        }
    }
    if exact != votes || one_bin != plants {
        return Err(format!("zero noise: {exact}/{votes} votes at the oracle point, {one_bin}/{plants} plants in one bin"));
    }

    let mut top1 = 0;
    for seed in 0..seeds {
        let out = generate(&single_plant(1000 + seed, true)).map_err(|e| e.to_string())?;
        let idx = build_index(&out.database, &cfg, 1.0).unwrap();
        let plant = &out.plants[0];
        let r = run_query(&plant.query_id, &out.queries, &idx, &cfg, &VerifyConfig::default(), &AblationFlags::FULL, &QueryOptions::top(1)).unwrap();
        if r.ranked.first().is_some_and(|e| e.image_id == plant.donor_image_id) {
            top1 += 1;
        }
    }
    let rate = top1 as f64 / seeds as f64;
    within(Duration::from_secs(120), start)?;
    let detail = format!(
        "zero noise: {exact}/{votes} votes exact, {one_bin}/{plants} single-bin (rotation {rot_lo:.2}..{rot_hi:.2}, scale {sc_lo:.2}..{sc_hi:.2}); noisy top-1 {:.1}%",
        100.0 * rate
    );
    if rate >= 0.95 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// 3 and 4. composite benchmark

fn composite_benchmark() -> SynthConfig {
    SynthConfig {
        seed: 1,
        num_db_images: 500,
        num_queries: 50,
        features_per_image: 300,
        donor_object_size: [15, 30],
        donors_per_query: [1, 2],
        with_host: true,
        geometry_noise_sigma: 1.5,
        angle_noise_sigma: 0.05,
        scale_noise_sigma: 0.05,
        distractors: DistractorConfig {
            scrambled_images: 4,
            burst_images: 8,
            clutter_images: 8,
            ..DistractorConfig::default()
        },
        ..SynthConfig::default()
    }
}

struct Bench {
    out: SynthOutput,
    index: Index,
    matches: Vec<Vec<MatchRecord>>,
}

impl Bench {
    fn new(cfg: &SynthConfig) -> Bench {
        let out = generate(cfg).unwrap();
        let index = build_index(&out.database, &IndexConfig::default(), 1.0).unwrap();
        let matches = out
            .queries
            .images()
            .iter()
            .map(|q| knn_matches(q, &index, &IndexConfig::default()).unwrap())
            .collect();
        Bench { out, index, matches }
    }

    fn rank(&self, vc: &VerifyConfig, flags: &AblationFlags) -> Vec<RankedResult> {
        self.out
            .queries
            .images()
            .iter()
            .zip(&self.matches)
            .map(|(q, m)| rank_matches(q, m, &self.index.images, vc, flags, &QueryOptions::top(200)).unwrap())
            .collect()
    }

    fn baseline(&self) -> Vec<RankedResult> {
        self.out
            .queries
            .images()
            .iter()
            .zip(&self.matches)
            .map(|(q, m)| baseline_from_matches(&q.image_id, m, &self.index.images, 200))
            .collect()
    }

    fn recall(&self, results: &[RankedResult], k: usize) -> f64 {
        compute_metrics_at(results, &self.out.groundtruth, &[k]).unwrap().recall_at[&k]
    }

    fn donor_recall(&self, results: &[RankedResult], k: usize) -> f64 {
        compute_metrics_at(results, &self.out.groundtruth, &[k]).unwrap().donor_recall_at.unwrap()[&k]
    }
}

thread_local! {
    static COMPOSITE: std::cell::OnceCell<Bench> = const { std::cell::OnceCell::new() };
}

fn with_composite<T>(f: impl FnOnce(&Bench) -> T) -> T {
    COMPOSITE.with(|c| f(c.get_or_init(|| Bench::new(&composite_benchmark()))))
}

fn c3_ablation() -> Outcome {
    with_composite(|b| {
        let vc = VerifyConfig::default();
        let recalls: Vec<(&str, f64)> = AblationFlags::ladder()
            .into_iter()
            .map(|(name, flags)| (name, b.recall(&b.rank(&vc, &flags), 10)))
            .collect();
        let text: Vec<String> = recalls.iter().map(|(n, r)| format!("{n} {:.1}", 100.0 * r)).collect();
        let detail = format!("recall@10: {}", text.join(" -> "));
        let monotone = recalls.windows(2).all(|w| w[1].1 >= w[0].1);
        let gain = recalls[4].1 - recalls[0].1;
        if monotone && gain >= 0.03 {
            Ok(detail)
        } else {
            Err(format!("{detail} (monotone {monotone}, gain {:.1} points)", 100.0 * gain))
        }
    })
}

fn c4_window_size() -> Outcome {
    with_composite(|b| {
        let recalls: Vec<(f64, f64)> = [5.0, 10.0, 20.0]
            .into_iter()
            .map(|bs| {
                let vc = VerifyConfig { bin_scale: bs, ..VerifyConfig::default() };
                (bs, b.recall(&b.rank(&vc, &AblationFlags::FULL), 10))
            })
            .collect();
        let lo = recalls.iter().map(|r| r.1).fold(f64::MAX, f64::min);
        let hi = recalls.iter().map(|r| r.1).fold(f64::MIN, f64::max);
        let text: Vec<String> = recalls.iter().map(|(bs, r)| format!("b={bs} {:.1}", 100.0 * r)).collect();
        let detail = format!("recall@10: {}; spread {:.1} points", text.join(", "), 100.0 * (hi - lo));
        if hi - lo <= 0.05 {
            Ok(detail)
        } else {
            Err(detail)
        }
    })
}

// ---------------------------------------------------------------------------
// 5. small donors against the feature-only baseline

fn c5_small_donor() -> Outcome {
    let cfg = SynthConfig {
        seed: 2,
        num_db_images: 500,
        num_queries: 50,
        features_per_image: 300,
        donor_object_size: [10, 20],
        donors_per_query: [1, 2],
        with_host: true,
        geometry_noise_sigma: 1.5,
        angle_noise_sigma: 0.05,
        scale_noise_sigma: 0.05,
        distractors: DistractorConfig {
            scrambled_images: 50,
            scrambled_features: [30, 40],
            ..DistractorConfig::default()
        },
        ..SynthConfig::default()
    };
    let b = Bench::new(&cfg);
    let worst = b
        .out
        .plants
        .iter()
        .map(|p| p.planted_query_indices.len() as f64 / b.out.queries.get(&p.query_id).unwrap().len() as f64)
        .fold(0.0, f64::max);
    if worst > 0.10 {
        return Err(format!("benchmark precondition broken: a donor holds {:.1}% of its query", 100.0 * worst));
    }
    let ours = b.donor_recall(&b.rank(&VerifyConfig::default(), &AblationFlags::FULL), 50);
    let base = b.donor_recall(&b.baseline(), 50);
    let detail = format!(
        "donor recall@50 {:.1} vs feature-only {:.1} (largest donor share {:.1}%)",
        100.0 * ours,
        100.0 * base,
        100.0 * worst
    );
    if ours - base >= 0.10 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// 6. verification time against K

fn c6_scaling() -> Outcome {
    let cfg = SynthConfig {
        seed: 6,
        num_db_images: 8,
        num_queries: 10,
        features_per_image: 5400,
        canvas_width: [1600.0, 2000.0],
        canvas_height: [1200.0, 1500.0],
        donor_object_size: [50, 100],
        donors_per_query: [1, 2],
        with_host: true,
        geometry_noise_sigma: 1.0,
        ..SynthConfig::default()
    };
    let out = generate(&cfg).map_err(|e| e.to_string())?;
    let idx = build_index(&out.database, &IndexConfig::default(), 1.0).unwrap();
    // Occlusion leaves each query with a slightly different count; trim all
    // of them to exactly 5000 features.
    let mut trimmed = Vec::new();
    for q in out.queries.images() {
        if q.len() < 5000 {
            return Err(format!("query {} has only {} features", q.image_id, q.len()));
        }
        let descs = (0..5000).flat_map(|i| q.descriptor(i).to_vec()).collect();
        let kps = q.keypoints[..5000].to_vec();
        trimmed.push(FeatureSet::new(q.image_id.clone(), q.width, q.height, kps, descs, q.dim()).unwrap());
    }
    let qs: Vec<&FeatureSet> = trimmed.iter().collect();
    let report = bench_ranking_time(&qs, &idx, &[25, 50, 100, 200, 400], 1, &VerifyConfig::default()).unwrap();
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("K={} {:.0}k matches {:.1}ms", r.k, r.matches / 1e3, 1e3 * r.seconds))
        .collect();
    let ratio = report.rows[4].seconds / report.rows[2].seconds;
    let detail = format!("slope {:.3}, t400/t100 {ratio:.2}; {}", report.log_log_slope, rows.join(", "));
    if (0.8..=1.3).contains(&report.log_log_slope) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// 7. agreement with RANSAC

fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

fn c7_ransac() -> Outcome {
    let cfg = IndexConfig::default();
    let seeds = 100;
    let mut agree = 0;
    let mut worst = 1.0f64;
    for seed in 0..seeds {
        let synth = SynthConfig {
            seed: 7000 + seed,
            num_db_images: 100,
            num_queries: 1,
            features_per_image: 200,
            donors_per_query: [1, 1],
            donor_object_size: [15, 30],
            with_host: false,
            geometry_noise_sigma: 0.5,
            angle_noise_sigma: 0.005,
            scale_noise_sigma: 0.005,
            outlier_fraction: 0.3,
            ..SynthConfig::default()
        };
        let out = generate(&synth).map_err(|e| e.to_string())?;
        let idx = build_index(&out.database, &cfg, 1.0).unwrap();
        let (set, _, q) = donor_set(&out, &idx, &cfg);
        let db_size = idx.images.sizes[set.db_image as usize];
        let v = verify_image(&set, [q.width, q.height], db_size, &VerifyConfig::default(), &AblationFlags::FULL, false);
        let ours: BTreeSet<usize> = v.clusters.first().map(|c| c.member_matches.iter().copied().collect()).unwrap_or_default();
        let theirs: BTreeSet<usize> = ransac_verify(&set, &RansacConfig { seed, ..RansacConfig::default() }).inliers.into_iter().collect();
        let j = jaccard(&ours, &theirs);
        worst = worst.min(j);
        if j >= 0.8 {
            agree += 1;
        }
    }
    let rate = agree as f64 / seeds as f64;
    let detail = format!("Jaccard >= 0.8 in {:.0}% of plants (worst {worst:.2})", 100.0 * rate);
    if rate >= 0.9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// 8. index correctness

fn brute_force(data: &[Vec<f32>], q: &[f32], k: usize) -> Vec<u32> {
    let mut d: Vec<(f64, u32)> = data
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let s: f64 = v.iter().zip(q).map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2)).sum();
            (s, i as u32)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, i)| i).collect()
}

fn c8_index() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dim = 32;
    let data: Vec<Vec<f32>> = (0..1000).map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
    let images: Vec<FeatureSet> = data
        .chunks(100)
        .enumerate()
        .map(|(i, rows)| {
            let kps = (0..rows.len()).map(|j| kp(j as f64, 0.0, 1.0, 0.0)).collect();
            image(&format!("img{i:02}"), 200.0, 10.0, kps, rows)
        })
        .collect();
    let ds = Dataset::new(images).unwrap();
    let flat = build_index(&ds, &IndexConfig::default(), 1.0).unwrap();
    let mut mismatched = 0;
    let trials = 100;
    for _ in 0..trials {
        let q: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let ours: Vec<u32> = flat.search(&q, 20, 1).into_iter().map(|(r, _)| r).collect();
        if ours != brute_force(&data, &q, 20) {
            mismatched += 1;
        }
    }
    if mismatched > 0 {
        return Err(format!("flat order differs from brute force on {mismatched}/{trials} queries"));
    }

    let out = generate(&SynthConfig { seed: 88, num_db_images: 100, num_queries: 5, ..SynthConfig::default() }).unwrap();
    let exact = build_index(&out.database, &IndexConfig::default(), 1.0).unwrap();
    // Eight-byte codes on 32-d descriptors quantize too coarsely for the
    // floor; sixteen sub-quantizers of two dimensions each clear it.
    let ivf_cfg = IndexConfig { kind: IndexKind::IvfPq, pq_subquantizers: 16, ..IndexConfig::default() };
    let ivf = build_index(&out.database, &ivf_cfg, 0.5).unwrap();
    let all_cells = ivf_cfg.ivf_cells;
    let (mut found, mut total) = (0usize, 0usize);
    for q in out.queries.images() {
        for i in 0..q.len() {
            let truth: BTreeSet<u32> = exact.search(q.descriptor(i), 20, 1).into_iter().map(|(r, _)| r).collect();
            let approx: BTreeSet<u32> = ivf.search(q.descriptor(i), 20, all_cells).into_iter().map(|(r, _)| r).collect();
            found += truth.intersection(&approx).count();
            total += truth.len();
        }
    }
    let bypass_cfg = IndexConfig { bypass_pq: true, ..ivf_cfg.clone() };
    let bypass = build_index(&out.database, &bypass_cfg, 0.5).unwrap();
    let mut reordered = 0;
    for q in out.queries.images() {
        for i in 0..q.len() {
            let truth: Vec<u32> = exact.search(q.descriptor(i), 20, 1).into_iter().map(|(r, _)| r).collect();
            let raw: Vec<u32> = bypass.search(q.descriptor(i), 20, all_cells).into_iter().map(|(r, _)| r).collect();
            if truth != raw {
                reordered += 1;
            }
        }
    }
    if reordered > 0 {
        return Err(format!("IVF without PQ reorders {reordered} queries relative to flat"));
    }
    let recall = found as f64 / total as f64;
    let detail = format!(
        "flat matches brute force on {trials}/{trials} queries; IVF without PQ matches flat order; IVF-PQ (m={}, nprobe=all) recall@20 {:.1}%",
        ivf_cfg.pq_subquantizers,
        100.0 * recall
    );
    if recall >= 0.70 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// 9. byte-identical results for any worker count

fn c9_determinism() -> Outcome {
    let t = tempfile::tempdir().unwrap();
    let d = |s: &str| t.path().join(s).display().to_string();
    let run = |args: &[&str]| -> Result<(), String> {
        let (code, err) = cli(args);
        if code == 0 {
            Ok(())
        } else {
            Err(format!("{args:?} exited {code}: {err}"))
        }
    };
    run(&["synth", "--out", &d("data"), "--seed", "9"])?;
    run(&["index", "--manifest", &d("data/db_manifest.tsv"), "--out", &d("flat.bin"), "--seed", "9"])?;
    run(&["index", "--manifest", &d("data/db_manifest.tsv"), "--out", &d("ivf.bin"), "--kind", "ivf-pq", "--ivf-cells", "16", "--seed", "9"])?;
    let mut checked = 0;
    for index in ["flat", "ivf"] {
        let mut outputs = Vec::new();
        for workers in ["1", "4", "8"] {
            let out = d(&format!("{index}_{workers}/results.tsv"));
            fs::create_dir_all(t.path().join(format!("{index}_{workers}"))).unwrap();
            run(&[
                "query", "--index", &d(&format!("{index}.bin")), "--queries", &d("data/query_manifest.tsv"),
                "--out", &out, "--workers", workers, "--diagnostics", &d(&format!("{index}_{workers}/diag.jsonl")),
            ])?;
            outputs.push((
                fs::read(&out).unwrap(),
                fs::read(t.path().join(format!("{index}_{workers}/diag.jsonl"))).unwrap(),
            ));
        }
        if outputs.iter().any(|o| o != &outputs[0]) || outputs[0].0.is_empty() {
            return Err(format!("{index} results differ across worker counts"));
        }
        checked += 1;
    }
    Ok(format!("{checked} index kinds x workers {{1, 4, 8}} byte-identical"))
}
