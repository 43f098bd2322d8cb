//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines always print.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxmem_bench::{evaluate, load_dataset, MemoryPipeline, Method, PipelineOptions, QueryKind};
use voxmem_core::navigation::{
    plan_astar, similarity_value_map, step_cost, temporal_value_map, value_of, Cell, CellState, ExplorationParams,
    GridGeometry, NavError, ObstacleMap2D, PlannerConfig,
};
use voxmem_core::persist::{load_map, save_map};
use voxmem_core::query::{mllm_query, LabelOracleMllm, MllmAnswer, MllmClient, MllmError, MllmRequest};
use voxmem_core::voxel::PointObservation;
use voxmem_core::{
    CameraIntrinsics, DepthImage, Feature, FrameStore, LabelImage, LabelTable, MemoryConfig, PatchEmbedder, Pose,
    PosedFrame, QueryConfig, QueryContext, StubConfig, StubDetector, StubLabelEmbedder, VoxelKey, VoxelMemory,
};
use voxmem_sim::render::render_with;
use voxmem_sim::scene::{CameraSpec, Solid};
use voxmem_sim::{bundled_scene, explore, generate_dataset, Aabb, ExploreOptions, GenerateOptions, ValueKind};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("frustum removal equals brute-force scan", c1_removal_oracle),
        ("feature aggregation is an exact weighted mean", c2_aggregation),
        ("stub pipeline scores 100% on the dynamic dataset", c3_end_to_end),
        ("static memory loses moved objects", c4_static_vs_dynamic),
        ("hybrid with k=1 equals vlm", c5_hybrid_degeneracy),
        ("ablation flags move rates in the expected direction", c6_ablations),
        ("A* costs equal Dijkstra", c7_astar),
        ("exploration coverage and stale-first order", c8_exploration),
        ("closed-loop prefixes are at most 7 waypoints", c9_prefixes),
        ("value map midpoint and monotonicity", c10_value_maps),
        ("persistence and generation are byte-reproducible", c11_persistence),
        ("mLLM context cap and live-frame filter", c12_context_cap),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name} ({detail}; {secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

const OBJECT_LABELS: [&str; 6] = ["mug", "book", "plant", "chair", "lamp", "basket"];

struct RandomScene {
    labels: Vec<String>,
    frames: Vec<PosedFrame>,
}

fn random_box(rng: &mut ChaCha8Rng) -> Aabb {
    let (sx, sy, sz) = (
        rng.random_range(0.1..0.5),
        rng.random_range(0.1..0.5),
        rng.random_range(0.1..0.8),
    );
    let (x, y) = (rng.random_range(0.4..3.6 - sx), rng.random_range(0.4..3.6 - sy));
    Aabb::new([x, y, 0.0], [x + sx, y + sy, sz]).unwrap()
}

/// A 4x4 m walled room with a few labelled boxes that jump to new spots
/// halfway through a 20-frame random walk of the camera.
fn random_scene(seed: u64, n_frames: usize) -> RandomScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<String> = OBJECT_LABELS.iter().map(|s| s.to_string()).collect();
    let n_objects = rng.random_range(3..=5);
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    labels.truncate(n_objects);
    let table = Arc::new(LabelTable::new(
        ["floor", "obstacle"]
            .into_iter()
            .map(String::from)
            .chain(labels.iter().cloned()),
    ));
    let wall = |min: [f64; 3], max: [f64; 3]| Solid {
        label: "obstacle".into(),
        aabb: Aabb::new(min, max).unwrap(),
    };
    let statics = vec![
        Solid {
            label: "floor".into(),
            aabb: Aabb::new([0.0, 0.0, -0.05], [4.0, 4.0, 0.0]).unwrap(),
        },
        wall([0.0, 0.0, 0.0], [0.1, 4.0, 1.2]),
        wall([3.9, 0.0, 0.0], [4.0, 4.0, 1.2]),
        wall([0.0, 0.0, 0.0], [4.0, 0.1, 1.2]),
        wall([0.0, 3.9, 0.0], [4.0, 4.0, 1.2]),
    ];
    let layouts: Vec<Vec<Solid>> = (0..2)
        .map(|_| {
            let mut s = statics.clone();
            s.extend(labels.iter().map(|l| Solid {
                label: l.clone(),
                aabb: random_box(&mut rng),
            }));
            s
        })
        .collect();
    let camera = CameraSpec {
        depth_noise: rng.random_range(0.0..0.004),
        ..CameraSpec::default()
    };
    let frames = (0..n_frames)
        .map(|i| {
            let eye = Point3::new(
                rng.random_range(0.6..3.4),
                rng.random_range(0.6..3.4),
                rng.random_range(0.7..1.4),
            );
            let yaw: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let pitch: f64 = rng.random_range(0.2..0.8);
            let dir = Vector3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), -pitch.sin());
            let pose = Pose::look_at(eye, eye + dir, Vector3::z()).unwrap();
            let layout = &layouts[(i >= n_frames / 2) as usize];
            render_with(layout, &camera, seed, i as u64 + 1, i as f64, pose, table.clone())
        })
        .collect();
    RandomScene { labels, frames }
}

/// Free-space test written directly from the pinhole model.
fn free_space_oracle(c: &Point3<f64>, f: &PosedFrame, config: &MemoryConfig) -> bool {
    let p = f.pose.rotation().transpose() * (c.coords - f.pose.translation());
    if p.z <= 0.0 {
        return false;
    }
    let u = f.intrinsics.fx * p.x / p.z + f.intrinsics.cx;
    let v = f.intrinsics.fy * p.y / p.z + f.intrinsics.cy;
    let (h, w) = (v.round(), u.round());
    if !(h >= 0.0 && w >= 0.0 && h < f.intrinsics.height as f64 && w < f.intrinsics.width as f64) {
        return false;
    }
    let observed = f.depth.get(h as usize, w as usize) as f64;
    observed > 0.0 && p.z < config.max_depth.min(observed + config.epsilon)
}

fn dynamic_dataset(dir: &Path) -> Result<voxmem_bench::Dataset, String> {
    let scene = bundled_scene("dynamic").ok_or("bundled scene missing")?;
    generate_dataset(&scene, &GenerateOptions::default(), dir).map_err(|e| e.to_string())?;
    load_dataset(dir).map_err(|e| e.to_string())
}

fn bench(
    ds: &voxmem_bench::Dataset,
    method: Method,
    options: PipelineOptions,
    client: Option<Box<dyn MllmClient>>,
) -> Result<voxmem_bench::EvalReport, String> {
    let mut p = MemoryPipeline::new(method, options, client).map_err(|e| e.to_string())?;
    evaluate(ds, &mut p).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- criteria

fn c1_removal_oracle() -> Outcome {
    let start = Instant::now();
    let config = MemoryConfig {
        voxel_size: 0.1,
        feature_dim: 16,
        ..MemoryConfig::default()
    };
    let embedder = StubLabelEmbedder::new(StubConfig {
        dim: 16,
        ..StubConfig::default()
    });
    let (mut frames_checked, mut removed_total, mut max_voxels) = (0, 0, 0);
    for seed in 0..50 {
        let scene = random_scene(1000 + seed, 20);
        let mut memory = VoxelMemory::new(config).unwrap();
        for f in &scene.frames {
            let expected: Vec<VoxelKey> = memory
                .iter()
                .filter(|(_, r)| free_space_oracle(&r.centroid, f, &config))
                .map(|(k, _)| *k)
                .collect();
            let features = embedder.embed_frame(f, config.max_depth).map_err(|e| e.to_string())?;
            let report = memory.ingest_frame(f, &features).map_err(|e| e.to_string())?;
            check(report.removed == expected, || {
                format!(
                    "scene {seed} frame {}: removed {} voxels, oracle {}",
                    f.frame_id,
                    report.removed.len(),
                    expected.len()
                )
            })?;
            removed_total += expected.len();
            frames_checked += 1;
            max_voxels = max_voxels.max(memory.len());
        }
    }
    check(max_voxels <= 10_000, || format!("scene grew to {max_voxels} voxels"))?;
    check(removed_total > 0, || "no removals exercised".into())?;
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{frames_checked} frames, {removed_total} removals, max {max_voxels} voxels"
    ))
}

fn c2_aggregation() -> Outcome {
    const DIM: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let config = MemoryConfig {
        voxel_size: 0.25,
        feature_dim: DIM,
        ..MemoryConfig::default()
    };
    let mut batches = 0;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut memory = VoxelMemory::new(config).unwrap();
        let mut all: Vec<PointObservation> = Vec::new();
        for b in 0..10 {
            let n = rng.random_range(1..50);
            let batch: Vec<PointObservation> = (0..n)
                .map(|_| PointObservation {
                    position: Point3::new(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(0.0..0.5),
                    ),
                    feature: Feature::new((0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect()),
                    // quarter steps keep every weight sum exact in f64
                    weight: rng.random_range(1..=16) as f64 / 4.0,
                    time: b as f64,
                    image_id: b + 1,
                })
                .collect();
            memory.insert_points(&batch).map_err(|e| e.to_string())?;
            all.extend(batch);
            batches += 1;

            let mut groups: BTreeMap<VoxelKey, Vec<&PointObservation>> = BTreeMap::new();
            for o in &all {
                groups
                    .entry(VoxelKey::from_point(&o.position, config.voxel_size))
                    .or_default()
                    .push(o);
            }
            check(groups.len() == memory.len(), || {
                format!("{} voxels, expected {}", memory.len(), groups.len())
            })?;
            for (key, members) in &groups {
                let rec = memory.get(key).ok_or("voxel missing")?;
                let total: f64 = members.iter().map(|o| o.weight).sum();
                check(rec.count == total, || {
                    format!("count {} != weight sum {total}", rec.count)
                })?;
                for d in 0..DIM {
                    let mean = members.iter().map(|o| o.weight * o.feature[d]).sum::<f64>() / total;
                    let err = (rec.feature[d] - mean).abs();
                    worst = worst.max(err);
                    check(err <= 1e-6, || format!("feature off by {err}"))?;
                }
            }
        }
    }
    Ok(format!("{batches} batches, worst feature error {worst:.1e}"))
}

fn c3_end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let ds = dynamic_dataset(dir.path())?;
    let m = ds.manifest();
    let positives = m.queries.iter().filter(|q| q.kind.is_positive()).count();
    let negatives = m.queries.len() - positives;
    check(m.rounds == 3 && positives >= 12 && negatives >= 4, || {
        format!(
            "dataset has {} rounds, {positives} positives, {negatives} negatives",
            m.rounds
        )
    })?;
    let report = bench(&ds, Method::Vlm, PipelineOptions::default(), None)?;
    check(report.success_rate() == 1.0, || {
        let bad: Vec<_> = report
            .outcomes
            .iter()
            .filter(|o| !o.success)
            .map(|o| format!("{}@{}", o.query, o.t))
            .collect();
        format!("success {:.3}, failed {bad:?}", report.success_rate())
    })?;
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{}/{} queries, {positives} positive",
        report.overall().successes,
        report.overall().total
    ))
}

fn c4_static_vs_dynamic() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let ds = dynamic_dataset(dir.path())?;
    let scene = bundled_scene("dynamic").unwrap();
    let moved: BTreeSet<&str> = scene
        .objects
        .iter()
        .filter(|o| {
            let spots: Vec<_> = o.placements.iter().flatten().collect();
            spots.windows(2).any(|w| w[0] != w[1])
        })
        .map(|o| o.label.as_str())
        .collect();
    check(!moved.is_empty(), || "scene has no moving object".into())?;

    let dynamic = bench(&ds, Method::Vlm, PipelineOptions::default(), None)?;
    let stat = bench(
        &ds,
        Method::Vlm,
        PipelineOptions {
            removal: false,
            ..PipelineOptions::default()
        },
        None,
    )?;
    let later = |o: &voxmem_bench::QueryOutcome| o.round >= 1 && matches!(o.kind, QueryKind::Positive { .. });
    let (d, s) = (dynamic.tally(later), stat.tally(later));
    check(s.rate() < d.rate(), || {
        format!("static {:.2} not below dynamic {:.2}", s.rate(), d.rate())
    })?;

    let mut moved_queries = 0;
    for (od, os) in dynamic.outcomes.iter().zip(&stat.outcomes) {
        if later(od) && moved.contains(od.query.as_str()) {
            moved_queries += 1;
            check(od.success && !os.success, || {
                format!(
                    "{:?} at t={}: dynamic {}, static {}",
                    od.query, od.t, od.success, os.success
                )
            })?;
        }
    }
    check(moved_queries > 0, || "no queries for the moved object".into())?;
    Ok(format!(
        "later-round positives dynamic {:.2} vs static {:.2}; {moved_queries} moved-object queries flip",
        d.rate(),
        s.rate()
    ))
}

fn c5_hybrid_degeneracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut compared = 0;
    let mut found = 0;
    for s in 0..10 {
        let scene = random_scene(500 + s, 20);
        let options = PipelineOptions {
            query: QueryConfig {
                k: 1,
                ..QueryConfig::default()
            },
            stub: StubConfig {
                noise_sigma: rng.random_range(0.0..0.03),
                seed: s,
                ..StubConfig::default()
            },
            ..PipelineOptions::default()
        };
        let oracle = LabelOracleMllm {
            synonyms: BTreeMap::new(),
        };
        let mut vlm = MemoryPipeline::new(Method::Vlm, options.clone(), None).map_err(|e| e.to_string())?;
        let mut hybrid =
            MemoryPipeline::new(Method::Hybrid, options, Some(Box::new(oracle))).map_err(|e| e.to_string())?;
        let mut ask_at: BTreeSet<usize> = BTreeSet::new();
        while ask_at.len() < 10 {
            ask_at.insert(rng.random_range(0..scene.frames.len()));
        }
        for (i, f) in scene.frames.iter().enumerate() {
            vlm.ingest_frame(f.clone()).map_err(|e| e.to_string())?;
            hybrid.ingest_frame(f.clone()).map_err(|e| e.to_string())?;
            if ask_at.contains(&i) {
                let text = if rng.random_bool(0.2) {
                    "unicorn".to_string()
                } else {
                    scene.labels[rng.random_range(0..scene.labels.len())].clone()
                };
                let a = vlm.query(&text).map_err(|e| e.to_string())?;
                let b = hybrid.query(&text).map_err(|e| e.to_string())?;
                check(a == b, || {
                    format!("scene {s} frame {i} {text:?}: vlm {a:?} vs hybrid {b:?}")
                })?;
                found += a.is_found() as usize;
                compared += 1;
            }
        }
    }
    Ok(format!("{compared} queries identical, {found} found"))
}

fn c6_ablations() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let scene = bundled_scene("adversarial").ok_or("bundled scene missing")?;
    generate_dataset(&scene, &GenerateOptions::default(), dir.path()).map_err(|e| e.to_string())?;
    let ds = load_dataset(dir.path()).map_err(|e| e.to_string())?;
    let stub = StubConfig {
        noise_sigma: 0.02,
        // feature-space confusions the detector does not share
        text_aliases: BTreeMap::from([("red mug".into(), "mug".into()), ("teapot".into(), "plant".into())]),
        detector_failures: BTreeSet::from(["book".into()]),
        ..StubConfig::default()
    };
    let run = |detector_check: bool, use_threshold: bool| {
        bench(
            &ds,
            Method::Vlm,
            PipelineOptions {
                stub: stub.clone(),
                query: QueryConfig {
                    detector_check,
                    use_threshold,
                    ..QueryConfig::default()
                },
                ..PipelineOptions::default()
            },
            None,
        )
    };
    let full = run(true, true)?;
    let no_det = run(false, true)?;
    let no_thr = run(true, false)?;
    let false_pos = |r: &voxmem_bench::EvalReport| r.negatives().total - r.negatives().successes;
    check(false_pos(&no_det) > false_pos(&full), || {
        format!(
            "false positives {} without detector vs {} with",
            false_pos(&no_det),
            false_pos(&full)
        )
    })?;
    check(no_thr.negatives().rate() <= full.negatives().rate(), || {
        format!(
            "negative success rose to {:.2} without threshold (from {:.2})",
            no_thr.negatives().rate(),
            full.negatives().rate()
        )
    })?;
    Ok(format!(
        "false positives full {} / no-detector {} / no-threshold {}",
        false_pos(&full),
        false_pos(&no_det),
        false_pos(&no_thr)
    ))
}

fn dijkstra(map: &ObstacleMap2D, s: Cell, t: Cell, pc: &PlannerConfig) -> Option<f64> {
    if map.state(t) == CellState::Obstacle {
        return None;
    }
    let g = map.geometry;
    let mut dist = vec![f64::INFINITY; g.len()];
    let mut heap = BinaryHeap::new();
    dist[g.index(s)] = 0.0;
    // costs are non-negative, so ordering by bit pattern matches numeric order
    heap.push(Reverse((0.0f64.to_bits(), s.ix, s.iy)));
    while let Some(Reverse((bits, x, y))) = heap.pop() {
        let u = Cell::new(x, y);
        let d = f64::from_bits(bits);
        if d > dist[g.index(u)] {
            continue;
        }
        if u == t {
            return Some(d);
        }
        for n in g.neighbors(u) {
            if let Some(c) = step_cost(map, u, n, pc) {
                let nd = d + c;
                if nd < dist[g.index(n)] {
                    dist[g.index(n)] = nd;
                    heap.push(Reverse((nd.to_bits(), n.ix, n.iy)));
                }
            }
        }
    }
    None
}

fn c7_astar() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pc = PlannerConfig::default();
    let (mut solved, mut unreachable) = (0, 0);
    for trial in 0..200 {
        let g = GridGeometry::new([0.0, 0.0], 0.1, 30, 30).unwrap();
        let mut map = ObstacleMap2D::filled(g, CellState::Navigable);
        let density = rng.random_range(0.05..0.4);
        for c in g.cells().collect::<Vec<_>>() {
            let r: f64 = rng.random();
            map.set(
                c,
                if r < density {
                    CellState::Obstacle
                } else if r < density + 0.15 {
                    CellState::Explorable
                } else {
                    CellState::Navigable
                },
            );
        }
        let s = Cell::new(rng.random_range(0..30), rng.random_range(0..30));
        let t = Cell::new(rng.random_range(0..30), rng.random_range(0..30));
        map.set(s, CellState::Navigable);
        let oracle = dijkstra(&map, s, t, &pc);
        match (plan_astar(&map, s, t, &pc), oracle) {
            (Ok(path), Some(best)) => {
                check((path.cost - best).abs() < 1e-9, || {
                    format!("grid {trial}: A* {} vs Dijkstra {best}", path.cost)
                })?;
                solved += 1;
            }
            (Err(NavError::NoPath { .. }) | Err(NavError::InvalidGoal(_)), None) => unreachable += 1,
            (got, want) => return Err(format!("grid {trial}: A* {got:?} vs Dijkstra {want:?}")),
        }
    }
    check(solved >= 100, || format!("only {solved} solvable grids"))?;
    Ok(format!(
        "200 grids, {solved} paths, {unreachable} unreachable, 0 mismatches"
    ))
}

fn cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = voxmem_cli::run(
        std::iter::once("voxmem").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    (code, String::from_utf8(out).unwrap())
}

fn c8_exploration() -> Outcome {
    let mut coverages = Vec::new();
    for name in ["studio", "l_room", "two_rooms"] {
        let (code, out) = cli(&["explore", &format!("bundled:{name}"), "--strict"]);
        let cov: f64 = out
            .lines()
            .find_map(|l| l.strip_prefix("final_coverage="))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| format!("{name}: no coverage line"))?;
        check(code == 0 && cov >= 0.99, || {
            format!("{name}: exit {code}, coverage {cov:.4}")
        })?;
        coverages.push(format!("{name} {:.1}%", 100.0 * cov));
    }

    let scene = bundled_scene("two_round").ok_or("bundled scene missing")?;
    let report = explore(
        &scene,
        ExploreOptions {
            value: ValueKind::Time,
            ..ExploreOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let second: Vec<_> = report.steps.iter().filter(|s| s.round == 1).collect();
    let stale = second.iter().filter(|s| s.is_stale).count();
    check(stale > 0, || "no stale targets in round 2".into())?;
    for s in &second {
        if let (false, Some(m)) = (s.is_stale, s.max_stale_value) {
            check(s.value >= m, || {
                format!("step {}: fresh value {} taken over stale {m}", s.step, s.value)
            })?;
        }
    }
    Ok(format!(
        "{}; {stale} stale targets first in round 2",
        coverages.join(", ")
    ))
}

fn c9_prefixes() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut total = 0;
    let mut longest = 0;
    for name in ["studio", "two_rooms", "two_round"] {
        let trace = dir.path().join(format!("{name}.tsv"));
        let (code, _) = cli(&[
            "explore",
            &format!("bundled:{name}"),
            "--trace",
            trace.to_str().unwrap(),
        ]);
        check(code == 0, || format!("{name}: exit {code}"))?;
        let text = std::fs::read_to_string(&trace).map_err(|e| e.to_string())?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or("empty trace")?.split('\t').collect();
        let col = header
            .iter()
            .position(|h| *h == "prefix_len")
            .ok_or("no prefix_len column")?;
        for l in lines {
            let n: usize = l
                .split('\t')
                .nth(col)
                .and_then(|v| v.parse().ok())
                .ok_or("bad trace row")?;
            check(n <= 7, || format!("{name}: prefix of {n} waypoints"))?;
            longest = longest.max(n);
            total += 1;
        }
    }
    check(longest > 1, || "no multi-waypoint prefixes exercised".into())?;
    Ok(format!("{total} steps, longest prefix {longest}"))
}

fn c10_value_maps() -> Outcome {
    let params = ExplorationParams::default();
    let geometry = GridGeometry::new([0.0, 0.0], 0.1, 4, 4).unwrap();
    let cell = geometry.cell_of(0.15, 0.15).unwrap();
    let memory_with = |feature: Vec<f64>, t: f64| {
        let mut m = VoxelMemory::new(MemoryConfig {
            voxel_size: 0.05,
            feature_dim: feature.len(),
            ..MemoryConfig::default()
        })
        .unwrap();
        m.insert_points(&[PointObservation {
            position: Point3::new(0.15, 0.15, 0.3),
            feature: Feature::new(feature),
            weight: 1.0,
            time: t,
            image_id: 1,
        }])
        .unwrap();
        m
    };
    let err = |e: NavError| e.to_string();

    let m = memory_with(vec![1.0, 0.0], 10.0);
    let v = temporal_value_map(&m, geometry, 10.0 + params.mu_t, &params)
        .map_err(err)?
        .get(cell);
    check((v - 0.5).abs() < 1e-9, || format!("V_T at midpoint = {v}"))?;
    let q = Feature::new(vec![1.0, 0.0]);
    let m = memory_with(vec![params.mu_s, 0.0], 0.0);
    let v = similarity_value_map(&m, geometry, &q, &params).map_err(err)?.get(cell);
    check((v - 0.5).abs() < 1e-9, || format!("V_S at midpoint = {v}"))?;

    let monotone = |vals: &[f64], beta: f64| {
        vals.windows(2)
            .all(|w| if beta < 0.0 { w[1] >= w[0] } else { w[1] <= w[0] })
            && vals.first() != vals.last()
    };
    let mut sweeps = 0;
    for beta_t in [params.beta_t, -params.beta_t, -0.5, 0.2] {
        let p = ExplorationParams { beta_t, ..params };
        let m = memory_with(vec![1.0, 0.0], 0.0);
        let vals: Vec<f64> = (0..=100)
            .map(|i| temporal_value_map(&m, geometry, i as f64 * 5.0, &p).map(|v| v.get(cell)))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        check(monotone(&vals, beta_t), || {
            format!("V_T not monotone for beta_t={beta_t}")
        })?;
        sweeps += 1;
    }
    for beta_s in [params.beta_s, -params.beta_s, -3.0, 25.0] {
        let p = ExplorationParams { beta_s, ..params };
        let vals: Vec<f64> = (0..=100)
            .map(|i| {
                let s = -1.0 + i as f64 / 50.0;
                similarity_value_map(&memory_with(vec![s, 0.0], 0.0), geometry, &q, &p).map(|v| v.get(cell))
            })
            .collect::<Result<_, _>>()
            .map_err(err)?;
        check(monotone(&vals, beta_s), || {
            format!("V_S not monotone for beta_s={beta_s}")
        })?;
        sweeps += 1;
    }
    check(value_of(params.mu_t, params.beta_t, params.mu_t) == 0.5, || {
        "value_of midpoint".into()
    })?;
    Ok(format!("midpoints exact, {sweeps} monotone sweeps"))
}

fn c11_persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    const DIM: usize = 16;
    let mut memory = VoxelMemory::new(MemoryConfig {
        voxel_size: 0.05,
        feature_dim: DIM,
        ..MemoryConfig::default()
    })
    .unwrap();
    let obs: Vec<PointObservation> = (0..100_000)
        .map(|i| PointObservation {
            position: Point3::new(
                (i % 100) as f64 * 0.05 + 0.025,
                ((i / 100) % 100) as f64 * 0.05 + 0.025,
                (i / 10_000) as f64 * 0.05 + 0.025,
            ),
            feature: Feature::new((0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect()),
            weight: rng.random_range(0.5..3.0),
            time: rng.random_range(0.0..1000.0),
            image_id: rng.random_range(1..500),
        })
        .collect();
    memory.insert_points(&obs).map_err(|e| e.to_string())?;
    check(memory.len() == 100_000, || format!("{} voxels", memory.len()))?;
    let (a, b) = (dir.path().join("a.map"), dir.path().join("b.map"));
    save_map(&a, &memory, None).map_err(|e| e.to_string())?;
    let loaded = load_map(&a).map_err(|e| e.to_string())?;
    save_map(&b, &loaded.memory, None).map_err(|e| e.to_string())?;
    let (ba, bb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    check(ba == bb, || "second save differs".into())?;

    let scene = bundled_scene("dynamic").unwrap();
    let mut digests = Vec::new();
    for run in ["g1", "g2"] {
        let out = dir.path().join(run);
        generate_dataset(&scene, &GenerateOptions::default(), &out).map_err(|e| e.to_string())?;
        digests.push(dir_contents(&out)?);
    }
    check(digests[0] == digests[1], || "dataset bytes differ between runs".into())?;
    Ok(format!(
        "{} byte map stable, {} dataset files identical",
        ba.len(),
        digests[0].len()
    ))
}

fn dir_contents(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let p = e.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(out)
}

#[derive(Default)]
struct Recorder(Mutex<Vec<Vec<u64>>>);

impl MllmClient for Recorder {
    fn answer(&self, request: &MllmRequest<'_>) -> Result<MllmAnswer, MllmError> {
        self.0
            .lock()
            .unwrap()
            .push(request.images.iter().map(|f| f.frame_id).collect());
        Ok(MllmAnswer::NoneAnswer)
    }
}

fn c12_context_cap() -> Outcome {
    check(QueryConfig::default().max_context_images == 60, || {
        "default cap is not 60".into()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let table = Arc::new(LabelTable::new(["mug"]));
    let intr = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 1, 1).unwrap();
    let stub = StubConfig {
        dim: 8,
        ..StubConfig::default()
    };
    let embedder = StubLabelEmbedder::new(stub.clone());
    let detector = StubDetector::new(&stub);
    let mut prompts = 0;
    for trial in 0..100 {
        let n = rng.random_range(1..200u64);
        let mut frames = FrameStore::new();
        for id in 1..=n {
            let f = PosedFrame::new(
                id,
                id as f64,
                DepthImage::new(1, 1, vec![1.0]).unwrap(),
                LabelImage::new(1, 1, vec![1], table.clone()).unwrap(),
                intr,
                Pose::identity(),
            )
            .unwrap();
            frames.insert(Arc::new(f)).map_err(|e| e.to_string())?;
        }
        let mut memory = VoxelMemory::new(MemoryConfig {
            feature_dim: 8,
            ..MemoryConfig::default()
        })
        .unwrap();
        let live: Vec<PointObservation> = (1..=n)
            .filter(|_| rng.random_bool(0.5))
            .map(|id| PointObservation {
                position: Point3::new(id as f64, 0.0, 0.0),
                feature: embedder.label_vector("mug"),
                weight: 1.0,
                time: id as f64,
                image_id: id,
            })
            .collect();
        memory.insert_points(&live).map_err(|e| e.to_string())?;
        let config = QueryConfig {
            max_context_images: if trial % 2 == 0 { 60 } else { rng.random_range(1..100) },
            image_filter: trial % 3 != 0,
            ..QueryConfig::default()
        };
        let recorder = Recorder::default();
        let ctx = QueryContext {
            memory: &memory,
            frames: &frames,
            text: &embedder,
            detector: &detector,
            config: &config,
        };
        mllm_query(&ctx, &recorder, "mug").map_err(|e| e.to_string())?;
        let live_ids = memory.live_images();
        for ids in recorder.0.into_inner().unwrap() {
            prompts += 1;
            check(ids.len() <= config.max_context_images, || {
                format!(
                    "trial {trial}: {} images over cap {}",
                    ids.len(),
                    config.max_context_images
                )
            })?;
            if config.image_filter {
                check(ids.iter().all(|id| live_ids.contains(id)), || {
                    format!("trial {trial}: dead frame sent")
                })?;
            }
        }
    }
    check(prompts > 50, || format!("only {prompts} prompts built"))?;
    Ok(format!(
        "{prompts} prompts within cap, filtered prompts only carry live frames"
    ))
}
