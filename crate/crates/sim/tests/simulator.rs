use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Point3, Vector3};
use voxmem_bench::{evaluate, load_dataset, MemoryPipeline, Method, NegativeReason, PipelineOptions, QueryKind};
use voxmem_core::navigation::Cell;
use voxmem_core::{backproject, CameraIntrinsics, LabelTable, Pose};
use voxmem_sim::explore::NavigateReport;
use voxmem_sim::render::{render_view, render_with};
use voxmem_sim::scene::{CameraSpec, Solid};
use voxmem_sim::*;

fn wall_scene() -> Vec<Solid> {
    vec![Solid {
        label: "wall".into(),
        aabb: Aabb::new([1.0, -50.0, -50.0], [1.2, 50.0, 50.0]).unwrap(),
    }]
}

#[test]
fn wall_one_meter_away_reads_one_meter() {
    let table = LabelTable::new(["wall"]);
    let intr = CameraSpec::default().intrinsics();
    let pose = Pose::look_at(Point3::origin(), Point3::new(1.0, 0.0, 0.0), Vector3::z()).unwrap();
    let view = render_view(&wall_scene(), &table, &intr, &pose);
    assert!(view.depth.iter().all(|d| (*d as f64 - 1.0).abs() < 1e-6));
    assert!(view.labels.iter().all(|&l| l == 1));
}

#[test]
fn rays_that_miss_read_invalid() {
    let table = LabelTable::new(["wall"]);
    let intr = CameraSpec::default().intrinsics();
    let pose = Pose::look_at(Point3::origin(), Point3::new(-1.0, 0.0, 0.0), Vector3::z()).unwrap();
    let view = render_view(&wall_scene(), &table, &intr, &pose);
    assert!(view.depth.iter().all(|&d| d == 0.0));
    assert!(view.labels.iter().all(|&l| l == 0));
}

#[test]
fn backprojected_points_lie_on_surfaces() {
    let scene = bundled_scene("dynamic").unwrap();
    let voxel = 0.05;
    for round in 0..scene.rounds {
        let solids = scene.solids(round);
        let table = Arc::new(scene.label_table());
        for (i, pose) in scene.trajectory.scan_poses([1.0, 1.0]).into_iter().enumerate() {
            let frame = render_with(&solids, &scene.camera, scene.seed, i as u64, 0.0, pose, table.clone());
            for p in backproject(&frame, 2.0).unwrap() {
                let label = frame.appearance.label(p.pixel.0, p.pixel.1);
                let d = solids
                    .iter()
                    .filter(|s| s.label == label)
                    .map(|s| s.aabb.surface_distance(&p.point))
                    .fold(f64::INFINITY, f64::min);
                assert!(d <= voxel / 2.0, "{label} point {:?} is {d} m off", p.point);
                assert!(d < 1e-5, "{label} point {:?} is {d} m off", p.point);
            }
        }
    }
}

#[test]
fn ground_truth_follows_the_script() {
    let scene = bundled_scene("dynamic").unwrap();
    let centers: Vec<_> = (0..3)
        .map(|r| ground_truth_location(&scene, r, "mug").unwrap().unwrap().0)
        .collect();
    assert!(centers[0] != centers[1] && centers[1] != centers[2]);
    assert!(ground_truth_location(&scene, 0, "book").unwrap().is_some());
    assert_eq!(ground_truth_location(&scene, 2, "book").unwrap(), None);
    let plant: Vec<_> = (0..3)
        .map(|r| ground_truth_location(&scene, r, "plant").unwrap())
        .collect();
    assert!(plant.iter().all(|p| *p == plant[0]));
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn generation_is_byte_reproducible() {
    let text = include_str!("../scenes/dynamic.toml").replace("depth_noise", "#");
    let noisy = text.replace("[trajectory]", "[camera]\ndepth_noise = 0.003\n\n[trajectory]");
    let scene = Scene::parse(&noisy).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(&scene, &GenerateOptions::default(), a.path()).unwrap();
    generate_dataset(&scene, &GenerateOptions::default(), b.path()).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert_eq!(ta.len(), 96 * 2 + 1);
    assert!(ta == tb, "datasets differ");
}

#[test]
fn generator_counts_on_the_dynamic_scene() {
    let scene = bundled_scene("dynamic").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let summary = generate_dataset(&scene, &GenerateOptions::default(), dir.path()).unwrap();
    assert_eq!(summary.to_string(), "frames=96 queries=23 rounds=3");
    assert!(summary.positives_per_round.iter().all(|&n| n >= 1));
    assert!(summary.not_yet_observed >= 1 && summary.removed >= 1);

    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.manifest().rounds, 3);
    let rounds: Vec<usize> = ds.manifest().frames.iter().map(|f| f.round).collect();
    assert!(rounds.windows(2).all(|w| w[0] <= w[1]) && rounds.last() == Some(&2));
    let book_round2 = ds
        .manifest()
        .queries
        .iter()
        .find(|q| q.q == "book" && q.round == 2)
        .unwrap();
    assert_eq!(
        book_round2.kind,
        QueryKind::Negative {
            reason: NegativeReason::Removed
        }
    );
}

#[test]
fn object_before_first_sighting_is_a_negative() {
    // the plant is only visible from the last viewpoint
    let text = include_str!("../scenes/dynamic.toml").replace(
        "viewpoints = [[1.0, 1.0], [3.0, 1.0], [3.0, 3.0], [1.0, 3.0]]",
        "viewpoints = [[3.0, 1.0], [3.0, 3.0], [1.0, 3.0]]",
    );
    let scene = Scene::parse(&text).unwrap();
    let data = annotate(&scene, &GenerateOptions::default()).unwrap();
    let early = data.queries.iter().find(|q| q.q == "plant" && q.round == 0).unwrap();
    assert_eq!(
        early.kind,
        QueryKind::Negative {
            reason: NegativeReason::NotYetObserved
        }
    );
}

#[test]
fn unanswerable_positive_is_a_generation_error() {
    // round 1 only revisits the first viewpoint, which never sees the mug's new spot
    let text = format!(
        "{}\n[[trajectory.rounds]]\nround = 1\nviewpoints = [[1.0, 3.0]]\n",
        include_str!("../scenes/dynamic.toml")
    );
    let scene = Scene::parse(&text).unwrap();
    let err = annotate(&scene, &GenerateOptions::default()).unwrap_err();
    assert!(matches!(err, GenerateError::Query { round: 1, .. }), "{err}");
}

#[test]
fn memory_tracks_scene_dynamics_per_round() {
    let scene = bundled_scene("dynamic").unwrap();
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&scene, &GenerateOptions::default(), dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let mut p = MemoryPipeline::new(Method::Vlm, PipelineOptions::default(), None).unwrap();
    let frames: Vec<_> = ds.frames().map(Result::unwrap).collect();
    for round in 0..3 {
        for (f, rec) in frames.iter().zip(&ds.manifest().frames) {
            if rec.round == round {
                p.ingest_frame(f.clone()).unwrap();
            }
        }
        for label in ["mug", "book", "plant"] {
            for r in 0..3 {
                let Some(b) = scene.objects.iter().find(|o| o.label == label).unwrap().placements[r] else {
                    continue;
                };
                let near = p
                    .memory()
                    .iter()
                    .any(|(_, v)| v.centroid.z > 0.01 && b.distance(&v.centroid) < 0.01);
                assert_eq!(
                    near,
                    r == round || (label == "plant"),
                    "{label} box of round {r} after round {round}"
                );
            }
        }
    }
}

#[test]
fn stub_pipeline_is_exact_on_generated_data() {
    let scene = bundled_scene("dynamic").unwrap();
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&scene, &GenerateOptions::default(), dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let mut p = MemoryPipeline::new(Method::Vlm, PipelineOptions::default(), None).unwrap();
    let report = evaluate(&ds, &mut p).unwrap();
    assert_eq!(report.success_rate(), 1.0, "{}", report.to_text());
}

#[test]
fn explores_single_room_scenes_fully() {
    for name in ["studio", "l_room", "two_rooms"] {
        let scene = bundled_scene(name).unwrap();
        let report = explore(&scene, ExploreOptions::default()).unwrap();
        assert_eq!(report.outcome, ExploreOutcome::Complete, "{name}");
        assert!(report.final_coverage() >= 0.99, "{name}: {}", report.to_text());
        assert!(report.steps.iter().all(|s| s.prefix_len <= 7));
    }
}

#[test]
fn empty_floor_finishes_exploration() {
    let scene = bundled_scene("empty").unwrap();
    let report = explore(&scene, ExploreOptions::default()).unwrap();
    assert_eq!(report.outcome, ExploreOutcome::Complete);
    assert!(report.to_text().contains("exploration-complete"));
}

#[test]
fn tiny_budget_is_reported() {
    let scene = bundled_scene("studio").unwrap();
    let options = ExploreOptions {
        step_budget: 2,
        ..Default::default()
    };
    let report = explore(&scene, options).unwrap();
    assert_eq!(report.outcome, ExploreOutcome::BudgetExhausted);
    assert_eq!(report.steps.len(), 2);
}

#[test]
fn time_value_revisits_stale_cells_first() {
    let scene = bundled_scene("two_round").unwrap();
    let report = explore(&scene, ExploreOptions::default()).unwrap();
    assert_eq!(report.outcome, ExploreOutcome::Complete);
    let second: Vec<_> = report.steps.iter().filter(|s| s.round == 1).collect();
    assert!(second.iter().any(|s| s.is_stale));
    for s in second {
        if let (false, Some(m)) = (s.is_stale, s.max_stale_value) {
            assert!(
                s.value >= m,
                "fresh target at step {} chosen over stale value {m}",
                s.step
            );
        }
    }
}

#[test]
fn similarity_needs_a_query() {
    let scene = bundled_scene("studio").unwrap();
    let options = ExploreOptions {
        value: ValueKind::Similarity,
        ..Default::default()
    };
    assert!(matches!(explore(&scene, options), Err(ExploreError::MissingQuery(_))));
}

fn drive(explorer: &mut Explorer, goal: Cell) -> NavigateReport {
    explorer.begin_round(0).unwrap();
    explorer.navigate_to(goal, 100).unwrap()
}

#[test]
fn closed_loop_reaches_goal_in_short_prefixes() {
    let scene = bundled_scene("studio").unwrap();
    let mut ex = Explorer::new(&scene, ExploreOptions::default()).unwrap();
    let goal = ex.geometry().cell_of(3.05, 3.55).unwrap();
    let report = drive(&mut ex, goal);
    assert!(report.reached);
    assert_eq!(ex.position(), goal);
    assert!(report.prefixes.len() > 1);
    assert!(report.prefixes.iter().all(|p| !p.is_empty() && p.len() <= 7));
}

#[test]
fn closed_loop_replans_around_a_new_obstacle() {
    let scene = bundled_scene("empty").unwrap();
    let options = ExploreOptions {
        start: Some([0.25, 1.25]),
        ..Default::default()
    };
    let mut ex = Explorer::new(&scene, options).unwrap();
    let goal = ex.geometry().cell_of(2.25, 1.25).unwrap();
    ex.begin_round(0).unwrap();
    // a wall appears across the straight line after the first look
    ex.extra_solids.push(Solid {
        label: "obstacle".into(),
        aabb: Aabb::new([1.15, 0.55, 0.0], [1.35, 1.95, 0.8]).unwrap(),
    });
    let report = ex.navigate_to(goal, 100).unwrap();
    assert!(report.reached);
    for p in &report.prefixes {
        for c in p {
            assert!(!ex.is_blocked(*c), "drove through {c:?}");
        }
    }
}

#[test]
fn intrinsics_match_camera_spec() {
    let c = CameraSpec::default();
    assert_eq!(
        c.intrinsics(),
        CameraIntrinsics::new(100.0, 100.0, 79.5, 59.5, 120, 160).unwrap()
    );
}
