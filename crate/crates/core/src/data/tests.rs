use proptest::prelude::*;

use super::synth::turn_position;
use super::*;
use crate::rng::SeededRng;

fn parse(text: &str) -> Result<Vec<Trajectory>> {
    parse_trajectories(text.as_bytes())
}

fn track(id: u64, pts: &[(u64, f64, f64)]) -> Trajectory {
    Trajectory {
        vehicle_id: id,
        segment: 0,
        points: pts.iter().map(|&(frame, x, y)| TrackPoint { frame, pos: [x, y] }).collect(),
    }
}

/// Straight track at constant velocity, one point per frame.
fn line(id: u64, start: Point, vel: Point, frames: u64) -> Trajectory {
    let pts: Vec<_> = (0..frames)
        .map(|f| (f, start[0] + vel[0] * f as f64, start[1] + vel[1] * f as f64))
        .collect();
    track(id, &pts)
}

fn unit_cfg() -> SceneConfig {
    SceneConfig {
        downsample: 1,
        ..SceneConfig::default()
    }
}

#[test]
fn loads_small_fixture() {
    let t = parse("vehicle_id,frame,x_m,y_m\n7,1,0.0,0.0\n7,2,1.0,0.5\n7,3,2.0,1.0\n").unwrap();
    assert_eq!(t.len(), 1);
    assert_eq!(t[0].len(), 3);
    assert_eq!(t[0].points[2].pos, [2.0, 1.0]);
}

#[test]
fn unordered_rows_are_sorted() {
    let sorted = parse("vehicle_id,frame,x_m,y_m\n1,1,0,0\n1,2,1,0\n2,1,5,5\n2,2,6,5\n").unwrap();
    let shuffled = parse("frame,vehicle_id,y_m,x_m\n2,2,5,6\n1,1,0,0\n2,1,0,1\n1,2,5,5\n").unwrap();
    assert_eq!(sorted, shuffled);
}

#[test]
fn frame_gap_splits_segments() {
    let t = parse("vehicle_id,frame,x_m,y_m\n1,1,0,0\n1,2,1,0\n1,5,4,0\n1,6,5,0\n").unwrap();
    assert_eq!(t.len(), 2);
    assert_eq!((t[0].segment, t[1].segment), (0, 1));
    assert_eq!(t[1].points[0].frame, 5);
}

#[test]
fn parse_errors_name_the_line() {
    let missing = parse("vehicle_id,frame,x_m\n1,1,0\n").unwrap_err();
    assert!(missing.to_string().contains("line 1") && missing.to_string().contains("y_m"));
    let bad = parse("vehicle_id,frame,x_m,y_m\n1,1,0,0\n1,2,abc,0\n").unwrap_err();
    assert!(bad.to_string().starts_with("line 3"), "{bad}");
    let dup = parse("vehicle_id,frame,x_m,y_m\n1,1,0,0\n1,2,1,0\n1,1,0,0\n").unwrap_err();
    assert!(dup.to_string().starts_with("line 4") && dup.to_string().contains("duplicate"), "{dup}");
}

#[test]
fn csv_round_trip_is_lossless() {
    let mut rng = SeededRng::new(1);
    let trajs: Vec<_> = (0..3)
        .map(|i| {
            let pts: Vec<_> = (0..20).map(|f| (f + 10, rng.normal() * 1e3, rng.normal() / 7.0)).collect();
            track(i, &pts)
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    write_trajectories(&path, &trajs).unwrap();
    assert_eq!(load_trajectories(&path).unwrap(), trajs);
    let manifest = vec![(0, Maneuver::Yield), (100, Maneuver::ConstantTurn)];
    write_manifest(&dir.path().join("m.csv"), &manifest).unwrap();
    assert_eq!(load_manifest(&dir.path().join("m.csv")).unwrap(), manifest);
}

#[test]
fn downsample_examples() {
    let t = line(1, [0.0, 0.0], [1.0, 0.0], 8);
    assert_eq!(downsample(&t, 1), t);
    let t1 = Trajectory {
        points: t.points.iter().map(|p| TrackPoint { frame: p.frame + 1, ..*p }).collect(),
        ..t.clone()
    };
    let frames: Vec<u64> = downsample(&t1, 2).points.iter().map(|p| p.frame).collect();
    assert_eq!(frames, vec![1, 3, 5, 7]);
    let long = line(1, [0.0, 0.0], [1.5, 0.0], 80);
    let d = downsample(&long, 2);
    assert_eq!(d.len(), 40);
    let secs = (d.points[39].frame - d.points[0].frame + 2) as f64 * RAW_DT;
    assert!((secs - 8.0).abs() < 1e-12);
}

#[test]
fn single_vehicle_scenes_have_no_neighbors() {
    let scenes = build_scenes(&[line(1, [3.0, 4.0], [1.0, 0.5], 50)], &unit_cfg(), None);
    assert_eq!(scenes.len(), 3);
    for s in &scenes {
        assert!(s.neighbors.is_empty());
        assert_eq!(s.graph.node_count(), 1);
        s.validate(&unit_cfg()).unwrap();
    }
    assert_eq!(scenes[1].start_frame, 5);
}

#[test]
fn neighbor_radius_rule() {
    let cfg = unit_cfg();
    let near = [line(1, [0.0, 0.0], [1.0, 0.0], 40), line(2, [0.0, 10.0], [1.0, 0.0], 40)];
    let scenes = build_scenes(&near, &cfg, None);
    assert_eq!(scenes.len(), 2);
    for s in &scenes {
        assert_eq!(s.neighbors.len(), 1);
        assert!(s.graph.has_edge(0, 1) && s.graph.has_edge(1, 0));
    }
    let far = [line(1, [0.0, 0.0], [1.0, 0.0], 40), line(2, [0.0, 60.0], [1.0, 0.0], 40)];
    for s in build_scenes(&far, &cfg, None) {
        assert!(s.neighbors.is_empty());
    }
}

#[test]
fn scenes_are_anchored_at_the_ego() {
    let t = line(4, [10.0, -3.0], [2.0, 1.0], 40);
    let s = &build_scenes(&[t.clone()], &unit_cfg(), None)[0];
    assert_eq!(s.origin, t.points[14].pos);
    assert_eq!(s.history[14], [0.0, 0.0]);
    let reconstructed = from_offsets(&s.future_offsets(), s.origin);
    for (p, q) in reconstructed.iter().zip(&t.points[15..]) {
        assert!((p[0] - q.pos[0]).abs() < 1e-12 && (p[1] - q.pos[1]).abs() < 1e-12);
    }
}

#[test]
fn scene_construction_commutes_with_rotation() {
    let corpus = synth_generate(
        &SynthConfig {
            scenes_per_class: 3,
            ..SynthConfig::default()
        },
        &SceneConfig::default(),
        5,
    )
    .unwrap();
    let cfg = SceneConfig::default();
    let r = RotationMatrix::from_angle(1.1);
    let rotated: Vec<_> = corpus.trajectories.iter().map(|t| t.rotate(&r)).collect();
    let a = build_scenes(&align_and_downsample(&rotated, 2), &cfg, Some(&corpus.manifest));
    assert_eq!(a.len(), corpus.scenes.len());
    for (x, y) in a.iter().zip(&corpus.scenes) {
        let y = y.rotate(&r);
        assert_eq!(x.neighbors.len(), y.neighbors.len());
        assert_eq!(x.graph, y.graph);
        let close = |p: &[Point], q: &[Point]| p.iter().zip(q).all(|(u, v)| norm(sub(*u, *v)) < 1e-9);
        assert!(close(&x.history, &y.history) && close(&x.future, &y.future));
        assert!(norm(sub(x.origin, y.origin)) < 1e-9);
    }
}

#[test]
fn offset_examples() {
    assert_eq!(to_offsets(&[[2.0, 2.0]; 3], [2.0, 2.0]), vec![[0.0, 0.0]; 3]);
    assert_eq!(
        to_offsets(&[[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]], [0.0, 0.0]),
        vec![[1.0, 0.0]; 3]
    );
}

#[test]
fn offsets_round_trip_on_random_sequences() {
    let mut rng = SeededRng::new(2);
    for _ in 0..1000 {
        let n = 1 + rng.below(40);
        let anchor = [rng.normal() * 30.0, rng.normal() * 30.0];
        let p: Vec<Point> = (0..n).map(|_| [rng.normal() * 30.0, rng.normal() * 30.0]).collect();
        let back = from_offsets(&to_offsets(&p, anchor), anchor);
        for (a, b) in p.iter().zip(&back) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn offsets_round_trip(raw in proptest::collection::vec((-100f64..100.0, -100f64..100.0), 1..40), ax in -100f64..100.0, ay in -100f64..100.0) {
        let p: Vec<Point> = raw.iter().map(|&(x, y)| [x, y]).collect();
        let back = from_offsets(&to_offsets(&p, [ax, ay]), [ax, ay]);
        for (a, b) in p.iter().zip(&back) {
            prop_assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }
}

fn small_synth(turn_rate: f64, noise_sigma: f64) -> SynthCorpus {
    let cfg = SynthConfig {
        scenes_per_class: 4,
        turn_rate,
        noise_sigma,
        ..SynthConfig::default()
    };
    synth_generate(&cfg, &SceneConfig::default(), 9).unwrap()
}

#[test]
fn noiseless_zero_turn_rate_gives_straight_lines() {
    let corpus = small_synth(0.0, 0.0);
    for (id, m) in &corpus.manifest {
        if !matches!(m, Maneuver::ConstantVelocity | Maneuver::ConstantTurn) {
            continue;
        }
        let t = corpus.trajectories.iter().find(|t| t.vehicle_id == *id).unwrap();
        let p = t.positions();
        let d = sub(p[p.len() - 1], p[0]);
        let len = norm(d);
        for q in &p {
            let r = sub(*q, p[0]);
            let cross = (r[0] * d[1] - r[1] * d[0]) / len;
            assert!(cross.abs() < 1e-9, "{cross}");
        }
    }
}

/// Circumcenter of three points.
fn circumcenter(a: Point, b: Point, c: Point) -> Point {
    let d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]));
    let sq = |p: Point| p[0] * p[0] + p[1] * p[1];
    [
        (sq(a) * (b[1] - c[1]) + sq(b) * (c[1] - a[1]) + sq(c) * (a[1] - b[1])) / d,
        (sq(a) * (c[0] - b[0]) + sq(b) * (a[0] - c[0]) + sq(c) * (b[0] - a[0])) / d,
    ]
}

#[test]
fn noiseless_turns_lie_on_the_arc() {
    let omega = 0.12;
    let corpus = small_synth(omega, 0.0);
    let mut checked = 0;
    for (id, m) in &corpus.manifest {
        if *m != Maneuver::ConstantTurn {
            continue;
        }
        let p = corpus.trajectories.iter().find(|t| t.vehicle_id == *id).unwrap().positions();
        // A chord spanning angle ωΔt on a circle of radius r has length 2r·sin(ωΔt/2).
        let r = norm(sub(p[1], p[0])) / (2.0 * (omega * RAW_DT / 2.0).sin());
        let center = circumcenter(p[0], p[p.len() / 2], p[p.len() - 1]);
        for q in &p {
            assert!((norm(sub(*q, center)) - r).abs() < 1e-6 * r);
        }
        let speed = r * omega;
        assert!(speed >= 10.0 - 1e-9 && speed <= 20.0 + 1e-9);
        checked += 1;
    }
    assert_eq!(checked, 4);
}

#[test]
fn synthetic_corpus_is_deterministic_and_valid() {
    let a = small_synth(0.1, 0.05);
    let b = small_synth(0.1, 0.05);
    assert_eq!(a, b);
    assert_eq!(a.scenes.len(), 16);
    for s in &a.scenes {
        s.validate(&SceneConfig::default()).unwrap();
    }
    let yields: Vec<_> = a.scenes.iter().filter(|s| s.maneuver == Maneuver::Yield).collect();
    assert!(yields.iter().all(|s| !s.neighbors.is_empty()));
}

#[test]
fn synthetic_corpus_survives_csv_round_trip() {
    let corpus = small_synth(0.1, 0.05);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.csv");
    write_trajectories(&path, &corpus.trajectories).unwrap();
    let loaded = load_trajectories(&path).unwrap();
    let scenes = build_scenes(
        &align_and_downsample(&loaded, 2),
        &SceneConfig::default(),
        Some(&corpus.manifest),
    );
    assert_eq!(scenes, corpus.scenes);
}

#[test]
fn invalid_synth_configs_are_rejected() {
    let bad = [
        SynthConfig { scenes_per_class: 0, ..SynthConfig::default() },
        SynthConfig { speed_min: 30.0, ..SynthConfig::default() },
        SynthConfig { noise_sigma: -1.0, ..SynthConfig::default() },
        SynthConfig { turn_rate: f64::NAN, ..SynthConfig::default() },
    ];
    for cfg in bad {
        assert!(synth_generate(&cfg, &SceneConfig::default(), 0).is_err());
    }
}

#[test]
fn split_is_stratified_and_reproducible() {
    let mut rng = SeededRng::new(3);
    let cfg = SceneConfig::default();
    let mut scenes: Vec<Scene> = (0..100).map(|_| random_scene(&mut rng, 0, &cfg)).collect();
    for (i, s) in scenes.iter_mut().enumerate() {
        s.ego_id = i as u64;
        s.maneuver = Maneuver::SYNTHETIC[i % 4];
    }
    let (train, test) = split(&scenes, 0.75, 11).unwrap();
    assert_eq!((train.len(), test.len()), (75, 25));
    for m in Maneuver::SYNTHETIC {
        let n = train.iter().filter(|s| s.maneuver == m).count();
        assert!(n == 18 || n == 19, "{m}: {n}");
    }
    let (train2, _) = split(&scenes, 0.75, 11).unwrap();
    assert_eq!(train, train2);
    let (train3, _) = split(&scenes, 0.75, 12).unwrap();
    assert_ne!(train, train3);
    assert!(split(&scenes, 1.0, 0).is_err());
}

#[test]
fn arc_closed_form_matches_turn_position() {
    let (v, omega) = (12.0, 0.2);
    let r = v / omega;
    for i in 0..50 {
        let t = i as f64 * 0.1;
        let p = turn_position([0.0, 0.0], 0.0, v, omega, t);
        let a = omega * t;
        assert!((p[0] - r * a.sin()).abs() < 1e-12);
        assert!((p[1] - r * (1.0 - a.cos())).abs() < 1e-12);
    }
}
