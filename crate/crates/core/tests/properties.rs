mod common;

use cdr_core::conditional::Sample;
use cdr_core::kernel::SimilarityKind;
use cdr_core::knob::{run_sweep, SweepInputs, SweepPlan};
use cdr_core::marginal::{manifold_scores, precision, recall, vendi, MarginalInput};
use cdr_core::model::{
    axis, validate_table, AxisRegistry, ConfigId, EmbeddingRowMeta, EmbeddingTable, GroupId, KnobConfig, MetricPoint,
    PromptId, Role, Verdict, VerdictLog,
};
use cdr_core::pareto::{fronts_by_group, pareto_front};
use cdr_core::sim::{compress_knob, emit_world_dataset, sample_cfg, ToyWorld};
use cdr_core::store;
use common::rid;
use proptest::prelude::*;

fn samples(prefix: &str, rows: &[Vec<f64>]) -> Vec<Sample> {
    rows.iter()
        .enumerate()
        .map(|(i, v)| Sample::new(rid(&format!("{prefix}{i:03}")), v.clone()))
        .collect()
}

fn cloud(dim: usize, n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), n)
}

fn two_clouds() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>, usize)> {
    (2usize..6, 1usize..4).prop_flat_map(|(dim, k)| (cloud(dim, k + 1..16), cloud(dim, k + 1..16), Just(k)))
}

fn demo_world() -> ToyWorld {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/demo_world.json");
    ToyWorld::from_json(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn demo_sweep() -> Vec<KnobConfig> {
    store::read_sweep(std::path::Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/data/knob_sweep.json"))).unwrap()
}

/// Rotation in the plane of coordinates `(a, b)` followed by a shift.
fn rigid(v: &[f64], a: usize, b: usize, theta: f64, shift: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    let (s, c) = theta.sin_cos();
    out[a] = c * v[a] - s * v[b];
    out[b] = s * v[a] + c * v[b];
    out.iter().zip(shift).map(|(x, t)| x + t).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn manifold_scores_stay_in_range((real, gen, k) in two_clouds()) {
        let input = MarginalInput::new(samples("r", &real), samples("g", &gen), k);
        let s = manifold_scores(&input).unwrap();
        for v in [s.precision, s.recall, s.coverage] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(s.density >= 0.0);
        prop_assert!(s.density <= real.len() as f64 / k as f64);
    }

    #[test]
    fn precision_and_recall_swap_roles((real, gen, k) in two_clouds()) {
        let input = MarginalInput::new(samples("r", &real), samples("g", &gen), k);
        let swapped = input.swapped();
        prop_assert_eq!(precision(&input).unwrap().to_bits(), recall(&swapped).unwrap().to_bits());
        prop_assert_eq!(recall(&input).unwrap().to_bits(), precision(&swapped).unwrap().to_bits());
    }

    #[test]
    fn manifold_scores_survive_rigid_motion(
        (real, gen, k) in two_clouds(),
        theta in 0.0f64..std::f64::consts::TAU,
        shift in prop::collection::vec(-5.0f64..5.0, 6),
    ) {
        let dim = real[0].len();
        let (a, b) = (0, dim - 1);
        let moved = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter().map(|v| rigid(v, a, b, theta, &shift[..dim])).collect()
        };
        let before = manifold_scores(&MarginalInput::new(samples("r", &real), samples("g", &gen), k)).unwrap();
        let after = manifold_scores(&MarginalInput::new(samples("r", &moved(&real)), samples("g", &moved(&gen)), k)).unwrap();
        prop_assert!((before.precision - after.precision).abs() <= 1e-9);
        prop_assert!((before.recall - after.recall).abs() <= 1e-9);
        prop_assert!((before.density - after.density).abs() <= 1e-9);
        prop_assert!((before.coverage - after.coverage).abs() <= 1e-9);
    }

    #[test]
    fn vendi_bounds_and_invariances(rows in cloud(4, 2..12), scale in 0.01f64..100.0, rot in 0usize..12) {
        prop_assume!(rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-6));
        let n = rows.len() as f64;
        let v = vendi(&rows, SimilarityKind::Cosine).unwrap();
        prop_assert!(v >= 1.0 - 1e-9 && v <= n + 1e-9);
        let mut permuted = rows.clone();
        permuted.rotate_left(rot % rows.len());
        prop_assert!((vendi(&permuted, SimilarityKind::Cosine).unwrap() - v).abs() <= 1e-9);
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x * scale).collect()).collect();
        prop_assert!((vendi(&scaled, SimilarityKind::Cosine).unwrap() - v).abs() <= 1e-9);
    }

    #[test]
    fn validation_is_idempotent(ids in prop::collection::vec(0u8..6, 1..12), dims in prop::collection::vec(2usize..4, 12)) {
        let mut table = EmbeddingTable::new(2);
        for (i, id) in ids.iter().enumerate() {
            let generated = i % 2 == 0;
            table.push(
                EmbeddingRowMeta {
                    record_id: rid(&format!("x{id}")),
                    prompt_id: PromptId::new("p").unwrap(),
                    group_id: None,
                    role: if generated { Role::Generated } else { Role::Real },
                    config_id: generated.then(|| ConfigId::new("c").unwrap()),
                },
                vec![0.5; dims[i]],
            );
        }
        let snapshot = table.clone();
        let first = validate_table(&table);
        prop_assert_eq!(&first, &validate_table(&table));
        prop_assert_eq!(&snapshot, &table);
    }

    #[test]
    fn verdict_log_round_trips(flags in prop::collection::vec(any::<bool>(), 1..20)) {
        let entries: Vec<Verdict> = flags
            .iter()
            .enumerate()
            .map(|(i, b)| Verdict {
                prompt_id: PromptId::new(format!("p{}", i % 3)).unwrap(),
                record_id: rid(&format!("r{i}")),
                question_id: format!("q{}", i % 2),
                verdict: *b,
            })
            .collect();
        let log = VerdictLog::new(entries).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.jsonl");
        store::write_verdicts(&log, &path).unwrap();
        prop_assert_eq!(store::read_verdicts(&path).unwrap(), log);
    }

    #[test]
    fn prompt_embeddings_round_trip(vals in prop::collection::vec(prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 3), 1..6)) {
        let prompts: store::PromptEmbeddings = vals
            .iter()
            .enumerate()
            .map(|(i, v)| (PromptId::new(format!("p{i}")).unwrap(), v.clone()))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        store::write_prompt_embeddings(&prompts, &path).unwrap();
        prop_assert_eq!(store::read_prompt_embeddings(&path).unwrap(), prompts);
    }

    #[test]
    fn dominated_points_do_not_move_the_front(
        base in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..10),
        pick in 0usize..10,
        shrink in 0.001f64..0.5,
    ) {
        let registry = AxisRegistry::from_tokens([(axis::DSG_CONSISTENCY, "max"), (axis::COND_DIVERSITY, "max")]).unwrap();
        let axes = [axis::DSG_CONSISTENCY, axis::COND_DIVERSITY];
        let point = |id: String, (c, d): (f64, f64)| {
            let mut p = MetricPoint::new(ConfigId::new(id).unwrap(), GroupId::all());
            p.scores.insert(axis::DSG_CONSISTENCY.into(), c);
            p.scores.insert(axis::COND_DIVERSITY.into(), d);
            p
        };
        let mut points: Vec<MetricPoint> = base.iter().enumerate().map(|(i, xy)| point(format!("c{i:02}"), *xy)).collect();
        let before = pareto_front(&points, &axes, &registry).unwrap();
        let (c, d) = base[pick % base.len()];
        points.push(point("extra".into(), (c - shrink, d - shrink)));
        let after = pareto_front(&points, &axes, &registry).unwrap();
        prop_assert_eq!(before.front, after.front);
        prop_assert!(after.dominated.contains(&ConfigId::new("extra").unwrap()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn sweeps_are_pure(seed in any::<u64>()) {
        let world = demo_world();
        let sweep = demo_sweep();
        let data = emit_world_dataset(&world, &sweep, 6, seed).unwrap();
        let snapshot = data.clone();
        let mut plan = SweepPlan::new(sweep, AxisRegistry::default());
        plan.group_by = true;
        let inputs = SweepInputs {
            table: &data.table,
            verdicts: Some(&data.verdicts),
            prompt_embeddings: Some(&data.prompt_embeddings),
        };
        let first = run_sweep(&plan, inputs).unwrap();
        let second = run_sweep(&plan, inputs).unwrap();
        prop_assert_eq!(&first, &second);
        prop_assert_eq!(&snapshot, &data);
        prop_assert_eq!(&data, &emit_world_dataset(&world, &demo_sweep(), 6, seed).unwrap());
    }

    #[test]
    fn compression_error_shrinks_with_rate(seed in any::<u64>()) {
        let world = demo_world();
        let p = world.prompts[0].prompt_id.clone();
        let clean = sample_cfg(&world, &p, 1.0, 40, seed).unwrap();
        let err = |bpp: f64| -> f64 {
            let out = compress_knob(&clean, bpp, world.budget_bits, seed).unwrap();
            clean
                .iter()
                .zip(&out)
                .map(|(a, b)| common::dist(&a.vector, &b.vector))
                .sum::<f64>()
        };
        prop_assert!(err(0.5) < err(0.1));
        prop_assert!(err(0.1) < err(0.02));
    }
}

#[test]
fn guidance_mixture_has_expected_mean() {
    let world = demo_world();
    let p = &world.prompts[1];
    let n = 4000;
    for lambda in [0.5, 1.0, 3.0] {
        let draws = sample_cfg(&world, &p.prompt_id, lambda, n, 7).unwrap();
        for d in 0..world.dim {
            let mean = draws.iter().map(|s| s.vector[d]).sum::<f64>() / n as f64;
            let expect = lambda * p.mean[d] + (1.0 - lambda) * world.uncond_mean[d];
            let sd = ((lambda * p.sigma).powi(2) + ((1.0 - lambda) * world.uncond_sigma).powi(2)).sqrt();
            assert!((mean - expect).abs() < 5.0 * sd / (n as f64).sqrt(), "lambda {lambda} dim {d}: {mean} vs {expect}");
        }
    }
}

#[test]
fn six_groups_get_independent_fronts() {
    let registry = AxisRegistry::default();
    let axes = [axis::DSG_CONSISTENCY, axis::COND_DIVERSITY, axis::COND_REALISM];
    let regions = ["africa", "americas", "east-asia", "europe", "southeast-asia", "west-asia"];
    let mut points = Vec::new();
    for (g, region) in regions.iter().enumerate() {
        for c in 0..5 {
            let mut p = MetricPoint::new(ConfigId::new(format!("cfg{c}")).unwrap(), GroupId::new(*region).unwrap());
            let t = (c + g) % 5;
            p.scores.insert(axis::DSG_CONSISTENCY.into(), t as f64 / 4.0);
            p.scores.insert(axis::COND_DIVERSITY.into(), 1.0 - t as f64 / 4.0);
            p.scores.insert(axis::COND_REALISM.into(), if c == g % 5 { 0.1 } else { 0.5 });
            points.push(p);
        }
    }
    let fronts = fronts_by_group(&points, &axes, &registry).unwrap();
    assert_eq!(fronts.len(), 6);
    for (g, region) in regions.iter().enumerate() {
        let own: Vec<MetricPoint> = points.iter().filter(|p| p.group_id.as_str() == *region).cloned().collect();
        let alone = pareto_front(&own, &axes, &registry).unwrap();
        let grouped = &fronts[&GroupId::new(*region).unwrap()];
        assert_eq!(grouped, &alone);
        assert_eq!(grouped.front.len(), 5, "{region} {g}");
    }
}
