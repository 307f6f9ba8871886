//! Candidate scoring and checkpoint round trips.

use bridgeprompt::checkpoint::{decode, encode};
use bridgeprompt::evaluation::{t0_score, MetricColumn, MetricTable, Orientation};
use bridgeprompt::numerics::{NamedTensors, Tensor};
use proptest::prelude::*;

fn table(rows: &[(&str, Vec<f64>)], orientations: &[Orientation]) -> MetricTable {
    let columns = orientations
        .iter()
        .enumerate()
        .map(|(j, &o)| MetricColumn::new(format!("m{j}"), o))
        .collect();
    let mut t = MetricTable::new(columns).unwrap();
    for (label, values) in rows {
        t.push_row(*label, values.clone()).unwrap();
    }
    t
}

#[test]
fn hand_worked_three_by_two() {
    // psnr (higher) and mse (lower) for three candidates.
    let t = table(
        &[("a", vec![20.0, 0.30]), ("b", vec![25.0, 0.10]), ("c", vec![30.0, 0.20])],
        &[Orientation::HigherBetter, Orientation::LowerBetter],
    );
    let s = t0_score(&t).unwrap();
    // a: (0 + 0)/2, b: (0.5 + 1)/2, c: (1 + 0.5)/2
    let want = [0.0, 0.75, 0.75];
    for (got, want) in s.scores.iter().zip(want) {
        assert!((got - want).abs() < 1e-15);
    }
    assert_eq!(s.best(), 1);
    assert!(s.warnings.is_empty());
}

#[test]
fn constant_column_warns_and_keeps_the_ranking() {
    let base = [("a", vec![1.0, 5.0]), ("b", vec![3.0, 2.0]), ("c", vec![2.0, 4.0])];
    let o = [Orientation::HigherBetter, Orientation::LowerBetter];
    let plain = t0_score(&table(&base, &o)).unwrap();
    let padded: Vec<(&str, Vec<f64>)> = base
        .iter()
        .map(|(l, v)| (*l, [v.clone(), vec![7.0]].concat()))
        .collect();
    let with_const = t0_score(&table(&padded, &[o[0], o[1], Orientation::HigherBetter])).unwrap();
    assert_eq!(with_const.warnings.len(), 1);
    assert_eq!(plain.best(), with_const.best());
    for (a, b) in plain.scores.iter().zip(&with_const.scores) {
        assert!((b - (2.0 * a + 0.5) / 3.0).abs() < 1e-12);
    }
}

#[test]
fn fewer_than_two_candidates_rejected() {
    let t = table(&[("a", vec![1.0])], &[Orientation::HigherBetter]);
    assert!(t0_score(&t).is_err());
}

proptest! {
    #[test]
    fn scores_invariant_under_positive_affine_rescale(
        cells in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 3), 2..7),
        scale in prop::collection::vec(0.01f64..50.0, 3),
        shift in prop::collection::vec(-100.0f64..100.0, 3),
    ) {
        let o = [Orientation::HigherBetter, Orientation::LowerBetter, Orientation::HigherBetter];
        let rows: Vec<(&str, Vec<f64>)> = cells.iter().map(|r| ("r", r.clone())).collect();
        let moved: Vec<(&str, Vec<f64>)> = cells
            .iter()
            .map(|r| ("r", r.iter().enumerate().map(|(j, v)| scale[j] * v + shift[j]).collect()))
            .collect();
        let a = t0_score(&table(&rows, &o)).unwrap();
        let b = t0_score(&table(&moved, &o)).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            prop_assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
        prop_assert!(a.scores.iter().all(|s| (0.0..=1.0).contains(s)));
    }

    #[test]
    fn checkpoint_round_trip_is_exact_in_f32(
        entries in prop::collection::btree_map(
            "[a-z][a-z0-9._]{0,12}",
            (1usize..4, 1usize..5).prop_flat_map(|(r, c)| {
                prop::collection::vec(-1e6f32..1e6, r * c).prop_map(move |v| (r, c, v))
            }),
            0..6,
        )
    ) {
        let tensors: NamedTensors = entries
            .into_iter()
            .map(|(name, (r, c, v))| (name, Tensor::new(vec![r, c], v.into_iter().map(f64::from).collect()).unwrap()))
            .collect();
        let bytes = encode(&tensors).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), tensors.len());
        for (name, t) in &tensors {
            prop_assert!(back[name].bitwise_eq(t));
        }
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }
}
