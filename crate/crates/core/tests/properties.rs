use ndarray::Array2;
use proptest::prelude::*;

use iuf_core::eval::{self, Cell, Level, ScoreMatrix};
use iuf_core::linalg;
use iuf_core::losses::{self, LossWeights};
use iuf_core::model::oasa_attention;
use iuf_core::optimizer::{
    capture_basis, reinforced_step, suppression_multipliers, vanilla_step, ChannelProjector,
    RetainMode, UpdateConfig,
};

fn matrix(
    rows: std::ops::RangeInclusive<usize>,
    cols: std::ops::RangeInclusive<usize>,
) -> impl Strategy<Value = Array2<f64>> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c)
            .prop_map(move |v| Array2::from_shape_vec((r, c), v).unwrap())
    })
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..8).prop_map(|x| x as f64 / 4.0 - 1.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(s, mut l)| {
                l[0] = true;
                l[1] = false;
                (s, l)
            })
    })
}

proptest! {
    #[test]
    fn auroc_ignores_strictly_monotone_transforms((scores, labels) in scored_labels()) {
        let base = eval::auroc(&scores, &labels).unwrap();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let cubic: Vec<f64> = scores.iter().map(|s| 2.0 * s * s * s + 7.0).collect();
        prop_assert_eq!(base, eval::auroc(&exp, &labels).unwrap());
        prop_assert_eq!(base, eval::auroc(&cubic, &labels).unwrap());
    }

    #[test]
    fn auroc_flips_with_labels((scores, labels) in scored_labels()) {
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let a = eval::auroc(&scores, &labels).unwrap();
        let b = eval::auroc(&scores, &flipped).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn acc_is_order_free(mut row in prop::collection::vec(0.0f64..=1.0, 1..12), seed in any::<u64>()) {
        // rational inputs keep the sum exact regardless of order
        for v in row.iter_mut() {
            *v = (*v * 64.0).round() / 64.0;
        }
        let a = eval::acc(&row.iter().copied().map(Some).collect::<Vec<_>>()).unwrap();
        let mut shuffled = row.clone();
        let n = shuffled.len();
        shuffled.rotate_left((seed as usize) % n);
        shuffled.reverse();
        let b = eval::acc(&shuffled.into_iter().map(Some).collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn fm_is_order_free_over_earlier_tasks(
        history in prop::collection::vec(prop::collection::vec((0u8..=16).prop_map(|x| x as f64 / 16.0), 3), 2..5),
        newest in (0u8..=16).prop_map(|x| x as f64 / 16.0),
    ) {
        // three early objects seen at every step, one extra object in the final row
        let build = |order: &[usize]| {
            let mut m = ScoreMatrix::default();
            let last = history.len() - 1;
            for (b, row) in history.iter().enumerate() {
                let mut cells: Vec<Cell> = order
                    .iter()
                    .map(|&i| Cell { object_id: i, pixel: Some(row[i]), image: Some(row[i]) })
                    .collect();
                if b == last {
                    cells.push(Cell { object_id: 3, pixel: Some(newest), image: Some(newest) });
                }
                m.push_row(cells).unwrap();
            }
            m
        };
        let a = build(&[0, 1, 2]).fm(Level::Image).unwrap();
        let b = build(&[2, 0, 1]).fm(Level::Image).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn svd_factors_are_orthonormal_and_reconstruct(m in matrix(1..=9, 1..=9)) {
        let svd = linalg::svd_full(&m).unwrap();
        prop_assert!(linalg::orthonormality_error(&svd.vt) < 1e-10);
        prop_assert!(linalg::orthonormality_error(&svd.u.t().to_owned()) < 1e-10);
        prop_assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
        let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
        let err = (&linalg::reconstruct(&svd) - &m).iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(err <= 1e-9 * norm.max(1.0));
    }

    #[test]
    fn compression_loss_is_nonnegative_and_bounded(m in matrix(2..=6, 2..=8)) {
        let w = LossWeights::default();
        let term = losses::scl_term(&m, &w).unwrap();
        let s = losses::svd_decompose(&m).unwrap().s;
        prop_assert!(term.value >= 0.0);
        prop_assert!(term.value <= s.iter().sum::<f64>() + 1e-12);
    }

    #[test]
    fn identity_projection_is_vanilla(theta in matrix(4..=4, 1..=5), lr in 1e-4f64..1.0) {
        let grad = theta.mapv(|x| x.sin());
        let cfg = UpdateConfig { lr, beta: 0.0, kappa: 0.5, retain_mode: RetainMode::Pull };
        let proj = ChannelProjector::new(Array2::eye(4), vec![1.0; 4]).unwrap();
        let got = reinforced_step(&theta, &grad, &theta, Some(&proj), &cfg).unwrap();
        let want = vanilla_step(&theta, &grad, lr);
        prop_assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn projected_update_never_grows(rows in matrix(3..=8, 5..=5), delta in matrix(5..=5, 1..=4), kappa in 0.01f64..2.0) {
        let basis = capture_basis(&[rows], 5, None, Vec::new()).unwrap();
        let proj = ChannelProjector::from_basis(&basis, kappa);
        let out = proj.filter(&delta).unwrap();
        let n = |a: &Array2<f64>| a.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(n(&out) <= n(&delta) + 1e-10);
        // the leading direction is never moved
        let lead = basis.vt_old.row(0).dot(&out);
        prop_assert!(lead.iter().all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn multipliers_are_monotone_in_rank(kappa in 0.0f64..5.0, c in 1usize..70) {
        let m = suppression_multipliers(kappa, c);
        prop_assert_eq!(m[0], 0.0);
        prop_assert!(m.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(m.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn attention_rows_are_distributions(
        q in matrix(1..=8, 3..=3),
        k in matrix(1..=8, 3..=3),
        gate in prop::collection::vec(0.0f64..2.0, 3),
    ) {
        let gate = Array2::from_shape_vec((1, 3), gate).unwrap();
        let eye = Array2::<f64>::eye(k.nrows());
        let a = oasa_attention(&gate, &q, &k, &eye).unwrap();
        for row in a.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn zero_gate_gives_uniform_attention(q in matrix(1..=6, 4..=4), k in matrix(1..=6, 4..=4)) {
        let eye = Array2::<f64>::eye(k.nrows());
        let a = oasa_attention(&Array2::zeros((1, 4)), &q, &k, &eye).unwrap();
        let u = 1.0 / k.nrows() as f64;
        prop_assert!(a.iter().all(|&x| (x - u).abs() < 1e-12));
    }
}
