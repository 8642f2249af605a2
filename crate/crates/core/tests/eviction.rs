use kvzip::eviction::{
    allocate, allocate_headlevel, allocate_nonuniform, allocate_uniform, streaming_floor, BudgetMode, BudgetSpec,
    HeadAssignment,
};
use kvzip::kvcache::EvictionMask;
use kvzip::scoring::{aggregate_head, ScoreMethod, ScoreTensor};
use kvzip::tinylm::Role;
use proptest::prelude::*;

/// Scores on a coarse grid so ties are common.
fn tensor_strategy() -> impl Strategy<Value = ScoreTensor> {
    (1usize..=2, 1usize..=4, 1usize..=32).prop_flat_map(|(l, h, n)| {
        prop::collection::vec(0u8..6, l * h * n).prop_map(move |v| {
            let v = v.into_iter().map(|x| x as f32 / 5.0).collect();
            ScoreTensor::from_vec(l, h, n, v, ScoreMethod::Kvzip).unwrap()
        })
    })
}

/// Position `p` of row `(l, h)` is kept iff fewer than `k` candidates of the
/// layer beat it: higher score, or equal score at a smaller (head, position).
fn brute_force(s: &ScoreTensor, heads: &[usize], l: usize, k: usize) -> Vec<(usize, usize)> {
    let cand: Vec<(usize, usize)> = heads.iter().flat_map(|&h| (0..s.len()).map(move |p| (h, p))).collect();
    let beats = |a: (usize, usize), b: (usize, usize)| {
        let (sa, sb) = (s.get(l, a.0, a.1), s.get(l, b.0, b.1));
        sa > sb || (sa == sb && a < b)
    };
    cand.iter()
        .copied()
        .filter(|&c| cand.iter().filter(|&&o| beats(o, c)).count() < k)
        .collect()
}

fn kept(mask: &EvictionMask, l: usize, heads: &[usize]) -> Vec<(usize, usize)> {
    heads
        .iter()
        .flat_map(|&h| (0..mask.len()).filter(move |&p| mask.get(l, h, p)).map(move |p| (h, p)))
        .collect()
}

/// `ceil(i · n / 20)` in integers.
fn ceil_twentieths(i: usize, n: usize) -> usize {
    (i * n).div_ceil(20)
}

proptest! {
    #[test]
    fn nonuniform_matches_brute_force(s in tensor_strategy(), i in 1usize..=20) {
        let r = i as f64 / 20.0;
        let mask = allocate_nonuniform(&s, r).unwrap();
        let heads: Vec<usize> = (0..s.n_kv_heads()).collect();
        let k = ceil_twentieths(i, s.n_kv_heads() * s.len());
        for l in 0..s.n_layers() {
            prop_assert_eq!(mask.kept_in_layer(l), k);
            prop_assert_eq!(kept(&mask, l, &heads), brute_force(&s, &heads, l, k));
        }
    }

    #[test]
    fn uniform_matches_brute_force(s in tensor_strategy(), i in 1usize..=20) {
        let mask = allocate_uniform(&s, i as f64 / 20.0).unwrap();
        let k = ceil_twentieths(i, s.len());
        for l in 0..s.n_layers() {
            for h in 0..s.n_kv_heads() {
                prop_assert_eq!(mask.kept(l, h), k);
                prop_assert_eq!(kept(&mask, l, &[h]), brute_force(&s, &[h], l, k));
            }
        }
    }

    #[test]
    fn keep_sets_are_nested(s in tensor_strategy(), a in 1usize..=20, b in 1usize..=20) {
        let (lo, hi) = (a.min(b) as f64 / 20.0, a.max(b) as f64 / 20.0);
        prop_assert!(allocate_nonuniform(&s, lo).unwrap().is_subset_of(&allocate_nonuniform(&s, hi).unwrap()));
        prop_assert!(allocate_uniform(&s, lo).unwrap().is_subset_of(&allocate_uniform(&s, hi).unwrap()));
    }

    #[test]
    fn system_positions_survive_every_mode(s in tensor_strategy(), i in 1usize..=20, sys in 0usize..4) {
        let n = s.len();
        let mut roles = vec![Role::Context; n];
        for r in roles.iter_mut().take(sys.min(n)) {
            *r = Role::System;
        }
        for mode in BudgetMode::ALL {
            let mut spec = BudgetSpec::new(i as f64 / 20.0, mode);
            spec.sink = 1;
            spec.window = 1;
            if mode == BudgetMode::Headlevel && n < 2 {
                continue;
            }
            let mask = allocate(&s, None, &spec, &roles).unwrap();
            prop_assert!(mask.retains_role(&roles, Role::System));
        }
    }

    #[test]
    fn distinct_scores_are_permutation_equivariant(
        (s, perm) in tensor_strategy().prop_flat_map(|s| {
            let n = s.len();
            (Just(s), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
        }),
        i in 1usize..=20,
    ) {
        // make every score distinct, keeping the original order
        let (l_n, h_n, n) = (s.n_layers(), s.n_kv_heads(), s.len());
        let mut base = s.clone();
        for (idx, v) in base.as_slice().to_vec().into_iter().enumerate() {
            let (row, p) = (idx / n, idx % n);
            base.row_mut(row / h_n, row % h_n)[p] = v + idx as f32 * 1e-4;
        }
        let mut permuted = base.clone();
        for l in 0..l_n {
            for h in 0..h_n {
                for (p, &q) in perm.iter().enumerate() {
                    permuted.row_mut(l, h)[q] = base.get(l, h, p);
                }
            }
        }
        let r = i as f64 / 20.0;
        let (a, b) = (allocate_nonuniform(&base, r).unwrap(), allocate_nonuniform(&permuted, r).unwrap());
        for l in 0..l_n {
            for h in 0..h_n {
                for (p, &q) in perm.iter().enumerate() {
                    prop_assert_eq!(a.get(l, h, p), b.get(l, h, q));
                }
            }
        }
    }

    #[test]
    fn headlevel_meets_the_ratio_with_fewest_full_heads(
        s in tensor_strategy(), i in 1usize..=20, sink in 0usize..3, window in 0usize..4,
    ) {
        let n = s.len();
        prop_assume!(sink + window <= n);
        let head = aggregate_head(&s);
        let total = head.scores.len();
        let p = allocate_headlevel(&head, i as f64 / 20.0, sink, window, n).unwrap();
        let f = p.n_full();
        // 20·kept ≥ i·total·n, exact in integers
        let meets = |f: usize| 20 * (f * n + (total - f) * (sink + window)) >= i * total * n;
        prop_assert!(meets(f) || f == total);
        prop_assert!(f == 0 || !meets(f - 1));
        prop_assert_eq!(p.clamped, (i as f64 / 20.0) < streaming_floor(sink, window, n));
        let mask = p.to_mask(n);
        for l in 0..s.n_layers() {
            for h in 0..s.n_kv_heads() {
                let want = match p.get(l, h) {
                    HeadAssignment::Full => n,
                    HeadAssignment::Streaming => sink + window,
                };
                prop_assert_eq!(mask.kept(l, h), want);
            }
        }
        // every full head scores at least as high as every streaming head
        let full_min = (0..total).filter(|&k| p.heads[k] == HeadAssignment::Full).map(|k| head.scores[k]).fold(f32::INFINITY, f32::min);
        let stream_max = (0..total).filter(|&k| p.heads[k] == HeadAssignment::Streaming).map(|k| head.scores[k]).fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(full_min >= stream_max);
    }
}

#[test]
fn pinned_positions_rank_first() {
    let mut s = ScoreTensor::from_vec(
        1,
        2,
        6,
        vec![0.9, 0.8, 0.7, 0.6, 0.0, 0.0, 0.9, 0.8, 0.7, 0.6, 0.0, 0.0],
        ScoreMethod::SnapWindow,
    )
    .unwrap();
    s.pinned = vec![4, 5];
    let mask = allocate_uniform(&s, 0.5).unwrap();
    for h in 0..2 {
        assert_eq!(mask.row(0, h), &[true, false, false, false, true, true]);
    }
}
