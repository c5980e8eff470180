use proptest::prelude::*;
use relic_core::metrics::{erdos_renyi, overlap_graph, Graph};
use relic_core::refine::{is_finer, meet_refinement, Partition};
use relic_core::rng::seeded;
use relic_core::Tensor;

#[test]
fn partition_enumeration_matches_bell_numbers() {
    let bell = [1, 1, 2, 5, 15, 52, 203, 877];
    for (n, &b) in bell.iter().enumerate() {
        let all = Partition::all(n);
        assert_eq!(all.len(), b, "n = {n}");
        for (i, p) in all.iter().enumerate() {
            for q in &all[i + 1..] {
                assert_ne!(p, q);
            }
        }
    }
}

fn tasks() -> impl Strategy<Value = (usize, Vec<Vec<usize>>)> {
    (1usize..=6, 1usize..=4).prop_flat_map(|(n, k)| {
        (Just(n), prop::collection::vec(prop::collection::vec(0..n, n), k))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    // The meet is the unique coarsest partition finer than every task,
    // found here by scanning every partition of the ground set.
    #[test]
    fn meet_matches_exhaustive_search((n, labels) in tasks()) {
        let ts: Vec<Partition> = labels.iter().map(|l| Partition::from_labels(l)).collect();
        let common: Vec<Partition> = Partition::all(n)
            .into_iter()
            .filter(|p| ts.iter().all(|t| is_finer(p, t).unwrap()))
            .collect();
        let coarsest: Vec<&Partition> = common
            .iter()
            .filter(|p| common.iter().all(|q| is_finer(q, p).unwrap()))
            .collect();
        prop_assert_eq!(coarsest.len(), 1);
        prop_assert_eq!(&meet_refinement(&ts).unwrap(), coarsest[0]);
    }
}

fn floyd_warshall(g: &Graph) -> Vec<Vec<Option<usize>>> {
    let n = g.len();
    let mut d = vec![vec![None; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = Some(0);
        for &j in &g.adj[i] {
            row[j] = Some(1);
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if let (Some(a), Some(b)) = (d[i][k], d[k][j]) {
                    if d[i][j].is_none_or(|c| a + b < c) {
                        d[i][j] = Some(a + b);
                    }
                }
            }
        }
    }
    d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bfs_diameter_matches_floyd_warshall(n in 1usize..=50, p in 0.0f64..0.3, seed in any::<u64>()) {
        let g = erdos_renyi(n, p, &mut seeded(seed));
        let d = floyd_warshall(&g);
        for (s, row) in d.iter().enumerate() {
            prop_assert_eq!(&g.bfs(s), row);
        }
        let fw = d.iter().flatten().try_fold(0, |m, x| x.map(|x| m.max(x)));
        prop_assert_eq!(g.diameter(), fw);
        prop_assert_eq!(g.is_connected(), fw.is_some());
        let degree: usize = g.adj.iter().map(Vec::len).sum();
        prop_assert_eq!(g.edge_count() * 2, degree);
    }

    #[test]
    fn overlap_graph_matches_pairwise_distances(pts in prop::collection::vec(-1.0f64..1.0, 2..60), r in 0.05f64..0.6) {
        let n = pts.len() / 2;
        prop_assume!(n >= 1);
        let x = Tensor::matrix(n, 2, pts[..2 * n].to_vec()).unwrap();
        let g = overlap_graph(&x, r).unwrap();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d2 = (x.at(i, 0) - x.at(j, 0)).powi(2) + (x.at(i, 1) - x.at(j, 1)).powi(2);
                prop_assert_eq!(g.adj[i].contains(&j), d2 <= 4.0 * r * r);
            }
        }
    }
}

#[test]
fn collinear_points_at_twice_the_radius_form_a_path() {
    let x = Tensor::matrix(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
    let g = overlap_graph(&x, 0.5).unwrap();
    assert_eq!(g.edge_count(), 2);
    assert_eq!(g.diameter(), Some(2));
}
