use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqcal_core::analysis::{dominates, pareto_frontier, Orientation, ParetoPoint};

pub fn brute_force_frontier(points: &[ParetoPoint], o: Orientation) -> Vec<ParetoPoint> {
    points
        .iter()
        .filter(|p| !points.iter().any(|q| dominates(q, p, o)))
        .cloned()
        .collect()
}

pub fn canonical(mut v: Vec<ParetoPoint>) -> Vec<(u64, u64, String)> {
    let mut out: Vec<(u64, u64, String)> = v.drain(..).map(|p| (p.a.to_bits(), p.b.to_bits(), p.label)).collect();
    out.sort();
    out
}

/// Checks the frontier of 1000 random point sets against the brute-force
/// filter.
pub fn check_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for set in 0..1000 {
        let n = rng.gen_range(1..60);
        // a coarse grid makes ties and duplicates common
        let coarse = set % 2 == 0;
        let points: Vec<ParetoPoint> = (0..n)
            .map(|i| {
                let (a, b) = if coarse {
                    (rng.gen_range(0..6) as f64, rng.gen_range(0..6) as f64)
                } else {
                    (rng.gen::<f64>(), rng.gen::<f64>())
                };
                ParetoPoint { a, b, label: format!("p{i}") }
            })
            .collect();
        let o = Orientation {
            maximize_a: rng.gen(),
            maximize_b: rng.gen(),
        };
        let front = pareto_frontier(&points, o);
        assert!(front.windows(2).all(|w| w[0].a <= w[1].a), "set {set}: not sorted along a");
        assert_eq!(canonical(front.clone()), canonical(brute_force_frontier(&points, o)), "set {set}");
        for p in &points {
            let on = front.contains(p);
            assert!(on || front.iter().any(|f| dominates(f, p, o)), "excluded point not dominated");
        }
        for f in &front {
            assert!(!front.iter().any(|g| dominates(g, f, o)));
        }
    }
}
