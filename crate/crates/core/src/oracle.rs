//! Exact optimal-tour solvers and the classical construction heuristics
//! used as benchmark baselines.
//!
//! The exact side is a brute-force enumerator (tiny instances, used to
//! cross-check everything else) and a Held-Karp dynamic program over
//! node subsets. Both return the optimal tour anchored at node 0 and
//! direction-normalized, so repeated runs and independent
//! implementations produce identical golden data.

use crate::geom::{pairwise_distances, SquareMatrix, Tour, TspInstance};
use crate::rng::SplitMix64;
use crate::{Error, Result};

/// Brute force stays cheap up to 8! permutations.
pub const BRUTE_FORCE_MAX_N: usize = 9;

/// Default Held-Karp cap: the (subset, end) table stays under ~40 MB.
pub const HELD_KARP_MAX_N: usize = 18;

/// Absolute ceiling for the configurable Held-Karp cap (~360 MB table).
pub const HELD_KARP_HARD_MAX_N: usize = 22;

/// Exhaustive search over all tours anchored at node 0, `n <= 9`.
///
/// Permutations of the remaining nodes are visited in lexicographic
/// order and only strict improvements are kept, so the result is the
/// lexicographically first optimal tour.
pub fn solve_brute_force(instance: &TspInstance) -> Result<Tour> {
    let n = instance.n();
    if n > BRUTE_FORCE_MAX_N {
        return Err(Error::SizeLimit(format!(
            "brute force supports n <= {BRUTE_FORCE_MAX_N}, got {n}"
        )));
    }
    let d = pairwise_distances(instance);
    let mut rest: Vec<usize> = (1..n).collect();
    let mut best_order: Vec<usize> = Vec::new();
    let mut best_len = f64::INFINITY;
    loop {
        let mut len = d.get(0, rest[0]);
        for w in rest.windows(2) {
            len += d.get(w[0], w[1]);
        }
        len += d.get(rest[n - 2], 0);
        if len < best_len {
            best_len = len;
            best_order = rest.clone();
        }
        if !next_permutation(&mut rest) {
            break;
        }
    }
    let mut order = Vec::with_capacity(n);
    order.push(0);
    order.extend_from_slice(&best_order);
    Ok(Tour::new(order)?.canonical_undirected())
}

/// Lexicographic next permutation; false once the sequence is the last.
fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Held-Karp with the default size cap.
pub fn solve_held_karp(instance: &TspInstance) -> Result<Tour> {
    solve_held_karp_capped(instance, HELD_KARP_MAX_N)
}

/// Held-Karp dynamic program over (visited subset, end node), anchored
/// at node 0. `cap` may be raised to at most [`HELD_KARP_HARD_MAX_N`]
/// when the extra table memory is acceptable.
pub fn solve_held_karp_capped(instance: &TspInstance, cap: usize) -> Result<Tour> {
    let n = instance.n();
    if cap > HELD_KARP_HARD_MAX_N {
        return Err(Error::SizeLimit(format!(
            "held-karp cap {cap} above hard ceiling {HELD_KARP_HARD_MAX_N}"
        )));
    }
    if n > cap {
        return Err(Error::SizeLimit(format!(
            "held-karp supports n <= {cap}, got {n}"
        )));
    }
    let d = pairwise_distances(instance);
    let m = n - 1; // nodes 1..n live on bits 0..m
    let full: usize = (1 << m) - 1;

    // g[mask * m + e] = shortest path 0 -> ... -> (e+1) visiting exactly
    // the nodes of mask; parent stores the predecessor bit for backtrack.
    let mut g = vec![f64::INFINITY; (full + 1) * m];
    let mut parent = vec![u8::MAX; (full + 1) * m];
    for e in 0..m {
        g[(1 << e) * m + e] = d.get(0, e + 1);
    }
    for mask in 1..=full {
        if mask.count_ones() < 2 {
            continue;
        }
        let base = mask * m;
        let mut ebits = mask;
        while ebits != 0 {
            let e = ebits.trailing_zeros() as usize;
            ebits &= ebits - 1;
            let prev_mask = mask & !(1 << e);
            let prev_base = prev_mask * m;
            let mut best = f64::INFINITY;
            let mut best_p = u8::MAX;
            let mut pbits = prev_mask;
            while pbits != 0 {
                let p = pbits.trailing_zeros() as usize;
                pbits &= pbits - 1;
                let cand = g[prev_base + p] + d.get(p + 1, e + 1);
                if cand < best {
                    best = cand;
                    best_p = p as u8;
                }
            }
            g[base + e] = best;
            parent[base + e] = best_p;
        }
    }

    let mut best_end = 0usize;
    let mut best_total = f64::INFINITY;
    for e in 0..m {
        let total = g[full * m + e] + d.get(e + 1, 0);
        if total < best_total {
            best_total = total;
            best_end = e;
        }
    }

    let mut order = vec![0usize; n];
    let mut mask = full;
    let mut e = best_end;
    for slot in (1..n).rev() {
        order[slot] = e + 1;
        let p = parent[mask * m + e];
        mask &= !(1 << e);
        if mask == 0 {
            break;
        }
        e = p as usize;
    }
    Ok(Tour::new(order)?.canonical_undirected())
}

/// Greedy nearest-neighbor construction from `start`; distance ties go
/// to the lower node index.
pub fn nearest_neighbor(instance: &TspInstance, start: usize) -> Result<Tour> {
    let n = instance.n();
    if start >= n {
        return Err(Error::InvalidArgument(format!(
            "start index {start} out of range for n = {n}"
        )));
    }
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut current = start;
    visited[current] = true;
    order.push(current);
    for _ in 1..n {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for j in 0..n {
            if !visited[j] {
                let dj = instance.dist(current, j);
                if dj < best_d {
                    best_d = dj;
                    best = j;
                }
            }
        }
        visited[best] = true;
        order.push(best);
        current = best;
    }
    Tour::new(order)
}

/// City-selection rule for the insertion construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertionRule {
    Nearest,
    Random,
    Farthest,
}

impl std::str::FromStr for InsertionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(InsertionRule::Nearest),
            "random" => Ok(InsertionRule::Random),
            "farthest" => Ok(InsertionRule::Farthest),
            other => Err(Error::InvalidArgument(format!(
                "unknown insertion rule '{other}' (expected nearest|random|farthest)"
            ))),
        }
    }
}

/// Insertion construction heuristic.
///
/// Starts from a 3-node sub-tour chosen by the rule (closest pair plus
/// the city nearest to it, farthest pair plus the city farthest from
/// it, or three random cities), then repeatedly selects the next city
/// by the rule and inserts it at the position that adds the least
/// length. A city's distance to the sub-tour is its minimum distance
/// over sub-tour cities; ties go to the lower index.
pub fn insertion(instance: &TspInstance, rule: InsertionRule, seed: u64) -> Result<Tour> {
    let n = instance.n();
    let d = pairwise_distances(instance);
    let mut rng = SplitMix64::new(seed);
    let mut in_tour = vec![false; n];
    let mut order: Vec<usize> = Vec::with_capacity(n);

    match rule {
        InsertionRule::Random => {
            while order.len() < 3 {
                let c = rng.next_below(n as u64) as usize;
                if !in_tour[c] {
                    in_tour[c] = true;
                    order.push(c);
                }
            }
        }
        InsertionRule::Nearest | InsertionRule::Farthest => {
            let nearest = rule == InsertionRule::Nearest;
            let (mut bi, mut bj) = (0, 1);
            let mut best = d.get(0, 1);
            for i in 0..n {
                for j in (i + 1)..n {
                    let dij = d.get(i, j);
                    if (nearest && dij < best) || (!nearest && dij > best) {
                        best = dij;
                        bi = i;
                        bj = j;
                    }
                }
            }
            in_tour[bi] = true;
            in_tour[bj] = true;
            order.push(bi);
            order.push(bj);
            let third = select_city(&d, &in_tour, nearest).unwrap();
            in_tour[third] = true;
            order.push(third);
        }
    }

    while order.len() < n {
        let city = match rule {
            InsertionRule::Nearest => select_city(&d, &in_tour, true).unwrap(),
            InsertionRule::Farthest => select_city(&d, &in_tour, false).unwrap(),
            InsertionRule::Random => loop {
                let c = rng.next_below(n as u64) as usize;
                if !in_tour[c] {
                    break c;
                }
            },
        };
        let len = order.len();
        let mut best_pos = 0;
        let mut best_added = f64::INFINITY;
        for pos in 0..len {
            let a = order[pos];
            let b = order[(pos + 1) % len];
            let added = d.get(a, city) + d.get(city, b) - d.get(a, b);
            if added < best_added {
                best_added = added;
                best_pos = pos;
            }
        }
        order.insert(best_pos + 1, city);
        in_tour[city] = true;
    }
    Tour::new(order)
}

/// City outside the sub-tour with the smallest (nearest) or largest
/// (farthest) minimum distance to any sub-tour city.
fn select_city(d: &SquareMatrix<f64>, in_tour: &[bool], nearest: bool) -> Option<usize> {
    let n = in_tour.len();
    let mut best_city = None;
    let mut best_key = if nearest { f64::INFINITY } else { f64::NEG_INFINITY };
    for c in 0..n {
        if in_tour[c] {
            continue;
        }
        let mut to_tour = f64::INFINITY;
        for t in 0..n {
            if in_tour[t] {
                to_tour = to_tour.min(d.get(c, t));
            }
        }
        if (nearest && to_tour < best_key) || (!nearest && to_tour > best_key) {
            best_key = to_tour;
            best_city = Some(c);
        }
    }
    best_city
}

// Improvements smaller than this are treated as float noise so the
// local search terminates and is idempotent.
const TWO_OPT_EPS: f64 = 1e-12;

/// 2-opt local search: first-improvement scan over position pairs in
/// lexicographic order, restarting after every applied exchange, until
/// no exchange shortens the tour.
pub fn two_opt(instance: &TspInstance, tour: &Tour) -> Result<Tour> {
    let n = instance.n();
    if tour.n() != n {
        return Err(Error::InvalidArgument(format!(
            "tour over {} nodes does not fit instance with {n} nodes",
            tour.n()
        )));
    }
    let d = pairwise_distances(instance);
    let mut order = tour.order().to_vec();
    'scan: loop {
        for i in 0..n - 1 {
            for j in (i + 1)..n {
                if i == 0 && j == n - 1 {
                    continue; // same pair of edges as (i, j) = (0, n-1) wrap
                }
                let a = order[i];
                let b = order[i + 1];
                let c = order[j];
                let e = order[(j + 1) % n];
                let delta = d.get(a, c) + d.get(b, e) - d.get(a, b) - d.get(c, e);
                if delta < -TWO_OPT_EPS {
                    order[i + 1..=j].reverse();
                    continue 'scan;
                }
            }
        }
        break;
    }
    Tour::new(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::tour_length;
    use crate::rng::SplitMix64;

    fn random_instance(n: usize, seed: u64) -> TspInstance {
        let mut rng = SplitMix64::new(seed);
        TspInstance::new((0..n).map(|_| [rng.next_f64(), rng.next_f64()]).collect()).unwrap()
    }

    fn unit_square() -> TspInstance {
        TspInstance::new(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap()
    }

    #[test]
    fn brute_force_square() {
        let tour = solve_brute_force(&unit_square()).unwrap();
        assert_eq!(tour_length(&unit_square(), &tour).unwrap(), 4.0);
        assert_eq!(tour.order()[0], 0);
    }

    #[test]
    fn brute_force_triangle_is_perimeter() {
        let inst = random_instance(3, 5);
        let tour = solve_brute_force(&inst).unwrap();
        let perimeter = inst.dist(0, 1) + inst.dist(1, 2) + inst.dist(2, 0);
        assert!((tour_length(&inst, &tour).unwrap() - perimeter).abs() < 1e-12);
    }

    #[test]
    fn brute_force_size_cap() {
        let inst = random_instance(10, 1);
        assert!(matches!(solve_brute_force(&inst), Err(Error::SizeLimit(_))));
    }

    #[test]
    fn held_karp_trivial_cases() {
        let tour = solve_held_karp(&unit_square()).unwrap();
        assert_eq!(tour_length(&unit_square(), &tour).unwrap(), 4.0);
        let tri = TspInstance::new(vec![[0.0, 0.0], [0.3, 0.0], [0.3, 0.4]]).unwrap();
        let t = solve_held_karp(&tri).unwrap();
        assert!((tour_length(&tri, &t).unwrap() - 1.2).abs() < 1e-12);
    }

    #[test]
    fn held_karp_size_caps() {
        let inst = random_instance(19, 2);
        assert!(matches!(solve_held_karp(&inst), Err(Error::SizeLimit(_))));
        assert!(solve_held_karp_capped(&random_instance(4, 2), 30).is_err());
    }

    #[test]
    fn held_karp_matches_brute_force_on_200_instances() {
        for seed in 0..200u64 {
            let inst = random_instance(8, 1000 + seed);
            let bf = solve_brute_force(&inst).unwrap();
            let hk = solve_held_karp(&inst).unwrap();
            let lb = tour_length(&inst, &bf).unwrap();
            let lh = tour_length(&inst, &hk).unwrap();
            assert_eq!(lb, lh, "seed {seed}: brute {lb} != held-karp {lh}");
        }
    }

    #[test]
    fn held_karp_matches_brute_force_across_sizes() {
        for n in 4..=9 {
            for seed in 0..10u64 {
                let inst = random_instance(n, 7000 + seed);
                let lb = tour_length(&inst, &solve_brute_force(&inst).unwrap()).unwrap();
                let lh = tour_length(&inst, &solve_held_karp(&inst).unwrap()).unwrap();
                assert_eq!(lb, lh, "n {n} seed {seed}");
            }
        }
    }

    #[test]
    fn nearest_neighbor_hand_traced() {
        let inst =
            TspInstance::new(vec![[0.0, 0.0], [0.2, 0.0], [0.5, 0.0], [0.1, 0.0]]).unwrap();
        let tour = nearest_neighbor(&inst, 0).unwrap();
        assert_eq!(tour.order(), &[0, 3, 1, 2]);
        assert!((tour_length(&inst, &tour).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_neighbor_optimal_on_triangle() {
        let inst = random_instance(3, 9);
        let nn = nearest_neighbor(&inst, 0).unwrap();
        let opt = solve_brute_force(&inst).unwrap();
        let ln = tour_length(&inst, &nn).unwrap();
        let lo = tour_length(&inst, &opt).unwrap();
        assert!((ln - lo).abs() < 1e-12);
    }

    #[test]
    fn insertion_triangle_and_determinism() {
        let inst = random_instance(3, 21);
        for rule in [InsertionRule::Nearest, InsertionRule::Random, InsertionRule::Farthest] {
            let t = insertion(&inst, rule, 4).unwrap();
            assert_eq!(t.n(), 3);
        }
        let inst = random_instance(12, 22);
        let a = insertion(&inst, InsertionRule::Random, 99).unwrap();
        let b = insertion(&inst, InsertionRule::Random, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn insertion_rule_parsing() {
        assert_eq!("farthest".parse::<InsertionRule>().unwrap(), InsertionRule::Farthest);
        assert!(matches!(
            "bogus".parse::<InsertionRule>(),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn two_opt_uncrosses_square() {
        let inst = unit_square();
        let crossed = Tour::new(vec![0, 2, 1, 3]).unwrap();
        let before = tour_length(&inst, &crossed).unwrap();
        assert!((before - (2.0 + 2.0 * std::f64::consts::SQRT_2)).abs() < 1e-9);
        let fixed = two_opt(&inst, &crossed).unwrap();
        assert_eq!(tour_length(&inst, &fixed).unwrap(), 4.0);
    }

    #[test]
    fn two_opt_leaves_optimum_alone() {
        for seed in 0..10u64 {
            let inst = random_instance(8, 300 + seed);
            let opt = solve_brute_force(&inst).unwrap();
            let after = two_opt(&inst, &opt).unwrap();
            let lo = tour_length(&inst, &opt).unwrap();
            let la = tour_length(&inst, &after).unwrap();
            assert!((lo - la).abs() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn two_opt_never_lengthens_and_is_idempotent() {
        for seed in 0..100u64 {
            let inst = random_instance(10, 500 + seed);
            let nn = nearest_neighbor(&inst, 0).unwrap();
            let improved = two_opt(&inst, &nn).unwrap();
            let before = tour_length(&inst, &nn).unwrap();
            let after = tour_length(&inst, &improved).unwrap();
            assert!(after <= before + 1e-12, "seed {seed}");
            let again = two_opt(&inst, &improved).unwrap();
            assert_eq!(improved, again, "seed {seed}: 2-opt not idempotent");
        }
    }

    #[test]
    fn heuristics_never_beat_the_exact_solver() {
        for seed in 0..20u64 {
            let inst = random_instance(9, 800 + seed);
            let opt = tour_length(&inst, &solve_held_karp(&inst).unwrap()).unwrap();
            let candidates = [
                nearest_neighbor(&inst, 0).unwrap(),
                insertion(&inst, InsertionRule::Nearest, seed).unwrap(),
                insertion(&inst, InsertionRule::Random, seed).unwrap(),
                insertion(&inst, InsertionRule::Farthest, seed).unwrap(),
            ];
            for t in candidates {
                assert!(tour_length(&inst, &t).unwrap() >= opt - 1e-9);
            }
        }
    }
}
