//! Seeded k-means++ / Lloyd clustering over either descriptor family.
//!
//! Float descriptors use squared L2 with arithmetic-mean centers (k-means);
//! binary descriptors use Hamming distance with majority-vote centers
//! (k-medians in Hamming space). In both cases the center update minimizes
//! the cost of its cluster, so the recorded cost never increases.

use crate::descriptor::{centroid_of, cluster_cost, Descriptor, DescriptorKind};
use crate::rng::XorShift64Star;

use super::VocabError;

/// Seed pass plus ten Lloyd rounds.
pub const DEFAULT_MAX_ITERS: usize = 11;

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centers: Vec<Descriptor>,
    /// Index into `centers` for every input descriptor.
    pub assignments: Vec<usize>,
    /// Total cost after each assignment step, starting with the seeding pass.
    pub costs: Vec<f64>,
}

impl KMeansResult {
    pub fn final_cost(&self) -> f64 {
        *self.costs.last().unwrap_or(&0.0)
    }
}

pub fn kmeans(descs: &[Descriptor], k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult, VocabError> {
    let refs: Vec<&Descriptor> = descs.iter().collect();
    kmeans_refs(&refs, k, seed, max_iters)
}

/// k-means++ weight of a point at clustering cost `cost` from its nearest
/// chosen center: the squared distance.
fn seeding_weight(kind: DescriptorKind, cost: f64) -> f64 {
    match kind {
        DescriptorKind::Binary => cost * cost,
        DescriptorKind::Float => cost,
    }
}

pub(crate) fn kmeans_refs(
    descs: &[&Descriptor],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KMeansResult, VocabError> {
    if k == 0 {
        return Err(VocabError::ZeroK);
    }
    let first = *descs.first().ok_or(VocabError::EmptyInput)?;
    let sig = first.signature()?;
    for d in descs {
        sig.check(d)?;
    }
    let n = descs.len();
    if n <= k {
        return Ok(KMeansResult {
            centers: descs.iter().map(|d| (*d).clone()).collect(),
            assignments: (0..n).collect(),
            costs: vec![0.0],
        });
    }

    let mut centers = seed_centers(descs, k, sig.kind, seed);
    let mut assignments = vec![0usize; n];
    let mut point_costs = vec![0.0f64; n];
    let mut costs = vec![assign(descs, &centers, &mut assignments, &mut point_costs)];

    for _ in 1..max_iters.max(1) {
        update_centers(descs, &mut centers, &assignments);
        let before = assignments.clone();
        let cost = assign(descs, &centers, &mut assignments, &mut point_costs);
        costs.push(cost);
        if before == assignments {
            break;
        }
    }

    Ok(KMeansResult {
        centers,
        assignments,
        costs,
    })
}

fn seed_centers(descs: &[&Descriptor], k: usize, kind: DescriptorKind, seed: u64) -> Vec<Descriptor> {
    let mut rng = XorShift64Star::new(seed);
    let n = descs.len();
    let first = rng.below(n);
    let mut centers = vec![descs[first].clone()];
    let mut weights: Vec<f64> = descs
        .iter()
        .map(|d| seeding_weight(kind, cluster_cost(d, &centers[0])))
        .collect();
    while centers.len() < k {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            // Fewer distinct points than k; duplicate centers would stay empty.
            break;
        }
        let target = rng.next_f64() * total;
        let mut acc = 0.0;
        let mut chosen = None;
        for (i, w) in weights.iter().enumerate() {
            if *w <= 0.0 {
                continue;
            }
            acc += w;
            chosen = Some(i);
            if acc > target {
                break;
            }
        }
        let idx = chosen.expect("positive total weight");
        let c = descs[idx].clone();
        for (w, d) in weights.iter_mut().zip(descs) {
            let cand = seeding_weight(kind, cluster_cost(d, &c));
            if cand < *w {
                *w = cand;
            }
        }
        centers.push(c);
    }
    centers
}

/// Nearest-center assignment (ties to the lowest center index). Returns the
/// total cost.
fn assign(descs: &[&Descriptor], centers: &[Descriptor], assignments: &mut [usize], point_costs: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for (i, d) in descs.iter().enumerate() {
        let mut best = 0;
        let mut best_cost = f64::INFINITY;
        for (c, center) in centers.iter().enumerate() {
            let cost = cluster_cost(d, center);
            if cost < best_cost {
                best = c;
                best_cost = cost;
            }
        }
        assignments[i] = best;
        point_costs[i] = best_cost;
        total += best_cost;
    }
    total
}

/// Moves every center to its cluster's centroid; an empty cluster is reseeded
/// with the point lying farthest from its own (updated) center.
fn update_centers(descs: &[&Descriptor], centers: &mut [Descriptor], assignments: &[usize]) {
    let mut members: Vec<Vec<&Descriptor>> = vec![Vec::new(); centers.len()];
    for (d, &a) in descs.iter().zip(assignments) {
        members[a].push(d);
    }
    let mut empty = Vec::new();
    for (c, m) in members.iter().enumerate() {
        if m.is_empty() {
            empty.push(c);
        } else {
            centers[c] = centroid_of(m).expect("non-empty cluster with uniform signature");
        }
    }
    if empty.is_empty() {
        return;
    }
    let mut far: Vec<(f64, usize)> = descs
        .iter()
        .zip(assignments)
        .enumerate()
        .map(|(i, (d, &a))| (cluster_cost(d, &centers[a]), i))
        .collect();
    // Descending cost, ascending index on ties.
    far.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for (c, (_, i)) in empty.into_iter().zip(far) {
        centers[c] = descs[i].clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::XorShift64Star;

    fn f(v: &[f32]) -> Descriptor {
        Descriptor::Float(v.to_vec())
    }

    fn sq(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    /// Exhaustive optimum of the k-means objective over all assignments of
    /// `points` into at most `k` non-empty clusters.
    fn brute_force_optimum(points: &[Vec<f64>], k: usize) -> f64 {
        let n = points.len();
        let mut best = f64::INFINITY;
        let mut labels = vec![0usize; n];
        loop {
            let mut cost = 0.0;
            for c in 0..k {
                let members: Vec<&Vec<f64>> = points
                    .iter()
                    .zip(&labels)
                    .filter(|(_, l)| **l == c)
                    .map(|(p, _)| p)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let dim = members[0].len();
                let mean: Vec<f64> = (0..dim)
                    .map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64)
                    .collect();
                cost += members.iter().map(|p| sq(p, &mean)).sum::<f64>();
            }
            best = best.min(cost);
            // Odometer increment over k^n labelings.
            let mut i = 0;
            while i < n {
                labels[i] += 1;
                if labels[i] < k {
                    break;
                }
                labels[i] = 0;
                i += 1;
            }
            if i == n {
                return best;
            }
        }
    }

    #[test]
    fn two_separated_pairs() {
        let pts = vec![f(&[0.0, 0.0]), f(&[0.0, 2.0]), f(&[10.0, 10.0]), f(&[12.0, 10.0])];
        let oracle = brute_force_optimum(&[vec![0.0, 0.0], vec![0.0, 2.0], vec![10.0, 10.0], vec![12.0, 10.0]], 2);
        assert_eq!(oracle, 4.0);
        for seed in 0..20 {
            let r = kmeans(&pts, 2, seed, DEFAULT_MAX_ITERS).unwrap();
            let mut centers: Vec<Vec<f32>> = r.centers.iter().map(|c| c.as_float().unwrap().to_vec()).collect();
            centers.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
            assert_eq!(centers, vec![vec![0.0, 1.0], vec![11.0, 10.0]]);
            assert_eq!(r.final_cost(), oracle);
        }
    }

    #[test]
    fn k_equal_count_returns_inputs_in_order() {
        let pts = vec![f(&[3.0]), f(&[1.0]), f(&[2.0])];
        let r = kmeans(&pts, 3, 0, DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(r.centers, pts);
        assert_eq!(r.assignments, vec![0, 1, 2]);
    }

    #[test]
    fn zero_k_and_empty_input() {
        assert!(matches!(kmeans(&[f(&[1.0])], 0, 0, 5), Err(VocabError::ZeroK)));
        assert!(matches!(kmeans(&[], 2, 0, 5), Err(VocabError::EmptyInput)));
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let mut rng = XorShift64Star::new(1);
        let pts: Vec<Descriptor> = (0..200)
            .map(|_| f(&(0..8).map(|_| rng.normal() as f32).collect::<Vec<_>>()))
            .collect();
        let a = kmeans(&pts, 7, 99, DEFAULT_MAX_ITERS).unwrap();
        let b = kmeans(&pts, 7, 99, DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(a.centers, b.centers);
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.costs, b.costs);
    }

    #[test]
    fn cost_never_increases_float_and_binary() {
        let mut rng = XorShift64Star::new(2);
        for trial in 0..20 {
            let pts: Vec<Descriptor> = (0..150)
                .map(|_| f(&(0..6).map(|_| rng.normal() as f32).collect::<Vec<_>>()))
                .collect();
            let r = kmeans(&pts, 5, trial, 30).unwrap();
            for w in r.costs.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", r.costs);
            }
            let bits: Vec<Descriptor> = (0..150)
                .map(|_| Descriptor::Binary((0..4).map(|_| rng.next_u64() as u8).collect()))
                .collect();
            let r = kmeans(&bits, 6, trial, 30).unwrap();
            for w in r.costs.windows(2) {
                assert!(w[1] <= w[0], "{:?}", r.costs);
            }
        }
    }

    #[test]
    fn small_instances_reach_a_fixed_point_no_better_than_optimum() {
        let mut rng = XorShift64Star::new(3);
        for trial in 0..40 {
            let n = 3 + rng.below(6); // 3..=8
            let k = 2 + rng.below(2);
            let raw: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..2).map(|_| (rng.normal() * 4.0).round()).collect())
                .collect();
            let pts: Vec<Descriptor> = raw
                .iter()
                .map(|p| f(&p.iter().map(|x| *x as f32).collect::<Vec<_>>()))
                .collect();
            let r = kmeans(&pts, k, trial, 100).unwrap();
            let optimum = brute_force_optimum(&raw, k);
            assert!(r.final_cost() >= optimum - 1e-9);
            // Converged: re-assigning to the returned centers changes nothing.
            for (p, &a) in pts.iter().zip(&r.assignments) {
                let own = cluster_cost(p, &r.centers[a]);
                assert!(r.centers.iter().all(|c| cluster_cost(p, c) >= own));
            }
        }
    }

    #[test]
    fn duplicates_yield_fewer_centers() {
        let pts = vec![f(&[1.0, 1.0]); 5];
        let r = kmeans(&pts, 3, 4, DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(r.centers.len(), 1);
        assert!(r.assignments.iter().all(|a| *a == 0));
    }

    #[test]
    fn binary_clusters_by_hamming() {
        let a = Descriptor::Binary(vec![0x00, 0x00]);
        let a2 = Descriptor::Binary(vec![0x01, 0x00]);
        let b = Descriptor::Binary(vec![0xFF, 0xFF]);
        let b2 = Descriptor::Binary(vec![0xFF, 0x7F]);
        let r = kmeans(&[a.clone(), b.clone(), a2, b2.clone()], 2, 5, DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(r.assignments[0], r.assignments[2]);
        assert_eq!(r.assignments[1], r.assignments[3]);
        assert_ne!(r.assignments[0], r.assignments[1]);
        // Majority with a 1-1 tie clears the disputed bit.
        assert!(r.centers.contains(&a));
        assert!(r.centers.contains(&b2));
    }
}
