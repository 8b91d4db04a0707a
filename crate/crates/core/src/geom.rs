//! Geometric primitives: problem instances, tours, pairwise distances,
//! k-nearest-neighbor indicators and tour/adjacency conversions.
//!
//! Everything here is a pure function over immutable inputs and computes
//! in `f64`.

use crate::{Error, Result};

/// Dense square matrix in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix<T> {
    n: usize,
    values: Vec<T>,
}

impl<T: Copy> SquareMatrix<T> {
    pub fn filled(n: usize, fill: T) -> Self {
        SquareMatrix { n, values: vec![fill; n * n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.values[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

/// A TSP instance: `n >= 3` points in the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct TspInstance {
    points: Vec<[f64; 2]>,
}

impl TspInstance {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "instance needs at least 3 points, got {}",
                points.len()
            )));
        }
        for (i, p) in points.iter().enumerate() {
            for (axis, &c) in p.iter().enumerate() {
                if !(0.0..=1.0).contains(&c) || !c.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "point {i} coordinate {axis} = {c} lies outside [0,1]"
                    )));
                }
            }
        }
        Ok(TspInstance { points })
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        self.points[i]
    }

    #[inline]
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        let [xi, yi] = self.points[i];
        let [xj, yj] = self.points[j];
        ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt()
    }
}

/// A tour: a permutation of the node indices `0..n`. The closing edge
/// from the last node back to the first is implicit.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Tour {
    order: Vec<usize>,
}

impl Tour {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        if n < 3 {
            return Err(Error::InvalidArgument(format!(
                "tour needs at least 3 nodes, got {n}"
            )));
        }
        let mut seen = vec![false; n];
        for &v in &order {
            if v >= n || seen[v] {
                return Err(Error::InvalidArgument(format!(
                    "order is not a permutation of 0..{n}"
                )));
            }
            seen[v] = true;
        }
        Ok(Tour { order })
    }

    pub fn n(&self) -> usize {
        self.order.len()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Consecutive directed edges including the closing edge.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.order.len();
        (0..n).map(move |i| (self.order[i], self.order[(i + 1) % n]))
    }

    /// Same cycle rotated to start at node 0.
    pub fn canonical(&self) -> Tour {
        let pos = self.order.iter().position(|&v| v == 0).unwrap();
        let mut order = Vec::with_capacity(self.order.len());
        order.extend_from_slice(&self.order[pos..]);
        order.extend_from_slice(&self.order[..pos]);
        Tour { order }
    }

    /// Rotation- and reflection-normalized representative: starts at
    /// node 0 with the smaller neighbor of 0 in second position.
    pub fn canonical_undirected(&self) -> Tour {
        let mut t = self.canonical();
        let n = t.order.len();
        if t.order[1] > t.order[n - 1] {
            t.order[1..].reverse();
        }
        t
    }
}

/// Symmetric 0/1 adjacency matrix of a tour: zero diagonal, every row
/// sums to exactly 2.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyTarget {
    entries: SquareMatrix<u8>,
}

impl AdjacencyTarget {
    pub fn n(&self) -> usize {
        self.entries.n()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.entries.get(i, j)
    }

    pub fn matrix(&self) -> &SquareMatrix<u8> {
        &self.entries
    }
}

/// Total Euclidean length of `tour` on `instance`, closing edge included.
pub fn tour_length(instance: &TspInstance, tour: &Tour) -> Result<f64> {
    if tour.n() != instance.n() {
        return Err(Error::InvalidArgument(format!(
            "tour over {} nodes does not fit instance with {} nodes",
            tour.n(),
            instance.n()
        )));
    }
    Ok(tour.edges().map(|(a, b)| instance.dist(a, b)).sum())
}

/// Full matrix of pairwise Euclidean distances.
pub fn pairwise_distances(instance: &TspInstance) -> SquareMatrix<f64> {
    let n = instance.n();
    let mut m = SquareMatrix::filled(n, 0.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = instance.dist(i, j);
            m.set(i, j, d);
            m.set(j, i, d);
        }
    }
    m
}

/// k-nearest-neighbor indicator: entry `(i,i)` is 2, entry `(i,j)` is 1
/// iff `j` is among the `k` nearest neighbors of `i` (row-wise, so not
/// necessarily symmetric), and 0 otherwise. Distance ties break toward
/// the lower node index.
pub fn knn_indicator(instance: &TspInstance, k: usize) -> Result<SquareMatrix<u8>> {
    let n = instance.n();
    if k == 0 || k > n - 1 {
        return Err(Error::InvalidArgument(format!(
            "k = {k} out of range [1, {}]",
            n - 1
        )));
    }
    let mut m = SquareMatrix::filled(n, 0u8);
    let mut others: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        others.clear();
        others.extend((0..n).filter(|&j| j != i));
        others.sort_by(|&a, &b| {
            instance
                .dist(i, a)
                .partial_cmp(&instance.dist(i, b))
                .unwrap()
                .then(a.cmp(&b))
        });
        for &j in &others[..k] {
            m.set(i, j, 1);
        }
        m.set(i, i, 2);
    }
    Ok(m)
}

/// Symmetric adjacency matrix marking both directions of each tour edge.
pub fn tour_to_adjacency(tour: &Tour) -> AdjacencyTarget {
    let mut entries = SquareMatrix::filled(tour.n(), 0u8);
    for (a, b) in tour.edges() {
        entries.set(a, b, 1);
        entries.set(b, a, 1);
    }
    AdjacencyTarget { entries }
}
