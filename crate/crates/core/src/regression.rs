//! Regression operators mapping a state to an estimate built from sampled
//! `(center, value)` pairs.
//!
//! Only nearest-neighbour (Voronoi piecewise-constant) regression ships. The
//! [`RegressionOperator`] trait is the slot for other operators.
//!
//! Nearest-neighbour queries are exact: the accelerated indexes (sorted keys
//! in 1-D, a k-d tree otherwise) return the same center as an exhaustive scan
//! over the squared distances `Σ_k (x_k − c_k)²`, including on ties, where the
//! lowest center index wins.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// A fitted regression map `R^in_dim → R^out_dim`.
pub trait StageRegression: Send + Sync {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    /// Number of stored samples.
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn eval_into(&self, x: &[f64], out: &mut [f64]);

    /// Evaluates ascending 1-D queries into `out` (`queries.len() × out_dim`).
    /// Equivalent to calling [`Self::eval_into`] on each query.
    fn eval_sorted_1d(&self, queries: &[f64], out: &mut [f64]) {
        let od = self.out_dim();
        for (q, o) in queries.iter().zip(out.chunks_exact_mut(od)) {
            self.eval_into(std::slice::from_ref(q), o);
        }
    }
}

/// Builds a [`StageRegression`] from flat row-major centers and values.
pub trait RegressionOperator: Send + Sync {
    type Fitted: StageRegression;

    fn fit(&self, centers: Vec<f64>, values: Vec<f64>, in_dim: usize, out_dim: usize) -> Result<Self::Fitted>;
}

/// Nearest-neighbour regression operator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NearestNeighbor;

impl RegressionOperator for NearestNeighbor {
    type Fitted = NearestNeighborMap;

    fn fit(&self, centers: Vec<f64>, values: Vec<f64>, in_dim: usize, out_dim: usize) -> Result<NearestNeighborMap> {
        NearestNeighborMap::new(centers, values, in_dim, out_dim)
    }
}

#[derive(Debug, Clone)]
enum Index {
    /// Distinct center values ascending, each with the lowest index holding it.
    Sorted { keys: Vec<f64>, reps: Vec<usize> },
    Kd(KdTree),
    /// 2-D: candidate lists per grid cell, k-d tree for queries off the grid.
    Grid(KdTree, CellGrid),
}

/// Piecewise-constant map over the Voronoi cells of its centers.
#[derive(Debug, Clone)]
pub struct NearestNeighborMap {
    centers: Vec<f64>,
    values: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
    index: Index,
}

#[inline]
fn sq_dist(x: &[f64], c: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..x.len() {
        let d = x[k] - c[k];
        s += d * d;
    }
    s
}

impl NearestNeighborMap {
    pub fn new(centers: Vec<f64>, values: Vec<f64>, in_dim: usize, out_dim: usize) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidDimensions("regression dims must be >= 1".into()));
        }
        if centers.is_empty() || !centers.len().is_multiple_of(in_dim) {
            return Err(Error::InvalidArgument(format!(
                "need a non-empty multiple of {in_dim} center coordinates, got {}",
                centers.len()
            )));
        }
        let m = centers.len() / in_dim;
        if values.len() != m * out_dim {
            return Err(Error::Shape {
                what: "regression values",
                expected: m * out_dim,
                got: values.len(),
            });
        }
        if centers.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("regression centers must be finite".into()));
        }
        let index = if in_dim == 1 {
            let mut order: Vec<usize> = (0..m).collect();
            // partial_cmp keeps -0.0 and 0.0 in one run ordered by index
            order.sort_by(|&a, &b| centers[a].partial_cmp(&centers[b]).unwrap().then(a.cmp(&b)));
            let mut keys = Vec::with_capacity(m);
            let mut reps = Vec::with_capacity(m);
            for i in order {
                if keys.last() != Some(&centers[i]) {
                    keys.push(centers[i]);
                    reps.push(i);
                }
            }
            Index::Sorted { keys, reps }
        } else if in_dim == 2 && m > LEAF_SIZE {
            let kd = KdTree::build(&centers, in_dim);
            let grid = CellGrid::build(&centers, &kd);
            Index::Grid(kd, grid)
        } else {
            Index::Kd(KdTree::build(&centers, in_dim))
        };
        Ok(Self {
            centers,
            values,
            in_dim,
            out_dim,
            index,
        })
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.in_dim..(i + 1) * self.in_dim]
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.out_dim..(i + 1) * self.out_dim]
    }

    /// Reference nearest-center search: full scan, lowest index on ties.
    pub fn nearest_exhaustive(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.centers.chunks_exact(self.in_dim).enumerate() {
            let d = sq_dist(x, c);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Index of the nearest center (same answer as [`Self::nearest_exhaustive`]).
    pub fn nearest(&self, x: &[f64]) -> usize {
        match &self.index {
            Index::Sorted { keys, .. } => {
                let p = keys.partition_point(|&k| k <= x[0]);
                self.resolve_sorted(x[0], p)
            }
            Index::Kd(tree) => tree.nearest(&self.centers, self.in_dim, x),
            Index::Grid(tree, grid) => match grid.candidates(x) {
                Some(cands) => {
                    let mut best = (f64::INFINITY, 0);
                    for &i in cands {
                        let i = i as usize;
                        let d = sq_dist(x, &self.centers[2 * i..2 * i + 2]);
                        // candidates are ascending, so the first minimum has the lowest index
                        if d < best.0 {
                            best = (d, i);
                        }
                    }
                    best.1
                }
                None => tree.nearest(&self.centers, self.in_dim, x),
            },
        }
    }

    /// Visits ascending 1-D queries with a single forward sweep over the
    /// sorted centers, calling `visit(k, nearest_index)` for the `k`-th query.
    ///
    /// Unsorted stretches are handled by restarting the sweep. Panics if the
    /// map is not 1-D.
    pub fn for_each_nearest_sorted<I, F>(&self, queries: I, mut visit: F)
    where
        I: IntoIterator<Item = f64>,
        F: FnMut(usize, usize),
    {
        match &self.index {
            Index::Sorted { keys, .. } => {
                let mut p = 0;
                let mut prev = f64::NEG_INFINITY;
                for (k, z) in queries.into_iter().enumerate() {
                    if z < prev {
                        p = 0;
                    }
                    prev = z;
                    while p < keys.len() && keys[p] <= z {
                        p += 1;
                    }
                    visit(k, self.resolve_sorted(z, p));
                }
            }
            Index::Kd(_) | Index::Grid(..) => panic!("sorted sweep needs a 1-D map, this one is {}-D", self.in_dim),
        }
    }

    /// `p` is the number of keys `<= z`.
    #[inline(always)]
    fn resolve_sorted(&self, z: f64, p: usize) -> usize {
        let Index::Sorted { keys, reps } = &self.index else {
            unreachable!()
        };
        let dist = |q: usize| {
            let d = z - keys[q];
            d * d
        };
        let n = keys.len();
        // common case: a strict winner whose outer neighbour is strictly farther
        if p > 0 && p < n {
            let (dl, dr) = (dist(p - 1), dist(p));
            if dl < dr && (p < 2 || dist(p - 2) > dl) {
                return reps[p - 1];
            }
            if dr < dl && (p + 1 >= n || dist(p + 1) > dr) {
                return reps[p];
            }
        }
        if p == 0 && (n < 2 || dist(1) > dist(0)) {
            return reps[0];
        }
        if p == n && (n < 2 || dist(n - 2) > dist(n - 1)) {
            return reps[n - 1];
        }
        self.resolve_sorted_ties(z, p)
    }

    /// Distances are monotone away from z on each side, so every center at
    /// the minimal distance sits in a contiguous run around p.
    #[cold]
    fn resolve_sorted_ties(&self, z: f64, p: usize) -> usize {
        let Index::Sorted { keys, reps } = &self.index else {
            unreachable!()
        };
        let dist = |q: usize| {
            let d = z - keys[q];
            d * d
        };
        let best_d = match (p > 0, p < keys.len()) {
            (true, true) => dist(p - 1).min(dist(p)),
            (true, false) => dist(p - 1),
            (false, true) => dist(p),
            (false, false) => unreachable!(),
        };
        let mut best = usize::MAX;
        let mut q = p;
        while q > 0 && dist(q - 1) == best_d {
            best = best.min(reps[q - 1]);
            q -= 1;
        }
        let mut q = p;
        while q < keys.len() && dist(q) == best_d {
            best = best.min(reps[q]);
            q += 1;
        }
        best
    }
}

impl StageRegression for NearestNeighborMap {
    fn in_dim(&self) -> usize {
        self.in_dim
    }

    fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn len(&self) -> usize {
        self.centers.len() / self.in_dim
    }

    #[inline]
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.value(self.nearest(x)));
    }

    fn eval_sorted_1d(&self, queries: &[f64], out: &mut [f64]) {
        let od = self.out_dim;
        if od == 1 {
            self.for_each_nearest_sorted(queries.iter().copied(), |k, i| out[k] = self.values[i]);
        } else {
            self.for_each_nearest_sorted(queries.iter().copied(), |k, i| {
                out[k * od..(k + 1) * od].copy_from_slice(self.value(i));
            });
        }
    }
}

const LEAF_SIZE: usize = 8;

/// Uniform 2-D grid (covering the centers' bounding box plus a margin) where
/// each cell lists every center that can be nearest to some point of it.
///
/// If `c*` is nearest to the cell midpoint `m` and `h` is the cell's half
/// diagonal, the nearest center `k` of any point `q` in the cell satisfies
/// `|m - k| <= |q - k| + h <= |q - c*| + h <= |m - c*| + 2h`.
#[derive(Debug, Clone)]
struct CellGrid {
    lo: [f64; 2],
    inv_cell: [f64; 2],
    shape: [usize; 2],
    offsets: Vec<u32>,
    cands: Vec<u32>,
}

impl CellGrid {
    const CELLS_PER_CENTER: f64 = 4.0;
    const MAX_SIDE: usize = 2048;

    fn build(centers: &[f64], kd: &KdTree) -> Self {
        let m = centers.len() / 2;
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for c in centers.chunks_exact(2) {
            for k in 0..2 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
        let mut span = [0.0; 2];
        for k in 0..2 {
            let e = hi[k] - lo[k];
            let margin = if e > 0.0 { 0.25 * e } else { 0.5 };
            lo[k] -= margin;
            span[k] = e + 2.0 * margin;
        }
        let side = (span[0] * span[1] / (Self::CELLS_PER_CENTER * m as f64)).sqrt();
        let mut shape = [1; 2];
        let mut cell = [0.0; 2];
        let mut inv_cell = [0.0; 2];
        for k in 0..2 {
            shape[k] = ((span[k] / side).ceil() as usize).clamp(1, Self::MAX_SIDE);
            cell[k] = span[k] / shape[k] as f64;
            inv_cell[k] = 1.0 / cell[k];
        }
        let half_diag = 0.5 * (cell[0] * cell[0] + cell[1] * cell[1]).sqrt();
        let mut offsets = Vec::with_capacity(shape[0] * shape[1] + 1);
        let mut cands = Vec::new();
        let mut found = Vec::new();
        offsets.push(0);
        for iy in 0..shape[1] {
            for ix in 0..shape[0] {
                let mid = [lo[0] + (ix as f64 + 0.5) * cell[0], lo[1] + (iy as f64 + 0.5) * cell[1]];
                let near = kd.nearest(centers, 2, &mid);
                let r = sq_dist(&mid, &centers[2 * near..2 * near + 2]).sqrt() + 2.0 * half_diag;
                // slack absorbs rounding in distances and cell assignment
                let r = r * (1.0 + 1e-9) + 1e-12;
                found.clear();
                kd.within(centers, 2, &mid, r * r, &mut found);
                found.sort_unstable();
                cands.extend(found.iter().map(|&i| i as u32));
                offsets.push(cands.len() as u32);
            }
        }
        Self {
            lo,
            inv_cell,
            shape,
            offsets,
            cands,
        }
    }

    /// Candidate centers for `x`, or `None` off the grid.
    #[inline]
    fn candidates(&self, x: &[f64]) -> Option<&[u32]> {
        let fx = (x[0] - self.lo[0]) * self.inv_cell[0];
        let fy = (x[1] - self.lo[1]) * self.inv_cell[1];
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let (ix, iy) = (fx as usize, fy as usize);
        if ix >= self.shape[0] || iy >= self.shape[1] {
            return None;
        }
        let c = iy * self.shape[0] + ix;
        Some(&self.cands[self.offsets[c] as usize..self.offsets[c + 1] as usize])
    }
}

#[derive(Debug, Clone)]
enum KdNode {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

/// Static k-d tree over center indices.
#[derive(Debug, Clone)]
struct KdTree {
    nodes: Vec<KdNode>,
    /// Center indices, permuted so each leaf owns a contiguous slice.
    order: Vec<usize>,
}

impl KdTree {
    fn build(centers: &[f64], dim: usize) -> Self {
        let m = centers.len() / dim;
        let mut tree = Self {
            nodes: Vec::new(),
            order: (0..m).collect(),
        };
        tree.build_node(centers, dim, 0, m);
        tree
    }

    fn build_node(&mut self, centers: &[f64], dim: usize, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        // split along the widest coordinate
        let coord = |i: usize, k: usize| centers[i * dim + k];
        let mut split_dim = 0;
        let mut widest = f64::NEG_INFINITY;
        for k in 0..dim {
            let (lo, hi) = self.order[start..end]
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    (lo.min(coord(i, k)), hi.max(coord(i, k)))
                });
            if hi - lo > widest {
                widest = hi - lo;
                split_dim = k;
            }
        }
        let mid = start + (end - start) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            coord(a, split_dim).total_cmp(&coord(b, split_dim))
        });
        let value = coord(self.order[mid], split_dim);
        self.nodes.push(KdNode::Leaf { start: 0, end: 0 });
        let left = self.build_node(centers, dim, start, mid);
        let right = self.build_node(centers, dim, mid, end);
        self.nodes[id] = KdNode::Split {
            dim: split_dim,
            value,
            left,
            right,
        };
        id
    }

    fn nearest(&self, centers: &[f64], dim: usize, x: &[f64]) -> usize {
        let mut best = (f64::INFINITY, usize::MAX);
        self.search(0, centers, dim, x, &mut best);
        best.1
    }

    /// Appends every center with squared distance `<= r2` from `x`.
    fn within(&self, centers: &[f64], dim: usize, x: &[f64], r2: f64, out: &mut Vec<usize>) {
        let mut stack = vec![0];
        while let Some(node) = stack.pop() {
            match self.nodes[node] {
                KdNode::Leaf { start, end } => {
                    for &i in &self.order[start..end] {
                        if sq_dist(x, &centers[i * dim..(i + 1) * dim]) <= r2 {
                            out.push(i);
                        }
                    }
                }
                KdNode::Split {
                    dim: k,
                    value,
                    left,
                    right,
                } => {
                    let diff = x[k] - value;
                    if diff <= 0.0 || diff * diff <= r2 {
                        stack.push(left);
                    }
                    if diff >= 0.0 || diff * diff <= r2 {
                        stack.push(right);
                    }
                }
            }
        }
    }

    fn search(&self, node: usize, centers: &[f64], dim: usize, x: &[f64], best: &mut (f64, usize)) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = sq_dist(x, &centers[i * dim..(i + 1) * dim]);
                    if d < best.0 || (d == best.0 && i < best.1) {
                        *best = (d, i);
                    }
                }
            }
            KdNode::Split {
                dim: k,
                value,
                left,
                right,
            } => {
                // left holds coordinates <= value, right holds >= value
                let diff = x[k] - value;
                let (near, far) = match diff.partial_cmp(&0.0) {
                    Some(Ordering::Greater) => (right, left),
                    _ => (left, right),
                };
                self.search(near, centers, dim, x, best);
                if diff * diff <= best.0 {
                    self.search(far, centers, dim, x, best);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map1(centers: &[f64], values: &[f64]) -> NearestNeighborMap {
        NearestNeighborMap::new(centers.to_vec(), values.to_vec(), 1, 1).unwrap()
    }

    #[test]
    fn closer_center_wins() {
        let m = map1(&[-1.0, 1.0], &[10.0, 20.0]);
        let mut out = [0.0];
        m.eval_into(&[0.2], &mut out);
        assert_eq!(out[0], 20.0);
        m.eval_into(&[-7.0], &mut out);
        assert_eq!(out[0], 10.0);
    }

    #[test]
    fn single_center_is_constant() {
        let m = map1(&[0.3], &[4.5]);
        for x in [-1e6, -1.0, 0.3, 2.0, 1e9] {
            let mut out = [0.0];
            m.eval_into(&[x], &mut out);
            assert_eq!(out[0], 4.5);
        }
    }

    #[test]
    fn tie_goes_to_lower_index() {
        let m = map1(&[-1.0, 1.0], &[10.0, 20.0]);
        assert_eq!(m.nearest(&[0.0]), 0);
        let m = map1(&[1.0, -1.0], &[10.0, 20.0]);
        assert_eq!(m.nearest(&[0.0]), 0);
        // duplicated centers
        let m = map1(&[2.0, 0.5, 0.5, 2.0], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.nearest(&[0.4]), 1);
        assert_eq!(m.nearest(&[3.0]), 0);
        let m2 = NearestNeighborMap::new(vec![1.0, 1.0, -1.0, -1.0, 1.0, 1.0], vec![0.0; 3], 2, 1).unwrap();
        assert_eq!(m2.nearest(&[0.0, 0.0]), 0);
        assert_eq!(m2.nearest(&[2.0, 2.0]), 0);
    }

    #[test]
    fn query_at_center_returns_its_value() {
        let c = [0.1, -2.0, 3.5, 0.7];
        let v = [1.0, 2.0, 3.0, 4.0];
        let m = map1(&c, &v);
        for (i, &x) in c.iter().enumerate() {
            let mut out = [0.0];
            m.eval_into(&[x], &mut out);
            assert_eq!(out[0], v[i]);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(NearestNeighborMap::new(vec![], vec![], 1, 1).is_err());
        assert!(NearestNeighborMap::new(vec![1.0, 2.0], vec![1.0], 1, 1).is_err());
        assert!(NearestNeighborMap::new(vec![f64::NAN], vec![1.0], 1, 1).is_err());
        assert!(NearestNeighborMap::new(vec![1.0, 2.0, 3.0], vec![1.0], 2, 1).is_err());
    }

    #[test]
    fn sorted_sweep_matches_point_queries() {
        let c = [0.5, -1.0, 0.5, 2.0, -3.0, 1.25];
        let m = map1(&c, &[0.0; 6]);
        let qs: Vec<f64> = (0..200).map(|k| -5.0 + 0.05 * k as f64).collect();
        let mut got = Vec::new();
        m.for_each_nearest_sorted(qs.iter().copied(), |_, i| got.push(i));
        let want: Vec<usize> = qs.iter().map(|&q| m.nearest_exhaustive(&[q])).collect();
        assert_eq!(got, want);
    }

    proptest! {
        #[test]
        fn accelerated_equals_exhaustive(
            dim in 1usize..=3,
            raw in prop::collection::vec(-4i32..=4, 3..300),
            queries in prop::collection::vec(-10i32..=10, 1..60),
            scale in prop::sample::select(vec![0.5, 0.25, 0.1]),
        ) {
            // coarse integer lattice forces plenty of exact ties
            let m_pts = raw.len() / dim;
            prop_assume!(m_pts >= 1);
            let centers: Vec<f64> = raw[..m_pts * dim].iter().map(|&v| v as f64 * scale).collect();
            let map = NearestNeighborMap::new(centers, (0..m_pts).map(|i| i as f64).collect(), dim, 1).unwrap();
            for q in queries.chunks(dim).filter(|q| q.len() == dim) {
                let x: Vec<f64> = q.iter().map(|&v| v as f64 * 0.5 * scale).collect();
                prop_assert_eq!(map.nearest(&x), map.nearest_exhaustive(&x));
            }
        }

        #[test]
        fn accelerated_equals_exhaustive_continuous(
            dim in 1usize..=2,
            centers in prop::collection::vec(-3.0f64..3.0, 2..200),
            queries in prop::collection::vec(-5.0f64..5.0, 2..100),
        ) {
            let m_pts = centers.len() / dim;
            let map = NearestNeighborMap::new(centers[..m_pts * dim].to_vec(), vec![0.0; m_pts], dim, 1).unwrap();
            for x in queries.chunks_exact(dim) {
                prop_assert_eq!(map.nearest(x), map.nearest_exhaustive(x));
            }
        }

        #[test]
        fn cells_are_intervals_around_their_center(
            centers in prop::collection::vec(-3.0f64..3.0, 1..50),
            a in -4.0f64..4.0,
        ) {
            // every point between a query and its nearest center maps to that center
            let map = NearestNeighborMap::new(centers.clone(), centers.clone(), 1, 1).unwrap();
            let ia = map.nearest(&[a]);
            let c = centers[ia];
            for k in 0..=20 {
                let s = a + (c - a) * k as f64 / 20.0;
                prop_assert_eq!(map.nearest(&[s]), ia);
            }
        }
    }
}
