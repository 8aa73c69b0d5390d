//! Reproducible Brownian motion.
//!
//! Numerically solving an SDE needs a Brownian sample that can be re-queried
//! — possibly at new locations — on the backward pass. Three reconstructions
//! are provided, all built on splittable counter-based seeds and the Brownian
//! bridge:
//!
//! * [`BrownianPath`] stores every sample it generates;
//! * [`VirtualBrownianTree`] descends a fixed dyadic seed tree to a snap
//!   tolerance, in O(1) memory;
//! * [`BrownianInterval`] serves exact increments W(s, t) from a lazily
//!   materialised midpoint-refinement tree of (interval, seed) pairs, with an
//!   LRU cache of node increments and a search hint for sweep access
//!   patterns.
//!
//! The interval tree's refinement hierarchy is fixed (every node splits at
//! its midpoint), so each node's increment is a deterministic function of the
//! root seed and the node's interval alone. Increments are therefore
//! invariant under query reordering and under cache eviction, and the
//! additivity W(s, u) = W(s, t) + W(t, u) is exact.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{mix2, splitmix64};

// ---------------------------------------------------------------------------
// Splittable seeds
// ---------------------------------------------------------------------------

/// A 128-bit splittable PRNG seed. Children are derived deterministically;
/// distinct children index statistically independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Seed {
    hi: u64,
    lo: u64,
}

impl Seed {
    pub fn from_u64(s: u64) -> Self {
        Seed {
            hi: splitmix64(s ^ 0x5851f42d4c957f2d),
            lo: splitmix64(s.wrapping_add(0x14057b7ef767814f)),
        }
    }

    /// The i-th child seed.
    pub fn child(self, i: u64) -> Seed {
        let hi = mix2(self.hi, i.wrapping_mul(2).wrapping_add(1));
        let lo = mix2(self.lo ^ hi.rotate_left(29), i);
        Seed { hi, lo }
    }

    /// Splits into n child seeds.
    pub fn split(self, n: usize) -> Vec<Seed> {
        (0..n as u64).map(|i| self.child(i)).collect()
    }

    /// Splits into a (left, right) pair.
    pub fn split2(self) -> (Seed, Seed) {
        (self.child(0), self.child(1))
    }

    /// The k-th standard normal of this seed's stream.
    pub fn normal(self, k: u64) -> f64 {
        let key = mix2(self.hi, self.lo);
        crate::rng::counter_normal(key ^ self.lo.rotate_left(13), k)
    }

    /// A vector of standard normals.
    pub fn normals<T: Real>(self, n: usize) -> Vec<T> {
        (0..n as u64).map(|k| T::c(self.normal(k))).collect()
    }
}

/// Splits a seed into n children (free-function form).
pub fn split_seed(seed: Seed, n: usize) -> Vec<Seed> {
    seed.split(n)
}

// ---------------------------------------------------------------------------
// Brownian bridges
// ---------------------------------------------------------------------------

/// Levy's Brownian bridge: samples w(t) given w(s) and w(u) for s < t < u,
/// with mean w_s + (t-s)/(u-s) (w_u - w_s) and variance (u-t)(t-s)/(u-s) per
/// dimension. Deterministic given the seed.
pub fn bridge_point<T: Real>(
    s: T,
    t: T,
    u: T,
    w_s: &[T],
    w_u: &[T],
    seed: Seed,
) -> Result<Vec<T>> {
    if !(s < t && t < u) {
        return Err(Error::Contract(format!(
            "bridge_point: need s < t < u, got ({s}, {t}, {u})"
        )));
    }
    let frac = (t - s) / (u - s);
    let sd = ((u - t) * (t - s) / (u - s)).sqrt();
    Ok(w_s
        .iter()
        .zip(w_u)
        .enumerate()
        .map(|(k, (&ws, &wu))| ws + frac * (wu - ws) + sd * T::c(seed.normal(k as u64)))
        .collect())
}

/// Interval form of the bridge: splits the increment w(s, u) at t, returning
/// (w(s, t), w(t, u)) with w(s, t) ~ N((t-s)/(u-s) w_su, (u-t)(t-s)/(u-s))
/// and w(t, u) = w_su - w(s, t), so additivity is exact by construction.
pub fn bridge_interval<T: Real>(
    s: T,
    t: T,
    u: T,
    w_su: &[T],
    seed: Seed,
) -> Result<(Vec<T>, Vec<T>)> {
    if !(s < t && t < u) {
        return Err(Error::Contract(format!(
            "bridge_interval: need s < t < u, got ({s}, {t}, {u})"
        )));
    }
    let frac = (t - s) / (u - s);
    let sd = ((u - t) * (t - s) / (u - s)).sqrt();
    let w_st: Vec<T> = w_su
        .iter()
        .enumerate()
        .map(|(k, &w)| frac * w + sd * T::c(seed.normal(k as u64)))
        .collect();
    let w_tu: Vec<T> = w_su.iter().zip(&w_st).map(|(&a, &b)| a - b).collect();
    Ok((w_st, w_tu))
}

// ---------------------------------------------------------------------------
// Common source interface
// ---------------------------------------------------------------------------

/// An object serving Brownian increments W(t) - W(s) over [0, horizon].
/// Queries may mutate internal structures (materialising new samples), but
/// repeating a query always returns the identical value.
pub trait BrownianSource<T: Real> {
    fn dim(&self) -> usize;
    fn horizon(&self) -> T;
    fn increment(&mut self, s: T, t: T) -> Result<Vec<T>>;
}

// ---------------------------------------------------------------------------
// Brownian Path
// ---------------------------------------------------------------------------

/// Stores every point sample, conditioning new points on their stored
/// neighbours via the Brownian bridge. O(queries) memory, O(log) lookup.
pub struct BrownianPath<T> {
    seed: Seed,
    dim: usize,
    horizon: T,
    /// Sorted by time; always contains (0, 0) and (T, w_T).
    points: Vec<(T, Vec<T>)>,
}

impl<T: Real> BrownianPath<T> {
    pub fn new(seed: Seed, dim: usize, horizon: T) -> Result<Self> {
        if horizon <= T::zero() || dim == 0 {
            return Err(Error::Config(
                "BrownianPath: need horizon > 0, dim >= 1".into(),
            ));
        }
        let w_t: Vec<T> = seed
            .child(0)
            .normals::<T>(dim)
            .iter()
            .map(|&z| z * horizon.sqrt())
            .collect();
        Ok(Self {
            seed,
            dim,
            horizon,
            points: vec![(T::zero(), vec![T::zero(); dim]), (horizon, w_t)],
        })
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    /// W at a point, materialising it if needed.
    fn point(&mut self, t: T) -> Result<Vec<T>> {
        let idx = self.points.partition_point(|(pt, _)| *pt < t);
        if idx < self.points.len() && self.points[idx].0 == t {
            return Ok(self.points[idx].1.clone());
        }
        // Bracketing neighbours exist because 0 and T are always stored.
        let (tl, wl) = self.points[idx - 1].clone();
        let (tr, wr) = self.points[idx].clone();
        let point_seed = self.seed.child(t.as_f64().to_bits());
        let w = bridge_point(tl, t, tr, &wl, &wr, point_seed)?;
        self.points.insert(idx, (t, w.clone()));
        Ok(w)
    }

    pub fn query(&mut self, s: T, t: T) -> Result<Vec<T>> {
        if s < T::zero() || t > self.horizon || s > t {
            return Err(Error::Contract(format!(
                "BrownianPath::query: need 0 <= s <= t <= {}, got ({s}, {t})",
                self.horizon
            )));
        }
        if s == t {
            return Ok(vec![T::zero(); self.dim]);
        }
        let ws = self.point(s)?;
        let wt = self.point(t)?;
        Ok(wt.iter().zip(&ws).map(|(&a, &b)| a - b).collect())
    }
}

impl<T: Real> BrownianSource<T> for BrownianPath<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn horizon(&self) -> T {
        self.horizon
    }

    fn increment(&mut self, s: T, t: T) -> Result<Vec<T>> {
        self.query(s, t)
    }
}

// ---------------------------------------------------------------------------
// Virtual Brownian Tree
// ---------------------------------------------------------------------------

/// Fixed dyadic seed tree with point queries snapped to a tolerance eps.
/// O(log(1/eps)) work and O(1) memory per query; fully reproducible from the
/// root seed.
pub struct VirtualBrownianTree<T> {
    seed: Seed,
    dim: usize,
    horizon: T,
    eps: T,
}

impl<T: Real> VirtualBrownianTree<T> {
    pub fn new(seed: Seed, dim: usize, horizon: T, eps: T) -> Result<Self> {
        if horizon <= T::zero() || dim == 0 || eps <= T::zero() || eps >= horizon {
            return Err(Error::Config(
                "VirtualBrownianTree: need horizon > 0, dim >= 1, 0 < eps < horizon".into(),
            ));
        }
        Ok(Self {
            seed,
            dim,
            horizon,
            eps,
        })
    }

    /// W at the dyadic point nearest to tau (within eps); also returns the
    /// snapped point. Queries closer than eps can snap to the same point.
    pub fn query_with_point(&self, tau: T) -> Result<(T, Vec<T>)> {
        if tau < T::zero() || tau > self.horizon {
            return Err(Error::Contract(format!(
                "VirtualBrownianTree::query: {tau} outside [0, {}]",
                self.horizon
            )));
        }
        // Seed convention: the root splits once into (bridge stream, global
        // sample); thereafter descending right continues with child(0) and
        // descending left with child(1).
        let (mut rho, rho_hat) = self.seed.split2();
        let sqrt_t = self.horizon.sqrt();
        let w_horizon: Vec<T> = rho_hat
            .normals::<T>(self.dim)
            .iter()
            .map(|&z| z * sqrt_t)
            .collect();
        let mut s = T::zero();
        let mut u = self.horizon;
        let mut tm = self.horizon * T::half();
        let mut w_s = vec![T::zero(); self.dim];
        let mut w_u = w_horizon;
        let mut w_t = bridge_point(s, tm, u, &w_s, &w_u, rho)?;
        while (tau - tm).abs() > self.eps {
            let (rho_right, rho_left) = rho.split2();
            if tau > tm {
                s = tm;
                w_s = w_t.clone();
                rho = rho_right;
            } else {
                u = tm;
                w_u = w_t.clone();
                rho = rho_left;
            }
            tm = (s + u) * T::half();
            if tm <= s || tm >= u {
                break; // interval exhausted at floating-point resolution
            }
            w_t = bridge_point(s, tm, u, &w_s, &w_u, rho)?;
        }
        Ok((tm, w_t))
    }

    /// W at the snapped point nearest tau.
    pub fn query(&self, tau: T) -> Result<Vec<T>> {
        Ok(self.query_with_point(tau)?.1)
    }

    /// As [`Self::query_with_point`], also returning the number of bisection
    /// levels descended (for operation-count benchmarks).
    pub fn query_instrumented(&self, tau: T) -> Result<(T, Vec<T>, u64)> {
        // Re-run the descent counting iterations; the values are identical
        // by determinism.
        let (point, value) = self.query_with_point(tau)?;
        let mut levels = 0u64;
        let mut s = T::zero();
        let mut u = self.horizon;
        let mut tm = self.horizon * T::half();
        while (tau - tm).abs() > self.eps {
            if tau > tm {
                s = tm;
            } else {
                u = tm;
            }
            tm = (s + u) * T::half();
            if tm <= s || tm >= u {
                break;
            }
            levels += 1;
        }
        Ok((point, value, levels))
    }
}

impl<T: Real> BrownianSource<T> for VirtualBrownianTree<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn horizon(&self) -> T {
        self.horizon
    }

    fn increment(&mut self, s: T, t: T) -> Result<Vec<T>> {
        let ws = self.query(s)?;
        let wt = self.query(t)?;
        Ok(wt.iter().zip(&ws).map(|(&a, &b)| a - b).collect())
    }
}

// ---------------------------------------------------------------------------
// LRU cache (node id -> increment)
// ---------------------------------------------------------------------------

const NONE: usize = usize::MAX;

struct LruSlot<V> {
    key: u32,
    val: V,
    prev: usize,
    next: usize,
}

/// Fixed-capacity LRU map used for memoising node increments.
struct LruCache<V> {
    cap: usize,
    map: HashMap<u32, usize>,
    slots: Vec<LruSlot<V>>,
    head: usize,
    tail: usize,
}

impl<V: Clone> LruCache<V> {
    fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            map: HashMap::new(),
            slots: Vec::new(),
            head: NONE,
            tail: NONE,
        }
    }

    fn unlink(&mut self, i: usize) {
        let (prev, next) = (self.slots[i].prev, self.slots[i].next);
        if prev != NONE {
            self.slots[prev].next = next;
        } else {
            self.head = next;
        }
        if next != NONE {
            self.slots[next].prev = prev;
        } else {
            self.tail = prev;
        }
    }

    fn push_front(&mut self, i: usize) {
        self.slots[i].prev = NONE;
        self.slots[i].next = self.head;
        if self.head != NONE {
            self.slots[self.head].prev = i;
        }
        self.head = i;
        if self.tail == NONE {
            self.tail = i;
        }
    }

    fn get(&mut self, key: u32) -> Option<V> {
        let &i = self.map.get(&key)?;
        self.unlink(i);
        self.push_front(i);
        Some(self.slots[i].val.clone())
    }

    fn insert(&mut self, key: u32, val: V) {
        if let Some(&i) = self.map.get(&key) {
            self.slots[i].val = val;
            self.unlink(i);
            self.push_front(i);
            return;
        }
        let i = if self.slots.len() < self.cap {
            self.slots.push(LruSlot {
                key,
                val,
                prev: NONE,
                next: NONE,
            });
            self.slots.len() - 1
        } else {
            // Evict the least recently used slot.
            let i = self.tail;
            self.unlink(i);
            self.map.remove(&self.slots[i].key);
            self.slots[i].key = key;
            self.slots[i].val = val;
            i
        };
        self.map.insert(key, i);
        self.push_front(i);
    }

    fn clear(&mut self) {
        self.map.clear();
        self.slots.clear();
        self.head = NONE;
        self.tail = NONE;
    }
}

// ---------------------------------------------------------------------------
// Brownian Interval
// ---------------------------------------------------------------------------

const NONE32: u32 = u32::MAX;

#[derive(Debug, Clone, Copy)]
struct IntervalNode<T> {
    a: T,
    b: T,
    mid: T,
    seed: Seed,
    parent: u32,
    /// Children are materialised together; NONE32 marks a leaf.
    left: u32,
    right: u32,
}

/// Operation counters for benchmarking access patterns.
#[derive(Debug, Clone, Copy, Default)]
pub struct IntervalStats {
    /// User-visible queries served.
    pub queries: u64,
    /// Node increments resolved by recursion (cache misses).
    pub sample_resolutions: u64,
    /// Cache hits while resolving increments.
    pub cache_hits: u64,
    /// Nodes visited by traverse.
    pub traverse_visits: u64,
}

/// Default LRU capacity (node increments held in fast memory).
pub const DEFAULT_CACHE_CAPACITY: usize = 128;

/// Exact, reproducible Brownian increments over a lazily materialised binary
/// tree of (interval, seed) pairs.
///
/// Every node bisects at its midpoint, so the conditioning hierarchy is a
/// fixed function of the interval: the value of W(s, t) depends only on the
/// root seed and (s, t), never on query order or cache state. A leaf is
/// bisected on demand when a query needs a finer partition; traverse starts
/// from the hint node (the last node of the previous query) and is fully
/// iterative.
pub struct BrownianInterval<T: Real> {
    nodes: Vec<IntervalNode<T>>,
    hint: u32,
    cache: LruCache<Vec<T>>,
    dim: usize,
    horizon: T,
    value_seed: Seed,
    pub stats: IntervalStats,
}

impl<T: Real> BrownianInterval<T> {
    pub fn new(seed: Seed, dim: usize, horizon: T) -> Result<Self> {
        Self::with_cache_capacity(seed, dim, horizon, DEFAULT_CACHE_CAPACITY)
    }

    pub fn with_cache_capacity(
        seed: Seed,
        dim: usize,
        horizon: T,
        capacity: usize,
    ) -> Result<Self> {
        if horizon <= T::zero() || dim == 0 {
            return Err(Error::Config(
                "BrownianInterval: need horizon > 0, dim >= 1".into(),
            ));
        }
        let (value_seed, tree_seed) = seed.split2();
        let root = IntervalNode {
            a: T::zero(),
            b: horizon,
            mid: horizon * T::half(),
            seed: tree_seed,
            parent: NONE32,
            left: NONE32,
            right: NONE32,
        };
        Ok(Self {
            nodes: vec![root],
            hint: 0,
            cache: LruCache::new(capacity),
            dim,
            horizon,
            value_seed,
            stats: IntervalStats::default(),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every cached increment. Values of subsequent queries are
    /// unchanged: the cache is purely a memoisation.
    pub fn evict_cache(&mut self) {
        self.cache.clear();
    }

    pub fn reset_stats(&mut self) {
        self.stats = IntervalStats::default();
    }

    /// Splits a leaf at its midpoint, materialising both children with seeds
    /// split from the node's seed.
    fn bisect(&mut self, id: u32) -> (u32, u32) {
        let node = self.nodes[id as usize];
        debug_assert!(node.left == NONE32);
        let (seed_l, seed_r) = node.seed.split2();
        let left = self.nodes.len() as u32;
        self.nodes.push(IntervalNode {
            a: node.a,
            b: node.mid,
            mid: node.a + (node.mid - node.a) * T::half(),
            seed: seed_l,
            parent: id,
            left: NONE32,
            right: NONE32,
        });
        let right = self.nodes.len() as u32;
        self.nodes.push(IntervalNode {
            a: node.mid,
            b: node.b,
            mid: node.mid + (node.b - node.mid) * T::half(),
            seed: seed_r,
            parent: id,
            left: NONE32,
            right: NONE32,
        });
        self.nodes[id as usize].left = left;
        self.nodes[id as usize].right = right;
        (left, right)
    }

    /// Returns the ids of nodes whose intervals partition [s, t], in order,
    /// creating nodes as needed. Starts near the hint; iterative throughout
    /// so deep trees cannot overflow the stack.
    fn traverse(&mut self, s: T, t: T) -> Vec<u32> {
        // Climb until the current node covers the query.
        let mut cur = self.hint;
        loop {
            let n = &self.nodes[cur as usize];
            self.stats.traverse_visits += 1;
            if (n.a <= s && t <= n.b) || n.parent == NONE32 {
                break;
            }
            cur = n.parent;
        }
        // Descend with an explicit work stack.
        let mut out = Vec::with_capacity(2);
        let mut work = vec![(cur, s, t)];
        while let Some((id, c, d)) = work.pop() {
            self.stats.traverse_visits += 1;
            let node = self.nodes[id as usize];
            if c == node.a && d == node.b {
                out.push(id);
                continue;
            }
            let (left, right) = if node.left == NONE32 {
                self.bisect(id)
            } else {
                (node.left, node.right)
            };
            let m = self.nodes[id as usize].mid;
            if d <= m {
                work.push((left, c, d));
            } else if c >= m {
                work.push((right, c, d));
            } else {
                // Push right first so the left sub-query pops first and the
                // output stays ordered.
                work.push((right, m, d));
                work.push((left, c, m));
            }
        }
        out
    }

    /// The increment over node `id`, resolved recursively from the root via
    /// the interval bridge, memoised in the LRU cache.
    fn sample(&mut self, id: u32) -> Vec<T> {
        if let Some(v) = self.cache.get(id) {
            self.stats.cache_hits += 1;
            return v;
        }
        // Walk up collecting the uncached chain.
        let mut chain = vec![id];
        let mut base_val: Option<Vec<T>> = None;
        let mut cur = id;
        loop {
            let parent = self.nodes[cur as usize].parent;
            if parent == NONE32 {
                break; // reached the root with no cache hit
            }
            if let Some(v) = self.cache.get(parent) {
                self.stats.cache_hits += 1;
                base_val = Some(v);
                break;
            }
            chain.push(parent);
            cur = parent;
        }
        // Resolve downwards.
        let mut val = match base_val {
            Some(v) => v,
            None => {
                // Root increment: W(0, T) ~ N(0, T I) from the value seed.
                self.stats.sample_resolutions += 1;
                let root = chain.pop().expect("chain ends at root");
                debug_assert_eq!(root, 0);
                let sqrt_t = self.horizon.sqrt();
                let w: Vec<T> = self
                    .value_seed
                    .normals::<T>(self.dim)
                    .iter()
                    .map(|&z| z * sqrt_t)
                    .collect();
                self.cache.insert(0, w.clone());
                w
            }
        };
        while let Some(next) = chain.pop() {
            self.stats.sample_resolutions += 1;
            let parent = self.nodes[next as usize].parent;
            let p = self.nodes[parent as usize];
            // The split draw is keyed by the left child's seed; the right
            // child is the exact complement, so additivity holds exactly.
            let left_seed = self.nodes[p.left as usize].seed;
            let (w_left, w_right) = bridge_interval(p.a, p.mid, p.b, &val, left_seed)
                .expect("midpoint is interior by construction");
            self.cache.insert(p.left, w_left.clone());
            self.cache.insert(p.right, w_right.clone());
            val = if next == p.left { w_left } else { w_right };
        }
        val
    }

    /// The increment W(t) - W(s) for 0 <= s < t <= horizon. Exact (no snap
    /// tolerance) and a pure function of (root seed, s, t).
    pub fn query(&mut self, s: T, t: T) -> Result<Vec<T>> {
        if !(T::zero() <= s && s < t && t <= self.horizon) {
            return Err(Error::Contract(format!(
                "BrownianInterval::query: need 0 <= s < t <= {}, got ({s}, {t})",
                self.horizon
            )));
        }
        self.stats.queries += 1;
        let nodes = self.traverse(s, t);
        self.hint = *nodes.last().expect("partition is non-empty");
        let mut total = vec![T::zero(); self.dim];
        for id in nodes {
            let w = self.sample(id);
            for (acc, &v) in total.iter_mut().zip(&w) {
                *acc += v;
            }
        }
        Ok(total)
    }

    /// Materialises the dyadic tree down to leaves no wider than
    /// 0.8 * avg_step * cache_capacity by issuing internal queries, so a
    /// later right-to-left sweep finds its conditioning chain already built.
    pub fn prebuild_dyadic(&mut self, avg_step: T, cache_capacity: usize) -> Result<()> {
        if avg_step <= T::zero() {
            return Err(Error::Contract(
                "prebuild_dyadic: avg_step must be > 0".into(),
            ));
        }
        let width = T::c(0.8) * avg_step * T::from_usize(cache_capacity.max(1)).unwrap();
        if width >= self.horizon {
            return Ok(()); // tree stays a stump
        }
        // Refine level by level; cells at one level share boundaries with
        // the level above, so the internal queries only ever bisect.
        let mut boundaries = vec![T::zero(), self.horizon];
        loop {
            let max_w = boundaries
                .windows(2)
                .map(|w| w[1] - w[0])
                .fold(T::zero(), T::max);
            if max_w <= width {
                break;
            }
            let mut next = Vec::with_capacity(boundaries.len() * 2 - 1);
            for w in boundaries.windows(2) {
                let mid = w[0] + (w[1] - w[0]) * T::half();
                if mid > w[0] && mid < w[1] {
                    self.query(w[0], mid)?;
                    self.query(mid, w[1])?;
                    next.push(w[0]);
                    next.push(mid);
                } else {
                    next.push(w[0]);
                }
            }
            next.push(self.horizon);
            boundaries = next;
        }
        Ok(())
    }
}

impl<T: Real> BrownianSource<T> for BrownianInterval<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn horizon(&self) -> T {
        self.horizon
    }

    fn increment(&mut self, s: T, t: T) -> Result<Vec<T>> {
        if s == t {
            return Ok(vec![T::zero(); self.dim]);
        }
        self.query(s, t)
    }
}
