//! Incremental k-nearest-neighbor graph over a sliding window.
//!
//! [`WindowGraph`] holds the L most recent observations in a ring, caches
//! all pairwise distances, and maintains for every resident the full
//! ascending ordering of the others by distance (ties broken by smaller
//! observation index). Out-neighbors are the first k entries of that
//! ordering, so the directed graph always has out-degree exactly k.
//!
//! The ordering is kept full length rather than top-k so that eviction
//! never forces a re-sort: removing a slot from a sorted list and inserting
//! the newcomer at its binary-searched position preserves sortedness.
//!
//! [`GraphFunctionals`] collects the motif counts the moment formulas
//! consume: mutual and shared neighbor sums, their rank-resolved variants,
//! and five three-way configuration counts. All sums range over ordered
//! tuples of pairwise-distinct resident indices.

use crate::data::{distance, DistanceError, DistanceSpec, Observation};
use thiserror::Error;

/// Slot numbers index internal storage; they fit u16 because windows are
/// at most a few hundred slots (growing graphs stay far below the cap).
type Slot = u16;

const NO_POS: u16 = u16::MAX;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("k must satisfy 1 <= k <= window size - 1, got k={k}, window size {size}")]
    BadK { k: usize, size: usize },
    #[error("capacity must be at least 3, got {0}")]
    BadCapacity(usize),
    #[error("capacity {0} exceeds the supported maximum {max}", max = Slot::MAX)]
    CapacityOverflow(usize),
    #[error("out-of-order push: expected index {expected}, got {got}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("window holds {have} observations, operation needs {need}")]
    NotReady { have: usize, need: usize },
    #[error("observation {0} is not resident in the window")]
    NotResident(u64),
    #[error("indicator is undefined for a node paired with itself (index {0})")]
    SelfPair(u64),
    #[error(transparent)]
    Distance(#[from] DistanceError),
}

/// Motif counts of one window, the raw inputs to every moment formula.
/// All counts are over ordered tuples of pairwise-distinct indices.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFunctionals {
    /// Number of observations in the window when counted.
    pub l: usize,
    /// Neighbor count the graph was thresholded at.
    pub k: usize,
    /// Mutual neighbors: sum over (i,j) of A+_ij A+_ji.
    pub mutual_sum: u64,
    /// Shared neighbors: sum over (i; j != l) of A+_ji A+_li.
    pub shared_sum: u64,
    /// mutual_rank[r-1]: sum over (i,j) of A(k)_ij A(r)_ji, r = 1..k.
    pub mutual_rank: Vec<u64>,
    /// shared_rank[r-1]: sum over (i; j != l) of A(k)_ji A(r)_li, r = 1..k.
    pub shared_rank: Vec<u64>,
    /// Five three-way configuration counts, in order:
    /// [0] sum A+_ji A+_li A+_vi   (three edges into one node)
    /// [1] sum A+_ij A+_ji A+_li   (mutual pair plus an extra edge into i)
    /// [2] sum A+_ij A+_li A+_vj   (an edge plus one edge into each endpoint)
    /// [3] sum A+_ij A+_jl A+_li   (directed three-cycles)
    /// [4] sum A+_ij A+_il A+_jl   (out-pair closed by an edge)
    pub motif3: [u64; 5],
}

impl GraphFunctionals {
    /// Sum of the rank-resolved mutual counts; equals the number of mutual
    /// pairs whose forward edge has rank exactly k.
    pub fn mutual_rank_total(&self) -> u64 {
        self.mutual_rank.iter().sum()
    }

    pub fn shared_rank_total(&self) -> u64 {
        self.shared_rank.iter().sum()
    }
}

enum Mode {
    /// Ring buffer of fixed length; push evicts the oldest once full.
    Sliding { capacity: usize },
    /// Append-only; the window is always the whole history.
    Growing,
}

/// Sliding-window k-NN graph with cached distances and full rank orders.
pub struct WindowGraph {
    mode: Mode,
    k: usize,
    spec: DistanceSpec,
    /// Resident observations by slot. Length tracks the allocated capacity.
    obs: Vec<Option<Observation>>,
    /// Row-major symmetric distance cache with stride `obs.len()`.
    dist: Vec<f64>,
    /// Per slot, every other resident slot ascending by (distance, index).
    order: Vec<Vec<Slot>>,
    count: usize,
    next_index: Option<u64>,
}

impl WindowGraph {
    /// Fixed window of `capacity` observations; pushes evict FIFO once full.
    pub fn sliding(capacity: usize, k: usize, spec: DistanceSpec) -> Result<Self, GraphError> {
        if capacity < 3 {
            return Err(GraphError::BadCapacity(capacity));
        }
        if capacity > Slot::MAX as usize {
            return Err(GraphError::CapacityOverflow(capacity));
        }
        if k == 0 || k >= capacity {
            return Err(GraphError::BadK { k, size: capacity });
        }
        Ok(WindowGraph {
            mode: Mode::Sliding { capacity },
            k,
            spec,
            obs: (0..capacity).map(|_| None).collect(),
            dist: vec![0.0; capacity * capacity],
            order: vec![Vec::new(); capacity],
            count: 0,
            next_index: None,
        })
    }

    /// Unbounded graph over the entire history seen so far.
    pub fn growing(k: usize, spec: DistanceSpec) -> Result<Self, GraphError> {
        if k == 0 {
            return Err(GraphError::BadK { k, size: 0 });
        }
        let initial = 16.max(k + 2);
        Ok(WindowGraph {
            mode: Mode::Growing,
            k,
            spec,
            obs: (0..initial).map(|_| None).collect(),
            dist: vec![0.0; initial * initial],
            order: vec![Vec::new(); initial],
            count: 0,
            next_index: None,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn spec(&self) -> &DistanceSpec {
        &self.spec
    }

    /// True when every later operation is admissible: a sliding window must
    /// be filled to capacity; a growing graph needs k+1 points so that every
    /// node has k neighbors.
    pub fn is_ready(&self) -> bool {
        match self.mode {
            Mode::Sliding { capacity } => self.count == capacity,
            Mode::Growing => self.count >= self.k + 1,
        }
    }

    fn ready_need(&self) -> usize {
        match self.mode {
            Mode::Sliding { capacity } => capacity,
            Mode::Growing => self.k + 1,
        }
    }

    /// Index of the newest resident, if any.
    pub fn newest_index(&self) -> Option<u64> {
        self.next_index.map(|n| n - 1)
    }

    /// Index of the oldest resident, if any.
    pub fn oldest_index(&self) -> Option<u64> {
        self.newest_index()
            .map(|newest| newest + 1 - self.count as u64)
    }

    fn stride(&self) -> usize {
        self.obs.len()
    }

    fn slot_of(&self, index: u64) -> Result<usize, GraphError> {
        let oldest = self.oldest_index().ok_or(GraphError::NotResident(index))?;
        let newest = self.newest_index().unwrap();
        if index < oldest || index > newest {
            return Err(GraphError::NotResident(index));
        }
        let slot = match self.mode {
            // Residents have consecutive indices, so index mod capacity is
            // injective over the window.
            Mode::Sliding { capacity } => (index % capacity as u64) as usize,
            Mode::Growing => (index - self.first_growing_index()) as usize,
        };
        Ok(slot)
    }

    fn first_growing_index(&self) -> u64 {
        // Growing mode never evicts, so slot 0 holds the first push.
        self.obs[0].as_ref().map(|o| o.index).unwrap_or(0)
    }

    fn index_of_slot(&self, slot: usize) -> u64 {
        self.obs[slot].as_ref().expect("occupied slot").index
    }

    /// Window position of a slot: 0 for the oldest resident, count-1 for
    /// the newest.
    fn position_of_slot(&self, slot: usize) -> usize {
        (self.index_of_slot(slot) - self.oldest_index().unwrap()) as usize
    }

    /// Slots ordered oldest to newest.
    fn slots_by_position(&self) -> Vec<usize> {
        let mut v = vec![0usize; self.count];
        for slot in 0..self.stride() {
            if self.obs[slot].is_some() {
                v[self.position_of_slot(slot)] = slot;
            }
        }
        v
    }

    fn grow_storage(&mut self) {
        let old = self.stride();
        let new = (old * 2).min(Slot::MAX as usize).max(old + 1);
        let mut dist = vec![0.0; new * new];
        for r in 0..old {
            dist[r * new..r * new + old].copy_from_slice(&self.dist[r * old..(r + 1) * old]);
        }
        self.dist = dist;
        self.obs.resize_with(new, || None);
        self.order.resize_with(new, Vec::new);
    }

    /// Insert the next observation. Returns the evicted observation when a
    /// full sliding window rotates one out.
    pub fn push(&mut self, obs: Observation) -> Result<Option<Observation>, GraphError> {
        if let Some(expected) = self.next_index {
            if obs.index != expected {
                return Err(GraphError::OutOfOrder {
                    expected,
                    got: obs.index,
                });
            }
        }

        let (new_slot, evicted) = match self.mode {
            Mode::Sliding { capacity } => {
                let slot = (obs.index % capacity as u64) as usize;
                let evicted = if self.count == capacity {
                    // The ring maps the newcomer onto the oldest resident's
                    // slot, so claiming the slot is the eviction.
                    self.count -= 1;
                    let gone = self.obs[slot].take();
                    for s in 0..capacity {
                        if self.obs[s].is_some() {
                            self.order[s].retain(|&x| x as usize != slot);
                        }
                    }
                    gone
                } else {
                    None
                };
                (slot, evicted)
            }
            Mode::Growing => {
                if self.count == self.stride() {
                    self.grow_storage();
                }
                (self.count, None)
            }
        };

        // Distances to every current resident, computed exactly once.
        let stride = self.stride();
        let mut new_order: Vec<(f64, u64, Slot)> = Vec::with_capacity(self.count);
        for s in 0..stride {
            let Some(other) = &self.obs[s] else { continue };
            let d = distance(&obs, other, &self.spec)?;
            self.dist[new_slot * stride + s] = d;
            self.dist[s * stride + new_slot] = d;
            new_order.push((d, other.index, s as Slot));
        }

        // The newcomer has the largest index, so on distance ties it sorts
        // after every equal-distance resident.
        for s in 0..stride {
            if self.obs[s].is_none() {
                continue;
            }
            let d_new = self.dist[s * stride + new_slot];
            let pos = self.order[s].partition_point(|&m| {
                let dm = self.dist[s * stride + m as usize];
                dm < d_new || (dm == d_new && self.index_of_slot(m as usize) < obs.index)
            });
            self.order[s].insert(pos, new_slot as Slot);
        }

        new_order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        self.order[new_slot] = new_order.into_iter().map(|(_, _, s)| s).collect();

        self.next_index = Some(obs.index + 1);
        self.obs[new_slot] = Some(obs);
        self.count += 1;
        Ok(evicted)
    }

    /// Neighbor rank of j from i: Some(r) when j is i's r-th nearest
    /// neighbor with r <= k, None otherwise.
    pub fn indicator(&self, i: u64, j: u64) -> Result<Option<usize>, GraphError> {
        if i == j {
            return Err(GraphError::SelfPair(i));
        }
        let si = self.slot_of(i)?;
        let sj = self.slot_of(j)? as Slot;
        let r = self.order[si]
            .iter()
            .take(self.k)
            .position(|&s| s == sj)
            .map(|p| p + 1);
        Ok(r)
    }

    /// Cached distance between two resident observations.
    pub fn cached_distance(&self, i: u64, j: u64) -> Result<f64, GraphError> {
        let si = self.slot_of(i)?;
        let sj = self.slot_of(j)?;
        if si == sj {
            return Ok(0.0);
        }
        Ok(self.dist[si * self.stride() + sj])
    }

    /// Directed k-NN edges as (window position of source, window position
    /// of target) pairs, 0 = oldest resident. Ordering is deterministic:
    /// ascending source position, then rank.
    pub fn edge_positions(&self) -> Result<Vec<(usize, usize)>, GraphError> {
        self.require_ready()?;
        let slots = self.slots_by_position();
        let mut edges = Vec::with_capacity(self.count * self.k);
        for (pos, &slot) in slots.iter().enumerate() {
            for &nb in self.order[slot].iter().take(self.k) {
                edges.push((pos, self.position_of_slot(nb as usize)));
            }
        }
        Ok(edges)
    }

    /// Edge list as "i j r" lines (observation indices and rank), sorted by
    /// source index then rank, for differential testing.
    pub fn edge_dump(&self) -> Result<String, GraphError> {
        self.require_ready()?;
        let slots = self.slots_by_position();
        let mut out = String::new();
        for &slot in &slots {
            let i = self.index_of_slot(slot);
            for (r, &nb) in self.order[slot].iter().take(self.k).enumerate() {
                out.push_str(&format!("{} {} {}\n", i, self.index_of_slot(nb as usize), r + 1));
            }
        }
        Ok(out)
    }

    fn require_ready(&self) -> Result<(), GraphError> {
        if !self.is_ready() {
            return Err(GraphError::NotReady {
                have: self.count,
                need: self.ready_need(),
            });
        }
        Ok(())
    }

    /// Motif counts at the graph's configured k.
    pub fn functionals(&self) -> Result<GraphFunctionals, GraphError> {
        self.functionals_for_k(self.k)
    }

    /// Just the mutual and shared neighbor sums, skipping the three-way
    /// counts. The variance of the scan statistic needs only these two, and
    /// they cost O(L k^2) against the full motif pass, which matters when
    /// every arriving observation triggers a scan.
    pub fn pair_counts(&self, k: usize) -> Result<(u64, u64), GraphError> {
        self.require_ready()?;
        let n = self.count;
        if k == 0 || k >= n {
            return Err(GraphError::BadK { k, size: n });
        }
        let slots = self.slots_by_position();
        let mut in_degree = vec![0u64; n];
        let mut mutual = 0u64;
        for a in 0..n {
            let sa = slots[a];
            for &nb in self.order[sa].iter().take(k) {
                let b = self.position_of_slot(nb as usize);
                in_degree[b] += 1;
                // Mutual when b also lists a within its first k.
                let sb = slots[b];
                if self.order[sb].iter().take(k).any(|&m| m as usize == sa) {
                    mutual += 1;
                }
            }
        }
        let shared = in_degree.iter().map(|&d| d * d.saturating_sub(1)).sum();
        Ok((mutual, shared))
    }

    /// Motif counts with the neighbor threshold overridden, so one pass of
    /// window maintenance can serve several k values (ranks are k-free).
    pub fn functionals_for_k(&self, k: usize) -> Result<GraphFunctionals, GraphError> {
        self.require_ready()?;
        let n = self.count;
        if k == 0 || k >= n {
            return Err(GraphError::BadK { k, size: n });
        }
        let slots = self.slots_by_position();

        // pos[a * n + b] = 0-based rank of b in a's ordering, by dense node
        // ids 0..n (window positions). NO_POS on the diagonal.
        let mut pos = vec![NO_POS; n * n];
        for (a, &slot) in slots.iter().enumerate() {
            for (p, &nb) in self.order[slot].iter().enumerate() {
                let b = self.position_of_slot(nb as usize);
                pos[a * n + b] = p as u16;
            }
        }
        let kk = k as u16;
        let is_out = |a: usize, b: usize| pos[a * n + b] < kk;

        // Sorted in-neighbor lists and in-degrees under threshold k.
        let mut in_list: Vec<Vec<u16>> = vec![Vec::new(); n];
        for a in 0..n {
            for b in 0..n {
                if a != b && is_out(a, b) {
                    in_list[b].push(a as u16);
                }
            }
        }
        let deg = |a: usize| in_list[a].len() as u64;

        let mut mutual_sum = 0u64;
        let mut shared_sum = 0u64;
        let mut motif3 = [0u64; 5];

        for a in 0..n {
            let d = deg(a);
            shared_sum += d * (d.max(1) - 1);
            motif3[0] += d * (d.max(1) - 1) * (d.max(2) - 2);
        }

        for a in 0..n {
            for bp in 0..k {
                let b = self.position_of_slot(self.order[slots[a]][bp] as usize);
                if is_out(b, a) {
                    mutual_sum += 1;
                    // Mutual pair (a,b) joined by any third edge into a.
                    motif3[1] += deg(a) - 1;
                }
                // Edge a -> b with one extra edge into each endpoint:
                // l -> a (l not in {a,b}) and v -> b (v not in {a,b}),
                // minus the tuples where l = v.
                let into_a = deg(a) - u64::from(is_out(b, a));
                let into_b = deg(b) - 1;
                let mut common = 0u64;
                {
                    let (la, lb) = (&in_list[a], &in_list[b]);
                    let (mut x, mut y) = (0usize, 0usize);
                    while x < la.len() && y < lb.len() {
                        match la[x].cmp(&lb[y]) {
                            std::cmp::Ordering::Less => x += 1,
                            std::cmp::Ordering::Greater => y += 1,
                            std::cmp::Ordering::Equal => {
                                if la[x] as usize != a && la[x] as usize != b {
                                    common += 1;
                                }
                                x += 1;
                                y += 1;
                            }
                        }
                    }
                }
                motif3[2] += into_a * into_b - common;

                // Directed three-cycles a -> b -> c -> a.
                for cp in 0..k {
                    let c = self.position_of_slot(self.order[slots[b]][cp] as usize);
                    if c != a && is_out(c, a) {
                        motif3[3] += 1;
                    }
                }
                // Ordered out-pairs (b, c) of a closed by b -> c.
                for cp in 0..k {
                    if cp == bp {
                        continue;
                    }
                    let c = self.position_of_slot(self.order[slots[a]][cp] as usize);
                    if is_out(b, c) {
                        motif3[4] += 1;
                    }
                }
            }
        }

        // Rank-resolved variants. cnt_r[r-1][a] = number of nodes whose
        // r-th neighbor is a.
        let mut mutual_rank = vec![0u64; k];
        let mut shared_rank = vec![0u64; k];
        let mut cnt_r = vec![0u64; k * n];
        for a in 0..n {
            for (p, &nb) in self.order[slots[a]].iter().take(k).enumerate() {
                let b = self.position_of_slot(nb as usize);
                cnt_r[p * n + b] += 1;
            }
        }
        for a in 0..n {
            // b is a's k-th neighbor; does b point back, and at what rank?
            let b = self.position_of_slot(self.order[slots[a]][k - 1] as usize);
            let back = pos[b * n + a];
            if back < kk {
                mutual_rank[back as usize] += 1;
            }
        }
        for r in 0..k {
            for a in 0..n {
                let ck = cnt_r[(k - 1) * n + a];
                let cr = cnt_r[r * n + a];
                // Ordered (j, l), j != l, with j's k-th and l's r-th both a;
                // j = l only possible when r = k.
                shared_rank[r] += ck * cr - if r == k - 1 { ck } else { 0 };
            }
        }

        Ok(GraphFunctionals {
            l: n,
            k,
            mutual_sum,
            shared_sum,
            mutual_rank,
            shared_rank,
            motif3,
        })
    }
}
