//! Torn grid complexes over slit domains.
//!
//! A complex discretizes the path-metric completion of a box minus a set of
//! hyperplane obstacles at resolution `h`: lattice vertices lying in the
//! relative interior of an obstacle are duplicated into ± sheets, and edges
//! only connect copies on compatible sides. The edge stencil includes all
//! diagonal neighbors, so graph distance overestimates the true path metric
//! by at most the stencil distortion factor [`stencil_distortion`].
//!
//! Obstacles are closed unions of axis-aligned rectangles inside a single
//! hyperplane. An ordinary slit is one rectangle; the Menger sheets are
//! strip unions. Interiors are taken relative to the closed box, so an
//! obstacle reaching the outer boundary still tears the boundary face.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::sync::OnceLock;

use crate::dyadic::Dyadic;
use crate::slits::{BoxN, Slit, SlitSequence};
use crate::{Error, Result};

/// Complexes refuse to allocate more than this many cells.
pub const CELL_CAP: u64 = 1 << 24;

/// Worst-case ratio of stencil path length to Euclidean distance for the
/// full axis+diagonal stencil in dimension `n`:
/// `κ_n = sqrt(Σ_{k=1}^n (√k − √(k−1))²)` (κ₂ ≈ 1.0824, κ₃ ≈ 1.1281).
pub fn stencil_distortion(n: usize) -> f64 {
    (1..=n)
        .map(|k| {
            let d = (k as f64).sqrt() - ((k - 1) as f64).sqrt();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// What an obstacle came from; used by projections, registries, reports.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ObstacleLabel {
    /// Slit `seq_index` of a slit sequence.
    Slit { seq_index: usize },
    /// Menger flat-cross grillage of generation `gen` in plane column `k`.
    Cross { gen: usize, k: usize },
    /// Menger flat-tube strip of generation `gen`, plane row `l`, band `m`.
    Tube { gen: usize, l: usize, m: usize },
}

/// A connected union of closed axis-aligned rectangles in the hyperplane
/// `x_axis = offset`. Rect intervals are listed per in-plane axis in
/// increasing axis order.
#[derive(Clone, Debug)]
pub struct Obstacle {
    pub axis: usize,
    pub offset: Dyadic,
    pub rects: Vec<Vec<(Dyadic, Dyadic)>>,
    pub label: ObstacleLabel,
}

impl Obstacle {
    pub fn from_slit(s: &Slit, seq_index: usize) -> Obstacle {
        let a = s.as_aabb();
        let rect = (0..s.dim())
            .filter(|&d| d != s.axis)
            .map(|d| (a.lo[d], a.hi[d]))
            .collect();
        Obstacle {
            axis: s.axis,
            offset: s.offset,
            rects: vec![rect],
            label: ObstacleLabel::Slit { seq_index },
        }
    }

    /// True if the in-plane point lies in the interior of the rect union,
    /// relative to the closed box cross-section (a direction that would exit
    /// the box counts as covered). `point` lists in-plane coordinates in
    /// increasing axis order, `extent` the matching box intervals.
    fn interior_contains(&self, point: &[Dyadic], extent: &[(Dyadic, Dyadic)]) -> bool {
        let m = point.len();
        let in_rect = |r: &Vec<(Dyadic, Dyadic)>| {
            (0..m).all(|d| r[d].0 <= point[d] && point[d] <= r[d].1)
        };
        if !self.rects.iter().any(in_rect) {
            return false;
        }
        // every direction in {-1,0,1}^m \ {0} must be covered
        let mut dir = vec![-1i8; m];
        loop {
            if dir.iter().any(|&d| d != 0) {
                let exits_box = (0..m).any(|d| {
                    (dir[d] > 0 && point[d] == extent[d].1)
                        || (dir[d] < 0 && point[d] == extent[d].0)
                });
                if !exits_box {
                    let covered = self.rects.iter().any(|r| {
                        in_rect(r)
                            && (0..m).all(|d| match dir[d] {
                                1 => point[d] < r[d].1,
                                -1 => point[d] > r[d].0,
                                _ => true,
                            })
                    });
                    if !covered {
                        return false;
                    }
                }
            }
            // next direction
            let mut d = 0;
            loop {
                if d == m {
                    return true;
                }
                if dir[d] < 1 {
                    dir[d] += 1;
                    break;
                }
                dir[d] = -1;
                d += 1;
            }
        }
    }
}

/// Up to two obstacle tags per vertex (a point can lie on one x-normal and
/// one y-normal sheet simultaneously).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default)]
pub struct TagSet {
    n: u8,
    tags: [(u16, i8); 2],
}

impl TagSet {
    pub fn empty() -> TagSet {
        TagSet::default()
    }

    fn push(&mut self, obstacle: u16, side: i8) {
        assert!(self.n < 2, "a lattice point can lie on at most two sheets");
        self.tags[self.n as usize] = (obstacle, side);
        self.n += 1;
    }

    pub fn len(&self) -> usize {
        self.n as usize
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (u16, i8)> + '_ {
        self.tags[..self.n as usize].iter().copied()
    }

    pub fn side_of(&self, obstacle: u16) -> Option<i8> {
        self.iter().find(|&(o, _)| o == obstacle).map(|(_, s)| s)
    }

    fn sorted(mut self) -> TagSet {
        if self.n == 2 && self.tags[0].0 > self.tags[1].0 {
            self.tags.swap(0, 1);
        }
        self
    }
}

#[derive(Clone, Debug)]
pub struct Vertex {
    pub lattice: u32,
    pub copy: u8,
    pub tags: TagSet,
}

/// Which boundary vertices a double identifies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlueSpec {
    /// The whole outer boundary (Sierpiński doubles).
    OuterBoundary,
    /// The two faces perpendicular to one axis (Menger doubles along
    /// top and bottom use axis 2).
    AxisFaces(usize),
}

/// A point of the complex: exact coordinates, sheet tags, copy index.
#[derive(Clone, Debug, PartialEq)]
pub struct PointRef {
    pub coords: Vec<Dyadic>,
    /// (obstacle index, side) per obstacle whose interior contains the point.
    pub sides: Vec<(usize, i8)>,
    pub copy: usize,
}

impl PointRef {
    pub fn plain(coords: Vec<Dyadic>) -> PointRef {
        PointRef { coords, sides: Vec::new(), copy: 0 }
    }

    pub fn tagged(coords: Vec<Dyadic>, sides: Vec<(usize, i8)>) -> PointRef {
        PointRef { coords, sides, copy: 0 }
    }

    pub fn in_copy(mut self, copy: usize) -> PointRef {
        self.copy = copy;
        self
    }
}

/// A vertex path with its Euclidean length.
#[derive(Clone, Debug)]
pub struct PathInComplex {
    pub verts: Vec<u32>,
    pub length: f64,
}

/// Sparse CSR graph with f64 edge lengths.
#[derive(Clone, Debug)]
pub struct Graph {
    start: Vec<u32>,
    to: Vec<u32>,
    len: Vec<f64>,
}

#[derive(Clone, Copy)]
struct HeapEntry {
    cost: f64,
    node: u32,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cost == other.cost && self.node == other.node
    }
}
impl Eq for HeapEntry {}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed for a min-heap; ties broken by vertex id for determinism
        other
            .cost
            .partial_cmp(&self.cost)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.node.cmp(&self.node))
    }
}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Search controls: optional cost cap and early-exit target set.
#[derive(Clone, Default)]
pub struct SearchOpts {
    pub cap: Option<f64>,
    pub stop_at_any: Option<Vec<u32>>,
}

pub struct SearchResult {
    pub dist: Vec<f64>,
    pub parent: Vec<u32>,
    /// First settled target when `stop_at_any` was given.
    pub hit: Option<u32>,
}

pub const NO_PARENT: u32 = u32::MAX;

impl Graph {
    pub fn from_edges(n: usize, edges: &[(u32, u32, f64)]) -> Graph {
        let mut deg = vec![0u32; n + 1];
        for &(a, b, _) in edges {
            deg[a as usize + 1] += 1;
            deg[b as usize + 1] += 1;
        }
        for i in 0..n {
            deg[i + 1] += deg[i];
        }
        let m = deg[n] as usize;
        let mut to = vec![0u32; m];
        let mut len = vec![0f64; m];
        let mut fill = deg.clone();
        for &(a, b, l) in edges {
            let ai = fill[a as usize] as usize;
            to[ai] = b;
            len[ai] = l;
            fill[a as usize] += 1;
            let bi = fill[b as usize] as usize;
            to[bi] = a;
            len[bi] = l;
            fill[b as usize] += 1;
        }
        Graph { start: deg, to, len }
    }

    pub fn node_count(&self) -> usize {
        self.start.len() - 1
    }

    pub fn neighbors(&self, v: u32) -> impl Iterator<Item = (u32, f64)> + '_ {
        let r = self.start[v as usize] as usize..self.start[v as usize + 1] as usize;
        r.map(move |i| (self.to[i], self.len[i]))
    }

    pub fn degree(&self, v: u32) -> usize {
        (self.start[v as usize + 1] - self.start[v as usize]) as usize
    }

    /// Dijkstra from weighted sources with a custom edge cost. The cost
    /// closure sees (from, to, euclidean length).
    pub fn dijkstra_by(
        &self,
        sources: &[(u32, f64)],
        opts: &SearchOpts,
        mut cost: impl FnMut(u32, u32, f64) -> f64,
    ) -> SearchResult {
        let n = self.node_count();
        let mut dist = vec![f64::INFINITY; n];
        let mut parent = vec![NO_PARENT; n];
        let mut settled = vec![false; n];
        let mut heap = BinaryHeap::new();
        for &(s, c) in sources {
            if c < dist[s as usize] {
                dist[s as usize] = c;
                heap.push(HeapEntry { cost: c, node: s });
            }
        }
        let is_target: Option<Vec<bool>> = opts.stop_at_any.as_ref().map(|ts| {
            let mut f = vec![false; n];
            for &t in ts {
                f[t as usize] = true;
            }
            f
        });
        let mut hit = None;
        while let Some(HeapEntry { cost: c, node: v }) = heap.pop() {
            if settled[v as usize] {
                continue;
            }
            settled[v as usize] = true;
            if let Some(cap) = opts.cap {
                if c > cap {
                    break;
                }
            }
            if let Some(t) = &is_target {
                if t[v as usize] {
                    hit = Some(v);
                    break;
                }
            }
            for i in self.start[v as usize] as usize..self.start[v as usize + 1] as usize {
                let u = self.to[i];
                if settled[u as usize] {
                    continue;
                }
                let c2 = c + cost(v, u, self.len[i]);
                if c2 < dist[u as usize] {
                    dist[u as usize] = c2;
                    parent[u as usize] = v;
                    heap.push(HeapEntry { cost: c2, node: u });
                }
            }
        }
        SearchResult { dist, parent, hit }
    }

    pub fn dijkstra(&self, sources: &[(u32, f64)], opts: &SearchOpts) -> SearchResult {
        self.dijkstra_by(sources, opts, |_, _, l| l)
    }
}

/// Reconstruct the vertex path ending at `end` from a parent array.
pub fn extract_path(parent: &[u32], end: u32) -> Vec<u32> {
    let mut path = vec![end];
    let mut v = end;
    while parent[v as usize] != NO_PARENT {
        v = parent[v as usize];
        path.push(v);
    }
    path.reverse();
    path
}

/// Cell adjacency graph (nodes are voxels, possibly over two copies).
pub struct CellGraph {
    pub graph: Graph,
    pub torn: bool,
}

/// A torn grid complex over `bx` at resolution `h`.
pub struct GridComplex {
    pub bx: BoxN,
    pub h: Dyadic,
    pub obstacles: Vec<Obstacle>,
    /// Vertex lattice counts per axis.
    pub vdims: Vec<usize>,
    /// Cell counts per axis.
    pub cdims: Vec<usize>,
    pub copies: usize,
    pub glue: Option<GlueSpec>,
    verts: Vec<Vertex>,
    /// CSR over (copy, lattice) slots of length copies·L+1. For glued
    /// lattice points the copy-1 slot is empty; use [`GridComplex::verts_at`].
    lattice_start: Vec<u32>,
    graph: OnceLock<Graph>,
    cell_graph_torn: OnceLock<CellGraph>,
    cell_graph_untorn: OnceLock<CellGraph>,
}

impl GridComplex {
    /// Discretize the completion of `seq.bx` minus the first `level` slits.
    pub fn build_slit_complex(seq: &SlitSequence, level: usize, h: Dyadic) -> Result<GridComplex> {
        if level > seq.len() {
            return Err(Error::Invalid(format!(
                "level {level} exceeds slit count {}",
                seq.len()
            )));
        }
        let obstacles = seq.slits[..level]
            .iter()
            .enumerate()
            .map(|(i, s)| Obstacle::from_slit(s, i))
            .collect();
        GridComplex::build(seq.bx.clone(), h, obstacles, 1, None)
    }

    /// General builder; Menger complexes pass their sheet obstacles here.
    pub fn build(
        bx: BoxN,
        h: Dyadic,
        obstacles: Vec<Obstacle>,
        copies: usize,
        glue: Option<GlueSpec>,
    ) -> Result<GridComplex> {
        if !h.is_positive() {
            return Err(Error::Invalid("resolution must be positive".into()));
        }
        let n = bx.dim();
        let mut vdims = Vec::with_capacity(n);
        for d in 0..n {
            let steps = bx.side(d).exact_div(h).ok_or_else(|| {
                Error::ResolutionMisaligned(format!("box side {} not a multiple of h", d))
            })?;
            vdims.push(steps as usize + 1);
        }
        let cells: u64 = vdims.iter().map(|&v| (v - 1) as u64).product::<u64>() * copies as u64;
        if cells > CELL_CAP {
            return Err(Error::CellCap {
                cells,
                cap: CELL_CAP,
                suggestion: (h + h).to_string(),
            });
        }
        // alignment of every obstacle coordinate
        for ob in &obstacles {
            let (a, _) = bx.interval(ob.axis);
            if !(ob.offset - a).is_multiple_of(h) {
                return Err(Error::ResolutionMisaligned(format!(
                    "obstacle offset {} not on the h-lattice",
                    ob.offset
                )));
            }
            let inplane: Vec<usize> = (0..n).filter(|&d| d != ob.axis).collect();
            for rect in &ob.rects {
                for (j, &d) in inplane.iter().enumerate() {
                    let (a, _) = bx.interval(d);
                    if !(rect[j].0 - a).is_multiple_of(h) || !(rect[j].1 - a).is_multiple_of(h) {
                        return Err(Error::ResolutionMisaligned(
                            "obstacle rectangle not on the h-lattice".into(),
                        ));
                    }
                }
            }
        }
        let cdims: Vec<usize> = vdims.iter().map(|&v| v - 1).collect();
        let mut gc = GridComplex {
            bx,
            h,
            obstacles,
            vdims,
            cdims,
            copies,
            glue,
            verts: Vec::new(),
            lattice_start: Vec::new(),
            graph: OnceLock::new(),
            cell_graph_torn: OnceLock::new(),
            cell_graph_untorn: OnceLock::new(),
        };
        gc.build_vertices();
        Ok(gc)
    }

    /// Double of this complex along the given boundary selection.
    pub fn double(&self, glue: GlueSpec) -> Result<GridComplex> {
        if self.copies != 1 {
            return Err(Error::Invalid("already doubled".into()));
        }
        GridComplex::build(self.bx.clone(), self.h, self.obstacles.clone(), 2, Some(glue))
    }

    pub fn dim(&self) -> usize {
        self.bx.dim()
    }

    pub fn lattice_count(&self) -> usize {
        self.vdims.iter().product()
    }

    pub fn vertex_count(&self) -> usize {
        self.verts.len()
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.verts
    }

    pub fn cell_count(&self) -> usize {
        self.cdims.iter().product::<usize>() * self.copies
    }

    pub fn cells_per_copy(&self) -> usize {
        self.cdims.iter().product()
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.to_f64().powi(self.dim() as i32)
    }

    // ---- lattice indexing ------------------------------------------------

    pub fn lattice_id(&self, idx: &[i64]) -> u32 {
        let mut id = 0usize;
        for d in 0..self.dim() {
            debug_assert!(idx[d] >= 0 && (idx[d] as usize) < self.vdims[d]);
            id = id * self.vdims[d] + idx[d] as usize;
        }
        id as u32
    }

    pub fn lattice_indices(&self, mut lat: u32) -> Vec<i64> {
        let n = self.dim();
        let mut idx = vec![0i64; n];
        for d in (0..n).rev() {
            idx[d] = (lat as usize % self.vdims[d]) as i64;
            lat /= self.vdims[d] as u32;
        }
        idx
    }

    pub fn lattice_coord(&self, axis: usize, idx: i64) -> Dyadic {
        self.bx.interval(axis).0 + Dyadic::from_int(idx) * self.h
    }

    pub fn lattice_point(&self, lat: u32) -> Vec<Dyadic> {
        self.lattice_indices(lat)
            .iter()
            .enumerate()
            .map(|(d, &i)| self.lattice_coord(d, i))
            .collect()
    }

    fn on_glue(&self, idx: &[i64]) -> bool {
        match self.glue {
            None => false,
            Some(GlueSpec::OuterBoundary) => {
                (0..self.dim()).any(|d| idx[d] == 0 || idx[d] as usize == self.vdims[d] - 1)
            }
            Some(GlueSpec::AxisFaces(a)) => idx[a] == 0 || idx[a] as usize == self.vdims[a] - 1,
        }
    }

    // ---- vertex construction ----------------------------------------------

    /// Tags of a lattice point: all obstacles whose interior contains it.
    fn lattice_tags(&self, idx: &[i64]) -> Vec<u16> {
        let n = self.dim();
        let mut found = Vec::new();
        for (oi, ob) in self.obstacles.iter().enumerate() {
            let coord = self.lattice_coord(ob.axis, idx[ob.axis]);
            if coord != ob.offset {
                continue;
            }
            let inplane: Vec<Dyadic> = (0..n)
                .filter(|&d| d != ob.axis)
                .map(|d| self.lattice_coord(d, idx[d]))
                .collect();
            let extent: Vec<(Dyadic, Dyadic)> = (0..n)
                .filter(|&d| d != ob.axis)
                .map(|d| self.bx.interval(d))
                .collect();
            if ob.interior_contains(&inplane, &extent) {
                found.push(oi as u16);
            }
        }
        found
    }

    fn build_vertices(&mut self) {
        let lat_count = self.lattice_count();
        let mut verts = Vec::with_capacity(lat_count * self.copies);
        let mut lattice_start = Vec::with_capacity(lat_count * self.copies + 1);
        lattice_start.push(0u32);
        for copy in 0..self.copies {
            for lat in 0..lat_count as u32 {
                let idx = self.lattice_indices(lat);
                if copy == 1 && self.on_glue(&idx) {
                    lattice_start.push(verts.len() as u32);
                    continue;
                }
                let tagged = self.lattice_tags(&idx);
                // one vertex per sign assignment, sides enumerated -1 before +1
                let k = tagged.len();
                for combo in 0..(1u32 << k) {
                    let mut tags = TagSet::empty();
                    for (j, &oi) in tagged.iter().enumerate() {
                        let side = if combo >> j & 1 == 0 { -1 } else { 1 };
                        tags.push(oi, side);
                    }
                    verts.push(Vertex { lattice: lat, copy: copy as u8, tags: tags.sorted() });
                }
                lattice_start.push(verts.len() as u32);
            }
        }
        self.verts = verts;
        self.lattice_start = lattice_start;
    }

    /// Vertices at a lattice point, resolving glue to copy 0.
    pub fn verts_at(&self, copy: usize, lat: u32) -> &[Vertex] {
        let r = self.vert_ids_at(copy, lat);
        &self.verts[r.start as usize..r.end as usize]
    }

    /// Vertex-id range at a lattice point, resolving glue to copy 0.
    pub fn vert_ids_range(&self, copy: usize, lat: u32) -> std::ops::Range<u32> {
        self.vert_ids_at(copy, lat)
    }

    fn vert_ids_at(&self, copy: usize, lat: u32) -> std::ops::Range<u32> {
        let copy = if copy == 1 && self.on_glue(&self.lattice_indices(lat)) {
            0
        } else {
            copy
        };
        let slot = copy * self.lattice_count() + lat as usize;
        self.lattice_start[slot]..self.lattice_start[slot + 1]
    }

    // ---- edge construction -------------------------------------------------

    fn stencil(&self) -> Vec<Vec<i64>> {
        let n = self.dim();
        let mut out = Vec::new();
        let total = 3usize.pow(n as u32);
        for code in 0..total {
            let mut c = code;
            let mut delta = vec![0i64; n];
            for d in 0..n {
                delta[d] = (c % 3) as i64 - 1;
                c /= 3;
            }
            // keep the canonical half: first nonzero component positive
            match delta.iter().find(|&&x| x != 0) {
                Some(&x) if x > 0 => out.push(delta),
                _ => {}
            }
        }
        out
    }

    /// Side of lattice coordinate vs. an obstacle plane: -1, 0, +1.
    fn side_of_plane(&self, ob: &Obstacle, idx: &[i64]) -> i8 {
        let coord = self.lattice_coord(ob.axis, idx[ob.axis]);
        match coord.cmp(&ob.offset) {
            Ordering::Less => -1,
            Ordering::Equal => 0,
            Ordering::Greater => 1,
        }
    }

    fn compatible(&self, vp: &Vertex, idx_p: &[i64], vq: &Vertex, idx_q: &[i64]) -> bool {
        for (oi, sp) in vp.tags.iter() {
            match vq.tags.side_of(oi) {
                Some(sq) => {
                    if sp != sq {
                        return false;
                    }
                }
                None => {
                    let side_q = self.side_of_plane(&self.obstacles[oi as usize], idx_q);
                    if side_q != 0 && side_q != sp {
                        return false;
                    }
                }
            }
        }
        for (oi, sq) in vq.tags.iter() {
            if vp.tags.side_of(oi).is_none() {
                let side_p = self.side_of_plane(&self.obstacles[oi as usize], idx_p);
                if side_p != 0 && side_p != sq {
                    return false;
                }
            }
        }
        true
    }

    /// The torn vertex graph (built once, cached).
    pub fn graph(&self) -> &Graph {
        self.graph.get_or_init(|| {
            let n = self.dim();
            let hf = self.h.to_f64();
            let stencil = self.stencil();
            let mut edges: Vec<(u32, u32, f64)> = Vec::new();
            let lat_count = self.lattice_count();
            let mut idx_q = vec![0i64; n];
            for copy in 0..self.copies {
                for lat in 0..lat_count as u32 {
                    let idx = self.lattice_indices(lat);
                    let glued_p = self.on_glue(&idx);
                    for delta in &stencil {
                        let mut ok = true;
                        for d in 0..n {
                            idx_q[d] = idx[d] + delta[d];
                            if idx_q[d] < 0 || idx_q[d] as usize >= self.vdims[d] {
                                ok = false;
                                break;
                            }
                        }
                        if !ok {
                            continue;
                        }
                        // in copy 1, an edge between two glued points already
                        // exists in copy 0
                        if copy == 1 && glued_p && self.on_glue(&idx_q) {
                            continue;
                        }
                        let lat_q = self.lattice_id(&idx_q);
                        let length =
                            hf * (delta.iter().map(|&x| (x * x) as f64).sum::<f64>()).sqrt();
                        for pid in self.vert_ids_at(copy, lat) {
                            for qid in self.vert_ids_at(copy, lat_q) {
                                let vp = &self.verts[pid as usize];
                                let vq = &self.verts[qid as usize];
                                if self.compatible(vp, &idx, vq, &idx_q) {
                                    edges.push((pid, qid, length));
                                }
                            }
                        }
                    }
                }
            }
            Graph::from_edges(self.verts.len(), &edges)
        })
    }

    // ---- point resolution ---------------------------------------------------

    /// Obstacles whose interior contains the given lattice-aligned point.
    pub fn required_tags(&self, coords: &[Dyadic]) -> Result<Vec<usize>> {
        let idx = self.lattice_of_coords(coords)?;
        Ok(self.lattice_tags(&idx).into_iter().map(|t| t as usize).collect())
    }

    fn lattice_of_coords(&self, coords: &[Dyadic]) -> Result<Vec<i64>> {
        if coords.len() != self.dim() {
            return Err(Error::Invalid("coordinate dimension mismatch".into()));
        }
        let mut idx = Vec::with_capacity(self.dim());
        for d in 0..self.dim() {
            let (a, b) = self.bx.interval(d);
            if coords[d] < a || coords[d] > b {
                return Err(Error::Invalid(format!("coordinate {} outside box", coords[d])));
            }
            let i = (coords[d] - a).exact_div(self.h).ok_or_else(|| {
                Error::ResolutionMisaligned(format!(
                    "coordinate {} not on the h-lattice",
                    coords[d]
                ))
            })?;
            idx.push(i);
        }
        Ok(idx)
    }

    /// Resolve a point to its vertex id; the tag set must match exactly.
    pub fn resolve(&self, p: &PointRef) -> Result<u32> {
        let idx = self.lattice_of_coords(&p.coords)?;
        let lat = self.lattice_id(&idx);
        if p.copy >= self.copies {
            return Err(Error::Invalid("copy index out of range".into()));
        }
        let mut want = TagSet::empty();
        let mut sides = p.sides.clone();
        sides.sort_by_key(|&(o, _)| o);
        for (o, s) in sides {
            want.push(o as u16, s);
        }
        for id in self.vert_ids_at(p.copy, lat) {
            if self.verts[id as usize].tags == want {
                return Ok(id);
            }
        }
        Err(Error::Invalid(format!(
            "no vertex with the given side tags at {:?} (point lies on {} sheet(s))",
            p.coords,
            self.verts_at(p.copy, lat)[0].tags.len().max(
                self.verts_at(p.copy, lat).last().map(|v| v.tags.len()).unwrap_or(0)
            )
        )))
    }

    pub fn point_of_vertex(&self, id: u32) -> PointRef {
        let v = &self.verts[id as usize];
        PointRef {
            coords: self.lattice_point(v.lattice),
            sides: v.tags.iter().map(|(o, s)| (o as usize, s)).collect(),
            copy: v.copy as usize,
        }
    }

    /// Geodesic (graph) distance between two points; `+∞` when disconnected.
    pub fn geodesic_distance(&self, p: &PointRef, q: &PointRef) -> Result<f64> {
        let a = self.resolve(p)?;
        let b = self.resolve(q)?;
        let res = self.graph().dijkstra(
            &[(a, 0.0)],
            &SearchOpts { cap: None, stop_at_any: Some(vec![b]) },
        );
        Ok(res.dist[b as usize])
    }

    pub fn geodesic_path(&self, p: &PointRef, q: &PointRef) -> Result<PathInComplex> {
        let a = self.resolve(p)?;
        let b = self.resolve(q)?;
        let res = self.graph().dijkstra(
            &[(a, 0.0)],
            &SearchOpts { cap: None, stop_at_any: Some(vec![b]) },
        );
        if res.dist[b as usize].is_infinite() {
            return Err(Error::Invalid("points lie in different components".into()));
        }
        Ok(PathInComplex { verts: extract_path(&res.parent, b), length: res.dist[b as usize] })
    }

    /// Check the path invariants: adjacency of consecutive vertices and
    /// length equal to the sum of edge lengths.
    pub fn validate_path(&self, path: &PathInComplex) -> Result<()> {
        let g = self.graph();
        let mut total = 0.0;
        for w in path.verts.windows(2) {
            match g.neighbors(w[0]).find(|&(u, _)| u == w[1]) {
                Some((_, l)) => total += l,
                None => return Err(Error::Invalid("non-adjacent consecutive vertices".into())),
            }
        }
        if (total - path.length).abs() > 1e-9 * (1.0 + total) {
            return Err(Error::Invalid("stored length does not match edges".into()));
        }
        Ok(())
    }

    /// Drop side tags of slits with sequence index `≥ level`, realizing the
    /// 1-Lipschitz projection onto the coarser completion.
    pub fn project(&self, p: &PointRef, level: usize) -> PointRef {
        let sides = p
            .sides
            .iter()
            .copied()
            .filter(|&(o, _)| match self.obstacles[o].label {
                ObstacleLabel::Slit { seq_index } => seq_index < level,
                _ => true,
            })
            .collect();
        PointRef { coords: p.coords.clone(), sides, copy: p.copy }
    }

    // ---- cells ---------------------------------------------------------------

    pub fn cell_id(&self, copy: usize, idx: &[i64]) -> u32 {
        let mut id = 0usize;
        for d in 0..self.dim() {
            debug_assert!(idx[d] >= 0 && (idx[d] as usize) < self.cdims[d]);
            id = id * self.cdims[d] + idx[d] as usize;
        }
        (copy * self.cells_per_copy() + id) as u32
    }

    pub fn cell_indices(&self, cell: u32) -> (usize, Vec<i64>) {
        let per = self.cells_per_copy();
        let copy = cell as usize / per;
        let mut rem = cell as usize % per;
        let n = self.dim();
        let mut idx = vec![0i64; n];
        for d in (0..n).rev() {
            idx[d] = (rem % self.cdims[d]) as i64;
            rem /= self.cdims[d];
        }
        (copy, idx)
    }

    /// Cell center (half-lattice coordinates).
    pub fn cell_center(&self, cell: u32) -> Vec<Dyadic> {
        let (_, idx) = self.cell_indices(cell);
        (0..self.dim())
            .map(|d| {
                self.bx.interval(d).0 + (Dyadic::from_int(idx[d]) + Dyadic::new(1, 1)) * self.h
            })
            .collect()
    }

    /// All cells (in one copy) whose closure lies inside the closed box
    /// `[lo, hi]`, given h-aligned bounds.
    pub fn cells_in_box(&self, lo: &[Dyadic], hi: &[Dyadic], copy: usize) -> Result<Vec<u32>> {
        let n = self.dim();
        let mut ranges = Vec::with_capacity(n);
        for d in 0..n {
            let (a, b) = self.bx.interval(d);
            let i0 = (lo[d].max(a) - a).exact_div(self.h).ok_or_else(|| {
                Error::ResolutionMisaligned("box bound not on the h-lattice".into())
            })?;
            let i1 = (hi[d].min(b) - a)
                .exact_div(self.h)
                .ok_or_else(|| Error::ResolutionMisaligned("box bound not on the h-lattice".into()))?;
            ranges.push(i0..i1);
        }
        let mut cells = Vec::new();
        if ranges.iter().any(|r| r.is_empty()) {
            return Ok(cells);
        }
        let mut idx: Vec<i64> = ranges.iter().map(|r| r.start).collect();
        loop {
            cells.push(self.cell_id(copy, &idx));
            let mut d = n;
            loop {
                if d == 0 {
                    return Ok(cells);
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < ranges[d].end {
                    break;
                }
                idx[d] = ranges[d].start;
            }
        }
    }

    /// Corner vertices of a cell, matched to the cell's side of every sheet
    /// the corner lies on.
    pub fn cell_corners(&self, cell: u32) -> Vec<u32> {
        let (copy, idx) = self.cell_indices(cell);
        let n = self.dim();
        let half = Dyadic::new(1, 1);
        let mut out = Vec::with_capacity(1 << n);
        for corner in 0..(1u32 << n) {
            let cidx: Vec<i64> = (0..n).map(|d| idx[d] + ((corner >> d & 1) as i64)).collect();
            let lat = self.lattice_id(&cidx);
            // pick the copy whose tags all face the cell center
            let mut chosen = None;
            'cand: for vid in self.vert_ids_at(copy, lat) {
                let v = &self.verts[vid as usize];
                for (oi, side) in v.tags.iter() {
                    let ob = &self.obstacles[oi as usize];
                    let c = self.bx.interval(ob.axis).0
                        + (Dyadic::from_int(idx[ob.axis]) + half) * self.h;
                    let cell_side = if c > ob.offset { 1 } else { -1 };
                    if side != cell_side {
                        continue 'cand;
                    }
                }
                chosen = Some(vid);
                break;
            }
            out.push(chosen.expect("every cell corner has a side-matched vertex"));
        }
        out
    }

    /// Cell graph: nodes are voxels, edges the stencil with obstacle-crossing
    /// adjacencies removed (`torn = true`) or kept (`torn = false`).
    pub fn cell_graph(&self, torn: bool) -> &CellGraph {
        let slot = if torn { &self.cell_graph_torn } else { &self.cell_graph_untorn };
        slot.get_or_init(|| {
            let n = self.dim();
            let hf = self.h.to_f64();
            let per = self.cells_per_copy();
            let stencil = self.stencil();
            let half = Dyadic::new(1, 1);
            let mut edges: Vec<(u32, u32, f64)> = Vec::new();
            let mut idx_q = vec![0i64; n];
            for copy in 0..self.copies {
                for c in 0..per as u32 {
                    let (_, idx) = self.cell_indices(c);
                    let cid = self.cell_id(copy, &idx);
                    for delta in &stencil {
                        let mut ok = true;
                        for d in 0..n {
                            idx_q[d] = idx[d] + delta[d];
                            if idx_q[d] < 0 || idx_q[d] as usize >= self.cdims[d] {
                                ok = false;
                                break;
                            }
                        }
                        if !ok {
                            continue;
                        }
                        if torn && self.cell_edge_blocked(&idx, delta) {
                            continue;
                        }
                        let qid = self.cell_id(copy, &idx_q);
                        let length =
                            hf * (delta.iter().map(|&x| (x * x) as f64).sum::<f64>()).sqrt();
                        edges.push((cid, qid, length));
                    }
                }
            }
            // cross-copy edges through glued faces
            if let Some(glue) = self.glue {
                let faces: Vec<(usize, bool)> = match glue {
                    GlueSpec::OuterBoundary => {
                        (0..n).flat_map(|d| [(d, false), (d, true)]).collect()
                    }
                    GlueSpec::AxisFaces(a) => vec![(a, false), (a, true)],
                };
                for (axis, high) in faces {
                    let layer = if high { self.cdims[axis] as i64 - 1 } else { 0 };
                    for c in 0..per as u32 {
                        let (_, idx) = self.cell_indices(c);
                        if idx[axis] != layer {
                            continue;
                        }
                        // the crossing segment is perpendicular to the glued
                        // face; only obstacles lying in the face plane itself
                        // can block it
                        if torn {
                            let face_coord = if high {
                                self.bx.interval(axis).1
                            } else {
                                self.bx.interval(axis).0
                            };
                            let mut blocked = false;
                            for ob in &self.obstacles {
                                if ob.axis == axis && ob.offset == face_coord {
                                    let point: Vec<Dyadic> = (0..n)
                                        .filter(|&d| d != axis)
                                        .map(|d| {
                                            self.bx.interval(d).0
                                                + (Dyadic::from_int(idx[d]) + half) * self.h
                                        })
                                        .collect();
                                    let extent: Vec<(Dyadic, Dyadic)> = (0..n)
                                        .filter(|&d| d != axis)
                                        .map(|d| self.bx.interval(d))
                                        .collect();
                                    if ob.interior_contains(&point, &extent) {
                                        blocked = true;
                                        break;
                                    }
                                }
                            }
                            if blocked {
                                continue;
                            }
                        }
                        let a = self.cell_id(0, &idx);
                        let b = self.cell_id(1, &idx);
                        edges.push((a, b, hf));
                    }
                }
            }
            CellGraph { graph: Graph::from_edges(self.cell_count(), &edges), torn }
        })
    }

    /// True if the center-to-center segment between face/diagonal cell
    /// neighbors crosses the interior of some obstacle.
    fn cell_edge_blocked(&self, idx: &[i64], delta: &[i64]) -> bool {
        let n = self.dim();
        let half = Dyadic::new(1, 1);
        for a in 0..n {
            if delta[a] == 0 {
                continue;
            }
            // crossing plane: the shared lattice plane along axis a
            let plane_idx = if delta[a] > 0 { idx[a] + 1 } else { idx[a] };
            let plane_coord = self.lattice_coord(a, plane_idx);
            for ob in &self.obstacles {
                if ob.axis != a || ob.offset != plane_coord {
                    continue;
                }
                // crossing point at t = 1/2: moving axes sit on the lattice,
                // others at cell-center half coordinates
                let point: Vec<Dyadic> = (0..n)
                    .filter(|&d| d != a)
                    .map(|d| {
                        let base = self.bx.interval(d).0;
                        if delta[d] != 0 {
                            let i = if delta[d] > 0 { idx[d] + 1 } else { idx[d] };
                            base + Dyadic::from_int(i) * self.h
                        } else {
                            base + (Dyadic::from_int(idx[d]) + half) * self.h
                        }
                    })
                    .collect();
                let extent: Vec<(Dyadic, Dyadic)> = (0..n)
                    .filter(|&d| d != a)
                    .map(|d| self.bx.interval(d))
                    .collect();
                if ob.interior_contains(&point, &extent) {
                    return true;
                }
            }
        }
        false
    }

    /// Cells of the layer adjacent to the `side` face (0 = low, 1 = high) of
    /// `axis`, in one copy.
    pub fn face_cells(&self, axis: usize, side: usize, copy: usize) -> Vec<u32> {
        let layer = if side == 0 { 0 } else { self.cdims[axis] as i64 - 1 };
        self.face_layer_cells(axis, layer, copy)
    }

    /// Cells with the given index along `axis`, in one copy.
    pub fn face_layer_cells(&self, axis: usize, layer: i64, copy: usize) -> Vec<u32> {
        let per = self.cells_per_copy();
        (0..per as u32)
            .filter_map(|c| {
                let (_, idx) = self.cell_indices(c);
                (idx[axis] == layer).then(|| self.cell_id(copy, &idx))
            })
            .collect()
    }

    // ---- measures --------------------------------------------------------------

    /// μ(B(x,r)) as cell-volume count: cells whose nearest side-matched corner
    /// is within geodesic distance `r` of the center vertex.
    pub fn ball_volume(&self, center: u32, r: f64) -> f64 {
        let res = self
            .graph()
            .dijkstra(&[(center, 0.0)], &SearchOpts { cap: Some(r), stop_at_any: None });
        let mut count = 0u64;
        for cell in 0..self.cell_count() as u32 {
            let near = self
                .cell_corners(cell)
                .iter()
                .map(|&v| res.dist[v as usize])
                .fold(f64::INFINITY, f64::min);
            if near <= r {
                count += 1;
            }
        }
        count as f64 * self.cell_volume()
    }

    /// Sampled Ahlfors-regularity scan of μ(B(x,r))/rⁿ.
    pub fn ahlfors_scan(&self, samples: usize, radii: &[f64], seed: u64) -> AhlforsScan {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = self.dim() as i32;
        let mut rows = Vec::with_capacity(samples);
        let (mut min_ratio, mut max_ratio) = (f64::INFINITY, 0.0f64);
        for _ in 0..samples {
            let v = rng.gen_range(0..self.verts.len() as u32);
            let r = radii[rng.gen_range(0..radii.len())];
            let mu = self.ball_volume(v, r);
            let ratio = mu / r.powi(n);
            min_ratio = min_ratio.min(ratio);
            max_ratio = max_ratio.max(ratio);
            rows.push((v, r, ratio));
        }
        AhlforsScan { min_ratio, max_ratio, rows }
    }

    /// `(H(E), H(τ_i(E)))` for a union of cells. Cells carry no slit points,
    /// so the two Hausdorff measures agree exactly; the comparability
    /// constant of the measure inequality is 1 at voxel level.
    pub fn measure_comparability(&self, cells: &[u32], _level: usize) -> (f64, f64) {
        let m = cells.len() as f64 * self.cell_volume();
        (m, m)
    }

    // ---- dumps -------------------------------------------------------------------

    /// Structured-text summary: h, vertex counts, duplicated sheet sizes.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "h {}", self.h);
        let _ = writeln!(out, "dim {}", self.dim());
        let _ = writeln!(out, "copies {}", self.copies);
        let _ = writeln!(out, "vertices {}", self.vertex_count());
        let _ = writeln!(out, "cells {}", self.cell_count());
        let mut split_counts = vec![0usize; self.obstacles.len()];
        for v in &self.verts {
            for (oi, _) in v.tags.iter() {
                split_counts[oi as usize] += 1;
            }
        }
        for (oi, ob) in self.obstacles.iter().enumerate() {
            let _ = writeln!(
                out,
                "obstacle {} axis {} offset {} sheet_vertices {}",
                oi,
                ob.axis + 1,
                ob.offset,
                split_counts[oi]
            );
        }
        out
    }

    /// CSV distance matrix between the given points (small complexes only).
    pub fn distance_matrix_csv(&self, points: &[PointRef]) -> Result<String> {
        let ids: Vec<u32> = points.iter().map(|p| self.resolve(p)).collect::<Result<_>>()?;
        let mut out = String::from("from,to,distance\n");
        for (i, &a) in ids.iter().enumerate() {
            let res = self.graph().dijkstra(&[(a, 0.0)], &SearchOpts::default());
            for (j, &b) in ids.iter().enumerate() {
                let _ = writeln!(out, "{i},{j},{}", res.dist[b as usize]);
            }
        }
        Ok(out)
    }
}

pub struct AhlforsScan {
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// (center vertex, radius, ratio) per sample.
    pub rows: Vec<(u32, f64, f64)>,
}
