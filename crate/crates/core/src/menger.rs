//! Finite-level slit Menger complexes and their fiber topology.
//!
//! The domain family removes, for each generation `j` in a set A, scaled
//! copies of two sheet shapes from every dyadic cube of generation 2j: a flat
//! tube parallel to the xz-plane and a flat cross inside a plane
//! perpendicular to the x-axis. Merged across cubes these become, per
//! generation: one connected "grillage" obstacle per x-column plane (the
//! crosses) and disjoint strip obstacles in y-planes (the tubes). The z = 0
//! trace of the grillages is exactly the base slit carpet.
//!
//! Fibers are the maximal connected z-parallel vertex sets; their cycle rank
//! and endpoint count classify them. Labels follow the convention
//! `L(m) ⟺ betti 4^{m−1}, two endpoints` and `Y(m) ⟺ betti 2·4^{m−1}+1,
//! closed`, reported alongside the raw cycle count since the index
//! convention is resolution-independent but not canonical.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use crate::dyadic::Dyadic;
use crate::grid::{GlueSpec, GridComplex, Obstacle, ObstacleLabel, PointRef, SearchOpts};
use crate::slits::{menger_slit_faces, BoxN, SlitSequence};
use crate::{Error, Result};

/// A built slit Menger complex with its sheet registries.
pub struct MengerComplex {
    /// Active generations A ∩ [0, level].
    pub gens: Vec<usize>,
    pub level: usize,
    pub gc: GridComplex,
    /// (generation, x-column) → obstacle index of the flat-cross grillage.
    pub crosses: BTreeMap<(usize, u64), usize>,
    /// (generation, y-row, z-band) → obstacle index of the flat-tube strip.
    pub tubes: BTreeMap<(usize, u64, u64), usize>,
}

/// Obstacles of the level-`k` Menger domain for the generation set `a`.
fn menger_obstacles(gens: &[usize]) -> (Vec<Obstacle>, BTreeMap<(usize, u64), usize>, BTreeMap<(usize, u64, u64), usize>) {
    let mut obstacles = Vec::new();
    let mut crosses = BTreeMap::new();
    let mut tubes = BTreeMap::new();
    let unit = (Dyadic::ZERO, Dyadic::ONE);
    for &j in gens {
        let side = Dyadic::pow2(2 * j as u32); // 4^{-j}
        let quarter = Dyadic::pow2(2 * j as u32 + 2); // 4^{-j}/4
        let count = 1u64 << (2 * j); // 4^j
        // flat-cross grillage per x-column: vertical strips |y−y_c| ≤ s/4
        // (full z) and horizontal strips |z−z_c| ≤ s/4 (full y)
        for k in 0..count {
            let offset = Dyadic::new(2 * k as i64 + 1, 2 * j as u32 + 1);
            let mut rects = Vec::with_capacity(2 * count as usize);
            for l in 0..count {
                let c = Dyadic::new(2 * l as i64 + 1, 2 * j as u32 + 1);
                rects.push(vec![(c - quarter, c + quarter), unit]);
            }
            for m in 0..count {
                let c = Dyadic::new(2 * m as i64 + 1, 2 * j as u32 + 1);
                rects.push(vec![unit, (c - quarter, c + quarter)]);
            }
            crosses.insert((j, k), obstacles.len());
            obstacles.push(Obstacle {
                axis: 0,
                offset,
                rects,
                label: ObstacleLabel::Cross { gen: j, k: k as usize },
            });
        }
        // flat-tube strips per (y-row, z-band): |z−z_c| ≤ s/4, full x
        for l in 0..count {
            let offset = Dyadic::new(2 * l as i64 + 1, 2 * j as u32 + 1);
            for m in 0..count {
                let c = Dyadic::new(2 * m as i64 + 1, 2 * j as u32 + 1);
                tubes.insert((j, l, m), obstacles.len());
                obstacles.push(Obstacle {
                    axis: 1,
                    offset,
                    rects: vec![vec![unit, (c - quarter, c + quarter)]],
                    label: ObstacleLabel::Tube { gen: j, l: l as usize, m: m as usize },
                });
            }
        }
        let _ = side;
    }
    (obstacles, crosses, tubes)
}

/// Build the torn complex of the level-`k` Menger domain `W̄_k(A)`.
/// `h` must divide `4^{-k}/4`; A must meet `[0, k]`.
pub fn build_menger(a: &[usize], level: usize, h: Dyadic) -> Result<MengerComplex> {
    let gens: Vec<usize> = {
        let mut g: Vec<usize> = a.iter().copied().filter(|&j| j <= level).collect();
        g.sort_unstable();
        g.dedup();
        g
    };
    if gens.is_empty() {
        // untorn cube
        let gc = GridComplex::build(BoxN::unit(3), h, Vec::new(), 1, None)?;
        return Ok(MengerComplex {
            gens,
            level,
            gc,
            crosses: BTreeMap::new(),
            tubes: BTreeMap::new(),
        });
    }
    let quantum = Dyadic::pow2(2 * level as u32 + 2); // 4^{-level}/4
    if !quantum.is_multiple_of(h) {
        return Err(Error::ResolutionMisaligned(format!(
            "h = {h} must divide 4^(-{level})/4"
        )));
    }
    let (obstacles, crosses, tubes) = menger_obstacles(&gens);
    let gc = GridComplex::build(BoxN::unit(3), h, obstacles, 1, None)?;
    Ok(MengerComplex { gens, level, gc, crosses, tubes })
}

impl MengerComplex {
    /// Double along top and bottom (the z faces).
    pub fn double(&self) -> Result<GridComplex> {
        self.gc.double(GlueSpec::AxisFaces(2))
    }

    /// Obstacle index of the grillage containing the base-carpet slit of
    /// generation `gen` in x-column `k`.
    pub fn cross_obstacle(&self, gen: usize, k: u64) -> Option<usize> {
        self.crosses.get(&(gen, k)).copied()
    }
}

// ---- base carpet ------------------------------------------------------------

pub struct BaseCarpetCheck {
    pub seq: SlitSequence,
    pub carpet: GridComplex,
    /// Maximal |d_3D − d_2D| over the sampled pairs.
    pub max_discrepancy: f64,
    pub pairs: usize,
}

/// Extract the z = 0 face as a 2D slit complex and check on sampled pairs
/// that the 3D path metric restricted to the base equals the carpet metric.
/// The projection to the base is 1-Lipschitz and the base embeds, so the two
/// agree exactly at grid level.
pub fn base_carpet(mc: &MengerComplex, samples: usize, seed: u64) -> Result<BaseCarpetCheck> {
    use rand::{Rng, SeedableRng};
    let faces = menger_slit_faces(&mc.gens, mc.level)?;
    let mut seq = faces.z0;
    seq.validate();
    let carpet = GridComplex::build_slit_complex(&seq, seq.len(), mc.gc.h)?;
    // carpet slit index → 3D cross obstacle index, by matching coordinates
    let mut to_cross = Vec::with_capacity(seq.len());
    for s in &seq.slits {
        let gen = s.generation.expect("face slits carry their generation");
        let k = ((s.offset.numerator() as u64) - 1) / 2;
        let oi = mc
            .cross_obstacle(gen, k)
            .ok_or_else(|| Error::Invalid("missing grillage for face slit".into()))?;
        to_cross.push(oi);
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let g2 = carpet.graph();
    let n2 = g2.node_count() as u32;
    let mut max_disc = 0.0f64;
    let mut lift = |p: &PointRef| -> PointRef {
        let coords = vec![p.coords[0], p.coords[1], Dyadic::ZERO];
        let sides = p.sides.iter().map(|&(o, s)| (to_cross[o], s)).collect();
        PointRef { coords, sides, copy: 0 }
    };
    for _ in 0..samples {
        let a = rng.gen_range(0..n2);
        let b = rng.gen_range(0..n2);
        let pa = carpet.point_of_vertex(a);
        let pb = carpet.point_of_vertex(b);
        let d2 = carpet.geodesic_distance(&pa, &pb)?;
        let d3 = mc.gc.geodesic_distance(&lift(&pa), &lift(&pb))?;
        max_disc = max_disc.max((d2 - d3).abs());
    }
    Ok(BaseCarpetCheck { seq, carpet, max_discrepancy: max_disc, pairs: samples })
}

// ---- fibers -----------------------------------------------------------------

/// Fiber classification label. The mapping from cycle counts to L/Y indices
/// follows `betti = 4^{m−1}` and is convention-dependent; the raw betti and
/// endpoint counts are authoritative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FiberLabel {
    Interval,
    Circle,
    L(u32),
    Y(u32),
    Other,
}

/// A fiber extracted from the complex, with degree-2 chains contracted.
#[derive(Clone, Debug)]
pub struct FiberGraph {
    pub verts: usize,
    pub edges: usize,
    pub betti: usize,
    pub endpoints: usize,
    pub label: FiberLabel,
    /// Junction degrees of the contracted multigraph (empty for intervals
    /// and circles).
    pub junction_degrees: Vec<usize>,
    /// Color-refinement fingerprint of the contracted multigraph.
    pub fingerprint: u64,
}

fn classify(betti: usize, endpoints: usize) -> FiberLabel {
    match (betti, endpoints) {
        (0, 2) | (0, 1) => FiberLabel::Interval,
        (1, 0) => FiberLabel::Circle,
        (b, 2) => {
            let mut m = 1u32;
            let mut v = 1usize;
            while v < b {
                v *= 4;
                m += 1;
            }
            if v == b {
                FiberLabel::L(m)
            } else {
                FiberLabel::Other
            }
        }
        (b, 0) if b % 2 == 1 => {
            let c = (b - 1) / 2;
            let mut m = 1u32;
            let mut v = 1usize;
            while v < c {
                v *= 4;
                m += 1;
            }
            if v == c {
                FiberLabel::Y(m)
            } else {
                FiberLabel::Other
            }
        }
        _ => FiberLabel::Other,
    }
}

/// Extract the fiber through `base` (a z = 0 vertex of the complex or its
/// double): the connected component of the z-column vertex set through it.
pub fn fiber(gc: &GridComplex, base: &PointRef) -> Result<FiberGraph> {
    let root = gc.resolve(base)?;
    let root_lat = gc.vertices()[root as usize].lattice;
    let idx = gc.lattice_indices(root_lat);
    // all vertices over the (x, y) column, both copies, dedup over glue
    let mut members: BTreeSet<u32> = BTreeSet::new();
    for copy in 0..gc.copies {
        for z in 0..gc.vdims[2] as i64 {
            let lat = gc.lattice_id(&[idx[0], idx[1], z]);
            for v in gc.vert_ids_range(copy, lat) {
                members.insert(v);
            }
        }
    }
    let member_set: HashSet<u32> = members.iter().copied().collect();
    // component through root via BFS on induced edges
    let g = gc.graph();
    let mut comp: BTreeSet<u32> = BTreeSet::new();
    let mut queue = vec![root];
    comp.insert(root);
    while let Some(v) = queue.pop() {
        for (u, _) in g.neighbors(v) {
            if member_set.contains(&u) && comp.insert(u) {
                queue.push(u);
            }
        }
    }
    // count induced edges
    let mut edges = 0usize;
    let mut degree: BTreeMap<u32, usize> = BTreeMap::new();
    for &v in &comp {
        for (u, _) in g.neighbors(v) {
            if comp.contains(&u) {
                *degree.entry(v).or_default() += 1;
                if v < u {
                    edges += 1;
                }
            }
        }
    }
    let verts = comp.len();
    let betti = edges + 1 - verts;
    let endpoints = degree.values().filter(|&&d| d == 1).count()
        + comp.iter().filter(|v| !degree.contains_key(v)).count();
    let (junction_degrees, fingerprint) = contract(&comp, &degree, g);
    Ok(FiberGraph {
        verts,
        edges,
        betti,
        endpoints,
        label: classify(betti, endpoints),
        junction_degrees,
        fingerprint,
    })
}

/// Contract degree-2 chains; return junction degrees and a color-refinement
/// fingerprint of the contracted multigraph (resolution independent).
fn contract(
    comp: &BTreeSet<u32>,
    degree: &BTreeMap<u32, usize>,
    g: &crate::grid::Graph,
) -> (Vec<usize>, u64) {
    let junctions: Vec<u32> = comp
        .iter()
        .copied()
        .filter(|v| degree.get(v).copied().unwrap_or(0) != 2)
        .collect();
    if junctions.is_empty() {
        // a pure cycle (or isolated point)
        return (Vec::new(), 0xC1C1C1);
    }
    let is_junction: HashSet<u32> = junctions.iter().copied().collect();
    let local: HashMap<u32, usize> =
        junctions.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    // walk chains from each junction
    let mut multi_edges: Vec<(usize, usize)> = Vec::new();
    let mut seen: HashSet<(u32, u32)> = HashSet::new();
    for &j in &junctions {
        for (first, _) in g.neighbors(j) {
            if !comp.contains(&first) || seen.contains(&(j, first)) {
                continue;
            }
            // follow the chain
            let (mut prev, mut cur) = (j, first);
            while !is_junction.contains(&cur) {
                let next = g
                    .neighbors(cur)
                    .map(|(u, _)| u)
                    .find(|&u| comp.contains(&u) && u != prev)
                    .expect("degree-2 chain continues");
                prev = cur;
                cur = next;
            }
            seen.insert((j, first));
            seen.insert((cur, prev));
            let (a, b) = (local[&j], local[&cur]);
            multi_edges.push((a.min(b), a.max(b)));
        }
    }
    multi_edges.sort_unstable();
    let mut deg = vec![0usize; junctions.len()];
    for &(a, b) in &multi_edges {
        deg[a] += 1;
        if a != b {
            deg[b] += 1;
        } else {
            deg[a] += 1;
        }
    }
    // 1-dimensional Weisfeiler-Leman color refinement fingerprint
    let mut colors: Vec<u64> = deg.iter().map(|&d| d as u64).collect();
    for _ in 0..junctions.len().min(16) {
        let mut next = vec![0u64; colors.len()];
        for (i, c) in colors.iter().enumerate() {
            let mut neigh: Vec<u64> = multi_edges
                .iter()
                .filter_map(|&(a, b)| {
                    if a == i {
                        Some(colors[b])
                    } else if b == i {
                        Some(colors[a])
                    } else {
                        None
                    }
                })
                .collect();
            neigh.sort_unstable();
            let mut hash = *c ^ 0x9E3779B97F4A7C15;
            for x in neigh {
                hash = hash.wrapping_mul(0x100000001B3).wrapping_add(x);
            }
            next[i] = hash;
        }
        colors = next;
    }
    colors.sort_unstable();
    let mut fp = 0xcbf29ce484222325u64;
    for c in &colors {
        fp = fp.wrapping_mul(0x100000001B3) ^ c;
    }
    let mut jd = deg;
    jd.sort_unstable();
    (jd, fp)
}

/// Closed-form fiber prediction from exact dyadic arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictedFiber {
    /// Generation of the slit the point lies on.
    pub slit_gen: usize,
    /// Number of sheet crossings of the vertical line: cycles of the fiber
    /// in the single complex; 0 means an interval.
    pub cycles: usize,
}

/// Which special point of a slit a (x, y) pair is.
fn slit_position(gens: &[usize], x: Dyadic, y: Dyadic) -> Option<(usize, Dyadic, Dyadic)> {
    // x = (2k+1)/(2·4^i) in reduced form determines the generation uniquely
    if x.numerator() <= 0 || x.exponent() == 0 || x.exponent() % 2 == 0 {
        return None;
    }
    let i = ((x.exponent() - 1) / 2) as usize;
    if !gens.contains(&i) {
        return None;
    }
    let quarter = Dyadic::pow2(2 * i as u32 + 2);
    // the slit's y-center is the odd/2^{2i+1} point within distance s/4
    let count = 1i64 << (2 * i);
    for l in 0..count {
        let yc = Dyadic::new(2 * l + 1, 2 * i as u32 + 1);
        if (y - yc).abs() <= quarter {
            return Some((i, yc, quarter));
        }
    }
    None
}

/// Predict the fiber over a base-carpet slit point from the dyadic form of
/// its coordinates (no complex needed). Errors off-slit.
pub fn fiber_predicate(
    gens: &[usize],
    level: usize,
    x: Dyadic,
    y: Dyadic,
) -> Result<PredictedFiber> {
    let (i, yc, quarter) = slit_position(gens, x, y)
        .ok_or_else(|| Error::Invalid(format!("({x}, {y}) is not on a slit of the base carpet")))?;
    // endpoint: own-generation z-bands, one cycle per stacked cube
    if (y - yc).abs() == quarter {
        return Ok(PredictedFiber { slit_gen: i, cycles: 1 << (2 * i) });
    }
    // midpoint: own-generation tube strips
    if y == yc {
        return Ok(PredictedFiber { slit_gen: i, cycles: 1 << (2 * i) });
    }
    // interior point meeting a deeper tube plane: y = (2m+1)/2^{2j+1} in
    // reduced form with j ∈ A, j ≤ level
    if y.exponent() % 2 == 1 {
        let j = ((y.exponent() - 1) / 2) as usize;
        if j > i && j <= level && gens.contains(&j) {
            return Ok(PredictedFiber { slit_gen: i, cycles: 1 << (2 * j) });
        }
    }
    Ok(PredictedFiber { slit_gen: i, cycles: 0 })
}

// ---- four-points check and spectra -------------------------------------------

pub struct FourPointsReport {
    pub special_bettis: [usize; 4],
    pub max_other_betti: usize,
    pub exactly_four: bool,
    pub isomorphic: bool,
}

/// Scan all grid points of a base slit in the double: the maximal fiber
/// betti must be realized exactly by the four special points (the two
/// endpoints and the two copies of the center), with mutually isomorphic
/// contracted fibers.
pub fn four_points_check(
    mc: &MengerComplex,
    dbl: &GridComplex,
    gen: usize,
    kx: u64,
    ly: u64,
) -> Result<FourPointsReport> {
    let oi = mc
        .cross_obstacle(gen, kx)
        .ok_or_else(|| Error::Invalid("no such slit generation/column".into()))?;
    let x = Dyadic::new(2 * kx as i64 + 1, 2 * gen as u32 + 1);
    let yc = Dyadic::new(2 * ly as i64 + 1, 2 * gen as u32 + 1);
    let quarter = Dyadic::pow2(2 * gen as u32 + 2);
    let (ylo, yhi) = (yc - quarter, yc + quarter);
    let mut specials = Vec::new();
    for p in [
        PointRef::plain(vec![x, ylo, Dyadic::ZERO]),
        PointRef::plain(vec![x, yhi, Dyadic::ZERO]),
        PointRef::tagged(vec![x, yc, Dyadic::ZERO], vec![(oi, -1)]),
        PointRef::tagged(vec![x, yc, Dyadic::ZERO], vec![(oi, 1)]),
    ] {
        specials.push(fiber(dbl, &p)?);
    }
    let special_bettis =
        [specials[0].betti, specials[1].betti, specials[2].betti, specials[3].betti];
    let target = *special_bettis.iter().max().unwrap();
    let mut max_other = 0usize;
    let mut extra_at_max = false;
    let h = dbl.h;
    let steps = (yhi - ylo).exact_div(h).unwrap();
    for s in 1..steps {
        let y = ylo + Dyadic::from_int(s) * h;
        if y == yc {
            continue;
        }
        for side in [-1i8, 1] {
            let p = PointRef::tagged(vec![x, y, Dyadic::ZERO], vec![(oi, side)]);
            let f = fiber(dbl, &p)?;
            max_other = max_other.max(f.betti);
            if f.betti >= target {
                extra_at_max = true;
            }
        }
    }
    let iso = specials.windows(2).all(|w| {
        w[0].junction_degrees == w[1].junction_degrees
            && w[0].fingerprint == w[1].fingerprint
            && w[0].betti == w[1].betti
    });
    Ok(FourPointsReport {
        special_bettis,
        max_other_betti: max_other,
        exactly_four: !extra_at_max && special_bettis.iter().all(|&b| b == target),
        isomorphic: iso,
    })
}

/// Multiset of (slit generation, maximal fiber betti over the slit's special
/// points), one entry per base-carpet slit up to the truncation level.
/// Computed in the single complex (doubles have betti 2b+1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FiberSpectrum {
    /// Sorted (generation, betti, multiplicity).
    pub entries: Vec<(usize, usize, usize)>,
}

pub fn fiber_spectrum(mc: &MengerComplex) -> Result<FiberSpectrum> {
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for &gen in &mc.gens {
        let count = 1u64 << (2 * gen);
        for kx in 0..count {
            let oi = mc.cross_obstacle(gen, kx).unwrap();
            let x = Dyadic::new(2 * kx as i64 + 1, 2 * gen as u32 + 1);
            for ly in 0..count {
                let yc = Dyadic::new(2 * ly as i64 + 1, 2 * gen as u32 + 1);
                let quarter = Dyadic::pow2(2 * gen as u32 + 2);
                let mut best = 0usize;
                for p in [
                    PointRef::plain(vec![x, yc - quarter, Dyadic::ZERO]),
                    PointRef::plain(vec![x, yc + quarter, Dyadic::ZERO]),
                    PointRef::tagged(vec![x, yc, Dyadic::ZERO], vec![(oi, -1)]),
                    PointRef::tagged(vec![x, yc, Dyadic::ZERO], vec![(oi, 1)]),
                ] {
                    best = best.max(fiber(&mc.gc, &p)?.betti);
                }
                *counts.entry((gen, best)).or_default() += 1;
            }
        }
    }
    Ok(FiberSpectrum {
        entries: counts.into_iter().map(|((g, b), m)| (g, b, m)).collect(),
    })
}

/// Spectra distinguish the generation sets: equal iff the multisets agree.
pub fn spectra_distinguish(a: &FiberSpectrum, b: &FiberSpectrum) -> bool {
    a.entries != b.entries
}

pub fn spectrum_file(s: &FiberSpectrum) -> String {
    let mut out = String::from("generation,betti,multiplicity\n");
    for (g, b, m) in &s.entries {
        let _ = writeln!(out, "{g},{b},{m}");
    }
    out
}

/// CSV fiber report rows: (base point, side, betti, endpoints, label).
pub fn fiber_report_csv(rows: &[(String, i8, usize, usize, FiberLabel)]) -> String {
    let mut out = String::from("base_point,side,betti,endpoints,label\n");
    for (p, side, b, e, label) in rows {
        let _ = writeln!(out, "{p},{side},{b},{e},{label:?}");
    }
    out
}

// ---- covering order and cube dichotomy ----------------------------------------

pub struct CoveringReport {
    pub max_order: usize,
    /// Vertices lying in more than two fattened cubes.
    pub violating: Vec<u32>,
    pub cubes: usize,
}

/// Vertex membership sets of the dual cubes `Q(x, 4^{-n}/2) ∩ [0,1]³` for
/// centers on the `4^{-n}` lattice: the side-matched corner vertices of the
/// cells inside each cube.
fn cube_vertex_sets(gc: &GridComplex, n: u32) -> Result<Vec<(Vec<i64>, Vec<u32>)>> {
    let spacing = Dyadic::pow2(2 * n); // 4^{-n}
    let half = spacing.halved();
    let per_axis = (1i64 << (2 * n)) + 1;
    let mut out = Vec::new();
    for a in 0..per_axis {
        for b in 0..per_axis {
            for c in 0..per_axis {
                let center = [a, b, c];
                let mut lo = Vec::with_capacity(3);
                let mut hi = Vec::with_capacity(3);
                for &ci in &center {
                    let x = Dyadic::from_int(ci) * spacing;
                    lo.push((x - half).max(Dyadic::ZERO));
                    hi.push((x + half).min(Dyadic::ONE));
                }
                let mut verts = BTreeSet::new();
                for cell in gc.cells_in_box(&lo, &hi, 0)? {
                    for v in gc.cell_corners(cell) {
                        verts.insert(v);
                    }
                }
                out.push((center.to_vec(), verts.into_iter().collect()));
            }
        }
    }
    Ok(out)
}

/// Build the ε-fattened cube cover in the torn metric and count memberships:
/// the order must not exceed 2.
pub fn covering_order(gc: &GridComplex, n: u32, eps: f64) -> Result<CoveringReport> {
    let cubes = cube_vertex_sets(gc, n)?;
    let g = gc.graph();
    let mut counts = vec![0u16; g.node_count()];
    for (_, verts) in &cubes {
        let sources: Vec<(u32, f64)> = verts.iter().map(|&v| (v, 0.0)).collect();
        let res = g.dijkstra(&sources, &SearchOpts { cap: Some(eps), stop_at_any: None });
        for v in 0..g.node_count() {
            if res.dist[v] < eps {
                counts[v] += 1;
            }
        }
    }
    let max_order = counts.iter().copied().max().unwrap_or(0) as usize;
    let violating = (0..g.node_count() as u32)
        .filter(|&v| counts[v as usize] > 2)
        .collect();
    Ok(CoveringReport { max_order, violating, cubes: cubes.len() })
}

#[derive(Clone, Debug, PartialEq)]
pub enum CubeRelation {
    /// The cubes share a 2-dimensional face.
    Adjacent,
    /// Torn geodesic distance between the cube vertex sets.
    Distance(f64),
}

pub struct DichotomyReport {
    /// (center a, center b, relation) over all pairs at ℓ∞ center distance
    /// one lattice step.
    pub pairs: Vec<(Vec<i64>, Vec<i64>, CubeRelation)>,
    pub min_nonadjacent_distance: f64,
}

/// Check the cube dichotomy: neighboring dual cubes either share a face or
/// lie at torn distance at least `4^{-(n+1)}`.
pub fn cube_dichotomy(gc: &GridComplex, n: u32) -> Result<DichotomyReport> {
    let cubes = cube_vertex_sets(gc, n)?;
    let index: HashMap<Vec<i64>, usize> =
        cubes.iter().enumerate().map(|(i, (c, _))| (c.clone(), i)).collect();
    let g = gc.graph();
    let mut pairs = Vec::new();
    let mut min_dist = f64::INFINITY;
    for (ci, (center, verts)) in cubes.iter().enumerate() {
        let mut dist_done = false;
        let mut res: Option<crate::grid::SearchResult> = None;
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                for dz in -1i64..=1 {
                    let nonzero = (dx != 0) as u8 + (dy != 0) as u8 + (dz != 0) as u8;
                    if nonzero == 0 {
                        continue;
                    }
                    let other = vec![center[0] + dx, center[1] + dy, center[2] + dz];
                    let Some(&cj) = index.get(&other) else { continue };
                    if cj <= ci {
                        continue;
                    }
                    if nonzero == 1 {
                        pairs.push((center.clone(), other, CubeRelation::Adjacent));
                        continue;
                    }
                    if !dist_done {
                        let sources: Vec<(u32, f64)> =
                            verts.iter().map(|&v| (v, 0.0)).collect();
                        res = Some(g.dijkstra(&sources, &SearchOpts::default()));
                        dist_done = true;
                    }
                    let r = res.as_ref().unwrap();
                    let d = cubes[cj]
                        .1
                        .iter()
                        .map(|&v| r.dist[v as usize])
                        .fold(f64::INFINITY, f64::min);
                    min_dist = min_dist.min(d);
                    pairs.push((center.clone(), other, CubeRelation::Distance(d)));
                }
            }
        }
    }
    Ok(DichotomyReport { pairs, min_nonadjacent_distance: min_dist })
}

// ---- K5 witness ----------------------------------------------------------------

pub struct K5Witness {
    /// Curve name ("ab" … "de") and its vertex path.
    pub curves: Vec<(String, Vec<u32>)>,
    /// Pairs sharing vertices other than their designated endpoints.
    pub violations: Vec<(String, String)>,
}

/// Realize the ten pairwise-disjoint curves joining the five witness corners
/// a=(0,0,0), b=(1,0,0), c=(0,1,0), d=(0,0,1), e=(1,1,1): six cube-edge
/// curves, three face-carpet curves found by constrained shortest path, and
/// the through-curve via the vertical segment at (1/4, 1/4).
pub fn k5_witness(mc: &MengerComplex) -> Result<K5Witness> {
    let gc = &mc.gc;
    if gc.h > Dyadic::pow2(4) {
        return Err(Error::Invalid("K5 witness needs h <= 1/16".into()));
    }
    let g = gc.graph();
    let steps = gc.vdims[0] as i64 - 1;
    let lat = |x: i64, y: i64, z: i64| gc.lattice_id(&[x, y, z]);
    let vid = |x: i64, y: i64, z: i64| -> Result<u32> {
        let vs = gc.vert_ids_range(0, lat(x, y, z));
        if vs.len() != 1 {
            return Err(Error::Invalid("witness corner lies on a sheet".into()));
        }
        Ok(vs.start)
    };
    // straight lattice run between two points differing in one coordinate
    let run = |from: (i64, i64, i64), to: (i64, i64, i64)| -> Result<Vec<u32>> {
        let mut out = Vec::new();
        let d = (
            (to.0 - from.0).signum(),
            (to.1 - from.1).signum(),
            (to.2 - from.2).signum(),
        );
        let mut cur = from;
        loop {
            out.push(vid(cur.0, cur.1, cur.2)?);
            if cur == to {
                return Ok(out);
            }
            cur = (cur.0 + d.0, cur.1 + d.1, cur.2 + d.2);
        }
    };
    let concat = |a: Vec<u32>, b: Vec<u32>| -> Vec<u32> {
        let mut out = a;
        debug_assert_eq!(out.last(), b.first());
        out.extend_from_slice(&b[1..]);
        out
    };
    let s = steps;
    let q = steps / 4; // lattice index of coordinate 1/4
    let mut curves: Vec<(String, Vec<u32>)> = Vec::new();
    curves.push(("ab".into(), run((0, 0, 0), (s, 0, 0))?));
    curves.push(("ac".into(), run((0, 0, 0), (0, s, 0))?));
    curves.push(("ad".into(), run((0, 0, 0), (0, 0, s))?));
    curves.push(("be".into(), concat(run((s, 0, 0), (s, s, 0))?, run((s, s, 0), (s, s, s))?)));
    curves.push(("ce".into(), concat(run((0, s, 0), (0, s, s))?, run((0, s, s), (s, s, s))?)));
    curves.push(("de".into(), concat(run((0, 0, s), (s, 0, s))?, run((s, 0, s), (s, s, s))?)));

    // constrained face path: shortest path on the complex restricted to one
    // face, a coordinate window, and interior-or-endpoint vertices
    let face_path = |fixed_axis: usize,
                     fixed_val: i64,
                     window: [(i64, i64); 3],
                     from: u32,
                     to: u32|
     -> Result<Vec<u32>> {
        let allowed = |v: u32| -> bool {
            if v == from || v == to {
                return true;
            }
            let vert = &gc.vertices()[v as usize];
            let idx = gc.lattice_indices(vert.lattice);
            if idx[fixed_axis] != fixed_val {
                return false;
            }
            for d in 0..3 {
                if idx[d] < window[d].0 || idx[d] > window[d].1 {
                    return false;
                }
            }
            // stay off the face's boundary edges (they carry other curves)
            for d in 0..3 {
                if d == fixed_axis {
                    continue;
                }
                if idx[d] == 0 || idx[d] == s {
                    return false;
                }
            }
            true
        };
        let res = g.dijkstra_by(
            &[(from, 0.0)],
            &SearchOpts { cap: None, stop_at_any: Some(vec![to]) },
            |_, v, l| if allowed(v) { l } else { f64::INFINITY },
        );
        if !res.dist[to as usize].is_finite() {
            return Err(Error::Invalid(
                "face curve blocked at this resolution; refine h".into(),
            ));
        }
        Ok(crate::grid::extract_path(&res.parent, to))
    };
    // bc on the z=0 face within the x+y ≥ 3/4 band
    curves.push((
        "bc".into(),
        face_path(2, 0, [(0, s), (0, s), (0, 0)], vid(s, 0, 0)?, vid(0, s, 0)?)
            .and_then(|p| {
                // enforce the anti-diagonal band by validating the result
                for &v in &p {
                    let idx = gc.lattice_indices(gc.vertices()[v as usize].lattice);
                    if idx[0] + idx[1] < 3 * s / 4 {
                        return Err(Error::Invalid("bc strayed".into()));
                    }
                }
                Ok(p)
            })
            .or_else(|_| {
                banded_face_path(gc, 2, 0, (3 * s / 4, 2 * s), vid(s, 0, 0)?, vid(0, s, 0)?)
            })?,
    ));
    // bd on the y=0 face, cd on the x=0 face
    curves.push((
        "bd".into(),
        face_path(1, 0, [(0, s), (0, 0), (0, s)], vid(s, 0, 0)?, vid(0, 0, s)?)?,
    ));
    curves.push((
        "cd".into(),
        face_path(0, 0, [(0, 0), (0, s), (0, s)], vid(0, s, 0)?, vid(0, 0, s)?)?,
    ));
    // ae: bottom-face quadrant, the vertical segment at (1/4,1/4), top-face
    // quadrant
    let g1 = face_path(2, 0, [(0, q), (0, q), (0, 0)], vid(0, 0, 0)?, vid(q, q, 0)?)?;
    let g2 = run((q, q, 0), (q, q, s))?;
    let g3 = face_path(2, s, [(q, s), (q, s), (s, s)], vid(q, q, s)?, vid(s, s, s)?)?;
    curves.push(("ae".into(), concat(concat(g1, g2), g3)));

    // pairwise disjointness except designated endpoints
    let mut violations = Vec::new();
    for i in 0..curves.len() {
        for j in (i + 1)..curves.len() {
            let (na, pa) = &curves[i];
            let (nb, pb) = &curves[j];
            let sa: HashSet<u32> = pa.iter().copied().collect();
            let shared: HashSet<u32> = pb.iter().copied().filter(|v| sa.contains(v)).collect();
            let designated: HashSet<u32> = {
                let mut set = HashSet::new();
                for ch in na.chars() {
                    if nb.contains(ch) {
                        let corner = match ch {
                            'a' => vid(0, 0, 0)?,
                            'b' => vid(s, 0, 0)?,
                            'c' => vid(0, s, 0)?,
                            'd' => vid(0, 0, s)?,
                            'e' => vid(s, s, s)?,
                            _ => unreachable!(),
                        };
                        set.insert(corner);
                    }
                }
                set
            };
            if shared != designated {
                violations.push((na.clone(), nb.clone()));
            }
        }
    }
    Ok(K5Witness { curves, violations })
}

/// Fallback band-constrained face path, allowing the face's outer edges
/// within the band.
fn banded_face_path(
    gc: &GridComplex,
    fixed_axis: usize,
    fixed_val: i64,
    band: (i64, i64),
    from: u32,
    to: u32,
) -> Result<Vec<u32>> {
    let g = gc.graph();
    let allowed = |v: u32| -> bool {
        if v == from || v == to {
            return true;
        }
        let vert = &gc.vertices()[v as usize];
        let idx = gc.lattice_indices(vert.lattice);
        if idx[fixed_axis] != fixed_val {
            return false;
        }
        let inplane: Vec<i64> = (0..3).filter(|&d| d != fixed_axis).map(|d| idx[d]).collect();
        let sum = inplane[0] + inplane[1];
        sum >= band.0 && sum <= band.1
    };
    let res = g.dijkstra_by(
        &[(from, 0.0)],
        &SearchOpts { cap: None, stop_at_any: Some(vec![to]) },
        |_, v, l| if allowed(v) { l } else { f64::INFINITY },
    );
    if !res.dist[to as usize].is_finite() {
        return Err(Error::Invalid("face curve blocked at this resolution".into()));
    }
    Ok(crate::grid::extract_path(&res.parent, to))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(n: i64, e: u32) -> Dyadic {
        Dyadic::new(n, e)
    }

    fn a0(h_exp: u32) -> MengerComplex {
        build_menger(&[0], 0, Dyadic::pow2(h_exp)).unwrap()
    }

    #[test]
    fn build_examples() {
        // A = {0}: one grillage at x = 1/2 and one tube strip at y = 1/2
        let mc = a0(4);
        assert_eq!(mc.crosses.len(), 1);
        assert_eq!(mc.tubes.len(), 1);
        // tear sheet checks: (1/2, 1/2, 1/2) lies on both sheets (4 copies)
        let lat = mc.gc.lattice_id(&[8, 8, 8]);
        assert_eq!(mc.gc.verts_at(0, lat).len(), 4);
        // (1/2, 1/4, 1/2): on the grillage z-band only (2 copies)
        let lat = mc.gc.lattice_id(&[8, 4, 8]);
        assert_eq!(mc.gc.verts_at(0, lat).len(), 2);
        // A = ∅: untorn cube
        let mc = build_menger(&[], 0, d(1, 3)).unwrap();
        assert_eq!(mc.gc.vertex_count(), 9 * 9 * 9);
        // A = {0,1}: 1 + 4 grillages, 1 + 16 tube strips
        let mc = build_menger(&[0, 1], 1, d(1, 6)).unwrap();
        assert_eq!(mc.crosses.len(), 5);
        assert_eq!(mc.tubes.len(), 17);
    }

    #[test]
    fn misaligned_h_is_rejected() {
        assert!(matches!(
            build_menger(&[0, 1], 1, d(1, 3)),
            Err(Error::ResolutionMisaligned(_))
        ));
    }

    #[test]
    fn base_carpet_is_isometric() {
        let mc = a0(4);
        let check = base_carpet(&mc, 60, 11).unwrap();
        assert_eq!(check.seq.len(), 1);
        assert!(
            check.max_discrepancy < 1e-12,
            "base metric must match the slit carpet: {}",
            check.max_discrepancy
        );
    }

    #[test]
    fn base_carpet_straddling_pair() {
        // the two copies of the base slit center are 1/2 apart in both the
        // 2D carpet and the 3D complex
        let mc = a0(4);
        let check = base_carpet(&mc, 1, 1).unwrap();
        let oi2 = 0; // only slit of the carpet
        let p = PointRef::tagged(vec![d(1, 1), d(1, 1)], vec![(oi2, 1)]);
        let q = PointRef::tagged(vec![d(1, 1), d(1, 1)], vec![(oi2, -1)]);
        let d2 = check.carpet.geodesic_distance(&p, &q).unwrap();
        let oi3 = mc.cross_obstacle(0, 0).unwrap();
        let p3 = PointRef::tagged(vec![d(1, 1), d(1, 1), Dyadic::ZERO], vec![(oi3, 1)]);
        let q3 = PointRef::tagged(vec![d(1, 1), d(1, 1), Dyadic::ZERO], vec![(oi3, -1)]);
        let d3 = mc.gc.geodesic_distance(&p3, &q3).unwrap();
        assert!((d2 - 0.5).abs() < 1e-12);
        assert!((d3 - d2).abs() < 1e-12);
    }

    #[test]
    fn fibers_of_the_big_slit() {
        let mc = a0(5);
        let oi = mc.cross_obstacle(0, 0).unwrap();
        // off-slit interval
        let f = fiber(&mc.gc, &PointRef::plain(vec![d(1, 3), d(1, 3), Dyadic::ZERO])).unwrap();
        assert_eq!(f.label, FiberLabel::Interval);
        assert_eq!((f.betti, f.endpoints), (0, 2));
        // endpoint (1/2, 1/4): one cycle, two endpoints → L(1)
        let f = fiber(&mc.gc, &PointRef::plain(vec![d(1, 1), d(1, 2), Dyadic::ZERO])).unwrap();
        assert_eq!(f.label, FiberLabel::L(1), "{f:?}");
        assert_eq!(f.betti, 1);
        // center copies: two disjoint L(1) fibers
        let fp =
            fiber(&mc.gc, &PointRef::tagged(vec![d(1, 1), d(1, 1), Dyadic::ZERO], vec![(oi, 1)]))
                .unwrap();
        let fm =
            fiber(&mc.gc, &PointRef::tagged(vec![d(1, 1), d(1, 1), Dyadic::ZERO], vec![(oi, -1)]))
                .unwrap();
        assert_eq!(fp.label, FiberLabel::L(1));
        assert_eq!(fm.label, FiberLabel::L(1));
        // generic slit point: interval
        let f = fiber(
            &mc.gc,
            &PointRef::tagged(vec![d(1, 1), d(3, 3), Dyadic::ZERO], vec![(oi, 1)]),
        )
        .unwrap();
        assert_eq!(f.label, FiberLabel::Interval);
    }

    #[test]
    fn fibers_in_the_double() {
        let mc = a0(5);
        let dbl = mc.double().unwrap();
        let oi = mc.cross_obstacle(0, 0).unwrap();
        // off-slit: circle
        let f = fiber(&dbl, &PointRef::plain(vec![d(1, 3), d(1, 3), Dyadic::ZERO])).unwrap();
        assert_eq!(f.label, FiberLabel::Circle);
        // endpoint: Y(1), betti 3 = 2·1+1
        let f = fiber(&dbl, &PointRef::plain(vec![d(1, 1), d(1, 2), Dyadic::ZERO])).unwrap();
        assert_eq!(f.label, FiberLabel::Y(1), "{f:?}");
        assert_eq!(f.betti, 3);
        // generic slit point: circle (2·0+1 cycle)
        let f = fiber(
            &dbl,
            &PointRef::tagged(vec![d(1, 1), d(3, 3), Dyadic::ZERO], vec![(oi, 1)]),
        )
        .unwrap();
        assert_eq!(f.label, FiberLabel::Circle);
    }

    #[test]
    fn double_single_betti_relation() {
        let mc = a0(5);
        let dbl = mc.double().unwrap();
        let oi = mc.cross_obstacle(0, 0).unwrap();
        for p in [
            PointRef::plain(vec![d(1, 1), d(1, 2), Dyadic::ZERO]),
            PointRef::plain(vec![d(1, 1), d(3, 2), Dyadic::ZERO]),
            PointRef::tagged(vec![d(1, 1), d(1, 1), Dyadic::ZERO], vec![(oi, 1)]),
            PointRef::tagged(vec![d(1, 1), d(3, 3), Dyadic::ZERO], vec![(oi, -1)]),
            PointRef::plain(vec![d(1, 3), d(5, 3), Dyadic::ZERO]),
        ] {
            let single = fiber(&mc.gc, &p).unwrap();
            let double = fiber(&dbl, &p).unwrap();
            assert_eq!(
                double.betti,
                2 * single.betti + 1,
                "betti doubling failed at {p:?}"
            );
        }
    }

    #[test]
    fn predicate_matches_fibers() {
        // A = {0,1} at level 1: the predicate's sheet enumeration and the
        // built complex must agree on cycle counts
        let mc = build_menger(&[0, 1], 1, d(1, 6)).unwrap();
        let cases: Vec<(Dyadic, Dyadic, Option<i8>)> = vec![
            (d(1, 1), d(1, 2), None),      // gen-0 endpoint
            (d(1, 1), d(1, 1), Some(1)),   // gen-0 center
            (d(1, 1), d(3, 3), Some(1)),   // gen-0 point on the gen-1 tube plane
            (d(1, 1), d(5, 4), Some(-1)),  // gen-0 generic point
            (d(1, 3), d(1, 4), None),      // gen-1 endpoint (1/8, 1/16)
            (d(1, 3), d(1, 3), Some(1)),   // gen-1 center
            (d(1, 3), d(5, 6), Some(1)),   // gen-1 generic (1/8, 5/64)
        ];
        for (x, y, side) in cases {
            let pred = fiber_predicate(&mc.gens, mc.level, x, y).unwrap();
            let p = match side {
                None => PointRef::plain(vec![x, y, Dyadic::ZERO]),
                Some(s) => {
                    let gen = ((x.exponent() - 1) / 2) as usize;
                    let k = (x.numerator() as u64 - 1) / 2;
                    let oi = mc.cross_obstacle(gen, k).unwrap();
                    PointRef::tagged(vec![x, y, Dyadic::ZERO], vec![(oi, s)])
                }
            };
            let f = fiber(&mc.gc, &p).unwrap();
            assert_eq!(
                f.betti, pred.cycles,
                "cycle count mismatch at ({x}, {y}): built {} vs predicted {}",
                f.betti, pred.cycles
            );
            assert_eq!(f.betti > 0, pred.cycles > 0);
        }
        // off-slit points are rejected
        assert!(fiber_predicate(&mc.gens, mc.level, d(1, 2), d(1, 1)).is_err());
        assert!(fiber_predicate(&mc.gens, mc.level, d(1, 1), d(1, 4)).is_err());
    }

    #[test]
    fn four_points_on_the_big_slit() {
        let mc = a0(5);
        let dbl = mc.double().unwrap();
        let rep = four_points_check(&mc, &dbl, 0, 0, 0).unwrap();
        assert_eq!(rep.special_bettis, [3, 3, 3, 3]);
        assert!(rep.exactly_four, "others reached {}", rep.max_other_betti);
        assert!(rep.isomorphic);
        assert!(rep.max_other_betti < 3);
    }

    #[test]
    fn spectra_distinguish_generation_sets() {
        let h = d(1, 6);
        let sa = fiber_spectrum(&build_menger(&[0, 1], 2, h).unwrap()).unwrap();
        let sb = fiber_spectrum(&build_menger(&[0, 2], 2, h).unwrap()).unwrap();
        assert!(spectra_distinguish(&sa, &sb));
        // equal sets agree
        let sa2 = fiber_spectrum(&build_menger(&[0, 1], 2, h).unwrap()).unwrap();
        assert!(!spectra_distinguish(&sa, &sa2));
        // A = {0}: a single generation class
        let s0 = fiber_spectrum(&a0(5)).unwrap();
        assert_eq!(s0.entries.len(), 1);
        assert_eq!(s0.entries[0], (0, 1, 1));
    }

    #[test]
    fn spectrum_truncation_stability() {
        // entries for generations ≤ 1 agree between the level-1 and level-2
        // builds
        let s1 = fiber_spectrum(&build_menger(&[0, 1], 1, d(1, 4)).unwrap()).unwrap();
        let s2 = fiber_spectrum(&build_menger(&[0, 1], 2, d(1, 6)).unwrap()).unwrap();
        let low = |s: &FiberSpectrum| {
            s.entries
                .iter()
                .filter(|(g, _, _)| *g <= 1)
                .copied()
                .collect::<Vec<_>>()
        };
        assert_eq!(low(&s1), low(&s2));
    }

    #[test]
    fn covering_order_is_two() {
        let mc = build_menger(&[0, 1], 1, d(1, 6)).unwrap();
        let rep = covering_order(&mc.gc, 1, 1.0 / 64.0).unwrap();
        assert_eq!(rep.cubes, 125);
        assert!(rep.max_order <= 2, "order {}", rep.max_order);
        assert!(rep.violating.is_empty());
    }

    #[test]
    fn cube_dichotomy_bound() {
        let mc = build_menger(&[0, 1], 1, d(1, 5)).unwrap();
        let rep = cube_dichotomy(&mc.gc, 1).unwrap();
        let slack = 2.0 * mc.gc.h.to_f64() * crate::grid::stencil_distortion(3);
        assert!(
            rep.min_nonadjacent_distance >= 1.0 / 16.0 - slack,
            "dichotomy distance {}",
            rep.min_nonadjacent_distance
        );
        assert!(rep.pairs.iter().any(|(_, _, r)| *r == CubeRelation::Adjacent));
    }

    #[test]
    fn k5_witness_disjoint() {
        let mc = build_menger(&[0, 1], 1, d(1, 4)).unwrap();
        let w = k5_witness(&mc).unwrap();
        assert_eq!(w.curves.len(), 10);
        assert!(w.violations.is_empty(), "violations: {:?}", w.violations);
        // the through-curve really uses the vertical segment at (1/4, 1/4)
        let ae = &w.curves.iter().find(|(n, _)| n == "ae").unwrap().1;
        let mid = mc.gc.lattice_id(&[4, 4, 8]);
        assert!(ae
            .iter()
            .any(|&v| mc.gc.vertices()[v as usize].lattice == mid));
        // edge curve ab is the bottom x-edge
        let ab = &w.curves.iter().find(|(n, _)| n == "ab").unwrap().1;
        assert_eq!(ab.len(), mc.gc.vdims[0]);
    }

    #[test]
    fn z_parallel_bound_decreases_with_level() {
        // F-family machinery: 3D dyadic slits with r = 1/2 at even
        // generations; deeper truncations give smaller collar-mass bounds
        let eps = d(1, 2);
        let mut masses = Vec::new();
        for gens in [vec![d(1, 1)], vec![d(1, 1), Dyadic::ZERO, d(1, 1)]] {
            let max_gen = (gens.len() - 1) as u32;
            let mut seq = crate::slits::dyadic_slits(&gens, 3, max_gen).unwrap();
            seq.validate();
            let gc = GridComplex::build_slit_complex(&seq, 0, d(1, 5)).unwrap();
            let idx =
                crate::collar::select_collars(&seq, eps, crate::collar::SelectStrategy::Largest)
                    .unwrap();
            let dec = crate::collar::decompose(&gc, &seq, &idx, eps).unwrap();
            masses.push(dec.residual_measure + dec.buffer_measure);
        }
        assert!(masses[1] < masses[0], "{masses:?}");
    }
}
