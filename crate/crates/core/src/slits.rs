//! Boxes, slits, and slit sequences.
//!
//! A slit is an axis-perpendicular (n−1)-cube with equal cross-section sides,
//! removed from an open box. This module generates the dyadic families, the
//! Menger face families, and validates the separation / porosity conditions
//! a sequence has to satisfy. All coordinates are exact dyadic rationals.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dyadic::Dyadic;
use crate::{Error, Result};

/// An axis-aligned open box `(a_1,b_1)×…×(a_n,b_n)`, `n ≥ 2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoxN {
    intervals: Vec<(Dyadic, Dyadic)>,
}

impl BoxN {
    pub fn new(intervals: Vec<(Dyadic, Dyadic)>) -> Result<BoxN> {
        if intervals.len() < 2 {
            return Err(Error::Invalid("box dimension must be at least 2".into()));
        }
        for &(a, b) in &intervals {
            if a >= b {
                return Err(Error::Invalid(format!("empty box side [{a}, {b}]")));
            }
        }
        Ok(BoxN { intervals })
    }

    pub fn unit(dim: usize) -> BoxN {
        BoxN::new(vec![(Dyadic::ZERO, Dyadic::ONE); dim]).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.intervals.len()
    }

    pub fn interval(&self, axis: usize) -> (Dyadic, Dyadic) {
        self.intervals[axis]
    }

    pub fn intervals(&self) -> &[(Dyadic, Dyadic)] {
        &self.intervals
    }

    pub fn side(&self, axis: usize) -> Dyadic {
        let (a, b) = self.intervals[axis];
        b - a
    }

    pub fn volume(&self) -> f64 {
        self.intervals.iter().map(|&(a, b)| (b - a).to_f64()).product()
    }

    pub fn center(&self) -> Vec<Dyadic> {
        self.intervals.iter().map(|&(a, b)| (a + b).halved()).collect()
    }

    pub fn diameter(&self) -> f64 {
        self.intervals
            .iter()
            .map(|&(a, b)| {
                let d = (b - a).to_f64();
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn as_aabb(&self) -> Aabb {
        Aabb {
            lo: self.intervals.iter().map(|&(a, _)| a).collect(),
            hi: self.intervals.iter().map(|&(_, b)| b).collect(),
        }
    }
}

/// A closed axis-aligned box, possibly degenerate along some axes.
/// Slits are the special case of one degenerate axis and equal extents
/// elsewhere.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Aabb {
    pub lo: Vec<Dyadic>,
    pub hi: Vec<Dyadic>,
}

impl Aabb {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Squared Euclidean distance between the closed boxes, exact.
    fn dist_sq(&self, other: &Aabb) -> Dyadic {
        let mut sum = Dyadic::ZERO;
        for d in 0..self.dim() {
            let gap = (other.lo[d] - self.hi[d]).max(self.lo[d] - other.hi[d]).max(Dyadic::ZERO);
            sum = sum + gap * gap;
        }
        sum
    }

    fn diam_sq(&self) -> Dyadic {
        let mut sum = Dyadic::ZERO;
        for d in 0..self.dim() {
            let e = self.hi[d] - self.lo[d];
            sum = sum + e * e;
        }
        sum
    }

    pub fn dist(&self, other: &Aabb) -> f64 {
        self.dist_sq(other).to_f64().sqrt()
    }

    pub fn diam(&self) -> f64 {
        self.diam_sq().to_f64().sqrt()
    }

    /// Closed boxes intersect iff they overlap on every axis.
    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..self.dim()).all(|d| self.hi[d] >= other.lo[d] && other.hi[d] >= self.lo[d])
    }

    pub fn contains(&self, other: &Aabb) -> bool {
        (0..self.dim()).all(|d| self.lo[d] <= other.lo[d] && other.hi[d] <= self.hi[d])
    }

    /// Strict containment in the open interior on every axis.
    pub fn compactly_inside(&self, bx: &BoxN) -> bool {
        (0..self.dim()).all(|d| {
            let (a, b) = bx.interval(d);
            a < self.lo[d] && self.hi[d] < b
        })
    }

    /// Distance to the boundary shell of `bx` (0 if the box is touched or left).
    pub fn boundary_dist_sq(&self, bx: &BoxN) -> Dyadic {
        let mut best: Option<Dyadic> = None;
        for d in 0..self.dim() {
            let (a, b) = bx.interval(d);
            let lo_gap = (self.lo[d] - a).max(Dyadic::ZERO);
            let hi_gap = (b - self.hi[d]).max(Dyadic::ZERO);
            let g = lo_gap.min(hi_gap);
            best = Some(match best {
                None => g,
                Some(m) => m.min(g),
            });
        }
        let g = best.unwrap();
        g * g
    }
}

/// Relative distance `Δ(E,F) = dist(E,F) / min(diam E, diam F)`.
///
/// Exact for boxes and slits: the squared distance and squared diameters are
/// dyadic, so the quotient is formed before the square root.
pub fn relative_distance(e: &Aabb, f: &Aabb) -> Result<f64> {
    let de = e.diam_sq();
    let df = f.diam_sq();
    if de.is_zero() || df.is_zero() {
        return Err(Error::DegenerateSet("zero-diameter input".into()));
    }
    let dist = e.dist_sq(&f.clone());
    Ok((dist.to_f64() / de.min(df).to_f64()).sqrt())
}

/// A slit: a closed (n−1)-cube in the hyperplane `x_axis = offset` with all
/// cross-section sides of length `sidelength`. `axis` is 0-based in code and
/// 1-based in serialized files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slit {
    pub axis: usize,
    pub offset: Dyadic,
    /// Cross-section center, one entry per non-normal axis in increasing
    /// axis order.
    pub center: Vec<Dyadic>,
    pub sidelength: Dyadic,
    /// Dyadic generation when produced by a generator, used only for
    /// deterministic tie-breaking and reporting.
    pub generation: Option<usize>,
}

impl Slit {
    pub fn new(axis: usize, offset: Dyadic, center: Vec<Dyadic>, sidelength: Dyadic) -> Result<Slit> {
        if !sidelength.is_positive() {
            return Err(Error::Invalid("slit sidelength must be positive".into()));
        }
        Ok(Slit { axis, offset, center, sidelength, generation: None })
    }

    pub fn dim(&self) -> usize {
        self.center.len() + 1
    }

    pub fn as_aabb(&self) -> Aabb {
        let half = self.sidelength.halved();
        let mut lo = Vec::with_capacity(self.dim());
        let mut hi = Vec::with_capacity(self.dim());
        let mut c = self.center.iter();
        for d in 0..self.dim() {
            if d == self.axis {
                lo.push(self.offset);
                hi.push(self.offset);
            } else {
                let &m = c.next().unwrap();
                lo.push(m - half);
                hi.push(m + half);
            }
        }
        Aabb { lo, hi }
    }

    /// diam(s) = l(s)·√(n−1).
    pub fn diam(&self) -> f64 {
        self.sidelength.to_f64() * ((self.dim() - 1) as f64).sqrt()
    }
}

/// A dyadic cube of a given generation in `[0,1]^n`, sidelength `2^{-g}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DyadicCube {
    pub dim: usize,
    pub generation: u32,
    pub index: Vec<u64>,
}

impl DyadicCube {
    pub fn new(dim: usize, generation: u32, index: Vec<u64>) -> Result<DyadicCube> {
        if index.len() != dim {
            return Err(Error::Invalid("index length must equal dim".into()));
        }
        if index.iter().any(|&i| i >= 1u64 << generation) {
            return Err(Error::Invalid("dyadic index out of range".into()));
        }
        Ok(DyadicCube { dim, generation, index })
    }

    pub fn sidelength(&self) -> Dyadic {
        Dyadic::pow2(self.generation)
    }

    pub fn center(&self) -> Vec<Dyadic> {
        self.index
            .iter()
            .map(|&i| Dyadic::new(2 * i as i64 + 1, self.generation + 1))
            .collect()
    }

    /// Enumerate all cubes of one generation in lexicographic index order.
    pub fn generation_iter(dim: usize, generation: u32) -> impl Iterator<Item = DyadicCube> {
        let count = 1u64 << generation;
        let total = count.pow(dim as u32);
        (0..total).map(move |mut flat| {
            let mut index = vec![0u64; dim];
            for d in (0..dim).rev() {
                index[d] = flat % count;
                flat /= count;
            }
            DyadicCube { dim, generation, index }
        })
    }
}

/// An ordered slit sequence in a box. Slits are kept sorted by nonincreasing
/// sidelength; ties keep generator order (generation, then lexicographic
/// index).
#[derive(Clone, Debug)]
pub struct SlitSequence {
    pub bx: BoxN,
    pub slits: Vec<Slit>,
    /// Separation constant σ; 0 until validated.
    pub sigma: f64,
}

/// Output of [`SlitSequence::validate`].
#[derive(Clone, Debug, PartialEq)]
pub struct SeparationReport {
    pub min_pairwise: f64,
    pub min_boundary: f64,
    pub sorted_ok: bool,
    pub disjoint_ok: bool,
}

impl SeparationReport {
    pub fn all_ok(&self) -> bool {
        self.sorted_ok && self.disjoint_ok && self.min_pairwise > 0.0 && self.min_boundary > 0.0
    }
}

impl SlitSequence {
    pub fn new(bx: BoxN, mut slits: Vec<Slit>) -> Result<SlitSequence> {
        for s in &slits {
            if s.dim() != bx.dim() {
                return Err(Error::Invalid("slit dimension does not match box".into()));
            }
            if !bx.as_aabb().contains(&s.as_aabb()) {
                return Err(Error::Invalid(format!(
                    "slit at offset {} not contained in box",
                    s.offset
                )));
            }
        }
        slits.sort_by(|a, b| b.sidelength.cmp(&a.sidelength));
        Ok(SlitSequence { bx, slits, sigma: 0.0 })
    }

    pub fn empty(bx: BoxN) -> SlitSequence {
        SlitSequence { bx, slits: Vec::new(), sigma: f64::INFINITY }
    }

    pub fn len(&self) -> usize {
        self.slits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slits.is_empty()
    }

    /// Check conditions (pairwise separation, boundary separation, ordering,
    /// disjointness) and set `sigma` to the minimal relative separation found.
    /// Overlapping slits are reported, not an error.
    pub fn validate(&mut self) -> SeparationReport {
        let mut min_pairwise = f64::INFINITY;
        let mut min_boundary = f64::INFINITY;
        let mut disjoint_ok = true;
        let aabbs: Vec<Aabb> = self.slits.iter().map(|s| s.as_aabb()).collect();
        for i in 0..aabbs.len() {
            for j in (i + 1)..aabbs.len() {
                if aabbs[i].intersects(&aabbs[j]) {
                    disjoint_ok = false;
                }
                if let Ok(delta) = relative_distance(&aabbs[i], &aabbs[j]) {
                    min_pairwise = min_pairwise.min(delta);
                }
            }
            // Relative distance to ∂I: the boundary's diameter is the box
            // diameter, always at least the slit diameter here.
            let d = aabbs[i].boundary_dist_sq(&self.bx).to_f64().sqrt();
            let m = aabbs[i].diam().min(self.bx.diameter());
            min_boundary = min_boundary.min(d / m);
        }
        let sorted_ok = self
            .slits
            .windows(2)
            .all(|w| w[0].sidelength >= w[1].sidelength);
        self.sigma = min_pairwise.min(min_boundary);
        SeparationReport { min_pairwise, min_boundary, sorted_ok, disjoint_ok }
    }
}

/// Slits of the standard (dyadic) non-self-similar family in `[0,1]^n`:
/// one slit per dyadic cube `Q` of generation `i ≤ max_gen`, normal to axis 0,
/// of sidelength `r_i · 2^{-i}`, centered at the center of `Q`. `r_i = 0`
/// emits nothing.
pub fn dyadic_slits(r: &[Dyadic], dim: usize, max_gen: u32) -> Result<SlitSequence> {
    if dim < 2 {
        return Err(Error::Invalid("dimension must be at least 2".into()));
    }
    if (r.len() as u32) < max_gen + 1 {
        return Err(Error::Invalid(format!(
            "need {} ratio entries for generations 0..={max_gen}",
            max_gen + 1
        )));
    }
    for &ri in &r[..=(max_gen as usize)] {
        if ri.is_negative() || ri >= Dyadic::ONE {
            return Err(Error::Invalid(format!("ratio {ri} outside [0,1)")));
        }
    }
    let mut slits = Vec::new();
    for g in 0..=max_gen {
        let ri = r[g as usize];
        if ri.is_zero() {
            continue;
        }
        let side = ri * Dyadic::pow2(g);
        for q in DyadicCube::generation_iter(dim, g) {
            let c = q.center();
            let mut slit = Slit::new(0, c[0], c[1..].to_vec(), side)?;
            slit.generation = Some(g as usize);
            slits.push(slit);
        }
    }
    SlitSequence::new(BoxN::unit(dim), slits)
}

/// Porosity scan report for condition (occurrence at all locations and
/// scales).
#[derive(Clone, Debug)]
pub struct PorosityReport {
    /// Worst observed `r / diam(s)` over the best slit contained in each
    /// sampled ball (infinite when some ball contains no slit).
    pub worst_ratio: f64,
    pub pass: bool,
    pub samples: usize,
    pub r_min: f64,
    pub r_max: f64,
}

/// Sample balls `B(x,r) ⊂ I` with `r ≥ r_min` and test whether each contains
/// a slit of diameter at least `r / c`. The check is truncated at `r_min`,
/// which should not be taken below the finest slit scale.
pub fn all_scales_check(
    seq: &SlitSequence,
    c: f64,
    samples: usize,
    r_min: f64,
    seed: u64,
) -> PorosityReport {
    assert!(c >= 1.0, "porosity constant must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = seq.bx.dim();
    let half_min = seq
        .bx
        .intervals()
        .iter()
        .map(|&(a, b)| (b - a).to_f64() / 2.0)
        .fold(f64::INFINITY, f64::min);
    let r_max = (half_min * 0.999).max(r_min);
    let aabbs: Vec<Aabb> = seq.slits.iter().map(|s| s.as_aabb()).collect();
    let diams: Vec<f64> = seq.slits.iter().map(|s| s.diam()).collect();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        // log-uniform radius, center uniform in the r-inset of the box
        let t: f64 = rng.gen();
        let r = r_min * (r_max / r_min).powf(t);
        let x: Vec<f64> = seq
            .bx
            .intervals()
            .iter()
            .map(|&(a, b)| {
                let (af, bf) = (a.to_f64() + r, b.to_f64() - r);
                af + (bf - af) * rng.gen::<f64>()
            })
            .collect();
        // largest slit entirely inside the Euclidean ball
        let mut best = 0.0f64;
        for (k, s) in aabbs.iter().enumerate() {
            if diams[k] <= best {
                continue;
            }
            let mut far = 0.0;
            for d in 0..n {
                let lo = (s.lo[d].to_f64() - x[d]).abs();
                let hi = (s.hi[d].to_f64() - x[d]).abs();
                let m = lo.max(hi);
                far += m * m;
            }
            if far.sqrt() <= r {
                best = diams[k];
            }
        }
        let ratio = if best > 0.0 { r / best } else { f64::INFINITY };
        worst = worst.max(ratio);
    }
    PorosityReport { worst_ratio: worst, pass: worst <= c, samples, r_min, r_max }
}

/// The three face slit families of the Menger domain family `𝔐(A)`. Each is
/// a 2D sequence in the unit square, using the in-face coordinates noted per
/// field; all three coincide as planar sequences.
#[derive(Clone, Debug)]
pub struct MengerFaces {
    /// Slits on the z = 0 face, in (x, y) coordinates.
    pub z0: SlitSequence,
    /// Slits on the y = 0 face, in (x, z) coordinates.
    pub y0: SlitSequence,
    /// Slits on the x = 0 face, in (y, z) coordinates.
    pub x0: SlitSequence,
}

/// Face slit families of `𝔐(A)`: for each generation `i ∈ A`, `i ≤ max_gen`,
/// slits of sidelength `4^{-i}/2` at the centers of the generation-`2i`
/// dyadic squares of the face.
pub fn menger_slit_faces(a: &[usize], max_gen: usize) -> Result<MengerFaces> {
    let build = || -> Result<SlitSequence> {
        let mut slits = Vec::new();
        for &i in a {
            if i > max_gen {
                continue;
            }
            let g = 2 * i as u32;
            // sidelength 2 · 4^{-(i+1)} = 4^{-i}/2 = (1/2) · 2^{-2i}
            let side = Dyadic::pow2(g + 1);
            for q in DyadicCube::generation_iter(2, g) {
                let c = q.center();
                let mut s = Slit::new(0, c[0], vec![c[1]], side)?;
                s.generation = Some(i);
                slits.push(s);
            }
        }
        SlitSequence::new(BoxN::unit(2), slits)
    };
    Ok(MengerFaces { z0: build()?, y0: build()?, x0: build()? })
}

/// Serialize a slit sequence in the line-oriented exchange format. Axes are
/// written 1-based; rationals as `p/2^q`.
pub fn write_slit_file(seq: &SlitSequence) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "dim {}", seq.bx.dim());
    let mut bx = String::new();
    for &(a, b) in seq.bx.intervals() {
        let _ = write!(bx, " {a} {b}");
    }
    let _ = writeln!(out, "box{bx}");
    for s in &seq.slits {
        let center = s
            .center
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(
            out,
            "slit axis={} offset={} center={} sidelength={}",
            s.axis + 1,
            s.offset,
            center,
            s.sidelength
        );
    }
    out
}

/// Parse the format produced by [`write_slit_file`].
pub fn read_slit_file(text: &str) -> Result<SlitSequence> {
    let mut dim: Option<usize> = None;
    let mut bx: Option<BoxN> = None;
    let mut slits = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| Error::Parse(format!("line {}: {msg}", lineno + 1));
        let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        match key {
            "dim" => {
                dim = Some(rest.trim().parse().map_err(|_| err("bad dim"))?);
            }
            "box" => {
                let vals: Vec<Dyadic> = rest
                    .split_whitespace()
                    .map(|t| t.parse())
                    .collect::<Result<_>>()?;
                let d = dim.ok_or_else(|| err("dim must come before box"))?;
                if vals.len() != 2 * d {
                    return Err(err("box needs 2·dim coordinates"));
                }
                bx = Some(BoxN::new(vals.chunks(2).map(|c| (c[0], c[1])).collect())?);
            }
            "slit" => {
                let mut axis = None;
                let mut offset = None;
                let mut center = None;
                let mut sidelength = None;
                for field in rest.split_whitespace() {
                    let (k, v) = field.split_once('=').ok_or_else(|| err("bad slit field"))?;
                    match k {
                        "axis" => {
                            let a: usize = v.parse().map_err(|_| err("bad axis"))?;
                            if a == 0 {
                                return Err(err("axis is 1-based"));
                            }
                            axis = Some(a - 1);
                        }
                        "offset" => offset = Some(v.parse::<Dyadic>()?),
                        "center" => {
                            center = Some(
                                v.split(',')
                                    .map(|t| t.parse::<Dyadic>())
                                    .collect::<Result<Vec<_>>>()?,
                            )
                        }
                        "sidelength" => sidelength = Some(v.parse::<Dyadic>()?),
                        _ => return Err(err("unknown slit field")),
                    }
                }
                let (axis, offset, center, sidelength) = match (axis, offset, center, sidelength) {
                    (Some(a), Some(o), Some(c), Some(s)) => (a, o, c, s),
                    _ => return Err(err("slit needs axis, offset, center, sidelength")),
                };
                slits.push(Slit::new(axis, offset, center, sidelength)?);
            }
            _ => return Err(err("unknown key")),
        }
    }
    let bx = bx.ok_or_else(|| Error::Parse("missing box line".into()))?;
    SlitSequence::new(bx, slits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(n: i64, e: u32) -> Dyadic {
        Dyadic::new(n, e)
    }

    #[test]
    fn relative_distance_examples() {
        // Two unit-sidelength slits in the plane, one unit apart along the
        // normal axis: distance equals the smaller diameter.
        let s1 = Slit::new(0, d(1, 2), vec![d(1, 1)], Dyadic::ONE).unwrap();
        let s2 = Slit::new(0, d(5, 2), vec![d(1, 1)], Dyadic::ONE).unwrap();
        assert_eq!(relative_distance(&s1.as_aabb(), &s2.as_aabb()).unwrap(), 1.0);
        // E = F → 0
        assert_eq!(relative_distance(&s1.as_aabb(), &s1.as_aabb()).unwrap(), 0.0);
        // degenerate input
        let p = Aabb { lo: vec![d(0, 0), d(0, 0)], hi: vec![d(0, 0), d(0, 0)] };
        assert!(matches!(
            relative_distance(&p, &s1.as_aabb()),
            Err(Error::DegenerateSet(_))
        ));
    }

    #[test]
    fn relative_distance_generation_one_dyadic_slits() {
        // r = (1/2, 1/2): generation-1 slits have sidelength 1/4 and sit at
        // the centers of the four dyadic squares. Same column, stacked:
        // {1/4}×[1/8,3/8] and {1/4}×[5/8,7/8]: gap 1/4, diameter 1/4.
        let seq = dyadic_slits(&[d(1, 1), d(1, 1)], 2, 1).unwrap();
        let col: Vec<&Slit> = seq
            .slits
            .iter()
            .filter(|s| s.generation == Some(1) && s.offset == d(1, 2))
            .collect();
        assert_eq!(col.len(), 2);
        let delta = relative_distance(&col[0].as_aabb(), &col[1].as_aabb()).unwrap();
        assert_eq!(delta, 1.0);
        // Across columns: {1/4}×[...] vs {3/4}×[...] at equal height:
        // gap 1/2 along the normal axis only, so Δ = (1/2)/(1/4) = 2.
        let row: Vec<&Slit> = seq
            .slits
            .iter()
            .filter(|s| s.generation == Some(1) && s.center[0] == d(1, 2))
            .collect();
        assert_eq!(row.len(), 2);
        let delta = relative_distance(&row[0].as_aabb(), &row[1].as_aabb()).unwrap();
        assert_eq!(delta, 2.0);
    }

    #[test]
    fn validate_dyadic_family() {
        let r = vec![d(1, 1); 3];
        let mut seq = dyadic_slits(&r, 2, 2).unwrap();
        let rep = seq.validate();
        assert!(rep.all_ok(), "{rep:?}");
        assert!(seq.sigma > 0.0);
        assert_eq!(seq.sigma, rep.min_pairwise.min(rep.min_boundary));
    }

    #[test]
    fn validate_touching_boundary() {
        // A slit whose cross-section reaches the box boundary.
        let bx = BoxN::unit(2);
        let s = Slit::new(0, d(1, 1), vec![d(1, 1)], Dyadic::ONE).unwrap();
        let mut seq = SlitSequence::new(bx, vec![s]).unwrap();
        let rep = seq.validate();
        assert_eq!(rep.min_boundary, 0.0);
        assert!(rep.disjoint_ok);
    }

    #[test]
    fn validate_empty() {
        let mut seq = SlitSequence::empty(BoxN::unit(2));
        let rep = seq.validate();
        assert!(rep.all_ok());
        assert_eq!(rep.min_pairwise, f64::INFINITY);
        assert_eq!(rep.min_boundary, f64::INFINITY);
    }

    #[test]
    fn separation_stabilizes_across_generations() {
        // For r_i ≤ 1/2 the minimal relative separation is independent of the
        // truncation generation once both scales interact.
        let mut mins = Vec::new();
        for g in 1..=5u32 {
            let r = vec![d(1, 1); (g + 1) as usize];
            let mut seq = dyadic_slits(&r, 2, g).unwrap();
            let rep = seq.validate();
            assert!(rep.all_ok());
            mins.push(seq.sigma);
        }
        assert!(mins[4] > 0.0);
        assert_eq!(mins[3], mins[4]);
        assert_eq!(mins[2], mins[3]);
    }

    #[test]
    fn dyadic_slits_examples() {
        // r = (1/2), max_gen 0: one slit {1/2}×[1/4,3/4]
        let seq = dyadic_slits(&[d(1, 1)], 2, 0).unwrap();
        assert_eq!(seq.len(), 1);
        let s = &seq.slits[0];
        assert_eq!(s.offset, d(1, 1));
        assert_eq!(s.as_aabb().lo[1], d(1, 2));
        assert_eq!(s.as_aabb().hi[1], d(3, 2));
        // all-zero ratios → empty
        let seq = dyadic_slits(&[Dyadic::ZERO, Dyadic::ZERO], 2, 1).unwrap();
        assert!(seq.is_empty());
        // r = (1/2,1/2), max_gen 1 → 1 + 4 slits, generation-1 sidelength 1/4
        let seq = dyadic_slits(&[d(1, 1), d(1, 1)], 2, 1).unwrap();
        assert_eq!(seq.len(), 5);
        assert_eq!(seq.slits[1].sidelength, d(1, 2));
        // out-of-range ratio
        assert!(dyadic_slits(&[Dyadic::ONE], 2, 0).is_err());
    }

    #[test]
    fn all_scales_dyadic_family_passes() {
        let r = vec![d(1, 1); 5];
        let mut seq = dyadic_slits(&r, 2, 4).unwrap();
        seq.validate();
        let rep = all_scales_check(&seq, 16.0, 400, 0.125, 7);
        assert!(rep.pass, "worst ratio {}", rep.worst_ratio);
    }

    #[test]
    fn all_scales_decaying_family_fails() {
        // r_i = 2^{-i}: the largest slit in B(x,r) has diameter o(r), so any
        // fixed constant fails once r is small.
        let r: Vec<Dyadic> = (0..7).map(|i| Dyadic::pow2(i + 1)).collect();
        let mut seq = dyadic_slits(&r, 2, 6).unwrap();
        seq.validate();
        let rep = all_scales_check(&seq, 16.0, 400, 0.01, 7);
        assert!(!rep.pass, "worst ratio {}", rep.worst_ratio);
    }

    #[test]
    fn all_scales_empty_fails() {
        let seq = SlitSequence::empty(BoxN::unit(2));
        let rep = all_scales_check(&seq, 1e6, 16, 0.1, 1);
        assert!(!rep.pass);
        assert!(rep.worst_ratio.is_infinite());
    }

    #[test]
    fn menger_faces_examples() {
        // A = {0}: one slit {1/2}×[1/4,3/4] on each face
        let f = menger_slit_faces(&[0], 0).unwrap();
        for seq in [&f.z0, &f.y0, &f.x0] {
            assert_eq!(seq.len(), 1);
            assert_eq!(seq.slits[0].offset, d(1, 1));
            assert_eq!(seq.slits[0].sidelength, d(1, 1));
        }
        // A = ∅
        let f = menger_slit_faces(&[], 3).unwrap();
        assert!(f.z0.is_empty() && f.y0.is_empty() && f.x0.is_empty());
        // A = {0,1}: 1 + 16 slits, generation-1 sidelength 4^{-1}/2 = 1/8
        let f = menger_slit_faces(&[0, 1], 1).unwrap();
        assert_eq!(f.z0.len(), 17);
        assert_eq!(f.z0.slits[1].sidelength, d(1, 3));
    }

    #[test]
    fn menger_faces_match_dyadic_family() {
        // A = {0,..,g} equals the dyadic family with r = 1/2 at generations
        // 2i and 0 elsewhere, compared by exact coordinates.
        let g = 2usize;
        let f = menger_slit_faces(&[0, 1, 2], g).unwrap();
        let mut r = vec![Dyadic::ZERO; 2 * g + 1];
        for i in 0..=g {
            r[2 * i] = d(1, 1);
        }
        let dy = dyadic_slits(&r, 2, 2 * g as u32).unwrap();
        assert_eq!(f.z0.len(), dy.len());
        for (a, b) in f.z0.slits.iter().zip(dy.slits.iter()) {
            assert_eq!(a.offset, b.offset);
            assert_eq!(a.center, b.center);
            assert_eq!(a.sidelength, b.sidelength);
        }
    }

    #[test]
    fn slit_file_round_trip() {
        let mut seq = dyadic_slits(&[d(1, 1), d(1, 2)], 2, 1).unwrap();
        seq.validate();
        let text = write_slit_file(&seq);
        let back = read_slit_file(&text).unwrap();
        assert_eq!(back.len(), seq.len());
        for (a, b) in back.slits.iter().zip(seq.slits.iter()) {
            assert_eq!(a.offset, b.offset);
            assert_eq!(a.center, b.center);
            assert_eq!(a.sidelength, b.sidelength);
            assert_eq!(a.axis, b.axis);
        }
        assert_eq!(write_slit_file(&back), text);
    }

    fn arb_aabb(dim: usize) -> impl Strategy<Value = Aabb> {
        let coord = (-64i64..64, 0u32..6).prop_map(|(n, e)| Dyadic::new(n, e));
        (
            proptest::collection::vec(coord.clone(), dim),
            proptest::collection::vec((coord, 1i64..32, 0u32..4), dim),
        )
            .prop_map(|(lo, ext)| {
                let hi = lo
                    .iter()
                    .zip(ext.iter())
                    .map(|(&l, &(_, n, e))| l + Dyadic::new(n, e))
                    .collect();
                Aabb { lo, hi }
            })
    }

    proptest! {
        #[test]
        fn relative_distance_symmetric_scale_invariant(
            e in arb_aabb(2),
            f in arb_aabb(2),
            lambda in 1i64..16,
        ) {
            let fwd = relative_distance(&e, &f).unwrap();
            let bwd = relative_distance(&f, &e).unwrap();
            prop_assert_eq!(fwd, bwd);
            let scale = |a: &Aabb| Aabb {
                lo: a.lo.iter().map(|&x| x * Dyadic::from_int(lambda)).collect(),
                hi: a.hi.iter().map(|&x| x * Dyadic::from_int(lambda)).collect(),
            };
            let scaled = relative_distance(&scale(&e), &scale(&f)).unwrap();
            prop_assert!((scaled - fwd).abs() <= 1e-12 * (1.0 + fwd));
        }
    }
}
