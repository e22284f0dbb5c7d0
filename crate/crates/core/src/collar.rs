//! ε-collar decompositions and the admissible indicator density.
//!
//! For a slit sequence and ε below the separation constant, a greedy
//! subsequence of slits with pairwise essentially disjoint right ε-collars is
//! selected. Each selected collar splits into its buffer (the rectangular
//! annulus around the thin edge) and the omitted open box inside; the
//! residual set is everything outside the collars. The density that equals
//! 1/(b₁−a₁) off the omitted regions and 0 inside them is admissible for the
//! left-right family up to a documented discretization slack, and its p-mass
//! is (b₁−a₁)^{−p}(H(ℛ)+H(ℬ)) exactly.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dyadic::Dyadic;
use crate::grid::{extract_path, GridComplex, SearchOpts, NO_PARENT};
use crate::slits::{Aabb, Slit, SlitSequence};
use crate::{Error, Result};

/// Greedy collar-selection rule. On a sequence sorted by nonincreasing
/// sidelength with index tie-breaks the two rules coincide; both are kept
/// because the bound checks run under each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectStrategy {
    /// Pick a slit of the largest length whose collar stays disjoint.
    Largest,
    /// Pick the smallest index whose collar stays disjoint.
    FirstFit,
}

/// Closed bounding box of the right ε-collar `s^ε = s + (0, εl(s))`.
pub fn collar_box(s: &Slit, eps: Dyadic) -> (Vec<Dyadic>, Vec<Dyadic>) {
    let a = s.as_aabb();
    let mut hi = a.hi;
    hi[s.axis] = hi[s.axis] + eps * s.sidelength;
    (a.lo, hi)
}

/// Closed bounding box of the omitted region `O^ε`: the collar inset by
/// εl(s) on every nonvertical side, dimensions εl × (1−2ε)l × … × (1−2ε)l.
pub fn omitted_box(s: &Slit, eps: Dyadic) -> (Vec<Dyadic>, Vec<Dyadic>) {
    let (mut lo, mut hi) = collar_box(s, eps);
    let inset = eps * s.sidelength;
    for d in 0..s.dim() {
        if d != s.axis {
            lo[d] = lo[d] + inset;
            hi[d] = hi[d] - inset;
        }
    }
    (lo, hi)
}

fn open_overlap(alo: &[Dyadic], ahi: &[Dyadic], blo: &[Dyadic], bhi: &[Dyadic]) -> bool {
    (0..alo.len()).all(|d| alo[d] < bhi[d] && blo[d] < ahi[d])
}

/// Greedy maximal subsequence with pairwise essentially disjoint ε-collars
/// (shared faces allowed). Requires a validated sequence with ε < σ.
pub fn select_collars(
    seq: &SlitSequence,
    eps: Dyadic,
    strategy: SelectStrategy,
) -> Result<Vec<usize>> {
    let epsf = eps.to_f64();
    if !(epsf > 0.0) || epsf >= seq.sigma {
        return Err(Error::CollarExitsBox { eps: epsf, sigma: seq.sigma });
    }
    let boxes: Vec<(Vec<Dyadic>, Vec<Dyadic>)> =
        seq.slits.iter().map(|s| collar_box(s, eps)).collect();
    for (i, (lo, hi)) in boxes.iter().enumerate() {
        let bb = Aabb { lo: lo.clone(), hi: hi.clone() };
        if !seq.bx.as_aabb().contains(&bb) {
            return Err(Error::Invalid(format!("collar of slit {i} exits the box")));
        }
    }
    let disjoint_from = |selected: &[usize], j: usize| {
        selected
            .iter()
            .all(|&k| !open_overlap(&boxes[j].0, &boxes[j].1, &boxes[k].0, &boxes[k].1))
    };
    let mut selected: Vec<usize> = Vec::new();
    match strategy {
        SelectStrategy::FirstFit => {
            for j in 0..seq.len() {
                if disjoint_from(&selected, j) {
                    selected.push(j);
                }
            }
        }
        SelectStrategy::Largest => {
            // slits are sorted by nonincreasing length, so the first
            // remaining admissible candidate has the largest length and the
            // smallest index among ties
            let mut remaining: Vec<usize> = (0..seq.len()).collect();
            while let Some(pos) = remaining.iter().position(|&j| disjoint_from(&selected, j)) {
                selected.push(remaining.remove(pos));
            }
            selected.sort_unstable();
        }
    }
    Ok(selected)
}

/// Cell label in the collar decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum CellLabel {
    Residual = 0,
    Buffer = 1,
    Omitted = 2,
}

/// Exact geometry and measures of one selected collar.
#[derive(Clone, Debug)]
pub struct SelectedCollar {
    pub slit_index: usize,
    pub collar: (Vec<Dyadic>, Vec<Dyadic>),
    pub omitted: (Vec<Dyadic>, Vec<Dyadic>),
    pub buffer_measure: f64,
    pub omitted_measure: f64,
}

/// Partition of the box cells into residual, buffer, and omitted sets.
pub struct CollarDecomposition {
    pub eps: Dyadic,
    pub selected: Vec<SelectedCollar>,
    /// Label per cell of the (single-copy) complex.
    pub labels: Vec<CellLabel>,
    pub residual_measure: f64,
    pub buffer_measure: f64,
    pub omitted_measure: f64,
    pub box_first_side: f64,
}

/// Label every cell for the given selected slits. `h` must divide ε·l(s) and
/// l(s) for every selected slit so the partition is cell-exact.
pub fn decompose(
    gc: &GridComplex,
    seq: &SlitSequence,
    indices: &[usize],
    eps: Dyadic,
) -> Result<CollarDecomposition> {
    if gc.copies != 1 {
        return Err(Error::Invalid("decompose expects a single (undoubled) complex".into()));
    }
    let h = gc.h;
    for &i in indices {
        let s = &seq.slits[i];
        if !(eps * s.sidelength).is_multiple_of(h) || !s.sidelength.is_multiple_of(h) {
            return Err(Error::ResolutionMisaligned(format!(
                "h = {h} does not align with eps*l = {} of slit {i}",
                eps * s.sidelength
            )));
        }
    }
    let mut labels = vec![CellLabel::Residual; gc.cell_count()];
    let vol = gc.cell_volume();
    let mut selected = Vec::with_capacity(indices.len());
    let mut buffer_total = 0.0;
    let mut omitted_total = 0.0;
    for &i in indices {
        let s = &seq.slits[i];
        let collar = collar_box(s, eps);
        let omitted = omitted_box(s, eps);
        let collar_cells = gc.cells_in_box(&collar.0, &collar.1, 0)?;
        for &c in &collar_cells {
            labels[c as usize] = CellLabel::Buffer;
        }
        let omitted_cells = gc.cells_in_box(&omitted.0, &omitted.1, 0)?;
        for &c in &omitted_cells {
            labels[c as usize] = CellLabel::Omitted;
        }
        let o_measure = omitted_cells.len() as f64 * vol;
        let b_measure = (collar_cells.len() - omitted_cells.len()) as f64 * vol;
        buffer_total += b_measure;
        omitted_total += o_measure;
        selected.push(SelectedCollar {
            slit_index: i,
            collar,
            omitted,
            buffer_measure: b_measure,
            omitted_measure: o_measure,
        });
    }
    let residual = labels.iter().filter(|&&l| l == CellLabel::Residual).count() as f64 * vol;
    let (a1, b1) = gc.bx.interval(0);
    Ok(CollarDecomposition {
        eps,
        selected,
        labels,
        residual_measure: residual,
        buffer_measure: buffer_total,
        omitted_measure: omitted_total,
        box_first_side: (b1 - a1).to_f64(),
    })
}

impl CollarDecomposition {
    /// Defect of the exact partition identity H(ℛ)+H(ℬ)+H(𝒪) = vol(I).
    pub fn partition_defect(&self, box_volume: f64) -> f64 {
        (self.residual_measure + self.buffer_measure + self.omitted_measure - box_volume).abs()
    }

    /// ASCII cell-label dump for n = 2, rows printed top to bottom.
    pub fn grid_dump(&self, gc: &GridComplex) -> Result<String> {
        if gc.dim() != 2 {
            return Err(Error::Invalid("grid dump is for n = 2 only".into()));
        }
        let mut out = String::new();
        for row in (0..gc.cdims[1] as i64).rev() {
            for col in 0..gc.cdims[0] as i64 {
                let c = gc.cell_id(0, &[col, row]);
                out.push(match self.labels[c as usize] {
                    CellLabel::Residual => 'R',
                    CellLabel::Buffer => 'B',
                    CellLabel::Omitted => 'O',
                });
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// A nonnegative density per cell, the candidate admissible metric.
#[derive(Clone, Debug)]
pub struct DensityField {
    pub values: Vec<f64>,
    cell_volume: f64,
}

impl DensityField {
    pub fn new(values: Vec<f64>, cell_volume: f64) -> DensityField {
        assert!(values.iter().all(|v| v.is_finite() && *v >= 0.0));
        DensityField { values, cell_volume }
    }

    pub fn constant(gc: &GridComplex, value: f64) -> DensityField {
        DensityField::new(vec![value; gc.cell_count()], gc.cell_volume())
    }

    /// `∫ ρ^p dμ = Σ value^p · cell volume`.
    pub fn mass(&self, p: f64) -> f64 {
        self.values.iter().map(|v| v.powf(p)).sum::<f64>() * self.cell_volume
    }

    pub fn scaled(&self, factor: f64) -> DensityField {
        DensityField::new(self.values.iter().map(|v| v * factor).collect(), self.cell_volume)
    }
}

/// The indicator density ρ^ε: `1/(b₁−a₁)` on residual and buffer cells, 0 on
/// omitted cells.
pub fn rho_eps(gc: &GridComplex, decomp: &CollarDecomposition) -> DensityField {
    let v = 1.0 / decomp.box_first_side;
    let values = decomp
        .labels
        .iter()
        .map(|&l| if l == CellLabel::Omitted { 0.0 } else { v })
        .collect();
    DensityField::new(values, gc.cell_volume())
}

/// Minimum weighted length of a cell path connecting the two `axis` faces
/// (or the two layer columns of a sub-box), with half-cell entry/exit stubs.
/// With this convention the straight path across the unit box has ∫ρ ds
/// exactly 1 for ρ ≡ 1. Returns the minimizing cell path as witness.
pub fn weighted_face_min(
    gc: &GridComplex,
    rho: &DensityField,
    axis: usize,
    col_range: Option<(i64, i64)>,
) -> (f64, Vec<u32>) {
    let cg = gc.cell_graph(true);
    let hf = gc.h.to_f64() / 2.0;
    let (lo_layer, hi_layer) = match col_range {
        None => (0, gc.cdims[axis] as i64 - 1),
        Some((lo, hi)) => (lo, hi),
    };
    let mut sources = Vec::new();
    let mut targets = Vec::new();
    for copy in 0..gc.copies {
        for c in gc.face_layer_cells(axis, lo_layer, copy) {
            sources.push((c, hf * rho.values[c as usize]));
        }
        targets.extend(gc.face_layer_cells(axis, hi_layer, copy));
    }
    let in_range = |c: u32| match col_range {
        None => true,
        Some((lo, hi)) => {
            let (_, idx) = gc.cell_indices(c);
            idx[axis] >= lo && idx[axis] <= hi
        }
    };
    let res = cg.graph.dijkstra_by(&sources, &SearchOpts::default(), |u, v, l| {
        if !in_range(v) {
            return f64::INFINITY;
        }
        l * 0.5 * (rho.values[u as usize] + rho.values[v as usize])
    });
    let mut best = f64::INFINITY;
    let mut best_cell = None;
    for &t in &targets {
        let total = res.dist[t as usize] + hf * rho.values[t as usize];
        if total < best {
            best = total;
            best_cell = Some(t);
        }
    }
    match best_cell {
        Some(t) if best.is_finite() => (best, extract_path(&res.parent, t)),
        _ => (f64::INFINITY, Vec::new()),
    }
}

/// Result of the exhaustive weighted-shortest-path admissibility check.
pub struct AdmissibilityReport {
    pub min_weighted_length: f64,
    /// Minimizing cell path.
    pub witness: Vec<u32>,
    /// δ(h) = 2h·κ_n/(b₁−a₁): a grid path can undercut a continuum buffer
    /// crossing by at most one stencil step per crossing.
    pub delta_h: f64,
    pub admissible: bool,
}

/// Exact minimum of ∫γ ρ ds over left-to-right cell paths in the torn
/// complex; admissible iff the minimum is at least `1 − δ(h) − tol`.
pub fn admissibility_min(gc: &GridComplex, rho: &DensityField, tol: f64) -> AdmissibilityReport {
    let (min, witness) = weighted_face_min(gc, rho, 0, None);
    let delta_h =
        2.0 * gc.h.to_f64() * crate::grid::stencil_distortion(gc.dim()) / gc.bx.side(0).to_f64();
    AdmissibilityReport {
        min_weighted_length: min,
        witness,
        delta_h,
        admissible: min >= 1.0 - delta_h - tol,
    }
}

/// Buffer mass identity `H(ℬ^ε) = (1 − (1−2ε)^{n−1}) · H(⋃ s^ε)` and the
/// resulting bound by the same factor times the box volume.
pub struct BufferBound {
    pub buffer_measure: f64,
    pub collar_measure: f64,
    pub factor: f64,
    pub bound: f64,
    pub identity_defect: f64,
}

pub fn buffer_bound(gc: &GridComplex, decomp: &CollarDecomposition) -> BufferBound {
    let n = gc.dim();
    let epsf = decomp.eps.to_f64();
    let factor = 1.0 - (1.0 - 2.0 * epsf).powi(n as i32 - 1);
    let collar = decomp.buffer_measure + decomp.omitted_measure;
    BufferBound {
        buffer_measure: decomp.buffer_measure,
        collar_measure: collar,
        factor,
        bound: factor * gc.bx.volume(),
        identity_defect: (decomp.buffer_measure - factor * collar).abs(),
    }
}

/// Surgery case applied to one selected slit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurgeryCase {
    /// γ misses the omitted region: unchanged.
    Untouched,
    /// γ meets O before the collar's right face: the collar portion is
    /// replaced by the top interval.
    Rerouted,
    /// γ meets the right face first: its dips into O are deleted.
    Trimmed,
}

/// Outcome of applying the curve surgery through the first `upto` collars.
pub struct SurgeryOutcome {
    pub cases: Vec<(usize, SurgeryCase)>,
    /// ρ_i-length of the original path.
    pub len_before: f64,
    /// ρ_i-length of the surgered set (pieces plus attached top intervals).
    pub len_after: f64,
    /// Whether the surgered set still covers every cell column.
    pub full_projection: bool,
}

/// Three-case curve surgery for the first `upto` selected slits. Checks both
/// surgery lemmas cell-exactly: the ρ_i-length does not increase, and the
/// first-coordinate projection of the result covers every column.
pub fn curve_surgery(
    gc: &GridComplex,
    decomp: &CollarDecomposition,
    path: &[u32],
    upto: usize,
) -> Result<SurgeryOutcome> {
    if upto > decomp.selected.len() {
        return Err(Error::Invalid("surgery rank exceeds selected collars".into()));
    }
    if path.is_empty() {
        return Err(Error::NotInFamily("empty path".into()));
    }
    let cg = gc.cell_graph(true);
    let edge_len = |a: u32, b: u32| cg.graph.neighbors(a).find(|&(u, _)| u == b).map(|(_, l)| l);
    // the path must avoid slit interiors, i.e. exist in the torn cell graph
    for w in path.windows(2) {
        if edge_len(w[0], w[1]).is_none() {
            return Err(Error::NotInFamily(
                "consecutive cells not adjacent in the torn complex".into(),
            ));
        }
    }
    let n = gc.dim();
    let hf = gc.h.to_f64();
    let inv_b1 = 1.0 / decomp.box_first_side;
    let active: Vec<&SelectedCollar> = decomp.selected[..upto].iter().collect();
    let cell_in = |c: u32, lo: &[Dyadic], hi: &[Dyadic]| {
        let (_, idx) = gc.cell_indices(c);
        (0..n).all(|d| {
            let clo = gc.bx.interval(d).0 + Dyadic::from_int(idx[d]) * gc.h;
            lo[d] <= clo && clo + gc.h <= hi[d]
        })
    };
    let rho_i = |c: u32| {
        if active.iter().any(|sc| cell_in(c, &sc.omitted.0, &sc.omitted.1)) {
            0.0
        } else {
            inv_b1
        }
    };
    // ρ_i-length of a contiguous index range of the path; stubs only at the
    // global endpoints
    let range_len = |from: usize, to: usize| {
        let mut total = 0.0;
        if from == 0 {
            total += hf / 2.0 * rho_i(path[0]);
        }
        if to == path.len() {
            total += hf / 2.0 * rho_i(path[to - 1]);
        }
        for j in from..to.saturating_sub(1) {
            let l = edge_len(path[j], path[j + 1]).unwrap();
            total += l * 0.5 * (rho_i(path[j]) + rho_i(path[j + 1]));
        }
        total
    };
    let len_before = range_len(0, path.len());

    let mut cases = Vec::with_capacity(upto);
    let mut removed = vec![false; path.len()];
    let mut tops: Vec<&SelectedCollar> = Vec::new();
    for sc in &active {
        let first_o = path.iter().position(|&c| cell_in(c, &sc.omitted.0, &sc.omitted.1));
        // a cell "meets the right face" when its closure intersects the
        // rectangle {offset+εl} × cross-section
        let face_x = sc.collar.1[0];
        let first_r = path.iter().position(|&c| {
            let (_, idx) = gc.cell_indices(c);
            let clo = gc.bx.interval(0).0 + Dyadic::from_int(idx[0]) * gc.h;
            if !(clo <= face_x && face_x <= clo + gc.h) {
                return false;
            }
            (1..n).all(|d| {
                let lo = gc.bx.interval(d).0 + Dyadic::from_int(idx[d]) * gc.h;
                lo <= sc.collar.1[d] && sc.collar.0[d] <= lo + gc.h
            })
        });
        // ties go to the reroute case: a cell can touch the right face and
        // lie in O at once, and only the reroute keeps the projection full
        let case = match (first_o, first_r) {
            (None, _) => SurgeryCase::Untouched,
            (Some(o), Some(r)) if r < o => SurgeryCase::Trimmed,
            (Some(_), _) => SurgeryCase::Rerouted,
        };
        cases.push((sc.slit_index, case));
        match case {
            SurgeryCase::Untouched => {}
            SurgeryCase::Rerouted => {
                for (j, &c) in path.iter().enumerate() {
                    if cell_in(c, &sc.collar.0, &sc.collar.1) {
                        removed[j] = true;
                    }
                }
                tops.push(sc);
            }
            SurgeryCase::Trimmed => {
                for (j, &c) in path.iter().enumerate() {
                    if cell_in(c, &sc.omitted.0, &sc.omitted.1) {
                        removed[j] = true;
                    }
                }
            }
        }
    }

    // surviving pieces
    let mut len_after = 0.0;
    let mut covered = vec![false; gc.cdims[0]];
    let mut j = 0;
    while j < path.len() {
        if removed[j] {
            j += 1;
            continue;
        }
        let start = j;
        while j < path.len() && !removed[j] {
            let (_, idx) = gc.cell_indices(path[j]);
            covered[idx[0] as usize] = true;
            j += 1;
        }
        len_after += range_len(start, j);
    }
    // attached top intervals: the lowest-index nonvertical face row of each
    // rerouted collar; ρ_i-length ε·l(s)/(b₁−a₁), covering its columns
    for sc in &tops {
        let width = (sc.collar.1[0] - sc.collar.0[0]).to_f64();
        len_after += width * inv_b1;
        let (a0, _) = gc.bx.interval(0);
        let c0 = (sc.collar.0[0] - a0).exact_div(gc.h).unwrap();
        let c1 = (sc.collar.1[0] - a0).exact_div(gc.h).unwrap();
        for col in c0..c1 {
            covered[col as usize] = true;
        }
    }
    Ok(SurgeryOutcome {
        cases,
        len_before,
        len_after,
        full_projection: covered.iter().all(|&c| c),
    })
}

/// Random left-right paths in the torn complex: shortest paths under random
/// positive cell weights, seeded for reproducibility.
pub fn random_admissible_paths(gc: &GridComplex, count: usize, seed: u64) -> Vec<Vec<u32>> {
    let cg = gc.cell_graph(true);
    let n_cells = gc.cell_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources = gc.face_cells(0, 0, 0);
    let targets = gc.face_cells(0, 1, 0);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let weights: Vec<f64> = (0..n_cells).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s = sources[rng.gen_range(0..sources.len())];
        let t = targets[rng.gen_range(0..targets.len())];
        let res = cg.graph.dijkstra_by(
            &[(s, 0.0)],
            &SearchOpts { cap: None, stop_at_any: Some(vec![t]) },
            |u, v, l| l * 0.5 * (weights[u as usize] + weights[v as usize]),
        );
        if s == t || res.parent[t as usize] != NO_PARENT {
            out.push(extract_path(&res.parent, t));
        }
    }
    out
}

/// `∏_{i=0}^{k} (1 − ε r_iⁿ)`, the residual-measure product bound. ε must be
/// a power of 1/2 so that collars align with the dyadic induction.
pub fn residual_product(r: &[f64], eps: Dyadic, n: usize, k: usize) -> Result<f64> {
    if eps.numerator() != 1 || eps.exponent() == 0 {
        return Err(Error::EpsilonNotPowerOfHalf(eps.to_f64()));
    }
    if r.len() <= k {
        return Err(Error::Invalid("need k+1 ratio entries".into()));
    }
    let epsf = eps.to_f64();
    Ok(r[..=k].iter().map(|ri| 1.0 - epsf * ri.powi(n as i32)).product())
}

/// One row of the divergence evidence table.
#[derive(Clone, Debug)]
pub struct DivergenceRow {
    pub k: usize,
    pub partial_sum: f64,
    pub product: f64,
}

/// Partial sums Σ r_iⁿ against products ∏(1 − ε r_iⁿ): the product tends to
/// zero iff the sum diverges. `r` is extended by its last entry if short.
pub fn divergence_report(r: &[f64], eps: f64, n: usize, k_max: usize) -> Vec<DivergenceRow> {
    let mut sum = 0.0;
    let mut prod = 1.0;
    let mut rows = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let ri = r[k.min(r.len() - 1)];
        sum += ri.powi(n as i32);
        prod *= 1.0 - eps * ri.powi(n as i32);
        rows.push(DivergenceRow { k, partial_sum: sum, product: prod });
    }
    rows
}

/// CSV sweep over ε values: measures, mass, and the admissibility minimum.
pub fn collar_sweep_csv(
    gc: &GridComplex,
    seq: &SlitSequence,
    eps_list: &[Dyadic],
    p: f64,
    strategy: SelectStrategy,
) -> Result<String> {
    let mut out = String::from("eps,selected,H_R,H_B,H_O,mass_p,min_admissible_length\n");
    for &eps in eps_list {
        let idx = select_collars(seq, eps, strategy)?;
        let dec = decompose(gc, seq, &idx, eps)?;
        let rho = rho_eps(gc, &dec);
        let adm = admissibility_min(gc, &rho, 0.0);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            eps,
            idx.len(),
            dec.residual_measure,
            dec.buffer_measure,
            dec.omitted_measure,
            rho.mass(p),
            adm.min_weighted_length
        );
    }
    Ok(out)
}
