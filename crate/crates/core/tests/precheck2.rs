use slitmod::dyadic::Dyadic;
use slitmod::grid::GridComplex;
use slitmod::modulus::*;
use slitmod::slits::dyadic_slits;
use std::time::Instant;

#[test]
fn precheck_decisive() {
    let d = |n: i64, e: u32| Dyadic::new(n, e);
    let h = Dyadic::pow2(9);
    // W-style levels: level L tears generations 0..L-1; level 0 is untorn
    let half: Vec<Dyadic> = (0..4).map(|_| d(1, 1)).collect();
    let geom: Vec<Dyadic> = (0..4u32).map(|i| if i == 0 { d(1, 1) } else { Dyadic::pow2(i) }).collect();
    for (name, r) in [("half", half), ("geom", geom)] {
        for gens in [0u32, 3] {
            let t0 = Instant::now();
            let mut seq = dyadic_slits(&r, 2, gens).unwrap();
            seq.validate();
            let level = if gens == 0 && name == "skip" { 0 } else { seq.len() };
            let gc = GridComplex::build_slit_complex(&seq, level, h).unwrap();
            let res = discrete_modulus_with(
                &gc,
                &CurveFamilySpec::faces(0),
                2.0,
                &ModulusOptions { tol: 0.01, batch: 512, max_outer: 400, ..Default::default() },
            )
            .unwrap();
            println!(
                "{name} gens0..{gens}: lower={:.4} upper={:.4} deficit={:.4} iters={} active={} [{:.0}s]",
                res.lower, res.upper, res.terminal_deficit, res.iterations, res.active_paths,
                t0.elapsed().as_secs_f64()
            );
        }
    }
}
