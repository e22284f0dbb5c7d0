use slitmod::collar::*;
use slitmod::dyadic::Dyadic;
use slitmod::grid::GridComplex;
use slitmod::slits::dyadic_slits;

#[test]
fn precheck_admissibility_fine() {
    let d = |n: i64, e: u32| Dyadic::new(n, e);
    for (k, eps_exp) in [(3u32, 2u32), (3, 3), (2, 3)] {
        let r = vec![d(1, 1); (k + 1) as usize];
        let mut seq = dyadic_slits(&r, 2, k).unwrap();
        seq.validate();
        let h = Dyadic::pow2(7);
        let gc = GridComplex::build_slit_complex(&seq, seq.len(), h).unwrap();
        let eps = Dyadic::pow2(eps_exp);
        let idx = select_collars(&seq, eps, SelectStrategy::Largest).unwrap();
        let dec = decompose(&gc, &seq, &idx, eps).unwrap();
        let rho = rho_eps(&gc, &dec);
        let rep = admissibility_min(&gc, &rho, 0.0);
        println!(
            "k={k} eps=1/2^{eps_exp}: min={:.6} 1-delta={:.6} admissible={} selected={}",
            rep.min_weighted_length,
            1.0 - rep.delta_h,
            rep.admissible,
            idx.len()
        );
        assert!(rep.admissible);
    }
}
