use gradflow::problems::stability_probe;
fn main() {
    for (s, re, im) in [
        ("reversible_heun", 0.0, 0.9), ("reversible_heun", 0.0, -0.9),
        ("reversible_heun", 0.0, 0.99), ("reversible_heun", -0.5, 0.0),
        ("reversible_heun", 0.3, 0.0), ("reversible_heun", 0.5, 0.5),
        ("alf", 0.0, 0.9), ("euler", -1.0, 0.0), ("euler", -2.5, 0.0),
    ] {
        let r = stability_probe::<f64>(s, re, im, 10_000, 10.0).unwrap();
        println!("{s} z={re}+{im}i bounded={} sup={:.3e} first1e6={:?}", r.bounded, r.sup_norm, r.first_exceed_1e6);
    }
}
