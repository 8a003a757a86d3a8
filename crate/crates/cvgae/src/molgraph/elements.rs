//! Standard atomic weights for the elements appearing in the QM9 and COD
//! profiles, plus a few common extras.

const MASSES: &[(&str, f64)] = &[
    ("H", 1.008),
    ("B", 10.81),
    ("C", 12.011),
    ("N", 14.007),
    ("O", 15.999),
    ("F", 18.998),
    ("Na", 22.990),
    ("Mg", 24.305),
    ("Al", 26.982),
    ("Si", 28.085),
    ("P", 30.974),
    ("S", 32.06),
    ("Cl", 35.45),
    ("K", 39.098),
    ("Ca", 40.078),
    ("Fe", 55.845),
    ("Zn", 65.38),
    ("Ge", 72.63),
    ("As", 74.922),
    ("Se", 78.971),
    ("Br", 79.904),
    ("Te", 127.60),
    ("I", 126.90),
];

/// Standard atomic weight in g/mol, if the element is in the built-in table.
pub fn atomic_mass(symbol: &str) -> Option<f64> {
    MASSES
        .iter()
        .find(|(s, _)| *s == symbol)
        .map(|&(_, m)| m)
}
