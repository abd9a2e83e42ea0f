//! Hand-computed metric fixtures.

/// (predicted, gold, precision, recall, f1), worked out by hand.
pub const F1_CASES: [(&str, &str, f64, f64, f64); 20] = [
    ("a b", "b c", 0.5, 0.5, 0.5),
    ("a b c", "a b c", 1.0, 1.0, 1.0),
    ("a b", "c d", 0.0, 0.0, 0.0),
    ("", "", 1.0, 1.0, 1.0),
    ("", "a", 0.0, 0.0, 0.0),
    ("a", "", 0.0, 0.0, 0.0),
    ("a", "a b c d", 1.0, 0.25, 0.4),
    ("a b c d", "a", 0.25, 1.0, 0.4),
    ("a a", "a", 0.5, 1.0, 2.0 / 3.0),
    ("a", "a a", 1.0, 0.5, 2.0 / 3.0),
    ("a a b", "a b b", 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0),
    ("a a a", "a a", 2.0 / 3.0, 1.0, 0.8),
    ("x y z", "z y x", 1.0, 1.0, 1.0),
    ("le chat dort", "le chien dort", 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0),
    ("le le le", "le", 1.0 / 3.0, 1.0, 0.5),
    ("a b c d e", "a b", 0.4, 1.0, 4.0 / 7.0),
    ("a b", "a b c d e", 1.0, 0.4, 4.0 / 7.0),
    ("a b c", "b c d e", 2.0 / 3.0, 0.5, 4.0 / 7.0),
    ("q", "q", 1.0, 1.0, 1.0),
    ("a b a b", "b a", 0.5, 1.0, 2.0 / 3.0),
];

/// (scores, expected probabilities), from exp(s_i) / sum_j exp(s_j).
pub fn zero_shot_fixtures() -> Vec<(Vec<f64>, Vec<f64>)> {
    let e = std::f64::consts::E;
    vec![
        (vec![2f64.ln(), 0.0], vec![2.0 / 3.0, 1.0 / 3.0]),
        (vec![0.0, 0.0, 0.0], vec![1.0 / 3.0; 3]),
        (vec![5.0], vec![1.0]),
        (vec![1.0, 0.0], vec![e / (e + 1.0), 1.0 / (e + 1.0)]),
        (vec![3f64.ln(), 0.0, 0.0], vec![0.6, 0.2, 0.2]),
        (vec![0.0, 4f64.ln(), 3f64.ln(), 2f64.ln()], vec![0.1, 0.4, 0.3, 0.2]),
        (vec![-1.0, -1.0], vec![0.5, 0.5]),
        (vec![1000.0, 1000.0 + 2f64.ln()], vec![1.0 / 3.0, 2.0 / 3.0]),
        (vec![-3f64.ln(), 0.0], vec![0.25, 0.75]),
        (vec![2.0, 0.0, -2.0], {
            let z = e * e + 1.0 + 1.0 / (e * e);
            vec![e * e / z, 1.0 / z, 1.0 / (e * e * z)]
        }),
    ]
}
