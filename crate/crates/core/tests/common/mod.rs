#![allow(clippy::excessive_precision)]

#![allow(dead_code)]

use std::path::PathBuf;

use musicform_core::form::{parse_form, FormSpec};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn sample_response() -> String {
    std::fs::read_to_string(fixture("sample_response.txt")).unwrap()
}

pub fn sample_form() -> FormSpec {
    parse_form(&sample_response()).unwrap()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exhaustive nearest entry of a flat `V × d` codebook, lowest index on ties.
pub fn brute_nearest(codebook: &[f64], dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, e) in codebook.chunks_exact(dim).enumerate() {
        let d = sq_dist(e, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Welch reference values computed at 50 significant digits.
pub struct WelchCase {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

pub fn expand(counts: [usize; 5]) -> Vec<f64> {
    counts
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| std::iter::repeat_n((i + 1) as f64, n))
        .collect()
}

/// Score histograms (counts of 1..5) whose summaries round to the three
/// reference table rows.
pub const OURS: [usize; 5] = [4, 5, 23, 34, 34];
pub const VANILLA: [usize; 5] = [1, 20, 29, 28, 22];
pub const POND5: [usize; 5] = [0, 1, 17, 24, 18];

pub fn welch_cases() -> Vec<WelchCase> {
    vec![
        WelchCase {
            a: expand(OURS),
            b: expand(VANILLA),
            t: 2.5767379503276881685,
            df: 197.96034111898769194,
            p: 0.010701446938856447262,
        },
        WelchCase {
            a: expand(OURS),
            b: expand(POND5),
            t: -0.62494793632638622303,
            df: 148.79472034269389445,
            p: 0.53296243145732194572,
        },
        WelchCase {
            a: vec![1.0, 2.0, 2.0, 3.0, 5.0, 4.0],
            b: vec![3.0, 3.0, 4.0, 5.0, 5.0, 5.0, 4.0, 4.0],
            t: -1.9294415982398281218,
            df: 7.3943446360425573792,
            p: 0.092781555244688882036,
        },
    ]
}
