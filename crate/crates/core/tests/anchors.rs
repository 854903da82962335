mod common;

use rayon::prelude::*;
use set2seq::datagen::{gen_tsp, held_karp, tour_length, TspConfig};
use set2seq::metrics::mean_std;
use set2seq::{Permutation, SeededRng};

fn n10(count: usize) -> Vec<set2seq::datagen::Instance> {
    gen_tsp(&TspConfig { n_range: [10, 10], count, targets: false, seed: 4, ..Default::default() }).unwrap()
}

#[test]
fn held_karp_anchor_closed_tours() {
    let data = n10(5_000);
    let lens: Vec<f64> = data.par_iter().map(|i| held_karp(&i.elements, true).unwrap().1).collect();
    let mean = mean_std(&lens).0;
    assert!((mean - 2.97).abs() <= 0.15, "{mean}");
}

#[test]
#[ignore = "paper's Random row (4.48 at n=10) is inconsistent with closed tours, which give about 5.22; open tours give about 4.70"]
fn random_anchor_closed_tours() {
    let data = n10(50_000);
    let lens: Vec<f64> = data
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let perm = Permutation::new(SeededRng::derive(5, i as u64).permutation(10)).unwrap();
            tour_length(&inst.elements, &perm, true).unwrap()
        })
        .collect();
    let mean = mean_std(&lens).0;
    assert!((mean - 4.48).abs() <= 0.30, "{mean}");
}
