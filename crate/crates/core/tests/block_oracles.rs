// Reference loops index by position on purpose.
#![allow(clippy::needless_range_loop)]

use coae::blocks::{
    non_local_cross, query_embedding, squeeze_co_excitation, NonLocalParams, SceInput, SceParams,
};
use coae::nn::BoundParams;
use coae::rng::XorShift64Star;
use coae::{ParamStore, Tape, Tensor};
use proptest::prelude::*;

fn random(shape: &[usize], rng: &mut XorShift64Star) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

fn randomize(store: &mut ParamStore, rng: &mut XorShift64Star) {
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        for v in store.get_mut(&n).unwrap().data_mut() {
            *v = rng.uniform(-0.6, 0.6);
        }
    }
}

/// `W·v + b` for a row-major `rows×cols` matrix.
fn affine(w: &Tensor, b: &Tensor, v: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..rows)
        .map(|r| b.data()[r] + (0..cols).map(|c| w.at(&[r, c]) * v[c]).sum::<f64>())
        .collect()
}

fn column(map: &Tensor, pos: usize) -> Vec<f64> {
    let (n, l) = (map.shape()[0], map.shape()[1] * map.shape()[2]);
    (0..n).map(|c| map.data()[c * l + pos]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn non_local_matches_positionwise_loops(seed in any::<u64>()) {
        let mut rng = XorShift64Star::new(seed);
        let mut store = ParamStore::new();
        NonLocalParams::init(&mut store, "nl", 4, seed).unwrap();
        randomize(&mut store, &mut rng);
        let x = random(&[4, 3, 3], &mut rng);
        let r = random(&[4, 2, 2], &mut rng);

        let mut tape = Tape::new();
        let b = BoundParams::bind(&mut tape, &store, false).unwrap();
        let p = NonLocalParams::from_bound(&b, "nl").unwrap();
        let (xv, rv) = (tape.constant(x.clone()).unwrap(), tape.constant(r.clone()).unwrap());
        let out = non_local_cross(&mut tape, xv, rv, &p).unwrap();
        let psi = tape.value(out.psi).clone();
        let att = tape.value(out.attention).clone();

        let g = |n: &str| store.get(&format!("nl.{n}")).unwrap();
        for i in 0..9 {
            let theta = affine(g("theta.weight"), g("theta.bias"), &column(&x, i));
            let logits: Vec<f64> = (0..4)
                .map(|j| {
                    let phi = affine(g("phi.weight"), g("phi.bias"), &column(&r, j));
                    theta.iter().zip(&phi).map(|(a, b)| a * b).sum()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
            let mut y = [0.0; 2];
            let mut row_sum = 0.0;
            for j in 0..4 {
                let a = (logits[j] - m).exp() / z;
                prop_assert!((att.at(&[i, j]) - a).abs() < 1e-10);
                row_sum += att.at(&[i, j]);
                let gj = affine(g("g.weight"), g("g.bias"), &column(&r, j));
                for c in 0..2 {
                    y[c] += a * gj[c];
                }
            }
            prop_assert!((row_sum - 1.0).abs() < 1e-9);
            let o = affine(g("out.weight"), g("out.bias"), &y);
            for c in 0..4 {
                prop_assert!((psi.data()[c * 9 + i] - o[c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gap_commutes_with_channel_weights(
        seed in any::<u64>(),
        n in 1usize..12,
        h in 1usize..7,
        w in 1usize..7,
    ) {
        let mut rng = XorShift64Star::new(seed);
        let f = random(&[n, h, w], &mut rng);
        let weights = Tensor::from_fn(&[n], |_| rng.next_f64());
        let mut tape = Tape::new();
        let fv = tape.constant(f).unwrap();
        let wv = tape.constant(weights.clone()).unwrap();
        let scaled = tape.channel_mul(fv, wv).unwrap();
        let lhs = tape.global_avg_pool(scaled).unwrap();
        let gap = tape.global_avg_pool(fv).unwrap();
        let rhs = tape.mul(wv, gap).unwrap();
        let d = tape.value(lhs).max_abs_diff(tape.value(rhs));
        prop_assert!(d < 1e-12, "{}", d);
    }

    #[test]
    fn query_embedding_is_reweighted_gap(seed in any::<u64>(), both in any::<bool>()) {
        let mut rng = XorShift64Star::new(seed);
        let input = if both { SceInput::QueryAndTarget } else { SceInput::Query };
        let mut store = ParamStore::new();
        SceParams::init(&mut store, "sce", 8, 2, input, seed).unwrap();
        randomize(&mut store, &mut rng);
        let mut tape = Tape::new();
        let b = BoundParams::bind(&mut tape, &store, false).unwrap();
        let p = SceParams::from_bound(&b, "sce", input).unwrap();
        let fp = tape.constant(random(&[8, 4, 4], &mut rng)).unwrap();
        let fi = tape.constant(random(&[8, 6, 6], &mut rng)).unwrap();
        let ce = squeeze_co_excitation(&mut tape, fp, fi, &p).unwrap();
        let q = query_embedding(&mut tape, ce.fp_tilde).unwrap();
        let gap = tape.global_avg_pool(fp).unwrap();
        let want = tape.mul(ce.w, gap).unwrap();
        prop_assert!(tape.value(q).max_abs_diff(tape.value(want)) < 1e-12);
        prop_assert!(tape.value(ce.w).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn softmax_rows_are_distributions(
        seed in any::<u64>(),
        rows in 1usize..6,
        cols in 1usize..9,
        scale in 0.1..50.0f64,
    ) {
        let mut rng = XorShift64Star::new(seed);
        let x = Tensor::from_fn(&[rows, cols], |_| scale * rng.uniform(-1.0, 1.0));
        let mut tape = Tape::new();
        let v = tape.constant(x).unwrap();
        let s = tape.softmax(v, 1).unwrap();
        let s = tape.value(s);
        for r in 0..rows {
            let row: Vec<f64> = (0..cols).map(|c| s.at(&[r, c])).collect();
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }
}
