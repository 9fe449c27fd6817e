use proptest::prelude::*;
use rand::Rng;
use s2st_core::nn::*;
use s2st_tensor::{Graph, ParamStore, Tensor};

fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut r = s2st_tensor::rng::stream(seed, "test.nn", 0, 0);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn store(seed: u64, f: impl FnOnce(&mut Init<'_, f64>)) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    f(&mut Init { store: &mut p, seed });
    p
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Reference cell: `W` is `[in+h, 4h]` in gate order i, f, g, o.
fn lstm_oracle(w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hid = h.len();
    let xh: Vec<f64> = x.iter().chain(h).copied().collect();
    let pre: Vec<f64> =
        (0..4 * hid).map(|j| b.data()[j] + xh.iter().enumerate().map(|(i, v)| v * w.data()[i * 4 * hid + j]).sum::<f64>()).collect();
    let mut h2 = vec![0.0; hid];
    let mut c2 = vec![0.0; hid];
    for k in 0..hid {
        let (i, f, g, o) = (sigmoid(pre[k]), sigmoid(pre[hid + k]), pre[2 * hid + k].tanh(), sigmoid(pre[3 * hid + k]));
        c2[k] = f * c[k] + i * g;
        h2[k] = o * c2[k].tanh();
    }
    (h2, c2)
}

#[test]
fn lstm_step_matches_reference_cell_and_inference_zoneout_mixes_states() {
    let (input, hidden, batch) = (3, 4, 2);
    let p = store(5, |i| i.lstm("cell", input, hidden).unwrap());
    let (x, h, c) = (random(batch, input, 1), random(batch, hidden, 2), random(batch, hidden, 3));
    let pass = Pass::infer();
    let run = |z: f64| {
        let mut g = Graph::<f64>::new();
        let lp = LstmParams::load(&mut g, &p, "cell").unwrap();
        let (xv, hv, cv) = (g.constant(x.clone()), g.constant(h.clone()), g.constant(c.clone()));
        let (h2, c2) = lstm_step(&mut g, &lp, xv, hv, cv, z, &pass).unwrap();
        (g.value(h2).clone(), g.value(c2).clone())
    };
    let (hn, cn) = run(0.0);
    for b in 0..batch {
        let (ho, co) = lstm_oracle(p.get("cell.W").unwrap(), p.get("cell.b").unwrap(), x.row(b), h.row(b), c.row(b));
        for k in 0..hidden {
            assert!((hn.row(b)[k] - ho[k]).abs() < 1e-12 && (cn.row(b)[k] - co[k]).abs() < 1e-12);
        }
    }
    let z = 0.3;
    let (hz, cz) = run(z);
    for (mixed, old, new) in [(&hz, &h, &hn), (&cz, &c, &cn)] {
        for ((m, o), n) in mixed.data().iter().zip(old.data()).zip(new.data()) {
            assert!((m - (z * o + (1.0 - z) * n)).abs() < 1e-12);
        }
    }
    let mut g = Graph::<f64>::new();
    let lp = LstmParams::load(&mut g, &p, "cell").unwrap();
    let (xv, hv, cv) = (g.constant(x.clone()), g.constant(h.clone()), g.constant(c.clone()));
    assert!(lstm_step(&mut g, &lp, xv, hv, cv, 1.5, &pass).is_err());
}

#[test]
fn training_zoneout_keeps_each_unit_either_old_or_new() {
    let p = store(6, |i| i.lstm("cell", 2, 8).unwrap());
    let (x, h, c) = (random(3, 2, 4), random(3, 8, 5), random(3, 8, 6));
    let step = |z: f64, pass: &Pass| {
        let mut g = Graph::<f64>::new();
        let lp = LstmParams::load(&mut g, &p, "cell").unwrap();
        let (xv, hv, cv) = (g.constant(x.clone()), g.constant(h.clone()), g.constant(c.clone()));
        let (h2, _) = lstm_step(&mut g, &lp, xv, hv, cv, z, pass).unwrap();
        g.value(h2).clone()
    };
    let fresh = step(0.0, &Pass::infer());
    let zoned = step(0.5, &Pass::train(1, 0));
    let (mut kept, mut updated) = (0, 0);
    for ((z, o), n) in zoned.data().iter().zip(h.data()).zip(fresh.data()) {
        if z == o {
            kept += 1;
        } else {
            assert_eq!(z, n);
            updated += 1;
        }
    }
    assert!(kept > 0 && updated > 0, "kept {kept}, updated {updated}");
    assert_eq!(zoned, step(0.5, &Pass::train(1, 0)));
}

proptest! {
    #[test]
    fn reversing_input_and_swapping_directions_mirrors_blstm_output(
        lengths in proptest::collection::vec(1usize..6, 1..4),
        seed in 0u64..1000,
    ) {
        let (input, hidden) = (2, 3);
        let seq = *lengths.iter().max().unwrap();
        let batch = lengths.len();
        let p = store(seed, |i| {
            i.lstm("a", input, hidden).unwrap();
            i.lstm("b", input, hidden).unwrap();
        });
        let x = random(seq * batch, input, seed + 1);
        let rev = reverse_index(&lengths, seq);
        let run = |xs: Tensor<f64>, first: &str, second: &str| {
            let mut g = Graph::<f64>::new();
            let f = LstmParams::load(&mut g, &p, first).unwrap();
            let b = LstmParams::load(&mut g, &p, second).unwrap();
            let xv = g.constant(xs);
            let y = blstm_layer(&mut g, xv, &lengths, &f, &b, 0.0, &Pass::infer()).unwrap();
            g.value(y).clone()
        };
        let y = run(x.clone(), "a", "b");
        let xr = Tensor::new(x.shape().to_vec(), rev.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap();
        let yr = run(xr, "b", "a");
        for (j, &len) in lengths.iter().enumerate() {
            for t in 0..len {
                let a = y.row(t * batch + j);
                let m = yr.row((len - 1 - t) * batch + j);
                for k in 0..hidden {
                    prop_assert!((a[k] - m[hidden + k]).abs() < 1e-12);
                    prop_assert!((a[hidden + k] - m[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_weights_are_a_distribution_per_head(
        lengths in proptest::collection::vec(1usize..7, 1..4),
        heads in prop::sample::select(vec![1usize, 2, 4]),
        seed in 0u64..1000,
    ) {
        let (d, q) = (8, 5);
        let seq = *lengths.iter().max().unwrap();
        let batch = lengths.len();
        let p = store(seed, |i| i.multihead_attention("att", q, d).unwrap());
        let mut g = Graph::<f64>::new();
        let m = g.constant(random(batch * seq, d, seed + 1).map(|v| 3.0 * v));
        let query = g.constant(random(batch, q, seed + 2));
        let mem = multihead_memory(&mut g, &p, "att", m, &lengths, heads).unwrap();
        let out = attend(&mut g, &p, &mem, query, 0.1, &Pass::infer()).unwrap();
        prop_assert_eq!(g.shape(out.context), &[batch, d][..]);
        let w = g.value(out.weights);
        prop_assert_eq!(w.shape(), &[batch * heads, seq][..]);
        for (j, &len) in lengths.iter().enumerate() {
            for h in 0..heads {
                let row = w.row(j * heads + h);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row[len..].iter().all(|&v| v < 1e-300));
            }
        }
    }

    #[test]
    fn layout_permutations_are_inverse(batch in 1usize..5, seq in 1usize..7) {
        let bm = to_batch_major(batch, seq);
        let tm = to_time_major(batch, seq);
        for i in 0..batch * seq {
            prop_assert_eq!(bm[tm[i]], i);
            prop_assert_eq!(tm[bm[i]], i);
        }
    }

    #[test]
    fn reverse_index_is_an_involution(lengths in proptest::collection::vec(1usize..6, 1..4)) {
        let seq = *lengths.iter().max().unwrap();
        let r = reverse_index(&lengths, seq);
        prop_assert!((0..r.len()).all(|i| r[r[i]] == i));
    }
}
