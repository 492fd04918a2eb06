use super::*;
use crate::error::Error;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut Prng::new(seed)).unwrap()
}

#[test]
fn identity_times_a_is_a() {
    let tape = Tape::<f64>::inference();
    let a = rand(&[3, 3], 1);
    let out = tape
        .matmul(&tape.constant(Tensor::eye(3).unwrap()), &tape.constant(a.clone()))
        .unwrap();
    assert_eq!(out.value().data(), a.data());
}

#[test]
fn a_times_zero_is_zero() {
    let tape = Tape::<f64>::inference();
    let out = tape
        .matmul(&tape.constant(rand(&[3, 3], 2)), &tape.constant(Tensor::zeros([3, 3]).unwrap()))
        .unwrap();
    assert!(out.data().iter().all(|v| *v == 0.0));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Prng::new(7);
    let a = Tensor::<f64>::randn([3, 4], 1.0, &mut rng).unwrap();
    let b = Tensor::<f64>::randn([4, 2], 1.0, &mut rng).unwrap();
    let reference = naive_matmul(&a, &b).unwrap();
    let tape = Tape::inference();
    let out = tape.matmul(&tape.constant(a), &tape.constant(b)).unwrap();
    assert!(out.value().max_abs_diff(&reference) < 1e-12);
}

#[test]
fn batched_matmul_is_independent_per_batch() {
    let a = rand(&[2, 3, 4], 3);
    let b = rand(&[2, 4, 5], 4);
    let tape = Tape::inference();
    let out = tape.matmul(&tape.constant(a.clone()), &tape.constant(b.clone())).unwrap();
    for p in 0..2 {
        let ap = t(&[3, 4], &a.data()[p * 12..(p + 1) * 12]);
        let bp = t(&[4, 5], &b.data()[p * 20..(p + 1) * 20]);
        let r = naive_matmul(&ap, &bp).unwrap();
        let got = t(&[3, 5], &out.data()[p * 15..(p + 1) * 15]);
        assert!(got.max_abs_diff(&r) < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::<f64>::inference();
    let err = tape
        .matmul(&tape.constant(rand(&[2, 3], 1)), &tape.constant(rand(&[4, 2], 1)))
        .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_rejects_non_finite_input() {
    let tape = Tape::<f64>::inference();
    let mut a = rand(&[2, 2], 1);
    a.data_mut()[0] = f64::NAN;
    let err = tape.matmul(&tape.constant(a), &tape.constant(rand(&[2, 2], 2))).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }));
}

#[test]
fn masked_softmax_uniform_row() {
    let tape = Tape::<f64>::inference();
    let out = tape
        .masked_softmax(&tape.constant(Tensor::zeros([2, 5]).unwrap()), &Tensor::full([2, 5], 1.0).unwrap())
        .unwrap();
    assert!(out.data().iter().all(|v| (*v - 0.2).abs() < 1e-15));
}

#[test]
fn masked_softmax_fully_masked_row_is_zero() {
    let tape = Tape::<f64>::inference();
    let mask = t(&[2, 3], &[0.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    let out = tape.masked_softmax(&tape.constant(rand(&[2, 3], 5)), &mask).unwrap();
    assert_eq!(&out.data()[..3], &[0.0, 0.0, 0.0]);
    assert_eq!(out.data()[4], 0.0);
    assert!((out.data()[3] + out.data()[5] - 1.0).abs() < 1e-12);
}

#[test]
fn masked_softmax_two_logits_closed_form() {
    let tape = Tape::<f64>::inference();
    let out = tape
        .masked_softmax(&tape.constant(t(&[1, 2], &[1.0, 2.0])), &t(&[1, 2], &[1.0, 1.0]))
        .unwrap();
    // 1 / (1 + e) and e / (1 + e)
    assert!((out.data()[0] - 0.26894).abs() < 1e-5);
    assert!((out.data()[1] - 0.73106).abs() < 1e-5);
}

#[test]
fn masked_softmax_rejects_non_binary_mask() {
    let tape = Tape::<f64>::inference();
    let err = tape
        .masked_softmax(&tape.constant(rand(&[1, 2], 1)), &t(&[1, 2], &[0.5, 1.0]))
        .unwrap_err();
    assert!(matches!(err, Error::NonBinaryMask(_)));
    let err = tape
        .masked_softmax(&tape.constant(rand(&[1, 2], 1)), &t(&[2, 1], &[1.0, 1.0]))
        .unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
}

#[test]
fn masked_softmax_saturated_logits_are_stable() {
    let tape = Tape::<f64>::inference();
    let out = tape
        .masked_softmax(&tape.constant(t(&[1, 3], &[1000.0, 999.0, -1000.0])), &Tensor::full([1, 3], 1.0).unwrap())
        .unwrap();
    out.value().check_finite("saturated").unwrap();
    assert!((out.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn cross_entropy_uniform_is_ln_v() {
    let tape = Tape::<f64>::inference();
    let loss = tape
        .cross_entropy(&tape.constant(Tensor::zeros([3, 4]).unwrap()), &[0, 1, 3], &[1, 1, 1])
        .unwrap();
    assert!((loss.data()[0] - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_saturated_target() {
    let tape = Tape::<f64>::inference();
    let mut logits = Tensor::zeros([2, 4]).unwrap();
    logits.data_mut()[2] = 30.0;
    logits.data_mut()[4 + 1] = 30.0;
    let loss = tape.cross_entropy(&tape.constant(logits), &[2, 1], &[1, 1]).unwrap();
    assert!(loss.data()[0] < 1e-9);
}

#[test]
fn cross_entropy_matches_log_sum_exp_reference() {
    let logits = rand(&[5, 8], 11);
    let targets = [3, 0, 7, 7, 2];
    let mask = [1, 0, 1, 1, 1];
    // direct reference: -log softmax(target) averaged over scored rows
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..5 {
        if mask[i] == 0 {
            continue;
        }
        let row = logits.row(i);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        total += lse - row[targets[i]];
        count += 1.0;
    }
    let tape = Tape::inference();
    let loss = tape.cross_entropy(&tape.constant(logits), &targets, &mask).unwrap();
    assert!((loss.data()[0] - total / count).abs() < 1e-12);
}

#[test]
fn cross_entropy_errors() {
    let tape = Tape::<f64>::inference();
    let l = tape.constant(Tensor::zeros([2, 3]).unwrap());
    assert!(matches!(tape.cross_entropy(&l, &[0, 1], &[0, 0]), Err(Error::DegenerateBatch)));
    assert!(matches!(tape.cross_entropy(&l, &[0, 3], &[1, 1]), Err(Error::Index { .. })));
}

#[test]
fn backward_of_sum_is_ones() {
    let tape = Tape::new();
    let a = tape.leaf(&rand(&[2, 3], 1).with_grad());
    let loss = tape.sum(&a);
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.wrt(&a).data(), &[1.0; 6]);
}

#[test]
fn backward_of_sum_of_product_by_hand() {
    // d/dA sum(A·B) at B = [[1,2],[3,4]]: every row is [1+2, 3+4].
    let tape = Tape::new();
    let a = tape.leaf(&t(&[2, 2], &[0.5, -1.0, 2.0, 0.0]).with_grad());
    let b = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let prod = tape.matmul(&a, &b).unwrap();
    let loss = tape.sum(&prod);
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.wrt(&a).data(), &[3.0, 7.0, 3.0, 7.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape = Tape::new();
    let a = tape.leaf(&rand(&[2, 2], 1).with_grad());
    assert!(matches!(tape.backward(&a), Err(Error::NonScalarLoss(_))));
}

#[test]
fn unreachable_leaf_gets_zero_grad() {
    let tape = Tape::new();
    let a = tape.leaf(&rand(&[2, 2], 1).with_grad());
    let b = tape.leaf(&rand(&[2, 2], 2).with_grad());
    let loss = tape.sum(&a);
    let g = tape.backward(&loss).unwrap();
    assert!(g.get(&b).is_none());
    assert_eq!(g.wrt(&b).data(), &[0.0; 4]);
}

#[test]
fn grad_check_identity_is_exact() {
    let x = Tensor::zeros([4]).unwrap();
    let err = grad_check(|tape, x| Ok(tape.sum(x)), &x, 1e-5).unwrap();
    assert_eq!(err, 0.0);
    let x = t(&[1], &[0.25]);
    let err = grad_check(|_, x| Ok(x.clone()), &x, 1.0 / 1024.0).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_masked_softmax_of_matmul() {
    let mut rng = Prng::new(3);
    let x = Tensor::<f64>::randn([4, 4], 1.0, &mut rng).unwrap();
    let w = Tensor::<f64>::randn([4, 4], 1.0, &mut rng).unwrap();
    let mask = Tensor::from_fn([4, 4], |i| if (i / 4) >= (i % 4) { 1.0 } else { 0.0 }).unwrap();
    let err = grad_check_projected(
        |tape, x| {
            let s = tape.matmul(x, &tape.constant(w.clone()))?;
            tape.masked_softmax(&s, &mask)
        },
        &x,
        1e-5,
        3,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn grad_check_reports_non_finite() {
    let x = t(&[1], &[800.0]);
    let e = grad_check(
        |tape, x| {
            let y = tape.affine(x, 1.0, 0.0);
            let big = tape.constant(Tensor::scalar(f64::MAX));
            let z = tape.mul(&y, &big)?;
            Ok(tape.sum(&z))
        },
        &x,
        1e-5,
    )
    .unwrap_err();
    assert!(matches!(e, Error::NonFinite { .. }));
}

/// Every differentiable primitive on five random shapes.
#[test]
fn primitives_pass_grad_check_on_random_shapes() {
    let shapes = [(1, 1), (2, 3), (4, 2), (3, 5), (6, 4)];
    for (si, &(m, n)) in shapes.iter().enumerate() {
        let seed = 100 + si as u64;
        let mut rng = Prng::new(seed);
        let x = Tensor::<f64>::randn([m, n], 1.0, &mut rng).unwrap();
        let other = Tensor::<f64>::randn([m, n], 1.0, &mut rng).unwrap();
        let right = Tensor::<f64>::randn([n, 3], 1.0, &mut rng).unwrap();
        let left = Tensor::<f64>::randn([2, m], 1.0, &mut rng).unwrap();
        let nt = Tensor::<f64>::randn([5, n], 1.0, &mut rng).unwrap();
        let bias = Tensor::<f64>::randn([n], 1.0, &mut rng).unwrap();
        let rows = Tensor::<f64>::randn([m, 1], 1.0, &mut rng).unwrap();
        let gain = Tensor::<f64>::rand_uniform([n], 0.5, 1.5, &mut rng).unwrap();
        let mask = Tensor::<f64>::from_fn([m, n], |i| if (i * 7 + si) % 3 == 0 { 0.0 } else { 1.0 }).unwrap();
        let targets: Vec<usize> = (0..m).map(|i| (i * 5 + si) % n).collect();
        let lmask: Vec<u8> = (0..m).map(|i| if i % 3 == 2 { 0 } else { 1 }).collect();
        let ids: Vec<usize> = (0..4).map(|i| (i * 3 + si) % m).collect();

        type F = Box<dyn Fn(&Tape<f64>, &Var<f64>) -> crate::Result<Var<f64>>>;
        let (o, r, l, nt2, b, rw, g, mk, tg, lm, id) = (
            other.clone(), right.clone(), left.clone(), nt.clone(), bias.clone(), rows.clone(),
            gain.clone(), mask.clone(), targets.clone(), lmask.clone(), ids.clone(),
        );
        let cases: Vec<(&str, F)> = vec![
            ("matmul_right", Box::new(move |tp, x| tp.matmul(x, &tp.constant(r.clone())))),
            ("matmul_left", Box::new(move |tp, x| tp.matmul(&tp.constant(l.clone()), x))),
            ("matmul_nt_a", Box::new(move |tp, x| tp.matmul_nt(x, &tp.constant(nt2.clone())))),
            ("matmul_nt_b", {
                let nt3 = nt.clone();
                Box::new(move |tp, x| tp.matmul_nt(&tp.constant(nt3.clone()), x))
            }),
            ("add", { let o = o.clone(); Box::new(move |tp, x| tp.add(x, &tp.constant(o.clone()))) }),
            ("sub", { let o = o.clone(); Box::new(move |tp, x| tp.sub(&tp.constant(o.clone()), x)) }),
            ("mul", { let o = o.clone(); Box::new(move |tp, x| tp.mul(x, &tp.constant(o.clone()))) }),
            ("mul_self", Box::new(|tp, x| tp.mul(x, x))),
            ("affine", Box::new(|tp, x| Ok(tp.affine(x, -1.5, 0.3)))),
            ("add_row", Box::new(move |tp, x| tp.add_row(x, &tp.constant(b.clone())))),
            ("scale_rows", Box::new(move |tp, x| tp.scale_rows(x, &tp.constant(rw.clone())))),
            ("scale_rows_by", {
                let base = other.clone();
                Box::new(move |tp, x| {
                    let col = tp.matmul(x, &tp.constant(Tensor::full([n, 1], 0.5).unwrap()))?;
                    tp.scale_rows(&tp.constant(base.clone()), &col)
                })
            }),
            ("sigmoid", Box::new(|tp, x| Ok(tp.sigmoid(x)))),
            ("silu", Box::new(|tp, x| Ok(tp.silu(x)))),
            ("mean", Box::new(|tp, x| Ok(tp.mean(x)))),
            ("rmsnorm_x", { let g = g.clone(); Box::new(move |tp, x| tp.rmsnorm(x, &tp.constant(g.clone()), 1e-6)) }),
            ("masked_softmax", Box::new(move |tp, x| tp.masked_softmax(x, &mk))),
            ("cross_entropy", Box::new(move |tp, x| tp.cross_entropy(x, &tg, &lm))),
            ("embed", Box::new(move |tp, x| tp.embed(&id, x))),
        ];
        for (name, f) in cases {
            let err = grad_check_projected(f, &x, 1e-5, seed).unwrap();
            assert!(err <= 1e-4, "{name} on {m}x{n}: {err}");
        }
        // gain of rmsnorm
        let xx = x.clone();
        let err = grad_check_projected(
            move |tp, g| tp.rmsnorm(&tp.constant(xx.clone()), g, 1e-6),
            &gain,
            1e-5,
            seed,
        )
        .unwrap();
        assert!(err <= 1e-4, "rmsnorm gain: {err}");
    }
}

#[test]
fn scans_pass_grad_check() {
    for (seed, (b, len, h)) in [(1u64, (1, 1, 1)), (2, (1, 5, 3)), (3, (2, 4, 2)), (4, (3, 3, 4)), (5, (2, 7, 3))] {
        let seq = Seq::new(b, len);
        let rows = b * len;
        let mut rng = Prng::new(seed);
        let a = Tensor::<f64>::rand_uniform([rows, h], 0.05, 0.95, &mut rng).unwrap();
        let u = Tensor::<f64>::randn([rows, h], 1.0, &mut rng).unwrap();
        let h0 = Tensor::<f64>::randn([h], 1.0, &mut rng).unwrap();
        let (u2, h02) = (u.clone(), h0.clone());
        let e1 = grad_check_projected(
            move |tp, a| tp.gated_scan(a, &tp.constant(u2.clone()), seq, Some(&h02)),
            &a,
            1e-5,
            seed,
        )
        .unwrap();
        let a2 = a.clone();
        let e2 = grad_check_projected(
            move |tp, u| tp.gated_scan(&tp.constant(a2.clone()), u, seq, Some(&h0)),
            &u,
            1e-5,
            seed,
        )
        .unwrap();
        assert!(e1 <= 1e-4 && e2 <= 1e-4, "gated scan {e1} {e2}");

        let q = Tensor::<f64>::randn([rows, h], 1.0, &mut rng).unwrap();
        let k = Tensor::<f64>::randn([rows, h], 1.0, &mut rng).unwrap();
        let v = Tensor::<f64>::randn([rows, h], 1.0, &mut rng).unwrap();
        let s0 = Tensor::<f64>::randn([h, h], 1.0, &mut rng).unwrap();
        for which in 0..3 {
            let (q, k, v, s0) = (q.clone(), k.clone(), v.clone(), s0.clone());
            let x = [&q, &k, &v][which].clone();
            let err = grad_check_projected(
                move |tp, x| {
                    let vars: Vec<Var<f64>> = (0..3)
                        .map(|i| if i == which { x.clone() } else { tp.constant([&q, &k, &v][i].clone()) })
                        .collect();
                    tp.linear_attention_scan(&vars[0], &vars[1], &vars[2], seq, 0.8, Some(&s0)).map(|(r, _)| r)
                },
                &x,
                1e-5,
                seed,
            )
            .unwrap();
            assert!(err <= 1e-4, "linear attention input {which}: {err}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_or_zero(seed in 0u64..10_000, m in 1usize..6, n in 1usize..9) {
        let mut rng = Prng::new(seed);
        let logits = Tensor::<f64>::randn([m, n], 3.0, &mut rng).unwrap();
        let mask = Tensor::<f64>::from_fn([m, n], |_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 }).unwrap();
        let tape = Tape::inference();
        let out = tape.masked_softmax(&tape.constant(logits), &mask).unwrap();
        for i in 0..m {
            let s: f64 = out.value().row(i).iter().sum();
            let any = mask.row(i).contains(&1.0);
            let expected = if any { 1.0 } else { 0.0 };
            prop_assert!((s - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_is_associative(seed in 0u64..10_000, m in 1usize..6, k in 1usize..6, n in 1usize..6, p in 1usize..6) {
        let mut rng = Prng::new(seed);
        let a = Tensor::<f64>::randn([m, k], 1.0, &mut rng).unwrap();
        let b = Tensor::<f64>::randn([k, n], 1.0, &mut rng).unwrap();
        let c = Tensor::<f64>::randn([n, p], 1.0, &mut rng).unwrap();
        let tape = Tape::inference();
        let (a, b, c) = (tape.constant(a), tape.constant(b), tape.constant(c));
        let left = tape.matmul(&tape.matmul(&a, &b).unwrap(), &c).unwrap();
        let right = tape.matmul(&a, &tape.matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.value().max_abs_diff(right.value()) <= 1e-9);
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut rng = Prng::new(seed);
            let a = Tensor::<f64>::randn([4, 6], 1.0, &mut rng).unwrap();
            let b = Tensor::<f64>::randn([6, 3], 1.0, &mut rng).unwrap();
            let tape = Tape::inference();
            let y = tape.matmul(&tape.constant(a), &tape.constant(b)).unwrap();
            tape.silu(&y).value().clone()
        };
        prop_assert_eq!(run(), run());
    }
}
