use proptest::prelude::*;
use supforge_tensor::*;

#[test]
fn grad_of_sum_is_ones() {
    let tape = Tape::new();
    let x = tape.param(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
    tape.backward(x.sum()).unwrap();
    assert_eq!(x.grad().unwrap(), Tensor::ones(&[2, 3, 4]));
}

#[test]
fn non_scalar_loss_rejected() {
    let tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[3]));
    assert_eq!(tape.backward(x.relu()), Err(TensorError::NonScalarLoss(vec![3])));
}

#[test]
fn second_backward_needs_reset() {
    let tape = Tape::new();
    let x = tape.param(Tensor::ones(&[2]));
    let loss = x.mul(x).unwrap().sum();
    tape.backward(loss).unwrap();
    assert_eq!(tape.backward(loss), Err(TensorError::AlreadyBackpropagated));
    tape.reset_grads();
    assert!(x.grad().is_none());
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn unreachable_leaf_gets_zeros() {
    let tape = Tape::new();
    let x = tape.param(Tensor::ones(&[2]));
    let unused = tape.param(Tensor::ones(&[3, 3]));
    let c = tape.constant(Tensor::ones(&[2]));
    tape.backward(x.sum()).unwrap();
    assert_eq!(unused.grad().unwrap(), Tensor::zeros(&[3, 3]));
    assert!(c.grad().is_none());
}

#[test]
fn shared_subexpression_accumulates() {
    let tape = Tape::new();
    let x = tape.param(Tensor::new(&[1], vec![3.0]).unwrap());
    let y = x.scalar_mul(2.0);
    let loss = y.add(y).unwrap().add(x).unwrap().sum();
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[5.0]);
}

#[test]
fn vars_from_other_tapes_rejected() {
    let a = Tape::new();
    let b = Tape::new();
    let x = a.param(Tensor::zeros(&[2]));
    let y = b.param(Tensor::zeros(&[2]));
    assert_eq!(x.add(y).unwrap_err(), TensorError::ForeignVar);
    assert_eq!(a.backward(y.sum()), Err(TensorError::ForeignVar));
}

fn conv_loss(x: &Tensor, w: &Tensor, wa: f64, wb: f64) -> (f64, Tensor) {
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let wv = tape.constant(w.clone());
    let b = tape.constant(Tensor::zeros(&[w.shape()[0]]));
    let y = conv2d(xv, wv, b, 1, 1).unwrap();
    let l1 = y.leaky_relu_default().mean();
    let l2 = y.mul(y).unwrap().sum();
    let loss = l1.scalar_mul(wa).add(l2.scalar_mul(wb)).unwrap();
    tape.backward(loss).unwrap();
    (loss.value().item(), xv.grad().unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear_in_the_loss(
        xs in prop::collection::vec(-1.0f64..1.0, 2 * 4 * 4),
        ws in prop::collection::vec(-1.0f64..1.0, 3 * 2 * 9),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let x = Tensor::new(&[2, 4, 4], xs).unwrap();
        let w = Tensor::new(&[3, 2, 3, 3], ws).unwrap();
        let (_, g1) = conv_loss(&x, &w, 1.0, 0.0);
        let (_, g2) = conv_loss(&x, &w, 0.0, 1.0);
        let (_, g) = conv_loss(&x, &w, a, b);
        for i in 0..g.numel() {
            let expect = a * g1.data()[i] + b * g2.data()[i];
            prop_assert!((g.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic(
        xs in prop::collection::vec(-1.0f64..1.0, 2 * 4 * 4),
        ws in prop::collection::vec(-1.0f64..1.0, 3 * 2 * 9),
    ) {
        let x = Tensor::new(&[2, 4, 4], xs).unwrap();
        let w = Tensor::new(&[3, 2, 3, 3], ws).unwrap();
        let (l1, g1) = conv_loss(&x, &w, 0.7, 0.3);
        let (l2, g2) = conv_loss(&x, &w, 0.7, 0.3);
        prop_assert_eq!(l1.to_bits(), l2.to_bits());
        prop_assert_eq!(g1, g2);
    }

    #[test]
    fn outputs_stay_finite(xs in prop::collection::vec(-1.0f64..1.0, 24)) {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(&[2, 3, 4], xs).unwrap());
        let y = x.scalar_mul(50.0).softmax(1).unwrap().leaky_relu_default().abs();
        prop_assert!(y.value().is_finite());
        tape.backward(y.sum()).unwrap();
        prop_assert!(x.grad().unwrap().is_finite());
    }
}

#[test]
fn zero_offset_deform_equals_conv_bit_exactly() {
    let tape = Tape::new();
    for (stride, pad, h, w) in [(1, 1, 7, 9), (2, 1, 8, 10), (1, 0, 5, 5)] {
        let x = tape.constant(Tensor::from_fn(&[3, h, w], |i| ((i * 7919) % 101) as f64 / 37.0 - 1.3));
        let wt = tape.constant(Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 31) % 17) as f64 / 9.0 - 0.9));
        let b = tape.constant(Tensor::from_fn(&[4], |i| i as f64 * 0.1));
        let plain = conv2d(x, wt, b, stride, pad).unwrap();
        let s = plain.shape();
        let off = tape.constant(Tensor::zeros(&[18, s[1], s[2]]));
        let deformed = deform_conv2d(x, wt, b, off, stride, pad).unwrap();
        assert_eq!(*plain.value(), *deformed.value());
    }
}

#[test]
fn unit_column_offset_matches_shifted_conv_on_interior() {
    // Δ = (0, 1) everywhere samples x(p0 + p_n + (0,1)), i.e. conv of the
    // input shifted one column left.
    let (h, w) = (6, 8);
    let x = Tensor::from_fn(&[2, h, w], |i| ((i * 53) % 29) as f64 / 10.0 - 1.0);
    let mut shifted = Tensor::zeros(&[2, h, w]);
    for c in 0..2 {
        for i in 0..h {
            for j in 0..w - 1 {
                shifted.set(&[c, i, j], x.get(&[c, i, j + 1]));
            }
        }
    }
    let tape = Tape::new();
    let wt = tape.constant(Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 13) % 7) as f64 / 3.0 - 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let mut off = Tensor::zeros(&[18, h, w]);
    for n in 0..9 {
        for q in 0..h * w {
            off.data_mut()[(2 * n + 1) * h * w + q] = 1.0;
        }
    }
    let deformed = deform_conv2d(tape.constant(x), wt, b, tape.constant(off), 1, 1).unwrap();
    let oracle = conv2d(tape.constant(shifted), wt, b, 1, 1).unwrap();
    for c in 0..3 {
        for i in 1..h - 1 {
            for j in 1..w - 2 {
                let (a, e) = (deformed.value().get(&[c, i, j]), oracle.value().get(&[c, i, j]));
                assert!((a - e).abs() < 1e-12, "({c},{i},{j}): {a} vs {e}");
            }
        }
    }
}

#[test]
fn isa_zero_offsets_equals_per_slice_conv() {
    let (d, h, w) = (4, 5, 6);
    let cost = Tensor::from_fn(&[d, h, w], |i| ((i * 97) % 41) as f64 / 13.0 - 1.5);
    let kernel = Tensor::from_fn(&[9], |i| (i as f64 - 4.0) / 3.0);
    let tape = Tape::new();
    let agg = isa_aggregate(
        tape.constant(cost.clone()),
        tape.constant(kernel.clone()),
        tape.constant(Tensor::zeros(&[18, h, w])),
    )
    .unwrap();
    let wt = tape.constant(kernel.reshape(&[1, 1, 3, 3]).unwrap());
    let b = tape.constant(Tensor::zeros(&[1]));
    for s in 0..d {
        let slice = Tensor::new(&[1, h, w], cost.data()[s * h * w..(s + 1) * h * w].to_vec()).unwrap();
        let conv = conv2d(tape.constant(slice), wt, b, 1, 1).unwrap();
        assert_eq!(conv.value().data(), &agg.value().data()[s * h * w..(s + 1) * h * w]);
    }
}
