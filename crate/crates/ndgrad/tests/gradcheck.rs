use ndgrad::{concat, finite_diff_check, primitive_apply, PrimKind, Tape, Tensor, Tensor32};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

fn random_positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(0.2..2.0)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

fn random_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.gen_range(1..=3);
    (0..rank).map(|_| rng.gen_range(1..=4)).collect()
}

/// Every primitive's analytic gradient matches central finite differences
/// within 1e-4 relative error over 100 random shape/value draws.
#[test]
fn primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    while checked < 100 {
        let kind_pick = checked % 11;
        let shape = random_shape(&mut rng);
        let (kind, params): (PrimKind, Vec<Tensor>) = match kind_pick {
            0 => {
                // broadcast pair: second operand keeps a trailing suffix
                let cut = rng.gen_range(0..shape.len());
                let b_shape: Vec<usize> = shape[cut..].to_vec();
                (
                    PrimKind::Add,
                    vec![random_tensor(&mut rng, &shape), random_tensor(&mut rng, &b_shape)],
                )
            }
            1 => {
                let cut = rng.gen_range(0..shape.len());
                let b_shape: Vec<usize> = shape[cut..].to_vec();
                (
                    PrimKind::MulBroadcast,
                    vec![random_tensor(&mut rng, &shape), random_tensor(&mut rng, &b_shape)],
                )
            }
            2 => {
                let (m, k, n) =
                    (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
                (
                    PrimKind::Matmul,
                    vec![random_tensor(&mut rng, &[m, k]), random_tensor(&mut rng, &[k, n])],
                )
            }
            3 => {
                let l = rng.gen_range(1..=4);
                let mut a_shape = shape.clone();
                a_shape.push(l);
                // broadcast leading axes of b down to a suffix
                let cut = rng.gen_range(0..shape.len());
                let mut b_shape: Vec<usize> = shape[cut..].to_vec();
                b_shape.push(l);
                (
                    PrimKind::ContractLastAxis,
                    vec![random_tensor(&mut rng, &a_shape), random_tensor(&mut rng, &b_shape)],
                )
            }
            4 => (PrimKind::Exp, vec![random_tensor(&mut rng, &shape)]),
            5 => (PrimKind::Log, vec![random_positive(&mut rng, &shape)]),
            6 => (PrimKind::Softplus, vec![random_tensor(&mut rng, &shape)]),
            7 => (PrimKind::Sigmoid, vec![random_tensor(&mut rng, &shape)]),
            8 => (PrimKind::Silu, vec![random_tensor(&mut rng, &shape)]),
            9 => {
                let axis = rng.gen_range(0..shape.len());
                (PrimKind::SumAxis(axis), vec![random_tensor(&mut rng, &shape)])
            }
            _ => {
                let axis = rng.gen_range(0..shape.len());
                (PrimKind::MeanAxis(axis), vec![random_tensor(&mut rng, &shape)])
            }
        };
        let kind2 = kind.clone();
        let err = finite_diff_check(
            move |ps| {
                let refs: Vec<&Tensor> = ps.iter().collect();
                primitive_apply(&kind2, &refs)?.sum_all()
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{:?} gradient error {} at case {}", kind, err, checked);
        checked += 1;
    }
}

/// contract-last-axis against a naive triple-loop oracle on a 2x3x4 case.
#[test]
fn contract_last_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random_tensor(&mut rng, &[2, 3, 4]);
    let c = random_tensor(&mut rng, &[2, 3, 4]);
    let got = a.contract_last(&c).unwrap();
    assert_eq!(got.shape(), &[2, 3]);
    for i in 0..2 {
        for j in 0..3 {
            let mut want = 0.0;
            for l in 0..4 {
                want += a.at(&[i, j, l]) * c.at(&[i, j, l]);
            }
            assert!((got.at(&[i, j]) - want).abs() < 1e-12);
        }
    }
}

/// backward over a sum of two sub-losses equals the sum of separate
/// backward passes (linearity of gradients).
#[test]
fn gradient_linearity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w0 = random_tensor(&mut rng, &[3, 3]);
    let x = random_tensor(&mut rng, &[3, 3]);

    let loss_a = |w: &Tensor| w.matmul(&x).unwrap().sum_all().unwrap();
    let loss_b = |w: &Tensor| w.mul(&x).unwrap().sigmoid().unwrap().sum_all().unwrap();

    let tape = Tape::new();
    let w = tape.param(w0.clone());
    let joint = loss_a(&w).add(&loss_b(&w)).unwrap();
    let g_joint = joint.backward().unwrap();

    let tape_a = Tape::new();
    let wa = tape_a.param(w0.clone());
    let ga = loss_a(&wa).backward().unwrap();
    let tape_b = Tape::new();
    let wb = tape_b.param(w0.clone());
    let gb = loss_b(&wb).backward().unwrap();

    let joint_grad = g_joint.wrt(&w).unwrap();
    let a_grad = ga.wrt(&wa).unwrap();
    let b_grad = gb.wrt(&wb).unwrap();
    for i in 0..joint_grad.numel() {
        let sum = a_grad.data()[i] + b_grad.data()[i];
        assert!((joint_grad.data()[i] - sum).abs() < 1e-12);
    }
}

/// reshape and slice round-trips preserve data bit-exactly.
#[test]
fn reshape_slice_roundtrip_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = random_tensor(&mut rng, &[4, 6]);
    let back = t.reshape(&[2, 12]).unwrap().reshape(&[4, 6]).unwrap();
    assert_eq!(t.data(), back.data());

    let left = t.slice(1, 0, 2).unwrap();
    let right = t.slice(1, 2, 4).unwrap();
    let joined = concat(&[&left, &right], 1).unwrap();
    assert_eq!(t.data(), joined.data());
}

/// slice/concat gradients also check out against finite differences.
#[test]
fn shape_surgery_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[3, 2]);
    let err = finite_diff_check(
        |ps| {
            let joined = concat(&[&ps[0], &ps[1]], 1)?;
            let part = joined.slice(1, 1, 4)?;
            part.reshape(&[12])?.silu()?.sum_all()
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "error {}", err);
}

/// backward errors: non-scalar loss and detached graphs.
#[test]
fn backward_contract_errors() {
    let tape = Tape::new();
    let w = tape.param(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
    let y = w.exp().unwrap();
    assert!(y.backward().is_err(), "non-scalar loss must be rejected");

    let c = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
    assert!(c.sum_all().unwrap().backward().is_err(), "detached loss must be rejected");
}

/// The scalar-generic core instantiates at f32 as well.
#[test]
fn f32_instantiation() {
    let tape: Tape<f32> = Tape::new();
    let w = tape.param(Tensor32::from_vec(vec![2], vec![2.0f32, 3.0]).unwrap());
    let x = Tensor32::from_vec(vec![2], vec![5.0f32, 7.0]).unwrap();
    let loss = w.mul(&x).unwrap().sum_all().unwrap();
    let grads = loss.backward().unwrap();
    assert_eq!(grads.wrt(&w).unwrap().data(), &[5.0f32, 7.0]);
}
