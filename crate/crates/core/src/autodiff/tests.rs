use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let n = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central-difference oracle. Re-evaluates `f` from scratch for every
/// perturbed coordinate and compares with the reverse-mode gradient.
fn gradcheck<F>(inputs: &[Array], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Array]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<_> = vals.iter().map(|v| g.input(v.clone()).unwrap()).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|v| g.input(v.clone()).unwrap()).collect();
    let out = f(&mut g, &vars).unwrap();
    g.backward(out).unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[k])
            .cloned()
            .unwrap_or_else(|| Array::zeros(input.shape()));
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn softmax_symmetric_pair() {
    let mut g = Graph::new();
    let x = g.constant(Array::zeros(&[2])).unwrap();
    let y = g.softmax_last_dim(x, None).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn layer_norm_of_constant_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(Array::full(&[2, 5], 3.7)).unwrap();
    let y = g.layer_norm(x, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let i = g.constant(Array::identity(4)).unwrap();
    let xv = random(&[4, 3], &mut rng);
    let x = g.constant(xv.clone()).unwrap();
    let y = g.matmul(i, x).unwrap();
    assert_eq!(g.value(y), &xv);
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::new();
    let a = g.constant(Array::zeros(&[2, 3])).unwrap();
    let b = g.constant(Array::zeros(&[2, 3])).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    assert!(err.to_string().starts_with("matmul"), "{err}");
    let c = g.constant(Array::zeros(&[4])).unwrap();
    assert!(g.add(a, c).unwrap_err().to_string().starts_with("add"));
}

#[test]
fn quadratic_gradient() {
    let mut g = Graph::new();
    let p = g.input(Array::from_vec(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
    let sq = g.square(p).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(p).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn mean_gradient() {
    let mut g = Graph::new();
    let x = g.input(Array::from_vec(&[4], vec![1.0, -3.0, 2.0, 8.0]).unwrap()).unwrap();
    let loss = g.mean(x).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.25; 4]);
}

#[test]
fn backward_twice_needs_zero_grads() {
    let mut g = Graph::new();
    let x = g.input(Array::from_vec(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
    let loss = g.sum(x).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.backward(loss), Err(AutodiffError::BackwardTwice));
    g.zero_grads();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let x = g.input(Array::zeros(&[3])).unwrap();
    assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarLoss(_))));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::new();
    let x = g.input(Array::from_vec(&[1], vec![-1.0]).unwrap()).unwrap();
    assert_eq!(g.sqrt(x), Err(AutodiffError::NonFinite { op: "sqrt" }));
    assert!(g.constant(Array::from_vec(&[1], vec![f64::NAN]).unwrap()).is_err());
}

#[test]
fn masked_entries_get_exactly_zero_weight() {
    let mut g = Graph::new();
    let x = g.constant(Array::from_vec(&[2, 3], vec![5.0, -2.0, 40.0, 1.0, 2.0, 3.0]).unwrap()).unwrap();
    let mask = Array::from_vec(&[2, 3], vec![0.0, 0.0, MASK_NEG, MASK_NEG, MASK_NEG, MASK_NEG]).unwrap();
    let y = g.softmax_last_dim(x, Some(&mask)).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[2], 0.0);
    assert!((v[0] + v[1] - 1.0).abs() < 1e-15);
    // fully masked row degenerates to a softmax of the unmasked logits' shifts
    assert!((v[3..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn elementwise_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let bias = random(&[4], &mut rng);
    let worst = gradcheck(&[a, b, bias], |g, v| {
        let s = g.sub(v[0], v[1])?;
        let m = g.mul(s, v[0])?;
        let m = g.mul(m, v[2])?;
        let a = g.add(m, v[2])?;
        let ge = g.gelu(a)?;
        let sq = g.square(ge)?;
        let sc = g.scale(sq, 0.7)?;
        let t = g.sum(sc)?;
        let one = g.constant(Array::scalar(1.0))?;
        let shifted = g.add(t, one)?;
        g.sqrt(shifted)
    });
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn structural_ops_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random(&[4, 6], &mut rng);
    let table = random(&[5, 3], &mut rng);
    let w = random(&[3, 9], &mut rng);
    let worst = gradcheck(&[a, table, w], |g, v| {
        let parts = g.split_last_dim(v[0], 2)?;
        let e = g.embedding_lookup(v[1], &[4, 0, 0, 2])?;
        let joined = g.concat_last_dim(&[parts[1], e, parts[0]])?;
        let tw = g.transpose(v[2])?;
        let wt = g.transpose(tw)?;
        let prod = g.matmul_bt(joined, wt)?;
        let sm = g.softmax_last_dim(prod, None)?;
        let ln = g.layer_norm(sm, 1e-5)?;
        let sq = g.square(ln)?;
        let s = g.mul(sq, parts[0])?;
        g.sum(s)
    });
    assert!(worst < 1e-4, "worst relative error {worst}");
}

/// Two pre-norm self-attention blocks with a mask, written directly against
/// the graph API.
fn attention_block(g: &mut Graph, v: &[Var], mask: &Array, heads: usize) -> Result<Var> {
    let mut x = v[0];
    for layer in 0..2 {
        let w = &v[1 + layer * 4..1 + layer * 4 + 4];
        let h = g.layer_norm(x, 1e-5)?;
        let q = g.matmul(h, w[0])?;
        let k = g.matmul(h, w[1])?;
        let val = g.matmul(h, w[2])?;
        let qs = g.split_last_dim(q, heads)?;
        let ks = g.split_last_dim(k, heads)?;
        let vs = g.split_last_dim(val, heads)?;
        let mut outs = Vec::new();
        for i in 0..heads {
            let s = g.matmul_bt(qs[i], ks[i])?;
            let s = g.scale(s, 0.5)?;
            let p = g.softmax_last_dim(s, Some(mask))?;
            outs.push(g.matmul(p, vs[i])?);
        }
        let cat = g.concat_last_dim(&outs)?;
        let o = g.matmul(cat, w[3])?;
        x = g.add(x, o)?;
    }
    let sq = g.square(x)?;
    g.mean(sq)
}

#[test]
fn attention_block_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dim = 8;
    let tokens = 5;
    let mut inputs = vec![random(&[tokens, dim], &mut rng)];
    for _ in 0..8 {
        inputs.push(random(&[dim, dim], &mut rng));
    }
    let mut mask = Array::zeros(&[tokens, tokens]);
    for i in 0..tokens {
        for j in 0..tokens {
            if (i < 2) != (j < 2) {
                mask.data_mut()[i * tokens + j] = MASK_NEG;
            }
        }
    }
    let worst = gradcheck(&inputs, |g, v| attention_block(g, v, &mask, 2));
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn rank3_matmul_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let worst = gradcheck(&[a, b], |g, v| {
        let p = g.matmul(v[0], v[1])?;
        let s = g.square(p)?;
        g.sum(s)
    });
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn adam_first_step_is_lr_sign() {
    let mut store = ParamStore::new(0);
    store.insert("w", Array::from_vec(&[2], vec![1.0, 1.0]).unwrap()).unwrap();
    *store.grad_mut("w").unwrap() = Array::from_vec(&[2], vec![0.3, -5.0]).unwrap();
    let cfg = AdamConfig::default();
    adam_step(&mut store, &cfg).unwrap();
    let w = store.value("w").unwrap().data();
    assert!((w[0] - (1.0 - cfg.lr)).abs() < 1e-9);
    assert!((w[1] - (1.0 + cfg.lr)).abs() < 1e-9);
}

#[test]
fn adam_zero_grad_leaves_params() {
    let mut store = ParamStore::new(0);
    store.insert("w", Array::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap()).unwrap();
    adam_step(&mut store, &AdamConfig::default()).unwrap();
    assert_eq!(store.value("w").unwrap().data(), &[1.0, -2.0, 3.0]);
}

#[test]
fn adam_rejects_non_finite_grad() {
    let mut store = ParamStore::new(0);
    store.insert("a.ok", Array::zeros(&[1])).unwrap();
    store.insert("b.bad", Array::zeros(&[1])).unwrap();
    *store.grad_mut("b.bad").unwrap() = Array::from_vec(&[1], vec![f64::INFINITY]).unwrap();
    let err = adam_step(&mut store, &AdamConfig::default()).unwrap_err();
    assert_eq!(err, AutodiffError::NonFiniteGrad { name: "b.bad".into() });
    assert_eq!(store.steps(), 0);
}

fn train_tiny(seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(seed);
    store.insert_normal("w", &[3, 2], 0.5, &mut rng).unwrap();
    store.insert_normal("b", &[2], 0.5, &mut rng).unwrap();
    let x = random(&[4, 3], &mut rng);
    for _ in 0..10 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let w = g.param(&store, "w").unwrap();
        let b = g.param(&store, "b").unwrap();
        let y = g.linear(xv, w, b).unwrap();
        let y = g.gelu(y).unwrap();
        let s = g.square(y).unwrap();
        let loss = g.mean(s).unwrap();
        g.backward(loss).unwrap();
        store.zero_grads();
        store.accumulate_grads(&g);
        adam_step(&mut store, &AdamConfig::default()).unwrap();
    }
    store
}

#[test]
fn adam_runs_are_bitwise_reproducible() {
    let a = train_tiny(3);
    let b = train_tiny(3);
    for ((na, pa), (nb, pb)) in a.iter().zip(b.iter()) {
        assert_eq!(na, nb);
        let ba: Vec<u64> = pa.value.data().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u64> = pb.value.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ba, bb);
    }
    assert_ne!(a.value("w").unwrap(), train_tiny(4).value("w").unwrap());
}

#[test]
fn param_store_names_sorted_and_unique() {
    let mut s = ParamStore::new(0);
    s.insert("z", Array::zeros(&[1])).unwrap();
    s.insert("a", Array::zeros(&[1])).unwrap();
    assert_eq!(s.names().collect::<Vec<_>>(), vec!["a", "z"]);
    assert_eq!(s.insert("a", Array::zeros(&[1])), Err(AutodiffError::DuplicateParam("a".into())));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Random compositions of the primitive set, dims up to 16.
    #[test]
    fn random_composition_gradcheck(seed in 0u64..10_000, rows in 1usize..6, dim in 2usize..16, pick in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = dim - dim % 2;
        let x = random(&[rows, dim], &mut rng);
        let w = random(&[dim, dim], &mut rng);
        let b = random(&[dim], &mut rng);
        let worst = gradcheck(&[x, w, b], |g, v| {
            let h = g.linear(v[0], v[1], v[2])?;
            let h = match pick {
                0 => g.gelu(h)?,
                1 => g.layer_norm(h, 1e-5)?,
                2 => g.softmax_last_dim(h, None)?,
                _ => {
                    let p = g.split_last_dim(h, 2)?;
                    let m = g.mul(p[0], p[1])?;
                    g.concat_last_dim(&[m, p[1]])?
                }
            };
            let h = g.mul(h, v[2])?;
            let s = g.square(h)?;
            g.mean(s)
        });
        prop_assert!(worst < 1e-4, "worst relative error {}", worst);
    }

    #[test]
    fn masked_softmax_zero_weight(seed in 0u64..10_000, n in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[n], &mut rng);
        let keep = rng.random_range(0..n);
        let mask = Array::from_vec(&[n], (0..n).map(|i| if i == keep || rng.random_bool(0.5) { 0.0 } else { MASK_NEG }).collect()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let y = g.softmax_last_dim(xv, Some(&mask)).unwrap();
        for (w, m) in g.value(y).data().iter().zip(mask.data()) {
            if *m != 0.0 {
                prop_assert_eq!(*w, 0.0);
            }
        }
    }
}
