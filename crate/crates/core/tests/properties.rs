use proptest::prelude::*;

use vitpos::gradcheck::grad_check;
use vitpos::mae::sample_mask;
use vitpos::position::{sample_pairs, RelativeIndexTable};
use vitpos::rng::stream;
use vitpos::params::Bindings;
use vitpos::{Graph, ParamSet, Result, Tensor, Var};

fn tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    use rand::Rng;
    let mut r = stream(seed, "prop", &[]);
    Tensor::from_fn(shape, |_| r.gen_range(-scale..scale))
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Matmul,
    MatmulNt,
    Mul,
    AddBias,
    Gelu,
    Softmax,
    LayerNorm,
    Concat,
    Slice,
    Gather,
    CrossEntropy,
}

const OPS: [Op; 11] = [
    Op::Matmul,
    Op::MatmulNt,
    Op::Mul,
    Op::AddBias,
    Op::Gelu,
    Op::Softmax,
    Op::LayerNorm,
    Op::Concat,
    Op::Slice,
    Op::Gather,
    Op::CrossEntropy,
];

/// Weighted sum of one op's output so every output entry reaches the loss.
fn build(g: &mut Graph, p: &ParamSet, op: Op, r: usize, c: usize) -> Result<(Var, Bindings)> {
    let b = p.bind(g);
    let x = b.var("x")?;
    let y = b.var("y")?;
    let out = match op {
        Op::Matmul => g.matmul(x, b.var("w")?)?,
        Op::MatmulNt => g.matmul_nt(x, y)?,
        Op::Mul => g.mul(x, y)?,
        Op::AddBias => g.add_bias(x, b.var("bias")?)?,
        Op::Gelu => g.gelu(x)?,
        Op::Softmax => g.softmax(x, 1)?,
        Op::LayerNorm => g.layernorm(x, b.var("gamma")?, b.var("bias")?, 1e-6)?,
        Op::Concat => g.concat(&[x, y], 0)?,
        Op::Slice => g.slice(x, 1, c / 2, c - c / 2)?,
        Op::Gather => g.gather_rows(x, &[r - 1, 0, r - 1])?,
        Op::CrossEntropy => {
            let labels: Vec<usize> = (0..r).map(|i| (i * 7) % c).collect();
            let l = g.cross_entropy(x, &labels)?;
            return Ok((l, b));
        }
    };
    let shape = g.shape(out).to_vec();
    let weights = g.constant(tensor(&shape, 99, 1.0));
    let prod = g.mul(out, weights)?;
    Ok((g.sum(prod)?, b))
}

fn op_params(r: usize, c: usize, seed: u64) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("x", tensor(&[r, c], seed, 1.5));
    p.insert("y", tensor(&[r, c], seed + 1, 1.5));
    p.insert("w", tensor(&[c, 3], seed + 2, 1.0));
    p.insert("bias", tensor(&[c], seed + 3, 1.0));
    p.insert("gamma", tensor(&[c], seed + 4, 1.0));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn op_gradients_match_finite_differences(op in 0usize..OPS.len(), r in 1usize..5, c in 2usize..6, seed in 0u64..1000) {
        let op = OPS[op];
        let params = op_params(r, c, seed);
        let value = |p: &ParamSet| {
            let mut g = Graph::new();
            let (l, _) = build(&mut g, p, op, r, c)?;
            Ok(g.value(l).item())
        };
        let value_and_grad = |p: &ParamSet| {
            let mut g = Graph::new();
            let (l, b) = build(&mut g, p, op, r, c)?;
            let loss = g.value(l).item();
            g.backward(l)?;
            Ok((loss, b.grads(&g)))
        };
        let report = grad_check(&(value, value_and_grad), &params, 1e-5, 200, &mut stream(seed, "gc", &[])).unwrap();
        prop_assert!(report.max_rel_error < 1e-5, "{:?}: {:?}", op, report.worst);
    }

    #[test]
    fn softmax_rows_sum_to_one(r in 1usize..6, c in 1usize..9, seed in 0u64..1000, scale in 0.1f64..200.0) {
        let mut g = Graph::new();
        let x = g.constant(tensor(&[r, c], seed, scale));
        let s = g.softmax(x, 1).unwrap();
        let v = g.value(s);
        for i in 0..r {
            prop_assert!((v.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(v.row(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn slices_of_concat_recover_parts(r1 in 1usize..5, r2 in 1usize..5, c in 1usize..6, seed in 0u64..1000) {
        let a = tensor(&[r1, c], seed, 1.0);
        let b = tensor(&[r2, c], seed + 1, 1.0);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let cat = g.concat(&[av, bv], 0).unwrap();
        let s1 = g.slice(cat, 0, 0, r1).unwrap();
        let s2 = g.slice(cat, 0, r1, r2).unwrap();
        prop_assert_eq!(g.value(s1), &a);
        prop_assert_eq!(g.value(s2), &b);
    }

    #[test]
    fn relative_index_is_a_bijection(rows in 1usize..9, cols in 1usize..9) {
        let t = RelativeIndexTable::new(rows, cols);
        prop_assert_eq!(t.num_classes(), (2 * rows - 1) * (2 * cols - 1));
        let mut seen = vec![false; t.num_classes()];
        for dr in -(rows as isize - 1)..=(rows as isize - 1) {
            for dc in -(cols as isize - 1)..=(cols as isize - 1) {
                let k = t.index(dr, dc).unwrap();
                prop_assert!(!seen[k]);
                seen[k] = true;
                prop_assert_eq!(t.offset(k).unwrap(), (dr, dc));
            }
        }
        prop_assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn mask_plans_partition_patches(n in 2usize..200, ratio in 0.0f64..0.95, seed in 0u64..10_000) {
        let expected_masked = (ratio * n as f64).round() as usize;
        prop_assume!(expected_masked < n);
        let plan = sample_mask(n, ratio, seed).unwrap();
        prop_assert_eq!(plan.masked.len(), expected_masked);
        prop_assert_eq!(plan.visible.len(), n - expected_masked);
        let mut all: Vec<usize> = plan.masked.iter().chain(&plan.visible).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(plan.visible.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(plan.masked.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(sample_mask(n, ratio, seed).unwrap(), plan);
    }

    #[test]
    fn pair_sampling_is_deterministic_and_in_range(n in 1usize..30, budget in proptest::option::of(1usize..50), seed in 0u64..1000) {
        let a = sample_pairs(n, budget, &mut stream(seed, "pairs", &[]));
        let b = sample_pairs(n, budget, &mut stream(seed, "pairs", &[]));
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), budget.map_or(n * n, |k| k.min(n * n)));
        prop_assert!(a.iter().all(|&(i, j)| i < n && j < n));
    }

    #[test]
    fn forward_is_deterministic(op in 0usize..OPS.len(), r in 1usize..5, c in 2usize..6, seed in 0u64..1000) {
        let params = op_params(r, c, seed);
        let run = || {
            let mut g = Graph::new();
            let (l, _) = build(&mut g, &params, OPS[op], r, c).unwrap();
            g.value(l).item().to_bits()
        };
        prop_assert_eq!(run(), run());
    }
}
