//! Analytic gradients vs a central-finite-difference oracle, op by op and
//! through the full model loss.

use moelab::model::{combined_loss, ModelConfig, MoeModel};
use moelab::numerics::finite_diff::{central_diff_grad, max_rel_err};
use moelab::numerics::{Precision, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OP_TOL: f64 = 1e-7;
const STEP: f64 = 1e-5;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Check d(scalar build(x))/dx against central differences.
fn check_op(
    name: &str,
    shape: &[usize],
    seed: u64,
    tol: f64,
    build: impl for<'t> Fn(Var<'t>) -> Var<'t>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let x0 = random_vec(&mut rng, n);

    let eval = |data: &[f64]| -> f64 {
        let tape = Tape::new(Precision::F64);
        let x = tape.leaf(
            Tensor::new(shape.to_vec(), data.to_vec()).unwrap(),
            false,
        );
        build(x).value().item()
    };
    let mut f = |data: &[f64]| eval(data);
    let numeric = central_diff_grad(&mut f, &x0, STEP);

    let tape = Tape::new(Precision::F64);
    let x = tape.leaf(Tensor::new(shape.to_vec(), x0.clone()).unwrap(), true);
    let y = build(x);
    tape.backward(y).unwrap();
    let analytic = x.grad().expect("grad flows to leaf");
    let err = max_rel_err(analytic.data(), &numeric);
    assert!(err < tol, "{name}: max rel err {err:.3e}");
}

/// Weighted sum so the projection to a scalar has non-uniform weights;
/// a plain sum can hide transposition mistakes.
fn pin<'t>(v: Var<'t>) -> Var<'t> {
    let n: usize = v.tape().shape_of(v).iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * i as f64).collect();
    let shape = v.tape().shape_of(v);
    let wvar = v.tape().constant(Tensor::new(shape, w).unwrap());
    v.mul(wvar).unwrap().sum_all()
}

#[test]
fn matmul_grads() {
    check_op("matmul", &[2, 3], 1, OP_TOL, |x| {
        let b = x
            .tape()
            .constant(Tensor::new(vec![3, 4], (0..12).map(|i| 0.1 * i as f64 - 0.5).collect()).unwrap());
        pin(x.matmul(b).unwrap())
    });
    // Gradient w.r.t. the right operand too.
    check_op("matmul_rhs", &[3, 4], 2, OP_TOL, |x| {
        let a = x
            .tape()
            .constant(Tensor::new(vec![2, 3], (0..6).map(|i| 0.2 * i as f64 - 0.4).collect()).unwrap());
        pin(a.matmul(x).unwrap())
    });
    check_op("matmul_nt", &[2, 3], 3, OP_TOL, |x| {
        let b = x
            .tape()
            .constant(Tensor::new(vec![4, 3], (0..12).map(|i| 0.1 * i as f64 - 0.6).collect()).unwrap());
        pin(x.matmul_nt(b).unwrap())
    });
    check_op("matmul_nt_rhs", &[4, 3], 4, OP_TOL, |x| {
        let a = x
            .tape()
            .constant(Tensor::new(vec![2, 3], (0..6).map(|i| 0.3 * i as f64 - 0.7).collect()).unwrap());
        pin(a.matmul_nt(x).unwrap())
    });
}

#[test]
fn elementwise_grads() {
    check_op("add", &[2, 3], 5, OP_TOL, |x| pin(x.add(x.scale(2.0)).unwrap()));
    check_op("sub", &[2, 3], 6, OP_TOL, |x| pin(x.sub(x.silu()).unwrap()));
    check_op("mul", &[2, 3], 7, OP_TOL, |x| pin(x.mul(x).unwrap()));
    check_op("scale", &[2, 3], 8, OP_TOL, |x| pin(x.scale(-1.7)));
    check_op("silu", &[2, 3], 9, OP_TOL, |x| pin(x.silu()));
}

#[test]
fn normalization_grads() {
    check_op("softmax_rows", &[3, 4], 10, OP_TOL, |x| {
        pin(x.softmax_rows().unwrap())
    });
    check_op("rmsnorm_x", &[3, 4], 11, OP_TOL, |x| {
        let gain = x
            .tape()
            .constant(Tensor::new(vec![4], vec![1.1, 0.9, 1.3, 0.7]).unwrap());
        pin(x.rmsnorm(gain, 1e-6).unwrap())
    });
    check_op("rmsnorm_gain", &[4], 12, OP_TOL, |g| {
        let x = g.tape().constant(
            Tensor::new(vec![3, 4], (0..12).map(|i| 0.25 * i as f64 - 1.0).collect()).unwrap(),
        );
        pin(x.rmsnorm(g, 1e-6).unwrap())
    });
    check_op("logsumexp_rows", &[3, 4], 13, OP_TOL, |x| {
        pin(x.logsumexp_rows().unwrap())
    });
}

#[test]
fn loss_and_reduction_grads() {
    check_op("cross_entropy_masked", &[3, 5], 14, OP_TOL, |x| {
        x.cross_entropy_masked(&[1, 4, 0], &[true, false, true])
            .unwrap()
    });
    check_op("sum_all", &[3, 4], 15, OP_TOL, |x| x.sum_all());
    check_op("mean_all", &[3, 4], 16, OP_TOL, |x| x.mean_all());
    check_op("mean_axis0", &[3, 4], 17, OP_TOL, |x| {
        pin(x.mean_axis0().unwrap())
    });
}

#[test]
fn routing_primitive_grads() {
    check_op("gather_rows", &[4, 3], 18, OP_TOL, |x| {
        pin(x.gather_rows(&[2, 0, 2]).unwrap())
    });
    check_op("scatter_add_rows", &[3, 2], 19, OP_TOL, |x| {
        pin(x.scatter_add_rows(&[1, 1, 3], 4).unwrap())
    });
    check_op("gather_elems", &[3, 4], 20, OP_TOL, |x| {
        pin(x.gather_elems(&[0, 5, 11, 5]).unwrap())
    });
    check_op("row_scale", &[3, 4], 21, OP_TOL, |x| {
        let w = x
            .tape()
            .constant(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        pin(x.row_scale(w).unwrap())
    });
    check_op("row_scale_weights", &[3], 22, OP_TOL, |w| {
        let x = w.tape().constant(
            Tensor::new(vec![3, 4], (0..12).map(|i| 0.2 * i as f64 - 1.1).collect()).unwrap(),
        );
        pin(x.row_scale(w).unwrap())
    });
}

#[test]
fn shape_op_grads() {
    check_op("reshape", &[2, 6], 23, OP_TOL, |x| {
        pin(x.reshape(vec![3, 4]).unwrap())
    });
    check_op("rope", &[4, 8], 24, OP_TOL, |x| {
        pin(x.rope(4, 10000.0).unwrap())
    });
    check_op("slice_cols", &[3, 6], 25, OP_TOL, |x| {
        pin(x.slice_cols(2, 3).unwrap())
    });
    check_op("concat_cols", &[3, 4], 26, OP_TOL, |x| {
        let a = x.slice_cols(0, 2).unwrap();
        let b = x.slice_cols(2, 2).unwrap();
        pin(x.tape().concat_cols(&[b, a]).unwrap())
    });
}

// ---------------------------------------------------------------------------
// Whole-model check: d(CE + α·LB + β·RZ)/dθ for every parameter.

fn gradcheck_config(n_experts: usize, top_k: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        n_experts,
        top_k,
        granularity: 1,
        effective_top_k: None,
        ffn_expansion: 2,
        vocab_size: 16,
        max_seq_len: 32,
        rope_base: 10000.0,
        head_init_std: 0.02,
        precision: Precision::F64,
    }
}

fn flatten(model: &MoeModel) -> Vec<f64> {
    model
        .params
        .iter()
        .flat_map(|(_, t)| t.data().iter().copied())
        .collect()
}

fn unflatten(model: &mut MoeModel, flat: &[f64]) {
    let mut at = 0;
    for (_, t) in model.params.iter_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
}

/// Loss and the per-layer top-k selections for a parameter vector.
fn model_loss(
    config: &ModelConfig,
    seed: u64,
    flat: &[f64],
    inputs: &[u32],
    targets: &[usize],
) -> (f64, Vec<Vec<Vec<usize>>>) {
    let mut model = MoeModel::init(config.clone(), seed).unwrap();
    unflatten(&mut model, flat);
    let tape = Tape::new(Precision::F64);
    let out = model.forward(&tape, inputs, false).unwrap();
    let mask = vec![true; targets.len()];
    let (breakdown, _) = combined_loss(&out, targets, &mask, 1e-2, 1e-3).unwrap();
    let sets = out
        .decisions
        .iter()
        .map(|d| d.selected.clone())
        .collect();
    (breakdown.total, sets)
}

fn full_model_gradcheck(config: &ModelConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBEEF);
    let seq = 5;
    let inputs: Vec<u32> = (0..seq).map(|_| rng.gen_range(0..16)).collect();
    let targets: Vec<usize> = (0..seq).map(|_| rng.gen_range(0..16)).collect();

    let model = MoeModel::init(config.clone(), seed).unwrap();
    let theta0 = flatten(&model);
    let (_, base_sets) = model_loss(config, seed, &theta0, &inputs, &targets);

    // Analytic gradient.
    let tape = Tape::new(Precision::F64);
    let mut model = MoeModel::init(config.clone(), seed).unwrap();
    unflatten(&mut model, &theta0);
    let out = model.forward(&tape, &inputs, true).unwrap();
    let mask = vec![true; targets.len()];
    let (_, total) = combined_loss(&out, &targets, &mask, 1e-2, 1e-3).unwrap();
    tape.backward(total).unwrap();
    let mut analytic = Vec::with_capacity(theta0.len());
    for (_, var) in &out.param_vars {
        match var.grad() {
            Some(g) => analytic.extend(g.data().iter().copied()),
            // An expert no token routed to: zero gradient, no buffer.
            None => analytic.extend(std::iter::repeat(0.0).take(var.value().len())),
        }
    }
    assert_eq!(analytic.len(), theta0.len());

    // Numeric gradient, skipping coordinates whose perturbation flips any
    // token's top-k selection (the loss is piecewise there by design).
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut worst = 0.0f64;
    let fd_step = 1e-5;
    for i in 0..theta0.len() {
        let mut plus = theta0.clone();
        plus[i] += fd_step;
        let mut minus = theta0.clone();
        minus[i] -= fd_step;
        let (lp, sp) = model_loss(config, seed, &plus, &inputs, &targets);
        let (lm, sm) = model_loss(config, seed, &minus, &inputs, &targets);
        if sp != base_sets || sm != base_sets {
            skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * fd_step);
        // Floor the denominator at 1e-3: below that, 1e-5 relative means
        // an absolute 1e-8, well past what central differences of an O(1)
        // loss can resolve, so near-zero components are held to 1e-8
        // absolute instead.
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-3);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
        checked += 1;
    }
    assert!(
        worst <= 1e-5,
        "seed {seed}: max rel err {worst:.3e} over {checked} coords"
    );
    // Selection flips should be rare at this step size.
    assert!(
        skipped * 100 <= theta0.len(),
        "seed {seed}: {skipped} of {} coords flipped the routing set",
        theta0.len()
    );
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    for seed in [11, 12, 13, 14, 15] {
        full_model_gradcheck(&gradcheck_config(4, 2), seed);
    }
}

#[test]
fn full_model_gradient_small_expert_count() {
    full_model_gradcheck(&gradcheck_config(2, 1), 21);
}
